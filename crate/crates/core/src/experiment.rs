//! End-to-end runs: corpus, training, evaluation and the files they leave.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::training::corpus::{generate_corpus, load_corpus, SyntheticUtterance};
use crate::training::{evaluate, prepare, train, EvalReport, LossCurve, LossPoint, TrainConfig, STANDARD_CONDITIONS};

/// Everything a training run depends on. Missing JSON fields take their
/// defaults, so a config file may override only part of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Single noise condition for training and evaluation. Without it the
    /// model trains on a mix of the standard conditions and is evaluated at
    /// each of them.
    pub snr_db: Option<f64>,
    /// Number of synthetic utterances to generate.
    pub synthetic: Option<usize>,
    /// Corpus directory, used when `synthetic` is unset.
    pub corpus: Option<PathBuf>,
    pub corpus_seed: u64,
    pub eval_noise_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::AvAu,
            snr_db: None,
            synthetic: None,
            corpus: None,
            corpus_seed: 1,
            eval_noise_seed: 12_345,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn train_conditions(&self) -> Vec<Option<f64>> {
        match self.snr_db {
            Some(snr) => vec![Some(snr)],
            None => self.train.noise.clone(),
        }
    }

    pub fn eval_conditions(&self) -> Vec<Option<f64>> {
        match self.snr_db {
            Some(snr) => vec![Some(snr)],
            None => STANDARD_CONDITIONS.to_vec(),
        }
    }

    pub fn load_corpus(&self) -> Result<Vec<SyntheticUtterance>> {
        match (self.synthetic, &self.corpus) {
            (Some(_), Some(_)) => Err(Error::Config("give either a synthetic corpus size or a corpus directory".into())),
            (Some(0), None) => Err(Error::Config("synthetic corpus size must be positive".into())),
            (Some(n), None) => generate_corpus(n, self.corpus_seed, None),
            (None, Some(dir)) => load_corpus(dir),
            (None, None) => Err(Error::Config("no corpus: give a synthetic size or a corpus directory".into())),
        }
    }

    /// Untrained model for this configuration, seeded by the training seed.
    pub fn init_model(&self) -> Result<Model<f32>> {
        Model::new(self.model.clone(), self.mode, self.train.seed)
    }
}

/// Trained model with its loss curve and final evaluation.
#[derive(Debug)]
pub struct RunOutcome {
    pub model: Model<f32>,
    pub curve: LossCurve,
    pub report: EvalReport,
}

/// Trains from initialization and evaluates on the training corpus.
pub fn run(cfg: &RunConfig, on_log: impl FnMut(&LossPoint)) -> Result<RunOutcome> {
    let examples = prepare(&cfg.load_corpus()?)?;
    let mut model = cfg.init_model()?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.noise = cfg.train_conditions();
    let mut curve = train(&mut model, &examples, &train_cfg, on_log)?;
    let report = evaluate(&model, &examples, &cfg.eval_conditions(), cfg.eval_noise_seed)?;
    if let Some(last) = curve.points.last_mut() {
        last.cer = Some(report.cer);
    }
    Ok(RunOutcome { model, curve, report })
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "run.json";

impl RunOutcome {
    /// Writes the checkpoint, loss curve, report and the resolved config.
    pub fn write(&self, dir: impl AsRef<Path>, cfg: &RunConfig) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.model.save(dir.join(CHECKPOINT_DIR))?;
        self.curve.write_csv(dir.join(LOSS_FILE))?;
        self.report.write_json(dir.join(REPORT_FILE))?;
        cfg.save(dir.join(CONFIG_FILE))
    }
}
