//! Command-line front end. `main` only parses arguments and maps errors to
//! exit codes; every command is an ordinary function here.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::align::Heatmap;
use crate::config::{Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::experiment::{self, RunConfig};
use crate::gradcheck::{check_model, GroupError, ModelCheck};
use crate::model::Model;
use crate::signal::{featurize, read_wav};
use crate::training::corpus::{generate_corpus, load_utterance, save_corpus};
use crate::training::trainer::audio_features;
use crate::training::{evaluate, prepare, DecodeSession, Example, STANDARD_CONDITIONS};
use crate::vocab::Vocab;

/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "avalign", version, about = "Audio-visual speech recognition with cross-modal alignment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stacked log-mel features of a 16 kHz WAV file, written as AVT1.
    Featurize {
        wav: PathBuf,
        out: PathBuf,
    },
    /// Generates a synthetic corpus on disk.
    Synth {
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, env = "AVALIGN_SEED", default_value_t = 1)]
        seed: u64,
        #[arg(long, allow_hyphen_values = true)]
        snr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a model and writes checkpoint, loss curve and report.
    Train(TrainArgs),
    /// Evaluates a checkpoint on a corpus at the standard noise conditions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, allow_hyphen_values = true)]
        snr: Option<f64>,
        #[arg(long, default_value_t = 12_345)]
        noise_seed: u64,
        /// Report destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Alignment heatmap (16-bit PGM) and raw weights (AVT1) for one utterance.
    Align {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Utterance directory as written by `synth`.
        #[arg(long)]
        utterance: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        snr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        /// Also writes a PNG next to the PGM.
        #[arg(long)]
        png: bool,
    },
    /// Finite-difference check of every parameter group of a small model.
    Gradcheck {
        /// Checks only this mode; audio and av+au otherwise.
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long, env = "AVALIGN_SEED", default_value_t = 0)]
        seed: u64,
        /// Model configuration JSON; the tiny configuration otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Relative error injected into every analytic gradient.
        #[arg(long, hide = true)]
        fault: Option<f64>,
    },
    /// Converts a 16-bit PGM heatmap to PNG.
    PgmToPng {
        pgm: PathBuf,
        png: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Generates this many synthetic utterances.
    #[arg(long, conflicts_with = "corpus")]
    pub synthetic: Option<usize>,
    /// Reads utterances from this directory.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Seed of the synthetic corpus.
    #[arg(long)]
    pub corpus_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Trains and evaluates at this single SNR in dB.
    #[arg(long, allow_hyphen_values = true)]
    pub snr: Option<f64>,
    #[arg(long, env = "AVALIGN_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration JSON; explicit flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Silences per-step progress.
    #[arg(long)]
    pub quiet: bool,
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(mode) = self.mode {
            cfg.mode = mode;
        }
        if self.snr.is_some() {
            cfg.snr_db = self.snr;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(steps) = self.steps {
            cfg.train.steps = steps;
        }
        if let Some(n) = self.corpus.synthetic {
            cfg.synthetic = Some(n);
            cfg.corpus = None;
        }
        if let Some(dir) = &self.corpus.corpus {
            cfg.corpus = Some(dir.clone());
            cfg.synthetic = None;
        }
        if let Some(seed) = self.corpus.corpus_seed {
            cfg.corpus_seed = seed;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }
}

/// Runs one command, writing human-readable output to `out`.
pub fn run(cli: &Cli, out: &mut impl Write) -> Result<()> {
    match &cli.command {
        Command::Featurize { wav, out: dest } => cmd_featurize(wav, dest, out),
        Command::Synth { n, seed, snr, out: dest } => {
            let corpus = generate_corpus(*n, *seed, *snr)?;
            save_corpus(dest, &corpus)?;
            writeln!(out, "wrote {} utterances to {}", corpus.len(), dest.display())?;
            Ok(())
        }
        Command::Train(args) => cmd_train(args, out),
        Command::Eval {
            checkpoint,
            corpus,
            snr,
            noise_seed,
            out: dest,
        } => {
            let model = Model::load(checkpoint)?;
            let run = RunConfig {
                synthetic: corpus.synthetic,
                corpus: corpus.corpus.clone(),
                corpus_seed: corpus.corpus_seed.unwrap_or(RunConfig::default().corpus_seed),
                ..RunConfig::default()
            };
            let examples = prepare(&run.load_corpus()?)?;
            let conditions = match snr {
                Some(s) => vec![Some(*s)],
                None => STANDARD_CONDITIONS.to_vec(),
            };
            let report = evaluate(&model, &examples, &conditions, *noise_seed)?;
            match dest {
                Some(path) => report.write_json(path)?,
                None => writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?,
            }
            Ok(())
        }
        Command::Align {
            checkpoint,
            utterance,
            out: dest,
            snr,
            noise_seed,
            png,
        } => cmd_align(checkpoint, utterance, dest, *snr, *noise_seed, *png, out),
        Command::Gradcheck {
            mode,
            seed,
            config,
            fault,
        } => {
            let config = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(path)?;
                    serde_json::from_str::<ModelConfig>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                }
                None => ModelConfig::tiny(),
            };
            config.validate()?;
            let modes = match mode {
                Some(m) => vec![*m],
                None => vec![Mode::Audio, Mode::AvAu],
            };
            cmd_gradcheck(&config, &modes, *seed, *fault, out)
        }
        Command::PgmToPng { pgm, png } => {
            Heatmap::read_pgm(pgm)?.write_png(png)?;
            writeln!(out, "wrote {}", png.display())?;
            Ok(())
        }
    }
}

pub fn cmd_featurize(wav: &Path, dest: &Path, out: &mut impl Write) -> Result<()> {
    let features = featurize(&read_wav(wav)?)?;
    features.vectors().save_avt1(dest)?;
    writeln!(out, "{}", features.len())?;
    Ok(())
}

pub fn cmd_train(args: &TrainArgs, out: &mut impl Write) -> Result<()> {
    let cfg = args.resolve()?;
    let quiet = args.quiet;
    let mut log = Vec::new();
    let outcome = experiment::run(&cfg, |p| {
        if !quiet {
            log.push(format!("step {:>6}  loss {:.4}", p.step, p.loss));
        }
    })?;
    for line in log {
        writeln!(out, "{line}")?;
    }
    outcome.write(&args.out, &cfg)?;
    for (condition, cer) in &outcome.report.per_snr {
        writeln!(out, "cer[{condition}] = {cer:.4}")?;
    }
    if let Some(m) = outcome.report.mean_monotonicity() {
        writeln!(out, "mean monotonicity = {m:.4}")?;
    }
    writeln!(out, "wrote {}", args.out.display())?;
    Ok(())
}

pub fn cmd_align(
    checkpoint: &Path,
    utterance: &Path,
    dest: &Path,
    snr: Option<f64>,
    noise_seed: u64,
    png: bool,
    out: &mut impl Write,
) -> Result<()> {
    let model = Model::load(checkpoint)?;
    if !model.mode.has_video() {
        return Err(Error::Mode("alignment needs an audio-visual checkpoint".into()));
    }
    let example = Example::from_utterance(&load_utterance(utterance)?)?;
    let feats = audio_features(&model, &example.audio(snr, noise_seed)?)?;
    let mut session = DecodeSession::new(&model, &feats, Some(&example.lips))?;
    let alignment = session
        .alignment()
        .cloned()
        .ok_or_else(|| Error::Mode("model produced no alignment".into()))?;
    let hypothesis = crate::training::greedy_decode(&mut session, crate::training::trainer::MAX_DECODE_LEN)?;

    let heatmap = alignment.heatmap();
    heatmap.write_pgm(dest)?;
    alignment.weights().save_avt1(dest.with_extension("avt1"))?;
    if png {
        heatmap.write_png(dest.with_extension("png"))?;
    }
    let vocab = Vocab::default();
    writeln!(out, "audio frames {}, video frames {}", alignment.audio_len(), alignment.video_len())?;
    writeln!(out, "reference  {:?}", example.transcript.text(&vocab))?;
    writeln!(out, "hypothesis {:?}", hypothesis.text(&vocab))?;
    writeln!(out, "wrote {}", dest.display())?;
    Ok(())
}

/// Prints one line per parameter group and fails with every offender.
pub fn cmd_gradcheck(
    config: &ModelConfig,
    modes: &[Mode],
    seed: u64,
    fault: Option<f64>,
    out: &mut impl Write,
) -> Result<()> {
    let mut offenders = Vec::new();
    for &mode in modes {
        let check = ModelCheck {
            config: config.clone(),
            mode,
            seed,
            fault,
            ..ModelCheck::tiny(mode)
        };
        let groups: Vec<GroupError> = check_model(&check)?;
        for g in &groups {
            let ok = g.max_rel_error < GRADCHECK_TOLERANCE;
            writeln!(
                out,
                "{:<6} {:<40} {:>5} coords  max rel err {:.3e}  {}",
                mode.to_string(),
                g.group,
                g.coordinates,
                g.max_rel_error,
                if ok { "ok" } else { "FAIL" }
            )?;
            if !ok {
                offenders.push(format!("{mode}:{}", g.group));
            }
        }
    }
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(offenders))
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
