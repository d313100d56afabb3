//! Teacher-forced training and evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{SyntheticUtterance, CHAR_SECONDS, VIDEO_FPS};
use super::decode::{greedy_decode, DecodeSession};
use super::metrics::{cer, corpus_cer, monotonicity_score};
use super::optim::{Adam, OptimizerConfig};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Grads;
use crate::rng::Rng;
use crate::signal::{featurize, mix_noise, pink_noise, Waveform, SAMPLE_RATE};
use crate::tensor::Tensor;
use crate::vocab::{GraphemeSequence, EOS};

/// Longest transcript the greedy decoder may emit.
pub const MAX_DECODE_LEN: usize = 40;

/// One utterance prepared for the network.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    /// Noise-free audio, used when training mixes fresh noise.
    pub clean: Waveform,
    /// Audio as recorded in the corpus.
    pub heard: Waveform,
    /// `[M, 36, 36, 3]` lip pixels.
    pub lips: Tensor<f32>,
    /// `[M, n_au]` when the corpus carries action-unit labels.
    pub au: Option<Tensor<f32>>,
    pub transcript: GraphemeSequence,
}

impl Example {
    pub fn from_utterance(u: &SyntheticUtterance) -> Result<Self> {
        Ok(Example {
            id: u.id.clone(),
            clean: u.clean.clone(),
            heard: u.waveform.clone(),
            lips: u.frames.lip_frames()?,
            au: u.au_targets.as_ref().map(|a| a.activations().clone()),
            transcript: u.transcript.clone(),
        })
    }

    /// Audio at `snr_db` with noise drawn from `noise_seed`; the recorded
    /// audio when `snr_db` is `None`.
    pub fn audio(&self, snr_db: Option<f64>, noise_seed: u64) -> Result<Waveform> {
        match snr_db {
            None => Ok(self.heard.clone()),
            Some(snr) => {
                let noise = pink_noise(self.clean.len(), SAMPLE_RATE, &mut Rng::new(noise_seed));
                Ok(mix_noise(&self.clean, &noise, snr)?.0)
            }
        }
    }
}

/// First video frame of character `k` on the synthetic character grid.
fn frame_of_char(k: usize) -> usize {
    (k as f64 * CHAR_SECONDS * VIDEO_FPS).round() as usize
}

impl Example {
    /// Characters `first..first + len` with their audio, lip frames and AU
    /// targets. Requires the synthetic corpus's fixed character grid.
    pub fn span(&self, first: usize, len: usize) -> Result<Example> {
        let chars = self.transcript.chars();
        if len == 0 || first + len > chars.len() {
            return Err(Error::Input(format!("span {first}+{len} outside {} characters", chars.len())));
        }
        let per_char = (CHAR_SECONDS * SAMPLE_RATE as f64).round() as usize;
        let frames = self.lips.shape()[0];
        if self.clean.len() != per_char * chars.len() || self.heard.len() != self.clean.len() || frames != frame_of_char(chars.len()) {
            return Err(Error::Input(format!("utterance {} is not on the character grid", self.id)));
        }
        let cut = |w: &Waveform| Waveform::new(w.samples()[first * per_char..(first + len) * per_char].to_vec(), SAMPLE_RATE);
        let (f0, f1) = (frame_of_char(first), frame_of_char(first + len));
        let rows = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
            let stride = t.len() / t.shape()[0];
            let mut shape = t.shape().to_vec();
            shape[0] = f1 - f0;
            Tensor::new(shape, t.data()[f0 * stride..f1 * stride].to_vec())
        };
        let tokens = chars[first..first + len].iter().copied().chain([EOS]).collect();
        Ok(Example {
            id: format!("{}[{first}+{len}]", self.id),
            clean: cut(&self.clean)?,
            heard: cut(&self.heard)?,
            lips: rows(&self.lips)?,
            au: self.au.as_ref().map(rows).transpose()?,
            transcript: GraphemeSequence::from_tokens(tokens)?,
        })
    }

    /// Utterance whose audio, lip frames and transcript are those of `parts`
    /// in order. Parts must lie on the character grid, as spans do.
    pub fn concat(parts: &[Example]) -> Result<Example> {
        let first = parts.first().ok_or_else(|| Error::Input("nothing to concatenate".into()))?;
        let au_rows = first.au.as_ref().map(|a| a.shape()[1..].to_vec());
        let mut lips = Vec::new();
        let mut au = Vec::new();
        let mut frames = 0;
        let mut tokens = Vec::new();
        let (mut clean, mut heard) = (Vec::new(), Vec::new());
        for p in parts {
            if p.lips.shape()[1..] != first.lips.shape()[1..] || p.au.as_ref().map(|a| a.shape()[1..].to_vec()) != au_rows {
                return Err(Error::Input(format!("utterance {} does not match {}", p.id, first.id)));
            }
            clean.extend_from_slice(p.clean.samples());
            heard.extend_from_slice(p.heard.samples());
            lips.extend_from_slice(p.lips.data());
            if let Some(a) = &p.au {
                au.extend_from_slice(a.data());
            }
            frames += p.lips.shape()[0];
            tokens.extend_from_slice(p.transcript.chars());
        }
        tokens.push(EOS);
        let with_rows = |rest: &[usize]| [&[frames][..], rest].concat();
        Ok(Example {
            id: parts.iter().map(|p| p.id.as_str()).collect::<Vec<_>>().join("+"),
            clean: Waveform::new(clean, SAMPLE_RATE)?,
            heard: Waveform::new(heard, SAMPLE_RATE)?,
            lips: Tensor::new(with_rows(&first.lips.shape()[1..]), lips)?,
            au: au_rows.map(|r| Tensor::new(with_rows(&r), au)).transpose()?,
            transcript: GraphemeSequence::from_tokens(tokens)?,
        })
    }
}

/// Random training utterance spliced from spans of `corpus`: its length is
/// drawn between [`MIN_SPAN_CHARS`] and the longest transcript, and it takes
/// up to `max_pieces` spans, each from a uniformly drawn utterance. Each
/// span rounds its frame boundaries, so the video may drift from the
/// character grid by up to one frame per piece.
pub fn splice(corpus: &[Example], max_pieces: usize, rng: &mut Rng) -> Result<Example> {
    let longest = corpus.iter().map(|e| e.transcript.chars().len()).max().unwrap_or(0);
    if longest < MIN_SPAN_CHARS || max_pieces == 0 {
        return Err(Error::Config("corpus too short to splice".into()));
    }
    let target = MIN_SPAN_CHARS + rng.below(longest - MIN_SPAN_CHARS + 1);
    let mut parts = Vec::new();
    let mut total = 0;
    while total < target {
        let ex = &corpus[rng.below(corpus.len())];
        let n = ex.transcript.chars().len();
        if n == 0 {
            continue;
        }
        let room = target - total;
        let len = if parts.len() + 1 == max_pieces { room.min(n) } else { 1 + rng.below(room.min(n)) };
        parts.push(ex.span(rng.below(n - len + 1), len)?);
        total += len;
        if parts.len() == max_pieces {
            break;
        }
    }
    Example::concat(&parts)
}

pub fn prepare(corpus: &[SyntheticUtterance]) -> Result<Vec<Example>> {
    corpus.iter().map(Example::from_utterance).collect()
}

/// `[N, 240]` features of `w` as `model` consumes them.
pub fn audio_features(model: &Model<f32>, w: &Waveform) -> Result<Tensor<f32>> {
    Ok(model.audio_input(&featurize(w)?))
}

/// Clean audio followed by the three noisy evaluation stages.
pub const STANDARD_CONDITIONS: [Option<f64>; 4] = [None, Some(10.0), Some(0.0), Some(-5.0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lambda_au: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub log_every: usize,
    /// Conditions sampled per utterance and step; `None` is the recorded
    /// audio, `Some(snr)` mixes fresh pink noise. Empty means recorded only.
    pub noise: Vec<Option<f64>>,
    /// Probability that a draw is replaced by a spliced utterance; see
    /// [`splice`].
    pub span_prob: f64,
    /// Most spans a spliced utterance is built from.
    pub max_pieces: usize,
}

/// Shortest character span used by span sampling.
pub const MIN_SPAN_CHARS: usize = 2;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 4,
            lambda_au: 1.0,
            optimizer: OptimizerConfig {
                lr_scale: 0.3,
                ..OptimizerConfig::default()
            },
            seed: 0,
            log_every: 50,
            noise: STANDARD_CONDITIONS.to_vec(),
            span_prob: 0.7,
            max_pieces: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub cer: Option<f64>,
}

/// Loss of every logged step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,cer\n");
        for p in &self.points {
            let cer = p.cer.map(|c| c.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", p.step, p.loss, cer));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Mean loss of one batch and its gradient.
pub fn batch_gradient(
    model: &Model<f32>,
    batch: &[(Example, Tensor<f32>)],
    lambda_au: f64,
    rng: &Rng,
) -> Result<(f64, Grads<f32>)> {
    let mut grads = Grads::zeros_like(&model.store);
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f32;
    let lambda = if model.mode.has_au_head() { lambda_au } else { 0.0 };
    for (i, (ex, feats)) in batch.iter().enumerate() {
        let mut g = Graph::train(&model.store, rng.split(i as u64));
        let a = g.input(feats.clone());
        let v = model.mode.has_video().then(|| g.input(ex.lips.clone()));
        let fwd = model.net.forward(&mut g, a, v, &ex.transcript.decoder_input())?;
        let au = if lambda != 0.0 { ex.au.as_ref() } else { None };
        let loss = model.net.loss(&mut g, &fwd, &ex.transcript.targets(), au, lambda)?;
        g.ensure_finite()?;
        total += g.value(loss).data()[0] as f64;
        g.backward(loss)?.accumulate_into(&mut grads, scale);
    }
    Ok((total / batch.len() as f64, grads))
}

/// Runs `cfg.steps` optimizer steps. `on_log` sees every logged point.
pub fn train(
    model: &mut Model<f32>,
    corpus: &[Example],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LossPoint),
) -> Result<LossCurve> {
    if corpus.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    if !(0.0..=1.0).contains(&cfg.span_prob) {
        return Err(Error::Config(format!("span probability {} outside [0, 1]", cfg.span_prob)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if model.mode.has_au_head() && cfg.lambda_au != 0.0 {
        if let Some(ex) = corpus.iter().find(|e| e.au.is_none()) {
            return Err(Error::Config(format!(
                "mode {} needs action-unit targets but utterance {} has none",
                model.mode, ex.id
            )));
        }
    }
    let mut adam = Adam::new(cfg.optimizer.clone(), &model.store, model.config.d_model);
    let root = Rng::new(cfg.seed);
    let mut curve = LossCurve::default();
    for step in 1..=cfg.steps {
        let mut rng = root.split(step as u64);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let ex = if cfg.span_prob > 0.0 && rng.uniform(0.0, 1.0) < cfg.span_prob {
                splice(corpus, cfg.max_pieces, &mut rng)?
            } else {
                corpus[rng.below(corpus.len())].clone()
            };
            let snr = if cfg.noise.is_empty() {
                None
            } else {
                cfg.noise[rng.below(cfg.noise.len())]
            };
            let wave = ex.audio(snr, rng.next_u64())?;
            let feats = audio_features(model, &wave)?;
            batch.push((ex, feats));
        }
        let (loss, mut grads) = batch_gradient(model, &batch, cfg.lambda_au, &rng.split(u64::MAX))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        adam.step(&mut model.store, &mut grads)?;
        if step % cfg.log_every.max(1) == 0 || step == 1 || step == cfg.steps {
            let point = LossPoint { step, loss, cer: None };
            on_log(&point);
            curve.points.push(point);
        }
    }
    Ok(curve)
}

/// Decoded transcript and, for audio-visual models, the alignment.
#[derive(Clone, Debug)]
pub struct Transcription {
    pub id: String,
    pub hypothesis: GraphemeSequence,
    pub reference: GraphemeSequence,
    pub monotonicity: Option<f64>,
}

/// Greedy transcription of every example at one noise condition.
pub fn transcribe(
    model: &Model<f32>,
    examples: &[Example],
    snr_db: Option<f64>,
    noise_seed: u64,
) -> Result<Vec<Transcription>> {
    let root = Rng::new(noise_seed);
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let wave = ex.audio(snr_db, root.split(i as u64).next_u64())?;
            let feats = audio_features(model, &wave)?;
            let lips = model.mode.has_video().then_some(&ex.lips);
            let mut session = DecodeSession::new(model, &feats, lips)?;
            let monotonicity = match session.alignment() {
                Some(a) if a.audio_len() >= 2 && a.video_len() >= 2 => Some(monotonicity_score(a)?.score),
                _ => None,
            };
            let hypothesis = greedy_decode(&mut session, MAX_DECODE_LEN)?;
            Ok(Transcription {
                id: ex.id.clone(),
                hypothesis,
                reference: ex.transcript.clone(),
                monotonicity,
            })
        })
        .collect()
}

/// Corpus-level CER, per-condition CER and per-utterance monotonicity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Corpus CER at the first evaluated condition.
    pub cer: f64,
    /// Mean of per-utterance CERs at the first evaluated condition.
    pub mean_utterance_cer: f64,
    /// Condition label (`clean` or the SNR in dB) to corpus CER.
    pub per_snr: BTreeMap<String, f64>,
    /// Utterance id to monotonicity score at the first condition.
    pub monotonicity: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn mean_monotonicity(&self) -> Option<f64> {
        (!self.monotonicity.is_empty())
            .then(|| self.monotonicity.values().sum::<f64>() / self.monotonicity.len() as f64)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub fn condition_label(snr_db: Option<f64>) -> String {
    snr_db.map_or_else(|| "clean".to_string(), |s| format!("{s}"))
}

pub fn evaluate(
    model: &Model<f32>,
    examples: &[Example],
    conditions: &[Option<f64>],
    noise_seed: u64,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for (k, &snr) in conditions.iter().enumerate() {
        let results = transcribe(model, examples, snr, noise_seed)?;
        let c = corpus_cer(results.iter().map(|t| (&t.hypothesis, &t.reference)))?;
        report.per_snr.insert(condition_label(snr), c);
        if k == 0 {
            report.cer = c;
            let per: Vec<f64> = results
                .iter()
                .map(|t| cer(&t.hypothesis, &t.reference))
                .collect::<Result<_>>()?;
            report.mean_utterance_cer = per.iter().sum::<f64>() / per.len() as f64;
            report.monotonicity = results
                .iter()
                .filter_map(|t| t.monotonicity.map(|m| (t.id.clone(), m)))
                .collect();
        }
    }
    Ok(report)
}
