//! The full network: audio and video encoders, the align stack, the
//! grapheme decoder, the action-unit head and the combined loss.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::{alignment_from_trace, AlignStack, AlignmentMatrix, BlockTrace};
use crate::autograd::{Graph, Var};
use crate::config::{Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::signal::{AudioFeatureSequence, AUDIO_FEATURE_DIM};
use crate::tensor::{Real, Tensor};
use crate::transformer::{add_positions, Decoder, Encoder};
use crate::visual::{VideoFrameSequence, VisualCnn, LIP_SIZE};
use crate::vocab::{GraphemeSequence, SOS};

/// Per-frame action-unit activations `[M, n_au]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AuTargets {
    activations: Tensor<f32>,
}

impl AuTargets {
    pub fn new(activations: Tensor<f32>) -> Result<Self> {
        if activations.rank() != 2 {
            return Err(Error::shape("au_targets", activations.shape(), &[0, 0]));
        }
        if activations.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("action-unit targets must lie in [0, 1]".into()));
        }
        Ok(AuTargets { activations })
    }

    pub fn activations(&self) -> &Tensor<f32> {
        &self.activations
    }

    pub fn len(&self) -> usize {
        self.activations.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Layers of the video branch; absent in audio-only mode.
#[derive(Clone, Debug)]
pub struct VideoBranch {
    pub cnn: VisualCnn,
    pub encoder: Encoder,
    pub align: AlignStack,
    pub au_head: Option<Linear>,
}

/// Parameter handles for every layer. Pairs with a [`ParamStore`] of any
/// precision built from the same configuration.
#[derive(Clone, Debug)]
pub struct Network {
    pub audio_in: Linear,
    pub audio_encoder: Encoder,
    pub video: Option<VideoBranch>,
    pub decoder: Decoder,
    pub max_len: usize,
}

/// Graph nodes produced by the encoders and the align stack.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub o_a: Var,
    pub o_v: Option<Var>,
    /// Decoder memory: `o_AV` with video, otherwise `o_A`.
    pub memory: Var,
    pub align: Vec<BlockTrace>,
    /// Self-attention weights of both encoders.
    pub attention: Vec<Var>,
}

/// Graph nodes of a complete teacher-forced forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub encoded: Encoded,
    pub logits: Var,
    pub au_pred: Option<Var>,
    /// Decoder self- and cross-attention weights.
    pub decoder_attention: Vec<Var>,
}

impl Forward {
    /// Every attention matrix of the pass, align weights included.
    pub fn all_attention(&self) -> Vec<Var> {
        let mut all = self.encoded.attention.clone();
        for block in &self.encoded.align {
            all.extend(&block.weights);
        }
        all.extend(&self.decoder_attention);
        all
    }
}

impl Network {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &ModelConfig, mode: Mode, rng: &mut Rng) -> Self {
        let audio_in = Linear::new(store, "audio.input", AUDIO_FEATURE_DIM, config.d_model, rng);
        let audio_encoder = Encoder::new(store, "audio.encoder", config, rng);
        let video = mode.has_video().then(|| VideoBranch {
            cnn: VisualCnn::new(store, "video.cnn", config, rng),
            encoder: Encoder::new(store, "video.encoder", config, rng),
            align: AlignStack::new(store, "align", config, rng),
            au_head: mode
                .has_au_head()
                .then(|| Linear::new(store, "video.au_head", config.d_model, config.n_au, rng)),
        });
        let decoder = Decoder::new(store, "decoder", config, rng);
        Network {
            audio_in,
            audio_encoder,
            video,
            decoder,
            max_len: config.max_len,
        }
    }

    /// `audio: [N, 240]`, `lips: [M, 36, 36, 3]` pixels.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, audio: Var, lips: Option<Var>) -> Result<Encoded> {
        let s = g.shape(audio);
        if s.len() != 2 || s[1] != AUDIO_FEATURE_DIM {
            return Err(Error::shape("audio_features", s, &[0, AUDIO_FEATURE_DIM]));
        }
        if s[0] == 0 {
            return Err(Error::Input("audio feature sequence is empty".into()));
        }
        let a = self.audio_in.forward(g, audio)?;
        let a = add_positions(g, a, self.max_len)?;
        let audio_stack = self.audio_encoder.forward(g, a, None)?;
        let mut attention = audio_stack.attention;
        let o_a = audio_stack.out;
        match (&self.video, lips) {
            (None, None) => Ok(Encoded {
                o_a,
                o_v: None,
                memory: o_a,
                align: Vec::new(),
                attention,
            }),
            (Some(branch), Some(lips)) => {
                if g.shape(lips).first() == Some(&0) {
                    return Err(Error::Input("video frame sequence is empty".into()));
                }
                let v = branch.cnn.forward(g, lips)?;
                let v = add_positions(g, v, self.max_len)?;
                let video_stack = branch.encoder.forward(g, v, None)?;
                attention.extend(video_stack.attention);
                let o_v = video_stack.out;
                let align = branch.align.forward(g, o_a, o_v, None)?;
                let memory = align.last().map_or(o_a, |b| b.out);
                Ok(Encoded {
                    o_a,
                    o_v: Some(o_v),
                    memory,
                    align,
                    attention,
                })
            }
            (None, Some(_)) => Err(Error::Mode("audio-only model given video input".into())),
            (Some(_), None) => Err(Error::Mode("audio-visual model needs video input".into())),
        }
    }

    /// Sigmoid action-unit predictions from `o_V`.
    pub fn au_head<T: Real>(&self, g: &mut Graph<'_, T>, o_v: Var) -> Result<Var> {
        let head = self
            .video
            .as_ref()
            .and_then(|b| b.au_head.as_ref())
            .ok_or_else(|| Error::Config("action-unit head is disabled for this model".into()))?;
        let z = head.forward(g, o_v)?;
        Ok(g.sigmoid(z))
    }

    /// Teacher-forced forward pass over `prefix`, which must start with `<sos>`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, audio: Var, lips: Option<Var>, prefix: &[usize]) -> Result<Forward> {
        if prefix.first() != Some(&SOS) {
            return Err(Error::Input("decoder prefix must start with <sos>".into()));
        }
        let encoded = self.encode(g, audio, lips)?;
        let dec = self.decoder.forward(g, prefix, encoded.memory)?;
        let au_pred = match (encoded.o_v, self.has_au_head()) {
            (Some(o_v), true) => Some(self.au_head(g, o_v)?),
            _ => None,
        };
        Ok(Forward {
            encoded,
            logits: dec.out,
            au_pred,
            decoder_attention: dec.attention,
        })
    }

    pub fn has_au_head(&self) -> bool {
        self.video.as_ref().is_some_and(|b| b.au_head.is_some())
    }

    /// Mean cross-entropy over non-pad targets plus `lambda_au` times the AU
    /// mean squared error. With `lambda_au == 0` the AU term is not built.
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        fwd: &Forward,
        targets: &[Option<usize>],
        au_targets: Option<&Tensor<T>>,
        lambda_au: f64,
    ) -> Result<Var> {
        combined_loss_graph(g, fwd.logits, targets, fwd.au_pred, au_targets, lambda_au)
    }
}

/// Loss on graph nodes; see [`Network::loss`].
pub fn combined_loss_graph<T: Real>(
    g: &mut Graph<'_, T>,
    logits: Var,
    targets: &[Option<usize>],
    au_pred: Option<Var>,
    au_targets: Option<&Tensor<T>>,
    lambda_au: f64,
) -> Result<Var> {
    if g.shape(logits)[0] != targets.len() {
        return Err(Error::Contract(format!(
            "{} logit rows for {} targets",
            g.shape(logits)[0],
            targets.len()
        )));
    }
    let logp = g.log_softmax_rows(logits);
    let ce = g.nll(logp, targets)?;
    if lambda_au == 0.0 {
        return Ok(ce);
    }
    let (pred, target) = match (au_pred, au_targets) {
        (Some(p), Some(t)) => (p, t),
        (None, _) => return Err(Error::Config("AU loss weight set but the model has no AU head".into())),
        (Some(_), None) => return Err(Error::Config("AU loss weight set but no AU targets given".into())),
    };
    if g.shape(pred) != target.shape() {
        return Err(Error::shape("au_loss", g.shape(pred), target.shape()));
    }
    let t = g.input(target.clone());
    let diff = g.sub(pred, t)?;
    let sq = g.square(diff);
    let mse = g.mean(sq);
    let weighted = g.scale(mse, T::lit(lambda_au));
    g.add(ce, weighted)
}

/// Concrete outputs of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<T = f32> {
    /// `[T, vocab]`.
    pub logits: Tensor<T>,
    /// `[N, M]`; present exactly when the model has a video branch.
    pub alignment: Option<AlignmentMatrix>,
    /// `[M, n_au]`.
    pub au_pred: Option<Tensor<T>>,
}

/// Configuration, mode and parameters of one model.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub mode: Mode,
    pub net: Network,
    pub store: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, mode: Mode, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let net = Network::new(&mut store, &config, mode, &mut Rng::new(seed));
        Ok(Model {
            config,
            mode,
            net,
            store,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            mode: self.mode,
            net: self.net.clone(),
            store: self.store.cast(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Size of the parameters stored as `f32`.
    pub fn footprint_bytes(&self) -> usize {
        4 * self.num_parameters()
    }

    /// Eval-mode forward on prepared tensors: `audio: [N, 240]`,
    /// `lips: [M, 36, 36, 3]`.
    pub fn forward_tensors(&self, audio: &Tensor<T>, lips: Option<&Tensor<T>>, prefix: &[usize]) -> Result<ModelOutput<T>> {
        let mut g = Graph::eval(&self.store);
        let a = g.input(audio.clone());
        let v = lips.map(|l| g.input(l.clone()));
        let fwd = self.net.forward(&mut g, a, v, prefix)?;
        g.ensure_finite()?;
        let alignment = if fwd.encoded.align.is_empty() {
            None
        } else {
            Some(alignment_from_trace(&g, &fwd.encoded.align)?)
        };
        Ok(ModelOutput {
            logits: g.value(fwd.logits).clone(),
            alignment,
            au_pred: fwd.au_pred.map(|p| g.value(p).clone()),
        })
    }

    /// Audio-visual forward from face-aligned frames, which are cropped to
    /// the lip region and resized first.
    pub fn forward_av(&self, audio: &AudioFeatureSequence, video: &VideoFrameSequence, prefix: &[usize]) -> Result<ModelOutput<T>> {
        if !self.mode.has_video() {
            return Err(Error::Mode("audio-only model cannot run forward_av".into()));
        }
        if video.is_empty() {
            return Err(Error::Input("video frame sequence is empty".into()));
        }
        let lips = video.lip_frames()?.cast();
        self.forward_tensors(&self.audio_input(audio), Some(&lips), prefix)
    }

    pub fn forward_audio(&self, audio: &AudioFeatureSequence, prefix: &[usize]) -> Result<ModelOutput<T>> {
        if self.mode.has_video() {
            return Err(Error::Mode("audio-visual model needs video; use forward_av".into()));
        }
        self.forward_tensors(&self.audio_input(audio), None, prefix)
    }

    /// Features as the network consumes them, normalised if configured.
    pub fn audio_input(&self, audio: &AudioFeatureSequence) -> Tensor<T> {
        if self.config.normalize_features {
            audio.normalized().vectors().cast()
        } else {
            audio.vectors().cast()
        }
    }

    /// Sigmoid AU predictions for concrete video encoder outputs `[M, d]`.
    pub fn au_head(&self, o_v: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::eval(&self.store);
        let x = g.input(o_v.clone());
        let y = self.net.au_head(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

/// Loss of concrete outputs against a transcript; see [`Network::loss`].
pub fn combined_loss<T: Real>(
    out: &ModelOutput<T>,
    targets: &GraphemeSequence,
    au_targets: Option<&AuTargets>,
    lambda_au: f64,
) -> Result<f64> {
    let store = ParamStore::<T>::new();
    let mut g = Graph::eval(&store);
    let logits = g.input(out.logits.clone());
    let pred = out.au_pred.as_ref().map(|p| g.input(p.clone()));
    let au = au_targets.map(|a| a.activations().cast::<T>());
    let loss = combined_loss_graph(&mut g, logits, &targets.targets(), pred, au.as_ref(), lambda_au)?;
    Ok(g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN))
}

const CHECKPOINT_FORMAT: &str = "avalign-checkpoint-v1";
const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    mode: Mode,
    config: ModelConfig,
    /// Parameter name to file name, in construction order.
    params: Vec<(String, String)>,
}

impl Model<f32> {
    /// Writes one AVT1 file per parameter plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut params = Vec::with_capacity(self.store.len());
        for (i, (_, name, value)) in self.store.iter().enumerate() {
            let file = format!("{i:04}.avt1");
            value.save_avt1(dir.join(&file))?;
            params.push((name.to_owned(), file));
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            mode: self.mode,
            config: self.config.clone(),
            params,
        };
        std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&manifest_path)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::format(&manifest_path, format!("unknown format {:?}", manifest.format)));
        }
        let mut model = Model::<f32>::new(manifest.config, manifest.mode, 0)?;
        let files: BTreeMap<&str, &str> = manifest.params.iter().map(|(n, f)| (n.as_str(), f.as_str())).collect();
        if files.len() != model.store.len() {
            return Err(Error::format(
                &manifest_path,
                format!("{} parameters listed, model has {}", files.len(), model.store.len()),
            ));
        }
        let ids: Vec<_> = model.store.iter().map(|(id, name, _)| (id, name.to_owned())).collect();
        for (id, name) in ids {
            let file = files
                .get(name.as_str())
                .ok_or_else(|| Error::format(&manifest_path, format!("missing parameter {name}")))?;
            let value = Tensor::load_avt1(dir.join(file))?;
            let slot = model.store.get_mut(id);
            if value.shape() != slot.shape() {
                return Err(Error::shape("checkpoint", value.shape(), slot.shape()));
            }
            *slot = value;
        }
        Ok(model)
    }
}

/// Pixels of prepared lip frames must be `[M, 36, 36, 3]`.
pub fn check_lips<T: Real>(lips: &Tensor<T>) -> Result<()> {
    match lips.shape() {
        &[_, h, w, 3] if h == LIP_SIZE && w == LIP_SIZE => Ok(()),
        s => Err(Error::shape("lip_frames", s, &[0, LIP_SIZE, LIP_SIZE, 3])),
    }
}
