//! Cross-modal align stack: audio encoder states query the video encoder
//! states, and the attended visual context is fused back into the audio
//! stream.
//!
//! ```text
//! c_V   = attention(query = o_A, source = o_V)
//! o_AV  = c_V + o_A            (residual fusion, then LN and a FF sublayer)
//! ```

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::autograd::{Graph, Var};
use crate::config::{Fusion, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use crate::transformer::{AttentionMask, FeedForward, MultiHeadAttention};

/// Tolerance on alignment row sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct AlignBlock {
    pub attn: MultiHeadAttention,
    pub fusion: Option<Linear>,
    pub norm1: LayerNorm,
    pub ff: FeedForward,
    pub norm2: LayerNorm,
}

/// Intermediate values of one block, kept for inspection.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    /// Visual context `c_V`, `[N, d]`.
    pub context: Var,
    /// Fused sequence before normalisation.
    pub fused: Var,
    /// Per-head attention weights `[N, M]`.
    pub weights: Vec<Var>,
    /// Block output, `[N, d]`.
    pub out: Var,
}

impl AlignBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, config: &ModelConfig, rng: &mut Rng) -> Self {
        let (d, eps) = (config.d_model, config.layer_norm_eps);
        AlignBlock {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), config, rng),
            fusion: (config.fusion == Fusion::Linear)
                .then(|| Linear::new(store, &format!("{name}.fusion"), 2 * d, d, rng)),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, eps),
            ff: FeedForward::new(store, &format!("{name}.ff"), config, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, eps),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        o_a: Var,
        o_v: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<BlockTrace> {
        let (da, dv) = (g.shape(o_a)[1], g.shape(o_v)[1]);
        if da != dv {
            return Err(Error::shape("align", g.shape(o_a), g.shape(o_v)));
        }
        let (context, weights) = self.attn.forward(g, o_a, o_v, mask)?;
        let fused = match &self.fusion {
            None => g.add(context, o_a)?,
            Some(linear) => {
                let both = g.concat_cols(context, o_a)?;
                linear.forward(g, both)?
            }
        };
        let h = self.norm1.forward(g, fused)?;
        let f = self.ff.forward(g, h)?;
        let sum = g.add(h, f)?;
        let out = self.norm2.forward(g, sum)?;
        Ok(BlockTrace {
            context,
            fused,
            weights,
            out,
        })
    }
}

#[derive(Clone, Debug)]
pub struct AlignStack {
    pub blocks: Vec<AlignBlock>,
}

impl AlignStack {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, config: &ModelConfig, rng: &mut Rng) -> Self {
        AlignStack {
            blocks: (0..config.n_align_blocks)
                .map(|i| AlignBlock::new(store, &format!("{name}.block{i}"), config, rng))
                .collect(),
        }
    }

    /// Runs every block; the audio stream is refined while `o_V` stays fixed.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        o_a: Var,
        o_v: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Vec<BlockTrace>> {
        if g.shape(o_a)[0] == 0 || g.shape(o_v)[0] == 0 {
            return Err(Error::Input("align stack needs at least one audio and one video step".into()));
        }
        let mut traces: Vec<BlockTrace> = Vec::with_capacity(self.blocks.len());
        let mut h = o_a;
        for block in &self.blocks {
            let trace = block.forward(g, h, o_v, mask)?;
            h = trace.out;
            traces.push(trace);
        }
        Ok(traces)
    }
}

/// Head-averaged weights of the final block as an [`AlignmentMatrix`].
pub fn alignment_from_trace<T: Real>(g: &Graph<'_, T>, traces: &[BlockTrace]) -> Result<AlignmentMatrix> {
    let last = traces
        .last()
        .ok_or_else(|| Error::Contract("align stack has no blocks".into()))?;
    let heads = last.weights.len() as f64;
    let shape = g.shape(last.weights[0]).to_vec();
    let mut sum = vec![0.0; shape.iter().product()];
    for &w in &last.weights {
        for (s, v) in sum.iter_mut().zip(g.value(w).data()) {
            *s += v.to_f64().unwrap_or(f64::NAN) / heads;
        }
    }
    AlignmentMatrix::new(Tensor::new(shape, sum)?)
}

/// Audio and video encoder states sharing one width.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutputs<T = f32> {
    pub o_a: Tensor<T>,
    pub o_v: Tensor<T>,
}

impl<T: Real> EncoderOutputs<T> {
    pub fn new(o_a: Tensor<T>, o_v: Tensor<T>) -> Result<Self> {
        if o_a.rank() != 2 || o_v.rank() != 2 || o_a.shape()[1] != o_v.shape()[1] {
            return Err(Error::shape("encoder_outputs", o_a.shape(), o_v.shape()));
        }
        Ok(EncoderOutputs { o_a, o_v })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignResult<T = f32> {
    /// Fused sequence with the shape of `o_A`.
    pub o_av: Tensor<T>,
    pub alignment: AlignmentMatrix,
}

/// Evaluation-mode forward of the align stack on concrete tensors.
pub fn align_forward<T: Real>(
    stack: &AlignStack,
    store: &ParamStore<T>,
    enc: &EncoderOutputs<T>,
) -> Result<AlignResult<T>> {
    let mut g = Graph::eval(store);
    let o_a = g.input(enc.o_a.clone());
    let o_v = g.input(enc.o_v.clone());
    let traces = stack.forward(&mut g, o_a, o_v, None)?;
    let alignment = alignment_from_trace(&g, &traces)?;
    let out = traces.last().expect("validated non-empty").out;
    Ok(AlignResult {
        o_av: g.value(out).clone(),
        alignment,
    })
}

pub fn extract_alignment<T: Real>(result: &AlignResult<T>) -> AlignmentMatrix {
    result.alignment.clone()
}

/// Row-stochastic `[N, M]` audio-to-video attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrix {
    weights: Tensor<f64>,
}

impl AlignmentMatrix {
    pub fn new(weights: Tensor<f64>) -> Result<Self> {
        if weights.rank() != 2 || weights.shape()[0] == 0 || weights.shape()[1] == 0 {
            return Err(Error::shape("alignment", weights.shape(), &[1, 1]));
        }
        for (i, row) in weights.data().chunks(weights.shape()[1]).enumerate() {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Contract(format!(
                    "alignment row {i} is not a distribution (sum {total})"
                )));
            }
        }
        Ok(AlignmentMatrix { weights })
    }

    pub fn weights(&self) -> &Tensor<f64> {
        &self.weights
    }

    pub fn audio_len(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn video_len(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Index of the most attended video frame for each audio step; ties go
    /// to the earliest frame.
    pub fn row_argmax(&self) -> Vec<usize> {
        self.weights
            .data()
            .chunks(self.video_len())
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect()
    }

    pub fn heatmap(&self) -> Heatmap {
        Heatmap::from_alignment(self)
    }
}

/// 16-bit greyscale image with one column per video frame and one row per
/// audio step; each row is scaled so its maximum is 65535.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u16>,
}

impl Heatmap {
    pub fn from_alignment(a: &AlignmentMatrix) -> Self {
        let (height, width) = (a.audio_len(), a.video_len());
        let mut pixels = Vec::with_capacity(width * height);
        for row in a.weights.data().chunks(width) {
            let max = row.iter().copied().fold(0.0, f64::max);
            pixels.extend(row.iter().map(|&v| {
                if max > 0.0 {
                    (v / max * 65535.0).round() as u16
                } else {
                    0
                }
            }));
        }
        Heatmap { width, height, pixels }
    }

    /// Binary PGM (`P5`) with maxval 65535, big-endian samples.
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend_from_slice(&p.to_be_bytes());
        }
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm_bytes())?;
        Ok(())
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse_pgm(BufReader::new(std::fs::File::open(path)?), path)
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self> {
        Self::parse_pgm(bytes, Path::new("<memory>"))
    }

    fn parse_pgm<R: BufRead>(mut r: R, path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason);
        let mut header = Vec::new();
        let mut fields = Vec::new();
        while fields.len() < 4 {
            header.clear();
            if r.read_until(b'\n', &mut header)? == 0 {
                return Err(bad("truncated PGM header"));
            }
            let line = String::from_utf8_lossy(&header);
            let line = line.split('#').next().unwrap_or("");
            fields.extend(line.split_whitespace().map(str::to_owned));
        }
        if fields[0] != "P5" || fields.len() != 4 {
            return Err(bad("expected a binary P5 header"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed PGM header"));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 65535 {
            return Err(bad("only 16-bit PGM is supported"));
        }
        let mut raw = vec![0u8; width * height * 2];
        r.read_exact(&mut raw).map_err(|_| bad("truncated PGM payload"))?;
        let pixels = raw.chunks(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
        Ok(Heatmap { width, height, pixels })
    }

    /// 16-bit greyscale PNG rendering.
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
            self.width as u32,
            self.height as u32,
            self.pixels.clone(),
        )
        .ok_or_else(|| Error::Contract("heatmap size does not match its pixels".into()))?;
        img.save(path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(vec![rows, cols], |_| rng.normal())
    }

    fn tiny_stack(seed: u64) -> (ParamStore<f64>, AlignStack) {
        let mut store = ParamStore::new();
        let stack = AlignStack::new(&mut store, "align", &ModelConfig::tiny(), &mut Rng::new(seed));
        (store, stack)
    }

    #[test]
    fn single_frame_gets_full_weight() {
        let (store, stack) = tiny_stack(0);
        let mut rng = Rng::new(1);
        let enc = EncoderOutputs::new(random(5, 8, &mut rng), random(1, 8, &mut rng)).unwrap();
        let res = align_forward(&stack, &store, &enc).unwrap();
        assert_eq!(res.alignment.weights().shape(), &[5, 1]);
        assert!(res.alignment.weights().data().iter().all(|&w| w == 1.0));
        assert_eq!(res.o_av.shape(), &[5, 8]);
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut rng = Rng::new(1);
        assert!(EncoderOutputs::new(random(5, 8, &mut rng), random(3, 4, &mut rng)).is_err());
    }

    #[test]
    fn shape_and_rows() {
        let (store, stack) = tiny_stack(2);
        let mut rng = Rng::new(3);
        let enc = EncoderOutputs::new(random(10, 8, &mut rng), random(7, 8, &mut rng)).unwrap();
        let a = extract_alignment(&align_forward(&stack, &store, &enc).unwrap());
        assert_eq!(a.weights().shape(), &[10, 7]);
        for row in a.weights().data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn pgm_round_trip() {
        let w = Tensor::from_rows(&[vec![0.2, 0.8], vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        let h = AlignmentMatrix::new(w).unwrap().heatmap();
        assert_eq!((h.width, h.height), (2, 3));
        assert_eq!(h.pixels, vec![16384, 65535, 65535, 65535, 65535, 0]);
        let bytes = h.to_pgm_bytes();
        let back = Heatmap::from_pgm_bytes(&bytes).unwrap();
        assert_eq!(back, h);
        assert_eq!(back.to_pgm_bytes(), bytes);
        assert!(Heatmap::from_pgm_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn non_stochastic_rows_rejected() {
        let w = Tensor::from_rows(&[vec![0.2, 0.2]]).unwrap();
        assert!(AlignmentMatrix::new(w).is_err());
    }
}
