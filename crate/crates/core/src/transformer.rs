//! Transformer building blocks: attention, feed-forward sublayers,
//! sinusoidal positions and post-norm encoder/decoder stacks.

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Which query/key pairs may interact; `true` means allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        AttentionMask { rows, cols, allowed }
    }

    /// Position `t` sees positions `0..=t`.
    pub fn causal(len: usize) -> Self {
        Self::from_fn(len, len, |i, j| j <= i)
    }

    /// Every query sees exactly the keys flagged valid.
    pub fn key_padding(rows: usize, valid_keys: &[bool]) -> Self {
        Self::from_fn(rows, valid_keys.len(), |_, j| valid_keys[j])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    /// Elementwise conjunction of two equally sized masks.
    pub fn and(&self, other: &AttentionMask) -> Result<Self> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::shape(
                "mask_and",
                &[self.rows, self.cols],
                &[other.rows, other.cols],
            ));
        }
        let allowed = self.allowed.iter().zip(&other.allowed).map(|(a, b)| *a && *b).collect();
        Ok(AttentionMask { allowed, ..*self })
    }

    /// True when no query can see a later position.
    pub fn is_causal(&self) -> bool {
        self.rows == self.cols && (0..self.rows).all(|i| (i + 1..self.cols).all(|j| !self.get(i, j)))
    }
}

/// Result of one attention call at the tensor level.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput<T = f32> {
    /// `[L_q, d]` weighted sums of values.
    pub values: Tensor<T>,
    /// `[L_q, L_k]` row-stochastic weights.
    pub weights: Tensor<T>,
}

/// `softmax(Q Kᵀ / √d) V` on the graph. Returns the output and the weights
/// before dropout; dropout with rate `dropout` is applied to the weights
/// that multiply `V`.
pub fn attend<T: Real>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
    dropout: f64,
) -> Result<(Var, Var)> {
    let (lq, dq) = dims(g, q)?;
    let (lk, dk) = dims(g, k)?;
    if dq != dk {
        return Err(Error::shape("attention", g.shape(q), g.shape(k)));
    }
    if let Some(m) = mask {
        if (m.rows, m.cols) != (lq, lk) {
            return Err(Error::shape("attention_mask", &[m.rows, m.cols], &[lq, lk]));
        }
    }
    let scores = g.matmul_t(q, k, false, true)?;
    let scores = g.scale(scores, T::lit(1.0 / (dq as f64).sqrt()));
    let weights = g.softmax_rows(scores, mask.map(|m| m.allowed()))?;
    let dropped = g.dropout(weights, dropout);
    let out = g.matmul(dropped, v)?;
    Ok((out, weights))
}

fn dims<T: Real>(g: &Graph<'_, T>, x: Var) -> Result<(usize, usize)> {
    match g.shape(x) {
        &[r, c] => Ok((r, c)),
        s => Err(Error::shape("attention", s, &[0, 0])),
    }
}

/// Tensor-level scaled dot-product attention without projections.
pub fn scaled_dot_attention<T: Real>(
    query: &Tensor<T>,
    key: &Tensor<T>,
    value: &Tensor<T>,
    mask: Option<&AttentionMask>,
) -> Result<AttentionOutput<T>> {
    let store = ParamStore::new();
    let mut g = Graph::eval(&store);
    let (q, k, v) = (g.input(query.clone()), g.input(key.clone()), g.input(value.clone()));
    let (out, w) = attend(&mut g, q, k, v, mask, 0.0)?;
    Ok(AttentionOutput {
        values: g.value(out).clone(),
        weights: g.value(w).clone(),
    })
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(...)`.
pub fn positional_encoding<T: Real>(length: usize, d_model: usize) -> Tensor<T> {
    Tensor::from_fn(vec![length, d_model], |idx| {
        let (pos, col) = (idx / d_model, idx % d_model);
        let rate = 10000f64.powf((col - col % 2) as f64 / d_model as f64);
        let angle = pos as f64 / rate;
        T::lit(if col % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Adds sinusoidal positions to `x: [L, d]`, rejecting `L > max_len`.
pub fn add_positions<T: Real>(g: &mut Graph<'_, T>, x: Var, max_len: usize) -> Result<Var> {
    let (len, d) = dims(g, x)?;
    if len > max_len {
        return Err(Error::Contract(format!(
            "sequence of length {len} exceeds max_len {max_len}"
        )));
    }
    let pe = g.input(positional_encoding(len, d));
    g.add(x, pe)
}

/// Projected attention with `n_heads` equal slices of `d_model`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub dropout: f64,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, config: &ModelConfig, rng: &mut Rng) -> Self {
        let d = config.d_model;
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            n_heads: config.n_heads,
            dropout: config.dropout,
        }
    }

    /// Queries from `query`, keys and values from `source`. Returns the
    /// output and each head's pre-dropout weights.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        source: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, source)?;
        let v = self.v.forward(g, source)?;
        let d = g.shape(q)[1];
        let dh = d / self.n_heads;
        let mut weights = Vec::with_capacity(self.n_heads);
        let mut merged: Option<Var> = None;
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let (out, w) = attend(g, qh, kh, vh, mask, self.dropout)?;
            weights.push(w);
            merged = Some(match merged {
                Some(m) => g.concat_cols(m, out)?,
                None => out,
            });
        }
        let out = self.o.forward(g, merged.expect("at least one head"))?;
        Ok((out, weights))
    }
}

/// `relu(x W1 + b1)` with dropout on the activations, then `W2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, config: &ModelConfig, rng: &mut Rng) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), config.d_model, config.d_ff, rng),
            outer: Linear::new(store, &format!("{name}.outer"), config.d_ff, config.d_model, rng),
            dropout: config.dropout,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        self.outer.forward(g, h)
    }
}

/// `LN(x + f(x))`.
fn residual_norm<T: Real>(g: &mut Graph<'_, T>, x: Var, fx: Var, norm: &LayerNorm) -> Result<Var> {
    let sum = g.add(x, fx)?;
    norm.forward(g, sum)
}

/// Output of a stack plus every attention matrix it computed.
#[derive(Clone, Debug)]
pub struct StackOutput {
    pub out: Var,
    /// Pre-dropout weights, layer-major then head.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff: FeedForward,
    pub norm2: LayerNorm,
}

/// Post-norm self-attention encoder.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub max_len: usize,
}

impl Encoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, config: &ModelConfig, rng: &mut Rng) -> Self {
        let eps = config.layer_norm_eps;
        let layers = (0..config.n_encoder_layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                EncoderLayer {
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), config, rng),
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), config.d_model, eps),
                    ff: FeedForward::new(store, &format!("{p}.ff"), config, rng),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), config.d_model, eps),
                }
            })
            .collect();
        Encoder {
            layers,
            max_len: config.max_len,
        }
    }

    /// `x: [L, d]` must already carry positional information.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, mask: Option<&AttentionMask>) -> Result<StackOutput> {
        let (len, _) = dims(g, x)?;
        if len > self.max_len {
            return Err(Error::Contract(format!(
                "encoder input of length {len} exceeds max_len {}",
                self.max_len
            )));
        }
        let mut h = x;
        let mut attention = Vec::new();
        for layer in &self.layers {
            let (a, w) = layer.attn.forward(g, h, h, mask)?;
            attention.extend(w);
            h = residual_norm(g, h, a, &layer.norm1)?;
            let f = layer.ff.forward(g, h)?;
            h = residual_norm(g, h, f, &layer.norm2)?;
        }
        Ok(StackOutput { out: h, attention })
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
    pub norm3: LayerNorm,
}

/// Post-norm autoregressive decoder with its own grapheme embedding and
/// output projection (no weight sharing).
#[derive(Clone, Debug)]
pub struct Decoder {
    pub embedding: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub output: Linear,
    pub d_model: usize,
    pub max_len: usize,
}

impl Decoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, config: &ModelConfig, rng: &mut Rng) -> Self {
        let (d, eps) = (config.d_model, config.layer_norm_eps);
        let embedding = store.xavier(
            format!("{name}.embedding"),
            &[config.vocab_size, d],
            config.vocab_size,
            d,
            rng,
        );
        let layers = (0..config.n_decoder_layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), config, rng),
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d, eps),
                    cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), config, rng),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d, eps),
                    ff: FeedForward::new(store, &format!("{p}.ff"), config, rng),
                    norm3: LayerNorm::new(store, &format!("{p}.norm3"), d, eps),
                }
            })
            .collect();
        Decoder {
            embedding,
            layers,
            output: Linear::new(store, &format!("{name}.output"), d, config.vocab_size, rng),
            d_model: d,
            max_len: config.max_len,
        }
    }

    /// `√d · E[tokens] + PE`.
    pub fn embed<T: Real>(&self, g: &mut Graph<'_, T>, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Input("decoder input is empty".into()));
        }
        let table = g.param(self.embedding);
        let e = g.gather_rows(table, tokens)?;
        let e = g.scale(e, T::lit((self.d_model as f64).sqrt()));
        add_positions(g, e, self.max_len)
    }

    /// Logits `[T, vocab]` for embedded targets `x: [T, d]` attending to
    /// `memory: [L, d]`. `causal` must be present and causal.
    pub fn forward_embedded<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        memory: Var,
        causal: Option<&AttentionMask>,
        memory_mask: Option<&AttentionMask>,
    ) -> Result<StackOutput> {
        let causal = causal.ok_or_else(|| Error::Contract("decoder requires a causal mask".into()))?;
        if !causal.is_causal() {
            return Err(Error::Contract("decoder mask lets positions see the future".into()));
        }
        let mut h = x;
        let mut attention = Vec::new();
        for layer in &self.layers {
            let (a, w) = layer.self_attn.forward(g, h, h, Some(causal))?;
            attention.extend(w);
            h = residual_norm(g, h, a, &layer.norm1)?;
            let (c, w) = layer.cross_attn.forward(g, h, memory, memory_mask)?;
            attention.extend(w);
            h = residual_norm(g, h, c, &layer.norm2)?;
            let f = layer.ff.forward(g, h)?;
            h = residual_norm(g, h, f, &layer.norm3)?;
        }
        let out = self.output.forward(g, h)?;
        Ok(StackOutput { out, attention })
    }

    /// Teacher-forced logits for a token prefix.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, tokens: &[usize], memory: Var) -> Result<StackOutput> {
        let x = self.embed(g, tokens)?;
        self.forward_embedded(g, x, memory, Some(&AttentionMask::causal(tokens.len())), None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_key_gets_all_weight() {
        let out = scaled_dot_attention(&t(&[&[0.3, -1.0]]), &t(&[&[2.0, 1.0]]), &t(&[&[5.0, 6.0]]), None).unwrap();
        assert_eq!(out.weights.data(), &[1.0]);
        assert_eq!(out.values.data(), &[5.0, 6.0]);
    }

    #[test]
    fn identical_keys_split_evenly() {
        let k = t(&[&[1.0, 2.0], &[1.0, 2.0]]);
        let out = scaled_dot_attention(&t(&[&[7.0, -3.0]]), &k, &k, None).unwrap();
        assert_eq!(out.weights.data(), &[0.5, 0.5]);
    }

    #[test]
    fn two_dimensional_hand_case() {
        let eye = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let out = scaled_dot_attention(&t(&[&[1.0, 0.0]]), &eye, &eye, None).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let w0 = s.exp() / (s.exp() + 1.0);
        assert!((out.weights.data()[0] - w0).abs() < 1e-12);
        assert!((out.weights.data()[0] - 0.6698).abs() < 1e-4);
        assert!((out.weights.data()[1] - 0.3302).abs() < 1e-4);
    }

    #[test]
    fn masked_positions_get_no_weight() {
        let mut rng = Rng::new(3);
        let q = Tensor::<f64>::from_fn(vec![4, 3], |_| rng.normal());
        let k = Tensor::<f64>::from_fn(vec![4, 3], |_| rng.normal());
        let out = scaled_dot_attention(&q, &k, &k, Some(&AttentionMask::causal(4))).unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                assert!(out.weights.at(&[i, j]) < 1e-9);
            }
        }
        let none = AttentionMask::from_fn(4, 4, |i, _| i != 2);
        assert!(matches!(scaled_dot_attention(&q, &k, &k, Some(&none)), Err(Error::Contract(_))));
    }

    #[test]
    fn positional_values() {
        let pe = positional_encoding::<f64>(3, 6);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.at(&[1, 0]) - 0.841471).abs() < 1e-6);
        assert!((pe.at(&[2, 3]) - (2.0 / 10000f64.powf(2.0 / 6.0)).cos()).abs() < 1e-15);
        assert!(positional_encoding::<f64>(50, 16).data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn mask_helpers() {
        assert!(AttentionMask::causal(3).is_causal());
        assert!(!AttentionMask::from_fn(3, 3, |_, _| true).is_causal());
        let pad = AttentionMask::key_padding(3, &[true, true, false]);
        let both = AttentionMask::causal(3).and(&pad).unwrap();
        assert!(both.get(2, 1) && !both.get(2, 2) && !both.get(0, 1));
    }
}
