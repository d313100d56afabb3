//! Greedy autoregressive decoding.

use crate::align::{alignment_from_trace, AlignmentMatrix};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::vocab::{GraphemeSequence, EOS, SOS};

/// Anything that scores the next token given a prefix starting with `<sos>`.
pub trait NextToken {
    fn next_logits(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F: FnMut(&[usize]) -> Result<Vec<f64>>> NextToken for F {
    fn next_logits(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

/// Feeds back the arg-max token until `<eos>` or `max_len` characters.
pub fn greedy_decode(model: &mut impl NextToken, max_len: usize) -> Result<GraphemeSequence> {
    let mut prefix = vec![SOS];
    while prefix.len() <= max_len {
        let logits = model.next_logits(&prefix)?;
        // <pad> and <sos> are never emitted.
        let best = logits
            .iter()
            .enumerate()
            .skip(EOS)
            .fold((EOS, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
            .0;
        if best == EOS {
            break;
        }
        prefix.push(best);
    }
    let mut tokens = prefix.split_off(1);
    tokens.push(EOS);
    GraphemeSequence::from_tokens(tokens)
}

/// Encodes one utterance once and serves decoder queries against it.
pub struct DecodeSession<'m> {
    model: &'m Model<f32>,
    graph: Graph<'m, f32>,
    memory: Var,
    base: usize,
    alignment: Option<AlignmentMatrix>,
}

impl<'m> DecodeSession<'m> {
    /// `audio: [N, 240]`, `lips: [M, 36, 36, 3]` for audio-visual models.
    pub fn new(model: &'m Model<f32>, audio: &Tensor<f32>, lips: Option<&Tensor<f32>>) -> Result<Self> {
        let mut graph = Graph::eval(&model.store);
        let a = graph.input(audio.clone());
        let v = lips.map(|l| graph.input(l.clone()));
        let enc = model.net.encode(&mut graph, a, v)?;
        graph.ensure_finite()?;
        let alignment = if enc.align.is_empty() {
            None
        } else {
            Some(alignment_from_trace(&graph, &enc.align)?)
        };
        Ok(DecodeSession {
            model,
            base: graph.len(),
            memory: enc.memory,
            graph,
            alignment,
        })
    }

    pub fn alignment(&self) -> Option<&AlignmentMatrix> {
        self.alignment.as_ref()
    }
}

impl NextToken for DecodeSession<'_> {
    fn next_logits(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let out = self.model.net.decoder.forward(&mut self.graph, prefix, self.memory)?;
        let logits = self.graph.value(out.out);
        let last = logits.row(logits.rows() - 1).iter().map(|&v| v as f64).collect();
        self.graph.truncate(self.base);
        Ok(last)
    }
}
