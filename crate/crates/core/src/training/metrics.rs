//! Character error rate and alignment monotonicity.

use crate::align::AlignmentMatrix;
use crate::error::{Error, Result};
use crate::vocab::GraphemeSequence;

/// Minimum number of insertions, deletions and substitutions turning `a`
/// into `b`.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over characters divided by the reference length; special
/// tokens are ignored.
pub fn cer(hyp: &GraphemeSequence, reference: &GraphemeSequence) -> Result<f64> {
    if reference.chars().is_empty() {
        return Err(Error::Contract("CER reference is empty".into()));
    }
    Ok(levenshtein(hyp.chars(), reference.chars()) as f64 / reference.chars().len() as f64)
}

/// Total edit distance over total reference length.
pub fn corpus_cer<'a>(pairs: impl IntoIterator<Item = (&'a GraphemeSequence, &'a GraphemeSequence)>) -> Result<f64> {
    let (mut dist, mut len) = (0usize, 0usize);
    for (hyp, reference) in pairs {
        dist += levenshtein(hyp.chars(), reference.chars());
        len += reference.chars().len();
    }
    if len == 0 {
        return Err(Error::Contract("CER reference corpus is empty".into()));
    }
    Ok(dist as f64 / len as f64)
}

/// Spearman correlation between audio index and most-attended video index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Monotonicity {
    pub score: f64,
    /// Set when every row has the same argmax; the score is then 0.
    pub degenerate: bool,
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn monotonicity_score(a: &AlignmentMatrix) -> Result<Monotonicity> {
    if a.audio_len() < 2 || a.video_len() < 2 {
        return Err(Error::Contract(format!(
            "monotonicity needs at least a 2x2 alignment, got {}x{}",
            a.audio_len(),
            a.video_len()
        )));
    }
    let argmax: Vec<f64> = a.row_argmax().into_iter().map(|j| j as f64).collect();
    if argmax.iter().all(|&j| j == argmax[0]) {
        return Ok(Monotonicity {
            score: 0.0,
            degenerate: true,
        });
    }
    let index: Vec<f64> = (0..argmax.len()).map(|i| i as f64).collect();
    Ok(Monotonicity {
        score: pearson(&average_ranks(&index), &average_ranks(&argmax)),
        degenerate: false,
    })
}
