//! Synthetic corpus, optimisation, decoding and evaluation.

pub mod corpus;
pub mod decode;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use corpus::{generate_corpus, SyntheticUtterance};
pub use decode::{greedy_decode, DecodeSession, NextToken};
pub use metrics::{cer, corpus_cer, levenshtein, monotonicity_score, Monotonicity};
pub use optim::{Adam, OptimizerConfig};
pub use trainer::{
    evaluate, prepare, train, transcribe, EvalReport, Example, LossCurve, LossPoint, TrainConfig, Transcription,
    splice, MIN_SPAN_CHARS, STANDARD_CONDITIONS,
};
