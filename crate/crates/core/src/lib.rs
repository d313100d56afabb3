//! Audio-visual speech recognition with a cross-modal align stack.
//!
//! Audio becomes stacked log-mel vectors ([`signal`]) and lip frames pass
//! through a residual CNN ([`visual`]). Each stream has its own Transformer
//! encoder. The [`align`] stack lets every audio position attend over the
//! video sequence and adds the visual context back onto the audio stream.
//! A character decoder reads the fused sequence. An optional head regresses
//! facial action units from the video encoder.
//!
//! Everything runs on a small reverse-mode tape ([`autograd`]) over dense
//! row-major tensors ([`tensor`]). [`training`] holds the optimizer, the
//! synthetic corpus, decoding and metrics, and [`experiment`] ties them into
//! reproducible runs that the `avalign` binary exposes.

pub mod align;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod params;
pub mod rng;
pub mod signal;
pub mod tensor;
pub mod training;
pub mod transformer;
pub mod visual;
pub mod vocab;

pub use error::{Error, Result};
