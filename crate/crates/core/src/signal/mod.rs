//! Audio front-end: waveform I/O, STFT, mel warping, frame stacking and
//! calibrated noise mixing.

mod mel;
mod noise;
mod stft;
mod wav;

pub use mel::{hz_to_mel, mel_filterbank, mel_warp, MelSpectrogram, LOG_FLOOR, MEL_BINS, MEL_HIGH_HZ, MEL_LOW_HZ};
pub use noise::{measure_snr_db, mix_noise, pink_noise, rms, MixStats, CLIP_WARN_FRACTION};
pub use stft::{stft_magnitude, FFT_SIZE, FRAME_HOP, FRAME_LEN, SPECTRUM_BINS};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The only sample rate accepted by the pipeline.
pub const SAMPLE_RATE: u32 = 16_000;
/// STFT frames concatenated into one feature vector.
pub const STACK_WINDOW: usize = 8;
/// Shift between consecutive stacked windows, in STFT frames.
pub const STACK_HOP: usize = 3;
/// Width of one stacked audio feature vector.
pub const AUDIO_FEATURE_DIM: usize = STACK_WINDOW * MEL_BINS;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::Input(format!("sample {bad} outside [-1, 1]")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub(crate) fn require_pipeline_rate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::Input(format!(
                "sample rate {} Hz is not supported; expected {SAMPLE_RATE} Hz",
                self.sample_rate
            )));
        }
        Ok(())
    }
}

/// Stacked log-mel vectors, one row of width 240 per window.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureSequence {
    vectors: Tensor<f64>,
}

impl AudioFeatureSequence {
    pub fn new(vectors: Tensor<f64>) -> Result<Self> {
        if vectors.rank() != 2 || vectors.shape()[1] != AUDIO_FEATURE_DIM || vectors.shape()[0] == 0 {
            return Err(Error::shape("audio features", vectors.shape(), &[0, AUDIO_FEATURE_DIM]));
        }
        Ok(AudioFeatureSequence { vectors })
    }

    pub fn vectors(&self) -> &Tensor<f64> {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-column mean/variance normalisation over the utterance.
    pub fn normalized(&self) -> Self {
        let (n, d) = (self.len(), AUDIO_FEATURE_DIM);
        let mut out = self.vectors.clone();
        for j in 0..d {
            let col = (0..n).map(|i| self.vectors.data()[i * d + j]);
            let mean = col.clone().sum::<f64>() / n as f64;
            let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + 1e-8).sqrt();
            for i in 0..n {
                let v = &mut out.data_mut()[i * d + j];
                *v = (*v - mean) * inv;
            }
        }
        AudioFeatureSequence { vectors: out }
    }
}

/// Number of stacked windows for `frames` STFT frames.
pub fn stacked_count(frames: usize) -> usize {
    if frames < STACK_WINDOW {
        0
    } else {
        (frames - STACK_WINDOW) / STACK_HOP + 1
    }
}

/// Concatenates 8 consecutive mel frames per vector, advancing 3 frames at a
/// time. A trailing partial window is dropped.
pub fn stack_frames(mel: &MelSpectrogram) -> Result<AudioFeatureSequence> {
    let frames = mel.frames();
    let t = frames.shape()[0];
    if t < STACK_WINDOW {
        return Err(Error::InputTooShort(format!(
            "{t} mel frames, need at least {STACK_WINDOW}"
        )));
    }
    let n = stacked_count(t);
    let mut data = Vec::with_capacity(n * AUDIO_FEATURE_DIM);
    for i in 0..n {
        let start = i * STACK_HOP * MEL_BINS;
        data.extend_from_slice(&frames.data()[start..start + AUDIO_FEATURE_DIM]);
    }
    AudioFeatureSequence::new(Tensor::new(vec![n, AUDIO_FEATURE_DIM], data)?)
}

/// Waveform to stacked log-mel features.
pub fn featurize(w: &Waveform) -> Result<AudioFeatureSequence> {
    let spec = stft_magnitude(w)?;
    let mel = mel_warp(&spec)?;
    stack_frames(&mel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mel_of_len(t: usize) -> MelSpectrogram {
        let spec = Tensor::zeros(vec![t, SPECTRUM_BINS]);
        mel_warp(&spec).unwrap()
    }

    #[test]
    fn stacking_counts() {
        assert_eq!(stack_frames(&mel_of_len(8)).unwrap().len(), 1);
        assert_eq!(stack_frames(&mel_of_len(10)).unwrap().len(), 1);
        assert_eq!(stack_frames(&mel_of_len(11)).unwrap().len(), 2);
        assert!(matches!(stack_frames(&mel_of_len(7)), Err(Error::InputTooShort(_))));
    }

    #[test]
    fn stacked_vectors_concatenate_frames_in_order() {
        let t = 14;
        let spec = Tensor::from_fn(vec![t, SPECTRUM_BINS], |i| (i / SPECTRUM_BINS + 1) as f64);
        let mel = mel_warp(&spec).unwrap();
        let feats = stack_frames(&mel).unwrap();
        assert_eq!(feats.vectors().shape(), &[3, 240]);
        let row = feats.vectors().row(1);
        for k in 0..STACK_WINDOW {
            assert_eq!(&row[k * MEL_BINS..(k + 1) * MEL_BINS], mel.frames().row(3 + k));
        }
    }

    #[test]
    fn one_second_of_audio() {
        let w = Waveform::new(vec![0.0; 16_000], SAMPLE_RATE).unwrap();
        let feats = featurize(&w).unwrap();
        assert_eq!(feats.vectors().shape(), &[31, 240]);
    }

    #[test]
    fn other_rates_rejected() {
        let w = Waveform::new(vec![0.0; 8000], 8000).unwrap();
        assert!(featurize(&w).is_err());
    }

    #[test]
    fn samples_outside_unit_range_rejected() {
        assert!(Waveform::new(vec![0.5, 1.5], SAMPLE_RATE).is_err());
        assert!(Waveform::new(vec![f32::NAN], SAMPLE_RATE).is_err());
    }

    #[test]
    fn normalisation_centres_columns() {
        let spec = Tensor::from_fn(vec![20, SPECTRUM_BINS], |i| ((i * 7919) % 13) as f64 + 1.0);
        let feats = stack_frames(&mel_warp(&spec).unwrap()).unwrap().normalized();
        let n = feats.len();
        for j in [0, 17, 239] {
            let mean: f64 = (0..n).map(|i| feats.vectors().data()[i * 240 + j]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-9);
        }
    }

    fn naive_windows(len: usize, window: usize, hop: usize) -> usize {
        let mut count = 0;
        let mut start = 0;
        while start + window <= len {
            count += 1;
            start += hop;
        }
        count
    }

    proptest! {
        #[test]
        fn frame_count_formulas(len in 400usize..40_000) {
            let frames = (len - FRAME_LEN) / FRAME_HOP + 1;
            prop_assert_eq!(frames, naive_windows(len, FRAME_LEN, FRAME_HOP));
            prop_assert_eq!(stacked_count(frames), naive_windows(frames, STACK_WINDOW, STACK_HOP));
        }
    }
}
