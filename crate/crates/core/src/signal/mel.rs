use super::stft::{FFT_SIZE, SPECTRUM_BINS};
use super::SAMPLE_RATE;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MEL_BINS: usize = 30;
pub const MEL_LOW_HZ: f64 = 80.0;
pub const MEL_HIGH_HZ: f64 = 11_025.0;
/// Magnitudes are clamped to this value before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

/// Log mel magnitudes, one row of width 30 per STFT frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    frames: Tensor<f64>,
}

impl MelSpectrogram {
    pub fn frames(&self) -> &Tensor<f64> {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `(513, 30)` matrix of triangular filters whose edges are equally spaced in
/// mel between 80 Hz and 11,025 Hz. Slopes are linear in mel. Filters above
/// the 8 kHz Nyquist limit receive no FFT bins.
pub fn mel_filterbank() -> Tensor<f64> {
    let (lo, hi) = (hz_to_mel(MEL_LOW_HZ), hz_to_mel(MEL_HIGH_HZ));
    let edges: Vec<f64> = (0..MEL_BINS + 2)
        .map(|i| lo + (hi - lo) * i as f64 / (MEL_BINS + 1) as f64)
        .collect();
    let mut weights = vec![0.0; SPECTRUM_BINS * MEL_BINS];
    for b in 0..SPECTRUM_BINS {
        let mel = hz_to_mel(b as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64);
        for k in 0..MEL_BINS {
            let (left, centre, right) = (edges[k], edges[k + 1], edges[k + 2]);
            let rising = (mel - left) / (centre - left);
            let falling = (right - mel) / (right - centre);
            weights[b * MEL_BINS + k] = rising.min(falling).max(0.0);
        }
    }
    Tensor::new(vec![SPECTRUM_BINS, MEL_BINS], weights).expect("static shape")
}

/// Applies the mel filterbank to a magnitude spectrogram and takes the
/// natural log, clamped below at [`LOG_FLOOR`].
pub fn mel_warp(spec: &Tensor<f64>) -> Result<MelSpectrogram> {
    if spec.rank() != 2 || spec.shape()[1] != SPECTRUM_BINS {
        return Err(Error::shape("mel_warp", spec.shape(), &[0, SPECTRUM_BINS]));
    }
    if spec.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Input("spectrogram magnitudes must be finite and non-negative".into()));
    }
    let mut frames = spec.matmul(&mel_filterbank())?;
    frames
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = v.max(LOG_FLOOR).ln());
    Ok(MelSpectrogram { frames })
}
