use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 25 ms at 16 kHz.
pub const FRAME_LEN: usize = 400;
/// 10 ms at 16 kHz.
pub const FRAME_HOP: usize = 160;
pub const FFT_SIZE: usize = 1024;
/// One-sided spectrum size for [`FFT_SIZE`].
pub const SPECTRUM_BINS: usize = FFT_SIZE / 2 + 1;

pub(crate) fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Magnitude STFT: Hann-windowed 400-sample frames every 160 samples, each
/// zero-padded to a 1024-point FFT. Returns a `(frames, 513)` matrix.
pub fn stft_magnitude(w: &Waveform) -> Result<Tensor<f64>> {
    w.require_pipeline_rate()?;
    let samples = w.samples();
    if samples.len() < FRAME_LEN {
        return Err(Error::InputTooShort(format!(
            "{} samples, need at least {FRAME_LEN} for one frame",
            samples.len()
        )));
    }
    let frames = (samples.len() - FRAME_LEN) / FRAME_HOP + 1;
    let window = periodic_hann(FRAME_LEN);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut out = Vec::with_capacity(frames * SPECTRUM_BINS);
    for f in 0..frames {
        let frame = &samples[f * FRAME_HOP..f * FRAME_HOP + FRAME_LEN];
        for (slot, (&s, &h)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            *slot = Complex::new(s as f64 * h, 0.0);
        }
        buf[FRAME_LEN..].iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        fft.process(&mut buf);
        out.extend(buf[..SPECTRUM_BINS].iter().map(|c| c.norm()));
    }
    Tensor::new(vec![frames, SPECTRUM_BINS], out)
}
