use super::Waveform;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Fraction of clipped samples above which [`MixStats::warning`] fires.
pub const CLIP_WARN_FRACTION: f64 = 0.01;

pub fn rms(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / samples.len() as f64).sqrt()
}

fn mean_square(samples: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = samples.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Side information from [`mix_noise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixStats {
    /// Gain applied to the (tiled or cropped) noise.
    pub noise_gain: f64,
    pub clipped_fraction: f64,
}

impl MixStats {
    pub fn warning(&self) -> Option<String> {
        (self.clipped_fraction > CLIP_WARN_FRACTION).then(|| {
            format!(
                "{:.2}% of mixed samples were clipped to [-1, 1]",
                100.0 * self.clipped_fraction
            )
        })
    }
}

/// Adds `noise` to `clean` at the requested signal-to-noise ratio.
///
/// The noise is tiled (or cropped) to the clean length, then scaled so that
/// `10·log10(P_clean / P_noise) == snr_db` with mean-square power over the
/// mixed region. The sum is clipped to `[-1, 1]`.
pub fn mix_noise(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<(Waveform, MixStats)> {
    if clean.sample_rate() != noise.sample_rate() {
        return Err(Error::Input(format!(
            "sample rates differ: clean {} Hz, noise {} Hz",
            clean.sample_rate(),
            noise.sample_rate()
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::Input(format!("SNR {snr_db} dB is not finite")));
    }
    let n = clean.len();
    let p_clean = mean_square(clean.samples().iter().map(|&s| s as f64));
    if p_clean == 0.0 {
        return Err(Error::UndefinedSnr);
    }
    if noise.is_empty() {
        return Err(Error::Input("noise waveform is empty".into()));
    }
    let tiled = || noise.samples().iter().cycle().take(n).map(|&s| s as f64);
    let p_noise = mean_square(tiled());
    if p_noise == 0.0 {
        return Err(Error::Input("noise waveform is silent".into()));
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut clipped = 0usize;
    let mixed = clean
        .samples()
        .iter()
        .zip(tiled())
        .map(|(&s, v)| {
            let m = s as f64 + gain * v;
            if m.abs() > 1.0 {
                clipped += 1;
            }
            m.clamp(-1.0, 1.0) as f32
        })
        .collect();
    let stats = MixStats {
        noise_gain: gain,
        clipped_fraction: clipped as f64 / n.max(1) as f64,
    };
    Ok((Waveform::new(mixed, clean.sample_rate())?, stats))
}

/// SNR of `mixed` relative to `clean`, treating `mixed - clean` as the noise.
pub fn measure_snr_db(clean: &Waveform, mixed: &Waveform) -> Result<f64> {
    if clean.len() != mixed.len() {
        return Err(Error::shape("measure_snr_db", &[clean.len()], &[mixed.len()]));
    }
    let p_clean = mean_square(clean.samples().iter().map(|&s| s as f64));
    let p_noise = mean_square(
        clean
            .samples()
            .iter()
            .zip(mixed.samples())
            .map(|(&c, &m)| m as f64 - c as f64),
    );
    if p_clean == 0.0 {
        return Err(Error::UndefinedSnr);
    }
    Ok(10.0 * (p_clean / p_noise).log10())
}

/// Deterministic pink (1/f) noise with RMS 0.1, from Kellet's filtered-white method.
pub fn pink_noise(len: usize, sample_rate: u32, rng: &mut Rng) -> Waveform {
    const WARMUP: usize = 4096;
    let mut b = [0.0f64; 7];
    let mut raw = Vec::with_capacity(len);
    for i in 0..len + WARMUP {
        let white = rng.uniform(-1.0, 1.0);
        b[0] = 0.99886 * b[0] + white * 0.0555179;
        b[1] = 0.99332 * b[1] + white * 0.0750759;
        b[2] = 0.96900 * b[2] + white * 0.1538520;
        b[3] = 0.86650 * b[3] + white * 0.3104856;
        b[4] = 0.55000 * b[4] + white * 0.5329522;
        b[5] = -0.7616 * b[5] - white * 0.0168980;
        let pink = b.iter().sum::<f64>() + white * 0.5362;
        b[6] = white * 0.115926;
        if i >= WARMUP {
            raw.push(pink);
        }
    }
    let level = mean_square(raw.iter().copied()).sqrt().max(f64::MIN_POSITIVE);
    let samples = raw
        .iter()
        .map(|v| (v * 0.1 / level).clamp(-1.0, 1.0) as f32)
        .collect();
    Waveform::new(samples, sample_rate).expect("clamped to unit range")
}
