//! Seeded synthetic audio-visual corpus.
//!
//! Every character lasts 0.25 s. Its sound is a primary tone shared with a
//! partner character plus a quiet "voicing" tone that only one member of
//! each pair carries, so noise first erases the within-pair contrast. The
//! video shows a mouth patch whose colour names the character and whose
//! height and width follow two action units. Utterances come in twins: the
//! second of each pair swaps some characters for their acoustic partners.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AuTargets;
use crate::rng::Rng;
use crate::signal::{
    hz_to_mel, mix_noise, pink_noise, read_wav, write_wav, Waveform, MEL_BINS, MEL_HIGH_HZ, MEL_LOW_HZ,
    SAMPLE_RATE,
};
use crate::tensor::Tensor;
use crate::visual::VideoFrameSequence;
use crate::vocab::{GraphemeSequence, Vocab};

/// Duration of one character.
pub const CHAR_SECONDS: f64 = 0.25;
pub const VIDEO_FPS: f64 = 25.0;
/// Height and width of the synthetic face frames.
pub const FACE_SIZE: usize = 40;
pub const N_AU: usize = 2;
pub const MIN_CHARS: usize = 3;
pub const MAX_CHARS: usize = 12;

/// Signal levels of the synthetic speech.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Peak amplitude of the primary tone.
    pub primary_amplitude: f64,
    /// Voicing tone amplitude relative to the primary tone.
    pub voicing_ratio: f64,
    /// RMS of the background hiss present in clean recordings.
    pub hiss_rms: f64,
    /// Probability that a twin swaps a character for its partner.
    pub twin_swap: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            primary_amplitude: 0.1,
            voicing_ratio: 0.1,
            hiss_rms: 1e-3,
            twin_swap: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticUtterance {
    pub id: String,
    /// Audio as heard: clean, or mixed with noise when an SNR was requested.
    pub waveform: Waveform,
    pub clean: Waveform,
    pub frames: VideoFrameSequence,
    pub transcript: GraphemeSequence,
    /// Absent for corpora recorded without action-unit labels.
    pub au_targets: Option<AuTargets>,
    pub seed: u64,
    pub snr_db: Option<f64>,
}

/// Centre frequency of mel filter `k`.
fn mel_center_hz(k: usize) -> f64 {
    let (lo, hi) = (hz_to_mel(MEL_LOW_HZ), hz_to_mel(MEL_HIGH_HZ));
    let mel = lo + (k + 1) as f64 * (hi - lo) / (MEL_BINS + 1) as f64;
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Acoustic class shared by a character pair.
fn pair_class(c: usize) -> usize {
    c / 2
}

fn voiced(c: usize) -> bool {
    c % 2 == 1
}

fn partner(c: usize, n_chars: usize) -> usize {
    let p = c ^ 1;
    if p < n_chars {
        p
    } else {
        c
    }
}

const VOICING_FILTER: usize = 2;
const FIRST_PRIMARY_FILTER: usize = 5;

/// Action-unit values `(opening, stretch)` in `[0.1, 0.9]` for a character;
/// partners always differ.
pub fn char_action_units(c: usize) -> [f64; N_AU] {
    let open = 0.1 + 0.8 * ((c * 7) % 19) as f64 / 18.0;
    let stretch = if voiced(c) { 0.8 } else { 0.25 } + 0.1 * ((c / 2) % 2) as f64;
    [open, stretch]
}

/// Mouth colour of a character, distinct for all 38 characters.
pub fn char_colour(c: usize) -> [f64; 3] {
    let hue = (pair_class(c) as f64 / 19.0) * std::f64::consts::TAU;
    let bright = if voiced(c) { 1.0 } else { 0.55 };
    [
        bright * (160.0 + 90.0 * hue.cos()),
        bright * (160.0 + 90.0 * (hue + 2.094).cos()),
        bright * (160.0 + 90.0 * (hue + 4.189).cos()),
    ]
}

fn random_text(vocab: &Vocab, rng: &mut Rng) -> Vec<usize> {
    let len = MIN_CHARS + rng.below(MAX_CHARS - MIN_CHARS + 1);
    (0..len).map(|_| rng.below(vocab.chars().len())).collect()
}

fn twin_of(chars: &[usize], n_chars: usize, p: f64, rng: &mut Rng) -> Vec<usize> {
    let swappable: Vec<usize> = (0..chars.len()).filter(|&i| partner(chars[i], n_chars) != chars[i]).collect();
    let mut out: Vec<usize> = chars
        .iter()
        .map(|&c| if rng.uniform(0.0, 1.0) < p { partner(c, n_chars) } else { c })
        .collect();
    if out == chars && !swappable.is_empty() {
        let i = swappable[rng.below(swappable.len())];
        out[i] = partner(chars[i], n_chars);
    }
    out
}

/// Raised-cosine weight of character `k` at time `t`, with transitions
/// of `ramp` seconds centred on the boundaries.
fn char_weight(k: usize, t: f64, ramp: f64) -> f64 {
    let (start, end) = (k as f64 * CHAR_SECONDS, (k + 1) as f64 * CHAR_SECONDS);
    let edge = |x: f64| -> f64 {
        let u = (x / ramp + 0.5).clamp(0.0, 1.0);
        0.5 - 0.5 * (std::f64::consts::PI * u).cos()
    };
    edge(t - start) * edge(end - t)
}

fn render_audio(chars: &[usize], cfg: &SynthConfig, rng: &mut Rng) -> Result<Waveform> {
    let per_char = (CHAR_SECONDS * SAMPLE_RATE as f64).round() as usize;
    let n = per_char * chars.len();
    let sr = SAMPLE_RATE as f64;
    let mut samples = vec![0.0f64; n];
    let voicing_hz = mel_center_hz(VOICING_FILTER);
    for (k, &c) in chars.iter().enumerate() {
        let f = mel_center_hz(FIRST_PRIMARY_FILTER + pair_class(c));
        let amp = cfg.primary_amplitude * rng.uniform(0.85, 1.15);
        let (ph1, ph2) = (rng.uniform(0.0, 6.283), rng.uniform(0.0, 6.283));
        let lo = (k * per_char).saturating_sub(per_char / 8);
        let hi = ((k + 1) * per_char + per_char / 8).min(n);
        for (i, s) in samples.iter_mut().enumerate().take(hi).skip(lo) {
            let t = i as f64 / sr;
            let w = char_weight(k, t, 0.02);
            if w == 0.0 {
                continue;
            }
            let mut v = (std::f64::consts::TAU * f * t + ph1).sin();
            if voiced(c) {
                v += cfg.voicing_ratio * (std::f64::consts::TAU * voicing_hz * t + ph2).sin();
            }
            *s += amp * w * v;
        }
    }
    for s in samples.iter_mut() {
        *s += cfg.hiss_rms * rng.normal();
    }
    Waveform::new(samples.iter().map(|&s| s.clamp(-1.0, 1.0) as f32).collect(), SAMPLE_RATE)
}

fn render_video(chars: &[usize], rng: &mut Rng) -> Result<(VideoFrameSequence, AuTargets)> {
    let m = (chars.len() as f64 * CHAR_SECONDS * VIDEO_FPS).round() as usize;
    let size = FACE_SIZE;
    let skin = [rng.uniform(170.0, 210.0), rng.uniform(120.0, 150.0), rng.uniform(100.0, 130.0)];
    // Mouth region: bottom 40% of rows, middle 80% of columns.
    let (top, left, right) = ((6 * size).div_ceil(10), (size + 5) / 10, (9 * size + 5) / 10);
    let (cy, cx) = ((top + size) as f64 / 2.0, (left + right) as f64 / 2.0);
    let mut frames = Vec::with_capacity(m * size * size * 3);
    let mut aus = Vec::with_capacity(m * N_AU);
    for j in 0..m {
        let t = (j as f64 + 0.5) / VIDEO_FPS;
        let active = ((t / CHAR_SECONDS) as usize).min(chars.len() - 1);
        let mut au = [0.0; N_AU];
        let mut total = 0.0;
        for (k, &c) in chars.iter().enumerate() {
            let w = char_weight(k, t, 0.08);
            total += w;
            for (a, v) in au.iter_mut().zip(char_action_units(c)) {
                *a += w * v;
            }
        }
        au.iter_mut().for_each(|a| *a /= total);
        aus.extend(au.iter().map(|&a| a as f32));
        let half_h = 0.5 + au[0] * 6.5;
        let half_w = 3.0 + au[1] * 10.0;
        let colour = char_colour(chars[active]);
        for y in 0..size {
            for x in 0..size {
                let inside = ((y as f64 + 0.5 - cy) / half_h).powi(2) + ((x as f64 + 0.5 - cx) / half_w).powi(2) <= 1.0;
                let px = if inside { colour } else { skin };
                frames.extend(px.iter().map(|v| v.round().clamp(0.0, 255.0) as f32));
            }
        }
    }
    let video = VideoFrameSequence::new(Tensor::new(vec![m, size, size, 3], frames)?, VIDEO_FPS)?;
    let au = AuTargets::new(Tensor::new(vec![m, N_AU], aus)?)?;
    Ok((video, au))
}

/// Renders one utterance for the given characters (vocabulary indices
/// without the special-token offset).
pub fn synthesize(id: String, chars: &[usize], seed: u64, cfg: &SynthConfig) -> Result<SyntheticUtterance> {
    if chars.is_empty() {
        return Err(Error::Input("utterance needs at least one character".into()));
    }
    let vocab = Vocab::default();
    let text: String = chars.iter().map(|&c| vocab.chars()[c]).collect();
    let rng = Rng::new(seed);
    let clean = render_audio(chars, cfg, &mut rng.split(0))?;
    let (frames, au_targets) = render_video(chars, &mut rng.split(1))?;
    Ok(SyntheticUtterance {
        id,
        waveform: clean.clone(),
        clean,
        frames,
        transcript: GraphemeSequence::from_text(&vocab, &text)?,
        au_targets: Some(au_targets),
        seed,
        snr_db: None,
    })
}

impl SyntheticUtterance {
    /// Copy with fresh pink noise mixed in at `snr_db`.
    pub fn with_noise(&self, snr_db: f64, noise_seed: u64) -> Result<Self> {
        let noise = pink_noise(self.clean.len(), SAMPLE_RATE, &mut Rng::new(noise_seed));
        let (mixed, _) = mix_noise(&self.clean, &noise, snr_db)?;
        Ok(SyntheticUtterance {
            waveform: mixed,
            snr_db: Some(snr_db),
            ..self.clone()
        })
    }
}

/// `n` utterances from `seed`, with noise at `snr_db` when given.
pub fn generate_corpus(n: usize, seed: u64, snr_db: Option<f64>) -> Result<Vec<SyntheticUtterance>> {
    generate_corpus_with(n, seed, snr_db, &SynthConfig::default())
}

pub fn generate_corpus_with(n: usize, seed: u64, snr_db: Option<f64>, cfg: &SynthConfig) -> Result<Vec<SyntheticUtterance>> {
    if n == 0 {
        return Err(Error::Input("corpus size must be at least 1".into()));
    }
    let vocab = Vocab::default();
    let n_chars = vocab.chars().len();
    let root = Rng::new(seed);
    let mut out = Vec::with_capacity(n);
    let mut prev: Vec<usize> = Vec::new();
    for i in 0..n {
        let mut rng = root.split(i as u64);
        let chars = if i % 2 == 1 {
            twin_of(&prev, n_chars, cfg.twin_swap, &mut rng)
        } else {
            random_text(&vocab, &mut rng)
        };
        let utt_seed = rng.next_u64();
        let mut u = synthesize(format!("utt{i:04}"), &chars, utt_seed, cfg)?;
        if let Some(snr) = snr_db {
            u = u.with_noise(snr, rng.next_u64())?;
        }
        prev = chars;
        out.push(u);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Meta {
    id: String,
    seed: u64,
    snr_db: Option<f64>,
    fps: f64,
    frames: usize,
}

/// One directory per utterance with `audio.wav`, `clean.wav`, `frames/`,
/// `transcript.txt`, `au.avt1` and `meta.json`.
pub fn save_corpus(dir: impl AsRef<Path>, corpus: &[SyntheticUtterance]) -> Result<()> {
    let vocab = Vocab::default();
    for u in corpus {
        let d = dir.as_ref().join(&u.id);
        std::fs::create_dir_all(d.join("frames"))?;
        write_wav(d.join("audio.wav"), &u.waveform)?;
        write_wav(d.join("clean.wav"), &u.clean)?;
        std::fs::write(d.join("transcript.txt"), u.transcript.text(&vocab))?;
        if let Some(au) = &u.au_targets {
            au.activations().save_avt1(d.join("au.avt1"))?;
        }
        let s = u.frames.frames().shape().to_vec();
        let per = s[1] * s[2] * 3;
        for j in 0..u.frames.len() {
            let px: Vec<u8> = u.frames.frames().data()[j * per..(j + 1) * per].iter().map(|&v| v.round() as u8).collect();
            image::RgbImage::from_raw(s[2] as u32, s[1] as u32, px)
                .expect("frame buffer size")
                .save(d.join("frames").join(format!("{j:04}.png")))?;
        }
        let meta = Meta {
            id: u.id.clone(),
            seed: u.seed,
            snr_db: u.snr_db,
            fps: u.frames.fps(),
            frames: u.frames.len(),
        };
        std::fs::write(d.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    }
    Ok(())
}

/// Reads frames from a directory of PNG or PPM images sorted by name.
pub fn read_frames(dir: impl AsRef<Path>, fps: f64) -> Result<VideoFrameSequence> {
    let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("no frames in {}", dir.as_ref().display())));
    }
    let mut data = Vec::new();
    let mut dims = None;
    for p in &paths {
        let img = image::open(p)?.to_rgb8();
        let d = (img.height() as usize, img.width() as usize);
        if *dims.get_or_insert(d) != d {
            return Err(Error::format(p, "frame size differs from the first frame"));
        }
        data.extend(img.into_raw().into_iter().map(f32::from));
    }
    let (h, w) = dims.expect("at least one frame");
    VideoFrameSequence::new(Tensor::new(vec![paths.len(), h, w, 3], data)?, fps)
}

pub fn load_utterance(dir: impl AsRef<Path>) -> Result<SyntheticUtterance> {
    let d = dir.as_ref();
    let meta_path = d.join("meta.json");
    let meta: Meta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)
        .map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let waveform = read_wav(d.join("audio.wav"))?;
    let clean = match read_wav(d.join("clean.wav")) {
        Ok(w) => w,
        Err(_) => waveform.clone(),
    };
    let text = std::fs::read_to_string(d.join("transcript.txt"))?;
    let transcript = GraphemeSequence::from_text(&Vocab::default(), text.trim_end_matches('\n'))?;
    let au_path = d.join("au.avt1");
    let au_targets = if au_path.exists() {
        Some(AuTargets::new(Tensor::load_avt1(au_path)?)?)
    } else {
        None
    };
    Ok(SyntheticUtterance {
        id: meta.id,
        waveform,
        clean,
        frames: read_frames(d.join("frames"), meta.fps)?,
        transcript,
        au_targets,
        seed: meta.seed,
        snr_db: meta.snr_db,
    })
}

/// Loads every utterance directory under `dir`, sorted by name.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<SyntheticUtterance>> {
    let mut dirs: Vec<_> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Input(format!("no utterances under {}", dir.as_ref().display())));
    }
    dirs.iter().map(load_utterance).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::measure_snr_db;

    #[test]
    fn deterministic() {
        assert_eq!(generate_corpus(3, 9, Some(0.0)).unwrap(), generate_corpus(3, 9, Some(0.0)).unwrap());
    }

    #[test]
    fn durations_agree() {
        let u = synthesize("x".into(), &[0, 1, 2, 3, 4], 1, &SynthConfig::default()).unwrap();
        assert_eq!(u.frames.len(), 31);
        assert_eq!(u.au_targets.as_ref().unwrap().len(), 31);
        let audio_s = u.waveform.duration_s();
        let video_s = u.frames.len() as f64 / VIDEO_FPS;
        assert!((audio_s - video_s).abs() <= 1.0 / VIDEO_FPS);
    }

    #[test]
    fn transcripts_in_range_and_twinned() {
        let corpus = generate_corpus(10, 4, None).unwrap();
        for pair in corpus.chunks(2) {
            let (a, b) = (pair[0].transcript.chars(), pair[1].transcript.chars());
            assert!((MIN_CHARS..=MAX_CHARS).contains(&a.len()));
            assert_eq!(a.len(), b.len());
            assert_ne!(a, b);
            assert!(a.iter().zip(b).all(|(x, y)| (x - 3) / 2 == (y - 3) / 2));
        }
    }

    #[test]
    fn noisy_corpus_hits_snr() {
        for u in generate_corpus(4, 2, Some(0.0)).unwrap() {
            let snr = measure_snr_db(&u.clean, &u.waveform).unwrap();
            assert!(snr.abs() < 0.1, "{snr}");
        }
    }

    #[test]
    fn partners_look_different() {
        for c in (0..38).step_by(2) {
            assert_ne!(char_action_units(c), char_action_units(c + 1));
            assert_ne!(char_colour(c), char_colour(c + 1));
        }
    }
}
