//! Turns a WAV file into stacked log-mel features and reports each stage.
//!
//! ```text
//! cargo run --release --example featurize_wav -- [input.wav]
//! ```
//!
//! Without an argument a two-tone test signal is synthesised first.

use avalign::signal::{featurize, mel_warp, read_wav, stft_magnitude, write_wav, Waveform, SAMPLE_RATE};

fn main() -> avalign::Result<()> {
    let wave = match std::env::args().nth(1) {
        Some(path) => read_wav(path)?,
        None => {
            let samples = (0..SAMPLE_RATE as usize * 2)
                .map(|i| {
                    let t = i as f64 / SAMPLE_RATE as f64;
                    (0.2 * (2.0 * std::f64::consts::PI * 440.0 * t).sin() + 0.1 * (2.0 * std::f64::consts::PI * 1800.0 * t).sin()) as f32
                })
                .collect();
            let w = Waveform::new(samples, SAMPLE_RATE)?;
            let path = std::env::temp_dir().join("avalign_tone.wav");
            write_wav(&path, &w)?;
            println!("synthesised {}", path.display());
            w
        }
    };
    let spec = stft_magnitude(&wave)?;
    let mel = mel_warp(&spec)?;
    let feats = featurize(&wave)?;
    println!("duration        {:.3} s", wave.duration_s());
    println!("STFT magnitude  {:?}", spec.shape());
    println!("log-mel         {:?}", mel.frames().shape());
    println!("stacked         {:?}", feats.vectors().shape());

    // Loudest mel band of the first stacked vector's first frame.
    let first = &feats.vectors().row(0)[..30];
    let band = (0..30).max_by(|&a, &b| first[a].total_cmp(&first[b])).unwrap();
    println!("loudest band in frame 0: {band}");
    Ok(())
}
