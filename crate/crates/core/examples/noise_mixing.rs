//! Mixes pink noise into a synthetic utterance at several SNRs and measures
//! the result. The stored WAVs make the degradation audible.
//!
//! ```text
//! cargo run --release --example noise_mixing -- [out_dir]
//! ```

use avalign::rng::Rng;
use avalign::signal::{measure_snr_db, mix_noise, pink_noise, write_wav, SAMPLE_RATE};
use avalign::training::generate_corpus;

fn main() -> avalign::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("avalign_noise"), Into::into);
    std::fs::create_dir_all(&out)?;
    let utterance = generate_corpus(1, 7, None)?.remove(0);
    let noise = pink_noise(utterance.clean.len(), SAMPLE_RATE, &mut Rng::new(11));
    write_wav(out.join("clean.wav"), &utterance.clean)?;
    for snr in [20.0, 10.0, 0.0, -5.0] {
        let (mixed, stats) = mix_noise(&utterance.clean, &noise, snr)?;
        let measured = measure_snr_db(&utterance.clean, &mixed)?;
        if let Some(w) = stats.warning() {
            println!("warning: {w}");
        }
        let path = out.join(format!("snr_{snr}.wav"));
        write_wav(&path, &mixed)?;
        println!("target {snr:>5.1} dB  measured {measured:>8.4} dB  noise gain {:.4}  -> {}", stats.noise_gain, path.display());
    }
    Ok(())
}
