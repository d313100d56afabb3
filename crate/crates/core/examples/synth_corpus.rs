//! Generates the synthetic audio-visual corpus and writes it to disk in the
//! layout the `avalign` binary reads.
//!
//! ```text
//! cargo run --release --example synth_corpus -- [out_dir] [n]
//! ```
//!
//! Odd-numbered utterances are twins of their predecessor: some characters
//! are swapped for acoustic partners that differ only in a faint voicing
//! tone, while their mouth shapes differ clearly.

use avalign::training::corpus::{char_action_units, save_corpus};
use avalign::training::generate_corpus;
use avalign::vocab::Vocab;

fn main() -> avalign::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("avalign_corpus"), Into::into);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(6);
    let corpus = generate_corpus(n, 1, None)?;
    save_corpus(&out, &corpus)?;
    let vocab = Vocab::default();
    for u in &corpus {
        println!(
            "{}  {:>5.2} s  {:>3} frames  {:?}",
            u.id,
            u.clean.duration_s(),
            u.frames.len(),
            u.transcript.text(&vocab)
        );
    }
    let [open, stretch] = char_action_units(0);
    println!("action units of 'a': opening {open:.2}, stretch {stretch:.2}");
    println!("wrote {n} utterances to {}", out.display());
    Ok(())
}
