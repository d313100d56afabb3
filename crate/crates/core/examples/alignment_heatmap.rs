//! Decodes one synthetic utterance with an audio-visual checkpoint and
//! renders the cross-modal alignment as a PNG heatmap, plus a coarse text
//! view in the terminal.
//!
//! ```text
//! cargo run --release --example alignment_heatmap -- <checkpoint_dir> [utterance_index] [out.png]
//! ```
//!
//! Without a checkpoint an untrained model is used, which shows the diffuse
//! alignment training has to sharpen.

use avalign::config::{Mode, ModelConfig};
use avalign::model::Model;
use avalign::training::trainer::{audio_features, MAX_DECODE_LEN};
use avalign::training::{generate_corpus, greedy_decode, monotonicity_score, prepare, DecodeSession};
use avalign::vocab::Vocab;

fn main() -> avalign::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = match args.next() {
        Some(dir) if dir != "-" => Model::load(dir)?,
        _ => Model::new(ModelConfig::desk(Vocab::default().size()), Mode::AvAu, 0)?,
    };
    let index: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("avalign_alignment.png"), Into::into);

    let examples = prepare(&generate_corpus(index + 1, 1, None)?)?;
    let ex = &examples[index];
    let feats = audio_features(&model, &ex.audio(None, 0)?)?;
    let mut session = DecodeSession::new(&model, &feats, Some(&ex.lips))?;
    let alignment = session.alignment().cloned().expect("audio-visual model");
    let hypothesis = greedy_decode(&mut session, MAX_DECODE_LEN)?;

    let vocab = Vocab::default();
    println!("reference  {:?}", ex.transcript.text(&vocab));
    println!("hypothesis {:?}", hypothesis.text(&vocab));
    println!("monotonicity {:.3}", monotonicity_score(&alignment)?.score);
    let argmax = alignment.row_argmax();
    for (i, &j) in argmax.iter().enumerate().step_by(2) {
        println!("{i:>3} {}#", " ".repeat(j));
    }
    alignment.heatmap().write_png(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
