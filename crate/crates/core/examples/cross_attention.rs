//! Runs one align block on hand-made encoder outputs and shows that each
//! audio step attends to the video frame sharing its content.
//!
//! ```text
//! cargo run --release --example cross_attention
//! ```

use avalign::align::{align_forward, AlignStack, EncoderOutputs};
use avalign::config::ModelConfig;
use avalign::params::ParamStore;
use avalign::rng::Rng;
use avalign::tensor::Tensor;

fn main() -> avalign::Result<()> {
    let cfg = ModelConfig {
        d_model: 8,
        ..ModelConfig::tiny()
    };
    let mut store = ParamStore::<f64>::new();
    let stack = AlignStack::new(&mut store, "align", &cfg, &mut Rng::new(0));

    // Query and key projections become scaled identities so that attention
    // is plain content matching.
    let ids: Vec<_> = store.iter().map(|(id, name, _)| (id, name.to_owned())).collect();
    for (id, name) in ids {
        if name.ends_with("attn.q.w") || name.ends_with("attn.k.w") {
            let t = store.get_mut(id);
            let d = t.shape()[0];
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = if i / d == i % d { 2.0 } else { 0.0 });
        }
    }

    // Video frame j carries one-hot pattern j % 8; audio step i repeats
    // the pattern of frame 3i/4, the rate ratio of the real streams.
    let (n, m) = (8, 6);
    let o_v = Tensor::from_fn(vec![m, 8], |k| if k % 8 == (k / 8) % 8 { 1.0 } else { 0.0 });
    let o_a = Tensor::from_fn(vec![n, 8], |k| if k % 8 == (3 * (k / 8) / 4) % 8 { 1.0 } else { 0.0 });
    let result = align_forward(&stack, &store, &EncoderOutputs::new(o_a, o_v)?)?;
    for (i, j) in result.alignment.row_argmax().iter().enumerate() {
        let w = result.alignment.weights().row(i)[*j];
        println!("audio {i} -> video {j}  (weight {w:.3})");
    }
    println!("o_AV shape {:?}", result.o_av.shape());
    Ok(())
}
