//! Prints the lip CNN's per-stage feature shapes and parameter counts for
//! the full-size and the desk configurations.
//!
//! ```text
//! cargo run --release --example cnn_shapes
//! ```

use avalign::autograd::Graph;
use avalign::config::{Mode, ModelConfig};
use avalign::model::Model;
use avalign::tensor::Tensor;
use avalign::visual::LIP_SIZE;

fn main() -> avalign::Result<()> {
    for (label, cfg) in [("full", ModelConfig::full_scale(41)), ("desk", ModelConfig::desk(41))] {
        let model = Model::<f32>::new(cfg, Mode::Av, 0)?;
        let cnn = &model.net.video.as_ref().expect("video branch").cnn;
        let mut g = Graph::eval(&model.store);
        let x = g.input(Tensor::full(vec![1, LIP_SIZE, LIP_SIZE, 3], 128.0));
        let (_, trace) = cnn.forward_traced(&mut g, x)?;
        let cnn_params: usize = model
            .store
            .iter()
            .filter(|(_, name, _)| name.starts_with("video.cnn"))
            .map(|(_, _, t)| t.len())
            .sum();
        println!("{label}: {}", trace.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(" -> "));
        println!("{label}: {cnn_params} CNN parameters, {:.1} MB model", model.footprint_bytes() as f64 / 1e6);
    }
    Ok(())
}
