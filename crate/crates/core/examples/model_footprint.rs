//! Parameter counts per component for each mode and configuration.
//!
//! ```text
//! cargo run --release --example model_footprint
//! ```

use std::collections::BTreeMap;

use avalign::config::{Mode, ModelConfig};
use avalign::model::Model;

fn main() -> avalign::Result<()> {
    for (label, cfg) in [("full", ModelConfig::full_scale(41)), ("desk", ModelConfig::desk(41)), ("tiny", ModelConfig::tiny())] {
        for mode in [Mode::Audio, Mode::Av, Mode::AvAu] {
            let model = Model::<f32>::new(cfg.clone(), mode, 0)?;
            let mut parts: BTreeMap<String, usize> = BTreeMap::new();
            for (_, name, t) in model.store.iter() {
                let key = name.split('.').take(2).collect::<Vec<_>>().join(".");
                *parts.entry(key).or_default() += t.len();
            }
            println!("{label:<5} {mode:<6} {:>10} params  {:>7.2} MB", model.num_parameters(), model.footprint_bytes() as f64 / 1e6);
            for (part, n) in parts {
                println!("        {part:<24} {n:>10}");
            }
        }
    }
    Ok(())
}
