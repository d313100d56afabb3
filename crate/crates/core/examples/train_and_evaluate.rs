//! Trains a model on the synthetic corpus and evaluates it at every noise
//! condition. Writes the checkpoint, loss curve and report.
//!
//! ```text
//! cargo run --release --example train_and_evaluate -- [audio|av|av+au] [steps] [out_dir]
//! ```
//!
//! The default run (av+au, the full step budget) takes several minutes.

use avalign::config::Mode;
use avalign::experiment::{run, RunConfig};

fn main() -> avalign::Result<()> {
    let mut args = std::env::args().skip(1);
    let mode: Mode = args.next().map_or(Ok(Mode::AvAu), |s| s.parse())?;
    let mut cfg = RunConfig {
        mode,
        synthetic: Some(20),
        ..RunConfig::default()
    };
    if let Some(steps) = args.next().and_then(|s| s.parse().ok()) {
        cfg.train.steps = steps;
    }
    let out = args.next().map_or_else(|| std::env::temp_dir().join(format!("avalign_{mode}")), Into::into);

    let start = std::time::Instant::now();
    let outcome = run(&cfg, |p| println!("step {:>5}  loss {:.4}  ({:.0} s)", p.step, p.loss, start.elapsed().as_secs_f64()))?;
    for (condition, cer) in &outcome.report.per_snr {
        println!("CER {condition:>5}: {cer:.4}");
    }
    if let Some(m) = outcome.report.mean_monotonicity() {
        println!("mean alignment monotonicity: {m:.3}");
    }
    outcome.write(&out, &cfg)?;
    println!("wrote {}", out.display());
    Ok(())
}
