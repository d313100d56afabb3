//! Finite-difference check of every parameter group of a small model, in
//! double precision with fixed dropout masks.
//!
//! ```text
//! cargo run --release --example gradient_check -- [audio|av|av+au]
//! ```

use avalign::config::Mode;
use avalign::gradcheck::{check_model, ModelCheck};

fn main() -> avalign::Result<()> {
    let mode: Mode = std::env::args().nth(1).map_or(Ok(Mode::Av), |s| s.parse())?;
    let start = std::time::Instant::now();
    let groups = check_model(&ModelCheck::tiny(mode))?;
    for g in &groups {
        println!("{:<40} {:>5} coords  max rel err {:.2e}", g.group, g.coordinates, g.max_rel_error);
    }
    let worst = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    println!("{mode}: {} groups, worst {worst:.2e}, {:.1} s", groups.len(), start.elapsed().as_secs_f64());
    Ok(())
}
