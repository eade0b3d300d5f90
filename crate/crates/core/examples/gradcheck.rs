//! Finite-difference gradient checks for every tape operation and for the
//! full semi-supervised loss of a small segmenter.
//!
//! Usage: `cargo run --release --example gradcheck [seeds]`

use tokenmix::gradcheck::{run_suite, TOLERANCE};

fn main() -> tokenmix::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let checks = run_suite(seeds)?;
    for check in checks.iter().filter(|c| c.seed == 0) {
        let worst = checks
            .iter()
            .filter(|c| c.name == check.name)
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max);
        println!("{:<16} {worst:.2e}", check.name);
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("{} checks over {seeds} seeds, {failed} above {TOLERANCE:e}", checks.len());
    Ok(())
}
