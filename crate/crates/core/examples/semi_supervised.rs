//! Full method against the supervised-only baseline on one seed.
//!
//! Usage: `cargo run --release --example semi_supervised [epochs] [seed]`

use tokenmix::experiment::{run_experiment, ExperimentConfig};

fn main() -> tokenmix::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = epochs;
    cfg.train.seed = seed;
    cfg.train.lr0 = 1.0;
    for sup_only in [true, false] {
        cfg.train.sup_only = sup_only;
        let name = if sup_only { "sup_only" } else { "tokenmix" };
        cfg.output_dir = format!("target/semi_supervised/{name}").into();
        let record = run_experiment(&cfg)?;
        let curve: Vec<String> = record.epoch_miou.iter().map(|m| format!("{m:.3}")).collect();
        println!(
            "{name:<9} val mIoU per epoch [{}], teacher {:.3}, {:.0}s",
            curve.join(" "),
            record.teacher_miou,
            record.wall_clock_secs
        );
    }
    Ok(())
}
