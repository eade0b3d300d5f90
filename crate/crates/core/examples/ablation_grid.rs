//! A reduced ablation sweep: one axis, two seeds, a small model and a short
//! schedule. The confidence threshold is lowered to 0.7 (unless it is the
//! swept axis) so the small teacher passes pixels within a few epochs.
//!
//! Usage: `cargo run --release --example ablation_grid [axis]`

use tokenmix::experiment::{default_values, grid_threads, run_ablation_grid, Axis, ExperimentConfig};
use tokenmix::vit::ModelConfig;

fn main() -> tokenmix::Result<()> {
    let axis: Axis = std::env::args().nth(1).unwrap_or_else(|| "rho".into()).parse()?;
    let mut cfg = ExperimentConfig::default();
    cfg.model = ModelConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 16,
        num_layers: 1,
        num_heads: 2,
        ..ModelConfig::default()
    };
    cfg.train.epochs = 4;
    cfg.train.lr0 = 1.0;
    cfg.train.rho = 0.7;
    cfg.data.n_unlabeled = 64;
    cfg.data.n_val = 16;
    cfg.output_dir = "target/ablation_grid".into();
    let table = run_ablation_grid(&cfg, axis, &default_values(axis), &[0, 1], grid_threads()?)?;
    print!("{}", table.render());
    Ok(())
}
