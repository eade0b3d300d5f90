//! Supervised-only training on four labeled scenes until the model fits them.
//!
//! Usage: `cargo run --release --example overfit_probe [steps] [lr] [momentum] [weak]`

use tokenmix::data::{make_splits, Scene, SplitSpec};
use tokenmix::metrics::evaluate;
use tokenmix::trainer::{AugConfig, TrainConfig, Trainer};
use tokenmix::vit::ModelConfig;

fn main() -> tokenmix::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(500);
    let lr0: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let momentum: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.0001);
    let weak: bool = args.next().and_then(|s| s.parse().ok()).unwrap_or(false);
    let model = ModelConfig::default();
    let spec = SplitSpec {
        n_labeled: 4,
        n_unlabeled: 1,
        n_val: 1,
        seed: 0,
    };
    let data = make_splits(&spec, model.image_size, model.num_classes)?;
    let train = TrainConfig {
        lr0,
        sgd_momentum: momentum,
        sup_only: true,
        ..TrainConfig::default()
    };
    let aug = AugConfig {
        weak,
        ..AugConfig::default()
    };
    let mut trainer = Trainer::new(model, train, aug, steps)?;
    let batch: Vec<&Scene> = data.labeled.iter().collect();
    for step in 1..=steps {
        let m = trainer.train_step(&batch, &[])?;
        if step % 50 == 0 || step == 1 {
            let miou = evaluate(trainer.student(), &data.labeled)?.miou;
            println!("step {step:4}  loss {:.5}  train mIoU {miou:.4}", m.l_sup);
        }
    }
    Ok(())
}
