//! Trains briefly, saves the student, reloads it from disk and evaluates it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokenmix::data::{make_splits, Scene, SplitSpec};
use tokenmix::metrics::evaluate;
use tokenmix::trainer::{AugConfig, TrainConfig, Trainer};
use tokenmix::vit::{ModelConfig, SegmenterModel};

fn main() -> tokenmix::Result<()> {
    let model = ModelConfig::default();
    let data = make_splits(&SplitSpec::default(), model.image_size, model.num_classes)?;
    let steps = 60;
    let train = TrainConfig {
        lr0: 1.0,
        sup_only: true,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model.clone(), train, AugConfig::default(), steps)?;
    let batch: Vec<&Scene> = data.labeled.iter().collect();
    for _ in 0..steps {
        trainer.train_step(&batch, &[])?;
    }
    let path = std::env::temp_dir().join("tokenmix_student.ckpt");
    trainer.student().save(&path)?;
    let loaded = SegmenterModel::load(&path)?;
    println!("checkpoint {} round-trips: {}", path.display(), &loaded == trainer.student());

    let report = evaluate(&loaded, &data.val)?;
    println!("val mIoU {:.4}", report.miou);
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        println!("  class {c}: {}", iou.map_or("absent".to_string(), |v| format!("{v:.4}")));
    }
    let untrained = SegmenterModel::new(model, &mut ChaCha8Rng::seed_from_u64(1))?;
    println!("untrained val mIoU {:.4}", evaluate(&untrained, &data.val)?.miou);
    Ok(())
}
