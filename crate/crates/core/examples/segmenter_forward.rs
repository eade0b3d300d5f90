//! Builds the default segmenter, runs a batched forward pass and reads back
//! per-pixel predictions and attention maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokenmix::autograd::Tape;
use tokenmix::data::gen_scene;
use tokenmix::vit::{ModelConfig, SegmenterModel};

fn main() -> tokenmix::Result<()> {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = SegmenterModel::new(cfg.clone(), &mut rng)?;
    println!(
        "{} parameters, {} tokens of dim {}, {} layers",
        model.num_parameters(),
        cfg.n_tokens(),
        cfg.embed_dim,
        cfg.num_layers
    );

    let scenes = (0..2)
        .map(|_| gen_scene(&mut rng, cfg.image_size, cfg.num_classes))
        .collect::<tokenmix::Result<Vec<_>>>()?;
    let images: Vec<_> = scenes.iter().map(|s| &s.image).collect();

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let tokens = model.patch_embed(&mut tape, &bound, &images)?;
    let (features, attention) = model.encode_probed(&mut tape, &bound, tokens)?;
    let logits = model.decode(&mut tape, &bound, features)?;
    println!("tokens {:?} -> features {:?} -> logits {:?}", tape.shape(tokens), tape.shape(features), tape.shape(logits));

    let probs = tape.attention_probs(attention[0]).expect("attention node");
    let n = cfg.n_tokens();
    let row: Vec<String> = probs[..n].iter().map(|p| format!("{p:.3}")).collect();
    println!("layer 0, head 0, token 0 attends: [{}]", row.join(" "));

    let preds = model.predict(&images)?;
    println!("untrained prediction histogram: {:?}", preds[0].histogram(cfg.num_classes));
    Ok(())
}
