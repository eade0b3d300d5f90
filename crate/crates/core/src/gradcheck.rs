//! Central finite-difference checks of every differentiable tape operation
//! and of the full training loss of a small segmenter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{gen_token_mask, token_exchange_var, token_swap_back_var, TokenMask};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{feature_dropout, Bound, DecoderHead, ModelConfig, SegmenterModel, LAYER_NORM_EPS};

/// Step for central differences.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

/// `|a − n| / max(|a|, |n|, FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn evaluate(build: &Build<'_>, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

/// Largest relative error between the tape gradient of the scalar
/// `build(inputs)` and central differences, over every input element.
pub fn max_relative_error(build: &Build<'_>, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..grad.numel() {
            let x = probe[i].data()[j];
            probe[i].data_mut()[j] = x + STEP;
            let up = evaluate(build, &probe)?;
            probe[i].data_mut()[j] = x - STEP;
            let down = evaluate(build, &probe)?;
            probe[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
    }
    Ok(worst)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Reduces any output to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
fn project(tape: &mut Tape, out: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = randn(tape.shape(out), &mut rng);
    let w = tape.constant(w);
    let y = tape.mul(out, w)?;
    tape.sum(y)
}

struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: Box<Build<'static>>,
}

fn projected(
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    seed: u64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        shapes,
        build: Box::new(move |tape, v| {
            let out = f(tape, v)?;
            project(tape, out, seed ^ 0x5eed)
        }),
    }
}

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca5e);
    let take: Vec<bool> = (0..5).map(|_| rng.gen_bool(0.5)).collect();
    let index: Vec<usize> = (0..7).map(|_| rng.gen_range(0..5)).collect();
    let targets: Vec<usize> = (0..6).map(|_| rng.gen_range(0..4)).collect();
    let valid: Vec<bool> = (0..6).map(|i| i == 0 || rng.gen_bool(0.7)).collect();
    vec![
        projected("matmul", vec![vec![3, 4], vec![4, 5]], seed, |t, v| t.matmul(v[0], v[1])),
        projected("add", vec![vec![3, 4], vec![3, 4]], seed, |t, v| t.add(v[0], v[1])),
        projected("add_tiled", vec![vec![6, 4], vec![2, 4]], seed, |t, v| t.add_tiled(v[0], v[1])),
        projected("add_bias", vec![vec![6, 4], vec![4]], seed, |t, v| t.add_tiled(v[0], v[1])),
        projected("mul", vec![vec![3, 4], vec![3, 4]], seed, |t, v| t.mul(v[0], v[1])),
        projected("scale", vec![vec![3, 4]], seed, |t, v| t.scale(v[0], -1.7)),
        OpCase {
            name: "sum",
            shapes: vec![vec![3, 4]],
            build: Box::new(|t, v| t.sum(v[0])),
        },
        projected("gelu", vec![vec![4, 5]], seed, |t, v| t.gelu(v[0])),
        projected("softmax", vec![vec![3, 5]], seed, |t, v| t.softmax(v[0])),
        projected("layer_norm", vec![vec![4, 6], vec![6], vec![6]], seed, |t, v| {
            t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)
        }),
        projected("attention", vec![vec![2 * 3, 3 * 4]], seed, |t, v| t.attention(v[0], 2, 3)),
        OpCase {
            name: "cross_entropy",
            shapes: vec![vec![6, 4]],
            build: Box::new(move |t, v| t.cross_entropy(v[0], &targets, &valid)),
        },
        projected("mix_rows", vec![vec![5, 3], vec![5, 3]], seed, move |t, v| {
            t.mix_rows(v[0], v[1], &take)
        }),
        projected("gather_rows", vec![vec![5, 3]], seed, move |t, v| t.gather_rows(v[0], &index)),
        projected("reshape", vec![vec![4, 6]], seed, |t, v| t.reshape(v[0], &[8, 3])),
    ]
}

/// Smallest model with a square token grid: 8×8 images, 4×4 patches.
pub fn probe_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2.0,
        num_classes: 3,
        decoder: DecoderHead::Pixel,
    }
}

/// Supervised loss plus one unsupervised branch with token exchange,
/// swap-back and feature dropout, all randomness fixed by `seed`.
fn composed_case(seed: u64) -> Result<(SegmenterModel, Box<Build<'static>>)> {
    let cfg = probe_model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = SegmenterModel::new(cfg.clone(), &mut rng)?;
    let side = cfg.image_size;
    let px = side * side;
    let image = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[side, side, 3], |_| rng.gen());
    let labeled = [image(&mut rng), image(&mut rng)];
    let unlabeled = [image(&mut rng), image(&mut rng)];
    let sup_targets: Vec<usize> = (0..2 * px).map(|_| rng.gen_range(0..cfg.num_classes)).collect();
    let pseudo: Vec<usize> = (0..2 * px).map(|_| rng.gen_range(0..cfg.num_classes)).collect();
    let gate: Vec<bool> = (0..2 * px).map(|_| rng.gen_bool(0.6)).collect();
    let masks = [
        gen_token_mask(cfg.n_tokens(), 0.5, &mut rng)?,
        gen_token_mask(cfg.n_tokens(), 0.5, &mut rng)?,
    ];
    let mask = TokenMask::concat(&masks);
    let dropout_seed: u64 = rng.gen();
    let shell = model.clone();

    let build = move |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let bound = Bound::from_vars(&shell, vars.to_vec())?;
        let l: Vec<&Tensor> = labeled.iter().collect();
        let u: Vec<&Tensor> = unlabeled.iter().collect();
        let g_l = shell.patch_embed(tape, &bound, &l)?;
        let f_l = shell.encode(tape, &bound, g_l)?;
        let sup_logits = shell.decode(tape, &bound, f_l)?;
        let all = vec![true; sup_targets.len()];
        let sup = tape.cross_entropy(sup_logits, &sup_targets, &all)?;

        let g_u = shell.patch_embed(tape, &bound, &u)?;
        let (mu, ml) = token_exchange_var(tape, g_u, g_l, &mask)?;
        let fu = shell.encode(tape, &bound, mu)?;
        let fl = shell.encode(tape, &bound, ml)?;
        let f = token_swap_back_var(tape, fu, fl, &mask)?;
        let f = feature_dropout(tape, f, 0.2, &mut ChaCha8Rng::seed_from_u64(dropout_seed))?;
        let logits = shell.decode(tape, &bound, f)?;
        let unsup = tape.cross_entropy(logits, &pseudo, &gate)?;
        tape.add(sup, unsup)
    };
    Ok((model, Box::new(build)))
}

/// Every op check and the composed-model check for one seed.
pub fn check_seed(seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in op_cases(seed) {
        let inputs: Vec<Tensor> = case.shapes.iter().map(|s| randn(s, &mut rng)).collect();
        out.push(GradCheck {
            name: case.name,
            seed,
            max_rel_err: max_relative_error(&*case.build, &inputs)?,
        });
    }
    let (model, build) = composed_case(seed)?;
    out.push(GradCheck {
        name: "segmenter_loss",
        seed,
        max_rel_err: max_relative_error(&*build, model.params())?,
    });
    Ok(out)
}

/// Runs [`check_seed`] for `0..n_seeds`.
pub fn run_suite(n_seeds: u64) -> Result<Vec<GradCheck>> {
    if n_seeds == 0 {
        return Err(Error::Contract("gradient suite needs at least one seed".into()));
    }
    let mut all = Vec::new();
    for seed in 0..n_seeds {
        all.extend(check_seed(seed)?);
    }
    Ok(all)
}
