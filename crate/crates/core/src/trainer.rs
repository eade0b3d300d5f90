//! Teacher-student training with a dual-branch unsupervised loss.
//!
//! One step:
//! 1. weak-augment the labeled batch, supervised cross-entropy on it;
//! 2. weak-augment the unlabeled batch, pseudo-label it with the teacher;
//! 3. per branch: strong-augment, optionally mix (tokens or pixels), optionally
//!    drop features, cross-entropy against confident pseudo-labels;
//! 4. `L = L_sup + (L_1 + L_2) / 2`, SGD on the student, EMA into the teacher.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{
    classmix_classes, classmix_mask, gen_token_mask, token_exchange_var, token_swap_back_var, tokenmix_star_mask,
    CutBox, Mixing, StrongConfig, StrongParams, TokenMask, WeakParams,
};
use crate::autograd::{Tape, Var};
use crate::data::{LabelMap, Scene, UnlabeledScene};
use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Tensor};
use crate::vit::{argmax, feature_dropout, Bound, ModelConfig, SegmenterModel};

/// Where TokenMix (or the selected mixing baseline) and feature dropout are
/// applied in the two unsupervised branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchDesign {
    D1,
    D2,
    D3,
    D4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchFlags {
    pub mixing: bool,
    pub dropout: bool,
}

impl BranchDesign {
    pub const ALL: [BranchDesign; 4] = [BranchDesign::D1, BranchDesign::D2, BranchDesign::D3, BranchDesign::D4];

    pub fn flags(self) -> [BranchFlags; 2] {
        let f = |mixing, dropout| BranchFlags { mixing, dropout };
        match self {
            BranchDesign::D1 => [f(true, false), f(true, false)],
            BranchDesign::D2 => [f(true, false), f(false, true)],
            BranchDesign::D3 => [f(true, true), f(true, true)],
            BranchDesign::D4 => [f(true, true), f(true, false)],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BranchDesign::D1 => "D1",
            BranchDesign::D2 => "D2",
            BranchDesign::D3 => "D3",
            BranchDesign::D4 => "D4",
        }
    }
}

impl FromStr for BranchDesign {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        BranchDesign::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("expected one of D1, D2, D3, D4; got {s:?}"))
    }
}

impl fmt::Display for BranchDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the per-pixel losses of an unsupervised branch are averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnsupReduction {
    /// Sum over pixels with `conf > rho`, divided by all pixels.
    AllPixels,
    /// Sum over pixels with `conf > rho`, divided by the number of those pixels.
    Gated,
}

impl UnsupReduction {
    pub const ALL: [UnsupReduction; 2] = [UnsupReduction::AllPixels, UnsupReduction::Gated];

    pub fn as_str(self) -> &'static str {
        match self {
            UnsupReduction::AllPixels => "all",
            UnsupReduction::Gated => "gated",
        }
    }
}

impl FromStr for UnsupReduction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        UnsupReduction::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("expected all or gated; got {s:?}"))
    }
}

impl fmt::Display for UnsupReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub sgd_momentum: f64,
    pub poly_power: f64,
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub branch_design: BranchDesign,
    pub rho: f64,
    pub unsup_reduction: UnsupReduction,
    pub theta: f64,
    /// Cap the EMA decay at `1 - 1/(t+1)` during the first steps so the
    /// teacher starts from the student's running average.
    pub ema_warmup: bool,
    /// Skip the unsupervised branches entirely.
    pub sup_only: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.05,
            sgd_momentum: 0.0001,
            poly_power: 0.9,
            epochs: 20,
            batch_labeled: 4,
            batch_unlabeled: 4,
            branch_design: BranchDesign::D3,
            rho: 0.95,
            unsup_reduction: UnsupReduction::AllPixels,
            theta: 0.999,
            ema_warmup: true,
            sup_only: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |key: &'static str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be in [0, 1], got {v}")))
            }
        };
        unit("rho", self.rho)?;
        unit("theta", self.theta)?;
        unit("sgd_momentum", self.sgd_momentum)?;
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return Err(Error::config("lr0", format!("must be finite and non-negative, got {}", self.lr0)));
        }
        if !(self.poly_power.is_finite() && self.poly_power > 0.0) {
            return Err(Error::config("poly_power", "must be positive"));
        }
        for (key, v) in [
            ("epochs", self.epochs),
            ("batch_labeled", self.batch_labeled),
            ("batch_unlabeled", self.batch_unlabeled),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugConfig {
    pub baseline: Mixing,
    pub swap_ratio: f64,
    pub dropout_rate: f64,
    pub star_block: usize,
    pub weak: bool,
    pub strong: StrongConfig,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            baseline: Mixing::TokenMix,
            swap_ratio: 0.5,
            dropout_rate: 0.1,
            star_block: 2,
            weak: true,
            strong: StrongConfig::ALL,
        }
    }
}

impl AugConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(0.0..=1.0).contains(&self.swap_ratio) {
            return Err(Error::config("swap_ratio", format!("must be in [0, 1], got {}", self.swap_ratio)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(
                "dropout_rate",
                format!("must be in [0, 1), got {}", self.dropout_rate),
            ));
        }
        if self.star_block == 0 || !model.grid_side().is_multiple_of(self.star_block) {
            return Err(Error::config(
                "star_block",
                format!("{} does not divide {} tokens per side", self.star_block, model.grid_side()),
            ));
        }
        Ok(())
    }
}

/// `t ← θ·t + (1−θ)·s` for every parameter.
pub fn ema_update(teacher: &mut SegmenterModel, student: &SegmenterModel, theta: f64) -> Result<()> {
    if teacher.names() != student.names() {
        return Err(Error::Contract("teacher and student have different parameter layouts".into()));
    }
    for (t, s) in teacher.params_mut().iter_mut().zip(student.params()) {
        if t.shape() != s.shape() {
            return Err(Error::Shape {
                op: "ema_update",
                lhs: t.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = theta * *a + (1.0 - theta) * b;
        }
    }
    Ok(())
}

/// Effective EMA decay at 1-based step `t`.
pub fn ema_decay(theta: f64, step: usize, warmup: bool) -> f64 {
    if warmup {
        theta.min(1.0 - 1.0 / (step as f64 + 1.0))
    } else {
        theta
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub label: LabelMap,
    /// Max softmax probability per pixel.
    pub conf: Vec<f64>,
}

/// Splits `(B·H·W) × C` logits into per-image argmax maps and confidences.
pub fn pseudo_from_logits(logits: &Tensor, height: usize, width: usize) -> Result<Vec<PseudoLabel>> {
    let c = logits.cols();
    let per_image = height * width;
    if !logits.rows().is_multiple_of(per_image) {
        return Err(Error::Shape {
            op: "pseudo_label",
            lhs: logits.shape().to_vec(),
            rhs: vec![height, width],
        });
    }
    let probs = softmax_rows(logits.data(), c);
    Ok(probs
        .chunks_exact(per_image * c)
        .map(|img| {
            let (data, conf) = img
                .chunks_exact(c)
                .map(|row| {
                    let k = argmax(row);
                    (k as u8, row[k])
                })
                .unzip();
            PseudoLabel {
                label: LabelMap { height, width, data },
                conf,
            }
        })
        .collect())
}

/// Teacher argmax and confidence on the given (weak) views; no tape.
pub fn pseudo_label(teacher: &SegmenterModel, images: &[&Tensor]) -> Result<Vec<PseudoLabel>> {
    let side = teacher.config().image_size;
    pseudo_from_logits(&teacher.logits(images)?, side, side)
}

/// Mean per-pixel cross-entropy of the student on labeled images.
pub fn supervised_loss(
    tape: &mut Tape,
    student: &SegmenterModel,
    bound: &Bound,
    tokens: Var,
    labels: &[&LabelMap],
) -> Result<Var> {
    let features = student.encode(tape, bound, tokens)?;
    let logits = student.decode(tape, bound, features)?;
    let targets: Vec<usize> = labels.iter().flat_map(|l| l.targets()).collect();
    let valid = vec![true; targets.len()];
    tape.cross_entropy(logits, &targets, &valid)
}

/// Student input and targets for one unsupervised branch.
#[derive(Clone, Debug)]
pub struct BranchBatch {
    pub images: Vec<Tensor>,
    pub targets: Vec<usize>,
    pub conf: Vec<f64>,
}

/// Token-level mixing for one branch: donor rows aligned with the
/// unlabeled rows, and the exchange mask over all of them.
pub struct TokenMixing<'a> {
    pub donor: Var,
    pub mask: &'a TokenMask,
}

/// Cross-entropy against pseudo-labels on pixels with `conf > rho`, averaged
/// per `reduction` (0 when none pass). Returns the loss and the number of
/// pixels that passed.
#[allow(clippy::too_many_arguments)]
pub fn unsupervised_branch_loss(
    tape: &mut Tape,
    student: &SegmenterModel,
    bound: &Bound,
    batch: &BranchBatch,
    rho: f64,
    reduction: UnsupReduction,
    mixing: Option<TokenMixing<'_>>,
    dropout_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, usize)> {
    let images: Vec<&Tensor> = batch.images.iter().collect();
    let g_u = student.patch_embed(tape, bound, &images)?;
    let f_u = match mixing {
        None => student.encode(tape, bound, g_u)?,
        Some(TokenMixing { donor, mask }) => {
            let (g_u, g_l) = token_exchange_var(tape, g_u, donor, mask)?;
            let f_u = student.encode(tape, bound, g_u)?;
            let f_l = student.encode(tape, bound, g_l)?;
            token_swap_back_var(tape, f_u, f_l, mask)?
        }
    };
    let f_u = feature_dropout(tape, f_u, dropout_rate, rng)?;
    let logits = student.decode(tape, bound, f_u)?;
    let valid: Vec<bool> = batch.conf.iter().map(|&c| c > rho).collect();
    let passed = valid.iter().filter(|&&v| v).count();
    let gated = tape.cross_entropy(logits, &batch.targets, &valid)?;
    let loss = match reduction {
        UnsupReduction::Gated => gated,
        UnsupReduction::AllPixels => tape.scale(gated, passed as f64 / valid.len() as f64)?,
    };
    Ok((loss, passed))
}

/// `(b1 + b2) / 2`
pub fn dual_branch_loss(tape: &mut Tape, b1: Var, b2: Var) -> Result<Var> {
    let s = tape.add(b1, b2)?;
    tape.scale(s, 0.5)
}

/// `lr0 · (1 − iter/total)^power`
pub fn poly_lr(lr0: f64, iter: usize, total_iters: usize, power: f64) -> Result<f64> {
    if total_iters == 0 || iter > total_iters {
        return Err(Error::Contract(format!(
            "poly_lr iteration {iter} outside [0, {total_iters}]"
        )));
    }
    Ok(lr0 * (1.0 - iter as f64 / total_iters as f64).powf(power))
}

/// `v ← μ·v + g`, `p ← p − lr·v`
pub fn sgd_momentum_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Contract(format!(
            "sgd step over {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Shape {
                op: "sgd_momentum_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut().iter_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Cyclic repetition of `items` up to `target_count`.
pub fn replicate_labeled<T: Clone>(items: &[T], target_count: usize) -> Result<Vec<T>> {
    if items.is_empty() {
        return Err(Error::config("n_labeled", "labeled set is empty"));
    }
    Ok(items.iter().cycle().take(target_count).cloned().collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub l_sup: f64,
    pub l_unsup1: f64,
    pub l_unsup2: f64,
    /// Fraction of unlabeled pixels whose confidence exceeds `rho`.
    pub gate_frac: f64,
    pub lr: f64,
    /// EMA decay actually applied this step.
    pub theta: f64,
    pub rho: f64,
}

impl StepMetrics {
    /// `key=value` pairs; floats print in shortest round-trip form.
    pub fn to_line(&self) -> String {
        format!(
            "step={} l_sup={} l_unsup1={} l_unsup2={} gate_frac={} lr={} theta={} rho={}",
            self.step, self.l_sup, self.l_unsup1, self.l_unsup2, self.gate_frac, self.lr, self.theta, self.rho
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = |msg: String| Error::Contract(format!("metric line {line:?}: {msg}"));
        let mut m = StepMetrics {
            step: 0,
            l_sup: 0.0,
            l_unsup1: 0.0,
            l_unsup2: 0.0,
            gate_frac: 0.0,
            lr: 0.0,
            theta: 0.0,
            rho: 0.0,
        };
        let mut seen = 0;
        for pair in line.split_whitespace() {
            let (k, v) = pair.split_once('=').ok_or_else(|| bad(format!("{pair:?} is not key=value")))?;
            if k == "step" {
                m.step = v.parse().map_err(|e| bad(format!("step: {e}")))?;
            } else {
                let slot = match k {
                    "l_sup" => &mut m.l_sup,
                    "l_unsup1" => &mut m.l_unsup1,
                    "l_unsup2" => &mut m.l_unsup2,
                    "gate_frac" => &mut m.gate_frac,
                    "lr" => &mut m.lr,
                    "theta" => &mut m.theta,
                    "rho" => &mut m.rho,
                    other => return Err(bad(format!("unknown key {other:?}"))),
                };
                *slot = v.parse().map_err(|e| bad(format!("{k}: {e}")))?;
            }
            seen += 1;
        }
        if seen != 8 {
            return Err(bad("expected 8 fields".into()));
        }
        Ok(m)
    }
}

/// Independent random streams derived from one seed, so that enabling the
/// unsupervised path never perturbs initialization, data order or the
/// labeled augmentation.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const DATA_ORDER: u64 = 1;
    pub const LABELED_AUG: u64 = 2;
    pub const UNLABELED_AUG: u64 = 3;
    pub const BRANCH_1: u64 = 4;
    pub const BRANCH_2: u64 = 5;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const HISTORY: usize = 10;

/// Student, EMA teacher and optimizer state for one run.
pub struct Trainer {
    train: TrainConfig,
    aug: AugConfig,
    student: SegmenterModel,
    teacher: SegmenterModel,
    velocity: Vec<Tensor>,
    step: usize,
    total_steps: usize,
    labeled_rng: ChaCha8Rng,
    unlabeled_rng: ChaCha8Rng,
    branch_rngs: [ChaCha8Rng; 2],
    history: VecDeque<String>,
}

impl Trainer {
    /// Fresh student from the seed's init stream; the teacher starts as a
    /// copy of it.
    pub fn new(model: ModelConfig, train: TrainConfig, aug: AugConfig, total_steps: usize) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        aug.validate(&model)?;
        if total_steps == 0 {
            return Err(Error::config("epochs", "run has no steps"));
        }
        let seed = train.seed;
        let student = SegmenterModel::new(model, &mut stream_rng(seed, streams::INIT))?;
        let velocity = student.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            teacher: student.clone(),
            student,
            velocity,
            step: 0,
            total_steps,
            labeled_rng: stream_rng(seed, streams::LABELED_AUG),
            unlabeled_rng: stream_rng(seed, streams::UNLABELED_AUG),
            branch_rngs: [
                stream_rng(seed, streams::BRANCH_1),
                stream_rng(seed, streams::BRANCH_2),
            ],
            history: VecDeque::with_capacity(HISTORY),
            train,
            aug,
        })
    }

    pub fn student(&self) -> &SegmenterModel {
        &self.student
    }

    pub fn teacher(&self) -> &SegmenterModel {
        &self.teacher
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train
    }

    pub fn aug_config(&self) -> &AugConfig {
        &self.aug
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// Exchanges the two branches' random streams.
    pub fn swap_branch_streams(&mut self) {
        self.branch_rngs.swap(0, 1);
    }

    /// Last metric lines, oldest first.
    pub fn recent_lines(&self) -> Vec<String> {
        self.history.iter().cloned().collect()
    }

    fn weak_view(weak: bool, rng: &mut ChaCha8Rng, size: usize) -> WeakParams {
        if weak {
            WeakParams::sample(rng, size)
        } else {
            WeakParams::identity(size)
        }
    }

    /// One optimization step. A non-finite value anywhere aborts with
    /// [`Error::Diverged`] carrying the recent metric lines.
    pub fn train_step(&mut self, labeled: &[&Scene], unlabeled: &[&UnlabeledScene]) -> Result<StepMetrics> {
        match self.step_inner(labeled, unlabeled) {
            Err(Error::NonFinite { op }) => Err(Error::Diverged {
                step: self.step,
                msg: format!("non-finite value in {op}"),
                last_lines: self.recent_lines(),
            }),
            other => other,
        }
    }

    fn step_inner(&mut self, labeled: &[&Scene], unlabeled: &[&UnlabeledScene]) -> Result<StepMetrics> {
        if labeled.is_empty() || (!self.train.sup_only && unlabeled.is_empty()) {
            return Err(Error::Contract("train_step needs non-empty batches".into()));
        }
        let lr = poly_lr(self.train.lr0, self.step, self.total_steps, self.train.poly_power)?;
        let size = self.student.config().image_size;

        let mut l_images = Vec::with_capacity(labeled.len());
        let mut l_labels = Vec::with_capacity(labeled.len());
        for scene in labeled {
            let w = Self::weak_view(self.aug.weak, &mut self.labeled_rng, size);
            l_images.push(w.apply_image(&scene.image)?);
            l_labels.push(w.apply_label(&scene.label)?);
        }

        let mut tape = Tape::new();
        let bound = self.student.bind(&mut tape, true);
        let l_refs: Vec<&Tensor> = l_images.iter().collect();
        let g_l = self.student.patch_embed(&mut tape, &bound, &l_refs)?;
        let label_refs: Vec<&LabelMap> = l_labels.iter().collect();
        let l_sup = supervised_loss(&mut tape, &self.student, &bound, g_l, &label_refs)?;

        let (loss, l_unsup, gate_frac) = if self.train.sup_only {
            (l_sup, [0.0, 0.0], 0.0)
        } else {
            let (u, l_unsup, gate_frac) = self.unsupervised(&mut tape, &bound, g_l, labeled.len(), unlabeled)?;
            (tape.add(l_sup, u)?, l_unsup, gate_frac)
        };
        let l_sup_value = tape.value(l_sup).data()[0];
        tape.backward(loss)?;
        let grads: Vec<Tensor> = bound
            .vars()
            .iter()
            .zip(self.student.params())
            .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        drop(tape);

        sgd_momentum_step(
            self.student.params_mut(),
            &grads,
            &mut self.velocity,
            lr,
            self.train.sgd_momentum,
        )?;
        if self.student.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { op: "sgd_momentum_step" });
        }
        self.step += 1;
        let theta = ema_decay(self.train.theta, self.step, self.train.ema_warmup);
        ema_update(&mut self.teacher, &self.student, theta)?;

        let metrics = StepMetrics {
            step: self.step,
            l_sup: l_sup_value,
            l_unsup1: l_unsup[0],
            l_unsup2: l_unsup[1],
            gate_frac,
            lr,
            theta,
            rho: self.train.rho,
        };
        if self.history.len() == HISTORY {
            self.history.pop_front();
        }
        self.history.push_back(metrics.to_line());
        Ok(metrics)
    }

    /// Returns the dual-branch loss node, both branch values and the gate
    /// fraction.
    fn unsupervised(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        g_l: Var,
        n_labeled: usize,
        unlabeled: &[&UnlabeledScene],
    ) -> Result<(Var, [f64; 2], f64)> {
        let cfg = self.student.config().clone();
        let size = cfg.image_size;
        let n = cfg.n_tokens();
        let b_u = unlabeled.len();

        let mut weak = Vec::with_capacity(b_u);
        for scene in unlabeled {
            let w = Self::weak_view(self.aug.weak, &mut self.unlabeled_rng, size);
            weak.push(w.apply_image(&scene.image)?);
        }
        let weak_refs: Vec<&Tensor> = weak.iter().collect();
        let pseudo = pseudo_label(&self.teacher, &weak_refs)?;
        let total_px = (b_u * size * size) as f64;
        let gate_frac = pseudo
            .iter()
            .flat_map(|p| &p.conf)
            .filter(|&&c| c > self.train.rho)
            .count() as f64
            / total_px;

        let donor_index: Vec<usize> = (0..b_u * n).map(|r| ((r / n) % n_labeled) * n + r % n).collect();
        let flags = self.train.branch_design.flags();
        let mut losses = [None, None];
        let mut values = [0.0; 2];
        for (b, flag) in flags.iter().enumerate() {
            let rng = &mut self.branch_rngs[b];
            let mut images = Vec::with_capacity(b_u);
            for w in &weak {
                images.push(StrongParams::sample(rng, self.aug.strong).apply(w)?);
            }
            let mut targets: Vec<Vec<usize>> = pseudo.iter().map(|p| p.label.targets().collect()).collect();
            let mut conf: Vec<Vec<f64>> = pseudo.iter().map(|p| p.conf.clone()).collect();
            let mut mask = None;
            if flag.mixing {
                match self.aug.baseline {
                    Mixing::None => {}
                    Mixing::TokenMix | Mixing::TokenMixStar => {
                        let masks = (0..b_u)
                            .map(|_| {
                                if self.aug.baseline == Mixing::TokenMix {
                                    gen_token_mask(n, self.aug.swap_ratio, rng)
                                } else {
                                    tokenmix_star_mask(cfg.grid_side(), self.aug.star_block, self.aug.swap_ratio, rng)
                                }
                            })
                            .collect::<Result<Vec<_>>>()?;
                        mask = Some(TokenMask::concat(&masks));
                    }
                    Mixing::CutMix | Mixing::ClassMix => {
                        let src_images = images.clone();
                        let src_targets = targets.clone();
                        let src_conf = conf.clone();
                        for i in 0..b_u {
                            let j = (i + 1) % b_u;
                            let pm = if self.aug.baseline == Mixing::CutMix {
                                CutBox::sample(rng, size).mask(size, size)
                            } else {
                                let classes = classmix_classes(&pseudo[j].label, rng);
                                classmix_mask(&pseudo[j].label, &classes)
                            };
                            images[i] = pm.mix_image(&src_images[i], &src_images[j])?;
                            targets[i] = pm.mix_values(&src_targets[i], &src_targets[j])?;
                            conf[i] = pm.mix_values(&src_conf[i], &src_conf[j])?;
                        }
                    }
                }
            }
            let batch = BranchBatch {
                images,
                targets: targets.concat(),
                conf: conf.concat(),
            };
            let mixing = match &mask {
                Some(mask) => Some(TokenMixing {
                    donor: tape.gather_rows(g_l, &donor_index)?,
                    mask,
                }),
                None => None,
            };
            let dropout = if flag.dropout { self.aug.dropout_rate } else { 0.0 };
            let (loss, _) = unsupervised_branch_loss(
                tape,
                &self.student,
                bound,
                &batch,
                self.train.rho,
                self.train.unsup_reduction,
                mixing,
                dropout,
                rng,
            )?;
            values[b] = tape.value(loss).data()[0];
            losses[b] = Some(loss);
        }
        let total = dual_branch_loss(tape, losses[0].unwrap(), losses[1].unwrap())?;
        Ok((total, values, gate_frac))
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::data::make_splits;
    use crate::data::SplitSpec;
    use crate::vit::DecoderHead;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            num_layers: 1,
            num_heads: 2,
            mlp_ratio: 2.0,
            num_classes: 4,
            decoder: DecoderHead::Pixel,
        }
    }

    fn model(seed: u64) -> SegmenterModel {
        SegmenterModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn ema_cases() {
        let s = model(0);
        let mut t = model(1);
        let before = t.clone();
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t, before);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t.params(), s.params());

        let mut t = model(1);
        t.params_mut()[1].data_mut()[0] = 2.0;
        let mut s = model(0);
        s.params_mut()[1].data_mut()[0] = 1.0;
        ema_update(&mut t, &s, 0.999).unwrap();
        assert!((t.params()[1].data()[0] - 1.999).abs() < 1e-15);
    }

    #[test]
    fn ema_rejects_mismatched_models() {
        let s = model(0);
        let mut t = SegmenterModel::new(
            ModelConfig {
                embed_dim: 8,
                ..tiny()
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(ema_update(&mut t, &s, 0.5).is_err());
    }

    #[test]
    fn ema_decay_warmup() {
        assert_eq!(ema_decay(0.999, 1, true), 0.5);
        assert_eq!(ema_decay(0.999, 5000, true), 0.999);
        assert_eq!(ema_decay(0.999, 1, false), 0.999);
        assert_eq!(ema_decay(0.0, 3, true), 0.0);
    }

    #[test]
    fn pseudo_label_uniform_and_saturated() {
        let logits = Tensor::zeros(&[4, 4]);
        let p = pseudo_from_logits(&logits, 2, 2).unwrap();
        assert_eq!(p[0].label.data, vec![0; 4]);
        assert!(p[0].conf.iter().all(|&c| (c - 0.25).abs() < 1e-15));

        let mut logits = Tensor::zeros(&[4, 4]);
        for r in 0..4 {
            logits.data_mut()[r * 4 + 2] = 20.0;
        }
        let p = pseudo_from_logits(&logits, 2, 2).unwrap();
        assert_eq!(p[0].label.data, vec![2; 4]);
        assert!(p[0].conf.iter().all(|&c| c > 0.999));
    }

    #[test]
    fn pseudo_label_matches_scan_and_is_shift_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::from_fn(&[2 * 9, 5], |_| rng.gen_range(-3.0..3.0));
        let p = pseudo_from_logits(&logits, 3, 3).unwrap();
        for (r, row) in logits.data().chunks_exact(5).enumerate() {
            let mut best = 0;
            for k in 1..5 {
                if row[k] > row[best] {
                    best = k;
                }
            }
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let img = &p[r / 9];
            assert_eq!(img.label.data[r % 9] as usize, best);
            assert!((img.conf[r % 9] - row[best].exp() / z).abs() < 1e-12);
        }
        let moved = Tensor::from_fn(logits.shape(), |i| 3.5 * logits.data()[i] - 7.0);
        let q = pseudo_from_logits(&moved, 3, 3).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn dual_branch_cases() {
        let mut tape = Tape::new();
        for (a, b, want) in [(0.0, 0.0, 0.0), (2.0, 4.0, 3.0), (0.3, 0.9, 0.6)] {
            let x = tape.constant(Tensor::scalar(a));
            let y = tape.constant(Tensor::scalar(b));
            let z = dual_branch_loss(&mut tape, x, y).unwrap();
            assert!((tape.value(z).data()[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn poly_lr_cases() {
        assert_eq!(poly_lr(0.1, 0, 100, 0.9).unwrap(), 0.1);
        assert_eq!(poly_lr(0.1, 100, 100, 0.9).unwrap(), 0.0);
        assert_eq!(poly_lr(0.1, 50, 100, 1.0).unwrap(), 0.05);
        assert!(poly_lr(0.1, 101, 100, 0.9).is_err());
        let lrs: Vec<f64> = (0..=100).map(|i| poly_lr(0.1, i, 100, 0.9).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn sgd_cases() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()];
        let g = vec![Tensor::new(vec![2], vec![0.5, -1.0]).unwrap()];
        let mut v = vec![Tensor::zeros(&[2])];
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p[0].data(), &[1.0 - 0.1 * 0.5, 2.0 + 0.1]);

        let mut p = vec![Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()];
        let mut v = vec![Tensor::zeros(&[2])];
        sgd_momentum_step(&mut p, &g, &mut v, 0.0, 0.9).unwrap();
        assert_eq!(p[0].data(), &[1.0, 2.0]);
        assert_eq!(v[0].data(), g[0].data());

        // Constant gradient g, momentum m: v1 = g, v2 = (1 + m) g, so
        // p2 = p0 − lr (2 + m) g.
        let (lr, m) = (0.1, 0.5);
        let mut p = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(2.0)];
        let mut v = vec![Tensor::scalar(0.0)];
        sgd_momentum_step(&mut p, &g, &mut v, lr, m).unwrap();
        sgd_momentum_step(&mut p, &g, &mut v, lr, m).unwrap();
        assert!((p[0].data()[0] - (1.0 - lr * (2.0 + m) * 2.0)).abs() < 1e-15);

        assert!(sgd_momentum_step(&mut p, &[Tensor::zeros(&[2])], &mut v, lr, m).is_err());
    }

    #[test]
    fn replicate_cases() {
        assert_eq!(replicate_labeled(&[0, 1, 2, 3], 8).unwrap(), vec![0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(replicate_labeled(&[5, 6, 7], 3).unwrap(), vec![5, 6, 7]);
        let r = replicate_labeled(&[0, 1, 2], 8).unwrap();
        let counts: Vec<usize> = (0..3).map(|k| r.iter().filter(|&&x| x == k).count()).collect();
        assert_eq!(counts, vec![3, 3, 2]);
        assert!(replicate_labeled::<u8>(&[], 4).is_err());
    }

    #[test]
    fn design_flags() {
        let on = |m, d| BranchFlags { mixing: m, dropout: d };
        assert_eq!(BranchDesign::D1.flags(), [on(true, false), on(true, false)]);
        assert_eq!(BranchDesign::D2.flags(), [on(true, false), on(false, true)]);
        assert_eq!(BranchDesign::D3.flags(), [on(true, true), on(true, true)]);
        assert_eq!(BranchDesign::D4.flags(), [on(true, true), on(true, false)]);
        for d in BranchDesign::ALL {
            assert_eq!(d.as_str().parse::<BranchDesign>().unwrap(), d);
        }
    }

    #[test]
    fn metric_line_round_trip() {
        let m = StepMetrics {
            step: 7,
            l_sup: 0.1 + 0.2,
            l_unsup1: 1e-300,
            l_unsup2: 0.0,
            gate_frac: 0.123456789012345,
            lr: 0.05,
            theta: 0.875,
            rho: 0.95,
        };
        assert_eq!(StepMetrics::parse_line(&m.to_line()).unwrap(), m);
        assert!(StepMetrics::parse_line("step=1 l_sup=0").is_err());
    }

    fn batch_data() -> crate::data::Splits {
        let spec = SplitSpec {
            n_labeled: 2,
            n_unlabeled: 2,
            n_val: 1,
            seed: 9,
        };
        make_splits(&spec, 16, 4).unwrap()
    }

    #[test]
    fn unsupervised_loss_reduces_to_plain_cross_entropy() {
        let data = batch_data();
        let student = model(4);
        let teacher = model(5);
        let images: Vec<&Tensor> = data.unlabeled.iter().map(|s| &s.image).collect();
        let pseudo = pseudo_label(&teacher, &images).unwrap();
        let batch = BranchBatch {
            images: images.iter().map(|&t| t.clone()).collect(),
            targets: pseudo.iter().flat_map(|p| p.label.targets()).collect(),
            conf: pseudo.iter().flat_map(|p| p.conf.iter().copied()).collect(),
        };
        let mut tape = Tape::new();
        let bound = student.bind(&mut tape, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, passed) =
            unsupervised_branch_loss(&mut tape, &student, &bound, &batch, 0.0, UnsupReduction::AllPixels, None, 0.0, &mut rng).unwrap();
        assert_eq!(passed, batch.targets.len());

        let logits = student.logits(&images).unwrap();
        let c = logits.cols();
        let naive: f64 = logits
            .data()
            .chunks_exact(c)
            .zip(&batch.targets)
            .map(|(row, &t)| {
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[t].exp() / z).ln()
            })
            .sum::<f64>()
            / batch.targets.len() as f64;
        assert!((tape.value(loss).data()[0] - naive).abs() <= 1e-9);
    }

    #[test]
    fn unsupervised_loss_reductions() {
        let data = batch_data();
        let student = model(4);
        let image = data.unlabeled[0].image.clone();
        let px = 16 * 16;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let targets: Vec<usize> = (0..px).map(|_| rng.gen_range(0..4)).collect();
        let conf: Vec<f64> = (0..px).map(|i| if i % 7 == 0 { 0.99 } else { 0.5 }).collect();
        let k = conf.iter().filter(|&&c| c > 0.95).count();
        let batch = BranchBatch {
            images: vec![image.clone()],
            targets: targets.clone(),
            conf,
        };
        let mut tape = Tape::new();
        let bound = student.bind(&mut tape, true);
        let (loss, passed) =
            unsupervised_branch_loss(&mut tape, &student, &bound, &batch, 0.95, UnsupReduction::Gated, None, 0.0, &mut rng).unwrap();
        assert_eq!(passed, k);
        let logits = student.logits(&[&image]).unwrap();
        let mut sum = 0.0;
        for (i, row) in logits.data().chunks_exact(4).enumerate() {
            if i % 7 == 0 {
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                sum -= (row[targets[i]].exp() / z).ln();
            }
        }
        assert!((tape.value(loss).data()[0] - sum / k as f64).abs() <= 1e-12);

        let mut tape = Tape::new();
        let bound = student.bind(&mut tape, true);
        let (loss, _) = unsupervised_branch_loss(
            &mut tape,
            &student,
            &bound,
            &batch,
            0.95,
            UnsupReduction::AllPixels,
            None,
            0.0,
            &mut rng,
        )
        .unwrap();
        assert!((tape.value(loss).data()[0] - sum / px as f64).abs() <= 1e-12);

        let mut tape = Tape::new();
        let bound = student.bind(&mut tape, true);
        let (loss, passed) =
            unsupervised_branch_loss(&mut tape, &student, &bound, &batch, 1.0, UnsupReduction::Gated, None, 0.0, &mut rng).unwrap();
        assert_eq!((passed, tape.value(loss).data()[0]), (0, 0.0));
    }

    fn trainer(train: TrainConfig) -> Trainer {
        Trainer::new(tiny(), train, AugConfig::default(), 50).unwrap()
    }

    #[test]
    fn step_emits_metrics_and_updates_teacher_by_ema() {
        let data = batch_data();
        let mut t = trainer(TrainConfig {
            rho: 0.3,
            ..TrainConfig::default()
        });
        let l: Vec<&Scene> = data.labeled.iter().collect();
        let u: Vec<&UnlabeledScene> = data.unlabeled.iter().collect();
        for _ in 0..3 {
            let before = t.teacher().clone();
            let m = t.train_step(&l, &u).unwrap();
            let mut replay = before;
            ema_update(&mut replay, t.student(), m.theta).unwrap();
            assert_eq!(&replay, t.teacher());
            assert!(m.l_unsup1 > 0.0 && m.l_unsup2 > 0.0);
            assert!((0.0..=1.0).contains(&m.gate_frac));
        }
        assert_eq!(t.recent_lines().len(), 3);
    }

    #[test]
    fn closed_gate_matches_supervised_only() {
        let data = batch_data();
        let l: Vec<&Scene> = data.labeled.iter().collect();
        let u: Vec<&UnlabeledScene> = data.unlabeled.iter().collect();
        let mut gated = trainer(TrainConfig {
            rho: 1.0,
            ..TrainConfig::default()
        });
        let mut sup = trainer(TrainConfig {
            sup_only: true,
            ..TrainConfig::default()
        });
        for _ in 0..5 {
            let a = gated.train_step(&l, &u).unwrap();
            let b = sup.train_step(&l, &[]).unwrap();
            assert_eq!(a.l_sup, b.l_sup);
            assert_eq!((a.l_unsup1, a.l_unsup2, a.gate_frac), (0.0, 0.0, 0.0));
        }
        assert_eq!(gated.student().params(), sup.student().params());
    }

    #[test]
    fn swapping_branch_streams_keeps_the_branch_sum() {
        let data = batch_data();
        let l: Vec<&Scene> = data.labeled.iter().collect();
        let u: Vec<&UnlabeledScene> = data.unlabeled.iter().collect();
        for design in [BranchDesign::D1, BranchDesign::D3] {
            let cfg = TrainConfig {
                rho: 0.3,
                branch_design: design,
                ..TrainConfig::default()
            };
            let mut a = trainer(cfg.clone());
            let mut b = trainer(cfg);
            b.swap_branch_streams();
            let ma = a.train_step(&l, &u).unwrap();
            let mb = b.train_step(&l, &u).unwrap();
            assert_eq!(ma.l_unsup1, mb.l_unsup2);
            assert_eq!(ma.l_unsup1 + ma.l_unsup2, mb.l_unsup1 + mb.l_unsup2);
        }
    }

    #[test]
    fn every_baseline_and_design_runs() {
        let data = batch_data();
        let l: Vec<&Scene> = data.labeled.iter().collect();
        let u: Vec<&UnlabeledScene> = data.unlabeled.iter().collect();
        for baseline in Mixing::ALL {
            for design in BranchDesign::ALL {
                let aug = AugConfig {
                    baseline,
                    ..AugConfig::default()
                };
                let train = TrainConfig {
                    rho: 0.3,
                    branch_design: design,
                    ..TrainConfig::default()
                };
                let mut t = Trainer::new(tiny(), train, aug, 2).unwrap();
                t.train_step(&l, &u).unwrap();
            }
        }
    }

    #[test]
    fn divergence_reports_recent_lines() {
        let data = batch_data();
        let l: Vec<&Scene> = data.labeled.iter().collect();
        let mut t = trainer(TrainConfig {
            sup_only: true,
            lr0: 1e200,
            ..TrainConfig::default()
        });
        let mut err = None;
        for _ in 0..5 {
            if let Err(e) = t.train_step(&l, &[]) {
                err = Some(e);
                break;
            }
        }
        match err {
            Some(Error::Diverged { last_lines, .. }) => assert!(!last_lines.is_empty()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn trainer_rejects_bad_config() {
        let bad = TrainConfig {
            rho: 1.5,
            ..TrainConfig::default()
        };
        assert!(matches!(
            Trainer::new(tiny(), bad, AugConfig::default(), 10),
            Err(Error::Config { ref key, .. }) if key == "rho"
        ));
        let aug = AugConfig {
            swap_ratio: 1.5,
            ..AugConfig::default()
        };
        assert!(matches!(
            Trainer::new(tiny(), TrainConfig::default(), aug, 10),
            Err(Error::Config { ref key, .. }) if key == "swap_ratio"
        ));
    }
}
