//! Experiment configuration, single runs and ablation grids.
//!
//! Config files are flat `key = value` lines with dotted sections
//! (`model.embed_dim = 64`). `#` starts a comment. Unknown keys are errors
//! and both `train.seed` and `data.seed` must be given explicitly.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{make_splits, Scene, SplitSpec, UnlabeledScene};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::trainer::{replicate_labeled, stream_rng, streams, AugConfig, TrainConfig, Trainer};
use crate::vit::ModelConfig;

/// Environment variable holding the worker count for grid runs.
pub const THREADS_ENV: &str = "TOKENMIX_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SplitSpec,
    pub aug: AugConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: SplitSpec::default(),
            aug: AugConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse {value:?}: {e}")))
}

impl ExperimentConfig {
    /// Every key in file order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .model
            .entries()
            .into_iter()
            .map(|(k, v)| (format!("model.{k}"), v))
            .collect();
        let t = &self.train;
        let a = &self.aug;
        let d = &self.data;
        let f = |v: f64| format!("{v:?}");
        out.extend(
            [
                ("train.lr0", f(t.lr0)),
                ("train.sgd_momentum", f(t.sgd_momentum)),
                ("train.poly_power", f(t.poly_power)),
                ("train.epochs", t.epochs.to_string()),
                ("train.batch_labeled", t.batch_labeled.to_string()),
                ("train.batch_unlabeled", t.batch_unlabeled.to_string()),
                ("train.branch_design", t.branch_design.to_string()),
                ("train.rho", f(t.rho)),
                ("train.theta", f(t.theta)),
                ("train.unsup_reduction", t.unsup_reduction.to_string()),
                ("train.ema_warmup", t.ema_warmup.to_string()),
                ("train.sup_only", t.sup_only.to_string()),
                ("train.seed", t.seed.to_string()),
                ("data.n_labeled", d.n_labeled.to_string()),
                ("data.n_unlabeled", d.n_unlabeled.to_string()),
                ("data.n_val", d.n_val.to_string()),
                ("data.seed", d.seed.to_string()),
                ("aug.baseline", a.baseline.as_str().to_string()),
                ("aug.swap_ratio", f(a.swap_ratio)),
                ("aug.dropout_rate", f(a.dropout_rate)),
                ("aug.star_block", a.star_block.to_string()),
                ("aug.weak", a.weak.to_string()),
                ("aug.strong.color", a.strong.color.to_string()),
                ("aug.strong.shuffle", a.strong.shuffle.to_string()),
                ("aug.strong.blur", a.strong.blur.to_string()),
                ("aug.strong.grayscale", a.strong.grayscale.to_string()),
                ("output_dir", self.output_dir.display().to_string()),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v)),
        );
        out
    }

    /// Sets one dotted key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(k) = key.strip_prefix("model.") {
            if self.model.set(k, value)? {
                return Ok(());
            }
            return Err(Error::config(key, "unknown key"));
        }
        let t = &mut self.train;
        let a = &mut self.aug;
        let d = &mut self.data;
        match key {
            "train.lr0" => t.lr0 = parse_value(key, value)?,
            "train.sgd_momentum" => t.sgd_momentum = parse_value(key, value)?,
            "train.poly_power" => t.poly_power = parse_value(key, value)?,
            "train.epochs" => t.epochs = parse_value(key, value)?,
            "train.batch_labeled" => t.batch_labeled = parse_value(key, value)?,
            "train.batch_unlabeled" => t.batch_unlabeled = parse_value(key, value)?,
            "train.branch_design" => t.branch_design = parse_value(key, value)?,
            "train.rho" => t.rho = parse_value(key, value)?,
            "train.theta" => t.theta = parse_value(key, value)?,
            "train.unsup_reduction" => t.unsup_reduction = parse_value(key, value)?,
            "train.ema_warmup" => t.ema_warmup = parse_value(key, value)?,
            "train.sup_only" => t.sup_only = parse_value(key, value)?,
            "train.seed" => t.seed = parse_value(key, value)?,
            "data.n_labeled" => d.n_labeled = parse_value(key, value)?,
            "data.n_unlabeled" => d.n_unlabeled = parse_value(key, value)?,
            "data.n_val" => d.n_val = parse_value(key, value)?,
            "data.seed" => d.seed = parse_value(key, value)?,
            "aug.baseline" => a.baseline = parse_value(key, value)?,
            "aug.swap_ratio" => a.swap_ratio = parse_value(key, value)?,
            "aug.dropout_rate" => a.dropout_rate = parse_value(key, value)?,
            "aug.star_block" => a.star_block = parse_value(key, value)?,
            "aug.weak" => a.weak = parse_value(key, value)?,
            "aug.strong.color" => a.strong.color = parse_value(key, value)?,
            "aug.strong.shuffle" => a.strong.shuffle = parse_value(key, value)?,
            "aug.strong.blur" => a.strong.blur = parse_value(key, value)?,
            "aug.strong.grayscale" => a.strong.grayscale = parse_value(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.aug.validate(&self.model)?;
        for (key, n) in [
            ("n_labeled", self.data.n_labeled),
            ("n_unlabeled", self.data.n_unlabeled),
            ("n_val", self.data.n_val),
        ] {
            if n == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.data.n_unlabeled < self.train.batch_unlabeled {
            return Err(Error::config(
                "batch_unlabeled",
                format!(
                    "{} exceeds the {} unlabeled scenes",
                    self.train.batch_unlabeled, self.data.n_unlabeled
                ),
            ));
        }
        Ok(())
    }

    /// Serialized form; [`ExperimentConfig::parse_str`] inverts it.
    pub fn to_config_string(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses and validates config text; `path` only labels diagnostics.
    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(parse_err("empty key".into()));
            }
            if !seen.insert(key.to_string()) {
                return Err(parse_err(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value)?;
        }
        for key in ["train.seed", "data.seed"] {
            if !seen.contains(key) {
                return Err(Error::config(key, "seeds must be set explicitly"));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.n_unlabeled / self.train.batch_unlabeled
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.train.epochs
    }
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub metric_lines: Vec<String>,
    /// Student mIoU on the validation split after each epoch.
    pub epoch_miou: Vec<f64>,
    pub final_eval: EvalReport,
    pub teacher_miou: f64,
    pub wall_clock_secs: f64,
    pub seed: u64,
}

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.txt";
pub const EVAL_FILE: &str = "eval.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const STUDENT_CHECKPOINT: &str = "student.ckpt";
pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";

struct LineLog {
    file: File,
    path: PathBuf,
}

impl LineLog {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { file, path })
    }

    fn line(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains, evaluates on the validation split after every epoch and writes
/// `config.txt`, `metrics.txt`, `eval.txt`, `report.txt` and both
/// checkpoints into `output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecord> {
    config.validate()?;
    let started = Instant::now();
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(CONFIG_FILE), &config.to_config_string())?;

    let splits = make_splits(&config.data, config.model.image_size, config.model.num_classes)?;
    let steps = config.steps_per_epoch();
    let (b_l, b_u) = (config.train.batch_labeled, config.train.batch_unlabeled);
    let mut trainer = Trainer::new(
        config.model.clone(),
        config.train.clone(),
        config.aug.clone(),
        config.total_steps(),
    )?;
    let mut order_rng = stream_rng(config.train.seed, streams::DATA_ORDER);
    let mut metrics = LineLog::create(dir.join(METRICS_FILE))?;
    let mut evals = LineLog::create(dir.join(EVAL_FILE))?;
    let mut metric_lines = Vec::with_capacity(config.total_steps());
    let mut epoch_miou = Vec::with_capacity(config.train.epochs);
    let labeled_ids: Vec<usize> = (0..splits.labeled.len()).collect();

    for epoch in 1..=config.train.epochs {
        let mut u_order: Vec<usize> = (0..splits.unlabeled.len()).collect();
        u_order.shuffle(&mut order_rng);
        let mut l_order = replicate_labeled(&labeled_ids, steps * b_l)?;
        l_order.shuffle(&mut order_rng);
        for s in 0..steps {
            let l: Vec<&Scene> = l_order[s * b_l..(s + 1) * b_l].iter().map(|&i| &splits.labeled[i]).collect();
            let u: Vec<&UnlabeledScene> = if config.train.sup_only {
                Vec::new()
            } else {
                u_order[s * b_u..(s + 1) * b_u].iter().map(|&i| &splits.unlabeled[i]).collect()
            };
            let m = trainer.train_step(&l, &u)?;
            let line = m.to_line();
            metrics.line(&line)?;
            metric_lines.push(line);
        }
        let student = evaluate(trainer.student(), &splits.val)?;
        let teacher = evaluate(trainer.teacher(), &splits.val)?;
        evals.line(&format!(
            "epoch={epoch} student_miou={} teacher_miou={}",
            student.miou, teacher.miou
        ))?;
        epoch_miou.push(student.miou);
    }

    trainer.student().save(&dir.join(STUDENT_CHECKPOINT))?;
    trainer.teacher().save(&dir.join(TEACHER_CHECKPOINT))?;
    let final_eval = evaluate(trainer.student(), &splits.val)?;
    let teacher_miou = evaluate(trainer.teacher(), &splits.val)?.miou;
    let wall_clock_secs = started.elapsed().as_secs_f64();

    let mut report = String::new();
    let _ = writeln!(report, "seed={}", config.train.seed);
    let _ = writeln!(report, "miou={}", final_eval.miou);
    for (c, iou) in final_eval.per_class_iou.iter().enumerate() {
        match iou {
            Some(v) => writeln!(report, "iou.{c}={v}"),
            None => writeln!(report, "iou.{c}=absent"),
        }
        .ok();
    }
    let _ = writeln!(report, "teacher_miou={teacher_miou}");
    let _ = writeln!(report, "wall_clock_secs={wall_clock_secs:.3}");
    write_file(&dir.join(REPORT_FILE), &report)?;

    Ok(RunRecord {
        config: config.clone(),
        metric_lines,
        epoch_miou,
        final_eval,
        teacher_miou,
        wall_clock_secs,
        seed: config.train.seed,
    })
}

/// A config field swept by [`run_ablation_grid`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Augmentation,
    BranchDesign,
    Rho,
    Theta,
    SupOnly,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::Augmentation, Axis::BranchDesign, Axis::Rho, Axis::Theta, Axis::SupOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Augmentation => "augmentation",
            Axis::BranchDesign => "branch_design",
            Axis::Rho => "rho",
            Axis::Theta => "theta",
            Axis::SupOnly => "sup_only",
        }
    }

    /// Applies one axis value to a config.
    pub fn apply(self, cfg: &mut ExperimentConfig, value: &str) -> Result<()> {
        let key = match self {
            Axis::Augmentation => "aug.baseline",
            Axis::BranchDesign => "train.branch_design",
            Axis::Rho => "train.rho",
            Axis::Theta => "train.theta",
            Axis::SupOnly => "train.sup_only",
        };
        cfg.set(key, value)
    }

    /// Scalar hyperparameters are laid out as one row with a column per
    /// value; categorical axes get a row per value.
    pub fn horizontal(self) -> bool {
        matches!(self, Axis::Rho | Axis::Theta)
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = if s == "branch" { "branch_design" } else { s };
        Axis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::config(
                    "axis",
                    format!("expected augmentation, branch_design, rho, theta or sup_only; got {s:?}"),
                )
            })
    }
}

/// Final validation mIoU of one (value, seed) cell, or why it failed.
pub type CellResult = std::result::Result<f64, String>;

#[derive(Clone, Debug)]
pub struct GridTable {
    pub axis: Axis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    /// `cells[v][s]` for value `v`, seed `s`.
    pub cells: Vec<Vec<CellResult>>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

impl GridTable {
    pub fn cell_count(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_err()).count()
    }

    pub fn summary(&self, value: usize) -> Option<(f64, f64)> {
        let ok: Vec<f64> = self.cells[value].iter().filter_map(|c| c.as_ref().ok().copied()).collect();
        mean_std(&ok)
    }

    /// Percent mIoU as `mean±std`, with a failure count when any seed failed.
    fn entry(&self, value: usize) -> String {
        let failed = self.cells[value].iter().filter(|c| c.is_err()).count();
        let mut s = match self.summary(value) {
            Some((m, sd)) => format!("{:.2}±{:.2}", 100.0 * m, 100.0 * sd),
            None => "FAILED".to_string(),
        };
        if failed > 0 && failed < self.seeds.len() {
            let _ = write!(s, " ({failed} failed)");
        }
        s
    }

    /// Markdown table of validation mIoU (%) over the seeds.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "mIoU (%) over seeds {}", seeds.join(","));
        if self.axis.horizontal() {
            let _ = writeln!(out, "| {} | {} |", self.axis.as_str(), self.values.join(" | "));
            let _ = writeln!(out, "|---|{}", "---|".repeat(self.values.len()));
            let entries: Vec<String> = (0..self.values.len()).map(|v| self.entry(v)).collect();
            let _ = writeln!(out, "| mIoU | {} |", entries.join(" | "));
        } else {
            let _ = writeln!(out, "| {} | mIoU |", self.axis.as_str());
            let _ = writeln!(out, "|---|---|");
            for (v, name) in self.values.iter().enumerate() {
                let _ = writeln!(out, "| {name} | {} |", self.entry(v));
            }
        }
        for (v, name) in self.values.iter().enumerate() {
            for (s, seed) in self.seeds.iter().enumerate() {
                if let Err(e) = &self.cells[v][s] {
                    let first = e.lines().next().unwrap_or("");
                    let _ = writeln!(out, "failed: {}={name} seed={seed}: {first}", self.axis.as_str());
                }
            }
        }
        out
    }
}

/// Worker count from [`THREADS_ENV`]; `None` lets the pool decide.
pub fn grid_threads() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::config(THREADS_ENV, format!("expected a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

/// Every (value, seed) cell with its own output directory
/// `<output_dir>/<axis>=<value>/seed=<seed>`.
pub fn grid_configs(
    base: &ExperimentConfig,
    axis: Axis,
    values: &[String],
    seeds: &[u64],
) -> Result<Vec<ExperimentConfig>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::config("values", "grid needs at least one value and one seed"));
    }
    let mut out = Vec::with_capacity(values.len() * seeds.len());
    for value in values {
        for &seed in seeds {
            let mut cfg = base.clone();
            axis.apply(&mut cfg, value)?;
            cfg.train.seed = seed;
            cfg.output_dir = base
                .output_dir
                .join(format!("{}={value}", axis.as_str()))
                .join(format!("seed={seed}"));
            cfg.validate()?;
            out.push(cfg);
        }
    }
    Ok(out)
}

/// Runs the cross product of `values × seeds`. A failing cell is recorded
/// and the remaining cells still run.
pub fn run_ablation_grid(
    base: &ExperimentConfig,
    axis: Axis,
    values: &[String],
    seeds: &[u64],
    threads: Option<usize>,
) -> Result<GridTable> {
    let configs = grid_configs(base, axis, values, seeds)?;
    let run = |cfg: &ExperimentConfig| -> CellResult {
        run_experiment(cfg).map(|r| r.final_eval.miou).map_err(|e| e.to_string())
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Contract(format!("cannot start grid workers: {e}")))?;
    let flat: Vec<CellResult> = pool.install(|| configs.par_iter().map(run).collect());
    let cells = flat.chunks(seeds.len()).map(<[CellResult]>::to_vec).collect();
    let table = GridTable {
        axis,
        values: values.to_vec(),
        seeds: seeds.to_vec(),
        cells,
    };
    fs::create_dir_all(&base.output_dir).map_err(|e| Error::io(&base.output_dir, e))?;
    write_file(
        &base.output_dir.join(format!("grid_{}.md", axis.as_str())),
        &table.render(),
    )?;
    Ok(table)
}

/// The swept values used by the published ablations for each axis.
pub fn default_values(axis: Axis) -> Vec<String> {
    let v: &[&str] = match axis {
        Axis::Augmentation => &["none", "cutmix", "classmix", "tokenmix_star", "tokenmix"],
        Axis::BranchDesign => &["D1", "D2", "D3", "D4"],
        Axis::Rho => &["0.0", "0.5", "0.9", "0.95", "0.99"],
        Axis::Theta => &["0.0", "0.5", "0.9", "0.99", "0.999"],
        Axis::SupOnly => &["true", "false"],
    };
    v.iter().map(|s| s.to_string()).collect()
}
