use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tokenmix::data::make_splits;
use tokenmix::experiment::{default_values, grid_threads, run_ablation_grid, run_experiment, Axis, ExperimentConfig};
use tokenmix::gradcheck::{run_suite, TOLERANCE};
use tokenmix::metrics::evaluate;
use tokenmix::vit::SegmenterModel;
use tokenmix::{Error, Result};

#[derive(Parser)]
#[command(name = "tokenmix", about = "Semi-supervised ViT segmentation with token mixing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its metrics, evaluations and checkpoints.
    Train {
        config: PathBuf,
        /// Override a config key, e.g. `--set train.epochs=2`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on the validation split described by a config.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Sweep one axis over several values and seeds.
    Grid {
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated values; defaults to the standard sweep for the axis.
        #[arg(long)]
        values: Option<String>,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Contract(format!("override {o:?} is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn csv(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let record = run_experiment(&cfg)?;
            println!("output: {}", cfg.output_dir.display());
            println!("steps: {}", record.metric_lines.len());
            println!("student mIoU: {:.4}", record.final_eval.miou);
            println!("teacher mIoU: {:.4}", record.teacher_miou);
            println!("wall clock: {:.1}s", record.wall_clock_secs);
        }
        Command::Eval { checkpoint, config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let model = SegmenterModel::load(&checkpoint)?;
            if model.config() != &cfg.model {
                return Err(Error::Contract("checkpoint model does not match the config's model section".into()));
            }
            let splits = make_splits(&cfg.data, cfg.model.image_size, cfg.model.num_classes)?;
            let report = evaluate(&model, &splits.val)?;
            println!("mIoU: {:.4}", report.miou);
            for (c, iou) in report.per_class_iou.iter().enumerate() {
                match iou {
                    Some(v) => println!("class {c}: {v:.4}"),
                    None => println!("class {c}: absent"),
                }
            }
        }
        Command::Grid {
            config,
            axis,
            values,
            seeds,
            overrides,
        } => {
            let cfg = load(&config, &overrides)?;
            let axis: Axis = axis.parse()?;
            let values = values.map(|v| csv(&v)).unwrap_or_else(|| default_values(axis));
            let seeds = csv(&seeds)
                .iter()
                .map(|s| s.parse::<u64>().map_err(|e| Error::Contract(format!("seed {s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let table = run_ablation_grid(&cfg, axis, &values, &seeds, grid_threads()?)?;
            print!("{}", table.render());
            if table.failures() > 0 {
                return Err(Error::Contract(format!("{} grid cells failed", table.failures())));
            }
        }
        Command::Gradcheck { seeds } => {
            let checks = run_suite(seeds)?;
            let first_seed = checks[0].seed;
            let names: Vec<&str> = checks.iter().filter(|c| c.seed == first_seed).map(|c| c.name).collect();
            let mut failed = 0;
            for name in names {
                let worst = checks
                    .iter()
                    .filter(|c| c.name == name)
                    .map(|c| c.max_rel_err)
                    .fold(0.0, f64::max);
                let ok = worst <= TOLERANCE;
                failed += usize::from(!ok);
                println!("{:<16} max rel err {worst:.3e}  {}", name, if ok { "ok" } else { "FAIL" });
            }
            if failed > 0 {
                return Err(Error::Contract(format!("{failed} gradient checks failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
