//! Command-line front end.

pub mod checkpoint;
pub mod config;
pub mod experiments;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autodiff::{composite_cases, op_case, GradCheckReport, OpKind};
use crate::error::{Error, Result};
use crate::model::{model_grad_cases, Model};
use crate::scene::{write_dataset, Dataset};
use crate::train::{evaluate_single_scale, log_csv, multi_scale_eval};

pub use config::{DatasetConfig, Datasets, ExperimentConfig, RunConfig};
pub use experiments::{
    ablate_loss, compare, compare_csv, conditions_csv, sweep_csv, sweep_lambda, train_and_evaluate, with_prob_loss,
    Condition, RunArtifacts, RunCache, RunSummary,
};

pub const CONFIG_ECHO: &str = "config.json";
pub const METRICS_LOG: &str = "metrics.csv";
pub const CHECKPOINT: &str = "checkpoint.cdnt";
pub const VALIDATION_REPORT: &str = "val.csv";
pub const EVAL_REPORT: &str = "eval.csv";
pub const COMPARE_TABLE: &str = "compare.csv";
pub const ABLATION_TABLE: &str = "ablate_loss.csv";
pub const SWEEP_CURVE: &str = "sweep_lambda.csv";
pub const SWEEP_RUNS: &str = "sweep_lambda_runs.csv";
pub const GRADCHECK_REPORT: &str = "gradcheck.csv";

#[derive(Debug, Parser)]
#[command(name = "condseg", version, about = "Conditional vs global classifiers on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run config; omitted keys take their defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing)
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed (for experiments: runs this seed only)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (images, masks, manifest)
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of scenes; defaults to dataset.train_count
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train one model; writes the metrics log, checkpoint and validation report
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint with the configured sliding-window protocol
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Check every analytic gradient against central differences
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Global vs conditional head over the experiment seeds
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Probability-map supervision: none, BCE, soft dice
    AblateLoss {
        #[command(flatten)]
        common: Common,
    },
    /// Dice loss weight over experiment.lambdas
    SweepLambda {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Train { common }
            | Command::Eval { common, .. }
            | Command::Gradcheck { common }
            | Command::Compare { common }
            | Command::AblateLoss { common }
            | Command::SweepLambda { common } => common,
        }
    }
}

/// Loads the config, applies the seed override, and echoes the resolved
/// document into the output directory.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.experiment.seeds = vec![s];
    }
    cfg.validate()?;
    std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    write_file(&common.out.join(CONFIG_ECHO), &cfg.to_json())?;
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Every gradient check the library registers: one case per op, the
/// composite chains, and the end-to-end model losses.
pub fn all_grad_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = OpKind::ALL.into_iter().map(|k| op_case(k, seed)).collect::<Result<Vec<_>>>()?;
    out.extend(composite_cases(seed)?);
    out.extend(model_grad_cases(seed)?);
    Ok(out)
}

pub fn gradcheck_csv(reports: &[GradCheckReport]) -> String {
    let mut out = String::from("case,max_error,tolerance,coords,passed\n");
    for r in reports {
        out.push_str(&format!(
            "{},{:e},{:e},{},{}\n",
            r.label,
            r.max_error,
            r.tolerance,
            r.coords_checked,
            r.passed()
        ));
    }
    out
}

/// Runs one command, writing its artifacts under `--out` and a short
/// summary to `stdout`.
pub fn run(command: &Command, stdout: &mut dyn std::io::Write) -> Result<()> {
    let common = command.common();
    let cfg = resolve_config(common)?;
    let out = &common.out;
    let exec = cfg.execution;
    let say = |stdout: &mut dyn std::io::Write, s: String| {
        writeln!(stdout, "{s}").map_err(|e| Error::io("<stdout>", e))
    };
    match command {
        Command::GenData { count, .. } => {
            let first = common.seed.unwrap_or(cfg.dataset.train_seed);
            let n = count.unwrap_or(cfg.dataset.train_count);
            let data = Dataset::generate(&cfg.dataset.generator, first, n, exec)?;
            write_dataset(out, &data, &cfg.dataset.generator)?;
            say(stdout, format!("wrote {n} scenes (seeds {first}..{}) to {}", first + n as u64, out.display()))
        }
        Command::Train { .. } => {
            let data = cfg.dataset.load(exec)?;
            let model = Model::init(cfg.model.clone(), data.train.classes, cfg.seed)?;
            let outcome = crate::train::train(model, &data.train, &cfg.loss, &cfg.train, cfg.seed, exec)?;
            write_file(&out.join(METRICS_LOG), &log_csv(&outcome.log, cfg.train.log_every))?;
            checkpoint::save(&out.join(CHECKPOINT), &outcome.model.params)?;
            if let Some(e) = outcome.failure {
                return Err(e);
            }
            let report = evaluate_single_scale(&outcome.model, &data.val, exec)?;
            write_file(&out.join(VALIDATION_REPORT), &report.to_csv()?)?;
            say(stdout, format!("val miou {:.4} pixacc {:.4}", report.miou()?, report.pixacc()?))
        }
        Command::Eval { checkpoint: path, .. } => {
            let data = cfg.dataset.load(exec)?;
            let params = checkpoint::load::<f32>(path)?;
            let model = Model::from_params(cfg.model.clone(), data.val.classes, params)?;
            let report = multi_scale_eval(&model, &data.val, &cfg.eval, exec)?;
            write_file(&out.join(EVAL_REPORT), &report.to_csv()?)?;
            say(stdout, format!("miou {:.4} pixacc {:.4}", report.miou()?, report.pixacc()?))
        }
        Command::Gradcheck { .. } => {
            let reports = all_grad_checks(cfg.seed)?;
            write_file(&out.join(GRADCHECK_REPORT), &gradcheck_csv(&reports))?;
            for r in &reports {
                say(stdout, r.to_string())?;
            }
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.label.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Oracle(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::Compare { .. } => {
            let data = cfg.dataset.load(exec)?;
            let conds = compare(&cfg, &data, &RunCache::new())?;
            write_file(&out.join(COMPARE_TABLE), &compare_csv(&conds))?;
            for c in &conds {
                say(stdout, format!("{:<12} mean miou {:.4}", c.label, c.mean_miou()))?;
            }
            Ok(())
        }
        Command::AblateLoss { .. } => {
            let data = cfg.dataset.load(exec)?;
            let conds = ablate_loss(&cfg, &data, &RunCache::new())?;
            write_file(&out.join(ABLATION_TABLE), &conditions_csv(&conds, "prob_loss"))?;
            for c in &conds {
                say(stdout, format!("{:<5} mean miou {:.4}", c.label, c.mean_miou()))?;
            }
            Ok(())
        }
        Command::SweepLambda { .. } => {
            let data = cfg.dataset.load(exec)?;
            let points = sweep_lambda(&cfg, &data, &cfg.experiment.lambdas, &RunCache::new())?;
            write_file(&out.join(SWEEP_CURVE), &sweep_csv(&points))?;
            let conds: Vec<Condition> = points.iter().map(|(_, c)| c.clone()).collect();
            write_file(&out.join(SWEEP_RUNS), &conditions_csv(&conds, "lambda"))?;
            for (l, c) in &points {
                say(stdout, format!("lambda {l:<4} mean miou {:.4}", c.mean_miou()))?;
            }
            Ok(())
        }
    }
}

/// Parses `args`, runs the command, and maps failures to exit codes.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli.command, &mut std::io::stdout().lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
