//! Head comparison, probability-loss ablation and loss-weight sweep.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Mutex;

use crate::cli::config::{Datasets, RunConfig};
use crate::error::Result;
use crate::head::{HeadKind, ProbNorm};
use crate::loss::{LossConfig, ProbLoss};
use crate::model::Model;
use crate::train::{multi_scale_eval, train, EvalReport, LogRow};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub miou: f64,
    pub pixacc: f64,
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub model: Model<f32>,
    pub log: Vec<LogRow>,
    pub report: EvalReport,
}

/// Trains from `seed` and evaluates on the validation set with the
/// configured protocol.
pub fn train_and_evaluate(cfg: &RunConfig, data: &Datasets, seed: u64) -> Result<RunArtifacts> {
    let model = Model::init(cfg.model.clone(), data.train.classes, seed)?;
    let (model, log) = train(model, &data.train, &cfg.loss, &cfg.train, seed, cfg.execution)?.into_result()?;
    let report = multi_scale_eval(&model, &data.val, &cfg.eval, cfg.execution)?;
    Ok(RunArtifacts { model, log, report })
}

/// Memoizes run summaries by everything that influences training, so an
/// experiment grid never trains the same configuration twice.
#[derive(Debug, Default)]
pub struct RunCache {
    runs: Mutex<HashMap<String, RunSummary>>,
}

impl RunCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.runs.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn key(cfg: &RunConfig, seed: u64) -> String {
        // a probability loss with zero weight trains exactly like no loss
        let loss = if cfg.loss.effective_lambda() == 0.0 {
            LossConfig {
                lambda: 0.0,
                prob_loss: ProbLoss::None,
                ..cfg.loss
            }
        } else {
            cfg.loss
        };
        serde_json::json!({
            "seed": seed,
            "dataset": cfg.dataset,
            "model": cfg.model,
            "loss": loss,
            "train": cfg.train,
            "eval": cfg.eval,
        })
        .to_string()
    }

    pub fn run(&self, cfg: &RunConfig, data: &Datasets, seed: u64) -> Result<RunSummary> {
        let key = Self::key(cfg, seed);
        if let Some(s) = self.runs.lock().unwrap().get(&key) {
            return Ok(*s);
        }
        let a = train_and_evaluate(cfg, data, seed)?;
        let s = RunSummary {
            seed,
            miou: a.report.miou()?,
            pixacc: a.report.pixacc()?,
        };
        self.runs.lock().unwrap().insert(key, s);
        Ok(s)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub label: String,
    pub runs: Vec<RunSummary>,
}

impl Condition {
    pub fn mean_miou(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.miou))
    }

    pub fn mean_pixacc(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.pixacc))
    }
}

fn run_condition(label: &str, cfg: &RunConfig, data: &Datasets, cache: &RunCache) -> Result<Condition> {
    let runs = cfg
        .experiment
        .seeds
        .iter()
        .map(|&s| cache.run(cfg, data, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Condition {
        label: label.to_string(),
        runs,
    })
}

fn head_label(h: HeadKind) -> &'static str {
    match h {
        HeadKind::Global => "global",
        HeadKind::Conditional => "conditional",
    }
}

/// Global vs conditional head on identical data, seeds and backbone draws.
/// Returns `[global, conditional]`.
pub fn compare(cfg: &RunConfig, data: &Datasets, cache: &RunCache) -> Result<Vec<Condition>> {
    [HeadKind::Global, HeadKind::Conditional]
        .into_iter()
        .map(|head| {
            let mut c = cfg.clone();
            c.model.head = head;
            if head == HeadKind::Global {
                // no probability map to supervise
                c.loss.prob_loss = ProbLoss::None;
            }
            run_condition(head_label(head), &c, data, cache)
        })
        .collect()
}

pub fn compare_csv(conds: &[Condition]) -> String {
    let mut out = String::from("head,seed,miou,pixacc\n");
    for c in conds {
        for r in &c.runs {
            writeln!(out, "{},{},{:.6},{:.6}", c.label, r.seed, r.miou, r.pixacc).unwrap();
        }
    }
    let (g, k) = (&conds[0], &conds[1]);
    writeln!(
        out,
        "delta,mean,{:.6},{:.6}",
        k.mean_miou() - g.mean_miou(),
        k.mean_pixacc() - g.mean_pixacc()
    )
    .unwrap();
    out
}

/// Variant of `cfg` with the given probability-map supervision. BCE is
/// paired with per-class sigmoid maps.
pub fn with_prob_loss(cfg: &RunConfig, prob_loss: ProbLoss) -> RunConfig {
    let mut c = cfg.clone();
    c.model.head = HeadKind::Conditional;
    c.loss.prob_loss = prob_loss;
    c.model.prob_norm = match prob_loss {
        ProbLoss::Bce => ProbNorm::Sigmoid,
        _ => ProbNorm::Softmax,
    };
    c
}

/// Conditional head trained without supervision on the probability maps,
/// with BCE, and with soft dice. Returns `[none, bce, dice]`.
pub fn ablate_loss(cfg: &RunConfig, data: &Datasets, cache: &RunCache) -> Result<Vec<Condition>> {
    [ProbLoss::None, ProbLoss::Bce, ProbLoss::Dice]
        .into_iter()
        .map(|p| run_condition(p.as_str(), &with_prob_loss(cfg, p), data, cache))
        .collect()
}

pub fn conditions_csv(conds: &[Condition], key: &str) -> String {
    let mut out = format!("{key},seed,miou,pixacc\n");
    for c in conds {
        for r in &c.runs {
            writeln!(out, "{},{},{:.6},{:.6}", c.label, r.seed, r.miou, r.pixacc).unwrap();
        }
    }
    for c in conds {
        writeln!(out, "{},mean,{:.6},{:.6}", c.label, c.mean_miou(), c.mean_pixacc()).unwrap();
    }
    out
}

/// Dice-supervised conditional head at each loss weight.
pub fn sweep_lambda(cfg: &RunConfig, data: &Datasets, lambdas: &[f64], cache: &RunCache) -> Result<Vec<(f64, Condition)>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let mut c = with_prob_loss(cfg, ProbLoss::Dice);
            c.loss.lambda = lambda;
            Ok((lambda, run_condition(&lambda.to_string(), &c, data, cache)?))
        })
        .collect()
}

/// `lambda,miou` with seed-mean mIoU.
pub fn sweep_csv(points: &[(f64, Condition)]) -> String {
    let mut out = String::from("lambda,miou\n");
    for (l, c) in points {
        writeln!(out, "{l},{:.6}", c.mean_miou()).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weight_shares_the_unsupervised_key() {
        let cfg = RunConfig::default();
        let none = with_prob_loss(&cfg, ProbLoss::None);
        let mut zero = with_prob_loss(&cfg, ProbLoss::Dice);
        zero.loss.lambda = 0.0;
        assert_eq!(RunCache::key(&none, 3), RunCache::key(&zero, 3));
        assert_ne!(RunCache::key(&none, 3), RunCache::key(&none, 4));
        let dice = with_prob_loss(&cfg, ProbLoss::Dice);
        assert_ne!(RunCache::key(&none, 3), RunCache::key(&dice, 3));
    }

    #[test]
    fn compare_table_shape() {
        let mk = |label: &str, m: f64| Condition {
            label: label.into(),
            runs: vec![
                RunSummary {
                    seed: 1,
                    miou: m,
                    pixacc: 0.9,
                },
                RunSummary {
                    seed: 2,
                    miou: m + 0.1,
                    pixacc: 0.9,
                },
            ],
        };
        let csv = compare_csv(&[mk("global", 0.5), mk("conditional", 0.75)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 4 + 1);
        assert_eq!(lines[5], "delta,mean,0.250000,0.000000");
    }
}
