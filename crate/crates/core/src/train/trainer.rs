use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::GradientStore;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::loss::LossConfig;
use crate::model::{Model, SampleGradients};
use crate::numeric::Rng;
use crate::scene::{augment, AugmentConfig, Dataset};
use crate::train::sgd::{sgd_step, SgdState, DEFAULT_MOMENTUM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub iters: usize,
    pub base_lr: f64,
    pub momentum: f64,
    /// Metrics-log period in iterations; the last iteration is always logged.
    pub log_every: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 8,
            iters: 1000,
            base_lr: 0.05,
            momentum: DEFAULT_MOMENTUM,
            log_every: 1,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.iters == 0 || self.log_every == 0 {
            return Err(Error::Config("train.batch, train.iters and train.log_every must be positive".into()));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "train.base_lr {} / momentum {} out of range",
                self.base_lr, self.momentum
            )));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub l_seg: f64,
    pub l_prob: f64,
    pub l_overall: f64,
}

pub const LOG_HEADER: &str = "iter,lr,l_seg,l_prob,l_overall";

/// Renders the rows selected by `log_every` as CSV.
pub fn log_csv(rows: &[LogRow], log_every: usize) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    let last = rows.last().map(|r| r.iter);
    for r in rows.iter().filter(|r| r.iter % log_every == 0 || Some(r.iter) == last) {
        writeln!(out, "{},{:e},{:e},{:e},{:e}", r.iter, r.lr, r.l_seg, r.l_prob, r.l_overall).unwrap();
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters after the last successful update.
    pub model: Model<f32>,
    /// One row per completed iteration.
    pub log: Vec<LogRow>,
    /// Why training stopped early, if it did.
    pub failure: Option<Error>,
}

impl TrainOutcome {
    pub fn into_result(self) -> Result<(Model<f32>, Vec<LogRow>)> {
        match self.failure {
            Some(e) => Err(e),
            None => Ok((self.model, self.log)),
        }
    }
}

/// Batch indices for iteration `iter`, drawn with replacement.
pub fn batch_indices(seed: u64, iter: usize, batch: usize, len: usize) -> Vec<usize> {
    let mut rng = Rng::derive(seed, "batch", &[iter as u64]);
    (0..batch).map(|_| rng.below(len)).collect()
}

/// Mean gradients and losses over one batch. Per-sample work may run in
/// parallel; the reduction is always in batch order.
pub fn batch_gradients(
    model: &Model<f32>,
    data: &Dataset,
    indices: &[usize],
    loss: &LossConfig,
    augment_cfg: &AugmentConfig,
    seed: u64,
    iter: usize,
    exec: Execution,
) -> Result<SampleGradients<f32>> {
    let per_sample = exec.map(indices, |b, &i| {
        let mut rng = Rng::derive(seed, "augment", &[iter as u64, b as u64]);
        let s = augment(&data.samples[i], &mut rng, augment_cfg)?;
        model.sample_gradients(&s.image, &s.mask, loss)
    });
    let mut grads = GradientStore::new();
    let (mut l_seg, mut l_prob, mut l_overall) = (0.0, 0.0, 0.0);
    for s in per_sample {
        let s = s?;
        grads.accumulate(&s.grads)?;
        l_seg += s.l_seg;
        l_prob += s.l_prob;
        l_overall += s.l_overall;
    }
    let k = 1.0 / indices.len() as f64;
    grads.scale(k as f32)?;
    Ok(SampleGradients {
        grads,
        l_seg: l_seg * k,
        l_prob: l_prob * k,
        l_overall: l_overall * k,
    })
}

/// Runs `cfg.iters` SGD iterations. Deterministic in `seed`: batch
/// composition and augmentation draw from streams keyed by iteration and
/// batch slot, so results do not depend on the thread count.
pub fn train(
    mut model: Model<f32>,
    data: &Dataset,
    loss: &LossConfig,
    cfg: &TrainConfig,
    seed: u64,
    exec: Execution,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if data.classes != model.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            data.classes, model.classes
        )));
    }
    let mut state = SgdState::new(&model.params, cfg.base_lr, cfg.momentum, cfg.iters);
    let mut log = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let indices = batch_indices(seed, iter, cfg.batch, data.len());
        let step = batch_gradients(&model, data, &indices, loss, &cfg.augment, seed, iter, exec)
            .and_then(|b| {
                if b.l_overall.is_finite() && b.l_seg.is_finite() {
                    Ok(b)
                } else {
                    Err(Error::Diverged { iter })
                }
            })
            .and_then(|b| {
                let mut params = model.params.clone();
                let lr = sgd_step(&mut params, &b.grads, &mut state)?;
                Ok((b, params, lr))
            });
        match step {
            Ok((b, params, lr)) => {
                model.params = params;
                log.push(LogRow {
                    iter,
                    lr,
                    l_seg: b.l_seg,
                    l_prob: b.l_prob,
                    l_overall: b.l_overall,
                });
            }
            Err(e) => {
                return Ok(TrainOutcome {
                    model,
                    log,
                    failure: Some(e),
                })
            }
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        failure: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::model::ModelConfig;
    use crate::scene::GeneratorConfig;

    fn tiny() -> (Model<f32>, Dataset, TrainConfig) {
        let gen = GeneratorConfig {
            height: 16,
            width: 16,
            ..Default::default()
        };
        let data = Dataset::generate(&gen, 0, 6, Execution::Sequential).unwrap();
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                in_channels: 3,
                channels: vec![4, 4],
                kernel_sizes: vec![3, 1],
            },
            ..Default::default()
        };
        let model = Model::init(cfg, 4, 1).unwrap();
        let train = TrainConfig {
            batch: 2,
            iters: 4,
            augment: AugmentConfig {
                crop: 16,
                ..Default::default()
            },
            ..Default::default()
        };
        (model, data, train)
    }

    #[test]
    fn deterministic_across_modes() {
        let (model, data, cfg) = tiny();
        let loss = LossConfig::default();
        let a = train(model.clone(), &data, &loss, &cfg, 5, Execution::Sequential).unwrap();
        let b = train(model, &data, &loss, &cfg, 5, Execution::Parallel).unwrap();
        assert!(a.failure.is_none());
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 4);
        assert_eq!(a.log[0].lr, 0.05);
    }

    #[test]
    fn divergence_keeps_last_good_parameters() {
        let (model, data, mut cfg) = tiny();
        cfg.base_lr = 1e30;
        let out = train(model, &data, &LossConfig::default(), &cfg, 5, Execution::Sequential).unwrap();
        let err = out.failure.as_ref().expect("diverges");
        assert!(matches!(err, Error::Diverged { .. } | Error::NonFinite { .. } | Error::NonFiniteGradient(_)), "{err}");
        assert!(out.model.params.iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn csv_respects_period_and_keeps_last_row() {
        let rows: Vec<LogRow> = (0..5)
            .map(|i| LogRow {
                iter: i,
                lr: 0.5,
                l_seg: 1.0,
                l_prob: 0.25,
                l_overall: 1.05,
            })
            .collect();
        let csv = log_csv(&rows, 2);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 1 + 3);
        assert!(lines[3].starts_with("4,"));
    }
}
