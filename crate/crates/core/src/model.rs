//! Backbone plus classifier head, with named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GradCheckReport, GradientStore, Graph, NodeId, ParamSet, DEFAULT_TOLERANCE};
use crate::backbone::{backbone_forward, backbone_graph, BackboneConfig};
use crate::error::{Error, Result};
use crate::head::{
    conditional_head_forward, conditional_head_graph, global_classify, global_head_graph, CenterDivisor,
    CoarseHeadParams, ConditionalOptions, GlobalClassifierParams, HeadKind, KernelGenParams, ProbNorm,
};
use crate::labels::{LabelMask, OneHotMask, IGNORE};
use crate::loss::{bce_probmap, soft_dice, LossConfig, ProbLoss};
use crate::numeric::{Element, Rng, Tensor};

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";
pub const COARSE_WEIGHT: &str = "coarse.weight";
pub const COARSE_BIAS: &str = "coarse.bias";
pub const GENERATOR_WEIGHT: &str = "generator.weight";
pub const GENERATOR_BIAS: &str = "generator.bias";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadKind,
    pub prob_norm: ProbNorm,
    pub detach_probs: bool,
    pub center_divisor: CenterDivisor,
    /// Whether the global classifier carries a bias.
    pub global_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            head: HeadKind::Conditional,
            prob_norm: ProbNorm::Softmax,
            detach_probs: false,
            center_divisor: CenterDivisor::PixelCount,
            global_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()
    }

    pub fn conditional_options(&self) -> ConditionalOptions {
        ConditionalOptions {
            norm: self.prob_norm,
            divisor: self.center_divisor,
            detach_probs: self.detach_probs,
        }
    }

    /// Expected name → shape of every parameter for `classes` output classes.
    pub fn param_shapes(&self, classes: usize) -> BTreeMap<String, Vec<usize>> {
        let cf = self.backbone.feature_channels();
        let mut m = self.backbone.param_shapes();
        match self.head {
            HeadKind::Global => {
                m.insert(CLASSIFIER_WEIGHT.into(), vec![classes, cf]);
                if self.global_bias {
                    m.insert(CLASSIFIER_BIAS.into(), vec![classes]);
                }
            }
            HeadKind::Conditional => {
                m.insert(COARSE_WEIGHT.into(), vec![classes, cf]);
                m.insert(COARSE_BIAS.into(), vec![classes]);
                m.insert(GENERATOR_WEIGHT.into(), vec![classes, cf, cf]);
                m.insert(GENERATOR_BIAS.into(), vec![classes, cf]);
            }
        }
        m
    }
}

/// Output of a pure forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub logits: Tensor<T>,
    /// Coarse probability map (conditional head only).
    pub probs: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct GraphOutput {
    pub features: NodeId,
    pub logits: NodeId,
    pub probs: Option<NodeId>,
}

/// Loss nodes recorded by [`Model::loss_graph`].
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub seg: NodeId,
    /// Present only when the probability loss carries weight.
    pub prob: Option<NodeId>,
    pub probs: Option<NodeId>,
}

/// Per-sample loss values and parameter gradients.
#[derive(Debug, Clone)]
pub struct SampleGradients<T> {
    pub grads: GradientStore<T>,
    pub l_seg: f64,
    /// Probability-map loss; reported even when it carries zero weight.
    pub l_prob: f64,
    pub l_overall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub classes: usize,
    pub params: ParamSet<T>,
}

impl<T: Element> Model<T> {
    /// Fresh weights. The backbone draw depends only on `seed`, so global
    /// and conditional models built with the same seed share it.
    pub fn init(config: ModelConfig, classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes < 2 || classes > 255 {
            return Err(Error::Config(format!("class count {classes} outside 2..=255")));
        }
        let cf = config.backbone.feature_channels();
        let he = (2.0 / cf as f64).sqrt();
        let mut params = ParamSet::new();
        config.backbone.init(&mut Rng::derive(seed, "backbone", &[]), &mut params);
        match config.head {
            HeadKind::Global => {
                let mut rng = Rng::derive(seed, "head.classifier", &[]);
                params.insert(CLASSIFIER_WEIGHT, Tensor::randn(&[classes, cf], he, &mut rng));
                if config.global_bias {
                    params.insert(CLASSIFIER_BIAS, Tensor::zeros(&[classes]));
                }
            }
            HeadKind::Conditional => {
                let mut rng = Rng::derive(seed, "head.coarse", &[]);
                params.insert(COARSE_WEIGHT, Tensor::randn(&[classes, cf], he, &mut rng));
                params.insert(COARSE_BIAS, Tensor::zeros(&[classes]));
                let mut rng = Rng::derive(seed, "head.generator", &[]);
                params.insert(GENERATOR_WEIGHT, Tensor::randn(&[classes, cf, cf], he, &mut rng));
                params.insert(GENERATOR_BIAS, Tensor::zeros(&[classes, cf]));
            }
        }
        Ok(Model {
            config,
            classes,
            params,
        })
    }

    /// Wraps existing parameters after checking every name and shape.
    pub fn from_params(config: ModelConfig, classes: usize, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let want = config.param_shapes(classes);
        let have = params.shapes();
        if want != have {
            let mut diffs = Vec::new();
            for (k, v) in &want {
                match have.get(k) {
                    None => diffs.push(format!("missing {k} {v:?}")),
                    Some(h) if h != v => diffs.push(format!("{k}: expected {v:?}, found {h:?}")),
                    _ => {}
                }
            }
            for k in have.keys().filter(|k| !want.contains_key(*k)) {
                diffs.push(format!("unexpected {k}"));
            }
            return Err(Error::ShapeDiff(diffs.join("; ")));
        }
        Ok(Model {
            config,
            classes,
            params,
        })
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            classes: self.classes,
            params: self.params.cast(),
        }
    }

    pub fn features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        backbone_forward(image, &self.config.backbone, &self.params)
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<Prediction<T>> {
        let f = self.features(image)?;
        let p = &self.params;
        match self.config.head {
            HeadKind::Global => {
                let head = GlobalClassifierParams {
                    weight: p.get(CLASSIFIER_WEIGHT)?.clone(),
                    bias: if self.config.global_bias {
                        Some(p.get(CLASSIFIER_BIAS)?.clone())
                    } else {
                        None
                    },
                };
                Ok(Prediction {
                    logits: global_classify(&f, &head)?,
                    probs: None,
                })
            }
            HeadKind::Conditional => {
                let coarse = CoarseHeadParams {
                    weight: p.get(COARSE_WEIGHT)?.clone(),
                    bias: p.get(COARSE_BIAS)?.clone(),
                };
                let gen = KernelGenParams {
                    weight: p.get(GENERATOR_WEIGHT)?.clone(),
                    bias: p.get(GENERATOR_BIAS)?.clone(),
                };
                let out = conditional_head_forward(&f, &coarse, &gen, self.config.conditional_options())?;
                Ok(Prediction {
                    logits: out.logits,
                    probs: Some(out.probs),
                })
            }
        }
    }

    /// Binds every parameter as a named leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> BTreeMap<String, NodeId> {
        self.params
            .iter()
            .map(|(k, v)| (k.to_string(), g.param(k, v.clone())))
            .collect()
    }

    pub fn forward_graph(&self, g: &mut Graph<T>, image: NodeId, nodes: &BTreeMap<String, NodeId>) -> Result<GraphOutput> {
        let node = |name: &str| {
            nodes
                .get(name)
                .copied()
                .ok_or_else(|| Error::Contract(format!("unbound {name}")))
        };
        let features = backbone_graph(g, image, &self.config.backbone, nodes)?;
        match self.config.head {
            HeadKind::Global => {
                let bias = if self.config.global_bias {
                    Some(node(CLASSIFIER_BIAS)?)
                } else {
                    None
                };
                let logits = global_head_graph(g, features, node(CLASSIFIER_WEIGHT)?, bias)?;
                Ok(GraphOutput {
                    features,
                    logits,
                    probs: None,
                })
            }
            HeadKind::Conditional => {
                let n = conditional_head_graph(
                    g,
                    features,
                    node(COARSE_WEIGHT)?,
                    node(COARSE_BIAS)?,
                    node(GENERATOR_WEIGHT)?,
                    node(GENERATOR_BIAS)?,
                    self.config.conditional_options(),
                )?;
                Ok(GraphOutput {
                    features,
                    logits: n.logits,
                    probs: Some(n.probs),
                })
            }
        }
    }

    /// Records `λ·L_prob + L_seg` for one sample.
    pub fn loss_graph(&self, g: &mut Graph<T>, image: &Tensor<T>, labels: &LabelMask, loss: &LossConfig) -> Result<LossNodes> {
        let nodes = self.bind(g);
        self.loss_graph_with(g, &nodes, image, labels, loss)
    }

    /// [`Model::loss_graph`] over parameter nodes the caller has already bound.
    pub fn loss_graph_with(
        &self,
        g: &mut Graph<T>,
        nodes: &BTreeMap<String, NodeId>,
        image: &Tensor<T>,
        labels: &LabelMask,
        loss: &LossConfig,
    ) -> Result<LossNodes> {
        let x = g.constant(image.clone());
        let out = self.forward_graph(g, x, nodes)?;
        let seg = g.cross_entropy(out.logits, labels)?;
        let lambda = loss.effective_lambda();
        let prob = match (out.probs, loss.prob_loss) {
            (Some(p), ProbLoss::Dice) if lambda > 0.0 => {
                let q = OneHotMask::from_labels(labels, self.classes)?;
                Some(g.soft_dice(p, &q, loss.eps, loss.dice_reduction)?)
            }
            (Some(p), ProbLoss::Bce) if lambda > 0.0 => {
                let q = OneHotMask::from_labels(labels, self.classes)?;
                Some(g.bce(p, &q)?)
            }
            _ => None,
        };
        let total = match prob {
            Some(pl) => {
                let weighted = g.scale(pl, T::from_f64(lambda))?;
                g.add(weighted, seg)?
            }
            None => seg,
        };
        Ok(LossNodes {
            total,
            seg,
            prob,
            probs: out.probs,
        })
    }

    pub fn sample_gradients(&self, image: &Tensor<T>, labels: &LabelMask, loss: &LossConfig) -> Result<SampleGradients<T>> {
        let mut g = Graph::new();
        let n = self.loss_graph(&mut g, image, labels, loss)?;
        let l_seg = g.value(n.seg).item()?.as_f64();
        let l_overall = g.value(n.total).item()?.as_f64();
        let l_prob = match (n.prob, n.probs) {
            (Some(l), _) => g.value(l).item()?.as_f64(),
            (None, Some(p)) => self.monitor_prob_loss(g.value(p), labels, loss)?,
            (None, None) => 0.0,
        };
        let grads = g.backward(n.total)?.into_store();
        Ok(SampleGradients {
            grads,
            l_seg,
            l_prob,
            l_overall,
        })
    }

    /// Unweighted probability-map loss for logging when it is not trained on.
    fn monitor_prob_loss(&self, probs: &Tensor<T>, labels: &LabelMask, loss: &LossConfig) -> Result<f64> {
        let q = OneHotMask::from_labels(labels, self.classes)?;
        let v = match loss.prob_loss {
            ProbLoss::Bce => bce_probmap(probs, &q)?,
            _ => soft_dice(probs, &q, loss.eps, loss.dice_reduction)?,
        };
        Ok(v.as_f64())
    }
}

/// End-to-end gradient checks of the training loss with respect to every
/// parameter, on a small model (two backbone layers, three classes, 6×6
/// input) for each head and probability-loss combination.
pub fn model_grad_cases(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = Rng::derive(seed, "model_gradcheck", &[]);
    let (h, w, classes) = (6, 6, 3);
    let data = (0..h * w)
        .map(|_| if rng.bernoulli(0.1) { IGNORE } else { rng.below(classes) as u8 })
        .collect();
    let labels = LabelMask::new(h, w, data)?;
    let image = Tensor::<f64>::uniform(&[3, h, w], 0.0, 1.0, &mut rng);
    let mut out = Vec::new();
    for (head, prob_loss) in [
        (HeadKind::Global, ProbLoss::None),
        (HeadKind::Conditional, ProbLoss::None),
        (HeadKind::Conditional, ProbLoss::Dice),
        (HeadKind::Conditional, ProbLoss::Bce),
    ] {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                in_channels: 3,
                channels: vec![3, 4],
                kernel_sizes: vec![3, 1],
            },
            head,
            prob_norm: if prob_loss == ProbLoss::Bce { ProbNorm::Sigmoid } else { ProbNorm::Softmax },
            ..Default::default()
        };
        let m = Model::<f64>::init(cfg, classes, seed)?;
        let loss = LossConfig {
            prob_loss,
            ..Default::default()
        };
        let names: Vec<String> = m.params.names().map(String::from).collect();
        // zero biases put relu inputs exactly on the kink wherever a layer's
        // input is all zero; move every bias off it
        let inputs: Vec<Tensor<f64>> = names
            .iter()
            .map(|n| {
                let t = m.params.get(n)?;
                Ok(if n.ends_with("bias") { t.add(&Tensor::randn(t.shape(), 0.3, &mut rng))? } else { t.clone() })
            })
            .collect::<Result<_>>()?;
        let label = format!("model_{}_{}", if head == HeadKind::Global { "global" } else { "conditional" }, prob_loss.as_str());
        out.push(grad_check(
            &label,
            |g, ids| {
                let nodes = names.iter().cloned().zip(ids.iter().copied()).collect();
                Ok(m.loss_graph_with(g, &nodes, &image, &labels, &loss)?.total)
            },
            &inputs,
            DEFAULT_TOLERANCE,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(head: HeadKind) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                in_channels: 3,
                channels: vec![3, 4],
                kernel_sizes: vec![3, 1],
            },
            head,
            ..Default::default()
        }
    }

    fn labels(h: usize, w: usize, classes: u8, seed: u64) -> LabelMask {
        let mut rng = Rng::new(seed);
        let data = (0..h * w)
            .map(|_| if rng.bernoulli(0.1) { 255 } else { rng.below(classes as usize) as u8 })
            .collect();
        LabelMask::new(h, w, data).unwrap()
    }

    #[test]
    fn heads_share_the_backbone_draw() {
        let a = Model::<f32>::init(small_config(HeadKind::Global), 3, 11).unwrap();
        let b = Model::<f32>::init(small_config(HeadKind::Conditional), 3, 11).unwrap();
        for name in a.config.backbone.param_shapes().keys() {
            assert_eq!(a.params.get(name).unwrap(), b.params.get(name).unwrap());
        }
    }

    #[test]
    fn from_params_reports_shape_differences() {
        let m = Model::<f64>::init(small_config(HeadKind::Conditional), 3, 1).unwrap();
        let err = Model::from_params(small_config(HeadKind::Conditional), 4, m.params.clone()).unwrap_err();
        assert!(matches!(err, Error::ShapeDiff(ref s) if s.contains("coarse.weight")));
        assert!(Model::from_params(m.config.clone(), 3, m.params).is_ok());
    }

    #[test]
    fn graph_forward_matches_pure_forward() {
        for head in [HeadKind::Global, HeadKind::Conditional] {
            let m = Model::<f64>::init(small_config(head), 3, 2).unwrap();
            let img = Tensor::uniform(&[3, 5, 6], 0.0, 1.0, &mut Rng::new(3));
            let mut g = Graph::new();
            let nodes = m.bind(&mut g);
            let x = g.constant(img.clone());
            let out = m.forward_graph(&mut g, x, &nodes).unwrap();
            let pure = m.forward(&img).unwrap();
            assert_eq!(g.value(out.logits), &pure.logits);
            assert_eq!(out.probs.map(|p| g.value(p).clone()), pure.probs);
        }
    }

    #[test]
    fn full_model_loss_gradients_match_finite_differences() {
        for report in model_grad_cases(6).unwrap() {
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn sample_gradients_cover_every_parameter() {
        let m = Model::<f64>::init(small_config(HeadKind::Conditional), 3, 7).unwrap();
        let img = Tensor::uniform(&[3, 4, 4], 0.0, 1.0, &mut Rng::new(8));
        let s = m.sample_gradients(&img, &labels(4, 4, 3, 9), &LossConfig::default()).unwrap();
        assert_eq!(s.grads.len(), m.params.len());
        assert!((s.l_overall - (0.2 * s.l_prob + s.l_seg)).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_still_reports_prob_loss() {
        let m = Model::<f64>::init(small_config(HeadKind::Conditional), 3, 7).unwrap();
        let img = Tensor::uniform(&[3, 4, 4], 0.0, 1.0, &mut Rng::new(8));
        let loss = LossConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let s = m.sample_gradients(&img, &labels(4, 4, 3, 9), &loss).unwrap();
        assert!(s.l_prob > 0.0);
        assert_eq!(s.l_overall, s.l_seg);
    }
}
