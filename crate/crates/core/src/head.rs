//! Global and conditional pixel classifiers.
//!
//! Feature maps are `[C̃×H×W]`, probability maps and logits `[C×H×W]`. The
//! conditional path runs four stages: coarse probabilities, per-class
//! feature centers, per-class kernel generation, dynamic 1×1 classification.
//! Each stage has a pure tensor function and a tape counterpart built from
//! the same kernels, so the two agree bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::autodiff::{add_row_bias, div_rows, group_linear, Graph, NodeId};
use crate::error::{Error, Result};
use crate::numeric::{matmul, softmax_channels, Element, Tensor};

/// Guard added to the probability mass when centers are mass-normalized.
pub const MASS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Global,
    #[default]
    Conditional,
}

/// How coarse scores become a probability map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbNorm {
    /// Channel softmax: every pixel's column sums to one.
    #[default]
    Softmax,
    /// Independent per-class sigmoid (used with the BCE probability loss).
    Sigmoid,
}

/// Divisor used when pooling features into class centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterDivisor {
    /// Divide by the pixel count N = H·W.
    #[default]
    PixelCount,
    /// Divide each class row by that class's probability mass.
    ClassMass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalClassifierParams<T> {
    /// `[C×C̃]`
    pub weight: Tensor<T>,
    /// `[C]`, absent for the bias-free variant.
    pub bias: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseHeadParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Per-class linear maps from a class center to that class's kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGenParams<T> {
    /// `[C×C̃×C̃]`
    pub weight: Tensor<T>,
    /// `[C×C̃]`
    pub bias: Tensor<T>,
}

/// `[C×C̃]` probability-weighted feature averages, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters<T>(pub Tensor<T>);

/// `[C×C̃]` input-specific 1×1 kernels, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedKernels<T>(pub Tensor<T>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConditionalOptions {
    pub norm: ProbNorm,
    pub divisor: CenterDivisor,
    /// Block gradient from the classifier back into the coarse head through
    /// the centers.
    pub detach_probs: bool,
}

fn flat_dims<T: Element>(op: &'static str, f: &Tensor<T>) -> Result<(usize, usize, usize)> {
    f.expect_rank(op, 3)?;
    Ok((f.shape()[0], f.shape()[1], f.shape()[2]))
}

fn pointwise<T: Element>(
    op: &'static str,
    f: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (c, h, w) = flat_dims(op, f)?;
    weight.expect_rank(op, 2)?;
    if weight.shape()[1] != c {
        return Err(Error::dim(op, format!("weight [_×{c}]"), format!("{:?}", weight.shape())));
    }
    let y = matmul(weight, &f.reshape(&[c, h * w])?)?;
    let y = match bias {
        Some(b) => add_row_bias(&y, b)?,
        None => y,
    };
    y.reshape(&[weight.shape()[0], h, w])
}

/// Static 1×1 classifier: `Y = W·F + b`.
pub fn global_classify<T: Element>(f: &Tensor<T>, p: &GlobalClassifierParams<T>) -> Result<Tensor<T>> {
    pointwise("global_classify", f, &p.weight, p.bias.as_ref())
}

pub fn coarse_scores<T: Element>(f: &Tensor<T>, p: &CoarseHeadParams<T>) -> Result<Tensor<T>> {
    pointwise("coarse_scores", f, &p.weight, Some(&p.bias))
}

pub fn normalize<T: Element>(scores: &Tensor<T>, norm: ProbNorm) -> Result<Tensor<T>> {
    match norm {
        ProbNorm::Softmax => softmax_channels(scores),
        ProbNorm::Sigmoid => scores.sigmoid(),
    }
}

pub fn coarse_probabilities<T: Element>(f: &Tensor<T>, p: &CoarseHeadParams<T>, norm: ProbNorm) -> Result<Tensor<T>> {
    normalize(&coarse_scores(f, p)?, norm)
}

/// `E = P_flat · F_flatᵀ / N` (or per-row class mass).
pub fn aggregate_class_features<T: Element>(
    f: &Tensor<T>,
    probs: &Tensor<T>,
    divisor: CenterDivisor,
) -> Result<ClassCenters<T>> {
    let (cf, h, w) = flat_dims("aggregate_class_features", f)?;
    let (c, ph, pw) = flat_dims("aggregate_class_features", probs)?;
    if (ph, pw) != (h, w) {
        return Err(Error::dim(
            "aggregate_class_features",
            format!("probabilities at {h}x{w}"),
            format!("{ph}x{pw}"),
        ));
    }
    let n = h * w;
    let p = probs.reshape(&[c, n])?;
    let raw = matmul(&p, &f.reshape(&[cf, n])?.transpose2()?)?;
    let e = match divisor {
        CenterDivisor::PixelCount => raw.scale(T::from_f64(1.0 / n as f64))?,
        CenterDivisor::ClassMass => div_rows(&raw, &p.sum_axis(1)?, T::from_f64(MASS_EPS))?,
    };
    Ok(ClassCenters(e))
}

/// `W_φ[s] = W_θ[s]·E[s] + b_θ[s]`, independently per class.
pub fn generate_kernels<T: Element>(centers: &ClassCenters<T>, p: &KernelGenParams<T>) -> Result<GeneratedKernels<T>> {
    Ok(GeneratedKernels(group_linear(&centers.0, &p.weight, &p.bias)?))
}

/// `Y = W_φ·F`, no bias.
pub fn conditional_classify<T: Element>(f: &Tensor<T>, k: &GeneratedKernels<T>) -> Result<Tensor<T>> {
    pointwise("conditional_classify", f, &k.0, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalOutput<T> {
    pub probs: Tensor<T>,
    pub centers: ClassCenters<T>,
    pub kernels: GeneratedKernels<T>,
    pub logits: Tensor<T>,
}

pub fn conditional_head_forward<T: Element>(
    f: &Tensor<T>,
    coarse: &CoarseHeadParams<T>,
    gen: &KernelGenParams<T>,
    opts: ConditionalOptions,
) -> Result<ConditionalOutput<T>> {
    let probs = coarse_probabilities(f, coarse, opts.norm)?;
    let centers = aggregate_class_features(f, &probs, opts.divisor)?;
    let kernels = generate_kernels(&centers, gen)?;
    let logits = conditional_classify(f, &kernels)?;
    Ok(ConditionalOutput {
        probs,
        centers,
        kernels,
        logits,
    })
}

fn pointwise_graph<T: Element>(g: &mut Graph<T>, f: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
    let (c, h, w) = flat_dims("pointwise_graph", g.value(f))?;
    let rows = g.value(weight).shape()[0];
    let flat = g.reshape(f, &[c, h * w])?;
    let mut y = g.matmul(weight, flat)?;
    if let Some(b) = bias {
        y = g.add_row_bias(y, b)?;
    }
    g.reshape(y, &[rows, h, w])
}

/// Node ids of the recorded conditional head.
#[derive(Debug, Clone, Copy)]
pub struct ConditionalNodes {
    pub probs: NodeId,
    pub centers: NodeId,
    pub kernels: NodeId,
    pub logits: NodeId,
}

pub fn global_head_graph<T: Element>(g: &mut Graph<T>, f: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
    pointwise_graph(g, f, weight, bias)
}

#[allow(clippy::too_many_arguments)]
pub fn conditional_head_graph<T: Element>(
    g: &mut Graph<T>,
    f: NodeId,
    coarse_w: NodeId,
    coarse_b: NodeId,
    gen_w: NodeId,
    gen_b: NodeId,
    opts: ConditionalOptions,
) -> Result<ConditionalNodes> {
    let (cf, h, w) = flat_dims("conditional_head_graph", g.value(f))?;
    let n = h * w;
    let scores = pointwise_graph(g, f, coarse_w, Some(coarse_b))?;
    let probs = match opts.norm {
        ProbNorm::Softmax => g.softmax_channels(scores)?,
        ProbNorm::Sigmoid => g.sigmoid(scores)?,
    };
    let c = g.value(probs).shape()[0];
    let pooled_from = if opts.detach_probs { g.detach(probs) } else { probs };
    let p_flat = g.reshape(pooled_from, &[c, n])?;
    let f_flat = g.reshape(f, &[cf, n])?;
    let f_t = g.transpose(f_flat)?;
    let raw = g.matmul(p_flat, f_t)?;
    let centers = match opts.divisor {
        CenterDivisor::PixelCount => g.scale(raw, T::from_f64(1.0 / n as f64))?,
        CenterDivisor::ClassMass => {
            let mass = g.row_sum(p_flat)?;
            g.div_rows(raw, mass, T::from_f64(MASS_EPS))?
        }
    };
    let kernels = g.group_linear(centers, gen_w, gen_b)?;
    let logits = pointwise_graph(g, f, kernels, None)?;
    Ok(ConditionalNodes {
        probs,
        centers,
        kernels,
        logits,
    })
}
