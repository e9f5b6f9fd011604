//! Training objectives. Each loss has a value function and a gradient
//! function; the autodiff graph calls the latter in its backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMask, OneHotMask, IGNORE};
use crate::numeric::{Element, Tensor};

pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_DICE_EPS: f64 = 1e-5;
/// Probability clamp for the binary cross entropy.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiceReduction {
    /// Dice per class over spatial positions, averaged over active classes.
    #[default]
    PerClass,
    /// A single dice over all classes and positions.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    pub eps: f64,
    pub prob_loss: ProbLoss,
    pub dice_reduction: DiceReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: DEFAULT_LAMBDA,
            eps: DEFAULT_DICE_EPS,
            prob_loss: ProbLoss::Dice,
            dice_reduction: DiceReduction::PerClass,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("loss.lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!("loss.eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }

    /// Weight actually applied to the probability-map loss.
    pub fn effective_lambda(&self) -> f64 {
        match self.prob_loss {
            ProbLoss::None => 0.0,
            _ => self.lambda,
        }
    }
}

/// Supervision applied to the coarse probability maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbLoss {
    None,
    Bce,
    Dice,
}

impl ProbLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbLoss::None => "none",
            ProbLoss::Bce => "bce",
            ProbLoss::Dice => "dice",
        }
    }
}

fn check_spatial<T: Element>(op: &'static str, x: &Tensor<T>, h: usize, w: usize) -> Result<usize> {
    x.expect_rank(op, 3)?;
    if x.shape()[1] != h || x.shape()[2] != w {
        return Err(Error::dim(op, format!("[C, {h}, {w}]"), format!("{:?}", x.shape())));
    }
    Ok(x.shape()[0])
}

/// Mean over non-ignored pixels of `-log softmax(Y)[label]`, via log-sum-exp.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &LabelMask) -> Result<T> {
    Ok(cross_entropy_parts(logits, labels)?.0)
}

/// Loss value and the softmax probabilities the gradient needs.
pub(crate) fn cross_entropy_parts<T: Element>(
    logits: &Tensor<T>,
    labels: &LabelMask,
) -> Result<(T, Tensor<T>)> {
    let c = check_spatial("cross_entropy", logits, labels.height(), labels.width())?;
    labels.check_range(c)?;
    let n = labels.len();
    let d = logits.data();
    let mut probs = vec![T::zero(); d.len()];
    let mut total = T::zero();
    let mut count = 0usize;
    for (j, &label) in labels.data().iter().enumerate() {
        let mut max = d[j];
        for ch in 1..c {
            max = max.max(d[ch * n + j]);
        }
        let mut sum = T::zero();
        for ch in 0..c {
            let e = (d[ch * n + j] - max).exp();
            probs[ch * n + j] = e;
            sum = sum + e;
        }
        for ch in 0..c {
            probs[ch * n + j] = probs[ch * n + j] / sum;
        }
        if label != IGNORE {
            let lse = max + sum.ln();
            total = total + (lse - d[label as usize * n + j]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMean("cross_entropy"));
    }
    let loss = total / T::from_f64(count as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    Ok((loss, Tensor::from_parts(logits.shape().to_vec(), probs)))
}

/// `d loss / d logits` given the cached softmax.
pub(crate) fn cross_entropy_grad<T: Element>(probs: &Tensor<T>, labels: &LabelMask) -> Tensor<T> {
    let c = probs.shape()[0];
    let n = labels.len();
    let count = labels.valid_count();
    let inv = T::one() / T::from_f64(count.max(1) as f64);
    let mut g = probs.data().to_vec();
    for (j, &label) in labels.data().iter().enumerate() {
        for ch in 0..c {
            let idx = ch * n + j;
            g[idx] = if label == IGNORE {
                T::zero()
            } else if ch == label as usize {
                (g[idx] - T::one()) * inv
            } else {
                g[idx] * inv
            };
        }
    }
    Tensor::from_parts(probs.shape().to_vec(), g)
}

struct DiceStats<T> {
    /// per class (or a single pooled entry): Σ p q, Σ p² + Σ q², active
    inter: Vec<T>,
    denom: Vec<T>,
    active: Vec<bool>,
}

fn dice_stats<T: Element>(
    p: &Tensor<T>,
    q: &OneHotMask<T>,
    reduction: DiceReduction,
) -> Result<DiceStats<T>> {
    if p.shape() != q.q.shape() {
        return Err(Error::dim(
            "soft_dice",
            format!("{:?}", q.q.shape()),
            format!("{:?}", p.shape()),
        ));
    }
    if q.valid_count() == 0 {
        return Err(Error::UndefinedMean("soft_dice"));
    }
    let c = p.shape()[0];
    let n = q.valid.len();
    let (pd, qd) = (p.data(), q.q.data());
    let groups = match reduction {
        DiceReduction::PerClass => c,
        DiceReduction::Pooled => 1,
    };
    let mut inter = vec![T::zero(); groups];
    let mut denom = vec![T::zero(); groups];
    let mut p_mass = vec![T::zero(); groups];
    let mut q_mass = vec![T::zero(); groups];
    for ch in 0..c {
        let g = if groups == 1 { 0 } else { ch };
        for j in 0..n {
            if !q.valid[j] {
                continue;
            }
            let (pv, qv) = (pd[ch * n + j], qd[ch * n + j]);
            inter[g] = inter[g] + pv * qv;
            denom[g] = denom[g] + pv * pv + qv * qv;
            p_mass[g] = p_mass[g] + pv;
            q_mass[g] = q_mass[g] + qv;
        }
    }
    let active = (0..groups)
        .map(|g| p_mass[g] > T::zero() || q_mass[g] > T::zero())
        .collect();
    Ok(DiceStats { inter, denom, active })
}

/// Soft dice loss `1 - 2Σpq / (Σp² + Σq² + ε)` over non-ignored pixels.
///
/// With [`DiceReduction::PerClass`] the dice term is taken per class and
/// averaged over classes that have truth or prediction mass; the result lies
/// in `[0, 1]` for probabilities in `[0, 1]`.
pub fn soft_dice<T: Element>(
    p: &Tensor<T>,
    q: &OneHotMask<T>,
    eps: f64,
    reduction: DiceReduction,
) -> Result<T> {
    let s = dice_stats(p, q, reduction)?;
    let eps = T::from_f64(eps);
    let two = T::from_f64(2.0);
    let mut sum = T::zero();
    let mut k = 0usize;
    for g in 0..s.inter.len() {
        if s.active[g] {
            sum = sum + two * s.inter[g] / (s.denom[g] + eps);
            k += 1;
        }
    }
    if k == 0 {
        // no mass anywhere: nothing overlaps
        return Ok(T::one());
    }
    let loss = T::one() - sum / T::from_f64(k as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "soft_dice" });
    }
    Ok(loss)
}

pub(crate) fn soft_dice_grad<T: Element>(
    p: &Tensor<T>,
    q: &OneHotMask<T>,
    eps: f64,
    reduction: DiceReduction,
) -> Result<Tensor<T>> {
    let s = dice_stats(p, q, reduction)?;
    let k = s.active.iter().filter(|&&a| a).count();
    let c = p.shape()[0];
    let n = q.valid.len();
    let mut g = vec![T::zero(); p.numel()];
    if k == 0 {
        return Ok(Tensor::from_parts(p.shape().to_vec(), g));
    }
    let eps = T::from_f64(eps);
    let inv_k = T::one() / T::from_f64(k as f64);
    let (two, four) = (T::from_f64(2.0), T::from_f64(4.0));
    let (pd, qd) = (p.data(), q.q.data());
    for ch in 0..c {
        let gi = if s.inter.len() == 1 { 0 } else { ch };
        if !s.active[gi] {
            continue;
        }
        let den = s.denom[gi] + eps;
        let a = two / den;
        let b = four * s.inter[gi] / (den * den);
        for j in 0..n {
            if q.valid[j] {
                let idx = ch * n + j;
                // loss = 1 - mean dice  ⇒  d/dp = -(2q/den - 4 I p / den²) / k
                g[idx] = -(a * qd[idx] - b * pd[idx]) * inv_k;
            }
        }
    }
    Tensor::from_parts(p.shape().to_vec(), g).check_finite("soft_dice_grad")
}

/// Mean binary cross entropy over classes and non-ignored pixels of
/// independently normalized (sigmoid) probability maps.
pub fn bce_probmap<T: Element>(p: &Tensor<T>, q: &OneHotMask<T>) -> Result<T> {
    if p.shape() != q.q.shape() {
        return Err(Error::dim("bce_probmap", format!("{:?}", q.q.shape()), format!("{:?}", p.shape())));
    }
    let valid = q.valid_count();
    if valid == 0 {
        return Err(Error::UndefinedMean("bce_probmap"));
    }
    let c = p.shape()[0];
    let n = q.valid.len();
    let (lo, hi) = (T::from_f64(BCE_CLAMP), T::one() - T::from_f64(BCE_CLAMP));
    let (pd, qd) = (p.data(), q.q.data());
    let mut total = T::zero();
    for ch in 0..c {
        for j in 0..n {
            if !q.valid[j] {
                continue;
            }
            let idx = ch * n + j;
            let pv = pd[idx].max(lo).min(hi);
            let qv = qd[idx];
            total = total - (qv * pv.ln() + (T::one() - qv) * (T::one() - pv).ln());
        }
    }
    let loss = total / T::from_f64((c * valid) as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "bce_probmap" });
    }
    Ok(loss)
}

pub(crate) fn bce_probmap_grad<T: Element>(p: &Tensor<T>, q: &OneHotMask<T>) -> Tensor<T> {
    let c = p.shape()[0];
    let n = q.valid.len();
    let inv = T::one() / T::from_f64((c * q.valid_count().max(1)) as f64);
    let (lo, hi) = (T::from_f64(BCE_CLAMP), T::one() - T::from_f64(BCE_CLAMP));
    let (pd, qd) = (p.data(), q.q.data());
    let mut g = vec![T::zero(); p.numel()];
    for ch in 0..c {
        for j in 0..n {
            let idx = ch * n + j;
            let pv = pd[idx];
            if q.valid[j] && pv > lo && pv < hi {
                let qv = qd[idx];
                g[idx] = (-qv / pv + (T::one() - qv) / (T::one() - pv)) * inv;
            }
        }
    }
    Tensor::from_parts(p.shape().to_vec(), g)
}

/// `λ·L_prob + L_seg`.
pub fn overall_loss(l_prob: f64, l_seg: f64, lambda: f64) -> f64 {
    lambda * l_prob + l_seg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(h: usize, w: usize, v: &[u8]) -> LabelMask {
        LabelMask::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let y = Tensor::<f64>::zeros(&[4, 2, 2]);
        let l = cross_entropy(&y, &labels(2, 2, &[0, 1, 2, 3])).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturates() {
        let y = Tensor::<f64>::new(&[2, 1, 1], vec![1e4, 0.0]).unwrap();
        assert!(cross_entropy(&y, &labels(1, 1, &[0])).unwrap() < 1e-6);
    }

    #[test]
    fn cross_entropy_averages_pixels() {
        // pixel 0: p(true) = 1/2, pixel 1: p(true) = 1/8
        let y = Tensor::<f64>::new(&[2, 1, 2], vec![0.0, 0.0, 0.0, 7f64.ln()]).unwrap();
        let l = cross_entropy(&y, &labels(1, 2, &[0, 0])).unwrap();
        assert!((l - (2f64.ln() + 8f64.ln()) / 2.0).abs() < 1e-12);
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored() {
        let y = Tensor::<f64>::zeros(&[2, 1, 2]);
        assert!(matches!(
            cross_entropy(&y, &labels(1, 2, &[IGNORE, IGNORE])),
            Err(Error::UndefinedMean(_))
        ));
    }

    #[test]
    fn cross_entropy_ignores_pixels() {
        let y = Tensor::<f64>::new(&[2, 1, 2], vec![0.0, 5.0, 0.0, -5.0]).unwrap();
        let a = cross_entropy(&y, &labels(1, 2, &[0, IGNORE])).unwrap();
        assert!((a - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dice_perfect_match() {
        let m = labels(2, 2, &[0, 1, 1, 0]);
        let q = OneHotMask::<f64>::from_labels(&m, 2).unwrap();
        let l = soft_dice(&q.q, &q, DEFAULT_DICE_EPS, DiceReduction::PerClass).unwrap();
        // each class: 1 - 4/(4+ε)
        let expect = DEFAULT_DICE_EPS / (4.0 + DEFAULT_DICE_EPS);
        assert!((l - expect).abs() < 1e-15);
        assert!(l < 1e-4);
    }

    #[test]
    fn dice_half_overlap() {
        let p = Tensor::<f64>::new(&[2, 1, 4], vec![1., 1., 0., 0., 0., 0., 1., 1.]).unwrap();
        let q = OneHotMask::from_labels(&labels(1, 4, &[0, 1, 0, 1]), 2).unwrap();
        let l = soft_dice(&p, &q, DEFAULT_DICE_EPS, DiceReduction::PerClass).unwrap();
        assert!((l - (1.0 - 2.0 / (4.0 + DEFAULT_DICE_EPS))).abs() < 1e-15);
        assert!((l - 0.5).abs() < 1e-5);
    }

    #[test]
    fn dice_disjoint_is_one() {
        let p = Tensor::<f64>::new(&[2, 1, 2], vec![0., 1., 1., 0.]).unwrap();
        let q = OneHotMask::from_labels(&labels(1, 2, &[0, 1]), 2).unwrap();
        assert_eq!(soft_dice(&p, &q, DEFAULT_DICE_EPS, DiceReduction::PerClass).unwrap(), 1.0);
        assert_eq!(soft_dice(&p, &q, DEFAULT_DICE_EPS, DiceReduction::Pooled).unwrap(), 1.0);
    }

    #[test]
    fn dice_absent_class_is_excluded() {
        // class 2 has neither truth nor prediction mass
        let p = Tensor::<f64>::new(&[3, 1, 2], vec![1., 0., 0., 1., 0., 0.]).unwrap();
        let q = OneHotMask::from_labels(&labels(1, 2, &[0, 1]), 3).unwrap();
        let l = soft_dice(&p, &q, 1e-5, DiceReduction::PerClass).unwrap();
        assert!(l < 1e-5);
    }

    #[test]
    fn bce_anchors() {
        let m = labels(1, 2, &[0, 1]);
        let q = OneHotMask::<f64>::from_labels(&m, 2).unwrap();
        assert!(bce_probmap(&q.q, &q).unwrap() <= 1e-6);
        let half = Tensor::<f64>::full(&[2, 1, 2], 0.5);
        assert!((bce_probmap(&half, &q).unwrap() - 2f64.ln()).abs() < 1e-12);
        let single = OneHotMask::<f64>::from_labels(&labels(1, 1, &[0]), 1).unwrap();
        let p = Tensor::<f64>::new(&[1, 1, 1], vec![0.9]).unwrap();
        assert!((bce_probmap(&p, &single).unwrap() - 0.105_360_515_657_826_3).abs() < 1e-12);
    }

    #[test]
    fn overall_loss_anchors() {
        assert_eq!(overall_loss(1.0, 2.0, 0.2), 2.2);
        assert_eq!(overall_loss(3.7, 2.0, 0.0), 2.0);
        assert_eq!(overall_loss(0.0, 2.0, 0.2), 2.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig { lambda: -0.1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = LossConfig { eps: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
