use std::fmt;

use crate::autodiff::{Graph, NodeId, OpKind};
use crate::error::Result;
use crate::labels::{LabelMask, OneHotMask, IGNORE};
use crate::loss::{DiceReduction, DEFAULT_DICE_EPS};
use crate::numeric::{finite_diff_gradient, Rng, Tensor, DEFAULT_STEP};

pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// One coordinate where analytic and numeric gradients disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub label: String,
    pub tolerance: f64,
    /// max over coordinates of `|analytic - numeric| / max(1, |numeric|)`
    pub max_error: f64,
    pub coords_checked: usize,
    pub failures: Vec<Mismatch>,
    /// differentiable ops recorded on the checked tape
    pub ops: Vec<OpKind>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.max_error < self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {} max_err={:.3e} tol={:.0e} coords={}",
            self.label,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_error,
            self.tolerance,
            self.coords_checked
        )?;
        for m in self.failures.iter().take(5) {
            write!(
                f,
                "\n    input {} coord {}: analytic {:.9e} numeric {:.9e}",
                m.input, m.coord, m.analytic, m.numeric
            )?;
        }
        Ok(())
    }
}

/// Compares reverse-mode gradients of a scalar graph against central
/// differences, for every coordinate of every input.
///
/// `build` receives the inputs as differentiable leaves and returns the
/// scalar loss node. Mismatches are collected into the report, never panicked on.
pub fn grad_check<F>(label: &str, build: F, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        label: label.to_string(),
        tolerance,
        max_error: 0.0,
        coords_checked: 0,
        failures: Vec::new(),
        ops: g.recorded_kinds(),
    };
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[k], input.shape());
        let numeric = finite_diff_gradient(
            |probe| {
                let mut g = Graph::new();
                let ids: Vec<NodeId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| g.input(if i == k { probe.clone() } else { t.clone() }))
                    .collect();
                let loss = build(&mut g, &ids)?;
                g.value(loss).item()
            },
            input,
            DEFAULT_STEP,
        )?;
        for (coord, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let err = (a - n).abs() / n.abs().max(1.0);
            report.max_error = report.max_error.max(err);
            report.coords_checked += 1;
            if !(err < tolerance) {
                report.failures.push(Mismatch {
                    input: k,
                    coord,
                    analytic: a,
                    numeric: n,
                    error: err,
                });
            }
        }
    }
    Ok(report)
}

/// `Σ (x ∘ r)` for a fixed random `r`, turning any node into a scalar with
/// a generic (non-symmetric) adjoint.
pub fn project(g: &mut Graph<f64>, x: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = Rng::derive(seed, "project", &[x.index() as u64]);
    let r = Tensor::randn(g.value(x).shape(), 1.0, &mut rng);
    let r = g.constant(r);
    let m = g.mul(x, r)?;
    g.sum(m)
}

/// Normal draws pushed at least `margin` away from zero.
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut Rng) -> Tensor<f64> {
    let t = Tensor::<f64>::randn(shape, 1.0, rng);
    t.map("away_from_zero", |v| if v >= 0.0 { v + margin } else { v - margin })
        .expect("finite")
}

fn random_labels(h: usize, w: usize, classes: usize, rng: &mut Rng) -> LabelMask {
    let mut data: Vec<u8> = (0..h * w).map(|_| rng.below(classes) as u8).collect();
    data[h * w - 1] = IGNORE;
    // every class present at least once keeps the dice active set stable
    for c in 0..classes.min(h * w - 1) {
        data[c] = c as u8;
    }
    LabelMask::new(h, w, data).expect("sized")
}

/// Gradient check of a single registered op on seeded inputs.
pub fn op_case(kind: OpKind, seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::derive(seed, "op_case", &[kind as u64]);
    let tol = DEFAULT_TOLERANCE;
    let name = kind.name();
    match kind {
        OpKind::MatMul => {
            let ins = [
                Tensor::randn(&[3, 4], 1.0, &mut rng),
                Tensor::randn(&[4, 2], 1.0, &mut rng),
            ];
            grad_check(name, |g, x| { let y = g.matmul(x[0], x[1])?; project(g, y, seed) }, &ins, tol)
        }
        OpKind::Transpose => {
            let ins = [Tensor::randn(&[3, 4], 1.0, &mut rng)];
            grad_check(name, |g, x| { let y = g.transpose(x[0])?; project(g, y, seed) }, &ins, tol)
        }
        OpKind::Reshape => {
            let ins = [Tensor::randn(&[2, 6], 1.0, &mut rng)];
            grad_check(name, |g, x| { let y = g.reshape(x[0], &[3, 4])?; project(g, y, seed) }, &ins, tol)
        }
        OpKind::Add => {
            let ins = [Tensor::randn(&[2, 3], 1.0, &mut rng), Tensor::randn(&[2, 3], 1.0, &mut rng)];
            grad_check(name, |g, x| { let y = g.add(x[0], x[1])?; project(g, y, seed) }, &ins, tol)
        }
        OpKind::Mul => {
            let ins = [Tensor::randn(&[2, 3], 1.0, &mut rng), Tensor::randn(&[2, 3], 1.0, &mut rng)];
            grad_check(name, |g, x| { let y = g.mul(x[0], x[1])?; project(g, y, seed) }, &ins, tol)
        }
        OpKind::Scale => {
            let ins = [Tensor::randn(&[5], 1.0, &mut rng)];
            grad_check(name, |g, x| { let y = g.scale(x[0], -1.7)?; project(g, y, seed) }, &ins, tol)
        }
        OpKind::AddRowBias => {
            let ins = [Tensor::randn(&[3, 2, 2], 1.0, &mut rng), Tensor::randn(&[3], 1.0, &mut rng)];
            grad_check(name, |g, x| { let y = g.add_row_bias(x[0], x[1])?; project(g, y, seed) }, &ins, tol)
        }
        OpKind::Relu => {
            // kink excluded: every input is > 10h away from 0
            let ins = [away_from_zero(&[12], 0.05, &mut rng)];
            grad_check(name, |g, x| { let y = g.relu(x[0]); project(g, y, seed) }, &ins, 1e-6)
        }
        OpKind::Conv2d => {
            let ins = [
                Tensor::randn(&[2, 5, 5], 1.0, &mut rng),
                Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng),
                Tensor::randn(&[3], 1.0, &mut rng),
            ];
            grad_check(name, |g, x| { let y = g.conv2d(x[0], x[1], x[2], 1, 1)?; project(g, y, seed) }, &ins, tol)
        }
        OpKind::SoftmaxChannels => {
            let ins = [Tensor::randn(&[3, 2, 2], 1.0, &mut rng)];
            grad_check(name, |g, x| { let y = g.softmax_channels(x[0])?; project(g, y, seed) }, &ins, tol)
        }
        OpKind::Sigmoid => {
            let ins = [Tensor::randn(&[6], 1.0, &mut rng)];
            grad_check(name, |g, x| { let y = g.sigmoid(x[0])?; project(g, y, seed) }, &ins, tol)
        }
        OpKind::GroupLinear => {
            let ins = [
                Tensor::randn(&[3, 4], 1.0, &mut rng),
                Tensor::randn(&[3, 4, 4], 1.0, &mut rng),
                Tensor::randn(&[3, 4], 1.0, &mut rng),
            ];
            grad_check(name, |g, x| { let y = g.group_linear(x[0], x[1], x[2])?; project(g, y, seed) }, &ins, tol)
        }
        OpKind::RowSum => {
            let ins = [Tensor::randn(&[3, 4], 1.0, &mut rng)];
            grad_check(name, |g, x| { let y = g.row_sum(x[0])?; project(g, y, seed) }, &ins, tol)
        }
        OpKind::DivRows => {
            let ins = [
                Tensor::randn(&[3, 4], 1.0, &mut rng),
                Tensor::uniform(&[3], 0.5, 2.0, &mut rng),
            ];
            grad_check(name, |g, x| { let y = g.div_rows(x[0], x[1], 1e-6)?; project(g, y, seed) }, &ins, tol)
        }
        OpKind::Sum => {
            let ins = [Tensor::randn(&[4], 1.0, &mut rng)];
            grad_check(name, |g, x| g.sum(x[0]), &ins, tol)
        }
        OpKind::CrossEntropy => {
            let labels = random_labels(3, 3, 3, &mut rng);
            let ins = [Tensor::randn(&[3, 3, 3], 1.0, &mut rng)];
            grad_check(name, |g, x| g.cross_entropy(x[0], &labels), &ins, tol)
        }
        OpKind::SoftDice => {
            let labels = random_labels(3, 3, 3, &mut rng);
            let q = OneHotMask::from_labels(&labels, 3)?;
            let ins = [Tensor::uniform(&[3, 3, 3], 0.05, 0.95, &mut rng)];
            grad_check(
                name,
                |g, x| g.soft_dice(x[0], &q, DEFAULT_DICE_EPS, DiceReduction::PerClass),
                &ins,
                tol,
            )
        }
        OpKind::Bce => {
            let labels = random_labels(3, 3, 3, &mut rng);
            let q = OneHotMask::from_labels(&labels, 3)?;
            let ins = [Tensor::uniform(&[3, 3, 3], 0.05, 0.95, &mut rng)];
            grad_check(name, |g, x| g.bce(x[0], &q), &ins, tol)
        }
    }
}

/// Composite checks on chains of ops.
pub fn composite_cases(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = Rng::derive(seed, "composite", &[]);
    let mut out = Vec::new();

    let chain = [
        Tensor::randn(&[2, 3], 1.0, &mut rng),
        Tensor::randn(&[3, 4], 1.0, &mut rng),
        Tensor::randn(&[4, 2], 1.0, &mut rng),
    ];
    out.push(grad_check(
        "matmul_chain",
        |g, x| {
            let ab = g.matmul(x[0], x[1])?;
            let abc = g.matmul(ab, x[2])?;
            project(g, abc, seed)
        },
        &chain,
        1e-7,
    )?);

    let labels = random_labels(4, 4, 3, &mut rng);
    let logits = [Tensor::randn(&[3, 4, 4], 1.0, &mut rng)];
    out.push(grad_check(
        "softmax_cross_entropy",
        |g, x| {
            // explicit softmax followed by the fused loss on its log-input
            let s = g.softmax_channels(x[0])?;
            let scaled = g.scale(s, 3.0)?;
            g.cross_entropy(scaled, &labels)
        },
        &logits,
        1e-6,
    )?);

    let q = OneHotMask::from_labels(&labels, 3)?;
    for reduction in [DiceReduction::PerClass, DiceReduction::Pooled] {
        out.push(grad_check(
            &format!("softmax_dice_{reduction:?}").to_lowercase(),
            |g, x| {
                let p = g.softmax_channels(x[0])?;
                g.soft_dice(p, &q, DEFAULT_DICE_EPS, reduction)
            },
            &logits,
            DEFAULT_TOLERANCE,
        )?);
    }
    out.push(grad_check(
        "sigmoid_bce",
        |g, x| {
            let p = g.sigmoid(x[0])?;
            g.bce(p, &q)
        },
        &logits,
        DEFAULT_TOLERANCE,
    )?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_op_passes() {
        for kind in OpKind::ALL {
            let report = op_case(kind, 1).unwrap();
            assert!(report.passed(), "{report}");
            assert!(report.coords_checked > 0);
        }
    }

    #[test]
    fn every_case_exercises_its_op() {
        for kind in OpKind::ALL {
            let report = op_case(kind, 2).unwrap();
            assert!(report.ops.contains(&kind), "{kind:?} not recorded by its case");
        }
    }

    #[test]
    fn composites_pass() {
        for r in composite_cases(4).unwrap() {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_reported_not_panicked() {
        // relu evaluated exactly at its kink: analytic subgradient 0, numeric 0.5
        let ins = [Tensor::new(&[1], vec![0.0]).unwrap()];
        let r = grad_check("relu_kink", |g, x| { let y = g.relu(x[0]); g.sum(y) }, &ins, 1e-6).unwrap();
        assert!(!r.passed());
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].analytic, 0.0);
        assert!((r.failures[0].numeric - 0.5).abs() < 1e-9);
    }
}
