use std::collections::BTreeMap;

use crate::autodiff::{GradientStore, ParamSet};
use crate::error::{Error, Result};
use crate::numeric::{Element, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const POLY_POWER: f64 = 0.9;

/// `base_lr · (1 − iter/max_iter)^0.9`.
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64) -> Result<f64> {
    if max_iter == 0 || iter > max_iter {
        return Err(Error::Range {
            what: "iteration",
            detail: format!("{iter} not in 0..={max_iter} (max_iter must be positive)"),
        });
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(POLY_POWER))
}

/// Heavy-ball SGD without dampening or weight decay:
/// `v ← m·v + g; p ← p − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub momentum: f64,
    pub base_lr: f64,
    pub iter: usize,
    pub max_iter: usize,
    pub velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> SgdState<T> {
    pub fn new(params: &ParamSet<T>, base_lr: f64, momentum: f64, max_iter: usize) -> Self {
        SgdState {
            momentum,
            base_lr,
            iter: 0,
            max_iter,
            velocity: params
                .iter()
                .map(|(k, v)| (k.to_string(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn current_lr(&self) -> Result<f64> {
        poly_lr(self.iter, self.max_iter, self.base_lr)
    }
}

/// One update at an explicit learning rate. A parameter without a gradient
/// entry gets a zero gradient (its velocity still decays).
pub fn sgd_update<T: Element>(
    params: &mut ParamSet<T>,
    grads: &GradientStore<T>,
    velocity: &mut BTreeMap<String, Tensor<T>>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
        if !params.contains(name) {
            return Err(Error::Contract(format!("gradient for unknown parameter `{name}`")));
        }
    }
    let (m, lr) = (T::from_f64(momentum), T::from_f64(lr));
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let p = params.get_mut(&name).expect("listed name");
        let v = velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        if v.shape() != p.shape() {
            return Err(Error::dim("sgd_update", format!("velocity {:?}", p.shape()), format!("{:?}", v.shape())));
        }
        let g = grads.get(&name);
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::dim("sgd_update", format!("gradient {:?}", p.shape()), format!("{:?}", g.shape())));
            }
        }
        let vd: Vec<T> = match g {
            Some(g) => v.data().iter().zip(g.data()).map(|(&v, &g)| m * v + g).collect(),
            None => v.data().iter().map(|&v| m * v).collect(),
        };
        let pd: Vec<T> = p.data().iter().zip(&vd).map(|(&p, &v)| p - lr * v).collect();
        *v = Tensor::new(v.shape(), vd)?;
        *p = Tensor::new(p.shape(), pd)?;
    }
    Ok(())
}

/// Update at the scheduled learning rate, then advance the counter.
/// Returns the learning rate used.
pub fn sgd_step<T: Element>(params: &mut ParamSet<T>, grads: &GradientStore<T>, state: &mut SgdState<T>) -> Result<f64> {
    let lr = state.current_lr()?;
    sgd_update(params, grads, &mut state.velocity, lr, state.momentum)?;
    state.iter += 1;
    Ok(lr)
}
