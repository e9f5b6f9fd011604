use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar function, one coordinate at a time.
///
/// This is the oracle every backward rule is checked against, so it only
/// ever evaluates `f`; it never looks at how `f` is implemented.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Oracle(format!("step must be positive, got {h}")));
    }
    let mut probe = x.data().to_vec();
    let mut grad = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = eval(&mut f, x.shape(), &probe, i)?;
        probe[i] = orig - h;
        let minus = eval(&mut f, x.shape(), &probe, i)?;
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape(), grad)
}

fn eval<F>(f: &mut F, shape: &[usize], data: &[f64], coord: usize) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let t = Tensor::new(shape, data.to_vec())
        .map_err(|e| Error::Oracle(format!("coordinate {coord}: {e}")))?;
    let v = f(&t).map_err(|e| Error::Oracle(format!("coordinate {coord}: {e}")))?;
    if !v.is_finite() {
        return Err(Error::Oracle(format!("non-finite value at coordinate {coord}")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, DEFAULT_STEP).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn product() {
        let x = Tensor::new(&[2], vec![3.0, 5.0]).unwrap();
        let g = finite_diff_gradient(|t| Ok(t.data()[0] * t.data()[1]), &x, DEFAULT_STEP).unwrap();
        assert!((g.data()[0] - 5.0).abs() < 1e-8);
        assert!((g.data()[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_gradient(|_| Ok(4.2), &x, DEFAULT_STEP).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_value_is_reported() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let err = finite_diff_gradient(|t| Ok(1.0 / (t.data()[0] - 1e-5)), &x, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
    }
}
