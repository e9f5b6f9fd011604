use std::fmt;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::numeric::Rng;

/// Storage type tag, also the on-disk dtype byte in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

/// Floating-point element types a [`Tensor`] may hold.
pub trait Element: Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static {
    const DTYPE: DType;
    /// Tolerance for a softmax row summing to one.
    const SIMPLEX_TOL: f64;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    const SIMPLEX_TOL: f64 = 1e-6;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    const SIMPLEX_TOL: f64 = 1e-12;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Dense row-major array. Values are immutable once constructed; every
/// operation returns a fresh tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", std::any::type_name::<T>(), self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn fmt_shape(shape: &[usize]) -> String {
    format!("{shape:?}")
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("{n} values for shape {shape:?}"),
                data.len(),
            ));
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
        .check_finite("Tensor::new")
    }

    /// Builds a tensor from values already known to be finite and sized.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Tensor::from_parts(vec![n, n], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    /// Normal draws with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.normal() * std)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.uniform_range(lo, hi))).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::dim("item", "one element", fmt_shape(&self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds for axis {i} of extent {ext}");
            off = off * ext + ix;
        }
        self.data[off]
    }

    pub fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", fmt_shape(&self.shape), fmt_shape(shape)));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub(crate) fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::dim(op, fmt_shape(shape), fmt_shape(&self.shape)));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::dim(op, format!("rank {rank}"), fmt_shape(&self.shape)));
        }
        Ok(())
    }

    pub fn transpose2(&self) -> Result<Self> {
        self.expect_rank("transpose", 2)?;
        let (m, n) = (self.shape[0], self.shape[1]);
        const BLOCK: usize = 32;
        let mut out = vec![T::zero(); m * n];
        for i0 in (0..m).step_by(BLOCK) {
            for j0 in (0..n).step_by(BLOCK) {
                for i in i0..(i0 + BLOCK).min(m) {
                    for j in j0..(j0 + BLOCK).min(n) {
                        out[j * m + i] = self.data[i * n + j];
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    pub fn map(&self, op: &'static str, f: impl Fn(T) -> T) -> Result<Self> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
        .check_finite(op)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, fmt_shape(&self.shape), fmt_shape(&other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor::from_parts(self.shape.clone(), data).check_finite(op)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Result<Self> {
        self.map("scale", |v| v * k)
    }

    pub fn relu(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
        }
    }

    pub fn sigmoid(&self) -> Result<Self> {
        self.map("sigmoid", |v| T::one() / (T::one() + (-v).exp()))
    }

    /// Sum of all elements in storage order.
    pub fn sum_all(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean_all(&self) -> Result<T> {
        if self.data.is_empty() {
            return Err(Error::UndefinedMean("mean_all"));
        }
        Ok(self.sum_all() / T::from_f64(self.data.len() as f64))
    }

    /// Sum along one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::dim("sum_axis", format!("axis < {}", self.rank()), axis));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor::from_parts(shape, out).check_finite("sum_axis")
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let len = *self
            .shape
            .get(axis)
            .ok_or_else(|| Error::dim("mean_axis", format!("axis < {}", self.rank()), axis))?;
        if len == 0 {
            return Err(Error::UndefinedMean("mean_axis"));
        }
        self.sum_axis(axis)?.scale(T::one() / T::from_f64(len as f64))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Matrix product of `[m×k]` and `[k×n]`. Each output accumulates over `k`
/// in ascending order regardless of how the loop is vectorized.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_rank("matmul", 2)?;
    b.expect_rank("matmul", 2)?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner extent {k}"),
            fmt_shape(&b.shape),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out).check_finite("matmul")
}

/// Dot product with eight interleaved partial sums (fixed order, so
/// deterministic) that the compiler can keep in vector registers.
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// `A·Bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_rank("matmul_nt", 2)?;
    b.expect_rank("matmul_nt", 2)?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[0];
    if b.shape[1] != k {
        return Err(Error::dim("matmul_nt", format!("inner extent {k}"), fmt_shape(&b.shape)));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            out.push(dot(ar, &b.data[j * k..(j + 1) * k]));
        }
    }
    Tensor::from_parts(vec![m, n], out).check_finite("matmul_nt")
}

/// `Aᵀ·B` without materializing the transpose; sums run over the shared
/// leading axis in ascending order, exactly as `matmul(&a.transpose2()?, b)`.
pub fn matmul_tn<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_rank("matmul_tn", 2)?;
    b.expect_rank("matmul_tn", 2)?;
    let (k, m) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    if b.shape[0] != k {
        return Err(Error::dim("matmul_tn", format!("leading extent {k}"), fmt_shape(&b.shape)));
    }
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a.data[p * m + i];
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o = *o + api * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out).check_finite("matmul_tn")
}

/// Per-position softmax over the leading (channel) axis of a `[C×H×W]`
/// (or `[C×N]`) tensor, with max subtraction.
pub fn softmax_channels<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 1 || x.shape[0] == 0 {
        return Err(Error::dim("softmax_channels", "C >= 1", fmt_shape(&x.shape)));
    }
    let c = x.shape[0];
    let n = x.numel() / c;
    let mut out = vec![T::zero(); x.numel()];
    for j in 0..n {
        let mut max = x.data[j];
        for ch in 1..c {
            max = max.max(x.data[ch * n + j]);
        }
        let mut sum = T::zero();
        for ch in 0..c {
            let e = (x.data[ch * n + j] - max).exp();
            out[ch * n + j] = e;
            sum = sum + e;
        }
        for ch in 0..c {
            out[ch * n + j] = out[ch * n + j] / sum;
        }
    }
    Tensor::from_parts(x.shape.clone(), out).check_finite("softmax_channels")
}
