//! Spatial resampling and flips for `[C×H×W]` tensors.

use crate::error::{Error, Result};
use crate::numeric::{Element, Tensor};

/// Source coordinate of output index `d` under half-pixel-center alignment.
fn source_coord(d: usize, in_len: usize, out_len: usize) -> f64 {
    let s = (d as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    s.clamp(0.0, (in_len - 1) as f64)
}

/// Bilinear resize with half-pixel centers. Same-size resizes are exact
/// copies.
pub fn resize_bilinear<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    x.expect_rank("resize_bilinear", 3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::dim("resize_bilinear", "non-empty extents", format!("{h}x{w} -> {out_h}x{out_w}")));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, T)> {
        (0..out)
            .map(|d| {
                let s = source_coord(d, inp, out);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, T::from_f64(s - i0 as f64))
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let src = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] + (plane[y0 * w + x1] - plane[y0 * w + x0]) * fx;
                let bot = plane[y1 * w + x0] + (plane[y1 * w + x1] - plane[y1 * w + x0]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

/// Index of the nearest source sample for output index `d`.
pub fn nearest_index(d: usize, in_len: usize, out_len: usize) -> usize {
    (((d as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
}

/// Mirrors every channel left to right.
pub fn flip_horizontal<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank("flip_horizontal", 3)?;
    let w = x.shape()[2];
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(w.max(1)) {
        row.reverse();
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}
