//! 2-D cross-correlation kernels over single `[C×H×W]` feature maps.
//!
//! Every output element accumulates its terms in a fixed order (input
//! channel, then kernel row, then kernel column, all ascending); the inner
//! loops run along image rows so they vectorize without reassociating sums.

use crate::error::{Error, Result};
use crate::numeric::{dot, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    pub fn resolve<T: Element>(
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        x.expect_rank("conv2d", 3)?;
        weight.expect_rank("conv2d", 4)?;
        let xs = x.shape();
        let ws = weight.shape();
        if ws[1] != xs[0] {
            return Err(Error::dim(
                "conv2d",
                format!("{} input channels", ws[1]),
                format!("{:?}", xs),
            ));
        }
        bias.expect_shape("conv2d", &[ws[0]])?;
        if stride == 0 {
            return Err(Error::Contract("conv2d: stride must be >= 1".into()));
        }
        if xs[1] + 2 * padding < ws[2] || xs[2] + 2 * padding < ws[3] {
            return Err(Error::dim(
                "conv2d",
                format!("padded input at least {}x{}", ws[2], ws[3]),
                format!("{:?}", xs),
            ));
        }
        Ok(ConvGeometry {
            in_channels: xs[0],
            out_channels: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            padding,
            h: xs[1],
            w: xs[2],
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output columns `ox` for which input column `ox*stride + kx - pad` is
    /// inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (p, s) = (self.padding as isize, self.stride as isize);
        let (kx, w, wo) = (kx as isize, self.w as isize, self.out_w() as isize);
        // ox*s + kx - p >= 0  and  ox*s + kx - p <= w - 1
        let lo = ((p - kx).max(0) + s - 1) / s;
        let hi = ((w - 1 - kx + p).div_euclid(s) + 1).clamp(0, wo);
        (lo.min(hi) as usize, hi as usize)
    }

    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::resolve(x, weight, bias, stride, padding)?;
    let (ho, wo) = (g.out_h(), g.out_w());
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let mut out = vec![T::zero(); g.out_channels * ho * wo];
    if g.is_pointwise() {
        // whole planes at once; same accumulation order as the general path
        let n = g.h * g.w;
        for (co, plane) in out.chunks_exact_mut(n).enumerate() {
            plane.iter_mut().for_each(|v| *v = bd[co]);
            for ci in 0..g.in_channels {
                let wv = wd[co * g.in_channels + ci];
                for (o, &v) in plane.iter_mut().zip(&xd[ci * n..(ci + 1) * n]) {
                    *o = *o + wv * v;
                }
            }
        }
        return Tensor::from_parts(vec![g.out_channels, ho, wo], out).check_finite("conv2d");
    }
    for co in 0..g.out_channels {
        let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = bd[co]);
        for ci in 0..g.in_channels {
            let xin = &xd[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wd[((co * g.in_channels + ci) * g.kh + ky) * g.kw + kx];
                    let (lo, hi) = g.valid_cols(kx);
                    for oy in 0..ho {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        let irow = &xin[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let shift = kx as isize - g.padding as isize;
                            let src = &irow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                            for (o, &v) in orow[lo..hi].iter_mut().zip(src) {
                                *o = *o + wv * v;
                            }
                        } else {
                            for (ox, o) in orow.iter_mut().enumerate().take(hi).skip(lo) {
                                let ix = ox * g.stride + kx - g.padding;
                                *o = *o + wv * irow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![g.out_channels, ho, wo], out).check_finite("conv2d")
}

/// Gradients of a conv2d w.r.t. its input, weights and bias given the
/// output adjoint `dy`.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::resolve(x, weight, bias, stride, padding)?;
    let (ho, wo) = (g.out_h(), g.out_w());
    dy.expect_shape("conv2d_backward", &[g.out_channels, ho, wo])?;
    let (xd, wd, dyd) = (x.data(), weight.data(), dy.data());

    let mut dx = vec![T::zero(); xd.len()];
    let mut dw = vec![T::zero(); wd.len()];
    let mut db = vec![T::zero(); g.out_channels];
    if g.is_pointwise() {
        let n = g.h * g.w;
        for co in 0..g.out_channels {
            let dplane = &dyd[co * n..(co + 1) * n];
            db[co] = dplane.iter().fold(T::zero(), |a, &v| a + v);
            for ci in 0..g.in_channels {
                let wv = wd[co * g.in_channels + ci];
                dw[co * g.in_channels + ci] = dot(dplane, &xd[ci * n..(ci + 1) * n]);
                for (d, &v) in dx[ci * n..(ci + 1) * n].iter_mut().zip(dplane) {
                    *d = *d + wv * v;
                }
            }
        }
        return Ok((
            Tensor::from_parts(x.shape().to_vec(), dx).check_finite("conv2d_backward")?,
            Tensor::from_parts(weight.shape().to_vec(), dw).check_finite("conv2d_backward")?,
            Tensor::from_parts(vec![g.out_channels], db).check_finite("conv2d_backward")?,
        ));
    }
    let mut lane = vec![T::zero(); wo];

    for co in 0..g.out_channels {
        let dplane = &dyd[co * ho * wo..(co + 1) * ho * wo];
        db[co] = dplane.iter().fold(T::zero(), |a, &v| a + v);
        for ci in 0..g.in_channels {
            let xin = &xd[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let dxin = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let widx = ((co * g.in_channels + ci) * g.kh + ky) * g.kw + kx;
                    let wv = wd[widx];
                    let (lo, hi) = g.valid_cols(kx);
                    lane.iter_mut().for_each(|v| *v = T::zero());
                    for oy in 0..ho {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let drow = &dplane[oy * wo..(oy + 1) * wo];
                        let irow = &xin[iy * g.w..(iy + 1) * g.w];
                        let dirow = &mut dxin[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let shift = kx as isize - g.padding as isize;
                            let a = (lo as isize + shift) as usize;
                            let b = (hi as isize + shift) as usize;
                            for ((l, &d), &v) in lane[lo..hi].iter_mut().zip(&drow[lo..hi]).zip(&irow[a..b]) {
                                *l = *l + d * v;
                            }
                            for (di, &d) in dirow[a..b].iter_mut().zip(&drow[lo..hi]) {
                                *di = *di + wv * d;
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = ox * g.stride + kx - g.padding;
                                lane[ox] = lane[ox] + drow[ox] * irow[ix];
                                dirow[ix] = dirow[ix] + wv * drow[ox];
                            }
                        }
                    }
                    dw[widx] = lane.iter().fold(T::zero(), |a, &v| a + v);
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx).check_finite("conv2d_backward")?,
        Tensor::from_parts(weight.shape().to_vec(), dw).check_finite("conv2d_backward")?,
        Tensor::from_parts(vec![g.out_channels], db).check_finite("conv2d_backward")?,
    ))
}
