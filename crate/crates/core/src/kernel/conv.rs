//! Direct 2-d convolution (NCHW) with grouped/depthwise support.
//!
//! Every output element accumulates its products in `(c_in, ky, kx)` order,
//! starting from zero, so the result is bit-identical to a naive nested-loop
//! summation that skips padded taps.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let (&[n, c_in, h, w], &[c_out, c_in_g, kh, kw]) = (input, weight) else {
            return Err(Error::shape(format!(
                "conv2d expects 4-d input and weight, got {input:?} and {weight:?}"
            )));
        };
        if kh != kw {
            return Err(Error::shape(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 || groups == 0 {
            return Err(Error::invalid("conv2d stride and groups must be positive"));
        }
        if c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::shape(format!(
                "conv2d channels ({c_in} in, {c_out} out) not divisible by groups {groups}"
            )));
        }
        if c_in / groups != c_in_g {
            return Err(Error::shape(format!(
                "conv2d weight expects {c_in_g} input channels per group, input provides {}",
                c_in / groups
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh} larger than padded input {h}x{w} (padding {padding})"
            )));
        }
        Ok(Self {
            batch: n,
            in_channels: c_in,
            out_channels: c_out,
            in_h: h,
            in_w: w,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
            kernel: kh,
            stride,
            padding,
            groups,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Multiply-accumulate count of one forward pass, padded taps included.
    pub fn macs(&self) -> u64 {
        (self.batch
            * self.out_h
            * self.out_w
            * self.kernel
            * self.kernel
            * (self.in_channels / self.groups)
            * self.out_channels) as u64
    }

    /// Output indices `o` along one axis for which `o*stride + tap - padding`
    /// lands inside `[0, extent)`.
    fn valid_range(&self, tap: usize, extent: usize, out_extent: usize) -> Range<usize> {
        let s = self.stride;
        let lo = if tap >= self.padding { 0 } else { (self.padding - tap).div_ceil(s) };
        // largest o with o*s + tap - p <= extent - 1
        let limit = extent + self.padding - 1;
        let hi = if limit < tap { 0 } else { ((limit - tap) / s + 1).min(out_extent) };
        lo..hi.max(lo)
    }
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding, groups)?;
    let mut out = Tensor::zeros(&g.output_shape());
    let (x, w, y) = (input.data(), weight.data(), out.data_mut());

    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let k = g.kernel;
    let cin_g = g.in_channels / g.groups;
    let cout_g = g.out_channels / g.groups;
    let pointwise = k == 1 && stride == 1 && padding == 0;

    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let grp = co / cout_g;
            let y_off = (n * g.out_channels + co) * out_plane;
            let y_p = &mut y[y_off..y_off + out_plane];
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let x_off = (n * g.in_channels + ci) * in_plane;
                let x_p = &x[x_off..x_off + in_plane];
                let w_off = (co * cin_g + cl) * k * k;
                if pointwise {
                    let wv = w[w_off];
                    for (o, &i) in y_p.iter_mut().zip(x_p) {
                        *o += wv * i;
                    }
                    continue;
                }
                for ky in 0..k {
                    let oy_r = g.valid_range(ky, g.in_h, g.out_h);
                    for kx in 0..k {
                        let wv = w[w_off + ky * k + kx];
                        let ox_r = g.valid_range(kx, g.in_w, g.out_w);
                        if ox_r.is_empty() {
                            continue;
                        }
                        for oy in oy_r.clone() {
                            let iy = oy * stride + ky - padding;
                            let row = &mut y_p[oy * g.out_w..(oy + 1) * g.out_w];
                            let x_row = &x_p[iy * g.in_w..(iy + 1) * g.in_w];
                            if stride == 1 {
                                let ix0 = ox_r.start + kx - padding;
                                let len = ox_r.len();
                                for (o, &i) in row[ox_r.clone()].iter_mut().zip(&x_row[ix0..ix0 + len]) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox_r.clone() {
                                    row[ox] += wv * x_row[ox * stride + kx - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weight)`.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding, groups)?;
    grad_out.expect_shape(&g.output_shape(), "conv2d_backward grad_out")?;
    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_w = Tensor::zeros(weight.shape());
    let (x, w, dy) = (input.data(), weight.data(), grad_out.data());
    let (dx, dw) = (grad_in.data_mut(), grad_w.data_mut());

    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let k = g.kernel;
    let cin_g = g.in_channels / g.groups;
    let cout_g = g.out_channels / g.groups;

    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let grp = co / cout_g;
            let dy_off = (n * g.out_channels + co) * out_plane;
            let dy_p = &dy[dy_off..dy_off + out_plane];
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let x_off = (n * g.in_channels + ci) * in_plane;
                let x_p = &x[x_off..x_off + in_plane];
                let dx_p = &mut dx[x_off..x_off + in_plane];
                let w_off = (co * cin_g + cl) * k * k;
                for ky in 0..k {
                    let oy_r = g.valid_range(ky, g.in_h, g.out_h);
                    for kx in 0..k {
                        let wv = w[w_off + ky * k + kx];
                        let ox_r = g.valid_range(kx, g.in_w, g.out_w);
                        let mut acc = T::zero();
                        for oy in oy_r.clone() {
                            let iy = oy * stride + ky - padding;
                            let dy_row = &dy_p[oy * g.out_w..(oy + 1) * g.out_w];
                            for ox in ox_r.clone() {
                                let ix = iy * g.in_w + ox * stride + kx - padding;
                                let d = dy_row[ox];
                                acc += x_p[ix] * d;
                                dx_p[ix] += wv * d;
                            }
                        }
                        dw[w_off + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_w))
}
