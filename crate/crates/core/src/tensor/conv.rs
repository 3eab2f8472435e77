//! Batched im2col convolution kernels.
//!
//! A transposed convolution is the adjoint of an ordinary convolution, so
//! both are written against the geometry of the forward (downsampling)
//! convolution: for `conv_transpose`, the geometry's "input" is the
//! transposed convolution's output.

use super::gemm::gemm;
use crate::error::{Error, Result};

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output padding that makes a transposed convolution produce `target`
/// from `input`, if one exists in `0..stride`.
pub fn deconv_output_padding(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    target: usize,
) -> Option<usize> {
    let base = ((input - 1) * stride + kernel).checked_sub(2 * padding)?;
    let op = target.checked_sub(base)?;
    (op < stride.max(1)).then_some(op)
}

/// Geometry of a downsampling convolution over an `n×c×h×w` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn for_conv(
        input: &[usize],
        kernel: usize,
        stride: usize,
        pad: usize,
        op: &'static str,
    ) -> Result<Self> {
        let [n, c, h, w] = four(input, op)?;
        if stride == 0 {
            return Err(Error::arg(format!("{op}: stride must be >= 1")));
        }
        let oh = conv_out_dim(h, kernel, stride, pad)
            .ok_or_else(|| Error::dim(op, "height (input + 2*padding vs kernel)", kernel, h + 2 * pad))?;
        let ow = conv_out_dim(w, kernel, stride, pad)
            .ok_or_else(|| Error::dim(op, "width (input + 2*padding vs kernel)", kernel, w + 2 * pad))?;
        Ok(ConvGeometry {
            n,
            c,
            h,
            w,
            k: kernel,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn patch_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

pub(crate) fn four(shape: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::Shape {
            op,
            shape: shape.to_vec(),
            reason: "expected rank-4 NCHW tensor".into(),
        }),
    }
}

fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let cols_n = g.out_cols();
    let mut cols = vec![0.0; g.patch_rows() * cols_n];
    let plane = g.oh * g.ow;
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for ni in 0..g.n {
                    let src = &x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[ni * plane..(ni + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let cols_n = g.out_cols();
    let mut x = vec![0.0; g.n * g.c * g.h * g.w];
    let plane = g.oh * g.ow;
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for ni in 0..g.n {
                    let dst = &mut x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[ni * plane..(ni + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                        for (ox, s) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// (n, c, l) -> (c, n*l)
fn to_channel_major(x: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * l + ni * l..][..l].copy_from_slice(&x[(ni * c + ci) * l..][..l]);
        }
    }
    out
}

/// (c, n*l) -> (n, c, l)
fn to_batch_major(x: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * l..][..l].copy_from_slice(&x[ci * n * l + ni * l..][..l]);
        }
    }
    out
}

/// `weight` is `out_c × g.c × k × k`. Returns `n × out_c × oh × ow`.
pub(crate) fn conv_forward(x: &[f64], weight: &[f64], out_c: usize, g: &ConvGeometry) -> Vec<f64> {
    let cols = im2col(x, g);
    let mut y = vec![0.0; out_c * g.out_cols()];
    gemm(out_c, g.patch_rows(), g.out_cols(), weight, false, &cols, false, &mut y, 0.0);
    to_batch_major(&y, g.n, out_c, g.oh * g.ow)
}

pub(crate) fn conv_backward(
    x: &[f64],
    weight: &[f64],
    out_c: usize,
    g: &ConvGeometry,
    dy: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let dy_cm = to_channel_major(dy, g.n, out_c, g.oh * g.ow);
    let dw = need_dw.then(|| {
        let cols = im2col(x, g);
        let mut dw = vec![0.0; out_c * g.patch_rows()];
        gemm(out_c, g.out_cols(), g.patch_rows(), &dy_cm, false, &cols, true, &mut dw, 0.0);
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0; g.patch_rows() * g.out_cols()];
        gemm(g.patch_rows(), out_c, g.out_cols(), weight, true, &dy_cm, false, &mut dcols, 0.0);
        col2im(&dcols, g)
    });
    (dx, dw)
}

/// Transposed convolution. `x` is `g.n × in_c × g.oh × g.ow`, `weight` is
/// `in_c × g.c × k × k`; the result is `g.n × g.c × g.h × g.w`.
pub(crate) fn deconv_forward(x: &[f64], weight: &[f64], in_c: usize, g: &ConvGeometry) -> Vec<f64> {
    let x_cm = to_channel_major(x, g.n, in_c, g.oh * g.ow);
    let mut cols = vec![0.0; g.patch_rows() * g.out_cols()];
    gemm(g.patch_rows(), in_c, g.out_cols(), weight, true, &x_cm, false, &mut cols, 0.0);
    col2im(&cols, g)
}

pub(crate) fn deconv_backward(
    x: &[f64],
    weight: &[f64],
    in_c: usize,
    g: &ConvGeometry,
    dy: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let dcols = im2col(dy, g);
    let dx = need_dx.then(|| {
        let mut dx_cm = vec![0.0; in_c * g.out_cols()];
        gemm(in_c, g.patch_rows(), g.out_cols(), weight, false, &dcols, false, &mut dx_cm, 0.0);
        to_batch_major(&dx_cm, g.n, in_c, g.oh * g.ow)
    });
    let dw = need_dw.then(|| {
        let x_cm = to_channel_major(x, g.n, in_c, g.oh * g.ow);
        let mut dw = vec![0.0; in_c * g.patch_rows()];
        gemm(in_c, g.out_cols(), g.patch_rows(), &x_cm, false, &dcols, true, &mut dw, 0.0);
        dw
    });
    (dx, dw)
}
