//! Host-side convolution kernels shared by the forward and transpose ops.
//!
//! Layouts: activations [N, C, H, W], conv weights [OC, IC, KH, KW].
//! Lowering goes through an im2col matrix with one row per output position
//! ((n, oh, ow) major) so the whole batch feeds a single GEMM.

use crate::scalar::Scalar;

pub fn conv_out_dim(inp: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = inp + 2 * pad;
    if padded < k {
        return None;
    }
    if (padded - k) % stride != 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub ic: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn cols_width(&self) -> usize {
        self.ic * self.kh * self.kw
    }

    pub fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Rows layout: row = ((n * OH + oh) * OW + ow), col = ((ic * KH + kh) * KW + kw).
pub fn im2col_rows<T: Scalar>(x: &[T], d: &ConvDims) -> Vec<T> {
    let ckk = d.cols_width();
    let mut cols = vec![T::ZERO; d.rows() * ckk];
    let (h, w) = (d.h as isize, d.w as isize);
    for n in 0..d.n {
        let xn = &x[n * d.ic * d.h * d.w..][..d.ic * d.h * d.w];
        for oh in 0..d.oh {
            for ow in 0..d.ow {
                let row = ((n * d.oh + oh) * d.ow + ow) * ckk;
                let ih0 = (oh * d.stride) as isize - d.pad as isize;
                let iw0 = (ow * d.stride) as isize - d.pad as isize;
                for ic in 0..d.ic {
                    let xc = &xn[ic * d.h * d.w..][..d.h * d.w];
                    let base = row + ic * d.kh * d.kw;
                    for kh in 0..d.kh {
                        let ih = ih0 + kh as isize;
                        if ih < 0 || ih >= h {
                            continue;
                        }
                        let src = &xc[ih as usize * d.w..][..d.w];
                        let dst = base + kh * d.kw;
                        for kw in 0..d.kw {
                            let iw = iw0 + kw as isize;
                            if iw >= 0 && iw < w {
                                cols[dst + kw] = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add transpose of `im2col_rows` into an input-shaped buffer.
pub fn col2im_rows<T: Scalar>(cols: &[T], d: &ConvDims, dx: &mut [T]) {
    let ckk = d.cols_width();
    let (h, w) = (d.h as isize, d.w as isize);
    for n in 0..d.n {
        let xn = &mut dx[n * d.ic * d.h * d.w..][..d.ic * d.h * d.w];
        for oh in 0..d.oh {
            for ow in 0..d.ow {
                let row = ((n * d.oh + oh) * d.ow + ow) * ckk;
                let ih0 = (oh * d.stride) as isize - d.pad as isize;
                let iw0 = (ow * d.stride) as isize - d.pad as isize;
                for ic in 0..d.ic {
                    let base = row + ic * d.kh * d.kw;
                    let off = ic * d.h * d.w;
                    for kh in 0..d.kh {
                        let ih = ih0 + kh as isize;
                        if ih < 0 || ih >= h {
                            continue;
                        }
                        let dst = off + ih as usize * d.w;
                        let src = base + kh * d.kw;
                        for kw in 0..d.kw {
                            let iw = iw0 + kw as isize;
                            if iw >= 0 && iw < w {
                                xn[dst + iw as usize] += cols[src + kw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// [N, C, OH, OW] -> one row per (n, oh, ow) with C columns.
fn nchw_to_rows<T: Scalar>(x: &[T], n: usize, c: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut rows = vec![T::ZERO; n * oh * ow * c];
    let plane = oh * ow;
    for ni in 0..n {
        let xn = &x[ni * c * plane..][..c * plane];
        let rbase = ni * plane;
        for ci in 0..c {
            let xc = &xn[ci * plane..][..plane];
            for p in 0..plane {
                rows[(rbase + p) * c + ci] = xc[p];
            }
        }
    }
    rows
}

/// Inverse of `nchw_to_rows`.
fn rows_to_nchw<T: Scalar>(rows: &[T], n: usize, c: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; n * c * oh * ow];
    let plane = oh * ow;
    for ni in 0..n {
        let on = &mut out[ni * c * plane..][..c * plane];
        let rbase = ni * plane;
        for ci in 0..c {
            let oc = &mut on[ci * plane..][..plane];
            for p in 0..plane {
                oc[p] = rows[(rbase + p) * c + ci];
            }
        }
    }
    out
}

/// y[n, oc, oh, ow] = sum_{ic, kh, kw} x[n, ic, ...] * w[oc, ic, kh, kw]
pub fn conv_fwd<T: Scalar>(x: &[T], wgt: &[T], d: &ConvDims) -> Vec<T> {
    let ckk = d.cols_width();
    let rows = d.rows();
    let cols = im2col_rows(x, d);
    // (rows x ckk) @ (ckk x oc) via transpose of w (oc x ckk)
    let mut out_rows = vec![T::ZERO; rows * d.oc];
    T::gemm(rows, ckk, d.oc, T::ONE, &cols, false, wgt, true, T::ZERO, &mut out_rows);
    rows_to_nchw(&out_rows, d.n, d.oc, d.oh, d.ow)
}

/// Gradient w.r.t. the conv input: scatter dout through the kernel taps.
pub fn conv_bwd_input<T: Scalar>(dout: &[T], wgt: &[T], d: &ConvDims) -> Vec<T> {
    let ckk = d.cols_width();
    let rows = d.rows();
    let dout_rows = nchw_to_rows(dout, d.n, d.oc, d.oh, d.ow);
    let mut dcols = vec![T::ZERO; rows * ckk];
    T::gemm(rows, d.oc, ckk, T::ONE, &dout_rows, false, wgt, false, T::ZERO, &mut dcols);
    let mut dx = vec![T::ZERO; d.n * d.ic * d.h * d.w];
    col2im_rows(&dcols, d, &mut dx);
    dx
}

/// Gradient w.r.t. the conv weight, shape [OC, IC, KH, KW].
pub fn conv_bwd_weight<T: Scalar>(x: &[T], dout: &[T], d: &ConvDims) -> Vec<T> {
    let ckk = d.cols_width();
    let rows = d.rows();
    let cols = im2col_rows(x, d);
    let dout_rows = nchw_to_rows(dout, d.n, d.oc, d.oh, d.ow);
    let mut dw = vec![T::ZERO; d.oc * ckk];
    T::gemm(d.oc, rows, ckk, T::ONE, &dout_rows, true, &cols, false, T::ZERO, &mut dw);
    dw
}
