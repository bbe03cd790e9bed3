use hqvae_tensor::{Scalar, Tensor};

/// Direct six-loop convolution, the reference for the lowered kernels.
/// x [N, IC, H, W], w [OC, IC, KH, KW], zero padding.
pub fn conv2d_naive<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, ic, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (oc, icw, kh, kw) = (w.dims()[0], w.dims()[1], w.dims()[2], w.dims()[3]);
    assert_eq!(ic, icw);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::<T>::zeros(&[n, oc, oh, ow]);
    let xd = x.data();
    let wv = w.data();
    let od = out.data_mut();
    for ni in 0..n {
        for oci in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::ZERO;
                    for ici in 0..ic {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((ni * ic + ici) * h + iy as usize) * wd + ix as usize];
                                let wvv = wv[((oci * ic + ici) * kh + ky) * kw + kx];
                                acc += xv * wvv;
                            }
                        }
                    }
                    od[((ni * oc + oci) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}
