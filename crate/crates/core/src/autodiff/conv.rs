//! Convolution kernels: im2col + GEMM forward, col2im adjoint, and the
//! weight-gradient contraction. These are plain array functions; the tape
//! wires them together and defines their derivatives in terms of each other.

use ndarray::{Array2, ArrayD, ArrayViewD, Ix4};

use super::Elem;

/// Output spatial size of a convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= kernel,
        "input {input} (pad {pad}) smaller than kernel {kernel}"
    );
    (input + 2 * pad - kernel) / stride + 1
}

fn as4<E: Elem>(x: &ArrayD<E>) -> ndarray::ArrayView4<'_, E> {
    x.view().into_dimensionality::<Ix4>().expect("expected a 4-d tensor")
}

/// Gather conv patches: `[C,H,W]` slice data -> `[C*kh*kw, Ho*Wo]`.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Elem>(
    xs: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<E> {
    let mut cols = Array2::<E>::zeros((c * kh * kw, ho * wo));
    let cols_slice = cols.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                let row_base = row * ho * wo;
                for i in 0..ho {
                    let y = (i * stride + u) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let x_base = ci * h * w + y as usize * w;
                    let out_base = row_base + i * wo;
                    // j*stride + v - pad must land in [0, w)
                    let j_lo = if pad > v { (pad - v).div_ceil(stride) } else { 0 };
                    let j_hi_num = w + pad - v; // exclusive bound on j*stride
                    let j_hi = (j_hi_num.div_ceil(stride)).min(wo);
                    for j in j_lo..j_hi {
                        let xcol = j * stride + v - pad;
                        cols_slice[out_base + j] = xs[x_base + xcol];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the adjoint of im2col: `[C*kh*kw, Ho*Wo]` -> `[C,H,W]` data.
#[allow(clippy::too_many_arguments)]
fn col2im_add<E: Elem>(
    cols: &Array2<E>,
    out: &mut [E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let cs = cols.as_slice().expect("standard layout");
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                let row_base = row * ho * wo;
                for i in 0..ho {
                    let y = (i * stride + u) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let o_base = ci * h * w + y as usize * w;
                    let in_base = row_base + i * wo;
                    let j_lo = if pad > v { (pad - v).div_ceil(stride) } else { 0 };
                    let j_hi = ((w + pad - v).div_ceil(stride)).min(wo);
                    for j in j_lo..j_hi {
                        let xcol = j * stride + v - pad;
                        out[o_base + xcol] = out[o_base + xcol] + cs[in_base + j];
                    }
                }
            }
        }
    }
}

/// `y[n,o,i,j] = sum_{c,u,v} x[n,c,i*s-p+u,j*s-p+v] * w[o,c,u,v]`
pub fn conv2d<E: Elem>(x: &ArrayD<E>, w: &ArrayD<E>, stride: usize, pad: usize) -> ArrayD<E> {
    let x = x.as_standard_layout().into_owned();
    let xv = as4(&x);
    let (n, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let wv = as4(w);
    let (o, wc, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    assert_eq!(c, wc, "conv2d channel mismatch: input {c} vs weight {wc}");
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(wd, kw, stride, pad);
    let w_std = w.as_standard_layout();
    let w_mat = w_std.to_shape((o, wc * kh * kw)).expect("weight reshape");
    let w_mat2 = w_mat.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut out = ArrayD::<E>::zeros(vec![n, o, ho, wo]);
    for ni in 0..n {
        let xs = xv.index_axis(ndarray::Axis(0), ni);
        let xs_std = xs.as_standard_layout();
        let cols =
            im2col(xs_std.as_slice().unwrap(), c, h, wd, kh, kw, stride, pad, ho, wo);
        let y = w_mat2.dot(&cols); // [O, Ho*Wo]
        let dst = out.as_slice_mut().unwrap();
        let base = ni * o * ho * wo;
        dst[base..base + o * ho * wo].copy_from_slice(y.as_slice().unwrap());
    }
    out
}

/// Adjoint of [`conv2d`] in the input: scatter `z` back through `w`.
/// `out[n,c,a,b] = sum_{o,u,v,(i,j): a=i*s-p+u, b=j*s-p+v} z[n,o,i,j] w[o,c,u,v]`
pub fn conv_transpose2d<E: Elem>(
    z: &ArrayD<E>,
    w: &ArrayD<E>,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
) -> ArrayD<E> {
    let z = z.as_standard_layout().into_owned();
    let zv = as4(&z);
    let (n, o, hi, wi) = (zv.shape()[0], zv.shape()[1], zv.shape()[2], zv.shape()[3]);
    let wv = as4(w);
    let (wo_, c, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    assert_eq!(o, wo_, "conv_transpose2d channel mismatch");
    let (h, wd) = out_hw;
    debug_assert_eq!(conv_out_size(h, kh, stride, pad), hi, "inconsistent transpose geometry");
    let w_std = w.as_standard_layout();
    let w_mat = w_std.to_shape((o, c * kh * kw)).expect("weight reshape");
    let w_mat2 = w_mat.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut out = ArrayD::<E>::zeros(vec![n, c, h, wd]);
    for ni in 0..n {
        let zs = zv.index_axis(ndarray::Axis(0), ni);
        let zs_std = zs.as_standard_layout();
        let z_mat = zs_std.to_shape((o, hi * wi)).expect("z reshape");
        let z_mat2 = z_mat.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let cols = w_mat2.t().dot(&z_mat2); // [C*kh*kw, Hi*Wi]
        let dst = out.as_slice_mut().unwrap();
        let base = ni * c * h * wd;
        col2im_add(
            &cols,
            &mut dst[base..base + c * h * wd],
            c,
            h,
            wd,
            kh,
            kw,
            stride,
            pad,
            hi,
            wi,
        );
    }
    out
}

/// Weight gradient of [`conv2d`]:
/// `dw[o,c,u,v] = sum_{n,i,j} g[n,o,i,j] * x[n,c,i*s-p+u,j*s-p+v]`
#[allow(clippy::too_many_arguments)]
pub fn conv_weight_grad<E: Elem>(
    x: &ArrayD<E>,
    g: &ArrayD<E>,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> ArrayD<E> {
    let x = x.as_standard_layout().into_owned();
    let g = g.as_standard_layout().into_owned();
    let xv = as4(&x);
    let gv = as4(&g);
    let (n, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (gn, o, ho, wo) = (gv.shape()[0], gv.shape()[1], gv.shape()[2], gv.shape()[3]);
    assert_eq!(n, gn, "conv_weight_grad batch mismatch");
    let mut dw = Array2::<E>::zeros((o, c * kh * kw));
    for ni in 0..n {
        let xs = xv.index_axis(ndarray::Axis(0), ni);
        let xs_std = xs.as_standard_layout();
        let cols =
            im2col(xs_std.as_slice().unwrap(), c, h, wd, kh, kw, stride, pad, ho, wo);
        let gs = gv.index_axis(ndarray::Axis(0), ni);
        let gs_std = gs.as_standard_layout();
        let g_mat = gs_std.to_shape((o, ho * wo)).expect("g reshape");
        let g_mat2 = g_mat.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        dw = dw + g_mat2.dot(&cols.t());
    }
    dw.into_shape_with_order(vec![o, c, kh, kw]).expect("dw reshape").into_dyn()
}

/// Reflection padding (no edge repeat, PyTorch convention).
pub fn reflect_pad<E: Elem>(x: &ArrayD<E>, pad: usize) -> ArrayD<E> {
    let xv = as4(x);
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    assert!(pad < h && pad < w, "reflection pad {pad} too large for {h}x{w}");
    let mut out = ArrayD::<E>::zeros(vec![n, c, h + 2 * pad, w + 2 * pad]);
    let reflect = |i: isize, size: usize| -> usize {
        let last = size as isize - 1;
        let mut v = i;
        if v < 0 {
            v = -v;
        }
        if v > last {
            v = 2 * last - v;
        }
        v as usize
    };
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h + 2 * pad {
                let sy = reflect(y as isize - pad as isize, h);
                for xx in 0..w + 2 * pad {
                    let sx = reflect(xx as isize - pad as isize, w);
                    out[[ni, ci, y, xx]] = xv[[ni, ci, sy, sx]];
                }
            }
        }
    }
    out
}

/// Adjoint of [`reflect_pad`]: scatter-add padded gradients back.
pub fn reflect_pad_adjoint<E: Elem>(z: &ArrayD<E>, pad: usize, out_hw: (usize, usize)) -> ArrayD<E> {
    let zv = as4(z);
    let (n, c, hp, wp) = (zv.shape()[0], zv.shape()[1], zv.shape()[2], zv.shape()[3]);
    let (h, w) = out_hw;
    debug_assert_eq!((hp, wp), (h + 2 * pad, w + 2 * pad));
    let mut out = ArrayD::<E>::zeros(vec![n, c, h, w]);
    let reflect = |i: isize, size: usize| -> usize {
        let last = size as isize - 1;
        let mut v = i;
        if v < 0 {
            v = -v;
        }
        if v > last {
            v = 2 * last - v;
        }
        v as usize
    };
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..hp {
                let sy = reflect(y as isize - pad as isize, h);
                for xx in 0..wp {
                    let sx = reflect(xx as isize - pad as isize, w);
                    out[[ni, ci, sy, sx]] = out[[ni, ci, sy, sx]] + zv[[ni, ci, y, xx]];
                }
            }
        }
    }
    out
}

/// Direct (quadruple-loop) convolution, used only as a test oracle.
#[cfg(test)]
pub fn conv2d_naive<E: Elem>(x: &ArrayD<E>, w: &ArrayD<E>, stride: usize, pad: usize) -> ArrayD<E> {
    let xv = as4(x);
    let wv = as4(w);
    let (n, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (o, _, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(wd, kw, stride, pad);
    let mut out = ArrayD::<E>::zeros(vec![n, o, ho, wo]);
    for ni in 0..n {
        for oi in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = E::zero();
                    for ci in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    acc = acc
                                        + xv[[ni, ci, y as usize, xx as usize]]
                                            * wv[[oi, ci, u, v]];
                                }
                            }
                        }
                    }
                    out[[ni, oi, i, j]] = acc;
                }
            }
        }
    }
    out
}

#[allow(dead_code)]
fn _assert_view_api<E: Elem>(x: ArrayViewD<E>) -> usize {
    x.ndim()
}
