//! Convolution, transposed convolution and max-pool kernels.
//!
//! Cross-correlation convention throughout. Inputs are single images in CHW
//! layout; conv kernels are `[C_out, C_in, kh, kw]`, transposed-conv kernels
//! are `[C_in, C_out, kh, kw]`, so the same buffer serves as kernel for a
//! conv and for its adjoint transposed conv.

use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Real, Tensor};

pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn expect_3d<'a>(name: &str, t: &'a Tensor<impl Real>) -> Result<&'a [usize]> {
    if t.shape().len() != 3 {
        return Err(Error::Dim(format!(
            "{name} must be CxHxW, got {}",
            fmt_shape(t.shape())
        )));
    }
    Ok(t.shape())
}

pub(crate) fn conv2d_dims<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    let xs = expect_3d("conv2d input", x)?;
    if k.shape().len() != 4 {
        return Err(Error::Dim(format!(
            "conv2d kernels must be C_out x C_in x kh x kw, got {}",
            fmt_shape(k.shape())
        )));
    }
    if stride == 0 {
        return Err(Error::Dim("conv2d stride must be >= 1".into()));
    }
    let (c_in, h, w) = (xs[0], xs[1], xs[2]);
    let (c_out, kc, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    if kc != c_in {
        return Err(Error::Dim(format!(
            "conv2d channel mismatch: input {} vs kernels {}",
            fmt_shape(x.shape()),
            fmt_shape(k.shape())
        )));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Dim(format!(
            "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let out_h = (h + 2 * pad - kh) / stride + 1;
    let out_w = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvDims {
        c_in,
        c_out,
        h,
        w,
        kh,
        kw,
        out_h,
        out_w,
    })
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let d = conv2d_dims(x, k, stride, pad)?;
    if let Some(b) = bias {
        if b.len() != d.c_out {
            return Err(Error::Dim(format!(
                "conv2d bias length {} vs {} output channels",
                b.len(),
                d.c_out
            )));
        }
    }
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![T::zero(); d.c_out * d.out_h * d.out_w];
    for co in 0..d.c_out {
        let out_base = co * d.out_h * d.out_w;
        if let Some(b) = bias {
            let bv = b.data()[co];
            out[out_base..out_base + d.out_h * d.out_w]
                .iter_mut()
                .for_each(|o| *o = bv);
        }
        for ci in 0..d.c_in {
            let x_base = ci * d.h * d.w;
            let k_base = (co * d.c_in + ci) * d.kh * d.kw;
            for dy in 0..d.kh {
                for dx in 0..d.kw {
                    let kv = kd[k_base + dy * d.kw + dx];
                    if kv == T::zero() {
                        continue;
                    }
                    for oy in 0..d.out_h {
                        let iy = (oy * stride + dy).wrapping_sub(pad);
                        if iy >= d.h {
                            continue;
                        }
                        let row_x = x_base + iy * d.w;
                        let row_o = out_base + oy * d.out_w;
                        for ox in 0..d.out_w {
                            let ix = (ox * stride + dx).wrapping_sub(pad);
                            if ix < d.w {
                                out[row_o + ox] += kv * xd[row_x + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.c_out, d.out_h, d.out_w], out)
}

/// Gradients for conv2d. Any of the outputs may be skipped by passing
/// `false` in the corresponding `need_*` flag; skipped ones come back empty.
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    gy: &[T],
    stride: usize,
    pad: usize,
    need_gx: bool,
    need_gk: bool,
    need_gb: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = conv2d_dims(x, k, stride, pad).expect("shapes validated at forward");
    let xd = x.data();
    let kd = k.data();
    let mut gx = vec![T::zero(); if need_gx { xd.len() } else { 0 }];
    let mut gk = vec![T::zero(); if need_gk { kd.len() } else { 0 }];
    let mut gb = vec![T::zero(); if need_gb { d.c_out } else { 0 }];
    for co in 0..d.c_out {
        let out_base = co * d.out_h * d.out_w;
        if need_gb {
            for v in &gy[out_base..out_base + d.out_h * d.out_w] {
                gb[co] += *v;
            }
        }
        for ci in 0..d.c_in {
            let x_base = ci * d.h * d.w;
            let k_base = (co * d.c_in + ci) * d.kh * d.kw;
            for dy in 0..d.kh {
                for dx in 0..d.kw {
                    let kv = kd[k_base + dy * d.kw + dx];
                    let mut kg = T::zero();
                    for oy in 0..d.out_h {
                        let iy = (oy * stride + dy).wrapping_sub(pad);
                        if iy >= d.h {
                            continue;
                        }
                        let row_x = x_base + iy * d.w;
                        let row_o = out_base + oy * d.out_w;
                        for ox in 0..d.out_w {
                            let ix = (ox * stride + dx).wrapping_sub(pad);
                            if ix < d.w {
                                let g = gy[row_o + ox];
                                if need_gx {
                                    gx[row_x + ix] += g * kv;
                                }
                                kg += g * xd[row_x + ix];
                            }
                        }
                    }
                    if need_gk {
                        gk[k_base + dy * d.kw + dx] = kg;
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

pub(crate) struct ConvTDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub(crate) fn convt2d_dims<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvTDims> {
    let xs = expect_3d("conv2d_transpose input", x)?;
    if k.shape().len() != 4 {
        return Err(Error::Dim(format!(
            "conv2d_transpose kernels must be C_in x C_out x kh x kw, got {}",
            fmt_shape(k.shape())
        )));
    }
    if stride == 0 {
        return Err(Error::Dim("conv2d_transpose stride must be >= 1".into()));
    }
    let (c_in, h, w) = (xs[0], xs[1], xs[2]);
    let (kc, c_out, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    if kc != c_in {
        return Err(Error::Dim(format!(
            "conv2d_transpose channel mismatch: input {} vs kernels {}",
            fmt_shape(x.shape()),
            fmt_shape(k.shape())
        )));
    }
    let oh = ((h - 1) * stride + kh) as isize - 2 * pad as isize;
    let ow = ((w - 1) * stride + kw) as isize - 2 * pad as isize;
    if oh <= 0 || ow <= 0 {
        return Err(Error::Dim(format!(
            "conv2d_transpose output extent {oh}x{ow} is non-positive"
        )));
    }
    Ok(ConvTDims {
        c_in,
        c_out,
        h,
        w,
        kh,
        kw,
        out_h: oh as usize,
        out_w: ow as usize,
    })
}

pub(crate) fn convt2d_forward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let d = convt2d_dims(x, k, stride, pad)?;
    if let Some(b) = bias {
        if b.len() != d.c_out {
            return Err(Error::Dim(format!(
                "conv2d_transpose bias length {} vs {} output channels",
                b.len(),
                d.c_out
            )));
        }
    }
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![T::zero(); d.c_out * d.out_h * d.out_w];
    if let Some(b) = bias {
        for co in 0..d.c_out {
            let bv = b.data()[co];
            let base = co * d.out_h * d.out_w;
            out[base..base + d.out_h * d.out_w]
                .iter_mut()
                .for_each(|o| *o = bv);
        }
    }
    for ci in 0..d.c_in {
        let x_base = ci * d.h * d.w;
        for co in 0..d.c_out {
            let out_base = co * d.out_h * d.out_w;
            let k_base = (ci * d.c_out + co) * d.kh * d.kw;
            for iy in 0..d.h {
                for ix in 0..d.w {
                    let xv = xd[x_base + iy * d.w + ix];
                    if xv == T::zero() {
                        continue;
                    }
                    for dy in 0..d.kh {
                        let oy = (iy * stride + dy).wrapping_sub(pad);
                        if oy >= d.out_h {
                            continue;
                        }
                        let row_o = out_base + oy * d.out_w;
                        let row_k = k_base + dy * d.kw;
                        for dx in 0..d.kw {
                            let ox = (ix * stride + dx).wrapping_sub(pad);
                            if ox < d.out_w {
                                out[row_o + ox] += xv * kd[row_k + dx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.c_out, d.out_h, d.out_w], out)
}

pub(crate) fn convt2d_backward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    gy: &[T],
    stride: usize,
    pad: usize,
    need_gx: bool,
    need_gk: bool,
    need_gb: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = convt2d_dims(x, k, stride, pad).expect("shapes validated at forward");
    let xd = x.data();
    let kd = k.data();
    let mut gx = vec![T::zero(); if need_gx { xd.len() } else { 0 }];
    let mut gk = vec![T::zero(); if need_gk { kd.len() } else { 0 }];
    let mut gb = vec![T::zero(); if need_gb { d.c_out } else { 0 }];
    if need_gb {
        for co in 0..d.c_out {
            let base = co * d.out_h * d.out_w;
            for v in &gy[base..base + d.out_h * d.out_w] {
                gb[co] += *v;
            }
        }
    }
    for ci in 0..d.c_in {
        let x_base = ci * d.h * d.w;
        for co in 0..d.c_out {
            let out_base = co * d.out_h * d.out_w;
            let k_base = (ci * d.c_out + co) * d.kh * d.kw;
            for iy in 0..d.h {
                for ix in 0..d.w {
                    let xi = x_base + iy * d.w + ix;
                    let xv = xd[xi];
                    let mut xg = T::zero();
                    for dy in 0..d.kh {
                        let oy = (iy * stride + dy).wrapping_sub(pad);
                        if oy >= d.out_h {
                            continue;
                        }
                        let row_o = out_base + oy * d.out_w;
                        let row_k = k_base + dy * d.kw;
                        for dx in 0..d.kw {
                            let ox = (ix * stride + dx).wrapping_sub(pad);
                            if ox < d.out_w {
                                let g = gy[row_o + ox];
                                xg += g * kd[row_k + dx];
                                if need_gk {
                                    gk[row_k + dx] += g * xv;
                                }
                            }
                        }
                    }
                    if need_gx {
                        gx[xi] += xg;
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

/// Max-pool forward; also returns the flat input index of the chosen maximum
/// per output cell. Ties go to the first maximal element in scan order.
pub(crate) fn maxpool2d_forward<T: Real>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let xs = expect_3d("maxpool2d input", x)?;
    if kernel == 0 || stride == 0 {
        return Err(Error::Dim("maxpool2d kernel and stride must be >= 1".into()));
    }
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    if h < kernel || w < kernel {
        return Err(Error::Dim(format!(
            "maxpool2d window {kernel} exceeds input {h}x{w}"
        )));
    }
    let out_h = (h - kernel) / stride + 1;
    let out_w = (w - kernel) / stride + 1;
    let xd = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut arg = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for dy in 0..kernel {
                    let row = base + (oy * stride + dy) * w;
                    for dx in 0..kernel {
                        let idx = row + ox * stride + dx;
                        let v = xd[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    let t = Tensor::new(vec![c, out_h, out_w], out)?;
    Ok((t, arg))
}
