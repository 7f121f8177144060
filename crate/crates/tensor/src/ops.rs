//! Raw numeric kernels behind the tape ops.
//!
//! All reductions run in a fixed sequential order (last axis innermost), so
//! results are bitwise reproducible across runs.

use crate::error::TensorError;
use crate::tensor::Real;

/// Resolved geometry of a conv3d call. For the transposed op the same struct
/// describes the paired forward convolution.
#[derive(Debug, Clone)]
pub struct Conv3dDims {
    pub n: usize,
    pub cin: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub od: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv3dDims {
    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.f, self.od, self.oh, self.ow]
    }

    pub fn in_shape(&self) -> Vec<usize> {
        vec![self.n, self.cin, self.d, self.h, self.w]
    }
}

fn conv_extent(axis: &str, input: usize, k: usize, stride: usize, pad: usize) -> Result<usize, TensorError> {
    let padded = input + 2 * pad;
    if k == 0 {
        return Err(TensorError::shape(axis, "kernel extent is zero"));
    }
    if k > padded {
        return Err(TensorError::shape(
            axis,
            format!("kernel extent {k} exceeds padded input extent {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

pub fn conv3d_dims(
    input_shape: &[usize],
    kernel_shape: &[usize],
    bias_len: Option<usize>,
    stride: usize,
    pad: usize,
) -> Result<Conv3dDims, TensorError> {
    if input_shape.len() != 5 {
        return Err(TensorError::shape(
            "input",
            format!("expected rank-5 [N,C,D,H,W], got {input_shape:?}"),
        ));
    }
    if kernel_shape.len() != 5 {
        return Err(TensorError::shape(
            "kernel",
            format!("expected rank-5 [F,C,kd,kh,kw], got {kernel_shape:?}"),
        ));
    }
    if stride < 1 {
        return Err(TensorError::InvalidArgument("stride must be >= 1".into()));
    }
    let (n, cin, d, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
        input_shape[4],
    );
    let (f, kc, kd, kh, kw) = (
        kernel_shape[0],
        kernel_shape[1],
        kernel_shape[2],
        kernel_shape[3],
        kernel_shape[4],
    );
    if kc != cin {
        return Err(TensorError::shape(
            "channel",
            format!("kernel expects {kc} input channels, input has {cin}"),
        ));
    }
    if let Some(bl) = bias_len {
        if bl != f {
            return Err(TensorError::shape(
                "bias",
                format!("bias length {bl} does not match {f} filters"),
            ));
        }
    }
    let od = conv_extent("depth", d, kd, stride, pad)?;
    let oh = conv_extent("height", h, kh, stride, pad)?;
    let ow = conv_extent("width", w, kw, stride, pad)?;
    Ok(Conv3dDims {
        n,
        cin,
        d,
        h,
        w,
        f,
        kd,
        kh,
        kw,
        stride,
        pad,
        od,
        oh,
        ow,
    })
}

/// Half-open range of output positions whose source index o*stride - pad + k_off
/// lands inside [0, in_extent).
fn valid_range(in_extent: usize, out_extent: usize, stride: usize, pad: usize, k_off: usize) -> (usize, usize) {
    let s = stride as isize;
    let shift = pad as isize - k_off as isize;
    let lo = (shift + s - 1).div_euclid(s).max(0) as usize;
    let hi_incl = (in_extent as isize - 1 + shift).div_euclid(s);
    if hi_incl < lo as isize {
        return (0, 0);
    }
    (lo, (hi_incl as usize + 1).min(out_extent))
}

/// Cross-correlation: out[n,f,o] = bias[f] + sum_{c,k} x[n,c,o*s-p+k] * w[f,c,k].
pub fn conv3d_forward<T: Real>(x: &[T], kernel: &[T], bias: Option<&[T]>, dims: &Conv3dDims) -> Vec<T> {
    let &Conv3dDims {
        n,
        cin,
        d,
        h,
        w,
        f,
        kd,
        kh,
        kw,
        stride,
        pad,
        od,
        oh,
        ow,
    } = dims;
    let out_spatial = od * oh * ow;
    let mut out = vec![T::ZERO; n * f * out_spatial];
    for ni in 0..n {
        for fi in 0..f {
            let out_base = (ni * f + fi) * out_spatial;
            if let Some(b) = bias {
                for v in &mut out[out_base..out_base + out_spatial] {
                    *v = b[fi];
                }
            }
            for ci in 0..cin {
                let x_base = (ni * cin + ci) * d * h * w;
                for kdi in 0..kd {
                    let (od_lo, od_hi) = valid_range(d, od, stride, pad, kdi);
                    for khi in 0..kh {
                        let (oh_lo, oh_hi) = valid_range(h, oh, stride, pad, khi);
                        for kwi in 0..kw {
                            let wgt = kernel[(((fi * cin + ci) * kd + kdi) * kh + khi) * kw + kwi];
                            let (ow_lo, ow_hi) = valid_range(w, ow, stride, pad, kwi);
                            for odi in od_lo..od_hi {
                                let id = odi * stride + kdi - pad;
                                for ohi in oh_lo..oh_hi {
                                    let ih = ohi * stride + khi - pad;
                                    let x_row = x_base + (id * h + ih) * w;
                                    let o_row = out_base + (odi * oh + ohi) * ow;
                                    if stride == 1 {
                                        // contiguous: iw = owi + kwi - pad
                                        let x_off = (x_row + ow_lo + kwi) as isize - pad as isize;
                                        let xs = &x[x_off as usize..x_off as usize + (ow_hi - ow_lo)];
                                        let os = &mut out[o_row + ow_lo..o_row + ow_hi];
                                        for (o, xv) in os.iter_mut().zip(xs) {
                                            *o += wgt * *xv;
                                        }
                                    } else {
                                        for owi in ow_lo..ow_hi {
                                            let iw = owi * stride + kwi - pad;
                                            out[o_row + owi] += wgt * x[x_row + iw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of the kernel application: scatters dy back onto input positions.
/// Also serves as the forward pass of the transposed convolution.
pub fn conv3d_input_grad<T: Real>(dy: &[T], kernel: &[T], dims: &Conv3dDims) -> Vec<T> {
    let &Conv3dDims {
        n,
        cin,
        d,
        h,
        w,
        f,
        kd,
        kh,
        kw,
        stride,
        pad,
        od,
        oh,
        ow,
    } = dims;
    let out_spatial = od * oh * ow;
    let mut dx = vec![T::ZERO; n * cin * d * h * w];
    for ni in 0..n {
        for ci in 0..cin {
            let x_base = (ni * cin + ci) * d * h * w;
            for fi in 0..f {
                let dy_base = (ni * f + fi) * out_spatial;
                for kdi in 0..kd {
                    let (od_lo, od_hi) = valid_range(d, od, stride, pad, kdi);
                    for khi in 0..kh {
                        let (oh_lo, oh_hi) = valid_range(h, oh, stride, pad, khi);
                        for kwi in 0..kw {
                            let wgt = kernel[(((fi * cin + ci) * kd + kdi) * kh + khi) * kw + kwi];
                            let (ow_lo, ow_hi) = valid_range(w, ow, stride, pad, kwi);
                            for odi in od_lo..od_hi {
                                let id = odi * stride + kdi - pad;
                                for ohi in oh_lo..oh_hi {
                                    let ih = ohi * stride + khi - pad;
                                    let x_row = x_base + (id * h + ih) * w;
                                    let dy_row = dy_base + (odi * oh + ohi) * ow;
                                    if stride == 1 {
                                        let x_off = (x_row + ow_lo + kwi) as isize - pad as isize;
                                        let xs = &mut dx[x_off as usize..x_off as usize + (ow_hi - ow_lo)];
                                        let ds = &dy[dy_row + ow_lo..dy_row + ow_hi];
                                        for (xv, dv) in xs.iter_mut().zip(ds) {
                                            *xv += wgt * *dv;
                                        }
                                    } else {
                                        for owi in ow_lo..ow_hi {
                                            let iw = owi * stride + kwi - pad;
                                            dx[x_row + iw] += wgt * dy[dy_row + owi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn conv3d_kernel_grad<T: Real>(x: &[T], dy: &[T], dims: &Conv3dDims) -> Vec<T> {
    let &Conv3dDims {
        n,
        cin,
        d,
        h,
        w,
        f,
        kd,
        kh,
        kw,
        stride,
        pad,
        od,
        oh,
        ow,
    } = dims;
    let out_spatial = od * oh * ow;
    let mut dk = vec![T::ZERO; f * cin * kd * kh * kw];
    for fi in 0..f {
        for ci in 0..cin {
            for kdi in 0..kd {
                let (od_lo, od_hi) = valid_range(d, od, stride, pad, kdi);
                for khi in 0..kh {
                    let (oh_lo, oh_hi) = valid_range(h, oh, stride, pad, khi);
                    for kwi in 0..kw {
                        let (ow_lo, ow_hi) = valid_range(w, ow, stride, pad, kwi);
                        let mut acc = [T::ZERO; 4];
                        for ni in 0..n {
                            let x_base = (ni * cin + ci) * d * h * w;
                            let dy_base = (ni * f + fi) * out_spatial;
                            for odi in od_lo..od_hi {
                                let id = odi * stride + kdi - pad;
                                for ohi in oh_lo..oh_hi {
                                    let ih = ohi * stride + khi - pad;
                                    let x_row = x_base + (id * h + ih) * w;
                                    let dy_row = dy_base + (odi * oh + ohi) * ow;
                                    if stride == 1 {
                                        let x_off = (x_row + ow_lo + kwi) as isize - pad as isize;
                                        let xs = &x[x_off as usize..x_off as usize + (ow_hi - ow_lo)];
                                        let ds = &dy[dy_row + ow_lo..dy_row + ow_hi];
                                        let chunks = xs.len() / 4;
                                        for c4 in 0..chunks {
                                            let i = c4 * 4;
                                            acc[0] += ds[i] * xs[i];
                                            acc[1] += ds[i + 1] * xs[i + 1];
                                            acc[2] += ds[i + 2] * xs[i + 2];
                                            acc[3] += ds[i + 3] * xs[i + 3];
                                        }
                                        for i in chunks * 4..xs.len() {
                                            acc[0] += ds[i] * xs[i];
                                        }
                                    } else {
                                        for owi in ow_lo..ow_hi {
                                            let iw = owi * stride + kwi - pad;
                                            acc[0] += dy[dy_row + owi] * x[x_row + iw];
                                        }
                                    }
                                }
                            }
                        }
                        dk[(((fi * cin + ci) * kd + kdi) * kh + khi) * kw + kwi] =
                            acc[0] + acc[1] + acc[2] + acc[3];
                    }
                }
            }
        }
    }
    dk
}

/// Per-channel sum over batch and spatial axes of a [N,CH,spatial] buffer.
pub fn channel_sum<T: Real>(data: &[T], n: usize, ch: usize, spatial: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; ch];
    for ni in 0..n {
        for ci in 0..ch {
            let base = (ni * ch + ci) * spatial;
            let mut acc = T::ZERO;
            for v in &data[base..base + spatial] {
                acc += *v;
            }
            out[ci] += acc;
        }
    }
    out
}

pub fn pool3d_out_shape(shape: &[usize], block: usize) -> Result<Vec<usize>, TensorError> {
    if shape.len() != 5 {
        return Err(TensorError::shape(
            "input",
            format!("expected rank-5 [N,C,D,H,W], got {shape:?}"),
        ));
    }
    if block == 0 {
        return Err(TensorError::InvalidArgument("pool block must be >= 1".into()));
    }
    let names = ["depth", "height", "width"];
    for (i, name) in names.iter().enumerate() {
        let e = shape[2 + i];
        if e % block != 0 {
            return Err(TensorError::shape(
                *name,
                format!("extent {e} is not divisible by block {block}"),
            ));
        }
    }
    Ok(vec![
        shape[0],
        shape[1],
        shape[2] / block,
        shape[3] / block,
        shape[4] / block,
    ])
}

/// Fixed-order pairwise sum. For power-of-two lengths of identical values the
/// partial sums stay exact, which makes pool(upsample(v)) == v bitwise.
fn pairwise_sum<T: Real>(buf: &mut [T]) -> T {
    let mut len = buf.len();
    while len > 1 {
        let half = len / 2;
        for i in 0..half {
            buf[i] = buf[2 * i] + buf[2 * i + 1];
        }
        if len % 2 == 1 {
            buf[half] = buf[len - 1];
            len = half + 1;
        } else {
            len = half;
        }
    }
    buf[0]
}

/// Block-average pooling over the three spatial axes.
pub fn avg_pool3d_forward<T: Real>(x: &[T], shape: &[usize], block: usize) -> Vec<T> {
    let (m, d, h, w) = (shape[0] * shape[1], shape[2], shape[3], shape[4]);
    let (pd, ph, pw) = (d / block, h / block, w / block);
    let inv = T::from_f64(1.0 / (block * block * block) as f64);
    let mut out = vec![T::ZERO; m * pd * ph * pw];
    let mut scratch = vec![T::ZERO; block * block * block];
    for mi in 0..m {
        let in_base = mi * d * h * w;
        let out_base = mi * pd * ph * pw;
        for od in 0..pd {
            for oh in 0..ph {
                for ow in 0..pw {
                    let mut s = 0;
                    for bd in 0..block {
                        for bh in 0..block {
                            let row = in_base + ((od * block + bd) * h + oh * block + bh) * w + ow * block;
                            scratch[s..s + block].copy_from_slice(&x[row..row + block]);
                            s += block;
                        }
                    }
                    out[out_base + (od * ph + oh) * pw + ow] = pairwise_sum(&mut scratch) * inv;
                }
            }
        }
    }
    out
}

pub fn avg_pool3d_backward<T: Real>(dy: &[T], shape: &[usize], block: usize) -> Vec<T> {
    let (m, d, h, w) = (shape[0] * shape[1], shape[2], shape[3], shape[4]);
    let (pd, ph, pw) = (d / block, h / block, w / block);
    let inv = T::from_f64(1.0 / (block * block * block) as f64);
    let mut dx = vec![T::ZERO; m * d * h * w];
    for mi in 0..m {
        let in_base = mi * d * h * w;
        let out_base = mi * pd * ph * pw;
        for od in 0..pd {
            for oh in 0..ph {
                for ow in 0..pw {
                    let g = dy[out_base + (od * ph + oh) * pw + ow] * inv;
                    for bd in 0..block {
                        for bh in 0..block {
                            let row = in_base + ((od * block + bd) * h + oh * block + bh) * w + ow * block;
                            for v in &mut dx[row..row + block] {
                                *v += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling: every voxel replicated factor^3 times.
pub fn upsample3d_forward<T: Real>(x: &[T], shape: &[usize], factor: usize) -> Vec<T> {
    let (m, d, h, w) = (shape[0] * shape[1], shape[2], shape[3], shape[4]);
    let (ud, uh, uw) = (d * factor, h * factor, w * factor);
    let mut out = vec![T::ZERO; m * ud * uh * uw];
    for mi in 0..m {
        let in_base = mi * d * h * w;
        let out_base = mi * ud * uh * uw;
        for zd in 0..ud {
            for zh in 0..uh {
                let src_row = in_base + ((zd / factor) * h + zh / factor) * w;
                let dst_row = out_base + (zd * uh + zh) * uw;
                for zw in 0..uw {
                    out[dst_row + zw] = x[src_row + zw / factor];
                }
            }
        }
    }
    out
}

pub fn upsample3d_backward<T: Real>(dy: &[T], shape: &[usize], factor: usize) -> Vec<T> {
    let (m, d, h, w) = (shape[0] * shape[1], shape[2], shape[3], shape[4]);
    let (ud, uh, uw) = (d * factor, h * factor, w * factor);
    let mut dx = vec![T::ZERO; m * d * h * w];
    for mi in 0..m {
        let in_base = mi * d * h * w;
        let out_base = mi * ud * uh * uw;
        for zd in 0..ud {
            for zh in 0..uh {
                let src_row = in_base + ((zd / factor) * h + zh / factor) * w;
                let dy_row = out_base + (zd * uh + zh) * uw;
                for zw in 0..uw {
                    dx[src_row + zw / factor] += dy[dy_row + zw];
                }
            }
        }
    }
    dx
}

/// y = x @ w + b with x:[N,K], w:[K,M], b:[M].
pub fn affine_forward<T: Real>(x: &[T], w: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; n * m];
    for ni in 0..n {
        let o_row = ni * m;
        out[o_row..o_row + m].copy_from_slice(b);
        for ki in 0..k {
            let xv = x[ni * k + ki];
            let w_row = ki * m;
            for mi in 0..m {
                out[o_row + mi] += xv * w[w_row + mi];
            }
        }
    }
    out
}

pub fn affine_input_grad<T: Real>(dy: &[T], w: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut dx = vec![T::ZERO; n * k];
    for ni in 0..n {
        for ki in 0..k {
            let mut acc = T::ZERO;
            let w_row = ki * m;
            let dy_row = ni * m;
            for mi in 0..m {
                acc += dy[dy_row + mi] * w[w_row + mi];
            }
            dx[ni * k + ki] = acc;
        }
    }
    dx
}

pub fn affine_weight_grad<T: Real>(x: &[T], dy: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut dw = vec![T::ZERO; k * m];
    for ni in 0..n {
        for ki in 0..k {
            let xv = x[ni * k + ki];
            let w_row = ki * m;
            let dy_row = ni * m;
            for mi in 0..m {
                dw[w_row + mi] += xv * dy[dy_row + mi];
            }
        }
    }
    dw
}

pub fn affine_bias_grad<T: Real>(dy: &[T], n: usize, m: usize) -> Vec<T> {
    let mut db = vec![T::ZERO; m];
    for ni in 0..n {
        for mi in 0..m {
            db[mi] += dy[ni * m + mi];
        }
    }
    db
}
