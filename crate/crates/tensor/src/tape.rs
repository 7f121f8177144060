//! Wengert tape for reverse-mode differentiation.
//!
//! Forward ops validate shapes, compute values eagerly into an arena of
//! immutable buffers, and append a record carrying whatever the backward
//! pass needs. `backward` replays the record in exact reverse order,
//! accumulating gradients per buffer. Buffers that cannot reach a
//! gradient-tracked leaf are skipped entirely, which is how the stop-gradient
//! contracts of the adversarial losses are enforced structurally.

use crate::error::TensorError;
use crate::ops::{self, Conv3dDims};
use crate::rng::RngStream;
use crate::tensor::{numel, Real, Tensor};
use crate::Result;

/// Handle to a buffer on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorRef(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub enum BatchNormMode<'a, T: Real> {
    Train,
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

/// Batch statistics reported by a train-mode batch norm, for running-average
/// updates by the caller.
#[derive(Debug, Clone)]
pub struct BatchStats<T: Real> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

struct Buffer<T: Real> {
    data: Vec<T>,
    shape: Vec<usize>,
    needs_grad: bool,
}

enum Op<T: Real> {
    Conv3d {
        x: usize,
        k: usize,
        b: usize,
        out: usize,
        dims: Conv3dDims,
    },
    ConvTranspose3d {
        x: usize,
        k: usize,
        b: usize,
        out: usize,
        /// Geometry of the paired forward convolution (`out` has its input shape).
        dims: Conv3dDims,
    },
    AvgPool3d {
        x: usize,
        out: usize,
        block: usize,
    },
    Upsample3d {
        x: usize,
        out: usize,
        factor: usize,
    },
    Affine {
        x: usize,
        w: usize,
        b: usize,
        out: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        out: usize,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        /// Train mode differentiates through the batch statistics.
        through_stats: bool,
    },
    Relu {
        x: usize,
        out: usize,
    },
    LeakyRelu {
        x: usize,
        out: usize,
        alpha: T,
    },
    Sigmoid {
        x: usize,
        out: usize,
    },
    Exp {
        x: usize,
        out: usize,
    },
    Clamp {
        x: usize,
        out: usize,
        lo: T,
        hi: T,
    },
    Dropout {
        x: usize,
        out: usize,
        mask: Vec<T>,
    },
    Reshape {
        x: usize,
        out: usize,
    },
    Add {
        a: usize,
        b: usize,
        out: usize,
    },
    Sub {
        a: usize,
        b: usize,
        out: usize,
    },
    Mul {
        a: usize,
        b: usize,
        out: usize,
    },
    Scale {
        x: usize,
        out: usize,
        c: T,
    },
    AddScalar {
        x: usize,
        out: usize,
    },
    SumAll {
        x: usize,
        out: usize,
    },
    MeanAll {
        x: usize,
        out: usize,
    },
    RowSum {
        x: usize,
        out: usize,
    },
    BceWithLogits {
        logits: usize,
        target: usize,
        out: usize,
    },
}

/// Gradients per tape buffer. Buffers off the path from the loss report zeros.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
    sizes: Vec<usize>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, r: TensorRef) -> Option<&[T]> {
        self.grads[r.0].as_deref()
    }

    /// Gradient as a dense vector; zero where the buffer is off the loss path.
    pub fn dense(&self, r: TensorRef) -> Vec<T> {
        match &self.grads[r.0] {
            Some(g) => g.clone(),
            None => vec![T::ZERO; self.sizes[r.0]],
        }
    }
}

pub struct Tape<T: Real> {
    bufs: Vec<Buffer<T>>,
    ops: Vec<Op<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            bufs: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, needs_grad: bool) -> TensorRef {
        debug_assert_eq!(numel(&shape), data.len());
        self.bufs.push(Buffer {
            data,
            shape,
            needs_grad,
        });
        TensorRef(self.bufs.len() - 1)
    }

    /// Registers a host tensor, honoring its `requires_grad` flag.
    pub fn register(&mut self, t: &Tensor<T>) -> TensorRef {
        self.push(t.data.clone(), t.shape.clone(), t.requires_grad)
    }

    /// Gradient-tracked leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> TensorRef {
        self.push(t.data.clone(), t.shape.clone(), true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> TensorRef {
        self.push(t.data.clone(), t.shape.clone(), false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<TensorRef> {
        if numel(&shape) != data.len() {
            return Err(TensorError::InvalidArgument(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(data, shape, false))
    }

    /// Detached copy: same values, no gradient path.
    pub fn detach(&mut self, r: TensorRef) -> TensorRef {
        let data = self.bufs[r.0].data.clone();
        let shape = self.bufs[r.0].shape.clone();
        self.push(data, shape, false)
    }

    pub fn value(&self, r: TensorRef) -> &[T] {
        &self.bufs[r.0].data
    }

    pub fn shape(&self, r: TensorRef) -> &[usize] {
        &self.bufs[r.0].shape
    }

    pub fn scalar_value(&self, r: TensorRef) -> T {
        debug_assert_eq!(self.bufs[r.0].data.len(), 1);
        self.bufs[r.0].data[0]
    }

    pub fn to_tensor(&self, r: TensorRef) -> Tensor<T> {
        Tensor {
            shape: self.bufs[r.0].shape.clone(),
            data: self.bufs[r.0].data.clone(),
            requires_grad: self.bufs[r.0].needs_grad,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.bufs[i].needs_grad)
    }

    // ---- primitive ops ----------------------------------------------------

    pub fn conv3d(
        &mut self,
        x: TensorRef,
        kernel: TensorRef,
        bias: TensorRef,
        stride: usize,
        padding: usize,
    ) -> Result<TensorRef> {
        let dims = ops::conv3d_dims(
            self.shape(x),
            self.shape(kernel),
            Some(self.bufs[bias.0].data.len()),
            stride,
            padding,
        )?;
        let out = ops::conv3d_forward(
            &self.bufs[x.0].data,
            &self.bufs[kernel.0].data,
            Some(&self.bufs[bias.0].data),
            &dims,
        );
        let ng = self.needs(&[x.0, kernel.0, bias.0]);
        let r = self.push(out, dims.out_shape(), ng);
        self.ops.push(Op::Conv3d {
            x: x.0,
            k: kernel.0,
            b: bias.0,
            out: r.0,
            dims,
        });
        Ok(r)
    }

    /// Exact adjoint of `conv3d` for the same kernel/stride/padding, plus an
    /// output-channel bias. Input [N,F,D',H',W'] maps back to [N,C,D,H,W]
    /// with D = (D'-1)*stride + kd - 2*padding.
    pub fn conv3d_transpose(
        &mut self,
        x: TensorRef,
        kernel: TensorRef,
        bias: TensorRef,
        stride: usize,
        padding: usize,
    ) -> Result<TensorRef> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 5 || ks.len() != 5 {
            return Err(TensorError::shape(
                "input",
                format!("expected rank-5 input and kernel, got {xs:?} and {ks:?}"),
            ));
        }
        if xs[1] != ks[0] {
            return Err(TensorError::shape(
                "channel",
                format!("input has {} channels, kernel maps {} filters", xs[1], ks[0]),
            ));
        }
        if stride < 1 {
            return Err(TensorError::InvalidArgument("stride must be >= 1".into()));
        }
        let grow = |o: usize, k: usize, axis: &str| -> Result<usize> {
            let full = (o - 1) * stride + k;
            if full < 2 * padding {
                return Err(TensorError::shape(
                    axis,
                    format!("padding {padding} exceeds transposed extent {full}"),
                ));
            }
            Ok(full - 2 * padding)
        };
        let d = grow(xs[2], ks[2], "depth")?;
        let h = grow(xs[3], ks[3], "height")?;
        let w = grow(xs[4], ks[4], "width")?;
        // Geometry of the paired forward convolution.
        let dims = ops::conv3d_dims(&[xs[0], ks[1], d, h, w], &ks, None, stride, padding)?;
        if [dims.od, dims.oh, dims.ow] != [xs[2], xs[3], xs[4]] {
            return Err(TensorError::shape(
                "depth",
                format!(
                    "transposed input {:?} is not a valid conv output for stride {stride}, padding {padding}",
                    &xs[2..]
                ),
            ));
        }
        if self.bufs[bias.0].data.len() != ks[1] {
            return Err(TensorError::shape(
                "bias",
                format!(
                    "bias length {} does not match {} output channels",
                    self.bufs[bias.0].data.len(),
                    ks[1]
                ),
            ));
        }
        let mut out = ops::conv3d_input_grad(&self.bufs[x.0].data, &self.bufs[kernel.0].data, &dims);
        let spatial = d * h * w;
        for ni in 0..dims.n {
            for ci in 0..dims.cin {
                let bias_v = self.bufs[bias.0].data[ci];
                let base = (ni * dims.cin + ci) * spatial;
                for v in &mut out[base..base + spatial] {
                    *v += bias_v;
                }
            }
        }
        let ng = self.needs(&[x.0, kernel.0, bias.0]);
        let r = self.push(out, dims.in_shape(), ng);
        self.ops.push(Op::ConvTranspose3d {
            x: x.0,
            k: kernel.0,
            b: bias.0,
            out: r.0,
            dims,
        });
        Ok(r)
    }

    pub fn avg_pool3d(&mut self, x: TensorRef, block: usize) -> Result<TensorRef> {
        let shape = self.shape(x).to_vec();
        let out_shape = ops::pool3d_out_shape(&shape, block)?;
        let out = ops::avg_pool3d_forward(&self.bufs[x.0].data, &shape, block);
        let ng = self.needs(&[x.0]);
        let r = self.push(out, out_shape, ng);
        self.ops.push(Op::AvgPool3d {
            x: x.0,
            out: r.0,
            block,
        });
        Ok(r)
    }

    pub fn upsample3d_nearest(&mut self, x: TensorRef, factor: usize) -> Result<TensorRef> {
        if factor < 1 {
            return Err(TensorError::InvalidArgument(
                "upsample factor must be >= 1".into(),
            ));
        }
        let shape = self.shape(x).to_vec();
        if shape.len() != 5 {
            return Err(TensorError::shape(
                "input",
                format!("expected rank-5 [N,C,D,H,W], got {shape:?}"),
            ));
        }
        let out_shape = vec![
            shape[0],
            shape[1],
            shape[2] * factor,
            shape[3] * factor,
            shape[4] * factor,
        ];
        let out = ops::upsample3d_forward(&self.bufs[x.0].data, &shape, factor);
        let ng = self.needs(&[x.0]);
        let r = self.push(out, out_shape, ng);
        self.ops.push(Op::Upsample3d {
            x: x.0,
            out: r.0,
            factor,
        });
        Ok(r)
    }

    pub fn affine(&mut self, x: TensorRef, w: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(TensorError::shape(
                "input",
                format!("affine expects [N,K] and [K,M], got {xs:?} and {ws:?}"),
            ));
        }
        if xs[1] != ws[0] {
            return Err(TensorError::shape(
                "inner",
                format!("input inner extent {} != weight rows {}", xs[1], ws[0]),
            ));
        }
        if bs != vec![ws[1]] {
            return Err(TensorError::shape(
                "bias",
                format!("bias shape {bs:?} does not match output width {}", ws[1]),
            ));
        }
        let (n, k, m) = (xs[0], xs[1], ws[1]);
        let out = ops::affine_forward(
            &self.bufs[x.0].data,
            &self.bufs[w.0].data,
            &self.bufs[b.0].data,
            n,
            k,
            m,
        );
        let ng = self.needs(&[x.0, w.0, b.0]);
        let r = self.push(out, vec![n, m], ng);
        self.ops.push(Op::Affine {
            x: x.0,
            w: w.0,
            b: b.0,
            out: r.0,
        });
        Ok(r)
    }

    /// Per-channel normalization. Channel axis is axis 1; statistics pool over
    /// every other axis. Train mode requires batch size >= 2 and reports the
    /// batch statistics; eval mode normalizes with the supplied running stats.
    pub fn batch_norm(
        &mut self,
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        eps: f64,
        mode: BatchNormMode<'_, T>,
    ) -> Result<(TensorRef, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::shape(
                "input",
                format!("batch norm expects rank >= 2, got {shape:?}"),
            ));
        }
        let (n, ch) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if self.bufs[gamma.0].data.len() != ch || self.bufs[beta.0].data.len() != ch {
            return Err(TensorError::shape(
                "channel",
                format!("gamma/beta must have {ch} entries"),
            ));
        }
        let eps_t = T::from_f64(eps);
        let count = n * spatial;
        let (mean, var, through_stats) = match &mode {
            BatchNormMode::Train => {
                if n < 2 {
                    return Err(TensorError::BatchTooSmall { batch: n });
                }
                let x_data = &self.bufs[x.0].data;
                let mut mean = vec![T::ZERO; ch];
                let mut var = vec![T::ZERO; ch];
                let inv_count = T::from_f64(1.0 / count as f64);
                for ci in 0..ch {
                    let mut acc = T::ZERO;
                    for ni in 0..n {
                        let base = (ni * ch + ci) * spatial;
                        for v in &x_data[base..base + spatial] {
                            acc += *v;
                        }
                    }
                    mean[ci] = acc * inv_count;
                }
                for ci in 0..ch {
                    let mut acc = T::ZERO;
                    for ni in 0..n {
                        let base = (ni * ch + ci) * spatial;
                        for v in &x_data[base..base + spatial] {
                            let d = *v - mean[ci];
                            acc += d * d;
                        }
                    }
                    var[ci] = acc * inv_count;
                }
                (mean, var, true)
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != ch || running_var.len() != ch {
                    return Err(TensorError::shape(
                        "channel",
                        format!("running stats must have {ch} entries"),
                    ));
                }
                (running_mean.to_vec(), running_var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps_t).sqrt()).collect();
        let x_data = &self.bufs[x.0].data;
        let gamma_v = &self.bufs[gamma.0].data;
        let beta_v = &self.bufs[beta.0].data;
        let mut normalized = vec![T::ZERO; x_data.len()];
        let mut out = vec![T::ZERO; x_data.len()];
        for ni in 0..n {
            for ci in 0..ch {
                let base = (ni * ch + ci) * spatial;
                let (m, is, g, bt) = (mean[ci], inv_std[ci], gamma_v[ci], beta_v[ci]);
                for i in base..base + spatial {
                    let nv = (x_data[i] - m) * is;
                    normalized[i] = nv;
                    out[i] = g * nv + bt;
                }
            }
        }
        let ng = self.needs(&[x.0, gamma.0, beta.0]);
        let r = self.push(out, shape, ng);
        self.ops.push(Op::BatchNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            out: r.0,
            normalized,
            inv_std,
            through_stats,
        });
        let stats = if through_stats {
            Some(BatchStats { mean, var })
        } else {
            None
        };
        Ok((r, stats))
    }

    fn unary(&mut self, x: TensorRef, data: Vec<T>) -> TensorRef {
        let shape = self.bufs[x.0].shape.clone();
        let ng = self.bufs[x.0].needs_grad;
        self.push(data, shape, ng)
    }

    pub fn relu(&mut self, x: TensorRef) -> TensorRef {
        let data = self.bufs[x.0]
            .data
            .iter()
            .map(|&v| v.maximum(T::ZERO))
            .collect();
        let r = self.unary(x, data);
        self.ops.push(Op::Relu { x: x.0, out: r.0 });
        r
    }

    pub fn leaky_relu(&mut self, x: TensorRef, alpha: f64) -> TensorRef {
        let a = T::from_f64(alpha);
        let data = self.bufs[x.0]
            .data
            .iter()
            .map(|&v| if v > T::ZERO { v } else { a * v })
            .collect();
        let r = self.unary(x, data);
        self.ops.push(Op::LeakyRelu {
            x: x.0,
            out: r.0,
            alpha: a,
        });
        r
    }

    pub fn sigmoid(&mut self, x: TensorRef) -> TensorRef {
        let data = self.bufs[x.0]
            .data
            .iter()
            .map(|&v| T::ONE / (T::ONE + (-v).exp()))
            .collect();
        let r = self.unary(x, data);
        self.ops.push(Op::Sigmoid { x: x.0, out: r.0 });
        r
    }

    pub fn exp(&mut self, x: TensorRef) -> TensorRef {
        let data = self.bufs[x.0].data.iter().map(|&v| v.exp()).collect();
        let r = self.unary(x, data);
        self.ops.push(Op::Exp { x: x.0, out: r.0 });
        r
    }

    pub fn clamp(&mut self, x: TensorRef, lo: f64, hi: f64) -> TensorRef {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        let data = self.bufs[x.0]
            .data
            .iter()
            .map(|&v| v.maximum(l).minimum(h))
            .collect();
        let r = self.unary(x, data);
        self.ops.push(Op::Clamp {
            x: x.0,
            out: r.0,
            lo: l,
            hi: h,
        });
        r
    }

    /// Train mode zeroes each element with probability `rate` and rescales
    /// survivors by 1/(1-rate); eval mode (or rate 0) is the identity.
    pub fn dropout(
        &mut self,
        x: TensorRef,
        rate: f64,
        rng: &mut RngStream,
        mode: Mode,
    ) -> Result<TensorRef> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument(format!(
                "dropout rate must be in [0,1), got {rate}"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.bufs[x.0].data.len())
            .map(|_| {
                if rng.uniform() < rate {
                    T::ZERO
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<T> = self.bufs[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let r = self.unary(x, data);
        self.ops.push(Op::Dropout {
            x: x.0,
            out: r.0,
            mask,
        });
        Ok(r)
    }

    pub fn reshape(&mut self, x: TensorRef, new_shape: Vec<usize>) -> Result<TensorRef> {
        if numel(&new_shape) != self.bufs[x.0].data.len() {
            return Err(TensorError::shape(
                "reshape",
                format!(
                    "cannot reshape {} elements into {new_shape:?}",
                    self.bufs[x.0].data.len()
                ),
            ));
        }
        let data = self.bufs[x.0].data.clone();
        let ng = self.bufs[x.0].needs_grad;
        let r = self.push(data, new_shape, ng);
        self.ops.push(Op::Reshape { x: x.0, out: r.0 });
        Ok(r)
    }

    fn binary_check(&self, a: TensorRef, b: TensorRef, op: &str) -> Result<()> {
        if self.bufs[a.0].shape != self.bufs[b.0].shape {
            return Err(TensorError::shape(
                op,
                format!(
                    "operands have shapes {:?} and {:?}",
                    self.bufs[a.0].shape, self.bufs[b.0].shape
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary_check(a, b, "add")?;
        let data = self.bufs[a.0]
            .data
            .iter()
            .zip(&self.bufs[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.needs(&[a.0, b.0]);
        let shape = self.bufs[a.0].shape.clone();
        let r = self.push(data, shape, ng);
        self.ops.push(Op::Add {
            a: a.0,
            b: b.0,
            out: r.0,
        });
        Ok(r)
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary_check(a, b, "sub")?;
        let data = self.bufs[a.0]
            .data
            .iter()
            .zip(&self.bufs[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let ng = self.needs(&[a.0, b.0]);
        let shape = self.bufs[a.0].shape.clone();
        let r = self.push(data, shape, ng);
        self.ops.push(Op::Sub {
            a: a.0,
            b: b.0,
            out: r.0,
        });
        Ok(r)
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary_check(a, b, "mul")?;
        let data = self.bufs[a.0]
            .data
            .iter()
            .zip(&self.bufs[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.needs(&[a.0, b.0]);
        let shape = self.bufs[a.0].shape.clone();
        let r = self.push(data, shape, ng);
        self.ops.push(Op::Mul {
            a: a.0,
            b: b.0,
            out: r.0,
        });
        Ok(r)
    }

    pub fn scale(&mut self, x: TensorRef, c: f64) -> TensorRef {
        let ct = T::from_f64(c);
        let data = self.bufs[x.0].data.iter().map(|&v| v * ct).collect();
        let r = self.unary(x, data);
        self.ops.push(Op::Scale {
            x: x.0,
            out: r.0,
            c: ct,
        });
        r
    }

    pub fn add_scalar(&mut self, x: TensorRef, c: f64) -> TensorRef {
        let ct = T::from_f64(c);
        let data = self.bufs[x.0].data.iter().map(|&v| v + ct).collect();
        let r = self.unary(x, data);
        self.ops.push(Op::AddScalar { x: x.0, out: r.0 });
        r
    }

    pub fn sum_all(&mut self, x: TensorRef) -> TensorRef {
        let mut acc = T::ZERO;
        for v in &self.bufs[x.0].data {
            acc += *v;
        }
        let ng = self.bufs[x.0].needs_grad;
        let r = self.push(vec![acc], vec![], ng);
        self.ops.push(Op::SumAll { x: x.0, out: r.0 });
        r
    }

    pub fn mean_all(&mut self, x: TensorRef) -> TensorRef {
        let n = self.bufs[x.0].data.len();
        let mut acc = T::ZERO;
        for v in &self.bufs[x.0].data {
            acc += *v;
        }
        let ng = self.bufs[x.0].needs_grad;
        let r = self.push(vec![acc * T::from_f64(1.0 / n as f64)], vec![], ng);
        self.ops.push(Op::MeanAll { x: x.0, out: r.0 });
        r
    }

    /// [N,K] -> [N], summing each row.
    pub fn row_sum(&mut self, x: TensorRef) -> Result<TensorRef> {
        let shape = self.bufs[x.0].shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::shape(
                "input",
                format!("row_sum expects [N,K], got {shape:?}"),
            ));
        }
        let (n, k) = (shape[0], shape[1]);
        let mut out = vec![T::ZERO; n];
        for ni in 0..n {
            let mut acc = T::ZERO;
            for v in &self.bufs[x.0].data[ni * k..(ni + 1) * k] {
                acc += *v;
            }
            out[ni] = acc;
        }
        let ng = self.bufs[x.0].needs_grad;
        let r = self.push(out, vec![n], ng);
        self.ops.push(Op::RowSum { x: x.0, out: r.0 });
        Ok(r)
    }

    /// Mean squared error between two same-shape buffers.
    pub fn mse(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Numerically stable mean Bernoulli cross-entropy against pre-sigmoid logits.
    pub fn bce_with_logits(&mut self, logits: TensorRef, target: TensorRef) -> Result<TensorRef> {
        self.binary_check(logits, target, "bce_with_logits")?;
        let n = self.bufs[logits.0].data.len();
        let mut acc = T::ZERO;
        for (&l, &t) in self.bufs[logits.0].data.iter().zip(&self.bufs[target.0].data) {
            // max(l,0) - l*t + ln(1 + exp(-|l|))
            acc += l.maximum(T::ZERO) - l * t + (-l.abs()).exp().ln_1p();
        }
        let ng = self.bufs[logits.0].needs_grad;
        let r = self.push(vec![acc * T::from_f64(1.0 / n as f64)], vec![], ng);
        self.ops.push(Op::BceWithLogits {
            logits: logits.0,
            target: target.0,
            out: r.0,
        });
        Ok(r)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradient of the loss w.r.t. every
    /// gradient-tracked buffer; anything off the path reports zeros.
    pub fn backward(&self, loss: TensorRef) -> Result<Gradients<T>> {
        let lb = &self.bufs[loss.0];
        if lb.data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lb.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.bufs.len()];
        grads[loss.0] = Some(vec![T::ONE]);

        for op in self.ops.iter().rev() {
            self.backprop_op(op, &mut grads);
        }

        let sizes = self.bufs.iter().map(|b| b.data.len()).collect();
        Ok(Gradients { grads, sizes })
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], id: usize, contrib: Vec<T>) {
        if !self.bufs[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn backprop_op(&self, op: &Op<T>, grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Conv3d { x, k, b, out, dims } => {
                let Some(dy) = grads[*out].clone() else { return };
                if self.bufs[*x].needs_grad {
                    let dx = ops::conv3d_input_grad(&dy, &self.bufs[*k].data, dims);
                    self.accum(grads, *x, dx);
                }
                if self.bufs[*k].needs_grad {
                    let dk = ops::conv3d_kernel_grad(&self.bufs[*x].data, &dy, dims);
                    self.accum(grads, *k, dk);
                }
                if self.bufs[*b].needs_grad {
                    let db = ops::channel_sum(&dy, dims.n, dims.f, dims.od * dims.oh * dims.ow);
                    self.accum(grads, *b, db);
                }
            }
            Op::ConvTranspose3d { x, k, b, out, dims } => {
                let Some(dy) = grads[*out].clone() else { return };
                if self.bufs[*x].needs_grad {
                    let dx = ops::conv3d_forward(&dy, &self.bufs[*k].data, None, dims);
                    self.accum(grads, *x, dx);
                }
                if self.bufs[*k].needs_grad {
                    let dk = ops::conv3d_kernel_grad(&dy, &self.bufs[*x].data, dims);
                    self.accum(grads, *k, dk);
                }
                if self.bufs[*b].needs_grad {
                    let db = ops::channel_sum(&dy, dims.n, dims.cin, dims.d * dims.h * dims.w);
                    self.accum(grads, *b, db);
                }
            }
            Op::AvgPool3d { x, out, block } => {
                let Some(dy) = grads[*out].as_ref() else { return };
                let dx = ops::avg_pool3d_backward(dy, &self.bufs[*x].shape, *block);
                self.accum(grads, *x, dx);
            }
            Op::Upsample3d { x, out, factor } => {
                let Some(dy) = grads[*out].as_ref() else { return };
                let dx = ops::upsample3d_backward(dy, &self.bufs[*x].shape, *factor);
                self.accum(grads, *x, dx);
            }
            Op::Affine { x, w, b, out } => {
                let Some(dy) = grads[*out].clone() else { return };
                let (n, k) = (self.bufs[*x].shape[0], self.bufs[*x].shape[1]);
                let m = self.bufs[*w].shape[1];
                if self.bufs[*x].needs_grad {
                    let dx = ops::affine_input_grad(&dy, &self.bufs[*w].data, n, k, m);
                    self.accum(grads, *x, dx);
                }
                if self.bufs[*w].needs_grad {
                    let dw = ops::affine_weight_grad(&self.bufs[*x].data, &dy, n, k, m);
                    self.accum(grads, *w, dw);
                }
                if self.bufs[*b].needs_grad {
                    let db = ops::affine_bias_grad(&dy, n, m);
                    self.accum(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                out,
                normalized,
                inv_std,
                through_stats,
            } => {
                let Some(dy) = grads[*out].clone() else { return };
                let shape = &self.bufs[*x].shape;
                let (n, ch) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let gamma_v = &self.bufs[*gamma].data;
                if self.bufs[*gamma].needs_grad {
                    let mut dg = vec![T::ZERO; ch];
                    for ni in 0..n {
                        for ci in 0..ch {
                            let base = (ni * ch + ci) * spatial;
                            let mut acc = T::ZERO;
                            for i in base..base + spatial {
                                acc += dy[i] * normalized[i];
                            }
                            dg[ci] += acc;
                        }
                    }
                    self.accum(grads, *gamma, dg);
                }
                if self.bufs[*beta].needs_grad {
                    let db = ops::channel_sum(&dy, n, ch, spatial);
                    self.accum(grads, *beta, db);
                }
                if self.bufs[*x].needs_grad {
                    let mut dx = vec![T::ZERO; dy.len()];
                    if *through_stats {
                        let count = T::from_f64((n * spatial) as f64);
                        for ci in 0..ch {
                            // dx = gamma*inv_std/m * (m*dy - sum(dy) - x_hat * sum(dy*x_hat))
                            let mut s_dy = T::ZERO;
                            let mut s_dyx = T::ZERO;
                            for ni in 0..n {
                                let base = (ni * ch + ci) * spatial;
                                for i in base..base + spatial {
                                    s_dy += dy[i];
                                    s_dyx += dy[i] * normalized[i];
                                }
                            }
                            let scale = gamma_v[ci] * inv_std[ci] / count;
                            for ni in 0..n {
                                let base = (ni * ch + ci) * spatial;
                                for i in base..base + spatial {
                                    dx[i] = scale * (count * dy[i] - s_dy - normalized[i] * s_dyx);
                                }
                            }
                        }
                    } else {
                        for ni in 0..n {
                            for ci in 0..ch {
                                let base = (ni * ch + ci) * spatial;
                                let scale = gamma_v[ci] * inv_std[ci];
                                for i in base..base + spatial {
                                    dx[i] = dy[i] * scale;
                                }
                            }
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::Relu { x, out } => {
                let Some(dy) = grads[*out].as_ref() else { return };
                let dx = self.bufs[*x]
                    .data
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
                    .collect();
                self.accum(grads, *x, dx);
            }
            Op::LeakyRelu { x, out, alpha } => {
                let Some(dy) = grads[*out].as_ref() else { return };
                let dx = self.bufs[*x]
                    .data
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > T::ZERO { g } else { *alpha * g })
                    .collect();
                self.accum(grads, *x, dx);
            }
            Op::Sigmoid { x, out } => {
                let Some(dy) = grads[*out].as_ref() else { return };
                let dx = self.bufs[*out]
                    .data
                    .iter()
                    .zip(dy)
                    .map(|(&y, &g)| g * y * (T::ONE - y))
                    .collect();
                self.accum(grads, *x, dx);
            }
            Op::Exp { x, out } => {
                let Some(dy) = grads[*out].as_ref() else { return };
                let dx = self.bufs[*out]
                    .data
                    .iter()
                    .zip(dy)
                    .map(|(&y, &g)| g * y)
                    .collect();
                self.accum(grads, *x, dx);
            }
            Op::Clamp { x, out, lo, hi } => {
                let Some(dy) = grads[*out].as_ref() else { return };
                let dx = self.bufs[*x]
                    .data
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v >= *lo && v <= *hi { g } else { T::ZERO })
                    .collect();
                self.accum(grads, *x, dx);
            }
            Op::Dropout { x, out, mask } => {
                let Some(dy) = grads[*out].as_ref() else { return };
                let dx = mask.iter().zip(dy).map(|(&m, &g)| m * g).collect();
                self.accum(grads, *x, dx);
            }
            Op::Reshape { x, out } => {
                let Some(dy) = grads[*out].as_ref() else { return };
                self.accum(grads, *x, dy.clone());
            }
            Op::Add { a, b, out } => {
                let Some(dy) = grads[*out].clone() else { return };
                if self.bufs[*a].needs_grad {
                    self.accum(grads, *a, dy.clone());
                }
                if self.bufs[*b].needs_grad {
                    self.accum(grads, *b, dy);
                }
            }
            Op::Sub { a, b, out } => {
                let Some(dy) = grads[*out].clone() else { return };
                if self.bufs[*a].needs_grad {
                    self.accum(grads, *a, dy.clone());
                }
                if self.bufs[*b].needs_grad {
                    let neg = dy.iter().map(|&g| -g).collect();
                    self.accum(grads, *b, neg);
                }
            }
            Op::Mul { a, b, out } => {
                let Some(dy) = grads[*out].clone() else { return };
                if self.bufs[*a].needs_grad {
                    let da = self.bufs[*b]
                        .data
                        .iter()
                        .zip(&dy)
                        .map(|(&bv, &g)| bv * g)
                        .collect();
                    self.accum(grads, *a, da);
                }
                if self.bufs[*b].needs_grad {
                    let db = self.bufs[*a]
                        .data
                        .iter()
                        .zip(&dy)
                        .map(|(&av, &g)| av * g)
                        .collect();
                    self.accum(grads, *b, db);
                }
            }
            Op::Scale { x, out, c } => {
                let Some(dy) = grads[*out].as_ref() else { return };
                let dx = dy.iter().map(|&g| *c * g).collect();
                self.accum(grads, *x, dx);
            }
            Op::AddScalar { x, out } => {
                let Some(dy) = grads[*out].as_ref() else { return };
                self.accum(grads, *x, dy.clone());
            }
            Op::SumAll { x, out } => {
                let Some(dy) = grads[*out].as_ref() else { return };
                let g = dy[0];
                self.accum(grads, *x, vec![g; self.bufs[*x].data.len()]);
            }
            Op::MeanAll { x, out } => {
                let Some(dy) = grads[*out].as_ref() else { return };
                let n = self.bufs[*x].data.len();
                let g = dy[0] * T::from_f64(1.0 / n as f64);
                self.accum(grads, *x, vec![g; n]);
            }
            Op::RowSum { x, out } => {
                let Some(dy) = grads[*out].as_ref() else { return };
                let (n, k) = (self.bufs[*x].shape[0], self.bufs[*x].shape[1]);
                let mut dx = vec![T::ZERO; n * k];
                for ni in 0..n {
                    for ki in 0..k {
                        dx[ni * k + ki] = dy[ni];
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::BceWithLogits { logits, target, out } => {
                let Some(dy) = grads[*out].as_ref() else { return };
                if !self.bufs[*logits].needs_grad {
                    return;
                }
                let n = self.bufs[*logits].data.len();
                let g = dy[0] * T::from_f64(1.0 / n as f64);
                let dx = self.bufs[*logits]
                    .data
                    .iter()
                    .zip(&self.bufs[*target].data)
                    .map(|(&l, &t)| g * (T::ONE / (T::ONE + (-l).exp()) - t))
                    .collect();
                self.accum(grads, *logits, dx);
            }
        }
    }
}
