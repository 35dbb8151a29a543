//! Recorded-operation reverse-mode autodiff.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Each
//! forward method validates shapes, computes the result, and records the
//! operation; [`Tape::backward`] walks the record in reverse, applying each
//! operation's adjoint rule and accumulating gradients. One tape serves one
//! training step: `backward` consumes it (a second call errors).
//!
//! Nodes created with [`Tape::constant`] are excluded from gradient
//! tracking; a node is tracked iff any of its inputs is tracked. Leaves that
//! never participate in the loss keep a zero gradient.

use crate::ssm::kernel;

use super::{Element, Tensor, TensorError};

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Batch statistics produced by a train-mode batch norm, for the caller to
/// fold into running statistics (the tape itself never holds running state).
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (divisor m), as used for the normalization itself.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Exp(NodeId),
    Gelu(NodeId),
    Silu(NodeId),
    Softplus(NodeId),
    SoftmaxLast(NodeId),
    LogSoftmaxLast(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    MatMul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    },
    BatchNorm2dTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm2dEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    DepthwiseConv1dCausal {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Transpose12(NodeId),
    FlattenTranspose(NodeId),
    UnflattenTranspose(NodeId),
    GlobalAvgPool(NodeId),
    NarrowLast {
        x: NodeId,
        start: usize,
    },
    SumAll(NodeId),
    SsmScan {
        x: NodeId,
        delta: NodeId,
        b_in: NodeId,
        c_in: NodeId,
        a: NodeId,
        d_skip: NodeId,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf | Op::Constant => vec![],
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Gelu(a)
            | Op::Silu(a)
            | Op::Softplus(a)
            | Op::SoftmaxLast(a)
            | Op::LogSoftmaxLast(a)
            | Op::Transpose12(a)
            | Op::FlattenTranspose(a)
            | Op::UnflattenTranspose(a)
            | Op::GlobalAvgPool(a)
            | Op::NarrowLast { x: a, .. }
            | Op::SumAll(a) => vec![a],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Linear { x, w, b } => {
                let mut v = vec![x, w];
                if let Some(b) = b {
                    v.push(b);
                }
                v
            }
            Op::Conv2d { x, w, b, .. } | Op::DepthwiseConv1dCausal { x, w, b } => vec![x, w, b],
            Op::BatchNorm2dTrain { x, gamma, beta, .. }
            | Op::BatchNorm2dEval { x, gamma, beta, .. }
            | Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::SsmScan {
                x,
                delta,
                b_in,
                c_in,
                a,
                d_skip,
            } => vec![x, delta, b_in, c_in, a, d_skip],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`NodeId`].
///
/// `grad` returns `None` for constants and for interior results whose
/// buffers were released during the reverse sweep; leaves always have an
/// entry (zero if the loss never touched them).
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// The operation record. See the module docs for the usage model.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail,
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus_scalar<T: Element>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Exact Gaussian-CDF GELU: x·Φ(x) with Φ from the error function.
pub(crate) fn gelu_scalar<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (T::one() + (x * inv_sqrt2).erf())
}

fn gelu_deriv<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64(0.398_942_280_401_432_7);
    let phi_cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let phi_pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    phi_cdf + x * phi_pdf
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Registers a gradient-tracked input (parameter or data).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Registers a non-tracked input (targets, fixed coefficients).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_unchecked(value, Op::Constant, false)
    }

    /// The tensor held by a node.
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            tracked,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
    ) -> Result<NodeId, TensorError> {
        #[cfg(debug_assertions)]
        if !value.all_finite() {
            return Err(TensorError::NonFinite {
                op: name,
                detail: format!("output shape {:?}", value.shape()),
            });
        }
        #[cfg(not(debug_assertions))]
        let _ = name;
        let tracked = op.inputs().iter().any(|i| self.nodes[i.0].tracked);
        Ok(self.push_unchecked(value, op, tracked))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("scale", out, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x.exp()).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("exp", out, Op::Exp(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| gelu_scalar(x)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("gelu", out, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * sigmoid(x)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("silu", out, Op::Silu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| softplus_scalar(x)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("softplus", out, Op::Softplus(a))
    }

    // ---- row-wise over the last axis ----

    fn last_axis(
        &self,
        op: &'static str,
        id: NodeId,
    ) -> Result<(usize, usize), TensorError> {
        let v = self.value(id);
        if v.rank() == 0 {
            return Err(shape_err(op, "input must have at least 1 axis".into()));
        }
        let c = v.dim(v.rank() - 1);
        Ok((v.numel() / c, c))
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (rows, c) = self.last_axis("softmax", a)?;
        let av = self.value(a);
        let mut data = vec![T::zero(); av.numel()];
        for r in 0..rows {
            let row = &av.data()[r * c..(r + 1) * c];
            let m = row.iter().fold(row[0], |m, &v| if v > m { v } else { m });
            let mut sum = T::zero();
            for (o, &v) in data[r * c..(r + 1) * c].iter_mut().zip(row) {
                let e = (v - m).exp();
                *o = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            for o in &mut data[r * c..(r + 1) * c] {
                *o = *o * inv;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("softmax", out, Op::SoftmaxLast(a))
    }

    /// Log-softmax over the last axis (log-sum-exp with max-subtraction).
    pub fn log_softmax_last(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (rows, c) = self.last_axis("log_softmax", a)?;
        let av = self.value(a);
        let mut data = vec![T::zero(); av.numel()];
        for r in 0..rows {
            let row = &av.data()[r * c..(r + 1) * c];
            let m = row.iter().fold(row[0], |m, &v| if v > m { v } else { m });
            let mut sum = T::zero();
            for &v in row {
                sum = sum + (v - m).exp();
            }
            let lse = m + sum.ln();
            for (o, &v) in data[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("log_softmax", out, Op::LogSoftmaxLast(a))
    }

    // ---- linear algebra ----

    /// Affine map over the last axis: `[..., Din] x [Dout, Din] -> [..., Dout]`.
    pub fn linear(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    ) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.rank() == 0 || wv.rank() != 2 {
            return Err(shape_err(
                "linear",
                format!("input rank {} / weight rank {}", xv.rank(), wv.rank()),
            ));
        }
        let din = xv.dim(xv.rank() - 1);
        let (dout, win) = (wv.dim(0), wv.dim(1));
        if din != win {
            return Err(shape_err(
                "linear",
                format!("input last axis {din} vs weight in-axis {win}"),
            ));
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} vs output axis {dout}", bv.shape()),
                ));
            }
        }
        let n = xv.numel() / din;
        let mut data = vec![T::zero(); n * dout];
        {
            let xd = xv.data();
            let wd = wv.data();
            let bd = b.map(|b| self.value(b).data());
            for r in 0..n {
                let xrow = &xd[r * din..(r + 1) * din];
                let orow = &mut data[r * dout..(r + 1) * dout];
                for (o, out) in orow.iter_mut().enumerate() {
                    let wrow = &wd[o * din..(o + 1) * din];
                    let mut acc = match bd {
                        Some(bd) => bd[o],
                        None => T::zero(),
                    };
                    for i in 0..din {
                        acc = acc + xrow[i] * wrow[i];
                    }
                    *out = acc;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(shape, data)?;
        self.push("linear", out, Op::Linear { x, w, b })
    }

    /// Plain 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(shape_err(
                "matmul",
                format!("ranks {} and {}, both must be 2", av.rank(), bv.rank()),
            ));
        }
        let (m, k) = (av.dim(0), av.dim(1));
        let (k2, n) = (bv.dim(0), bv.dim(1));
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner axes {k} vs {k2}"),
            ));
        }
        let mut data = vec![T::zero(); m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            for kk in 0..k {
                let aik = ad[i * k + kk];
                let brow = &bd[kk * n..(kk + 1) * n];
                let orow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + aik * brow[j];
                }
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    /// 2-D cross-correlation: `[B,Cin,H,W] * [Cout,Cin,kh,kw] -> [B,Cout,H',W']`
    /// with `H' = (H + 2·padding − kh)/stride + 1`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 4 || wv.rank() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("input rank {} / weight rank {}, both must be 4", xv.rank(), wv.rank()),
            ));
        }
        let (bs, cin, h, wdt) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (cout, wcin, kh, kw) = (wv.dim(0), wv.dim(1), wv.dim(2), wv.dim(3));
        if cin != wcin {
            return Err(shape_err(
                "conv2d",
                format!("input channels {cin} (axis 1) vs weight channels {wcin} (axis 1)"),
            ));
        }
        if bv.shape() != [cout] {
            return Err(shape_err(
                "conv2d",
                format!("bias {:?} vs out channels {cout}", bv.shape()),
            ));
        }
        if kh > h + 2 * padding || kw > wdt + 2 * padding {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, wdt + 2 * padding),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive".into()));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wdt + 2 * padding - kw) / stride + 1;
        let mut data = vec![T::zero(); bs * cout * oh * ow];
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        for bi in 0..bs {
            for co in 0..cout {
                let bias = bd[co];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias;
                        for ci in 0..cin {
                            let xbase = ((bi * cin + ci) * h) * wdt;
                            let wbase = ((co * cin + ci) * kh) * kw;
                            for ky in 0..kh {
                                let iy = (oy * stride + ky).wrapping_sub(padding);
                                if iy >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx).wrapping_sub(padding);
                                    if ix >= wdt {
                                        continue;
                                    }
                                    acc = acc + xd[xbase + iy * wdt + ix] * wd[wbase + ky * kw + kx];
                                }
                            }
                        }
                        data[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let out = Tensor::new(vec![bs, cout, oh, ow], data)?;
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        )
    }

    /// Train-mode batch norm over `[B,C,H,W]`: normalizes each channel by its
    /// batch mean/variance (biased). Returns the node plus the batch stats so
    /// the caller can maintain running statistics for eval mode.
    pub fn batch_norm2d_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<(NodeId, BatchStats<T>), TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        if xv.rank() != 4 {
            return Err(shape_err("batch_norm2d", format!("input rank {}, must be 4", xv.rank())));
        }
        let (bs, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(shape_err(
                "batch_norm2d",
                format!("gamma {:?} / beta {:?} vs channels {c}", gv.shape(), bv.shape()),
            ));
        }
        let m = bs * h * w;
        if m == 0 {
            return Err(shape_err("batch_norm2d", "empty batch".into()));
        }
        let minv = T::one() / T::from_f64(m as f64);
        let plane = h * w;
        let xd = xv.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut sum = T::zero();
            for bi in 0..bs {
                let base = (bi * c + ci) * plane;
                for &v in &xd[base..base + plane] {
                    sum = sum + v;
                }
            }
            let mu = sum * minv;
            let mut sq = T::zero();
            for bi in 0..bs {
                let base = (bi * c + ci) * plane;
                for &v in &xd[base..base + plane] {
                    let d = v - mu;
                    sq = sq + d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = sq * minv;
        }
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut data = vec![T::zero(); xd.len()];
        let (gd, bd) = (gv.data(), bv.data());
        for bi in 0..bs {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let (mu, rs, g, be) = (mean[ci], rstd[ci], gd[ci], bd[ci]);
                for (o, &v) in data[base..base + plane].iter_mut().zip(&xd[base..base + plane]) {
                    *o = (v - mu) * rs * g + be;
                }
            }
        }
        let stats = BatchStats {
            mean: mean.clone(),
            var,
        };
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let id = self.push(
            "batch_norm2d",
            out,
            Op::BatchNorm2dTrain {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        )?;
        Ok((id, stats))
    }

    /// Eval-mode batch norm: normalizes with the provided running statistics.
    pub fn batch_norm2d_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<NodeId, TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        if xv.rank() != 4 {
            return Err(shape_err("batch_norm2d", format!("input rank {}, must be 4", xv.rank())));
        }
        let (bs, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        if gv.shape() != [c] || bv.shape() != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(shape_err(
                "batch_norm2d",
                format!(
                    "gamma {:?} / beta {:?} / stats {}/{} vs channels {c}",
                    gv.shape(),
                    bv.shape(),
                    running_mean.len(),
                    running_var.len()
                ),
            ));
        }
        let plane = h * w;
        let rstd: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let xd = xv.data();
        let (gd, bd) = (gv.data(), bv.data());
        let mut data = vec![T::zero(); xd.len()];
        for bi in 0..bs {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let (mu, rs, g, be) = (running_mean[ci], rstd[ci], gd[ci], bd[ci]);
                for (o, &v) in data[base..base + plane].iter_mut().zip(&xd[base..base + plane]) {
                    *o = (v - mu) * rs * g + be;
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(
            "batch_norm2d",
            out,
            Op::BatchNorm2dEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                rstd,
            },
        )
    }

    /// Layer norm over the last axis with learned gain/shift of width C.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<NodeId, TensorError> {
        let (rows, c) = self.last_axis("layer_norm", x)?;
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(shape_err(
                "layer_norm",
                format!("gamma {:?} / beta {:?} vs last axis {c}", gv.shape(), bv.shape()),
            ));
        }
        let cinv = T::one() / T::from_f64(c as f64);
        let xd = xv.data();
        let (gd, bd) = (gv.data(), bv.data());
        let mut mean = vec![T::zero(); rows];
        let mut rstd = vec![T::zero(); rows];
        let mut data = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mut sum = T::zero();
            for &v in row {
                sum = sum + v;
            }
            let mu = sum * cinv;
            let mut sq = T::zero();
            for &v in row {
                let d = v - mu;
                sq = sq + d * d;
            }
            let rs = T::one() / (sq * cinv + eps).sqrt();
            mean[r] = mu;
            rstd[r] = rs;
            for i in 0..c {
                data[r * c + i] = (row[i] - mu) * rs * gd[i] + bd[i];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        )
    }

    /// Causal per-channel 1-D convolution on `[B,D,L]` with kernel `[D,k]`:
    /// left-pads k−1 zeros so position t sees only inputs ≤ t.
    pub fn depthwise_conv1d_causal(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 3 || wv.rank() != 2 {
            return Err(shape_err(
                "depthwise_conv1d",
                format!("input rank {} / weight rank {}", xv.rank(), wv.rank()),
            ));
        }
        let (bs, d, l) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let (wd_ch, k) = (wv.dim(0), wv.dim(1));
        if wd_ch != d || bv.shape() != [d] {
            return Err(shape_err(
                "depthwise_conv1d",
                format!("channels {d} vs weight {wd_ch} / bias {:?}", bv.shape()),
            ));
        }
        if k == 0 {
            return Err(shape_err("depthwise_conv1d", "kernel must be non-empty".into()));
        }
        let xd = xv.data();
        let (wdat, bd) = (wv.data(), bv.data());
        let mut data = vec![T::zero(); xd.len()];
        for bi in 0..bs {
            for di in 0..d {
                let base = (bi * d + di) * l;
                let xrow = &xd[base..base + l];
                let orow = &mut data[base..base + l];
                let bias = bd[di];
                for o in orow.iter_mut() {
                    *o = bias;
                }
                for ki in 0..k {
                    let wv = wdat[di * k + ki];
                    let shift = k - 1 - ki; // receptive offset into the past
                    for t in shift..l {
                        orow[t] = orow[t] + wv * xrow[t - shift];
                    }
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("depthwise_conv1d", out, Op::DepthwiseConv1dCausal { x, w, b })
    }

    // ---- data movement ----

    /// Swaps axes 1 and 2 of a rank-3 tensor.
    pub fn transpose12(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(shape_err("transpose12", format!("rank {}, must be 3", xv.rank())));
        }
        let (b, p, q) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let xd = xv.data();
        let mut data = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for pi in 0..p {
                for qi in 0..q {
                    data[(bi * q + qi) * p + pi] = xd[(bi * p + pi) * q + qi];
                }
            }
        }
        let out = Tensor::new(vec![b, q, p], data)?;
        self.push("transpose12", out, Op::Transpose12(x))
    }

    /// `[B,C,H,W] -> [B,H·W,C]` with tokens in row-major (H,W) order.
    pub fn flatten_transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(shape_err("flatten_transpose", format!("rank {}, must be 4", xv.rank())));
        }
        let (b, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let n = h * w;
        let xd = xv.data();
        let mut data = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let src = (bi * c + ci) * n;
                for t in 0..n {
                    data[(bi * n + t) * c + ci] = xd[src + t];
                }
            }
        }
        let out = Tensor::new(vec![b, n, c], data)?;
        self.push("flatten_transpose", out, Op::FlattenTranspose(x))
    }

    /// Inverse of [`Tape::flatten_transpose`]: `[B,H·W,C] -> [B,C,H,W]`.
    pub fn unflatten_transpose(
        &mut self,
        x: NodeId,
        h: usize,
        w: usize,
    ) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        if xv.rank() != 3 || xv.dim(1) != h * w {
            return Err(shape_err(
                "unflatten_transpose",
                format!("shape {:?} vs target {h}x{w}", xv.shape()),
            ));
        }
        let (b, n, c) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let xd = xv.data();
        let mut data = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for t in 0..n {
                for ci in 0..c {
                    data[(bi * c + ci) * n + t] = xd[(bi * n + t) * c + ci];
                }
            }
        }
        let out = Tensor::new(vec![b, c, h, w], data)?;
        self.push("unflatten_transpose", out, Op::UnflattenTranspose(x))
    }

    /// Mean over the token axis: `[B,N,C] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(shape_err("global_avg_pool", format!("rank {}, must be 3", xv.rank())));
        }
        let (b, n, c) = (xv.dim(0), xv.dim(1), xv.dim(2));
        if n == 0 {
            return Err(shape_err("global_avg_pool", "empty token axis".into()));
        }
        let ninv = T::one() / T::from_f64(n as f64);
        let xd = xv.data();
        let mut data = vec![T::zero(); b * c];
        for bi in 0..b {
            let orow = &mut data[bi * c..(bi + 1) * c];
            for t in 0..n {
                let row = &xd[(bi * n + t) * c..(bi * n + t + 1) * c];
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o = *o + v;
                }
            }
            for o in orow.iter_mut() {
                *o = *o * ninv;
            }
        }
        let out = Tensor::new(vec![b, c], data)?;
        self.push("global_avg_pool", out, Op::GlobalAvgPool(x))
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn narrow_last(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(shape_err("narrow_last", "input must have at least 1 axis".into()));
        }
        let c = xv.dim(xv.rank() - 1);
        if start + len > c {
            return Err(shape_err(
                "narrow_last",
                format!("range {start}..{} exceeds last axis {c}", start + len),
            ));
        }
        let rows = xv.numel() / c;
        let xd = xv.data();
        let mut data = vec![T::zero(); rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&xd[r * c + start..r * c + start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, data)?;
        self.push("narrow_last", out, Op::NarrowLast { x, start })
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        let mut acc = T::zero();
        for &v in xv.data() {
            acc = acc + v;
        }
        self.push("sum_all", Tensor::scalar(acc), Op::SumAll(x))
    }

    // ---- selective-scan recurrence ----

    /// Input-dependent linear recurrence over the token axis.
    ///
    /// Shapes: `x`,`delta` `[B,L,D]`; `b_in`,`c_in` `[B,L,N]`; `a` `[D,N]`;
    /// `d_skip` `[D]`. For each batch, channel d and state n:
    ///
    /// ```text
    /// h_t = exp(delta_t·a_dn)·h_{t-1} + delta_t·b_tn·x_td     (h_0 = 0)
    /// y_td = sum_n c_tn·h_t + d_skip_d·x_td
    /// ```
    ///
    /// This is the discretized state-space step: `exp(Δ·A)` is the zero-order
    /// hold of the state matrix and `Δ·B` its input map. The backward pass
    /// recomputes the hidden states channel by channel instead of storing
    /// them, keeping tape memory proportional to the activations.
    pub fn ssm_scan(
        &mut self,
        x: NodeId,
        delta: NodeId,
        b_in: NodeId,
        c_in: NodeId,
        a: NodeId,
        d_skip: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (xv, dv) = (self.value(x), self.value(delta));
        let (biv, civ) = (self.value(b_in), self.value(c_in));
        let (av, dsv) = (self.value(a), self.value(d_skip));
        if xv.rank() != 3 {
            return Err(shape_err("ssm_scan", format!("x rank {}, must be 3", xv.rank())));
        }
        let (bs, l, d) = (xv.dim(0), xv.dim(1), xv.dim(2));
        if dv.shape() != [bs, l, d] {
            return Err(shape_err(
                "ssm_scan",
                format!("delta {:?} vs x {:?}", dv.shape(), xv.shape()),
            ));
        }
        if biv.rank() != 3 || biv.dim(0) != bs || biv.dim(1) != l {
            return Err(shape_err(
                "ssm_scan",
                format!("b {:?} vs batch/tokens {bs}x{l}", biv.shape()),
            ));
        }
        let n = biv.dim(2);
        if civ.shape() != [bs, l, n] {
            return Err(shape_err(
                "ssm_scan",
                format!("c {:?} vs b {:?}", civ.shape(), biv.shape()),
            ));
        }
        if av.shape() != [d, n] || dsv.shape() != [d] {
            return Err(shape_err(
                "ssm_scan",
                format!("a {:?} / d_skip {:?} vs [{d},{n}] / [{d}]", av.shape(), dsv.shape()),
            ));
        }
        let dims = kernel::ScanDims {
            batch: bs,
            len: l,
            d_inner: d,
            d_state: n,
        };
        let y = kernel::scan_forward(
            xv.data(),
            dv.data(),
            biv.data(),
            civ.data(),
            av.data(),
            dsv.data(),
            dims,
        );
        #[cfg(debug_assertions)]
        for bi in 0..bs {
            for t in 0..l {
                let row = &y[(bi * l + t) * d..(bi * l + t + 1) * d];
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite {
                        op: "ssm_scan",
                        detail: format!("batch {bi}, token {t}"),
                    });
                }
            }
        }
        let out = Tensor::new(vec![bs, l, d], y)?;
        self.push(
            "ssm_scan",
            out,
            Op::SsmScan {
                x,
                delta,
                b_in,
                c_in,
                a,
                d_skip,
            },
        )
    }

    // ---- reverse sweep ----

    /// Accumulates d(root)/d(node) for every tracked node by replaying the
    /// record in reverse. `root` must be scalar; the tape is consumed.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        self.consumed = true;
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: root_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = self
            .nodes
            .iter()
            .map(|n| {
                if n.tracked {
                    Some(vec![T::zero(); n.value.numel()])
                } else {
                    None
                }
            })
            .collect();
        if let Some(g) = grads[root.0].as_mut() {
            g[0] = T::one();
        }
        for i in (0..=root.0).rev() {
            // Interior gradients are moved out once processed (nothing earlier
            // in the record can add to them), releasing memory as we go.
            let g = match &self.nodes[i].op {
                Op::Leaf | Op::Constant => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.apply_backward(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| Tensor {
                    shape: self.nodes[i].value.shape().to_vec(),
                    data: g,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn apply_backward(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        // Adds `contrib` into the gradient buffer of `id`, skipping constants.
        macro_rules! acc {
            ($id:expr, $f:expr) => {
                if let Some(gbuf) = grads[$id.0].as_mut() {
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(gbuf.as_mut_slice());
                }
            };
        }
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc!(a, |ga: &mut [T]| for (o, &gv) in ga.iter_mut().zip(g) {
                    *o = *o + gv;
                });
                acc!(b, |gb: &mut [T]| for (o, &gv) in gb.iter_mut().zip(g) {
                    *o = *o + gv;
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc!(a, |ga: &mut [T]| {
                    for ((o, &gv), &bvv) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *o = *o + gv * bvv;
                    }
                });
                acc!(b, |gb: &mut [T]| {
                    for ((o, &gv), &avv) in gb.iter_mut().zip(g).zip(av.data()) {
                        *o = *o + gv * avv;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc!(a, |ga: &mut [T]| for (o, &gv) in ga.iter_mut().zip(g) {
                    *o = *o + gv * c;
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc!(a, |ga: &mut [T]| {
                    for ((o, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *o = *o + gv * yv;
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc!(a, |ga: &mut [T]| {
                    for ((o, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                        *o = *o + gv * gelu_deriv(xv);
                    }
                });
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                acc!(a, |ga: &mut [T]| {
                    for ((o, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                        let s = sigmoid(xv);
                        *o = *o + gv * (s * (T::one() + xv * (T::one() - s)));
                    }
                });
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                acc!(a, |ga: &mut [T]| {
                    for ((o, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                        *o = *o + gv * sigmoid(xv);
                    }
                });
            }
            Op::SoftmaxLast(a) => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap();
                let rows = y.len() / c;
                acc!(a, |ga: &mut [T]| {
                    for r in 0..rows {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let mut dot = T::zero();
                        for i in 0..c {
                            dot = dot + gr[i] * yr[i];
                        }
                        let gar = &mut ga[r * c..(r + 1) * c];
                        for i in 0..c {
                            gar[i] = gar[i] + yr[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxLast(a) => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap();
                let rows = y.len() / c;
                acc!(a, |ga: &mut [T]| {
                    for r in 0..rows {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let mut gsum = T::zero();
                        for i in 0..c {
                            gsum = gsum + gr[i];
                        }
                        let gar = &mut ga[r * c..(r + 1) * c];
                        for i in 0..c {
                            gar[i] = gar[i] + gr[i] - yr[i].exp() * gsum;
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let din = wv.dim(1);
                let dout = wv.dim(0);
                let n = xv.numel() / din;
                let (xd, wd) = (xv.data(), wv.data());
                acc!(x, |gx: &mut [T]| {
                    for r in 0..n {
                        let grow = &g[r * dout..(r + 1) * dout];
                        let gxrow = &mut gx[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let gv = grow[o];
                            let wrow = &wd[o * din..(o + 1) * din];
                            for i in 0..din {
                                gxrow[i] = gxrow[i] + gv * wrow[i];
                            }
                        }
                    }
                });
                acc!(w, |gw: &mut [T]| {
                    for r in 0..n {
                        let xrow = &xd[r * din..(r + 1) * din];
                        let grow = &g[r * dout..(r + 1) * dout];
                        for o in 0..dout {
                            let gv = grow[o];
                            let gwrow = &mut gw[o * din..(o + 1) * din];
                            for i in 0..din {
                                gwrow[i] = gwrow[i] + gv * xrow[i];
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc!(b, |gb: &mut [T]| {
                        for r in 0..n {
                            let grow = &g[r * dout..(r + 1) * dout];
                            for o in 0..dout {
                                gb[o] = gb[o] + grow[o];
                            }
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.dim(0), av.dim(1));
                let nn = bv.dim(1);
                let (ad, bd) = (av.data(), bv.data());
                acc!(a, |ga: &mut [T]| {
                    // ga = g · bᵀ
                    for i in 0..m {
                        let grow = &g[i * nn..(i + 1) * nn];
                        let garow = &mut ga[i * k..(i + 1) * k];
                        for kk in 0..k {
                            let brow = &bd[kk * nn..(kk + 1) * nn];
                            let mut acc = T::zero();
                            for j in 0..nn {
                                acc = acc + grow[j] * brow[j];
                            }
                            garow[kk] = garow[kk] + acc;
                        }
                    }
                });
                acc!(b, |gb: &mut [T]| {
                    // gb = aᵀ · g
                    for i in 0..m {
                        let grow = &g[i * nn..(i + 1) * nn];
                        for kk in 0..k {
                            let aik = ad[i * k + kk];
                            let gbrow = &mut gb[kk * nn..(kk + 1) * nn];
                            for j in 0..nn {
                                gbrow[j] = gbrow[j] + aik * grow[j];
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (stride, padding) = (*stride, *padding);
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (bs, cin, h, wdt) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
                let (cout, _, kh, kw) = (wv.dim(0), wv.dim(1), wv.dim(2), wv.dim(3));
                let (oh, ow) = (node.value.dim(2), node.value.dim(3));
                let (xd, wd) = (xv.data(), wv.data());
                // Single pass over output positions, scattering into whichever
                // inputs are tracked.
                let mut gx = grads[x.0].take();
                let mut gw = grads[w.0].take();
                let mut gb = grads[b.0].take();
                for bi in 0..bs {
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[((bi * cout + co) * oh + oy) * ow + ox];
                                if let Some(gb) = gb.as_mut() {
                                    gb[co] = gb[co] + gv;
                                }
                                if gx.is_none() && gw.is_none() {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xbase = ((bi * cin + ci) * h) * wdt;
                                    let wbase = ((co * cin + ci) * kh) * kw;
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky).wrapping_sub(padding);
                                        if iy >= h {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx).wrapping_sub(padding);
                                            if ix >= wdt {
                                                continue;
                                            }
                                            if let Some(gx) = gx.as_mut() {
                                                gx[xbase + iy * wdt + ix] = gx[xbase + iy * wdt + ix]
                                                    + gv * wd[wbase + ky * kw + kx];
                                            }
                                            if let Some(gw) = gw.as_mut() {
                                                gw[wbase + ky * kw + kx] = gw[wbase + ky * kw + kx]
                                                    + gv * xd[xbase + iy * wdt + ix];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                grads[x.0] = gx;
                grads[w.0] = gw;
                grads[b.0] = gb;
            }
            Op::BatchNorm2dTrain {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let (bs, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
                let plane = h * w;
                let m = bs * plane;
                let minv = T::one() / T::from_f64(m as f64);
                let xd = xv.data();
                let gd = gv.data();
                for ci in 0..c {
                    let (mu, rs) = (mean[ci], rstd[ci]);
                    // Channel-wise reductions of g and g·x̂.
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for bi in 0..bs {
                        let base = (bi * c + ci) * plane;
                        for j in 0..plane {
                            let gvv = g[base + j];
                            sum_g = sum_g + gvv;
                            sum_gx = sum_gx + gvv * (xd[base + j] - mu) * rs;
                        }
                    }
                    if let Some(gbeta) = grads[beta.0].as_mut() {
                        gbeta[ci] = gbeta[ci] + sum_g;
                    }
                    if let Some(ggamma) = grads[gamma.0].as_mut() {
                        ggamma[ci] = ggamma[ci] + sum_gx;
                    }
                    if let Some(gx) = grads[x.0].as_mut() {
                        let mg = sum_g * minv;
                        let mgx = sum_gx * minv;
                        let gscale = gd[ci] * rs;
                        for bi in 0..bs {
                            let base = (bi * c + ci) * plane;
                            for j in 0..plane {
                                let xhat = (xd[base + j] - mu) * rs;
                                gx[base + j] =
                                    gx[base + j] + gscale * (g[base + j] - mg - xhat * mgx);
                            }
                        }
                    }
                }
            }
            Op::BatchNorm2dEval {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let (bs, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
                let plane = h * w;
                let xd = xv.data();
                let gd = gv.data();
                for ci in 0..c {
                    let (mu, rs) = (mean[ci], rstd[ci]);
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for bi in 0..bs {
                        let base = (bi * c + ci) * plane;
                        for j in 0..plane {
                            let gvv = g[base + j];
                            sum_g = sum_g + gvv;
                            sum_gx = sum_gx + gvv * (xd[base + j] - mu) * rs;
                        }
                    }
                    if let Some(gbeta) = grads[beta.0].as_mut() {
                        gbeta[ci] = gbeta[ci] + sum_g;
                    }
                    if let Some(ggamma) = grads[gamma.0].as_mut() {
                        ggamma[ci] = ggamma[ci] + sum_gx;
                    }
                    if let Some(gx) = grads[x.0].as_mut() {
                        let gscale = gd[ci] * rs;
                        for bi in 0..bs {
                            let base = (bi * c + ci) * plane;
                            for j in 0..plane {
                                gx[base + j] = gx[base + j] + gscale * g[base + j];
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let c = *xv.shape().last().unwrap();
                let rows = xv.numel() / c;
                let cinv = T::one() / T::from_f64(c as f64);
                let xd = xv.data();
                let gd = gv.data();
                for r in 0..rows {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let xrow = &xd[r * c..(r + 1) * c];
                    let grow = &g[r * c..(r + 1) * c];
                    let mut sum_gh = T::zero();
                    let mut sum_ghx = T::zero();
                    for i in 0..c {
                        let gh = grow[i] * gd[i];
                        let xhat = (xrow[i] - mu) * rs;
                        sum_gh = sum_gh + gh;
                        sum_ghx = sum_ghx + gh * xhat;
                    }
                    if let Some(ggamma) = grads[gamma.0].as_mut() {
                        for i in 0..c {
                            ggamma[i] = ggamma[i] + grow[i] * (xrow[i] - mu) * rs;
                        }
                    }
                    if let Some(gbeta) = grads[beta.0].as_mut() {
                        for i in 0..c {
                            gbeta[i] = gbeta[i] + grow[i];
                        }
                    }
                    if let Some(gx) = grads[x.0].as_mut() {
                        let mg = sum_gh * cinv;
                        let mgx = sum_ghx * cinv;
                        let gxrow = &mut gx[r * c..(r + 1) * c];
                        for i in 0..c {
                            let gh = grow[i] * gd[i];
                            let xhat = (xrow[i] - mu) * rs;
                            gxrow[i] = gxrow[i] + rs * (gh - mg - xhat * mgx);
                        }
                    }
                }
            }
            Op::DepthwiseConv1dCausal { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (bs, d, l) = (xv.dim(0), xv.dim(1), xv.dim(2));
                let k = wv.dim(1);
                let (xd, wd) = (xv.data(), wv.data());
                let mut gx = grads[x.0].take();
                let mut gw = grads[w.0].take();
                let mut gb = grads[b.0].take();
                for bi in 0..bs {
                    for di in 0..d {
                        let base = (bi * d + di) * l;
                        let grow = &g[base..base + l];
                        if let Some(gb) = gb.as_mut() {
                            let mut acc = T::zero();
                            for &gv in grow {
                                acc = acc + gv;
                            }
                            gb[di] = gb[di] + acc;
                        }
                        for ki in 0..k {
                            let shift = k - 1 - ki;
                            if let Some(gx) = gx.as_mut() {
                                let wvv = wd[di * k + ki];
                                let gxrow = &mut gx[base..base + l];
                                for t in shift..l {
                                    gxrow[t - shift] = gxrow[t - shift] + grow[t] * wvv;
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                let xrow = &xd[base..base + l];
                                let mut acc = T::zero();
                                for t in shift..l {
                                    acc = acc + grow[t] * xrow[t - shift];
                                }
                                gw[di * k + ki] = gw[di * k + ki] + acc;
                            }
                        }
                    }
                }
                grads[x.0] = gx;
                grads[w.0] = gw;
                grads[b.0] = gb;
            }
            Op::Transpose12(a) => {
                let (b, q, p) = (node.value.dim(0), node.value.dim(1), node.value.dim(2));
                acc!(a, |ga: &mut [T]| {
                    for bi in 0..b {
                        for qi in 0..q {
                            for pi in 0..p {
                                ga[(bi * p + pi) * q + qi] =
                                    ga[(bi * p + pi) * q + qi] + g[(bi * q + qi) * p + pi];
                            }
                        }
                    }
                });
            }
            Op::FlattenTranspose(a) => {
                let (b, n, c) = (node.value.dim(0), node.value.dim(1), node.value.dim(2));
                acc!(a, |ga: &mut [T]| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let dst = (bi * c + ci) * n;
                            for t in 0..n {
                                ga[dst + t] = ga[dst + t] + g[(bi * n + t) * c + ci];
                            }
                        }
                    }
                });
            }
            Op::UnflattenTranspose(a) => {
                let (b, c, h, w) = (
                    node.value.dim(0),
                    node.value.dim(1),
                    node.value.dim(2),
                    node.value.dim(3),
                );
                let n = h * w;
                acc!(a, |ga: &mut [T]| {
                    for bi in 0..b {
                        for t in 0..n {
                            for ci in 0..c {
                                ga[(bi * n + t) * c + ci] =
                                    ga[(bi * n + t) * c + ci] + g[(bi * c + ci) * n + t];
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(a) => {
                let av = self.value(*a);
                let (b, n, c) = (av.dim(0), av.dim(1), av.dim(2));
                let ninv = T::one() / T::from_f64(n as f64);
                acc!(a, |ga: &mut [T]| {
                    for bi in 0..b {
                        let grow = &g[bi * c..(bi + 1) * c];
                        for t in 0..n {
                            let garow = &mut ga[(bi * n + t) * c..(bi * n + t + 1) * c];
                            for i in 0..c {
                                garow[i] = garow[i] + grow[i] * ninv;
                            }
                        }
                    }
                });
            }
            Op::NarrowLast { x, start } => {
                let start = *start;
                let xv = self.value(*x);
                let c = *xv.shape().last().unwrap();
                let len = *node.value.shape().last().unwrap();
                let rows = xv.numel() / c;
                acc!(x, |gx: &mut [T]| {
                    for r in 0..rows {
                        let grow = &g[r * len..(r + 1) * len];
                        let gxrow = &mut gx[r * c + start..r * c + start + len];
                        for i in 0..len {
                            gxrow[i] = gxrow[i] + grow[i];
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g[0];
                acc!(a, |ga: &mut [T]| for o in ga.iter_mut() {
                    *o = *o + gv;
                });
            }
            Op::SsmScan {
                x,
                delta,
                b_in,
                c_in,
                a,
                d_skip,
            } => {
                let xv = self.value(*x);
                let dims = kernel::ScanDims {
                    batch: xv.dim(0),
                    len: xv.dim(1),
                    d_inner: xv.dim(2),
                    d_state: self.value(*b_in).dim(2),
                };
                let out = kernel::scan_backward(
                    xv.data(),
                    self.value(*delta).data(),
                    self.value(*b_in).data(),
                    self.value(*c_in).data(),
                    self.value(*a).data(),
                    self.value(*d_skip).data(),
                    g,
                    dims,
                );
                acc!(x, |gx: &mut [T]| for (o, &v) in gx.iter_mut().zip(&out.gx) {
                    *o = *o + v;
                });
                acc!(delta, |gd: &mut [T]| for (o, &v) in
                    gd.iter_mut().zip(&out.gdelta)
                {
                    *o = *o + v;
                });
                acc!(b_in, |gb: &mut [T]| for (o, &v) in gb.iter_mut().zip(&out.gb) {
                    *o = *o + v;
                });
                acc!(c_in, |gc: &mut [T]| for (o, &v) in gc.iter_mut().zip(&out.gc) {
                    *o = *o + v;
                });
                acc!(a, |ga: &mut [T]| for (o, &v) in ga.iter_mut().zip(&out.ga) {
                    *o = *o + v;
                });
                acc!(d_skip, |gd: &mut [T]| for (o, &v) in
                    gd.iter_mut().zip(&out.gd_skip)
                {
                    *o = *o + v;
                });
            }
        }
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}
