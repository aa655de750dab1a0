//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! creation order, which is a valid topological order. [`Graph::backward`]
//! replays the tape once in reverse. Gradients reaching leaves (inputs created
//! with [`Graph::leaf`] or [`Graph::param`]) accumulate across calls until
//! [`Graph::zero_grad`]; constants never receive gradient.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::params::ModelParams;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour and, by extension, the behaviour of whole networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size `ceil(in / stride)`.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Identifies a parameter tensor: `slot` distinguishes parameter sets that
/// share one graph (e.g. encoder and projection head), `index` is the
/// position inside that [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamKey {
    pub slot: u8,
    pub index: usize,
}

/// Per-channel batch statistics produced by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance, the quantity folded into running estimates.
    pub var: Vec<f32>,
}

/// Statistics source for [`Graph::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum BnStats<'a> {
    Batch,
    Running { mean: &'a [f32], var: &'a [f32] },
}

pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &[f32]) -> Vec<Option<Vec<f32>>>>;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_t: usize,
    pad_l: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_t == 0 && self.pad_l == 0
    }
}

enum Op {
    Constant,
    Leaf,
    Param(ParamKey),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2x2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch: bool,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f32>,
        eps: f32,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    InfoNce {
        q: Var,
        /// Row-wise softmax over `[positive, negatives...]`.
        probs: Vec<f32>,
        keys: Vec<f32>,
        queue: Vec<f32>,
        negatives: usize,
        tau: f32,
    },
    BceWithLogits {
        z: Var,
        target: Vec<f32>,
        weight: Vec<f32>,
        count: f32,
    },
    Bce {
        p: Var,
        target: Vec<f32>,
        weight: Vec<f32>,
        count: f32,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only leaves and params keep one.
    grad: Option<Vec<f32>>,
}

/// The computation record.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Clamp used by probability-space binary cross-entropy.
pub const BCE_EPS: f32 = 1e-7;

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only: every input is treated as a
    /// constant and no backward state is saved.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, key: ParamKey, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Param(key), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf or parameter, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Add every parameter gradient recorded under `slot` into `params`.
    pub fn accumulate_param_grads(&self, slot: u8, params: &mut ModelParams) {
        for node in &self.nodes {
            if let (Op::Param(key), Some(g)) = (&node.op, &node.grad) {
                if key.slot == slot {
                    let dst = params.grad_mut(key.index).data_mut();
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += *s;
                    }
                }
            }
        }
    }

    // ----------------------------------------------------------------- ops

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, c_in, h, wd) = self.value(x).dims4(OP)?;
        let (c_out, wc_in, kh, kw) = self.value(w).dims4(OP)?;
        if wc_in != c_in {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: "input channels",
                expected: wc_in,
                actual: c_in,
            });
        }
        if let Some(b) = b {
            let bl = self.value(b).numel();
            if bl != c_out {
                return Err(Error::ShapeMismatch {
                    op: OP,
                    axis: "bias length",
                    expected: c_out,
                    actual: bl,
                });
            }
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be >= 1"));
        }
        let (ho, wo, pad_t, pad_l) = match padding {
            Padding::Same => {
                let ho = h.div_ceil(stride);
                let wo = wd.div_ceil(stride);
                let pt = ((ho - 1) * stride + kh).saturating_sub(h) / 2;
                let pl = ((wo - 1) * stride + kw).saturating_sub(wd) / 2;
                (ho, wo, pt, pl)
            }
            Padding::Valid => {
                if h < kh || wd < kw {
                    return Err(Error::ShapeMismatch {
                        op: OP,
                        axis: "spatial extent vs kernel",
                        expected: kh.max(kw),
                        actual: h.min(wd),
                    });
                }
                ((h - kh) / stride + 1, (wd - kw) / stride + 1, 0, 0)
            }
        };
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad_t,
            pad_l,
            ho,
            wo,
        };
        let out = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(&[n, c_out, ho, wo], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Transposed convolution with a 2x2 kernel and stride 2; `w` is laid
    /// out `in x out x 2 x 2`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let (n, c_in, h, wd) = self.value(x).dims4(OP)?;
        let (wc_in, c_out, kh, kw) = self.value(w).dims4(OP)?;
        if wc_in != c_in {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: "input channels",
                expected: wc_in,
                actual: c_in,
            });
        }
        if kh != 2 || kw != 2 {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: "kernel size",
                expected: 2,
                actual: if kh != 2 { kh } else { kw },
            });
        }
        if let Some(b) = b {
            let bl = self.value(b).numel();
            if bl != c_out {
                return Err(Error::ShapeMismatch {
                    op: OP,
                    axis: "bias length",
                    expected: c_out,
                    actual: bl,
                });
            }
        }
        let hw = h * wd;
        let o4 = c_out * 4;
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let mut out = vec![0.0f32; n * c_out * 4 * hw];
        let mut tmp = vec![0.0f32; o4 * hw];
        for img in 0..n {
            let xi = &xd[img * c_in * hw..(img + 1) * c_in * hw];
            gemm(
                o4,
                c_in,
                hw,
                MatRef::transposed(wdata, o4),
                MatRef::row_major(xi, hw),
                0.0,
                &mut tmp,
            );
            let oi = &mut out[img * c_out * 4 * hw..(img + 1) * c_out * 4 * hw];
            let w2 = 2 * wd;
            for o in 0..c_out {
                let bias = b.map_or(0.0, |b| self.value(b).data()[o]);
                let plane = &mut oi[o * 4 * hw..(o + 1) * 4 * hw];
                for a in 0..2 {
                    for bb in 0..2 {
                        let src = &tmp[(o * 4 + a * 2 + bb) * hw..(o * 4 + a * 2 + bb + 1) * hw];
                        for i in 0..h {
                            let row = &mut plane[(2 * i + a) * w2..(2 * i + a + 1) * w2];
                            for j in 0..wd {
                                row[2 * j + bb] = src[i * wd + j] + bias;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[n, c_out, 2 * h, 2 * wd], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::ConvTranspose2x2 { x, w, b }, rg))
    }

    /// 2x2 max pooling with stride 2. Ties go to the first element in
    /// row-major order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "maxpool2";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::OddSpatial {
                op: OP,
                height: h,
                width: w,
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; n * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let base = 2 * i * w + 2 * j;
                    let cand = [base, base + 1, base + w, base + w + 1];
                    let mut best = cand[0];
                    for &k in &cand[1..] {
                        if src[k] > src[best] {
                            best = k;
                        }
                    }
                    let o = plane * ho * wo + i * wo + j;
                    out[o] = src[best];
                    argmax[o] = (plane * h * w + best) as u32;
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        let rg = self.rg(x);
        let argmax = if rg && self.grad_enabled { argmax } else { Vec::new() };
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Per-channel batch normalisation of an NCHW tensor. In
    /// [`BnStats::Batch`] mode the batch statistics are returned so the
    /// caller can fold them into its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
        eps: f32,
    ) -> Result<(Var, Option<BatchStats>)> {
        const OP: &str = "batchnorm";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        for (v, axis) in [(gamma, "gamma length"), (beta, "beta length")] {
            let len = self.value(v).numel();
            if len != c {
                return Err(Error::ShapeMismatch {
                    op: OP,
                    axis,
                    expected: c,
                    actual: len,
                });
            }
        }
        let hw = h * w;
        let m = n * hw;
        let xd = self.value(x).data();
        let (mean, var_biased, batch_out) = match stats {
            BnStats::Batch => {
                if m < 2 {
                    return Err(Error::invalid("batchnorm: train mode needs N*H*W >= 2 per channel"));
                }
                let mut mean = vec![0.0f32; c];
                let mut var_b = vec![0.0f32; c];
                let mut var_u = vec![0.0f32; c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for img in 0..n {
                        let base = (img * c + ch) * hw;
                        s += xd[base..base + hw].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut ss = 0.0f64;
                    for img in 0..n {
                        let base = (img * c + ch) * hw;
                        ss += xd[base..base + hw]
                            .iter()
                            .map(|&v| {
                                let d = v as f64 - mu;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    mean[ch] = mu as f32;
                    var_b[ch] = (ss / m as f64) as f32;
                    var_u[ch] = (ss / (m - 1) as f64) as f32;
                }
                let bs = BatchStats {
                    mean: mean.clone(),
                    var: var_u,
                };
                (mean, var_b, Some(bs))
            }
            BnStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::ShapeMismatch {
                        op: OP,
                        axis: "running statistics length",
                        expected: c,
                        actual: mean.len().min(var.len()),
                    });
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f32> = var_biased.iter().map(|&v| 1.0 / libm::sqrtf(v + eps)).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![0.0f32; xd.len()];
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let mut xhat = if rg { vec![0.0f32; xd.len()] } else { Vec::new() };
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                for k in base..base + hw {
                    let xh = (xd[k] - mu) * is;
                    out[k] = ga * xh + be;
                    if rg {
                        xhat[k] = xh;
                    }
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let batch = batch_out.is_some();
        let var = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            },
            rg,
        );
        Ok((var, batch_out))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let rg = self.rg(x);
        match kind {
            Activation::Relu => {
                let value = self.value(x).map(|v| v.max(0.0));
                self.push(value, Op::Relu { x }, rg)
            }
            Activation::Sigmoid => {
                let value = self.value(x).map(sigmoid);
                self.push(value, Op::Sigmoid { x }, rg)
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    /// Mean over the spatial axes: `N x C x H x W -> N x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::invalid("global_avg_pool: empty spatial extent"));
        }
        let xd = self.value(x).data();
        let out: Vec<f32> = (0..n * c)
            .map(|p| (xd[p * hw..(p + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool { x }, rg))
    }

    /// `x (N x D) * w (D x E) + b (E)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let (n, d) = self.value(x).dims2(OP)?;
        let (wd, e) = self.value(w).dims2(OP)?;
        if wd != d {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: "inner dimension",
                expected: wd,
                actual: d,
            });
        }
        if let Some(b) = b {
            let bl = self.value(b).numel();
            if bl != e {
                return Err(Error::ShapeMismatch {
                    op: OP,
                    axis: "bias length",
                    expected: e,
                    actual: bl,
                });
            }
        }
        let mut out = vec![0.0f32; n * e];
        gemm(
            n,
            d,
            e,
            MatRef::row_major(self.value(x).data(), d),
            MatRef::row_major(self.value(w).data(), e),
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(e) {
                for (o, bv) in row.iter_mut().zip(bd) {
                    *o += *bv;
                }
            }
        }
        let value = Tensor::new(&[n, e], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Row-wise `x / max(|x|, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f32) -> Result<Var> {
        let (n, d) = self.value(x).dims2("l2_normalize")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; n * d];
        let mut norms = vec![0.0f32; n];
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let nrm = libm::sqrt(row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()) as f32;
            let nrm = nrm.max(eps);
            norms[r] = nrm;
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v / nrm;
            }
        }
        let value = Tensor::new(&[n, d], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::L2Normalize { x, norms, eps }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    /// Concatenate two NCHW tensors along the channel axis (`a` first).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat";
        let (n, ca, h, w) = self.value(a).dims4(OP)?;
        let (nb, cb, hb, wb) = self.value(b).dims4(OP)?;
        for (axis, e, got) in [("batch", n, nb), ("height", h, hb), ("width", w, wb)] {
            if e != got {
                return Err(Error::ShapeMismatch {
                    op: OP,
                    axis,
                    expected: e,
                    actual: got,
                });
            }
        }
        let hw = h * w;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for img in 0..n {
            out.extend_from_slice(&ad[img * ca * hw..(img + 1) * ca * hw]);
            out.extend_from_slice(&bd[img * cb * hw..(img + 1) * cb * hw]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatChannels { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() as f32;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = (t.sum() / t.numel().max(1) as f64) as f32;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Mean InfoNCE loss of queries `q` (N x D) against their positive keys
    /// (N x D) and a shared set of negatives (`queue`, rows of length D).
    /// Keys and queue are treated as constants; gradient reaches `q` only.
    pub fn info_nce(&mut self, q: Var, keys: &Tensor, queue: &[f32], tau: f32) -> Result<Var> {
        const OP: &str = "info_nce";
        if !(tau > 0.0) {
            return Err(Error::invalid("info_nce: temperature must be > 0"));
        }
        let (n, d) = self.value(q).dims2(OP)?;
        let (kn, kd) = keys.dims2(OP)?;
        if kn != n || kd != d {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: "positive keys",
                expected: n * d,
                actual: kn * kd,
            });
        }
        if d == 0 || queue.len() % d != 0 {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: "queue row length",
                expected: d,
                actual: queue.len(),
            });
        }
        let negatives = queue.len() / d;
        let (loss, probs) = info_nce_forward(self.value(q).data(), keys.data(), queue, n, d, tau);
        let rg = self.rg(q);
        let op = if rg {
            Op::InfoNce {
                q,
                probs,
                keys: keys.data().to_vec(),
                queue: queue.to_vec(),
                negatives,
                tau,
            }
        } else {
            Op::Constant
        };
        Ok(self.push(Tensor::scalar(loss as f32), op, rg))
    }

    /// Binary cross-entropy on logits, averaged over pixels with non-zero
    /// `weight` (e.g. a field-of-view mask).
    pub fn bce_with_logits(&mut self, z: Var, target: &[f32], weight: &[f32]) -> Result<Var> {
        let zd = self.value(z).data();
        check_len("bce_with_logits", zd.len(), target.len(), weight.len())?;
        let count = weight.iter().filter(|&&w| w != 0.0).count();
        if count == 0 {
            return Err(Error::EmptyFov("segmentation_loss"));
        }
        let mut s = 0.0f64;
        for ((&zv, &t), &w) in zd.iter().zip(target).zip(weight) {
            if w != 0.0 {
                let zv = zv as f64;
                let l = zv.max(0.0) - zv * t as f64 + libm::log1p(libm::exp(-zv.abs()));
                s += w as f64 * l;
            }
        }
        let loss = (s / count as f64) as f32;
        let rg = self.rg(z);
        let op = Op::BceWithLogits {
            z,
            target: if rg { target.to_vec() } else { Vec::new() },
            weight: if rg { weight.to_vec() } else { Vec::new() },
            count: count as f32,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Binary cross-entropy on probabilities (clamped to `[BCE_EPS, 1 - BCE_EPS]`).
    pub fn bce(&mut self, p: Var, target: &[f32], weight: &[f32]) -> Result<Var> {
        let pd = self.value(p).data();
        check_len("segmentation_loss", pd.len(), target.len(), weight.len())?;
        let count = weight.iter().filter(|&&w| w != 0.0).count();
        if count == 0 {
            return Err(Error::EmptyFov("segmentation_loss"));
        }
        let mut s = 0.0f64;
        for ((&pv, &t), &w) in pd.iter().zip(target).zip(weight) {
            if w != 0.0 {
                let pv = pv.clamp(BCE_EPS, 1.0 - BCE_EPS) as f64;
                let t = t as f64;
                s -= w as f64 * (t * libm::log(pv) + (1.0 - t) * libm::log(1.0 - pv));
            }
        }
        let loss = (s / count as f64) as f32;
        let rg = self.rg(p);
        let op = Op::Bce {
            p,
            target: if rg { target.to_vec() } else { Vec::new() },
            weight: if rg { weight.to_vec() } else { Vec::new() },
            count: count as f32,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// User-defined node. `backward` receives the input values, the output
    /// value and the output gradient, and returns one optional gradient per
    /// input.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            let axis = sa
                .iter()
                .zip(sb)
                .position(|(x, y)| x != y)
                .unwrap_or(sa.len().min(sb.len()));
            return Err(Error::ShapeMismatch {
                op,
                axis: AXIS_NAMES.get(axis).copied().unwrap_or("rank"),
                expected: sa.get(axis).copied().unwrap_or(0),
                actual: sb.get(axis).copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    // ------------------------------------------------------------ backward

    /// Back-propagate from a scalar `loss`, accumulating into leaf and
    /// parameter gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf | Op::Param(_) => {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(acc) => acc.iter_mut().zip(&gy).for_each(|(a, g)| *a += *g),
                        None => node.grad = Some(gy),
                    }
                }
                Op::Constant => {}
                _ => self.backward_node(i, &gy, &mut grads),
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, g: Vec<f32>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], g);
            }
        };
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = conv2d_backward(val(*x).data(), val(*w).data(), gy, geom, self.rg(*x), self.rg(*w));
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                if let Some(dw) = dw {
                    send(*w, dw);
                }
                if let Some(b) = b {
                    send(*b, db);
                }
            }
            Op::ConvTranspose2x2 { x, w, b } => {
                let (n, c_in, h, wd) = val(*x).dims4("").unwrap();
                let c_out = val(*w).shape()[1];
                let hw = h * wd;
                let o4 = c_out * 4;
                let xd = val(*x).data();
                let wdata = val(*w).data();
                let mut dtmp = vec![0.0f32; o4 * hw];
                let mut dx = vec![0.0f32; xd.len()];
                let mut dw = vec![0.0f32; wdata.len()];
                let mut db = vec![0.0f32; c_out];
                let w2 = 2 * wd;
                for img in 0..n {
                    let gi = &gy[img * c_out * 4 * hw..(img + 1) * c_out * 4 * hw];
                    for o in 0..c_out {
                        let plane = &gi[o * 4 * hw..(o + 1) * 4 * hw];
                        db[o] += plane.iter().sum::<f32>();
                        for a in 0..2 {
                            for bb in 0..2 {
                                let dst = &mut dtmp[(o * 4 + a * 2 + bb) * hw..(o * 4 + a * 2 + bb + 1) * hw];
                                for ii in 0..h {
                                    let row = &plane[(2 * ii + a) * w2..(2 * ii + a + 1) * w2];
                                    for j in 0..wd {
                                        dst[ii * wd + j] = row[2 * j + bb];
                                    }
                                }
                            }
                        }
                    }
                    let xi = &xd[img * c_in * hw..(img + 1) * c_in * hw];
                    gemm(
                        c_in,
                        o4,
                        hw,
                        MatRef::row_major(wdata, o4),
                        MatRef::row_major(&dtmp, hw),
                        0.0,
                        &mut dx[img * c_in * hw..(img + 1) * c_in * hw],
                    );
                    gemm(
                        c_in,
                        hw,
                        o4,
                        MatRef::row_major(xi, hw),
                        MatRef::transposed(&dtmp, hw),
                        1.0,
                        &mut dw,
                    );
                }
                send(*x, dx);
                send(*w, dw);
                if let Some(b) = b {
                    send(*b, db);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0f32; val(*x).numel()];
                for (g, &k) in gy.iter().zip(argmax) {
                    dx[k as usize] += *g;
                }
                send(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let (n, c, h, w) = val(*x).dims4("").unwrap();
                let hw = h * w;
                let m = (n * hw) as f64;
                let g = val(*gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * hw;
                        for k in base..base + hw {
                            dgamma[ch] += (gy[k] * xhat[k]) as f64;
                            dbeta[ch] += gy[k] as f64;
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0f32; gy.len()];
                    for ch in 0..c {
                        let scale = g[ch] * inv_std[ch];
                        if *batch {
                            let mean_dy = (dbeta[ch] / m) as f32;
                            let mean_dy_xhat = (dgamma[ch] / m) as f32;
                            for img in 0..n {
                                let base = (img * c + ch) * hw;
                                for k in base..base + hw {
                                    dx[k] = scale * (gy[k] - mean_dy - xhat[k] * mean_dy_xhat);
                                }
                            }
                        } else {
                            for img in 0..n {
                                let base = (img * c + ch) * hw;
                                for k in base..base + hw {
                                    dx[k] = scale * gy[k];
                                }
                            }
                        }
                    }
                    send(*x, dx);
                }
                send(*gamma, dgamma.iter().map(|&v| v as f32).collect());
                send(*beta, dbeta.iter().map(|&v| v as f32).collect());
            }
            Op::Relu { x } => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                send(*x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(gy)
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                send(*x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let (n, c, h, w) = val(*x).dims4("").unwrap();
                let hw = h * w;
                let mut dx = vec![0.0f32; n * c * hw];
                for p in 0..n * c {
                    let v = gy[p] / hw as f32;
                    dx[p * hw..(p + 1) * hw].iter_mut().for_each(|d| *d = v);
                }
                send(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let (n, d) = val(*x).dims2("").unwrap();
                let e = val(*w).shape()[1];
                if self.rg(*x) {
                    let mut dx = vec![0.0f32; n * d];
                    gemm(
                        n,
                        e,
                        d,
                        MatRef::row_major(gy, e),
                        MatRef::transposed(val(*w).data(), e),
                        0.0,
                        &mut dx,
                    );
                    send(*x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0f32; d * e];
                    gemm(
                        d,
                        n,
                        e,
                        MatRef::transposed(val(*x).data(), d),
                        MatRef::row_major(gy, e),
                        0.0,
                        &mut dw,
                    );
                    send(*w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0f32; e];
                    for row in gy.chunks_exact(e) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += *g);
                    }
                    send(*b, db);
                }
            }
            Op::L2Normalize { x, norms, eps } => {
                let (n, d) = val(*x).dims2("").unwrap();
                let y = node.value.data();
                let mut dx = vec![0.0f32; n * d];
                for r in 0..n {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gy[r * d..(r + 1) * d];
                    let nrm = norms[r];
                    if nrm > *eps {
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..d {
                            dx[r * d + k] = (gr[k] - yr[k] * dot) / nrm;
                        }
                    } else {
                        for k in 0..d {
                            dx[r * d + k] = gr[k] / nrm;
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Add { a, b } => {
                send(*a, gy.to_vec());
                send(*b, gy.to_vec());
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                send(*a, gy.iter().zip(bd).map(|(g, v)| g * v).collect());
                send(*b, gy.iter().zip(ad).map(|(g, v)| g * v).collect());
            }
            Op::ConcatChannels { a, b } => {
                let (n, ca, h, w) = val(*a).dims4("").unwrap();
                let cb = val(*b).shape()[1];
                let hw = h * w;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for img in 0..n {
                    let base = img * (ca + cb) * hw;
                    da.extend_from_slice(&gy[base..base + ca * hw]);
                    db.extend_from_slice(&gy[base + ca * hw..base + (ca + cb) * hw]);
                }
                send(*a, da);
                send(*b, db);
            }
            Op::Sum { x } => send(*x, vec![gy[0]; val(*x).numel()]),
            Op::Mean { x } => {
                let n = val(*x).numel();
                send(*x, vec![gy[0] / n as f32; n]);
            }
            Op::InfoNce {
                q,
                probs,
                keys,
                queue,
                negatives,
                tau,
            } => {
                let (n, d) = val(*q).dims2("").unwrap();
                let k1 = negatives + 1;
                let scale = gy[0] / (n as f32 * *tau);
                let mut dq = vec![0.0f32; n * d];
                for r in 0..n {
                    let c = probs[r * k1] - 1.0;
                    for k in 0..d {
                        dq[r * d + k] = c * keys[r * d + k];
                    }
                }
                if *negatives > 0 {
                    let pneg: Vec<f32> = (0..n)
                        .flat_map(|r| probs[r * k1 + 1..(r + 1) * k1].iter().copied())
                        .collect();
                    gemm(
                        n,
                        *negatives,
                        d,
                        MatRef::row_major(&pneg, *negatives),
                        MatRef::row_major(queue, d),
                        1.0,
                        &mut dq,
                    );
                }
                dq.iter_mut().for_each(|v| *v *= scale);
                send(*q, dq);
            }
            Op::BceWithLogits {
                z,
                target,
                weight,
                count,
            } => {
                let s = gy[0] / count;
                let dz = val(*z)
                    .data()
                    .iter()
                    .zip(target)
                    .zip(weight)
                    .map(|((&zv, &t), &w)| if w != 0.0 { w * (sigmoid(zv) - t) * s } else { 0.0 })
                    .collect();
                send(*z, dz);
            }
            Op::Bce {
                p,
                target,
                weight,
                count,
            } => {
                let s = gy[0] / count;
                let dp = val(*p)
                    .data()
                    .iter()
                    .zip(target)
                    .zip(weight)
                    .map(|((&pv, &t), &w)| {
                        if w == 0.0 {
                            return 0.0;
                        }
                        let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        w * (pc - t) / (pc * (1.0 - pc)) * s
                    })
                    .collect();
                send(*p, dp);
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gs = backward(&vals, &node.value, gy);
                for (&v, g) in inputs.iter().zip(gs) {
                    if let Some(g) = g {
                        send(v, g);
                    }
                }
            }
        }
    }
}

const AXIS_NAMES: [&str; 4] = [
    "axis 0 (batch)",
    "axis 1 (channels)",
    "axis 2 (height)",
    "axis 3 (width)",
];

fn check_len(op: &'static str, n: usize, target: usize, weight: usize) -> Result<()> {
    for (axis, got) in [("target length", target), ("mask length", weight)] {
        if got != n {
            return Err(Error::ShapeMismatch {
                op,
                axis,
                expected: n,
                actual: got,
            });
        }
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
        None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::expf(-v))
    } else {
        let e = libm::expf(v);
        e / (1.0 + e)
    }
}

/// Loss value (f64) and row-wise softmax probabilities of InfoNCE.
pub(crate) fn info_nce_forward(
    q: &[f32],
    keys: &[f32],
    queue: &[f32],
    n: usize,
    d: usize,
    tau: f32,
) -> (f64, Vec<f32>) {
    let negatives = queue.len().checked_div(d).unwrap_or(0);
    let k1 = negatives + 1;
    let tau = tau as f64;
    let mut probs = vec![0.0f32; n * k1];
    let mut logits = vec![0.0f64; k1];
    let mut total = 0.0f64;
    for r in 0..n {
        let qr = &q[r * d..(r + 1) * d];
        logits[0] = dot64(qr, &keys[r * d..(r + 1) * d]) / tau;
        for j in 0..negatives {
            logits[j + 1] = dot64(qr, &queue[j * d..(j + 1) * d]) / tau;
        }
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|&l| libm::exp(l - mx)).sum();
        let lse = mx + libm::log(z);
        total += lse - logits[0];
        for j in 0..k1 {
            probs[r * k1 + j] = libm::exp(logits[j] - lse) as f32;
        }
    }
    (total / n.max(1) as f64, probs)
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * plane;
                let dst = &mut cols[row..row + plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad_t as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // ix = ox + kx - pad_l must lie in [0, w)
                        let lo = g.pad_l.saturating_sub(kx).min(g.wo);
                        let hi = (g.w + g.pad_l).saturating_sub(kx).min(g.wo).max(lo);
                        drow[..lo].fill(0.0);
                        drow[hi..].fill(0.0);
                        if hi > lo {
                            let off = lo + kx - g.pad_l;
                            drow[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad_l as isize;
                            *d = if ix >= 0 && (ix as usize) < g.w {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * plane;
                let src = &cols[row..row + plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad_t as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad_l as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &[f32], w: &[f32], b: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let plane = g.out_plane();
    let patch = g.patch();
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * plane;
    let mut out = vec![0.0f32; g.n * out_sz];
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; patch * plane]
    };
    for img in 0..g.n {
        let xi = &x[img * in_sz..(img + 1) * in_sz];
        let src: &[f32] = if g.pointwise() {
            xi
        } else {
            im2col(xi, g, &mut cols);
            &cols
        };
        let oi = &mut out[img * out_sz..(img + 1) * out_sz];
        gemm(
            g.c_out,
            patch,
            plane,
            MatRef::row_major(w, patch),
            MatRef::row_major(src, plane),
            0.0,
            oi,
        );
        if let Some(b) = b {
            for (o, chunk) in oi.chunks_exact_mut(plane).enumerate() {
                let bv = b[o];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

type ConvGrads = (Option<Vec<f32>>, Option<Vec<f32>>, Vec<f32>);

fn conv2d_backward(x: &[f32], w: &[f32], gy: &[f32], g: &ConvGeom, need_dx: bool, need_dw: bool) -> ConvGrads {
    let plane = g.out_plane();
    let patch = g.patch();
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * plane;
    let mut db = vec![0.0f32; g.c_out];
    let mut dw = if need_dw {
        vec![0.0f32; g.c_out * patch]
    } else {
        Vec::new()
    };
    let mut dx = if need_dx { vec![0.0f32; x.len()] } else { Vec::new() };
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; patch * plane]
    };
    for img in 0..g.n {
        let gi = &gy[img * out_sz..(img + 1) * out_sz];
        for (o, chunk) in gi.chunks_exact(plane).enumerate() {
            db[o] += chunk.iter().sum::<f32>();
        }
        let xi = &x[img * in_sz..(img + 1) * in_sz];
        if need_dw {
            let src: &[f32] = if g.pointwise() {
                xi
            } else {
                im2col(xi, g, &mut cols);
                &cols
            };
            gemm(
                g.c_out,
                plane,
                patch,
                MatRef::row_major(gi, plane),
                MatRef::transposed(src, plane),
                1.0,
                &mut dw,
            );
        }
        if need_dx {
            let dxi = &mut dx[img * in_sz..(img + 1) * in_sz];
            if g.pointwise() {
                gemm(
                    patch,
                    g.c_out,
                    plane,
                    MatRef::transposed(w, patch),
                    MatRef::row_major(gi, plane),
                    0.0,
                    dxi,
                );
            } else {
                gemm(
                    patch,
                    g.c_out,
                    plane,
                    MatRef::transposed(w, patch),
                    MatRef::row_major(gi, plane),
                    0.0,
                    &mut cols,
                );
                col2im(&cols, g, dxi);
            }
        }
    }
    (need_dx.then_some(dx), need_dw.then_some(dw), db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_hand_case() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, Padding::Same).unwrap();
        assert_eq!(g.value(y).data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = RngStream::new(5);
        let xt = Tensor::randn(&[2, 1, 4, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, Some(b), 1, Padding::Same).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut rng = RngStream::new(6);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng));
        let w = g.constant(Tensor::zeros(&[2, 3, 3, 3]));
        let b = g.constant(t(&[2], &[0.5, -1.5]));
        let y = g.conv2d(x, w, Some(b), 1, Padding::Same).unwrap();
        let v = g.value(y).data();
        assert!(v[..16].iter().all(|&a| a == 0.5));
        assert!(v[16..].iter().all(|&a| a == -1.5));
    }

    #[test]
    fn conv_channel_mismatch_names_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = g.conv2d(x, w, None, 1, Padding::Same).unwrap_err();
        assert!(matches!(
            err,
            Error::ShapeMismatch {
                axis: "input channels",
                expected: 3,
                actual: 2,
                ..
            }
        ));
    }

    #[test]
    fn conv_strided_and_valid_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 7, 8]));
        let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let y = g.conv2d(x, w, None, 2, Padding::Same).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 4, 4]);
        let y = g.conv2d(x, w, None, 1, Padding::Valid).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 5, 6]);
    }

    #[test]
    fn conv_transpose_tiles_pixels() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let w = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv_transpose2x2(x, w, Some(b)).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let z = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let w = g.constant(Tensor::full(&[2, 3, 2, 2], 0.7));
        let b = g.constant(t(&[3], &[1., 2., 3.]));
        let y = g.conv_transpose2x2(z, w, Some(b)).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 6, 6]);
        assert!(g.value(y).data()[..36].iter().all(|&v| v == 1.0));
        assert!(g.value(y).data()[72..].iter().all(|&v| v == 3.0));
    }

    #[test]
    fn maxpool_cases() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let y = g.max_pool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 3.0));
        let y = g.max_pool2(x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 0., 0., 0.]);
        let odd = g.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(matches!(g.max_pool2(odd), Err(Error::OddSpatial { .. })));
    }

    #[test]
    fn activations_and_pooling() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1., 2., 0.]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0., 2., 0.]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[2], 0.5);
        let m = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let p = g.global_avg_pool(m).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
    }

    #[test]
    fn linear_hand_case() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1., 2.]));
        let w = g.constant(t(&[2, 2], &[1., 0., 0., 2.]));
        let b = g.constant(t(&[2], &[1., 1.]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[2., 5.]);
        let bad = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            g.linear(x, bad, None),
            Err(Error::ShapeMismatch {
                axis: "inner dimension",
                ..
            })
        ));
    }

    #[test]
    fn l2_normalize_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 2], &[3., 4., 0.6, 0.8, 0., 0.]));
        let y = g.l2_normalize(x, 1e-12).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
        assert_eq!(&v[2..4], &[0.6, 0.8]);
        assert_eq!(&v[4..], &[0.0, 0.0]);
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 1.]);
        g.zero_grad();
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 4.]);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4., 8.]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let c = g.constant(t(&[1], &[1.]));
        assert_eq!(g.backward(c), Err(Error::Detached));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x + x*x) -> grad 1 + 2x
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 3.]));
        let sq = g.mul(x, x).unwrap();
        let a = g.add(x, sq).unwrap();
        let l = g.sum(a);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3., 7.]);
    }

    #[test]
    fn constants_never_receive_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 3.]));
        let c = g.constant(t(&[2], &[2., 2.]));
        let m = g.mul(x, c).unwrap();
        let l = g.sum(m);
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[2., 2.]);
    }

    #[test]
    fn inference_graph_records_no_grad() {
        let mut g = Graph::inference();
        let x = g.leaf(t(&[2], &[1., 3.]));
        let l = g.sum(x);
        assert!(!g.requires_grad(l));
        assert_eq!(g.backward(l), Err(Error::Detached));
    }

    #[test]
    fn batchnorm_train_standardizes() {
        let mut rng = RngStream::new(11);
        let mut g = Graph::new();
        let xt = Tensor::randn(&[4, 3, 4, 4], 2.0, &mut rng).map(|v| v + 5.0);
        let x = g.constant(xt);
        let ga = g.constant(Tensor::full(&[3], 1.0));
        let be = g.constant(Tensor::zeros(&[3]));
        let (y, stats) = g.batch_norm(x, ga, be, BnStats::Batch, 1e-5).unwrap();
        assert!(stats.is_some());
        let v = g.value(y).data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| v[(n * 3 + ch) * 16..(n * 3 + ch + 1) * 16].iter().map(|&a| a as f64))
                .collect();
            let m = vals.iter().sum::<f64>() / 64.0;
            let var = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 64.0;
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn batchnorm_eval_uses_given_stats() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 1, 2], &[1.0, -1.0]));
        let ga = g.constant(Tensor::full(&[1], 1.0));
        let be = g.constant(Tensor::zeros(&[1]));
        let (y, stats) = g
            .batch_norm(
                x,
                ga,
                be,
                BnStats::Running {
                    mean: &[0.0],
                    var: &[1.0],
                },
                0.0,
            )
            .unwrap();
        assert!(stats.is_none());
        assert_eq!(g.value(y).data(), &[1.0, -1.0]);
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::full(&[4], 0.5));
        let l = g.bce(p, &[0., 1., 1., 0.], &[1.; 4]).unwrap();
        assert!((g.value(l).data()[0] - core::f32::consts::LN_2).abs() < 1e-6);
        let z = g.leaf(Tensor::zeros(&[4]));
        let l = g.bce_with_logits(z, &[0., 1., 1., 0.], &[1.; 4]).unwrap();
        assert!((g.value(l).data()[0] - core::f32::consts::LN_2).abs() < 1e-6);
        assert!(matches!(g.bce(p, &[0.; 4], &[0.; 4]), Err(Error::EmptyFov(_))));
    }
}
