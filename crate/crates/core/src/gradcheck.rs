//! Finite-difference verification of the analytic backward passes.
//!
//! The analytic side runs the f32 [`Graph`]. The numeric side re-evaluates
//! the same function through [`reference`], a set of naive f64 loops that
//! share no code with the graph kernels (no im2col, no GEMM), using central
//! differences `(f(x + eps) - f(x - eps)) / (2 eps)`.
//!
//! Error metric, per input tensor over the sampled coordinates `k`:
//! `max_k |a_k - n_k| / s`, where `s` is the tensor's own gradient scale
//! `max_k max(|a_k|, |n_k|)`, floored at [`SCALE_FLOOR`] times the largest
//! scale over all inputs. Normalising by scale keeps f32 summation rounding on
//! cancelling coordinates from dominating; the floor lets a gradient that is
//! identically zero in exact arithmetic (e.g. a bias feeding a batch norm)
//! carry f32 noise. The reported error is the maximum over inputs.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{BnStats, Graph, Mode, Padding, Var};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::unet::{UNetConfig, UNetModel};

pub const SCALE_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub eps: f64,
    /// Coordinates sampled per input tensor; smaller tensors are checked fully.
    pub max_coords: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares `analytic[i]` (gradient of input `i`) with central differences of
/// `reference` around `base`.
pub fn compare(
    name: &str,
    analytic: &[Vec<f32>],
    base: &[reference::Arr],
    reference: impl Fn(&[reference::Arr]) -> f64,
    opts: &CheckOptions,
    rng: &mut RngStream,
) -> GradCheckReport {
    assert_eq!(analytic.len(), base.len(), "one analytic gradient per input");
    let mut work: Vec<reference::Arr> = base.to_vec();
    let mut per_input = Vec::with_capacity(analytic.len());
    let mut checked = 0;
    for (i, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.len(), base[i].data.len(), "gradient length of input {i}");
        let coords = sample_coords(grad.len(), opts.max_coords, rng);
        let mut max_diff = 0.0f64;
        let mut scale = 0.0f64;
        for &k in &coords {
            let x0 = base[i].data[k];
            work[i].data[k] = x0 + opts.eps;
            let fp = reference(&work);
            work[i].data[k] = x0 - opts.eps;
            let fm = reference(&work);
            work[i].data[k] = x0;
            let num = (fp - fm) / (2.0 * opts.eps);
            let ana = grad[k] as f64;
            max_diff = max_diff.max((ana - num).abs());
            scale = scale.max(ana.abs()).max(num.abs());
        }
        checked += coords.len();
        per_input.push((max_diff, scale));
    }
    let global = per_input.iter().map(|p| p.1).fold(0.0, f64::max);
    let floor = SCALE_FLOOR * global;
    let worst = per_input
        .iter()
        .map(|&(d, s)| if d == 0.0 { 0.0 } else { d / s.max(floor) })
        .fold(0.0, f64::max);
    GradCheckReport {
        name: name.into(),
        max_rel_error: worst,
        checked,
    }
}

fn sample_coords(len: usize, max: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if len > max {
        rng.shuffle(&mut idx);
        idx.truncate(max);
    }
    idx
}

/// Builds every input as a graph leaf, runs `analytic`, back-propagates and
/// compares against `reference`.
pub fn check_leaves(
    name: &str,
    inputs: &[Tensor],
    analytic: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    reference: impl Fn(&[reference::Arr]) -> f64,
    opts: &CheckOptions,
    rng: &mut RngStream,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = analytic(&mut g, &vars)?;
    g.backward(loss)?;
    let grads: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], Tensor::into_data))
        .collect();
    let base: Vec<reference::Arr> = inputs.iter().map(reference::Arr::from_tensor).collect();
    Ok(compare(name, &grads, &base, reference, opts, rng))
}

/// `sum(y * r)` on the graph: turns any tensor output into a scalar whose
/// gradient is a generic direction `r`.
pub fn weighted_sum(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let rv = g.constant(r.clone());
    let p = g.mul(y, rv)?;
    Ok(g.sum(p))
}

fn rdot(y: &reference::Arr, r: &Tensor) -> f64 {
    y.data.iter().zip(r.data()).map(|(a, &b)| a * b as f64).sum()
}

fn weights_like(shape: &[usize], rng: &mut RngStream) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn range(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Values with `|v| >= margin`, keeping piecewise-linear ops away from kinks.
fn away_from_zero(shape: &[usize], margin: f32, rng: &mut RngStream) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin - v.abs() } else { margin + v.abs() };
        }
    }
    t
}

/// Distinct values separated by at least `gap`, in random order.
fn distinct(shape: &[usize], gap: f32, rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let data = order.iter().map(|&o| (o as f32 - n as f32 / 2.0) * gap).collect();
    Tensor::new(shape, data).expect("shape matches")
}

type Case = fn(&mut RngStream, &CheckOptions) -> Result<GradCheckReport>;

/// Named primitive cases run by [`primitive_suite`].
pub const PRIMITIVES: &[(&str, Case)] = &[
    ("conv2d", case_conv2d),
    ("conv_transpose2x2", case_conv_transpose),
    ("max_pool2", case_max_pool),
    ("batch_norm_train", case_bn_train),
    ("batch_norm_eval", case_bn_eval),
    ("relu", case_relu),
    ("sigmoid", case_sigmoid),
    ("global_avg_pool", case_gap),
    ("linear", case_linear),
    ("l2_normalize", case_l2),
    ("add", case_add),
    ("mul", case_mul),
    ("concat_channels", case_concat),
    ("mean", case_mean),
    ("bce_with_logits", case_bce_logits),
    ("bce", case_bce),
    ("info_nce", case_info_nce),
    ("encoder_level", case_encoder_level),
];

/// Runs every primitive case once with shapes drawn from `seed`.
pub fn primitive_suite(seed: u64, opts: &CheckOptions) -> Result<Vec<GradCheckReport>> {
    let root = RngStream::new(seed);
    PRIMITIVES
        .iter()
        .enumerate()
        .map(|(i, (_, case))| case(&mut root.fork(i as u64), opts))
        .collect()
}

fn case_conv2d(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    let (n, ci, co) = (range(rng, 1, 2), range(rng, 1, 3), range(rng, 1, 3));
    let (h, w) = (range(rng, 3, 6), range(rng, 3, 6));
    let k = [1, 2, 3][rng.below(3)];
    let stride = range(rng, 1, 2);
    let same = rng.bernoulli(0.75);
    let x = Tensor::randn(&[n, ci, h, w], 1.0, rng);
    let wt = Tensor::randn(&[co, ci, k, k], 0.5, rng);
    let b = Tensor::randn(&[co], 0.5, rng);
    let pad = if same { Padding::Same } else { Padding::Valid };
    let out = {
        let mut g = Graph::inference();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), stride, pad)?;
        g.value(y).shape().to_vec()
    };
    let r = weights_like(&out, rng);
    check_leaves(
        "conv2d",
        &[x, wt, b],
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            weighted_sum(g, y, &r)
        },
        |a| rdot(&reference::conv2d(&a[0], &a[1], Some(&a[2].data), stride, same), &r),
        opts,
        rng,
    )
}

fn case_conv_transpose(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    let (n, ci, co) = (range(rng, 1, 2), range(rng, 1, 3), range(rng, 1, 3));
    let (h, w) = (range(rng, 1, 4), range(rng, 1, 4));
    let x = Tensor::randn(&[n, ci, h, w], 1.0, rng);
    let wt = Tensor::randn(&[ci, co, 2, 2], 0.5, rng);
    let b = Tensor::randn(&[co], 0.5, rng);
    let r = weights_like(&[n, co, 2 * h, 2 * w], rng);
    check_leaves(
        "conv_transpose2x2",
        &[x, wt, b],
        |g, v| {
            let y = g.conv_transpose2x2(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y, &r)
        },
        |a| rdot(&reference::conv_transpose2x2(&a[0], &a[1], Some(&a[2].data)), &r),
        opts,
        rng,
    )
}

fn case_max_pool(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    let (n, c) = (range(rng, 1, 2), range(rng, 1, 3));
    let (h, w) = (2 * range(rng, 1, 3), 2 * range(rng, 1, 3));
    let x = distinct(&[n, c, h, w], 0.01, rng);
    let r = weights_like(&[n, c, h / 2, w / 2], rng);
    check_leaves(
        "max_pool2",
        &[x],
        |g, v| {
            let y = g.max_pool2(v[0])?;
            weighted_sum(g, y, &r)
        },
        |a| rdot(&reference::max_pool2(&a[0]), &r),
        opts,
        rng,
    )
}

fn bn_shape(rng: &mut RngStream) -> [usize; 4] {
    [range(rng, 1, 3), range(rng, 1, 3), range(rng, 2, 4), range(rng, 2, 4)]
}

fn case_bn_train(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    let shape = bn_shape(rng);
    let c = shape[1];
    let x = Tensor::randn(&shape, 1.5, rng);
    let gamma = Tensor::uniform(&[c], 0.5, 1.5, rng);
    let beta = Tensor::randn(&[c], 0.5, rng);
    let r = weights_like(&shape, rng);
    check_leaves(
        "batch_norm_train",
        &[x, gamma, beta],
        |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], BnStats::Batch, 1e-5)?;
            weighted_sum(g, y, &r)
        },
        |a| rdot(&reference::batch_norm_train(&a[0], &a[1].data, &a[2].data, 1e-5), &r),
        opts,
        rng,
    )
}

fn case_bn_eval(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    let shape = bn_shape(rng);
    let c = shape[1];
    let x = Tensor::randn(&shape, 1.5, rng);
    let gamma = Tensor::uniform(&[c], 0.5, 1.5, rng);
    let beta = Tensor::randn(&[c], 0.5, rng);
    let mean = Tensor::randn(&[c], 0.5, rng);
    let var = Tensor::uniform(&[c], 0.5, 2.0, rng);
    let r = weights_like(&shape, rng);
    let (m64, v64) = (reference::Arr::from_tensor(&mean), reference::Arr::from_tensor(&var));
    check_leaves(
        "batch_norm_eval",
        &[x, gamma, beta],
        |g, v| {
            let stats = BnStats::Running {
                mean: mean.data(),
                var: var.data(),
            };
            let (y, _) = g.batch_norm(v[0], v[1], v[2], stats, 1e-5)?;
            weighted_sum(g, y, &r)
        },
        |a| {
            rdot(
                &reference::batch_norm_eval(&a[0], &a[1].data, &a[2].data, &m64.data, &v64.data, 1e-5),
                &r,
            )
        },
        opts,
        rng,
    )
}

fn small_shape(rng: &mut RngStream) -> [usize; 4] {
    [range(rng, 1, 2), range(rng, 1, 3), range(rng, 1, 4), range(rng, 1, 4)]
}

fn case_relu(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    let shape = small_shape(rng);
    let x = away_from_zero(&shape, 0.05, rng);
    let r = weights_like(&shape, rng);
    check_leaves(
        "relu",
        &[x],
        |g, v| {
            let y = g.relu(v[0]);
            weighted_sum(g, y, &r)
        },
        |a| rdot(&reference::relu(&a[0]), &r),
        opts,
        rng,
    )
}

fn case_sigmoid(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    let shape = small_shape(rng);
    let x = Tensor::randn(&shape, 2.0, rng);
    let r = weights_like(&shape, rng);
    check_leaves(
        "sigmoid",
        &[x],
        |g, v| {
            let y = g.sigmoid(v[0]);
            weighted_sum(g, y, &r)
        },
        |a| rdot(&reference::sigmoid(&a[0]), &r),
        opts,
        rng,
    )
}

fn case_gap(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    let shape = small_shape(rng);
    let x = Tensor::randn(&shape, 1.0, rng);
    let r = weights_like(&shape[..2], rng);
    check_leaves(
        "global_avg_pool",
        &[x],
        |g, v| {
            let y = g.global_avg_pool(v[0])?;
            weighted_sum(g, y, &r)
        },
        |a| rdot(&reference::global_avg_pool(&a[0]), &r),
        opts,
        rng,
    )
}

fn case_linear(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    linear_check(rng, opts)
}

/// Linear layer `x W + b`; the loss is linear in every single coordinate, so
/// central differences are exact up to rounding.
pub fn linear_check(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    let (n, d, e) = (range(rng, 1, 4), range(rng, 1, 6), range(rng, 1, 6));
    let x = Tensor::randn(&[n, d], 1.0, rng);
    let w = Tensor::randn(&[d, e], 1.0, rng);
    let b = Tensor::randn(&[e], 1.0, rng);
    let r = weights_like(&[n, e], rng);
    check_leaves(
        "linear",
        &[x, w, b],
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y, &r)
        },
        |a| rdot(&reference::linear(&a[0], &a[1], Some(&a[2].data)), &r),
        opts,
        rng,
    )
}

fn case_l2(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    let (n, d) = (range(rng, 1, 4), range(rng, 2, 8));
    let x = Tensor::randn(&[n, d], 1.0, rng);
    let r = weights_like(&[n, d], rng);
    check_leaves(
        "l2_normalize",
        &[x],
        |g, v| {
            let y = g.l2_normalize(v[0], 1e-12)?;
            weighted_sum(g, y, &r)
        },
        |a| rdot(&reference::l2_normalize(&a[0], 1e-12), &r),
        opts,
        rng,
    )
}

fn case_add(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    let shape = small_shape(rng);
    let (a, b) = (Tensor::randn(&shape, 1.0, rng), Tensor::randn(&shape, 1.0, rng));
    let r = weights_like(&shape, rng);
    check_leaves(
        "add",
        &[a, b],
        |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, &r)
        },
        |a| rdot(&reference::zip(&a[0], &a[1], |x, y| x + y), &r),
        opts,
        rng,
    )
}

fn case_mul(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    let shape = small_shape(rng);
    let (a, b) = (Tensor::randn(&shape, 1.0, rng), Tensor::randn(&shape, 1.0, rng));
    let r = weights_like(&shape, rng);
    check_leaves(
        "mul",
        &[a, b],
        |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, &r)
        },
        |a| rdot(&reference::zip(&a[0], &a[1], |x, y| x * y), &r),
        opts,
        rng,
    )
}

fn case_concat(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    let [n, _, h, w] = small_shape(rng);
    let (ca, cb) = (range(rng, 1, 3), range(rng, 1, 3));
    let a = Tensor::randn(&[n, ca, h, w], 1.0, rng);
    let b = Tensor::randn(&[n, cb, h, w], 1.0, rng);
    let r = weights_like(&[n, ca + cb, h, w], rng);
    check_leaves(
        "concat_channels",
        &[a, b],
        |g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            weighted_sum(g, y, &r)
        },
        |a| rdot(&reference::concat_channels(&a[0], &a[1]), &r),
        opts,
        rng,
    )
}

fn case_mean(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    let shape = small_shape(rng);
    let x = Tensor::randn(&shape, 1.0, rng);
    let sq = |v: f64| v * v;
    check_leaves(
        "mean",
        &[x],
        |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.mean(y))
        },
        |a| a[0].data.iter().map(|&v| sq(v)).sum::<f64>() / a[0].data.len() as f64,
        opts,
        rng,
    )
}

fn fov_mask(len: usize, rng: &mut RngStream) -> Vec<f32> {
    let mut m: Vec<f32> = (0..len).map(|_| if rng.bernoulli(0.7) { 1.0 } else { 0.0 }).collect();
    m[rng.below(len)] = 1.0;
    m
}

fn case_bce_logits(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    let shape = small_shape(rng);
    let z = Tensor::randn(&shape, 2.0, rng);
    let len = z.numel();
    let t: Vec<f32> = (0..len).map(|_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 }).collect();
    let m = fov_mask(len, rng);
    check_leaves(
        "bce_with_logits",
        &[z],
        |g, v| g.bce_with_logits(v[0], &t, &m),
        |a| reference::bce_with_logits(&a[0].data, &t, &m),
        opts,
        rng,
    )
}

fn case_bce(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    let shape = small_shape(rng);
    let p = Tensor::uniform(&shape, 0.05, 0.95, rng);
    let len = p.numel();
    let t: Vec<f32> = (0..len).map(|_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 }).collect();
    let m = fov_mask(len, rng);
    check_leaves(
        "bce",
        &[p],
        |g, v| g.bce(v[0], &t, &m),
        |a| reference::bce(&a[0].data, &t, &m),
        opts,
        rng,
    )
}

fn case_info_nce(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    let (n, d, k) = (range(rng, 1, 4), range(rng, 2, 8), range(rng, 0, 6));
    let tau = rng.uniform_range(0.2, 1.0) as f32;
    let q = Tensor::randn(&[n, d], 0.5, rng);
    let keys = Tensor::randn(&[n, d], 0.5, rng);
    let queue = Tensor::randn(&[k.max(1), d], 0.5, rng);
    let queue = &queue.data()[..k * d];
    let (k64, q64) = (reference::Arr::from_tensor(&keys).data, reference::to_f64(queue));
    check_leaves(
        "info_nce",
        &[q],
        |g, v| g.info_nce(v[0], &keys, queue, tau),
        |a| reference::info_nce(&a[0].data, &k64, &q64, n, d, tau as f64),
        opts,
        rng,
    )
}

fn case_encoder_level(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    let (n, ci, co) = (range(rng, 1, 2), range(rng, 1, 3), range(rng, 2, 4));
    let (h, w) = (range(rng, 2, 5), range(rng, 2, 5));
    let x = Tensor::randn(&[n, ci, h, w], 1.0, rng);
    let mut inputs = vec![x];
    for (c_in, k) in [(ci, 3), (co, 3), (ci, 1)] {
        inputs.push(Tensor::randn(
            &[co, c_in, k, k],
            libm::sqrtf(2.0 / (c_in * k * k) as f32),
            rng,
        ));
        inputs.push(Tensor::randn(&[co], 0.1, rng));
        inputs.push(Tensor::uniform(&[co], 0.5, 1.5, rng));
        inputs.push(Tensor::randn(&[co], 0.1, rng));
    }
    let r = weights_like(&[n, co, h, w], rng);
    check_leaves(
        "encoder_level",
        &inputs,
        |g, v| {
            let block = |g: &mut Graph, x: Var, p: &[Var], act: bool| -> Result<Var> {
                let y = g.conv2d(x, p[0], Some(p[1]), 1, Padding::Same)?;
                let y = if act { g.relu(y) } else { y };
                Ok(g.batch_norm(y, p[2], p[3], BnStats::Batch, 1e-5)?.0)
            };
            let h1 = block(g, v[0], &v[1..5], true)?;
            let h2 = block(g, h1, &v[5..9], true)?;
            let res = block(g, v[0], &v[9..13], false)?;
            let y = g.add(h2, res)?;
            weighted_sum(g, y, &r)
        },
        |a| {
            let block = |x: &reference::Arr, p: &[reference::Arr], act: bool| {
                let y = reference::conv2d(x, &p[0], Some(&p[1].data), 1, true);
                let y = if act { reference::relu(&y) } else { y };
                reference::batch_norm_train(&y, &p[2].data, &p[3].data, 1e-5)
            };
            let h1 = block(&a[0], &a[1..5], true);
            let h2 = block(&h1, &a[5..9], true);
            let res = block(&a[0], &a[9..13], false);
            rdot(&reference::zip(&h2, &res, |x, y| x + y), &r)
        },
        opts,
        rng,
    )
}

/// Negative control: a sigmoid whose backward omits the `(1 - s)` factor.
/// A working checker must report a large error here.
pub fn corrupted_check(rng: &mut RngStream, opts: &CheckOptions) -> Result<GradCheckReport> {
    let shape = small_shape(rng);
    let x = Tensor::randn(&shape, 1.0, rng);
    let r = weights_like(&shape, rng);
    check_leaves(
        "corrupted_sigmoid",
        &[x],
        |g, v| {
            let value = g.value(v[0]).map(crate::graph::sigmoid);
            let y = g.custom(
                &[v[0]],
                value,
                Box::new(|_, out, grad| vec![Some(out.data().iter().zip(grad).map(|(s, g)| s * g).collect())]),
            );
            weighted_sum(g, y, &r)
        },
        |a| rdot(&reference::sigmoid(&a[0]), &r),
        opts,
        rng,
    )
}

/// Whole-network check on a `1 x 3 x 16 x 16` input with batch norm on fixed
/// (randomised) running statistics. Covers the input and every trainable
/// parameter tensor.
pub fn unet_check(seed: u64, config: UNetConfig, opts: &CheckOptions) -> Result<GradCheckReport> {
    let root = RngStream::new(seed);
    let mut model = UNetModel::build(config, &mut root.fork(0))?;
    randomize_bn(&mut model, &mut root.fork(1));
    let x = Tensor::randn(&[1, model.config.input_channels, 16, 16], 1.0, &mut root.fork(2));
    let r = weights_like(&[1, 1, 16, 16], &mut root.fork(3));

    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = model.forward(&mut g, xv, Mode::Eval)?;
    let loss = weighted_sum(&mut g, y, &r)?;
    g.backward(loss)?;
    let mut grads_params = model.params.clone();
    grads_params.zero_grad();
    g.accumulate_param_grads(model.slot(), &mut grads_params);

    let trainable: Vec<usize> = (0..model.params.len())
        .filter(|&i| model.params.param(i).kind == crate::params::ParamKind::Trainable)
        .collect();
    let mut analytic = vec![g.grad(xv).expect("input gradient").into_data()];
    let mut base = vec![reference::Arr::from_tensor(&x)];
    for &i in &trainable {
        analytic.push(grads_params.grad(i).data().to_vec());
        base.push(reference::Arr::from_tensor(model.params.value(i)));
    }
    let all: Vec<reference::Arr> = model
        .params
        .iter()
        .map(|p| reference::Arr::from_tensor(&p.value))
        .collect();
    let model_ref = &model;
    Ok(compare(
        "unet",
        &analytic,
        &base,
        |a| {
            let mut p = all.clone();
            for (slot, &i) in trainable.iter().enumerate() {
                p[i] = a[slot + 1].clone();
            }
            let z = reference::unet(model_ref, &p, &a[0], false);
            rdot(&reference::sigmoid(&z), &r)
        },
        opts,
        &mut root.fork(4),
    ))
}

/// Gives every batch-norm layer non-trivial affine parameters and running
/// statistics.
pub fn randomize_bn(model: &mut UNetModel, rng: &mut RngStream) {
    for p in model.params.iter_mut() {
        let c = p.value.numel();
        if p.name.ends_with(".running_mean") {
            p.value = Tensor::randn(&[c], 0.2, rng);
        } else if p.name.ends_with(".running_var") {
            p.value = Tensor::uniform(&[c], 0.5, 2.0, rng);
        } else if p.name.contains(".bn.") && p.name.ends_with(".weight") {
            p.value = Tensor::uniform(&[c], 0.5, 1.5, rng);
        } else if p.name.contains(".bn.") && p.name.ends_with(".bias") {
            p.value = Tensor::randn(&[c], 0.1, rng);
        }
    }
}

/// Naive f64 forward implementations used as the finite-difference oracle.
pub mod reference {
    use alloc::vec;
    use alloc::vec::Vec;

    use crate::tensor::Tensor;
    use crate::unet::{Block, BnLayer, ConvLayer, Level, UNetModel};

    #[derive(Debug, Clone, PartialEq)]
    pub struct Arr {
        pub shape: Vec<usize>,
        pub data: Vec<f64>,
    }

    pub fn to_f64(v: &[f32]) -> Vec<f64> {
        v.iter().map(|&x| x as f64).collect()
    }

    impl Arr {
        pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
            assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length");
            Self {
                shape: shape.to_vec(),
                data,
            }
        }

        pub fn zeros(shape: &[usize]) -> Self {
            Self::new(shape, vec![0.0; shape.iter().product()])
        }

        pub fn from_tensor(t: &Tensor) -> Self {
            Self::new(t.shape(), to_f64(t.data()))
        }

        pub fn dims4(&self) -> (usize, usize, usize, usize) {
            match self.shape[..] {
                [n, c, h, w] => (n, c, h, w),
                _ => panic!("expected rank 4, got {:?}", self.shape),
            }
        }

        fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
            let (_, cc, h, w) = self.dims4();
            self.data[((n * cc + c) * h + y) * w + x]
        }
    }

    pub fn conv2d(x: &Arr, w: &Arr, b: Option<&[f64]>, stride: usize, same: bool) -> Arr {
        let (n, ci, h, wd) = x.dims4();
        let (co, _, kh, kw) = w.dims4();
        let (ho, wo, pt, pl) = if same {
            let ho = h.div_ceil(stride);
            let wo = wd.div_ceil(stride);
            let pt = ((ho - 1) * stride + kh).saturating_sub(h) / 2;
            let pl = ((wo - 1) * stride + kw).saturating_sub(wd) / 2;
            (ho, wo, pt, pl)
        } else {
            ((h - kh) / stride + 1, (wd - kw) / stride + 1, 0, 0)
        };
        let mut out = Arr::zeros(&[n, co, ho, wo]);
        for img in 0..n {
            for o in 0..co {
                let plane = &mut out.data[(img * co + o) * ho * wo..(img * co + o + 1) * ho * wo];
                plane.fill(b.map_or(0.0, |b| b[o]));
                for c in 0..ci {
                    let xs = &x.data[(img * ci + c) * h * wd..(img * ci + c + 1) * h * wd];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = w.data[((o * ci + c) * kh + ky) * kw + kx];
                            for oy in 0..ho {
                                let iy = (oy * stride + ky) as isize - pt as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..wo {
                                    let ix = (ox * stride + kx) as isize - pl as isize;
                                    if ix >= 0 && ix < wd as isize {
                                        plane[oy * wo + ox] += xs[iy as usize * wd + ix as usize] * wv;
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

    /// `w` is `C_in x C_out x 2 x 2`.
    pub fn conv_transpose2x2(x: &Arr, w: &Arr, b: Option<&[f64]>) -> Arr {
        let (n, ci, h, wd) = x.dims4();
        let co = w.shape[1];
        let mut out = Arr::zeros(&[n, co, 2 * h, 2 * wd]);
        for img in 0..n {
            for o in 0..co {
                for y in 0..2 * h {
                    for xx in 0..2 * wd {
                        let mut s = b.map_or(0.0, |b| b[o]);
                        for c in 0..ci {
                            s += x.at4(img, c, y / 2, xx / 2) * w.at4(c, o, y % 2, xx % 2);
                        }
                        out.data[((img * co + o) * 2 * h + y) * 2 * wd + xx] = s;
                    }
                }
            }
        }
        out
    }

    pub fn max_pool2(x: &Arr) -> Arr {
        let (n, c, h, w) = x.dims4();
        let mut out = Arr::zeros(&[n, c, h / 2, w / 2]);
        let mut idx = 0;
        for img in 0..n {
            for ch in 0..c {
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        let mut m = f64::NEG_INFINITY;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            m = m.max(x.at4(img, ch, 2 * y + dy, 2 * xx + dx));
                        }
                        out.data[idx] = m;
                        idx += 1;
                    }
                }
            }
        }
        out
    }

    fn affine_per_channel(x: &Arr, f: impl Fn(usize, f64) -> f64) -> Arr {
        let (_, c, h, w) = x.dims4();
        let hw = h * w;
        let data = x.data.iter().enumerate().map(|(i, &v)| f((i / hw) % c, v)).collect();
        Arr::new(&x.shape, data)
    }

    /// Normalises with the biased batch variance.
    pub fn batch_norm_train(x: &Arr, gamma: &[f64], beta: &[f64], eps: f64) -> Arr {
        let (n, c, h, w) = x.dims4();
        let m = (n * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, &v) in x.data.iter().enumerate() {
            mean[(i / (h * w)) % c] += v / m;
        }
        for (i, &v) in x.data.iter().enumerate() {
            let ch = (i / (h * w)) % c;
            var[ch] += (v - mean[ch]) * (v - mean[ch]) / m;
        }
        batch_norm_eval(x, gamma, beta, &mean, &var, eps)
    }

    pub fn batch_norm_eval(x: &Arr, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Arr {
        affine_per_channel(x, |c, v| gamma[c] * (v - mean[c]) / libm::sqrt(var[c] + eps) + beta[c])
    }

    pub fn relu(x: &Arr) -> Arr {
        Arr::new(&x.shape, x.data.iter().map(|&v| v.max(0.0)).collect())
    }

    pub fn sigmoid(x: &Arr) -> Arr {
        Arr::new(&x.shape, x.data.iter().map(|&v| 1.0 / (1.0 + libm::exp(-v))).collect())
    }

    pub fn zip(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
        assert_eq!(a.shape, b.shape, "zip shapes");
        Arr::new(&a.shape, a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn concat_channels(a: &Arr, b: &Arr) -> Arr {
        let (n, ca, h, w) = a.dims4();
        let cb = b.shape[1];
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for img in 0..n {
            data.extend_from_slice(&a.data[img * ca * hw..(img + 1) * ca * hw]);
            data.extend_from_slice(&b.data[img * cb * hw..(img + 1) * cb * hw]);
        }
        Arr::new(&[n, ca + cb, h, w], data)
    }

    pub fn global_avg_pool(x: &Arr) -> Arr {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let data = x.data.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        Arr::new(&[n, c], data)
    }

    /// `x (N x D) * w (D x E) + b`.
    pub fn linear(x: &Arr, w: &Arr, b: Option<&[f64]>) -> Arr {
        let (n, d) = (x.shape[0], x.shape[1]);
        let e = w.shape[1];
        let mut out = Arr::zeros(&[n, e]);
        for r in 0..n {
            for j in 0..e {
                let mut s = b.map_or(0.0, |b| b[j]);
                for k in 0..d {
                    s += x.data[r * d + k] * w.data[k * e + j];
                }
                out.data[r * e + j] = s;
            }
        }
        out
    }

    pub fn l2_normalize(x: &Arr, eps: f64) -> Arr {
        let d = x.shape[1];
        let mut out = x.clone();
        for row in out.data.chunks_mut(d) {
            let nrm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(eps);
            row.iter_mut().for_each(|v| *v /= nrm);
        }
        out
    }

    /// Mean over rows of `-log softmax(logits)[0]`, logits `[q.k+, q.n_1, ...] / tau`.
    pub fn info_nce(q: &[f64], keys: &[f64], queue: &[f64], n: usize, d: usize, tau: f64) -> f64 {
        let negatives = queue.len() / d;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for r in 0..n {
            let qr = &q[r * d..(r + 1) * d];
            let mut logits = vec![dot(qr, &keys[r * d..(r + 1) * d]) / tau];
            for j in 0..negatives {
                logits.push(dot(qr, &queue[j * d..(j + 1) * d]) / tau);
            }
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + libm::log(logits.iter().map(|&l| libm::exp(l - mx)).sum::<f64>());
            total += lse - logits[0];
        }
        total / n as f64
    }

    pub fn bce_with_logits(z: &[f64], t: &[f32], weight: &[f32]) -> f64 {
        let mut s = 0.0;
        let mut count = 0usize;
        for ((&z, &t), &w) in z.iter().zip(t).zip(weight) {
            if w != 0.0 {
                let p = 1.0 / (1.0 + libm::exp(-z));
                let t = t as f64;
                s -= w as f64 * (t * libm::log(p) + (1.0 - t) * libm::log(1.0 - p));
                count += 1;
            }
        }
        s / count as f64
    }

    pub fn bce(p: &[f64], t: &[f32], weight: &[f32]) -> f64 {
        let mut s = 0.0;
        let mut count = 0usize;
        for ((&p, &t), &w) in p.iter().zip(t).zip(weight) {
            if w != 0.0 {
                let t = t as f64;
                s -= w as f64 * (t * libm::log(p) + (1.0 - t) * libm::log(1.0 - p));
                count += 1;
            }
        }
        s / count as f64
    }

    fn conv(p: &[Arr], l: ConvLayer, x: &Arr) -> Arr {
        conv2d(x, &p[l.w], Some(&p[l.b].data), 1, true)
    }

    fn bn(p: &[Arr], l: BnLayer, x: &Arr) -> Arr {
        batch_norm_eval(
            x,
            &p[l.gamma].data,
            &p[l.beta].data,
            &p[l.mean].data,
            &p[l.var].data,
            crate::unet::BN_EPS as f64,
        )
    }

    fn block(p: &[Arr], b: Block, x: &Arr) -> Arr {
        bn(p, b.bn, &relu(&conv(p, b.conv, x)))
    }

    fn level(p: &[Arr], l: Level, x: &Arr) -> Arr {
        let h = block(p, l.block2, &block(p, l.block1, x));
        let r = bn(p, l.res_bn, &conv(p, l.res_conv, x));
        zip(&h, &r, |a, b| a + b)
    }

    /// Eval-mode U-Net logits (or deepest encoder features) with parameter
    /// values taken from `p`, index-aligned with `model.params`.
    pub fn unet(model: &UNetModel, p: &[Arr], x: &Arr, encoder_only: bool) -> Arr {
        let mut skips = Vec::new();
        let mut h = x.clone();
        for (i, l) in model.encoder.iter().enumerate() {
            if i > 0 {
                h = max_pool2(&h);
            }
            h = level(p, *l, &h);
            skips.push(h.clone());
        }
        if encoder_only {
            return h;
        }
        for (d, dl) in model.decoder.iter().enumerate() {
            let skip = &skips[skips.len() - 2 - d];
            let up = conv_transpose2x2(&h, &p[dl.up.w], Some(&p[dl.up.b].data));
            let skip = match dl.skip {
                Some(b) => block(p, b, skip),
                None => skip.clone(),
            };
            h = level(p, dl.level, &concat_channels(&skip, &up));
        }
        conv(p, model.head, &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_one_seed() {
        for rep in primitive_suite(7, &CheckOptions::default()).unwrap() {
            assert!(rep.max_rel_error < 1e-3, "{}: {}", rep.name, rep.max_rel_error);
            assert!(rep.checked > 0, "{}", rep.name);
        }
    }

    #[test]
    fn linear_is_tight() {
        let rep = linear_check(&mut RngStream::new(3), &CheckOptions::default()).unwrap();
        assert!(rep.max_rel_error < 1e-6, "{}", rep.max_rel_error);
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let rep = corrupted_check(&mut RngStream::new(5), &CheckOptions::default()).unwrap();
        assert!(rep.max_rel_error > 1e-1, "{}", rep.max_rel_error);
    }

    #[test]
    fn unet_composite() {
        let opts = CheckOptions {
            max_coords: 4,
            ..CheckOptions::default()
        };
        let rep = unet_check(21, UNetConfig::default(), &opts).unwrap();
        std::eprintln!("unet max rel error {:e} over {} coords", rep.max_rel_error, rep.checked);
        assert!(rep.max_rel_error < 1e-2, "{}", rep.max_rel_error);
    }

    #[test]
    fn reference_conv_hand_case() {
        let x = reference::Arr::new(&[1, 1, 3, 3], vec![1.0; 9]);
        let w = reference::Arr::new(&[1, 1, 3, 3], vec![1.0; 9]);
        let y = reference::conv2d(&x, &w, None, 1, true);
        assert_eq!(y.data, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn reference_unet_matches_graph_forward() {
        let mut model = UNetModel::build(UNetConfig::default(), &mut RngStream::new(11)).unwrap();
        randomize_bn(&mut model, &mut RngStream::new(12));
        let x = Tensor::randn(&[1, 3, 16, 16], 1.0, &mut RngStream::new(13));
        let p: Vec<_> = model
            .params
            .iter()
            .map(|p| reference::Arr::from_tensor(&p.value))
            .collect();
        let z = reference::unet(&model, &p, &reference::Arr::from_tensor(&x), false);
        let y = model.predict(&x).unwrap();
        let zs = reference::sigmoid(&z);
        for (a, b) in y.data().iter().zip(&zs.data) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
    }
}
