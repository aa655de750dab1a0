//! Momentum-contrast pre-training of the U-Net encoder.
//!
//! A query encoder and its projection head are trained with InfoNCE against
//! keys from a momentum copy; keys are pushed into a FIFO queue that supplies
//! the negatives for later steps.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::augment::{batch_tensor, pretrain_view_rgb8, PretrainAugmentConfig};
use crate::data::Rgb8;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, ParamKey, Var};
use crate::params::{ModelParams, ParamKind};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::train::{adam_step, cosine_lr, AdamConfig, AdamState, ScheduleConfig};
use crate::unet::{he_init, UNetModel, ENCODER_PREFIX};

pub const PROJECTION_DIM: usize = 128;
pub const PROJECTION_PREFIX: &str = "proj.";
/// Graph slot of the projection head's parameters.
pub const HEAD_SLOT: u8 = 1;
/// Denominator guard of the final normalisation.
pub const NORM_EPS: f32 = 1e-12;

const TAG_SHUFFLE: u64 = 1;
const TAG_VIEWS: u64 = 2;
const TAG_PREFILL: u64 = 3;
const TAG_HEAD: u64 = 4;

/// Global average pooling followed by `fc1 -> ReLU -> fc2` and unit
/// normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub params: ModelParams,
    in_dim: usize,
    out_dim: usize,
}

impl ProjectionHead {
    pub fn build(in_dim: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        let mut params = ModelParams::new();
        params.add(
            "proj.fc1.weight",
            ParamKind::Trainable,
            he_init(&[in_dim, in_dim], in_dim, rng),
        );
        params.add("proj.fc1.bias", ParamKind::Trainable, Tensor::zeros(&[in_dim]));
        params.add(
            "proj.fc2.weight",
            ParamKind::Trainable,
            he_init(&[in_dim, out_dim], in_dim, rng),
        );
        params.add("proj.fc2.bias", ParamKind::Trainable, Tensor::zeros(&[out_dim]));
        Self {
            params,
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `features` is `N x in_dim x h x w`; the result is `N x out_dim` with
    /// unit rows.
    pub fn project(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let c = g.value(features).dims4("project")?.1;
        if c != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "project",
                axis: "feature channels",
                expected: self.in_dim,
                actual: c,
            });
        }
        let p = |g: &mut Graph, i: usize| {
            g.param(
                ParamKey {
                    slot: HEAD_SLOT,
                    index: i,
                },
                self.params.value(i),
            )
        };
        let pooled = g.global_avg_pool(features)?;
        let (w1, b1, w2, b2) = (p(g, 0), p(g, 1), p(g, 2), p(g, 3));
        let h = g.linear(pooled, w1, Some(b1))?;
        let h = g.relu(h);
        let z = g.linear(h, w2, Some(b2))?;
        g.l2_normalize(z, NORM_EPS)
    }

    /// Gradient-free projection of precomputed features.
    pub fn project_values(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let f = g.constant(features.clone());
        let z = self.project(&mut g, f)?;
        Ok(g.value(z).clone())
    }
}

/// Ring buffer of `capacity` unit-norm key rows of length `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyQueue {
    dim: usize,
    capacity: usize,
    data: Vec<f32>,
    ptr: usize,
    len: usize,
}

impl KeyQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "key queue needs capacity and dim >= 1, got {capacity}x{dim}"
            )));
        }
        Ok(Self {
            dim,
            capacity,
            data: vec![0.0; capacity * dim],
            ptr: 0,
            len: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Next write position, `0 <= ptr < capacity`.
    pub fn ptr(&self) -> usize {
        self.ptr
    }

    /// Number of occupied rows.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.capacity
    }

    /// Occupied rows in slot order. Rows fill from slot 0, so the occupied
    /// region is always a prefix.
    pub fn rows(&self) -> &[f32] {
        &self.data[..self.len * self.dim]
    }

    /// Occupied rows from oldest to newest.
    pub fn fifo_rows(&self) -> Vec<f32> {
        if !self.is_full() {
            return self.rows().to_vec();
        }
        let split = self.ptr * self.dim;
        let mut out = self.data[split..].to_vec();
        out.extend_from_slice(&self.data[..split]);
        out
    }

    /// Writes `keys` (rows of length `dim`) at `ptr`, wrapping.
    pub fn enqueue(&mut self, keys: &[f32]) -> Result<()> {
        if keys.len() % self.dim != 0 {
            return Err(Error::ShapeMismatch {
                op: "enqueue",
                axis: "key row length",
                expected: self.dim,
                actual: keys.len(),
            });
        }
        let n = keys.len() / self.dim;
        if n > self.capacity {
            return Err(Error::invalid(format!(
                "enqueue: {n} keys exceed queue capacity {}",
                self.capacity
            )));
        }
        for row in keys.chunks(self.dim) {
            let at = self.ptr * self.dim;
            self.data[at..at + self.dim].copy_from_slice(row);
            self.ptr = (self.ptr + 1) % self.capacity;
        }
        self.len = (self.len + n).min(self.capacity);
        Ok(())
    }

    /// Restores a queue from its occupied rows and pointer.
    pub fn from_parts(capacity: usize, dim: usize, rows: &[f32], ptr: usize) -> Result<Self> {
        let mut q = Self::new(capacity, dim)?;
        if rows.len() % dim != 0 || rows.len() / dim > capacity || ptr >= capacity {
            return Err(Error::Checkpoint(format!(
                "queue state: {} values, ptr {ptr}, capacity {capacity}x{dim}",
                rows.len()
            )));
        }
        q.len = rows.len() / dim;
        q.data[..rows.len()].copy_from_slice(rows);
        q.ptr = ptr;
        Ok(q)
    }
}

/// `theta_m <- alpha * theta_m + (1 - alpha) * theta_e` for every trainable
/// parameter whose name starts with `prefix`; buffers under the prefix are
/// copied from `theta_e`.
pub fn momentum_update(theta_m: &mut ModelParams, theta_e: &ModelParams, alpha: f32, prefix: &str) -> Result<()> {
    if !theta_m.same_layout(theta_e) {
        return Err(Error::invalid("momentum_update: parameter layouts differ"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("momentum {alpha} outside [0, 1]")));
    }
    for (m, e) in theta_m.iter_mut().zip(theta_e.iter()) {
        if !m.name.starts_with(prefix) {
            continue;
        }
        match m.kind {
            ParamKind::Buffer => m.value.data_mut().copy_from_slice(e.value.data()),
            ParamKind::Trainable => {
                for (a, &b) in m.value.data_mut().iter_mut().zip(e.value.data()) {
                    *a = alpha * *a + (1.0 - alpha) * b;
                }
            }
        }
    }
    Ok(())
}

/// InfoNCE value of `n` queries against their positive keys and the queued
/// negatives, averaged over the batch.
pub fn info_nce(q: &[f32], k_pos: &[f32], queue: &[f32], dim: usize, tau: f32) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid("info_nce: temperature must be > 0"));
    }
    if dim == 0 || q.len() % dim != 0 || k_pos.len() != q.len() || queue.len() % dim != 0 {
        return Err(Error::invalid(format!(
            "info_nce: lengths q {}, k {}, queue {} incompatible with dim {dim}",
            q.len(),
            k_pos.len(),
            queue.len()
        )));
    }
    Ok(crate::graph::info_nce_forward(q, k_pos, queue, q.len() / dim, dim, tau).0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoCoConfig {
    pub tau: f32,
    pub queue_len: usize,
    pub momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f32,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub augment: PretrainAugmentConfig,
    /// Fill the queue from the momentum encoder before the first update.
    pub prefill: bool,
    pub seed: u64,
}

impl Default for MoCoConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            queue_len: 4096,
            momentum: 0.999,
            batch_size: 64,
            epochs: 600,
            weight_decay: 1e-4,
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            augment: PretrainAugmentConfig::default(),
            prefill: true,
            seed: 0,
        }
    }
}

impl MoCoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1], got {}", self.momentum));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.queue_len < self.batch_size {
            return bad(format!(
                "queue_len {} smaller than batch_size {}",
                self.queue_len, self.batch_size
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        self.schedule.validate()?;
        self.augment.validate()
    }
}

/// Everything a pre-training run mutates.
#[derive(Debug, Clone)]
pub struct MoCoState {
    pub query: UNetModel,
    pub key: UNetModel,
    pub head_q: ProjectionHead,
    pub head_k: ProjectionHead,
    pub queue: KeyQueue,
    pub adam_encoder: AdamState,
    pub adam_head: AdamState,
    pub tau: f32,
    pub alpha: f32,
    pub weight_decay: f32,
    pub steps: u64,
}

impl MoCoState {
    /// The key side starts as an exact copy of the query side.
    pub fn new(model: UNetModel, cfg: &MoCoConfig) -> Result<Self> {
        cfg.validate()?;
        let dim = model.config.feature_channels();
        let head_q = ProjectionHead::build(dim, PROJECTION_DIM, &mut RngStream::new(cfg.seed).fork(TAG_HEAD));
        let adam_encoder = AdamState::new(&model.params, cfg.adam, |p| p.name.starts_with(ENCODER_PREFIX));
        let adam_head = AdamState::new(&head_q.params, cfg.adam, |_| true);
        Ok(Self {
            key: model.clone(),
            query: model,
            head_k: head_q.clone(),
            head_q,
            queue: KeyQueue::new(cfg.queue_len, PROJECTION_DIM)?,
            adam_encoder,
            adam_head,
            tau: cfg.tau,
            alpha: cfg.momentum,
            weight_decay: cfg.weight_decay,
            steps: 0,
        })
    }

    /// Momentum-side keys for a batch `N x C x H x W`; batch-norm uses the
    /// batch's own statistics and no gradient is recorded.
    pub fn keys(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.key.features_batch_stats(x)?;
        self.head_k.project_values(&f)
    }

    /// Loss of one step without applying it.
    pub fn loss(&self, view_q: &Tensor, view_k: &Tensor) -> Result<f64> {
        let f = self.query.features_batch_stats(view_q)?;
        let q = self.head_q.project_values(&f)?;
        let k = self.keys(view_k)?;
        info_nce(q.data(), k.data(), self.queue.rows(), PROJECTION_DIM, self.tau)
    }

    /// Encoder parameters, plus the projection head when asked.
    pub fn encoder_checkpoint(&self, include_head: bool) -> Vec<(String, Tensor)> {
        let mut out = self.query.params.named_tensors(ENCODER_PREFIX);
        if include_head {
            out.extend(self.head_q.params.named_tensors(PROJECTION_PREFIX));
        }
        out
    }
}

/// One optimisation step: `view_q` through the query encoder and head,
/// `view_k` through the momentum side, InfoNCE against the queue, Adam on the
/// query side, momentum update, then the keys are enqueued.
pub fn pretrain_step(state: &mut MoCoState, view_q: &Tensor, view_k: &Tensor, lr: f32) -> Result<f64> {
    let n = view_q.dims4("pretrain_step")?.0;
    if n < 2 || view_k.shape() != view_q.shape() {
        return Err(Error::invalid(format!(
            "pretrain_step: need two equal batches of >= 2 views, got {:?} and {:?}",
            view_q.shape(),
            view_k.shape()
        )));
    }
    let k = state.keys(view_k)?;

    let mut g = Graph::new();
    let x = g.constant(view_q.clone());
    let f = state.query.encoder_features(&mut g, x, Mode::Train)?;
    let q = state.head_q.project(&mut g, f)?;
    let loss = g.info_nce(q, &k, state.queue.rows(), state.tau)?;
    g.backward(loss)?;
    state.query.params.zero_grad();
    state.head_q.params.zero_grad();
    g.accumulate_param_grads(state.query.slot(), &mut state.query.params);
    g.accumulate_param_grads(HEAD_SLOT, &mut state.head_q.params);
    let value = g.value(loss).data()[0] as f64;
    drop(g);

    adam_step(&mut state.query.params, &mut state.adam_encoder, lr, state.weight_decay);
    adam_step(&mut state.head_q.params, &mut state.adam_head, lr, state.weight_decay);
    momentum_update(&mut state.key.params, &state.query.params, state.alpha, ENCODER_PREFIX)?;
    momentum_update(
        &mut state.head_k.params,
        &state.head_q.params,
        state.alpha,
        PROJECTION_PREFIX,
    )?;
    state.queue.enqueue(k.data())?;
    state.steps += 1;
    Ok(value)
}

/// One row of the pre-training curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    /// 1-based.
    pub epoch: usize,
    /// Global step, 1-based.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub state: MoCoState,
    pub history: Vec<LossRow>,
}

/// Two independent augmented views of each listed image.
pub fn make_views(
    images: &[Rgb8],
    indices: &[usize],
    cfg: &PretrainAugmentConfig,
    root: &RngStream,
    epoch: u64,
) -> Result<(Tensor, Tensor)> {
    let mut a = Vec::with_capacity(indices.len());
    let mut b = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut rng = root.fork_path(&[TAG_VIEWS, epoch, i as u64]);
        a.push(pretrain_view_rgb8(&images[i], cfg, &mut rng)?);
        b.push(pretrain_view_rgb8(&images[i], cfg, &mut rng)?);
    }
    Ok((batch_tensor(&a)?, batch_tensor(&b)?))
}

/// Shuffled full batches of one epoch; a trailing partial batch is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, root: &RngStream, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    root.fork_path(&[TAG_SHUFFLE, epoch]).shuffle(&mut order);
    order.chunks_exact(batch_size).map(|c| c.to_vec()).collect()
}

/// Pre-trains `model`'s encoder on unlabeled images. `on_row` sees every
/// loss row as it is produced.
pub fn pretrain(
    model: UNetModel,
    images: &[Rgb8],
    cfg: &MoCoConfig,
    on_row: &mut dyn FnMut(&LossRow),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if images.len() < cfg.batch_size {
        return Err(Error::invalid(format!(
            "pretrain: {} images cannot fill one batch of {}",
            images.len(),
            cfg.batch_size
        )));
    }
    let mut state = MoCoState::new(model, cfg)?;
    let root = RngStream::new(cfg.seed);
    if cfg.prefill {
        prefill(&mut state, images, cfg, &root)?;
    }
    let mut history = Vec::new();
    for e in 0..cfg.epochs {
        let lr = cosine_lr(e, &cfg.schedule);
        for batch in epoch_batches(images.len(), cfg.batch_size, &root, e as u64) {
            let (vq, vk) = make_views(images, &batch, &cfg.augment, &root, e as u64)?;
            let loss = pretrain_step(&mut state, &vq, &vk, lr as f32)?;
            let row = LossRow {
                epoch: e + 1,
                step: state.steps,
                loss,
                lr,
            };
            on_row(&row);
            history.push(row);
        }
        log::debug!("pretrain epoch {}: lr {lr:.3e}", e + 1);
    }
    Ok(PretrainOutcome { state, history })
}

/// Fills the queue with momentum-side keys of `ceil(queue_len / batch)`
/// batches before any update.
pub fn prefill(state: &mut MoCoState, images: &[Rgb8], cfg: &MoCoConfig, root: &RngStream) -> Result<()> {
    let rounds = cfg.queue_len.div_ceil(cfg.batch_size);
    let prefill_root = root.fork(TAG_PREFILL);
    let mut done = 0;
    let mut pass = 0u64;
    while done < rounds {
        for batch in epoch_batches(images.len(), cfg.batch_size, &prefill_root, pass) {
            if done == rounds {
                break;
            }
            let (_, vk) = make_views(images, &batch, &cfg.augment, &prefill_root, pass)?;
            let k = state.keys(&vk)?;
            let take = (cfg.queue_len - state.queue.len()).min(batch.len());
            state.queue.enqueue(&k.data()[..take * PROJECTION_DIM])?;
            done += 1;
        }
        pass += 1;
    }
    Ok(())
}

/// Mean loss of the first and last `window` epochs.
pub fn loss_trend(history: &[LossRow], window: usize) -> Option<(f64, f64)> {
    let last = history.last()?.epoch;
    if last < 2 * window {
        return None;
    }
    let mean = |lo: usize, hi: usize| {
        let v: Vec<f64> = history
            .iter()
            .filter(|r| r.epoch >= lo && r.epoch <= hi)
            .map(|r| r.loss)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    Some((mean(1, window), mean(last - window + 1, last)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::UNetConfig;

    #[test]
    fn info_nce_closed_form() {
        let q = [1.0, 0.0, 0.0];
        let queue = [0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let l = info_nce(&q, &q, &queue, 3, 1.0).unwrap();
        assert!((l - libm::log(1.0 + 2.0 / core::f64::consts::E)).abs() < 1e-12);
        assert_eq!(info_nce(&q, &q, &[], 3, 1.0).unwrap(), 0.0);
        assert!(info_nce(&q, &q, &[], 3, 0.0).is_err());
    }

    #[test]
    fn queue_hand_cases() {
        let mut q = KeyQueue::new(4, 1).unwrap();
        q.enqueue(&[1.0, 2.0, 3.0]).unwrap();
        q.enqueue(&[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(q.fifo_rows(), vec![3.0, 4.0, 5.0, 6.0]);
        let mut q = KeyQueue::new(4, 1).unwrap();
        for i in 0..5 {
            q.enqueue(&[i as f32]).unwrap();
        }
        assert_eq!(q.ptr(), 1);
        assert!(q.enqueue(&[0.0; 5]).is_err());
    }

    #[test]
    fn momentum_fixed_points() {
        let mut rng = RngStream::new(3);
        let e = UNetModel::build(UNetConfig::default(), &mut rng).unwrap().params;
        let m0 = UNetModel::build(UNetConfig::default(), &mut rng).unwrap().params;
        let mut m = m0.clone();
        momentum_update(&mut m, &e, 1.0, "").unwrap();
        assert_eq!(m, m0);
        momentum_update(&mut m, &e, 0.0, "").unwrap();
        assert!(m.iter().zip(e.iter()).all(|(a, b)| a.value == b.value));

        let mut z = ModelParams::new();
        z.add("w", ParamKind::Trainable, Tensor::zeros(&[1]));
        let mut o = ModelParams::new();
        o.add("w", ParamKind::Trainable, Tensor::full(&[1], 1.0));
        momentum_update(&mut z, &o, 0.999, "").unwrap();
        assert!((z.value(0).data()[0] - 0.001).abs() < 1e-6);
    }

    #[test]
    fn projection_rows_are_unit() {
        let mut rng = RngStream::new(5);
        let head = ProjectionHead::build(8, 6, &mut rng);
        let f = Tensor::randn(&[3, 8, 2, 2], 1.0, &mut rng);
        let z = head.project_values(&f).unwrap();
        assert_eq!(z.shape(), &[3, 6]);
        for row in z.data().chunks(6) {
            let n: f32 = row.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert!(head.project_values(&Tensor::zeros(&[1, 7, 2, 2])).is_err());
    }

    #[test]
    fn step_leaves_momentum_grads_zero_and_fills_queue() {
        let mut rng = RngStream::new(9);
        let model = UNetModel::build(UNetConfig::default(), &mut rng).unwrap();
        let cfg = MoCoConfig {
            queue_len: 8,
            batch_size: 2,
            ..MoCoConfig::default()
        };
        let mut s = MoCoState::new(model, &cfg).unwrap();
        let a = Tensor::uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng);
        s.queue.enqueue(&s.keys(&a).unwrap().into_data()).unwrap();
        let before = s.key.params.clone();
        let l = pretrain_step(&mut s, &a, &b, 1e-3).unwrap();
        assert!(l.is_finite() && l >= 0.0);
        assert_eq!(s.queue.len(), 4);
        assert!(s.key.params.iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
        assert!(s.head_k.params.iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
        assert!(s.query.params.iter().any(|p| p.grad.data().iter().any(|&g| g != 0.0)));
        // momentum side moved by (1 - alpha) of the gap
        let idx = s.key.params.index_of("encoder.0.block1.conv.weight").unwrap();
        let (m0, m1, e1) = (before.value(idx), s.key.params.value(idx), s.query.params.value(idx));
        let drift: f32 = m0.data().iter().zip(m1.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let gap: f32 = m0.data().iter().zip(e1.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(libm::sqrtf(drift) <= (1.0 - cfg.momentum) * libm::sqrtf(gap) * 1.001 + 1e-9);
    }
}
