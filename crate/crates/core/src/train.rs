//! Supervised fine-tuning: Adam, cosine learning-rate restarts, the
//! segmentation loss and the training loop with periodic checkpoints and
//! validation-Dice checkpoint selection.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::augment::{finetune_augment, FinetuneAugmentConfig};
use crate::data::{Mask, Sample};
use crate::error::{Error, Result};
use crate::eval::{pooled_dice, EvalItem};
use crate::graph::{Graph, Mode, Var};
use crate::params::{ModelParams, Param, ParamKind};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::unet::UNetModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for the parameters selected at construction; the others
/// are never touched by [`adam_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    /// `(param index, m, v)`.
    pub moments: Vec<(usize, Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    /// Tracks every trainable parameter accepted by `select`.
    pub fn new(params: &ModelParams, config: AdamConfig, select: impl Fn(&Param) -> bool) -> Self {
        let moments = params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.kind == ParamKind::Trainable && select(p))
            .map(|(i, p)| (i, vec![0.0; p.value.numel()], vec![0.0; p.value.numel()]))
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    pub fn tracked(&self) -> impl Iterator<Item = usize> + '_ {
        self.moments.iter().map(|m| m.0)
    }

    /// Named tensors `<prefix>m.<param>`, `<prefix>v.<param>` and the step
    /// counter split into four exact 16-bit chunks.
    pub fn to_tensors(&self, params: &ModelParams, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.moments.len() + 1);
        for (i, m, v) in &self.moments {
            let p = params.param(*i);
            out.push((
                format!("{prefix}m.{}", p.name),
                Tensor::new(p.value.shape(), m.clone()).expect("shape"),
            ));
            out.push((
                format!("{prefix}v.{}", p.name),
                Tensor::new(p.value.shape(), v.clone()).expect("shape"),
            ));
        }
        out.push((format!("{prefix}step"), u64_tensor(self.step)));
        out
    }

    /// Restores moments for the parameters this state already tracks.
    pub fn load_tensors(&mut self, params: &ModelParams, tensors: &[(String, Tensor)], prefix: &str) -> Result<()> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::MissingParam(name.into()))
        };
        let step = tensor_u64(find(&format!("{prefix}step"))?)?;
        let mut moments = self.moments.clone();
        for (i, m, v) in &mut moments {
            let name = &params.param(*i).name;
            let tm = find(&format!("{prefix}m.{name}"))?;
            let tv = find(&format!("{prefix}v.{name}"))?;
            if tm.numel() != m.len() || tv.numel() != v.len() {
                return Err(Error::Checkpoint(format!("optimizer moment shape mismatch for {name}")));
            }
            m.copy_from_slice(tm.data());
            v.copy_from_slice(tv.data());
        }
        self.moments = moments;
        self.step = step;
        Ok(())
    }
}

/// Exact u64 storage in an f32 tensor: four 16-bit chunks, low first.
pub fn u64_tensor(v: u64) -> Tensor {
    let chunks = (0..4).map(|k| ((v >> (16 * k)) & 0xFFFF) as f32).collect();
    Tensor::new(&[4], chunks).expect("shape")
}

pub fn tensor_u64(t: &Tensor) -> Result<u64> {
    if t.numel() != 4 {
        return Err(Error::Checkpoint("counter tensor must have 4 elements".into()));
    }
    let mut v = 0u64;
    for (k, &c) in t.data().iter().enumerate() {
        if !(0.0..65536.0).contains(&c) || libm::truncf(c) != c {
            return Err(Error::Checkpoint(format!("invalid counter chunk {c}")));
        }
        v |= (c as u64) << (16 * k);
    }
    Ok(v)
}

/// One Adam update with bias correction. Weight decay enters as an L2 term
/// `wd * theta` added to the gradient.
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState, lr: f32, weight_decay: f32) {
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = (1.0 - libm::pow(beta1 as f64, t as f64)) as f32;
    let bc2 = (1.0 - libm::pow(beta2 as f64, t as f64)) as f32;
    for (i, m, v) in &mut state.moments {
        let p = params.param(*i);
        let (theta, grad) = (p.value.data(), p.grad.data());
        let mut updated = theta.to_vec();
        for k in 0..theta.len() {
            let g = grad[k] + weight_decay * theta[k];
            m[k] = beta1 * m[k] + (1.0 - beta1) * g;
            v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            updated[k] = theta[k] - lr * mh / (libm::sqrtf(vh) + eps);
        }
        params.value_mut(*i).data_mut().copy_from_slice(&updated);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    CosineRestarts,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub eta_max: f64,
    pub eta_min: f64,
    pub period: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::CosineRestarts,
            eta_max: 1e-2,
            eta_min: 1e-8,
            period: 50,
        }
    }
}

impl ScheduleConfig {
    pub fn constant(lr: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            eta_max: lr,
            eta_min: lr,
            period: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min <= self.eta_max) || self.eta_min < 0.0 || self.period == 0 {
            return Err(Error::Config(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }
}

/// `eta_min + (eta_max - eta_min) * (1 + cos(pi * (epoch mod period) / period)) / 2`,
/// evaluated as `eta_max - (eta_max - eta_min) * (1 - cos) / 2` so the restart
/// value is exactly `eta_max`.
pub fn cosine_lr(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    match cfg.kind {
        ScheduleKind::Constant => cfg.eta_max,
        ScheduleKind::CosineRestarts => {
            let phase = (epoch % cfg.period) as f64 / cfg.period as f64;
            let c = libm::cos(core::f64::consts::PI * phase);
            cfg.eta_max - 0.5 * (cfg.eta_max - cfg.eta_min) * (1.0 - c)
        }
    }
}

/// Pixel-wise binary cross-entropy of a probability map, averaged over
/// in-FOV pixels.
pub fn segmentation_loss(g: &mut Graph, pred: Var, target: &Mask, fov: Option<&Mask>) -> Result<Var> {
    let t = target.to_f32();
    let w = fov.map_or_else(|| vec![1.0; t.len()], Mask::to_f32);
    g.bce(pred, &t, &w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub checkpoint_every: usize,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub augment: FinetuneAugmentConfig,
    /// Which target mask of each sample is learned.
    pub target: String,
    /// Threshold of the monitoring Dice.
    pub monitor_threshold: f32,
    pub seed: u64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            epochs: 1500,
            batch_size: 4,
            weight_decay: 0.0,
            checkpoint_every: 10,
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            augment: FinetuneAugmentConfig::default(),
            target: String::from(crate::data::VESSEL_TARGET),
            monitor_threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "epochs, batch_size and checkpoint_every must be >= 1".into(),
            ));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        self.schedule.validate()?;
        self.augment.validate()
    }

    pub fn is_checkpoint_epoch(&self, epoch: usize) -> bool {
        epoch % self.checkpoint_every == 0 || epoch == self.epochs
    }
}

/// One row per completed epoch (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Present on checkpoint epochs with a non-empty validation set.
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub val_dice: Option<f64>,
}

/// Optimizer state needed to resume bit-exactly after `epoch` completed
/// epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub adam: AdamState,
}

pub const ADAM_PREFIX: &str = "adam.";
pub const EPOCH_TENSOR: &str = "train.epoch";

impl TrainState {
    pub fn to_tensors(&self, params: &ModelParams) -> Vec<(String, Tensor)> {
        let mut t = self.adam.to_tensors(params, ADAM_PREFIX);
        t.push((EPOCH_TENSOR.into(), u64_tensor(self.epoch as u64)));
        t
    }

    /// Rebuilds the state for a model prepared the same way as the run that
    /// wrote `tensors`.
    pub fn from_tensors(params: &ModelParams, config: AdamConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let epoch_t =
            crate::data::find_tensor(tensors, EPOCH_TENSOR).ok_or_else(|| Error::MissingParam(EPOCH_TENSOR.into()))?;
        let mut adam = AdamState::new(params, config, |_| true);
        adam.load_tensors(params, tensors, ADAM_PREFIX)?;
        Ok(Self {
            epoch: tensor_u64(epoch_t)? as usize,
            adam,
        })
    }
}

/// Receives the model at every checkpoint epoch.
pub trait CheckpointSink {
    fn save(&mut self, record: &CheckpointRecord, model: &UNetModel, state: &TrainState) -> Result<()>;
}

/// Keeps only the best checkpoint so far (ties keep the earlier one); with no
/// validation scores the latest wins.
#[derive(Debug, Clone, Default)]
pub struct BestSink {
    pub best: Option<(CheckpointRecord, ModelParams)>,
}

impl CheckpointSink for BestSink {
    fn save(&mut self, record: &CheckpointRecord, model: &UNetModel, _: &TrainState) -> Result<()> {
        let better = match (&self.best, record.val_dice) {
            (None, _) => true,
            (Some((b, _)), Some(d)) => b.val_dice.map_or(true, |bd| d > bd),
            (Some((b, _)), None) => b.val_dice.is_none(),
        };
        if better {
            self.best = Some((*record, model.params.clone()));
        }
        Ok(())
    }
}

/// Keeps every checkpoint in memory.
#[derive(Debug, Clone, Default)]
pub struct MemorySink {
    pub checkpoints: Vec<(CheckpointRecord, ModelParams, TrainState)>,
}

impl CheckpointSink for MemorySink {
    fn save(&mut self, record: &CheckpointRecord, model: &UNetModel, state: &TrainState) -> Result<()> {
        self.checkpoints.push((*record, model.params.clone(), state.clone()));
        Ok(())
    }
}

/// Per-sample-id counts of augmentations, gradient contributions and
/// validation evaluations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counters {
    pub augmented: BTreeMap<String, usize>,
    pub gradient: BTreeMap<String, usize>,
    pub validated: BTreeMap<String, usize>,
}

fn bump(map: &mut BTreeMap<String, usize>, id: &str) {
    *map.entry(id.into()).or_insert(0) += 1;
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub history: Vec<HistoryRow>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub counters: Counters,
    pub state: TrainState,
}

const TAG_SHUFFLE: u64 = 1;
const TAG_AUGMENT: u64 = 2;

/// Padded batch: image tensor plus flattened target and loss weight (FOV
/// times validity of the unpadded region).
pub struct Batch {
    pub x: Tensor,
    pub target: Vec<f32>,
    pub weight: Vec<f32>,
}

/// Pads every sample bottom-right to a common size divisible by `multiple`.
pub fn make_batch(samples: &[Sample], target: &str, multiple: usize) -> Result<Batch> {
    let h = samples
        .iter()
        .map(|s| s.image.height)
        .max()
        .unwrap_or(0)
        .next_multiple_of(multiple);
    let w = samples
        .iter()
        .map(|s| s.image.width)
        .max()
        .unwrap_or(0)
        .next_multiple_of(multiple);
    let mut images = Vec::with_capacity(samples.len());
    let mut tgt = Vec::with_capacity(samples.len() * h * w);
    let mut wgt = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        s.validate()?;
        images.push(s.image.pad_to(h, w));
        tgt.extend(s.target(target)?.pad_to(h, w).to_f32());
        wgt.extend(s.fov_or_full().pad_to(h, w).to_f32());
    }
    Ok(Batch {
        x: crate::augment::batch_tensor(&images)?,
        target: tgt,
        weight: wgt,
    })
}

/// Eval-mode probability map at the sample's own size.
pub fn predict_sample(model: &UNetModel, image: &crate::data::Image) -> Result<crate::data::Image> {
    let m = model.config.size_multiple();
    let (h, w) = image.dims();
    let padded = image.pad_to(h.next_multiple_of(m), w.next_multiple_of(m));
    let p = model.predict(&padded.to_tensor())?;
    Ok(crate::data::Image::from_tensor(&p, 0)?.crop(0, 0, h, w))
}

/// Mean-over-batches training loop. `resume` continues from a saved
/// [`TrainState`] whose parameters are already loaded into `model`.
pub fn finetune(
    model: &mut UNetModel,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainRunConfig,
    sink: &mut dyn CheckpointSink,
    resume: Option<TrainState>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("finetune: training set is empty"));
    }
    let mut state = match resume {
        Some(s) => s,
        None => TrainState {
            epoch: 0,
            adam: AdamState::new(&model.params, cfg.adam, |_| true),
        },
    };
    let root = RngStream::new(cfg.seed);
    let mut counters = Counters::default();
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    let multiple = model.config.size_multiple();
    while state.epoch < cfg.epochs {
        let e = state.epoch;
        let lr = cosine_lr(e, &cfg.schedule);
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.fork_path(&[TAG_SHUFFLE, e as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let augmented: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    bump(&mut counters.augmented, &train[i].id);
                    finetune_augment(
                        &train[i],
                        &cfg.augment,
                        &mut root.fork_path(&[TAG_AUGMENT, e as u64, i as u64]),
                    )
                })
                .collect();
            let batch = make_batch(&augmented, &cfg.target, multiple)?;
            let mut g = Graph::new();
            let x = g.constant(batch.x);
            let z = model.forward_logits(&mut g, x, Mode::Train)?;
            let loss = g.bce_with_logits(z, &batch.target, &batch.weight)?;
            g.backward(loss)?;
            model.params.zero_grad();
            g.accumulate_param_grads(model.slot(), &mut model.params);
            for &i in chunk {
                bump(&mut counters.gradient, &train[i].id);
            }
            adam_step(&mut model.params, &mut state.adam, lr as f32, cfg.weight_decay);
            loss_sum += g.value(loss).data()[0] as f64;
            batches += 1;
        }
        state.epoch += 1;
        let epoch = state.epoch;
        let mut row = HistoryRow {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            val_dice: None,
        };
        if cfg.is_checkpoint_epoch(epoch) {
            if !val.is_empty() {
                row.val_dice = Some(validation_dice(model, val, cfg, &mut counters)?);
            }
            let record = CheckpointRecord {
                epoch,
                val_dice: row.val_dice,
            };
            sink.save(&record, model, &state)?;
            checkpoints.push(record);
        }
        log::debug!("finetune epoch {epoch}: lr {lr:.3e} loss {:.5}", row.train_loss);
        history.push(row);
    }
    Ok(FinetuneOutcome {
        history,
        checkpoints,
        counters,
        state,
    })
}

fn validation_dice(model: &UNetModel, val: &[Sample], cfg: &TrainRunConfig, counters: &mut Counters) -> Result<f64> {
    let mut items = Vec::with_capacity(val.len());
    for s in val {
        bump(&mut counters.validated, &s.id);
        items.push(EvalItem {
            prob: predict_sample(model, &s.image)?,
            gt: s.target(&cfg.target)?.clone(),
            fov: s.fov_or_full(),
        });
    }
    pooled_dice(&items, cfg.monitor_threshold)
}

/// Highest validation Dice, earliest on ties; without any scores, the last
/// checkpoint.
pub fn select_checkpoint(records: &[CheckpointRecord]) -> Result<CheckpointRecord> {
    let last = *records
        .last()
        .ok_or_else(|| Error::invalid("select_checkpoint: no checkpoints"))?;
    let mut best: Option<CheckpointRecord> = None;
    for r in records {
        if let Some(d) = r.val_dice {
            if best.map_or(true, |b| d > b.val_dice.expect("scored")) {
                best = Some(*r);
            }
        }
    }
    Ok(best.unwrap_or(last))
}

/// Epoch of the checkpoint [`select_checkpoint`] picks from a history.
pub fn epochs_to_best(history: &[HistoryRow]) -> Result<usize> {
    let records: Vec<CheckpointRecord> = history
        .iter()
        .filter(|r| r.val_dice.is_some())
        .map(|r| CheckpointRecord {
            epoch: r.epoch,
            val_dice: r.val_dice,
        })
        .collect();
    if records.is_empty() {
        return history
            .last()
            .map(|r| r.epoch)
            .ok_or_else(|| Error::invalid("epochs_to_best: empty history"));
    }
    Ok(select_checkpoint(&records)?.epoch)
}

/// Loads encoder weights from `tensors`; decoder and head keep their
/// initialisation.
pub fn init_encoder_from(model: &mut UNetModel, tensors: &[(String, Tensor)]) -> Result<usize> {
    model.params.load_prefixed(tensors, crate::unet::ENCODER_PREFIX)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_exact() {
        let cfg = ScheduleConfig::default();
        assert_eq!(cosine_lr(0, &cfg), 1e-2);
        assert_eq!(cosine_lr(50, &cfg), 1e-2);
        assert!((cosine_lr(25, &cfg) - 0.5 * (1e-2 + 1e-8)).abs() < 1e-15);
        for e in 0..200 {
            let lr = cosine_lr(e, &cfg);
            assert!((1e-8..=1e-2).contains(&lr));
            assert_eq!(lr, cosine_lr(e + 50, &cfg));
        }
        assert_eq!(cosine_lr(7, &ScheduleConfig::constant(1e-3)), 1e-3);
    }

    fn single_param(v: Vec<f32>) -> ModelParams {
        let mut p = ModelParams::new();
        let n = v.len();
        p.add("w", ParamKind::Trainable, Tensor::new(&[n], v).unwrap());
        p
    }

    #[test]
    fn adam_fixed_point_and_sign_step() {
        let mut p = single_param(vec![1.0, -2.0]);
        let mut s = AdamState::new(&p, AdamConfig::default(), |_| true);
        adam_step(&mut p, &mut s, 0.1, 0.0);
        assert_eq!(p.value(0).data(), &[1.0, -2.0]);

        let mut p = single_param(vec![1.0, -2.0, 0.5]);
        p.grad_mut(0).data_mut().copy_from_slice(&[3.0, -0.01, 200.0]);
        let mut s = AdamState::new(&p, AdamConfig::default(), |_| true);
        adam_step(&mut p, &mut s, 0.1, 0.0);
        let d: Vec<f32> = p
            .value(0)
            .data()
            .iter()
            .zip([1.0, -2.0, 0.5])
            .map(|(a, b)| a - b)
            .collect();
        for (di, sign) in d.iter().zip([-1.0f32, 1.0, -1.0]) {
            assert!((di - 0.1 * sign).abs() < 1e-5, "{di}");
        }
    }

    #[test]
    fn adam_weight_decay_shrinks() {
        let mut p = single_param(vec![1.0, -1.0]);
        let mut s = AdamState::new(&p, AdamConfig::default(), |_| true);
        adam_step(&mut p, &mut s, 0.01, 0.1);
        assert!(p.value(0).data()[0] < 1.0 && p.value(0).data()[1] > -1.0);
    }

    #[test]
    fn u64_counter_round_trip() {
        for v in [0u64, 1, 65535, 65536, u64::MAX, 0x1234_5678_9abc_def0] {
            assert_eq!(tensor_u64(&u64_tensor(v)).unwrap(), v);
        }
    }

    #[test]
    fn selection_rules() {
        let rec = |epoch, d: Option<f64>| CheckpointRecord { epoch, val_dice: d };
        let r = [rec(10, Some(0.5)), rec(20, Some(0.9)), rec(30, Some(0.7))];
        assert_eq!(select_checkpoint(&r).unwrap().epoch, 20);
        let flat = [rec(10, Some(0.5)), rec(20, Some(0.5))];
        assert_eq!(select_checkpoint(&flat).unwrap().epoch, 10);
        assert_eq!(select_checkpoint(&[rec(10, None), rec(20, None)]).unwrap().epoch, 20);
        assert!(select_checkpoint(&[]).is_err());
        let hist: Vec<HistoryRow> = (1..=200)
            .map(|e| HistoryRow {
                epoch: e,
                lr: 0.0,
                train_loss: 0.0,
                val_dice: (e % 10 == 0).then_some(if e == 120 { 0.9 } else { 0.1 }),
            })
            .collect();
        assert_eq!(epochs_to_best(&hist).unwrap(), 120);
    }

    #[test]
    fn bce_half_is_ln2() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::full(&[1, 1, 2, 2], 0.5));
        let t = Mask::new(2, 2, vec![1, 0, 1, 0]).unwrap();
        let l = segmentation_loss(&mut g, p, &t, None).unwrap();
        assert!((g.value(l).data()[0] as f64 - core::f64::consts::LN_2).abs() < 1e-6);
        let empty = Mask::zeros(2, 2);
        assert!(matches!(
            segmentation_loss(&mut g, p, &t, Some(&empty)),
            Err(Error::EmptyFov(_))
        ));
    }
}
