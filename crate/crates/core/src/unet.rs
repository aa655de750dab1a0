//! Residual U-Net for binary segmentation.
//!
//! Each level is two `conv3x3 -> ReLU -> BN` blocks plus an additive
//! `conv1x1 -> BN` residual branch taken from the level input and added to the
//! second block's output. Encoder levels are separated by 2x2 max pooling.
//! Every decoder level starts with a 2x2 stride-2 transposed convolution whose
//! output is concatenated after the matching encoder skip (optionally passed
//! through one more `conv3x3 -> ReLU -> BN` block). A 1x1 convolution and a
//! sigmoid produce the probability map.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{BatchStats, BnStats, Graph, Mode, Padding, ParamKey, Var};
use crate::params::{ModelParams, ParamKind};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Fraction of the old running statistic kept at every train-mode update.
pub const BN_MOMENTUM: f32 = 0.9;
pub const BN_EPS: f32 = 1e-5;

/// Prefix of every encoder parameter name.
pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetConfig {
    pub encoder_levels: usize,
    pub base_filters: usize,
    pub conv_skip_connections: bool,
    /// Explicit decoder widths, deepest first. `None` halves the width at
    /// every transposed convolution.
    pub decoder_widths: Option<Vec<usize>>,
    pub input_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            encoder_levels: 4,
            base_filters: 16,
            conv_skip_connections: false,
            decoder_widths: None,
            input_channels: 3,
        }
    }
}

impl UNetConfig {
    /// The narrow 16-8-4 decoder used for cross-dataset training.
    pub fn constrained() -> Self {
        Self {
            decoder_widths: Some(vec![16, 8, 4]),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_levels < 2 {
            return Err(Error::Config(format!(
                "encoder_levels must be >= 2, got {}",
                self.encoder_levels
            )));
        }
        if self.base_filters == 0 || self.input_channels == 0 {
            return Err(Error::Config("filter and channel counts must be positive".into()));
        }
        if let Some(d) = &self.decoder_widths {
            if d.len() != self.encoder_levels - 1 {
                return Err(Error::Config(format!(
                    "decoder_widths needs {} entries, got {}",
                    self.encoder_levels - 1,
                    d.len()
                )));
            }
            if d.contains(&0) {
                return Err(Error::Config("decoder widths must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        (0..self.encoder_levels).map(|i| self.base_filters << i).collect()
    }

    /// Decoder widths, deepest level first.
    pub fn decoder_widths(&self) -> Vec<usize> {
        match &self.decoder_widths {
            Some(d) => d.clone(),
            None => {
                let enc = self.encoder_widths();
                (0..self.encoder_levels - 1).rev().map(|i| enc[i]).collect()
            }
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.base_filters << (self.encoder_levels - 1)
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.encoder_levels - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvLayer {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BnLayer {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
}

/// `conv3x3 -> ReLU -> BN`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Block {
    pub conv: ConvLayer,
    pub bn: BnLayer,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Level {
    pub block1: Block,
    pub block2: Block,
    pub res_conv: ConvLayer,
    pub res_bn: BnLayer,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderLevel {
    pub up: ConvLayer,
    pub skip: Option<Block>,
    pub level: Level,
}

#[derive(Debug, Clone)]
pub struct UNetModel {
    pub config: UNetConfig,
    pub params: ModelParams,
    pub(crate) encoder: Vec<Level>,
    pub(crate) decoder: Vec<DecoderLevel>,
    pub(crate) head: ConvLayer,
    slot: u8,
}

/// He-normal initialisation: i.i.d. `N(0, 2 / fan_in)`.
pub fn he_init(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor {
    assert!(fan_in >= 1, "fan_in must be >= 1");
    let std = libm::sqrt(2.0 / fan_in as f64) as f32;
    Tensor::randn(shape, std, rng)
}

struct Builder<'a> {
    params: ModelParams,
    rng: &'a mut RngStream,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> ConvLayer {
        let w = he_init(&[c_out, c_in, k, k], c_in * k * k, self.rng);
        ConvLayer {
            w: self.params.add(format!("{name}.weight"), ParamKind::Trainable, w),
            b: self
                .params
                .add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[c_out])),
        }
    }

    fn conv_t(&mut self, name: &str, c_in: usize, c_out: usize) -> ConvLayer {
        let w = he_init(&[c_in, c_out, 2, 2], c_in, self.rng);
        ConvLayer {
            w: self.params.add(format!("{name}.weight"), ParamKind::Trainable, w),
            b: self
                .params
                .add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[c_out])),
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnLayer {
        BnLayer {
            gamma: self
                .params
                .add(format!("{name}.weight"), ParamKind::Trainable, Tensor::full(&[c], 1.0)),
            beta: self
                .params
                .add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[c])),
            mean: self
                .params
                .add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[c])),
            var: self.params.add(
                format!("{name}.running_var"),
                ParamKind::Buffer,
                Tensor::full(&[c], 1.0),
            ),
        }
    }

    fn block(&mut self, name: &str, c_in: usize, c_out: usize) -> Block {
        Block {
            conv: self.conv(&format!("{name}.conv"), c_out, c_in, 3),
            bn: self.bn(&format!("{name}.bn"), c_out),
        }
    }

    fn level(&mut self, name: &str, c_in: usize, c_out: usize) -> Level {
        Level {
            block1: self.block(&format!("{name}.block1"), c_in, c_out),
            block2: self.block(&format!("{name}.block2"), c_out, c_out),
            res_conv: self.conv(&format!("{name}.residual.conv"), c_out, c_in, 1),
            res_bn: self.bn(&format!("{name}.residual.bn"), c_out),
        }
    }
}

type StatLog = Vec<(BnLayer, BatchStats)>;

impl UNetModel {
    pub fn build(config: UNetConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: ModelParams::new(),
            rng,
        };
        let enc_w = config.encoder_widths();
        let mut encoder = Vec::with_capacity(enc_w.len());
        let mut c_in = config.input_channels;
        for (i, &w) in enc_w.iter().enumerate() {
            encoder.push(b.level(&format!("encoder.{i}"), c_in, w));
            c_in = w;
        }
        let mut decoder = Vec::new();
        for (d, &w) in config.decoder_widths().iter().enumerate() {
            let skip_c = enc_w[enc_w.len() - 2 - d];
            let name = format!("decoder.{d}");
            let up = b.conv_t(&format!("{name}.up"), c_in, w);
            let skip = config
                .conv_skip_connections
                .then(|| b.block(&format!("{name}.skip"), skip_c, skip_c));
            let level = b.level(&name, skip_c + w, w);
            decoder.push(DecoderLevel { up, skip, level });
            c_in = w;
        }
        let head = b.conv("head", 1, c_in, 1);
        Ok(Self {
            config,
            params: b.params,
            encoder,
            decoder,
            head,
            slot: 0,
        })
    }

    /// Graph slot under which this model registers its parameters.
    pub fn slot(&self) -> u8 {
        self.slot
    }

    pub fn set_slot(&mut self, slot: u8) {
        self.slot = slot;
    }

    /// Names of all encoder parameters (trainable and buffers).
    pub fn encoder_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(ENCODER_PREFIX))
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = match *shape {
            [_, c, h, w] => (c, h, w),
            _ => {
                return Err(Error::Rank {
                    op: "unet.forward",
                    expected: 4,
                    shape: shape.to_vec(),
                })
            }
        };
        if c != self.config.input_channels {
            return Err(Error::ShapeMismatch {
                op: "unet.forward",
                axis: "input channels",
                expected: self.config.input_channels,
                actual: c,
            });
        }
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::IndivisibleInput {
                height: h,
                width: w,
                multiple: m,
            });
        }
        Ok(())
    }

    fn p(&self, g: &mut Graph, index: usize) -> Var {
        g.param(ParamKey { slot: self.slot, index }, self.params.value(index))
    }

    fn conv(&self, g: &mut Graph, layer: ConvLayer, x: Var) -> Result<Var> {
        let w = self.p(g, layer.w);
        let b = self.p(g, layer.b);
        g.conv2d(x, w, Some(b), 1, Padding::Same)
    }

    fn bn(&self, g: &mut Graph, layer: BnLayer, x: Var, mode: Mode, log: &mut StatLog) -> Result<Var> {
        let gamma = self.p(g, layer.gamma);
        let beta = self.p(g, layer.beta);
        let stats = match mode {
            Mode::Train => BnStats::Batch,
            Mode::Eval => BnStats::Running {
                mean: self.params.value(layer.mean).data(),
                var: self.params.value(layer.var).data(),
            },
        };
        let (y, batch) = g.batch_norm(x, gamma, beta, stats, BN_EPS)?;
        if let Some(s) = batch {
            log.push((layer, s));
        }
        Ok(y)
    }

    fn block(&self, g: &mut Graph, b: Block, x: Var, mode: Mode, log: &mut StatLog) -> Result<Var> {
        let h = self.conv(g, b.conv, x)?;
        let h = g.relu(h);
        self.bn(g, b.bn, h, mode, log)
    }

    fn level(&self, g: &mut Graph, l: Level, x: Var, mode: Mode, log: &mut StatLog) -> Result<Var> {
        let h = self.block(g, l.block1, x, mode, log)?;
        let h = self.block(g, l.block2, h, mode, log)?;
        let r = self.conv(g, l.res_conv, x)?;
        let r = self.bn(g, l.res_bn, r, mode, log)?;
        g.add(h, r)
    }

    fn run(&self, g: &mut Graph, x: Var, mode: Mode, encoder_only: bool, log: &mut StatLog) -> Result<Var> {
        self.check_input(g.value(x).shape())?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for (i, level) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = g.max_pool2(h)?;
            }
            h = self.level(g, *level, h, mode, log)?;
            skips.push(h);
        }
        if encoder_only {
            return Ok(h);
        }
        for (d, dl) in self.decoder.iter().enumerate() {
            let skip = skips[skips.len() - 2 - d];
            let w = self.p(g, dl.up.w);
            let b = self.p(g, dl.up.b);
            let up = g.conv_transpose2x2(h, w, Some(b))?;
            let skip = match dl.skip {
                Some(block) => self.block(g, block, skip, mode, log)?,
                None => skip,
            };
            let cat = g.concat_channels(skip, up)?;
            h = self.level(g, dl.level, cat, mode, log)?;
        }
        self.conv(g, self.head, h)
    }

    fn commit(&mut self, log: StatLog) {
        for (layer, s) in log {
            fold_running(self.params.value_mut(layer.mean).data_mut(), &s.mean);
            fold_running(self.params.value_mut(layer.var).data_mut(), &s.var);
        }
    }

    fn run_mut(&mut self, g: &mut Graph, x: Var, mode: Mode, encoder_only: bool) -> Result<Var> {
        let mut log = Vec::new();
        let out = self.run(g, x, mode, encoder_only, &mut log)?;
        self.commit(log);
        Ok(out)
    }

    /// Pre-sigmoid segmentation map `N x 1 x H x W`. Train mode folds batch
    /// statistics into the running estimates.
    pub fn forward_logits(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        self.run_mut(g, x, mode, false)
    }

    /// Probability map `N x 1 x H x W` with values in (0, 1).
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let z = self.forward_logits(g, x, mode)?;
        Ok(g.sigmoid(z))
    }

    /// Deepest encoder activation, `N x C x H/8 x W/8` for four levels.
    pub fn encoder_features(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        self.run_mut(g, x, mode, true)
    }

    /// Eval-mode probability map without gradient tracking.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let z = self.run(&mut g, xv, Mode::Eval, false, &mut Vec::new())?;
        let p = g.sigmoid(z);
        Ok(g.value(p).clone())
    }

    /// Eval-mode encoder features without gradient tracking.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let f = self.run(&mut g, xv, Mode::Eval, true, &mut Vec::new())?;
        Ok(g.value(f).clone())
    }

    /// Encoder features normalised with the batch's own statistics, without
    /// gradient tracking and without touching the running estimates.
    pub fn features_batch_stats(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let f = self.run(&mut g, xv, Mode::Train, true, &mut Vec::new())?;
        Ok(g.value(f).clone())
    }
}

fn fold_running(running: &mut [f32], batch: &[f32]) {
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
    }
}

/// Standalone batch-norm layer state, for use outside a [`UNetModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Applies the layer; `gamma` and `beta` become graph leaves, returned
    /// alongside the output so their gradients can be read back.
    pub fn apply(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<(Var, Var, Var)> {
        let gamma = g.leaf(self.gamma.clone());
        let beta = g.leaf(self.beta.clone());
        let stats = match mode {
            Mode::Train => BnStats::Batch,
            Mode::Eval => BnStats::Running {
                mean: self.running_mean.data(),
                var: self.running_var.data(),
            },
        };
        let (y, batch) = g.batch_norm(x, gamma, beta, stats, self.eps)?;
        if let Some(s) = batch {
            let m = self.momentum;
            for (r, b) in self.running_mean.data_mut().iter_mut().zip(&s.mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in self.running_var.data_mut().iter_mut().zip(&s.var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
        Ok((y, gamma, beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_widths() {
        let c = UNetConfig::default();
        assert_eq!(c.encoder_widths(), vec![16, 32, 64, 128]);
        assert_eq!(c.decoder_widths(), vec![64, 32, 16]);
        assert_eq!(c.feature_channels(), 128);
        assert_eq!(UNetConfig::constrained().decoder_widths(), vec![16, 8, 4]);
    }

    #[test]
    fn config_validation() {
        let bad = UNetConfig {
            encoder_levels: 1,
            ..UNetConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = UNetConfig {
            decoder_widths: Some(vec![8, 4]),
            ..UNetConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn indivisible_input_rejected() {
        let m = UNetModel::build(UNetConfig::default(), &mut RngStream::new(1)).unwrap();
        let err = m.predict(&Tensor::zeros(&[1, 3, 100, 64])).unwrap_err();
        assert_eq!(
            err,
            Error::IndivisibleInput {
                height: 100,
                width: 64,
                multiple: 8
            }
        );
    }

    #[test]
    fn he_init_std() {
        let t = he_init(&[100_000], 2, &mut RngStream::new(2));
        let m = t.sum() / 1e5;
        let v = t.data().iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / 1e5;
        assert!((libm::sqrt(v) - 1.0).abs() < 0.02);
        let a = he_init(&[64], 8, &mut RngStream::new(3));
        let b = he_init(&[64], 8, &mut RngStream::new(3));
        assert_eq!(a, b);
    }

    #[test]
    fn batchnorm_state_updates_running_stats() {
        let mut s = BatchNormState::new(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
        s.apply(&mut g, x, Mode::Train).unwrap();
        // mean 2, unbiased var 2
        assert!((s.running_mean.data()[0] - 0.2).abs() < 1e-6);
        assert!((s.running_var.data()[0] - (0.9 + 0.2)).abs() < 1e-6);
        assert!(s.running_var.data().iter().all(|&v| v >= 0.0));
    }
}
