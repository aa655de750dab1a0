//! Subcommands. Each one resolves its [`RunConfig`], validates and loads all
//! inputs, and only then creates its run directory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fundus_ssl_core::data::{resize_bilinear, Sample};
use fundus_ssl_core::eval::{predict_at, EvalItem};
use fundus_ssl_core::unet::{UNetConfig, UNetModel};
use rayon::prelude::*;

use crate::config::{key, KeySpec, RunConfig};
use crate::output::{arch_from_tensors, load_checkpoint};

pub mod evaluate;
pub mod finetune;
pub mod gradcheck;
pub mod pretrain;
pub mod probe;
pub mod stats;
pub mod synth;

pub struct Command {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: &'static [KeySpec],
    pub run: fn(&RunConfig, &Path) -> Result<PathBuf>,
}

pub const COMMANDS: &[Command] = &[
    Command {
        name: "pretrain",
        about: "Momentum-contrast pre-training of the encoder on unlabeled images",
        keys: pretrain::KEYS,
        run: pretrain::run,
    },
    Command {
        name: "finetune",
        about: "Supervised segmentation training, optionally from a pre-trained encoder",
        keys: finetune::KEYS,
        run: finetune::run,
    },
    Command {
        name: "evaluate",
        about: "Threshold on the training set, then score the test set",
        keys: evaluate::KEYS,
        run: evaluate::run,
    },
    Command {
        name: "transfer",
        about: "Cross-dataset evaluation over checkpoint and threshold provenance",
        keys: evaluate::TRANSFER_KEYS,
        run: evaluate::run_transfer,
    },
    Command {
        name: "probe",
        about: "Correlate encoder features with target masks; export activation maps",
        keys: probe::KEYS,
        run: probe::run,
    },
    Command {
        name: "stats",
        about: "Paired t-confidence interval of per-split differences",
        keys: stats::KEYS,
        run: stats::run,
    },
    Command {
        name: "synth-gen",
        about: "Write a synthetic fundus-like dataset with a manifest",
        keys: synth::KEYS,
        run: synth::run,
    },
    Command {
        name: "gradcheck",
        about: "Finite-difference verification of every differentiable primitive",
        keys: gradcheck::KEYS,
        run: gradcheck::run,
    },
];

pub fn find(name: &str) -> Option<&'static Command> {
    COMMANDS.iter().find(|c| c.name == name)
}

pub const MODEL_KEYS: [KeySpec; 4] = [
    key("encoder_levels", "4", "encoder depth"),
    key("base_filters", "16", "filters of the first level, doubling per level"),
    key("conv_skips", "false", "3x3 conv+BN+ReLU on every skip connection"),
    key(
        "decoder_widths",
        "",
        "comma list, deepest first; empty mirrors the encoder",
    ),
];

pub fn model_config(cfg: &RunConfig) -> Result<UNetConfig> {
    let widths: Vec<usize> = cfg.list("decoder_widths")?;
    let c = UNetConfig {
        encoder_levels: cfg.get("encoder_levels")?,
        base_filters: cfg.get("base_filters")?,
        conv_skip_connections: cfg.bool("conv_skips")?,
        decoder_widths: (!widths.is_empty()).then_some(widths),
        input_channels: 3,
    };
    c.validate()?;
    Ok(c)
}

/// Full model from a checkpoint that records its architecture.
pub fn load_model(path: &Path) -> Result<UNetModel> {
    let tensors = load_checkpoint(path)?;
    let config = arch_from_tensors(&tensors)?;
    let mut model = UNetModel::build(config, &mut fundus_ssl_core::RngStream::new(0))?;
    model
        .params
        .load_prefixed(&tensors, "")
        .with_context(|| format!("loading parameters from {}", path.display()))?;
    Ok(model)
}

/// Probability maps at each sample's own resolution. With `input_width > 0`
/// the network sees the image resized to that width and its output is
/// resized back bilinearly.
pub fn predict_items(
    model: &UNetModel,
    samples: &[Sample],
    target: &str,
    input_width: usize,
    tta: bool,
) -> Result<Vec<EvalItem>> {
    samples
        .par_iter()
        .map(|s| {
            let (h, w) = s.image.dims();
            let input = if input_width > 0 && input_width != w {
                let ih = ((h as f64 * input_width as f64 / w as f64).round() as usize).max(1);
                resize_bilinear(&s.image, ih, input_width)
            } else {
                s.image.clone()
            };
            Ok(EvalItem {
                prob: predict_at(model, &input, h, w, tta)?,
                gt: s.target(target)?.clone(),
                fov: s.fov_or_full(),
            })
        })
        .collect()
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}
