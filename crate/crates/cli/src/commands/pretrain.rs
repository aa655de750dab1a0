use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fundus_ssl_core::augment::{ColorJitter, PretrainAugmentConfig};
use fundus_ssl_core::moco::{pretrain, MoCoConfig};
use fundus_ssl_core::train::{AdamConfig, ScheduleConfig, ScheduleKind};
use fundus_ssl_core::unet::UNetModel;
use fundus_ssl_core::RngStream;

use super::{model_config, MODEL_KEYS};
use crate::config::{key, required, KeySpec, RunConfig, SEED};
use crate::manifest::{load_unlabeled, Manifest};
use crate::output::{arch_tensor, save_checkpoint, Csv, RunDir};

pub const KEYS: &[KeySpec] = &[
    SEED,
    required("data", "manifest of unlabeled images (only the image column is used)"),
    key("epochs", "600", "training epochs"),
    key("batch_size", "64", "images per step"),
    key("tau", "0.07", "InfoNCE temperature"),
    key("queue_len", "4096", "negative key queue length"),
    key("momentum", "0.999", "momentum of the key encoder"),
    key("weight_decay", "1e-4", "L2 weight decay"),
    key("lr_max", "1e-2", "cosine schedule maximum"),
    key("lr_min", "1e-8", "cosine schedule minimum"),
    key("lr_period", "50", "epochs between restarts"),
    key(
        "ingest_size",
        "512",
        "images are resized and centre-cropped to this square",
    ),
    key("crop_size", "128", "random crop side of each view"),
    key("jitter_prob", "0.8", "probability of colour jitter"),
    key("jitter", "0.4", "brightness/contrast/saturation magnitude"),
    key("hue", "0.1", "hue magnitude"),
    key("grayscale_prob", "0.2", "probability of grayscale conversion"),
    key("prefill", "true", "fill the queue before the first update"),
    key("include_head", "false", "store the projection head in the checkpoint"),
    MODEL_KEYS[0],
    MODEL_KEYS[1],
    MODEL_KEYS[2],
    MODEL_KEYS[3],
];

pub fn moco_config(cfg: &RunConfig) -> Result<MoCoConfig> {
    let m = MoCoConfig {
        tau: cfg.get("tau")?,
        queue_len: cfg.get("queue_len")?,
        momentum: cfg.get("momentum")?,
        batch_size: cfg.get("batch_size")?,
        epochs: cfg.get("epochs")?,
        weight_decay: cfg.get("weight_decay")?,
        schedule: ScheduleConfig {
            kind: ScheduleKind::CosineRestarts,
            eta_max: cfg.get("lr_max")?,
            eta_min: cfg.get("lr_min")?,
            period: cfg.get("lr_period")?,
        },
        adam: AdamConfig::default(),
        augment: PretrainAugmentConfig {
            ingest_size: cfg.get("ingest_size")?,
            crop_size: cfg.get("crop_size")?,
            jitter_prob: cfg.get("jitter_prob")?,
            jitter: ColorJitter::uniform(cfg.get("jitter")?, cfg.get("hue")?),
            grayscale_prob: cfg.get("grayscale_prob")?,
            ..PretrainAugmentConfig::default()
        },
        prefill: cfg.bool("prefill")?,
        seed: cfg.seed()?,
    };
    m.validate()?;
    Ok(m)
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let moco = moco_config(cfg)?;
    let arch = model_config(cfg)?;
    let manifest = Manifest::load(&cfg.required_path("data")?)?;
    let images = load_unlabeled(&manifest, moco.augment.ingest_size)?;
    let model = UNetModel::build(arch.clone(), &mut RngStream::new(moco.seed).fork(0))?;
    let dir = RunDir::create(out, cfg)?;
    log::info!("pre-training on {} images into {}", images.len(), dir.path.display());

    let mut csv = Csv::new(&["epoch", "step", "loss", "lr"]);
    let outcome = pretrain(model, &images, &moco, &mut |r| {
        csv.row(&[
            r.epoch.to_string(),
            r.step.to_string(),
            format!("{:.6}", r.loss),
            format!("{:e}", r.lr),
        ]);
        if r.step % 50 == 0 {
            log::info!("epoch {} step {} loss {:.4}", r.epoch, r.step, r.loss);
        }
    })
    .context("pre-training failed")?;
    dir.write("loss.csv", csv.text())?;

    let mut tensors = outcome.state.encoder_checkpoint(cfg.bool("include_head")?);
    tensors.push(arch_tensor(&arch));
    save_checkpoint(&dir.file("encoder.ntc"), &tensors)?;
    Ok(dir.path)
}
