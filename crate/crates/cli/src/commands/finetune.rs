use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use fundus_ssl_core::augment::{ColorJitter, FinetuneAugmentConfig};
use fundus_ssl_core::data::{split, Sample};
use fundus_ssl_core::train::{
    epochs_to_best, finetune, init_encoder_from, select_checkpoint, u64_tensor, AdamConfig, BestSink, CheckpointRecord,
    CheckpointSink, ScheduleConfig, ScheduleKind, TrainRunConfig, TrainState,
};
use fundus_ssl_core::unet::UNetModel;
use fundus_ssl_core::{RngStream, Tensor};

use super::{fmt_opt, load_model, model_config, MODEL_KEYS};
use crate::config::{key, required, KeySpec, RunConfig, SEED};
use crate::manifest::{load_samples, Entry, Manifest, Role};
use crate::output::{arch_tensor, load_checkpoint, save_checkpoint, Csv, RunDir};

pub const KEYS: &[KeySpec] = &[
    SEED,
    required("data", "labeled manifest"),
    key("target", "vessel", "target mask to learn (one-vs-all)"),
    key(
        "init_encoder",
        "",
        "encoder checkpoint; empty trains from random initialisation",
    ),
    key("resume", "", "last.ntc of an interrupted run with the same config"),
    key("train_images", "0", "use only this many training images (0 = all)"),
    key(
        "val_fraction",
        "0.2",
        "validation share of the training pool, rounded down",
    ),
    key("resize_width", "0", "resize images to this width (0 = native)"),
    key("epochs", "1500", "training epochs"),
    key("batch_size", "4", "images per step"),
    key("weight_decay", "0", "L2 weight decay"),
    key("checkpoint_every", "10", "epochs between checkpoints"),
    key("schedule", "cosine", "cosine (with restarts) or constant"),
    key("lr_max", "1e-2", "cosine maximum, or the constant rate"),
    key("lr_min", "1e-8", "cosine minimum"),
    key("lr_period", "50", "epochs between restarts"),
    key(
        "monitor_threshold",
        "0.5",
        "binarisation threshold of the validation Dice",
    ),
    key(
        "keep_checkpoints",
        "false",
        "write every checkpoint, not just best and last",
    ),
    key("rotation_deg", "45", "rotation range"),
    key("scale_min", "0.95", "minimum zoom"),
    key("scale_max", "1.2", "maximum zoom"),
    key(
        "translate_frac",
        "0.05",
        "horizontal shift range as a fraction of the width",
    ),
    key("jitter", "0.25", "brightness/contrast/saturation magnitude"),
    key("hue", "0.1", "hue magnitude"),
    MODEL_KEYS[0],
    MODEL_KEYS[1],
    MODEL_KEYS[2],
    MODEL_KEYS[3],
];

const TAG_INIT: u64 = 0;
const TAG_SUBSET: u64 = 1;

pub fn train_config(cfg: &RunConfig) -> Result<TrainRunConfig> {
    let lr_max: f64 = cfg.get("lr_max")?;
    let schedule = match cfg.str("schedule") {
        "cosine" => ScheduleConfig {
            kind: ScheduleKind::CosineRestarts,
            eta_max: lr_max,
            eta_min: cfg.get("lr_min")?,
            period: cfg.get("lr_period")?,
        },
        "constant" => ScheduleConfig::constant(lr_max),
        s => bail!("schedule {s:?}: expected cosine or constant"),
    };
    let t = TrainRunConfig {
        epochs: cfg.get("epochs")?,
        batch_size: cfg.get("batch_size")?,
        weight_decay: cfg.get("weight_decay")?,
        checkpoint_every: cfg.get("checkpoint_every")?,
        schedule,
        adam: AdamConfig::default(),
        augment: FinetuneAugmentConfig {
            rotation_deg: cfg.get("rotation_deg")?,
            scale_min: cfg.get("scale_min")?,
            scale_max: cfg.get("scale_max")?,
            translate_frac: cfg.get("translate_frac")?,
            jitter: ColorJitter::uniform(cfg.get("jitter")?, cfg.get("hue")?),
            ..FinetuneAugmentConfig::default()
        },
        target: cfg.str("target").to_string(),
        monitor_threshold: cfg.get("monitor_threshold")?,
        seed: cfg.seed()?,
    };
    t.validate()?;
    Ok(t)
}

/// Training subset and validation set (entry indices), plus the role of
/// every non-test entry for the split record.
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub unused: Vec<usize>,
}

/// Explicit `split=` roles win; otherwise the seeded split of the whole
/// training pool. Test entries are never used. `train_images > 0` subsets
/// the training part after the validation share has been reserved.
pub fn make_split(
    entries: &[Entry],
    has_roles: bool,
    val_fraction: f64,
    train_images: usize,
    seed: u64,
) -> Result<Split> {
    let pool: Vec<usize> = (0..entries.len())
        .filter(|&i| entries[i].role != Some(Role::Test))
        .collect();
    ensure!(!pool.is_empty(), "no training samples in manifest");
    let (mut train, val): (Vec<usize>, Vec<usize>) = if has_roles {
        pool.iter().partition(|&&i| entries[i].role != Some(Role::Val))
    } else {
        let (t, v) = split(pool.len(), val_fraction, seed);
        (
            t.iter().map(|&i| pool[i]).collect(),
            v.iter().map(|&i| pool[i]).collect(),
        )
    };
    let mut unused = Vec::new();
    if train_images > 0 {
        ensure!(
            train_images <= train.len(),
            "train_images {train_images} exceeds the {} available",
            train.len()
        );
        RngStream::new(seed).fork(TAG_SUBSET).shuffle(&mut train);
        unused = train.split_off(train_images);
        train.sort_unstable();
        unused.sort_unstable();
    }
    ensure!(!train.is_empty(), "training split is empty");
    Ok(Split { train, val, unused })
}

/// Keeps `best.ntc` and `last.ntc` current; optionally every checkpoint.
struct FileSink {
    dir: PathBuf,
    keep: bool,
    arch: (String, Tensor),
    best: BestSink,
}

impl FileSink {
    fn tensors(&self, model: &UNetModel, record: &CheckpointRecord) -> Vec<(String, Tensor)> {
        let mut t = model.params.named_tensors("");
        t.push(self.arch.clone());
        t.push(("meta.epoch".into(), u64_tensor(record.epoch as u64)));
        t.push((
            "meta.val_dice".into(),
            Tensor::scalar(record.val_dice.map_or(f32::NAN, |d| d as f32)),
        ));
        t
    }
}

impl CheckpointSink for FileSink {
    fn save(
        &mut self,
        record: &CheckpointRecord,
        model: &UNetModel,
        state: &TrainState,
    ) -> fundus_ssl_core::Result<()> {
        let before = self.best.best.as_ref().map(|(r, _)| *r);
        self.best.save(record, model, state)?;
        let io = |e: anyhow::Error| fundus_ssl_core::Error::Checkpoint(format!("{e:#}"));
        let tensors = self.tensors(model, record);
        if before != self.best.best.as_ref().map(|(r, _)| *r) {
            save_checkpoint(&self.dir.join("best.ntc"), &tensors).map_err(io)?;
        }
        if self.keep {
            let p = self
                .dir
                .join("checkpoints")
                .join(format!("epoch_{:05}.ntc", record.epoch));
            save_checkpoint(&p, &tensors).map_err(io)?;
        }
        let mut last = tensors;
        last.extend(state.to_tensors(&model.params));
        save_checkpoint(&self.dir.join("last.ntc"), &last).map_err(io)
    }
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let tc = train_config(cfg)?;
    let seed = tc.seed;
    let manifest = Manifest::load(&cfg.required_path("data")?)?;
    let sp = make_split(
        &manifest.entries,
        manifest.has_roles(),
        cfg.get("val_fraction")?,
        cfg.get("train_images")?,
        seed,
    )?;
    let resize: usize = cfg.get("resize_width")?;
    let pick = |idx: &[usize]| -> Vec<Entry> { idx.iter().map(|&i| manifest.entries[i].clone()).collect() };
    let train: Vec<Sample> = load_samples(&pick(&sp.train), resize)?;
    let val: Vec<Sample> = load_samples(&pick(&sp.val), resize)?;
    for s in train.iter().chain(&val) {
        s.target(&tc.target).with_context(|| format!("sample {}", s.id))?;
    }

    let (mut model, resume) = match cfg.path("resume") {
        Some(p) => {
            let model = load_model(&p)?;
            let state = TrainState::from_tensors(&model.params, tc.adam, &load_checkpoint(&p)?)?;
            (model, Some(state))
        }
        None => {
            let mut m = UNetModel::build(model_config(cfg)?, &mut RngStream::new(seed).fork(TAG_INIT))?;
            if let Some(p) = cfg.path("init_encoder") {
                let n = init_encoder_from(&mut m, &load_checkpoint(&p)?)
                    .with_context(|| format!("initialising encoder from {}", p.display()))?;
                log::info!("loaded {n} encoder tensors from {}", p.display());
            }
            (m, None)
        }
    };

    let dir = RunDir::create(out, cfg)?;
    let mut split_csv = Csv::new(&["id", "role"]);
    for (role, idx) in [("train", &sp.train), ("val", &sp.val), ("unused", &sp.unused)] {
        for &i in idx {
            split_csv.row(&[manifest.entries[i].id.as_str(), role]);
        }
    }
    dir.write("split.csv", split_csv.text())?;
    let keep = cfg.bool("keep_checkpoints")?;
    if keep {
        dir.subdir("checkpoints")?;
    }
    let mut sink = FileSink {
        dir: dir.path.clone(),
        keep,
        arch: arch_tensor(&model.config),
        best: BestSink::default(),
    };
    let outcome = finetune(&mut model, &train, &val, &tc, &mut sink, resume)?;

    let mut hist = Csv::new(&["epoch", "lr", "train_loss", "val_dice"]);
    for r in &outcome.history {
        hist.row(&[
            r.epoch.to_string(),
            format!("{:e}", r.lr),
            format!("{:.6}", r.train_loss),
            fmt_opt(r.val_dice),
        ]);
    }
    dir.write("history.csv", hist.text())?;
    let mut ck = Csv::new(&["epoch", "val_dice"]);
    for r in &outcome.checkpoints {
        ck.row(&[r.epoch.to_string(), fmt_opt(r.val_dice)]);
    }
    dir.write("checkpoints.csv", ck.text())?;

    let mut summary = format!(
        "train_images={}\nval_images={}\nepochs_run={}\n",
        train.len(),
        val.len(),
        outcome.history.len()
    );
    if !outcome.checkpoints.is_empty() {
        let best = select_checkpoint(&outcome.checkpoints)?;
        summary += &format!("best_epoch={}\nbest_val_dice={}\n", best.epoch, fmt_opt(best.val_dice));
    }
    if let Ok(e) = epochs_to_best(&outcome.history) {
        summary += &format!("epochs_to_best={e}\n");
    }
    dir.write("summary.txt", &summary)?;
    Ok(dir.path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn entries(n: usize, roles: &[Option<Role>]) -> Vec<Entry> {
        (0..n)
            .map(|i| Entry {
                id: format!("{i:02}"),
                image: PathBuf::new(),
                fov: None,
                targets: BTreeMap::new(),
                role: roles.get(i).copied().flatten(),
            })
            .collect()
    }

    #[test]
    fn split_rules() {
        let e = entries(16, &[]);
        let s = make_split(&e, false, 0.2, 0, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len()), (13, 3));
        let one = make_split(&e, false, 0.2, 1, 3).unwrap();
        assert_eq!((one.train.len(), one.val, one.unused.len()), (1, s.val.clone(), 12));
        assert!(s.train.contains(&one.train[0]));
        assert!(make_split(&e, false, 0.2, 14, 3).is_err());

        let roles = [Some(Role::Val), Some(Role::Test), None, Some(Role::Train)];
        let r = make_split(&entries(4, &roles), true, 0.2, 0, 0).unwrap();
        assert_eq!((r.train, r.val), (vec![2, 3], vec![0]));
    }
}
