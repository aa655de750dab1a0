use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use fundus_ssl_core::data::{Sample, VESSEL_TARGET};
use fundus_ssl_core::eval::{
    grid_counts, grid_threshold, pooled_dice, pooled_scores, pr_curve, select_threshold, EvalItem, EvalReport, Metric,
};
use fundus_ssl_core::unet::UNetModel;

use super::{load_model, predict_items};
use crate::config::{key, required, KeySpec, RunConfig, SEED};
use crate::manifest::{load_samples, Entry, Manifest, Role};
use crate::output::{Csv, RunDir};

pub const KEYS: &[KeySpec] = &[
    SEED,
    required("checkpoint", "trained U-Net checkpoint"),
    required("test", "test manifest"),
    required(
        "train",
        "training manifest; the threshold maximising Dice on it is applied to the test set",
    ),
    key("target", "vessel", "target mask"),
    key(
        "metric",
        "auto",
        "dice, auprc, or auto (dice for vessel, auprc otherwise)",
    ),
    key("tta", "true", "average predictions over the four flips"),
    key(
        "input_width",
        "0",
        "network input width (0 = native); scores stay at native resolution",
    ),
    key(
        "threshold",
        "",
        "fixed threshold instead of selecting one on the training set",
    ),
];

pub const TRANSFER_KEYS: &[KeySpec] = &[
    SEED,
    required(
        "source_run",
        "finetune run directory written with keep_checkpoints=true",
    ),
    required("source_train", "source training manifest (source threshold)"),
    required(
        "target_train",
        "target training manifest (target checkpoint and threshold)",
    ),
    required("target_test", "target test manifest"),
    key("target", "vessel", "target mask"),
    key("metric", "auto", "dice, auprc, or auto"),
    key("tta", "true", "average predictions over the four flips"),
    key("source_input_width", "0", "network input width on source images"),
    key("target_input_width", "0", "network input width on target images"),
    key("checkpoint_select", "both", "source, target or both"),
    key("threshold_select", "both", "source, target or both"),
    key(
        "monitor_threshold",
        "0.5",
        "threshold of the Dice used to pick the target checkpoint",
    ),
];

pub fn metric_for(cfg: &RunConfig) -> Result<Metric> {
    Ok(match cfg.str("metric") {
        "dice" => Metric::Dice,
        "auprc" => Metric::Auprc,
        "auto" if cfg.str("target") == VESSEL_TARGET => Metric::Dice,
        "auto" => Metric::Auprc,
        m => bail!("metric {m:?}: expected dice, auprc or auto"),
    })
}

/// Entries usable for threshold selection: neither validation nor test.
fn training_entries(m: &Manifest) -> Vec<Entry> {
    m.entries
        .iter()
        .filter(|e| !matches!(e.role, Some(Role::Val | Role::Test)))
        .cloned()
        .collect()
}

fn load_with_target(entries: &[Entry], target: &str) -> Result<Vec<Sample>> {
    let samples = load_samples(entries, 0)?;
    for s in &samples {
        s.target(target).with_context(|| format!("sample {}", s.id))?;
    }
    ensure!(!samples.is_empty(), "no samples");
    Ok(samples)
}

fn ids(samples: &[Sample]) -> Vec<String> {
    samples.iter().map(|s| s.id.clone()).collect()
}

fn write_report(dir: &RunDir, stem: &str, report: &EvalReport, test: &[EvalItem]) -> Result<()> {
    dir.write(&format!("{stem}.txt"), &report.text())?;
    dir.write(
        &format!("{stem}.csv"),
        &format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()),
    )?;
    let mut per = Csv::new(&["id", "dice"]);
    for (id, d) in &report.per_image_dice {
        per.row(&[id.clone(), format!("{d:.6}")]);
    }
    dir.write(&format!("{stem}_per_image.csv"), per.text())?;
    if report.metric == Metric::Auprc {
        let (s, l) = pooled_scores(test)?;
        let c = pr_curve(&s, &l)?;
        let mut pr = Csv::new(&["threshold", "precision", "recall"]);
        for i in 0..c.thresholds.len() {
            pr.row(&[
                format!("{}", c.thresholds[i]),
                format!("{:.6}", c.precision[i]),
                format!("{:.6}", c.recall[i]),
            ]);
        }
        dir.write(&format!("{stem}_pr_curve.csv"), pr.text())?;
    }
    Ok(())
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let metric = metric_for(cfg)?;
    let target = cfg.str("target").to_string();
    let tta = cfg.bool("tta")?;
    let width: usize = cfg.get("input_width")?;
    let model = load_model(&cfg.required_path("checkpoint")?)?;
    let test = load_with_target(&Manifest::load(&cfg.required_path("test")?)?.entries, &target)?;
    let fixed: Option<f64> = cfg.path("threshold").map(|_| cfg.get("threshold")).transpose()?;
    let train = match fixed {
        Some(_) => Vec::new(),
        None => load_with_target(
            &training_entries(&Manifest::load(&cfg.required_path("train")?)?),
            &target,
        )?,
    };
    let dir = RunDir::create(out, cfg)?;

    let threshold = match fixed {
        Some(t) => t,
        None => {
            let items = predict_items(&model, &train, &target, width, tta)?;
            let mut grid = Csv::new(&["threshold", "train_dice"]);
            for (i, c) in grid_counts(&items)?.iter().enumerate() {
                grid.row(&[format!("{:.2}", grid_threshold(i)), format!("{:.6}", c.dice())]);
            }
            dir.write("threshold_grid.csv", grid.text())?;
            select_threshold(&items)?
        }
    };
    let items = predict_items(&model, &test, &target, width, tta)?;
    let report = EvalReport::compute(cfg.str("test"), metric, &ids(&test), &items, threshold)?;
    write_report(&dir, "report", &report, &items)?;
    print!("{}", report.text());
    Ok(dir.path)
}

/// `(epoch, path)` of every stored checkpoint of a finetune run.
fn run_checkpoints(run: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let dir = run.join("checkpoints");
    let mut out = Vec::new();
    for e in std::fs::read_dir(&dir).with_context(|| format!("{} (run with keep_checkpoints=true)", dir.display()))? {
        let p = e?.path();
        let epoch = p
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("epoch_"))
            .and_then(|s| s.parse().ok());
        if let Some(epoch) = epoch {
            out.push((epoch, p));
        }
    }
    ensure!(!out.is_empty(), "no checkpoints in {}", dir.display());
    out.sort();
    Ok(out)
}

fn sides(cfg: &RunConfig, key: &str) -> Result<Vec<&'static str>> {
    Ok(match cfg.str(key) {
        "both" => vec!["source", "target"],
        "source" => vec!["source"],
        "target" => vec!["target"],
        v => bail!("{key}={v:?}: expected source, target or both"),
    })
}

pub fn run_transfer(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let metric = metric_for(cfg)?;
    let target = cfg.str("target").to_string();
    let tta = cfg.bool("tta")?;
    let (sw, tw): (usize, usize) = (cfg.get("source_input_width")?, cfg.get("target_input_width")?);
    let ck_sides = sides(cfg, "checkpoint_select")?;
    let th_sides = sides(cfg, "threshold_select")?;
    let run = cfg.required_path("source_run")?;
    let source_model = load_model(&run.join("best.ntc"))?;
    let candidates = if ck_sides.contains(&"target") {
        run_checkpoints(&run)?
    } else {
        Vec::new()
    };
    let source_train = load_with_target(
        &training_entries(&Manifest::load(&cfg.required_path("source_train")?)?),
        &target,
    )?;
    let target_train = load_with_target(
        &training_entries(&Manifest::load(&cfg.required_path("target_train")?)?),
        &target,
    )?;
    let target_test = load_with_target(&Manifest::load(&cfg.required_path("target_test")?)?.entries, &target)?;
    let dir = RunDir::create(out, cfg)?;

    let mut models: Vec<(&str, UNetModel)> = Vec::new();
    if ck_sides.contains(&"source") {
        models.push(("source", source_model));
    }
    if ck_sides.contains(&"target") {
        let monitor: f64 = cfg.get("monitor_threshold")?;
        let mut sel = Csv::new(&["epoch", "target_train_dice"]);
        let mut best: Option<(f64, usize, UNetModel)> = None;
        for (epoch, p) in &candidates {
            let m = load_model(p)?;
            let d = pooled_dice(&predict_items(&m, &target_train, &target, tw, tta)?, monitor)?;
            sel.row(&[epoch.to_string(), format!("{d:.6}")]);
            if best.as_ref().map_or(true, |(b, _, _)| d > *b) {
                best = Some((d, *epoch, m));
            }
        }
        dir.write("target_checkpoint_selection.csv", sel.text())?;
        let (_, epoch, m) = best.expect("candidates are non-empty");
        log::info!("target-selected checkpoint: epoch {epoch}");
        models.push(("target", m));
    }

    let mut table = Csv::new(&[
        "checkpoint",
        "threshold_source",
        "threshold",
        "tp",
        "fp",
        "fn",
        "tn",
        "dice",
        "auprc",
    ]);
    for (ck, model) in &models {
        let test_items = predict_items(model, &target_test, &target, tw, tta)?;
        for th in &th_sides {
            let t = match *th {
                "source" => select_threshold(&predict_items(model, &source_train, &target, sw, tta)?)?,
                _ => select_threshold(&predict_items(model, &target_train, &target, tw, tta)?)?,
            };
            let name = format!("checkpoint_{ck}_threshold_{th}");
            let r = EvalReport::compute(&name, metric, &ids(&target_test), &test_items, t)?;
            write_report(&dir, &name, &r, &test_items)?;
            let c = r.counts;
            table.row(&[
                ck.to_string(),
                th.to_string(),
                format!("{t:.2}"),
                c.tp.to_string(),
                c.fp.to_string(),
                c.fn_.to_string(),
                c.tn.to_string(),
                format!("{:.6}", r.dice),
                super::fmt_opt(r.auprc),
            ]);
        }
    }
    dir.write("transfer.csv", table.text())?;
    print!("{}", table.text());
    Ok(dir.path)
}
