use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use fundus_ssl_core::probe::{activation_map, feature_target_correlation, Pooling};
use fundus_ssl_core::train::init_encoder_from;
use fundus_ssl_core::unet::UNetModel;
use fundus_ssl_core::RngStream;

use super::{model_config, MODEL_KEYS};
use crate::config::{key, required, KeySpec, RunConfig, SEED};
use crate::imageio::write_map_png;
use crate::manifest::{load_samples, Manifest};
use crate::output::{arch_from_tensors, load_checkpoint, Csv, RunDir};

pub const KEYS: &[KeySpec] = &[
    SEED,
    required("data", "labeled manifest"),
    key(
        "encoder",
        "",
        "encoder checkpoint; empty probes a random-init encoder only",
    ),
    key(
        "targets",
        "",
        "comma list of targets (empty = every target in the manifest)",
    ),
    key("units", "", "comma list of units whose activation maps are exported"),
    key(
        "map_image",
        "0",
        "index (in id order) of the image used for activation maps",
    ),
    key(
        "compare_random",
        "true",
        "also probe a random-init encoder built from the seed",
    ),
    key("resize_width", "0", "resize images to this width (0 = native)"),
    key(
        "pooling",
        "pooled",
        "pooled (one r over all images) or per_image (mean of per-image r)",
    ),
    MODEL_KEYS[0],
    MODEL_KEYS[1],
    MODEL_KEYS[2],
    MODEL_KEYS[3],
];

pub fn run(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let manifest = Manifest::load(&cfg.required_path("data")?)?;
    let targets: Vec<String> = match cfg.list::<String>("targets")? {
        t if t.is_empty() => manifest.target_names(),
        t => t,
    };
    ensure!(!targets.is_empty(), "manifest has no target masks");
    let units: Vec<usize> = cfg.list("units")?;
    let pooling = match cfg.str("pooling") {
        "pooled" => Pooling::Pooled,
        "per_image" => Pooling::PerImageMean,
        p => bail!("pooling={p:?}: expected pooled or per_image"),
    };
    let samples = load_samples(&manifest.entries, cfg.get("resize_width")?)?;

    let encoder = cfg.path("encoder");
    let arch = match &encoder {
        Some(p) => arch_from_tensors(&load_checkpoint(p)?).unwrap_or(model_config(cfg)?),
        None => model_config(cfg)?,
    };
    let random = UNetModel::build(arch, &mut RngStream::new(cfg.seed()?).fork(0))?;
    let pretrained = match &encoder {
        Some(p) => {
            let mut m = random.clone();
            init_encoder_from(&mut m, &load_checkpoint(p)?).with_context(|| format!("loading {}", p.display()))?;
            Some(m)
        }
        None => None,
    };
    let map_index: usize = cfg.get("map_image")?;
    ensure!(map_index < samples.len(), "map_image {map_index} out of range");
    let dir = RunDir::create(out, cfg)?;

    let names: Vec<&str> = targets.iter().map(String::as_str).collect();
    let mut arms: Vec<(&str, &UNetModel)> = Vec::new();
    if let Some(m) = &pretrained {
        arms.push(("pretrained", m));
    }
    if pretrained.is_none() || cfg.bool("compare_random")? {
        arms.push(("random", &random));
    }
    let mut matrices = Vec::new();
    let mut summary = Csv::new(&["encoder", "target", "max_abs_unit", "max_abs_r"]);
    for (name, model) in &arms {
        let m = feature_target_correlation(model, &samples, &names, pooling)?;
        dir.write(&format!("correlation_{name}.csv"), &m.to_csv())?;
        for (t, tn) in m.targets.iter().enumerate() {
            let (u, r) = m.max_abs(t);
            summary.row(&[name.to_string(), tn.clone(), u.to_string(), format!("{:.6}", r.abs())]);
        }
        for d in &m.degenerate {
            log::warn!("{name}: target {d} has no variance; its column is zero");
        }
        matrices.push(m);
    }
    dir.write("summary.csv", summary.text())?;
    if matrices.len() == 2 {
        let (a, b) = (&matrices[0], &matrices[1]);
        let mut side = Csv::new(&["unit", "target", "r_pretrained", "r_random"]);
        for u in 0..a.units {
            for (t, tn) in a.targets.iter().enumerate() {
                side.row(&[
                    u.to_string(),
                    tn.clone(),
                    format!("{:.6}", a.get(u, t)),
                    format!("{:.6}", b.get(u, t)),
                ]);
            }
        }
        dir.write("comparison.csv", side.text())?;
    }

    if !units.is_empty() {
        let maps = dir.subdir("maps")?;
        let s = &samples[map_index];
        let (name, model) = arms[0];
        for &u in &units {
            let a = activation_map(model, &s.image, u)?;
            write_map_png(&maps.join(format!("{name}_unit{u:03}_{}.png", s.id)), &a)?;
        }
    }
    print!("{}", summary.text());
    Ok(dir.path)
}
