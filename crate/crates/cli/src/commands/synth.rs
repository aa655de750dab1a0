use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Result;
use fundus_ssl_core::data::{synth_sample, SynthConfig};
use fundus_ssl_core::RngStream;
use rayon::prelude::*;

use crate::config::{key, KeySpec, RunConfig, SEED};
use crate::imageio::{write_mask_png, write_rgb_png};
use crate::manifest::{Entry, Manifest};
use crate::output::RunDir;

pub const KEYS: &[KeySpec] = &[
    SEED,
    key("n", "32", "number of samples"),
    key("size", "256", "image side in pixels"),
    key("vessels_min", "5", "fewest vessel curves"),
    key("vessels_max", "15", "most vessel curves"),
    key("width_min", "1", "thinnest vessel width in pixels"),
    key("width_max", "6", "widest vessel width in pixels"),
    key("lesions_max", "8", "most lesion blobs"),
    key("fov_radius", "0.46", "field-of-view radius as a fraction of the size"),
    key("images_only", "false", "skip masks (unlabeled corpus)"),
];

pub const MANIFEST_FILE: &str = "manifest.tsv";

pub fn run(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let sc = SynthConfig {
        size: cfg.get("size")?,
        vessels_min: cfg.get("vessels_min")?,
        vessels_max: cfg.get("vessels_max")?,
        width_min: cfg.get("width_min")?,
        width_max: cfg.get("width_max")?,
        lesions_max: cfg.get("lesions_max")?,
        fov_radius: cfg.get("fov_radius")?,
        ..SynthConfig::default()
    };
    sc.validate()?;
    let n: usize = cfg.get("n")?;
    anyhow::ensure!(n >= 1, "n must be >= 1");
    let images_only = cfg.bool("images_only")?;
    let root = RngStream::new(cfg.seed()?);
    let dir = RunDir::create(out, cfg)?;
    let img_dir = dir.subdir("images")?;
    let mask_dirs = if images_only {
        None
    } else {
        Some((dir.subdir("fov")?, dir.subdir("vessel")?, dir.subdir("lesion")?))
    };

    // sample i draws from its own fork, so generation order is irrelevant
    let entries: Vec<Entry> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Entry> {
            let s = synth_sample(i, &sc, &mut root.fork(i as u64));
            let file = format!("{}.png", s.id);
            let image = img_dir.join(&file);
            write_rgb_png(&image, &s.image.to_rgb8())?;
            let mut targets = BTreeMap::new();
            let mut fov = None;
            if let Some((fd, vd, ld)) = &mask_dirs {
                write_mask_png(&fd.join(&file), &s.fov_or_full())?;
                fov = Some(fd.join(&file));
                for (name, d) in [("vessel", vd), ("lesion", ld)] {
                    write_mask_png(&d.join(&file), s.target(name)?)?;
                    targets.insert(name.to_string(), d.join(&file));
                }
            }
            Ok(Entry {
                id: s.id,
                image,
                fov,
                targets,
                role: None,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        path: dir.file(MANIFEST_FILE),
        entries,
    };
    dir.write(MANIFEST_FILE, &manifest.to_text(&dir.path))?;
    println!("{}", dir.file(MANIFEST_FILE).display());
    Ok(dir.path)
}
