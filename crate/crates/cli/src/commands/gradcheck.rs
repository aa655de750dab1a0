use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use fundus_ssl_core::gradcheck::{primitive_suite, unet_check, CheckOptions, GradCheckReport};
use fundus_ssl_core::unet::UNetConfig;

use crate::config::{key, KeySpec, RunConfig, SEED};
use crate::output::{Csv, RunDir};

pub const KEYS: &[KeySpec] = &[
    SEED,
    key("seeds", "20", "random seeds per primitive"),
    key("eps", "1e-5", "central-difference step"),
    key("max_coords", "48", "coordinates sampled per input tensor"),
    key("tolerance", "1e-3", "pass bound of the primitive checks"),
    key("unet", "true", "also check the full 16x16 U-Net composite"),
    key("unet_coords", "4", "coordinates sampled per U-Net tensor"),
    key("unet_tolerance", "1e-2", "pass bound of the composite check"),
];

pub fn run(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let base = cfg.seed()?;
    let seeds: u64 = cfg.get("seeds")?;
    let opts = CheckOptions {
        eps: cfg.get("eps")?,
        max_coords: cfg.get("max_coords")?,
    };
    let (tol, unet_tol): (f64, f64) = (cfg.get("tolerance")?, cfg.get("unet_tolerance")?);
    let unet_opts = CheckOptions {
        max_coords: cfg.get("unet_coords")?,
        ..opts
    };
    let check_unet = cfg.bool("unet")?;
    let dir = RunDir::create(out, cfg)?;

    let mut csv = Csv::new(&["name", "seed", "max_rel_error", "checked", "tolerance", "pass"]);
    let mut failures = 0;
    let mut record = |r: &GradCheckReport, seed: u64, tol: f64| {
        let pass = r.max_rel_error < tol;
        failures += usize::from(!pass);
        csv.row(&[
            r.name.clone(),
            seed.to_string(),
            format!("{:.3e}", r.max_rel_error),
            r.checked.to_string(),
            format!("{tol:e}"),
            pass.to_string(),
        ]);
    };
    for s in base..base + seeds {
        for r in primitive_suite(s, &opts)? {
            record(&r, s, tol);
        }
    }
    if check_unet {
        for config in [
            UNetConfig::default(),
            UNetConfig {
                conv_skip_connections: true,
                ..UNetConfig::constrained()
            },
        ] {
            record(&unet_check(base, config, &unet_opts)?, base, unet_tol);
        }
    }
    dir.write("gradcheck.csv", csv.text())?;
    if failures > 0 {
        bail!(
            "{failures} gradient checks failed; see {}",
            dir.file("gradcheck.csv").display()
        );
    }
    println!("all gradient checks passed");
    Ok(dir.path)
}
