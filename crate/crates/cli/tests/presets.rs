use std::path::{Path, PathBuf};

use fundus_ssl::commands::{self, finetune, model_config, pretrain};
use fundus_ssl::config::RunConfig;

fn presets() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    out.sort();
    out
}

fn command_of(path: &Path) -> &'static str {
    let stem = path.file_stem().unwrap().to_str().unwrap();
    match stem.split('_').next().unwrap() {
        "pretrain" => "pretrain",
        "finetune" | "crosstrain" => "finetune",
        "transfer" => "transfer",
        p => panic!("preset {stem} has no command prefix {p:?}"),
    }
}

#[test]
fn every_preset_resolves_and_validates() {
    let files = presets();
    assert!(files.len() >= 12);
    for path in files {
        let name = command_of(&path);
        let cmd = commands::find(name).unwrap();
        let fill: Vec<(String, String)> = cmd
            .keys
            .iter()
            .filter(|k| k.default.is_none())
            .map(|k| (k.key.to_string(), "1".to_string()))
            .collect();
        let cfg = RunConfig::resolve(name, cmd.keys, Some(&path), &fill)
            .unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
        match name {
            "pretrain" => {
                pretrain::moco_config(&cfg).unwrap();
                model_config(&cfg).unwrap();
            }
            "finetune" => {
                finetune::train_config(&cfg).unwrap();
                model_config(&cfg).unwrap();
            }
            _ => assert!(cfg.bool("tta").unwrap()),
        }
    }
}

#[test]
fn presets_carry_the_published_settings() {
    let resolve = |file: &str, name: &str| {
        let cmd = commands::find(name).unwrap();
        let fill: Vec<(String, String)> = cmd
            .keys
            .iter()
            .filter(|k| k.default.is_none())
            .map(|k| (k.key.to_string(), "1".to_string()))
            .collect();
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets").join(file);
        RunConfig::resolve(name, cmd.keys, Some(&path), &fill).unwrap()
    };
    let m = pretrain::moco_config(&resolve("pretrain_eyepacs.cfg", "pretrain")).unwrap();
    assert_eq!((m.batch_size, m.epochs, m.queue_len), (64, 600, 4096));
    assert_eq!((m.tau, m.momentum, m.weight_decay), (0.07, 0.999, 1e-4));
    assert_eq!((m.augment.ingest_size, m.augment.crop_size), (512, 128));

    let t = finetune::train_config(&resolve("finetune_drive.cfg", "finetune")).unwrap();
    assert_eq!((t.epochs, t.batch_size, t.weight_decay), (1500, 4, 0.0));
    assert_eq!(
        (t.schedule.eta_max, t.schedule.eta_min, t.schedule.period),
        (1e-2, 1e-8, 50)
    );

    let idrid = resolve("finetune_idrid.cfg", "finetune");
    let t = finetune::train_config(&idrid).unwrap();
    assert_eq!((t.schedule.eta_max, t.schedule.eta_min), (1e-3, 1e-3));
    assert!(model_config(&idrid).unwrap().conv_skip_connections);

    let cross = resolve("crosstrain_drive.cfg", "finetune");
    assert_eq!(model_config(&cross).unwrap().decoder_widths, Some(vec![16, 8, 4]));
    assert_eq!(finetune::train_config(&cross).unwrap().weight_decay, 1e-4);
}
