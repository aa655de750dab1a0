use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const MODEL: &[&str] = &["--encoder-levels", "2", "--base-filters", "4"];

fn exe(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fundus-ssl"))
        .env("RUST_LOG", "error")
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn fundus-ssl")
}

/// Runs a command that must succeed and returns its run directory.
fn ok(out: &Path, args: &[&str]) -> PathBuf {
    let o = exe(out, args);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(
        o.status.success(),
        "{args:?} failed:\n{stdout}\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let line = stdout
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("run directory: "))
        .expect("run directory line");
    PathBuf::from(line)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn labeled(out: &Path, seed: &str) -> PathBuf {
    ok(out, &["synth-gen", "--seed", seed, "--n", "6", "--size", "64"]).join("manifest.tsv")
}

fn finetune(out: &Path, data: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["finetune", "--seed", "4", "--data", s(data), "--checkpoint-every", "2"];
    args.extend_from_slice(extra);
    args.extend_from_slice(MODEL);
    ok(out, &args)
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let data = labeled(out, "1");
    let pool = ok(
        out,
        &[
            "synth-gen",
            "--seed",
            "2",
            "--n",
            "8",
            "--size",
            "64",
            "--images-only",
            "true",
        ],
    );
    assert!(!pool.join("vessel").exists());

    let mut pre = vec![
        "pretrain",
        "--seed",
        "3",
        "--epochs",
        "2",
        "--batch-size",
        "4",
        "--queue-len",
        "8",
    ];
    pre.extend_from_slice(&["--ingest-size", "64", "--crop-size", "32"]);
    let pool_manifest = pool.join("manifest.tsv");
    pre.extend_from_slice(&["--data", s(&pool_manifest)]);
    pre.extend_from_slice(MODEL);
    let pre = ok(out, &pre);
    let loss = read(&pre.join("loss.csv"));
    assert_eq!(loss.lines().next(), Some("epoch,step,loss,lr"));
    assert_eq!(loss.lines().count(), 1 + 2 * 2);

    let enc = pre.join("encoder.ntc");
    let ft = finetune(
        out,
        &data,
        &["--init-encoder", s(&enc), "--epochs", "4", "--keep-checkpoints", "true"],
    );
    for f in [
        "best.ntc",
        "last.ntc",
        "history.csv",
        "split.csv",
        "summary.txt",
        "checkpoints/epoch_00004.ntc",
    ] {
        assert!(ft.join(f).is_file(), "missing {f}");
    }
    assert_eq!(read(&ft.join("history.csv")).lines().count(), 5);
    assert!(read(&ft.join("split.csv")).contains(",val"));

    let best = ft.join("best.ntc");
    let ev = ok(
        out,
        &[
            "evaluate",
            "--seed",
            "0",
            "--checkpoint",
            s(&best),
            "--test",
            s(&data),
            "--train",
            s(&data),
        ],
    );
    assert_eq!(read(&ev.join("threshold_grid.csv")).lines().count(), 102);
    let row = read(&ev.join("report.csv"));
    assert!(row.starts_with("name,metric,threshold,tp,fp,fn,tn,dice,auprc\n"));
    let lesion = ok(
        out,
        &[
            "evaluate",
            "--seed",
            "0",
            "--checkpoint",
            s(&best),
            "--test",
            s(&data),
            "--train",
            s(&data),
            "--target",
            "lesion",
            "--no-tta",
        ],
    );
    assert!(lesion.join("report_pr_curve.csv").is_file());
    assert!(read(&lesion.join("config.txt")).contains("tta=false"));

    let pr = ok(
        out,
        &[
            "probe",
            "--seed",
            "5",
            "--data",
            s(&data),
            "--encoder",
            s(&enc),
            "--units",
            "0,3",
        ],
    );
    let summary = read(&pr.join("summary.csv"));
    assert_eq!(summary.lines().count(), 5, "{summary}");
    assert!(pr.join("comparison.csv").is_file());
    assert_eq!(fs::read_dir(pr.join("maps")).unwrap().count(), 2);
    let per = ok(
        out,
        &[
            "probe",
            "--seed",
            "5",
            "--data",
            s(&data),
            "--pooling",
            "per_image",
            "--compare-random",
            "false",
        ],
    );
    assert_eq!(read(&per.join("summary.csv")).lines().count(), 3);

    let tr = ok(
        out,
        &[
            "transfer",
            "--seed",
            "0",
            "--source-run",
            s(&ft),
            "--source-train",
            s(&data),
            "--target-train",
            s(&data),
            "--target-test",
            s(&data),
        ],
    );
    assert_eq!(read(&tr.join("transfer.csv")).lines().count(), 5);
    assert!(tr.join("target_checkpoint_selection.csv").is_file());

    let a = out.join("a.csv");
    let b = out.join("b.csv");
    fs::write(&a, "split,dice\ns1,0.7\ns2,0.8\ns3,0.75\ns4,0.9\n").unwrap();
    fs::write(&b, "split,dice\ns1,0.6\ns2,0.6\ns3,0.7\ns4,0.8\n").unwrap();
    let st = ok(out, &["stats", "--seed", "0", "--a", s(&a), "--b", s(&b)]);
    assert!(read(&st.join("stats.txt")).contains("significant"));
}

#[test]
fn identical_seeds_give_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out = tmp.path().join(sub);
        let data = labeled(&out, "9");
        let ft = finetune(&out, &data, &["--epochs", "3"]);
        (
            fs::read(ft.join("history.csv")).unwrap(),
            fs::read(ft.join("best.ntc")).unwrap(),
        )
    };
    assert_eq!(run("x"), run("y"));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let data = labeled(out, "7");
    let full = finetune(out, &data, &["--epochs", "4"]);
    let half = finetune(out, &data, &["--epochs", "2"]);
    let last = half.join("last.ntc");
    let rest = finetune(out, &data, &["--epochs", "4", "--resume", s(&last)]);
    let rows = |p: &Path| {
        read(&p.join("history.csv"))
            .lines()
            .skip(1)
            .map(String::from)
            .collect::<Vec<_>>()
    };
    let (full, rest) = (rows(&full), rows(&rest));
    assert_eq!(rest.len(), 2);
    assert!(rest[0].starts_with("3,"));
    assert_eq!(full[2..], rest[..]);
}

#[test]
fn missing_input_fails_without_writing_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let o = exe(
        &out,
        &["pretrain", "--seed", "1", "--data", "/nonexistent/manifest.tsv"],
    );
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nonexistent"));
    assert!(!out.exists() || fs::read_dir(&out).unwrap().next().is_none());
}

#[test]
fn unknown_or_missing_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let o = exe(out, &["synth-gen", "--seed", "1", "--set", "colour=blue"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));

    let o = exe(out, &["synth-gen", "--n", "2"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));

    let cfg = out.join("bad.cfg");
    fs::write(&cfg, "seed = 1\nsize 64\n").unwrap();
    let o = exe(out, &["synth-gen", "--config", s(&cfg)]);
    assert!(!o.status.success());
}

#[test]
fn config_file_and_flags_resolve_to_the_same_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let cfg = out.join("gen.cfg");
    fs::write(&cfg, "# synthetic set\nseed = 3\nn = 2\nsize = 32\n").unwrap();
    let a = ok(out, &["synth-gen", "--config", s(&cfg)]);
    let b = ok(out, &["synth-gen", "--seed", "3", "--n", "2", "--size", "32"]);
    assert_eq!(read(&a.join("config.txt")), read(&b.join("config.txt")));
    assert_ne!(a, b);
    assert_eq!(
        fs::read(a.join("images/synth_00001.png")).unwrap(),
        fs::read(b.join("images/synth_00001.png")).unwrap()
    );
}
