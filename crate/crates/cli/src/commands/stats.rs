use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use fundus_ssl_core::eval::{paired_tci, Interval, Sided};

use crate::config::{key, required, KeySpec, RunConfig, SEED};
use crate::output::{read_csv, Csv, RunDir};

pub const KEYS: &[KeySpec] = &[
    SEED,
    required("a", "CSV of the first arm (e.g. pre-trained)"),
    required("b", "CSV of the second arm (e.g. baseline); differences are a - b"),
    key("key_column", "split", "column pairing rows of the two files"),
    key("value_column", "dice", "column holding the compared score"),
    key("sided", "one", "one (lower bound only) or two"),
    key("level", "0.95", "confidence level"),
];

fn column(path: &Path, key: &str, value: &str) -> Result<BTreeMap<String, f64>> {
    let (header, rows) = read_csv(path)?;
    let find = |c: &str| {
        header
            .iter()
            .position(|h| h == c)
            .with_context(|| format!("{} has no column {c:?}", path.display()))
    };
    let (k, v) = (find(key)?, find(value)?);
    let mut out = BTreeMap::new();
    for r in rows {
        let x: f64 = r[v]
            .parse()
            .with_context(|| format!("{}: value {:?}", path.display(), r[v]))?;
        ensure!(
            out.insert(r[k].clone(), x).is_none(),
            "{}: duplicate key {}",
            path.display(),
            r[k]
        );
    }
    Ok(out)
}

/// Differences `a - b` over matching keys; any unmatched key is an error.
pub fn paired_diffs(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Result<Vec<(String, f64)>> {
    let unmatched: Vec<&String> = a
        .keys()
        .filter(|k| !b.contains_key(*k))
        .chain(b.keys().filter(|k| !a.contains_key(*k)))
        .collect();
    if !unmatched.is_empty() {
        bail!(
            "unpaired rows: {}",
            unmatched.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        );
    }
    Ok(a.iter().map(|(k, x)| (k.clone(), x - b[k])).collect())
}

pub fn verdict(ci: &Interval) -> &'static str {
    if ci.significant() {
        "significant"
    } else {
        "not significant"
    }
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let (kc, vc) = (cfg.str("key_column"), cfg.str("value_column"));
    let a = column(&cfg.required_path("a")?, kc, vc)?;
    let b = column(&cfg.required_path("b")?, kc, vc)?;
    let sided = match cfg.str("sided") {
        "one" => Sided::One,
        "two" => Sided::Two,
        s => bail!("sided={s:?}: expected one or two"),
    };
    let diffs = paired_diffs(&a, &b)?;
    let values: Vec<f64> = diffs.iter().map(|d| d.1).collect();
    let ci = paired_tci(&values, sided, cfg.get("level")?)?;
    let dir = RunDir::create(out, cfg)?;

    let mut d = Csv::new(&[kc, "a", "b", "diff"]);
    for (k, x) in &diffs {
        d.row(&[k.clone(), format!("{}", a[k]), format!("{}", b[k]), format!("{x}")]);
    }
    dir.write("diffs.csv", d.text())?;
    let mut s = Csv::new(&["n", "mean", "std_dev", "t_critical", "lower", "upper", "significant"]);
    s.row(&[
        ci.n.to_string(),
        format!("{:.6}", ci.mean),
        format!("{:.6}", ci.std_dev),
        format!("{:.6}", ci.t_critical),
        format!("{:.6}", ci.lower),
        format!("{:.6}", ci.upper),
        ci.significant().to_string(),
    ]);
    dir.write("stats.csv", s.text())?;
    let text = format!(
        "paired differences (a - b), n = {}\nmean {:.6}, sd {:.6}\n{:.0}% CI [{:.6}, {}]\n{}\n",
        ci.n,
        ci.mean,
        ci.std_dev,
        cfg.get::<f64>("level")? * 100.0,
        ci.lower,
        if ci.upper.is_infinite() {
            "+inf".to_string()
        } else {
            format!("{:.6}", ci.upper)
        },
        verdict(&ci)
    );
    dir.write("stats.txt", &text)?;
    print!("{text}");
    Ok(dir.path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unpaired_rows_are_listed() {
        let a: BTreeMap<String, f64> = [("s1".to_string(), 1.0), ("s2".to_string(), 2.0)].into();
        let b: BTreeMap<String, f64> = [("s1".to_string(), 0.5), ("s3".to_string(), 2.0)].into();
        let e = paired_diffs(&a, &b).unwrap_err().to_string();
        assert!(e.contains("s2") && e.contains("s3"));
        let same = paired_diffs(&a, &a).unwrap();
        assert!(same.iter().all(|d| d.1 == 0.0));
    }
}
