//! Run directories, CSV tables and checkpoint files.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{ensure, Context, Result};
use fundus_ssl_core::data::{decode_checkpoint, encode_checkpoint};
use fundus_ssl_core::unet::UNetConfig;
use fundus_ssl_core::Tensor;

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.txt";

/// Output directory `<root>/<command>-<config hash>-<UTC timestamp>`
/// holding the resolved config.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path, cfg: &RunConfig) -> Result<Self> {
        let stamp = utc_stamp(
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .unwrap_or_default()
                .as_secs(),
        );
        let base = format!("{}-{}-{stamp}", cfg.command, cfg.hash());
        let mut path = root.join(&base);
        let mut n = 1;
        while path.exists() {
            n += 1;
            path = root.join(format!("{base}-{n}"));
        }
        std::fs::create_dir_all(&path).with_context(|| format!("cannot create {}", path.display()))?;
        std::fs::write(path.join(CONFIG_FILE), cfg.to_text())?;
        Ok(Self { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn subdir(&self, name: &str) -> Result<PathBuf> {
        let p = self.path.join(name);
        std::fs::create_dir_all(&p)?;
        Ok(p)
    }

    pub fn write(&self, name: &str, text: &str) -> Result<()> {
        std::fs::write(self.file(name), text).with_context(|| format!("writing {name}"))
    }
}

/// `YYYYmmddTHHMMSSZ` for seconds since the Unix epoch.
pub fn utc_stamp(secs: u64) -> String {
    let days = (secs / 86_400) as i64;
    let rem = secs % 86_400;
    // civil-from-days, proleptic Gregorian
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = yoe + era * 400 + i64::from(m <= 2);
    format!(
        "{y:04}{m:02}{d:02}T{:02}{:02}{:02}Z",
        rem / 3600,
        rem % 3600 / 60,
        rem % 60
    )
}

/// Comma-separated table with a header row.
#[derive(Debug, Clone)]
pub struct Csv {
    text: String,
    columns: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            text: header.join(",") + "\n",
            columns: header.len(),
        }
    }

    pub fn row<S: AsRef<str>>(&mut self, cells: &[S]) {
        assert_eq!(cells.len(), self.columns, "csv row width");
        let cells: Vec<String> = cells.iter().map(|c| escape(c.as_ref())).collect();
        self.text += &cells.join(",");
        self.text.push('\n');
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

fn escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Header plus rows; quoted cells are supported.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = split_csv(lines.next().with_context(|| format!("{} is empty", path.display()))?);
    let rows: Vec<Vec<String>> = lines.map(split_csv).collect();
    for (i, r) in rows.iter().enumerate() {
        ensure!(
            r.len() == header.len(),
            "{}: row {} has {} cells, header {}",
            path.display(),
            i + 2,
            r.len(),
            header.len()
        );
    }
    Ok((header, rows))
}

fn split_csv(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out.into_iter().map(|s| s.trim().to_string()).collect()
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode_checkpoint(tensors)?;
    let tmp = path.with_extension("ntc.tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
    decode_checkpoint(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// Name of the tensor that records the U-Net architecture.
pub const ARCH_TENSOR: &str = "meta.unet";

/// `[levels, base_filters, conv_skips, input_channels, decoder widths...]`.
pub fn arch_tensor(c: &UNetConfig) -> (String, Tensor) {
    let mut v = vec![
        c.encoder_levels as f32,
        c.base_filters as f32,
        f32::from(u8::from(c.conv_skip_connections)),
        c.input_channels as f32,
    ];
    v.extend(c.decoder_widths().iter().map(|&w| w as f32));
    let n = v.len();
    (ARCH_TENSOR.into(), Tensor::new(&[n], v).expect("length matches"))
}

pub fn arch_from_tensors(tensors: &[(String, Tensor)]) -> Result<UNetConfig> {
    let t = fundus_ssl_core::data::find_tensor(tensors, ARCH_TENSOR)
        .with_context(|| format!("checkpoint lacks {ARCH_TENSOR}"))?;
    let v: Vec<usize> = t.data().iter().map(|&x| x as usize).collect();
    ensure!(v.len() >= 4, "malformed {ARCH_TENSOR}");
    let c = UNetConfig {
        encoder_levels: v[0],
        base_filters: v[1],
        conv_skip_connections: v[2] != 0,
        input_channels: v[3],
        decoder_widths: Some(v[4..].to_vec()),
    };
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stamp_known_dates() {
        assert_eq!(utc_stamp(0), "19700101T000000Z");
        assert_eq!(utc_stamp(951_782_400), "20000229T000000Z");
        assert_eq!(utc_stamp(1_700_000_000), "20231114T221320Z");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Csv::new(&["a", "b"]);
        c.row(&["x,y", "2"]);
        c.row(&["q\"", "3"]);
        let p = dir.path().join("t.csv");
        std::fs::write(&p, c.text()).unwrap();
        let (h, rows) = read_csv(&p).unwrap();
        assert_eq!(h, vec!["a", "b"]);
        assert_eq!(rows, vec![vec!["x,y", "2"], vec!["q\"", "3"]]);
    }

    #[test]
    fn arch_round_trip() {
        let c = UNetConfig {
            conv_skip_connections: true,
            ..UNetConfig::constrained()
        };
        let back = arch_from_tensors(&[arch_tensor(&c)]).unwrap();
        assert_eq!(back.decoder_widths(), vec![16, 8, 4]);
        assert!(back.conv_skip_connections);
    }
}
