//! Tab-separated dataset manifests.
//!
//! One sample per line: `image<TAB>fov<TAB>name=path...`. The FOV column may
//! be `-` or empty. Target columns may carry a `target:` prefix. A
//! `split=train|val|test` column pins the sample's role. Paths are relative
//! to the manifest's directory; `#` starts a comment line.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use fundus_ssl_core::augment::ingest;
use fundus_ssl_core::data::{resize_sample_to_width, Rgb8, Sample};
use rayon::prelude::*;

use crate::imageio::{read_image, read_mask, read_rgb};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Role::Train,
            "val" => Role::Val,
            "test" => Role::Test,
            _ => bail!("unknown split {s:?} (train, val, test)"),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub id: String,
    pub image: PathBuf,
    pub fov: Option<PathBuf>,
    pub targets: BTreeMap<String, PathBuf>,
    pub role: Option<Role>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    /// Sorted by id.
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read manifest {}", path.display()))?;
        let root = path.parent().unwrap_or(Path::new("."));
        let mut m = Self::parse(&text, root).with_context(|| format!("in manifest {}", path.display()))?;
        m.path = path.to_path_buf();
        Ok(m)
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            entries.push(parse_line(line, root).with_context(|| format!("line {}", ln + 1))?);
        }
        ensure!(!entries.is_empty(), "manifest lists no samples");
        entries.sort_by(|a: &Entry, b: &Entry| a.id.cmp(&b.id));
        for w in entries.windows(2) {
            ensure!(w[0].id != w[1].id, "duplicate sample id {}", w[0].id);
        }
        Ok(Self {
            path: PathBuf::new(),
            entries,
        })
    }

    /// Every target name used by any entry.
    pub fn target_names(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.entries.iter().flat_map(|e| e.targets.keys()).collect();
        set.into_iter().cloned().collect()
    }

    pub fn has_roles(&self) -> bool {
        self.entries.iter().any(|e| e.role.is_some())
    }

    /// Manifest text with paths relative to `root` when possible.
    pub fn to_text(&self, root: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(root).unwrap_or(p).display().to_string();
        let mut s = String::new();
        for e in &self.entries {
            s += &rel(&e.image);
            s.push('\t');
            s += &e.fov.as_deref().map_or("-".into(), rel);
            for (k, p) in &e.targets {
                let _ = write!(s, "\t{k}={}", rel(p));
            }
            if let Some(r) = e.role {
                let _ = write!(s, "\tsplit={}", r.as_str());
            }
            s.push('\n');
        }
        s
    }
}

fn parse_line(line: &str, root: &Path) -> Result<Entry> {
    let cols: Vec<&str> = line.split('\t').collect();
    let resolve = |p: &str| {
        let p = Path::new(p.trim());
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            root.join(p)
        }
    };
    let image = resolve(cols[0]);
    let id = image
        .file_stem()
        .and_then(|s| s.to_str())
        .context("image path has no file name")?
        .to_string();
    let fov = match cols.get(1).map(|c| c.trim()) {
        None | Some("") | Some("-") => None,
        Some(p) => Some(resolve(p)),
    };
    let mut targets = BTreeMap::new();
    let mut role = None;
    for col in cols.iter().skip(2).map(|c| c.trim()).filter(|c| !c.is_empty()) {
        let (k, v) = col
            .split_once('=')
            .with_context(|| format!("column {col:?} is not name=path"))?;
        let k = k.strip_prefix("target:").unwrap_or(k).trim();
        if k == "split" {
            role = Some(Role::parse(v.trim())?);
            continue;
        }
        ensure!(!k.is_empty(), "empty target name in {col:?}");
        ensure!(
            targets.insert(k.to_string(), resolve(v)).is_none(),
            "target {k} listed twice"
        );
    }
    let entry = Entry {
        id,
        image,
        fov,
        targets,
        role,
    };
    for p in std::iter::once(&entry.image)
        .chain(&entry.fov)
        .chain(entry.targets.values())
    {
        ensure!(p.is_file(), "referenced file {} does not exist", p.display());
    }
    Ok(entry)
}

/// Reads a sample; with `resize_width > 0` the image is resized bilinearly
/// and masks by nearest neighbour.
pub fn load_sample(e: &Entry, resize_width: usize) -> Result<Sample> {
    let mut s = Sample {
        id: e.id.clone(),
        image: read_image(&e.image)?,
        fov: e.fov.as_deref().map(read_mask).transpose()?,
        targets: e
            .targets
            .iter()
            .map(|(k, p)| Ok((k.clone(), read_mask(p)?)))
            .collect::<Result<_>>()?,
    };
    s.validate().with_context(|| format!("sample {}", e.id))?;
    if resize_width > 0 && resize_width != s.image.width {
        s = resize_sample_to_width(&s, resize_width);
    }
    Ok(s)
}

pub fn load_samples(entries: &[Entry], resize_width: usize) -> Result<Vec<Sample>> {
    entries.par_iter().map(|e| load_sample(e, resize_width)).collect()
}

/// Images only, resized and centre-cropped to `size x size`, kept as 8-bit.
pub fn load_unlabeled(m: &Manifest, size: usize) -> Result<Vec<Rgb8>> {
    m.entries
        .par_iter()
        .map(|e| {
            let img = read_rgb(&e.image)?;
            Ok(if img.height == size && img.width == size {
                img
            } else {
                ingest(&img.to_image(), size).to_rgb8()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::{write_gray_png, write_rgb_png};

    #[test]
    fn parse_sort_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        for f in ["b.png", "a.png", "m.png"] {
            std::fs::write(d.join(f), b"x").unwrap();
        }
        let m = Manifest::parse("# c\nb.png\t-\ttarget:vessel=m.png\nnot\ta.png\n", d);
        assert!(m.is_err());
        let m = Manifest::parse("b.png\t-\ttarget:vessel=m.png\tsplit=val\na.png\tm.png\n", d).unwrap();
        assert_eq!(m.entries[0].id, "a");
        assert_eq!(m.entries[1].role, Some(Role::Val));
        assert_eq!(m.target_names(), vec!["vessel".to_string()]);
        assert!(Manifest::parse("a.png\na.png\n", d).is_err());
        assert!(Manifest::parse("zz.png\n", d).is_err());
        let again = Manifest::parse(&m.to_text(d), d).unwrap();
        assert_eq!(again.entries, m.entries);
    }

    #[test]
    fn mismatched_mask_names_both_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let rgb = Rgb8 {
            height: 2,
            width: 3,
            data: vec![0; 18],
        };
        write_rgb_png(&d.join("i.png"), &rgb).unwrap();
        write_gray_png(&d.join("v.png"), 2, 2, &[255; 4]).unwrap();
        let m = Manifest::parse("i.png\t-\tvessel=v.png\n", d).unwrap();
        let err = format!("{:#}", load_sample(&m.entries[0], 0).unwrap_err());
        assert!(err.contains("2x3") && err.contains("2x2"), "{err}");
    }
}
