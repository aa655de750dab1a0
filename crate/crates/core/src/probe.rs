//! What the encoder learned: Pearson correlation of every final-level
//! feature unit with downsampled target masks, and per-unit activation maps.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{resize_bilinear, Image, Mask, Sample};
use crate::error::{Error, Result};
use crate::unet::UNetModel;

/// Pearson r in f64, or `None` when either side has zero variance.
pub fn pearson_checked(x: &[f32], y: &[f32]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "pearson",
            axis: "length",
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::invalid(format!("pearson needs >= 2 values, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let my = y.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a as f64 - mx, b as f64 - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0)))
}

/// Pearson r; 0 when either side has zero variance.
pub fn pearson(x: &[f32], y: &[f32]) -> Result<f32> {
    Ok(pearson_checked(x, y)?.unwrap_or(0.0) as f32)
}

/// Mean over non-overlapping `factor x factor` cells; dims must divide.
pub fn area_downsample(mask: &Mask, factor: usize) -> Result<Vec<f32>> {
    if factor == 0 || mask.height % factor != 0 || mask.width % factor != 0 {
        return Err(Error::IndivisibleInput {
            height: mask.height,
            width: mask.width,
            multiple: factor,
        });
    }
    let (gh, gw) = (mask.height / factor, mask.width / factor);
    let mut sums = vec![0u32; gh * gw];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.data[y * mask.width + x] != 0 {
                sums[(y / factor) * gw + x / factor] += 1;
            }
        }
    }
    let area = (factor * factor) as f32;
    Ok(sums.into_iter().map(|s| s as f32 / area).collect())
}

/// Unit-by-target Pearson coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub units: usize,
    pub targets: Vec<String>,
    /// Row-major `units x targets`.
    pub r: Vec<f32>,
    /// Targets with no variance under the chosen pooling; their column is 0.
    pub degenerate: Vec<String>,
}

impl CorrelationMatrix {
    pub fn get(&self, unit: usize, target: usize) -> f32 {
        self.r[unit * self.targets.len() + target]
    }

    pub fn column(&self, target: usize) -> Vec<f32> {
        (0..self.units).map(|u| self.get(u, target)).collect()
    }

    /// `(unit, r)` with the largest `|r|` for a target.
    pub fn max_abs(&self, target: usize) -> (usize, f32) {
        let mut best = (0, 0.0f32);
        for u in 0..self.units {
            let r = self.get(u, target);
            if r.abs() > best.1.abs() {
                best = (u, r);
            }
        }
        best
    }

    pub fn target_index(&self, name: &str) -> Option<usize> {
        self.targets.iter().position(|t| t == name)
    }

    pub const CSV_HEADER: &'static str = "unit,target,r";

    /// One `unit,target,r` line per entry, header first.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for u in 0..self.units {
            for (t, name) in self.targets.iter().enumerate() {
                s += &format!("{u},{name},{:.6}\n", self.get(u, t));
            }
        }
        s
    }
}

/// Largest height and width not above the image's that divide `multiple`.
fn cropped_dims(h: usize, w: usize, multiple: usize) -> Result<(usize, usize)> {
    let (ch, cw) = (h / multiple * multiple, w / multiple * multiple);
    if ch == 0 || cw == 0 {
        return Err(Error::IndivisibleInput {
            height: h,
            width: w,
            multiple,
        });
    }
    Ok((ch, cw))
}

/// How correlations combine several images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    /// One correlation over the feature cells of all images together.
    #[default]
    Pooled,
    /// Mean of per-image correlations, over the images whose target mask
    /// varies.
    PerImageMean,
}

/// Correlates each eval-mode feature unit with each target's
/// area-downsampled mask. Images are cropped to the model's size multiple.
pub fn feature_target_correlation(
    model: &UNetModel,
    samples: &[Sample],
    targets: &[&str],
    pooling: Pooling,
) -> Result<CorrelationMatrix> {
    if samples.is_empty() || targets.is_empty() {
        return Err(Error::invalid("feature_target_correlation: no samples or no targets"));
    }
    let factor = model.config.size_multiple();
    let units = model.config.feature_channels();
    // per image: unit planes and target columns over the same cells
    let mut per_image: Vec<(Vec<Vec<f32>>, Vec<Vec<f32>>)> = Vec::with_capacity(samples.len());
    for s in samples {
        s.validate()?;
        let (ch, cw) = cropped_dims(s.image.height, s.image.width, factor)?;
        let f = model.features(&s.image.crop(0, 0, ch, cw).to_tensor())?;
        let cells = (ch / factor) * (cw / factor);
        debug_assert_eq!(f.numel(), units * cells);
        let feats = f.data().chunks(cells).map(<[f32]>::to_vec).collect();
        let cols = targets
            .iter()
            .map(|name| area_downsample(&s.target(name)?.crop(0, 0, ch, cw), factor))
            .collect::<Result<Vec<_>>>()?;
        per_image.push((feats, cols));
    }

    let mut r = vec![0.0f32; units * targets.len()];
    let mut degenerate = Vec::new();
    for t in 0..targets.len() {
        let column: Option<Vec<f32>> = match pooling {
            Pooling::Pooled => {
                let col: Vec<f32> = per_image.iter().flat_map(|(_, c)| c[t].iter().copied()).collect();
                let mut out = None;
                if pearson_checked(&col, &col)?.is_some() {
                    let mut vals = Vec::with_capacity(units);
                    for u in 0..units {
                        let fu: Vec<f32> = per_image.iter().flat_map(|(f, _)| f[u].iter().copied()).collect();
                        vals.push(pearson(&fu, &col)?);
                    }
                    out = Some(vals);
                }
                out
            }
            Pooling::PerImageMean => {
                let mut sum = vec![0.0f64; units];
                let mut used = 0usize;
                for (feats, cols) in &per_image {
                    if cols[t].len() < 2 || pearson_checked(&cols[t], &cols[t])?.is_none() {
                        continue;
                    }
                    for (u, fu) in feats.iter().enumerate() {
                        sum[u] += pearson(fu, &cols[t])? as f64;
                    }
                    used += 1;
                }
                (used > 0).then(|| sum.iter().map(|&s| (s / used as f64) as f32).collect())
            }
        };
        match column {
            Some(vals) => {
                for (u, v) in vals.into_iter().enumerate() {
                    r[u * targets.len() + t] = v;
                }
            }
            None => {
                log::warn!("target {} has zero variance; its correlations are 0", targets[t]);
                degenerate.push(String::from(targets[t]));
            }
        }
    }
    Ok(CorrelationMatrix {
        units,
        targets: targets.iter().map(|&t| String::from(t)).collect(),
        r,
        degenerate,
    })
}

/// Min-max normalisation to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(v: &[f32]) -> Vec<f32> {
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| (x - lo) / range).collect()
}

/// One unit's feature map, min-max normalised and bilinearly upsampled to
/// the image's own size (single channel).
pub fn activation_map(model: &UNetModel, image: &Image, unit: usize) -> Result<Image> {
    let units = model.config.feature_channels();
    if unit >= units {
        return Err(Error::invalid(format!("unit {unit} out of range 0..{units}")));
    }
    let m = model.config.size_multiple();
    let (h, w) = image.dims();
    let (ph, pw) = (h.next_multiple_of(m), w.next_multiple_of(m));
    let f = model.features(&image.pad_to(ph, pw).to_tensor())?;
    let (gh, gw) = (ph / m, pw / m);
    let plane = &f.data()[unit * gh * gw..(unit + 1) * gh * gw];
    let small = Image::new(gh, gw, 1, min_max_normalize(plane))?;
    Ok(resize_bilinear(&small, ph, pw).crop(0, 0, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::unet::UNetConfig;
    use alloc::collections::BTreeMap;

    #[test]
    fn pearson_hand_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f32> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-6);
        let neg: Vec<f32> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-6);
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-6);
        assert_eq!(pearson_checked(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), None);
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn downsample_preserves_mass() {
        let mut rng = RngStream::new(2);
        let m = Mask::new(16, 24, (0..16 * 24).map(|_| rng.bernoulli(0.3) as u8).collect()).unwrap();
        let d = area_downsample(&m, 8).unwrap();
        assert_eq!(d.len(), 6);
        let mean_d = d.iter().sum::<f32>() / d.len() as f32;
        assert!((mean_d - m.count() as f32 / (16.0 * 24.0)).abs() < 1e-6);
        assert!(area_downsample(&Mask::zeros(10, 8), 8).is_err());
    }

    #[test]
    fn correlation_shape_and_degenerate_target() {
        let mut rng = RngStream::new(4);
        let model = UNetModel::build(UNetConfig::default(), &mut rng).unwrap();
        let image = Image::from_fn(16, 16, 3, |y, x, c| ((y * 3 + x * 5 + c) % 7) as f32 / 7.0);
        let mut targets = BTreeMap::new();
        targets.insert(
            "a".into(),
            Mask::new(16, 16, (0..256).map(|i| (i % 3 == 0) as u8).collect()).unwrap(),
        );
        targets.insert("empty".into(), Mask::zeros(16, 16));
        let s = Sample {
            id: "s".into(),
            image,
            fov: None,
            targets,
        };
        let cm = feature_target_correlation(&model, &[s.clone()], &["a", "empty"], Pooling::Pooled).unwrap();
        assert_eq!((cm.units, cm.targets.len(), cm.r.len()), (128, 2, 256));
        assert_eq!(cm.degenerate, vec![String::from("empty")]);
        assert!(cm.column(1).iter().all(|&r| r == 0.0));
        assert!(cm.r.iter().all(|r| r.abs() <= 1.0));
        assert!(cm.to_csv().lines().count() == 257);

        // one image: both poolings agree; an image with a flat target only
        // affects the pooled reading
        let per = feature_target_correlation(&model, &[s.clone()], &["a", "empty"], Pooling::PerImageMean).unwrap();
        assert_eq!(per.r, cm.r);
        let mut flat = s.clone();
        flat.targets.insert("a".into(), Mask::zeros(16, 16));
        flat.image = flat.image.flip_h();
        let two = feature_target_correlation(&model, &[s, flat], &["a"], Pooling::PerImageMean).unwrap();
        assert_eq!(two.column(0), cm.column(0));
    }

    #[test]
    fn activation_map_dims_and_constant_guard() {
        let mut rng = RngStream::new(6);
        let model = UNetModel::build(UNetConfig::default(), &mut rng).unwrap();
        let img = Image::from_fn(20, 13, 3, |y, x, _| (y + x) as f32 / 40.0);
        let a = activation_map(&model, &img, 5).unwrap();
        assert_eq!((a.dims(), a.channels), ((20, 13), 1));
        assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(activation_map(&model, &img, 128).is_err());
        assert_eq!(min_max_normalize(&[2.0; 4]), vec![0.0; 4]);
    }
}
