//! Images, masks, samples, resizing, splits, the synthetic fundus generator
//! and the NTC1 checkpoint byte format.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Interleaved `H x W x C` f32 raster. RGB images use `C = 3` with values in
/// `[0, 1]`; probability and feature maps use `C = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::DataLength {
                shape: vec![height, width, channels],
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        assert!(
            top + height <= self.height && left + width <= self.width,
            "crop out of bounds"
        );
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let row = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[row..row + width * c]);
        }
        Image {
            height,
            width,
            channels: c,
            data,
        }
    }

    pub fn flip_h(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    pub fn flip_v(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(self.height - 1 - y, x, c)
        })
    }

    /// Zero-pads on the bottom and right.
    pub fn pad_to(&self, height: usize, width: usize) -> Image {
        assert!(height >= self.height && width >= self.width, "pad_to cannot shrink");
        let mut out = Image::zeros(height, width, self.channels);
        let c = self.channels;
        for y in 0..self.height {
            out.data[y * width * c..(y * width + self.width) * c]
                .copy_from_slice(&self.data[y * self.width * c..(y + 1) * self.width * c]);
        }
        out
    }

    /// `1 x C x H x W` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0.0; h * w * c];
        for (i, px) in self.data.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                data[ch * h * w + i] = v;
            }
        }
        Tensor::new(&[1, c, h, w], data).expect("length matches")
    }

    /// Image `index` of an NCHW tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Image> {
        let (n, c, h, w) = t.dims4("Image::from_tensor")?;
        if index >= n {
            return Err(Error::invalid(format!("batch index {index} out of range for N = {n}")));
        }
        let base = index * c * h * w;
        Ok(Image::from_fn(h, w, c, |y, x, ch| {
            t.data()[base + (ch * h + y) * w + x]
        }))
    }

    /// Rec. 601 luma of an RGB image as a single-channel image.
    pub fn luma(&self) -> Image {
        assert_eq!(self.channels, 3, "luma needs RGB");
        let data = self.data.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    pub fn to_rgb8(&self) -> Rgb8 {
        assert_eq!(self.channels, 3, "to_rgb8 needs RGB");
        Rgb8 {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| to_u8(v)).collect(),
        }
    }
}

#[inline]
pub fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8
}

/// Compact 8-bit RGB storage for large unlabeled corpora.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Rgb8 {
    pub fn to_image(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: 3,
            data: self.data.iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    /// Crop straight to f32 without materialising the full image.
    pub fn crop_image(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        assert!(
            top + height <= self.height && left + width <= self.width,
            "crop out of bounds"
        );
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let row = (y * self.width + left) * 3;
            data.extend(self.data[row..row + width * 3].iter().map(|&v| v as f32 / 255.0));
        }
        Image {
            height,
            width,
            channels: 3,
            data,
        }
    }
}

/// Binary `H x W` mask, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DataLength {
                shape: vec![height, width],
                expected: height * width,
                actual: data.len(),
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    /// 8-bit grayscale to binary: values above 127 are positive.
    pub fn from_gray8(height: usize, width: usize, gray: &[u8]) -> Result<Self> {
        Mask::new(height, width, gray.iter().map(|&v| u8::from(v > 127)).collect())
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = u8::from(v);
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Mask {
        assert!(
            top + height <= self.height && left + width <= self.width,
            "crop out of bounds"
        );
        let mut data = Vec::with_capacity(height * width);
        for y in top..top + height {
            data.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + width]);
        }
        Mask { height, width, data }
    }

    pub fn flip_h(&self) -> Mask {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.width) {
            row.reverse();
        }
        out
    }

    pub fn flip_v(&self) -> Mask {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(self.width).rev() {
            data.extend_from_slice(row);
        }
        Mask { data, ..*self }
    }

    pub fn pad_to(&self, height: usize, width: usize) -> Mask {
        assert!(height >= self.height && width >= self.width, "pad_to cannot shrink");
        let mut out = Mask::zeros(height, width);
        for y in 0..self.height {
            out.data[y * width..y * width + self.width]
                .copy_from_slice(&self.data[y * self.width..(y + 1) * self.width]);
        }
        out
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect()
    }
}

/// One image with an optional field-of-view mask and named binary targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub fov: Option<Mask>,
    pub targets: BTreeMap<String, Mask>,
}

impl Sample {
    /// Every mask must share the image's `H x W`.
    pub fn validate(&self) -> Result<()> {
        let dims = self.image.dims();
        let masks = self
            .fov
            .iter()
            .map(|m| ("fov", m))
            .chain(self.targets.iter().map(|(k, m)| (k.as_str(), m)));
        for (name, m) in masks {
            if m.dims() != dims {
                return Err(Error::invalid(format!(
                    "sample {}: image is {}x{} but mask {name} is {}x{}",
                    self.id, dims.0, dims.1, m.height, m.width
                )));
            }
        }
        Ok(())
    }

    pub fn target(&self, name: &str) -> Result<&Mask> {
        self.targets
            .get(name)
            .ok_or_else(|| Error::invalid(format!("sample {} has no target {name:?}", self.id)))
    }

    /// The FOV mask, or an all-ones mask when none is given.
    pub fn fov_or_full(&self) -> Mask {
        self.fov
            .clone()
            .unwrap_or_else(|| Mask::ones(self.image.height, self.image.width))
    }
}

/// Bilinear resize with the align-corners-false convention: output pixel
/// centre `(i + 0.5) * in / out - 0.5` in input coordinates, clamped to the
/// border.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    assert!(height >= 1 && width >= 1, "target dims must be >= 1");
    if (height, width) == img.dims() {
        return img.clone();
    }
    let ys: Vec<(usize, usize, f32)> = (0..height).map(|i| source_coord(i, img.height, height)).collect();
    let xs: Vec<(usize, usize, f32)> = (0..width).map(|i| source_coord(i, img.width, width)).collect();
    let c = img.channels;
    let mut out = Image::zeros(height, width, c);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bot = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                out.data[(oy * width + ox) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn source_coord(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f32) {
    let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = s as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, (s - i0 as f64) as f32)
}

/// Nearest-neighbour resize for masks, same pixel-centre convention.
pub fn resize_nearest(mask: &Mask, height: usize, width: usize) -> Mask {
    assert!(height >= 1 && width >= 1, "target dims must be >= 1");
    let pick =
        |i: usize, n_in: usize, n_out: usize| (((i as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let mut out = Mask::zeros(height, width);
    for y in 0..height {
        let sy = pick(y, mask.height, height);
        for x in 0..width {
            out.data[y * width + x] = mask.data[sy * mask.width + pick(x, mask.width, width)];
        }
    }
    out
}

/// Resizes a sample so its width equals `width`, preserving aspect ratio.
pub fn resize_sample_to_width(s: &Sample, width: usize) -> Sample {
    let height = (libm::round(s.image.height as f64 * width as f64 / s.image.width as f64) as usize).max(1);
    Sample {
        id: s.id.clone(),
        image: resize_bilinear(&s.image, height, width),
        fov: s.fov.as_ref().map(|m| resize_nearest(m, height, width)),
        targets: s
            .targets
            .iter()
            .map(|(k, m)| (k.clone(), resize_nearest(m, height, width)))
            .collect(),
    }
}

/// Seeded shuffle of `0..n`; the first `floor(n * val_fraction)` indices form
/// the validation set. Both halves are returned in ascending order.
pub fn split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    assert!((0.0..=1.0).contains(&val_fraction), "val_fraction must lie in [0, 1]");
    let n_val = libm::floor(n as f64 * val_fraction + 1e-9) as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    RngStream::new(seed).fork(0x5EED_5B17).shuffle(&mut idx);
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

pub const VESSEL_TARGET: &str = "vessel";
pub const LESION_TARGET: &str = "lesion";

/// Synthetic fundus-like image generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    pub vessels_min: usize,
    pub vessels_max: usize,
    pub width_min: f32,
    pub width_max: f32,
    pub lesions_max: usize,
    /// FOV radius as a fraction of the image size.
    pub fov_radius: f32,
    /// Vessel length relative to the FOV radius.
    pub vessel_length: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 256,
            vessels_min: 5,
            vessels_max: 15,
            width_min: 1.0,
            width_max: 6.0,
            lesions_max: 8,
            fov_radius: 0.46,
            vessel_length: 1.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.size >= 8
            && self.vessels_min <= self.vessels_max
            && self.width_min > 0.0
            && self.width_min <= self.width_max
            && self.fov_radius > 0.0
            && self.fov_radius <= 0.5
            && self.vessel_length > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid synthetic config {self:?}")))
        }
    }
}

/// Generates `n` samples; sample `i` depends only on `(rng seed, i)`.
pub fn synth_generate(n: usize, cfg: &SynthConfig, rng: &RngStream) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::invalid("synth_generate: n must be >= 1"));
    }
    Ok((0..n).map(|i| synth_sample(i, cfg, &mut rng.fork(i as u64))).collect())
}

pub fn synth_sample(index: usize, cfg: &SynthConfig, rng: &mut RngStream) -> Sample {
    let s = cfg.size;
    let (cx, cy) = (s as f32 / 2.0, s as f32 / 2.0);
    let radius = cfg.fov_radius * s as f32;
    let mut fov = Mask::zeros(s, s);
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            fov.set(y, x, dx * dx + dy * dy <= radius * radius);
        }
    }

    // per-image colour: reddish-orange base with random brightness and hue
    let brightness = rng.uniform_range(0.6, 1.1) as f32;
    let hue = rng.uniform_range(-0.08, 0.08) as f32;
    let base = [
        (0.72 + hue) * brightness,
        (0.36 + 0.5 * hue) * brightness,
        (0.16 - hue) * brightness,
    ];
    // illumination peaks off-centre, like an optic-disc-side bright region
    let (lx, ly) = (
        cx + rng.uniform_range(-0.3, 0.3) as f32 * radius,
        cy + rng.uniform_range(-0.3, 0.3) as f32 * radius,
    );
    let mut image = Image::zeros(s, s, 3);
    for y in 0..s {
        for x in 0..s {
            if !fov.get(y, x) {
                for c in 0..3 {
                    image.set(y, x, c, 0.02);
                }
                continue;
            }
            let (dx, dy) = (x as f32 + 0.5 - lx, y as f32 + 0.5 - ly);
            let r2 = (dx * dx + dy * dy) / (radius * radius);
            let illum = (1.0 - 0.45 * r2).max(0.25);
            for (c, b) in base.iter().enumerate() {
                let noise = 0.015 * rng.normal() as f32;
                image.set(y, x, c, b * illum + noise);
            }
        }
    }

    let mut lesion = Mask::zeros(s, s);
    let n_lesions = rng.below(cfg.lesions_max + 1);
    for _ in 0..n_lesions {
        let ang = rng.uniform_range(0.0, core::f64::consts::TAU) as f32;
        let dist = libm::sqrtf(rng.uniform() as f32) * radius * 0.85;
        let (ex, ey) = (cx + dist * libm::cosf(ang), cy + dist * libm::sinf(ang));
        let scale = s as f32 / 256.0;
        let (a, b) = (
            rng.uniform_range(2.0, 9.0) as f32 * scale,
            rng.uniform_range(2.0, 9.0) as f32 * scale,
        );
        let rot = rng.uniform_range(0.0, core::f64::consts::PI) as f32;
        let (cr, sr) = (libm::cosf(rot), libm::sinf(rot));
        let reach = libm::ceilf(a.max(b)) as isize + 1;
        for y in (ey as isize - reach).max(0)..(ey as isize + reach).min(s as isize) {
            for x in (ex as isize - reach).max(0)..(ex as isize + reach).min(s as isize) {
                let (dx, dy) = (x as f32 + 0.5 - ex, y as f32 + 0.5 - ey);
                let (u, v) = (dx * cr + dy * sr, -dx * sr + dy * cr);
                if (u / a) * (u / a) + (v / b) * (v / b) <= 1.0 && fov.get(y as usize, x as usize) {
                    lesion.set(y as usize, x as usize, true);
                }
            }
        }
    }
    let lesion_rgb = [0.95f32, 0.88, 0.45];
    for y in 0..s {
        for x in 0..s {
            if lesion.get(y, x) {
                for (c, &v) in lesion_rgb.iter().enumerate() {
                    let old = image.get(y, x, c);
                    image.set(y, x, c, 0.25 * old + 0.75 * v * brightness.max(0.8));
                }
            }
        }
    }

    let mut vessel = Mask::zeros(s, s);
    let n_vessels = cfg.vessels_min + rng.below(cfg.vessels_max - cfg.vessels_min + 1);
    for _ in 0..n_vessels {
        draw_vessel(&mut vessel, &fov, cfg, radius, (cx, cy), rng);
    }
    let contrast = rng.uniform_range(0.45, 0.65) as f32;
    for y in 0..s {
        for x in 0..s {
            if vessel.get(y, x) {
                lesion.set(y, x, false);
                for (c, k) in [contrast, contrast * 0.8, contrast].iter().enumerate() {
                    let old = image.get(y, x, c);
                    image.set(y, x, c, old * k);
                }
            }
        }
    }
    for v in &mut image.data {
        *v = v.clamp(0.0, 1.0);
    }

    let mut targets = BTreeMap::new();
    targets.insert(String::from(VESSEL_TARGET), vessel);
    targets.insert(String::from(LESION_TARGET), lesion);
    Sample {
        id: format!("synth_{index:05}"),
        image,
        fov: Some(fov),
        targets,
    }
}

/// One vessel: a chain of quadratic Bezier segments with tapering width,
/// starting near the FOV centre and wandering outward.
fn draw_vessel(mask: &mut Mask, fov: &Mask, cfg: &SynthConfig, radius: f32, centre: (f32, f32), rng: &mut RngStream) {
    let segments = 2 + rng.below(2);
    let total = cfg.vessel_length * radius;
    let seg_len = total / segments as f32;
    let ang0 = rng.uniform_range(0.0, core::f64::consts::TAU) as f32;
    let start_r = rng.uniform_range(0.0, 0.35) as f32 * radius;
    let mut p0 = (
        centre.0 + start_r * libm::cosf(ang0),
        centre.1 + start_r * libm::sinf(ang0),
    );
    let mut heading = ang0 + rng.uniform_range(-0.6, 0.6) as f32;
    let w0 = rng.uniform_range(cfg.width_min as f64, cfg.width_max as f64) as f32;
    let w1 = (w0 * rng.uniform_range(0.4, 0.8) as f32).max(cfg.width_min);
    let mut travelled = 0.0f32;
    for _ in 0..segments {
        let bend = rng.uniform_range(-0.7, 0.7) as f32;
        let mid_heading = heading + bend;
        let p1 = (
            p0.0 + 0.5 * seg_len * libm::cosf(mid_heading),
            p0.1 + 0.5 * seg_len * libm::sinf(mid_heading),
        );
        heading = mid_heading + rng.uniform_range(-0.5, 0.5) as f32;
        let p2 = (
            p1.0 + 0.5 * seg_len * libm::cosf(heading),
            p1.1 + 0.5 * seg_len * libm::sinf(heading),
        );
        let steps = libm::ceilf(seg_len * 2.0) as usize + 1;
        for k in 0..=steps {
            let t = k as f32 / steps as f32;
            let u = 1.0 - t;
            let px = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
            let py = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
            let frac = (travelled + t * seg_len) / total;
            let width = w0 + (w1 - w0) * frac;
            stamp_disc(mask, fov, px, py, width / 2.0);
        }
        travelled += seg_len;
        p0 = p2;
    }
}

fn stamp_disc(mask: &mut Mask, fov: &Mask, cx: f32, cy: f32, r: f32) {
    let (h, w) = (mask.height as isize, mask.width as isize);
    let reach = libm::ceilf(r) as isize + 1;
    let (ix, iy) = (libm::floorf(cx) as isize, libm::floorf(cy) as isize);
    for y in (iy - reach).max(0)..(iy + reach + 1).min(h) {
        for x in (ix - reach).max(0)..(ix + reach + 1).min(w) {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            // width-1 vessels still cover the pixel their centreline crosses
            if dx * dx + dy * dy <= (r * r).max(0.5) && fov.get(y as usize, x as usize) {
                mask.set(y as usize, x as usize, true);
            }
        }
    }
}

// ---------------------------------------------------------------- NTC1

pub const NTC_MAGIC: &[u8; 4] = b"NTC1";
pub const NTC_VERSION: u32 = 1;

/// Serialises named tensors as NTC1: magic, version, count, then per tensor
/// name (u32 length + UTF-8), rank, dims, f32 payload; all little-endian,
/// followed by the CRC32 of every preceding byte.
pub fn encode_checkpoint(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = alloc::collections::BTreeSet::new();
    for (name, _) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name:?}")));
        }
    }
    let payload: usize = tensors
        .iter()
        .map(|(n, t)| 8 + n.len() + 4 * t.rank() + 4 * t.numel())
        .sum();
    let mut out = Vec::with_capacity(16 + payload);
    out.extend_from_slice(NTC_MAGIC);
    out.extend_from_slice(&NTC_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(tensors.len())?.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&u32_of(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.rank())?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d)?.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))
}

/// Parses an NTC1 buffer. The CRC is verified before anything is decoded.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "CRC mismatch (stored {stored:#010x}, computed {actual:#010x}); file truncated or corrupt"
        )));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != NTC_MAGIC {
        return Err(Error::Checkpoint("bad magic, not an NTC1 file".into()));
    }
    let version = r.u32()?;
    if version != NTC_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out: Vec<(String, Tensor)> = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = core::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .into();
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if out.iter().any(|(n, _)| *n == name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name:?}")));
        }
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Looks up a named tensor.
pub fn find_tensor<'a>(tensors: &'a [(String, Tensor)], name: &str) -> Option<&'a Tensor> {
    tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let img = Image::from_fn(5, 7, 3, |y, x, c| (y * 7 + x + c) as f32 / 50.0);
        assert_eq!(resize_bilinear(&img, 5, 7), img);
        let k = Image::from_fn(4, 4, 1, |_, _, _| 0.3);
        let r = resize_bilinear(&k, 9, 3);
        assert!(r.data.iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn resize_round_trip_smooth_ramp() {
        let img = Image::from_fn(32, 32, 1, |y, x, _| (x + y) as f32 / 64.0);
        let up = resize_bilinear(&img, 64, 64);
        let down = resize_bilinear(&up, 32, 32);
        let err = img
            .data
            .iter()
            .zip(&down.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(err < 0.02, "{err}");
    }

    #[test]
    fn nearest_mask_stays_binary() {
        let m = Mask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let r = resize_nearest(&m, 4, 4);
        assert_eq!(r.data, vec![1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1]);
    }

    #[test]
    fn mask_threshold() {
        let m = Mask::from_gray8(1, 3, &[127, 128, 255]).unwrap();
        assert_eq!(m.data, vec![0, 1, 1]);
    }

    #[test]
    fn split_counts() {
        let (t, v) = split(16, 0.2, 1);
        assert_eq!((t.len(), v.len()), (13, 3));
        assert_eq!(split(20, 0.2, 1).1.len(), 4);
        assert_eq!(split(4, 0.2, 1).1.len(), 0);
        assert_eq!(split(16, 0.2, 9), split(16, 0.2, 9));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn sample_dimension_mismatch_names_shapes() {
        let s = Sample {
            id: "a".into(),
            image: Image::zeros(4, 5, 3),
            fov: Some(Mask::zeros(4, 4)),
            targets: BTreeMap::new(),
        };
        let msg = alloc::string::ToString::to_string(&s.validate().unwrap_err());
        assert!(msg.contains("4x5") && msg.contains("4x4"), "{msg}");
    }

    #[test]
    fn synth_masks_inside_fov_and_deterministic() {
        let cfg = SynthConfig {
            size: 96,
            ..SynthConfig::default()
        };
        let a = synth_generate(3, &cfg, &RngStream::new(4)).unwrap();
        let b = synth_generate(3, &cfg, &RngStream::new(4)).unwrap();
        assert_eq!(a, b);
        for s in &a {
            s.validate().unwrap();
            let fov = s.fov.as_ref().unwrap();
            for m in s.targets.values() {
                assert!(m.data.iter().zip(&fov.data).all(|(&t, &f)| t <= f));
            }
            assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn checkpoint_round_trip_and_crc() {
        let tensors = vec![
            (
                "a.weight".into(),
                Tensor::new(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap(),
            ),
            ("b".into(), Tensor::scalar(7.0)),
        ];
        let bytes = encode_checkpoint(&tensors).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in tensors.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t0), bits(t1));
        }
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
        let mut bad = bytes.clone();
        bad[5] ^= 1;
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("CRC"));
        let dup = vec![("x".into(), Tensor::scalar(1.0)), ("x".into(), Tensor::scalar(2.0))];
        assert!(encode_checkpoint(&dup).is_err());
    }

    #[test]
    fn checkpoint_rejects_unknown_version() {
        let mut bytes = encode_checkpoint(&[]).unwrap();
        bytes.truncate(bytes.len() - 4);
        bytes[4] = 2;
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        assert!(decode_checkpoint(&bytes).unwrap_err().to_string().contains("version"));
    }
}
