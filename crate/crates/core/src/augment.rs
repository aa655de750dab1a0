//! Stochastic image transforms: pre-training views and fine-tuning
//! augmentation. Every function draws its randomness from the supplied
//! [`RngStream`] only.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{luma, resize_bilinear, Image, Mask, Rgb8, Sample};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Jitter magnitudes. Brightness, contrast and saturation factors are drawn
/// from `[1 - m, 1 + m]`; the hue shift from `[-hue, hue]` as a fraction of
/// the colour circle. A zero magnitude skips that sub-transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

impl ColorJitter {
    pub const fn uniform(m: f32, hue: f32) -> Self {
        Self {
            brightness: m,
            contrast: m,
            saturation: m,
            hue,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.brightness, self.contrast, self.saturation]
            .iter()
            .all(|&m| m >= 0.0)
            && (0.0..=0.5).contains(&self.hue);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid jitter magnitudes {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainAugmentConfig {
    /// Side of the square every unlabeled image is resized and cropped to at
    /// ingestion.
    pub ingest_size: usize,
    pub crop_size: usize,
    pub jitter_prob: f64,
    pub jitter: ColorJitter,
    pub grayscale_prob: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
}

impl Default for PretrainAugmentConfig {
    fn default() -> Self {
        Self {
            ingest_size: 512,
            crop_size: 128,
            jitter_prob: 0.8,
            jitter: ColorJitter::uniform(0.4, 0.1),
            grayscale_prob: 0.2,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
        }
    }
}

impl PretrainAugmentConfig {
    pub fn validate(&self) -> Result<()> {
        check_probs(&[self.jitter_prob, self.grayscale_prob, self.hflip_prob, self.vflip_prob])?;
        if self.crop_size == 0 || self.crop_size > self.ingest_size {
            return Err(Error::Config(format!(
                "crop size {} must lie in 1..={}",
                self.crop_size, self.ingest_size
            )));
        }
        self.jitter.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneAugmentConfig {
    /// Rotation angle range `[-r, r]` in degrees.
    pub rotation_deg: f32,
    pub scale_min: f32,
    pub scale_max: f32,
    /// Horizontal translation range as a fraction of the width.
    pub translate_frac: f32,
    pub jitter: ColorJitter,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
}

impl Default for FinetuneAugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 45.0,
            scale_min: 0.95,
            scale_max: 1.2,
            translate_frac: 0.05,
            jitter: ColorJitter::uniform(0.25, 0.1),
            hflip_prob: 0.5,
            vflip_prob: 0.5,
        }
    }
}

impl FinetuneAugmentConfig {
    pub fn validate(&self) -> Result<()> {
        check_probs(&[self.hflip_prob, self.vflip_prob])?;
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max)
            || self.rotation_deg < 0.0
            || self.translate_frac < 0.0
        {
            return Err(Error::Config(format!("invalid geometric ranges {self:?}")));
        }
        self.jitter.validate()
    }
}

fn check_probs(p: &[f64]) -> Result<()> {
    match p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::Config(format!("probability {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Resizes so the shorter side equals `size`, then centre-crops to
/// `size x size`.
pub fn ingest(img: &Image, size: usize) -> Image {
    let (h, w) = img.dims();
    let (nh, nw) = if h <= w {
        (
            size,
            (libm::round(w as f64 * size as f64 / h as f64) as usize).max(size),
        )
    } else {
        (
            (libm::round(h as f64 * size as f64 / w as f64) as usize).max(size),
            size,
        )
    };
    let r = resize_bilinear(img, nh, nw);
    r.crop((nh - size) / 2, (nw - size) / 2, size, size)
}

pub fn random_crop_origin(height: usize, width: usize, crop: usize, rng: &mut RngStream) -> Result<(usize, usize)> {
    if height < crop || width < crop {
        return Err(Error::invalid(format!(
            "image {height}x{width} is smaller than the {crop}x{crop} crop"
        )));
    }
    Ok((rng.below(height - crop + 1), rng.below(width - crop + 1)))
}

/// Random crop followed by [`view_transforms`].
pub fn pretrain_view(img: &Image, cfg: &PretrainAugmentConfig, rng: &mut RngStream) -> Result<Image> {
    let (top, left) = random_crop_origin(img.height, img.width, cfg.crop_size, rng)?;
    Ok(view_transforms(
        img.crop(top, left, cfg.crop_size, cfg.crop_size),
        cfg,
        rng,
    ))
}

/// [`pretrain_view`] reading from 8-bit storage; crops before converting.
pub fn pretrain_view_rgb8(img: &Rgb8, cfg: &PretrainAugmentConfig, rng: &mut RngStream) -> Result<Image> {
    let (top, left) = random_crop_origin(img.height, img.width, cfg.crop_size, rng)?;
    Ok(view_transforms(
        img.crop_image(top, left, cfg.crop_size, cfg.crop_size),
        cfg,
        rng,
    ))
}

/// Jitter (with probability), grayscale (with probability), horizontal and
/// vertical flips, clamp.
pub fn view_transforms(mut img: Image, cfg: &PretrainAugmentConfig, rng: &mut RngStream) -> Image {
    if rng.bernoulli(cfg.jitter_prob) {
        img = color_jitter(&img, &cfg.jitter, rng);
    }
    if rng.bernoulli(cfg.grayscale_prob) {
        img = grayscale(&img);
    }
    if rng.bernoulli(cfg.hflip_prob) {
        img = img.flip_h();
    }
    if rng.bernoulli(cfg.vflip_prob) {
        img = img.flip_v();
    }
    clamp01(&mut img);
    img
}

fn clamp01(img: &mut Image) {
    for v in &mut img.data {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Three identical channels holding the luma.
pub fn grayscale(img: &Image) -> Image {
    let mut out = img.clone();
    for px in out.data.chunks_exact_mut(3) {
        let l = luma(px[0], px[1], px[2]);
        px.fill(l);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

/// Applies the four jitter sub-transforms in random order, clamping after
/// each.
pub fn color_jitter(img: &Image, m: &ColorJitter, rng: &mut RngStream) -> Image {
    assert_eq!(img.channels, 3, "color_jitter needs RGB");
    let mut order = [
        JitterOp::Brightness,
        JitterOp::Contrast,
        JitterOp::Saturation,
        JitterOp::Hue,
    ];
    rng.shuffle(&mut order);
    let mut out = img.clone();
    for op in order {
        match op {
            JitterOp::Brightness if m.brightness > 0.0 => {
                let f = factor(m.brightness, rng);
                adjust_brightness(&mut out, f);
            }
            JitterOp::Contrast if m.contrast > 0.0 => {
                let f = factor(m.contrast, rng);
                adjust_contrast(&mut out, f);
            }
            JitterOp::Saturation if m.saturation > 0.0 => {
                let f = factor(m.saturation, rng);
                adjust_saturation(&mut out, f);
            }
            JitterOp::Hue if m.hue > 0.0 => {
                let shift = rng.uniform_range(-m.hue as f64, m.hue as f64) as f32;
                adjust_hue(&mut out, shift);
            }
            _ => {}
        }
    }
    out
}

fn factor(m: f32, rng: &mut RngStream) -> f32 {
    rng.uniform_range((1.0 - m).max(0.0) as f64, (1.0 + m) as f64) as f32
}

pub fn adjust_brightness(img: &mut Image, f: f32) {
    for v in &mut img.data {
        *v = (*v * f).clamp(0.0, 1.0);
    }
}

/// Blend with the image's mean luma.
pub fn adjust_contrast(img: &mut Image, f: f32) {
    let n = (img.data.len() / 3).max(1);
    let mean = img
        .data
        .chunks_exact(3)
        .map(|p| luma(p[0], p[1], p[2]) as f64)
        .sum::<f64>()
        / n as f64;
    let mean = mean as f32;
    for v in &mut img.data {
        *v = (f * *v + (1.0 - f) * mean).clamp(0.0, 1.0);
    }
}

/// Blend with each pixel's own luma.
pub fn adjust_saturation(img: &mut Image, f: f32) {
    for px in img.data.chunks_exact_mut(3) {
        let l = luma(px[0], px[1], px[2]);
        for v in px.iter_mut() {
            *v = (f * *v + (1.0 - f) * l).clamp(0.0, 1.0);
        }
    }
}

/// Rotates hue by `shift` of the full circle.
pub fn adjust_hue(img: &mut Image, shift: f32) {
    for px in img.data.chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let h = wrap(h + shift, 1.0);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        px[0] = r.clamp(0.0, 1.0);
        px[1] = g.clamp(0.0, 1.0);
        px[2] = b.clamp(0.0, 1.0);
    }
}

/// `x mod m` in `[0, m)` for `m > 0`.
fn wrap(x: f32, m: f32) -> f32 {
    let r = x - m * libm::floorf(x / m);
    if r >= m {
        0.0
    } else {
        r
    }
}

/// Hue in `[0, 1)`.
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        wrap((g - b) / d, 6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = wrap(h, 1.0) * 6.0;
    let sector = libm::floorf(h6);
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// One geometric transform about the image centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometric {
    RotationDeg(f32),
    Scale(f32),
    /// Horizontal shift as a fraction of the width.
    TranslateX(f32),
}

impl Geometric {
    /// Maps an output pixel centre to the input point it samples.
    fn source(&self, x: f32, y: f32, cx: f32, cy: f32, width: usize) -> (f32, f32) {
        match *self {
            Geometric::RotationDeg(deg) => {
                let t = deg.to_radians();
                let (c, s) = (libm::cosf(t), libm::sinf(t));
                let (dx, dy) = (x - cx, y - cy);
                (cx + c * dx + s * dy, cy - s * dx + c * dy)
            }
            Geometric::Scale(k) => (cx + (x - cx) / k, cy + (y - cy) / k),
            Geometric::TranslateX(f) => (x - f * width as f32, y),
        }
    }

    pub fn sample(cfg: &FinetuneAugmentConfig, rng: &mut RngStream) -> Geometric {
        match rng.below(3) {
            0 => Geometric::RotationDeg(rng.uniform_range(-cfg.rotation_deg as f64, cfg.rotation_deg as f64) as f32),
            1 => Geometric::Scale(rng.uniform_range(cfg.scale_min as f64, cfg.scale_max as f64) as f32),
            _ => Geometric::TranslateX(rng.uniform_range(-cfg.translate_frac as f64, cfg.translate_frac as f64) as f32),
        }
    }
}

/// Bilinear warp; samples outside the input read as 0.
pub fn warp_image(img: &Image, t: &Geometric) -> Image {
    let (h, w, c) = (img.height, img.width, img.channels);
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let mut out = Image::zeros(h, w, c);
    let at = |y: isize, x: isize, ch: usize| -> f32 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            img.get(y as usize, x as usize, ch)
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = t.source(x as f32 + 0.5, y as f32 + 0.5, cx, cy, w);
            let (fx, fy) = (sx - 0.5, sy - 0.5);
            let (x0, y0) = (libm::floorf(fx), libm::floorf(fy));
            let (ax, ay) = (fx - x0, fy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let top = at(y0, x0, ch) * (1.0 - ax) + if ax > 0.0 { at(y0, x0 + 1, ch) * ax } else { 0.0 };
                let bot = if ay > 0.0 {
                    at(y0 + 1, x0, ch) * (1.0 - ax) + if ax > 0.0 { at(y0 + 1, x0 + 1, ch) * ax } else { 0.0 }
                } else {
                    0.0
                };
                out.data[(y * w + x) * c + ch] = top * (1.0 - ay) + bot * ay;
            }
        }
    }
    out
}

/// Nearest-neighbour warp; samples outside the input are negative.
pub fn warp_mask(mask: &Mask, t: &Geometric) -> Mask {
    let (h, w) = mask.dims();
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let mut out = Mask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = t.source(x as f32 + 0.5, y as f32 + 0.5, cx, cy, w);
            let (ix, iy) = (libm::floorf(sx), libm::floorf(sy));
            if ix >= 0.0 && iy >= 0.0 && (ix as usize) < w && (iy as usize) < h {
                out.data[y * w + x] = mask.data[iy as usize * w + ix as usize];
            }
        }
    }
    out
}

/// One geometric transform (image bilinear, masks nearest), then colour
/// jitter on the image, then joint flips.
pub fn finetune_augment(sample: &Sample, cfg: &FinetuneAugmentConfig, rng: &mut RngStream) -> Sample {
    let t = Geometric::sample(cfg, rng);
    let mut out = apply_geometric(sample, &t);
    out.image = color_jitter(&out.image, &cfg.jitter, rng);
    if rng.bernoulli(cfg.hflip_prob) {
        out = map_sample(&out, Image::flip_h, Mask::flip_h);
    }
    if rng.bernoulli(cfg.vflip_prob) {
        out = map_sample(&out, Image::flip_v, Mask::flip_v);
    }
    clamp01(&mut out.image);
    out
}

pub fn apply_geometric(sample: &Sample, t: &Geometric) -> Sample {
    map_sample(sample, |i| warp_image(i, t), |m| warp_mask(m, t))
}

fn map_sample(s: &Sample, fi: impl Fn(&Image) -> Image, fm: impl Fn(&Mask) -> Mask) -> Sample {
    Sample {
        id: s.id.clone(),
        image: fi(&s.image),
        fov: s.fov.as_ref().map(&fm),
        targets: s.targets.iter().map(|(k, m)| (k.clone(), fm(m))).collect(),
    }
}

/// Converts a batch of equally sized images into an `N x C x H x W` tensor.
pub fn batch_tensor(images: &[Image]) -> Result<crate::tensor::Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(Error::invalid("batch images differ in size"));
        }
        data.extend_from_slice(img.to_tensor().data());
    }
    crate::tensor::Tensor::new(&[images.len(), c, h, w], data)
}
