//! 8-bit PNG and binary PPM/PGM reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use fundus_ssl_core::data::{luma, to_u8, Image, Mask, Rgb8};

/// Decoded 8-bit raster with 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn to_rgb(&self) -> Rgb8 {
        let data = match self.channels {
            3 => self.data.clone(),
            _ => self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        };
        Rgb8 {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn to_gray(&self) -> Vec<u8> {
        match self.channels {
            1 => self.data.clone(),
            _ => self
                .data
                .chunks_exact(3)
                .map(|p| to_u8(luma(p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0)))
                .collect(),
        }
    }
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let mut head = [0u8; 8];
    let mut f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let n = f.read(&mut head)?;
    drop(f);
    let r = if n >= 8 && head == [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a] {
        read_png(path)
    } else if n >= 2 && head[0] == b'P' && (head[1] == b'5' || head[1] == b'6') {
        read_pnm(path)
    } else {
        bail!("unsupported image format (PNG, binary PPM/PGM only)")
    };
    r.with_context(|| format!("reading {}", path.display()))
}

fn read_png(path: &Path) -> Result<Raster> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    ensure!(
        info.bit_depth == png::BitDepth::Eight,
        "unsupported PNG bit depth {:?}",
        info.bit_depth
    );
    let (channels, data) = match info.color_type {
        png::ColorType::Grayscale => (1, buf),
        png::ColorType::GrayscaleAlpha => (1, buf.chunks_exact(2).map(|p| p[0]).collect()),
        png::ColorType::Rgb => (3, buf),
        png::ColorType::Rgba => (3, buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()),
        png::ColorType::Indexed => bail!("indexed PNG was not expanded"),
    };
    Ok(Raster {
        width: w,
        height: h,
        channels,
        data,
    })
}

fn read_pnm(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path)?;
    let channels = if bytes[1] == b'6' { 3 } else { 1 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        ensure!(pos > start, "malformed PNM header");
        *field = std::str::from_utf8(&bytes[start..pos])?.parse()?;
    }
    let [width, height, maxval] = fields;
    ensure!(
        maxval > 0 && maxval <= 255,
        "only 8-bit PNM is supported (maxval {maxval})"
    );
    pos += 1;
    let len = width * height * channels;
    ensure!(bytes.len() >= pos + len, "PNM payload truncated");
    let data = bytes[pos..pos + len]
        .iter()
        .map(|&v| ((v as usize * 255 + maxval / 2) / maxval) as u8)
        .collect();
    Ok(Raster {
        width,
        height,
        channels,
        data,
    })
}

pub fn read_rgb(path: &Path) -> Result<Rgb8> {
    Ok(read_raster(path)?.to_rgb())
}

pub fn read_image(path: &Path) -> Result<Image> {
    Ok(read_rgb(path)?.to_image())
}

/// Gray value > 127 is positive.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let r = read_raster(path)?;
    Ok(Mask::from_gray8(r.height, r.width, &r.to_gray())?)
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(data)?;
    Ok(())
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write_png(path, width, height, png::ColorType::Grayscale, data)
}

pub fn write_rgb_png(path: &Path, img: &Rgb8) -> Result<()> {
    write_png(path, img.width, img.height, png::ColorType::Rgb, &img.data)
}

pub fn write_mask_png(path: &Path, m: &Mask) -> Result<()> {
    write_gray_png(path, m.width, m.height, &m.to_gray8())
}

/// Single-channel map in `[0, 1]` as 8-bit gray.
pub fn write_map_png(path: &Path, map: &Image) -> Result<()> {
    ensure!(map.channels == 1, "map must have one channel");
    let data: Vec<u8> = map.data.iter().map(|&v| to_u8(v)).collect();
    write_gray_png(path, map.width, map.height, &data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_and_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_gray_png(&p, 3, 1, &[127, 128, 255]).unwrap();
        let m = read_mask(&p).unwrap();
        assert_eq!(m.data, vec![0, 1, 1]);
        let rgb = Rgb8 {
            height: 1,
            width: 2,
            data: vec![1, 2, 3, 250, 251, 252],
        };
        let q = dir.path().join("c.png");
        write_rgb_png(&q, &rgb).unwrap();
        assert_eq!(read_rgb(&q).unwrap(), rgb);
    }

    #[test]
    fn pnm_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let mut bytes = b"P6\n# c\n2 1\n255\n".to_vec();
        bytes.extend([10, 20, 30, 40, 50, 60]);
        std::fs::write(&p, bytes).unwrap();
        let r = read_raster(&p).unwrap();
        assert_eq!((r.width, r.height, r.channels), (2, 1, 3));
        assert_eq!(r.data, vec![10, 20, 30, 40, 50, 60]);
        let g = dir.path().join("a.pgm");
        std::fs::write(&g, b"P5 2 1 255 \x00\xff").unwrap();
        assert_eq!(read_mask(&g).unwrap().data, vec![0, 1]);
        std::fs::write(&g, b"GIF89a").unwrap();
        assert!(read_raster(&g).is_err());
    }
}
