//! Scalar images and PGM I/O.
//!
//! [`Image`] is a row-major H×W grid of f64 samples, the working currency of
//! the classical estimators and the scene renderer. PGM files are written as
//! binary `P5` with maxval 65535 (16-bit, big-endian samples per the format)
//! or 255 (8-bit).

use crate::error::{Error, Result};
use std::io::{BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut f64 {
        &mut self.data[y * self.width + x]
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Bilinear sample with border clamp; coordinates are (x, y) in pixels.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let a = self.at(y0, x0);
        let b = self.at(y0, x1);
        let c = self.at(y1, x0);
        let d = self.at(y1, x1);
        a * (1.0 - fx) * (1.0 - fy) + b * fx * (1.0 - fy) + c * (1.0 - fx) * fy + d * fx * fy
    }

    /// Circular shift by whole pixels; positive (dx, dy) moves content
    /// right/down. Used to build exact translation oracles.
    pub fn shift_wrap(&self, dx: i64, dy: i64) -> Image {
        let w = self.width as i64;
        let h = self.height as i64;
        Image::from_fn(self.height, self.width, |y, x| {
            let sx = (x as i64 - dx).rem_euclid(w) as usize;
            let sy = (y as i64 - dy).rem_euclid(h) as usize;
            self.at(sy, sx)
        })
    }
}

/// Quantizes to 16-bit codes with `scale` applied first; values clamp to
/// [0, 65535].
pub fn quantize_u16(img: &Image, scale: f64) -> Vec<u16> {
    img.data
        .iter()
        .map(|&v| (v * scale).round().clamp(0.0, 65535.0) as u16)
        .collect()
}

/// Quantizes to 8-bit codes with `scale` applied first; values clamp to
/// [0, 255]. Saturation is the point: an 8-bit readout of a wide-range scene
/// crushes or clips whatever the exposure window misses.
pub fn quantize_u8(img: &Image, scale: f64) -> Vec<u8> {
    img.data
        .iter()
        .map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Writes a 16-bit binary PGM (`P5`, maxval 65535, big-endian samples).
pub fn write_pgm16(path: &Path, img: &Image, scale: f64) -> Result<()> {
    let codes = quantize_u16(img, scale);
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io_path(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let header = format!("P5\n{} {}\n65535\n", img.width, img.height);
    w.write_all(header.as_bytes())?;
    let mut bytes = Vec::with_capacity(codes.len() * 2);
    for c in codes {
        bytes.extend_from_slice(&c.to_be_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// Writes an 8-bit binary PGM (`P5`, maxval 255).
pub fn write_pgm8(path: &Path, img: &Image, scale: f64) -> Result<()> {
    let codes = quantize_u8(img, scale);
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io_path(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let header = format!("P5\n{} {}\n255\n", img.width, img.height);
    w.write_all(header.as_bytes())?;
    w.write_all(&codes)?;
    Ok(())
}

/// Reads a binary PGM (maxval 255 or 65535) into raw code values.
pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io_path(path.display().to_string(), e))?;
    let origin = path.display().to_string();
    parse_pgm(&bytes, &origin)
}

fn parse_pgm(bytes: &[u8], origin: &str) -> Result<Image> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        // Skip whitespace and comments between header tokens.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::format(origin, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    let magic = token(&mut pos)?;
    if magic != "P5" {
        return Err(Error::format(origin, format!("expected P5 magic, got {magic:?}")));
    }
    let width: usize = token(&mut pos)?
        .parse()
        .map_err(|_| Error::format(origin, "bad width"))?;
    let height: usize = token(&mut pos)?
        .parse()
        .map_err(|_| Error::format(origin, "bad height"))?;
    let maxval: usize = token(&mut pos)?
        .parse()
        .map_err(|_| Error::format(origin, "bad maxval"))?;
    // Exactly one whitespace byte separates the header from raster data.
    pos += 1;
    let n = width * height;
    let mut data = Vec::with_capacity(n);
    match maxval {
        255 => {
            if bytes.len() < pos + n {
                return Err(Error::format(origin, "truncated 8-bit raster"));
            }
            data.extend(bytes[pos..pos + n].iter().map(|&b| b as f64));
        }
        65535 => {
            if bytes.len() < pos + 2 * n {
                return Err(Error::format(origin, "truncated 16-bit raster"));
            }
            for i in 0..n {
                let hi = bytes[pos + 2 * i] as u16;
                let lo = bytes[pos + 2 * i + 1] as u16;
                data.push(((hi << 8) | lo) as f64);
            }
        }
        other => {
            return Err(Error::format(origin, format!("unsupported maxval {other}")));
        }
    }
    Ok(Image {
        width,
        height,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm16_round_trip_is_exact_on_codes() {
        let img = Image::from_fn(5, 7, |y, x| (y * 1000 + x * 13) as f64);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        write_pgm16(&path, &img, 1.0).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.width, 7);
        assert_eq!(back.height, 5);
        assert_eq!(back.data, img.data, "integer codes must survive the round trip");
    }

    #[test]
    fn pgm8_clips_out_of_range() {
        let img = Image::from_fn(1, 3, |_, x| [100.0, 300.0, -5.0][x]);
        let codes = quantize_u8(&img, 1.0);
        assert_eq!(codes, vec![100, 255, 0]);
    }

    #[test]
    fn bilinear_sampling_interpolates_and_clamps() {
        let img = Image::from_fn(2, 2, |y, x| (y * 2 + x) as f64);
        assert!((img.sample_bilinear(0.5, 0.5) - 1.5).abs() < 1e-12);
        assert_eq!(img.sample_bilinear(-3.0, 0.0), 0.0);
        assert_eq!(img.sample_bilinear(5.0, 5.0), 3.0);
    }

    #[test]
    fn shift_wrap_round_trips() {
        let img = Image::from_fn(4, 6, |y, x| (y * 10 + x) as f64);
        let back = img.shift_wrap(3, -2).shift_wrap(-3, 2);
        assert_eq!(back.data, img.data);
    }
}
