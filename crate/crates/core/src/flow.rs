//! Dense displacement fields and Middlebury `.flo` I/O.
//!
//! A [`FlowField`] stores per-pixel displacement (u, v) in pixels over a
//! horizon of `dt_frames` sensor frames. The `.flo` layout is the standard
//! one: the float 202021.25 as a little-endian magic, width and height as
//! i32, then row-major interleaved (u, v) f32 pairs.

use crate::error::{Error, Result};
use std::io::{BufWriter, Write};
use std::path::Path;

pub const FLO_MAGIC: f32 = 202021.25;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    /// Horizontal displacement in pixels, row-major.
    pub u: Vec<f64>,
    /// Vertical displacement in pixels, row-major.
    pub v: Vec<f64>,
    /// Number of sensor frames the displacement spans.
    pub dt_frames: u32,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize, dt_frames: u32) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
            dt_frames,
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        dt_frames: u32,
        mut f: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Self {
        let mut u = Vec::with_capacity(width * height);
        let mut v = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (du, dv) = f(y, x);
                u.push(du);
                v.push(dv);
            }
        }
        FlowField {
            width,
            height,
            u,
            v,
            dt_frames,
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, u: f64, v: f64) {
        let i = y * self.width + x;
        self.u[i] = u;
        self.v[i] = v;
    }

    /// Bilinear sample with border clamp; coordinates are (x, y) in pixels.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> (f64, f64) {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w01 = fx * (1.0 - fy);
        let w10 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        let idx = |yy: usize, xx: usize| yy * self.width + xx;
        let u = self.u[idx(y0, x0)] * w00
            + self.u[idx(y0, x1)] * w01
            + self.u[idx(y1, x0)] * w10
            + self.u[idx(y1, x1)] * w11;
        let v = self.v[idx(y0, x0)] * w00
            + self.v[idx(y0, x1)] * w01
            + self.v[idx(y1, x0)] * w10
            + self.v[idx(y1, x1)] * w11;
        (u, v)
    }

    /// Largest displacement magnitude in the field.
    pub fn max_magnitude(&self) -> f64 {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(&u, &v)| (u * u + v * v).sqrt())
            .fold(0.0, f64::max)
    }

    /// Bilinear resize to a new grid, scaling displacement values by the
    /// horizontal/vertical size ratios so they stay in output pixels.
    pub fn resize_scaled(&self, new_height: usize, new_width: usize) -> FlowField {
        let sx = new_width as f64 / self.width as f64;
        let sy = new_height as f64 / self.height as f64;
        FlowField::from_fn(new_height, new_width, self.dt_frames, |y, x| {
            let src_x = (x as f64 + 0.5) / sx - 0.5;
            let src_y = (y as f64 + 0.5) / sy - 0.5;
            let (u, v) = self.sample_bilinear(src_x, src_y);
            (u * sx, v * sy)
        })
    }
}

/// Writes the field as `.flo` (f32 precision).
pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io_path(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&FLO_MAGIC.to_le_bytes())?;
    w.write_all(&(flow.width as i32).to_le_bytes())?;
    w.write_all(&(flow.height as i32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(flow.u.len() * 8);
    for i in 0..flow.u.len() {
        buf.extend_from_slice(&(flow.u[i] as f32).to_le_bytes());
        buf.extend_from_slice(&(flow.v[i] as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a `.flo` file. `dt_frames` is not part of the format and is set to 0;
/// callers that know the horizon (e.g. from sample metadata) fix it up.
pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = std::fs::read(path).map_err(|e| Error::io_path(path.display().to_string(), e))?;
    let origin = path.display().to_string();
    if bytes.len() < 12 {
        return Err(Error::format(&origin, "file shorter than header"));
    }
    let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(Error::format(
            &origin,
            format!("bad magic {magic}, expected {FLO_MAGIC}"),
        ));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 {
        return Err(Error::format(
            &origin,
            format!("bad dimensions {width}x{height}"),
        ));
    }
    let (width, height) = (width as usize, height as usize);
    let n = width * height;
    if bytes.len() != 12 + 8 * n {
        return Err(Error::format(
            &origin,
            format!("expected {} raster bytes, found {}", 8 * n, bytes.len() - 12),
        ));
    }
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        let off = 12 + 8 * i;
        u.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
        v.push(f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as f64);
    }
    Ok(FlowField {
        width,
        height,
        u,
        v,
        dt_frames: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn flo_round_trip_is_bit_exact_at_f32() {
        // Values are generated as exact f32s so the f64 round trip through the
        // f32 file payload must reproduce them bit for bit.
        let mut rng = crate::util::stream_rng(42, 0);
        for case in 0..10 {
            let h = rng.gen_range(1..12);
            let w = rng.gen_range(1..12);
            let flow = FlowField::from_fn(h, w, 21, |_, _| {
                (
                    rng.gen_range(-50.0f32..50.0) as f64,
                    rng.gen_range(-50.0f32..50.0) as f64,
                )
            });
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("f.flo");
            write_flo(&path, &flow).unwrap();
            let back = read_flo(&path).unwrap();
            assert_eq!(back.width, w, "case {case}");
            assert_eq!(back.height, h);
            for i in 0..flow.u.len() {
                assert_eq!(back.u[i].to_bits(), flow.u[i].to_bits(), "u[{i}] case {case}");
                assert_eq!(back.v[i].to_bits(), flow.v[i].to_bits(), "v[{i}] case {case}");
            }
        }
    }

    #[test]
    fn read_rejects_corrupt_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.flo");
        std::fs::write(&path, [0u8; 12]).unwrap();
        assert!(read_flo(&path).is_err());
        std::fs::write(&path, [0u8; 4]).unwrap();
        assert!(read_flo(&path).is_err());
    }

    #[test]
    fn resize_scales_displacements() {
        let flow = FlowField::from_fn(8, 8, 21, |_, _| (2.0, -1.0));
        let up = flow.resize_scaled(16, 16);
        for i in 0..up.u.len() {
            assert!((up.u[i] - 4.0).abs() < 1e-9);
            assert!((up.v[i] + 2.0).abs() < 1e-9);
        }
    }
}
