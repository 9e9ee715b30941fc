//! Flow-field and error-map rendering.
//!
//! Flow vectors are colored with the 55-entry Middlebury color wheel
//! (hue encodes direction, saturation encodes magnitude, zero flow is
//! white). Error maps use a fixed "hot" ramp so figures rendered with a
//! shared scale stay comparable across methods.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::img::Image;

/// Plain 8-bit RGB raster, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ColorImage {
    pub fn at(&self, y: usize, x: usize) -> (u8, u8, u8) {
        let i = (y * self.width + x) * 3;
        (self.data[i], self.data[i + 1], self.data[i + 2])
    }
}

/// Segment lengths of the color wheel: red-yellow, yellow-green,
/// green-cyan, cyan-blue, blue-magenta, magenta-red.
const SEGMENTS: [(usize, [f64; 3], [f64; 3]); 6] = [
    (15, [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]),
    (6, [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]),
    (4, [0.0, 1.0, 0.0], [0.0, 1.0, 1.0]),
    (11, [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]),
    (13, [0.0, 0.0, 1.0], [1.0, 0.0, 1.0]),
    (6, [1.0, 0.0, 1.0], [1.0, 0.0, 0.0]),
];

fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(55);
    for &(len, from, to) in &SEGMENTS {
        for i in 0..len {
            let f = i as f64 / len as f64;
            wheel.push([
                from[0] + f * (to[0] - from[0]),
                from[1] + f * (to[1] - from[1]),
                from[2] + f * (to[2] - from[2]),
            ]);
        }
    }
    wheel
}

fn vector_color(u: f64, v: f64, wheel: &[[f64; 3]]) -> (u8, u8, u8) {
    let rad = (u * u + v * v).sqrt();
    if rad == 0.0 {
        return (255, 255, 255);
    }
    let ncols = wheel.len();
    let angle = (-v).atan2(-u) / std::f64::consts::PI;
    let fk = (angle + 1.0) / 2.0 * (ncols as f64 - 1.0);
    let k0 = (fk.floor() as usize).min(ncols - 1);
    let k1 = (k0 + 1) % ncols;
    let f = fk - k0 as f64;
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
        let col = if rad <= 1.0 {
            // Fade toward white at the wheel center.
            1.0 - rad * (1.0 - col)
        } else {
            col * 0.75
        };
        rgb[c] = (255.0 * col).round().clamp(0.0, 255.0) as u8;
    }
    (rgb[0], rgb[1], rgb[2])
}

/// Renders a flow field with the Middlebury wheel. `max_magnitude` fixes
/// the normalization radius; `None` uses the field's own maximum, so the
/// strongest vector is fully saturated.
pub fn flow_to_color(flow: &FlowField, max_magnitude: Option<f64>) -> Result<ColorImage> {
    if flow.u.iter().chain(flow.v.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numeric("flow contains non-finite values"));
    }
    let max = match max_magnitude {
        Some(m) if m > 0.0 => m,
        Some(m) => {
            return Err(Error::invalid(format!(
                "max_magnitude must be positive, got {m}"
            )))
        }
        None => flow.max_magnitude().max(1e-12),
    };
    let wheel = color_wheel();
    let mut data = vec![0u8; flow.width * flow.height * 3];
    for y in 0..flow.height {
        for x in 0..flow.width {
            let (u, v) = flow.at(y, x);
            let (r, g, b) = vector_color(u / max, v / max, &wheel);
            let i = (y * flow.width + x) * 3;
            data[i] = r;
            data[i + 1] = g;
            data[i + 2] = b;
        }
    }
    Ok(ColorImage {
        width: flow.width,
        height: flow.height,
        data,
    })
}

/// Renders an error map on the fixed black-red-yellow-white "hot" ramp.
/// Values are normalized by `scale_max`, which callers share across the
/// methods of one figure.
pub fn error_map_color(map: &Image, scale_max: f64) -> Result<ColorImage> {
    if scale_max <= 0.0 || !scale_max.is_finite() {
        return Err(Error::invalid(format!(
            "scale_max must be a positive finite value, got {scale_max}"
        )));
    }
    let mut data = vec![0u8; map.width * map.height * 3];
    for (i, &e) in map.data.iter().enumerate() {
        let t = (e / scale_max).clamp(0.0, 1.0);
        let r = (3.0 * t).min(1.0);
        let g = (3.0 * t - 1.0).clamp(0.0, 1.0);
        let b = (3.0 * t - 2.0).clamp(0.0, 1.0);
        data[i * 3] = (255.0 * r).round() as u8;
        data[i * 3 + 1] = (255.0 * g).round() as u8;
        data[i * 3 + 2] = (255.0 * b).round() as u8;
    }
    Ok(ColorImage {
        width: map.width,
        height: map.height,
        data,
    })
}

pub fn write_png(path: &Path, img: &ColorImage) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| Error::invalid("inconsistent color image buffer"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, format!("png encode failed: {e}")))
}

/// Binary PPM (P6) writer; handy where a PNG decoder is unavailable.
pub fn write_ppm(path: &Path, img: &ColorImage) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.data);
    std::fs::write(path, bytes).map_err(|e| Error::io_path(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wheel_has_55_entries_and_wraps_to_red() {
        let wheel = color_wheel();
        assert_eq!(wheel.len(), 55, "15+6+4+11+13+6 segments");
        assert_eq!(wheel[0], [1.0, 0.0, 0.0]);
        // The last magenta-red entry is one step before pure red.
        let last = wheel[54];
        assert!(last[0] == 1.0 && last[1] == 0.0 && last[2] > 0.0);
    }

    #[test]
    fn zero_flow_renders_uniform_white() {
        let flow = FlowField::zeros(6, 8, 1);
        let img = flow_to_color(&flow, Some(1.0)).unwrap();
        assert!(
            img.data.iter().all(|&b| b == 255),
            "wheel center (zero motion) is white"
        );
    }

    #[test]
    fn positive_x_flow_at_max_magnitude_is_pure_red() {
        let flow = FlowField::from_fn(4, 4, 1, |_, _| (2.0, 0.0));
        let img = flow_to_color(&flow, Some(2.0)).unwrap();
        let first = img.at(0, 0);
        assert_eq!(first, (255, 0, 0), "angle-zero saturated vector");
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(img.at(y, x), first, "uniform flow renders uniformly");
            }
        }
    }

    #[test]
    fn angle_sweep_cycles_through_the_whole_wheel() {
        let n = 110;
        let mut colors = Vec::new();
        let wheel = color_wheel();
        for i in 0..n {
            let th = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            colors.push(vector_color(th.cos(), th.sin(), &wheel));
        }
        assert_eq!(colors[0], (255, 0, 0), "angle zero sits on pure red");
        for (i, &(r, g, b)) in colors.iter().enumerate() {
            assert!(
                r == 255 || g == 255 || b == 255,
                "unit-radius colors stay fully saturated, failed at sample {i}: {r},{g},{b}"
            );
        }
        let mut distinct: Vec<_> = colors.clone();
        distinct.sort_unstable();
        distinct.dedup();
        assert!(
            distinct.len() >= 50,
            "a full turn should visit nearly all 55 wheel colors, got {}",
            distinct.len()
        );
    }

    #[test]
    fn hue_is_equivariant_under_joint_scaling() {
        let flow = FlowField::from_fn(5, 7, 1, |y, x| {
            (x as f64 * 0.3 - 0.9, y as f64 * 0.4 - 0.8)
        });
        let mut doubled = flow.clone();
        for v in doubled.u.iter_mut().chain(doubled.v.iter_mut()) {
            *v *= 2.0;
        }
        let a = flow_to_color(&flow, Some(2.0)).unwrap();
        let b = flow_to_color(&doubled, Some(4.0)).unwrap();
        assert_eq!(a, b, "doubling flow and the max magnitude together is a no-op");
    }

    #[test]
    fn non_finite_flow_is_rejected() {
        let mut flow = FlowField::zeros(3, 3, 1);
        flow.u[4] = f64::NAN;
        assert!(flow_to_color(&flow, None).is_err());
    }

    #[test]
    fn error_ramp_endpoints_are_black_and_white() {
        let map = Image {
            width: 2,
            height: 1,
            data: vec![0.0, 3.0],
        };
        let img = error_map_color(&map, 3.0).unwrap();
        assert_eq!(img.at(0, 0), (0, 0, 0), "zero error is black");
        assert_eq!(img.at(0, 1), (255, 255, 255), "full-scale error is white");
    }

    #[test]
    fn ppm_and_png_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let flow = FlowField::from_fn(9, 11, 1, |y, x| (x as f64 * 0.2, -(y as f64) * 0.1));
        let img = flow_to_color(&flow, None).unwrap();

        let ppm = dir.path().join("f.ppm");
        write_ppm(&ppm, &img).unwrap();
        let bytes = std::fs::read(&ppm).unwrap();
        assert!(bytes.starts_with(b"P6\n11 9\n255\n"));
        assert_eq!(bytes.len(), 12 + 9 * 11 * 3);

        let png = dir.path().join("f.png");
        write_png(&png, &img).unwrap();
        let back = image::open(&png).unwrap().to_rgb8();
        assert_eq!(back.dimensions(), (11, 9));
        assert_eq!(back.into_raw(), img.data, "png encode/decode is lossless");
    }
}
