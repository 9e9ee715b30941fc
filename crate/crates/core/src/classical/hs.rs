//! Coarse-to-fine variational flow with quadratic smoothness.
//!
//! At each pyramid level the second image is warped by the current flow and
//! a linearized brightness-constancy system is solved for a flow increment
//! with block-Jacobi sweeps:
//!
//! ```text
//! du = du_bar - Ix (Ix du_bar + Iy dv_bar + It) / (lambda deg + Ix^2 + Iy^2)
//! ```
//!
//! where `du_bar` averages the 4-neighbors and `deg` counts them (2 or 3 at
//! borders). That update is the exact per-pixel block solve of the energy
//!
//! ```text
//! E = sum_p (Ix du + Iy dv + It)^2
//!   + lambda sum_edges ((du_i - du_j)^2 + (dv_i - dv_j)^2)
//! ```
//!
//! so E never increases across sweeps; a test pins that down.

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::img::Image;
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct HsConfig {
    /// Maximum pyramid depth (capped so the coarsest level stays >= 16 px).
    pub levels: usize,
    /// Warp-and-relinearize passes per level.
    pub warps: usize,
    /// Jacobi sweeps per warp.
    pub iters: usize,
    /// Smoothness weight per neighbor edge.
    pub lambda: f64,
}

impl Default for HsConfig {
    fn default() -> Self {
        HsConfig {
            levels: 4,
            warps: 2,
            iters: 100,
            lambda: 0.1,
        }
    }
}

fn downsample2(img: &Image) -> Image {
    let (h, w) = (img.height / 2, img.width / 2);
    Image::from_fn(h, w, |y, x| {
        0.25 * (img.at(2 * y, 2 * x)
            + img.at(2 * y, 2 * x + 1)
            + img.at(2 * y + 1, 2 * x)
            + img.at(2 * y + 1, 2 * x + 1))
    })
}

fn warp_image(img: &Image, u: &[f64], v: &[f64]) -> Image {
    Image::from_fn(img.height, img.width, |y, x| {
        let i = y * img.width + x;
        img.sample_bilinear(x as f64 + u[i], y as f64 + v[i])
    })
}

/// Central differences with clamped indices, averaged over both images.
fn gradients(i0: &Image, i1w: &Image) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, w) = (i0.height, i0.width);
    let mut ix = vec![0.0; h * w];
    let mut iy = vec![0.0; h * w];
    let mut it = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            let i = y * w + x;
            ix[i] = 0.25 * (i0.at(y, xp) - i0.at(y, xm) + i1w.at(y, xp) - i1w.at(y, xm));
            iy[i] = 0.25 * (i0.at(yp, x) - i0.at(ym, x) + i1w.at(yp, x) - i1w.at(ym, x));
            it[i] = i1w.at(y, x) - i0.at(y, x);
        }
    }
    (ix, iy, it)
}

/// The quadratic objective the Jacobi sweeps minimize, exposed for tests.
#[allow(clippy::too_many_arguments)]
pub fn hs_energy(
    du: &[f64],
    dv: &[f64],
    ix: &[f64],
    iy: &[f64],
    it: &[f64],
    lambda: f64,
    h: usize,
    w: usize,
) -> f64 {
    let mut e = 0.0;
    for i in 0..h * w {
        let r = ix[i] * du[i] + iy[i] * dv[i] + it[i];
        e += r * r;
    }
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                e += lambda * ((du[i] - du[i + 1]).powi(2) + (dv[i] - dv[i + 1]).powi(2));
            }
            if y + 1 < h {
                e += lambda * ((du[i] - du[i + w]).powi(2) + (dv[i] - dv[i + w]).powi(2));
            }
        }
    }
    e
}

/// Block-Jacobi sweeps for the flow increment. Returns (du, dv).
pub fn jacobi_increment(
    ix: &[f64],
    iy: &[f64],
    it: &[f64],
    lambda: f64,
    iters: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut du = vec![0.0; h * w];
    let mut dv = vec![0.0; h * w];
    let mut ndu = vec![0.0; h * w];
    let mut ndv = vec![0.0; h * w];
    for _ in 0..iters {
        ndu.par_chunks_mut(w)
            .zip(ndv.par_chunks_mut(w))
            .enumerate()
            .for_each(|(y, (row_u, row_v))| {
                for x in 0..w {
                    let i = y * w + x;
                    let mut sum_u = 0.0;
                    let mut sum_v = 0.0;
                    let mut deg = 0.0;
                    if x > 0 {
                        sum_u += du[i - 1];
                        sum_v += dv[i - 1];
                        deg += 1.0;
                    }
                    if x + 1 < w {
                        sum_u += du[i + 1];
                        sum_v += dv[i + 1];
                        deg += 1.0;
                    }
                    if y > 0 {
                        sum_u += du[i - w];
                        sum_v += dv[i - w];
                        deg += 1.0;
                    }
                    if y + 1 < h {
                        sum_u += du[i + w];
                        sum_v += dv[i + w];
                        deg += 1.0;
                    }
                    let ubar = sum_u / deg;
                    let vbar = sum_v / deg;
                    let denom = lambda * deg + ix[i] * ix[i] + iy[i] * iy[i];
                    let resid = (ix[i] * ubar + iy[i] * vbar + it[i]) / denom;
                    row_u[x] = ubar - ix[i] * resid;
                    row_v[x] = vbar - iy[i] * resid;
                }
            });
        std::mem::swap(&mut du, &mut ndu);
        std::mem::swap(&mut dv, &mut ndv);
    }
    (du, dv)
}

pub fn estimate_hs(img0: &Image, img1: &Image, cfg: &HsConfig) -> Result<FlowField> {
    if img0.width != img1.width || img0.height != img1.height {
        return Err(Error::invalid(format!(
            "image sizes differ: {}x{} vs {}x{}",
            img0.width, img0.height, img1.width, img1.height
        )));
    }
    if img0.width < 16 || img0.height < 16 {
        return Err(Error::invalid(format!(
            "images {}x{} too small, need at least 16x16",
            img0.width, img0.height
        )));
    }
    if cfg.warps == 0 || cfg.iters == 0 || cfg.lambda <= 0.0 {
        return Err(Error::invalid(
            "warps, iters must be nonzero and lambda positive".to_string(),
        ));
    }
    // Joint normalization to [0, 1]; flat image pairs yield zero flow.
    let maxv = img0.max_value().max(img1.max_value());
    if maxv <= 0.0 {
        return Ok(FlowField::zeros(img0.height, img0.width, 0));
    }
    let norm = |img: &Image| Image::from_fn(img.height, img.width, |y, x| img.at(y, x) / maxv);
    let mut pyr: Vec<(Image, Image)> = vec![(norm(img0), norm(img1))];
    while pyr.len() < cfg.levels.max(1) {
        let (a, b) = pyr.last().unwrap();
        if a.height / 2 < 16 || a.width / 2 < 16 {
            break;
        }
        pyr.push((downsample2(a), downsample2(b)));
    }

    let coarsest = pyr.len() - 1;
    let mut flow = FlowField::zeros(pyr[coarsest].0.height, pyr[coarsest].0.width, 0);
    for level in (0..pyr.len()).rev() {
        let (i0, i1) = &pyr[level];
        if flow.height != i0.height || flow.width != i0.width {
            flow = flow.resize_scaled(i0.height, i0.width);
        }
        for _ in 0..cfg.warps {
            let i1w = warp_image(i1, &flow.u, &flow.v);
            let (ix, iy, it) = gradients(i0, &i1w);
            let (du, dv) =
                jacobi_increment(&ix, &iy, &it, cfg.lambda, cfg.iters, i0.height, i0.width);
            for i in 0..flow.u.len() {
                flow.u[i] += du[i];
                flow.v[i] += dv[i];
            }
        }
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::stream_rng;
    use rand::Rng;

    fn blob_image(offset_x: f64, offset_y: f64, h: usize, w: usize, seed: u64, sigma: f64) -> Image {
        let mut rng = stream_rng(seed, 2);
        let centers: Vec<(f64, f64)> = (0..(h * w / 50))
            .map(|_| (rng.gen::<f64>() * w as f64, rng.gen::<f64>() * h as f64))
            .collect();
        let cutoff = 16.0 * sigma * sigma;
        Image::from_fn(h, w, |y, x| {
            let mut s = 0.05;
            for &(cx, cy) in &centers {
                let dx = x as f64 - cx - offset_x;
                let dy = y as f64 - cy - offset_y;
                let d2 = dx * dx + dy * dy;
                if d2 < cutoff {
                    s += (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
            s
        })
    }

    #[test]
    fn jacobi_energy_never_increases() {
        for seed in [1u64, 2, 3] {
            let mut rng = stream_rng(seed, 3);
            let (h, w) = (20, 24);
            let ix: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>() - 0.5).collect();
            let iy: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>() - 0.5).collect();
            let it: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>() - 0.5).collect();
            let lambda = 0.1;
            let mut prev = hs_energy(&vec![0.0; h * w], &vec![0.0; h * w], &ix, &iy, &it, lambda, h, w);
            for k in 1..=40 {
                let (du, dv) = jacobi_increment(&ix, &iy, &it, lambda, k, h, w);
                let e = hs_energy(&du, &dv, &ix, &iy, &it, lambda, h, w);
                assert!(
                    e <= prev + 1e-10 * prev.abs().max(1.0),
                    "seed {seed}: energy rose from {prev} to {e} at sweep {k}"
                );
                prev = e;
            }
        }
    }

    #[test]
    fn zero_motion_gives_exactly_zero_flow() {
        let img = blob_image(0.0, 0.0, 48, 48, 9, 1.2);
        let flow = estimate_hs(&img, &img, &HsConfig::default()).unwrap();
        for i in 0..flow.u.len() {
            assert_eq!(flow.u[i], 0.0, "identical images leave It = 0 everywhere");
            assert_eq!(flow.v[i], 0.0);
        }
    }

    #[test]
    fn small_uniform_translation_is_recovered() {
        let img0 = blob_image(0.0, 0.0, 64, 64, 4, 1.2);
        let img1 = blob_image(0.5, -0.25, 64, 64, 4, 1.2);
        let flow = estimate_hs(&img0, &img1, &HsConfig::default()).unwrap();
        let mut err = 0.0;
        let mut n = 0;
        for y in 8..56 {
            for x in 8..56 {
                let (u, v) = flow.at(y, x);
                err += ((u - 0.5).powi(2) + (v + 0.25).powi(2)).sqrt();
                n += 1;
            }
        }
        let mean = err / n as f64;
        assert!(mean < 0.15, "mean endpoint error {mean} too large for a 0.5 px shift");
    }

    #[test]
    fn pyramid_reaches_multi_pixel_displacements() {
        let img0 = blob_image(0.0, 0.0, 128, 128, 6, 2.2);
        let img1 = blob_image(5.0, 3.0, 128, 128, 6, 2.2);
        let flow = estimate_hs(&img0, &img1, &HsConfig::default()).unwrap();
        let mut err = 0.0;
        let mut n = 0;
        for y in 16..112 {
            for x in 16..112 {
                let (u, v) = flow.at(y, x);
                err += ((u - 5.0).powi(2) + (v - 3.0).powi(2)).sqrt();
                n += 1;
            }
        }
        let mean = err / n as f64;
        assert!(
            mean < 0.8,
            "coarse-to-fine should land within 0.8 px of a (5, 3) shift, got {mean}"
        );
    }

    #[test]
    fn flat_images_produce_zero_flow_without_error() {
        let img = Image::from_fn(32, 32, |_, _| 0.0);
        let flow = estimate_hs(&img, &img, &HsConfig::default()).unwrap();
        assert!(flow.u.iter().all(|&v| v == 0.0), "blank input has no motion evidence");
    }
}
