//! Temporal voxel encoding of spike streams.
//!
//! A stream window of `n` frames is split into `bins` equal chunks and each
//! voxel holds the spike count of its pixel within its chunk (hard counts,
//! no interpolation). Total voxel mass therefore equals the window's total
//! spike count exactly.

use crate::error::{Error, Result};
use crate::spike::SpikeStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub bins: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major [bin][y][x] counts as f64.
    pub values: Vec<f64>,
}

impl VoxelGrid {
    #[inline]
    pub fn at(&self, bin: usize, y: usize, x: usize) -> f64 {
        self.values[(bin * self.height + y) * self.width + x]
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Network input layout: (1, 1, bins, height, width).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, 1, self.bins, self.height, self.width],
            self.values.clone(),
        )
        .expect("voxel extents are consistent by construction")
    }
}

/// Bins frames `[start, start + n)` of the stream into `bins` equal chunks.
/// `bins` must divide `n`.
pub fn to_voxel(stream: &SpikeStream, start: usize, n: usize, bins: usize) -> Result<VoxelGrid> {
    if bins == 0 {
        return Err(Error::invalid("voxel bins must be nonzero"));
    }
    if n == 0 || start + n > stream.n_frames {
        return Err(Error::invalid(format!(
            "window [{start}, {}) exceeds stream of {} frames",
            start + n,
            stream.n_frames
        )));
    }
    if !n.is_multiple_of(bins) {
        return Err(Error::invalid(format!(
            "bins must divide the window: {bins} does not divide {n}"
        )));
    }
    let per_bin = n / bins;
    let (h, w) = (stream.height, stream.width);
    let mut values = vec![0.0f64; bins * h * w];
    for b in 0..bins {
        let base = b * h * w;
        for k in 0..per_bin {
            let f = start + b * per_bin + k;
            for y in 0..h {
                for x in 0..w {
                    if stream.get(f, y, x) {
                        values[base + y * w + x] += 1.0;
                    }
                }
            }
        }
    }
    Ok(VoxelGrid {
        bins,
        height: h,
        width: w,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::img::Image;
    use crate::spike::{simulate, SensorConfig};
    use rand::Rng;

    fn random_stream(seed: u64, h: usize, w: usize, n: usize) -> SpikeStream {
        let mut rng = crate::util::stream_rng(seed, 0);
        let mut cfg = SensorConfig::noise_free(h, w);
        cfg.threshold = 1.0;
        cfg.photon_gain = 1.0;
        cfg.frame_period = 1.0;
        let movie: Vec<Image> = (0..n)
            .map(|_| Image::from_fn(h, w, |_, _| rng.gen_range(0.0..0.9)))
            .collect();
        simulate(&movie, &cfg, 0).unwrap()
    }

    #[test]
    fn one_frame_per_bin_reproduces_bitplanes() {
        let stream = random_stream(5, 4, 6, 7);
        let grid = to_voxel(&stream, 0, 7, 7).unwrap();
        for b in 0..7 {
            for y in 0..4 {
                for x in 0..6 {
                    let expected = if stream.get(b, y, x) { 1.0 } else { 0.0 };
                    assert_eq!(grid.at(b, y, x), expected, "bin {b} ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn mass_conservation_matches_popcount_oracle() {
        for seed in 0..10u64 {
            let stream = random_stream(100 + seed, 5, 5, 21);
            let grid = to_voxel(&stream, 0, 21, 7).unwrap();
            // Independent oracle: popcount over the packed planes.
            let popcount: u64 = stream.raw_planes().iter().map(|b| b.count_ones() as u64).sum();
            assert_eq!(grid.total_mass() as u64, popcount, "seed {seed}");
            // Per-pixel marginal equals the stream's counts as well.
            let counts = stream.counts();
            for y in 0..5 {
                for x in 0..5 {
                    let s: f64 = (0..7).map(|b| grid.at(b, y, x)).sum();
                    assert_eq!(s as u32, counts[y * 5 + x]);
                }
            }
        }
    }

    #[test]
    fn rejects_non_dividing_bins_and_bad_windows() {
        let stream = random_stream(3, 2, 2, 20);
        assert!(to_voxel(&stream, 0, 20, 7).is_err(), "7 does not divide 20");
        assert!(to_voxel(&stream, 10, 20, 5).is_err(), "window exceeds stream");
        assert!(to_voxel(&stream, 0, 20, 0).is_err(), "zero bins");
        assert!(to_voxel(&stream, 0, 20, 5).is_ok());
    }

    #[test]
    fn windowed_binning_uses_only_the_window() {
        let stream = random_stream(9, 3, 3, 30);
        let grid = to_voxel(&stream, 6, 12, 4).unwrap();
        let window = stream.slice_frames(6, 12).unwrap();
        let direct = to_voxel(&window, 0, 12, 4).unwrap();
        assert_eq!(grid, direct);
    }

    #[test]
    fn tensor_layout_is_unit_batch_unit_channel() {
        let stream = random_stream(11, 4, 5, 14);
        let grid = to_voxel(&stream, 0, 14, 7).unwrap();
        let t = grid.to_tensor();
        assert_eq!(t.shape(), &[1, 1, 7, 4, 5]);
        assert_eq!(t.data()[0], grid.at(0, 0, 0));
    }
}
