//! Integrate-and-fire spike sensor model and the `.spk` stream format.
//!
//! Each pixel accumulates `gain * irradiance * frame_period` per frame (plus
//! optional Poisson shot noise on that photon count and a constant dark
//! current). When the accumulator reaches the threshold the pixel emits a
//! single spike bit for that frame and keeps the residual modulo the
//! threshold. In the physical regime (per-frame increment below threshold)
//! the per-pixel spike count over any window equals
//! `floor(total accumulated input / threshold)` exactly, which is the
//! conservation identity the tests lean on.
//!
//! Streams are bit-packed: one plane per frame, row-major pixels, LSB-first
//! within each byte. The `.spk` file is that packing behind a fixed header.

use crate::error::{Error, Result};
use crate::img::Image;
use crate::util::{mix_seed3, stream_rng};
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const SPK_MAGIC: &[u8; 4] = b"PSSD";
pub const SPK_VERSION: u32 = 1;

/// Sensor parameters. The defaults model a 20 kHz readout with the threshold
/// expressed in accumulated-photon units.
#[derive(Debug, Clone)]
pub struct SensorConfig {
    pub height: usize,
    pub width: usize,
    /// Dimensionless gain applied to irradiance before integration.
    pub photon_gain: f64,
    /// Firing threshold in accumulator units.
    pub threshold: f64,
    /// Integration time per frame in seconds (20 kHz readout by default).
    pub frame_period: f64,
    /// Constant accumulator leak-in per frame, in accumulator units.
    pub dark_current: f64,
    /// Poisson shot noise on the per-frame photon count.
    pub shot_noise: bool,
    pub seed: u64,
}

impl SensorConfig {
    pub fn new(height: usize, width: usize) -> Self {
        let threshold = 40.0;
        SensorConfig {
            height,
            width,
            photon_gain: 1.0,
            threshold,
            frame_period: 5.0e-5,
            // 0.5% of threshold per frame.
            dark_current: 0.005 * threshold,
            shot_noise: true,
            seed: 0,
        }
    }

    /// Same geometry, no noise sources. Oracle tests run here.
    pub fn noise_free(height: usize, width: usize) -> Self {
        SensorConfig {
            dark_current: 0.0,
            shot_noise: false,
            ..SensorConfig::new(height, width)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("sensor dimensions must be nonzero"));
        }
        if self.threshold.is_nan() || self.threshold <= 0.0 {
            return Err(Error::invalid(format!(
                "sensor threshold must be positive, got {}",
                self.threshold
            )));
        }
        if self.frame_period.is_nan() || self.frame_period <= 0.0 {
            return Err(Error::invalid(format!(
                "frame period must be positive, got {}",
                self.frame_period
            )));
        }
        if self.dark_current < 0.0 {
            return Err(Error::invalid("dark current must be non-negative"));
        }
        Ok(())
    }
}

/// Per-pixel residual charge carried between frames.
#[derive(Debug, Clone)]
pub struct AccumulatorState {
    pub residual: Vec<f64>,
    /// Frames integrated so far; also the RNG substream index, so noise for
    /// frame k does not depend on how the movie was chunked.
    pub frame_counter: u64,
}

impl AccumulatorState {
    pub fn new(cfg: &SensorConfig) -> Self {
        AccumulatorState {
            residual: vec![0.0; cfg.height * cfg.width],
            frame_counter: 0,
        }
    }

    /// Starts integration at a given global frame index (noise substreams
    /// follow the global timeline).
    pub fn at_frame(cfg: &SensorConfig, frame: u64) -> Self {
        AccumulatorState {
            residual: vec![0.0; cfg.height * cfg.width],
            frame_counter: frame,
        }
    }
}

/// Bit-packed binary spike stream, one plane per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeStream {
    pub height: usize,
    pub width: usize,
    pub n_frames: usize,
    pub threshold: f64,
    pub photon_gain: f64,
    pub frame_period: f64,
    planes: Vec<u8>,
}

impl SpikeStream {
    pub fn plane_stride(height: usize, width: usize) -> usize {
        (height * width).div_ceil(8)
    }

    pub fn empty(cfg: &SensorConfig, n_frames: usize) -> Self {
        let stride = Self::plane_stride(cfg.height, cfg.width);
        SpikeStream {
            height: cfg.height,
            width: cfg.width,
            n_frames,
            threshold: cfg.threshold,
            photon_gain: cfg.photon_gain,
            frame_period: cfg.frame_period,
            planes: vec![0u8; stride * n_frames],
        }
    }

    #[inline]
    pub fn get(&self, frame: usize, y: usize, x: usize) -> bool {
        let stride = Self::plane_stride(self.height, self.width);
        let p = y * self.width + x;
        let byte = self.planes[frame * stride + p / 8];
        (byte >> (p % 8)) & 1 == 1
    }

    #[inline]
    fn set(&mut self, frame: usize, pixel: usize) {
        let stride = Self::plane_stride(self.height, self.width);
        self.planes[frame * stride + pixel / 8] |= 1 << (pixel % 8);
    }

    pub fn raw_planes(&self) -> &[u8] {
        &self.planes
    }

    /// Spike count per pixel over all frames, via byte popcounts.
    pub fn counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.height * self.width];
        let stride = Self::plane_stride(self.height, self.width);
        for f in 0..self.n_frames {
            let plane = &self.planes[f * stride..(f + 1) * stride];
            for p in 0..self.height * self.width {
                counts[p] += ((plane[p / 8] >> (p % 8)) & 1) as u32;
            }
        }
        counts
    }

    /// Total spikes across the whole stream.
    pub fn total_spikes(&self) -> u64 {
        self.planes.iter().map(|b| b.count_ones() as u64).sum()
    }

    /// Spike counts as a scalar image (input to the classical estimators).
    pub fn count_image(&self) -> Image {
        let counts = self.counts();
        Image {
            width: self.width,
            height: self.height,
            data: counts.into_iter().map(|c| c as f64).collect(),
        }
    }

    /// Copies frames `[start, start + len)` into a standalone stream.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<SpikeStream> {
        if start + len > self.n_frames {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) exceeds stream of {} frames",
                start + len,
                self.n_frames
            )));
        }
        let stride = Self::plane_stride(self.height, self.width);
        Ok(SpikeStream {
            height: self.height,
            width: self.width,
            n_frames: len,
            threshold: self.threshold,
            photon_gain: self.photon_gain,
            frame_period: self.frame_period,
            planes: self.planes[start * stride..(start + len) * stride].to_vec(),
        })
    }
}

/// Expected per-frame accumulator increment for one pixel before noise.
#[inline]
fn expected_increment(cfg: &SensorConfig, irradiance: f64) -> f64 {
    cfg.photon_gain * irradiance * cfg.frame_period
}

/// Integrates one irradiance frame into the accumulator and appends the
/// resulting bitplane to `out` at `out_frame`.
///
/// A pixel spikes when its accumulator reaches the threshold; the residual is
/// kept modulo the threshold, and multiple crossings within a single frame
/// still emit exactly one bit.
pub fn integrate_frame(
    state: &mut AccumulatorState,
    frame: &Image,
    cfg: &SensorConfig,
    out: &mut SpikeStream,
    out_frame: usize,
) -> Result<()> {
    if frame.height != cfg.height || frame.width != cfg.width {
        return Err(Error::invalid(format!(
            "frame is {}x{}, sensor is {}x{}",
            frame.height, frame.width, cfg.height, cfg.width
        )));
    }
    let frame_idx = state.frame_counter;
    let threshold = cfg.threshold;
    let w = cfg.width;

    // Rows are independent given per-(pixel, frame) noise substreams, so the
    // parallel split cannot change results.
    let spikes: Vec<Vec<usize>> = state
        .residual
        .par_chunks_mut(w)
        .enumerate()
        .map(|(y, residual_row)| {
            let mut fired = Vec::new();
            for (x, residual) in residual_row.iter_mut().enumerate() {
                let p = y * w + x;
                let mean = expected_increment(cfg, frame.data[p]);
                let signal = if cfg.shot_noise {
                    sample_photon_count(cfg.seed, p as u64, frame_idx, mean)
                } else {
                    mean
                };
                let inc = signal + cfg.dark_current;
                let acc = *residual + inc;
                if acc >= threshold {
                    fired.push(p);
                    *residual = acc % threshold;
                } else {
                    *residual = acc;
                }
            }
            fired
        })
        .collect();

    for row in spikes {
        for p in row {
            out.set(out_frame, p);
        }
    }
    state.frame_counter += 1;
    Ok(())
}

/// Draws a Poisson photon count with mean `mean` from the (seed, pixel,
/// frame) substream. Zero-mean pixels draw nothing, so dark regions cost no
/// RNG work and brightness-only edits elsewhere cannot shift their noise.
fn sample_photon_count(seed: u64, pixel: u64, frame: u64, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    let mut rng = stream_rng(mix_seed3(seed, pixel, 0x5149_4b45), frame);
    match Poisson::new(mean) {
        Ok(p) => p.sample(&mut rng),
        // Poisson::new only fails for non-positive or non-finite means.
        Err(_) => mean,
    }
}

/// Runs the sensor over a movie starting from a zero accumulator at global
/// frame `frame_offset`.
pub fn simulate(frames: &[Image], cfg: &SensorConfig, frame_offset: u64) -> Result<SpikeStream> {
    cfg.validate()?;
    let mut state = AccumulatorState::at_frame(cfg, frame_offset);
    let mut out = SpikeStream::empty(cfg, frames.len());
    for (i, frame) in frames.iter().enumerate() {
        integrate_frame(&mut state, frame, cfg, &mut out, i)?;
    }
    Ok(out)
}

/// Writes the stream as a `.spk` file.
///
/// Layout (all little-endian): magic `PSSD`, version u32, height u32,
/// width u32, n_frames u32, threshold f64, photon_gain f64, frame_period f64,
/// then `n_frames` bitplanes of `ceil(height*width/8)` bytes each.
pub fn write_spk(path: &Path, stream: &SpikeStream) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io_path(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    w.write_all(SPK_MAGIC)?;
    w.write_all(&SPK_VERSION.to_le_bytes())?;
    w.write_all(&(stream.height as u32).to_le_bytes())?;
    w.write_all(&(stream.width as u32).to_le_bytes())?;
    w.write_all(&(stream.n_frames as u32).to_le_bytes())?;
    w.write_all(&stream.threshold.to_le_bytes())?;
    w.write_all(&stream.photon_gain.to_le_bytes())?;
    w.write_all(&stream.frame_period.to_le_bytes())?;
    w.write_all(&stream.planes)?;
    Ok(())
}

/// Reads a `.spk` file written by [`write_spk`].
pub fn read_spk(path: &Path) -> Result<SpikeStream> {
    let bytes = std::fs::read(path).map_err(|e| Error::io_path(path.display().to_string(), e))?;
    let origin = path.display().to_string();
    const HEADER: usize = 4 + 4 + 4 + 4 + 4 + 8 + 8 + 8;
    if bytes.len() < HEADER {
        return Err(Error::format(&origin, "file shorter than header"));
    }
    if &bytes[0..4] != SPK_MAGIC {
        return Err(Error::format(&origin, "bad magic, expected PSSD"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let f64_at = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != SPK_VERSION {
        return Err(Error::format(
            &origin,
            format!("unsupported version {version}, expected {SPK_VERSION}"),
        ));
    }
    let height = u32_at(8) as usize;
    let width = u32_at(12) as usize;
    let n_frames = u32_at(16) as usize;
    let threshold = f64_at(20);
    let photon_gain = f64_at(28);
    let frame_period = f64_at(36);
    if height == 0 || width == 0 {
        return Err(Error::format(&origin, "zero sensor dimensions"));
    }
    let stride = SpikeStream::plane_stride(height, width);
    let expected = stride * n_frames;
    let payload = &bytes[HEADER..];
    if payload.len() != expected {
        return Err(Error::format(
            &origin,
            format!("expected {expected} plane bytes, found {}", payload.len()),
        ));
    }
    Ok(SpikeStream {
        height,
        width,
        n_frames,
        threshold,
        photon_gain,
        frame_period,
        planes: payload.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn constant_movie(cfg: &SensorConfig, n: usize, irradiance: f64) -> Vec<Image> {
        (0..n)
            .map(|_| Image::from_fn(cfg.height, cfg.width, |_, _| irradiance))
            .collect()
    }

    /// Independent oracle: spikes-so-far after frame k is floor(cumsum_k / threshold),
    /// so the per-frame bit is the difference of consecutive floors.
    fn floor_difference_pattern(increments: &[f64], threshold: f64) -> Vec<bool> {
        let mut bits = Vec::with_capacity(increments.len());
        let mut cum = 0.0;
        let mut prev = 0u64;
        for &inc in increments {
            cum += inc;
            let now = (cum / threshold).floor() as u64;
            bits.push(now > prev);
            prev = now;
        }
        bits
    }

    #[test]
    fn unit_threshold_rate_3_8_fires_on_known_frames() {
        // threshold 1, per-frame increment 0.375. The rate is a dyadic
        // rational so every partial sum is exact in f64 and the iterative
        // accumulator agrees with the floor-difference oracle bit for bit.
        // Expected spike frames (1-indexed): 3, 6, 8, 11, 14, 16.
        let mut cfg = SensorConfig::noise_free(1, 1);
        cfg.threshold = 1.0;
        cfg.photon_gain = 1.0;
        cfg.frame_period = 1.0;
        let movie = constant_movie(&cfg, 16, 0.375);
        let stream = simulate(&movie, &cfg, 0).unwrap();
        let got: Vec<bool> = (0..16).map(|f| stream.get(f, 0, 0)).collect();
        let oracle = floor_difference_pattern(&[0.375; 16], 1.0);
        assert_eq!(got, oracle, "simulator must match the floor-difference oracle");
        let fired: Vec<usize> = got
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i + 1))
            .collect();
        assert_eq!(fired, vec![3, 6, 8, 11, 14, 16]);
    }

    #[test]
    fn half_threshold_increment_alternates() {
        let mut cfg = SensorConfig::noise_free(1, 1);
        cfg.threshold = 2.0;
        cfg.photon_gain = 1.0;
        cfg.frame_period = 1.0;
        let movie = constant_movie(&cfg, 6, 1.0);
        let stream = simulate(&movie, &cfg, 0).unwrap();
        let got: Vec<bool> = (0..6).map(|f| stream.get(f, 0, 0)).collect();
        assert_eq!(got, vec![false, true, false, true, false, true]);
    }

    #[test]
    fn multiple_crossings_emit_one_bit_with_mod_residual() {
        let mut cfg = SensorConfig::noise_free(1, 1);
        cfg.threshold = 1.0;
        cfg.photon_gain = 1.0;
        cfg.frame_period = 1.0;
        let movie = [Image::from_fn(1, 1, |_, _| 2.5)];
        let mut state = AccumulatorState::new(&cfg);
        let mut out = SpikeStream::empty(&cfg, 1);
        integrate_frame(&mut state, &movie[0], &cfg, &mut out, 0).unwrap();
        assert!(out.get(0, 0, 0), "one spike for the whole frame");
        assert_eq!(out.total_spikes(), 1);
        assert!((state.residual[0] - 0.5).abs() < 1e-12, "residual is A mod threshold");
    }

    #[test]
    fn conservation_holds_exactly_below_threshold_increments() {
        // With per-frame increments below threshold the count identity
        // count == floor(total / threshold) is exact per pixel.
        for seed in 0..20u64 {
            let mut rng = crate::util::stream_rng(900 + seed, 0);
            let mut cfg = SensorConfig::noise_free(6, 5);
            cfg.threshold = 1.0;
            cfg.photon_gain = 1.0;
            cfg.frame_period = 1.0;
            let n = rng.gen_range(5..40);
            let movie: Vec<Image> = (0..n)
                .map(|_| Image::from_fn(6, 5, |_, _| rng.gen_range(0.0..0.95)))
                .collect();
            let stream = simulate(&movie, &cfg, 0).unwrap();
            let counts = stream.counts();
            for (p, &count) in counts.iter().enumerate() {
                let total: f64 = movie.iter().map(|f| f.data[p]).sum();
                assert_eq!(
                    count as u64,
                    (total / cfg.threshold).floor() as u64,
                    "pixel {p} seed {seed}"
                );
            }
        }
    }

    #[test]
    fn pointwise_brighter_never_spikes_less() {
        // Monotonicity in the sub-threshold-increment regime, where the
        // floor identity applies.
        for seed in 0..10u64 {
            let mut rng = crate::util::stream_rng(1700 + seed, 0);
            let mut cfg = SensorConfig::noise_free(4, 4);
            cfg.threshold = 1.0;
            cfg.photon_gain = 1.0;
            cfg.frame_period = 1.0;
            let n = 25;
            let dim: Vec<Image> = (0..n)
                .map(|_| Image::from_fn(4, 4, |_, _| rng.gen_range(0.0..0.5)))
                .collect();
            let bright: Vec<Image> = dim
                .iter()
                .map(|f| Image {
                    width: f.width,
                    height: f.height,
                    data: f.data.iter().map(|&v| v + rng.gen_range(0.0..0.4)).collect(),
                })
                .collect();
            let cd = simulate(&dim, &cfg, 0).unwrap().counts();
            let cb = simulate(&bright, &cfg, 0).unwrap().counts();
            for p in 0..16 {
                assert!(cb[p] >= cd[p], "pixel {p} seed {seed}: {} < {}", cb[p], cd[p]);
            }
        }
    }

    #[test]
    fn gain_intensity_product_symmetry() {
        let mut rng = crate::util::stream_rng(55, 0);
        let movie: Vec<Image> = (0..20)
            .map(|_| Image::from_fn(3, 3, |_, _| rng.gen_range(0.0..30.0)))
            .collect();
        let mut a = SensorConfig::noise_free(3, 3);
        a.threshold = 1.0;
        a.photon_gain = 2.0;
        a.frame_period = 0.05;
        let mut b = a.clone();
        b.photon_gain = 4.0;
        let halved: Vec<Image> = movie
            .iter()
            .map(|f| Image {
                width: 3,
                height: 3,
                data: f.data.iter().map(|&v| v / 2.0).collect(),
            })
            .collect();
        let sa = simulate(&movie, &a, 0).unwrap();
        let sb = simulate(&halved, &b, 0).unwrap();
        assert_eq!(sa.raw_planes(), sb.raw_planes(), "doubling gain with halved irradiance is a no-op");
    }

    #[test]
    fn dark_current_fires_without_light() {
        let mut cfg = SensorConfig::noise_free(2, 2);
        cfg.threshold = 40.0;
        cfg.dark_current = 0.2;
        let movie = constant_movie(&cfg, 1000, 0.0);
        let stream = simulate(&movie, &cfg, 0).unwrap();
        let counts = stream.counts();
        // 1000 frames * 0.2 / 40 = 5 threshold crossings exactly.
        assert!(counts.iter().all(|&c| c == 5), "got {counts:?}");
    }

    #[test]
    fn shot_noise_is_seeded_and_mean_preserving() {
        let mut cfg = SensorConfig::new(8, 8);
        cfg.threshold = 40.0;
        cfg.photon_gain = 1.0;
        cfg.frame_period = 1.0;
        cfg.dark_current = 0.0;
        cfg.seed = 123;
        let movie = constant_movie(&cfg, 400, 18.0);
        let s1 = simulate(&movie, &cfg, 0).unwrap();
        let s2 = simulate(&movie, &cfg, 0).unwrap();
        assert_eq!(s1.raw_planes(), s2.raw_planes(), "same seed, same stream");

        let mut other = cfg.clone();
        other.seed = 124;
        let s3 = simulate(&movie, &other, 0).unwrap();
        assert_ne!(s1.raw_planes(), s3.raw_planes(), "different seed, different noise");

        // Counts stay near the noise-free expectation: 400 * 18 / 40 = 180.
        let mean = s1.counts().iter().map(|&c| c as f64).sum::<f64>() / 64.0;
        assert!((mean - 180.0).abs() < 10.0, "mean count {mean} far from 180");
    }

    #[test]
    fn frame_offset_shifts_noise_substreams() {
        let mut cfg = SensorConfig::new(4, 4);
        cfg.threshold = 40.0;
        cfg.photon_gain = 1.0;
        cfg.frame_period = 1.0;
        cfg.dark_current = 0.0;
        cfg.seed = 9;
        let movie = constant_movie(&cfg, 30, 15.0);
        // Simulating frames [10, 40) of a global timeline must reuse the
        // exact noise draws of those global frame indices.
        let long = simulate(&constant_movie(&cfg, 40, 15.0), &cfg, 0).unwrap();
        let long_tail_counts: Vec<u32> = {
            let tail = long.slice_frames(10, 30).unwrap();
            tail.counts()
        };
        let offset = simulate(&movie, &cfg, 10).unwrap();
        // Accumulators start from zero in `offset` (fresh window) while the
        // long run carries residuals, so compare noise draws indirectly: the
        // same offset run twice is identical, and differs from offset 0.
        let offset_again = simulate(&movie, &cfg, 10).unwrap();
        assert_eq!(offset.raw_planes(), offset_again.raw_planes());
        let zero = simulate(&movie, &cfg, 0).unwrap();
        assert_ne!(offset.raw_planes(), zero.raw_planes());
        // Sanity: the tail slice has plausible counts (shared regime).
        let m = long_tail_counts.iter().map(|&c| c as f64).sum::<f64>() / 16.0;
        assert!(m > 5.0);
    }

    #[test]
    fn spk_round_trip_is_bit_exact() {
        let mut rng = crate::util::stream_rng(77, 0);
        for _ in 0..5 {
            let h = rng.gen_range(1..9);
            let w = rng.gen_range(1..9);
            let mut cfg = SensorConfig::noise_free(h, w);
            cfg.threshold = 1.0;
            cfg.photon_gain = 1.0;
            cfg.frame_period = 1.0;
            cfg.seed = rng.gen();
            let n = rng.gen_range(1..25);
            let movie: Vec<Image> = (0..n)
                .map(|_| Image::from_fn(h, w, |_, _| rng.gen_range(0.0..0.9)))
                .collect();
            let stream = simulate(&movie, &cfg, 0).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("s.spk");
            write_spk(&path, &stream).unwrap();
            let back = read_spk(&path).unwrap();
            assert_eq!(back, stream);
            // Byte-level check as well: rewriting must reproduce the file.
            let path2 = dir.path().join("s2.spk");
            write_spk(&path2, &back).unwrap();
            assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        }
    }

    #[test]
    fn spk_read_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.spk");
        std::fs::write(&path, b"XXXX").unwrap();
        assert!(read_spk(&path).is_err());
        let mut cfg = SensorConfig::noise_free(2, 2);
        cfg.threshold = 1.0;
        let stream = simulate(&constant_movie(&cfg, 3, 0.4), &cfg, 0).unwrap();
        write_spk(&path, &stream).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_spk(&path).is_err(), "truncated payload must fail");
    }

    #[test]
    fn slice_frames_matches_window() {
        let mut cfg = SensorConfig::noise_free(2, 3);
        cfg.threshold = 1.0;
        cfg.photon_gain = 1.0;
        cfg.frame_period = 1.0;
        let mut rng = crate::util::stream_rng(31, 0);
        let movie: Vec<Image> = (0..12)
            .map(|_| Image::from_fn(2, 3, |_, _| rng.gen_range(0.0..0.9)))
            .collect();
        let stream = simulate(&movie, &cfg, 0).unwrap();
        let s = stream.slice_frames(4, 5).unwrap();
        assert_eq!(s.n_frames, 5);
        for f in 0..5 {
            for y in 0..2 {
                for x in 0..3 {
                    assert_eq!(s.get(f, y, x), stream.get(f + 4, y, x));
                }
            }
        }
        assert!(stream.slice_frames(10, 5).is_err());
    }
}
