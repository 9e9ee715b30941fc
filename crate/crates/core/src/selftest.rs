//! Fast built-in diagnostics: a handful of oracle checks over the sensor
//! model, the estimators, the autodiff tape, the loss, and the file formats.
//! The whole suite runs in a few seconds and is wired to the `selftest` CLI
//! subcommand so an installation can be sanity-checked without fixtures.

use rand::Rng;

use crate::classical::{estimate_xcorr, XcorrConfig};
use crate::error::{Error, Result};
use crate::flow::{read_flo, write_flo, FlowField};
use crate::img::Image;
use crate::siv::{sequence_loss, SivConfig, SivModel};
use crate::spike::{read_spk, simulate, write_spk, SensorConfig};
use crate::tensor::gradcheck::check_input_grad;
use crate::tensor::{Tape, Tensor};
use crate::util::stream_rng;

/// Result of one named diagnostic.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// What was measured on success, or why the check failed.
    pub detail: String,
}

/// A named diagnostic: on success the check returns what it measured.
type Check = (&'static str, fn() -> Result<String>);

/// Runs every diagnostic and reports per-check outcomes. Never panics: a
/// failing check comes back as `passed == false` with the error text.
pub fn run_selftest() -> Vec<CheckOutcome> {
    let checks: [Check; 7] = [
        ("spike_conservation", check_spike_conservation),
        ("correlation_integer_shift", check_correlation_integer_shift),
        ("autodiff_finite_difference", check_autodiff_finite_difference),
        ("loss_discount_hand_value", check_loss_discount_hand_value),
        ("fresh_model_emits_zero_flow", check_fresh_model_zero_flow),
        ("spike_file_round_trip", check_spk_round_trip),
        ("flow_file_round_trip", check_flo_round_trip),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(detail) => CheckOutcome {
                name,
                passed: true,
                detail,
            },
            Err(e) => CheckOutcome {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}

pub fn all_passed(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.passed)
}

/// Scratch directory for the file-format checks; callers clean it up.
fn scratch_dir(tag: &str) -> Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("spikepiv-selftest-{}-{tag}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io_path(&dir, e))?;
    Ok(dir)
}

/// Noise-free integrate-and-fire must conserve charge: the spike count of
/// every pixel equals the integral of its scaled irradiance divided by the
/// threshold, floored, as long as no single frame crosses the threshold on
/// its own.
fn check_spike_conservation() -> Result<String> {
    let (h, w, n_frames) = (24, 24, 30);
    let mut total_spikes = 0u64;
    for seed in 0..3u64 {
        let cfg = SensorConfig::noise_free(h, w);
        let mut rng = stream_rng(0xC0_4E5E + seed, 0);
        // Per-frame increment stays below the threshold of 40: irradiance
        // tops out at 7e5 and 7e5 * 5e-5 = 35.
        let frames: Vec<Image> = (0..n_frames)
            .map(|_| Image::from_fn(h, w, |_, _| rng.gen_range(0.0..7.0e5)))
            .collect();
        let stream = simulate(&frames, &cfg, 0)?;
        let counts = stream.counts();
        for y in 0..h {
            for x in 0..w {
                let sum: f64 = frames
                    .iter()
                    .map(|f| cfg.photon_gain * f.at(y, x) * cfg.frame_period)
                    .sum();
                let expect = (sum / cfg.threshold).floor() as u32;
                let got = counts[y * w + x];
                if got != expect {
                    return Err(Error::numeric(format!(
                        "pixel ({y}, {x}) seed {seed}: counted {got} spikes, integral says {expect}"
                    )));
                }
                total_spikes += u64::from(got);
            }
        }
    }
    Ok(format!(
        "3 random noise-free movies conserve charge exactly ({total_spikes} spikes checked)"
    ))
}

/// Window correlation on a wrapped integer translation of a dot texture must
/// recover the shift everywhere.
fn check_correlation_integer_shift() -> Result<String> {
    let (h, w) = (64, 64);
    let (dx, dy) = (5i64, -3i64);
    let mut rng = stream_rng(0xD07, 0);
    let mut img0 = Image::from_fn(h, w, |_, _| 0.0);
    for _ in 0..60 {
        let cy = rng.gen_range(0..h);
        let cx = rng.gen_range(0..w);
        let amp = rng.gen_range(40.0..220.0);
        // Tent profile over 3x3 keeps the correlation peak well-conditioned
        // for the sub-pixel fit.
        for oy in -1i64..=1 {
            for ox in -1i64..=1 {
                let y = (cy as i64 + oy).rem_euclid(h as i64) as usize;
                let x = (cx as i64 + ox).rem_euclid(w as i64) as usize;
                let weight = (2 - oy.abs()) as f64 * (2 - ox.abs()) as f64 / 4.0;
                img0.data[y * w + x] += amp * weight;
            }
        }
    }
    let img1 = img0.shift_wrap(dx, dy);
    let (field, stats) = estimate_xcorr(&img0, &img1, &XcorrConfig::default())?;
    if stats.valid == 0 {
        return Err(Error::numeric("no correlation window produced a valid vector"));
    }
    let mut worst = 0.0f64;
    for i in 0..field.u.len() {
        let err = (field.u[i] - dx as f64).abs().max((field.v[i] - dy as f64).abs());
        worst = worst.max(err);
    }
    if worst > 0.25 {
        return Err(Error::numeric(format!(
            "wrapped ({dx}, {dy}) shift recovered with max component error {worst:.3} px"
        )));
    }
    Ok(format!(
        "shift ({dx}, {dy}) recovered, max component error {worst:.3} px over {} windows",
        stats.valid
    ))
}

/// Spot finite-difference checks on a linear convolution stack and a matrix
/// product. The full per-primitive sweep lives in the acceptance tests; this
/// one catches a broken tape in under a second.
fn check_autodiff_finite_difference() -> Result<String> {
    let mut rng = stream_rng(0xAD, 0);
    let mut rand_vec = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();

    let wv = rand_vec(2 * 2 * 3 * 3);
    let x0 = rand_vec(2 * 5 * 5);
    let conv_err = check_input_grad(&[1, 2, 5, 5], &x0, 1e-5, 1e-6, |tape, x| {
        let w = tape.leaf(Tensor::new(vec![2, 2, 3, 3], wv.clone())?)?;
        let y = tape.conv2d(x, w, (1, 1), (1, 1))?;
        let sq = tape.mul(y, y)?;
        tape.sum_all(sq)
    })?;
    if conv_err > 1e-4 {
        return Err(Error::numeric(format!(
            "conv2d input gradient off by relative {conv_err:.2e}"
        )));
    }

    let bv = rand_vec(4 * 2);
    let a0 = rand_vec(3 * 4);
    let matmul_err = check_input_grad(&[3, 4], &a0, 1e-5, 1e-6, |tape, a| {
        let b = tape.leaf(Tensor::new(vec![4, 2], bv.clone())?)?;
        let y = tape.matmul(a, b)?;
        let sq = tape.mul(y, y)?;
        tape.sum_all(sq)
    })?;
    if matmul_err > 1e-4 {
        return Err(Error::numeric(format!(
            "matmul input gradient off by relative {matmul_err:.2e}"
        )));
    }
    Ok(format!(
        "conv2d rel err {conv_err:.1e}, matmul rel err {matmul_err:.1e} against finite differences"
    ))
}

/// Three unit-offset fields under discount 0.8 must cost exactly
/// 0.64 + 0.8 + 1.0 = 2.44 in the flow term, with no gradient term.
fn check_loss_discount_hand_value() -> Result<String> {
    let mut tape = Tape::new();
    let gt = Tensor::new(vec![2, 1, 1], vec![0.0, 0.0])?;
    let mut fields = Vec::new();
    for _ in 0..3 {
        let f = tape.leaf(Tensor::new(vec![2, 1, 1], vec![1.0, 0.0])?)?;
        fields.push(f);
    }
    let parts = sequence_loss(&mut tape, &fields, &gt, 0.8, 0.3)?;
    if (parts.value - 2.44).abs() > 1e-9 {
        return Err(Error::numeric(format!(
            "discounted L1 over three unit fields should be 2.44, got {}",
            parts.value
        )));
    }
    Ok(format!("discounted sequence loss = {:.6}", parts.value))
}

/// A freshly seeded model has zero-initialized update and residual heads, so
/// its flow output must be exactly zero everywhere regardless of input.
fn check_fresh_model_zero_flow() -> Result<String> {
    let cfg = SivConfig::toy();
    let bins = cfg.voxel_bins;
    let model = SivModel::new(cfg, 3)?;
    let mut rng = stream_rng(0xF10, 0);
    let n = bins * 32 * 32;
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..6.0)).collect();
    let voxels = Tensor::new(vec![1, 1, bins, 32, 32], data)?;
    let field = model.estimate(&voxels, &voxels, 16)?;
    let nonzero = field
        .u
        .iter()
        .chain(field.v.iter())
        .filter(|&&v| v != 0.0)
        .count();
    if nonzero != 0 {
        return Err(Error::numeric(format!(
            "untrained model should emit the zero field, found {nonzero} nonzero components"
        )));
    }
    Ok("untrained model output is exactly zero motion".to_string())
}

fn check_spk_round_trip() -> Result<String> {
    let dir = scratch_dir("spk")?;
    let result = (|| {
        let cfg = SensorConfig::new(13, 17);
        let mut rng = stream_rng(0x51C, 0);
        let frames: Vec<Image> = (0..21)
            .map(|_| Image::from_fn(13, 17, |_, _| rng.gen_range(0.0..6.0e5)))
            .collect();
        let stream = simulate(&frames, &cfg, 40)?;
        let path = dir.join("round.spk");
        write_spk(&path, &stream)?;
        let back = read_spk(&path)?;
        if back != stream {
            return Err(Error::numeric("spike stream changed across write + read"));
        }
        Ok(format!(
            "{} frames of 13x17 spikes survive write + read bit-exactly",
            stream.n_frames
        ))
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result
}

fn check_flo_round_trip() -> Result<String> {
    let dir = scratch_dir("flo")?;
    let result = (|| {
        let mut rng = stream_rng(0xF70, 0);
        let (h, w) = (9, 7);
        // The format stores 32-bit floats, so seed with values that are
        // exactly representable there.
        let mut field = FlowField::zeros(h, w, 16);
        for i in 0..h * w {
            field.u[i] = f64::from(rng.gen_range(-8.0f32..8.0));
            field.v[i] = f64::from(rng.gen_range(-8.0f32..8.0));
        }
        let path = dir.join("round.flo");
        write_flo(&path, &field)?;
        let back = read_flo(&path)?;
        if back.width != field.width || back.height != field.height {
            return Err(Error::numeric("flow dimensions changed across write + read"));
        }
        for i in 0..h * w {
            if back.u[i] != field.u[i] || back.v[i] != field.v[i] {
                return Err(Error::numeric(format!(
                    "flow vector {i} changed across write + read"
                )));
            }
        }
        Ok(format!("{w}x{h} flow field survives write + read bit-exactly"))
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result
}
