//! Feature extraction from spike voxel grids.
//!
//! The hierarchical transform runs three levels. Each level halves the
//! temporal and spatial extent along two parallel branches whose outputs
//! are summed: a strided 5x3x3 3D convolution, and a 1x2x2 max-pool
//! followed by a 5x1x1 temporal convolution (the pooling branch is what
//! preserves isolated spike detail that a plain strided convolution
//! averages away). A 1x3x3 convolution mixes the sum, and the result both
//! feeds the next level and contributes a per-level head: temporal mean,
//! 3x3 refinement, bilinear resampling to the common quarter grid. The
//! three heads are concatenated and fused by a final 3x3 convolution into
//! the C-channel representation.
//!
//! The fallback encoder (used when the pyramid is ablated) collapses time
//! by mean and applies two stride-2 convolutions.

use rand_chacha::ChaCha8Rng;

use super::SivConfig;
use crate::error::Result;
use crate::tensor::composite::{
    add_conv2d, add_conv3d, conv2d_p, conv2d_same, conv3d_p, WInit,
};
use crate::tensor::{ParamStore, Tape, TensorId};

pub fn register_dpht(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &SivConfig) -> Result<()> {
    let chans = cfg.level_channels();
    let mut in_c = 1;
    for (l, &c) in chans.iter().enumerate() {
        add_conv3d(store, rng, &format!("dpht.l{l}.c3"), c, in_c, 5, 3, 3, WInit::He)?;
        add_conv3d(store, rng, &format!("dpht.l{l}.mp"), c, in_c, 5, 1, 1, WInit::He)?;
        add_conv3d(store, rng, &format!("dpht.l{l}.f2"), c, c, 1, 3, 3, WInit::He)?;
        add_conv2d(store, rng, &format!("dpht.l{l}.refine"), c, c, 3, 3, WInit::He)?;
        in_c = c;
    }
    let total: usize = chans.iter().sum();
    add_conv2d(store, rng, "dpht.fuse", cfg.channels, total, 3, 3, WInit::He)
}

/// Runs the pyramid on one `[1, 1, B, H, W]` voxel tensor and returns the
/// `[1, C, H/4, W/4]` representation.
pub fn dpht_forward(
    tape: &mut Tape,
    store: &ParamStore,
    _cfg: &SivConfig,
    voxels: TensorId,
) -> Result<TensorId> {
    let shape = tape.shape(voxels).to_vec();
    let (h, w) = (shape[3], shape[4]);
    let (th, tw) = (h / super::SCALE, w / super::SCALE);

    let mut x = voxels;
    let mut heads = Vec::with_capacity(3);
    for l in 0..3 {
        let a = conv3d_p(tape, store, &format!("dpht.l{l}.c3"), x, (2, 2, 2), (2, 1, 1))?;
        let a = tape.relu(a)?;
        let pooled = tape.maxpool3d(x, (1, 2, 2), (2, 2, 2))?;
        let b = conv3d_p(tape, store, &format!("dpht.l{l}.mp"), pooled, (1, 1, 1), (2, 0, 0))?;
        let summed = tape.add(a, b)?;
        let mixed = conv3d_p(tape, store, &format!("dpht.l{l}.f2"), summed, (1, 1, 1), (0, 1, 1))?;
        x = tape.relu(mixed)?;

        let collapsed = tape.mean_axis(x, 2)?;
        let refined = conv2d_same(tape, store, &format!("dpht.l{l}.refine"), collapsed)?;
        let refined = tape.relu(refined)?;
        heads.push(tape.bilinear_resize(refined, th, tw)?);
    }
    let stacked = tape.concat(&heads, 1)?;
    conv2d_same(tape, store, "dpht.fuse", stacked)
}

pub fn register_fallback(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    cfg: &SivConfig,
) -> Result<()> {
    let mid = (cfg.channels / 4).max(4);
    add_conv2d(store, rng, "enc.c1", mid, 1, 3, 3, WInit::He)?;
    add_conv2d(store, rng, "enc.c2", cfg.channels, mid, 3, 3, WInit::He)
}

/// Plain encoder for pyramid-ablated runs: temporal mean, then two
/// stride-2 convolutions down to the quarter grid.
pub fn fallback_forward(
    tape: &mut Tape,
    store: &ParamStore,
    _cfg: &SivConfig,
    voxels: TensorId,
) -> Result<TensorId> {
    let collapsed = tape.mean_axis(voxels, 2)?;
    let c1 = conv2d_p(tape, store, "enc.c1", collapsed, (2, 2), (1, 1))?;
    let c1 = tape.relu(c1)?;
    let c2 = conv2d_p(tape, store, "enc.c2", c1, (2, 2), (1, 1))?;
    tape.relu(c2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::siv::SivModel;
    use crate::tensor::Tensor;
    use crate::util::stream_rng;
    use rand::Rng;

    fn voxels(seed: u64, bins: usize, h: usize, w: usize) -> Tensor {
        let mut rng = stream_rng(seed, 9);
        let data: Vec<f64> = (0..bins * h * w)
            .map(|_| rng.gen_range(0.0..3.0_f64).floor())
            .collect();
        Tensor::new(vec![1, 1, bins, h, w], data).unwrap()
    }

    #[test]
    fn pyramid_emits_c_channels_on_the_quarter_grid() {
        let cfg = crate::siv::SivConfig::toy();
        let model = SivModel::new(cfg.clone(), 5).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(voxels(1, 7, 16, 32)).unwrap();
        let r = dpht_forward(&mut tape, &model.store, &cfg, v).unwrap();
        assert_eq!(tape.shape(r), &[1, cfg.channels, 4, 8]);
    }

    #[test]
    fn zero_voxels_produce_exactly_zero_features() {
        // Every bias starts at zero and all activations fix zero, so the
        // whole pyramid is zero-preserving at init regardless of weights.
        let cfg = crate::siv::SivConfig::toy();
        let model = SivModel::new(cfg.clone(), 8).unwrap();
        let mut tape = Tape::new();
        let v = tape
            .leaf(Tensor::zeros(vec![1, 1, 7, 16, 16]).unwrap())
            .unwrap();
        let r = dpht_forward(&mut tape, &model.store, &cfg, v).unwrap();
        assert!(
            tape.value(r).data().iter().all(|&x| x == 0.0),
            "zero input must map to zero features at zero bias"
        );
    }

    #[test]
    fn temporal_structure_reaches_the_representation() {
        // Two windows with identical per-pixel totals but different timing
        // must be distinguishable; a purely accumulative encoder would
        // collapse them.
        let cfg = crate::siv::SivConfig::toy();
        let model = SivModel::new(cfg.clone(), 21).unwrap();
        let h = 16;
        let mut early = vec![0.0; 7 * h * h];
        let mut late = vec![0.0; 7 * h * h];
        for y in 0..h {
            for x in 0..h {
                // Same total of 2 spikes; bins differ.
                early[y * h + x] = 2.0;
                late[6 * h * h + y * h + x] = 2.0;
            }
        }
        let a = Tensor::new(vec![1, 1, 7, h, h], early).unwrap();
        let b = Tensor::new(vec![1, 1, 7, h, h], late).unwrap();
        let mut tape = Tape::new();
        let ia = tape.leaf(a).unwrap();
        let ib = tape.leaf(b).unwrap();
        let ra = dpht_forward(&mut tape, &model.store, &cfg, ia).unwrap();
        let rb = dpht_forward(&mut tape, &model.store, &cfg, ib).unwrap();
        let da = tape.value(ra).data();
        let db = tape.value(rb).data();
        let diff: f64 = da.iter().zip(db).map(|(x, y)| (x - y).abs()).sum();
        assert!(
            diff > 1e-6,
            "shifting spikes between bins must change the features, diff {diff}"
        );
    }

    #[test]
    fn fallback_encoder_matches_the_contract_shape() {
        let mut cfg = crate::siv::SivConfig::toy();
        cfg.use_dpht = false;
        let model = SivModel::new(cfg.clone(), 2).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(voxels(4, 7, 24, 16)).unwrap();
        let r = fallback_forward(&mut tape, &model.store, &cfg, v).unwrap();
        assert_eq!(tape.shape(r), &[1, cfg.channels, 6, 4]);
    }
}
