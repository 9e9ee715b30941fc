//! Recurrent flow optimizer on the quarter grid.
//!
//! A shared two-layer motion encoder turns each stream's features into
//! matching maps. Every iteration warps the target map by the current
//! flow, correlates it locally against the source map, feeds the encoded
//! correlation (with the flow itself and a static context map) into a
//! convolutional GRU, and reads a residual flow update off the hidden
//! state. Each iterate is pushed to full resolution by a learned convex
//! combination over its 3x3 coarse neighborhood; update and mask heads
//! start at zero, so the fresh model reports zero motion and a uniform
//! upsampling mask.

use rand_chacha::ChaCha8Rng;

use super::{SivConfig, SCALE};
use crate::error::{Error, Result};
use crate::tensor::composite::{add_conv2d, add_conv_gru, conv2d_p, conv2d_same, conv_gru, WInit};
use crate::tensor::{ParamStore, Tape, TensorId};

pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &SivConfig) -> Result<()> {
    let c = cfg.channels;
    let hid = cfg.hidden();
    let k2 = (2 * cfg.corr_radius + 1) * (2 * cfg.corr_radius + 1);
    add_conv2d(store, rng, "motion.c1", hid, c, 3, 3, WInit::He)?;
    add_conv2d(store, rng, "motion.c2", hid, hid, 1, 1, WInit::He)?;
    add_conv2d(store, rng, "msio.h0", hid, c, 3, 3, WInit::He)?;
    add_conv2d(store, rng, "msio.ctx", hid, c, 3, 3, WInit::He)?;
    add_conv2d(store, rng, "msio.corr", hid, k2, 1, 1, WInit::He)?;
    add_conv_gru(store, rng, "msio.gru", hid + 2 + hid, hid, 3)?;
    add_conv2d(store, rng, "msio.du.c1", hid, hid, 3, 3, WInit::He)?;
    add_conv2d(store, rng, "msio.du.c2", 2, hid, 1, 1, WInit::Zero)?;
    add_conv2d(store, rng, "msio.mask", 9 * SCALE * SCALE, hid, 1, 1, WInit::Zero)?;
    Ok(())
}

/// Shared motion encoder applied to either stream's features.
fn motion_features(tape: &mut Tape, store: &ParamStore, r: TensorId) -> Result<TensorId> {
    let x = conv2d_same(tape, store, "motion.c1", r)?;
    let x = tape.relu(x)?;
    conv2d_p(tape, store, "motion.c2", x, (1, 1), (0, 0))
}

/// Runs `cfg.iterations` recurrent updates. Returns the full-resolution
/// fields `[2, H, W]` (one per iteration, in full-resolution pixel units)
/// and the coarse iterates `[1, 2, h, w]` (quarter-grid units).
pub fn msio_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &SivConfig,
    f_c: TensorId,
    r_s: TensorId,
    r_t: TensorId,
) -> Result<(Vec<TensorId>, Vec<TensorId>)> {
    if cfg.iterations < 1 {
        return Err(Error::invalid("optimizer needs at least one iteration"));
    }
    let shape = tape.shape(f_c).to_vec();
    let (h, w) = (shape[2], shape[3]);
    let hid = cfg.hidden();
    let f2 = SCALE * SCALE;

    let fm_s = motion_features(tape, store, r_s)?;
    let fm_t = motion_features(tape, store, r_t)?;
    let fm_s3 = tape.reshape(fm_s, vec![hid, h, w])?;
    let fm_t3 = tape.reshape(fm_t, vec![hid, h, w])?;

    let h0 = conv2d_same(tape, store, "msio.h0", f_c)?;
    let mut state = tape.tanh_op(h0)?;
    let ctx = conv2d_same(tape, store, "msio.ctx", f_c)?;
    let ctx = tape.relu(ctx)?;

    let mut flow = tape.constant_fill(vec![1, 2, h, w], 0.0)?;
    let mut full = Vec::with_capacity(cfg.iterations);
    let mut coarse = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let flow3 = tape.reshape(flow, vec![2, h, w])?;
        let warped = tape.warp_bilinear(fm_t3, flow3)?;
        let corr = tape.local_corr(fm_s3, warped, cfg.corr_radius)?;
        let k2 = tape.shape(corr)[0];
        let corr4 = tape.reshape(corr, vec![1, k2, h, w])?;
        let cf = conv2d_p(tape, store, "msio.corr", corr4, (1, 1), (0, 0))?;
        let cf = tape.relu(cf)?;

        let x = tape.concat(&[cf, flow, ctx], 1)?;
        state = conv_gru(tape, store, "msio.gru", x, state)?;

        let d = conv2d_same(tape, store, "msio.du.c1", state)?;
        let d = tape.relu(d)?;
        let du = conv2d_p(tape, store, "msio.du.c2", d, (1, 1), (0, 0))?;
        flow = tape.add(flow, du)?;

        let mask_logits = conv2d_p(tape, store, "msio.mask", state, (1, 1), (0, 0))?;
        let grouped = tape.reshape(mask_logits, vec![9, f2, h, w])?;
        let normalized = tape.softmax(grouped, 0)?;
        let mask = tape.reshape(normalized, vec![9 * f2, h, w])?;

        let flow3 = tape.reshape(flow, vec![2, h, w])?;
        let scaled = tape.mul_scalar(flow3, SCALE as f64)?;
        full.push(tape.convex_upsample(scaled, mask, SCALE)?);
        coarse.push(flow);
    }
    Ok((full, coarse))
}
