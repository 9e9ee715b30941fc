//! Quality-gated refinement of the final iterate.
//!
//! Two branches summarize the last flow estimate: one over the coarse
//! (quarter-grid) field, one over the full-resolution field. The coarse
//! features are upsampled and cross-convolved into the fine branch, and
//! two heads read off a residual field and a sigmoid quality map in
//! [0, 1]. The refined output is `u_ref = u_N + u_res * Q`; both heads
//! start at zero, so refinement is initially the identity.

use rand_chacha::ChaCha8Rng;

use super::SivConfig;
use crate::error::{Error, Result};
use crate::tensor::composite::{add_conv2d, conv2d_p, conv2d_same, WInit};
use crate::tensor::{ParamStore, Tape, TensorId};

#[derive(Debug)]
pub struct RefineOutput {
    /// Residual field `[2, H, W]`.
    pub residual: TensorId,
    /// Quality gate `[1, 1, H, W]`, sigmoid-bounded to `[0, 1]`.
    pub quality: TensorId,
    /// Refined field `[2, H, W]`.
    pub refined: TensorId,
}

pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &SivConfig) -> Result<()> {
    let hid = cfg.hidden();
    add_conv2d(store, rng, "msvr.coarse", hid, 2, 3, 3, WInit::He)?;
    add_conv2d(store, rng, "msvr.fine", hid, 2, 3, 3, WInit::He)?;
    add_conv2d(store, rng, "msvr.cross", hid, hid, 3, 3, WInit::He)?;
    add_conv2d(store, rng, "msvr.ures", 2, hid, 1, 1, WInit::Zero)?;
    add_conv2d(store, rng, "msvr.q", 1, hid, 1, 1, WInit::Zero)?;
    Ok(())
}

/// Element-wise gating `u_N + u_res * Q` with the single-channel quality
/// map broadcast over both flow components.
pub fn gate(
    tape: &mut Tape,
    u_n: TensorId,
    u_res: TensorId,
    quality: TensorId,
) -> Result<TensorId> {
    let q2 = tape.concat(&[quality, quality], 1)?;
    let shape = tape.shape(u_res).to_vec();
    let q2 = tape.reshape(q2, shape)?;
    let gated = tape.mul(u_res, q2)?;
    tape.add(u_n, gated)
}

/// Refines the last iterate. `coarse` is the `[1, 2, h, w]` quarter-grid
/// field; `u_n` is the matching `[2, H, W]` full-resolution field.
pub fn msvr_forward(
    tape: &mut Tape,
    store: &ParamStore,
    _cfg: &SivConfig,
    coarse: TensorId,
    u_n: TensorId,
) -> Result<RefineOutput> {
    let fs = tape.shape(u_n).to_vec();
    if fs.len() != 3 || fs[0] != 2 {
        return Err(Error::shape(
            "msvr",
            format!("expected [2, H, W] final iterate, got {fs:?}"),
        ));
    }
    let (h, w) = (fs[1], fs[2]);
    let u_n4 = tape.reshape(u_n, vec![1, 2, h, w])?;

    let cf = conv2d_same(tape, store, "msvr.coarse", coarse)?;
    let cf = tape.relu(cf)?;
    let ff = conv2d_same(tape, store, "msvr.fine", u_n4)?;
    let ff = tape.relu(ff)?;
    let cup = tape.bilinear_resize(cf, h, w)?;
    let cross = conv2d_same(tape, store, "msvr.cross", cup)?;
    let fused = tape.add(ff, cross)?;
    let fused = tape.relu(fused)?;

    let u_res4 = conv2d_p(tape, store, "msvr.ures", fused, (1, 1), (0, 0))?;
    let q_logits = conv2d_p(tape, store, "msvr.q", fused, (1, 1), (0, 0))?;
    let quality = tape.sigmoid(q_logits)?;

    let refined4 = gate(tape, u_n4, u_res4, quality)?;
    Ok(RefineOutput {
        residual: tape.reshape(u_res4, vec![2, h, w])?,
        quality,
        refined: tape.reshape(refined4, vec![2, h, w])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::siv::{SivConfig, SivModel};
    use crate::tensor::Tensor;
    use crate::util::stream_rng;
    use rand::Rng;

    fn random_flow(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = stream_rng(seed, 2);
        let data: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(vec![2, h, w], data).unwrap()
    }

    #[test]
    fn hand_gated_refinement_matches_the_closed_form() {
        // u_N = (1, 1), u_res = (0.5, -0.5), Q = 0.5 -> u_ref = (1.25, 0.75).
        let mut tape = Tape::new();
        let u_n = tape.leaf(Tensor::full(vec![1, 2, 3, 3], 1.0).unwrap()).unwrap();
        let mut res = vec![0.5; 9];
        res.extend(vec![-0.5; 9]);
        let u_res = tape
            .leaf(Tensor::new(vec![1, 2, 3, 3], res).unwrap())
            .unwrap();
        let q = tape.leaf(Tensor::full(vec![1, 1, 3, 3], 0.5).unwrap()).unwrap();
        let out = gate(&mut tape, u_n, u_res, q).unwrap();
        let d = tape.value(out).data();
        for i in 0..9 {
            assert!((d[i] - 1.25).abs() < 1e-12, "u component");
            assert!((d[9 + i] - 0.75).abs() < 1e-12, "v component");
        }
    }

    #[test]
    fn zero_residual_head_keeps_the_final_iterate_bit_exact() {
        // Fresh weights: u_res == 0, so u_ref == u_N even though Q = 0.5.
        let cfg = SivConfig::toy();
        let model = SivModel::new(cfg.clone(), 3).unwrap();
        let mut tape = Tape::new();
        let coarse = tape
            .leaf(Tensor::new(vec![1, 2, 4, 4], (0..32).map(|i| i as f64 * 0.1).collect()).unwrap())
            .unwrap();
        let u_n = tape.leaf(random_flow(1, 16, 16)).unwrap();
        let out = msvr_forward(&mut tape, &model.store, &cfg, coarse, u_n).unwrap();

        let q = tape.value(out.quality).data();
        assert!(
            q.iter().all(|&v| (v - 0.5).abs() < 1e-12),
            "zero logits give a 0.5 quality gate"
        );
        let before = tape.value(u_n).data().to_vec();
        let after = tape.value(out.refined).data().to_vec();
        assert_eq!(
            before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            after.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            "u_res = 0 makes refinement the identity"
        );
    }

    #[test]
    fn saturated_negative_quality_logits_gate_off_a_real_residual() {
        // Push the quality head's bias to -800: sigmoid underflows to
        // exactly 0, so even a nonzero residual leaves u_N untouched.
        let cfg = SivConfig::toy();
        let mut model = SivModel::new(cfg.clone(), 5).unwrap();
        let mut flat = model.store.values_flat();
        let mut off = 0;
        for i in 0..model.store.len() {
            let p = model.store.get_by_index(i);
            let n = p.tensor.numel();
            match p.name.as_str() {
                // Give the residual head real weights so u_res != 0.
                "msvr.ures.w" => {
                    let mut rng = stream_rng(99, 0);
                    for v in &mut flat[off..off + n] {
                        *v = rng.gen_range(-0.5..0.5);
                    }
                }
                "msvr.q.b" => {
                    for v in &mut flat[off..off + n] {
                        *v = -800.0;
                    }
                }
                _ => {}
            }
            off += n;
        }
        model.store.set_values_flat(&flat).unwrap();

        let mut tape = Tape::new();
        let coarse = tape
            .leaf(Tensor::full(vec![1, 2, 4, 4], 0.3).unwrap())
            .unwrap();
        let u_n = tape.leaf(random_flow(7, 16, 16)).unwrap();
        let out = msvr_forward(&mut tape, &model.store, &cfg, coarse, u_n).unwrap();

        let res = tape.value(out.residual).data();
        assert!(
            res.iter().any(|&v| v != 0.0),
            "the residual head was given nonzero weights"
        );
        assert!(
            tape.value(out.quality).data().iter().all(|&v| v == 0.0),
            "sigmoid(-800) underflows to zero"
        );
        let before = tape.value(u_n).data().to_vec();
        let after = tape.value(out.refined).data().to_vec();
        assert_eq!(
            before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            after.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            "Q = 0 gates the residual off exactly"
        );
    }

    #[test]
    fn quality_stays_within_the_unit_interval() {
        let cfg = SivConfig::toy();
        let mut model = SivModel::new(cfg.clone(), 8).unwrap();
        // Randomize the heads so the gate is non-trivial.
        let mut rng = stream_rng(31, 1);
        let mut flat = model.store.values_flat();
        for v in &mut flat {
            *v += rng.gen_range(-0.3..0.3);
        }
        model.store.set_values_flat(&flat).unwrap();

        let mut tape = Tape::new();
        let coarse = tape.leaf(Tensor::full(vec![1, 2, 4, 4], -0.2).unwrap()).unwrap();
        let u_n = tape.leaf(random_flow(9, 16, 16)).unwrap();
        let out = msvr_forward(&mut tape, &model.store, &cfg, coarse, u_n).unwrap();
        for &q in tape.value(out.quality).data() {
            assert!((0.0..=1.0).contains(&q), "quality {q} escaped [0, 1]");
        }
    }
}
