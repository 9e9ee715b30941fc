//! Supervision for the flow sequence.
//!
//! Every iterate (and the refined field, when present) is compared to the
//! ground truth under an exponentially growing weight: term `i` of `M`
//! carries `gamma^(M-i)`, so late iterates dominate. Two components are
//! combined:
//!
//! * flow term: spatial mean of the per-pixel L1 difference,
//! * gradient term: the same mean over forward differences of the error
//!   in x and y (replicate boundary, so constant offsets contribute
//!   nothing), scaled by `beta`.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Default iterate discount.
pub const GAMMA: f64 = 0.8;
/// Default gradient-term weight.
pub const BETA: f64 = 0.3;

/// The assembled loss node plus the detached component values.
#[derive(Debug)]
pub struct LossParts {
    /// Scalar tape node: `flow + beta * grad`.
    pub total: TensorId,
    /// Value of the weighted flow sum.
    pub flow_part: f64,
    /// Value of the weighted gradient sum (before `beta`).
    pub grad_part: f64,
    /// Value of the total.
    pub value: f64,
}

/// Builds the sequence loss over `fields` (each `[2, H, W]`) against a
/// ground-truth tensor of the same shape.
pub fn sequence_loss(
    tape: &mut Tape,
    fields: &[TensorId],
    gt: &Tensor,
    gamma: f64,
    beta: f64,
) -> Result<LossParts> {
    if fields.is_empty() {
        return Err(Error::invalid("sequence loss needs at least one field"));
    }
    if !(0.0..=1.0).contains(&gamma) || beta < 0.0 {
        return Err(Error::invalid(format!(
            "expected gamma in [0, 1] and beta >= 0, got gamma={gamma} beta={beta}"
        )));
    }
    for &f in fields {
        if tape.shape(f) != gt.shape() {
            return Err(Error::shape(
                "sequence_loss",
                format!(
                    "field shape {:?} does not match ground truth {:?}",
                    tape.shape(f),
                    gt.shape()
                ),
            ));
        }
    }
    let gt_id = tape.leaf(gt.clone())?;
    let m = fields.len();
    // The L1 norm is the spatial mean of the per-pixel |du| + |dv|, i.e.
    // the channel sum divided by the pixel count (not the element count).
    let pixels = (gt.shape()[1] * gt.shape()[2]) as f64;
    let mut flow_sum: Option<TensorId> = None;
    let mut grad_sum: Option<TensorId> = None;
    for (i, &f) in fields.iter().enumerate() {
        let weight = gamma.powi((m - 1 - i) as i32);
        let diff = tape.sub(f, gt_id)?;

        let l1 = tape.abs(diff)?;
        let l1 = tape.sum_all(l1)?;
        let flow_term = tape.mul_scalar(l1, weight / pixels)?;
        flow_sum = Some(match flow_sum {
            Some(acc) => tape.add(acc, flow_term)?,
            None => flow_term,
        });

        let dx = tape.diff_x(diff)?;
        let dx = tape.abs(dx)?;
        let dx = tape.sum_all(dx)?;
        let dy = tape.diff_y(diff)?;
        let dy = tape.abs(dy)?;
        let dy = tape.sum_all(dy)?;
        let g = tape.add(dx, dy)?;
        let grad_term = tape.mul_scalar(g, weight / pixels)?;
        grad_sum = Some(match grad_sum {
            Some(acc) => tape.add(acc, grad_term)?,
            None => grad_term,
        });
    }
    let flow_sum = flow_sum.expect("at least one field");
    let grad_sum = grad_sum.expect("at least one field");
    let scaled = tape.mul_scalar(grad_sum, beta)?;
    let total = tape.add(flow_sum, scaled)?;
    Ok(LossParts {
        total,
        flow_part: tape.value(flow_sum).item()?,
        grad_part: tape.value(grad_sum).item()?,
        value: tape.value(total).item()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::stream_rng;
    use rand::Rng;

    fn leaf(tape: &mut Tape, t: &Tensor) -> TensorId {
        tape.leaf(t.clone()).unwrap()
    }

    fn random_field(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = stream_rng(seed, 5);
        let data: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-3.0..3.0)).collect();
        Tensor::new(vec![2, h, w], data).unwrap()
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let gt = random_field(1, 6, 7);
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = (0..3).map(|_| leaf(&mut tape, &gt)).collect();
        let parts = sequence_loss(&mut tape, &ids, &gt, GAMMA, BETA).unwrap();
        assert_eq!(parts.value, 0.0);
        assert_eq!(parts.flow_part, 0.0);
        assert_eq!(parts.grad_part, 0.0);
    }

    #[test]
    fn three_unit_terms_total_two_point_four_four() {
        // Each of the three fields misses by a constant 1.0 in u, so each
        // flow term is exactly 1.0 and the weights are 0.64, 0.8, 1.0.
        let gt = random_field(2, 5, 5);
        let mut off = gt.clone();
        for v in &mut off.data_mut()[..25] {
            *v += 1.0;
        }
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = (0..3).map(|_| leaf(&mut tape, &off)).collect();
        let parts = sequence_loss(&mut tape, &ids, &gt, 0.8, 0.3).unwrap();
        assert!(
            (parts.flow_part - 2.44).abs() < 1e-12,
            "0.64 + 0.8 + 1.0 = 2.44, got {}",
            parts.flow_part
        );
        assert_eq!(
            parts.grad_part, 0.0,
            "a constant offset has no spatial gradient"
        );
        assert!((parts.value - 2.44).abs() < 1e-12);
    }

    #[test]
    fn each_position_carries_its_own_discount_weight() {
        // Build sequences where exactly one field is wrong and verify the
        // loss equals that field's weight times its plain L1 mean.
        let gt = random_field(3, 4, 4);
        let mut wrong = gt.clone();
        for v in wrong.data_mut() {
            *v += 2.0;
        }
        let m = 4;
        for wrong_pos in 0..m {
            let mut tape = Tape::new();
            let ids: Vec<TensorId> = (0..m)
                .map(|i| leaf(&mut tape, if i == wrong_pos { &wrong } else { &gt }))
                .collect();
            let parts = sequence_loss(&mut tape, &ids, &gt, 0.8, 0.0).unwrap();
            // Both planes are off by 2, so the per-pixel L1 norm is 4.
            let expected = 0.8_f64.powi(m - 1 - wrong_pos) * 4.0;
            assert!(
                (parts.value - expected).abs() < 1e-12,
                "position {wrong_pos}: expected {expected}, got {}",
                parts.value
            );
        }
    }

    #[test]
    fn gradient_term_fires_on_shear_but_not_on_translation() {
        let h = 8;
        let gt = Tensor::zeros(vec![2, h, h]).unwrap();

        let constant = Tensor::full(vec![2, h, h], 1.5).unwrap();
        let mut tape = Tape::new();
        let ids = vec![leaf(&mut tape, &constant)];
        let parts = sequence_loss(&mut tape, &ids, &gt, GAMMA, BETA).unwrap();
        assert_eq!(parts.grad_part, 0.0, "translation has no error gradient");

        let shear = Tensor::new(
            vec![2, h, h],
            (0..2 * h * h)
                .map(|i| (i % h) as f64 * 0.5)
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let ids = vec![leaf(&mut tape, &shear)];
        let parts = sequence_loss(&mut tape, &ids, &gt, GAMMA, BETA).unwrap();
        assert!(
            parts.grad_part > 0.0,
            "a sheared error field must excite the gradient term"
        );
        assert!(
            (parts.value - (parts.flow_part + BETA * parts.grad_part)).abs() < 1e-12,
            "total must be flow + beta * grad"
        );
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let gt = random_field(4, 4, 4);
        let other = random_field(5, 4, 5);
        let mut tape = Tape::new();
        let ids = vec![leaf(&mut tape, &other)];
        assert!(sequence_loss(&mut tape, &ids, &gt, GAMMA, BETA).is_err());
    }

    #[test]
    fn empty_sequences_are_rejected() {
        let gt = random_field(6, 4, 4);
        let mut tape = Tape::new();
        assert!(sequence_loss(&mut tape, &[], &gt, GAMMA, BETA).is_err());
    }
}
