//! Finite-difference gradient checking.
//!
//! Central differences with a configurable step; comparisons use a relative
//! error with an absolute floor so near-zero gradients do not blow up the
//! ratio. The floor should be chosen per test from the gradient scale in
//! play (for example `1e-4 * max |g|`).

use super::tape::{Tape, TensorId};
use super::Tensor;
use crate::error::Result;

/// Central-difference gradient of `eval` at `x0`, one coordinate at a time.
pub fn fd_grad(x0: &[f64], h: f64, mut eval: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut g = vec![0.0; x0.len()];
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fp = eval(&x)?;
        x[i] = x0[i] - h;
        let fm = eval(&x)?;
        x[i] = x0[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Worst relative disagreement between two gradient vectors, with `floor`
/// guarding the denominator. Returns (max error, index where it occurs).
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths must match");
    let mut worst = 0.0;
    let mut at = 0;
    for i in 0..analytic.len() {
        let denom = analytic[i].abs().max(numeric[i].abs()).max(floor);
        let rel = (analytic[i] - numeric[i]).abs() / denom;
        if rel > worst {
            worst = rel;
            at = i;
        }
    }
    (worst, at)
}

/// Checks gradients of a scalar-valued tape program with respect to one
/// tensor input. `build` must construct the program from the provided leaf
/// and return the scalar output node. Returns the worst relative error.
pub fn check_input_grad(
    shape: &[usize],
    x0: &[f64],
    h: f64,
    floor: f64,
    build: impl Fn(&mut Tape, TensorId) -> Result<TensorId>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf_grad(Tensor::new(shape.to_vec(), x0.to_vec())?)?;
    let out = build(&mut tape, x)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(x)
        .expect("input participates in the output, so it must have a gradient")
        .to_vec();

    let numeric = fd_grad(x0, h, |xs| {
        let mut t = Tape::new();
        let xi = t.leaf(Tensor::new(shape.to_vec(), xs.to_vec())?)?;
        let o = build(&mut t, xi)?;
        t.value(o).item()
    })?;
    let (worst, _) = max_rel_error(&analytic, &numeric, floor);
    Ok(worst)
}
