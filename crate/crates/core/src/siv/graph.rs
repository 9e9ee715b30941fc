//! Graph-based context aggregation over encoder features.
//!
//! Feature pixels are softly assigned to K learned nodes (a 1x1
//! convolution followed by a per-pixel softmax), node vectors are the
//! assignment-weighted feature sums normalized to unit length, and a
//! dynamic adjacency `A = V^T V` (cosine similarity of node vectors)
//! biases two attention layers composed with a double residual:
//!
//! ```text
//! out = G2(G1(V) + V) + G1(V) + V
//! ```
//!
//! The node output is reprojected to the pixel grid through the same
//! assignment weights and fused back into the source features through a
//! learnable scalar that starts at zero, leaving the graph branch inert
//! at initialization. Two residual convolution blocks then produce the
//! context features.

use rand_chacha::ChaCha8Rng;

use super::SivConfig;
use crate::error::{Error, Result};
use crate::tensor::composite::{add_conv2d, add_matrix, conv2d_p, conv2d_same, WInit};
use crate::tensor::{ParamStore, Tape, Tensor, TensorId};

/// Intermediate tensors of one graph-encoder pass, kept for inspection.
#[derive(Debug)]
pub struct GraphTrace {
    /// Per-pixel assignment weights, `[h*w, K]`, rows sum to 1.
    pub z: TensorId,
    /// Node features after normalization, `[C, K]`, unit columns.
    pub v: TensorId,
    /// Dynamic adjacency `V^T V`, `[K, K]`.
    pub adjacency: TensorId,
    /// Row-stochastic attention of each layer, `[K, K]`.
    pub attention: Vec<TensorId>,
    /// Node features after the attention stack, `[C, K]`.
    pub v_out: TensorId,
    /// Reprojected node features on the pixel grid, `[1, C, h, w]`.
    pub r_tilde: TensorId,
    /// Fused context features, `[1, C, h, w]`.
    pub f_c: TensorId,
}

pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &SivConfig) -> Result<()> {
    let c = cfg.channels;
    add_conv2d(store, rng, "ge.assign", cfg.nodes, c, 1, 1, WInit::He)?;
    for g in 1..=2 {
        add_matrix(store, rng, &format!("ge.gat{g}.w"), c, c, WInit::He)?;
        add_matrix(store, rng, &format!("ge.gat{g}.a_src"), 1, c, WInit::He)?;
        add_matrix(store, rng, &format!("ge.gat{g}.a_dst"), 1, c, WInit::He)?;
    }
    store.add("ge.alpha", Tensor::zeros(vec![1])?)?;
    for r in 1..=2 {
        add_conv2d(store, rng, &format!("ge.res{r}.c1"), c, c, 3, 3, WInit::He)?;
        add_conv2d(store, rng, &format!("ge.res{r}.c2"), c, c, 1, 1, WInit::He)?;
    }
    Ok(())
}

/// Soft assignment and node construction. Returns `(v, z_pixel, z_node)`
/// where `v` is `[C, K]` with unit columns, `z_pixel` is `[h*w, K]`
/// (row-stochastic), and `z_node` is its `[K, h*w]` transpose.
pub fn project(
    tape: &mut Tape,
    store: &ParamStore,
    r_s: TensorId,
) -> Result<(TensorId, TensorId, TensorId)> {
    let shape = tape.shape(r_s).to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::shape(
            "graph_project",
            format!("expected [1, C, h, w] features, got {shape:?}"),
        ));
    }
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let logits = conv2d_p(tape, store, "ge.assign", r_s, (1, 1), (0, 0))?;
    let k = tape.shape(logits)[1];
    let z4 = tape.softmax(logits, 1)?;
    let z_node = tape.reshape(z4, vec![k, h * w])?;
    let z_pixel = tape.transpose2d(z_node)?;
    let r_mat = tape.reshape(r_s, vec![c, h * w])?;
    let v_pre = tape.matmul(r_mat, z_pixel)?;
    let v = tape.l2_normalize(v_pre, 0, 1e-12)?;
    Ok((v, z_pixel, z_node))
}

/// One attention layer over the fully connected node graph. Logits are
/// `leaky_relu(a_src^T W v_i + a_dst^T W v_j)` plus the adjacency bias;
/// rows are softmax-normalized. Returns `(elu(W V Att^T), attention)`.
pub fn gat_layer(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    v: TensorId,
    adj: TensorId,
) -> Result<(TensorId, TensorId)> {
    let k = tape.shape(v)[1];
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let a_src = tape.param(store, &format!("{prefix}.a_src"))?;
    let a_dst = tape.param(store, &format!("{prefix}.a_dst"))?;
    let wv = tape.matmul(w, v)?;
    let s = tape.matmul(a_src, wv)?;
    let t = tape.matmul(a_dst, wv)?;
    let s_col = tape.transpose2d(s)?;
    let ones_row = tape.constant_fill(vec![1, k], 1.0)?;
    let ones_col = tape.constant_fill(vec![k, 1], 1.0)?;
    let s_mat = tape.matmul(s_col, ones_row)?;
    let t_mat = tape.matmul(ones_col, t)?;
    let pair = tape.add(s_mat, t_mat)?;
    let act = tape.leaky_relu(pair, 0.2)?;
    let logits = tape.add(act, adj)?;
    let att = tape.softmax(logits, 1)?;
    let att_t = tape.transpose2d(att)?;
    let mixed = tape.matmul(wv, att_t)?;
    let out = tape.elu(mixed)?;
    Ok((out, att))
}

fn res_block(tape: &mut Tape, store: &ParamStore, prefix: &str, x: TensorId) -> Result<TensorId> {
    let y = conv2d_same(tape, store, &format!("{prefix}.c1"), x)?;
    let y = tape.relu(y)?;
    let y = conv2d_p(tape, store, &format!("{prefix}.c2"), y, (1, 1), (0, 0))?;
    tape.add(x, y)
}

/// Full graph-encoder pass over source features `[1, C, h, w]`.
pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    _cfg: &SivConfig,
    r_s: TensorId,
) -> Result<GraphTrace> {
    let shape = tape.shape(r_s).to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let (v, z_pixel, z_node) = project(tape, store, r_s)?;
    let v_t = tape.transpose2d(v)?;
    let adjacency = tape.matmul(v_t, v)?;

    let (g1, att1) = gat_layer(tape, store, "ge.gat1", v, adjacency)?;
    let mid = tape.add(g1, v)?;
    let (g2, att2) = gat_layer(tape, store, "ge.gat2", mid, adjacency)?;
    let partial = tape.add(g2, g1)?;
    let v_out = tape.add(partial, v)?;

    let r_mat = tape.matmul(v_out, z_node)?;
    let r_tilde = tape.reshape(r_mat, vec![1, c, h, w])?;
    let alpha = tape.param(store, "ge.alpha")?;
    let scaled = tape.mul_scalar_tensor(r_tilde, alpha)?;
    let fused = tape.add(r_s, scaled)?;
    let f1 = res_block(tape, store, "ge.res1", fused)?;
    let f_c = res_block(tape, store, "ge.res2", f1)?;

    Ok(GraphTrace {
        z: z_pixel,
        v,
        adjacency,
        attention: vec![att1, att2],
        v_out,
        r_tilde,
        f_c,
    })
}
