//! Dynamic computation tape.
//!
//! Every differentiable operation appends a node holding its output tensor
//! and enough context to run the reverse pass. Nodes only reference earlier
//! nodes, so [`Tape::backward`] is a single reverse sweep. Any operation fed
//! finite inputs must produce finite outputs; the tape checks this after
//! every op and reports the offending operation otherwise.

use super::conv;
use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};
use rayon::prelude::*;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    /// Tensor scaled by a 1-element tensor (gradients flow to both).
    MulScalarTensor(TensorId, TensorId),
    BiasAdd(TensorId, TensorId),
    Relu(TensorId),
    LeakyRelu(TensorId, f64),
    Elu(TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    Abs(TensorId),
    Matmul(TensorId, TensorId),
    Transpose2d(TensorId),
    Softmax {
        x: TensorId,
        axis: usize,
    },
    L2Normalize {
        x: TensorId,
        axis: usize,
        eps: f64,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    Conv3d {
        x: TensorId,
        w: TensorId,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    },
    MaxPool3d {
        x: TensorId,
        argmax: Vec<usize>,
    },
    BilinearResize {
        x: TensorId,
    },
    Concat {
        xs: Vec<TensorId>,
        axis: usize,
    },
    Reshape(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    MeanAxis {
        x: TensorId,
        axis: usize,
    },
    DiffX(TensorId),
    DiffY(TensorId),
    LocalCorr {
        a: TensorId,
        b: TensorId,
        radius: usize,
    },
    WarpBilinear {
        src: TensorId,
        flow: TensorId,
    },
    ConvexUpsample {
        flow: TensorId,
        mask: TensorId,
        factor: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of computation.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    /// (node, parameter index in the store) for every interned parameter.
    param_nodes: Vec<(TensorId, usize)>,
    interned: HashMap<usize, TensorId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_nodes: Vec::new(),
            interned: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last [`Tape::backward`] target with respect to `id`.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, opname: &'static str) -> Result<TensorId> {
        if !value.is_finite() {
            return Err(Error::numeric(format!(
                "{opname} produced a non-finite value (shape {:?})",
                value.shape()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Non-differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<TensorId> {
        self.push(value, Op::Leaf, false, "leaf")
    }

    /// Differentiable leaf not tied to a parameter store (gradient checks,
    /// probing inputs).
    pub fn leaf_grad(&mut self, mut value: Tensor) -> Result<TensorId> {
        value.requires_grad = true;
        self.push(value, Op::Leaf, true, "leaf")
    }

    pub fn constant_fill(&mut self, shape: Vec<usize>, v: f64) -> Result<TensorId> {
        let t = Tensor::full(shape, v)?;
        self.leaf(t)
    }

    /// Interns a named parameter from the store. Repeated requests return the
    /// same node, so shared weights accumulate gradients from every use.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<TensorId> {
        let idx = store.index_of(name).ok_or_else(|| {
            Error::invalid(format!("unknown parameter {name:?}"))
        })?;
        if let Some(&id) = self.interned.get(&idx) {
            return Ok(id);
        }
        let mut value = store.get_by_index(idx).tensor.clone();
        value.requires_grad = true;
        value.grad = None;
        let id = self.push(value, Op::Leaf, true, "param")?;
        self.interned.insert(idx, id);
        self.param_nodes.push((id, idx));
        Ok(id)
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        a: TensorId,
        b: TensorId,
        opname: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                opname,
                format!("operand shapes {:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(t, op, needs, opname)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(
        &mut self,
        x: TensorId,
        opname: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let vx = &self.nodes[x.0].value;
        let data: Vec<f64> = vx.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let needs = self.needs(x);
        self.push(t, op, needs, opname)
    }

    pub fn add_scalar(&mut self, x: TensorId, k: f64) -> Result<TensorId> {
        self.unary(x, "add_scalar", |v| v + k, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: TensorId, k: f64) -> Result<TensorId> {
        self.unary(x, "mul_scalar", |v| v * k, Op::MulScalar(x, k))
    }

    /// `x * s` with `s` a 1-element tensor; gradients reach both operands.
    pub fn mul_scalar_tensor(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let vs = &self.nodes[s.0].value;
        if vs.numel() != 1 {
            return Err(Error::shape(
                "mul_scalar_tensor",
                format!("scale must have 1 element, shape is {:?}", vs.shape()),
            ));
        }
        let k = vs.data()[0];
        let vx = &self.nodes[x.0].value;
        let data: Vec<f64> = vx.data().iter().map(|&v| v * k).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(s);
        self.push(t, Op::MulScalarTensor(x, s), needs, "mul_scalar_tensor")
    }

    /// Per-channel bias over axis 1 of an N,C,... tensor.
    pub fn bias_add(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        if vx.rank() < 2 || vb.rank() != 1 || vb.shape()[0] != vx.shape()[1] {
            return Err(Error::shape(
                "bias_add",
                format!(
                    "expected x of rank >= 2 with channels == bias length, got x {:?}, bias {:?}",
                    vx.shape(),
                    vb.shape()
                ),
            ));
        }
        let channels = vx.shape()[1];
        let inner: usize = vx.shape()[2..].iter().product();
        let n = vx.shape()[0];
        let mut data = vx.data().to_vec();
        for nn in 0..n {
            for c in 0..channels {
                let base = (nn * channels + c) * inner;
                let bv = vb.data()[c];
                for i in 0..inner {
                    data[base + i] += bv;
                }
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(b);
        self.push(t, Op::BiasAdd(x, b), needs, "bias_add")
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(x, "relu", |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: f64) -> Result<TensorId> {
        self.unary(
            x,
            "leaky_relu",
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn elu(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(
            x,
            "elu",
            |v| if v > 0.0 { v } else { v.exp() - 1.0 },
            Op::Elu(x),
        )
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(x, "sigmoid", |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh_op(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(x, "tanh", f64::tanh, Op::Tanh(x))
    }

    pub fn abs(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(x, "abs", f64::abs, Op::Abs(x))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("incompatible shapes {:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let n = vb.shape()[1];
        let (da, db) = (va.data(), vb.data());
        let mut out = vec![0.0f64; m * n];
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            for l in 0..k {
                let av = da[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[l * n..(l + 1) * n];
                for j in 0..n {
                    row[j] += av * brow[j];
                }
            }
        });
        let t = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::Matmul(a, b), needs, "matmul")
    }

    pub fn transpose2d(&mut self, x: TensorId) -> Result<TensorId> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 2 {
            return Err(Error::shape(
                "transpose2d",
                format!("expected rank 2, got {:?}", vx.shape()),
            ));
        }
        let (m, n) = (vx.shape()[0], vx.shape()[1]);
        let d = vx.data();
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        let needs = self.needs(x);
        self.push(t, Op::Transpose2d(x), needs, "transpose2d")
    }

    // ── Normalizations ──────────────────────────────────────────────────

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let vx = &self.nodes[x.0].value;
        if axis >= vx.rank() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", vx.shape()),
            ));
        }
        let (outer, len, inner) = lane_dims(vx.shape(), axis);
        let d = vx.data();
        let mut out = vec![0.0f64; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..len {
                    mx = mx.max(d[idx(k)]);
                }
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (d[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[idx(k)] /= sum;
                }
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push(t, Op::Softmax { x, axis }, needs, "softmax")
    }

    /// Unit L2 norm along `axis`; lanes with norm below `eps` become zero.
    pub fn l2_normalize(&mut self, x: TensorId, axis: usize, eps: f64) -> Result<TensorId> {
        let vx = &self.nodes[x.0].value;
        if axis >= vx.rank() {
            return Err(Error::shape(
                "l2_normalize",
                format!("axis {axis} out of range for shape {:?}", vx.shape()),
            ));
        }
        let (outer, len, inner) = lane_dims(vx.shape(), axis);
        let d = vx.data();
        let mut out = vec![0.0f64; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut sq = 0.0;
                for k in 0..len {
                    sq += d[idx(k)] * d[idx(k)];
                }
                let n = sq.sqrt();
                if n >= eps {
                    for k in 0..len {
                        out[idx(k)] = d[idx(k)] / n;
                    }
                }
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push(t, Op::L2Normalize { x, axis, eps }, needs, "l2_normalize")
    }

    // ── Convolutions and resampling ─────────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<TensorId> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if vx.rank() != 4 || vw.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected NCHW x OIKK, got {:?} and {:?}", vx.shape(), vw.shape()),
            ));
        }
        let xs = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let ws = [vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]];
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} != weight in-channels {} (axis 1)", xs[1], ws[1]),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("conv2d", "stride must be nonzero".to_string()));
        }
        if xs[2] + 2 * pad.0 < ws[2] || xs[3] + 2 * pad.1 < ws[3] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {}x{} exceeds padded input {}x{}",
                    ws[2],
                    ws[3],
                    xs[2] + 2 * pad.0,
                    xs[3] + 2 * pad.1
                ),
            ));
        }
        let data = conv::conv2d_forward(vx.data(), xs, vw.data(), ws, stride, pad);
        let os = conv::conv2d_out_shape(xs, ws, stride, pad);
        let t = Tensor::new(os.to_vec(), data)?;
        let needs = self.needs(x) || self.needs(w);
        self.push(t, Op::Conv2d { x, w, stride, pad }, needs, "conv2d")
    }

    pub fn conv3d(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Result<TensorId> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if vx.rank() != 5 || vw.rank() != 5 {
            return Err(Error::shape(
                "conv3d",
                format!("expected NCDHW x OIKKK, got {:?} and {:?}", vx.shape(), vw.shape()),
            ));
        }
        let xs = [
            vx.shape()[0],
            vx.shape()[1],
            vx.shape()[2],
            vx.shape()[3],
            vx.shape()[4],
        ];
        let ws = [
            vw.shape()[0],
            vw.shape()[1],
            vw.shape()[2],
            vw.shape()[3],
            vw.shape()[4],
        ];
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv3d",
                format!("input channels {} != weight in-channels {} (axis 1)", xs[1], ws[1]),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 || stride.2 == 0 {
            return Err(Error::shape("conv3d", "stride must be nonzero".to_string()));
        }
        if xs[2] + 2 * pad.0 < ws[2] || xs[3] + 2 * pad.1 < ws[3] || xs[4] + 2 * pad.2 < ws[4] {
            return Err(Error::shape(
                "conv3d",
                format!(
                    "kernel {}x{}x{} exceeds padded input {}x{}x{}",
                    ws[2],
                    ws[3],
                    ws[4],
                    xs[2] + 2 * pad.0,
                    xs[3] + 2 * pad.1,
                    xs[4] + 2 * pad.2
                ),
            ));
        }
        let data = conv::conv3d_forward(vx.data(), xs, vw.data(), ws, stride, pad);
        let os = conv::conv3d_out_shape(xs, ws, stride, pad);
        let t = Tensor::new(os.to_vec(), data)?;
        let needs = self.needs(x) || self.needs(w);
        self.push(t, Op::Conv3d { x, w, stride, pad }, needs, "conv3d")
    }

    /// Max pooling over the trailing D,H,W axes of an NCDHW tensor. Ties pick
    /// the first element in (d, h, w) scan order.
    pub fn maxpool3d(
        &mut self,
        x: TensorId,
        window: (usize, usize, usize),
        stride: (usize, usize, usize),
    ) -> Result<TensorId> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 5 {
            return Err(Error::shape(
                "maxpool3d",
                format!("expected NCDHW, got {:?}", vx.shape()),
            ));
        }
        if window.0 == 0 || window.1 == 0 || window.2 == 0 {
            return Err(Error::shape("maxpool3d", "window must be nonzero".to_string()));
        }
        if stride.0 == 0 || stride.1 == 0 || stride.2 == 0 {
            return Err(Error::shape("maxpool3d", "stride must be nonzero".to_string()));
        }
        let xs = [
            vx.shape()[0],
            vx.shape()[1],
            vx.shape()[2],
            vx.shape()[3],
            vx.shape()[4],
        ];
        if window.0 > xs[2] || window.1 > xs[3] || window.2 > xs[4] {
            return Err(Error::shape(
                "maxpool3d",
                format!("window {window:?} exceeds input {:?}", &xs[2..]),
            ));
        }
        let (data, argmax) = conv::maxpool3d_forward(vx.data(), xs, window, stride);
        let os = conv::maxpool3d_out_shape(xs, window, stride);
        let t = Tensor::new(os.to_vec(), data)?;
        let needs = self.needs(x);
        self.push(t, Op::MaxPool3d { x, argmax }, needs, "maxpool3d")
    }

    pub fn bilinear_resize(&mut self, x: TensorId, out_h: usize, out_w: usize) -> Result<TensorId> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 4 {
            return Err(Error::shape(
                "bilinear_resize",
                format!("expected NCHW, got {:?}", vx.shape()),
            ));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize", "zero output size".to_string()));
        }
        let xs = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let data = conv::bilinear_resize_forward(vx.data(), xs, out_h, out_w);
        let t = Tensor::new(vec![xs[0], xs[1], out_h, out_w], data)?;
        let needs = self.needs(x);
        self.push(t, Op::BilinearResize { x }, needs, "bilinear_resize")
    }

    // ── Structure ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let vx = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != vx.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", vx.shape(), shape),
            ));
        }
        let t = Tensor::new(shape, vx.data().to_vec())?;
        let needs = self.needs(x);
        self.push(t, Op::Reshape(x), needs, "reshape")
    }

    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::shape("concat", "no operands".to_string()));
        }
        let first = self.nodes[xs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for shape {first:?}"),
            ));
        }
        let mut total_len = 0usize;
        for &x in xs {
            let s = self.nodes[x.0].value.shape();
            if s.len() != first.len() {
                return Err(Error::shape(
                    "concat",
                    format!("rank mismatch: {:?} vs {:?}", first, s),
                ));
            }
            for (ax, (&a, &b)) in first.iter().zip(s.iter()).enumerate() {
                if ax != axis && a != b {
                    return Err(Error::shape(
                        "concat",
                        format!("extent mismatch on axis {ax}: {:?} vs {:?}", first, s),
                    ));
                }
            }
            total_len += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_len;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let out_block = total_len * inner;
        let mut data = vec![0.0f64; outer * out_block];
        let mut off = 0usize;
        for &x in xs {
            let v = &self.nodes[x.0].value;
            let len = v.shape()[axis];
            let block = len * inner;
            for o in 0..outer {
                data[o * out_block + off..o * out_block + off + block]
                    .copy_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
            off += block;
        }
        let t = Tensor::new(out_shape, data)?;
        let needs = xs.iter().any(|&x| self.needs(x));
        self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            needs,
            "concat",
        )
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs, "sum_all")
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), needs, "mean_all")
    }

    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let vx = &self.nodes[x.0].value;
        if axis >= vx.rank() || vx.rank() == 1 {
            return Err(Error::shape(
                "mean_axis",
                format!("axis {axis} invalid for shape {:?}", vx.shape()),
            ));
        }
        let (outer, len, inner) = lane_dims(vx.shape(), axis);
        let d = vx.data();
        let mut out = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let scale = 1.0 / len as f64;
        for v in &mut out {
            *v *= scale;
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let needs = self.needs(x);
        self.push(t, Op::MeanAxis { x, axis }, needs, "mean_axis")
    }

    // ── Spatial finite differences (forward, replicate boundary) ───────

    /// Forward difference along the last axis; the final column is zero
    /// (replicate boundary).
    pub fn diff_x(&mut self, x: TensorId) -> Result<TensorId> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() < 2 {
            return Err(Error::shape(
                "diff_x",
                format!("expected rank >= 2, got {:?}", vx.shape()),
            ));
        }
        let w = *vx.shape().last().unwrap();
        let rows = vx.numel() / w;
        let d = vx.data();
        let mut out = vec![0.0f64; d.len()];
        for r in 0..rows {
            let base = r * w;
            for j in 0..w - 1 {
                out[base + j] = d[base + j + 1] - d[base + j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push(t, Op::DiffX(x), needs, "diff_x")
    }

    /// Forward difference along the second-to-last axis; the final row is
    /// zero (replicate boundary).
    pub fn diff_y(&mut self, x: TensorId) -> Result<TensorId> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() < 2 {
            return Err(Error::shape(
                "diff_y",
                format!("expected rank >= 2, got {:?}", vx.shape()),
            ));
        }
        let w = *vx.shape().last().unwrap();
        let h = vx.shape()[vx.rank() - 2];
        let planes = vx.numel() / (h * w);
        let d = vx.data();
        let mut out = vec![0.0f64; d.len()];
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..h - 1 {
                for j in 0..w {
                    out[base + y * w + j] = d[base + (y + 1) * w + j] - d[base + y * w + j];
                }
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push(t, Op::DiffY(x), needs, "diff_y")
    }

    // ── Flow-estimation primitives ──────────────────────────────────────

    /// Local correlation volume between two C,H,W feature maps: channel
    /// (2r+1)^2 entries hold `sum_c a[c,y,x] * b[c,y+dy,x+dx] / sqrt(C)`,
    /// zero where the offset leaves the grid.
    pub fn local_corr(&mut self, a: TensorId, b: TensorId, radius: usize) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 3 || vb.rank() != 3 || va.shape() != vb.shape() {
            return Err(Error::shape(
                "local_corr",
                format!("expected matching C,H,W maps, got {:?} and {:?}", va.shape(), vb.shape()),
            ));
        }
        let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let side = 2 * radius + 1;
        let k2 = side * side;
        let scale = 1.0 / (c as f64).sqrt();
        let (da, db) = (va.data(), vb.data());
        let mut out = vec![0.0f64; k2 * h * w];
        out.par_chunks_mut(h * w).enumerate().for_each(|(k, plane)| {
            let dy = (k / side) as isize - radius as isize;
            let dx = (k % side) as isize - radius as isize;
            for y in 0..h {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                let yy = yy as usize;
                for x in 0..w {
                    let xx = x as isize + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let xx = xx as usize;
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += da[(ch * h + y) * w + x] * db[(ch * h + yy) * w + xx];
                    }
                    plane[y * w + x] = acc * scale;
                }
            }
        });
        let t = Tensor::new(vec![k2, h, w], out)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::LocalCorr { a, b, radius }, needs, "local_corr")
    }

    /// Samples `src` (C,H,W) at `(x + u, y + v)` with bilinear weights and
    /// border clamp; `flow` is (2,H,W) with u first.
    pub fn warp_bilinear(&mut self, src: TensorId, flow: TensorId) -> Result<TensorId> {
        let (vs, vf) = (&self.nodes[src.0].value, &self.nodes[flow.0].value);
        if vs.rank() != 3 || vf.rank() != 3 || vf.shape()[0] != 2 {
            return Err(Error::shape(
                "warp_bilinear",
                format!("expected C,H,W source and 2,H,W flow, got {:?} and {:?}", vs.shape(), vf.shape()),
            ));
        }
        if vs.shape()[1] != vf.shape()[1] || vs.shape()[2] != vf.shape()[2] {
            return Err(Error::shape(
                "warp_bilinear",
                format!("grid mismatch: source {:?} vs flow {:?}", vs.shape(), vf.shape()),
            ));
        }
        let (c, h, w) = (vs.shape()[0], vs.shape()[1], vs.shape()[2]);
        let (ds, df) = (vs.data(), vf.data());
        let mut out = vec![0.0f64; c * h * w];
        for y in 0..h {
            for x in 0..w {
                let u = df[y * w + x];
                let v = df[h * w + y * w + x];
                let sx = (x as f64 + u).clamp(0.0, (w - 1) as f64);
                let sy = (y as f64 + v).clamp(0.0, (h - 1) as f64);
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fx = sx - x0 as f64;
                let fy = sy - y0 as f64;
                for ch in 0..c {
                    let p = ch * h * w;
                    out[p + y * w + x] = ds[p + y0 * w + x0] * (1.0 - fx) * (1.0 - fy)
                        + ds[p + y0 * w + x1] * fx * (1.0 - fy)
                        + ds[p + y1 * w + x0] * (1.0 - fx) * fy
                        + ds[p + y1 * w + x1] * fx * fy;
                }
            }
        }
        let t = Tensor::new(vec![c, h, w], out)?;
        let needs = self.needs(src) || self.needs(flow);
        self.push(t, Op::WarpBilinear { src, flow }, needs, "warp_bilinear")
    }

    /// Upsamples a (2,h,w) flow by `factor` using per-output convex
    /// combinations of the 3x3 coarse neighborhood. `mask` is
    /// (9*factor^2, h, w), already normalized so each 9-group sums to 1;
    /// channel `n*factor^2 + s` weighs neighbor `n` for sub-cell `s`.
    /// Values are combined, not rescaled: unit conversion between scales is
    /// the caller's concern.
    pub fn convex_upsample(
        &mut self,
        flow: TensorId,
        mask: TensorId,
        factor: usize,
    ) -> Result<TensorId> {
        let (vf, vm) = (&self.nodes[flow.0].value, &self.nodes[mask.0].value);
        if vf.rank() != 3 || vf.shape()[0] != 2 {
            return Err(Error::shape(
                "convex_upsample",
                format!("expected 2,h,w flow, got {:?}", vf.shape()),
            ));
        }
        let (h, w) = (vf.shape()[1], vf.shape()[2]);
        let f2 = factor * factor;
        if vm.rank() != 3 || vm.shape()[0] != 9 * f2 || vm.shape()[1] != h || vm.shape()[2] != w {
            return Err(Error::shape(
                "convex_upsample",
                format!(
                    "expected mask {:?}, got {:?}",
                    [9 * f2, h, w],
                    vm.shape()
                ),
            ));
        }
        let (df, dm) = (vf.data(), vm.data());
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0f64; 2 * oh * ow];
        for ch in 0..2 {
            for oy in 0..oh {
                let y = oy / factor;
                let sy = oy % factor;
                for ox in 0..ow {
                    let x = ox / factor;
                    let sx = ox % factor;
                    let s = sy * factor + sx;
                    let mut acc = 0.0;
                    for n in 0..9 {
                        let ny = (y as isize + n as isize / 3 - 1).clamp(0, h as isize - 1) as usize;
                        let nx = (x as isize + n as isize % 3 - 1).clamp(0, w as isize - 1) as usize;
                        acc += dm[((n * f2 + s) * h + y) * w + x] * df[(ch * h + ny) * w + nx];
                    }
                    out[(ch * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let t = Tensor::new(vec![2, oh, ow], out)?;
        let needs = self.needs(flow) || self.needs(mask);
        self.push(
            t,
            Op::ConvexUpsample {
                flow,
                mask,
                factor,
            },
            needs,
            "convex_upsample",
        )
    }

    // ── Reverse pass ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients for every node reachable
    /// from the loss are stored on the tape; use
    /// [`Tape::accumulate_param_grads`] to fold parameter gradients into a
    /// store.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let n = self.nodes.len();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be scalar, shape is {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let (gparents, gme) = grads.split_at_mut(i);
            let g: &[f64] = gme[0].as_deref().expect("checked above");
            self.propagate(i, g, gparents)?;
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the tape's parameter gradients into the store (accumulating
    /// across repeated backward passes until `zero_grad`).
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for &(id, idx) in &self.param_nodes {
            if let Some(g) = self.grads.get(id.0).and_then(|g| g.as_ref()) {
                store.accumulate_grad(idx, g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |id: TensorId| self.nodes[id.0].value.data();
        let shape = |id: TensorId| self.nodes[id.0].value.shape();
        let needs = |id: TensorId| self.nodes[id.0].needs_grad;
        macro_rules! acc {
            ($id:expr) => {
                grads[$id.0].get_or_insert_with(|| vec![0.0; self.nodes[$id.0].value.numel()])
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    let da = acc!(a);
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if needs(*b) {
                    let db = acc!(b);
                    for (d, &gi) in db.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    let da = acc!(a);
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if needs(*b) {
                    let db = acc!(b);
                    for (d, &gi) in db.iter_mut().zip(g) {
                        *d -= gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let vb = val(*b);
                    let da = acc!(a);
                    for k in 0..g.len() {
                        da[k] += g[k] * vb[k];
                    }
                }
                if needs(*b) {
                    let va = val(*a);
                    let db = acc!(b);
                    for k in 0..g.len() {
                        db[k] += g[k] * va[k];
                    }
                }
            }
            Op::AddScalar(x) => {
                if needs(*x) {
                    let dx = acc!(x);
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::MulScalar(x, k) => {
                if needs(*x) {
                    let kk = *k;
                    let dx = acc!(x);
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * kk;
                    }
                }
            }
            Op::MulScalarTensor(x, s) => {
                let sv = val(*s)[0];
                if needs(*x) {
                    let dx = acc!(x);
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * sv;
                    }
                }
                if needs(*s) {
                    let vx = val(*x);
                    let mut dot = 0.0;
                    for k in 0..g.len() {
                        dot += g[k] * vx[k];
                    }
                    acc!(s)[0] += dot;
                }
            }
            Op::BiasAdd(x, b) => {
                if needs(*x) {
                    let dx = acc!(x);
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if needs(*b) {
                    let xs = shape(*x);
                    let channels = xs[1];
                    let inner: usize = xs[2..].iter().product();
                    let n = xs[0];
                    let db = acc!(b);
                    for nn in 0..n {
                        for (c, dbc) in db.iter_mut().enumerate() {
                            let base = (nn * channels + c) * inner;
                            let s: f64 = g[base..base + inner].iter().sum();
                            *dbc += s;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let vx = val(*x);
                    let dx = acc!(x);
                    for k in 0..g.len() {
                        if vx[k] > 0.0 {
                            dx[k] += g[k];
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                if needs(*x) {
                    let s = *slope;
                    let vx = val(*x);
                    let dx = acc!(x);
                    for k in 0..g.len() {
                        dx[k] += g[k] * if vx[k] > 0.0 { 1.0 } else { s };
                    }
                }
            }
            Op::Elu(x) => {
                if needs(*x) {
                    let vx = val(*x);
                    let dx = acc!(x);
                    for k in 0..g.len() {
                        dx[k] += g[k] * if vx[k] > 0.0 { 1.0 } else { vx[k].exp() };
                    }
                }
            }
            Op::Sigmoid(x) => {
                if needs(*x) {
                    let y = node.value.data();
                    let dx = acc!(x);
                    for k in 0..g.len() {
                        dx[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
            }
            Op::Tanh(x) => {
                if needs(*x) {
                    let y = node.value.data();
                    let dx = acc!(x);
                    for k in 0..g.len() {
                        dx[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                }
            }
            Op::Abs(x) => {
                if needs(*x) {
                    let vx = val(*x);
                    let dx = acc!(x);
                    for k in 0..g.len() {
                        // Subgradient 0 at the kink.
                        dx[k] += g[k] * if vx[k] > 0.0 { 1.0 } else if vx[k] < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, kdim) = (shape(*a)[0], shape(*a)[1]);
                let ncol = shape(*b)[1];
                if needs(*a) {
                    let vb = val(*b);
                    let da = acc!(a);
                    for i2 in 0..m {
                        for l in 0..kdim {
                            let mut s = 0.0;
                            for j in 0..ncol {
                                s += g[i2 * ncol + j] * vb[l * ncol + j];
                            }
                            da[i2 * kdim + l] += s;
                        }
                    }
                }
                if needs(*b) {
                    let va = val(*a);
                    let db = acc!(b);
                    for l in 0..kdim {
                        for j in 0..ncol {
                            let mut s = 0.0;
                            for i2 in 0..m {
                                s += va[i2 * kdim + l] * g[i2 * ncol + j];
                            }
                            db[l * ncol + j] += s;
                        }
                    }
                }
            }
            Op::Transpose2d(x) => {
                if needs(*x) {
                    let (m, n2) = (shape(*x)[0], shape(*x)[1]);
                    let dx = acc!(x);
                    for i2 in 0..m {
                        for j in 0..n2 {
                            dx[i2 * n2 + j] += g[j * m + i2];
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if needs(*x) {
                    let y = node.value.data();
                    let (outer, len, inner) = lane_dims(node.value.shape(), *axis);
                    let dx = acc!(x);
                    for o in 0..outer {
                        for i2 in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i2;
                            let mut dot = 0.0;
                            for k in 0..len {
                                dot += g[idx(k)] * y[idx(k)];
                            }
                            for k in 0..len {
                                dx[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { x, axis, eps } => {
                if needs(*x) {
                    let vx = val(*x);
                    let (outer, len, inner) = lane_dims(node.value.shape(), *axis);
                    let dx = acc!(x);
                    for o in 0..outer {
                        for i2 in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i2;
                            let mut sq = 0.0;
                            for k in 0..len {
                                sq += vx[idx(k)] * vx[idx(k)];
                            }
                            let nrm = sq.sqrt();
                            if nrm < *eps {
                                continue;
                            }
                            let mut dot = 0.0;
                            for k in 0..len {
                                dot += vx[idx(k)] * g[idx(k)];
                            }
                            let n3 = nrm * nrm * nrm;
                            for k in 0..len {
                                dx[idx(k)] += g[idx(k)] / nrm - vx[idx(k)] * dot / n3;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xs = [shape(*x)[0], shape(*x)[1], shape(*x)[2], shape(*x)[3]];
                let ws = [shape(*w)[0], shape(*w)[1], shape(*w)[2], shape(*w)[3]];
                if needs(*x) {
                    let vw = val(*w);
                    let dx = acc!(x);
                    conv::conv2d_backward_x(g, xs, vw, ws, *stride, *pad, dx);
                }
                if needs(*w) {
                    let vx = val(*x);
                    let dw = acc!(w);
                    conv::conv2d_backward_w(g, vx, xs, ws, *stride, *pad, dw);
                }
            }
            Op::Conv3d { x, w, stride, pad } => {
                let xs = [
                    shape(*x)[0],
                    shape(*x)[1],
                    shape(*x)[2],
                    shape(*x)[3],
                    shape(*x)[4],
                ];
                let ws = [
                    shape(*w)[0],
                    shape(*w)[1],
                    shape(*w)[2],
                    shape(*w)[3],
                    shape(*w)[4],
                ];
                if needs(*x) {
                    let vw = val(*w);
                    let dx = acc!(x);
                    conv::conv3d_backward_x(g, xs, vw, ws, *stride, *pad, dx);
                }
                if needs(*w) {
                    let vx = val(*x);
                    let dw = acc!(w);
                    conv::conv3d_backward_w(g, vx, xs, ws, *stride, *pad, dw);
                }
            }
            Op::MaxPool3d { x, argmax } => {
                if needs(*x) {
                    let dx = acc!(x);
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g[o];
                    }
                }
            }
            Op::BilinearResize { x } => {
                if needs(*x) {
                    let xs = [shape(*x)[0], shape(*x)[1], shape(*x)[2], shape(*x)[3]];
                    let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                    let dx = acc!(x);
                    conv::bilinear_resize_backward(g, xs, oh, ow, dx);
                }
            }
            Op::Concat { xs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_block = out_shape[*axis] * inner;
                let mut off = 0usize;
                for &x in xs {
                    let len = shape(x)[*axis];
                    let block = len * inner;
                    if needs(x) {
                        let dx = acc!(x);
                        for o in 0..outer {
                            let src = &g[o * out_block + off..o * out_block + off + block];
                            let dst = &mut dx[o * block..(o + 1) * block];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    off += block;
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    let dx = acc!(x);
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::SumAll(x) => {
                if needs(*x) {
                    let g0 = g[0];
                    let dx = acc!(x);
                    for d in dx.iter_mut() {
                        *d += g0;
                    }
                }
            }
            Op::MeanAll(x) => {
                if needs(*x) {
                    let n2 = self.nodes[x.0].value.numel();
                    let g0 = g[0] / n2 as f64;
                    let dx = acc!(x);
                    for d in dx.iter_mut() {
                        *d += g0;
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                if needs(*x) {
                    let (outer, len, inner) = lane_dims(shape(*x), *axis);
                    let scale = 1.0 / len as f64;
                    let dx = acc!(x);
                    for o in 0..outer {
                        for k in 0..len {
                            let base = (o * len + k) * inner;
                            for i2 in 0..inner {
                                dx[base + i2] += g[o * inner + i2] * scale;
                            }
                        }
                    }
                }
            }
            Op::DiffX(x) => {
                if needs(*x) {
                    let w = *shape(*x).last().unwrap();
                    let rows = node.value.numel() / w;
                    let dx = acc!(x);
                    for r in 0..rows {
                        let base = r * w;
                        for j in 0..w - 1 {
                            let gi = g[base + j];
                            dx[base + j + 1] += gi;
                            dx[base + j] -= gi;
                        }
                    }
                }
            }
            Op::DiffY(x) => {
                if needs(*x) {
                    let s = shape(*x);
                    let w = *s.last().unwrap();
                    let h = s[s.len() - 2];
                    let planes = node.value.numel() / (h * w);
                    let dx = acc!(x);
                    for p in 0..planes {
                        let base = p * h * w;
                        for y in 0..h - 1 {
                            for j in 0..w {
                                let gi = g[base + y * w + j];
                                dx[base + (y + 1) * w + j] += gi;
                                dx[base + y * w + j] -= gi;
                            }
                        }
                    }
                }
            }
            Op::LocalCorr { a, b, radius } => {
                let (c, h, w) = (shape(*a)[0], shape(*a)[1], shape(*a)[2]);
                let side = 2 * radius + 1;
                let scale = 1.0 / (c as f64).sqrt();
                let k2 = side * side;
                if needs(*a) {
                    let vb = val(*b);
                    let da = acc!(a);
                    da.par_chunks_mut(h * w).enumerate().for_each(|(ch, plane)| {
                        for k in 0..k2 {
                            let dy = (k / side) as isize - *radius as isize;
                            let dx2 = (k % side) as isize - *radius as isize;
                            for y in 0..h {
                                let yy = y as isize + dy;
                                if yy < 0 || yy >= h as isize {
                                    continue;
                                }
                                for x in 0..w {
                                    let xx = x as isize + dx2;
                                    if xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    plane[y * w + x] += g[(k * h + y) * w + x]
                                        * vb[(ch * h + yy as usize) * w + xx as usize]
                                        * scale;
                                }
                            }
                        }
                    });
                }
                if needs(*b) {
                    let va = val(*a);
                    let db = acc!(b);
                    db.par_chunks_mut(h * w).enumerate().for_each(|(ch, plane)| {
                        for k in 0..k2 {
                            let dy = (k / side) as isize - *radius as isize;
                            let dx2 = (k % side) as isize - *radius as isize;
                            for y in 0..h {
                                let yy = y as isize + dy;
                                if yy < 0 || yy >= h as isize {
                                    continue;
                                }
                                for x in 0..w {
                                    let xx = x as isize + dx2;
                                    if xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    plane[(yy as usize) * w + xx as usize] += g
                                        [(k * h + y) * w + x]
                                        * va[(ch * h + y) * w + x]
                                        * scale;
                                }
                            }
                        }
                    });
                }
            }
            Op::WarpBilinear { src, flow } => {
                let (c, h, w) = (shape(*src)[0], shape(*src)[1], shape(*src)[2]);
                let ds = val(*src);
                let df = val(*flow);
                let sample_geom = |y: usize, x: usize| {
                    let u = df[y * w + x];
                    let v = df[h * w + y * w + x];
                    let sx_raw = x as f64 + u;
                    let sy_raw = y as f64 + v;
                    let sx = sx_raw.clamp(0.0, (w - 1) as f64);
                    let sy = sy_raw.clamp(0.0, (h - 1) as f64);
                    let x0 = sx.floor() as usize;
                    let y0 = sy.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let y1 = (y0 + 1).min(h - 1);
                    (
                        x0,
                        y0,
                        x1,
                        y1,
                        sx - x0 as f64,
                        sy - y0 as f64,
                        sx_raw > 0.0 && sx_raw < (w - 1) as f64,
                        sy_raw > 0.0 && sy_raw < (h - 1) as f64,
                    )
                };
                if needs(*src) {
                    let dsrc = acc!(src);
                    dsrc.par_chunks_mut(h * w).enumerate().for_each(|(ch, plane)| {
                        for y in 0..h {
                            for x in 0..w {
                                let (x0, y0, x1, y1, fx, fy, _, _) = sample_geom(y, x);
                                let gi = g[(ch * h + y) * w + x];
                                plane[y0 * w + x0] += gi * (1.0 - fx) * (1.0 - fy);
                                plane[y0 * w + x1] += gi * fx * (1.0 - fy);
                                plane[y1 * w + x0] += gi * (1.0 - fx) * fy;
                                plane[y1 * w + x1] += gi * fx * fy;
                            }
                        }
                    });
                }
                if needs(*flow) {
                    let dflow = acc!(flow);
                    for y in 0..h {
                        for x in 0..w {
                            let (x0, y0, x1, y1, fx, fy, inx, iny) = sample_geom(y, x);
                            let mut du = 0.0;
                            let mut dv = 0.0;
                            for ch in 0..c {
                                let p = ch * h * w;
                                let v00 = ds[p + y0 * w + x0];
                                let v01 = ds[p + y0 * w + x1];
                                let v10 = ds[p + y1 * w + x0];
                                let v11 = ds[p + y1 * w + x1];
                                let gi = g[p + y * w + x];
                                if inx {
                                    du += gi * ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy);
                                }
                                if iny {
                                    dv += gi * ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx);
                                }
                            }
                            dflow[y * w + x] += du;
                            dflow[h * w + y * w + x] += dv;
                        }
                    }
                }
            }
            Op::ConvexUpsample {
                flow,
                mask,
                factor,
            } => {
                let (h, w) = (shape(*flow)[1], shape(*flow)[2]);
                let f2 = factor * factor;
                let (oh, ow) = (h * factor, w * factor);
                let df = val(*flow);
                let dm = val(*mask);
                if needs(*mask) {
                    let dmask = acc!(mask);
                    for oy in 0..oh {
                        let y = oy / factor;
                        let sy = oy % factor;
                        for ox in 0..ow {
                            let x = ox / factor;
                            let sx = ox % factor;
                            let s = sy * factor + sx;
                            for n2 in 0..9 {
                                let ny = (y as isize + n2 as isize / 3 - 1)
                                    .clamp(0, h as isize - 1)
                                    as usize;
                                let nx = (x as isize + n2 as isize % 3 - 1)
                                    .clamp(0, w as isize - 1)
                                    as usize;
                                let mut s2 = 0.0;
                                for ch in 0..2 {
                                    s2 += g[(ch * oh + oy) * ow + ox] * df[(ch * h + ny) * w + nx];
                                }
                                dmask[((n2 * f2 + s) * h + y) * w + x] += s2;
                            }
                        }
                    }
                }
                if needs(*flow) {
                    let dflow = acc!(flow);
                    for oy in 0..oh {
                        let y = oy / factor;
                        let sy = oy % factor;
                        for ox in 0..ow {
                            let x = ox / factor;
                            let sx = ox % factor;
                            let s = sy * factor + sx;
                            for n2 in 0..9 {
                                let ny = (y as isize + n2 as isize / 3 - 1)
                                    .clamp(0, h as isize - 1)
                                    as usize;
                                let nx = (x as isize + n2 as isize % 3 - 1)
                                    .clamp(0, w as isize - 1)
                                    as usize;
                                let m = dm[((n2 * f2 + s) * h + y) * w + x];
                                for ch in 0..2 {
                                    dflow[(ch * h + ny) * w + nx] +=
                                        m * g[(ch * oh + oy) * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
