//! The spike-stream velocimetry network.
//!
//! The model maps a pair of temporally adjacent spike voxel grids to a
//! sequence of dense displacement fields. Its stages are:
//!
//! 1. a hierarchical 3D feature pyramid over each voxel grid that keeps
//!    fine particle detail while reducing resolution ([`pyramid`]),
//! 2. a graph encoder that aggregates context by projecting feature
//!    pixels onto a small set of learned nodes, running attention over a
//!    dynamic node adjacency, and fusing the reprojection back into the
//!    pixel grid ([`graph`]),
//! 3. a recurrent optimizer that iteratively updates a quarter-resolution
//!    flow estimate from local feature correlations and convex-upsamples
//!    each iterate to full resolution ([`optimizer`]), and
//! 4. a coarse-to-fine refinement head that adds a quality-gated residual
//!    to the last iterate ([`refine`]).
//!
//! Stages 1, 2, and 4 can be toggled off individually for ablation runs;
//! the fallback for stage 1 is a plain strided 2D encoder over the
//! temporally collapsed voxels.

pub mod graph;
pub mod loss;
pub mod optimizer;
pub mod pyramid;
pub mod refine;
pub mod train;

use std::path::Path;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::{ParamStore, Tape, Tensor, TensorId};
use crate::util::stream_rng;

pub use graph::GraphTrace;
pub use loss::{sequence_loss, LossParts};
pub use train::{
    mean_epe, prepare_samples, train, write_loss_csv, Adam, TrainConfig, TrainRecord,
    TrainReport, TrainSample,
};

/// Upsampling factor between the working grid and full resolution.
pub const SCALE: usize = 4;

/// Model hyperparameters. `toy()` is small enough for finite-difference
/// checks; `paper()` carries the full-size dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SivConfig {
    /// Feature channels C emitted by the encoder.
    pub channels: usize,
    /// Graph nodes K.
    pub nodes: usize,
    /// Recurrent optimizer iterations N.
    pub iterations: usize,
    /// Local correlation radius at the quarter grid.
    pub corr_radius: usize,
    /// Temporal bins each spike window is reduced to.
    pub voxel_bins: usize,
    pub use_dpht: bool,
    pub use_ge: bool,
    pub use_msvr: bool,
}

impl SivConfig {
    pub fn paper() -> Self {
        SivConfig {
            channels: 128,
            nodes: 128,
            iterations: 12,
            corr_radius: 4,
            voxel_bins: 7,
            use_dpht: true,
            use_ge: true,
            use_msvr: true,
        }
    }

    pub fn toy() -> Self {
        SivConfig {
            channels: 16,
            nodes: 8,
            iterations: 2,
            corr_radius: 2,
            voxel_bins: 7,
            use_dpht: true,
            use_ge: true,
            use_msvr: true,
        }
    }

    /// Hidden width of the recurrent optimizer and refinement branches.
    pub fn hidden(&self) -> usize {
        (self.channels / 2).max(8)
    }

    /// Per-level channel counts of the feature pyramid.
    pub fn level_channels(&self) -> [usize; 3] {
        [
            (self.channels / 4).max(4),
            (self.channels / 2).max(8),
            self.channels,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 4 {
            return Err(Error::invalid("channels must be at least 4"));
        }
        if self.nodes < 2 {
            return Err(Error::invalid("nodes must be at least 2"));
        }
        if self.iterations < 1 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.corr_radius < 1 {
            return Err(Error::invalid("corr_radius must be at least 1"));
        }
        if self.voxel_bins < 1 {
            return Err(Error::invalid("voxel_bins must be at least 1"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("channels", self.channels.to_string());
        kv.set("nodes", self.nodes.to_string());
        kv.set("iterations", self.iterations.to_string());
        kv.set("corr_radius", self.corr_radius.to_string());
        kv.set("voxel_bins", self.voxel_bins.to_string());
        kv.set("use_dpht", self.use_dpht.to_string());
        kv.set("use_ge", self.use_ge.to_string());
        kv.set("use_msvr", self.use_msvr.to_string());
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let toy = SivConfig::toy();
        let cfg = SivConfig {
            channels: kv.get_usize("channels", toy.channels)?,
            nodes: kv.get_usize("nodes", toy.nodes)?,
            iterations: kv.get_usize("iterations", toy.iterations)?,
            corr_radius: kv.get_usize("corr_radius", toy.corr_radius)?,
            voxel_bins: kv.get_usize("voxel_bins", toy.voxel_bins)?,
            use_dpht: kv.get_bool("use_dpht", true)?,
            use_ge: kv.get_bool("use_ge", true)?,
            use_msvr: kv.get_bool("use_msvr", true)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything a forward pass exposes. Flow tensors are `[2, H, W]` with the
/// horizontal component first; `coarse` holds the pre-upsample iterates in
/// quarter-grid pixel units.
#[derive(Debug)]
pub struct SivOutput {
    pub r_s: TensorId,
    pub r_t: TensorId,
    pub f_c: TensorId,
    pub graph: Option<GraphTrace>,
    pub flows: Vec<TensorId>,
    pub coarse: Vec<TensorId>,
    pub residual: Option<TensorId>,
    pub quality: Option<TensorId>,
    pub refined: Option<TensorId>,
}

impl SivOutput {
    /// The supervised sequence: every iterate plus, when present, the
    /// refined field as the final element.
    pub fn sequence(&self) -> Vec<TensorId> {
        let mut s = self.flows.clone();
        if let Some(r) = self.refined {
            s.push(r);
        }
        s
    }

    /// The field an `estimate` call should report.
    pub fn final_flow(&self) -> TensorId {
        self.refined.unwrap_or_else(|| {
            *self
                .flows
                .last()
                .expect("forward always emits at least one field")
        })
    }
}

#[derive(Debug)]
pub struct SivModel {
    pub cfg: SivConfig,
    pub store: ParamStore,
}

impl SivModel {
    /// Builds the parameter set for `cfg`. Hidden layers use He-normal
    /// init; the flow-update, upsample-mask, residual, and quality heads
    /// start at zero so the first forward pass emits exactly zero motion;
    /// the graph fusion scalar starts at zero so the graph branch is
    /// initially inert.
    pub fn new(cfg: SivConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, 0);
        if cfg.use_dpht {
            pyramid::register_dpht(&mut store, &mut rng, &cfg)?;
        } else {
            pyramid::register_fallback(&mut store, &mut rng, &cfg)?;
        }
        if cfg.use_ge {
            graph::register(&mut store, &mut rng, &cfg)?;
        }
        optimizer::register(&mut store, &mut rng, &cfg)?;
        if cfg.use_msvr {
            refine::register(&mut store, &mut rng, &cfg)?;
        }
        Ok(SivModel { cfg, store })
    }

    pub fn param_count(&self) -> usize {
        self.store.total_elements()
    }

    /// Runs the network on one voxel-grid pair, shapes `[1, 1, B, H, W]`.
    pub fn forward(&self, tape: &mut Tape, source: &Tensor, target: &Tensor) -> Result<SivOutput> {
        self.check_input(source)?;
        self.check_input(target)?;
        if source.shape() != target.shape() {
            return Err(Error::shape(
                "siv_forward",
                format!(
                    "source {:?} and target {:?} must match",
                    source.shape(),
                    target.shape()
                ),
            ));
        }
        let s_in = tape.leaf(source.clone())?;
        let t_in = tape.leaf(target.clone())?;

        let (r_s, r_t) = if self.cfg.use_dpht {
            (
                pyramid::dpht_forward(tape, &self.store, &self.cfg, s_in)?,
                pyramid::dpht_forward(tape, &self.store, &self.cfg, t_in)?,
            )
        } else {
            (
                pyramid::fallback_forward(tape, &self.store, &self.cfg, s_in)?,
                pyramid::fallback_forward(tape, &self.store, &self.cfg, t_in)?,
            )
        };

        let (f_c, graph_trace) = if self.cfg.use_ge {
            let trace = graph::encode(tape, &self.store, &self.cfg, r_s)?;
            (trace.f_c, Some(trace))
        } else {
            (r_s, None)
        };

        let (flows, coarse) = optimizer::msio_forward(tape, &self.store, &self.cfg, f_c, r_s, r_t)?;

        let (residual, quality, refined) = if self.cfg.use_msvr {
            let last_coarse = *coarse.last().expect("msio emits at least one iterate");
            let last_full = *flows.last().expect("msio emits at least one iterate");
            let out = refine::msvr_forward(tape, &self.store, &self.cfg, last_coarse, last_full)?;
            (Some(out.residual), Some(out.quality), Some(out.refined))
        } else {
            (None, None, None)
        };

        Ok(SivOutput {
            r_s,
            r_t,
            f_c,
            graph: graph_trace,
            flows,
            coarse,
            residual,
            quality,
            refined,
        })
    }

    /// Convenience wrapper: forward pass followed by conversion of the
    /// final field to a [`FlowField`] stamped with `dt_frames`.
    pub fn estimate(&self, source: &Tensor, target: &Tensor, dt_frames: u32) -> Result<FlowField> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, source, target)?;
        tensor_to_flow(tape.value(out.final_flow()), dt_frames)
    }

    fn check_input(&self, v: &Tensor) -> Result<()> {
        let s = v.shape();
        if s.len() != 5 || s[0] != 1 || s[1] != 1 {
            return Err(Error::shape(
                "siv_forward",
                format!("expected voxel tensor [1, 1, bins, h, w], got {s:?}"),
            ));
        }
        if s[2] != self.cfg.voxel_bins {
            return Err(Error::shape(
                "siv_forward",
                format!("expected {} temporal bins, got {}", self.cfg.voxel_bins, s[2]),
            ));
        }
        let (h, w) = (s[3], s[4]);
        if h < 16 || w < 16 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::shape(
                "siv_forward",
                format!("spatial extent must be a multiple of 8 and at least 16, got {h}x{w}"),
            ));
        }
        Ok(())
    }

    /// Writes the checkpoint plus a `.cfg` sibling carrying the model
    /// dimensions, so `load` can rebuild the architecture.
    pub fn save(&self, ckpt: &Path) -> Result<()> {
        self.store.write_checkpoint(ckpt)?;
        self.cfg.to_kv().write_file(&cfg_sibling(ckpt))
    }

    pub fn load(ckpt: &Path) -> Result<Self> {
        let kv = KvConfig::read_file(&cfg_sibling(ckpt))?;
        let cfg = SivConfig::from_kv(&kv)?;
        let mut model = SivModel::new(cfg, 0)?;
        let loaded = ParamStore::read_checkpoint(ckpt)?;
        model.store.copy_values_from(&loaded)?;
        Ok(model)
    }
}

fn cfg_sibling(ckpt: &Path) -> std::path::PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".cfg");
    ckpt.with_file_name(name)
}

/// Packs a flow field into a `[2, H, W]` tensor, u-plane first.
pub fn flow_to_tensor(f: &FlowField) -> Result<Tensor> {
    let mut data = Vec::with_capacity(2 * f.height * f.width);
    data.extend_from_slice(&f.u);
    data.extend_from_slice(&f.v);
    Tensor::new(vec![2, f.height, f.width], data)
}

/// Unpacks a `[2, H, W]` (or `[1, 2, H, W]`) tensor into a flow field.
pub fn tensor_to_flow(t: &Tensor, dt_frames: u32) -> Result<FlowField> {
    let s = t.shape();
    let (h, w) = match s {
        [2, h, w] => (*h, *w),
        [1, 2, h, w] => (*h, *w),
        _ => {
            return Err(Error::shape(
                "tensor_to_flow",
                format!("expected [2, h, w] flow tensor, got {s:?}"),
            ))
        }
    };
    let n = h * w;
    Ok(FlowField {
        width: w,
        height: h,
        u: t.data()[..n].to_vec(),
        v: t.data()[n..2 * n].to_vec(),
        dt_frames,
    })
}
