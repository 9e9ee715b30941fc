//! Seeded, deterministic training loop.
//!
//! Batches are gradient-accumulated one sample at a time (each sample
//! owns its tape) and averaged before an Adam step. The learning rate
//! ramps up linearly over the warm-up iterations and decays by a fixed
//! factor every few epochs. Everything downstream of the seed is
//! deterministic, so two runs with the same seed produce bit-identical
//! loss curves and checkpoints.

use std::path::Path;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::metrics;
use crate::scene::{list_samples, load_sample};
use crate::siv::{flow_to_tensor, loss, SivModel};
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::util::stream_rng;
use crate::voxel::to_voxel;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Total optimizer steps.
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warm-up length in steps (0 disables).
    pub warmup_iters: usize,
    /// Multiplicative decay applied every `decay_every_epochs` epochs.
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub gamma: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 200,
            batch_size: 4,
            lr: 1e-4,
            warmup_iters: 10,
            decay_factor: 0.85,
            decay_every_epochs: 10,
            gamma: loss::GAMMA,
            beta: loss::BETA,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("training needs at least one iteration"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be nonzero"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::invalid(format!("bad learning rate {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.decay_factor) || self.decay_factor == 0.0 {
            return Err(Error::invalid(format!(
                "decay factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) || self.beta < 0.0 {
            return Err(Error::invalid("gamma must be in [0, 1] and beta >= 0"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("train_iterations", self.iterations.to_string());
        kv.set("train_batch", self.batch_size.to_string());
        kv.set("train_lr", format!("{}", self.lr));
        kv.set("train_warmup", self.warmup_iters.to_string());
        kv.set("train_decay", format!("{}", self.decay_factor));
        kv.set("train_decay_every", self.decay_every_epochs.to_string());
        kv.set("train_gamma", format!("{}", self.gamma));
        kv.set("train_beta", format!("{}", self.beta));
        kv.set("train_seed", self.seed.to_string());
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            iterations: kv.get_usize("train_iterations", d.iterations)?,
            batch_size: kv.get_usize("train_batch", d.batch_size)?,
            lr: kv.get_f64("train_lr", d.lr)?,
            warmup_iters: kv.get_usize("train_warmup", d.warmup_iters)?,
            decay_factor: kv.get_f64("train_decay", d.decay_factor)?,
            decay_every_epochs: kv.get_usize("train_decay_every", d.decay_every_epochs)?,
            gamma: kv.get_f64("train_gamma", d.gamma)?,
            beta: kv.get_f64("train_beta", d.beta)?,
            seed: kv.get_u64("train_seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Learning rate at 0-indexed step `t`, given the epoch length.
    pub fn lr_at(&self, t: usize, steps_per_epoch: usize) -> f64 {
        let warm = if self.warmup_iters > 0 {
            ((t + 1) as f64 / self.warmup_iters as f64).min(1.0)
        } else {
            1.0
        };
        let decay = if self.decay_every_epochs > 0 && steps_per_epoch > 0 {
            let epoch = t / steps_per_epoch;
            self.decay_factor.powi((epoch / self.decay_every_epochs) as i32)
        } else {
            1.0
        };
        self.lr * warm * decay
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One update over the store's accumulated gradients, each scaled by
    /// `grad_scale` (the caller's 1/batch averaging).
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, grad_scale: f64) -> Result<()> {
        let g = store.grads_flat();
        if g.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer state for {} values, store has {}",
                self.m.len(),
                g.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut p = store.values_flat();
        for i in 0..g.len() {
            let gi = g[i] * grad_scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gi;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gi * gi;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        store.set_values_flat(&p)
    }
}

/// One training example: voxelized stream pair plus the supervision field
/// in both tensor and flow form.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub source: Tensor,
    pub target: Tensor,
    pub gt: Tensor,
    pub gt_field: FlowField,
}

impl TrainSample {
    pub fn from_dir(dir: &Path, bins: usize) -> Result<Self> {
        let loaded = load_sample(dir)?;
        let sv = to_voxel(&loaded.source, 0, loaded.source.n_frames, bins)?;
        let tv = to_voxel(&loaded.target, 0, loaded.target.n_frames, bins)?;
        Ok(TrainSample {
            source: sv.to_tensor(),
            target: tv.to_tensor(),
            gt: flow_to_tensor(&loaded.gt)?,
            gt_field: loaded.gt,
        })
    }
}

/// Loads every sample below a dataset root.
pub fn prepare_samples(root: &Path, bins: usize) -> Result<Vec<TrainSample>> {
    list_samples(root)?
        .iter()
        .map(|d| TrainSample::from_dir(d, bins))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    /// 1-based optimizer step.
    pub iteration: usize,
    pub l_flow: f64,
    pub l_grad: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Runs the loop, mutating the model in place.
pub fn train(model: &mut SivModel, samples: &[TrainSample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training requires a non-empty dataset"));
    }
    let n = samples.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut adam = Adam::new(model.store.total_elements());
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(cfg.iterations);

    for step in 0..cfg.iterations {
        let epoch = step / steps_per_epoch;
        let pos = step % steps_per_epoch;
        if pos == 0 {
            // Deterministic reshuffle at every epoch boundary.
            let mut rng = stream_rng(cfg.seed, 0xE0C0 + epoch as u64);
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
        }
        let lo = pos * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(n);
        let batch = &order[lo..hi];

        model.store.zero_grad();
        let (mut flow_sum, mut grad_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for &si in batch {
            let s = &samples[si];
            let mut tape = Tape::new();
            let out = model
                .forward(&mut tape, &s.source, &s.target)
                .map_err(|e| Error::numeric(format!("iteration {}: {e}", step + 1)))?;
            let parts = loss::sequence_loss(&mut tape, &out.sequence(), &s.gt, cfg.gamma, cfg.beta)
                .map_err(|e| Error::numeric(format!("iteration {}: {e}", step + 1)))?;
            if !parts.value.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss {} at iteration {}",
                    parts.value,
                    step + 1
                )));
            }
            tape.backward(parts.total)?;
            tape.accumulate_param_grads(&mut model.store)?;
            flow_sum += parts.flow_part;
            grad_sum += parts.grad_part;
            total_sum += parts.value;
        }
        let k = batch.len() as f64;
        let lr = cfg.lr_at(step, steps_per_epoch);
        adam.step(&mut model.store, lr, 1.0 / k)?;
        records.push(TrainRecord {
            iteration: step + 1,
            l_flow: flow_sum / k,
            l_grad: grad_sum / k,
            total: total_sum / k,
        });
    }
    Ok(TrainReport {
        initial_loss: records.first().map(|r| r.total).unwrap_or(0.0),
        final_loss: records.last().map(|r| r.total).unwrap_or(0.0),
        records,
    })
}

/// Loss curve as `iteration,L_flow,L_grad,L` CSV.
pub fn write_loss_csv(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let mut out = String::from("iteration,L_flow,L_grad,L\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.iteration, r.l_flow, r.l_grad, r.total));
    }
    std::fs::write(path, out).map_err(|e| Error::io_path(path, e))
}

/// Mean endpoint error of the model's final fields over a sample set.
pub fn mean_epe(model: &SivModel, samples: &[TrainSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty sample set"));
    }
    let mut total = 0.0;
    for s in samples {
        let pred = model.estimate(&s.source, &s.target, s.gt_field.dt_frames)?;
        total += metrics::epe(&pred, &s.gt_field)?.mean;
    }
    Ok(total / samples.len() as f64)
}
