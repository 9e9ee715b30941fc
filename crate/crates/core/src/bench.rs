//! Benchmark tables: mean endpoint error per method and dataset, plus the
//! five-variant module-toggle grid used to size up the contribution of each
//! architectural block.
//!
//! A "dataset" here is a directory of `sample_*` folders as written by
//! [`crate::scene::generate_dataset`]. Each dataset becomes one column of the
//! table (labelled with the directory name and its displacement interval),
//! every method becomes one row, and a trailing `average` column carries the
//! unweighted mean over the dataset columns. Samples that fail to load or
//! evaluate are reported in [`BenchTable::missing`] rather than silently
//! dropped from the averages.

use std::path::{Path, PathBuf};

use crate::classical::{self, Method};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::metrics;
use crate::scene::{self, LoadedSample};
use crate::siv::{SivConfig, SivModel};
use crate::voxel::to_voxel;

/// A flow estimator participating in a benchmark run.
#[derive(Debug, Clone)]
pub enum BenchMethod {
    /// FFT window cross-correlation on spike-count images.
    Xcorr,
    /// Coarse-to-fine smoothness-regularized solver on spike-count images.
    Variational,
    /// Learned estimator restored from the given checkpoint.
    Siv(PathBuf),
}

impl BenchMethod {
    pub fn label(&self) -> &'static str {
        match self {
            BenchMethod::Xcorr => "xcorr",
            BenchMethod::Variational => "variational",
            BenchMethod::Siv(_) => "siv",
        }
    }
}

/// One table row: a method (or model variant) name, its mean endpoint error
/// per dataset column, and the unweighted average of the populated cells.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub method: String,
    pub cells: Vec<Option<f64>>,
    pub average: Option<f64>,
}

/// Methods by row, datasets by column, plus an `average` column.
#[derive(Debug, Clone)]
pub struct BenchTable {
    /// Dataset labels, one per column (the `average` column is implicit).
    pub columns: Vec<String>,
    pub rows: Vec<BenchRow>,
    /// Samples that could not be evaluated, as "method on path: reason".
    pub missing: Vec<String>,
}

enum Estimator<'a> {
    Classical(Method),
    Model(&'a SivModel),
}

impl Estimator<'_> {
    fn run(&self, sample: &LoadedSample) -> Result<FlowField> {
        let dt = sample.gt.dt_frames;
        match self {
            Estimator::Classical(m) => {
                classical::estimate_from_spikes(&sample.source, &sample.target, *m, dt)
            }
            Estimator::Model(model) => {
                let bins = model.cfg.voxel_bins;
                let sv = to_voxel(&sample.source, 0, sample.source.n_frames, bins)?;
                let tv = to_voxel(&sample.target, 0, sample.target.n_frames, bins)?;
                model.estimate(&sv.to_tensor(), &tv.to_tensor(), dt)
            }
        }
    }
}

/// Column label for a dataset directory: the directory name, with the
/// displacement interval of its first sample appended when available, so a
/// table over `vortex/dt4 vortex/dt16 ...` reads the way the datasets were
/// laid out on disk.
fn dataset_label(dir: &Path) -> String {
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string();
    if name.contains("dt") {
        return name;
    }
    let dt = scene::list_samples(dir)
        .ok()
        .and_then(|samples| samples.first().cloned())
        .and_then(|first| KvConfig::read_file(&first.join("meta.txt")).ok())
        .and_then(|meta| meta.get_u64("dt_frames", 0).ok())
        .unwrap_or(0);
    if dt > 0 {
        format!("{name}/dt{dt}")
    } else {
        name
    }
}

fn evaluate_dataset(
    estimator: &Estimator,
    dir: &Path,
    method: &str,
    missing: &mut Vec<String>,
) -> Result<Option<f64>> {
    let samples = scene::list_samples(dir)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for sample_dir in &samples {
        let outcome = scene::load_sample(sample_dir)
            .and_then(|s| estimator.run(&s).and_then(|pred| metrics::epe(&pred, &s.gt)));
        match outcome {
            Ok(report) => {
                sum += report.mean;
                n += 1;
            }
            Err(e) => missing.push(format!("{method} on {}: {e}", sample_dir.display())),
        }
    }
    Ok(if n == 0 { None } else { Some(sum / n as f64) })
}

fn average_of(cells: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = cells.iter().flatten().copied().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Evaluates every method on every dataset. Checkpoint-backed methods load
/// their model once per row, not once per sample.
pub fn benchmark(datasets: &[PathBuf], methods: &[BenchMethod]) -> Result<BenchTable> {
    if datasets.is_empty() {
        return Err(Error::invalid("benchmark needs at least one dataset directory"));
    }
    if methods.is_empty() {
        return Err(Error::invalid("benchmark needs at least one method"));
    }
    let columns: Vec<String> = datasets.iter().map(|d| dataset_label(d)).collect();
    let mut missing = Vec::new();
    let mut rows = Vec::new();
    for method in methods {
        let owned_model;
        let estimator = match method {
            BenchMethod::Xcorr => Estimator::Classical(Method::Xcorr),
            BenchMethod::Variational => Estimator::Classical(Method::Variational),
            BenchMethod::Siv(ckpt) => {
                owned_model = SivModel::load(ckpt)?;
                Estimator::Model(&owned_model)
            }
        };
        let label = method.label();
        let mut cells = Vec::with_capacity(datasets.len());
        for dir in datasets {
            cells.push(evaluate_dataset(&estimator, dir, label, &mut missing)?);
        }
        let average = average_of(&cells);
        rows.push(BenchRow {
            method: label.to_string(),
            cells,
            average,
        });
    }
    Ok(BenchTable {
        columns,
        rows,
        missing,
    })
}

/// Evaluates prebuilt model variants (name, model) on every dataset. Used by
/// the ablation grid, where the variants differ in architecture rather than
/// in checkpoint.
pub fn model_table(models: &[(String, SivModel)], datasets: &[PathBuf]) -> Result<BenchTable> {
    if datasets.is_empty() {
        return Err(Error::invalid("benchmark needs at least one dataset directory"));
    }
    if models.is_empty() {
        return Err(Error::invalid("benchmark needs at least one model variant"));
    }
    let columns: Vec<String> = datasets.iter().map(|d| dataset_label(d)).collect();
    let mut missing = Vec::new();
    let mut rows = Vec::new();
    for (name, model) in models {
        let estimator = Estimator::Model(model);
        let mut cells = Vec::with_capacity(datasets.len());
        for dir in datasets {
            cells.push(evaluate_dataset(&estimator, dir, name, &mut missing)?);
        }
        let average = average_of(&cells);
        rows.push(BenchRow {
            method: name.clone(),
            cells,
            average,
        });
    }
    Ok(BenchTable {
        columns,
        rows,
        missing,
    })
}

/// One row of the module-toggle grid: which architectural blocks are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationSetting {
    pub tag: char,
    pub use_dpht: bool,
    pub use_ge: bool,
    pub use_msvr: bool,
}

impl AblationSetting {
    pub fn label(&self) -> String {
        let mark = |on: bool| if on { "y" } else { "-" };
        format!(
            "({}) dpht={} ge={} msvr={}",
            self.tag,
            mark(self.use_dpht),
            mark(self.use_ge),
            mark(self.use_msvr)
        )
    }

    pub fn apply(&self, base: &SivConfig) -> SivConfig {
        let mut cfg = base.clone();
        cfg.use_dpht = self.use_dpht;
        cfg.use_ge = self.use_ge;
        cfg.use_msvr = self.use_msvr;
        cfg
    }
}

/// The standard five-variant grid: everything off, the pyramid transformer
/// alone, then graph encoding and refinement added one at a time, then the
/// full model.
pub fn ablation_settings() -> [AblationSetting; 5] {
    let s = |tag, use_dpht, use_ge, use_msvr| AblationSetting {
        tag,
        use_dpht,
        use_ge,
        use_msvr,
    };
    [
        s('A', false, false, false),
        s('B', true, false, false),
        s('C', true, true, false),
        s('D', true, false, true),
        s('E', true, true, true),
    ]
}

/// Builds one freshly seeded model per ablation setting, all sharing `base`
/// dimensions and `seed`. Callers that want trained variants can run each
/// model through the trainer before handing the list to [`model_table`].
pub fn ablation_models(base: &SivConfig, seed: u64) -> Result<Vec<(String, SivModel)>> {
    ablation_settings()
        .iter()
        .map(|s| Ok((s.label(), SivModel::new(s.apply(base), seed)?)))
        .collect()
}

fn format_cell(cell: Option<f64>) -> String {
    match cell {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    }
}

impl BenchTable {
    /// Header `method,<datasets...>,average`, one line per row, missing
    /// samples as trailing comment lines so the record is self-contained.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for col in &self.columns {
            out.push(',');
            out.push_str(col);
        }
        out.push_str(",average\n");
        for row in &self.rows {
            out.push_str(&row.method);
            for cell in &row.cells {
                out.push(',');
                out.push_str(&format_cell(*cell));
            }
            out.push(',');
            out.push_str(&format_cell(row.average));
            out.push('\n');
        }
        for miss in &self.missing {
            out.push_str("# missing: ");
            out.push_str(miss);
            out.push('\n');
        }
        out
    }

    /// Space-padded rendering for terminals.
    pub fn to_text(&self) -> String {
        let mut headers = vec!["method".to_string()];
        headers.extend(self.columns.iter().cloned());
        headers.push("average".to_string());
        let mut grid: Vec<Vec<String>> = vec![headers];
        for row in &self.rows {
            let mut line = vec![row.method.clone()];
            line.extend(row.cells.iter().map(|c| format_cell(*c)));
            line.push(format_cell(row.average));
            grid.push(line);
        }
        let n_cols = grid[0].len();
        let widths: Vec<usize> = (0..n_cols)
            .map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, line) in grid.iter().enumerate() {
            for (c, cell) in line.iter().enumerate() {
                if c > 0 {
                    out.push_str("  ");
                }
                out.push_str(&format!("{cell:>width$}", width = widths[c]));
            }
            out.push('\n');
            if i == 0 {
                let total: usize = widths.iter().sum::<usize>() + 2 * (n_cols - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        for miss in &self.missing {
            out.push_str("missing: ");
            out.push_str(miss);
            out.push('\n');
        }
        out
    }
}
