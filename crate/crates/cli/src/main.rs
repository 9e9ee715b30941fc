//! Command-line workbench around the core library: dataset generation, flow
//! estimation, training, benchmarking, visualization, and self-diagnostics.
//!
//! Exit codes form a small taxonomy so shell harnesses can assert failure
//! classes: 1 usage, 2 I/O, 3 validation (malformed arguments, shapes, or
//! files), 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use spikepiv_core::bench::{benchmark, BenchMethod};
use spikepiv_core::classical::{estimate_from_spikes, Method};
use spikepiv_core::config::KvConfig;
use spikepiv_core::error::{Error, Result};
use spikepiv_core::flow::{read_flo, write_flo, FLO_MAGIC};
use spikepiv_core::scene::{self, SceneConfig};
use spikepiv_core::selftest;
use spikepiv_core::siv::{prepare_samples, train, write_loss_csv, SivConfig, SivModel, TrainConfig};
use spikepiv_core::spike::{SPK_MAGIC, SPK_VERSION};
use spikepiv_core::tensor::params::{CKPT_MAGIC, CKPT_VERSION};
use spikepiv_core::viz;
use spikepiv_core::voxel::to_voxel;

fn long_version() -> &'static str {
    static VERSION: std::sync::OnceLock<String> = std::sync::OnceLock::new();
    VERSION.get_or_init(|| {
        format!(
            "{}\nformats: spike stream {} v{}, checkpoint {} v{}, flow magic {}",
            env!("CARGO_PKG_VERSION"),
            String::from_utf8_lossy(SPK_MAGIC),
            SPK_VERSION,
            String::from_utf8_lossy(CKPT_MAGIC),
            CKPT_VERSION,
            FLO_MAGIC,
        )
    })
}

#[derive(Parser)]
#[command(
    name = "spikepiv",
    version = env!("CARGO_PKG_VERSION"),
    long_version = long_version(),
    about = "Spike-camera particle image velocimetry workbench"
)]
struct Cli {
    /// Worker threads for data-parallel stages; 1 forces fully serial
    /// execution. Defaults to the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize sample pairs (spike windows plus ground-truth flow).
    Generate {
        /// Scene preset: uniform_shift, vortex, taylor_green, shear, hdr_ramp.
        #[arg(long)]
        preset: Option<String>,
        /// key=value scene config; entries override the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples (overrides config).
        #[arg(long)]
        n: Option<usize>,
        /// Base seed (overrides config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate flow for one sample or a whole dataset, writing .flo files.
    Estimate {
        /// xcorr, hs (smoothness-regularized solver), or siv (learned,
        /// needs --ckpt).
        #[arg(long)]
        method: String,
        /// A single sample directory.
        #[arg(long, conflicts_with = "dataset")]
        sample: Option<PathBuf>,
        /// A dataset directory of sample_* folders.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint for --method siv.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Output directory for <sample>.flo files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the learned estimator on a generated dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// key=value model and trainer config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path; loss curve and effective config are
        /// written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the trainer seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Benchmark methods over datasets; prints an aligned table.
    Eval {
        /// Dataset directories, one table column each (repeatable).
        #[arg(long = "dataset", required = true, num_args = 1..)]
        datasets: Vec<PathBuf>,
        /// Comma-separated methods: xcorr, hs, siv (siv needs --ckpt).
        #[arg(long, required = true, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Also write the table as CSV to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a .flo field to a color-wheel PNG.
    Viz {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Saturation magnitude; defaults to the field's maximum.
        #[arg(long)]
        max_magnitude: Option<f64>,
    },
    /// Run the built-in oracle and invariant diagnostics.
    Selftest,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        // Ignore the error from a pool that already exists (repeat calls in
        // one process, e.g. under test harnesses).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_class(&e))
        }
    }
}

fn exit_class(e: &Error) -> u8 {
    if e.is_validation() {
        3
    } else if matches!(e, Error::Numeric(_)) {
        4
    } else {
        2
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate {
            preset,
            config,
            out,
            n,
            seed,
        } => cmd_generate(preset.as_deref(), config.as_deref(), &out, n, seed),
        Command::Estimate {
            method,
            sample,
            dataset,
            ckpt,
            out,
        } => cmd_estimate(&method, sample, dataset, ckpt.as_deref(), &out),
        Command::Train {
            dataset,
            config,
            out,
            seed,
        } => cmd_train(&dataset, config.as_deref(), &out, seed),
        Command::Eval {
            datasets,
            methods,
            ckpt,
            out,
        } => cmd_eval(&datasets, &methods, ckpt.as_deref(), out.as_deref()),
        Command::Viz {
            flow,
            out,
            max_magnitude,
        } => cmd_viz(&flow, &out, max_magnitude),
        Command::Selftest => cmd_selftest(),
    }
}

fn cmd_generate(
    preset: Option<&str>,
    config: Option<&Path>,
    out: &Path,
    n: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut kv = match preset {
        Some(name) => scene::preset(name)?,
        None => KvConfig::new(),
    };
    if let Some(path) = config {
        let file = KvConfig::read_file(path)?;
        kv.merge_from(&file);
    }
    if let Some(n) = n {
        kv.set("n_samples", n.to_string());
    }
    if let Some(seed) = seed {
        kv.set("seed", seed.to_string());
    }
    let cfg = SceneConfig::from_kv(&kv)?;
    let dirs = scene::generate_dataset(&cfg, out)?;
    cfg.to_kv().write_file(&out.join("scene.cfg"))?;
    println!("wrote {} samples under {}", dirs.len(), out.display());
    Ok(())
}

enum MethodKind {
    Classical(Method),
    Learned,
}

fn parse_method(name: &str) -> Result<(MethodKind, &'static str)> {
    match name {
        "xcorr" => Ok((MethodKind::Classical(Method::Xcorr), "xcorr")),
        "hs" | "variational" => Ok((MethodKind::Classical(Method::Variational), "hs")),
        "siv" => Ok((MethodKind::Learned, "siv")),
        other => Err(Error::invalid(format!(
            "unknown method {other:?} (expected xcorr, hs, or siv)"
        ))),
    }
}

fn estimate_one(
    kind: &MethodKind,
    model: Option<&SivModel>,
    sample: &scene::LoadedSample,
) -> Result<spikepiv_core::flow::FlowField> {
    match kind {
        MethodKind::Classical(m) => {
            estimate_from_spikes(&sample.source, &sample.target, *m, sample.gt.dt_frames)
        }
        MethodKind::Learned => {
            let model = model.expect("learned method resolved a model upfront");
            let bins = model.cfg.voxel_bins;
            let sv = to_voxel(&sample.source, 0, sample.source.n_frames, bins)?;
            let tv = to_voxel(&sample.target, 0, sample.target.n_frames, bins)?;
            model.estimate(&sv.to_tensor(), &tv.to_tensor(), sample.gt.dt_frames)
        }
    }
}

fn cmd_estimate(
    method: &str,
    sample: Option<PathBuf>,
    dataset: Option<PathBuf>,
    ckpt: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let (kind, canonical) = parse_method(method)?;
    let sample_dirs = match (sample, dataset) {
        (Some(s), None) => vec![s],
        (None, Some(d)) => scene::list_samples(&d)?,
        _ => return Err(Error::invalid("pass exactly one of --sample or --dataset")),
    };
    let model = match kind {
        MethodKind::Learned => {
            let path = ckpt.ok_or_else(|| Error::invalid("--method siv needs --ckpt"))?;
            Some(SivModel::load(path)?)
        }
        MethodKind::Classical(_) => None,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io_path(out, e))?;
    for dir in &sample_dirs {
        let loaded = scene::load_sample(dir)?;
        let field = estimate_one(&kind, model.as_ref(), &loaded)?;
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::invalid(format!("unusable sample path {}", dir.display())))?;
        write_flo(&out.join(format!("{name}.flo")), &field)?;
    }
    let mut eff = KvConfig::new();
    eff.set("method", canonical);
    if let Some(path) = ckpt {
        eff.set("ckpt", path.display().to_string());
    }
    eff.write_file(&out.join("estimate.cfg"))?;
    println!(
        "wrote {} flow fields under {}",
        sample_dirs.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    dataset: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let kv = match config {
        Some(path) => KvConfig::read_file(path)?,
        None => KvConfig::new(),
    };
    let model_cfg = SivConfig::from_kv(&kv)?;
    let mut train_cfg = TrainConfig::from_kv(&kv)?;
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    let samples = prepare_samples(dataset, model_cfg.voxel_bins)?;
    let mut model = SivModel::new(model_cfg, train_cfg.seed)?;
    let report = train(&mut model, &samples, &train_cfg)?;
    model.save(out)?;
    let loss_path = sibling(out, "loss.csv");
    write_loss_csv(&loss_path, &report.records)?;
    let mut eff = model.cfg.to_kv();
    eff.merge_from(&train_cfg.to_kv());
    eff.write_file(&sibling(out, "train.cfg"))?;
    println!(
        "trained {} iterations on {} samples: loss {:.6} -> {:.6}",
        report.records.len(),
        samples.len(),
        report.initial_loss,
        report.final_loss
    );
    println!("checkpoint {}, loss curve {}", out.display(), loss_path.display());
    Ok(())
}

/// `model.ckpt` -> `model.ckpt.<tag>`, matching the checkpoint's own `.cfg`
/// sibling convention.
fn sibling(path: &Path, tag: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    name.push('.');
    name.push_str(tag);
    path.with_file_name(name)
}

fn cmd_eval(
    datasets: &[PathBuf],
    methods: &[String],
    ckpt: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let mut bench_methods = Vec::new();
    for name in methods {
        let name = name.trim();
        if name.is_empty() {
            continue;
        }
        let method = match parse_method(name)?.0 {
            MethodKind::Classical(Method::Xcorr) => BenchMethod::Xcorr,
            MethodKind::Classical(Method::Variational) => BenchMethod::Variational,
            MethodKind::Learned => {
                let path = ckpt.ok_or_else(|| Error::invalid("method siv needs --ckpt"))?;
                BenchMethod::Siv(path.to_path_buf())
            }
        };
        bench_methods.push(method);
    }
    if bench_methods.is_empty() {
        return Err(Error::invalid("at least one method required"));
    }
    let table = benchmark(datasets, &bench_methods)?;
    print!("{}", table.to_text());
    if let Some(path) = out {
        std::fs::write(path, table.to_csv()).map_err(|e| Error::io_path(path, e))?;
        println!("csv written to {}", path.display());
    }
    Ok(())
}

fn cmd_viz(flow: &Path, out: &Path, max_magnitude: Option<f64>) -> Result<()> {
    let field = read_flo(flow)?;
    let img = viz::flow_to_color(&field, max_magnitude)?;
    viz::write_png(out, &img)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_selftest() -> Result<()> {
    let outcomes = selftest::run_selftest();
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("[{status}] {}: {}", o.name, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed == 0 {
        println!("all {} diagnostics passed", outcomes.len());
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "{failed} of {} diagnostics failed",
            outcomes.len()
        )))
    }
}
