//! `dne`: synthetic data generation, training, refinement, evaluation and
//! the oracle suites.
//!
//! Exit codes: 0 success, 1 verification or runtime failure, 2 I/O or
//! configuration error. `DNE_THREADS` caps the worker pool.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dne_core::pipeline::{
    self, evaluate, evaluate_coarse, instance_seed, load_instance, make_synthetic_instance, refine, save_instance,
    split_dataset, write_atomic, write_log_csv, DataConfig, Instance, Metrics,
};
use dne_core::rng::derive;
use dne_core::verify::{self, Suite, VerifyOptions};
use dne_core::{DneError, DnePipelineParams, PipelineConfig};

const MANIFEST: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "dne", version, about = "Dual noise estimation hand-mesh refinement")]
struct Cli {
    /// JSON file with pipeline and data settings; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Std of the per-joint-group offsets, scene units.
        #[arg(long)]
        corruption: Option<f64>,
    },
    /// Train a pipeline; writes the checkpoint and `metrics.csv` beside it.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        modules: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Refine one instance with a checkpoint.
    Refine {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Coarse and refined metrics of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `eval.csv` next to the checkpoint.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run oracle suites.
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negative control: corrupt analytic gradients.
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Gradcheck,
    Ridge,
    Pooling,
    Noise,
    All,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl fmt::Display) -> Self {
        Failure {
            code: 2,
            message: message.to_string(),
        }
    }

    fn io(path: &Path, err: impl fmt::Display) -> Self {
        Failure {
            code: 2,
            message: format!("{}: {err}", path.display()),
        }
    }
}

impl From<DneError> for Failure {
    fn from(e: DneError) -> Self {
        let code = match e {
            DneError::Io(_) | DneError::Json(_) | DneError::Config(_) | DneError::Format(_) | DneError::InvalidMesh(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<ExitCode, Failure>;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    dir: String,
    seed: u64,
    coarse_mpvpe: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    count: usize,
    data: DataConfig,
    mean_coarse_mpvpe: f64,
    instances: Vec<ManifestEntry>,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", p.display())))
        }
    }
}

fn read_manifest(dir: &Path) -> Result<Manifest, Failure> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Failure::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Instance>), Failure> {
    let manifest = read_manifest(dir)?;
    let instances = manifest
        .instances
        .par_iter()
        .map(|e| load_instance(dir.join(&e.dir)).map_err(|err| Failure::io(&dir.join(&e.dir), err)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((manifest, instances))
}

fn load_checkpoint(path: &Path) -> Result<(DnePipelineParams, PipelineConfig), Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::io(path, e))?;
    DnePipelineParams::from_checkpoint(&bytes).map_err(|e| Failure::io(path, e))
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, Failure> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure::config(e))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn check_grid(config: &PipelineConfig, data: &DataConfig) -> Result<(), Failure> {
    if config.data.grid_shape() != data.grid_shape() {
        return Err(Failure::config(format!(
            "checkpoint expects {:?} feature grids, dataset has {:?}",
            config.data.grid_shape(),
            data.grid_shape()
        )));
    }
    Ok(())
}

fn cmd_gen(config: PipelineConfig, out: &Path, count: usize, seed: u64, corruption: Option<f64>) -> CmdResult {
    let mut data = config.data;
    if let Some(c) = corruption {
        data.corruption = c;
    }
    data.validate()?;
    fs::create_dir_all(out).map_err(|e| Failure::io(out, e))?;
    let entries = (0..count)
        .into_par_iter()
        .map(|i| {
            let s = instance_seed(seed, i);
            let inst = make_synthetic_instance(s, &data)?;
            let dir = format!("{i:06}");
            save_instance(out.join(&dir), &inst).map_err(|e| Failure::io(&out.join(&dir), e))?;
            Ok(ManifestEntry {
                dir,
                seed: s,
                coarse_mpvpe: inst.coarse_mpvpe()?,
            })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let mean = entries.iter().map(|e| e.coarse_mpvpe).sum::<f64>() / count.max(1) as f64;
    let manifest = Manifest {
        seed,
        count,
        data,
        mean_coarse_mpvpe: mean,
        instances: entries,
    };
    let path = out.join(MANIFEST);
    write_atomic(&path, &json_bytes(&manifest)?).map_err(|e| Failure::io(&path, e))?;
    println!("wrote {count} instances to {} (mean coarse MPVPE {mean:.6})", out.display());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    mut config: PipelineConfig,
    data_dir: &Path,
    out: &Path,
    modules: Option<usize>,
    samples: Option<usize>,
    epochs: Option<usize>,
    seed: u64,
) -> CmdResult {
    if let Some(m) = modules {
        config.modules = m;
    }
    if let Some(r) = samples {
        config.samples = r;
    }
    if let Some(e) = epochs {
        config.train.epochs = e;
    }
    let (manifest, instances) = load_dataset(data_dir)?;
    config.data = manifest.data;
    config.validate()?;
    let (train_idx, val_idx) = split_dataset(instances.len());
    let train_set: Vec<&Instance> = train_idx.iter().map(|&i| &instances[i]).collect();
    let val_set: Vec<&Instance> = val_idx.iter().map(|&i| &instances[i]).collect();
    let n = instances
        .first()
        .map(|i| i.coarse_mesh.num_vertices())
        .ok_or_else(|| Failure::config("dataset is empty"))?;

    let params = DnePipelineParams::init(&config, n, derive(seed, &[0x1417]))?;
    let (params, logs) = pipeline::train(params, &config, &train_set, &val_set, derive(seed, &[0x7EA1]), |log| {
        let loss = log.train_loss.map_or_else(|| "-".to_string(), |l| format!("{l:.5}"));
        eprintln!(
            "epoch {:>3}  loss {loss:>10}  val mpvpe3d {:.5}  mpvpe2d {:.4}",
            log.epoch, log.val.mpvpe3d, log.val.mpvpe2d
        );
    })?;

    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::io(parent, e))?;
    }
    write_atomic(out, &params.to_checkpoint(&config)?).map_err(|e| Failure::io(out, e))?;
    let mut csv = Vec::new();
    write_log_csv(&logs, &mut csv)?;
    let csv_path = out.with_file_name("metrics.csv");
    write_atomic(&csv_path, &csv).map_err(|e| Failure::io(&csv_path, e))?;
    println!("wrote {} and {}", out.display(), csv_path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct TraceEntry<'a> {
    stage: usize,
    #[serde(flatten)]
    trace: &'a pipeline::StageTrace,
}

fn cmd_refine(ckpt: &Path, instance: &Path, out: &Path) -> CmdResult {
    let (params, config) = load_checkpoint(ckpt)?;
    let inst = load_instance(instance).map_err(|e| Failure::io(instance, e))?;
    if inst.grid.shape() != config.data.grid_shape() {
        return Err(Failure::config("instance grid does not match the checkpoint"));
    }
    let state = refine(&inst.coarse_state()?, &inst.grid, &params)?;
    fs::create_dir_all(out).map_err(|e| Failure::io(out, e))?;
    let write = |name: &str, bytes: Vec<u8>| {
        let path = out.join(name);
        write_atomic(&path, &bytes).map_err(|e| Failure::io(&path, e))
    };
    write("refined_mesh.json", state.mesh.to_json()?.into_bytes())?;
    write(
        "camera.json",
        json_bytes(&serde_json::json!({
            "camera": state.camera,
            "coords_2d": state.coords_2d,
        }))?,
    )?;
    let trace: Vec<TraceEntry> = state
        .trace
        .iter()
        .enumerate()
        .map(|(stage, trace)| TraceEntry { stage, trace })
        .collect();
    write("trace.json", json_bytes(&trace)?)?;
    println!("refined {} through {} stages into {}", instance.display(), trace.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

const EVAL_HEADER: [&str; 6] = ["model", "split", "instances", "mpvpe3d", "mpjpe3d", "mpvpe2d"];

fn cmd_eval(ckpt: &Path, data_dir: &Path, csv: Option<&Path>) -> CmdResult {
    let (params, config) = load_checkpoint(ckpt)?;
    let (manifest, instances) = load_dataset(data_dir)?;
    check_grid(&config, &manifest.data)?;
    let (_, val_idx) = split_dataset(instances.len());
    let all: Vec<&Instance> = instances.iter().collect();
    let val: Vec<&Instance> = val_idx.iter().map(|&i| &instances[i]).collect();

    let mut rows: Vec<(&str, &str, usize, Metrics)> = Vec::new();
    for (split, set) in [("all", &all), ("val", &val)] {
        if set.is_empty() {
            continue;
        }
        rows.push(("coarse", split, set.len(), evaluate_coarse(set)?));
        rows.push(("refined", split, set.len(), evaluate(&params, set)?));
    }

    println!(
        "{:<8} {:<5} {:>9} {:>12} {:>12} {:>12}",
        EVAL_HEADER[0], EVAL_HEADER[1], EVAL_HEADER[2], EVAL_HEADER[3], EVAL_HEADER[4], EVAL_HEADER[5]
    );
    let mut text = EVAL_HEADER.join(",") + "\n";
    for (model, split, n, m) in &rows {
        println!(
            "{model:<8} {split:<5} {n:>9} {:>12.6} {:>12.6} {:>12.6}",
            m.mpvpe3d, m.mpjpe3d, m.mpvpe2d
        );
        text += &format!("{model},{split},{n},{:.9e},{:.9e},{:.9e}\n", m.mpvpe3d, m.mpjpe3d, m.mpvpe2d);
    }
    let path = csv.map_or_else(|| ckpt.with_file_name("eval.csv"), Path::to_path_buf);
    write_atomic(&path, text.as_bytes()).map_err(|e| Failure::io(&path, e))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(suite: SuiteArg, seed: u64, corrupt_gradient: bool) -> CmdResult {
    let suites: Vec<Suite> = match suite {
        SuiteArg::Gradcheck => vec![Suite::Gradcheck],
        SuiteArg::Ridge => vec![Suite::Ridge],
        SuiteArg::Pooling => vec![Suite::Pooling],
        SuiteArg::Noise => vec![Suite::Noise],
        SuiteArg::All => Suite::ALL.to_vec(),
    };
    let opts = VerifyOptions {
        seed,
        corrupt_gradients: corrupt_gradient,
    };
    let mut ok = true;
    for s in suites {
        let report = verify::run(s, &opts);
        println!(
            "[{}] {} ({:.2}s)",
            if report.passed() { "PASS" } else { "FAIL" },
            s.name(),
            report.elapsed.as_secs_f64()
        );
        for c in &report.checks {
            println!(
                "    {:<4} {:<26} cases {:>5}  worst {:.3e}  bound {:.1e}",
                if c.passed { "ok" } else { "FAIL" },
                c.name,
                c.cases,
                c.worst,
                c.bound
            );
        }
        ok &= report.passed();
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn init_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("DNE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::config(format!("DNE_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(Failure::config)
}

fn run(cli: Cli) -> CmdResult {
    init_threads()?;
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Gen {
            out,
            count,
            seed,
            corruption,
        } => cmd_gen(config, &out, count, seed, corruption),
        Command::Train {
            data,
            out,
            modules,
            samples,
            epochs,
            seed,
        } => cmd_train(config, &data, &out, modules, samples, epochs, seed),
        Command::Refine { ckpt, instance, out } => cmd_refine(&ckpt, &instance, &out),
        Command::Eval { ckpt, data, csv } => cmd_eval(&ckpt, &data, csv.as_deref()),
        Command::Verify {
            suite,
            seed,
            corrupt_gradient,
        } => cmd_verify(suite, seed, corrupt_gradient),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
