//! Command-line front end: dataset generation, training, evaluation,
//! single-sample inference and report plotting.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid flags or config,
//! 3 unreadable or unwritable files, 4 incompatible model and data.

mod config;
mod plot;
mod prediction;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::{ConfigError, RunConfig, RUN_CONFIG_SCHEMA_VERSION};
pub use plot::{errors_path, render_svg};
pub use prediction::{PredictionFile, PREDICTION_FLOATS, PREDICTION_LAYOUT};

use crate::metrics::{MetricsReport, PairErrors};
use crate::synthdata::{generate_dataset, load_dataset, DatasetConfig, PrimitiveKind, SynthError};
use crate::trainer::{evaluate_checkpoint, train, Checkpoint, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Incompatible(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Incompatible(_) => 4,
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io(_) | SynthError::Json(_) | SynthError::Format(_) => CliError::Io(e.to_string()),
            SynthError::InvalidConfig(_) | SynthError::InvalidOcclusion(_) | SynthError::InvalidRange(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io { .. } | TrainError::Checkpoint(_) => CliError::Io(e.to_string()),
            TrainError::IncompatibleConfig(_) => CliError::Incompatible(e.to_string()),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Data(d) => d.into(),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(format!("config: {e}"))
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "catpose", version, about = "Category-agnostic pose, size and shape estimation", propagate_version = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset of partial observations.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a metrics report.
    Eval(EvalArgs),
    /// Predict pose, size and dense shape for one sample.
    Infer(InferArgs),
    /// Plot one or more reports as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated: box, cylinder, cone, sphere, capsule, l_bracket.
    #[arg(long, value_delimiter = ',', default_value = "box,cylinder,cone,l_bracket", value_parser = parse_kind)]
    pub categories: Vec<PrimitiveKind>,
    #[arg(long, default_value_t = 2)]
    pub per_category: usize,
    #[arg(long, default_value_t = 20)]
    pub views: usize,
    /// Percent of visible pixels hidden by an occluder.
    #[arg(long, default_value = "0", value_parser = ["0", "25", "50", "75"])]
    pub occlusion: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1024)]
    pub n_points: usize,
    #[arg(long, default_value_t = 32)]
    pub d_f: usize,
}

fn parse_kind(s: &str) -> Result<PrimitiveKind, String> {
    s.parse().map_err(|e: SynthError| e.to_string())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Flat JSON run config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
    /// `KEY=VALUE` override applied on top of the config; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from this checkpoint; only `epochs` and `max_steps` of the
    /// config are used then.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Report JSON; per-pair errors go to `NAME.errors.json` beside it.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Dataset directory or manifest holding the sample.
    #[arg(long)]
    pub sample: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub report: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let cfg = DatasetConfig {
        categories: a.categories,
        instances_per_category: a.per_category,
        views_per_instance: a.views,
        occlusion_percent: a.occlusion.parse().expect("value parser admits only integers"),
        seed: a.seed,
        n_points: a.n_points,
        d_f: a.d_f,
        ..DatasetConfig::default()
    };
    cfg.validate()?;
    let m = generate_dataset(&cfg, &a.out)?;
    println!("{} samples, {} points, d_f {}, occlusion {}%", m.samples.len(), m.n_points, m.d_f, cfg.occlusion_percent);
    for s in &m.samples {
        println!("{:>5} {:<10} instance {:>3} view {:>3}", s.index, s.category.name(), s.instance, s.view);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn load_run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let base = match path {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p).map_err(|e| io(p, e))?)?,
        None => RunConfig::default(),
    };
    Ok(base.with_overrides(overrides)?)
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = load_run_config(a.config.as_deref(), &a.overrides)?;
    let summary = train(&cfg.train, &cfg.model, &a.data, &a.out, a.resume.as_deref())?;
    if let (Some(f), Some(l)) = (summary.first, summary.last) {
        println!("steps {}  loss {:.6} -> {:.6}", l.step, f.total, l.total);
    }
    println!("checkpoint {} (epoch {}, step {})", a.out.display(), summary.state.epoch, summary.state.step);
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).expect("serializes");
    fs::write(path, text + "\n").map_err(|e| io(path, e))
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let out = evaluate_checkpoint(&a.ckpt, &a.data)?;
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    }
    write_json(&a.report, &out.report)?;
    write_json(&errors_path(&a.report), &out.errors)?;
    println!("{}", out.report.to_json());
    println!("samples {}  mean latency {:.2} ms", out.errors.ious.len(), out.latency_ms);
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let data = load_dataset(&a.sample)?;
    let s = data
        .samples
        .get(a.index)
        .ok_or_else(|| CliError::Usage(format!("--index {} out of range ({} samples)", a.index, data.samples.len())))?;
    crate::trainer::check_compatible(ck.model.config(), s.partial.len(), s.d_f)?;
    let pred = ck.model.model_forward(s).map_err(|e| CliError::Failed(e.to_string()))?;
    PredictionFile::from_prediction(&pred).write(&a.out)?;
    let t = pred.translation;
    let e = pred.size.extents();
    println!("translation [{:.4}, {:.4}, {:.4}] m  size [{:.4}, {:.4}, {:.4}] m", t.x, t.y, t.z, e.x, e.y, e.z);
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Reads a report and its per-pair errors.
pub fn read_report(path: &Path) -> Result<(MetricsReport, PairErrors), CliError> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    let report: MetricsReport = serde_json::from_str(&text).map_err(|e| io(path, e))?;
    report.validate().map_err(|e| io(path, e))?;
    let ep = errors_path(path);
    let text = fs::read_to_string(&ep).map_err(|e| io(&ep, e))?;
    let errors: PairErrors = serde_json::from_str(&text).map_err(|e| io(&ep, e))?;
    Ok((report, errors))
}

fn cmd_plot(a: PlotArgs) -> Result<(), CliError> {
    let mut entries = Vec::new();
    for p in &a.report {
        let (_, errors) = read_report(p)?;
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string());
        entries.push((name, errors));
    }
    fs::write(&a.out, render_svg(&entries)).map_err(|e| io(&a.out, e))?;
    println!("wrote {}", a.out.display());
    Ok(())
}
