//! Command-line driver.
//!
//! Exit codes: 0 success, 1 domain error, 2 invalid configuration, 3 I/O or
//! file format error, 4 numerical blowup.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::conv::{add_gaussian_noise, NoiseSpec};
use crate::error::{Error, Result};
use crate::experiment::{self, ExperimentConfig};
use crate::io;
use crate::metrics::{self, MetricInput, MetricsReport};
use crate::models::{self, ModelParams, ModelTag, StopRule};
use crate::phantom::Phantom;

/// Environment variable naming the default benchmark output directory.
pub const OUT_DIR_ENV: &str = "TCPDE_OUT_DIR";
const FALLBACK_OUT_DIR: &str = "tcpde_out";

#[derive(Debug, Parser)]
#[command(
    name = "tcpde",
    version,
    about = "Telegraph-coupled PDE image denoising"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Add seeded Gaussian noise to an image.
    AddNoise(AddNoiseArgs),
    /// Denoise one image with one model.
    Denoise(DenoiseArgs),
    /// Run an (image x sigma x model) grid from a TOML config.
    Benchmark(BenchmarkArgs),
    /// Write diagnostic data files.
    #[command(subcommand)]
    Export(ExportCommand),
    /// PSNR and MSSIM between two images.
    Metrics(MetricsArgs),
    /// Render a synthetic test image.
    Phantom(PhantomArgs),
}

#[derive(Debug, Args)]
pub struct AddNoiseArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub mean: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// tcpde, acpde, sys, cao or tde. Overrides `model` in the params file.
    #[arg(long)]
    pub model: Option<String>,
    /// TOML file with model parameters (same keys as a benchmark model block).
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Parameter override `key=value`; dotted keys reach nested tables.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Noise standard deviation, needed by the dynamic fidelity weight.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Clean image; when given the report scores against it. Otherwise the
    /// report scores against the input.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// JSON report path, default `<output>.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// CSV of iteration, relative change and fidelity weight.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub quantized_metrics: bool,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output_dir` in the config and the environment default.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Tune every model per cell against the clean image.
    #[arg(long)]
    pub tune: bool,
    /// Iteration budget per tuning candidate.
    #[arg(long)]
    pub tune_iters: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum ExportCommand {
    /// One image row as `x,intensity` CSV.
    Slice {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        row: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Rescaled ratio of noisy to denoised.
    Ratio {
        #[arg(long)]
        noisy: PathBuf,
        #[arg(long)]
        denoised: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Whitespace-delimited grid of intensities.
    Surface {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value_t = metrics::DEFAULT_PEAK)]
    pub peak: f64,
    #[arg(long)]
    pub quantized: bool,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// shapes, bricks or mosaic.
    #[arg(long)]
    pub kind: Phantom,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long)]
    pub output: PathBuf,
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Domain(_) | Error::DimensionMismatch { .. } => 1,
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Blowup { .. } => 4,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::AddNoise(a) => cmd_add_noise(&a),
        Command::Denoise(a) => cmd_denoise(&a),
        Command::Benchmark(a) => cmd_benchmark(&a),
        Command::Export(e) => cmd_export(&e),
        Command::Metrics(a) => cmd_metrics(&a),
        Command::Phantom(a) => {
            io::save_image(&a.kind.render(a.size)?, &a.output)?;
            println!("wrote {}", a.output.display());
            Ok(())
        }
    }
}

fn cmd_add_noise(a: &AddNoiseArgs) -> Result<()> {
    let clean = io::load_image(&a.input)?;
    let spec = NoiseSpec::new(a.mean, a.sigma, a.seed)?;
    let noisy = add_gaussian_noise(&clean, &spec)?;
    io::save_image(&noisy, &a.output)?;
    let stored = MetricInput::Quantized.prepare(&noisy);
    println!(
        "sample sigma {:.4} (after 8-bit export {:.4})",
        sample_std(&clean, &noisy),
        sample_std(&clean, &stored)
    );
    Ok(())
}

fn sample_std(a: &crate::ImageGrid, b: &crate::ImageGrid) -> f64 {
    let d: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| y - x).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Builds model parameters from an optional TOML file, a model name and
/// `key=value` overrides, in increasing precedence.
pub fn resolve_params(
    file: Option<&Path>,
    model: Option<&str>,
    overrides: &[String],
) -> Result<ModelParams> {
    let mut table = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(vec![format!("{}: {}", p.display(), e.message())]))?
        }
        None => toml::Table::new(),
    };
    if let Some(m) = model {
        let tag: ModelTag = m.parse()?;
        table.insert("model".into(), tag.name().to_lowercase().into());
    }
    if !table.contains_key("model") {
        return Err(Error::Config(vec![
            "no model given (use --model or a `model` key)".into(),
        ]));
    }
    let mut bad = Vec::new();
    for o in overrides {
        match o.split_once('=') {
            Some((key, value)) => set_dotted(&mut table, key.trim(), parse_value(value.trim())),
            None => bad.push(format!("override '{o}' is not key=value")),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Config(bad));
    }
    let params: ModelParams = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
    params.validate()?;
    Ok(params)
}

fn parse_value(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) {
    match key.split_once('.') {
        Some((head, rest)) => {
            let entry = table
                .entry(head.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if !entry.is_table() {
                *entry = toml::Value::Table(toml::Table::new());
            }
            if let toml::Value::Table(inner) = entry {
                set_dotted(inner, rest, value);
            }
        }
        None => {
            table.insert(key.to_string(), value);
        }
    }
}

#[derive(Serialize)]
struct DenoiseReport<'a> {
    #[serde(flatten)]
    report: &'a MetricsReport,
    stop: StopRule,
    scored_against: &'a str,
}

fn cmd_denoise(a: &DenoiseArgs) -> Result<()> {
    let params = resolve_params(a.params.as_deref(), a.model.as_deref(), &a.overrides)?;
    let defaults = StopRule::default();
    let stop = StopRule::new(
        a.epsilon.unwrap_or(defaults.epsilon),
        a.max_iters.unwrap_or(defaults.max_iters),
    )?;
    let input = io::load_image(&a.input)?;
    let reference = a.reference.as_ref().map(io::load_image).transpose()?;
    let start = Instant::now();
    let outcome = models::run(&input, &params, &stop, a.sigma)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    io::save_image(&outcome.image, &a.output)?;
    if let Some(path) = &a.trace {
        experiment::write_trace_csv(&outcome, path)?;
    }
    let mode = if a.quantized_metrics {
        MetricInput::Quantized
    } else {
        MetricInput::Clamped
    };
    let target = mode.prepare(reference.as_ref().unwrap_or(&input));
    let produced = mode.prepare(&outcome.image);
    let noisy = mode.prepare(&input);
    let with_ref = reference.is_some();
    let report = MetricsReport {
        image: a.input.display().to_string(),
        model: params.tag(),
        sigma: a.sigma,
        psnr_db: metrics::psnr(&target, &produced, metrics::DEFAULT_PEAK)?,
        mssim: metrics::mssim(&target, &produced)?,
        noisy_psnr_db: with_ref
            .then(|| metrics::psnr(&target, &noisy, metrics::DEFAULT_PEAK))
            .transpose()?,
        noisy_mssim: with_ref
            .then(|| metrics::mssim(&target, &noisy))
            .transpose()?,
        iterations: outcome.iterations,
        converged: outcome.converged,
        final_change: outcome.final_change,
        wall_ms,
        metric_input: mode,
        params,
    };
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| a.output.with_extension("json"));
    let body = DenoiseReport {
        report: &report,
        stop,
        scored_against: if with_ref { "reference" } else { "input" },
    };
    let text = serde_json::to_string_pretty(&body).expect("plain data serializes");
    fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;
    println!(
        "{}: {} iterations, converged {}, psnr {:.3} dB, mssim {:.4}",
        report.model, report.iterations, report.converged, report.psnr_db, report.mssim
    );
    Ok(())
}

fn cmd_benchmark(a: &BenchmarkArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let out_dir = a
        .output_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_DIR));
    cfg.output_dir = Some(out_dir.clone());
    if a.tune || a.tune_iters.is_some() {
        let mut t = cfg.tune.take().unwrap_or_default();
        if let Some(n) = a.tune_iters {
            t.max_iters = n;
        }
        cfg.tune = Some(t);
    }
    let results = experiment::run_benchmark(&cfg)?;
    experiment::write_outputs(&out_dir, &cfg, &results)?;
    print!("{}", experiment::pivot_csv(&results));
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} cells, {failed} failed, results in {}",
        results.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_export(e: &ExportCommand) -> Result<()> {
    match e {
        ExportCommand::Slice { input, row, output } => {
            let g = io::load_image(input)?;
            io::write_slice_csv(&metrics::extract_slice(&g, *row)?, output)?;
        }
        ExportCommand::Ratio {
            noisy,
            denoised,
            output,
        } => {
            let r = metrics::ratio_image(&io::load_image(noisy)?, &io::load_image(denoised)?)?;
            io::save_image(&r, output)?;
        }
        ExportCommand::Surface { input, output } => {
            io::write_surface(&io::load_image(input)?, output)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct MetricsOutput {
    #[serde(serialize_with = "finite_or_string")]
    psnr_db: f64,
    mssim: f64,
    metric_input: MetricInput,
}

fn finite_or_string<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&v.to_string())
    }
}

fn cmd_metrics(a: &MetricsArgs) -> Result<()> {
    let mode = if a.quantized {
        MetricInput::Quantized
    } else {
        MetricInput::Clamped
    };
    let r = mode.prepare(&io::load_image(&a.reference)?);
    let t = mode.prepare(&io::load_image(&a.test)?);
    let out = MetricsOutput {
        psnr_db: metrics::psnr(&r, &t, a.peak)?,
        mssim: metrics::mssim(&r, &t)?,
        metric_input: mode,
    };
    println!(
        "{}",
        serde_json::to_string(&out).expect("plain data serializes")
    );
    Ok(())
}
