//! Batch benchmark over an (image x noise level x model) grid.
//!
//! Cells are independent: each one draws its own seeded noise, runs one
//! solver, and scores the result against the clean image. Cells run on a
//! rayon pool and are sorted by (image, sigma, model) before anything is
//! written, so output order never depends on scheduling.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{add_gaussian_noise, NoiseSpec};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::io;
use crate::metrics::{self, MetricInput, MetricsReport};
use crate::models::{
    self, AcpdeParams, HArgument, ModelKind, ModelParams, ModelTag, RunOutcome, StopRule,
    SysParams, TcpdeParams, TelegraphParams,
};
use crate::phantom::Phantom;

/// Where a clean image comes from: a file, or `phantom:<name>[:<size>]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ImageSource {
    File(PathBuf),
    Phantom { kind: Phantom, size: usize },
}

pub const DEFAULT_PHANTOM_SIZE: usize = 256;

impl ImageSource {
    /// Short name used in CSV rows and artifact file names.
    pub fn label(&self) -> String {
        match self {
            ImageSource::File(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string()),
            ImageSource::Phantom { kind, size } => format!("{kind}{size}"),
        }
    }

    pub fn load(&self) -> Result<ImageGrid> {
        match self {
            ImageSource::File(p) => io::load_image(p),
            ImageSource::Phantom { kind, size } => kind.render(*size),
        }
    }
}

impl TryFrom<String> for ImageSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        let Some(rest) = s.strip_prefix("phantom:") else {
            return Ok(ImageSource::File(PathBuf::from(s)));
        };
        let (name, size) = match rest.split_once(':') {
            Some((name, size)) => {
                let size = size
                    .parse()
                    .map_err(|_| Error::Config(vec![format!("bad phantom size in '{s}'")]))?;
                (name, size)
            }
            None => (rest, DEFAULT_PHANTOM_SIZE),
        };
        Ok(ImageSource::Phantom {
            kind: name.parse()?,
            size,
        })
    }
}

impl From<ImageSource> for String {
    fn from(src: ImageSource) -> String {
        match src {
            ImageSource::File(p) => p.display().to_string(),
            ImageSource::Phantom { kind, size } => format!("phantom:{kind}:{size}"),
        }
    }
}

/// Per-cell artifacts written next to the CSV tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportToggles {
    pub denoised: bool,
    pub ratio: bool,
    pub slice_row: Option<usize>,
    pub surface: bool,
    pub trace: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub images: Vec<ImageSource>,
    pub sigmas: Vec<f64>,
    #[serde(default)]
    pub models: Vec<ModelParams>,
    #[serde(default)]
    pub stop: StopRule,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub metric_input: MetricInput,
    #[serde(default)]
    pub export: ExportToggles,
    /// When set, each cell reports the best-scoring candidate of the
    /// model's search grid instead of the configured parameters.
    #[serde(default)]
    pub tune: Option<TuneSettings>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Checks every field, listing all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.images.is_empty() {
            bad.push("images must list at least one image".to_string());
        }
        if self.sigmas.is_empty() {
            bad.push("sigmas must list at least one noise level".to_string());
        }
        if self.models.is_empty() {
            bad.push("models must list at least one model".to_string());
        }
        for s in &self.sigmas {
            if !(*s >= 0.0 && s.is_finite()) {
                bad.push(format!("sigma must be finite and >= 0 (got {s})"));
            }
        }
        for src in &self.images {
            if let ImageSource::File(p) = src {
                if !p.is_file() {
                    bad.push(format!("image '{}' does not exist", p.display()));
                }
            }
        }
        for (n, m) in self.models.iter().enumerate() {
            if let Err(Error::Config(list)) = m.validate() {
                bad.extend(
                    list.into_iter()
                        .map(|e| format!("models[{n}] ({}): {e}", m.tag())),
                );
            }
        }
        if let Err(Error::Config(list)) = self.stop.validate() {
            bad.extend(list);
        }
        if let Some(t) = &self.tune {
            if t.max_iters == 0 {
                bad.push("tune.max_iters must be >= 1".to_string());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    /// One entry per configured model with the reference defaults.
    pub fn default_models() -> Vec<ModelParams> {
        ModelTag::ALL
            .into_iter()
            .map(ModelParams::default_for)
            .collect()
    }
}

/// Search settings for per-model tuning against the clean image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneSettings {
    /// Iteration budget per candidate. The best iterate within the budget is
    /// kept, so the stopping time is itself a tuned quantity.
    pub max_iters: usize,
}

impl Default for TuneSettings {
    fn default() -> Self {
        Self { max_iters: 300 }
    }
}

/// Candidate parameter sets searched when tuning `base`'s model. Time step,
/// spacing and kernel width are taken from `base`.
pub fn tuning_grid(base: &ModelParams) -> Vec<ModelParams> {
    let with = |kind: ModelKind| ModelParams {
        kind,
        ..base.clone()
    };
    let mut out = Vec::new();
    match &base.kind {
        ModelKind::Tcpde(p) => {
            for k in [2.0, 5.0, 10.0] {
                for kappa in [1.0, 20.0] {
                    out.push(with(ModelKind::Tcpde(TcpdeParams {
                        edge_threshold: k,
                        kappa,
                        ..p.clone()
                    })));
                }
            }
        }
        ModelKind::Acpde(p) => {
            for k in [5.0, 10.0, 20.0] {
                for h_argument in [HArgument::Squared, HArgument::Magnitude] {
                    out.push(with(ModelKind::Acpde(AcpdeParams {
                        edge_threshold: k,
                        h_argument,
                        ..p.clone()
                    })));
                }
            }
        }
        ModelKind::Sys(p) => {
            for threshold in [3.0, 5.0, 10.0] {
                for balance in [0.1, 0.5] {
                    out.push(with(ModelKind::Sys(SysParams {
                        gradient_threshold: threshold,
                        balance,
                        ..p.clone()
                    })));
                }
            }
        }
        ModelKind::Tde(_) | ModelKind::Cao(_) => {
            let gammas: [f64; 2] = if base.tag() == ModelTag::Tde {
                [1.0, 5.0]
            } else {
                [5.0, 20.0]
            };
            for gamma in gammas {
                for threshold in [5.0, 10.0, 15.0] {
                    let p = TelegraphParams {
                        gamma,
                        gradient_threshold: threshold,
                    };
                    out.push(with(match base.tag() {
                        ModelTag::Tde => ModelKind::Tde(p),
                        _ => ModelKind::Cao(p),
                    }));
                }
            }
        }
    }
    out
}

/// Deterministic per-cell noise seed.
pub fn cell_seed(base: u64, image_index: usize, sigma_index: usize) -> u64 {
    let mut x = base ^ ((image_index as u64) << 32) ^ (sigma_index as u64);
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// One benchmark row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub image: String,
    pub sigma: f64,
    pub model: ModelTag,
    pub seed: u64,
    /// Present unless the cell failed.
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

impl CellResult {
    pub fn psnr(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.psnr_db)
    }
}

struct PreparedImage {
    label: String,
    clean: ImageGrid,
    clean_metric: ImageGrid,
}

struct Cell<'a> {
    image: &'a PreparedImage,
    sigma: f64,
    seed: u64,
    params: &'a ModelParams,
}

/// Runs every cell of `cfg`. Per-cell failures are recorded in the result,
/// while invalid configuration or unreadable images abort the whole run.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<Vec<CellResult>> {
    cfg.validate()?;
    let images = cfg
        .images
        .iter()
        .map(|src| {
            let clean = src.load()?;
            Ok(PreparedImage {
                label: src.label(),
                clean_metric: cfg.metric_input.prepare(&clean),
                clean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    for (ii, image) in images.iter().enumerate() {
        for (si, &sigma) in cfg.sigmas.iter().enumerate() {
            for params in &cfg.models {
                cells.push(Cell {
                    image,
                    sigma,
                    seed: cell_seed(cfg.seed, ii, si),
                    params,
                });
            }
        }
    }
    let mut results: Vec<(CellResult, Option<RunArtifacts>)> =
        cells.par_iter().map(|c| run_cell(c, cfg)).collect();
    results.sort_by(|(a, _), (b, _)| {
        a.image
            .cmp(&b.image)
            .then(a.sigma.total_cmp(&b.sigma))
            .then(a.model.cmp(&b.model))
    });
    if let Some(dir) = &cfg.output_dir {
        export_cells(dir, &cfg.export, &results)?;
    }
    Ok(results.into_iter().map(|(r, _)| r).collect())
}

struct RunArtifacts {
    noisy: ImageGrid,
    outcome: RunOutcome,
}

fn run_cell(cell: &Cell<'_>, cfg: &ExperimentConfig) -> (CellResult, Option<RunArtifacts>) {
    let mut result = CellResult {
        image: cell.image.label.clone(),
        sigma: cell.sigma,
        model: cell.params.tag(),
        seed: cell.seed,
        report: None,
        error: None,
    };
    match evaluate_cell(cell, cfg) {
        Ok((report, artifacts)) => {
            result.report = Some(report);
            (result, Some(artifacts))
        }
        Err(e) => {
            result.error = Some(e.to_string());
            (result, None)
        }
    }
}

fn evaluate_cell(cell: &Cell<'_>, cfg: &ExperimentConfig) -> Result<(MetricsReport, RunArtifacts)> {
    let spec = NoiseSpec::new(0.0, cell.sigma, cell.seed)?;
    let noisy = add_gaussian_noise(&cell.image.clean, &spec)?;
    let noisy_metric = cfg.metric_input.prepare(&noisy);
    let reference = &cell.image.clean_metric;
    let sigma = (cell.sigma > 0.0).then_some(cell.sigma);
    let start = Instant::now();
    let (params, outcome) = match &cfg.tune {
        None => {
            let outcome = models::run(&noisy, cell.params, &cfg.stop, sigma)?;
            (cell.params.clone(), outcome)
        }
        Some(t) => tune(&noisy, reference, cell.params, cfg, t, sigma)?,
    };
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let denoised = cfg.metric_input.prepare(&outcome.image);
    let report = MetricsReport {
        image: cell.image.label.clone(),
        model: params.tag(),
        sigma: Some(cell.sigma),
        psnr_db: metrics::psnr(reference, &denoised, metrics::DEFAULT_PEAK)?,
        mssim: metrics::mssim(reference, &denoised)?,
        noisy_psnr_db: Some(metrics::psnr(
            reference,
            &noisy_metric,
            metrics::DEFAULT_PEAK,
        )?),
        noisy_mssim: Some(metrics::mssim(reference, &noisy_metric)?),
        iterations: outcome.iterations,
        converged: outcome.converged,
        final_change: outcome.final_change,
        wall_ms,
        metric_input: cfg.metric_input,
        params,
    };
    Ok((report, RunArtifacts { noisy, outcome }))
}

/// Best iterate over the tuning grid, scored by PSNR against `reference`.
/// Candidates that blow up are skipped.
fn tune(
    noisy: &ImageGrid,
    reference: &ImageGrid,
    base: &ModelParams,
    cfg: &ExperimentConfig,
    settings: &TuneSettings,
    sigma: Option<f64>,
) -> Result<(ModelParams, RunOutcome)> {
    let stop = StopRule {
        epsilon: cfg.stop.epsilon,
        max_iters: settings.max_iters,
    };
    let mut best: Option<(f64, ModelParams, RunOutcome)> = None;
    let mut last_err = None;
    for candidate in tuning_grid(base) {
        let mut top = (f64::NEG_INFINITY, 0, None::<ImageGrid>);
        let mut step = 0;
        let run = models::run_with(noisy, &candidate, &stop, sigma, |s| {
            step += 1;
            let score = metrics::psnr(reference, &cfg.metric_input.prepare(&s.image), 255.0)
                .unwrap_or(f64::NEG_INFINITY);
            if score > top.0 {
                top = (score, step, Some(s.image.clone()));
            }
        });
        let outcome = match run {
            Ok(o) => o,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let (score, iters, Some(image)) = top else {
            continue;
        };
        if best.as_ref().is_none_or(|b| score > b.0) {
            let trace = outcome.trace[..iters].to_vec();
            let final_change = trace[iters - 1].relative_change;
            let outcome = RunOutcome {
                image,
                iterations: iters,
                converged: final_change <= stop.epsilon,
                final_change,
                trace,
            };
            best = Some((score, candidate, outcome));
        }
    }
    match best {
        Some((_, params, outcome)) => Ok((params, outcome)),
        None => Err(last_err.unwrap_or_else(|| Error::domain("empty tuning grid"))),
    }
}

fn artifact_stem(r: &CellResult) -> String {
    format!("{}_s{}_{}", r.image, r.sigma, r.model.name().to_lowercase())
}

fn export_cells(
    dir: &Path,
    toggles: &ExportToggles,
    results: &[(CellResult, Option<RunArtifacts>)],
) -> Result<()> {
    let any = toggles.denoised
        || toggles.ratio
        || toggles.surface
        || toggles.trace
        || toggles.slice_row.is_some();
    if !any {
        return Ok(());
    }
    let cells_dir = dir.join("cells");
    fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;
    for (r, art) in results {
        let Some(art) = art else { continue };
        let stem = artifact_stem(r);
        let file = |suffix: &str| cells_dir.join(format!("{stem}.{suffix}"));
        let image = &art.outcome.image;
        if toggles.denoised {
            io::save_image(image, file("pgm"))?;
        }
        if toggles.ratio {
            let ratio = metrics::ratio_image(&art.noisy, image)?;
            io::save_image(&ratio, file("ratio.pgm"))?;
        }
        if let Some(row) = toggles.slice_row {
            io::write_slice_csv(&metrics::extract_slice(image, row)?, file("slice.csv"))?;
        }
        if toggles.surface {
            io::write_surface(image, file("surface.txt"))?;
        }
        if toggles.trace {
            write_trace_csv(&art.outcome, file("trace.csv"))?;
        }
    }
    Ok(())
}

/// `iteration,relative_change,lambda` per step.
pub fn write_trace_csv(outcome: &RunOutcome, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iteration,relative_change,lambda\n");
    for row in &outcome.trace {
        let _ = writeln!(
            out,
            "{},{:e},{}",
            row.iteration, row.relative_change, row.lambda
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Column index of the timing field in [`results_csv`].
pub const CSV_TIMING_COLUMN: usize = 8;

/// Long-format table: one row per cell.
pub fn results_csv(results: &[CellResult]) -> String {
    let mut out =
        String::from("image,sigma,model,psnr,mssim,iters,converged,final_change,ms,error\n");
    for r in results {
        let _ = match &r.report {
            Some(m) => writeln!(
                out,
                "{},{},{},{},{},{},{},{:e},{:.3},",
                r.image,
                r.sigma,
                r.model,
                m.psnr_db,
                m.mssim,
                m.iterations,
                m.converged,
                m.final_change,
                m.wall_ms
            ),
            None => writeln!(
                out,
                "{},{},{},,,,,,,{}",
                r.image,
                r.sigma,
                r.model,
                csv_field(r.error.as_deref().unwrap_or_default())
            ),
        };
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Pivoted table: one row per (image, sigma) and a PSNR/MSSIM column pair per
/// model, in the order the models first appear.
pub fn pivot_csv(results: &[CellResult]) -> String {
    let mut models: Vec<ModelTag> = Vec::new();
    for r in results {
        if !models.contains(&r.model) {
            models.push(r.model);
        }
    }
    let mut out = String::from("image,sigma");
    for m in &models {
        let _ = write!(out, ",{m}_psnr,{m}_mssim");
    }
    out.push('\n');
    let mut keys: Vec<(&str, f64)> = Vec::new();
    for r in results {
        if !keys.iter().any(|(i, s)| *i == r.image && *s == r.sigma) {
            keys.push((&r.image, r.sigma));
        }
    }
    for (image, sigma) in keys {
        let _ = write!(out, "{image},{sigma}");
        for m in &models {
            let cell = results
                .iter()
                .find(|r| r.image == image && r.sigma == sigma && r.model == *m)
                .and_then(|r| r.report.as_ref());
            let _ = match cell {
                Some(rep) => write!(out, ",{:.2},{:.4}", rep.psnr_db, rep.mssim),
                None => write!(out, ",,"),
            };
        }
        out.push('\n');
    }
    out
}

/// Writes `benchmark.csv`, `benchmark_table.csv`, `benchmark_cells.json` and
/// the resolved configuration `benchmark_config.json` into `dir`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, results: &[CellResult]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("benchmark.csv", results_csv(results))?;
    write("benchmark_table.csv", pivot_csv(results))?;
    write("benchmark_config.json", to_json(cfg))?;
    write("benchmark_cells.json", to_json(&results))?;
    Ok(())
}

fn to_json<T: Serialize + ?Sized>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}
