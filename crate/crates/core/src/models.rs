//! Explicit time stepping for the five denoising models.
//!
//! * `Tcpde`: telegraph equations for both the image `I` and the edge map
//!   `u`, plus the parabolic fidelity variable `v`.
//! * `Acpde`: the parabolic coupled system (`I`, `u`, `v` all first order
//!   in time); `v` is held at zero on the image border.
//! * `Sys`: parabolic `I` driven by a telegraph edge map `u`.
//! * `Cao` / `Tde`: a single telegraph equation for `I` with a Perona-Malik
//!   diffusivity of the smoothed or raw gradient.
//!
//! Two-level updates are written in velocity form,
//! `X' = X + ((X - X_prev) + tau^2 F) / (1 + damping tau)`, which is the
//! same recurrence as `(1 + d tau) X' = (2 + d tau) X - X_prev + tau^2 F` but
//! leaves a field with zero velocity and zero forcing bitwise unchanged.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conv::{convolve, GaussianKernel};
use crate::error::{Error, Result};
use crate::grid::{self, div_weighted_field, grad_magnitude_field, laplacian_field, ImageGrid};

/// Any sample whose magnitude exceeds this is treated as a blowup.
pub const BLOWUP_LIMIT: f64 = 1e6;

/// Floor on `|grad I|` and `|s|` wherever they appear in a denominator.
pub const REGULARIZATION: f64 = 1e-6;

/// Default saturation of the truncation function `h`: the squared maximum
/// 8-bit gray level.
pub const DEFAULT_H_CAP: f64 = 255.0 * 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTag {
    Tde,
    Cao,
    Sys,
    Acpde,
    Tcpde,
}

impl ModelTag {
    /// All models in table order, proposed model last.
    pub const ALL: [ModelTag; 5] = [
        ModelTag::Tde,
        ModelTag::Cao,
        ModelTag::Sys,
        ModelTag::Acpde,
        ModelTag::Tcpde,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelTag::Tde => "TDE",
            ModelTag::Cao => "Cao",
            ModelTag::Sys => "SYS",
            ModelTag::Acpde => "ACPDE",
            ModelTag::Tcpde => "TCPDE",
        }
    }
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tde" | "tdm" => Ok(ModelTag::Tde),
            "cao" => Ok(ModelTag::Cao),
            "sys" => Ok(ModelTag::Sys),
            "acpde" => Ok(ModelTag::Acpde),
            "tcpde" | "proposed" => Ok(ModelTag::Tcpde),
            other => Err(Error::Config(vec![format!("unknown model '{other}'")])),
        }
    }
}

/// How the fidelity weight `lambda^n` is obtained each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LambdaMode {
    Constant {
        value: f64,
    },
    /// Rudin-Osher-Fatemi noise-variance estimate; needs the noise sigma.
    RofDynamic,
}

impl Default for LambdaMode {
    fn default() -> Self {
        LambdaMode::Constant { value: 0.05 }
    }
}

/// What `h` is applied to: `|grad I_xi|` or `|grad I_xi|^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HArgument {
    Magnitude,
    Squared,
}

/// Diffusivity of the SYS image equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SysDiffusivity {
    #[default]
    PeronaMalik,
    /// `1 / max(|s|, REGULARIZATION)`.
    Reciprocal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcpdeParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub nu: f64,
    /// Edge threshold `k` of `g(u) = 1 / (1 + |u_xi| / k^2)`.
    #[serde(rename = "k")]
    pub edge_threshold: f64,
    pub h_cap: f64,
    pub h_argument: HArgument,
    pub lambda: LambdaMode,
}

impl Default for TcpdeParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 20.0,
            kappa: 1.0,
            nu: 1.0,
            edge_threshold: 5.0,
            h_cap: DEFAULT_H_CAP,
            h_argument: HArgument::Magnitude,
            lambda: LambdaMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcpdeParams {
    pub kappa: f64,
    pub nu: f64,
    #[serde(rename = "k")]
    pub edge_threshold: f64,
    pub h_cap: f64,
    pub h_argument: HArgument,
    pub lambda: LambdaMode,
}

impl Default for AcpdeParams {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            nu: 1.0,
            edge_threshold: 5.0,
            h_cap: DEFAULT_H_CAP,
            h_argument: HArgument::Squared,
            lambda: LambdaMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SysParams {
    /// Balance `lambda` between diffusion and relaxation of `u`, in (0, 1).
    pub balance: f64,
    /// Perona-Malik threshold `K`.
    #[serde(rename = "K")]
    pub gradient_threshold: f64,
    pub diffusivity: SysDiffusivity,
}

impl Default for SysParams {
    fn default() -> Self {
        Self {
            balance: 0.1,
            gradient_threshold: 5.0,
            diffusivity: SysDiffusivity::PeronaMalik,
        }
    }
}

/// Parameters shared by the TDE and Cao telegraph models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TelegraphParams {
    /// Damping `gamma`.
    pub gamma: f64,
    #[serde(rename = "K")]
    pub gradient_threshold: f64,
}

impl TelegraphParams {
    pub fn tde_default() -> Self {
        Self {
            gamma: 5.0,
            gradient_threshold: 15.0,
        }
    }

    pub fn cao_default() -> Self {
        Self {
            gamma: 20.0,
            gradient_threshold: 6.0,
        }
    }
}

impl Default for TelegraphParams {
    fn default() -> Self {
        Self::tde_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum ModelKind {
    Tcpde(TcpdeParams),
    Acpde(AcpdeParams),
    Sys(SysParams),
    Cao(TelegraphParams),
    Tde(TelegraphParams),
}

impl ModelKind {
    pub fn tag(&self) -> ModelTag {
        match self {
            ModelKind::Tcpde(_) => ModelTag::Tcpde,
            ModelKind::Acpde(_) => ModelTag::Acpde,
            ModelKind::Sys(_) => ModelTag::Sys,
            ModelKind::Cao(_) => ModelTag::Cao,
            ModelKind::Tde(_) => ModelTag::Tde,
        }
    }

    pub fn default_for(tag: ModelTag) -> Self {
        match tag {
            ModelTag::Tcpde => ModelKind::Tcpde(TcpdeParams::default()),
            ModelTag::Acpde => ModelKind::Acpde(AcpdeParams::default()),
            ModelTag::Sys => ModelKind::Sys(SysParams::default()),
            ModelTag::Cao => ModelKind::Cao(TelegraphParams::cao_default()),
            ModelTag::Tde => ModelKind::Tde(TelegraphParams::tde_default()),
        }
    }

    fn lambda_mode(&self) -> Option<&LambdaMode> {
        match self {
            ModelKind::Tcpde(p) => Some(&p.lambda),
            ModelKind::Acpde(p) => Some(&p.lambda),
            _ => None,
        }
    }
}

/// Full parameter set of one solver run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Time step `tau`.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Spatial step; overrides the input grid's spacing.
    #[serde(default = "default_one")]
    pub spacing: f64,
    /// Standard deviation of the smoothing kernel `G_xi`.
    #[serde(default = "default_one")]
    pub xi: f64,
    #[serde(flatten)]
    pub kind: ModelKind,
}

fn default_tau() -> f64 {
    0.2
}

fn default_one() -> f64 {
    1.0
}

impl ModelParams {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            tau: default_tau(),
            spacing: 1.0,
            xi: 1.0,
            kind,
        }
    }

    /// Defaults for `tag` with `tau = 0.2`, unit spacing and `xi = 1`.
    pub fn default_for(tag: ModelTag) -> Self {
        Self::new(ModelKind::default_for(tag))
    }

    pub fn tag(&self) -> ModelTag {
        self.kind.tag()
    }

    /// Checks every parameter, reporting all offending keys at once.
    ///
    /// Thresholds may be `+inf`, which turns the diffusivity into 1.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut finite = |key: &str, v: f64| {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(format!("{key} must be finite and > 0 (got {v})"));
            }
        };
        finite("tau", self.tau);
        finite("spacing", self.spacing);
        finite("xi", self.xi);
        match &self.kind {
            ModelKind::Tcpde(p) => {
                finite("alpha", p.alpha);
                finite("beta", p.beta);
                finite("kappa", p.kappa);
                finite("nu", p.nu);
            }
            ModelKind::Acpde(p) => {
                finite("kappa", p.kappa);
                finite("nu", p.nu);
            }
            ModelKind::Sys(_) => {}
            ModelKind::Cao(p) | ModelKind::Tde(p) => finite("gamma", p.gamma),
        }
        let thresholds: &[(&str, f64)] = match &self.kind {
            ModelKind::Tcpde(p) => &[("k", p.edge_threshold), ("h_cap", p.h_cap)],
            ModelKind::Acpde(p) => &[("k", p.edge_threshold), ("h_cap", p.h_cap)],
            ModelKind::Sys(p) => &[("K", p.gradient_threshold)],
            ModelKind::Cao(p) | ModelKind::Tde(p) => &[("K", p.gradient_threshold)],
        };
        for &(key, v) in thresholds {
            if !(v > 0.0) {
                bad.push(format!("{key} must be > 0 (got {v})"));
            }
        }
        if let ModelKind::Sys(p) = &self.kind {
            if !(p.balance > 0.0 && p.balance < 1.0) {
                bad.push(format!("balance must lie in (0, 1) (got {})", p.balance));
            }
        }
        if let Some(LambdaMode::Constant { value }) = self.kind.lambda_mode() {
            if !(value.is_finite() && *value >= 0.0) {
                bad.push(format!(
                    "lambda.value must be finite and >= 0 (got {value})"
                ));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Edge-stopping function `1 / (1 + |u_xi| / k^2)`.
#[inline]
pub fn edge_diffusivity(u_smoothed: f64, k_thresh: f64) -> f64 {
    1.0 / (1.0 + u_smoothed.abs() / (k_thresh * k_thresh))
}

/// Perona-Malik diffusivity `1 / (1 + (s / K)^2)`.
#[inline]
pub fn pm_diffusivity(s: f64, k_thresh: f64) -> f64 {
    let r = s / k_thresh;
    1.0 / (1.0 + r * r)
}

/// Regularized `1 / |s|`.
#[inline]
pub fn reciprocal_diffusivity(s: f64) -> f64 {
    1.0 / s.abs().max(REGULARIZATION)
}

/// Truncation `h(theta) = 0.1 + min(theta^2, cap)`.
#[inline]
pub fn h_truncate(theta: f64, cap: f64) -> f64 {
    0.1 + (theta * theta).min(cap)
}

/// Convergence test: stop once `|I^{p+1} - I^p|^2 / |I^p|^2 <= epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
}

fn default_epsilon() -> f64 {
    1e-4
}

fn default_max_iters() -> usize {
    1000
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            epsilon: default_epsilon(),
            max_iters: default_max_iters(),
        }
    }
}

impl StopRule {
    pub fn new(epsilon: f64, max_iters: usize) -> Result<Self> {
        let rule = Self { epsilon, max_iters };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            bad.push(format!("stop.epsilon must be > 0 (got {})", self.epsilon));
        }
        if self.max_iters == 0 {
            bad.push("stop.max_iters must be >= 1".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Time levels of one run. Fields a model does not use stay identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    /// `I^n`
    pub image: ImageGrid,
    /// `I^{n-1}`
    pub image_prev: ImageGrid,
    /// `u^n`
    pub edge: ImageGrid,
    /// `u^{n-1}`
    pub edge_prev: ImageGrid,
    /// `v^n`
    pub fidelity: ImageGrid,
    /// `I_0`, never modified.
    pub observed: ImageGrid,
    /// Current time level `n`; 1 right after initialization.
    pub iteration: usize,
    /// Most recent `lambda^n`.
    pub lambda: f64,
}

impl SolverState {
    /// Sets up levels 0 and 1: `I^1 = I^0 = I_0`, `u^1 = u^0`, `v = 0`.
    ///
    /// The coupled models start from `u^0 = G_xi * |grad I_0|^2`; SYS starts
    /// from `u^0 = |grad I_0|`.
    pub fn init(observed: &ImageGrid, params: &ModelParams) -> Result<Self> {
        params.validate()?;
        let (w, h) = observed.dims();
        if w < 3 || h < 3 {
            return Err(Error::domain(format!(
                "solvers need at least a 3x3 image, got {w}x{h}"
            )));
        }
        if !observed.all_finite() {
            return Err(Error::domain("observed image contains non-finite samples"));
        }
        let observed = observed.clone().with_spacing(params.spacing)?;
        let kernel = GaussianKernel::new(params.xi)?;
        if kernel.radius() >= w.min(h) {
            return Err(Error::domain(format!(
                "xi = {} needs an image larger than {w}x{h}",
                params.xi
            )));
        }
        let zero = observed.same_shape(0.0);
        let (edge, lambda) = match &params.kind {
            ModelKind::Tcpde(_) | ModelKind::Acpde(_) => {
                let sq = grid::grad_magnitude_sq_field(&observed);
                (convolve(&sq, &kernel)?, 0.0)
            }
            ModelKind::Sys(_) => (grad_magnitude_field(&observed), 0.0),
            ModelKind::Cao(_) | ModelKind::Tde(_) => (zero.clone(), 0.0),
        };
        let lambda = match params.kind.lambda_mode() {
            Some(LambdaMode::Constant { value }) => *value,
            _ => lambda,
        };
        Ok(Self {
            image: observed.clone(),
            image_prev: observed.clone(),
            edge_prev: edge.clone(),
            edge,
            fidelity: zero,
            observed,
            iteration: 1,
            lambda,
        })
    }
}

/// Free-function form of [`SolverState::init`].
pub fn init_state(observed: &ImageGrid, params: &ModelParams) -> Result<SolverState> {
    SolverState::init(observed, params)
}

/// Fidelity weight for the current level.
///
/// In ROF mode this is
/// `-1 / (2 sigma^2 P) * sum(|grad I| - grad I_0 . grad I / |grad I|_eps)`
/// over the `P` pixels, with `|grad I|_eps = max(|grad I|, 1e-6)`, clamped
/// at zero.
pub fn compute_lambda(state: &SolverState, sigma: Option<f64>, mode: &LambdaMode) -> Result<f64> {
    lambda_from(&state.image, &state.observed, sigma, mode)
}

pub(crate) fn lambda_from(
    current: &ImageGrid,
    observed: &ImageGrid,
    sigma: Option<f64>,
    mode: &LambdaMode,
) -> Result<f64> {
    match mode {
        LambdaMode::Constant { value } => Ok(*value),
        LambdaMode::RofDynamic => {
            let sigma = match sigma {
                Some(s) if s > 0.0 && s.is_finite() => s,
                other => {
                    return Err(Error::domain(format!(
                        "dynamic lambda needs a positive noise sigma, got {other:?}"
                    )))
                }
            };
            current.check_same_dims(observed)?;
            let (w, h) = current.dims();
            let mut total = 0.0;
            for j in 0..h {
                for i in 0..w {
                    let (gx, gy) = grid::central_at(current, i, j);
                    let (ox, oy) = grid::central_at(observed, i, j);
                    let mag = gx.hypot(gy);
                    total += mag - (ox * gx + oy * gy) / mag.max(REGULARIZATION);
                }
            }
            let lambda = -total / (2.0 * sigma * sigma * (w * h) as f64);
            Ok(lambda.max(0.0))
        }
    }
}

/// `x + (x - x_prev + forcing) / (1 + damping)` pixelwise.
fn telegraph_update(
    x: &ImageGrid,
    x_prev: &ImageGrid,
    forcing: impl Fn(usize) -> f64,
    damping: f64,
) -> ImageGrid {
    let denom = 1.0 + damping;
    let mut out = x.clone();
    for (k, (o, &p)) in out.data_mut().iter_mut().zip(x_prev.data()).enumerate() {
        let cur = *o;
        *o = cur + ((cur - p) + forcing(k)) / denom;
    }
    out
}

fn h_field(grad: &ImageGrid, arg: HArgument, cap: f64) -> ImageGrid {
    match arg {
        HArgument::Magnitude => grad.map(|t| h_truncate(t, cap)),
        HArgument::Squared => grad.map(|t| h_truncate(t * t, cap)),
    }
}

fn edge_weights(edge: &ImageGrid, kernel: &GaussianKernel, k: f64) -> Result<ImageGrid> {
    let smoothed = convolve(edge, kernel)?;
    let weights = smoothed.map(|s| edge_diffusivity(s, k));
    if cfg!(debug_assertions) {
        let floor = edge_diffusivity(smoothed.max_abs(), k);
        debug_assert!(weights
            .data()
            .iter()
            .all(|&g| g <= 1.0 && g >= floor * (1.0 - 1e-12)));
    }
    Ok(weights)
}

fn mismatch(params: &ModelParams, want: ModelTag) -> Error {
    Error::domain(format!(
        "{want} step called with {} parameters",
        params.tag()
    ))
}

/// Finite-field and magnitude checks after a step.
fn check_health(state: &SolverState) -> Result<()> {
    let fields = [
        ("I", &state.image),
        ("u", &state.edge),
        ("v", &state.fidelity),
    ];
    for (name, f) in fields {
        if let Some(pos) = f.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Blowup {
                iteration: state.iteration,
                detail: format!(
                    "{name} is non-finite at pixel ({}, {})",
                    pos % f.width(),
                    pos / f.width()
                ),
            });
        }
    }
    let peak = state.image.max_abs();
    if peak > BLOWUP_LIMIT {
        return Err(Error::Blowup {
            iteration: state.iteration,
            detail: format!("max |I| = {peak:.3e} exceeds {BLOWUP_LIMIT:.0e}"),
        });
    }
    if !state.lambda.is_finite() {
        return Err(Error::Blowup {
            iteration: state.iteration,
            detail: "lambda is non-finite".to_string(),
        });
    }
    Ok(())
}

fn advance(
    state: &mut SolverState,
    image: ImageGrid,
    edge: Option<ImageGrid>,
    fidelity: Option<ImageGrid>,
) -> Result<()> {
    state.image_prev = std::mem::replace(&mut state.image, image);
    if let Some(edge) = edge {
        state.edge_prev = std::mem::replace(&mut state.edge, edge);
    }
    if let Some(fidelity) = fidelity {
        state.fidelity = fidelity;
    }
    state.iteration += 1;
    check_health(state)
}

/// One step of the telegraph-coupled model: `u`, then `v`, then `lambda`,
/// then `I` from `g(u^{n+1})` and `v^{n+1}`.
pub fn tcpde_step(state: &mut SolverState, params: &ModelParams, sigma: Option<f64>) -> Result<()> {
    let ModelKind::Tcpde(p) = &params.kind else {
        return Err(mismatch(params, ModelTag::Tcpde));
    };
    let tau = params.tau;
    let tau2 = tau * tau;
    let kernel = GaussianKernel::new(params.xi)?;

    let smoothed = convolve(&state.image, &kernel)?;
    let h = h_field(&grad_magnitude_field(&smoothed), p.h_argument, p.h_cap);
    let lap_u = laplacian_field(&state.edge);
    let half_nu2 = 0.5 * p.nu * p.nu;
    let (u, hd, lu) = (state.edge.data(), h.data(), lap_u.data());
    let edge_next = telegraph_update(
        &state.edge,
        &state.edge_prev,
        |k| p.kappa * tau2 * (hd[k] - u[k] + half_nu2 * lu[k]),
        p.beta * tau,
    );

    let fidelity_next = fidelity_update(state, tau)?;

    let lambda = lambda_from(&state.image, &state.observed, sigma, &p.lambda)?;
    state.lambda = lambda;

    let weights = edge_weights(&edge_next, &kernel, p.edge_threshold)?;
    let div = div_weighted_field(&weights, &state.image)?;
    let (d, v) = (div.data(), fidelity_next.data());
    let image_next = telegraph_update(
        &state.image,
        &state.image_prev,
        |k| tau2 * d[k] - 2.0 * tau2 * lambda * v[k],
        p.alpha * tau,
    );
    advance(state, image_next, Some(edge_next), Some(fidelity_next))
}

/// `v + tau lap(v) - tau (I_0 - I)` with mirror boundaries.
fn fidelity_update(state: &SolverState, tau: f64) -> Result<ImageGrid> {
    let lap_v = laplacian_field(&state.fidelity);
    let mut next = state.fidelity.clone();
    let (lv, i0, i) = (lap_v.data(), state.observed.data(), state.image.data());
    for (k, o) in next.data_mut().iter_mut().enumerate() {
        *o += tau * lv[k] - tau * (i0[k] - i[k]);
    }
    Ok(next)
}

/// One forward-Euler step of the parabolic coupled model.
pub fn acpde_step(state: &mut SolverState, params: &ModelParams, sigma: Option<f64>) -> Result<()> {
    let ModelKind::Acpde(p) = &params.kind else {
        return Err(mismatch(params, ModelTag::Acpde));
    };
    let tau = params.tau;
    let kernel = GaussianKernel::new(params.xi)?;

    let smoothed = convolve(&state.image, &kernel)?;
    let h = h_field(&grad_magnitude_field(&smoothed), p.h_argument, p.h_cap);
    let lap_u = laplacian_field(&state.edge);
    let half_nu2 = 0.5 * p.nu * p.nu;
    let mut edge_next = state.edge.clone();
    {
        let (hd, lu) = (h.data(), lap_u.data());
        for (k, o) in edge_next.data_mut().iter_mut().enumerate() {
            let u = *o;
            *o = u + tau * p.kappa * (hd[k] - u + half_nu2 * lu[k]);
        }
    }

    // v = 0 on the border pixels; interior stencils never reach past them.
    let mut fidelity_next = fidelity_update(state, tau)?;
    zero_border(&mut fidelity_next);

    let lambda = lambda_from(&state.image, &state.observed, sigma, &p.lambda)?;
    state.lambda = lambda;

    let weights = edge_weights(&edge_next, &kernel, p.edge_threshold)?;
    let div = div_weighted_field(&weights, &state.image)?;
    let mut image_next = state.image.clone();
    {
        let (d, v) = (div.data(), fidelity_next.data());
        for (k, o) in image_next.data_mut().iter_mut().enumerate() {
            *o += tau * (d[k] - 2.0 * lambda * v[k]);
        }
    }
    advance(state, image_next, Some(edge_next), Some(fidelity_next))
}

fn zero_border(g: &mut ImageGrid) {
    let (w, h) = g.dims();
    for i in 0..w {
        g.set(i, 0, 0.0);
        g.set(i, h - 1, 0.0);
    }
    for j in 0..h {
        g.set(0, j, 0.0);
        g.set(w - 1, j, 0.0);
    }
}

/// One step of the SYS hyperbolic-parabolic system.
pub fn sys_step(state: &mut SolverState, params: &ModelParams) -> Result<()> {
    let ModelKind::Sys(p) = &params.kind else {
        return Err(mismatch(params, ModelTag::Sys));
    };
    let tau = params.tau;
    let tau2 = tau * tau;

    let grad = grad_magnitude_field(&state.image);
    let lap_u = laplacian_field(&state.edge);
    let lam = p.balance;
    let (u, gd, lu) = (state.edge.data(), grad.data(), lap_u.data());
    let edge_next = telegraph_update(
        &state.edge,
        &state.edge_prev,
        |k| tau2 * (lam * lu[k] + (1.0 - lam) * (gd[k] - u[k])),
        tau,
    );

    let weights = match p.diffusivity {
        SysDiffusivity::PeronaMalik => state.edge.map(|s| pm_diffusivity(s, p.gradient_threshold)),
        SysDiffusivity::Reciprocal => state.edge.map(reciprocal_diffusivity),
    };
    let div = div_weighted_field(&weights, &state.image)?;
    let mut image_next = state.image.clone();
    for (o, d) in image_next.data_mut().iter_mut().zip(div.data()) {
        *o += tau * d;
    }
    advance(state, image_next, Some(edge_next), None)
}

fn telegraph_only_step(
    state: &mut SolverState,
    params: &ModelParams,
    smoothed: bool,
) -> Result<()> {
    let p = match (&params.kind, smoothed) {
        (ModelKind::Cao(p), true) | (ModelKind::Tde(p), false) => p,
        _ => {
            let want = if smoothed {
                ModelTag::Cao
            } else {
                ModelTag::Tde
            };
            return Err(mismatch(params, want));
        }
    };
    let tau = params.tau;
    let tau2 = tau * tau;
    let grad = if smoothed {
        let kernel = GaussianKernel::new(params.xi)?;
        grad_magnitude_field(&convolve(&state.image, &kernel)?)
    } else {
        grad_magnitude_field(&state.image)
    };
    let weights = grad.map(|s| pm_diffusivity(s, p.gradient_threshold));
    let div = div_weighted_field(&weights, &state.image)?;
    let d = div.data();
    let image_next = telegraph_update(
        &state.image,
        &state.image_prev,
        |k| tau2 * d[k],
        p.gamma * tau,
    );
    advance(state, image_next, None, None)
}

/// Telegraph-diffusion step with `g(|grad I|)`.
pub fn tde_step(state: &mut SolverState, params: &ModelParams) -> Result<()> {
    telegraph_only_step(state, params, false)
}

/// Telegraph-diffusion step with `g(|grad G_xi * I|)`.
pub fn cao_step(state: &mut SolverState, params: &ModelParams) -> Result<()> {
    telegraph_only_step(state, params, true)
}

/// Dispatches to the step of `params`' model.
pub fn step(state: &mut SolverState, params: &ModelParams, sigma: Option<f64>) -> Result<()> {
    match params.kind {
        ModelKind::Tcpde(_) => tcpde_step(state, params, sigma),
        ModelKind::Acpde(_) => acpde_step(state, params, sigma),
        ModelKind::Sys(_) => sys_step(state, params),
        ModelKind::Cao(_) => cao_step(state, params),
        ModelKind::Tde(_) => tde_step(state, params),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub relative_change: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub image: ImageGrid,
    pub trace: Vec<TraceRow>,
    /// Number of steps taken.
    pub iterations: usize,
    pub converged: bool,
    pub final_change: f64,
}

/// `|next - prev|^2 / |prev|^2`, or the absolute squared change when
/// `prev` is identically zero.
pub fn relative_change(prev: &ImageGrid, next: &ImageGrid) -> f64 {
    let diff: f64 = prev
        .data()
        .iter()
        .zip(next.data())
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    let base = prev.norm_sq();
    if base == 0.0 {
        diff
    } else {
        diff / base
    }
}

/// Iterates until the stopping rule holds or `max_iters` steps are taken.
pub fn run(
    observed: &ImageGrid,
    params: &ModelParams,
    stop: &StopRule,
    sigma: Option<f64>,
) -> Result<RunOutcome> {
    run_with(observed, params, stop, sigma, |_| {})
}

/// Like [`run`], calling `observer` with the state after each step.
pub fn run_with(
    observed: &ImageGrid,
    params: &ModelParams,
    stop: &StopRule,
    sigma: Option<f64>,
    mut observer: impl FnMut(&SolverState),
) -> Result<RunOutcome> {
    stop.validate()?;
    let mut state = SolverState::init(observed, params)?;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut final_change = f64::NAN;
    for _ in 0..stop.max_iters {
        step(&mut state, params, sigma)?;
        let change = relative_change(&state.image_prev, &state.image);
        trace.push(TraceRow {
            iteration: state.iteration - 1,
            relative_change: change,
            lambda: state.lambda,
        });
        observer(&state);
        final_change = change;
        if change <= stop.epsilon {
            converged = true;
            break;
        }
    }
    Ok(RunOutcome {
        iterations: trace.len(),
        image: state.image,
        trace,
        converged,
        final_change,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_functions() {
        assert_eq!(edge_diffusivity(0.0, 2.0), 1.0);
        assert_eq!(edge_diffusivity(4.0, 2.0), 0.5);
        assert_eq!(edge_diffusivity(-12.0, 2.0), 0.25);
        assert_eq!(pm_diffusivity(0.0, 3.0), 1.0);
        assert_eq!(pm_diffusivity(3.0, 3.0), 0.5);
        assert!((pm_diffusivity(6.0, 3.0) - 0.2).abs() < 1e-15);
        assert_eq!(h_truncate(0.0, DEFAULT_H_CAP), 0.1);
        assert_eq!(h_truncate(300.0, DEFAULT_H_CAP), 0.1 + DEFAULT_H_CAP);
        assert!((h_truncate(3.0, DEFAULT_H_CAP) - 9.1).abs() < 1e-15);
        assert_eq!(reciprocal_diffusivity(0.0), 1e6);
        assert_eq!(reciprocal_diffusivity(-0.5), 2.0);
    }

    #[test]
    fn reference_parameter_sets_validate() {
        let tcpde = |alpha, beta, k| {
            ModelParams::new(ModelKind::Tcpde(TcpdeParams {
                alpha,
                beta,
                edge_threshold: k,
                ..TcpdeParams::default()
            }))
        };
        tcpde(2.0, 20.0, 4.5).validate().unwrap();
        tcpde(1.0, 20.0, 1.15).validate().unwrap();
        tcpde(2.0, 1.0, 5.0).validate().unwrap();
        ModelParams::new(ModelKind::Cao(TelegraphParams {
            gamma: 20.0,
            gradient_threshold: 6.0,
        }))
        .validate()
        .unwrap();
        ModelParams::new(ModelKind::Sys(SysParams {
            balance: 0.1,
            ..SysParams::default()
        }))
        .validate()
        .unwrap();
        for tag in ModelTag::ALL {
            ModelParams::default_for(tag).validate().unwrap();
        }
    }

    #[test]
    fn validation_lists_every_bad_key() {
        let mut params = ModelParams::new(ModelKind::Tcpde(TcpdeParams {
            alpha: 0.0,
            nu: -1.0,
            ..TcpdeParams::default()
        }));
        params.tau = f64::NAN;
        let Err(Error::Config(msgs)) = params.validate() else {
            panic!("expected config error");
        };
        let joined = msgs.join("\n");
        assert!(joined.contains("alpha"));
        assert!(joined.contains("nu"));
        assert!(joined.contains("tau"));
    }

    #[test]
    fn constant_lambda_mode() {
        let g = ImageGrid::filled(4, 4, 3.0, 1.0).unwrap();
        let l = lambda_from(&g, &g, None, &LambdaMode::Constant { value: 0.8 }).unwrap();
        assert_eq!(l, 0.8);
        assert!(lambda_from(&g, &g, Some(0.0), &LambdaMode::RofDynamic).is_err());
        assert!(lambda_from(&g, &g, None, &LambdaMode::RofDynamic).is_err());
    }

    #[test]
    fn rof_lambda_vanishes_on_observation() {
        let g = ImageGrid::from_fn(6, 5, 1.0, |i, j| ((i * 7 + j * 3) % 5) as f64).unwrap();
        let l = lambda_from(&g, &g, Some(10.0), &LambdaMode::RofDynamic).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn init_levels() {
        let g = ImageGrid::from_fn(8, 8, 1.0, |i, j| (i * 3 + j) as f64).unwrap();
        for tag in ModelTag::ALL {
            let s = init_state(&g, &ModelParams::default_for(tag)).unwrap();
            assert_eq!(s.image, s.image_prev);
            assert_eq!(s.edge, s.edge_prev);
            assert_eq!(s.iteration, 1);
            assert!(s.fidelity.data().iter().all(|&v| v == 0.0));
        }
        let c = ImageGrid::filled(8, 8, 9.0, 1.0).unwrap();
        let s = init_state(&c, &ModelParams::default_for(ModelTag::Tcpde)).unwrap();
        assert!(s.edge.data().iter().all(|&v| v == 0.0));
        assert!(init_state(
            &ImageGrid::new(2, 8, 1.0).unwrap(),
            &ModelParams::default_for(ModelTag::Tde)
        )
        .is_err());
    }

    #[test]
    fn wrong_variant_is_rejected() {
        let g = ImageGrid::filled(8, 8, 1.0, 1.0).unwrap();
        let params = ModelParams::default_for(ModelTag::Tde);
        let mut s = init_state(&g, &params).unwrap();
        assert!(tcpde_step(&mut s, &params, None).is_err());
        assert!(cao_step(&mut s, &params).is_err());
        assert!(tde_step(&mut s, &params).is_ok());
    }

    #[test]
    fn unstable_step_reports_blowup() {
        let g = ImageGrid::from_fn(
            16,
            16,
            1.0,
            |i, j| if (i + j) % 2 == 0 { 0.0 } else { 255.0 },
        )
        .unwrap();
        let mut params = ModelParams::new(ModelKind::Acpde(AcpdeParams {
            edge_threshold: 1e6,
            ..AcpdeParams::default()
        }));
        params.tau = 5.0;
        let err = run(&g, &params, &StopRule::new(1e-12, 1000).unwrap(), None).unwrap_err();
        assert!(matches!(err, Error::Blowup { .. }), "{err}");
    }

    #[test]
    fn constant_input_converges_immediately() {
        let g = ImageGrid::filled(10, 10, 128.0, 1.0).unwrap();
        for tag in ModelTag::ALL {
            let out = run(
                &g,
                &ModelParams::default_for(tag),
                &StopRule::default(),
                Some(20.0),
            )
            .unwrap();
            assert!(out.converged);
            assert!(out.iterations <= 2);
            assert_eq!(out.image, g);
        }
    }

    #[test]
    fn relative_change_falls_back_to_absolute() {
        let z = ImageGrid::new(3, 3, 1.0).unwrap();
        let one = z.same_shape(1.0);
        assert_eq!(relative_change(&z, &one), 9.0);
        assert_eq!(relative_change(&one, &one), 0.0);
    }

    #[test]
    fn params_round_trip_through_toml() {
        let text = r#"
            tau = 0.2
            xi = 1.0
            model = "tcpde"
            alpha = 2.0
            beta = 20.0
            k = 4.5
            [lambda]
            mode = "rof_dynamic"
        "#;
        let p: ModelParams = toml::from_str(text).unwrap();
        let ModelKind::Tcpde(t) = &p.kind else {
            panic!()
        };
        assert_eq!(t.alpha, 2.0);
        assert_eq!(t.edge_threshold, 4.5);
        assert_eq!(t.lambda, LambdaMode::RofDynamic);
        assert_eq!(t.nu, 1.0);
        let back: ModelParams = toml::from_str(&toml::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);

        let tde: ModelParams = toml::from_str("model = \"tde\"\ngamma = 5.0\nK = 15.0\n").unwrap();
        assert_eq!(tde.tag(), ModelTag::Tde);
        assert_eq!(tde.tau, 0.2);
    }
}
