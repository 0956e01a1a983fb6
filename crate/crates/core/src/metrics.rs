//! Image quality metrics and diagnostic artifacts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::models::{ModelParams, ModelTag};

pub const DEFAULT_PEAK: f64 = 255.0;

/// SSIM window side length.
pub const SSIM_WINDOW: usize = 11;
/// Standard deviation of the Gaussian SSIM window.
pub const SSIM_WINDOW_SIGMA: f64 = 1.5;
/// Luminance stabilizer `(0.01 * 255)^2`.
pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
/// Contrast stabilizer `(0.03 * 255)^2`.
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

const RATIO_EPS: f64 = 1e-6;

pub fn mse(reference: &ImageGrid, test: &ImageGrid) -> Result<f64> {
    reference.check_same_dims(test)?;
    let sum: f64 = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / reference.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
pub fn psnr(reference: &ImageGrid, test: &ImageGrid, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::domain(format!(
            "PSNR peak must be positive, got {peak}"
        )));
    }
    let err = mse(reference, test)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / err).log10())
}

fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (k, t) in taps.iter_mut().enumerate() {
        let d = k as f64 - r;
        *t = (-d * d / (2.0 * SSIM_WINDOW_SIGMA * SSIM_WINDOW_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Separable weighted sum over every fully contained window.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for j in 0..h {
        let row = &src[j * w..(j + 1) * w];
        for i in 0..ow {
            rows[j * ow + i] = taps.iter().zip(&row[i..i + n]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for j in 0..oh {
        for (k, t) in taps.iter().enumerate() {
            let src_row = &rows[(j + k) * ow..(j + k + 1) * ow];
            for (o, v) in out[j * ow..(j + 1) * ow].iter_mut().zip(src_row) {
                *o += t * v;
            }
        }
    }
    out
}

/// Per-window SSIM map over the valid region (`(w-10) x (h-10)` values).
pub fn ssim_map(reference: &ImageGrid, test: &ImageGrid) -> Result<Vec<f64>> {
    reference.check_same_dims(test)?;
    let (w, h) = reference.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::domain(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let taps = ssim_taps();
    let x = reference.data();
    let y = test.data();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, w, h, &taps);
    let mu_y = filter_valid(y, w, h, &taps);
    let e_xx = filter_valid(&xx, w, h, &taps);
    let e_yy = filter_valid(&yy, w, h, &taps);
    let e_xy = filter_valid(&xy, w, h, &taps);
    Ok((0..mu_x.len())
        .map(|k| {
            let (mx, my) = (mu_x[k], mu_y[k]);
            let var_x = e_xx[k] - mx * mx;
            let var_y = e_yy[k] - my * my;
            let cov = e_xy[k] - mx * my;
            ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (var_x + var_y + SSIM_C2))
        })
        .collect())
}

/// Mean structural similarity with the canonical 11x11, sigma 1.5 window.
pub fn mssim(reference: &ImageGrid, test: &ImageGrid) -> Result<f64> {
    let map = ssim_map(reference, test)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// How samples are conditioned before metrics are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricInput {
    /// Clamp to `[0, 255]`, keep fractional values.
    #[default]
    Clamped,
    /// Clamp and round half-up, as in an 8-bit export.
    Quantized,
}

impl MetricInput {
    pub fn prepare(self, g: &ImageGrid) -> ImageGrid {
        match self {
            MetricInput::Clamped => g.map(|v| v.clamp(0.0, 255.0)),
            MetricInput::Quantized => g.map(|v| quantize(v) as f64),
        }
    }
}

/// Clamp to `[0, 255]` and round half-up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 255.0) + 0.5).floor().min(255.0) as u8
}

/// Pixelwise `noisy / (denoised + 1e-6)`, rescaled affinely onto `[0, 255]`.
/// A constant ratio maps to mid-gray.
pub fn ratio_image(noisy: &ImageGrid, denoised: &ImageGrid) -> Result<ImageGrid> {
    let ratio = noisy.zip_map(denoised, |n, d| n / (d + RATIO_EPS))?;
    if !ratio.all_finite() {
        return Err(Error::domain("ratio image is non-finite"));
    }
    let (lo, hi) = ratio.min_max();
    if hi == lo {
        return Ok(ratio.same_shape(127.5));
    }
    let scale = 255.0 / (hi - lo);
    Ok(ratio.map(|r| (r - lo) * scale))
}

/// Row `row`, ordered by column.
pub fn extract_slice(g: &ImageGrid, row: usize) -> Result<Vec<f64>> {
    if row >= g.height() {
        return Err(Error::domain(format!(
            "row {row} outside image of height {}",
            g.height()
        )));
    }
    Ok(g.row(row).to_vec())
}

/// Outcome of one (image, noise level, model) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub image: String,
    pub model: ModelTag,
    /// Noise standard deviation, when known.
    pub sigma: Option<f64>,
    #[serde(with = "lossless_f64")]
    pub psnr_db: f64,
    pub mssim: f64,
    pub noisy_psnr_db: Option<f64>,
    pub noisy_mssim: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_change: f64,
    pub wall_ms: f64,
    pub metric_input: MetricInput,
    pub params: ModelParams,
}

/// Serializes infinities as the strings `"inf"` / `"-inf"`; JSON has no
/// literal for them.
mod lossless_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("bad number '{other}'"))),
            },
        }
    }
}
