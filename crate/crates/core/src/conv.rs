//! Gaussian smoothing and additive Gaussian noise.
//!
//! Convolution is separable (rows, then columns) with half-sample mirror
//! extension, the same convention the stencils use for their ghost ring.
//!
//! Noise comes from ChaCha20 (`rand_chacha` 0.9, seeded through
//! `SeedableRng::seed_from_u64`) transformed by the Box-Muller method. Samples
//! are drawn in raster order, two normals per pair of uniforms, so a seed and
//! an image size fully determine the field on every platform.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Normalized, symmetric 1-D Gaussian taps truncated at `ceil(3 xi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    xi: f64,
    radius: usize,
    taps: Vec<f64>,
}

impl GaussianKernel {
    pub fn new(xi: f64) -> Result<Self> {
        if !(xi > 0.0 && xi.is_finite()) {
            return Err(Error::domain(format!(
                "kernel standard deviation must be positive, got {xi}"
            )));
        }
        let radius = ((3.0 * xi).ceil() as usize).max(1);
        let raw: Vec<f64> = (0..=2 * radius)
            .map(|k| {
                let d = k as f64 - radius as f64;
                (-d * d / (2.0 * xi * xi)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        let mut taps: Vec<f64> = raw.iter().map(|t| t / total).collect();
        // Force exact symmetry after the division.
        for d in 1..=radius {
            let v = taps[radius + d];
            taps[radius - d] = v;
        }
        Ok(Self { xi, radius, taps })
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Taps from offset `-radius` to `+radius`.
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }
}

/// Shorthand for [`GaussianKernel::new`].
pub fn make_kernel(xi: f64) -> Result<GaussianKernel> {
    GaussianKernel::new(xi)
}

#[inline]
fn mirror(q: isize, n: usize) -> usize {
    let n = n as isize;
    if q < 0 {
        (-1 - q) as usize
    } else if q >= n {
        (2 * n - 1 - q) as usize
    } else {
        q as usize
    }
}

/// Smooths `g` with `kernel` along both axes. Output has the input's shape.
pub fn convolve(g: &ImageGrid, kernel: &GaussianKernel) -> Result<ImageGrid> {
    let (w, h) = g.dims();
    let r = kernel.radius;
    if r >= w.min(h) {
        return Err(Error::domain(format!(
            "kernel radius {r} needs an image larger than {w}x{h}"
        )));
    }
    let taps = &kernel.taps;
    let src = g.data();
    let mut tmp = vec![0.0; w * h];
    for j in 0..h {
        let row = &src[j * w..(j + 1) * w];
        let out = &mut tmp[j * w..(j + 1) * w];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * row[mirror(i as isize + k as isize - r as isize, w)];
            }
            *o = acc;
        }
    }
    let mut out = g.same_shape(0.0);
    let dst = out.data_mut();
    for j in 0..h {
        for (k, t) in taps.iter().enumerate() {
            let jj = mirror(j as isize + k as isize - r as isize, h);
            let src_row = &tmp[jj * w..(jj + 1) * w];
            let dst_row = &mut dst[j * w..(j + 1) * w];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += t * s;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(default)]
    pub mean: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(mean: f64, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) || !mean.is_finite() {
            return Err(Error::domain(format!(
                "noise needs finite mean and sigma >= 0, got mean={mean} sigma={sigma}"
            )));
        }
        Ok(Self { mean, sigma, seed })
    }
}

/// Deterministic stream of standard normal deviates.
pub struct GaussianStream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    fn uniform(&mut self) -> f64 {
        // 53 random bits -> [0, 1)
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // (0, 1] keeps the logarithm finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

/// `g + eta` with `eta ~ N(mean, sigma^2)` i.i.d. No clamping is applied.
pub fn add_gaussian_noise(g: &ImageGrid, spec: &NoiseSpec) -> Result<ImageGrid> {
    let spec = NoiseSpec::new(spec.mean, spec.sigma, spec.seed)?;
    let mut stream = GaussianStream::new(spec.seed);
    let data = g
        .data()
        .iter()
        .map(|&v| v + (spec.mean + spec.sigma * stream.next_normal()))
        .collect();
    ImageGrid::from_vec(g.width(), g.height(), data, g.spacing())
}
