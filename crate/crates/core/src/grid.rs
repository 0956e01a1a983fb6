//! Pixel lattice with mirror boundaries and the finite-difference stencils
//! used by every solver.
//!
//! Pixel `(i, j)` is column `i` (the x axis, `0..width`) and row `j` (the y
//! axis, `0..height`). Storage is row-major. One ring of ghost pixels is
//! available through reflection: index `-1` reads index `0` and index `width`
//! reads `width - 1`, and likewise for rows. Ghosts are resolved on the fly,
//! no padded copy is ever made.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    spacing: f64,
    data: Vec<f64>,
}

impl ImageGrid {
    /// Zero-filled grid.
    pub fn new(width: usize, height: usize, spacing: f64) -> Result<Self> {
        Self::filled(width, height, 0.0, spacing)
    }

    pub fn filled(width: usize, height: usize, value: f64, spacing: f64) -> Result<Self> {
        Self::from_vec(width, height, vec![value; width * height], spacing)
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>, spacing: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::domain(format!(
                "grid must be non-empty, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::domain(format!(
                "expected {} samples for a {width}x{height} grid, got {}",
                width * height,
                data.len()
            )));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::domain(format!(
                "spacing must be positive, got {spacing}"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "non-finite sample at ({}, {})",
                pos % width,
                pos / width
            )));
        }
        Ok(Self {
            width,
            height,
            spacing,
            data,
        })
    }

    /// Builds a grid by evaluating `f(i, j)` at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        spacing: f64,
        f: impl Fn(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for j in 0..height {
            for i in 0..width {
                data.push(f(i, j));
            }
        }
        Self::from_vec(width, height, data, spacing)
    }

    /// A grid of the same shape and spacing, filled with `value`.
    pub fn same_shape(&self, value: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            spacing: self.spacing,
            data: vec![value; self.data.len()],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `(width, height)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::domain(format!(
                "spacing must be positive, got {spacing}"
            )));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the samples. Callers must keep them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.width + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[j * self.width + i] = value;
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.width..(j + 1) * self.width]
    }

    /// Reads `(i, j)` with one ring of mirror ghosts.
    ///
    /// Valid column indices are `-1..=width` and valid row indices
    /// `-1..=height`; anything deeper is a domain error.
    pub fn at_symmetric(&self, i: isize, j: isize) -> Result<f64> {
        let (w, h) = (self.width as isize, self.height as isize);
        if i < -1 || i > w || j < -1 || j > h {
            return Err(Error::domain(format!(
                "index ({i}, {j}) lies outside the ghost ring of a {w}x{h} grid"
            )));
        }
        Ok(self.ghost(i, j))
    }

    /// Unchecked mirror read for indices within one ghost ring.
    #[inline]
    pub(crate) fn ghost(&self, i: isize, j: isize) -> f64 {
        debug_assert!(i >= -1 && i <= self.width as isize);
        debug_assert!(j >= -1 && j <= self.height as isize);
        let i = reflect(i, self.width);
        let j = reflect(j, self.height);
        self.data[j * self.width + i]
    }

    fn check_pixel(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.width || j >= self.height {
            return Err(Error::domain(format!(
                "pixel ({i}, {j}) outside {}x{} grid",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub(crate) fn check_same_dims(&self, other: &ImageGrid) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                left: self.dims(),
                right: other.dims(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid {
            width: self.width,
            height: self.height,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ImageGrid, f: impl Fn(f64, f64) -> f64) -> Result<ImageGrid> {
        self.check_same_dims(other)?;
        Ok(ImageGrid {
            width: self.width,
            height: self.height,
            spacing: self.spacing,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Squared Euclidean norm of the samples.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        0
    } else if i as usize >= n {
        n - 1
    } else {
        i as usize
    }
}

// Per-pixel kernels, ghosts resolved by reflection. `i`, `j` are interior.

#[inline]
pub(crate) fn central_at(g: &ImageGrid, i: usize, j: usize) -> (f64, f64) {
    let (i, j) = (i as isize, j as isize);
    let two_h = 2.0 * g.spacing;
    (
        (g.ghost(i + 1, j) - g.ghost(i - 1, j)) / two_h,
        (g.ghost(i, j + 1) - g.ghost(i, j - 1)) / two_h,
    )
}

#[inline]
pub(crate) fn laplacian_at(g: &ImageGrid, i: usize, j: usize) -> f64 {
    let (ii, jj) = (i as isize, j as isize);
    let c = g.get(i, j);
    let h2 = g.spacing * g.spacing;
    (g.ghost(ii + 1, jj) - 2.0 * c + g.ghost(ii - 1, jj)) / h2
        + (g.ghost(ii, jj + 1) - 2.0 * c + g.ghost(ii, jj - 1)) / h2
}

/// `d+x (w d-x f) + d+y (w d-y f)` with the weight taken at the centre pixel
/// of each backward difference.
#[inline]
pub(crate) fn div_weighted_at(w: &ImageGrid, f: &ImageGrid, i: usize, j: usize) -> f64 {
    let (ii, jj) = (i as isize, j as isize);
    let h = f.spacing;
    let c = f.get(i, j);
    let wc = w.get(i, j);
    // Backward differences at (i, j), (i+1, j) and (i, j+1).
    let bx_c = (c - f.ghost(ii - 1, jj)) / h;
    let bx_e = (f.ghost(ii + 1, jj) - c) / h;
    let by_c = (c - f.ghost(ii, jj - 1)) / h;
    let by_s = (f.ghost(ii, jj + 1) - c) / h;
    (w.ghost(ii + 1, jj) * bx_e - wc * bx_c) / h + (w.ghost(ii, jj + 1) * by_s - wc * by_c) / h
}

/// Central-difference gradient at `(i, j)`.
pub fn grad_central(g: &ImageGrid, i: usize, j: usize) -> Result<(f64, f64)> {
    g.check_pixel(i, j)?;
    Ok(central_at(g, i, j))
}

/// Forward-difference gradient. Vanishes at the last column/row by reflection.
pub fn grad_forward(g: &ImageGrid, i: usize, j: usize) -> Result<(f64, f64)> {
    g.check_pixel(i, j)?;
    let (ii, jj) = (i as isize, j as isize);
    let c = g.get(i, j);
    Ok((
        (g.ghost(ii + 1, jj) - c) / g.spacing,
        (g.ghost(ii, jj + 1) - c) / g.spacing,
    ))
}

/// Backward-difference gradient. Vanishes at column/row 0 by reflection.
pub fn grad_backward(g: &ImageGrid, i: usize, j: usize) -> Result<(f64, f64)> {
    g.check_pixel(i, j)?;
    let (ii, jj) = (i as isize, j as isize);
    let c = g.get(i, j);
    Ok((
        (c - g.ghost(ii - 1, jj)) / g.spacing,
        (c - g.ghost(ii, jj - 1)) / g.spacing,
    ))
}

/// Five-point Laplacian at `(i, j)`.
pub fn laplacian(g: &ImageGrid, i: usize, j: usize) -> Result<f64> {
    g.check_pixel(i, j)?;
    Ok(laplacian_at(g, i, j))
}

/// Weighted divergence `div(w grad f)` at `(i, j)` in forward-of-backward form.
pub fn div_weighted(weights: &ImageGrid, f: &ImageGrid, i: usize, j: usize) -> Result<f64> {
    weights.check_same_dims(f)?;
    f.check_pixel(i, j)?;
    Ok(div_weighted_at(weights, f, i, j))
}

/// Euclidean norm of the central gradient.
pub fn grad_magnitude(g: &ImageGrid, i: usize, j: usize) -> Result<f64> {
    let (gx, gy) = grad_central(g, i, j)?;
    Ok(gx.hypot(gy))
}

fn field(g: &ImageGrid, f: impl Fn(usize, usize) -> f64) -> ImageGrid {
    let mut out = g.same_shape(0.0);
    let w = g.width;
    for j in 0..g.height {
        let row = &mut out.data[j * w..(j + 1) * w];
        for (i, o) in row.iter_mut().enumerate() {
            *o = f(i, j);
        }
    }
    out
}

pub fn laplacian_field(g: &ImageGrid) -> ImageGrid {
    field(g, |i, j| laplacian_at(g, i, j))
}

pub fn div_weighted_field(weights: &ImageGrid, f: &ImageGrid) -> Result<ImageGrid> {
    weights.check_same_dims(f)?;
    Ok(field(f, |i, j| div_weighted_at(weights, f, i, j)))
}

pub fn grad_magnitude_field(g: &ImageGrid) -> ImageGrid {
    field(g, |i, j| {
        let (gx, gy) = central_at(g, i, j);
        gx.hypot(gy)
    })
}

/// `|grad g|^2` with central differences.
pub fn grad_magnitude_sq_field(g: &ImageGrid) -> ImageGrid {
    field(g, |i, j| {
        let (gx, gy) = central_at(g, i, j);
        gx * gx + gy * gy
    })
}
