//! Independent reference implementations used by the integration tests.
//!
//! Everything here works on a padded copy with an explicit ghost ring and
//! plain nested loops, and shares no code with the library.

#![allow(dead_code)]

use tcpde::ImageGrid;

/// Deterministic generator for test inputs (64-bit LCG, top 53 bits).
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn grid(&mut self, w: usize, h: usize, lo: f64, hi: f64) -> ImageGrid {
        let data = (0..w * h)
            .map(|_| lo + (hi - lo) * self.next_f64())
            .collect();
        ImageGrid::from_vec(w, h, data, 1.0).unwrap()
    }
}

/// `(w + 2) x (h + 2)` copy with the border pixels duplicated outward.
pub struct Padded {
    pub w: usize,
    pub h: usize,
    pub v: Vec<Vec<f64>>,
}

impl Padded {
    pub fn new(g: &ImageGrid) -> Self {
        let (w, h) = (g.width(), g.height());
        let mut v = vec![vec![0.0; h + 2]; w + 2];
        for (pi, col) in v.iter_mut().enumerate() {
            for (pj, cell) in col.iter_mut().enumerate() {
                let i = pi.saturating_sub(1).min(w - 1);
                let j = pj.saturating_sub(1).min(h - 1);
                *cell = g.get(i, j);
            }
        }
        Self { w, h, v }
    }

    /// Value at image coordinates `(i, j)`, each in `-1..=n`.
    pub fn at(&self, i: isize, j: isize) -> f64 {
        self.v[(i + 1) as usize][(j + 1) as usize]
    }
}

pub fn central(g: &ImageGrid, i: usize, j: usize) -> (f64, f64) {
    let p = Padded::new(g);
    let (i, j) = (i as isize, j as isize);
    let h = g.spacing();
    (
        (p.at(i + 1, j) - p.at(i - 1, j)) / (2.0 * h),
        (p.at(i, j + 1) - p.at(i, j - 1)) / (2.0 * h),
    )
}

pub fn forward(g: &ImageGrid, i: usize, j: usize) -> (f64, f64) {
    let p = Padded::new(g);
    let (i, j) = (i as isize, j as isize);
    let h = g.spacing();
    (
        (p.at(i + 1, j) - p.at(i, j)) / h,
        (p.at(i, j + 1) - p.at(i, j)) / h,
    )
}

pub fn backward(g: &ImageGrid, i: usize, j: usize) -> (f64, f64) {
    let p = Padded::new(g);
    let (i, j) = (i as isize, j as isize);
    let h = g.spacing();
    (
        (p.at(i, j) - p.at(i - 1, j)) / h,
        (p.at(i, j) - p.at(i, j - 1)) / h,
    )
}

pub fn laplacian(g: &ImageGrid, i: usize, j: usize) -> f64 {
    let p = Padded::new(g);
    let (i, j) = (i as isize, j as isize);
    let h2 = g.spacing() * g.spacing();
    (p.at(i + 1, j) + p.at(i - 1, j) + p.at(i, j + 1) + p.at(i, j - 1) - 4.0 * p.at(i, j)) / h2
}

/// `D+x(w D-x f) + D+y(w D-y f)`: flux through a face uses the weight of the
/// pixel on its high side.
pub fn div_weighted(w: &ImageGrid, f: &ImageGrid, i: usize, j: usize) -> f64 {
    let (pw, pf) = (Padded::new(w), Padded::new(f));
    let (i, j) = (i as isize, j as isize);
    let h = f.spacing();
    let flux_x = |a: isize| pw.at(a, j) * (pf.at(a, j) - pf.at(a - 1, j)) / h;
    let flux_y = |b: isize| pw.at(i, b) * (pf.at(i, b) - pf.at(i, b - 1)) / h;
    (flux_x(i + 1) - flux_x(i)) / h + (flux_y(j + 1) - flux_y(j)) / h
}

pub fn field(g: &ImageGrid, f: impl Fn(usize, usize) -> f64) -> ImageGrid {
    ImageGrid::from_fn(g.width(), g.height(), g.spacing(), f).unwrap()
}

/// Direct 2-D Gaussian filter with whole-sample mirror extension beyond the
/// ghost ring (`-1-q` and `2n-1-q`).
pub fn gaussian_blur(g: &ImageGrid, xi: f64) -> ImageGrid {
    let r = (3.0 * xi).ceil().max(1.0) as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * xi * xi)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let taps: Vec<f64> = raw.iter().map(|t| t / total).collect();
    let refl = |q: isize, n: usize| -> usize {
        let n = n as isize;
        (if q < 0 {
            -1 - q
        } else if q >= n {
            2 * n - 1 - q
        } else {
            q
        }) as usize
    };
    field(g, |i, j| {
        let mut acc = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let ii = refl(i as isize + dx, g.width());
                let jj = refl(j as isize + dy, g.height());
                acc += taps[(dx + r) as usize] * taps[(dy + r) as usize] * g.get(ii, jj);
            }
        }
        acc
    })
}

pub fn grad_mag(g: &ImageGrid) -> ImageGrid {
    field(g, |i, j| {
        let (a, b) = central(g, i, j);
        (a * a + b * b).sqrt()
    })
}

pub fn psnr(a: &ImageGrid, b: &ImageGrid) -> f64 {
    let mut sum = 0.0;
    for j in 0..a.height() {
        for i in 0..a.width() {
            sum += (a.get(i, j) - b.get(i, j)).powi(2);
        }
    }
    let mse = sum / (a.width() * a.height()) as f64;
    10.0 * (255.0 * 255.0 / mse).log10()
}

/// Mean SSIM, one full 11x11 Gaussian-weighted window per position.
pub fn mssim(a: &ImageGrid, b: &ImageGrid) -> f64 {
    let n = 11usize;
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (y, row) in win.iter_mut().enumerate() {
        for (x, cell) in row.iter_mut().enumerate() {
            let (dx, dy) = (x as f64 - 5.0, y as f64 - 5.0);
            *cell = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            total += *cell;
        }
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut acc = 0.0;
    let mut count = 0usize;
    for oy in 0..=a.height() - n {
        for ox in 0..=a.width() - n {
            let (mut mx, mut my) = (0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let wgt = win[y][x] / total;
                    mx += wgt * a.get(ox + x, oy + y);
                    my += wgt * b.get(ox + x, oy + y);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let wgt = win[y][x] / total;
                    let (p, q) = (a.get(ox + x, oy + y) - mx, b.get(ox + x, oy + y) - my);
                    vx += wgt * p * p;
                    vy += wgt * q * q;
                    cxy += wgt * p * q;
                }
            }
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

/// Fields of a run, advanced with the textbook two-level formulas.
#[derive(Clone)]
pub struct Levels {
    pub i: ImageGrid,
    pub i_prev: ImageGrid,
    pub u: ImageGrid,
    pub u_prev: ImageGrid,
    pub v: ImageGrid,
    pub i0: ImageGrid,
}

/// `[(2 + d) x - x_prev + t2 * F] / (1 + d)`.
fn two_level(x: f64, x_prev: f64, forcing: f64, damping: f64) -> f64 {
    ((2.0 + damping) * x - x_prev + forcing) / (1.0 + damping)
}

pub struct CoupledParams {
    pub tau: f64,
    pub xi: f64,
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub nu: f64,
    pub k: f64,
    pub lambda: f64,
    pub squared_h: bool,
    pub h_cap: f64,
}

fn h_of(grad: f64, p: &CoupledParams) -> f64 {
    let theta = if p.squared_h { grad * grad } else { grad };
    0.1 + (theta * theta).min(p.h_cap)
}

pub fn tcpde_init(i0: &ImageGrid, xi: f64) -> Levels {
    let sq = field(i0, |i, j| {
        let (a, b) = central(i0, i, j);
        a * a + b * b
    });
    let u = gaussian_blur(&sq, xi);
    Levels {
        i: i0.clone(),
        i_prev: i0.clone(),
        u: u.clone(),
        u_prev: u,
        v: field(i0, |_, _| 0.0),
        i0: i0.clone(),
    }
}

pub fn tcpde_step(s: &Levels, p: &CoupledParams) -> Levels {
    let t2 = p.tau * p.tau;
    let gm = grad_mag(&gaussian_blur(&s.i, p.xi));
    let u = field(&s.u, |i, j| {
        let f = p.kappa
            * t2
            * (h_of(gm.get(i, j), p) - s.u.get(i, j) + 0.5 * p.nu * p.nu * laplacian(&s.u, i, j));
        two_level(s.u.get(i, j), s.u_prev.get(i, j), f, p.beta * p.tau)
    });
    let v = field(&s.v, |i, j| {
        s.v.get(i, j) + p.tau * laplacian(&s.v, i, j) - p.tau * (s.i0.get(i, j) - s.i.get(i, j))
    });
    let gu = gaussian_blur(&u, p.xi);
    let w = field(&gu, |i, j| 1.0 / (1.0 + gu.get(i, j) / (p.k * p.k)));
    let img = field(&s.i, |i, j| {
        let f = t2 * (div_weighted(&w, &s.i, i, j) - 2.0 * p.lambda * v.get(i, j));
        two_level(s.i.get(i, j), s.i_prev.get(i, j), f, p.alpha * p.tau)
    });
    Levels {
        i: img,
        i_prev: s.i.clone(),
        u,
        u_prev: s.u.clone(),
        v,
        i0: s.i0.clone(),
    }
}

pub fn acpde_step(s: &Levels, p: &CoupledParams) -> Levels {
    let gm = grad_mag(&gaussian_blur(&s.i, p.xi));
    let u = field(&s.u, |i, j| {
        s.u.get(i, j)
            + p.tau
                * p.kappa
                * (h_of(gm.get(i, j), p) - s.u.get(i, j)
                    + 0.5 * p.nu * p.nu * laplacian(&s.u, i, j))
    });
    let (w_, h_) = (s.v.width(), s.v.height());
    let v = field(&s.v, |i, j| {
        if i == 0 || j == 0 || i == w_ - 1 || j == h_ - 1 {
            0.0
        } else {
            s.v.get(i, j) + p.tau * laplacian(&s.v, i, j) - p.tau * (s.i0.get(i, j) - s.i.get(i, j))
        }
    });
    let gu = gaussian_blur(&u, p.xi);
    let w = field(&gu, |i, j| 1.0 / (1.0 + gu.get(i, j) / (p.k * p.k)));
    let img = field(&s.i, |i, j| {
        s.i.get(i, j) + p.tau * (div_weighted(&w, &s.i, i, j) - 2.0 * p.lambda * v.get(i, j))
    });
    Levels {
        i: img,
        i_prev: s.i.clone(),
        u,
        u_prev: s.u.clone(),
        v,
        i0: s.i0.clone(),
    }
}

pub fn pm(s: f64, k: f64) -> f64 {
    1.0 / (1.0 + (s / k) * (s / k))
}

/// TDE (`smoothed = false`) or Cao (`smoothed = true`).
pub fn telegraph_step(s: &Levels, tau: f64, gamma: f64, k: f64, xi: f64, smoothed: bool) -> Levels {
    let base = if smoothed {
        gaussian_blur(&s.i, xi)
    } else {
        s.i.clone()
    };
    let gm = grad_mag(&base);
    let w = field(&gm, |i, j| pm(gm.get(i, j), k));
    let img = field(&s.i, |i, j| {
        two_level(
            s.i.get(i, j),
            s.i_prev.get(i, j),
            tau * tau * div_weighted(&w, &s.i, i, j),
            gamma * tau,
        )
    });
    Levels {
        i: img,
        i_prev: s.i.clone(),
        ..s.clone()
    }
}

pub fn sys_init(i0: &ImageGrid) -> Levels {
    let u = grad_mag(i0);
    Levels {
        i: i0.clone(),
        i_prev: i0.clone(),
        u: u.clone(),
        u_prev: u,
        v: field(i0, |_, _| 0.0),
        i0: i0.clone(),
    }
}

/// SYS with the Perona-Malik diffusivity; `balance` weights the diffusion
/// of `u` against its relaxation toward `|grad I|`.
pub fn sys_step(s: &Levels, tau: f64, balance: f64, k: f64) -> Levels {
    let gm = grad_mag(&s.i);
    let u = field(&s.u, |i, j| {
        let f = tau
            * tau
            * (balance * laplacian(&s.u, i, j) + (1.0 - balance) * (gm.get(i, j) - s.u.get(i, j)));
        two_level(s.u.get(i, j), s.u_prev.get(i, j), f, tau)
    });
    let w = field(&s.u, |i, j| pm(s.u.get(i, j), k));
    let img = field(&s.i, |i, j| {
        s.i.get(i, j) + tau * div_weighted(&w, &s.i, i, j)
    });
    Levels {
        i: img,
        i_prev: s.i.clone(),
        u,
        u_prev: s.u.clone(),
        ..s.clone()
    }
}

pub fn max_abs_diff(a: &ImageGrid, b: &ImageGrid) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
