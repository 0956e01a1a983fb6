//! Telegraph-coupled PDE image denoising.
//!
//! The crate provides the proposed telegraph-coupled model (TCPDE) together
//! with four baselines (TDE, Cao, SYS, ACPDE), all discretized with explicit
//! finite differences on a mirror-bounded pixel lattice, plus the tooling
//! needed to evaluate them: seeded Gaussian noise, PSNR/MSSIM, PGM I/O, and
//! a batch benchmark driver.

pub mod cli;
pub mod conv;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod models;
pub mod phantom;

pub use conv::{add_gaussian_noise, convolve, make_kernel, GaussianKernel, NoiseSpec};
pub use error::{Error, Result};
pub use grid::ImageGrid;
pub use metrics::{mssim, psnr, MetricsReport};
pub use models::{run, ModelKind, ModelParams, ModelTag, RunOutcome, SolverState, StopRule};
