//! Multivariate kernel scores for split conformal prediction.
//!
//! The crate fits nonconformity scores on calibration residuals
//! ([`scorers`]), turns them into prediction regions with finite-sample
//! coverage ([`conformal`]), and measures those regions ([`geometry`]).
//! [`experiment`] wires everything into the end-to-end evaluation used by the
//! `mks` binary.

pub mod conformal;
pub mod data;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod kernel;
pub mod points;
pub mod scorers;

pub use conformal::{calibrate, conformal_quantile, ConformalRegion, ConformalThreshold, Region};
pub use error::{Error, ErrorClass, Result};
pub use kernel::{center_gram, compute_gram, gamma_heuristic, median_lengthscale, CenteredGram, KernelFamily, KernelSpec};
pub use points::Points;
pub use scorers::{fit_density, fit_mahalanobis, fit_mks, DensityModel, MahalanobisModel, MksModel, Scorer};
