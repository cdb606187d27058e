//! Kernel functions, Gram matrices and their double centering.
//!
//! The centered Gram matrix is
//!
//! ```text
//! K̃_ij = k(ε_i, ε_j) − c_i − c_j + k̄,   c_i = (1/T) Σ_l k(ε_i, ε_l),   k̄ = (1/T²) Σ_lm k(ε_l, ε_m)
//! ```
//!
//! i.e. `HKH` with `H = I − 11ᵀ/T`. Row means and the grand mean are kept so
//! that kernel vectors of new points can be centered against the same
//! calibration mean embedding.

use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::Points;

/// Relative tolerance below which negative eigenvalues of `K̃` are treated as
/// round-off and clamped to zero.
pub const EIGEN_CLAMP_RTOL: f64 = 1e-8;

/// Pair budget for the median-distance heuristic.
pub const MEDIAN_MAX_PAIRS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    Linear,
}

/// A kernel family plus its lengthscale (ignored by the linear kernel).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub lengthscale: f64,
}

impl KernelSpec {
    /// `k(x, y) = exp(−‖x − y‖² / 2ℓ²)`.
    pub fn rbf(lengthscale: f64) -> Result<Self> {
        let spec = Self { family: KernelFamily::Rbf, lengthscale };
        spec.validate()?;
        Ok(spec)
    }

    /// `k(x, y) = xᵀy`.
    pub fn linear() -> Self {
        Self { family: KernelFamily::Linear, lengthscale: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.family == KernelFamily::Rbf && !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return Err(Error::Input(format!(
                "RBF lengthscale must be positive and finite, got {}",
                self.lengthscale
            )));
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::dim_mismatch(x.len(), y.len()));
        }
        self.validate()?;
        Ok(self.eval_unchecked(x, y))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Rbf => {
                let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-sq / (2.0 * self.lengthscale * self.lengthscale)).exp()
            }
            KernelFamily::Linear => x.iter().zip(y).map(|(a, b)| a * b).sum(),
        }
    }

    /// `k(x, x)` without the pairwise arithmetic.
    #[inline]
    pub(crate) fn diag_unchecked(&self, x: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Rbf => 1.0,
            KernelFamily::Linear => x.iter().map(|a| a * a).sum(),
        }
    }
}

/// Evaluates `k(x, y)`.
pub fn eval_kernel(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.eval(x, y)
}

/// Raw (uncentered) Gram matrix of a point set.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub entries: Mat<f64>,
}

impl GramMatrix {
    pub fn point_count(&self) -> usize {
        self.entries.nrows()
    }
}

pub fn compute_gram(spec: &KernelSpec, points: &Points) -> Result<GramMatrix> {
    spec.validate()?;
    let t = points.len();
    if t < 2 {
        return Err(Error::InsufficientData { got: t, need: 2 });
    }
    let mut k = Mat::<f64>::zeros(t, t);
    for i in 0..t {
        let xi = points.row(i);
        for j in 0..i {
            let v = spec.eval_unchecked(xi, points.row(j));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] = spec.eval_unchecked(xi, xi);
    }
    Ok(GramMatrix { entries: k })
}

/// Double-centered Gram matrix with its eigendecomposition.
#[derive(Debug, Clone)]
pub struct CenteredGram {
    pub ktilde: Mat<f64>,
    pub row_means: Vec<f64>,
    pub grand_mean: f64,
    /// Nonincreasing, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// Column `j` pairs with `eigenvalues[j]`.
    pub eigenvectors: Mat<f64>,
    /// Smallest eigenvalue as returned by the solver, before clamping.
    pub min_raw_eigenvalue: f64,
}

pub fn center_gram(gram: &GramMatrix) -> Result<CenteredGram> {
    let k = &gram.entries;
    let t = k.nrows();
    if t == 0 {
        return Err(Error::InsufficientData { got: 0, need: 1 });
    }
    let tf = t as f64;
    let row_means: Vec<f64> = (0..t).map(|i| (0..t).map(|j| k[(i, j)]).sum::<f64>() / tf).collect();
    let grand_mean = row_means.iter().sum::<f64>() / tf;

    let mut ktilde = Mat::<f64>::zeros(t, t);
    for i in 0..t {
        for j in 0..=i {
            let v = k[(i, j)] - row_means[i] - row_means[j] + grand_mean;
            ktilde[(i, j)] = v;
            ktilde[(j, i)] = v;
        }
    }

    let evd = ktilde.self_adjoint_eigen(Side::Lower).map_err(|e| {
        Error::Numerical(format!(
            "symmetric eigensolver failed on {t}x{t} centered Gram (max |K̃| = {:.3e}): {e:?}",
            max_abs(&ktilde)
        ))
    })?;
    // faer returns ascending order
    let s = evd.S();
    let u = evd.U();
    let mut eigenvalues: Vec<f64> = (0..t).rev().map(|j| s[j]).collect();
    let eigenvectors = Mat::from_fn(t, t, |i, j| u[(i, t - 1 - j)]);

    let min_raw_eigenvalue = eigenvalues[t - 1];
    let lmax = eigenvalues[0].max(0.0);
    // Exact zero matrices (identical points) can still produce round-off
    // sized negatives, so the tolerance never drops below machine precision.
    let tol = (EIGEN_CLAMP_RTOL * lmax).max(f64::EPSILON * tf * max_abs(&ktilde));
    for (j, l) in eigenvalues.iter_mut().enumerate() {
        if *l < 0.0 {
            if *l < -tol {
                return Err(Error::Numerical(format!(
                    "centered Gram has eigenvalue {l:.3e} at index {j}, below -{tol:.3e} (λ_max = {lmax:.3e}); matrix is not PSD"
                )));
            }
            *l = 0.0;
        }
    }

    Ok(CenteredGram { ktilde, row_means, grand_mean, eigenvalues, eigenvectors, min_raw_eigenvalue })
}

impl CenteredGram {
    pub fn point_count(&self) -> usize {
        self.row_means.len()
    }

    /// Centered kernel vector `k̃_*(x)` and centered self-similarity `k̃(x, x)`
    /// for a new point, using the stored calibration statistics.
    pub fn center_test(&self, spec: &KernelSpec, cal_points: &Points, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        if x.len() != cal_points.dim() {
            return Err(Error::dim_mismatch(cal_points.dim(), x.len()));
        }
        if cal_points.len() != self.point_count() {
            return Err(Error::Input(format!(
                "calibration set has {} points but the centered Gram was built on {}",
                cal_points.len(),
                self.point_count()
            )));
        }
        let t = cal_points.len();
        let mut kstar: Vec<f64> = cal_points.rows().map(|c| spec.eval_unchecked(x, c)).collect();
        let phat = kstar.iter().sum::<f64>() / t as f64;
        for (v, c) in kstar.iter_mut().zip(&self.row_means) {
            *v += self.grand_mean - phat - c;
        }
        let kxx = spec.diag_unchecked(x) - 2.0 * phat + self.grand_mean;
        Ok((kstar, kxx))
    }

    /// Batched [`center_test`](Self::center_test): returns the `T × B` matrix
    /// whose column `b` is `k̃_*(xs_b)`, and the vector of `k̃(xs_b, xs_b)`.
    pub(crate) fn center_test_batch(&self, spec: &KernelSpec, cal_points: &Points, xs: &Points) -> (Mat<f64>, Vec<f64>) {
        let t = cal_points.len();
        let tf = t as f64;
        let b = xs.len();
        let mut out = Mat::<f64>::zeros(t, b);
        let mut kxx = Vec::with_capacity(b);
        for (col, x) in xs.rows().enumerate() {
            let mut sum = 0.0;
            for (i, c) in cal_points.rows().enumerate() {
                let v = spec.eval_unchecked(x, c);
                out[(i, col)] = v;
                sum += v;
            }
            let phat = sum / tf;
            let shift = self.grand_mean - phat;
            for i in 0..t {
                out[(i, col)] += shift - self.row_means[i];
            }
            kxx.push(spec.diag_unchecked(x) - 2.0 * phat + self.grand_mean);
        }
        (out, kxx)
    }
}

/// Median-distance lengthscale `ℓ = d · median_{i≠j} ‖ε_i − ε_j‖ / 2`.
///
/// Above [`MEDIAN_MAX_PAIRS`] distinct pairs a seeded uniform sample of pairs
/// is used instead of the full enumeration.
pub fn median_lengthscale(residuals: &Points, output_dim: usize) -> Result<f64> {
    median_lengthscale_with(residuals, output_dim, MEDIAN_MAX_PAIRS, 0)
}

pub fn median_lengthscale_with(residuals: &Points, output_dim: usize, max_pairs: usize, seed: u64) -> Result<f64> {
    let t = residuals.len();
    if t < 2 {
        return Err(Error::InsufficientData { got: t, need: 2 });
    }
    let dist = |i: usize, j: usize| -> f64 {
        residuals
            .row(i)
            .iter()
            .zip(residuals.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let total_pairs = t * (t - 1) / 2;
    let mut dists: Vec<f64> = if total_pairs <= max_pairs {
        let mut v = Vec::with_capacity(total_pairs);
        for i in 0..t {
            for j in (i + 1)..t {
                v.push(dist(i, j));
            }
        }
        v
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..max_pairs)
            .map(|_| {
                let i = rng.random_range(0..t);
                let mut j = rng.random_range(0..t - 1);
                if j >= i {
                    j += 1;
                }
                dist(i, j)
            })
            .collect()
    };
    let med = median_in_place(&mut dists);
    if !(med > 0.0) {
        return Err(Error::DegenerateData(
            "median pairwise distance is zero; residuals are (mostly) identical".into(),
        ));
    }
    Ok(output_dim as f64 * med / 2.0)
}

fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Regularization heuristic: the nearest-rank 90th percentile of the
/// eigenvalues of `K̃`, i.e. the `⌈0.9·T⌉`-th smallest.
pub fn gamma_heuristic(cg: &CenteredGram) -> Result<f64> {
    percentile_90(&cg.eigenvalues)
}

/// Round-off level of the computed spectrum. `K̃` is PSD, so the most
/// negative computed eigenvalue bounds the solver's perturbation from below;
/// twice its magnitude is the smallest ridge that keeps `K̃ + γI` safely
/// positive definite.
pub fn gamma_noise_floor(cg: &CenteredGram) -> f64 {
    2.0 * (-cg.min_raw_eigenvalue).max(0.0)
}

/// [`gamma_heuristic`] raised to [`gamma_noise_floor`] when the 90th
/// percentile lies inside the round-off band (fast-decaying spectra, e.g. a
/// short RBF lengthscale on many points). Returns the value and whether the
/// floor was applied.
pub fn auto_gamma(cg: &CenteredGram) -> Result<(f64, bool)> {
    if cg.eigenvalues.iter().all(|&l| l == 0.0) {
        return Err(Error::DegenerateData("all centered Gram eigenvalues are zero".into()));
    }
    let p90 = percentile_90(&cg.eigenvalues).unwrap_or(0.0);
    let floor = gamma_noise_floor(cg);
    if p90 > floor {
        Ok((p90, false))
    } else if floor > 0.0 {
        Ok((floor, true))
    } else {
        Err(Error::DegenerateData(format!(
            "90th-percentile eigenvalue of the centered Gram is {p90:e}; supply an explicit gamma"
        )))
    }
}

pub(crate) fn percentile_90(eigenvalues: &[f64]) -> Result<f64> {
    let t = eigenvalues.len();
    if t == 0 {
        return Err(Error::InsufficientData { got: 0, need: 1 });
    }
    if eigenvalues.iter().all(|&l| l == 0.0) {
        return Err(Error::DegenerateData("all centered Gram eigenvalues are zero".into()));
    }
    let mut asc = eigenvalues.to_vec();
    asc.sort_by(f64::total_cmp);
    // ⌈9T/10⌉ in integer arithmetic
    let rank = (9 * t).div_ceil(10);
    let g = asc[rank - 1];
    if !(g > 0.0) {
        return Err(Error::DegenerateData(format!(
            "90th-percentile eigenvalue of the centered Gram is {g:e}; supply an explicit gamma"
        )));
    }
    Ok(g)
}

pub(crate) fn max_abs(m: &Mat<f64>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            best = best.max(m[(i, j)].abs());
        }
    }
    best
}
