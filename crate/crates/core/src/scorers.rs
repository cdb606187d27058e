//! Nonconformity scorers fitted on calibration residuals.
//!
//! * [`MksModel`]: the multivariate kernel score
//!   `e(x) = k̃(x,x) − k̃_*(x)ᵀ (K̃ + γI)⁻¹ k̃_*(x)`, the posterior variance of a
//!   zero-mean GP with the centered kernel and noise variance `γ`.
//! * [`MahalanobisModel`]: `(x − ε̄)ᵀ (Σ̂ + λI)⁻¹ (x − ε̄)`.
//! * [`DensityModel`]: the `γ → ∞` limit, `k(x,x) + k̄ − 2 p̂(x)`.
//!
//! `MksModel` also exposes the spectral, MMD/KPCA and leverage forms of the
//! same quantity. They are evaluated through the eigendecomposition of `K̃`
//! rather than the Cholesky factor, so they serve as independent checks.

use faer::linalg::triangular_solve::solve_lower_triangular_in_place;
use faer::{Mat, Par, Side};

use crate::error::{Error, Result};
use crate::kernel::{center_gram, compute_gram, CenteredGram, KernelSpec};
use crate::points::Points;

/// Entries of `k̃_*` held in memory at once when scoring batches.
const BATCH_ENTRIES: usize = 1 << 22;

/// A fitted nonconformity score; larger means less conforming.
pub trait Scorer {
    fn dim(&self) -> usize;

    fn score(&self, x: &[f64]) -> Result<f64>;

    fn score_batch(&self, xs: &Points) -> Result<Vec<f64>> {
        xs.check_dim(self.dim())?;
        xs.rows().map(|x| self.score(x)).collect()
    }
}

/// Fitted multivariate kernel score.
#[derive(Debug, Clone)]
pub struct MksModel {
    pub cal_points: Points,
    pub spec: KernelSpec,
    pub gamma: f64,
    pub cg: CenteredGram,
    /// Lower Cholesky factor of `K̃ + γI`.
    pub chol: Mat<f64>,
    /// Set when `K̃ + γI` was not numerically positive definite and `chol`
    /// factors `V diag(λ + γ) Vᵀ` with the clamped eigenvalues instead.
    pub chol_from_spectrum: bool,
}

/// Within-span and orthogonal parts of the kernel score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralParts {
    pub within_span: f64,
    pub orthogonal: f64,
}

impl SpectralParts {
    pub fn total(&self) -> f64 {
        self.within_span + self.orthogonal
    }
}

pub fn fit_mks(residuals: &Points, spec: KernelSpec, gamma: f64) -> Result<MksModel> {
    check_gamma(gamma)?;
    let cg = center_gram(&compute_gram(&spec, residuals)?)?;
    MksModel::from_centered(residuals.clone(), spec, cg, gamma)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Input(format!("gamma must be positive and finite, got {gamma}")));
    }
    Ok(())
}

/// Cholesky factor of `V diag(λ + γ) Vᵀ`, read off the QR decomposition of
/// `A = diag(√(λ + γ)) Vᵀ` so the product is never formed: `AᵀA = RᵀR`.
fn clamped_cholesky(cg: &CenteredGram, gamma: f64, why: &str) -> Result<Mat<f64>> {
    let t = cg.point_count();
    let v = &cg.eigenvectors;
    let a = Mat::from_fn(t, t, |j, i| (cg.eigenvalues[j] + gamma).sqrt() * v[(i, j)]);
    let qr = a.qr();
    let r = qr.R();
    let fail = || {
        Error::Numerical(format!(
            "Cholesky of K̃ + γI failed ({why}) and the clamped spectral factor is singular; γ = {gamma:e}, λ_max = {:e}",
            cg.eigenvalues[0]
        ))
    };
    let mut l = Mat::<f64>::zeros(t, t);
    for j in 0..t {
        let rjj = r[(j, j)];
        if !(rjj.abs() > 0.0) || !rjj.is_finite() {
            return Err(fail());
        }
        let sign = rjj.signum();
        for i in j..t {
            l[(i, j)] = sign * r[(j, i)];
        }
    }
    Ok(l)
}

impl MksModel {
    /// Builds the model from an already centered Gram matrix of `cal_points`,
    /// e.g. when `gamma` was chosen from its spectrum.
    pub fn from_centered(cal_points: Points, spec: KernelSpec, cg: CenteredGram, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        let t = cal_points.len();
        if t < 2 {
            return Err(Error::InsufficientData { got: t, need: 2 });
        }
        if cg.point_count() != t {
            return Err(Error::Input(format!(
                "centered Gram is {0}x{0} but there are {t} calibration points",
                cg.point_count()
            )));
        }
        let mut a = cg.ktilde.clone();
        for i in 0..t {
            a[(i, i)] += gamma;
        }
        let (chol, chol_from_spectrum) = match a.llt(Side::Lower) {
            Ok(llt) => (llt.L().to_owned(), false),
            // γ below the round-off level of K̃: factor the clamped matrix instead
            Err(e) => (clamped_cholesky(&cg, gamma, &format!("{e:?}"))?, true),
        };
        Ok(Self { cal_points, spec, gamma, cg, chol, chol_from_spectrum })
    }

    pub fn point_count(&self) -> usize {
        self.cal_points.len()
    }

    pub fn score_mks(&self, x: &[f64]) -> Result<f64> {
        let (kstar, kxx) = self.cg.center_test(&self.spec, &self.cal_points, x)?;
        let t = kstar.len();
        let mut z = Mat::from_fn(t, 1, |i, _| kstar[i]);
        solve_lower_triangular_in_place(self.chol.as_ref(), z.as_mut(), Par::Seq);
        let quad: f64 = (0..t).map(|i| z[(i, 0)] * z[(i, 0)]).sum();
        Ok(kxx - quad)
    }

    /// Projections `α_j(x) = v_jᵀ k̃_*(x)` on the kernel principal components,
    /// together with `k̃(x,x)`.
    pub fn kpca_projections(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (kstar, kxx) = self.cg.center_test(&self.spec, &self.cal_points, x)?;
        let v = &self.cg.eigenvectors;
        let t = kstar.len();
        let alpha = (0..t)
            .map(|j| (0..t).map(|i| v[(i, j)] * kstar[i]).sum())
            .collect();
        Ok((alpha, kxx))
    }

    pub fn spectral_parts(&self, x: &[f64]) -> Result<SpectralParts> {
        let (alpha, kxx) = self.kpca_projections(x)?;
        let g = self.gamma;
        let mut within = 0.0;
        let mut explained = 0.0;
        for (a, &l) in alpha.iter().zip(&self.cg.eigenvalues) {
            // clamped zero modes belong to the orthogonal complement
            if l > 0.0 {
                within += g * a * a / (l * (l + g));
                explained += a * a / l;
            }
        }
        Ok(SpectralParts { within_span: within, orthogonal: kxx - explained })
    }

    pub fn score_mks_spectral(&self, x: &[f64]) -> Result<f64> {
        Ok(self.spectral_parts(x)?.total())
    }

    /// `(MMD²(δ_x, Q_T), Σ_j α_j² / (λ_j + γ))`; their difference is the score.
    pub fn decompose_mmd_kpca(&self, x: &[f64]) -> Result<(f64, f64)> {
        let (alpha, kxx) = self.kpca_projections(x)?;
        let corr = alpha
            .iter()
            .zip(&self.cg.eigenvalues)
            .map(|(a, l)| a * a / (l + self.gamma))
            .sum();
        Ok((kxx, corr))
    }

    /// `γ·h_ii` where `H = K̃(K̃ + γI)⁻¹`.
    pub fn leverage_scores(&self) -> Vec<f64> {
        let t = self.point_count();
        let v = &self.cg.eigenvectors;
        let w: Vec<f64> = self.cg.eigenvalues.iter().map(|l| l / (l + self.gamma)).collect();
        (0..t)
            .map(|i| self.gamma * (0..t).map(|j| w[j] * v[(i, j)] * v[(i, j)]).sum::<f64>())
            .collect()
    }
}

impl Scorer for MksModel {
    fn dim(&self) -> usize {
        self.cal_points.dim()
    }

    fn score(&self, x: &[f64]) -> Result<f64> {
        self.score_mks(x)
    }

    /// Same arithmetic as [`MksModel::score_mks`], with the triangular solve
    /// applied to many right-hand sides at once.
    fn score_batch(&self, xs: &Points) -> Result<Vec<f64>> {
        xs.check_dim(self.dim())?;
        let t = self.point_count();
        let step = (BATCH_ENTRIES / t).max(1);
        let mut out = Vec::with_capacity(xs.len());
        let idx: Vec<usize> = (0..xs.len()).collect();
        for chunk in idx.chunks(step) {
            let sub = xs.select(chunk);
            let (mut z, kxx) = self.cg.center_test_batch(&self.spec, &self.cal_points, &sub);
            solve_lower_triangular_in_place(self.chol.as_ref(), z.as_mut(), Par::Seq);
            for (b, kxx_b) in kxx.iter().enumerate() {
                let col = z.col(b);
                let quad: f64 = col.iter().map(|v| v * v).sum();
                out.push(kxx_b - quad);
            }
        }
        Ok(out)
    }
}

/// Regularized Mahalanobis scorer.
#[derive(Debug, Clone)]
pub struct MahalanobisModel {
    pub mean: Vec<f64>,
    /// Unregularized sample covariance `Σ̂`.
    pub sample_cov: Mat<f64>,
    /// `Σ̂ + λI`.
    pub reg_cov: Mat<f64>,
    pub chol: Mat<f64>,
    pub lambda: f64,
}

/// `λ = 1e-6 · tr(Σ̂) / d`, used when no explicit regularization is given.
pub fn default_mahalanobis_lambda(residuals: &Points) -> Result<f64> {
    let cov = residuals.sample_covariance()?;
    let d = cov.nrows();
    let trace: f64 = (0..d).map(|i| cov[(i, i)]).sum();
    let lambda = 1e-6 * trace / d as f64;
    if !(lambda > 0.0) {
        return Err(Error::DegenerateData(
            "residual covariance has zero trace; pass an explicit Mahalanobis lambda".into(),
        ));
    }
    Ok(lambda)
}

pub fn fit_mahalanobis(residuals: &Points, lambda: f64) -> Result<MahalanobisModel> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Input(format!("lambda must be positive and finite, got {lambda}")));
    }
    let sample_cov = residuals.sample_covariance()?;
    let d = sample_cov.nrows();
    let mut reg_cov = sample_cov.clone();
    for i in 0..d {
        reg_cov[(i, i)] += lambda;
    }
    let chol = reg_cov
        .llt(Side::Lower)
        .map_err(|e| Error::Numerical(format!("Cholesky of Σ̂ + λI failed: {e:?}")))?
        .L()
        .to_owned();
    Ok(MahalanobisModel { mean: residuals.mean(), sample_cov, reg_cov, chol, lambda })
}

impl MahalanobisModel {
    pub fn score_mahalanobis(&self, x: &[f64]) -> Result<f64> {
        let d = self.mean.len();
        if x.len() != d {
            return Err(Error::dim_mismatch(d, x.len()));
        }
        let mut z = Mat::from_fn(d, 1, |i, _| x[i] - self.mean[i]);
        solve_lower_triangular_in_place(self.chol.as_ref(), z.as_mut(), Par::Seq);
        Ok((0..d).map(|i| z[(i, 0)] * z[(i, 0)]).sum())
    }
}

impl Scorer for MahalanobisModel {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn score(&self, x: &[f64]) -> Result<f64> {
        self.score_mahalanobis(x)
    }
}

/// Density-only (MMD) scorer.
#[derive(Debug, Clone)]
pub struct DensityModel {
    pub cal_points: Points,
    pub spec: KernelSpec,
    pub grand_mean: f64,
}

pub fn fit_density(residuals: &Points, spec: KernelSpec) -> Result<DensityModel> {
    spec.validate()?;
    let t = residuals.len();
    if t == 0 {
        return Err(Error::InsufficientData { got: 0, need: 1 });
    }
    let mut sum = 0.0;
    for i in 0..t {
        let xi = residuals.row(i);
        sum += spec.eval_unchecked(xi, xi);
        for j in 0..i {
            sum += 2.0 * spec.eval_unchecked(xi, residuals.row(j));
        }
    }
    let grand_mean = sum / (t * t) as f64;
    Ok(DensityModel { cal_points: residuals.clone(), spec, grand_mean })
}

impl DensityModel {
    /// Kernel density estimate `p̂(x) = (1/T) Σ_i k(x, ε_i)` (unnormalized).
    pub fn kde(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.cal_points.dim() {
            return Err(Error::dim_mismatch(self.cal_points.dim(), x.len()));
        }
        let s: f64 = self.cal_points.rows().map(|c| self.spec.eval_unchecked(x, c)).sum();
        Ok(s / self.cal_points.len() as f64)
    }

    pub fn score_density(&self, x: &[f64]) -> Result<f64> {
        let phat = self.kde(x)?;
        Ok(self.spec.diag_unchecked(x) + self.grand_mean - 2.0 * phat)
    }
}

impl Scorer for DensityModel {
    fn dim(&self) -> usize {
        self.cal_points.dim()
    }

    fn score(&self, x: &[f64]) -> Result<f64> {
        self.score_density(x)
    }
}
