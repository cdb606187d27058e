//! Split-conformal calibration and prediction regions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::Points;
use crate::scorers::Scorer;

/// Calibrated threshold `q̂`, possibly `+∞` when `⌈(1−α)(T+1)⌉ > T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalThreshold {
    pub qhat: f64,
    pub alpha: f64,
    pub t: usize,
}

impl ConformalThreshold {
    pub fn is_infinite(&self) -> bool {
        self.qhat == f64::INFINITY
    }

    /// Boundary inclusive.
    pub fn admits(&self, score: f64) -> bool {
        score <= self.qhat
    }
}

/// 1-based rank `⌈(1−α)(T+1)⌉` of the calibration order statistic.
///
/// The product is formed in floating point, so values within a few ulps above
/// an integer (e.g. `0.9 · 100 = 90.00000000000001`) are snapped down first.
pub fn conformal_rank(t: usize, alpha: f64) -> usize {
    let x = (1.0 - alpha) * (t as f64 + 1.0);
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest as usize
    } else {
        x.ceil() as usize
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Input(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<ConformalThreshold> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::Input("no calibration scores".into()));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numerical(format!("calibration score is {bad}")));
    }
    let t = scores.len();
    let r = conformal_rank(t, alpha);
    let qhat = if r > t {
        f64::INFINITY
    } else {
        let mut sorted = scores.to_vec();
        let (_, q, _) = sorted.select_nth_unstable_by(r - 1, f64::total_cmp);
        *q
    };
    Ok(ConformalThreshold { qhat, alpha, t })
}

/// Scores every calibration residual and applies [`conformal_quantile`].
pub fn calibrate<S: Scorer + ?Sized>(scorer: &S, residuals: &Points, alpha: f64) -> Result<ConformalThreshold> {
    check_alpha(alpha)?;
    let scores = scorer.score_batch(residuals)?;
    conformal_quantile(&scores, alpha)
}

/// Anything that can answer "is `y` inside?".
pub trait Region {
    fn contains(&self, y: &[f64]) -> Result<bool>;
}

/// `{ y : score(y − center) ≤ q̂ }`.
pub struct ConformalRegion<'a> {
    pub scorer: &'a dyn Scorer,
    pub threshold: ConformalThreshold,
    pub center: Vec<f64>,
}

impl<'a> ConformalRegion<'a> {
    pub fn new(scorer: &'a dyn Scorer, threshold: ConformalThreshold, center: Vec<f64>) -> Result<Self> {
        if center.len() != scorer.dim() {
            return Err(Error::dim_mismatch(scorer.dim(), center.len()));
        }
        Ok(Self { scorer, threshold, center })
    }
}

impl Region for ConformalRegion<'_> {
    fn contains(&self, y: &[f64]) -> Result<bool> {
        if y.len() != self.center.len() {
            return Err(Error::dim_mismatch(self.center.len(), y.len()));
        }
        if self.threshold.is_infinite() {
            return Ok(true);
        }
        let r: Vec<f64> = y.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        Ok(self.threshold.admits(self.scorer.score(&r)?))
    }
}

pub fn region_contains<R: Region + ?Sized>(region: &R, y: &[f64]) -> Result<bool> {
    region.contains(y)
}

/// Fraction of `(region, y)` pairs with `y` inside its region.
pub fn evaluate_coverage<'r, R, I>(pairs: I) -> Result<f64>
where
    R: Region + 'r,
    I: IntoIterator<Item = (&'r R, &'r [f64])>,
{
    let mut n = 0usize;
    let mut hits = 0usize;
    for (region, y) in pairs {
        n += 1;
        if region.contains(y)? {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(Error::Input("coverage of an empty evaluation set".into()));
    }
    Ok(hits as f64 / n as f64)
}

/// Per-coordinate conformal box: `|y_j − center_j| ≤ half_widths_j` for all `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct BonferroniRegion {
    pub center: Vec<f64>,
    pub half_widths: Vec<f64>,
}

impl Region for BonferroniRegion {
    fn contains(&self, y: &[f64]) -> Result<bool> {
        if y.len() != self.center.len() {
            return Err(Error::dim_mismatch(self.center.len(), y.len()));
        }
        Ok(y
            .iter()
            .zip(&self.center)
            .zip(&self.half_widths)
            .all(|((y, c), h)| (y - c).abs() <= *h))
    }
}

/// Half-widths from univariate absolute-residual conformal calibration of
/// each coordinate at level `α/d`.
pub fn bonferroni_calibrate(residuals: &Points, alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let d = residuals.dim();
    if residuals.is_empty() || d == 0 {
        return Err(Error::Input("no calibration residuals".into()));
    }
    let level = alpha / d as f64;
    (0..d)
        .map(|j| {
            let abs: Vec<f64> = residuals.rows().map(|r| r[j].abs()).collect();
            conformal_quantile(&abs, level).map(|t| t.qhat)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelSpec;
    use crate::scorers::{fit_mahalanobis, fit_mks};

    #[test]
    fn quantile_examples() {
        let s: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!(conformal_quantile(&s, 0.1).unwrap().qhat, 9.0);
        let s: Vec<f64> = (1..=99).rev().map(f64::from).collect();
        assert_eq!(conformal_quantile(&s, 0.1).unwrap().qhat, 90.0);
        let t = conformal_quantile(&[1.0, 2.0, 3.0], 0.01).unwrap();
        assert!(t.is_infinite());
    }

    #[test]
    fn quantile_errors() {
        assert!(conformal_quantile(&[], 0.1).is_err());
        assert!(conformal_quantile(&[1.0], 0.0).is_err());
        assert!(conformal_quantile(&[1.0], 1.0).is_err());
    }

    #[test]
    fn constant_scores_give_constant_threshold() {
        let s = vec![2.5; 40];
        for a in [0.5, 0.2, 0.1] {
            assert_eq!(conformal_quantile(&s, a).unwrap().qhat, 2.5);
        }
    }

    #[test]
    fn small_calibration_set_overflows_to_infinity() {
        let cal = Points::from_scalars(&[-1.0, 1.0]);
        let m = fit_mks(&cal, KernelSpec::linear(), 1.0).unwrap();
        let t = calibrate(&m, &cal, 0.1).unwrap();
        assert!(t.is_infinite());
        let region = ConformalRegion::new(&m, t, vec![0.0]).unwrap();
        assert!(region.contains(&[1e6]).unwrap());
    }

    #[test]
    fn boundary_is_inside() {
        let m = fit_mahalanobis(&Points::from_scalars(&[-1.0, 1.0]), 1.0).unwrap();
        let t = ConformalThreshold { qhat: 3.0, alpha: 0.1, t: 2 };
        let region = ConformalRegion::new(&m, t, vec![0.0]).unwrap();
        assert!(region_contains(&region, &[3.0]).unwrap());
        assert!(!region_contains(&region, &[3.01]).unwrap());
        assert!(region_contains(&region, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn coverage_counts() {
        let inside = BonferroniRegion { center: vec![0.0], half_widths: vec![1.0] };
        let y_in = [0.5];
        let y_out = [2.0];
        let pairs: Vec<(&BonferroniRegion, &[f64])> = vec![(&inside, &y_in[..]), (&inside, &y_out[..])];
        assert_eq!(evaluate_coverage(pairs).unwrap(), 0.5);
        let pairs: Vec<(&BonferroniRegion, &[f64])> = vec![(&inside, &y_out[..])];
        assert_eq!(evaluate_coverage(pairs).unwrap(), 0.0);
        let empty: Vec<(&BonferroniRegion, &[f64])> = vec![];
        assert!(evaluate_coverage(empty).is_err());
    }

    #[test]
    fn bonferroni_single_coordinate_is_plain_split_conformal() {
        let vals: Vec<f64> = (0..19).map(|i| (i as f64 - 9.0) * 0.5).collect();
        let r = Points::from_scalars(&vals);
        let hw = bonferroni_calibrate(&r, 0.1).unwrap();
        let abs: Vec<f64> = vals.iter().map(|v| v.abs()).collect();
        assert_eq!(hw[0], conformal_quantile(&abs, 0.1).unwrap().qhat);
    }

    #[test]
    fn bonferroni_zero_coordinate() {
        let r = Points::from_rows(&[[0.0, 1.0], [0.0, -2.0], [0.0, 0.5]]).unwrap();
        let hw = bonferroni_calibrate(&r, 0.5).unwrap();
        assert_eq!(hw[0], 0.0);
    }

    #[test]
    fn bonferroni_uses_alpha_over_d() {
        // T = 39, α = 0.1, d = 2: per-coordinate level 0.05 gives rank 38
        let vals: Vec<[f64; 2]> = (1..=39).map(|i| [i as f64, -(i as f64)]).collect();
        let hw = bonferroni_calibrate(&Points::from_rows(&vals).unwrap(), 0.1).unwrap();
        assert_eq!(hw, vec![38.0, 38.0]);
    }
}
