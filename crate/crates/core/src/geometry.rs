//! Region size and conditional-coverage diagnostics.
//!
//! Monte-Carlo volumes draw uniform points from a padded bounding box of the
//! calibration residuals. Points are produced in fixed-size chunks; chunk `c`
//! comes from ChaCha8 seeded with the run seed on stream `c`, so every scorer
//! evaluated under one seed sees the same point stream, and the result does
//! not depend on how chunks are scheduled.

use faer::Side;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::Points;

/// Points per Monte-Carlo chunk.
pub const MC_CHUNK: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoundingBox {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }
}

/// Coordinate-wise range of the residuals widened by `pad · range` on each
/// side. Zero-width coordinates are treated as having width 1.
pub fn bounding_box(cal_residuals: &Points, pad: f64) -> Result<BoundingBox> {
    if cal_residuals.is_empty() {
        return Err(Error::InsufficientData { got: 0, need: 1 });
    }
    let d = cal_residuals.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for r in cal_residuals.rows() {
        for j in 0..d {
            lo[j] = lo[j].min(r[j]);
            hi[j] = hi[j].max(r[j]);
        }
    }
    for j in 0..d {
        let w = hi[j] - lo[j];
        let w = if w > 0.0 { w } else { 1.0 };
        lo[j] -= pad * w;
        hi[j] += pad * w;
    }
    Ok(BoundingBox { lo, hi })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McVolumeConfig {
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for McVolumeConfig {
    fn default() -> Self {
        Self { n_samples: 500_000, seed: 0 }
    }
}

/// Uniform sample chunk `chunk` of the stream defined by `(bbox, cfg)`.
pub fn mc_chunk(bbox: &BoundingBox, cfg: &McVolumeConfig, chunk: usize) -> Points {
    let d = bbox.dim();
    let start = chunk * MC_CHUNK;
    let len = MC_CHUNK.min(cfg.n_samples.saturating_sub(start));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chunk as u64);
    let mut data = Vec::with_capacity(len * d);
    for _ in 0..len {
        for j in 0..d {
            let u: f64 = rng.random();
            data.push(bbox.lo[j] + (bbox.hi[j] - bbox.lo[j]) * u);
        }
    }
    Points::new(data, len, d).expect("chunk buffer sized to len * d")
}

fn chunk_count(cfg: &McVolumeConfig) -> usize {
    cfg.n_samples.div_ceil(MC_CHUNK)
}

/// `volume(box) · hits / n` for a pointwise membership predicate.
pub fn mc_volume<F>(membership: F, bbox: &BoundingBox, cfg: &McVolumeConfig) -> Result<f64>
where
    F: Fn(&[f64]) -> bool,
{
    if cfg.n_samples == 0 {
        return Err(Error::Input("n_samples must be at least 1".into()));
    }
    let mut hits = 0usize;
    for c in 0..chunk_count(cfg) {
        hits += mc_chunk(bbox, cfg, c).rows().filter(|x| membership(x)).count();
    }
    Ok(bbox.volume() * hits as f64 / cfg.n_samples as f64)
}

/// Volumes of the sublevel sets `{score ≤ q}` for several thresholds at once,
/// scoring each Monte-Carlo chunk a single time.
pub fn mc_sublevel_volumes<F>(
    mut score_chunk: F,
    thresholds: &[f64],
    bbox: &BoundingBox,
    cfg: &McVolumeConfig,
) -> Result<Vec<f64>>
where
    F: FnMut(&Points) -> Result<Vec<f64>>,
{
    if cfg.n_samples == 0 {
        return Err(Error::Input("n_samples must be at least 1".into()));
    }
    let mut hits = vec![0usize; thresholds.len()];
    for c in 0..chunk_count(cfg) {
        let pts = mc_chunk(bbox, cfg, c);
        let scores = score_chunk(&pts)?;
        for s in scores {
            for (h, q) in hits.iter_mut().zip(thresholds) {
                if s <= *q {
                    *h += 1;
                }
            }
        }
    }
    let vol = bbox.volume();
    Ok(hits.into_iter().map(|h| vol * h as f64 / cfg.n_samples as f64).collect())
}

/// `π^{d/2} / Γ(d/2 + 1) · q̂^{d/2} · det(Σ)^{1/2}`.
pub fn ellipsoid_volume(cov: &faer::Mat<f64>, qhat: f64, d: usize) -> Result<f64> {
    if cov.nrows() != d || cov.ncols() != d {
        return Err(Error::dim_mismatch(d, cov.nrows()));
    }
    if !(qhat >= 0.0) {
        return Err(Error::Input(format!("threshold must be nonnegative, got {qhat}")));
    }
    if qhat == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    let l = cov
        .llt(Side::Lower)
        .map_err(|e| Error::Numerical(format!("covariance is not SPD: {e:?}")))?;
    let l = l.L();
    // sqrt(det Σ) = Π L_ii
    let sqrt_det: f64 = (0..d).map(|i| l[(i, i)]).product();
    let half = d as f64 / 2.0;
    let unit_ball = std::f64::consts::PI.powf(half) / libm::tgamma(half + 1.0);
    Ok(unit_ball * qhat.powf(half) * sqrt_det)
}

/// `Π_j 2·h_j`.
pub fn rect_volume(half_widths: &[f64]) -> f64 {
    half_widths.iter().map(|h| 2.0 * h).product()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WscConfig {
    pub n_directions: usize,
    pub n_quantiles: usize,
    pub slab_frac: f64,
    pub min_slab: usize,
    pub seed: u64,
}

impl Default for WscConfig {
    fn default() -> Self {
        Self { n_directions: 200, n_quantiles: 20, slab_frac: 0.2, min_slab: 30, seed: 0 }
    }
}

/// The slab attaining the worst coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct WorstSlab {
    pub coverage: f64,
    pub direction: Vec<f64>,
    /// Quantile levels bounding the slab.
    pub q_lo: f64,
    pub q_hi: f64,
    /// Projection values bounding the slab (inclusive).
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Unit directions drawn as normalized standard Gaussian vectors.
pub fn wsc_directions(p: usize, cfg: &WscConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dirs = Vec::with_capacity(cfg.n_directions);
    while dirs.len() < cfg.n_directions {
        let v: Vec<f64> = (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            dirs.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    dirs
}

/// Empirical quantile of an ascending slice: the order statistic at
/// 0-based index `round(q·(n−1))`.
fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let idx = (q * (n - 1) as f64).round() as usize;
    sorted[idx.min(n - 1)]
}

pub fn wsc(features: &Points, covered: &[bool], cfg: &WscConfig) -> Result<f64> {
    Ok(worst_slab(features, covered, cfg)?.coverage)
}

pub fn worst_slab(features: &Points, covered: &[bool], cfg: &WscConfig) -> Result<WorstSlab> {
    let n = features.len();
    if covered.len() != n {
        return Err(Error::Input(format!("{} coverage flags for {n} test points", covered.len())));
    }
    if n < cfg.min_slab || n == 0 {
        return Err(Error::InsufficientData { got: n, need: cfg.min_slab.max(1) });
    }
    if cfg.n_quantiles == 0 || !(cfg.slab_frac > 0.0 && cfg.slab_frac <= 1.0) {
        return Err(Error::Input("WSC needs n_quantiles ≥ 1 and slab_frac in (0, 1]".into()));
    }
    let dirs = wsc_directions(features.dim(), cfg);
    let mut best: Option<WorstSlab> = None;
    let mut order: Vec<usize> = (0..n).collect();
    let mut proj = vec![0.0; n];
    let mut sorted = vec![0.0; n];
    let mut prefix = vec![0usize; n + 1];
    for v in &dirs {
        for (i, x) in features.rows().enumerate() {
            proj[i] = x.iter().zip(v).map(|(a, b)| a * b).sum();
        }
        order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]));
        for (k, &i) in order.iter().enumerate() {
            sorted[k] = proj[i];
            prefix[k + 1] = prefix[k] + usize::from(covered[i]);
        }
        for k in 0..cfg.n_quantiles {
            let q_lo = if cfg.n_quantiles == 1 {
                0.0
            } else {
                k as f64 * (1.0 - cfg.slab_frac) / (cfg.n_quantiles - 1) as f64
            };
            let q_hi = (q_lo + cfg.slab_frac).min(1.0);
            let lo = empirical_quantile(&sorted, q_lo);
            let hi = empirical_quantile(&sorted, q_hi);
            let start = sorted.partition_point(|&z| z < lo);
            let end = sorted.partition_point(|&z| z <= hi);
            let count = end - start;
            if count < cfg.min_slab || count == 0 {
                continue;
            }
            let cov = (prefix[end] - prefix[start]) as f64 / count as f64;
            if best.as_ref().is_none_or(|b| cov < b.coverage) {
                best = Some(WorstSlab { coverage: cov, direction: v.clone(), q_lo, q_hi, lo, hi, count });
            }
        }
    }
    best.ok_or_else(|| {
        Error::DegenerateData(format!("no slab contains at least {} test points", cfg.min_slab))
    })
}
