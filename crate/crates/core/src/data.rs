//! Datasets: synthetic generation, CSV ingestion, splitting, standardization
//! and a closed-form multi-output ridge regressor.
//!
//! All randomness comes from ChaCha8 seeded with the caller's seed; Gaussian
//! draws use `rand_distr::StandardNormal` on that stream.

use std::f64::consts::PI;
use std::path::Path;

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::Points;

/// Standard deviation of the first latent noise coordinate.
pub const SYNTH_SIGMA1: f64 = 0.3;
/// Standard deviation of the second latent noise coordinate.
pub const SYNTH_SIGMA2: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Points,
    pub targets: Points,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select(idx),
            targets: self.targets.select(idx),
            feature_names: self.feature_names.clone(),
            target_names: self.target_names.clone(),
        }
    }
}

pub fn synthetic_mean(x: f64) -> [f64; 2] {
    [
        3.0 * x * x - 1.5 * x + (4.0 * PI * x).sin(),
        2.0 * x * x * x - x + 0.5 * (3.0 * PI * x).cos(),
    ]
}

/// Bivariate regression with a single uniform input and curved,
/// heteroscedastic-looking noise `ε = (z1, z2 + z1²/2 − σ1²/2)`.
///
/// Draw order per sample: `x`, `z1`, `z2`. The `n` noise vectors are centered
/// by their sample mean before being added to `f(x)`.
pub fn generate_synthetic(n: usize, seed: u64) -> Result<Dataset> {
    if n < 4 {
        return Err(Error::InsufficientData { got: n, need: 4 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.random();
        let z1 = SYNTH_SIGMA1 * rng.sample::<f64, _>(StandardNormal);
        let z2 = SYNTH_SIGMA2 * rng.sample::<f64, _>(StandardNormal);
        xs.push(x);
        noise.push([z1, z2 + 0.5 * z1 * z1 - 0.5 * SYNTH_SIGMA1 * SYNTH_SIGMA1]);
    }
    let mut mean = [0.0; 2];
    for e in &noise {
        mean[0] += e[0];
        mean[1] += e[1];
    }
    mean[0] /= n as f64;
    mean[1] /= n as f64;
    let mut targets = Vec::with_capacity(2 * n);
    for (x, e) in xs.iter().zip(&noise) {
        let f = synthetic_mean(*x);
        targets.push(f[0] + e[0] - mean[0]);
        targets.push(f[1] + e[1] - mean[1]);
    }
    Ok(Dataset {
        features: Points::new(xs, n, 1)?,
        targets: Points::new(targets, n, 2)?,
        feature_names: vec!["x".into()],
        target_names: vec!["y1".into(), "y2".into()],
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_idx: Vec<usize>,
    pub cal_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
}

/// Sizes of a 50/25/25 split: calibration and test get `⌊n/4⌋` each and
/// training takes the remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let q = n / 4;
    (n - 2 * q, q, q)
}

pub fn split_data(n: usize, seed: u64) -> Result<SplitAssignment> {
    if n < 4 {
        return Err(Error::Input(format!("need at least 4 rows to split, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (tr, ca, _) = split_sizes(n);
    let test_idx = perm.split_off(tr + ca);
    let cal_idx = perm.split_off(tr);
    Ok(SplitAssignment { train_idx: perm, cal_idx, test_idx, seed })
}

/// Per-column z-scoring with statistics taken from one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation; zero-variance columns store 1.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &Points) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InsufficientData { got: 0, need: 1 });
        }
        let mean = train.mean();
        let n = train.len() as f64;
        let mut var = vec![0.0; train.dim()];
        for r in train.rows() {
            for (j, v) in r.iter().enumerate() {
                var[j] += (v - mean[j]) * (v - mean[j]);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 { s } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, pts: &Points) -> Result<Points> {
        pts.check_dim(self.mean.len())?;
        let mut out = pts.clone();
        for i in 0..out.len() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }
}

/// Train/calibration/test views of a dataset after splitting and
/// (optionally) standardizing with training statistics.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Dataset,
    pub cal: Dataset,
    pub test: Dataset,
}

pub fn prepare_split(ds: &Dataset, split: &SplitAssignment, standardize: bool) -> Result<SplitData> {
    let mut train = ds.select(&split.train_idx);
    let mut cal = ds.select(&split.cal_idx);
    let mut test = ds.select(&split.test_idx);
    if standardize {
        let fx = Standardizer::fit(&train.features)?;
        let fy = Standardizer::fit(&train.targets)?;
        for part in [&mut train, &mut cal, &mut test] {
            part.features = fx.apply(&part.features)?;
            part.targets = fy.apply(&part.targets)?;
        }
    }
    Ok(SplitData { train, cal, test })
}

/// Linear model `Y ≈ X W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    /// `p × d`.
    pub weights: Mat<f64>,
    pub intercept: Vec<f64>,
    pub reg: f64,
}

/// Solves `(X_cᵀX_c + reg·I) W = X_cᵀY_c` on mean-centered data; the
/// intercept restores the means. `reg = 0` is ordinary least squares.
pub fn fit_ridge(x: &Points, y: &Points, reg: f64) -> Result<RidgeModel> {
    if !(reg >= 0.0 && reg.is_finite()) {
        return Err(Error::Input(format!("ridge penalty must be finite and ≥ 0, got {reg}")));
    }
    let n = x.len();
    if y.len() != n {
        return Err(Error::Input(format!("{n} feature rows but {} target rows", y.len())));
    }
    if n == 0 {
        return Err(Error::InsufficientData { got: 0, need: 1 });
    }
    let (p, d) = (x.dim(), y.dim());
    let xm = x.mean();
    let ym = y.mean();
    let mut gram = Mat::<f64>::zeros(p, p);
    let mut cross = Mat::<f64>::zeros(p, d);
    for (xr, yr) in x.rows().zip(y.rows()) {
        for a in 0..p {
            let xa = xr[a] - xm[a];
            for b in 0..=a {
                gram[(a, b)] += xa * (xr[b] - xm[b]);
            }
            for k in 0..d {
                cross[(a, k)] += xa * (yr[k] - ym[k]);
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
        gram[(a, a)] += reg;
    }
    let singular = || {
        Error::Numerical(format!(
            "normal equations are singular (n = {n}, p = {p}, reg = {reg}); add ridge regularization"
        ))
    };
    let llt = gram.llt(Side::Lower).map_err(|_| singular())?;
    let l = llt.L();
    let diag: Vec<f64> = (0..p).map(|i| l[(i, i)] * l[(i, i)]).collect();
    let dmax = diag.iter().copied().fold(0.0, f64::max);
    let dmin = diag.iter().copied().fold(f64::INFINITY, f64::min);
    if p > 0 && !(dmin > 1e-13 * dmax) {
        return Err(singular());
    }
    let weights = llt.solve(&cross);
    let intercept = (0..d)
        .map(|k| ym[k] - (0..p).map(|a| xm[a] * weights[(a, k)]).sum::<f64>())
        .collect();
    Ok(RidgeModel { weights, intercept, reg })
}

impl RidgeModel {
    pub fn predict(&self, x: &Points) -> Result<Points> {
        let (p, d) = (self.weights.nrows(), self.weights.ncols());
        x.check_dim(p)?;
        let mut out = Points::zeros(x.len(), d);
        for (i, xr) in x.rows().enumerate() {
            let row = out.row_mut(i);
            for (k, v) in row.iter_mut().enumerate() {
                *v = self.intercept[k] + (0..p).map(|a| xr[a] * self.weights[(a, k)]).sum::<f64>();
            }
        }
        Ok(out)
    }
}

/// Row-wise `Y − predict(X)`.
pub fn residuals(model: &RidgeModel, x: &Points, y: &Points) -> Result<Points> {
    if x.len() != y.len() {
        return Err(Error::Input(format!("{} feature rows but {} target rows", x.len(), y.len())));
    }
    y.check_dim(model.weights.ncols())?;
    let pred = model.predict(x)?;
    let mut out = y.clone();
    for i in 0..out.len() {
        for (v, p) in out.row_mut(i).iter_mut().zip(pred.row(i)) {
            *v -= p;
        }
    }
    Ok(out)
}

/// A dataset read from CSV together with how many rows were discarded.
#[derive(Debug, Clone)]
pub struct LoadedCsv {
    pub dataset: Dataset,
    pub dropped_rows: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.display().to_string(), source }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: path.display().to_string(), source },
        other => Error::Schema(format!("{}: malformed CSV: {other:?}", path.display())),
    }
}

fn column_indices(headers: &csv::StringRecord, names: &[String], path: &Path) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|name| {
            headers.iter().position(|h| h.trim() == name).ok_or_else(|| {
                Error::Schema(format!("{}: column '{name}' not found in header", path.display()))
            })
        })
        .collect()
}

/// Reads numeric feature and target columns by header name. Rows with a
/// missing, unparsable or non-finite selected cell are dropped.
pub fn load_csv(path: impl AsRef<Path>, feature_cols: &[String], target_cols: &[String]) -> Result<LoadedCsv> {
    let path = path.as_ref();
    if feature_cols.is_empty() || target_cols.is_empty() {
        return Err(Error::Schema("at least one feature and one target column are required".into()));
    }
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let fidx = column_indices(&headers, feature_cols, path)?;
    let tidx = column_indices(&headers, target_cols, path)?;

    let parse = |rec: &csv::StringRecord, idx: &[usize]| -> Option<Vec<f64>> {
        idx.iter()
            .map(|&i| rec.get(i)?.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect()
    };
    let (mut feats, mut targs) = (Vec::new(), Vec::new());
    let mut kept = 0usize;
    let mut dropped = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        match (parse(&rec, &fidx), parse(&rec, &tidx)) {
            (Some(f), Some(t)) => {
                feats.extend(f);
                targs.extend(t);
                kept += 1;
            }
            _ => dropped += 1,
        }
    }
    if kept == 0 {
        return Err(Error::EmptyData(format!("{}: no fully numeric rows", path.display())));
    }
    Ok(LoadedCsv {
        dataset: Dataset {
            features: Points::new(feats, kept, fidx.len())?,
            targets: Points::new(targs, kept, tidx.len())?,
            feature_names: feature_cols.to_vec(),
            target_names: target_cols.to_vec(),
        },
        dropped_rows: dropped,
    })
}

/// Residuals produced by an external model.
#[derive(Debug, Clone)]
pub struct ResidualSplits {
    pub cal: Points,
    pub test: Points,
    pub dropped_rows: usize,
}

/// Reads a residual file with header `split,e1,...,ed` where `split` is
/// `cal` or `test`.
pub fn load_residual_csv(path: impl AsRef<Path>) -> Result<ResidualSplits> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    if names.first() != Some(&"split") || names.len() < 2 {
        return Err(Error::Schema(format!(
            "{}: header must be split,e1,...,ed; got {}",
            path.display(),
            names.join(",")
        )));
    }
    for (j, name) in names[1..].iter().enumerate() {
        if *name != format!("e{}", j + 1) {
            return Err(Error::Schema(format!(
                "{}: expected column e{} but found '{name}'",
                path.display(),
                j + 1
            )));
        }
    }
    let d = names.len() - 1;
    let (mut cal, mut test) = (Vec::new(), Vec::new());
    let mut dropped = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let vals: Option<Vec<f64>> = (1..=d)
            .map(|i| rec.get(i)?.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        let Some(vals) = vals else {
            dropped += 1;
            continue;
        };
        match rec.get(0).map(str::trim) {
            Some("cal") => cal.extend(vals),
            Some("test") => test.extend(vals),
            other => {
                return Err(Error::Schema(format!(
                    "{}: split must be 'cal' or 'test', got {other:?}",
                    path.display()
                )))
            }
        }
    }
    let (nc, nt) = (cal.len() / d, test.len() / d);
    if nc == 0 || nt == 0 {
        return Err(Error::EmptyData(format!(
            "{}: need both cal and test rows (found {nc} cal, {nt} test)",
            path.display()
        )));
    }
    Ok(ResidualSplits { cal: Points::new(cal, nc, d)?, test: Points::new(test, nt, d)?, dropped_rows: dropped })
}
