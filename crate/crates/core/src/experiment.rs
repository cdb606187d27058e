//! End-to-end evaluation: data → regressor → residuals → scorers →
//! calibration → coverage, volume and worst-slab coverage.
//!
//! Within one seed every method sees the same split, the same Monte-Carlo
//! point stream and the same WSC directions. Seeds are processed in order, so
//! output never depends on scheduling.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{bonferroni_calibrate, conformal_quantile, ConformalThreshold};
use crate::data::{
    fit_ridge, generate_synthetic, load_csv, load_residual_csv, prepare_split, residuals, split_data, Dataset,
};
use crate::error::{Error, Result};
use crate::geometry::{
    bounding_box, ellipsoid_volume, mc_sublevel_volumes, mc_volume, rect_volume, wsc, BoundingBox, McVolumeConfig,
    WscConfig,
};
use crate::kernel::{center_gram, compute_gram, auto_gamma, median_lengthscale_with, KernelFamily, KernelSpec};
use crate::points::Points;
use crate::scorers::{default_mahalanobis_lambda, fit_density, fit_mahalanobis, MksModel, Scorer};

/// Fixed lengthscale used for synthetic runs unless overridden.
pub const SYNTH_LENGTHSCALE: f64 = 0.5;
/// Ridge penalty used for CSV datasets unless overridden.
pub const CSV_RIDGE_REG: f64 = 1.0;
/// Bounding-box padding for Monte-Carlo volumes.
pub const BOX_PAD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Synthetic,
    Csv,
    Residuals,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "synthetic" | "synth" => Ok(Mode::Synthetic),
            "csv" => Ok(Mode::Csv),
            "residuals" => Ok(Mode::Residuals),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mks,
    Mahalanobis,
    Density,
    Bonferroni,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Mks, Method::Mahalanobis, Method::Density, Method::Bonferroni];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mks => "mks",
            Method::Mahalanobis => "mahalanobis",
            Method::Density => "density",
            Method::Bonferroni => "bonferroni",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mks" => Ok(Method::Mks),
            "mahalanobis" => Ok(Method::Mahalanobis),
            "density" => Ok(Method::Density),
            "bonferroni" => Ok(Method::Bonferroni),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// A JSON scalar that may be a number or a keyword string.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum NumOrStr {
    Num(f64),
    Str(String),
}

fn positive(v: f64, what: &str) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Config(format!("{what} must be positive and finite, got {v}")))
    }
}

fn parse_num(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Config(format!("{what}: cannot parse '{s}'")))
}

/// Kernel lengthscale: a number, `fixed:<x>` or `auto-median`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NumOrStr", into = "NumOrStr")]
pub enum LengthscaleSpec {
    Fixed(f64),
    AutoMedian,
}

impl FromStr for LengthscaleSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "auto-median" {
            return Ok(Self::AutoMedian);
        }
        let v = s.strip_prefix("fixed:").unwrap_or(s);
        Ok(Self::Fixed(positive(parse_num(v, "lengthscale")?, "lengthscale")?))
    }
}

impl TryFrom<NumOrStr> for LengthscaleSpec {
    type Error = Error;
    fn try_from(v: NumOrStr) -> Result<Self> {
        match v {
            NumOrStr::Num(x) => Ok(Self::Fixed(positive(x, "lengthscale")?)),
            NumOrStr::Str(s) => s.parse(),
        }
    }
}

impl From<LengthscaleSpec> for NumOrStr {
    fn from(v: LengthscaleSpec) -> Self {
        match v {
            LengthscaleSpec::Fixed(x) => NumOrStr::Num(x),
            LengthscaleSpec::AutoMedian => NumOrStr::Str("auto-median".into()),
        }
    }
}

/// Kernel regularization: a number or `auto-p90`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "NumOrStr", into = "NumOrStr")]
pub enum GammaSpec {
    Fixed(f64),
    #[default]
    AutoP90,
}

impl FromStr for GammaSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "auto-p90" {
            return Ok(Self::AutoP90);
        }
        Ok(Self::Fixed(positive(parse_num(s, "gamma")?, "gamma")?))
    }
}

impl TryFrom<NumOrStr> for GammaSpec {
    type Error = Error;
    fn try_from(v: NumOrStr) -> Result<Self> {
        match v {
            NumOrStr::Num(x) => Ok(Self::Fixed(positive(x, "gamma")?)),
            NumOrStr::Str(s) => s.parse(),
        }
    }
}

impl From<GammaSpec> for NumOrStr {
    fn from(v: GammaSpec) -> Self {
        match v {
            GammaSpec::Fixed(x) => NumOrStr::Num(x),
            GammaSpec::AutoP90 => NumOrStr::Str("auto-p90".into()),
        }
    }
}

/// Mahalanobis regularization: a number or `default` (`1e-6·tr(Σ̂)/d`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "NumOrStr", into = "NumOrStr")]
pub enum LambdaSpec {
    Fixed(f64),
    #[default]
    Default,
}

impl FromStr for LambdaSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "default" {
            return Ok(Self::Default);
        }
        Ok(Self::Fixed(positive(parse_num(s, "mahalanobis_lambda")?, "mahalanobis_lambda")?))
    }
}

impl TryFrom<NumOrStr> for LambdaSpec {
    type Error = Error;
    fn try_from(v: NumOrStr) -> Result<Self> {
        match v {
            NumOrStr::Num(x) => Ok(Self::Fixed(positive(x, "mahalanobis_lambda")?)),
            NumOrStr::Str(s) => s.parse(),
        }
    }
}

impl From<LambdaSpec> for NumOrStr {
    fn from(v: LambdaSpec) -> Self {
        match v {
            LambdaSpec::Fixed(x) => NumOrStr::Num(x),
            LambdaSpec::Default => NumOrStr::Str("default".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub family: KernelFamily,
    /// `None` picks the mode default: fixed 0.5 for synthetic data,
    /// auto-median otherwise.
    pub lengthscale: Option<LengthscaleSpec>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { family: KernelFamily::Rbf, lengthscale: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::Config(format!("unknown output format '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Label used in reports; defaults to `synthetic` or the file stem.
    pub dataset: Option<String>,
    /// Sample size for synthetic data.
    pub n: usize,
    pub data_path: Option<PathBuf>,
    pub feature_cols: Vec<String>,
    pub target_cols: Vec<String>,
    pub residuals_path: Option<PathBuf>,
    pub methods: Vec<Method>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub kernel: KernelConfig,
    pub gamma: GammaSpec,
    pub mahalanobis_lambda: LambdaSpec,
    /// `None`: 0 (least squares) for synthetic data, 1.0 for CSV data.
    pub ridge_reg: Option<f64>,
    /// `None`: standardize features and targets in CSV mode only.
    pub standardize: Option<bool>,
    pub mc_samples: usize,
    pub wsc: WscConfig,
    /// Estimate Mahalanobis and Bonferroni volumes by Monte Carlo too.
    pub force_mc: bool,
    /// Subsample the MKS calibration set to at most this many points.
    pub tmax: Option<usize>,
    /// Record wall-clock runtimes; off by default so outputs are reproducible
    /// byte for byte.
    pub timing: bool,
    pub out: Option<PathBuf>,
    pub format: OutputFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Synthetic,
            dataset: None,
            n: 50_000,
            data_path: None,
            feature_cols: Vec::new(),
            target_cols: Vec::new(),
            residuals_path: None,
            methods: Method::ALL.to_vec(),
            alphas: vec![0.1, 0.05, 0.02, 0.01],
            seeds: vec![0],
            kernel: KernelConfig::default(),
            gamma: GammaSpec::AutoP90,
            mahalanobis_lambda: LambdaSpec::Default,
            ridge_reg: None,
            standardize: None,
            mc_samples: 500_000,
            wsc: WscConfig::default(),
            force_mc: false,
            tmax: None,
            timing: false,
            out: None,
            format: OutputFormat::Csv,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn lengthscale_spec(&self) -> LengthscaleSpec {
        self.kernel.lengthscale.unwrap_or(match self.mode {
            Mode::Synthetic => LengthscaleSpec::Fixed(SYNTH_LENGTHSCALE),
            _ => LengthscaleSpec::AutoMedian,
        })
    }

    pub fn ridge_reg_value(&self) -> f64 {
        self.ridge_reg.unwrap_or(match self.mode {
            Mode::Csv => CSV_RIDGE_REG,
            _ => 0.0,
        })
    }

    pub fn standardize_value(&self) -> bool {
        self.standardize.unwrap_or(self.mode == Mode::Csv)
    }

    pub fn dataset_name(&self) -> String {
        if let Some(name) = &self.dataset {
            return name.clone();
        }
        let stem = |p: &Option<PathBuf>| {
            p.as_ref()
                .and_then(|p| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
        };
        match self.mode {
            Mode::Synthetic => "synthetic".into(),
            Mode::Csv => stem(&self.data_path).unwrap_or_else(|| "csv".into()),
            Mode::Residuals => stem(&self.residuals_path).unwrap_or_else(|| "residuals".into()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.methods.is_empty() {
            return cfg("methods list is empty".into());
        }
        if self.alphas.is_empty() {
            return cfg("alphas list is empty".into());
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return cfg(format!("alpha must lie in (0, 1), got {a}"));
        }
        if self.seeds.is_empty() {
            return cfg("seeds list is empty".into());
        }
        if self.mc_samples == 0 {
            return cfg("mc_samples must be at least 1".into());
        }
        if let Some(r) = self.ridge_reg {
            if !(r >= 0.0 && r.is_finite()) {
                return cfg(format!("ridge_reg must be finite and ≥ 0, got {r}"));
            }
        }
        if self.tmax.is_some_and(|t| t < 2) {
            return cfg("tmax must be at least 2".into());
        }
        let w = &self.wsc;
        if w.n_directions == 0 || w.n_quantiles == 0 || !(w.slab_frac > 0.0 && w.slab_frac <= 1.0) {
            return cfg("wsc needs n_directions ≥ 1, n_quantiles ≥ 1 and slab_frac in (0, 1]".into());
        }
        match self.mode {
            Mode::Synthetic if self.n < 4 => cfg(format!("n must be at least 4, got {}", self.n)),
            Mode::Csv if self.data_path.is_none() => cfg("csv mode needs data_path".into()),
            Mode::Csv if self.feature_cols.is_empty() || self.target_cols.is_empty() => {
                cfg("csv mode needs feature_cols and target_cols".into())
            }
            Mode::Residuals if self.residuals_path.is_none() => cfg("residuals mode needs residuals_path".into()),
            _ => Ok(()),
        }
    }
}

/// One (method, α, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub dataset: String,
    pub dim: usize,
    pub method: Method,
    pub alpha: f64,
    pub seed: u64,
    pub coverage: f64,
    /// `+∞` when the calibration set is too small for the requested level.
    #[serde(with = "inf_as_null")]
    pub volume: f64,
    /// Absent when the run has no test features (residual mode).
    pub wsc: Option<f64>,
    pub lengthscale: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub runtime_ms: Option<f64>,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Hyperparameters resolved for one seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub seed: u64,
    pub lengthscale: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub n_cal: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<ExperimentResult>,
    pub resolved: Vec<Resolved>,
    pub dropped_rows: usize,
}

/// Calibration and test residuals for one seed, plus test features for WSC.
struct SeedData {
    cal: Points,
    test: Points,
    test_features: Option<Points>,
}

enum Source {
    Synthetic,
    Table(Dataset),
    Residuals { cal: Points, test: Points },
}

fn regression_residuals(ds: &Dataset, cfg: &RunConfig, seed: u64) -> Result<SeedData> {
    let split = split_data(ds.len(), seed)?;
    let parts = prepare_split(ds, &split, cfg.standardize_value())?;
    let model = fit_ridge(&parts.train.features, &parts.train.targets, cfg.ridge_reg_value())?;
    Ok(SeedData {
        cal: residuals(&model, &parts.cal.features, &parts.cal.targets)?,
        test: residuals(&model, &parts.test.features, &parts.test.targets)?,
        test_features: Some(parts.test.features),
    })
}

fn seed_data(src: &Source, cfg: &RunConfig, seed: u64) -> Result<SeedData> {
    match src {
        Source::Synthetic => regression_residuals(&generate_synthetic(cfg.n, seed)?, cfg, seed),
        Source::Table(ds) => regression_residuals(ds, cfg, seed),
        Source::Residuals { cal, test } => {
            Ok(SeedData { cal: cal.clone(), test: test.clone(), test_features: None })
        }
    }
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

struct MethodEval {
    covered: Vec<Vec<bool>>,
    volumes: Vec<f64>,
    fit_ms: f64,
    eval_ms: Vec<f64>,
}

fn covered_flags(test_scores: &[f64], t: &ConformalThreshold) -> Vec<bool> {
    test_scores.iter().map(|s| t.admits(*s)).collect()
}

/// Volumes of `{score ≤ q}` per threshold; infinite thresholds are unbounded.
fn sublevel_volumes(
    scorer: &dyn Scorer,
    thresholds: &[f64],
    bbox: &BoundingBox,
    mc: &McVolumeConfig,
) -> Result<Vec<f64>> {
    let finite: Vec<f64> = thresholds.iter().copied().filter(|q| q.is_finite()).collect();
    let mut vols = if finite.is_empty() {
        Vec::new()
    } else {
        mc_sublevel_volumes(|pts| scorer.score_batch(pts), &finite, bbox, mc)?
    }
    .into_iter();
    Ok(thresholds
        .iter()
        .map(|q| if q.is_finite() { vols.next().unwrap_or(0.0) } else { f64::INFINITY })
        .collect())
}

struct ScoredMethod<'a> {
    scorer: &'a dyn Scorer,
    cal: &'a Points,
}

fn eval_scored(
    m: ScoredMethod<'_>,
    test: &Points,
    alphas: &[f64],
    bbox: &BoundingBox,
    mc: &McVolumeConfig,
    closed_form: Option<&dyn Fn(f64) -> Result<f64>>,
    fit_ms: f64,
) -> std::result::Result<MethodEval, (Option<f64>, Error)> {
    let t0 = Instant::now();
    let cal_scores = m.scorer.score_batch(m.cal).map_err(|e| (None, e))?;
    let test_scores = m.scorer.score_batch(test).map_err(|e| (None, e))?;
    let shared_ms = elapsed_ms(t0);
    let mut thresholds = Vec::new();
    let mut covered = Vec::new();
    let mut eval_ms = Vec::new();
    for &a in alphas {
        let t = Instant::now();
        let th = conformal_quantile(&cal_scores, a).map_err(|e| (Some(a), e))?;
        covered.push(covered_flags(&test_scores, &th));
        thresholds.push(th.qhat);
        eval_ms.push(elapsed_ms(t));
    }
    let t = Instant::now();
    let volumes = match closed_form {
        Some(f) => thresholds
            .iter()
            .zip(alphas)
            .map(|(q, a)| f(*q).map_err(|e| (Some(*a), e)))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        None => sublevel_volumes(m.scorer, &thresholds, bbox, mc).map_err(|e| (None, e))?,
    };
    let vol_ms = elapsed_ms(t) / alphas.len() as f64;
    for ms in &mut eval_ms {
        *ms += vol_ms + shared_ms / alphas.len() as f64;
    }
    Ok(MethodEval { covered, volumes, fit_ms, eval_ms })
}

fn eval_bonferroni(
    cal: &Points,
    test: &Points,
    alphas: &[f64],
    bbox: &BoundingBox,
    mc: &McVolumeConfig,
    force_mc: bool,
) -> std::result::Result<MethodEval, (Option<f64>, Error)> {
    let mut out = MethodEval {
        covered: Vec::new(),
        volumes: Vec::new(),
        fit_ms: 0.0,
        eval_ms: Vec::new(),
    };
    for &a in alphas {
        let t = Instant::now();
        let hw = bonferroni_calibrate(cal, a).map_err(|e| (Some(a), e))?;
        // residual space: the box is centered at the prediction
        let inside = |r: &[f64]| r.iter().zip(&hw).all(|(e, h)| e.abs() <= *h);
        out.covered.push(test.rows().map(inside).collect());
        let vol = if hw.iter().any(|h| h.is_infinite()) {
            f64::INFINITY
        } else if force_mc {
            mc_volume(inside, bbox, mc).map_err(|e| (Some(a), e))?
        } else {
            rect_volume(&hw)
        };
        out.volumes.push(vol);
        out.eval_ms.push(elapsed_ms(t));
    }
    Ok(out)
}

/// Uniform subsample of `k` rows (order preserved) drawn with `seed`.
fn subsample(points: &Points, k: usize, seed: u64) -> Points {
    if points.len() <= k {
        return points.clone();
    }
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), points.len(), k).into_vec();
    idx.sort_unstable();
    points.select(&idx)
}

/// Runs the full protocol for every seed in `cfg.seeds`.
///
/// Progress and resolved hyperparameters are reported through `log`, one
/// line per seed.
pub fn run_experiment_with_log(cfg: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut dropped_rows = 0;
    let src = match cfg.mode {
        Mode::Synthetic => Source::Synthetic,
        Mode::Csv => {
            let path = cfg.data_path.as_ref().expect("validated");
            let loaded = load_csv(path, &cfg.feature_cols, &cfg.target_cols)?;
            dropped_rows = loaded.dropped_rows;
            Source::Table(loaded.dataset)
        }
        Mode::Residuals => {
            let r = load_residual_csv(cfg.residuals_path.as_ref().expect("validated"))?;
            dropped_rows = r.dropped_rows;
            Source::Residuals { cal: r.cal, test: r.test }
        }
    };
    let dataset = cfg.dataset_name();
    let uses_kernel = cfg.methods.iter().any(|m| matches!(m, Method::Mks | Method::Density));
    let mut records = Vec::new();
    let mut resolved = Vec::new();

    for &seed in &cfg.seeds {
        let pipe = |e: Error| e.tagged("pipeline", seed, None);
        let sd = seed_data(&src, cfg, seed).map_err(pipe)?;
        let d = sd.cal.dim();
        if sd.cal.len() < 2 {
            return Err(pipe(Error::InsufficientData { got: sd.cal.len(), need: 2 }));
        }
        let bbox = bounding_box(&sd.cal, BOX_PAD).map_err(pipe)?;
        let mc = McVolumeConfig { n_samples: cfg.mc_samples, seed };

        let spec = if uses_kernel {
            Some(match cfg.kernel.family {
                KernelFamily::Linear => KernelSpec::linear(),
                KernelFamily::Rbf => {
                    let l = match cfg.lengthscale_spec() {
                        LengthscaleSpec::Fixed(l) => l,
                        LengthscaleSpec::AutoMedian => median_lengthscale_with(
                            &sd.cal,
                            d,
                            crate::kernel::MEDIAN_MAX_PAIRS,
                            seed,
                        )
                        .map_err(pipe)?,
                    };
                    KernelSpec::rbf(l).map_err(pipe)?
                }
            })
        } else {
            None
        };
        let lengthscale = spec.filter(|s| s.family == KernelFamily::Rbf).map(|s| s.lengthscale);

        let mut res = Resolved {
            seed,
            lengthscale,
            gamma: None,
            lambda: None,
            n_cal: sd.cal.len(),
            n_test: sd.test.len(),
        };
        let mut evals: Vec<(Method, MethodEval)> = Vec::new();
        for &method in &cfg.methods {
            let tag = |(a, e): (Option<f64>, Error)| e.tagged(method.as_str(), seed, a);
            let t0 = Instant::now();
            let ev = match method {
                Method::Mks => {
                    let spec = spec.expect("kernel resolved");
                    let cal = match cfg.tmax {
                        Some(k) => subsample(&sd.cal, k, seed),
                        None => sd.cal.clone(),
                    };
                    let mut gamma_floored = false;
                    let mut fit = || -> Result<MksModel> {
                        let cg = center_gram(&compute_gram(&spec, &cal)?)?;
                        let g = match cfg.gamma {
                            GammaSpec::Fixed(g) => g,
                            GammaSpec::AutoP90 => {
                                let (g, floored) = auto_gamma(&cg)?;
                                gamma_floored = floored;
                                g
                            }
                        };
                        MksModel::from_centered(cal.clone(), spec, cg, g)
                    };
                    let model = fit().map_err(|e| tag((None, e)))?;
                    res.gamma = Some(model.gamma);
                    if gamma_floored {
                        log(&format!(
                            "seed {seed}: 90th-percentile eigenvalue is below the round-off floor; gamma raised to {:e}",
                            model.gamma
                        ));
                    }
                    let sm = ScoredMethod { scorer: &model, cal: &cal };
                    eval_scored(sm, &sd.test, &cfg.alphas, &bbox, &mc, None, elapsed_ms(t0)).map_err(tag)?
                }
                Method::Mahalanobis => {
                    let lambda = match cfg.mahalanobis_lambda {
                        LambdaSpec::Fixed(l) => Ok(l),
                        LambdaSpec::Default => default_mahalanobis_lambda(&sd.cal),
                    }
                    .map_err(|e| tag((None, e)))?;
                    let model = fit_mahalanobis(&sd.cal, lambda).map_err(|e| tag((None, e)))?;
                    res.lambda = Some(lambda);
                    let closed = |q: f64| ellipsoid_volume(&model.sample_cov, q, d);
                    let closed: Option<&dyn Fn(f64) -> Result<f64>> =
                        if cfg.force_mc { None } else { Some(&closed) };
                    let sm = ScoredMethod { scorer: &model, cal: &sd.cal };
                    eval_scored(sm, &sd.test, &cfg.alphas, &bbox, &mc, closed, elapsed_ms(t0)).map_err(tag)?
                }
                Method::Density => {
                    let model = fit_density(&sd.cal, spec.expect("kernel resolved")).map_err(|e| tag((None, e)))?;
                    let sm = ScoredMethod { scorer: &model, cal: &sd.cal };
                    eval_scored(sm, &sd.test, &cfg.alphas, &bbox, &mc, None, elapsed_ms(t0)).map_err(tag)?
                }
                Method::Bonferroni => {
                    eval_bonferroni(&sd.cal, &sd.test, &cfg.alphas, &bbox, &mc, cfg.force_mc).map_err(tag)?
                }
            };
            evals.push((method, ev));
        }

        for (method, ev) in evals {
            for (k, &alpha) in cfg.alphas.iter().enumerate() {
                let covered = &ev.covered[k];
                let coverage = covered.iter().filter(|c| **c).count() as f64 / covered.len() as f64;
                let w = match &sd.test_features {
                    Some(x) => Some(wsc(x, covered, &cfg.wsc).map_err(|e| e.tagged(method.as_str(), seed, Some(alpha)))?),
                    None => None,
                };
                records.push(ExperimentResult {
                    dataset: dataset.clone(),
                    dim: d,
                    method,
                    alpha,
                    seed,
                    coverage,
                    volume: ev.volumes[k],
                    wsc: w,
                    lengthscale: if matches!(method, Method::Mks | Method::Density) { lengthscale } else { None },
                    gamma: if method == Method::Mks { res.gamma } else { None },
                    lambda: if method == Method::Mahalanobis { res.lambda } else { None },
                    runtime_ms: cfg.timing.then(|| ev.fit_ms + ev.eval_ms[k]),
                });
            }
        }
        log(&format!(
            "seed {seed}: n_cal={} n_test={} lengthscale={} gamma={} lambda={}",
            res.n_cal,
            res.n_test,
            fmt_opt(res.lengthscale),
            fmt_opt(res.gamma),
            fmt_opt(res.lambda)
        ));
        resolved.push(res);
    }
    Ok(ExperimentOutput { records, resolved, dropped_rows })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:e}"))
}

pub fn run_experiment(cfg: &RunConfig) -> Result<Vec<ExperimentResult>> {
    Ok(run_experiment_with_log(cfg, &mut |_| {})?.records)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub method: Method,
    pub alpha: f64,
    pub n_seeds: usize,
    pub coverage: MeanStd,
    pub volume: MeanStd,
    pub wsc: Option<MeanStd>,
}

fn alpha_key(a: f64) -> u64 {
    a.to_bits()
}

/// Mean ± std over seeds for every (dataset, method, α), in first-seen
/// order of datasets and α and canonical method order.
pub fn aggregate(results: &[ExperimentResult]) -> Vec<AggregateRow> {
    let mut datasets: Vec<&str> = Vec::new();
    let mut alphas: Vec<f64> = Vec::new();
    let mut groups: BTreeMap<(usize, Method, usize), Vec<&ExperimentResult>> = BTreeMap::new();
    for r in results {
        let di = datasets.iter().position(|d| *d == r.dataset).unwrap_or_else(|| {
            datasets.push(&r.dataset);
            datasets.len() - 1
        });
        let ai = alphas.iter().position(|a| alpha_key(*a) == alpha_key(r.alpha)).unwrap_or_else(|| {
            alphas.push(r.alpha);
            alphas.len() - 1
        });
        groups.entry((di, r.method, ai)).or_default().push(r);
    }
    let mut rows: Vec<_> = groups.into_iter().collect();
    rows.sort_by_key(|((di, m, ai), _)| (*di, *ai, *m));
    rows.into_iter()
        .map(|((di, method, ai), rs)| {
            let pick = |f: fn(&ExperimentResult) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let wscs: Option<Vec<f64>> = rs.iter().map(|r| r.wsc).collect();
            AggregateRow {
                dataset: datasets[di].to_string(),
                method,
                alpha: alphas[ai],
                n_seeds: rs.len(),
                coverage: pick(|r| r.coverage),
                volume: pick(|r| r.volume),
                wsc: wscs.map(|w| mean_std(&w)),
            }
        })
        .collect()
}

pub const CSV_HEADER: &str = "method,alpha,seed,coverage,volume,wsc,lengthscale,gamma,lambda,runtime_ms";

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn results_to_csv(results: &[ExperimentResult]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in results {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.alpha,
            r.seed,
            r.coverage,
            r.volume,
            cell(r.wsc),
            cell(r.lengthscale),
            cell(r.gamma),
            cell(r.lambda),
            cell(r.runtime_ms)
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub dataset: String,
    pub dim: usize,
    pub config: Option<RunConfig>,
    pub resolved: Vec<Resolved>,
    pub dropped_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub metadata: Metadata,
    pub records: Vec<ExperimentResult>,
    pub aggregate: Vec<AggregateRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub metadata: Metadata,
    pub aggregate: Vec<AggregateRow>,
}

/// Path of the aggregate written next to a CSV results file.
pub fn summary_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("summary.json")
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    let io = |source| Error::Io { path: path.display().to_string(), source };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(content.as_bytes()).map_err(io)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::Reporting(format!("serializing results: {e}")))
}

/// Writes the records. CSV output puts the aggregate and metadata in a
/// sibling `<stem>.summary.json`; JSON output holds everything in one file.
pub fn emit_results(results: &[ExperimentResult], metadata: Metadata, format: OutputFormat, path: &Path) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Reporting("no results to write".into()));
    }
    let aggregate = aggregate(results);
    match format {
        OutputFormat::Csv => {
            write_file(path, &results_to_csv(results))?;
            write_file(&summary_path(path), &to_json(&SummaryFile { metadata, aggregate })?)
        }
        OutputFormat::Json => {
            write_file(path, &to_json(&ResultsFile { metadata, records: results.to_vec(), aggregate })?)
        }
    }
}

fn parse_opt(s: &str, path: &Path) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Schema(format!("{}: bad numeric cell '{s}'", path.display())))
}

/// Reads records written by [`emit_results`] in either format. For CSV
/// files the dataset label and dimension come from the sibling summary.
pub fn load_results(path: &Path) -> Result<Vec<ExperimentResult>> {
    let read = |p: &Path| {
        std::fs::read_to_string(p).map_err(|source| Error::Io { path: p.display().to_string(), source })
    };
    let text = read(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        let f: ResultsFile = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: not a results file: {e}", path.display())))?;
        return Ok(f.records);
    }
    let sp = summary_path(path);
    let meta: Metadata = serde_json::from_str::<SummaryFile>(&read(&sp)?)
        .map_err(|e| Error::Schema(format!("{}: {e}", sp.display())))?
        .metadata;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Schema(format!("{}: unexpected header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != 10 {
                return Err(Error::Schema(format!("{}: malformed row '{line}'", path.display())));
            }
            let req = |s: &str| parse_opt(s, path)?.ok_or_else(|| Error::Schema(format!("{}: empty cell", path.display())));
            Ok(ExperimentResult {
                dataset: meta.dataset.clone(),
                dim: meta.dim,
                method: c[0].parse().map_err(|_| Error::Schema(format!("unknown method '{}'", c[0])))?,
                alpha: req(c[1])?,
                seed: c[2].parse().map_err(|_| Error::Schema(format!("bad seed '{}'", c[2])))?,
                coverage: req(c[3])?,
                volume: req(c[4])?,
                wsc: parse_opt(c[5], path)?,
                lengthscale: parse_opt(c[6], path)?,
                gamma: parse_opt(c[7], path)?,
                lambda: parse_opt(c[8], path)?,
                runtime_ms: parse_opt(c[9], path)?,
            })
        })
        .collect()
}

/// MKS-to-Mahalanobis volume ratio for one (dataset, d, α).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub dataset: String,
    pub dim: usize,
    pub alpha: f64,
    /// Ratio of mean volumes.
    pub ratio: f64,
    /// Population std of the per-seed ratios.
    pub ratio_std: f64,
    pub mks_coverage: MeanStd,
    pub n_seeds: usize,
}

pub fn report_volume_ratio(results: &[ExperimentResult]) -> Result<Vec<RatioRow>> {
    let mut keys: Vec<(String, usize, f64)> = Vec::new();
    for r in results {
        let k = (r.dataset.clone(), r.dim, r.alpha);
        if !keys.iter().any(|x| x.0 == k.0 && x.1 == k.1 && alpha_key(x.2) == alpha_key(k.2)) {
            keys.push(k);
        }
    }
    if keys.is_empty() {
        return Err(Error::Reporting("no results to report".into()));
    }
    keys.into_iter()
        .map(|(dataset, dim, alpha)| {
            let of = |m: Method| -> BTreeMap<u64, &ExperimentResult> {
                results
                    .iter()
                    .filter(|r| r.method == m && r.dataset == dataset && r.dim == dim && alpha_key(r.alpha) == alpha_key(alpha))
                    .map(|r| (r.seed, r))
                    .collect()
            };
            let (mks, maha) = (of(Method::Mks), of(Method::Mahalanobis));
            for (m, set) in [(Method::Mks, &mks), (Method::Mahalanobis, &maha)] {
                if set.is_empty() {
                    return Err(Error::Reporting(format!(
                        "no {m} results for dataset {dataset} (d = {dim}, α = {alpha})"
                    )));
                }
            }
            let mks_vol = mean_std(&mks.values().map(|r| r.volume).collect::<Vec<_>>()).mean;
            let maha_vol = mean_std(&maha.values().map(|r| r.volume).collect::<Vec<_>>()).mean;
            let per_seed: Vec<f64> = mks
                .iter()
                .filter_map(|(s, r)| maha.get(s).map(|m| r.volume / m.volume))
                .collect();
            let ratio_std = if per_seed.is_empty() { f64::NAN } else { mean_std(&per_seed).std };
            Ok(RatioRow {
                dataset,
                dim,
                alpha,
                ratio: mks_vol / maha_vol,
                ratio_std,
                mks_coverage: mean_std(&mks.values().map(|r| r.coverage).collect::<Vec<_>>()),
                n_seeds: mks.len(),
            })
        })
        .collect()
}

/// Plain-text table: one row per (dataset, d, α) with `ratio±std`.
pub fn format_ratio_table(rows: &[RatioRow]) -> String {
    let mut s = format!("{:<16} {:>3} {:>6}  {:<18} {:<18}\n", "Dataset", "d", "alpha", "Ratio", "MKS coverage");
    for r in rows {
        s.push_str(&format!(
            "{:<16} {:>3} {:>6}  {:<18} {:<18}\n",
            r.dataset,
            r.dim,
            r.alpha,
            format!("{:.5}±{:.3}", r.ratio, r.ratio_std),
            format!("{:.5}±{:.5}", r.mks_coverage.mean, r.mks_coverage.std),
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: Method, seed: u64, coverage: f64, volume: f64) -> ExperimentResult {
        ExperimentResult {
            dataset: "toy".into(),
            dim: 2,
            method,
            alpha: 0.1,
            seed,
            coverage,
            volume,
            wsc: Some(0.8),
            lengthscale: None,
            gamma: None,
            lambda: None,
            runtime_ms: None,
        }
    }

    fn meta() -> Metadata {
        Metadata { dataset: "toy".into(), dim: 2, config: None, resolved: vec![], dropped_rows: 0 }
    }

    #[test]
    fn spec_strings() {
        assert_eq!("fixed:0.5".parse::<LengthscaleSpec>().unwrap(), LengthscaleSpec::Fixed(0.5));
        assert_eq!("2".parse::<LengthscaleSpec>().unwrap(), LengthscaleSpec::Fixed(2.0));
        assert_eq!("auto-median".parse::<LengthscaleSpec>().unwrap(), LengthscaleSpec::AutoMedian);
        assert!("-1".parse::<LengthscaleSpec>().is_err());
        assert_eq!("auto-p90".parse::<GammaSpec>().unwrap(), GammaSpec::AutoP90);
        assert_eq!("default".parse::<LambdaSpec>().unwrap(), LambdaSpec::Default);
        assert!("x".parse::<GammaSpec>().is_err());
    }

    #[test]
    fn config_json_roundtrip() {
        let json = r#"{"mode":"synthetic","n":400,"kernel":{"lengthscale":"fixed:0.5"},"gamma":0.01,"mahalanobis_lambda":"default"}"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.gamma, GammaSpec::Fixed(0.01));
        assert_eq!(cfg.kernel.lengthscale, Some(LengthscaleSpec::Fixed(0.5)));
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn mode_defaults() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.lengthscale_spec(), LengthscaleSpec::Fixed(0.5));
        assert_eq!(cfg.ridge_reg_value(), 0.0);
        assert!(!cfg.standardize_value());
        cfg.mode = Mode::Csv;
        assert_eq!(cfg.lengthscale_spec(), LengthscaleSpec::AutoMedian);
        assert_eq!(cfg.ridge_reg_value(), 1.0);
        assert!(cfg.standardize_value());
    }

    #[test]
    fn empty_methods_is_config_error() {
        let cfg = RunConfig { methods: vec![], ..RunConfig::default() };
        assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn aggregate_mean() {
        let rs = vec![rec(Method::Mks, 0, 0.9, 1.0), rec(Method::Mks, 1, 0.8, 3.0)];
        let agg = aggregate(&rs);
        assert_eq!(agg.len(), 1);
        assert!((agg[0].coverage.mean - 0.85).abs() < 1e-15);
        assert!((agg[0].volume.std - 1.0).abs() < 1e-15);
    }

    #[test]
    fn csv_lines_and_determinism() {
        let rs = vec![rec(Method::Mks, 0, 0.9, 1.0), rec(Method::Mahalanobis, 0, 0.9, 2.0)];
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        emit_results(&rs, meta(), OutputFormat::Csv, &p1).unwrap();
        emit_results(&rs, meta(), OutputFormat::Csv, &p2).unwrap();
        let a = std::fs::read_to_string(&p1).unwrap();
        assert_eq!(a.lines().count(), 3);
        assert_eq!(a.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(a, std::fs::read_to_string(&p2).unwrap());
        assert!(summary_path(&p1).exists());
        assert_eq!(load_results(&p1).unwrap(), rs);
        let pj = dir.path().join("a.json");
        emit_results(&rs, meta(), OutputFormat::Json, &pj).unwrap();
        assert_eq!(load_results(&pj).unwrap(), rs);
        assert!(emit_results(&[], meta(), OutputFormat::Csv, &p1).is_err());
        let bad = dir.path().join("missing").join("x.csv");
        assert!(matches!(emit_results(&rs, meta(), OutputFormat::Csv, &bad), Err(Error::Io { .. })));
    }

    #[test]
    fn infinite_volume_roundtrips_through_json() {
        let rs = vec![rec(Method::Mks, 0, 1.0, f64::INFINITY)];
        let s = serde_json::to_string(&rs).unwrap();
        assert!(s.contains("\"volume\":null"));
        let back: Vec<ExperimentResult> = serde_json::from_str(&s).unwrap();
        assert_eq!(back[0].volume, f64::INFINITY);
    }

    #[test]
    fn ratio_examples() {
        let rs = vec![rec(Method::Mks, 0, 0.9, 2.0), rec(Method::Mahalanobis, 0, 0.9, 2.0)];
        let rows = report_volume_ratio(&rs).unwrap();
        assert_eq!(rows[0].ratio, 1.0);
        let rs = vec![rec(Method::Mks, 0, 0.9, 2.48489), rec(Method::Mahalanobis, 0, 0.9, 2.82308)];
        let rows = report_volume_ratio(&rs).unwrap();
        assert!((rows[0].ratio - 0.8802).abs() < 5e-5);
        assert!(format_ratio_table(&rows).contains("0.88021±0.000"));
        let rs = vec![rec(Method::Mks, 0, 0.9, 2.0)];
        assert!(matches!(report_volume_ratio(&rs), Err(Error::Reporting(_))));
    }

    #[test]
    fn small_synthetic_run() {
        let cfg = RunConfig {
            n: 800,
            seeds: vec![1, 2],
            alphas: vec![0.1, 0.01],
            mc_samples: 20_000,
            ..RunConfig::default()
        };
        let mut lines = Vec::new();
        let out = run_experiment_with_log(&cfg, &mut |l| lines.push(l.to_string())).unwrap();
        assert_eq!(out.records.len(), 2 * 2 * 4);
        assert_eq!(lines.len(), 2);
        for r in &out.records {
            assert!((0.0..=1.0).contains(&r.coverage));
            assert!(r.volume >= 0.0);
            assert!(r.wsc.is_some_and(|w| (0.0..=1.0).contains(&w)));
            assert!(r.runtime_ms.is_none());
        }
        let again = run_experiment(&cfg).unwrap();
        assert_eq!(again, out.records);
        let mks = out.records.iter().find(|r| r.method == Method::Mks).unwrap();
        assert_eq!(mks.lengthscale, Some(0.5));
        assert!(mks.gamma.is_some_and(|g| g > 0.0));
    }

    #[test]
    fn tmax_caps_calibration() {
        let cal = Points::from_scalars(&(0..100).map(f64::from).collect::<Vec<_>>());
        let s = subsample(&cal, 10, 3);
        assert_eq!(s.len(), 10);
        assert_eq!(s, subsample(&cal, 10, 3));
        assert_eq!(subsample(&cal, 1000, 3), cal);
    }
}
