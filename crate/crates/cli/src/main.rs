//! `mks`: run conformal prediction experiments and summarize their output.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mks_core::experiment::{
    aggregate, emit_results, format_ratio_table, load_results, report_volume_ratio, results_to_csv,
    run_experiment_with_log, GammaSpec, LambdaSpec, LengthscaleSpec, Metadata, Method, Mode, OutputFormat, RunConfig,
};
use mks_core::{Error, ErrorClass, Result};

#[derive(Parser, Debug)]
#[command(name = "mks", version, about = "Multivariate kernel score conformal prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic bivariate regression benchmark.
    Synth {
        /// Number of generated samples (split 50/25/25).
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Regression residuals on a user-supplied CSV dataset.
    Csv {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated feature column names.
        #[arg(long, value_delimiter = ',')]
        features: Vec<String>,
        /// Comma-separated target column names.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
        /// Ridge penalty of the regressor.
        #[arg(long)]
        ridge_reg: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Precomputed residuals (`split,e1,...,ed`).
    Residuals {
        #[arg(long)]
        residuals: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run whatever the config file (or `--mode`) describes.
    Run {
        #[arg(long)]
        mode: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// MKS/Mahalanobis volume-ratio table from one or more results files.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Also write the rows as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Seed list (`0,1,2`) or half-open range (`0..10`).
    #[arg(long)]
    seeds: Option<String>,
    /// Subset of mks,mahalanobis,density,bonferroni.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Number, `fixed:<x>` or `auto-median`.
    #[arg(long)]
    lengthscale: Option<String>,
    /// Number or `auto-p90`.
    #[arg(long)]
    gamma: Option<String>,
    /// Number or `default`.
    #[arg(long)]
    mahalanobis_lambda: Option<String>,
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Results path; CSV results also get a `<stem>.summary.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `csv` or `json`.
    #[arg(long)]
    format: Option<String>,
    /// Monte-Carlo volumes for every method.
    #[arg(long)]
    force_mc: bool,
    /// Cap on the MKS calibration set size.
    #[arg(long)]
    tmax: Option<usize>,
    /// Record wall-clock runtimes (makes output non-reproducible).
    #[arg(long)]
    timing: bool,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("cannot parse seeds '{s}'"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        return Ok((a..b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

impl Common {
    fn apply(self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(a) = self.alphas {
            cfg.alphas = a;
        }
        if let Some(s) = self.seeds {
            cfg.seeds = parse_seeds(&s)?;
        }
        if let Some(m) = self.methods {
            cfg.methods = m.iter().map(|x| x.parse::<Method>()).collect::<Result<_>>()?;
        }
        if let Some(l) = self.lengthscale {
            cfg.kernel.lengthscale = Some(l.parse::<LengthscaleSpec>()?);
        }
        if let Some(g) = self.gamma {
            cfg.gamma = g.parse::<GammaSpec>()?;
        }
        if let Some(l) = self.mahalanobis_lambda {
            cfg.mahalanobis_lambda = l.parse::<LambdaSpec>()?;
        }
        if let Some(n) = self.mc_samples {
            cfg.mc_samples = n;
        }
        if let Some(o) = self.out {
            cfg.out = Some(o);
        }
        if let Some(f) = self.format {
            cfg.format = f.parse::<OutputFormat>()?;
        }
        cfg.force_mc |= self.force_mc;
        if self.tmax.is_some() {
            cfg.tmax = self.tmax;
        }
        cfg.timing |= self.timing;
        Ok(cfg)
    }
}

fn base_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_json_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn build_config(command: Command) -> Result<RunConfig> {
    match command {
        Command::Synth { n, common } => {
            let mut cfg = base_config(&common.config)?;
            cfg.mode = Mode::Synthetic;
            if let Some(n) = n {
                cfg.n = n;
            }
            common.apply(cfg)
        }
        Command::Csv { data, features, targets, ridge_reg, common } => {
            let mut cfg = base_config(&common.config)?;
            cfg.mode = Mode::Csv;
            if data.is_some() {
                cfg.data_path = data;
            }
            if !features.is_empty() {
                cfg.feature_cols = features;
            }
            if !targets.is_empty() {
                cfg.target_cols = targets;
            }
            if ridge_reg.is_some() {
                cfg.ridge_reg = ridge_reg;
            }
            common.apply(cfg)
        }
        Command::Residuals { residuals, common } => {
            let mut cfg = base_config(&common.config)?;
            cfg.mode = Mode::Residuals;
            if residuals.is_some() {
                cfg.residuals_path = residuals;
            }
            common.apply(cfg)
        }
        Command::Run { mode, common } => {
            let mut cfg = base_config(&common.config)?;
            if let Some(m) = mode {
                cfg.mode = m.parse()?;
            }
            common.apply(cfg)
        }
        Command::Report { .. } => unreachable!("report has no run config"),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Report { results, out } = cli.command {
        let mut all = Vec::new();
        for p in &results {
            all.extend(load_results(p)?);
        }
        let rows = report_volume_ratio(&all)?;
        print!("{}", format_ratio_table(&rows));
        if let Some(out) = out {
            let json = serde_json::to_string_pretty(&rows).map_err(|e| Error::Reporting(e.to_string()))?;
            std::fs::write(&out, json + "\n")
                .map_err(|source| Error::Io { path: out.display().to_string(), source })?;
        }
        return Ok(());
    }

    let cfg = build_config(cli.command)?;
    cfg.validate()?;
    eprintln!(
        "mode={:?} dataset={} methods={:?} alphas={:?} seeds={} mc_samples={} ridge_reg={} standardize={}",
        cfg.mode,
        cfg.dataset_name(),
        cfg.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
        cfg.alphas,
        cfg.seeds.len(),
        cfg.mc_samples,
        cfg.ridge_reg_value(),
        cfg.standardize_value()
    );
    let out = run_experiment_with_log(&cfg, &mut |line| eprintln!("{line}"))?;
    if out.dropped_rows > 0 {
        eprintln!("dropped {} rows with missing or non-finite values", out.dropped_rows);
    }
    for row in aggregate(&out.records) {
        eprintln!(
            "{:<12} alpha={:<5} coverage={:.5}±{:.5} volume={:.5}±{:.5}{}",
            row.method.as_str(),
            row.alpha,
            row.coverage.mean,
            row.coverage.std,
            row.volume.mean,
            row.volume.std,
            row.wsc.map_or(String::new(), |w| format!(" wsc={:.5}±{:.5}", w.mean, w.std)),
        );
    }
    match &cfg.out {
        Some(path) => {
            let metadata = Metadata {
                dataset: cfg.dataset_name(),
                dim: out.records.first().map_or(0, |r| r.dim),
                config: Some(cfg.clone()),
                resolved: out.resolved,
                dropped_rows: out.dropped_rows,
            };
            emit_results(&out.records, metadata, cfg.format, path)?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{}", results_to_csv(&out.records)),
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
