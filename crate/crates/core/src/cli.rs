//! Command-line interface: `fit`, `simulate` and `test`.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use faer::Mat;
use serde::Serialize;
use serde_json::json;

use crate::basis::BasisKind;
use crate::effects::{cumulative_effects, default_m_grid, find_windows, pointwise_effects, Sign};
use crate::error::{DlimError, Result};
use crate::fit::{fit_penalized, Family, FittedModel};
use crate::model::{DlimData, ModelConfig, ModelKind, PenaltyChoice};
use crate::modtest::bootstrap_lrt;
use crate::simlab::{fmt_float, replicate_seed, run_study, simulate_dataset, SimDataset, StudyConfig};

#[derive(Debug, Parser)]
#[command(name = "dlim", version, about = "Penalized distributed lag interaction models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads (0 uses every available core).
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to CSV data and write effect estimates.
    Fit(AnalysisConfig),
    /// Run a simulation study described by a JSON file.
    Simulate(SimulateArgs),
    /// Bootstrap likelihood-ratio test of a null model against a larger one.
    Test(TestArgs),
}

/// Data, model and output settings shared by `fit` and `test`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalysisConfig {
    /// Comma-separated input file with a header row.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "y")]
    pub response: String,
    /// Exposure columns are `<prefix>1 … <prefix>T`.
    #[arg(long, default_value = "x")]
    pub exposure_prefix: String,
    /// Number of lags T; detected from the header when omitted.
    #[arg(long)]
    pub lags: Option<usize>,
    #[arg(long)]
    pub modifier: String,
    /// Adjustment covariate columns.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    #[arg(long, default_value = "gaussian")]
    pub family: Family,
    /// dlm, dlim-linear or dlim.
    #[arg(long, default_value = "dlim")]
    pub model: ModelKind,
    #[arg(long, default_value_t = 20)]
    pub nu_time: usize,
    #[arg(long, default_value_t = 20)]
    pub nu_mod: usize,
    /// Modifier basis of `dlim`: bspline, cr or poly.
    #[arg(long, default_value = "bspline")]
    pub mod_basis: BasisKind,
    /// ps:d_time,d_mod, cr or none.
    #[arg(long, default_value = "ps:2,2")]
    pub penalty: PenaltyChoice,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Study configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = ".")]
    pub output: PathBuf,
    /// Overrides the seed of the configuration file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the first replicate's dataset to `data.csv`.
    #[arg(long)]
    pub export_data: bool,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[command(flatten)]
    pub analysis: AnalysisConfig,
    #[arg(long, default_value = "dlm")]
    pub null: ModelKind,
    #[arg(long, default_value = "dlim")]
    pub full: ModelKind,
    /// Bootstrap replicates B.
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(|e| DlimError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Fit(cfg) => cmd_fit(&cfg),
        Command::Simulate(args) => cmd_simulate(&args, cli.workers),
        Command::Test(args) => cmd_test(&args),
    })
}

fn parse_cell(raw: &str) -> Option<std::result::Result<f64, ()>> {
    let v = raw.trim();
    if v.is_empty() || v.eq_ignore_ascii_case("na") || v.eq_ignore_ascii_case("nan") {
        return None;
    }
    Some(v.parse::<f64>().map_err(|_| ()).and_then(|x| if x.is_finite() { Ok(x) } else { Err(()) }))
}

/// Reads the complete cases of the configured columns.
pub fn load_data(cfg: &AnalysisConfig) -> Result<DlimData> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(&cfg.data)?;
    let headers = reader.headers()?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let find = |name: &str| {
        index.get(name).copied().ok_or_else(|| {
            DlimError::Config(format!("column '{name}' not found in {}", cfg.data.display()))
        })
    };
    let lags = match cfg.lags {
        Some(t) => t,
        None => (1..).take_while(|t| index.contains_key(format!("{}{t}", cfg.exposure_prefix).as_str())).count(),
    };
    if lags < 2 {
        return Err(DlimError::Config(format!(
            "need at least 2 exposure columns {}1, {}2, …; found {lags}",
            cfg.exposure_prefix, cfg.exposure_prefix
        )));
    }
    let mut names = vec![cfg.response.clone()];
    names.extend((1..=lags).map(|t| format!("{}{t}", cfg.exposure_prefix)));
    names.push(cfg.modifier.clone());
    names.extend(cfg.covariates.iter().cloned());
    let cols = names.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dropped = 0;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let mut row = Vec::with_capacity(cols.len());
        let mut missing = false;
        for (name, &c) in names.iter().zip(&cols) {
            match parse_cell(record.get(c).unwrap_or("")) {
                None => missing = true,
                Some(Ok(v)) => row.push(v),
                Some(Err(())) => {
                    return Err(DlimError::Data(format!(
                        "{} line {line}, column '{name}': cannot parse '{}'",
                        cfg.data.display(),
                        record.get(c).unwrap_or("")
                    )))
                }
            }
        }
        if missing {
            dropped += 1;
        } else {
            rows.push(row);
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} rows with missing values; {} complete cases remain", rows.len());
    }
    let n = rows.len();
    let q = cfg.covariates.len();
    Ok(DlimData {
        response: rows.iter().map(|r| r[0]).collect(),
        exposures: Mat::from_fn(n, lags, |i, t| rows[i][1 + t]),
        modifier: rows.iter().map(|r| r[1 + lags]).collect(),
        covariates: Mat::from_fn(n, q, |i, j| rows[i][2 + lags + j]),
        covariate_names: cfg.covariates.clone(),
    })
}

fn model_config(cfg: &AnalysisConfig, kind: ModelKind) -> ModelConfig {
    let base = match kind {
        ModelKind::Dlm => ModelConfig::dlm(cfg.nu_time),
        ModelKind::DlimLinear => ModelConfig::dlim_linear(cfg.nu_time),
        ModelKind::Dlim => ModelConfig { mod_basis: cfg.mod_basis, ..ModelConfig::dlim(cfg.nu_time, cfg.nu_mod) },
    };
    base.with_family(cfg.family).with_penalty(cfg.penalty)
}

fn check_common(cfg: &AnalysisConfig) -> Result<()> {
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(DlimError::Config(format!("alpha must lie in (0, 1), got {}", cfg.alpha)));
    }
    fs::create_dir_all(&cfg.output)?;
    Ok(())
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn coefficient_names(fit: &FittedModel) -> Vec<String> {
    let mut names = Vec::with_capacity(fit.n_coef());
    if let Some(l) = &fit.layout {
        for k in 1..=l.nu_mod() {
            for j in 1..=l.nu_time() {
                names.push(format!("theta[{j},{k}]"));
            }
        }
    }
    names.extend(fit.covariate_names.iter().cloned());
    names.extend((1..=fit.alpha_range.len()).map(|g| format!("alpha[{g}]")));
    names
}

fn model_json(fit: &FittedModel, label: &str, cfg: &AnalysisConfig) -> serde_json::Value {
    let coefficients: Vec<_> = coefficient_names(fit)
        .into_iter()
        .zip(&fit.coefficients)
        .enumerate()
        .map(|(i, (name, v))| json!({ "name": name, "estimate": v, "se": fit.vcov[(i, i)].max(0.0).sqrt() }))
        .collect();
    let lambda: serde_json::Map<String, serde_json::Value> =
        fit.penalty_labels.iter().zip(&fit.lambda).map(|(l, v)| (l.clone(), json!(v))).collect();
    json!({
        "model": label,
        "family": fit.family,
        "n": fit.n,
        "coefficients": coefficients,
        "lambda": lambda,
        "edf": fit.edf,
        "scale": fit.scale,
        "loglik": fit.loglik,
        "reml": if fit.reml.is_finite() { json!(fit.reml) } else { json!(null) },
        "aic": fit.aic(),
        "converged": fit.converged,
        "config": cfg,
    })
}

fn cmd_fit(cfg: &AnalysisConfig) -> Result<()> {
    check_common(cfg)?;
    let data = load_data(cfg)?;
    let model = model_config(cfg, cfg.model);
    let spec = model.build(&data)?;
    let fit = fit_penalized(&spec)?;
    if !fit.converged {
        log::warn!("smoothing parameter selection did not converge");
    }

    let grid = default_m_grid(&data.modifier);
    let surface = pointwise_effects(&fit, &grid, cfg.alpha)?;
    let rows = (0..grid.len()).flat_map(|i| {
        let s = &surface;
        (1..=s.lags()).map(move |t| {
            let (lo, hi) = s.interval(i, t);
            vec![
                fmt_float(s.m_grid[i]),
                t.to_string(),
                fmt_float(s.estimates[(i, t - 1)]),
                fmt_float(s.se[(i, t - 1)]),
                fmt_float(lo),
                fmt_float(hi),
            ]
        })
    });
    write_csv(&cfg.output.join("effects.csv"), &["m", "t", "estimate", "se", "lo", "hi"], rows)?;

    let cum = cumulative_effects(&fit, &grid, cfg.alpha)?;
    let rows = (0..grid.len()).map(|i| {
        let (lo, hi) = cum.interval(i);
        vec![fmt_float(grid[i]), fmt_float(cum.estimates[i]), fmt_float(cum.se[i]), fmt_float(lo), fmt_float(hi)]
    });
    write_csv(&cfg.output.join("cumulative.csv"), &["m", "estimate", "se", "lo", "hi"], rows)?;

    let rows = find_windows(&surface).into_iter().map(|w| {
        let sign = match w.sign {
            Sign::Positive => "positive",
            Sign::Negative => "negative",
        };
        vec![fmt_float(w.m), w.start.to_string(), w.end.to_string(), sign.to_string()]
    });
    write_csv(&cfg.output.join("windows.csv"), &["m", "start", "end", "sign"], rows)?;

    let text = serde_json::to_string_pretty(&model_json(&fit, &model.label(), cfg))?;
    fs::write(cfg.output.join("model.json"), text + "\n")?;
    Ok(())
}

/// Writes a simulated dataset in the format `fit` reads: `y, x1…xT, m, z1…`.
pub fn write_dataset(data: &SimDataset, path: &Path) -> Result<()> {
    let lags = data.exposures.ncols();
    let q = data.covariates.ncols();
    let mut header = vec!["y".to_string()];
    header.extend((1..=lags).map(|t| format!("x{t}")));
    header.push("m".into());
    header.extend((1..=q).map(|j| format!("z{j}")));
    let rows = (0..data.response.len()).map(|i| {
        let mut r = vec![fmt_float(data.response[i])];
        r.extend((0..lags).map(|t| fmt_float(data.exposures[(i, t)])));
        r.push(fmt_float(data.modifier[i]));
        r.extend((0..q).map(|j| fmt_float(data.covariates[(i, j)])));
        r
    });
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(path, &header, rows)
}

fn cmd_simulate(args: &SimulateArgs, workers: usize) -> Result<()> {
    let mut cfg = StudyConfig::from_json_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.workers = workers;
    cfg.validate()?;
    fs::create_dir_all(&args.output)?;
    if args.export_data {
        let data = simulate_dataset(&cfg.sim, replicate_seed(cfg.seed, 0))?;
        write_dataset(&data, &args.output.join("data.csv"))?;
    }
    let report = run_study(&cfg)?;
    report.write_csv(&args.output.join("report.csv"))?;
    report.write_json(&args.output.join("report.json"))?;
    Ok(())
}

fn cmd_test(args: &TestArgs) -> Result<()> {
    let cfg = &args.analysis;
    check_common(cfg)?;
    if args.null >= args.full {
        return Err(DlimError::Config(format!(
            "{} is not nested in {} (order: dlm < dlim-linear < dlim)",
            args.null, args.full
        )));
    }
    if args.bootstrap < crate::modtest::MIN_REPLICATES {
        return Err(DlimError::Config(format!(
            "the bootstrap needs at least {} replicates, got {}",
            crate::modtest::MIN_REPLICATES,
            args.bootstrap
        )));
    }
    let data = load_data(cfg)?;
    let null = model_config(cfg, args.null).build(&data)?;
    let full = model_config(cfg, args.full).build(&data)?;
    let res = bootstrap_lrt(&null, &full, args.bootstrap, cfg.seed)?;
    let out = json!({
        "null": res.null_label,
        "full": res.full_label,
        "observed_stat": res.observed_stat,
        "p_value": res.p_value,
        "alpha": cfg.alpha,
        "critical_value": res.critical_value(cfg.alpha),
        "reject": res.rejects(cfg.alpha),
        "bootstrap": res.requested,
        "dropped": res.dropped,
        "seed": res.seed,
        "boot_stats": res.boot_stats,
    });
    fs::write(cfg.output.join("test.json"), serde_json::to_string_pretty(&out)? + "\n")?;
    Ok(())
}
