//! Simulation scenarios, fit metrics and replicated studies.
//!
//! All scenarios build on the bump `f(t, c) = 2.5·φ((t − c)/5)`:
//!
//! 1. no modification, `β_t(m) = f(t, 20)`,
//! 2. linear scaling, `β_t(m) = m·f(t, 20)`,
//! 3. a peak shifting with `m`, `β_t(m) = f(t, 37/(1 + e^{−20(m − 0.5)}))`,
//! 4. both, `β_t(m) = m·f(t, 37/(1 + e^{−20(m − 0.5)}))`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use faer::Mat;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::effects::{cumulative_effects, pointwise_effects};
use crate::error::{DlimError, Result};
use crate::fit::{fit_penalized, Family, FittedModel};
use crate::model::{DlimData, ModelConfig, ModelKind};
use crate::modtest::bootstrap_lrt_shared;

/// Standard normal density.
fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `2.5·φ((t − c)/5)`.
pub fn bump(t: f64, c: f64) -> f64 {
    2.5 * phi((t - c) / 5.0)
}

/// Peak location `37/(1 + e^{−20(m − 0.5)})` of scenarios 3 and 4.
pub fn shifted_center(m: f64) -> f64 {
    37.0 / (1.0 + (-20.0 * (m - 0.5)).exp())
}

/// `β_t(m)` of scenario 1–4.
pub fn true_beta(scenario: u8, t: usize, m: f64) -> Result<f64> {
    let t = t as f64;
    match scenario {
        1 => Ok(bump(t, 20.0)),
        2 => Ok(m * bump(t, 20.0)),
        3 => Ok(bump(t, shifted_center(m))),
        4 => Ok(m * bump(t, shifted_center(m))),
        s => Err(DlimError::Config(format!("scenario must be 1, 2, 3 or 4, got {s}"))),
    }
}

/// Signal-to-noise ratio `sd(Σ_t x_t β_t(m)) / σ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Snr {
    Low,
    Med,
    High,
}

impl Snr {
    pub fn value(self) -> f64 {
        match self {
            Snr::Low => 0.5,
            Snr::Med => 1.0,
            Snr::High => 10.0,
        }
    }

    pub const ALL: [Snr; 3] = [Snr::Low, Snr::Med, Snr::High];
}

impl FromStr for Snr {
    type Err = DlimError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "low" | "0.5" => Ok(Snr::Low),
            "med" | "medium" | "1" => Ok(Snr::Med),
            "high" | "10" => Ok(Snr::High),
            other => Err(DlimError::Config(format!("unknown snr '{other}' (expected low, med or high)"))),
        }
    }
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Snr::Low => "low",
            Snr::Med => "med",
            Snr::High => "high",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModifierLaw {
    /// U(0, 1).
    #[default]
    Uniform,
    /// N(0.5, 0.2²), unbounded.
    Normal,
}

impl FromStr for ModifierLaw {
    type Err = DlimError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(ModifierLaw::Uniform),
            "normal" => Ok(ModifierLaw::Normal),
            other => Err(DlimError::Config(format!("unknown modifier law '{other}' (expected uniform or normal)"))),
        }
    }
}

/// Where exposure histories come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ExposureSource {
    /// Independent stationary AR(1) series per individual, each week then
    /// standardized across individuals.
    Ar1 { rho: f64, sd: f64 },
    /// Numeric CSV with one series per row and one week per column; `n`
    /// rows are sampled without replacement and the first `T` columns used.
    Csv { path: PathBuf },
}

impl Default for ExposureSource {
    fn default() -> Self {
        ExposureSource::Ar1 { rho: 0.9, sd: 1.0 }
    }
}

/// Settings of one simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub scenario: u8,
    pub n: usize,
    pub lags: usize,
    pub snr: Snr,
    pub family: Family,
    pub modifier_law: ModifierLaw,
    pub exposure: ExposureSource,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scenario: 1,
            n: 1000,
            lags: 37,
            snr: Snr::High,
            family: Family::Gaussian,
            modifier_law: ModifierLaw::Uniform,
            exposure: ExposureSource::default(),
        }
    }
}

impl SimConfig {
    pub fn new(scenario: u8, n: usize, snr: Snr) -> Self {
        Self { scenario, n, snr, ..Self::default() }
    }
}

/// A simulated dataset together with its truth.
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub config: SimConfig,
    pub seed: u64,
    pub response: Vec<f64>,
    /// n × T exposures.
    pub exposures: Mat<f64>,
    pub modifier: Vec<f64>,
    /// n × 3 covariates.
    pub covariates: Mat<f64>,
    pub gamma: Vec<f64>,
    /// n × T true `β_t(m_i)` on the scale of the linear predictor.
    pub beta: Mat<f64>,
    /// True cumulative effects `δ(m_i)`.
    pub delta: Vec<f64>,
    /// Gaussian noise sd (0 for Poisson data).
    pub sigma: f64,
    /// Multiplier applied to the Gaussian-scale linear predictor for Poisson data (1 otherwise).
    pub effect_scale: f64,
}

impl SimDataset {
    pub fn to_data(&self) -> DlimData {
        DlimData {
            response: self.response.clone(),
            exposures: self.exposures.clone(),
            modifier: self.modifier.clone(),
            covariates: self.covariates.clone(),
            covariate_names: (1..=self.covariates.ncols()).map(|j| format!("z{j}")).collect(),
        }
    }
}

fn sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn standardize_columns(x: &mut Mat<f64>) {
    for t in 0..x.ncols() {
        let col: Vec<f64> = (0..x.nrows()).map(|i| x[(i, t)]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let s = sd(&col);
        for i in 0..x.nrows() {
            x[(i, t)] = if s > 0.0 { (x[(i, t)] - mean) / s } else { 0.0 };
        }
    }
}

fn read_exposure_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path)?;
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if r == 0 => continue,
            Err(_) => {
                return Err(DlimError::Data(format!("{}: non-numeric value on line {}", path.display(), r + 1)))
            }
        }
    }
    Ok(rows)
}

fn exposures(source: &ExposureSource, n: usize, lags: usize, rng: &mut ChaCha8Rng) -> Result<Mat<f64>> {
    let mut x = match source {
        ExposureSource::Ar1 { rho, sd } => {
            if !(rho.abs() < 1.0) || !(*sd > 0.0) {
                return Err(DlimError::Config(format!("AR(1) needs |rho| < 1 and sd > 0, got rho {rho}, sd {sd}")));
            }
            let innov = Normal::new(0.0, *sd).map_err(|e| DlimError::Config(e.to_string()))?;
            let start = Normal::new(0.0, sd / (1.0 - rho * rho).sqrt()).map_err(|e| DlimError::Config(e.to_string()))?;
            let mut x = Mat::zeros(n, lags);
            for i in 0..n {
                let mut v = start.sample(rng);
                for t in 0..lags {
                    if t > 0 {
                        v = rho * v + innov.sample(rng);
                    }
                    x[(i, t)] = v;
                }
            }
            x
        }
        ExposureSource::Csv { path } => {
            let rows: Vec<Vec<f64>> =
                read_exposure_csv(path)?.into_iter().filter(|r| r.len() >= lags).collect();
            if rows.len() < n {
                return Err(DlimError::Data(format!(
                    "{} holds {} series of length ≥ {lags}, {n} needed",
                    path.display(),
                    rows.len()
                )));
            }
            let pick = rand::seq::index::sample(rng, rows.len(), n);
            Mat::from_fn(n, lags, |i, t| rows[pick.index(i)][t])
        }
    };
    standardize_columns(&mut x);
    Ok(x)
}

/// Mean count targeted by the Poisson reconstruction.
const POISSON_MEAN: f64 = 10.0;
/// Standard deviation of the Poisson log-rate around its intercept.
const POISSON_LOG_SD: f64 = 0.5;

/// Simulates one dataset.
///
/// Gaussian data follow `y = Σ_t x_t β_t(m) + z'γ + m + ε` with
/// `γ ~ N(0, I₃)`, `z ~ N(0, I₃)` and `sd(ε) = sd(signal)/snr`. Poisson data
/// rescale that linear predictor (without noise) to standard deviation 0.5
/// and shift it so the mean count is 10; the stored truth is rescaled the
/// same way.
pub fn simulate_dataset(config: &SimConfig, seed: u64) -> Result<SimDataset> {
    let (n, lags) = (config.n, config.lags);
    if n < 50 {
        return Err(DlimError::Config(format!("simulations need n ≥ 50, got {n}")));
    }
    if lags < 2 {
        return Err(DlimError::Config(format!("simulations need at least 2 lags, got {lags}")));
    }
    true_beta(config.scenario, 1, 0.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let x = exposures(&config.exposure, n, lags, &mut rng)?;
    let modifier: Vec<f64> = match config.modifier_law {
        ModifierLaw::Uniform => (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        ModifierLaw::Normal => {
            let d = Normal::new(0.5, 0.2).expect("valid normal");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
    };
    let covariates = Mat::from_fn(n, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
    let gamma: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();

    let mut beta = Mat::zeros(n, lags);
    for i in 0..n {
        for t in 0..lags {
            beta[(i, t)] = true_beta(config.scenario, t + 1, modifier[i])?;
        }
    }
    let signal: Vec<f64> = (0..n).map(|i| (0..lags).map(|t| x[(i, t)] * beta[(i, t)]).sum()).collect();
    let linear: Vec<f64> = (0..n)
        .map(|i| signal[i] + (0..3).map(|j| covariates[(i, j)] * gamma[j]).sum::<f64>() + modifier[i])
        .collect();

    let (response, sigma, effect_scale) = match config.family {
        Family::Gaussian => {
            let sigma = sd(&signal) / config.snr.value();
            let response = linear.iter().map(|l| l + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
            (response, sigma, 1.0)
        }
        Family::Poisson => {
            let kappa = POISSON_LOG_SD / sd(&linear);
            let mean_rate = linear.iter().map(|l| (kappa * l).exp()).sum::<f64>() / n as f64;
            let offset = POISSON_MEAN.ln() - mean_rate.ln();
            let response = linear
                .iter()
                .map(|l| Poisson::new((offset + kappa * l).exp()).expect("positive rate").sample(&mut rng))
                .collect();
            (response, 0.0, kappa)
        }
    };
    if effect_scale != 1.0 {
        beta = beta * faer::Scale(effect_scale);
    }
    let delta = (0..n).map(|i| (0..lags).map(|t| beta[(i, t)]).sum()).collect();
    Ok(SimDataset {
        config: config.clone(),
        seed,
        response,
        exposures: x,
        modifier,
        covariates,
        gamma,
        beta,
        delta,
        sigma,
        effect_scale,
    })
}

/// Accuracy and coverage of a fitted model against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub cum_rmse: f64,
    pub cum_cov: f64,
    pub pt_rmse: f64,
    pub pt_cov: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 4] = ["cum_rmse", "cum_cov", "pt_rmse", "pt_cov"];

    pub fn values(&self) -> [f64; 4] {
        [self.cum_rmse, self.cum_cov, self.pt_rmse, self.pt_cov]
    }
}

/// RMSE of `estimate` against `truth` and the share of Wald intervals
/// `estimate ± z·se` covering the truth.
pub fn rmse_and_coverage(truth: &[f64], estimate: &[f64], se: &[f64], alpha: f64) -> Result<(f64, f64)> {
    if truth.len() != estimate.len() || truth.len() != se.len() || truth.is_empty() {
        return Err(DlimError::Dimension(format!(
            "truth, estimates and standard errors have lengths {}, {} and {}",
            truth.len(),
            estimate.len(),
            se.len()
        )));
    }
    let z = NormalDist::standard().inverse_cdf(1.0 - alpha / 2.0);
    let n = truth.len() as f64;
    let mse = truth.iter().zip(estimate).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let covered = truth.iter().zip(estimate).zip(se).filter(|((a, b), s)| (*a - *b).abs() <= z * *s).count();
    Ok((mse.sqrt(), covered as f64 / n))
}

/// Cumulative and pointwise RMSE and coverage over the individuals of `data`.
pub fn evaluate_fit(model: &FittedModel, data: &SimDataset, alpha: f64) -> Result<Metrics> {
    let n = data.modifier.len();
    if model.n != n {
        return Err(DlimError::Dimension(format!("model fitted to {} observations, dataset has {n}", model.n)));
    }
    let cum = cumulative_effects(model, &data.modifier, alpha)?;
    let (cum_rmse, cum_cov) = rmse_and_coverage(&data.delta, &cum.estimates, &cum.se, alpha)?;
    let surface = pointwise_effects(model, &data.modifier, alpha)?;
    let lags = data.beta.ncols();
    if surface.lags() != lags {
        return Err(DlimError::Dimension(format!("model has {} lags, dataset {lags}", surface.lags())));
    }
    let flat = |m: &Mat<f64>| (0..n).flat_map(|i| (0..lags).map(move |t| m[(i, t)])).collect::<Vec<f64>>();
    let (pt_rmse, pt_cov) =
        rmse_and_coverage(&flat(&data.beta), &flat(&surface.estimates), &flat(&surface.se), alpha)?;
    Ok(Metrics { cum_rmse, cum_cov, pt_rmse, pt_cov })
}

/// A model as named in study configurations: `dlm`, `dlim-linear` or
/// `dlim(ν_time,ν_mod)`. The first two use 10 time basis functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModelChoice {
    pub kind: ModelKind,
    pub nu_time: usize,
    pub nu_mod: usize,
}

impl ModelChoice {
    pub const DLM: ModelChoice = ModelChoice { kind: ModelKind::Dlm, nu_time: 10, nu_mod: 1 };
    pub const DLIM_LINEAR: ModelChoice = ModelChoice { kind: ModelKind::DlimLinear, nu_time: 10, nu_mod: 2 };
    pub const DLIM: ModelChoice = ModelChoice { kind: ModelKind::Dlim, nu_time: 20, nu_mod: 20 };

    pub fn config(&self, family: Family) -> ModelConfig {
        let base = match self.kind {
            ModelKind::Dlm => ModelConfig::dlm(self.nu_time),
            ModelKind::DlimLinear => ModelConfig::dlim_linear(self.nu_time),
            ModelKind::Dlim => ModelConfig::dlim(self.nu_time, self.nu_mod),
        };
        base.with_family(family)
    }
}

impl FromStr for ModelChoice {
    type Err = DlimError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if let Some(args) = lower.strip_prefix("dlim(").and_then(|r| r.strip_suffix(')')) {
            let bad = || DlimError::Config(format!("cannot parse model '{s}' (expected dlim(ν_time,ν_mod))"));
            let (a, b) = args.split_once(',').ok_or_else(bad)?;
            let nu_time = a.trim().parse().map_err(|_| bad())?;
            let nu_mod = b.trim().parse().map_err(|_| bad())?;
            return Ok(ModelChoice { kind: ModelKind::Dlim, nu_time, nu_mod });
        }
        match lower.parse::<ModelKind>()? {
            ModelKind::Dlm => Ok(Self::DLM),
            ModelKind::DlimLinear => Ok(Self::DLIM_LINEAR),
            ModelKind::Dlim => Ok(Self::DLIM),
        }
    }
}

impl fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ModelKind::Dlim => write!(f, "dlim({},{})", self.nu_time, self.nu_mod),
            k => write!(f, "{k}"),
        }
    }
}

impl Serialize for ModelChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A bootstrap comparison of `null` against `full`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TestPair {
    pub null: ModelChoice,
    pub full: ModelChoice,
}

impl TestPair {
    pub fn label(&self) -> String {
        format!("{} vs {}", self.full, self.null)
    }
}

/// Configuration of a replicated study, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    #[serde(flatten)]
    pub sim: SimConfig,
    pub reps: usize,
    pub models: Vec<ModelChoice>,
    pub tests: Vec<TestPair>,
    /// Bootstrap replicates per test.
    pub bootstrap: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Worker threads; 0 uses all available cores. Not echoed in reports,
    /// which are identical for any worker count.
    #[serde(skip_serializing)]
    pub workers: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            reps: 200,
            models: vec![ModelChoice::DLM, ModelChoice::DLIM_LINEAR, ModelChoice::DLIM],
            tests: Vec::new(),
            bootstrap: 200,
            alpha: 0.05,
            seed: 1,
            workers: 0,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(DlimError::Config("a study needs at least one replicate".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(DlimError::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        true_beta(self.sim.scenario, 1, 0.5)?;
        for m in &self.models {
            m.config(self.sim.family).validate()?;
        }
        for t in &self.tests {
            if t.null == t.full {
                return Err(DlimError::Config(format!("test {} compares a model with itself", t.label())));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: StudyConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelMetrics {
    pub model: ModelChoice,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct TestOutcome {
    pub null: ModelChoice,
    pub full: ModelChoice,
    pub observed_stat: f64,
    pub p_value: f64,
    pub reject: bool,
    pub dropped: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateResult {
    pub rep: usize,
    pub seed: u64,
    pub models: Vec<ModelMetrics>,
    pub tests: Vec<TestOutcome>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Rejection {
    pub null: ModelChoice,
    pub full: ModelChoice,
    pub proportion: f64,
    pub replicates: usize,
}

/// Per-replicate results and their averages over successful replicates.
#[derive(Debug, Clone, Serialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub replicates: Vec<ReplicateResult>,
    pub averages: Vec<ModelMetrics>,
    pub rejection: Vec<Rejection>,
    pub failures: usize,
}

impl StudyReport {
    pub fn average(&self, model: ModelChoice) -> Option<&Metrics> {
        self.averages.iter().find(|m| m.model == model).map(|m| &m.metrics)
    }

    pub fn rejection_rate(&self, null: ModelChoice, full: ModelChoice) -> Option<f64> {
        self.rejection.iter().find(|r| r.null == null && r.full == full).map(|r| r.proportion)
    }

    /// Rows `model,metric,value` for the averages, then
    /// `full vs null,rejection,proportion` for the tests.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["model", "metric", "value"])?;
        for m in &self.averages {
            for (name, v) in Metrics::NAMES.iter().zip(m.metrics.values()) {
                w.write_record([m.model.to_string(), name.to_string(), fmt_float(v)])?;
            }
        }
        for r in &self.rejection {
            w.write_record([format!("{} vs {}", r.full, r.null), "rejection".into(), fmt_float(r.proportion)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Shortest decimal that round-trips.
pub(crate) fn fmt_float(v: f64) -> String {
    format!("{v}")
}

/// Seed of replicate `rep`, drawn from a stream keyed by the study seed.
pub fn replicate_seed(seed: u64, rep: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64 + 1);
    rng.next_u64()
}

fn run_replicate(cfg: &StudyConfig, rep: usize) -> ReplicateResult {
    let seed = replicate_seed(cfg.seed, rep);
    let mut out = ReplicateResult { rep, seed, models: Vec::new(), tests: Vec::new(), error: None };
    if let Err(e) = replicate_body(cfg, seed, &mut out) {
        log::warn!("replicate {rep} failed: {e}");
        out.models.clear();
        out.tests.clear();
        out.error = Some(e.to_string());
    }
    out
}

fn replicate_body(cfg: &StudyConfig, seed: u64, out: &mut ReplicateResult) -> Result<()> {
    let data = simulate_dataset(&cfg.sim, seed)?;
    let dlim_data = data.to_data();
    for &model in &cfg.models {
        let fit = fit_penalized(&model.config(cfg.sim.family).build(&dlim_data)?)?;
        out.models.push(ModelMetrics { model, metrics: evaluate_fit(&fit, &data, cfg.alpha)? });
    }
    // tests sharing a null model share its bootstrap samples
    let mut by_null: BTreeMap<ModelChoice, Vec<ModelChoice>> = BTreeMap::new();
    for t in &cfg.tests {
        by_null.entry(t.null).or_default().push(t.full);
    }
    for (i, (null, fulls)) in by_null.into_iter().enumerate() {
        let null_spec = null.config(cfg.sim.family).build(&dlim_data)?;
        let full_specs = fulls
            .iter()
            .map(|f| f.config(cfg.sim.family).build(&dlim_data))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = full_specs.iter().collect();
        let boot_seed = seed.wrapping_add(i as u64 + 1);
        for (full, res) in fulls.iter().zip(bootstrap_lrt_shared(&null_spec, &refs, cfg.bootstrap, boot_seed)?) {
            out.tests.push(TestOutcome {
                null,
                full: *full,
                observed_stat: res.observed_stat,
                p_value: res.p_value,
                reject: res.rejects(cfg.alpha),
                dropped: res.dropped,
            });
        }
    }
    Ok(())
}

/// Largest tolerated share of failed replicates.
const MAX_FAILURES: f64 = 0.10;

/// Runs `config.reps` replicates and aggregates them. Each replicate uses
/// its own seed, so results do not depend on the number of workers.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| DlimError::Config(format!("cannot start worker pool: {e}")))?;
    let replicates: Vec<ReplicateResult> =
        pool.install(|| (0..config.reps).into_par_iter().map(|rep| run_replicate(config, rep)).collect());

    let failures = replicates.iter().filter(|r| r.error.is_some()).count();
    if failures as f64 >= MAX_FAILURES * config.reps as f64 && failures > 0 {
        return Err(DlimError::Numerical(format!("{failures} of {} study replicates failed", config.reps)));
    }
    let ok: Vec<&ReplicateResult> = replicates.iter().filter(|r| r.error.is_none()).collect();

    let averages = config
        .models
        .iter()
        .map(|&model| {
            let rows: Vec<[f64; 4]> = ok
                .iter()
                .filter_map(|r| r.models.iter().find(|m| m.model == model))
                .map(|m| m.metrics.values())
                .collect();
            let mean = |k: usize| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64;
            ModelMetrics {
                model,
                metrics: Metrics { cum_rmse: mean(0), cum_cov: mean(1), pt_rmse: mean(2), pt_cov: mean(3) },
            }
        })
        .collect();
    let rejection = config
        .tests
        .iter()
        .map(|t| {
            let hits: Vec<bool> = ok
                .iter()
                .filter_map(|r| r.tests.iter().find(|o| o.null == t.null && o.full == t.full))
                .map(|o| o.reject)
                .collect();
            Rejection {
                null: t.null,
                full: t.full,
                proportion: hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64,
                replicates: hits.len(),
            }
        })
        .collect();
    Ok(StudyReport { config: config.clone(), replicates, averages, rejection, failures })
}
