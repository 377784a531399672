//! Parametric bootstrap likelihood-ratio test of effect modification.
//!
//! The null model is fitted to the data and bootstrap responses are drawn
//! from it: residuals resampled with replacement around the fitted values
//! for Gaussian models, Poisson draws with the fitted means otherwise. Both
//! models are refitted to every bootstrap response, smoothing parameters
//! included, and the observed statistic is compared with the bootstrap
//! statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::Serialize;

use crate::basis::BasisKind;
use crate::error::{DlimError, Result};
use crate::fit::{Family, FitOptions, FittedModel, ModelSpec, PreparedModel};
use crate::linalg;

/// Fewest bootstrap replicates accepted.
pub const MIN_REPLICATES: usize = 100;
/// Largest tolerated share of failed replicates.
const MAX_DROPPED: f64 = 0.05;
/// Observed statistics below this are treated as a fitting problem.
const STAT_FLOOR: f64 = -1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct TestResult {
    pub null_label: String,
    pub full_label: String,
    /// `2·(ℓ_full − ℓ_null)` with unpenalized log-likelihoods at the penalized fits.
    pub observed_stat: f64,
    /// Statistics of the retained replicates, in replicate order.
    pub boot_stats: Vec<f64>,
    /// Share of bootstrap statistics strictly above the observed one.
    pub p_value: f64,
    pub requested: usize,
    pub dropped: usize,
    pub seed: u64,
}

impl TestResult {
    /// Empirical `1 − α` quantile of the bootstrap statistics (type 7).
    pub fn critical_value(&self, alpha: f64) -> f64 {
        linalg::quantile(&self.boot_stats, 1.0 - alpha)
    }

    pub fn rejects(&self, alpha: f64) -> bool {
        self.observed_stat > self.critical_value(alpha)
    }
}

/// `#{b : boot_b > observed} / B`.
pub fn p_value(observed: f64, boot: &[f64]) -> f64 {
    boot.iter().filter(|&&s| s > observed).count() as f64 / boot.len() as f64
}

/// Tests `null` against `full` with `replicates` bootstrap samples.
pub fn bootstrap_lrt(null: &ModelSpec, full: &ModelSpec, replicates: usize, seed: u64) -> Result<TestResult> {
    Ok(bootstrap_lrt_shared(null, &[full], replicates, seed)?.remove(0))
}

/// Tests `null` against each of `fulls`, sharing the null fit and the
/// bootstrap responses between the tests. Each result equals what
/// [`bootstrap_lrt`] returns for that pair and seed.
pub fn bootstrap_lrt_shared(
    null: &ModelSpec,
    fulls: &[&ModelSpec],
    replicates: usize,
    seed: u64,
) -> Result<Vec<TestResult>> {
    if replicates < MIN_REPLICATES {
        return Err(DlimError::Config(format!(
            "the bootstrap needs at least {MIN_REPLICATES} replicates, got {replicates}"
        )));
    }
    for full in fulls {
        check_nested(null, full)?;
    }
    let null_model = PreparedModel::new(null)?;
    let full_models = fulls.iter().map(|f| PreparedModel::new(f)).collect::<Result<Vec<_>>>()?;

    let y = &null.response;
    let null_fit = null_model.fit(y, &FitOptions::default())?;
    let full_fits = full_models.iter().map(|m| m.fit(y, &FitOptions::default())).collect::<Result<Vec<_>>>()?;
    let observed: Vec<f64> = full_fits.iter().map(|f| lr_stat(&null_fit, f)).collect();
    for (stat, full) in observed.iter().zip(fulls) {
        if *stat < STAT_FLOOR {
            return Err(DlimError::Diagnostics(format!(
                "likelihood-ratio statistic {stat:.3e} of {} against {} is negative",
                full.label, null.label
            )));
        }
    }

    let warm = |fit: &FittedModel| FitOptions {
        start_rho: Some(fit.lambda.iter().map(|l| l.ln()).collect()),
        covariance: false,
        ..FitOptions::default()
    };
    let null_opts = warm(&null_fit);
    let full_opts: Vec<FitOptions> = full_fits.iter().map(warm).collect();
    let resid: Vec<f64> = y.iter().zip(&null_fit.fitted).map(|(a, b)| a - b).collect();

    let per_replicate: Vec<Vec<Option<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let y_star = draw_response(null.family, &null_fit.fitted, &resid, seed, b);
            let Ok(null_star) = null_model.fit(&y_star, &null_opts) else {
                log::debug!("bootstrap replicate {b}: null refit failed");
                return vec![None; full_models.len()];
            };
            full_models
                .iter()
                .zip(&full_opts)
                .map(|(m, o)| match m.fit(&y_star, o) {
                    Ok(f) => Some(lr_stat(&null_star, &f)),
                    Err(e) => {
                        log::debug!("bootstrap replicate {b}: full refit failed: {e}");
                        None
                    }
                })
                .collect()
        })
        .collect();

    fulls
        .iter()
        .enumerate()
        .map(|(i, full)| {
            let boot_stats: Vec<f64> = per_replicate.iter().filter_map(|r| r[i]).collect();
            let dropped = replicates - boot_stats.len();
            if dropped > 0 {
                log::warn!("{} vs {}: {dropped} of {replicates} bootstrap replicates failed", full.label, null.label);
            }
            if dropped as f64 > MAX_DROPPED * replicates as f64 {
                return Err(DlimError::Numerical(format!(
                    "{dropped} of {replicates} bootstrap replicates failed to fit"
                )));
            }
            Ok(TestResult {
                null_label: null.label.clone(),
                full_label: full.label.clone(),
                observed_stat: observed[i],
                p_value: p_value(observed[i], &boot_stats),
                boot_stats,
                requested: replicates,
                dropped,
                seed,
            })
        })
        .collect()
}

fn lr_stat(null: &FittedModel, full: &FittedModel) -> f64 {
    2.0 * (full.loglik - null.loglik)
}

/// Bootstrap response for replicate `b`, drawn from its own stream so that
/// results do not depend on scheduling.
fn draw_response(family: Family, fitted: &[f64], resid: &[f64], seed: u64, b: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64 + 1);
    match family {
        Family::Gaussian => {
            let n = resid.len();
            fitted.iter().map(|f| f + resid[rng.random_range(0..n)]).collect()
        }
        Family::Poisson => fitted
            .iter()
            .map(|&mu| if mu > 0.0 { Poisson::new(mu).map(|d| d.sample(&mut rng)).unwrap_or(0.0) } else { 0.0 })
            .collect(),
    }
}

/// The models must share family, response, covariates and lags, and the
/// null modifier basis must be a polynomial of degree `d0` whose span is
/// contained in the full model's modifier class: a polynomial or B-spline
/// of degree at least `d0`, or a cubic regression spline when `d0 ≤ 1`.
fn check_nested(null: &ModelSpec, full: &ModelSpec) -> Result<()> {
    let fail = |why: &str| {
        Err(DlimError::Spec(format!("{} is not nested in {}: {why}", null.label, full.label)))
    };
    if null.family != full.family {
        return fail("families differ");
    }
    if null.response != full.response {
        return fail("responses differ");
    }
    if null.covariates != full.covariates {
        return fail("covariates differ");
    }
    if null.groups != full.groups {
        return fail("group structures differ");
    }
    let Some(full_cb) = &full.crossbasis else {
        return if null.crossbasis.is_none() { Ok(()) } else { fail("the full model has no cross-basis") };
    };
    let Some(null_cb) = &null.crossbasis else {
        return Ok(());
    };
    if null_cb.lags() != full_cb.lags() {
        return fail("lag counts differ");
    }
    let ns = null_cb.modifier_basis.spec();
    let fs = full_cb.modifier_basis.spec();
    if ns.kind != BasisKind::Poly {
        return fail("the null modifier basis must be polynomial");
    }
    let d0 = ns.degree;
    let contained = match fs.kind {
        BasisKind::Poly | BasisKind::BSpline => fs.degree >= d0,
        BasisKind::Cr => d0 <= 1,
    };
    if !contained {
        return fail("the full modifier basis cannot represent the null modifier basis");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p_value_extremes() {
        let boot: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(p_value(1000.0, &boot), 0.0);
        assert_eq!(p_value(-1.0, &boot), 1.0);
        assert_eq!(p_value(49.5, &boot), 0.5);
        // ties are not counted as exceeding
        assert_eq!(p_value(99.0, &boot), 0.0);
    }

    #[test]
    fn replicate_streams_are_independent_of_order() {
        let fitted = vec![1.0, 2.0, 3.0, 4.0];
        let resid = vec![0.1, -0.2, 0.3, -0.4];
        let a: Vec<_> = (0..5).map(|b| draw_response(Family::Gaussian, &fitted, &resid, 9, b)).collect();
        let b: Vec<_> = (0..5).rev().map(|b| draw_response(Family::Gaussian, &fitted, &resid, 9, b)).collect();
        for (x, y) in a.iter().zip(b.iter().rev()) {
            assert_eq!(x, y);
        }
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn residual_draws_reuse_observed_residuals() {
        let fitted = vec![10.0; 50];
        let resid: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let y = draw_response(Family::Gaussian, &fitted, &resid, 3, 0);
        assert!(y.iter().all(|v| resid.contains(&(v - 10.0))));
    }

    #[test]
    fn poisson_draws_are_counts() {
        let y = draw_response(Family::Poisson, &[0.5, 3.0, 0.0, 20.0], &[], 1, 7);
        assert!(y.iter().all(|v| v.fract() == 0.0 && *v >= 0.0));
        assert_eq!(y[2], 0.0);
    }
}
