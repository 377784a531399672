//! Exposure-time-response surfaces, cumulative effects, Wald intervals and
//! windows of susceptibility from a fitted model.
//!
//! With `C` the `T × ν_time` time basis and `b(m)` the modifier basis row,
//! the lag-`t` effect at modifier value `m` is
//! `β̂_t(m) = Σ_j Σ_k b_k(m) c_j(t) θ̂_jk = (b(m) ⊗ c(t))'θ̂`
//! and the cumulative effect `δ̂(m) = Σ_t β̂_t(m) = w*(m)'θ̂` with
//! `w*(m) = b(m) ⊗ C'1`.

use faer::Mat;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::crossbasis::CrossBasisLayout;
use crate::error::{DlimError, Result};
use crate::fit::FittedModel;
use crate::linalg;

/// Pointwise estimates `β̂_t(m)` with standard errors.
#[derive(Debug, Clone)]
pub struct EffectSurface {
    pub m_grid: Vec<f64>,
    /// `|m_grid| × T`, lag 1 in column 0.
    pub estimates: Mat<f64>,
    pub se: Mat<f64>,
    pub alpha: f64,
}

impl EffectSurface {
    pub fn lags(&self) -> usize {
        self.estimates.ncols()
    }

    /// Normal quantile `z_{1−α/2}`.
    pub fn z(&self) -> f64 {
        z_value(self.alpha)
    }

    /// Lower and upper Wald limits at grid row `i`, 1-based lag `t`.
    pub fn interval(&self, i: usize, t: usize) -> (f64, f64) {
        let (b, s) = (self.estimates[(i, t - 1)], self.se[(i, t - 1)]);
        let z = self.z();
        (b - z * s, b + z * s)
    }
}

/// Cumulative effects `δ̂(m)` with standard errors.
#[derive(Debug, Clone)]
pub struct CumulativeCurve {
    pub m_grid: Vec<f64>,
    pub estimates: Vec<f64>,
    pub se: Vec<f64>,
    pub alpha: f64,
}

impl CumulativeCurve {
    pub fn interval(&self, i: usize) -> (f64, f64) {
        let z = z_value(self.alpha);
        (self.estimates[i] - z * self.se[i], self.estimates[i] + z * self.se[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Positive,
    Negative,
}

/// A maximal run of lags whose Wald interval excludes zero on one side.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Window {
    pub m: f64,
    /// First lag of the run, 1-based.
    pub start: usize,
    /// Last lag of the run, inclusive.
    pub end: usize,
    pub sign: Sign,
}

fn z_value(alpha: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - alpha / 2.0)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(DlimError::Config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

fn parts(model: &FittedModel) -> Result<(&CrossBasisLayout, Mat<f64>)> {
    let layout = model
        .layout
        .as_ref()
        .ok_or_else(|| DlimError::Spec("the model has no cross-basis".into()))?;
    if model.vcov.nrows() != model.n_coef() {
        return Err(DlimError::Spec("the model was fitted without a covariance matrix".into()));
    }
    Ok((layout, model.theta_vcov()))
}

/// Per-contrast pieces of `(b ⊗ c)'θ̂` and `(b ⊗ c)'V(b ⊗ c)` that do not
/// depend on the modifier: `h = Θ'c` and `G = (I ⊗ c)'V(I ⊗ c)`, with `Θ`
/// the `ν_time × ν_mod` coefficient matrix.
struct TimeContrast {
    h: Vec<f64>,
    g: Mat<f64>,
}

impl TimeContrast {
    fn new(c: &[f64], theta: &[f64], v: &Mat<f64>) -> Self {
        let nt = c.len();
        let nm = theta.len() / nt;
        let h = (0..nm).map(|k| (0..nt).map(|j| c[j] * theta[k * nt + j]).sum()).collect();
        // V(I ⊗ c), then contract the rows the same way
        let vc = Mat::from_fn(v.nrows(), nm, |r, k| (0..nt).map(|j| v[(r, k * nt + j)] * c[j]).sum::<f64>());
        let g = Mat::from_fn(nm, nm, |k, l| (0..nt).map(|j| c[j] * vc[(k * nt + j, l)]).sum::<f64>());
        Self { h, g }
    }

    fn estimate(&self, b: &[f64]) -> f64 {
        linalg::dot(&self.h, b)
    }

    fn se(&self, b: &[f64]) -> f64 {
        linalg::quad_form(self.g.as_ref(), b).max(0.0).sqrt()
    }
}

/// `β̂_t(m)` and standard errors over `m_grid` and all lags.
pub fn pointwise_effects(model: &FittedModel, m_grid: &[f64], alpha: f64) -> Result<EffectSurface> {
    check_alpha(alpha)?;
    let (layout, v) = parts(model)?;
    let lags = layout.lags();
    let contrasts: Vec<TimeContrast> =
        (1..=lags).map(|t| TimeContrast::new(&layout.time_row(t), model.theta(), &v)).collect();
    let mut estimates = Mat::zeros(m_grid.len(), lags);
    let mut se = Mat::zeros(m_grid.len(), lags);
    for (i, &m) in m_grid.iter().enumerate() {
        let b = layout.modifier_row(m)?;
        for (t, tc) in contrasts.iter().enumerate() {
            estimates[(i, t)] = tc.estimate(&b);
            se[(i, t)] = tc.se(&b);
        }
    }
    Ok(EffectSurface { m_grid: m_grid.to_vec(), estimates, se, alpha })
}

/// `δ̂(m)` and standard errors over `m_grid`, using the contrast
/// `w*(m) = b(m) ⊗ C'1`.
pub fn cumulative_effects(model: &FittedModel, m_grid: &[f64], alpha: f64) -> Result<CumulativeCurve> {
    check_alpha(alpha)?;
    let (layout, v) = parts(model)?;
    let ones = vec![1.0; layout.lags()];
    let c_sum = linalg::tmatvec(layout.time_basis.values.as_ref(), &ones);
    let tc = TimeContrast::new(&c_sum, model.theta(), &v);
    let mut estimates = Vec::with_capacity(m_grid.len());
    let mut se = Vec::with_capacity(m_grid.len());
    for &m in m_grid {
        let b = layout.modifier_row(m)?;
        estimates.push(tc.estimate(&b));
        se.push(tc.se(&b));
    }
    Ok(CumulativeCurve { m_grid: m_grid.to_vec(), estimates, se, alpha })
}

/// Variance of `β̂_t(m)` assembled entry by entry as
/// `1'[F ⊙ G ⊙ F' ⊙ G' ⊙ V]1`, where every row of `F` holds `c_j(t)` and
/// every row of `G` holds `b_k(m)` at the column's position in the
/// cross-basis ordering. Agrees with the quadratic form used by
/// [`pointwise_effects`].
pub fn elementwise_variance(layout: &CrossBasisLayout, vcov: &Mat<f64>, t: usize, m: f64) -> Result<f64> {
    let (c, b) = (layout.time_row(t), layout.modifier_row(m)?);
    let nt = layout.nu_time();
    let p = layout.ncols();
    if vcov.nrows() != p || vcov.ncols() != p {
        return Err(DlimError::Dimension(format!("covariance is {}×{}, expected {p}×{p}", vcov.nrows(), vcov.ncols())));
    }
    let f = Mat::from_fn(p, p, |_, col| c[col % nt]);
    let g = Mat::from_fn(p, p, |_, col| b[col / nt]);
    let a = Mat::from_fn(p, p, |r, col| f[(r, col)] * g[(r, col)] * f[(col, r)] * g[(col, r)] * vcov[(r, col)]);
    Ok(a.col_iter().map(|col| col.iter().sum::<f64>()).sum())
}

/// 25 equally spaced modifier values between the 1% and 99% sample
/// quantiles of `modifier`.
pub fn default_m_grid(modifier: &[f64]) -> Vec<f64> {
    let lo = linalg::quantile(modifier, 0.01);
    let hi = linalg::quantile(modifier, 0.99);
    (0..25).map(|i| lo + (hi - lo) * i as f64 / 24.0).collect()
}

/// Windows of susceptibility: for each grid value, the maximal runs of
/// consecutive lags whose Wald interval excludes zero with a common sign.
pub fn find_windows(surface: &EffectSurface) -> Vec<Window> {
    let mut out = Vec::new();
    for (i, &m) in surface.m_grid.iter().enumerate() {
        let mut run: Option<(usize, Sign)> = None;
        for t in 1..=surface.lags() + 1 {
            let sign = (t <= surface.lags())
                .then(|| surface.interval(i, t))
                .and_then(|(lo, hi)| match (lo > 0.0, hi < 0.0) {
                    (true, _) => Some(Sign::Positive),
                    (_, true) => Some(Sign::Negative),
                    _ => None,
                });
            match (run, sign) {
                (Some((_, s)), Some(now)) if s == now => {}
                (prev, now) => {
                    if let Some((start, s)) = prev {
                        out.push(Window { m, start, end: t - 1, sign: s });
                    }
                    run = now.map(|s| (t, s));
                }
            }
        }
    }
    out
}
