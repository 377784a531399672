//! Penalized (generalized) linear model fitting with smoothing parameters
//! chosen by restricted marginal likelihood.
//!
//! The coefficient vector is laid out as `ψ = [θ, γ, α]`: cross-basis
//! coefficients first, then covariates (intercept included by the caller),
//! then random intercepts when groups are present.
//!
//! For Gaussian responses the scale is profiled out and the criterion
//!
//! ```text
//! f(ρ) = (n − M_p)·log D_p + log|X'X + S_λ| − log|S_λ|₊,   λ = exp(ρ)
//! ```
//!
//! is minimized with exact first and second derivatives, where
//! `D_p = ‖y − Xψ̂‖² + ψ̂'S_λψ̂` and `M_p` is the null-space dimension of
//! `S_λ`. Poisson responses use the Laplace approximation around the
//! penalized IRLS solution.

use std::ops::Range;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::crossbasis::{CrossBasis, CrossBasisLayout, PenaltyBlock, PenaltyKind};
use crate::error::{DlimError, Result};
use crate::linalg;
use crate::optim::{self, Eval, NewtonOptions};
use crate::reml::{self, GaussianReml, PenaltySet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Poisson,
}

impl std::str::FromStr for Family {
    type Err = DlimError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            other => Err(DlimError::Config(format!("unknown family '{other}' (expected gaussian or poisson)"))),
        }
    }
}

/// A model ready to fit: response, design pieces and penalties.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub family: Family,
    pub response: Vec<f64>,
    pub crossbasis: Option<CrossBasis>,
    /// n × q covariate matrix, intercept included.
    pub covariates: Mat<f64>,
    pub covariate_names: Vec<String>,
    pub penalties: Vec<PenaltyBlock>,
    /// Group labels `1..=N`, one per observation.
    pub groups: Option<Vec<usize>>,
    /// Name used in reports, such as `dlim(20,20)`.
    pub label: String,
}

impl ModelSpec {
    pub fn new(
        family: Family,
        response: Vec<f64>,
        crossbasis: Option<CrossBasis>,
        covariates: Mat<f64>,
        covariate_names: Vec<String>,
    ) -> Self {
        Self { family, response, crossbasis, covariates, covariate_names, penalties: Vec::new(), groups: None, label: "model".into() }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn n(&self) -> usize {
        self.response.len()
    }

    pub fn n_theta(&self) -> usize {
        self.crossbasis.as_ref().map_or(0, CrossBasis::ncols)
    }

    pub fn n_gamma(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.as_ref().map_or(0, |g| g.iter().copied().max().unwrap_or(0))
    }

    pub fn n_coef(&self) -> usize {
        self.n_theta() + self.n_gamma() + self.n_groups()
    }

    /// Adds the cross-basis penalties of the given kind.
    pub fn with_penalty(mut self, kind: PenaltyKind) -> Result<Self> {
        let cb = self
            .crossbasis
            .as_ref()
            .ok_or_else(|| DlimError::Spec("penalties need a cross-basis".into()))?;
        let blocks = crate::crossbasis::assemble_penalties(cb, kind, self.n_coef(), 0)?;
        self.penalties.extend(blocks);
        Ok(self)
    }

    /// Adds random intercepts for groups labelled `1..=N`, penalized by an
    /// identity block whose smoothing parameter is the variance ratio `φ/σ²_α`.
    pub fn with_groups(mut self, groups: Vec<usize>) -> Result<Self> {
        if self.groups.is_some() {
            return Err(DlimError::Spec("groups are already set".into()));
        }
        if groups.len() != self.n() {
            return Err(DlimError::Dimension(format!(
                "{} group labels for {} observations",
                groups.len(),
                self.n()
            )));
        }
        let n_groups = groups.iter().copied().max().unwrap_or(0);
        let mut counts = vec![0usize; n_groups + 1];
        for &g in &groups {
            if g == 0 {
                return Err(DlimError::Data("group labels must start at 1".into()));
            }
            counts[g] += 1;
        }
        if let Some(empty) = (1..=n_groups).find(|&g| counts[g] == 0) {
            return Err(DlimError::Data(format!("group {empty} has no observations")));
        }
        let offset = self.n_coef();
        let p = offset + n_groups;
        for b in &mut self.penalties {
            b.p_total = p;
        }
        self.penalties.push(PenaltyBlock::new("groups", Mat::identity(n_groups, n_groups), offset, p)?);
        self.groups = Some(groups);
        Ok(self)
    }

    fn design(&self) -> Mat<f64> {
        let (n, pt, q, ng) = (self.n(), self.n_theta(), self.n_gamma(), self.n_groups());
        let mut x = Mat::<f64>::zeros(n, pt + q + ng);
        if let Some(cb) = &self.crossbasis {
            x.as_mut().submatrix_mut(0, 0, n, pt).copy_from(cb.w.as_ref());
        }
        x.as_mut().submatrix_mut(0, pt, n, q).copy_from(self.covariates.as_ref());
        if let Some(g) = &self.groups {
            for (i, &gi) in g.iter().enumerate() {
                x[(i, pt + q + gi - 1)] = 1.0;
            }
        }
        x
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        if n < 10 {
            return Err(DlimError::Data(format!("at least 10 observations are required, got {n}")));
        }
        if self.covariates.nrows() != n {
            return Err(DlimError::Dimension(format!(
                "covariate matrix has {} rows for {n} responses",
                self.covariates.nrows()
            )));
        }
        if self.covariate_names.len() != self.n_gamma() {
            return Err(DlimError::Dimension("one name is needed per covariate column".into()));
        }
        if let Some(cb) = &self.crossbasis {
            if cb.nrows() != n {
                return Err(DlimError::Dimension(format!("cross-basis has {} rows for {n} responses", cb.nrows())));
            }
        }
        if let Some(i) = self.response.iter().position(|v| !v.is_finite()) {
            return Err(DlimError::Data(format!("response is missing or non-finite at row {}", i + 1)));
        }
        if self.family == Family::Poisson {
            if let Some(i) = self.response.iter().position(|&v| v < 0.0 || v.fract() != 0.0) {
                return Err(DlimError::Data(format!(
                    "Poisson response must be a non-negative integer, row {} has {}",
                    i + 1,
                    self.response[i]
                )));
            }
        }
        for j in 0..self.n_gamma() {
            if (0..n).any(|i| !self.covariates[(i, j)].is_finite()) {
                return Err(DlimError::Data(format!("covariate '{}' has missing values", self.covariate_names[j])));
            }
        }
        let q = self.n_gamma();
        if q > 0 && linalg::column_rank(self.covariates.as_ref(), 1e-10) < q {
            return Err(DlimError::Data(format!(
                "covariate matrix [{}] is rank deficient",
                self.covariate_names.join(", ")
            )));
        }
        Ok(())
    }
}

/// Fitting controls. Defaults select every smoothing parameter by REML.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Fixed smoothing parameters, one per penalty block; disables selection.
    pub lambda: Option<Vec<f64>>,
    /// Starting log smoothing parameters for the optimizer, replacing the grid search.
    pub start_rho: Option<Vec<f64>>,
    pub irls_tol: f64,
    pub irls_max_iter: usize,
    /// Gradient tolerance of the smoothing parameter search, relative to the criterion's magnitude.
    pub reml_tol: f64,
    pub reml_max_iter: usize,
    /// Compute the coefficient covariance (skip for throwaway refits).
    pub covariance: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lambda: None,
            start_rho: None,
            irls_tol: 1e-8,
            irls_max_iter: 100,
            reml_tol: 1e-7,
            reml_max_iter: 100,
            covariance: true,
        }
    }
}

impl FitOptions {
    pub fn fixed(lambda: Vec<f64>) -> Self {
        Self { lambda: Some(lambda), ..Self::default() }
    }
}

/// Estimates and inference quantities of a fitted model.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub family: Family,
    /// All coefficients `ψ̂ = [θ̂, γ̂, α̂]`.
    pub coefficients: Vec<f64>,
    pub theta_range: Range<usize>,
    pub gamma_range: Range<usize>,
    pub alpha_range: Range<usize>,
    pub lambda: Vec<f64>,
    pub penalty_labels: Vec<String>,
    /// σ̂² for Gaussian models, 1 for Poisson.
    pub scale: f64,
    /// Empirical-Bayes covariance `(X'ŴX + S_λ̂)⁻¹ φ̂` (empty when not requested).
    pub vcov: Mat<f64>,
    /// Unpenalized log-likelihood at ψ̂ (Gaussian variance `RSS/n`).
    pub loglik: f64,
    /// Restricted log-likelihood at λ̂ (Laplace-approximate for Poisson).
    pub reml: f64,
    pub edf: f64,
    /// Optimizer objective after each accepted step.
    pub trace: Vec<f64>,
    pub converged: bool,
    /// Set when the response is fitted exactly (σ̂² = 0).
    pub zero_scale: bool,
    pub fitted: Vec<f64>,
    pub n: usize,
    pub layout: Option<CrossBasisLayout>,
    pub covariate_names: Vec<String>,
}

impl FittedModel {
    pub fn n_coef(&self) -> usize {
        self.coefficients.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.coefficients[self.theta_range.clone()]
    }

    pub fn gamma(&self) -> &[f64] {
        &self.coefficients[self.gamma_range.clone()]
    }

    /// Predicted random intercepts.
    pub fn alpha(&self) -> &[f64] {
        &self.coefficients[self.alpha_range.clone()]
    }

    /// Covariance block of the cross-basis coefficients.
    pub fn theta_vcov(&self) -> Mat<f64> {
        let r = self.theta_range.clone();
        Mat::from_fn(r.len(), r.len(), |i, j| self.vcov[(r.start + i, r.start + j)])
    }

    /// `−2·loglik + 2p` with `p` the number of coefficients.
    pub fn aic(&self) -> f64 {
        -2.0 * self.loglik + 2.0 * self.n_coef() as f64
    }
}

fn gaussian_loglik(rss: f64, n: usize) -> f64 {
    let n = n as f64;
    -0.5 * n * ((2.0 * std::f64::consts::PI * rss / n).ln() + 1.0)
}

/// Design, cross products and penalty structure of a model, reusable
/// across responses (bootstrap refits change only `y`).
#[derive(Debug, Clone)]
pub struct PreparedModel {
    family: Family,
    x: Mat<f64>,
    xtx: Mat<f64>,
    pens: PenaltySet,
    labels: Vec<String>,
    centers: Vec<f64>,
    theta_range: Range<usize>,
    gamma_range: Range<usize>,
    alpha_range: Range<usize>,
    layout: Option<CrossBasisLayout>,
    covariate_names: Vec<String>,
}

/// Half-width of the smoothing parameter search box around each block's data scale.
const RHO_SPAN: f64 = 20.0;
const GRID: [f64; 5] = [-8.0, -4.0, 0.0, 4.0, 8.0];

impl PreparedModel {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let x = spec.design();
        let p = x.ncols();
        let pens = PenaltySet::new(&spec.penalties, p)?;
        let xtx = reml::weighted_gram(x.as_ref(), &vec![1.0; x.nrows()]);
        let weights: Vec<f64> = match spec.family {
            Family::Gaussian => Vec::new(),
            Family::Poisson => spec.response.iter().map(|v| v + 0.1).collect(),
        };
        let scale_gram = if weights.is_empty() { xtx.clone() } else { reml::weighted_gram(x.as_ref(), &weights) };
        let centers = pens
            .blocks
            .iter()
            .map(|b| {
                let cols: Vec<usize> = (0..b.dim).filter(|&j| !b.cols[j].is_empty()).map(|j| b.offset + j).collect();
                let mean = cols.iter().map(|&c| scale_gram[(c, c)]).sum::<f64>() / cols.len().max(1) as f64;
                if mean > 0.0 { mean.ln() } else { 0.0 }
            })
            .collect();
        let (pt, q) = (spec.n_theta(), spec.n_gamma());
        Ok(Self {
            family: spec.family,
            x,
            xtx,
            pens,
            labels: spec.penalties.iter().map(|b| b.label.clone()).collect(),
            centers,
            theta_range: 0..pt,
            gamma_range: pt..pt + q,
            alpha_range: pt + q..p,
            layout: spec.crossbasis.as_ref().map(CrossBasis::layout),
            covariate_names: spec.covariate_names.clone(),
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_coef(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_penalties(&self) -> usize {
        self.pens.len()
    }

    pub fn design(&self) -> &Mat<f64> {
        &self.x
    }

    /// Dimension of the penalty null space.
    pub fn null_dim(&self) -> usize {
        self.pens.null_dim
    }

    /// Search box for `ρ = log λ`.
    pub fn rho_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.centers.iter().map(|c| c - RHO_SPAN).collect(),
            self.centers.iter().map(|c| c + RHO_SPAN).collect(),
        )
    }

    /// Restricted log-likelihood of response `y` at `ρ`.
    pub fn restricted_loglik(&self, y: &[f64], rho: &[f64]) -> Result<f64> {
        self.check_response(y)?;
        let lambda: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
        match self.family {
            Family::Gaussian => {
                let g = self.gaussian(y);
                g.restricted_loglik(g.evaluate(&lambda, false)?.objective, &lambda)
            }
            Family::Poisson => {
                let fit = reml::pirls(self.x.as_ref(), y, &self.pens, &lambda, None, 1e-10, 200)?;
                Ok(-reml::poisson_objective(&fit, &self.pens, &lambda)?)
            }
        }
    }

    fn check_response(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.n() {
            return Err(DlimError::Dimension(format!("{} responses for {} design rows", y.len(), self.n())));
        }
        Ok(())
    }

    fn gaussian<'a>(&'a self, y: &'a [f64]) -> GaussianReml<'a> {
        GaussianReml {
            x: self.x.as_ref(),
            xtx: self.xtx.as_ref(),
            pens: &self.pens,
            y,
            xty: linalg::tmatvec(self.x.as_ref(), y),
        }
    }

    fn grid_starts(&self) -> Vec<Vec<f64>> {
        let k = self.centers.len();
        if k <= 2 {
            let mut pts = vec![Vec::new()];
            for i in 0..k {
                pts = pts
                    .into_iter()
                    .flat_map(|p| {
                        GRID.iter().map(move |g| {
                            let mut q = p.clone();
                            q.push(self.centers[i] + g);
                            q
                        })
                    })
                    .collect();
            }
            pts
        } else {
            GRID.iter().map(|g| self.centers.iter().map(|c| c + g).collect()).collect()
        }
    }

    pub fn fit(&self, y: &[f64], opts: &FitOptions) -> Result<FittedModel> {
        self.check_response(y)?;
        if let Some(l) = &opts.lambda {
            if l.len() != self.pens.len() || l.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(DlimError::Spec(format!(
                    "expected {} non-negative finite smoothing parameters",
                    self.pens.len()
                )));
            }
        }
        match self.family {
            Family::Gaussian => self.fit_gaussian(y, opts),
            Family::Poisson => self.fit_poisson(y, opts),
        }
    }

    fn fit_gaussian(&self, y: &[f64], opts: &FitOptions) -> Result<FittedModel> {
        let g = self.gaussian(y);
        let k = self.pens.len();
        let n = self.n();

        if y.iter().all(|&v| v == 0.0) {
            log::warn!("response is identically zero: coefficients are zero and the scale estimate is 0");
            let lambda = opts.lambda.clone().unwrap_or_else(|| self.centers.iter().map(|c| c.exp()).collect());
            let p = self.n_coef();
            return Ok(self.assemble(
                vec![0.0; p],
                lambda,
                0.0,
                Mat::zeros(p, p),
                f64::INFINITY,
                f64::NAN,
                0.0,
                Vec::new(),
                true,
                true,
            ));
        }

        let (lambda, trace, converged) = if k == 0 {
            (Vec::new(), Vec::new(), true)
        } else if let Some(l) = &opts.lambda {
            (l.clone(), Vec::new(), true)
        } else {
            let start = match &opts.start_rho {
                Some(r) if r.len() == k => r.clone(),
                Some(_) => return Err(DlimError::Spec(format!("expected {k} starting log smoothing parameters"))),
                None => {
                    let mut best: Option<(f64, Vec<f64>)> = None;
                    for rho in self.grid_starts() {
                        let lam: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
                        if let Ok(s) = g.evaluate(&lam, false) {
                            if best.as_ref().is_none_or(|(v, _)| s.objective < *v) {
                                best = Some((s.objective, rho));
                            }
                        }
                    }
                    best.ok_or_else(|| DlimError::Numerical("criterion undefined over the whole start grid".into()))?.1
                }
            };
            let (lo, hi) = self.rho_bounds();
            let objective = |rho: &[f64], derivs: bool| -> Result<Eval> {
                let lam: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
                let s = g.evaluate(&lam, derivs)?;
                Ok(Eval { value: s.objective, grad: s.grad, hess: s.hess })
            };
            let nopts = NewtonOptions { max_iter: opts.reml_max_iter, grad_tol: opts.reml_tol, ..Default::default() };
            let out = optim::minimize(objective, &start, &lo, &hi, nopts)?;
            if !out.converged {
                log::warn!("smoothing parameter selection stopped after {} iterations without converging", out.iterations);
            }
            (out.x.iter().map(|r| r.exp()).collect(), out.trace, out.converged)
        };

        let state = g.evaluate(&lambda, true)?;
        let m_inv = state.m_inv.as_ref().expect("derivative evaluation keeps M⁻¹");
        let resid_df = g.residual_df(&lambda)?;
        let scale = state.dp / resid_df;
        let zero_scale = scale == 0.0;
        if zero_scale {
            log::warn!("response is fitted exactly: the scale estimate is 0");
        }
        let edf = self.n_coef() as f64
            - self.pens.blocks.iter().zip(&lambda).map(|(b, &l)| l * b.trace_with(m_inv.as_ref())).sum::<f64>();
        let vcov = if opts.covariance { m_inv * faer::Scale(scale) } else { Mat::zeros(0, 0) };
        let reml = g.restricted_loglik(state.objective, &lambda)?;
        let loglik = gaussian_loglik(state.rss, n);
        Ok(self.assemble(state.psi, lambda, scale, vcov, loglik, reml, edf, trace, converged, zero_scale))
    }

    fn fit_poisson(&self, y: &[f64], opts: &FitOptions) -> Result<FittedModel> {
        let k = self.pens.len();
        let x = self.x.as_ref();
        let run = |lam: &[f64], start: Option<&[f64]>| {
            reml::pirls(x, y, &self.pens, lam, start, opts.irls_tol, opts.irls_max_iter)
        };

        let (lambda, trace, converged) = if k == 0 {
            (Vec::new(), Vec::new(), true)
        } else if let Some(l) = &opts.lambda {
            (l.clone(), Vec::new(), true)
        } else {
            let start = match &opts.start_rho {
                Some(r) if r.len() == k => r.clone(),
                Some(_) => return Err(DlimError::Spec(format!("expected {k} starting log smoothing parameters"))),
                None => {
                    let mut best: Option<(f64, Vec<f64>)> = None;
                    for rho in self.grid_starts() {
                        let lam: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
                        if let Ok(v) = run(&lam, None).and_then(|f| reml::poisson_objective(&f, &self.pens, &lam)) {
                            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                                best = Some((v, rho));
                            }
                        }
                    }
                    best.ok_or_else(|| DlimError::Numerical("criterion undefined over the whole start grid".into()))?.1
                }
            };
            let warm = std::cell::RefCell::new(None::<Vec<f64>>);
            let value = |rho: &[f64]| -> Result<f64> {
                let lam: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
                let fit = run(&lam, warm.borrow().as_deref())?;
                let v = reml::poisson_objective(&fit, &self.pens, &lam)?;
                *warm.borrow_mut() = Some(fit.psi);
                Ok(v)
            };
            let objective = |rho: &[f64], derivs: bool| -> Result<Eval> {
                let f0 = value(rho)?;
                if !derivs {
                    return Ok(Eval { value: f0, grad: Vec::new(), hess: Vec::new() });
                }
                let h = 1e-3;
                let shifted = |d: &[(usize, f64)]| {
                    let mut r = rho.to_vec();
                    for &(i, s) in d {
                        r[i] += s;
                    }
                    value(&r)
                };
                let mut grad = vec![0.0; k];
                let mut hess = vec![vec![0.0; k]; k];
                for i in 0..k {
                    let (fp, fm) = (shifted(&[(i, h)])?, shifted(&[(i, -h)])?);
                    grad[i] = (fp - fm) / (2.0 * h);
                    hess[i][i] = (fp - 2.0 * f0 + fm) / (h * h);
                    for j in 0..i {
                        let v = (shifted(&[(i, h), (j, h)])? - shifted(&[(i, h), (j, -h)])?
                            - shifted(&[(i, -h), (j, h)])?
                            + shifted(&[(i, -h), (j, -h)])?)
                            / (4.0 * h * h);
                        hess[i][j] = v;
                        hess[j][i] = v;
                    }
                }
                value(rho)?;
                Ok(Eval { value: f0, grad, hess })
            };
            let (lo, hi) = self.rho_bounds();
            // finite-difference gradients cannot resolve the REML tolerance of the exact path
            let nopts = NewtonOptions { max_iter: opts.reml_max_iter, grad_tol: opts.reml_tol.max(1e-6), bound_jump: false, ..Default::default() };
            let out = optim::minimize(objective, &start, &lo, &hi, nopts)?;
            if !out.converged {
                log::warn!("smoothing parameter selection stopped after {} iterations without converging", out.iterations);
            }
            (out.x.iter().map(|r| r.exp()).collect(), out.trace, out.converged)
        };

        let fit = run(&lambda, None)?;
        let reml = -reml::poisson_objective(&fit, &self.pens, &lambda)?;
        let h_inv = fit.chol.inverse();
        let xtwx = reml::weighted_gram(x, &fit.mu);
        let edf = linalg::trace_product(h_inv.as_ref(), xtwx.as_ref());
        let vcov = if opts.covariance { h_inv } else { Mat::zeros(0, 0) };
        Ok(self.assemble(fit.psi, lambda, 1.0, vcov, fit.loglik, reml, edf, trace, converged, false))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        &self,
        psi: Vec<f64>,
        lambda: Vec<f64>,
        scale: f64,
        vcov: Mat<f64>,
        loglik: f64,
        reml: f64,
        edf: f64,
        trace: Vec<f64>,
        converged: bool,
        zero_scale: bool,
    ) -> FittedModel {
        let eta = linalg::matvec(self.x.as_ref(), &psi);
        let fitted = match self.family {
            Family::Gaussian => eta,
            Family::Poisson => eta.into_iter().map(f64::exp).collect(),
        };
        FittedModel {
            family: self.family,
            coefficients: psi,
            theta_range: self.theta_range.clone(),
            gamma_range: self.gamma_range.clone(),
            alpha_range: self.alpha_range.clone(),
            lambda,
            penalty_labels: self.labels.clone(),
            scale,
            vcov,
            loglik,
            reml,
            edf,
            trace,
            converged,
            zero_scale,
            fitted,
            n: self.n(),
            layout: self.layout.clone(),
            covariate_names: self.covariate_names.clone(),
        }
    }
}

/// Fits a model, selecting smoothing parameters by restricted likelihood.
pub fn fit_penalized(spec: &ModelSpec) -> Result<FittedModel> {
    fit_with(spec, &FitOptions::default())
}

pub fn fit_with(spec: &ModelSpec, opts: &FitOptions) -> Result<FittedModel> {
    PreparedModel::new(spec)?.fit(&spec.response, opts)
}

/// Fits a random-intercept model; the spec must carry groups.
pub fn fit_mixed(spec: &ModelSpec) -> Result<FittedModel> {
    let groups = spec
        .groups
        .as_ref()
        .ok_or_else(|| DlimError::Spec("a mixed model needs group labels".into()))?;
    let n_groups = spec.n_groups();
    if n_groups < 2 {
        return Err(DlimError::Data("a random intercept needs at least two groups".into()));
    }
    let mut counts = vec![0usize; n_groups + 1];
    for &g in groups {
        counts[g] += 1;
    }
    if counts.iter().all(|&c| c < 2) {
        return Err(DlimError::Data(
            "every group has a single observation: the random-intercept variance is not identifiable".into(),
        ));
    }
    fit_penalized(spec)
}

/// Builds the unpenalized model for one `(ν_time, ν_mod)` pair.
pub type CandidateBuilder<'a> = dyn Fn(usize, usize) -> Result<ModelSpec> + 'a;

/// Fits every candidate size without penalties and returns the AIC
/// minimizer (ties go to fewer coefficients) with its grid entry.
/// Rank-deficient candidates are skipped with a notice.
pub fn fit_unpenalized_aic(
    build: &CandidateBuilder<'_>,
    df_grid: &[(usize, usize)],
) -> Result<(FittedModel, (usize, usize))> {
    if df_grid.is_empty() {
        return Err(DlimError::Config("the degrees-of-freedom grid is empty".into()));
    }
    let mut best: Option<(FittedModel, (usize, usize))> = None;
    for &(nt, nm) in df_grid {
        let spec = build(nt, nm)?;
        if !spec.penalties.is_empty() {
            return Err(DlimError::Spec("AIC selection is for unpenalized candidates".into()));
        }
        let prepared = PreparedModel::new(&spec)?;
        let p = prepared.n_coef();
        if p >= prepared.n() || linalg::column_rank(prepared.design().as_ref(), 1e-10) < p {
            log::warn!("skipping candidate ({nt}, {nm}): design is rank deficient");
            continue;
        }
        let fit = match prepared.fit(&spec.response, &FitOptions::default()) {
            Ok(f) => f,
            Err(e @ (DlimError::Numerical(_) | DlimError::NonConvergence { .. })) => {
                log::warn!("skipping candidate ({nt}, {nm}): {e}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let better = match &best {
            None => true,
            Some((b, _)) => fit.aic() < b.aic() || (fit.aic() == b.aic() && fit.n_coef() < b.n_coef()),
        };
        if better {
            best = Some((fit, (nt, nm)));
        }
    }
    best.ok_or_else(|| DlimError::Numerical("every AIC candidate was rank deficient".into()))
}
