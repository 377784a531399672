//! The three model classes compared throughout: the distributed lag model
//! (DLM), the DLM with a linear exposure × modifier interaction
//! (DLIM-linear), and the full DLIM with a spline modifier basis.

use std::fmt;
use std::str::FromStr;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisKind, BasisSpec, Domain, KnotScheme};
use crate::crossbasis::{build_crossbasis, PenaltyKind};
use crate::error::{DlimError, Result};
use crate::fit::{Family, ModelSpec};

/// Complete-case analysis data.
#[derive(Debug, Clone)]
pub struct DlimData {
    pub response: Vec<f64>,
    /// n × T exposure histories, lag 1 first.
    pub exposures: Mat<f64>,
    pub modifier: Vec<f64>,
    /// n × q adjustment covariates, without intercept or modifier.
    pub covariates: Mat<f64>,
    pub covariate_names: Vec<String>,
}

impl DlimData {
    pub fn n(&self) -> usize {
        self.response.len()
    }

    pub fn lags(&self) -> usize {
        self.exposures.ncols()
    }

    /// `[1, covariates…, m]`: intercept, adjustment covariates and the
    /// linear modifier main effect.
    pub fn covariate_design(&self) -> (Mat<f64>, Vec<String>) {
        let (n, q) = (self.n(), self.covariates.ncols());
        let z = Mat::from_fn(n, q + 2, |i, j| match j {
            0 => 1.0,
            j if j <= q => self.covariates[(i, j - 1)],
            _ => self.modifier[i],
        });
        let mut names = vec!["(Intercept)".to_string()];
        names.extend(self.covariate_names.iter().cloned());
        names.push("modifier".to_string());
        (z, names)
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.exposures.nrows() != n || self.modifier.len() != n || self.covariates.nrows() != n {
            return Err(DlimError::Dimension(format!(
                "response has {n} rows; exposures {}, modifier {}, covariates {}",
                self.exposures.nrows(),
                self.modifier.len(),
                self.covariates.nrows()
            )));
        }
        if self.lags() < 2 {
            return Err(DlimError::Config(format!("at least 2 lags are required, got {}", self.lags())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Dlm,
    DlimLinear,
    Dlim,
}

impl FromStr for ModelKind {
    type Err = DlimError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dlm" => Ok(ModelKind::Dlm),
            "dlim-linear" | "dlim_linear" => Ok(ModelKind::DlimLinear),
            "dlim" => Ok(ModelKind::Dlim),
            other => Err(DlimError::Config(format!("unknown model '{other}' (expected dlm, dlim-linear or dlim)"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Dlm => "dlm",
            ModelKind::DlimLinear => "dlim-linear",
            ModelKind::Dlim => "dlim",
        })
    }
}

/// Penalty choice as written on the command line: `ps:d_time,d_mod`, `cr` or `none`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyChoice {
    Ps { d_time: usize, d_mod: usize },
    Cr,
    None,
}

impl FromStr for PenaltyChoice {
    type Err = DlimError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "cr" => return Ok(PenaltyChoice::Cr),
            "none" => return Ok(PenaltyChoice::None),
            "ps" => return Ok(PenaltyChoice::Ps { d_time: 2, d_mod: 2 }),
            _ => {}
        }
        let bad = || DlimError::Config(format!("cannot parse penalty '{s}' (expected ps:d,d, cr or none)"));
        let orders = lower.strip_prefix("ps:").ok_or_else(bad)?;
        let (a, b) = orders.split_once(',').ok_or_else(bad)?;
        let d_time = a.trim().parse().map_err(|_| bad())?;
        let d_mod = b.trim().parse().map_err(|_| bad())?;
        if d_time == 0 || d_mod == 0 {
            return Err(bad());
        }
        Ok(PenaltyChoice::Ps { d_time, d_mod })
    }
}

impl fmt::Display for PenaltyChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PenaltyChoice::Ps { d_time, d_mod } => write!(f, "ps:{d_time},{d_mod}"),
            PenaltyChoice::Cr => f.write_str("cr"),
            PenaltyChoice::None => f.write_str("none"),
        }
    }
}

/// Everything needed to turn data into a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub family: Family,
    pub nu_time: usize,
    /// Modifier basis size; ignored by `Dlm` and `DlimLinear`.
    pub nu_mod: usize,
    /// Modifier basis kind for `Dlim`; a polynomial basis has degree `nu_mod - 1`.
    pub mod_basis: BasisKind,
    pub penalty: PenaltyChoice,
    /// B-spline degree in both dimensions, capped at `ν - 1` for small bases.
    pub degree: usize,
    /// Modifier basis domain; defaults to the observed range.
    pub mod_domain: Option<Domain>,
}

impl ModelConfig {
    pub fn dlm(nu_time: usize) -> Self {
        Self {
            kind: ModelKind::Dlm,
            family: Family::Gaussian,
            nu_time,
            nu_mod: 1,
            mod_basis: BasisKind::Poly,
            penalty: PenaltyChoice::Ps { d_time: 2, d_mod: 2 },
            degree: 3,
            mod_domain: None,
        }
    }

    pub fn dlim_linear(nu_time: usize) -> Self {
        Self { kind: ModelKind::DlimLinear, nu_mod: 2, ..Self::dlm(nu_time) }
    }

    pub fn dlim(nu_time: usize, nu_mod: usize) -> Self {
        Self { kind: ModelKind::Dlim, nu_mod, mod_basis: BasisKind::BSpline, ..Self::dlm(nu_time) }
    }

    pub fn with_family(mut self, family: Family) -> Self {
        self.family = family;
        self
    }

    pub fn with_penalty(mut self, penalty: PenaltyChoice) -> Self {
        self.penalty = penalty;
        self
    }

    pub fn with_mod_domain(mut self, domain: Domain) -> Self {
        self.mod_domain = Some(domain);
        self
    }

    /// Short label such as `dlm`, `dlim-linear` or `dlim(20,20)`.
    pub fn label(&self) -> String {
        match self.kind {
            ModelKind::Dlim => format!("dlim({},{})", self.nu_time, self.nu_mod),
            k => k.to_string(),
        }
    }

    fn time_spec(&self, lags: usize) -> BasisSpec {
        let domain = Domain::new(1.0, lags as f64);
        match self.penalty {
            PenaltyChoice::Cr => BasisSpec::cr(self.nu_time, domain),
            _ => BasisSpec::pspline(self.nu_time, domain).with_degree(self.degree.min(self.nu_time - 1)),
        }
    }

    fn mod_spec(&self, domain: Domain) -> Result<BasisSpec> {
        let kind = match self.kind {
            ModelKind::Dlm => return Ok(BasisSpec::poly(0, domain)),
            ModelKind::DlimLinear => return Ok(BasisSpec::poly(1, domain)),
            ModelKind::Dlim => self.mod_basis,
        };
        Ok(match kind {
            BasisKind::Poly => {
                if self.nu_mod == 0 {
                    return Err(DlimError::Config("a polynomial modifier basis needs nu-mod ≥ 1".into()));
                }
                BasisSpec::poly(self.nu_mod - 1, domain)
            }
            BasisKind::Cr => BasisSpec::cr(self.nu_mod, domain),
            BasisKind::BSpline => BasisSpec::bspline(self.nu_mod, domain)
                .with_degree(self.degree.min(self.nu_mod.saturating_sub(1)))
                .with_knots(KnotScheme::Uniform),
        })
    }

    fn penalty_kind(&self, mod_kind: BasisKind) -> Result<PenaltyKind> {
        Ok(match (self.penalty, mod_kind) {
            (PenaltyChoice::None, _) => PenaltyKind::None,
            (PenaltyChoice::Ps { d_time, .. }, BasisKind::Poly) => PenaltyKind::LinearInteraction { d_time },
            (PenaltyChoice::Ps { d_time, d_mod }, BasisKind::BSpline) => PenaltyKind::Ps { d_time, d_mod },
            (PenaltyChoice::Cr, BasisKind::Poly) => PenaltyKind::LinearInteraction { d_time: 2 },
            (PenaltyChoice::Cr, BasisKind::Cr) => PenaltyKind::Cr,
            (p, k) => {
                return Err(DlimError::Config(format!(
                    "penalty {p} does not match a {} modifier basis",
                    format!("{k:?}").to_lowercase()
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.nu_time < 2 {
            return Err(DlimError::Config(format!("nu-time must be at least 2, got {}", self.nu_time)));
        }
        if let PenaltyChoice::Ps { d_time, d_mod } = self.penalty {
            if d_time >= self.nu_time {
                return Err(DlimError::Config(format!(
                    "a difference penalty of order {d_time} needs nu-time > {d_time}"
                )));
            }
            if self.kind == ModelKind::Dlim && self.mod_basis == BasisKind::BSpline && d_mod >= self.nu_mod {
                return Err(DlimError::Config(format!(
                    "a difference penalty of order {d_mod} needs nu-mod > {d_mod}"
                )));
            }
        }
        Ok(())
    }

    /// Builds the cross-basis, covariate design and penalties for `data`.
    pub fn build(&self, data: &DlimData) -> Result<ModelSpec> {
        self.validate()?;
        data.validate()?;
        let domain = match self.mod_domain {
            Some(d) => d,
            None => {
                let d = Domain::covering(&data.modifier)?;
                if d.width() <= 0.0 {
                    return Err(DlimError::Data("the modifier is constant".into()));
                }
                d
            }
        };
        let mod_spec = self.mod_spec(domain)?;
        let cb = build_crossbasis(&data.exposures, &data.modifier, &self.time_spec(data.lags()), &mod_spec)?;
        let penalty = self.penalty_kind(mod_spec.kind)?;
        let (z, names) = data.covariate_design();
        Ok(ModelSpec::new(self.family, data.response.clone(), Some(cb), z, names)
            .with_label(self.label())
            .with_penalty(penalty)?)
    }
}
