//! Univariate bases for the exposure-time and modifier dimensions, and
//! their quadratic roughness penalties.
//!
//! Three families are available:
//!
//! * B-splines of arbitrary degree with equally spaced knots, either
//!   clamped (repeated boundary knots) or uniform (knots continuing evenly
//!   past the domain, the classic P-spline layout),
//! * cardinal natural cubic regression splines ("CR"), whose coefficients
//!   are the function values at the knots and whose penalty is the
//!   integrated squared second derivative,
//! * plain polynomials `[1, m, m², …]`.
//!
//! Penalties are normalized by their largest eigenvalue so that penalties
//! in different dimensions act on a comparable scale.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{DlimError, Result};
use crate::linalg::{self, Cholesky};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    BSpline,
    Cr,
    Poly,
}

impl std::str::FromStr for BasisKind {
    type Err = DlimError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bspline" | "ps" => Ok(BasisKind::BSpline),
            "cr" => Ok(BasisKind::Cr),
            "poly" => Ok(BasisKind::Poly),
            other => Err(DlimError::Config(format!("unknown basis '{other}' (expected bspline, cr or poly)"))),
        }
    }
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lo: f64,
    pub hi: f64,
}

impl Domain {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    /// Smallest domain covering every value in `values`.
    pub fn covering(values: &[f64]) -> Result<Self> {
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !lo.is_finite() || !hi.is_finite() {
            return Err(DlimError::Data("cannot derive a domain from empty or non-finite values".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    fn slack(&self) -> f64 {
        1e-10 * self.width().abs().max(1.0)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo - self.slack() && x <= self.hi + self.slack()
    }

    /// Returns `x` clamped into the domain, or a domain error if it lies
    /// further out than rounding slack.
    pub fn check(&self, x: f64) -> Result<f64> {
        if x.is_finite() && self.contains(x) {
            Ok(x.clamp(self.lo, self.hi))
        } else {
            Err(DlimError::Domain { value: x, lo: self.lo, hi: self.hi })
        }
    }
}

/// Knot layout of a B-spline basis.
///
/// Both layouts place `size - degree - 1` equally spaced knots inside the
/// domain. `Clamped` repeats each boundary knot `degree + 1` times, so the
/// first and last functions interpolate the end points. `Uniform`
/// continues the spacing past both ends instead; a difference penalty of
/// order `d` then has exactly the polynomials of degree below `d` as its
/// null space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnotScheme {
    #[default]
    Clamped,
    Uniform,
}

/// Kind, size and domain of a univariate basis.
///
/// `size` is the number of basis functions ν. For polynomial bases it is
/// `degree + 1`; `degree` is the B-spline degree otherwise (cubic by
/// default, and ignored for CR bases which are always cubic).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub size: usize,
    pub degree: usize,
    pub domain: Domain,
    #[serde(default)]
    pub knots: KnotScheme,
}

impl BasisSpec {
    pub fn bspline(size: usize, domain: Domain) -> Self {
        Self { kind: BasisKind::BSpline, size, degree: 3, domain, knots: KnotScheme::Clamped }
    }

    /// Cubic B-splines on uniform knots, the usual partner of a difference penalty.
    pub fn pspline(size: usize, domain: Domain) -> Self {
        Self { knots: KnotScheme::Uniform, ..Self::bspline(size, domain) }
    }

    pub fn cr(size: usize, domain: Domain) -> Self {
        Self { kind: BasisKind::Cr, size, degree: 3, domain, knots: KnotScheme::Clamped }
    }

    pub fn poly(degree: usize, domain: Domain) -> Self {
        Self { kind: BasisKind::Poly, size: degree + 1, degree, domain, knots: KnotScheme::Clamped }
    }

    pub fn with_degree(mut self, degree: usize) -> Self {
        self.degree = degree;
        if self.kind == BasisKind::Poly {
            self.size = degree + 1;
        }
        self
    }

    pub fn with_knots(mut self, knots: KnotScheme) -> Self {
        self.knots = knots;
        self
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.domain;
        if !(d.lo.is_finite() && d.hi.is_finite() && d.lo < d.hi) {
            return Err(DlimError::Spec(format!("empty basis domain [{}, {}]", d.lo, d.hi)));
        }
        match self.kind {
            BasisKind::BSpline if self.size < self.degree + 1 => Err(DlimError::Spec(format!(
                "a degree-{} B-spline basis needs at least {} functions, got {}",
                self.degree,
                self.degree + 1,
                self.size
            ))),
            BasisKind::Cr if self.size < 3 => Err(DlimError::Spec(format!(
                "a cubic regression spline basis needs at least 3 knots, got {}",
                self.size
            ))),
            BasisKind::Poly if self.size != self.degree + 1 => Err(DlimError::Spec(format!(
                "polynomial basis of degree {} must have {} columns, got {}",
                self.degree,
                self.degree + 1,
                self.size
            ))),
            BasisKind::Poly if self.size == 0 => Err(DlimError::Spec("empty polynomial basis".into())),
            _ => Ok(()),
        }
    }
}

/// Basis functions evaluated over a set of points.
#[derive(Debug, Clone)]
pub struct BasisMatrix {
    /// rows = points, columns = basis functions
    pub values: Mat<f64>,
    pub points: Vec<f64>,
    pub spec: BasisSpec,
    pub knots: Vec<f64>,
}

impl BasisMatrix {
    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.values.ncols()).map(|j| self.values[(i, j)]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyOrder {
    Difference(usize),
    SecondDerivative,
}

/// Symmetric positive semi-definite roughness penalty on basis coefficients.
#[derive(Debug, Clone)]
pub struct PenaltyMatrix {
    pub s: Mat<f64>,
    pub order: PenaltyOrder,
    pub normalized: bool,
    /// Largest eigenvalue of the raw penalty (the divisor when normalized).
    pub scale: f64,
}

impl PenaltyMatrix {
    pub fn dim(&self) -> usize {
        self.s.nrows()
    }

    pub fn quad(&self, coef: &[f64]) -> f64 {
        linalg::quad_form(self.s.as_ref(), coef)
    }

    fn from_raw(raw: Mat<f64>, order: PenaltyOrder, normalize: bool) -> Result<Self> {
        let n = raw.nrows();
        let sym = Mat::from_fn(n, n, |i, j| 0.5 * (raw[(i, j)] + raw[(j, i)]));
        let top = linalg::sym_eigenvalues(sym.as_ref())?
            .into_iter()
            .fold(0.0f64, f64::max);
        if normalize {
            if top <= 0.0 {
                return Err(DlimError::Numerical("penalty has no positive eigenvalue".into()));
            }
            Ok(Self { s: Mat::from_fn(n, n, |i, j| sym[(i, j)] / top), order, normalized: true, scale: top })
        } else {
            Ok(Self { s: sym, order, normalized: false, scale: top })
        }
    }
}

/// Coefficients that turn knot values of a cardinal natural cubic spline
/// into second derivatives at the knots.
#[derive(Debug, Clone)]
struct CrCoefficients {
    /// k × k; row j maps knot values to the second derivative at knot j
    /// (first and last rows are zero: natural boundary conditions).
    f_plus: Mat<f64>,
    raw_penalty: Mat<f64>,
}

/// A univariate basis with fixed knots, evaluable anywhere in its domain.
#[derive(Debug, Clone)]
pub struct Basis {
    spec: BasisSpec,
    knots: Vec<f64>,
    cr: Option<CrCoefficients>,
}

impl Basis {
    /// Fixes the knots of `spec`. Only CR bases use `points` (knots at
    /// evenly spaced quantiles of the distinct points); B-spline knots
    /// depend on the domain alone.
    pub fn new(spec: BasisSpec, points: &[f64]) -> Result<Self> {
        spec.validate()?;
        match spec.kind {
            BasisKind::BSpline => Ok(Self { knots: bspline_knots(&spec), spec, cr: None }),
            BasisKind::Poly => Ok(Self { spec, knots: Vec::new(), cr: None }),
            BasisKind::Cr => {
                let knots = quantile_knots(points, spec.size)?;
                for &k in &knots {
                    spec.domain.check(k)?;
                }
                let cr = cr_coefficients(&knots)?;
                Ok(Self { spec, knots, cr: Some(cr) })
            }
        }
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn size(&self) -> usize {
        self.spec.size
    }

    pub fn kind(&self) -> BasisKind {
        self.spec.kind
    }

    /// Basis values at a single point.
    pub fn evaluate_at(&self, x: f64) -> Result<Vec<f64>> {
        let x = self.spec.domain.check(x)?;
        let mut row = vec![0.0; self.spec.size];
        match self.spec.kind {
            BasisKind::BSpline => {
                let (span, vals) = bspline_nonzero(&self.knots, self.spec.degree, self.spec.size, x);
                let first = span - self.spec.degree;
                for (r, v) in vals.into_iter().enumerate() {
                    row[first + r] = v;
                }
            }
            BasisKind::Poly => {
                let mut p = 1.0;
                for v in row.iter_mut() {
                    *v = p;
                    p *= x;
                }
            }
            BasisKind::Cr => {
                let cr = self.cr.as_ref().expect("CR basis carries its coefficients");
                cr_row(&self.knots, &cr.f_plus, x, &mut row);
            }
        }
        Ok(row)
    }

    pub fn evaluate(&self, points: &[f64]) -> Result<BasisMatrix> {
        let mut values = Mat::<f64>::zeros(points.len(), self.spec.size);
        for (i, &x) in points.iter().enumerate() {
            for (j, v) in self.evaluate_at(x)?.into_iter().enumerate() {
                values[(i, j)] = v;
            }
        }
        Ok(BasisMatrix { values, points: points.to_vec(), spec: self.spec, knots: self.knots.clone() })
    }

    /// Roughness penalty matching the basis: an order-`order` difference
    /// penalty for B-splines, the integrated squared second derivative for
    /// CR splines (`order` is ignored there). Polynomial bases have none.
    pub fn penalty(&self, order: usize, normalize: bool) -> Result<PenaltyMatrix> {
        match self.spec.kind {
            BasisKind::BSpline => difference_penalty(self.spec.size, order, normalize),
            BasisKind::Cr => {
                let cr = self.cr.as_ref().expect("CR basis carries its coefficients");
                PenaltyMatrix::from_raw(cr.raw_penalty.clone(), PenaltyOrder::SecondDerivative, normalize)
            }
            BasisKind::Poly => Err(DlimError::Spec("polynomial bases carry no roughness penalty".into())),
        }
    }
}

fn require_kind(spec: &BasisSpec, kind: BasisKind) -> Result<()> {
    if spec.kind != kind {
        return Err(DlimError::Spec(format!("expected a {:?} basis spec, got {:?}", kind, spec.kind)));
    }
    Ok(())
}

/// Clamped B-spline basis evaluated at `points`.
pub fn bspline_basis(points: &[f64], spec: &BasisSpec) -> Result<BasisMatrix> {
    require_kind(spec, BasisKind::BSpline)?;
    Basis::new(*spec, points)?.evaluate(points)
}

/// Cardinal natural cubic spline basis with knots at quantiles of
/// `points`, plus its normalized second-derivative penalty.
pub fn cr_basis(points: &[f64], spec: &BasisSpec) -> Result<(BasisMatrix, PenaltyMatrix)> {
    require_kind(spec, BasisKind::Cr)?;
    let basis = Basis::new(*spec, points)?;
    let penalty = basis.penalty(2, true)?;
    Ok((basis.evaluate(points)?, penalty))
}

pub fn poly_basis(points: &[f64], spec: &BasisSpec) -> Result<BasisMatrix> {
    require_kind(spec, BasisKind::Poly)?;
    Basis::new(*spec, points)?.evaluate(points)
}

/// The `(nu - d) × nu` matrix of order-`d` differences.
pub fn difference_matrix(nu: usize, d: usize) -> Result<Mat<f64>> {
    if d == 0 || nu <= d {
        return Err(DlimError::Spec(format!(
            "difference penalty of order {d} needs more than {d} coefficients, got {nu}"
        )));
    }
    let mut dm = Mat::<f64>::identity(nu, nu);
    for _ in 0..d {
        let r = dm.nrows() - 1;
        dm = Mat::from_fn(r, nu, |i, j| dm[(i + 1, j)] - dm[(i, j)]);
    }
    Ok(dm)
}

/// `S* = D'D` for the order-`d` difference matrix, optionally divided by
/// its largest eigenvalue.
pub fn difference_penalty(nu: usize, d: usize, normalize: bool) -> Result<PenaltyMatrix> {
    let dm = difference_matrix(nu, d)?;
    let raw = dm.transpose() * &dm;
    PenaltyMatrix::from_raw(raw, PenaltyOrder::Difference(d), normalize)
}

fn bspline_knots(spec: &BasisSpec) -> Vec<f64> {
    let Domain { lo, hi } = spec.domain;
    let interior = spec.size - spec.degree - 1;
    let h = (hi - lo) / (interior + 1) as f64;
    match spec.knots {
        KnotScheme::Clamped => {
            let mut knots = vec![lo; spec.degree + 1];
            knots.extend((1..=interior).map(|i| lo + h * i as f64));
            knots.extend(std::iter::repeat_n(hi, spec.degree + 1));
            knots
        }
        KnotScheme::Uniform => (0..spec.size + spec.degree + 1)
            .map(|i| lo + h * (i as f64 - spec.degree as f64))
            .collect(),
    }
}

/// Nonzero B-spline values at `x` via the triangular de Boor scheme.
/// Returns the knot span `s`; the values belong to functions `s - degree ..= s`.
fn bspline_nonzero(knots: &[f64], degree: usize, size: usize, x: f64) -> (usize, Vec<f64>) {
    let span = if x >= knots[size] {
        size - 1
    } else {
        // last index with knots[i] <= x, restricted to [degree, size - 1]
        let mut s = degree;
        while s + 1 < size && knots[s + 1] <= x {
            s += 1;
        }
        s
    };
    let mut n = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    (span, n)
}

/// Type-7 (linearly interpolated) quantiles of the distinct values at
/// probabilities `0, 1/(k-1), …, 1`.
fn quantile_knots(points: &[f64], k: usize) -> Result<Vec<f64>> {
    if points.iter().any(|x| !x.is_finite()) {
        return Err(DlimError::Data("non-finite value among spline construction points".into()));
    }
    let mut u = points.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    if u.len() < k {
        return Err(DlimError::Spec(format!(
            "a {k}-knot cubic regression spline needs at least {k} distinct points, got {}",
            u.len()
        )));
    }
    Ok((0..k).map(|i| linalg::quantile_sorted(&u, i as f64 / (k - 1) as f64)).collect())
}

fn cr_coefficients(knots: &[f64]) -> Result<CrCoefficients> {
    let k = knots.len();
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    if h.iter().any(|&hj| hj <= 0.0) {
        return Err(DlimError::Spec("cubic regression spline knots must be strictly increasing".into()));
    }
    let m = k - 2;
    let d = Mat::from_fn(m, k, |i, j| {
        if j == i {
            1.0 / h[i]
        } else if j == i + 1 {
            -1.0 / h[i] - 1.0 / h[i + 1]
        } else if j == i + 2 {
            1.0 / h[i + 1]
        } else {
            0.0
        }
    });
    let b = Mat::from_fn(m, m, |i, j| {
        if i == j {
            (h[i] + h[i + 1]) / 3.0
        } else if j == i + 1 {
            h[i + 1] / 6.0
        } else if i == j + 1 {
            h[j + 1] / 6.0
        } else {
            0.0
        }
    });
    let chol = Cholesky::new(b.as_ref())?;
    // F = B⁻¹ D, column by column
    let mut f = Mat::<f64>::zeros(m, k);
    for j in 0..k {
        let col: Vec<f64> = (0..m).map(|i| d[(i, j)]).collect();
        for (i, v) in chol.solve(&col).into_iter().enumerate() {
            f[(i, j)] = v;
        }
    }
    let f_plus = Mat::from_fn(k, k, |i, j| if i == 0 || i == k - 1 { 0.0 } else { f[(i - 1, j)] });
    let raw_penalty = d.transpose() * &f;
    Ok(CrCoefficients { f_plus, raw_penalty })
}

fn cr_row(knots: &[f64], f_plus: &Mat<f64>, x: f64, row: &mut [f64]) {
    let k = knots.len();
    let row_of = |j: usize| -> Vec<f64> { (0..k).map(|c| f_plus[(j, c)]).collect() };
    if x < knots[0] || x > knots[k - 1] {
        // natural spline: linear beyond the boundary knots
        let (j, edge) = if x < knots[0] { (0, 0) } else { (k - 2, k - 1) };
        let h = knots[j + 1] - knots[j];
        let (fj, fj1) = (row_of(j), row_of(j + 1));
        // derivative at the boundary knot of segment j
        let (dcm, dcp) = if edge == 0 { (-h / 3.0, -h / 6.0) } else { (h / 6.0, h / 3.0) };
        let dx = x - knots[edge];
        for c in 0..k {
            let mut slope = dcm * fj[c] + dcp * fj1[c];
            if c == j {
                slope -= 1.0 / h;
            }
            if c == j + 1 {
                slope += 1.0 / h;
            }
            row[c] = if c == edge { 1.0 } else { 0.0 } + dx * slope;
        }
        return;
    }
    let mut j = 0;
    while j + 2 < k && x > knots[j + 1] {
        j += 1;
    }
    let h = knots[j + 1] - knots[j];
    let am = (knots[j + 1] - x) / h;
    let ap = (x - knots[j]) / h;
    let cm = ((knots[j + 1] - x).powi(3) / h - h * (knots[j + 1] - x)) / 6.0;
    let cp = ((x - knots[j]).powi(3) / h - h * (x - knots[j])) / 6.0;
    for (c, r) in row.iter_mut().enumerate() {
        *r = cm * f_plus[(j, c)] + cp * f_plus[(j + 1, c)];
    }
    row[j] += am;
    row[j + 1] += ap;
}
