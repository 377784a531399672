//! Modifier × exposure-time cross-basis and its tensor penalties.
//!
//! For individual `i` with exposure history `x_i = (x_i1, …, x_iT)` and
//! modifier `m_i`, the cross-basis column for time function `j` and
//! modifier function `k` is
//!
//! ```text
//! w_jk(m_i, x_i) = Σ_t x_it · b_k(m_i) · c_j(t)
//! ```
//!
//! Columns are laid out time-fastest: column `k · ν_time + j`. The same
//! convention governs the penalties (`S_mod ⊗ I_time`, `I_mod ⊗ S_time`)
//! and every inference transform downstream, so that the coefficient
//! vector reads `θ = [θ_11, …, θ_{ν_time,1}, θ_12, …]`.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::basis::{Basis, BasisKind, BasisMatrix, BasisSpec, Domain};
use crate::error::{DlimError, Result};
use crate::linalg::{self, kron};

/// Evaluated cross-basis for a set of individuals.
#[derive(Debug, Clone)]
pub struct CrossBasis {
    /// n × (ν_time · ν_mod) design block, time-fastest.
    pub w: Mat<f64>,
    /// Time basis evaluated at t = 1, …, T (the T × ν_time matrix C).
    pub time_basis: BasisMatrix,
    pub time: Basis,
    pub modifier_basis: Basis,
    pub modifier: Vec<f64>,
}

impl CrossBasis {
    pub fn lags(&self) -> usize {
        self.time_basis.values.nrows()
    }

    pub fn nu_time(&self) -> usize {
        self.time.size()
    }

    pub fn nu_mod(&self) -> usize {
        self.modifier_basis.size()
    }

    pub fn ncols(&self) -> usize {
        self.nu_time() * self.nu_mod()
    }

    pub fn nrows(&self) -> usize {
        self.w.nrows()
    }

    /// Column index of coefficient θ_jk (0-based `j` over time, `k` over modifier).
    pub fn column(&self, j: usize, k: usize) -> usize {
        k * self.nu_time() + j
    }

    pub fn layout(&self) -> CrossBasisLayout {
        CrossBasisLayout {
            time_basis: self.time_basis.clone(),
            time: self.time.clone(),
            modifier: self.modifier_basis.clone(),
        }
    }
}

/// Bases and column ordering of a cross-basis, without the design itself.
/// Carried by fitted models for inference.
#[derive(Debug, Clone)]
pub struct CrossBasisLayout {
    pub time_basis: BasisMatrix,
    pub time: Basis,
    pub modifier: Basis,
}

impl CrossBasisLayout {
    pub fn lags(&self) -> usize {
        self.time_basis.values.nrows()
    }

    pub fn nu_time(&self) -> usize {
        self.time.size()
    }

    pub fn nu_mod(&self) -> usize {
        self.modifier.size()
    }

    pub fn ncols(&self) -> usize {
        self.nu_time() * self.nu_mod()
    }

    /// `c(t)` for 1-based lag `t`.
    pub fn time_row(&self, t: usize) -> Vec<f64> {
        self.time_basis.row(t - 1)
    }

    /// `b(m)`; errors when `m` lies outside the modifier domain.
    pub fn modifier_row(&self, m: f64) -> Result<Vec<f64>> {
        self.modifier.evaluate_at(m)
    }
}

/// Builds the cross-basis from an `n × T` exposure matrix and modifier values.
///
/// The time basis is evaluated at `t = 1, …, T`. A modifier outside
/// `mod_spec.domain` widens the domain to the data range (logged).
pub fn build_crossbasis(
    exposures: &Mat<f64>,
    modifier: &[f64],
    time_spec: &BasisSpec,
    mod_spec: &BasisSpec,
) -> Result<CrossBasis> {
    let (n, lags) = (exposures.nrows(), exposures.ncols());
    if n != modifier.len() {
        return Err(DlimError::Dimension(format!(
            "exposure matrix has {n} rows but {} modifier values were given",
            modifier.len()
        )));
    }
    if lags == 0 {
        return Err(DlimError::Dimension("exposure matrix has no lag columns".into()));
    }
    for i in 0..n {
        for t in 0..lags {
            if !exposures[(i, t)].is_finite() {
                return Err(DlimError::Data(format!(
                    "missing or non-finite exposure for row {} at lag {}",
                    i + 1,
                    t + 1
                )));
            }
        }
    }
    if modifier.iter().any(|m| !m.is_finite()) {
        return Err(DlimError::Data("missing or non-finite modifier value".into()));
    }

    let times: Vec<f64> = (1..=lags).map(|t| t as f64).collect();
    let time = Basis::new(*time_spec, &times)?;
    let time_basis = time.evaluate(&times)?;

    let mut mod_spec = *mod_spec;
    let range = Domain::covering(modifier)?;
    if !(mod_spec.domain.contains(range.lo) && mod_spec.domain.contains(range.hi)) {
        let widened = Domain::new(mod_spec.domain.lo.min(range.lo), mod_spec.domain.hi.max(range.hi));
        log::warn!(
            "modifier range [{}, {}] exceeds basis domain [{}, {}]; widening to [{}, {}]",
            range.lo,
            range.hi,
            mod_spec.domain.lo,
            mod_spec.domain.hi,
            widened.lo,
            widened.hi
        );
        mod_spec.domain = widened;
    }
    let modifier_basis = Basis::new(mod_spec, modifier)?;
    let b = modifier_basis.evaluate(modifier)?;

    // X C: lag-weighted exposure sums per time basis function
    let xc = exposures * &time_basis.values;
    let (nt, nm) = (time.size(), modifier_basis.size());
    let mut w = Mat::<f64>::zeros(n, nt * nm);
    for k in 0..nm {
        for j in 0..nt {
            let col = k * nt + j;
            for i in 0..n {
                w[(i, col)] = b.values[(i, k)] * xc[(i, j)];
            }
        }
    }
    Ok(CrossBasis { w, time_basis, time, modifier_basis, modifier: modifier.to_vec() })
}

/// Penalty structure for the cross-basis coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyKind {
    /// Difference penalties of the given orders on B-spline bases in both dimensions.
    Ps { d_time: usize, d_mod: usize },
    /// Second-derivative penalties on CR bases in both dimensions.
    Cr,
    /// Polynomial modifier basis: one time-dimension penalty per polynomial
    /// term, `diag(e_k) ⊗ S_time`. With a degree-1 basis this is the
    /// linear-interaction pair; with degree 0 it is the plain lag penalty.
    LinearInteraction { d_time: usize },
    None,
}

/// Kronecker factors of a penalty block, `outer ⊗ inner`.
#[derive(Debug, Clone)]
pub struct KronFactors {
    pub outer: Mat<f64>,
    pub inner: Mat<f64>,
}

/// One penalty acting on a contiguous coefficient block, with its own
/// smoothing parameter.
#[derive(Debug, Clone)]
pub struct PenaltyBlock {
    pub label: String,
    /// Square penalty on the block coefficients.
    pub local: Mat<f64>,
    /// Position of the block inside the full coefficient vector.
    pub offset: usize,
    pub p_total: usize,
    pub factors: Option<KronFactors>,
}

impl PenaltyBlock {
    pub fn new(label: impl Into<String>, local: Mat<f64>, offset: usize, p_total: usize) -> Result<Self> {
        if local.nrows() != local.ncols() || offset + local.nrows() > p_total {
            return Err(DlimError::Dimension("penalty block does not fit the coefficient vector".into()));
        }
        if !linalg::is_symmetric(local.as_ref(), 1e-12 * (1.0 + local.norm_l2())) {
            return Err(DlimError::Spec("penalty block is not symmetric".into()));
        }
        Ok(Self { label: label.into(), local, offset, p_total, factors: None })
    }

    pub fn from_kron(
        label: impl Into<String>,
        outer: Mat<f64>,
        inner: Mat<f64>,
        offset: usize,
        p_total: usize,
    ) -> Result<Self> {
        let local = kron(outer.as_ref(), inner.as_ref());
        let mut block = Self::new(label, local, offset, p_total)?;
        block.factors = Some(KronFactors { outer, inner });
        Ok(block)
    }

    pub fn dim(&self) -> usize {
        self.local.nrows()
    }

    /// The block embedded in a `p_total × p_total` zero matrix.
    pub fn embedded(&self) -> Mat<f64> {
        let mut full = Mat::<f64>::zeros(self.p_total, self.p_total);
        let d = self.dim();
        for i in 0..d {
            for j in 0..d {
                full[(self.offset + i, self.offset + j)] = self.local[(i, j)];
            }
        }
        full
    }
}

fn identity(n: usize) -> Mat<f64> {
    Mat::identity(n, n)
}

/// Penalty blocks for the cross-basis coefficients, which occupy columns
/// `theta_offset .. theta_offset + ν_time·ν_mod` of a `p_total` design.
pub fn assemble_penalties(
    cb: &CrossBasis,
    pen: PenaltyKind,
    p_total: usize,
    theta_offset: usize,
) -> Result<Vec<PenaltyBlock>> {
    let (nt, nm) = (cb.nu_time(), cb.nu_mod());
    if theta_offset + nt * nm > p_total {
        return Err(DlimError::Dimension("cross-basis does not fit inside the coefficient vector".into()));
    }
    let (tk, mk) = (cb.time.kind(), cb.modifier_basis.kind());
    match pen {
        PenaltyKind::None => Ok(Vec::new()),
        PenaltyKind::Ps { d_time, d_mod } => {
            if tk != BasisKind::BSpline || mk != BasisKind::BSpline {
                return Err(DlimError::Spec("PS penalties need B-spline bases in both dimensions".into()));
            }
            let s_mod = cb.modifier_basis.penalty(d_mod, true)?.s;
            let s_time = cb.time.penalty(d_time, true)?.s;
            Ok(vec![
                PenaltyBlock::from_kron("modifier", s_mod, identity(nt), theta_offset, p_total)?,
                PenaltyBlock::from_kron("time", identity(nm), s_time, theta_offset, p_total)?,
            ])
        }
        PenaltyKind::Cr => {
            if tk != BasisKind::Cr || mk != BasisKind::Cr {
                return Err(DlimError::Spec("CR penalties need CR bases in both dimensions".into()));
            }
            let s_mod = cb.modifier_basis.penalty(2, true)?.s;
            let s_time = cb.time.penalty(2, true)?.s;
            Ok(vec![
                PenaltyBlock::from_kron("modifier", s_mod, identity(nt), theta_offset, p_total)?,
                PenaltyBlock::from_kron("time", identity(nm), s_time, theta_offset, p_total)?,
            ])
        }
        PenaltyKind::LinearInteraction { d_time } => {
            if mk != BasisKind::Poly {
                return Err(DlimError::Spec(
                    "interaction penalties need a polynomial modifier basis".into(),
                ));
            }
            if tk == BasisKind::Poly {
                return Err(DlimError::Spec("the time basis must be a spline".into()));
            }
            let s_time = cb.time.penalty(d_time, true)?.s;
            (0..nm)
                .map(|k| {
                    let sel = Mat::from_fn(nm, nm, |a, b| if a == k && b == k { 1.0 } else { 0.0 });
                    let label = if nm == 1 { "time".to_string() } else { format!("time:m^{k}") };
                    PenaltyBlock::from_kron(label, sel, s_time.clone(), theta_offset, p_total)
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> Domain {
        Domain::new(0.0, 1.0)
    }

    #[test]
    fn worked_two_lag_example() {
        // T = 2, identity time basis via a degree-1 B-spline with 2 functions on [1, 2];
        // modifier basis (0.5, 0.5) from the degree-1 B-spline at the midpoint.
        let x = Mat::from_fn(1, 2, |_, t| if t == 0 { 1.0 } else { 0.0 });
        let time = BasisSpec::bspline(2, Domain::new(1.0, 2.0)).with_degree(1);
        let modifier = BasisSpec::bspline(2, unit()).with_degree(1);
        let cb = build_crossbasis(&x, &[0.5], &time, &modifier).unwrap();
        let row: Vec<f64> = (0..4).map(|c| cb.w[(0, c)]).collect();
        assert_eq!(row, vec![0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn rows_match_triple_sum_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let lags = rng.random_range(2..=10);
            let n = rng.random_range(1..=6);
            let nt = rng.random_range(2..=4.min(lags));
            let nm = rng.random_range(2..=4);
            let x = Mat::from_fn(n, lags, |_, _| rng.random_range(-2.0..2.0));
            let m: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let ts = BasisSpec::bspline(nt, Domain::new(1.0, lags as f64)).with_degree(nt - 1);
            let ms = BasisSpec::bspline(nm, unit()).with_degree(nm - 1);
            let cb = build_crossbasis(&x, &m, &ts, &ms).unwrap();
            let theta: Vec<f64> = (0..nt * nm).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fitted = linalg::matvec(cb.w.as_ref(), &theta);
            let b = cb.modifier_basis.evaluate(&m).unwrap();
            for i in 0..n {
                let mut direct = 0.0;
                for t in 0..lags {
                    for j in 0..nt {
                        for k in 0..nm {
                            direct += x[(i, t)]
                                * b.values[(i, k)]
                                * cb.time_basis.values[(t, j)]
                                * theta[cb.column(j, k)];
                        }
                    }
                }
                assert!((fitted[i] - direct).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ps_blocks_match_kronecker_oracle() {
        let x = Mat::from_fn(10, 6, |i, t| ((i * 5 + t) % 7) as f64 - 3.0);
        let m: Vec<f64> = (0..10).map(|i| i as f64 / 9.0).collect();
        let cb = build_crossbasis(
            &x,
            &m,
            &BasisSpec::bspline(3, Domain::new(1.0, 6.0)).with_degree(2),
            &BasisSpec::bspline(3, unit()).with_degree(2),
        )
        .unwrap();
        let blocks = assemble_penalties(&cb, PenaltyKind::Ps { d_time: 2, d_mod: 2 }, 9, 0).unwrap();
        // ν = 3, d = 2: D = [1, -2, 1], S* = D'D has largest eigenvalue 6
        let s = [[1.0, -2.0, 1.0], [-2.0, 4.0, -2.0], [1.0, -2.0, 1.0]].map(|r| r.map(|v| v / 6.0));
        for a in 0..9 {
            for b in 0..9 {
                let (ka, ja, kb, jb) = (a / 3, a % 3, b / 3, b % 3);
                let delta = |u: usize, v: usize| if u == v { 1.0 } else { 0.0 };
                let s_mod = s[ka][kb] * delta(ja, jb);
                let s_time = delta(ka, kb) * s[ja][jb];
                assert!((blocks[0].local[(a, b)] - s_mod).abs() < 1e-12);
                assert!((blocks[1].local[(a, b)] - s_time).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn modifier_penalty_ignores_time_index_permutation() {
        let x = Mat::from_fn(12, 8, |i, t| ((i + 3 * t) % 5) as f64);
        let m: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let cb = build_crossbasis(
            &x,
            &m,
            &BasisSpec::bspline(4, Domain::new(1.0, 8.0)),
            &BasisSpec::bspline(5, unit()),
        )
        .unwrap();
        let blocks = assemble_penalties(&cb, PenaltyKind::Ps { d_time: 2, d_mod: 2 }, 20, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let perm = [2, 0, 3, 1];
        let permuted: Vec<f64> = (0..20).map(|c| theta[(c / 4) * 4 + perm[c % 4]]).collect();
        let q = |v: &[f64]| linalg::quad_form(blocks[0].local.as_ref(), v);
        assert!((q(&theta) - q(&permuted)).abs() < 1e-12);
    }

    #[test]
    fn zero_exposure_gives_zero_row() {
        let x = Mat::<f64>::zeros(3, 6);
        let cb = build_crossbasis(
            &x,
            &[0.1, 0.5, 0.9],
            &BasisSpec::bspline(4, Domain::new(1.0, 6.0)),
            &BasisSpec::bspline(4, unit()),
        )
        .unwrap();
        assert!((0..3).all(|i| (0..16).all(|c| cb.w[(i, c)] == 0.0)));
    }

    #[test]
    fn rejects_mismatch_and_nan() {
        let x = Mat::<f64>::zeros(3, 4);
        let ts = BasisSpec::bspline(4, Domain::new(1.0, 4.0));
        let ms = BasisSpec::bspline(4, unit());
        assert!(matches!(build_crossbasis(&x, &[0.1, 0.2], &ts, &ms), Err(DlimError::Dimension(_))));
        let mut y = x.clone();
        y[(1, 2)] = f64::NAN;
        assert!(matches!(build_crossbasis(&y, &[0.1, 0.2, 0.3], &ts, &ms), Err(DlimError::Data(_))));
    }

    #[test]
    fn degree_zero_modifier_reduces_to_dlm_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Mat::from_fn(20, 8, |_, _| rng.random_range(-1.0..1.0));
        let m: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let ts = BasisSpec::bspline(5, Domain::new(1.0, 8.0));
        let cb = build_crossbasis(&x, &m, &ts, &BasisSpec::poly(0, unit())).unwrap();
        let xc = &x * &cb.time_basis.values;
        for i in 0..20 {
            for j in 0..5 {
                assert_eq!(cb.w[(i, j)], xc[(i, j)]);
            }
        }
    }

    #[test]
    fn modifier_outside_domain_widens() {
        let x = Mat::from_fn(3, 4, |i, t| (i + t) as f64);
        let cb = build_crossbasis(
            &x,
            &[-0.5, 0.2, 0.4],
            &BasisSpec::bspline(4, Domain::new(1.0, 4.0)),
            &BasisSpec::bspline(4, unit()),
        )
        .unwrap();
        assert_eq!(cb.modifier_basis.spec().domain, Domain::new(-0.5, 1.0));
    }

    #[test]
    fn ps_penalty_needs_more_functions_than_order() {
        let x = Mat::from_fn(4, 3, |i, t| (i * t) as f64);
        let cb = build_crossbasis(
            &x,
            &[0.0, 0.3, 0.6, 1.0],
            &BasisSpec::bspline(2, Domain::new(1.0, 3.0)).with_degree(1),
            &BasisSpec::bspline(2, unit()).with_degree(1),
        )
        .unwrap();
        assert!(matches!(
            assemble_penalties(&cb, PenaltyKind::Ps { d_time: 2, d_mod: 2 }, 4, 0),
            Err(DlimError::Spec(_))
        ));
    }

    #[test]
    fn linear_interaction_blocks_are_disjoint() {
        let x = Mat::from_fn(30, 12, |i, t| ((i * 7 + t * 3) % 5) as f64);
        let m: Vec<f64> = (0..30).map(|i| i as f64 / 29.0).collect();
        let cb = build_crossbasis(
            &x,
            &m,
            &BasisSpec::bspline(10, Domain::new(1.0, 12.0)),
            &BasisSpec::poly(1, unit()),
        )
        .unwrap();
        let blocks = assemble_penalties(&cb, PenaltyKind::LinearInteraction { d_time: 2 }, 23, 0).unwrap();
        assert_eq!(blocks.len(), 2);
        let (b1, b2) = (blocks[0].embedded(), blocks[1].embedded());
        for i in 0..23 {
            for j in 0..23 {
                if !(i < 10 && j < 10) {
                    assert_eq!(b1[(i, j)], 0.0);
                }
                if !((10..20).contains(&i) && (10..20).contains(&j)) {
                    assert_eq!(b2[(i, j)], 0.0);
                }
            }
        }
        assert!(matches!(
            assemble_penalties(&cb, PenaltyKind::Ps { d_time: 2, d_mod: 2 }, 23, 0),
            Err(DlimError::Spec(_))
        ));
    }

    #[test]
    fn mismatched_penalty_and_basis_is_rejected() {
        let x = Mat::from_fn(30, 12, |i, t| ((i + t) % 4) as f64);
        let m: Vec<f64> = (0..30).map(|i| i as f64 / 29.0).collect();
        let cb = build_crossbasis(
            &x,
            &m,
            &BasisSpec::bspline(6, Domain::new(1.0, 12.0)),
            &BasisSpec::bspline(5, unit()),
        )
        .unwrap();
        assert!(assemble_penalties(&cb, PenaltyKind::Cr, 30, 0).is_err());
        assert!(assemble_penalties(&cb, PenaltyKind::LinearInteraction { d_time: 2 }, 30, 0).is_err());
        assert!(assemble_penalties(&cb, PenaltyKind::None, 30, 0).unwrap().is_empty());
    }
}
