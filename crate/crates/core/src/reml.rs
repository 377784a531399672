//! Restricted marginal likelihood pieces: the penalty pseudo-determinant,
//! the profiled Gaussian criterion with exact derivatives, penalized IRLS,
//! and the Laplace-approximate criterion for Poisson responses.

use faer::{Mat, MatRef};

use crate::crossbasis::PenaltyBlock;
use crate::error::{DlimError, Result};
use crate::linalg::{self, Cholesky, SparseBlock};

const RANK_TOL: f64 = 1e-9;

/// Penalty blocks of one model, prepared for repeated `log|S_λ|₊` evaluation.
#[derive(Debug, Clone)]
pub(crate) struct PenaltySet {
    pub blocks: Vec<SparseBlock>,
    groups: Vec<Group>,
    /// Dimension of the null space of `S_λ` in the full coefficient vector.
    pub null_dim: usize,
}

/// Blocks sharing one coefficient range.
#[derive(Debug, Clone)]
struct Group {
    members: Vec<usize>,
    kind: GroupKind,
}

#[derive(Debug, Clone)]
enum GroupKind {
    /// Simultaneously diagonalizable members: `e[i][m]` is member `i`'s
    /// eigenvalue along penalized direction `m`.
    Joint { e: Vec<Vec<f64>> },
    /// General position: decomposed afresh at every evaluation.
    Dense { locals: Vec<Mat<f64>>, rank: usize },
}

/// `log|S_λ|₊` with its gradient and Hessian with respect to `ρ = log λ`.
#[derive(Debug, Clone)]
pub(crate) struct LogDet {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<Vec<f64>>,
}

impl PenaltySet {
    pub fn new(blocks: &[PenaltyBlock], p: usize) -> Result<Self> {
        let mut groups: Vec<Group> = Vec::new();
        let mut ranges: Vec<(usize, usize)> = Vec::new();
        for (i, b) in blocks.iter().enumerate() {
            if b.p_total != p {
                return Err(DlimError::Dimension(format!(
                    "penalty '{}' is sized for {} coefficients, the model has {p}",
                    b.label, b.p_total
                )));
            }
            let range = (b.offset, b.offset + b.dim());
            match ranges.iter().position(|&r| r == range) {
                Some(g) => groups[g].members.push(i),
                None => {
                    if ranges.iter().any(|&(lo, hi)| range.0 < hi && lo < range.1) {
                        return Err(DlimError::Spec(
                            "overlapping penalty blocks must cover identical coefficient ranges".into(),
                        ));
                    }
                    ranges.push(range);
                    groups.push(Group { members: vec![i], kind: GroupKind::Joint { e: Vec::new() } });
                }
            }
        }
        let mut rank_total = 0;
        for g in &mut groups {
            let members: Vec<&PenaltyBlock> = g.members.iter().map(|&i| &blocks[i]).collect();
            let (kind, rank) = match joint_eigenvalues(&members)? {
                Some(e) => {
                    let r = e.first().map_or(0, Vec::len);
                    (GroupKind::Joint { e }, r)
                }
                None => {
                    let locals: Vec<Mat<f64>> = members.iter().map(|b| b.local.clone()).collect();
                    let sum = locals.iter().skip(1).fold(locals[0].clone(), |acc, l| acc + l);
                    let vals = linalg::sym_eigenvalues(sum.as_ref())?;
                    let top = vals.iter().fold(0.0f64, |m, v| m.max(*v));
                    let rank = vals.iter().filter(|&&v| v > RANK_TOL * top).count();
                    (GroupKind::Dense { locals, rank }, rank)
                }
            };
            g.kind = kind;
            rank_total += rank;
        }
        let sparse = blocks.iter().map(|b| SparseBlock::from_dense(b.local.as_ref(), b.offset)).collect();
        Ok(Self { blocks: sparse, groups, null_dim: p - rank_total })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    /// Null-space dimension of `S_λ` when some `λ_i` may be exactly zero.
    pub fn null_dim_at(&self, lambda: &[f64], p: usize) -> Result<usize> {
        if lambda.iter().all(|&l| l > 0.0) {
            return Ok(self.null_dim);
        }
        let mut rank = 0;
        for g in &self.groups {
            let on: Vec<usize> = (0..g.members.len()).filter(|&a| lambda[g.members[a]] > 0.0).collect();
            match &g.kind {
                GroupKind::Joint { e } => {
                    let ndir = e.first().map_or(0, Vec::len);
                    rank += (0..ndir).filter(|&m| on.iter().any(|&a| e[a][m] > 0.0)).count();
                }
                GroupKind::Dense { locals, .. } => {
                    if on.is_empty() {
                        continue;
                    }
                    let dim = locals[0].nrows();
                    let mut sum = Mat::<f64>::zeros(dim, dim);
                    for &a in &on {
                        sum += &locals[a];
                    }
                    let vals = linalg::sym_eigenvalues(sum.as_ref())?;
                    let top = vals.iter().fold(0.0f64, |m, v| m.max(*v));
                    rank += vals.iter().filter(|&&v| v > RANK_TOL * top).count();
                }
            }
        }
        Ok(p - rank)
    }

    /// `S_λ = Σ λ_i S_i` added into `m`.
    pub fn add_into(&self, m: &mut Mat<f64>, lambda: &[f64]) {
        for (b, &l) in self.blocks.iter().zip(lambda) {
            b.add_into(m, l);
        }
    }

    /// `ψ' S_λ ψ`.
    pub fn quad(&self, psi: &[f64], lambda: &[f64]) -> f64 {
        self.blocks.iter().zip(lambda).map(|(b, &l)| l * b.quad(psi)).sum()
    }

    pub fn log_det(&self, lambda: &[f64]) -> Result<LogDet> {
        let k = self.len();
        let mut out = LogDet { value: 0.0, grad: vec![0.0; k], hess: vec![vec![0.0; k]; k] };
        for g in &self.groups {
            match &g.kind {
                GroupKind::Joint { e } => {
                    let ndir = e.first().map_or(0, Vec::len);
                    for m in 0..ndir {
                        let s: f64 = g.members.iter().zip(e).map(|(&i, ei)| lambda[i] * ei[m]).sum();
                        if s <= 0.0 {
                            return Err(DlimError::Numerical("penalty lost rank at the given smoothing parameters".into()));
                        }
                        out.value += s.ln();
                        for (a, &i) in g.members.iter().enumerate() {
                            let ti = lambda[i] * e[a][m] / s;
                            out.grad[i] += ti;
                            out.hess[i][i] += ti;
                            for (b, &j) in g.members.iter().enumerate() {
                                out.hess[i][j] -= ti * lambda[j] * e[b][m] / s;
                            }
                        }
                    }
                }
                GroupKind::Dense { locals, rank } => {
                    let dim = locals[0].nrows();
                    let mut sum = Mat::<f64>::zeros(dim, dim);
                    for (&i, l) in g.members.iter().zip(locals) {
                        sum += faer::Scale(lambda[i]) * l;
                    }
                    let (vals, vecs) = linalg::sym_eigen(sum.as_ref())?;
                    // eigenvalues ascending: the penalized directions are the last `rank`
                    let keep: Vec<usize> = (dim - rank..dim).collect();
                    let u = Mat::from_fn(dim, *rank, |a, c| vecs[(a, keep[c])]);
                    let s: Vec<f64> = keep.iter().map(|&c| vals[c]).collect();
                    if s.iter().any(|&v| v <= 0.0) {
                        return Err(DlimError::Numerical("penalty lost rank at the given smoothing parameters".into()));
                    }
                    out.value += s.iter().map(|v| v.ln()).sum::<f64>();
                    let proj: Vec<Mat<f64>> = locals.iter().map(|l| u.transpose() * l * &u).collect();
                    for (a, &i) in g.members.iter().enumerate() {
                        let ti: f64 = (0..*rank).map(|m| proj[a][(m, m)] / s[m]).sum::<f64>() * lambda[i];
                        out.grad[i] += ti;
                        out.hess[i][i] += ti;
                        for (b, &j) in g.members.iter().enumerate() {
                            let mut t = 0.0;
                            for m in 0..*rank {
                                for q in 0..*rank {
                                    t += proj[a][(m, q)] * proj[b][(q, m)] / (s[m] * s[q]);
                                }
                            }
                            out.hess[i][j] -= lambda[i] * lambda[j] * t;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Joint eigenvalues of Kronecker-factored blocks over one range, or
/// `None` when the members are not simultaneously diagonalizable that way.
fn joint_eigenvalues(members: &[&PenaltyBlock]) -> Result<Option<Vec<Vec<f64>>>> {
    let all_e: Vec<Vec<f64>> = if members.len() == 1 && members[0].factors.is_none() {
        vec![linalg::sym_eigenvalues(members[0].local.as_ref())?]
    } else {
        let Some(first) = members[0].factors.as_ref() else { return Ok(None) };
        let shape = |m: &Mat<f64>| (m.nrows(), m.ncols());
        let (so, si) = (shape(&first.outer), shape(&first.inner));
        let mut outers = Vec::new();
        let mut inners = Vec::new();
        for b in members {
            match &b.factors {
                Some(f) if shape(&f.outer) == so && shape(&f.inner) == si => {
                    outers.push(&f.outer);
                    inners.push(&f.inner);
                }
                _ => return Ok(None),
            }
        }
        let (Some(eo), Some(ei)) = (common_diagonal(&outers)?, common_diagonal(&inners)?) else {
            return Ok(None);
        };
        eo.iter()
            .zip(&ei)
            .map(|(o, i)| o.iter().flat_map(|&a| i.iter().map(move |&b| a * b)).collect())
            .collect()
    };
    let top = all_e.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let ndir = all_e[0].len();
    let penalized: Vec<usize> =
        (0..ndir).filter(|&m| all_e.iter().any(|e| e[m] > RANK_TOL * top)).collect();
    Ok(Some(all_e.iter().map(|e| penalized.iter().map(|&m| e[m].max(0.0)).collect()).collect()))
}

/// Diagonals of `U' A_i U` for an orthogonal `U` diagonalizing every `A_i`.
fn common_diagonal(mats: &[&Mat<f64>]) -> Result<Option<Vec<Vec<f64>>>> {
    let n = mats[0].nrows();
    let mut mix = Mat::<f64>::zeros(n, n);
    for (i, m) in mats.iter().enumerate() {
        // generic weights separate eigenvalues shared by only some members
        let w = 1.0 + 0.618_033_988_749_895 * i as f64 + 0.1 * (i * i) as f64;
        mix += faer::Scale(w) * *m;
    }
    let (_, u) = linalg::sym_eigen(mix.as_ref())?;
    let mut diags = Vec::with_capacity(mats.len());
    for m in mats {
        let d = u.transpose() * *m * &u;
        let scale = 1.0 + (0..n).map(|i| d[(i, i)].abs()).fold(0.0, f64::max);
        for a in 0..n {
            for b in 0..n {
                if a != b && d[(a, b)].abs() > 1e-9 * scale {
                    return Ok(None);
                }
            }
        }
        diags.push((0..n).map(|i| d[(i, i)]).collect());
    }
    Ok(Some(diags))
}

/// `X' diag(w) X`.
pub(crate) fn weighted_gram(x: MatRef<'_, f64>, w: &[f64]) -> Mat<f64> {
    let xw = Mat::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * w[i].sqrt());
    let g = xw.transpose() * &xw;
    let p = g.nrows();
    Mat::from_fn(p, p, |i, j| 0.5 * (g[(i, j)] + g[(j, i)]))
}

/// State of the profiled Gaussian criterion at one λ.
pub(crate) struct GaussianState {
    /// `(n - M_p) log D_p + log|M| - log|S_λ|₊`, to be minimized.
    pub objective: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<Vec<f64>>,
    pub psi: Vec<f64>,
    pub rss: f64,
    pub dp: f64,
    pub m_inv: Option<Mat<f64>>,
}

/// Data-independent pieces of a Gaussian fit and the per-response cross products.
pub(crate) struct GaussianReml<'a> {
    pub x: MatRef<'a, f64>,
    pub xtx: MatRef<'a, f64>,
    pub pens: &'a PenaltySet,
    pub y: &'a [f64],
    pub xty: Vec<f64>,
}

impl GaussianReml<'_> {
    pub fn residual_df(&self, lambda: &[f64]) -> Result<f64> {
        Ok((self.x.nrows() - self.pens.null_dim_at(lambda, self.x.ncols())?) as f64)
    }

    /// Restricted log-likelihood from a state's objective.
    pub fn restricted_loglik(&self, objective: f64, lambda: &[f64]) -> Result<f64> {
        let r = self.residual_df(lambda)?;
        Ok(
-0.5 * (objective + r * ((2.0 * std::f64::consts::PI / r).ln() + 1.0)))
    }

    pub fn evaluate(&self, lambda: &[f64], derivs: bool) -> Result<GaussianState> {
        let mut m = self.xtx.to_owned();
        self.pens.add_into(&mut m, lambda);
        let chol = Cholesky::new(m.as_ref())
            .map_err(|_| DlimError::Numerical("penalized normal matrix is singular".into()))?;
        let psi = chol.solve(&self.xty);
        let fitted = linalg::matvec(self.x, &psi);
        let rss: f64 = self.y.iter().zip(&fitted).map(|(y, f)| (y - f).powi(2)).sum();
        let dp = rss + self.pens.quad(&psi, lambda);
        if !(dp > 0.0) {
            return Err(DlimError::Numerical("penalized residual sum of squares is zero".into()));
        }
        let r = self.residual_df(lambda)?;
        let k = lambda.len();
        let (ld_s, ld_grad, ld_hess) = if k == 0 {
            (0.0, Vec::new(), Vec::new())
        } else if lambda.iter().any(|&l| l == 0.0) {
            // a switched-off penalty changes the rank: the criterion is undefined
            (f64::NAN, vec![0.0; k], vec![vec![0.0; k]; k])
        } else {
            let ld = self.pens.log_det(lambda)?;
            (ld.value, ld.grad, ld.hess)
        };
        let objective = r * dp.ln() + chol.log_det() - ld_s;
        if !derivs {
            return Ok(GaussianState { objective, grad: Vec::new(), hess: Vec::new(), psi, rss, dp, m_inv: None });
        }

        let m_inv = chol.inverse();
        let s_psi: Vec<Vec<f64>> = self.pens.blocks.iter().map(|b| b.apply(&psi)).collect();
        let minv_s_psi: Vec<Vec<f64>> = s_psi.iter().map(|v| chol.solve(v)).collect();
        let d1: Vec<f64> = (0..k).map(|i| lambda[i] * linalg::dot(&psi, &s_psi[i])).collect();
        // columns of M⁻¹ S_i restricted to block i
        let prods: Vec<Mat<f64>> = self.pens.blocks.iter().map(|b| block_product(m_inv.as_ref(), b)).collect();
        let tr: Vec<f64> = self.pens.blocks.iter().zip(&prods).map(|(b, pm)| {
            (0..b.dim).map(|c| pm[(b.offset + c, c)]).sum()
        }).collect();

        let mut grad = vec![0.0; k];
        let mut hess = vec![vec![0.0; k]; k];
        for i in 0..k {
            grad[i] = r * d1[i] / dp + lambda[i] * tr[i] - ld_grad[i];
            for j in 0..=i {
                let cross = linalg::dot(&s_psi[i], &minv_s_psi[j]);
                let mut d2 = -2.0 * lambda[i] * lambda[j] * cross;
                if i == j {
                    d2 += d1[i];
                }
                let tt = trace_pair(&prods[i], &self.pens.blocks[i], &prods[j], &self.pens.blocks[j]);
                let mut ldm = -lambda[i] * lambda[j] * tt;
                if i == j {
                    ldm += lambda[i] * tr[i];
                }
                let h = r * (d2 / dp - d1[i] * d1[j] / (dp * dp)) + ldm - ld_hess[i][j];
                hess[i][j] = h;
                hess[j][i] = h;
            }
        }
        Ok(GaussianState { objective, grad, hess, psi, rss, dp, m_inv: Some(m_inv) })
    }
}

/// `(A S)[:, block]` as a `p × dim` matrix for symmetric `A`.
fn block_product(a: MatRef<'_, f64>, b: &SparseBlock) -> Mat<f64> {
    let p = a.nrows();
    let mut out = Mat::<f64>::zeros(p, b.dim);
    for (j, col) in b.cols.iter().enumerate() {
        for &(i, v) in col {
            let src = a.col(b.offset + i);
            for r in 0..p {
                out[(r, j)] += src[r] * v;
            }
        }
    }
    out
}

/// `tr(A S_i A S_j)` from the block products `(A S_i)[:, B_i]`, `(A S_j)[:, B_j]`.
fn trace_pair(pi: &Mat<f64>, bi: &SparseBlock, pj: &Mat<f64>, bj: &SparseBlock) -> f64 {
    let mut t = 0.0;
    for a in 0..bj.dim {
        for b in 0..bi.dim {
            t += pi[(bj.offset + a, b)] * pj[(bi.offset + b, a)];
        }
    }
    t
}

/// Result of penalized IRLS for a Poisson log-linear model.
pub(crate) struct Pirls {
    pub psi: Vec<f64>,
    pub mu: Vec<f64>,
    /// Cholesky factor of `X'WX + S_λ` at the solution.
    pub chol: Cholesky,
    pub loglik: f64,
}

pub(crate) fn poisson_loglik(y: &[f64], mu: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .map(|(&y, &m)| {
            let ly = if y > 0.0 { y * m.ln() } else { 0.0 };
            ly - m - statrs::function::gamma::ln_gamma(y + 1.0)
        })
        .sum()
}

fn exp_eta(eta: f64) -> f64 {
    eta.clamp(-700.0, 700.0).exp()
}

/// Maximizes `l(ψ) - ½ψ'S_λψ` for Poisson counts by penalized IRLS with
/// step halving, starting from `start` (or from `μ = y + 0.1`).
pub(crate) fn pirls(
    x: MatRef<'_, f64>,
    y: &[f64],
    pens: &PenaltySet,
    lambda: &[f64],
    start: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<Pirls> {
    let p = x.ncols();
    let penalized = |psi: &[f64], mu: &[f64]| poisson_loglik(y, mu) - 0.5 * pens.quad(psi, lambda);
    let scale = 1.0 + linalg::tmatvec(x, y).iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut psi;
    let mut mu: Vec<f64>;
    match start {
        Some(s) => {
            psi = s.to_vec();
            mu = linalg::matvec(x, &psi).into_iter().map(exp_eta).collect();
        }
        None => {
            // one weighted least-squares step from μ = y + 0.1
            mu = y.iter().map(|&v| v + 0.1).collect();
            let z: Vec<f64> = mu.iter().map(|m| m.ln()).collect();
            let mut h = weighted_gram(x, &mu);
            pens.add_into(&mut h, lambda);
            let rhs: Vec<f64> = linalg::tmatvec(x, &z.iter().zip(&mu).map(|(z, w)| z * w).collect::<Vec<_>>());
            psi = Cholesky::new(h.as_ref())
                .map_err(|_| DlimError::Numerical("penalized normal matrix is singular".into()))?
                .solve(&rhs);
            mu = linalg::matvec(x, &psi).into_iter().map(exp_eta).collect();
        }
    }
    let mut obj = penalized(&psi, &mu);
    let mut trace = vec![-2.0 * obj];
    let mut increases = 0;
    for iter in 0..max_iter {
        let score: Vec<f64> = {
            let resid: Vec<f64> = y.iter().zip(&mu).map(|(y, m)| y - m).collect();
            let g = linalg::tmatvec(x, &resid);
            let mut sp = vec![0.0; p];
            for (b, &l) in pens.blocks.iter().zip(lambda) {
                for (acc, v) in sp.iter_mut().zip(b.apply(&psi)) {
                    *acc += l * v;
                }
            }
            g.iter().zip(&sp).map(|(g, s)| g - s).collect()
        };
        let mut h = weighted_gram(x, &mu);
        pens.add_into(&mut h, lambda);
        let chol = Cholesky::new(h.as_ref())
            .map_err(|_| DlimError::Numerical("penalized normal matrix is singular".into()))?;
        let grad_norm = score.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if grad_norm <= tol * scale {
            let loglik = poisson_loglik(y, &mu);
            return Ok(Pirls { psi, mu, chol, loglik });
        }
        let delta = chol.solve(&score);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand: Vec<f64> = psi.iter().zip(&delta).map(|(a, d)| a + step * d).collect();
            let cmu: Vec<f64> = linalg::matvec(x, &cand).into_iter().map(exp_eta).collect();
            let cobj = penalized(&cand, &cmu);
            if cobj.is_finite() && cobj >= obj {
                psi = cand;
                mu = cmu;
                obj = cobj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        trace.push(-2.0 * obj);
        if accepted {
            increases = 0;
        } else if linalg::dot(&score, &delta) <= 1e-12 * (1.0 + obj.abs()) {
            // no step improves and the Newton decrement is negligible: the
            // remaining score is rounding noise from very large penalties
            let loglik = poisson_loglik(y, &mu);
            return Ok(Pirls { psi, mu, chol, loglik });
        } else {
            increases += 1;
            if increases >= 5 {
                return Err(DlimError::NonConvergence { iterations: iter + 1, trace });
            }
        }
    }
    Err(DlimError::NonConvergence { iterations: max_iter, trace })
}

/// Negative Laplace-approximate restricted log-likelihood of a Poisson model.
pub(crate) fn poisson_objective(fit: &Pirls, pens: &PenaltySet, lambda: &[f64]) -> Result<f64> {
    let ld_s = if lambda.is_empty() {
        0.0
    } else if lambda.iter().any(|&l| l == 0.0) {
        f64::NAN
    } else {
        pens.log_det(lambda)?.value
    };
    let m_p = pens.null_dim as f64;
    Ok(-fit.loglik + 0.5 * pens.quad(&fit.psi, lambda) - 0.5 * ld_s + 0.5 * fit.chol.log_det()
        - 0.5 * m_p * (2.0 * std::f64::consts::PI).ln())
}
