#![allow(dead_code)]

use dlim::fit::{Family, FittedModel, ModelSpec};
use dlim::model::DlimData;
use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Small synthetic DLIM dataset: AR(1) exposures, uniform modifier, two
/// covariates, `y = Σ_t x_t β_t(m) + Zγ + ε`.
pub fn toy_data(n: usize, lags: usize, seed: u64, beta: impl Fn(usize, f64) -> f64, noise_sd: f64) -> DlimData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exposures = Mat::<f64>::zeros(n, lags);
    for i in 0..n {
        let mut prev: f64 = rng.sample(StandardNormal);
        for t in 0..lags {
            let e: f64 = rng.sample(StandardNormal);
            prev = 0.8 * prev + 0.6 * e;
            exposures[(i, t)] = prev;
        }
    }
    let modifier: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let covariates = Mat::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let response = (0..n)
        .map(|i| {
            let signal: f64 = (0..lags).map(|t| exposures[(i, t)] * beta(t + 1, modifier[i])).sum();
            let noise: f64 = rng.sample(StandardNormal);
            signal + 0.5 * covariates[(i, 0)] - 0.3 * covariates[(i, 1)] + modifier[i] + noise_sd * noise
        })
        .collect();
    DlimData { response, exposures, modifier, covariates, covariate_names: vec!["z1".into(), "z2".into()] }
}

pub fn bump(t: usize, m: f64) -> f64 {
    let c = 5.0 + 6.0 * m;
    0.5 * (-((t as f64 - c) / 2.5).powi(2)).exp()
}

pub fn to_rows(a: &Mat<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows()).map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect()).collect()
}

pub fn gram(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = x[0].len();
    let mut g = vec![vec![0.0; p]; p];
    for row in x {
        for a in 0..p {
            for b in 0..p {
                g[a][b] += row[a] * row[b];
            }
        }
    }
    g
}

pub fn xt_y(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = x[0].len();
    let mut v = vec![0.0; p];
    for (row, &yi) in x.iter().zip(y) {
        for a in 0..p {
            v[a] += row[a] * yi;
        }
    }
    v
}

/// Gaussian elimination with partial pivoting: solution of `a x = b` and `log|det a|`.
pub fn lu_solve(a: &[Vec<f64>], b: &[f64]) -> (Vec<f64>, f64) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(r, &bi)| {
        let mut r = r.clone();
        r.push(bi);
        r
    }).collect();
    let mut log_det = 0.0;
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, piv);
        log_det += m[c][c].abs().ln();
        for r in 0..n {
            if r != c {
                let f = m[r][c] / m[c][c];
                for k in c..=n {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
    }
    ((0..n).map(|i| m[i][n] / m[i][i]).collect(), log_det)
}

pub fn inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|j| lu_solve(a, &(0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect::<Vec<_>>()).0)
        .collect();
    (0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect()
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix.
pub fn jacobi_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut m = a.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

/// Dense restricted log-likelihood at log smoothing parameters `rho`.
pub fn oracle_reml(x: &[Vec<f64>], y: &[f64], penalties: &[Mat<f64>], rho: &[f64]) -> f64 {
    let (n, p) = (x.len(), x[0].len());
    let mut m = gram(x);
    let mut s = vec![vec![0.0; p]; p];
    for (pen, r) in penalties.iter().zip(rho) {
        for a in 0..p {
            for b in 0..p {
                s[a][b] += r.exp() * pen[(a, b)];
                m[a][b] += r.exp() * pen[(a, b)];
            }
        }
    }
    let (psi, log_det_m) = lu_solve(&m, &xt_y(x, y));
    let rss: f64 = x.iter().zip(y).map(|(row, yi)| (yi - row.iter().zip(&psi).map(|(a, b)| a * b).sum::<f64>()).powi(2)).sum();
    let pen: f64 = (0..p).map(|a| (0..p).map(|b| psi[a] * s[a][b] * psi[b]).sum::<f64>()).sum();
    let dp = rss + pen;
    let eig = jacobi_eigenvalues(&s);
    let top = eig.iter().fold(0.0f64, |a, v| a.max(*v));
    let pos: Vec<f64> = eig.into_iter().filter(|&v| v > 1e-9 * top).collect();
    let r = (n - (p - pos.len())) as f64;
    -0.5 * (r * ((2.0 * std::f64::consts::PI * dp / r).ln() + 1.0) + log_det_m - pos.iter().map(|v| v.ln()).sum::<f64>())
}

/// `β̂_t(m)` by the double sum over the coefficient array.
pub fn beta_at(fit: &FittedModel, t: usize, m: f64) -> f64 {
    let layout = fit.layout.as_ref().unwrap();
    let (c, b) = (layout.time_row(t), layout.modifier_row(m).unwrap());
    let theta = fit.theta();
    let nt = layout.nu_time();
    let mut v = 0.0;
    for (k, bk) in b.iter().enumerate() {
        for (j, cj) in c.iter().enumerate() {
            v += bk * cj * theta[k * nt + j];
        }
    }
    v
}


/// Balanced one-way layout with `groups` groups of `per` observations.
pub fn one_way(groups: usize, per: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Vec::new();
    let mut g = Vec::new();
    for i in 0..groups {
        let a: f64 = 1.5 * rng.sample::<f64, _>(StandardNormal);
        for _ in 0..per {
            y.push(3.0 + a + rng.sample::<f64, _>(StandardNormal));
            g.push(i + 1);
        }
    }
    (y, g)
}

pub fn intercept_spec(y: Vec<f64>) -> ModelSpec {
    let n = y.len();
    ModelSpec::new(Family::Gaussian, y, None, Mat::from_fn(n, 1, |_, _| 1.0), vec!["(Intercept)".into()])
}
