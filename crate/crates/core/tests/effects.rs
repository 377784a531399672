mod common;

use common::*;
use dlim::basis::{BasisSpec, Domain};
use dlim::crossbasis::{build_crossbasis, CrossBasisLayout};
use dlim::effects::{cumulative_effects, elementwise_variance, pointwise_effects};
use dlim::fit::{fit_with, Family, FitOptions, FittedModel};
use dlim::model::ModelConfig;
use dlim::DlimError;
use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn layout(lags: usize, time: BasisSpec, modifier: BasisSpec, rng: &mut ChaCha8Rng) -> CrossBasisLayout {
    let n = 30;
    let x = Mat::from_fn(n, lags, |_, _| rng.sample::<f64, _>(StandardNormal));
    let m: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    build_crossbasis(&x, &m, &time, &modifier).unwrap().layout()
}

fn random_vcov(p: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
    let a = Mat::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose()
}

fn model(layout: CrossBasisLayout, theta: Vec<f64>, vcov: Mat<f64>) -> FittedModel {
    let p = theta.len();
    FittedModel {
        family: Family::Gaussian,
        coefficients: theta,
        theta_range: 0..p,
        gamma_range: p..p,
        alpha_range: p..p,
        lambda: vec![],
        penalty_labels: vec![],
        scale: 1.0,
        vcov,
        loglik: 0.0,
        reml: 0.0,
        edf: p as f64,
        trace: vec![],
        converged: true,
        zero_scale: false,
        fitted: vec![],
        n: 30,
        layout: Some(layout),
        covariate_names: vec![],
    }
}

fn small_layout(rng: &mut ChaCha8Rng) -> CrossBasisLayout {
    let nt = rng.random_range(1..=4);
    let nm = rng.random_range(1..=4);
    let lags = rng.random_range(nt.max(2)..=8);
    let dt = Domain::new(1.0, lags as f64);
    let time = if nt == 1 { BasisSpec::poly(0, dt) } else { BasisSpec::bspline(nt, dt).with_degree(nt - 1) };
    let dm = Domain::new(0.0, 1.0);
    let modifier = if nm == 1 { BasisSpec::poly(0, dm) } else { BasisSpec::bspline(nm, dm).with_degree(nm - 1) };
    layout(lags, time, modifier, rng)
}

#[test]
fn elementwise_variance_matches_quadratic_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let l = small_layout(&mut rng);
        let p = l.ncols();
        let v = random_vcov(p, &mut rng);
        let t = rng.random_range(1..=l.lags());
        let m: f64 = rng.random_range(0.0..1.0);
        let fitted = model(l.clone(), vec![0.0; p], v.clone());
        let surface = pointwise_effects(&fitted, &[m], 0.05).unwrap();
        let quad = surface.se[(0, t - 1)].powi(2);
        let elem = elementwise_variance(&l, &v, t, m).unwrap();
        assert!((quad - elem).abs() <= 1e-10 * (1.0 + elem.abs()), "{quad} vs {elem}");
    }
}

#[test]
fn identity_covariance_gives_squared_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let l = layout(
        6,
        BasisSpec::bspline(4, Domain::new(1.0, 6.0)),
        BasisSpec::bspline(3, Domain::new(0.0, 1.0)).with_degree(2),
        &mut rng,
    );
    let p = l.ncols();
    let eye = Mat::<f64>::identity(p, p);
    let fitted = model(l.clone(), vec![0.0; p], eye.clone());
    let surface = pointwise_effects(&fitted, &[0.3], 0.05).unwrap();
    for t in 1..=6 {
        let (c, b) = (l.time_row(t), l.modifier_row(0.3).unwrap());
        let norm2: f64 = b.iter().flat_map(|bk| c.iter().map(move |cj| (bk * cj).powi(2))).sum();
        assert!((surface.se[(0, t - 1)].powi(2) - norm2).abs() < 1e-12);
        assert!((elementwise_variance(&l, &eye, t, 0.3).unwrap() - norm2).abs() < 1e-12);
    }
}

#[test]
fn estimates_follow_the_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let l = small_layout(&mut rng);
    let (nt, nm) = (l.nu_time(), l.nu_mod());
    let theta: Vec<f64> = (0..nt * nm).map(|_| rng.sample(StandardNormal)).collect();
    let fitted = model(l.clone(), theta.clone(), random_vcov(nt * nm, &mut rng));
    let grid = [0.1, 0.6, 0.9];
    let s = pointwise_effects(&fitted, &grid, 0.05).unwrap();
    for (i, &m) in grid.iter().enumerate() {
        let b = l.modifier_row(m).unwrap();
        for t in 1..=l.lags() {
            let c = l.time_row(t);
            let mut want = 0.0;
            for j in 0..nt {
                for k in 0..nm {
                    want += b[k] * c[j] * theta[k * nt + j];
                }
            }
            assert!((s.estimates[(i, t - 1)] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn cumulative_is_row_sum_with_expanded_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let l = small_layout(&mut rng);
        let p = l.ncols();
        let theta: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let v = random_vcov(p, &mut rng);
        let fitted = model(l.clone(), theta, v.clone());
        let grid = [0.05, 0.5, 0.95];
        let s = pointwise_effects(&fitted, &grid, 0.05).unwrap();
        let c = cumulative_effects(&fitted, &grid, 0.05).unwrap();
        for (i, &m) in grid.iter().enumerate() {
            let row: f64 = (0..l.lags()).map(|t| s.estimates[(i, t)]).sum();
            assert!((c.estimates[i] - row).abs() < 1e-10);
            // Var(Σ_t β̂_t) = Σ_t Σ_u Cov(β̂_t, β̂_u)
            let b = l.modifier_row(m).unwrap();
            let w: Vec<Vec<f64>> = (1..=l.lags())
                .map(|t| b.iter().flat_map(|bk| l.time_row(t).into_iter().map(move |cj| bk * cj)).collect())
                .collect();
            let mut var = 0.0;
            for wt in &w {
                for wu in &w {
                    for a in 0..p {
                        for bb in 0..p {
                            var += wt[a] * v[(a, bb)] * wu[bb];
                        }
                    }
                }
            }
            assert!((c.se[i].powi(2) - var).abs() < 1e-10 * (1.0 + var), "{} vs {var}", c.se[i].powi(2));
        }
    }
}

#[test]
fn single_lag_cumulative_equals_pointwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let l = layout(1, BasisSpec::poly(0, Domain::new(1.0, 2.0)), BasisSpec::bspline(3, Domain::new(0.0, 1.0)).with_degree(2), &mut rng);
    assert_eq!(l.lags(), 1);
    let fitted = model(l, vec![0.4, -1.0, 2.0], random_vcov(3, &mut rng));
    let s = pointwise_effects(&fitted, &[0.2, 0.7], 0.05).unwrap();
    let c = cumulative_effects(&fitted, &[0.2, 0.7], 0.05).unwrap();
    for i in 0..2 {
        assert!((c.estimates[i] - s.estimates[(i, 0)]).abs() < 1e-14);
        assert!((c.se[i] - s.se[(i, 0)]).abs() < 1e-14);
    }
}

#[test]
fn dlm_surface_is_constant_in_the_modifier() {
    let data = toy_data(150, 10, 6, bump, 1.0);
    let fit = fit_with(&ModelConfig::dlm(6).build(&data).unwrap(), &FitOptions::default()).unwrap();
    let s = pointwise_effects(&fit, &[0.1, 0.5, 0.9], 0.05).unwrap();
    for t in 0..10 {
        assert_eq!(s.estimates[(0, t)], s.estimates[(1, t)]);
        assert_eq!(s.estimates[(0, t)], s.estimates[(2, t)]);
        assert_eq!(s.se[(0, t)], s.se[(2, t)]);
    }
}

#[test]
fn effects_are_linear_in_theta() {
    let data = toy_data(200, 10, 7, bump, 1.0);
    let fit = fit_with(&ModelConfig::dlim(5, 4).build(&data).unwrap(), &FitOptions::default()).unwrap();
    let grid = [0.2, 0.8];
    let base = pointwise_effects(&fit, &grid, 0.05).unwrap();
    let mut doubled = fit.clone();
    for v in &mut doubled.coefficients[fit.theta_range.clone()] {
        *v *= 2.0;
    }
    let twice = pointwise_effects(&doubled, &grid, 0.05).unwrap();
    let mut zeroed = fit.clone();
    for v in &mut zeroed.coefficients[fit.theta_range.clone()] {
        *v = 0.0;
    }
    let zero = pointwise_effects(&zeroed, &grid, 0.05).unwrap();
    for i in 0..2 {
        for t in 0..10 {
            assert!((twice.estimates[(i, t)] - 2.0 * base.estimates[(i, t)]).abs() < 1e-12);
            assert_eq!(twice.se[(i, t)], base.se[(i, t)]);
            assert_eq!(zero.estimates[(i, t)], 0.0);
            assert_eq!(zero.se[(i, t)], base.se[(i, t)]);
        }
    }
}

#[test]
fn modifier_outside_domain_is_rejected() {
    let data = toy_data(150, 10, 8, bump, 1.0);
    let fit = fit_with(&ModelConfig::dlim(5, 4).build(&data).unwrap(), &FitOptions::default()).unwrap();
    assert!(matches!(pointwise_effects(&fit, &[1.5], 0.05), Err(DlimError::Domain { .. })));
    assert!(matches!(cumulative_effects(&fit, &[-0.5], 0.05), Err(DlimError::Domain { .. })));
}
