use dlim::fit::{fit_penalized, Family};
use dlim::simlab::{
    evaluate_fit, replicate_seed, run_study, simulate_dataset, true_beta, ExposureSource, ModelChoice, ModifierLaw,
    SimConfig, Snr, StudyConfig,
};
use dlim::DlimError;

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

#[test]
fn noise_level_matches_the_signal_to_noise_ratio() {
    for snr in Snr::ALL {
        let d = simulate_dataset(&SimConfig::new(2, 10_000, snr), 1).unwrap();
        let n = d.modifier.len();
        let signal: Vec<f64> = (0..n).map(|i| (0..37).map(|t| d.exposures[(i, t)] * d.beta[(i, t)]).sum()).collect();
        let noise: Vec<f64> = (0..n)
            .map(|i| {
                let z: f64 = (0..3).map(|j| d.covariates[(i, j)] * d.gamma[j]).sum();
                d.response[i] - signal[i] - z - d.modifier[i]
            })
            .collect();
        let ratio = mean_sd(&noise).1 / mean_sd(&signal).1;
        let want = 1.0 / snr.value();
        assert!((ratio / want - 1.0).abs() < 0.05, "{snr}: {ratio} vs {want}");
        assert!((d.sigma * snr.value() - mean_sd(&signal).1).abs() < 1e-9);
    }
}

#[test]
fn exposures_are_standardized_autocorrelated_series() {
    let d = simulate_dataset(&SimConfig::new(1, 5000, Snr::High), 2).unwrap();
    let col = |t: usize| (0..5000).map(|i| d.exposures[(i, t)]).collect::<Vec<f64>>();
    for t in [0, 18, 36] {
        let (mean, sd) = mean_sd(&col(t));
        assert!(mean.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
    }
    let (a, b) = (col(10), col(11));
    let r = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / 4999.0;
    assert!((r - 0.9).abs() < 0.02, "{r}");
}

#[test]
fn scenario_one_has_no_modification() {
    let d = simulate_dataset(&SimConfig::new(1, 200, Snr::Med), 3).unwrap();
    assert!(d.delta.iter().all(|&v| v == d.delta[0]));
    let want: f64 = (1..=37).map(|t| true_beta(1, t, 0.0).unwrap()).sum();
    assert!((d.delta[0] - want).abs() < 1e-12);
    let d2 = simulate_dataset(&SimConfig::new(2, 200, Snr::Med), 3).unwrap();
    assert!(d2.delta.iter().any(|&v| (v - d2.delta[0]).abs() > 1e-3));
}

#[test]
fn seeds_reproduce_and_separate() {
    let cfg = SimConfig::new(4, 100, Snr::Low);
    let (a, b, c) = (simulate_dataset(&cfg, 9).unwrap(), simulate_dataset(&cfg, 9).unwrap(), simulate_dataset(&cfg, 10).unwrap());
    assert_eq!(a.response, b.response);
    assert_eq!(a.modifier, b.modifier);
    assert_ne!(a.response, c.response);
    assert_ne!(replicate_seed(1, 0), replicate_seed(1, 1));
}

#[test]
fn poisson_counts_have_the_target_mean() {
    let cfg = SimConfig { family: Family::Poisson, ..SimConfig::new(2, 5000, Snr::High) };
    let d = simulate_dataset(&cfg, 4).unwrap();
    assert!(d.response.iter().all(|&y| y >= 0.0 && y.fract() == 0.0));
    let (mean, _) = mean_sd(&d.response);
    assert!((mean - 10.0).abs() < 0.3, "{mean}");
    let truth = simulate_dataset(&SimConfig::new(2, 5000, Snr::High), 4).unwrap();
    assert!(d.effect_scale > 0.0 && d.effect_scale < 1.0);
    assert!((d.delta[7] - d.effect_scale * truth.delta[7]).abs() < 1e-12);
}

#[test]
fn normal_modifier_law() {
    let cfg = SimConfig { modifier_law: ModifierLaw::Normal, ..SimConfig::new(2, 20_000, Snr::High) };
    let (mean, sd) = mean_sd(&simulate_dataset(&cfg, 5).unwrap().modifier);
    assert!((mean - 0.5).abs() < 0.01 && (sd - 0.2).abs() < 0.01);
}

#[test]
fn exposure_series_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("series.csv");
    let mut text = String::from("w1,w2,w3,w4,w5,w6,w7,w8\n");
    for i in 0..80 {
        let row: Vec<String> = (0..8).map(|t| format!("{}", ((i * 7 + t * 3) % 11) as f64 + 0.5 * t as f64)).collect();
        text.push_str(&(row.join(",") + "\n"));
    }
    std::fs::write(&path, text).unwrap();
    let cfg = SimConfig { lags: 8, exposure: ExposureSource::Csv { path: path.clone() }, ..SimConfig::new(2, 60, Snr::High) };
    let d = simulate_dataset(&cfg, 6).unwrap();
    assert_eq!((d.exposures.nrows(), d.exposures.ncols()), (60, 8));
    let too_many = SimConfig { n: 100, ..cfg };
    assert!(matches!(simulate_dataset(&too_many, 6), Err(DlimError::Data(_))));
}

#[test]
fn invalid_settings_are_config_errors() {
    assert!(matches!(simulate_dataset(&SimConfig::new(1, 20, Snr::High), 1), Err(DlimError::Config(_))));
    assert!(matches!(simulate_dataset(&SimConfig::new(9, 100, Snr::High), 1), Err(DlimError::Config(_))));
    let bad = StudyConfig { alpha: 1.5, ..Default::default() };
    assert!(matches!(run_study(&bad), Err(DlimError::Config(_))));
}

#[test]
fn study_replicate_matches_a_direct_fit() {
    let sim = SimConfig { lags: 12, ..SimConfig::new(3, 150, Snr::High) };
    let cfg = StudyConfig { sim: sim.clone(), reps: 2, models: vec![ModelChoice::DLM], seed: 8, workers: 1, ..Default::default() };
    let report = run_study(&cfg).unwrap();
    let data = simulate_dataset(&sim, replicate_seed(8, 1)).unwrap();
    let fit = fit_penalized(&ModelChoice::DLM.config(Family::Gaussian).build(&data.to_data()).unwrap()).unwrap();
    let direct = evaluate_fit(&fit, &data, 0.05).unwrap();
    assert_eq!(report.replicates[1].models[0].metrics, direct);
    let avg = report.average(ModelChoice::DLM).unwrap();
    let first = report.replicates[0].models[0].metrics;
    assert!((avg.cum_rmse - (first.cum_rmse + direct.cum_rmse) / 2.0).abs() < 1e-15);
}
