use std::path::Path;
use std::process::{Command, Output};

use dlim::cli::write_dataset;
use dlim::fit::fit_penalized;
use dlim::model::ModelConfig;
use dlim::simlab::{replicate_seed, simulate_dataset, SimConfig, Snr};

fn dlim_cmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlim")).args(args).output().expect("binary runs")
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

fn sim_csv(dir: &Path, scenario: u8, n: usize, seed: u64) -> String {
    let mut cfg = SimConfig::new(scenario, n, Snr::High);
    cfg.lags = 20;
    let path = dir.join("data.csv");
    write_dataset(&simulate_dataset(&cfg, seed).unwrap(), &path).unwrap();
    path.to_str().unwrap().to_string()
}

fn fit_args<'a>(data: &'a str, out: &'a str) -> Vec<&'a str> {
    vec!["fit", "--data", data, "--modifier", "m", "--covariates", "z1,z2,z3", "--output", out, "--nu-time", "8"]
}

#[test]
fn degree_zero_polynomial_dlim_reproduces_the_dlm() {
    let dir = tempfile::tempdir().unwrap();
    let data = sim_csv(dir.path(), 1, 200, 1);
    let a = dir.path().join("dlm");
    let b = dir.path().join("poly");
    let mut args = fit_args(&data, a.to_str().unwrap());
    args.extend(["--model", "dlm"]);
    assert!(dlim_cmd(&args).status.success());
    let mut args = fit_args(&data, b.to_str().unwrap());
    args.extend(["--model", "dlim", "--mod-basis", "poly", "--nu-mod", "1"]);
    let out = dlim_cmd(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (ea, eb) = (read_csv(&a.join("effects.csv")), read_csv(&b.join("effects.csv")));
    assert_eq!(ea.len(), eb.len());
    for (ra, rb) in ea.iter().zip(&eb) {
        for (x, y) in ra.iter().zip(rb) {
            let (x, y): (f64, f64) = (x.parse().unwrap(), y.parse().unwrap());
            assert!((x - y).abs() <= 1e-8 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn missing_column_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = sim_csv(dir.path(), 1, 60, 2);
    let out = dir.path().join("out");
    let out = dlim_cmd(&["fit", "--data", &data, "--modifier", "hsf", "--output", out.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("'hsf'"));
}

#[test]
fn unparsable_cell_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    let mut text = String::from("y,x1,x2,m\n");
    for i in 0..20 {
        text.push_str(&format!("{i},1,2,0.{i}\n"));
    }
    text.push_str("1,oops,2,0.5\n");
    std::fs::write(&path, text).unwrap();
    let out = dlim_cmd(&["fit", "--data", path.to_str().unwrap(), "--modifier", "m", "--output", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 22") && err.contains("'x1'"), "{err}");
}

#[test]
fn incomplete_rows_are_dropped_with_a_notice() {
    let dir = tempfile::tempdir().unwrap();
    let data = sim_csv(dir.path(), 1, 120, 3);
    let text = std::fs::read_to_string(&data).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cells: Vec<&str> = lines[5].split(',').collect();
    cells[3] = "";
    lines[5] = cells.join(",");
    std::fs::write(&data, lines.join("\n") + "\n").unwrap();
    let out_dir = dir.path().join("out");
    let mut args = fit_args(&data, out_dir.to_str().unwrap());
    args.extend(["--model", "dlm"]);
    let out = dlim_cmd(&args);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dropped 1 rows"));
    let model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["n"], 119);
}

#[test]
fn modified_data_show_a_modifier_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let data = sim_csv(dir.path(), 2, 500, 4);
    let out_dir = dir.path().join("out");
    let mut args = fit_args(&data, out_dir.to_str().unwrap());
    args.extend(["--nu-mod", "8"]);
    let out = dlim_cmd(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cum = read_csv(&out_dir.join("cumulative.csv"));
    assert_eq!(cum.len(), 25);
    let f = |r: &Vec<String>, c: usize| r[c].parse::<f64>().unwrap();
    let (first, last) = (&cum[0], &cum[24]);
    assert!(f(last, 1) / f(last, 2) > 2.0);
    // intervals at the grid extremes do not overlap
    assert!(f(last, 3) > f(first, 4));
    assert!(out_dir.join("windows.csv").exists());
}

#[test]
fn simulated_dataset_round_trips_through_fit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("study.json");
    std::fs::write(&cfg_path, r#"{"scenario": 2, "n": 150, "lags": 12, "reps": 1, "models": ["dlm"], "seed": 5}"#).unwrap();
    let out_dir = dir.path().join("sim");
    let out = dlim_cmd(&["simulate", "--config", cfg_path.to_str().unwrap(), "--output", out_dir.to_str().unwrap(), "--export-data"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let fit_dir = dir.path().join("fit");
    let data = out_dir.join("data.csv");
    let mut args = fit_args(data.to_str().unwrap(), fit_dir.to_str().unwrap());
    args.extend(["--model", "dlm"]);
    assert!(dlim_cmd(&args).status.success());
    let model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fit_dir.join("model.json")).unwrap()).unwrap();

    let mut sim = SimConfig::new(2, 150, Snr::High);
    sim.lags = 12;
    let ds = simulate_dataset(&sim, replicate_seed(5, 0)).unwrap();
    let fit = fit_penalized(&ModelConfig::dlm(8).build(&ds.to_data()).unwrap()).unwrap();
    let coefs = model["coefficients"].as_array().unwrap();
    assert_eq!(coefs.len(), fit.n_coef());
    for (c, v) in coefs.iter().zip(&fit.coefficients) {
        assert_eq!(c["estimate"].as_f64().unwrap(), *v);
    }
}

#[test]
fn simulate_is_reproducible_and_validates_first() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("study.json");
    std::fs::write(
        &cfg_path,
        r#"{"scenario": 4, "n": 120, "lags": 10, "reps": 3, "models": ["dlm", "dlim(6,5)"], "seed": 9}"#,
    )
    .unwrap();
    let run = |name: &str, workers: &str| {
        let out = dir.path().join(name);
        let o = dlim_cmd(&["simulate", "--config", cfg_path.to_str().unwrap(), "--output", out.to_str().unwrap(), "--workers", workers]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (std::fs::read(out.join("report.csv")).unwrap(), std::fs::read(out.join("report.json")).unwrap())
    };
    let a = run("a", "1");
    assert_eq!(a, run("b", "1"));
    assert_eq!(a, run("c", "3"));

    std::fs::write(&cfg_path, r#"{"scenario": 7, "reps": 1000}"#).unwrap();
    let o = dlim_cmd(&["simulate", "--config", cfg_path.to_str().unwrap(), "--output", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("scenario"));
}

#[test]
fn test_command_contract() {
    let dir = tempfile::tempdir().unwrap();
    let data = sim_csv(dir.path(), 3, 300, 6);
    let base = |out: &str| {
        let mut v = vec!["test", "--data", data.as_str(), "--modifier", "m", "--covariates", "z1,z2,z3"];
        v.extend(["--nu-time", "8", "--nu-mod", "8", "--output", out].iter().map(|s| &**s));
        v.iter().map(|s| s.to_string()).collect::<Vec<String>>()
    };
    let call = |extra: &[&str], out: &str| {
        let mut args = base(out);
        args.extend(extra.iter().map(|s| s.to_string()));
        Command::new(env!("CARGO_BIN_EXE_dlim")).args(&args).output().unwrap()
    };
    let d = dir.path().to_str().unwrap().to_string();
    assert_eq!(call(&["--bootstrap", "50"], &d).status.code(), Some(2));
    assert_eq!(call(&["--null", "dlim", "--full", "dlm", "--bootstrap", "100"], &d).status.code(), Some(2));

    let o1 = dir.path().join("t1");
    let o2 = dir.path().join("t2");
    for o in [&o1, &o2] {
        let out = call(&["--bootstrap", "100", "--seed", "3"], o.to_str().unwrap());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(o1.join("test.json")).unwrap();
    assert_eq!(a, std::fs::read(o2.join("test.json")).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert!(v["p_value"].as_f64().unwrap() < 0.05);
    assert_eq!(v["bootstrap"], 100);
    assert_eq!(v["seed"], 3);
}
