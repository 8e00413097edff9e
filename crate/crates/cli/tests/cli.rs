use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pvdisagg::eval::{generate_scenario, DemandModel, ScenarioSpec, Sky, SkyPlan};
use pvdisagg::solar::default_bank;
use pvdisagg::timeseries::{write_csv, TimeSeries};
use serde_json::Value;
use tempfile::TempDir;

fn pvdisagg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvdisagg"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .env_remove("PVDISAGG_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\n{}", out.status, String::from_utf8_lossy(&out.stderr));
}

fn error_record(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("JSON error record");
    serde_json::from_str(line).unwrap()
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path).unwrap()
}

/// Data rows of a CSV, split into fields.
fn rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn write_series(dir: &Path, name: &str, s: &TimeSeries) -> PathBuf {
    let path = dir.join(name);
    write_csv(s, fs::File::create(&path).unwrap(), None).unwrap();
    path
}

fn synth(dir: &Path, days: &str, period: &str) {
    ok(&pvdisagg(dir, &["synth", "--days", days, "--period-s", period, "--seed", "3"]));
}

#[test]
fn synth_files_carry_provenance_and_repeat() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    synth(a.path(), "3", "300");
    synth(b.path(), "3", "300");
    for name in ["flow.csv", "ghi.csv", "t_air.csv", "g_true.csv", "l_true.csv", "battery.csv"] {
        let text = read(a.path().join(name));
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("# pvdisagg 0.1.0 config="), "{first}");
        assert!(first.ends_with(" seed=3"), "{first}");
        assert_eq!(text, read(b.path().join(name)), "{name}");
        assert_eq!(rows(&text).len(), 3 * 288);
    }
    let truth: Value = serde_json::from_str(&read(a.path().join("truth.json"))).unwrap();
    assert_eq!(truth["provenance"]["seed"], 3);
    assert!((truth["capacity_kwp"].as_f64().unwrap() - 35.3).abs() < 1e-9);
}

#[test]
fn out_dir_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pvdisagg"))
        .args(["synth", "--days", "1", "--period-s", "900"])
        .env("PVDISAGG_OUT_DIR", dir.path())
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("flow.csv").exists());
}

#[test]
fn default_bank_has_21_columns() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "1", "600");
    let d = dir.path().to_str().unwrap();
    ok(&pvdisagg(dir.path(), &["transpose", "--ghi", &format!("{d}/ghi.csv"), "--t-air", &format!("{d}/t_air.csv")]));
    let text = read(dir.path().join("bank.csv"));
    assert!(text.starts_with("# pvdisagg"));
    let header = text.lines().nth(1).unwrap();
    assert_eq!(header.split(',').count(), 1 + 21);
    assert!(rows(&text).iter().all(|r| r.len() == 22));
}

#[test]
fn zero_ghi_gives_zero_bank() {
    let dir = TempDir::new().unwrap();
    let ghi = TimeSeries::new(1_622_505_600, 3600, vec![0.0; 24], pvdisagg::timeseries::Unit::WPerM2).unwrap();
    let t = ghi.with_values(vec![20.0; 24], pvdisagg::timeseries::Unit::Celsius);
    let g = write_series(dir.path(), "ghi.csv", &ghi);
    let t = write_series(dir.path(), "t.csv", &t);
    ok(&pvdisagg(dir.path(), &["transpose", "--ghi", g.to_str().unwrap(), "--t-air", t.to_str().unwrap()]));
    for r in rows(&read(dir.path().join("bank.csv"))) {
        assert!(r[1..].iter().all(|v| v.parse::<f64>().unwrap() == 0.0));
    }
}

#[test]
fn horizontal_plane_at_reference_temperature_is_ghi() {
    let dir = TempDir::new().unwrap();
    let values: Vec<f64> = (0..24).map(|h| (600.0 * ((h as f64 - 6.0) / 12.0 * std::f64::consts::PI).sin()).max(0.0)).collect();
    let ghi = TimeSeries::new(1_622_505_600, 3600, values.clone(), pvdisagg::timeseries::Unit::WPerM2).unwrap();
    // Air this much cooler puts the cell at exactly 25 °C.
    let t = ghi.with_values(values.iter().map(|g| 25.0 - 3.78e-2 * g).collect(), pvdisagg::timeseries::Unit::Celsius);
    let g = write_series(dir.path(), "ghi.csv", &ghi);
    let t = write_series(dir.path(), "t.csv", &t);
    let cfg = dir.path().join("flat.toml");
    fs::write(&cfg, "[[planes]]\ntilt_deg = 0\nazimuth_deg = 180\n").unwrap();
    ok(&pvdisagg(
        dir.path(),
        &["transpose", "--config", cfg.to_str().unwrap(), "--ghi", g.to_str().unwrap(), "--t-air", t.to_str().unwrap()],
    ));
    let out = rows(&read(dir.path().join("bank.csv")));
    assert_eq!(out.len(), 24);
    for (r, v) in out.iter().zip(&values) {
        let got: f64 = r[1].parse().unwrap();
        assert!((got - v).abs() <= 1e-9 * v.max(1.0), "{got} vs {v}");
    }
}

/// Noise-free days whose true planes are bank planes, written as CSV.
fn oracle_files(dir: &Path) -> Vec<f64> {
    let bank = default_bank();
    let mut spec = ScenarioSpec::basel_template(21);
    spec.period = 30;
    spec.days = 2;
    spec.sky = SkyPlan::Fixed(Sky::PartlyCloudy);
    spec.noise_std_kw = 0.0;
    spec.demand = DemandModel {
        inrush_rate_per_day: 0.0,
        ..spec.demand.clone()
    };
    spec.planes = vec![bank[4], bank[13]];
    spec.true_alpha = vec![9.0, 5.5];
    let s = generate_scenario(&spec).unwrap();
    write_series(dir, "flow.csv", &s.p);
    write_series(dir, "ghi.csv", &s.ghi);
    write_series(dir, "t_air.csv", &s.t_air);
    write_series(dir, "g_true.csv", &s.g_true);
    let mut truth = vec![0.0; 21];
    truth[4] = 9.0;
    truth[13] = 5.5;
    truth
}

fn input_args(dir: &Path) -> Vec<String> {
    let d = dir.to_str().unwrap();
    ["--flow", "flow.csv", "--ghi", "ghi.csv", "--t-air", "t_air.csv"]
        .chunks(2)
        .flat_map(|c| [c[0].to_string(), format!("{d}/{}", c[1])])
        .collect()
}

fn run_with(dir: &Path, head: &[&str], tail: &[&str]) -> Output {
    let inputs = input_args(dir);
    let mut args: Vec<&str> = head.to_vec();
    args.extend(inputs.iter().map(String::as_str));
    args.extend_from_slice(tail);
    pvdisagg(dir, &args)
}

#[test]
fn matched_segments_fit_recovers_capacities() {
    let dir = TempDir::new().unwrap();
    let truth = oracle_files(dir.path());
    // Demand steps every 300 s are ten samples at 30 s.
    let out = run_with(dir.path(), &["fit"], &["--method", "C", "--c-samples", "10", "--tol", "1e-9"]);
    ok(&out);
    let model: Value = serde_json::from_str(&read(dir.path().join("model.json"))).unwrap();
    assert_eq!(model["provenance"]["tool"], "pvdisagg");
    let alpha: Vec<f64> = model["model"]["alpha"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let num: f64 = alpha.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = truth.iter().map(|b| b * b).sum();
    assert!((num / den).sqrt() <= 1e-4, "{alpha:?}");
    assert!(model["model"]["report"]["converged"].as_bool().unwrap());

    // The trained model then reproduces the generation and audits cleanly.
    ok(&run_with(dir.path(), &["disaggregate"], &["--model", dir.path().join("model.json").to_str().unwrap()]));
    let audit: Value = serde_json::from_str(&read(dir.path().join("disaggregate.json"))).unwrap();
    assert_eq!(audit["identity_violations"], 0);
    let g_true = rows(&read(dir.path().join("g_true.csv")));
    let est = rows(&read(dir.path().join("estimates.csv")));
    assert_eq!(g_true.len(), est.len());
    for (a, b) in g_true.iter().zip(&est) {
        let (g, g_hat): (f64, f64) = (a[1].parse().unwrap(), b[1].parse().unwrap());
        assert!((g - g_hat).abs() < 1e-3, "{g} vs {g_hat}");
    }
}

#[test]
fn training_period_resamples_the_inputs() {
    let dir = TempDir::new().unwrap();
    oracle_files(dir.path());
    ok(&run_with(dir.path(), &["fit"], &["--method", "D", "--period-s", "60", "--f-low-period-s", "7200", "--f-high-period-s", "600"]));
    let model: Value = serde_json::from_str(&read(dir.path().join("model.json"))).unwrap();
    assert_eq!(model["model"]["params"]["sampling_period"], 60);
    assert!((model["model"]["params"]["f_high"].as_f64().unwrap() - 1.0 / 600.0).abs() < 1e-15);
}

#[test]
fn zero_model_passes_the_flow_through() {
    let dir = TempDir::new().unwrap();
    oracle_files(dir.path());
    let record = serde_json::json!({
        "model": {
            "bank_id": pvdisagg::solar::geometry_hash(&default_bank()),
            "planes": default_bank(),
            "alpha": vec![0.0; 21],
            "training_start": "2021-06-01T00:00:00Z",
            "training_end": "2021-06-02T00:00:00Z",
            "params": pvdisagg::methods::MethodParams::new(pvdisagg::methods::Method::A, 30),
            "report": pvdisagg::optim::SolverReport::default(),
        }
    });
    let model = dir.path().join("zero.json");
    fs::write(&model, record.to_string()).unwrap();
    ok(&run_with(dir.path(), &["disaggregate"], &["--model", model.to_str().unwrap()]));
    let flow = rows(&read(dir.path().join("flow.csv")));
    for (f, e) in flow.iter().zip(rows(&read(dir.path().join("estimates.csv")))) {
        let p: f64 = f[1].parse().unwrap();
        assert_eq!(e[1].parse::<f64>().unwrap(), 0.0);
        assert_eq!(e[2].parse::<f64>().unwrap(), p.max(0.0));
    }
}

#[test]
fn night_rows_have_no_generation() {
    let dir = TempDir::new().unwrap();
    oracle_files(dir.path());
    ok(&run_with(dir.path(), &["fit"], &["--method", "A"]));
    ok(&run_with(dir.path(), &["disaggregate"], &["--model", dir.path().join("model.json").to_str().unwrap()]));
    let ghi = rows(&read(dir.path().join("ghi.csv")));
    let est = rows(&read(dir.path().join("estimates.csv")));
    let mut night = 0;
    for (g, e) in ghi.iter().zip(&est) {
        if g[1].parse::<f64>().unwrap() == 0.0 {
            night += 1;
            assert_eq!(e[1].parse::<f64>().unwrap(), 0.0);
        }
    }
    assert!(night > 100);
}

#[test]
fn misaligned_inputs_exit_with_an_input_error() {
    let dir = TempDir::new().unwrap();
    oracle_files(dir.path());
    let ghi = read(dir.path().join("ghi.csv"));
    let shifted: String = ghi.lines().take(200).map(|l| format!("{l}\n")).collect();
    fs::write(dir.path().join("ghi.csv"), shifted).unwrap();
    let out = run_with(dir.path(), &["fit"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["exit_code"], 2);
    assert_eq!(rec["kind"], "input");
    assert!(!dir.path().join("model.json").exists());
}

#[test]
fn malformed_rows_report_their_line() {
    let dir = TempDir::new().unwrap();
    oracle_files(dir.path());
    let mut lines: Vec<String> = read(dir.path().join("flow.csv")).lines().map(str::to_string).collect();
    lines[5] = "not-a-time,1.0".into();
    fs::write(dir.path().join("flow.csv"), lines.join("\n")).unwrap();
    let out = run_with(dir.path(), &["fit"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let msg = error_record(&out)["message"].as_str().unwrap().to_string();
    assert!(msg.contains("flow.csv") && msg.contains("line 6"), "{msg}");
}

#[test]
fn invalid_parameters_are_input_errors() {
    let dir = TempDir::new().unwrap();
    oracle_files(dir.path());
    let out = run_with(dir.path(), &["fit"], &["--method", "D", "--f-low-hz", "0.01", "--f-high-hz", "0.001"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run_with(dir.path(), &["fit"], &["--method", "Z"]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[method]\nperiod = 30\n").unwrap();
    let out = run_with(dir.path(), &["fit", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2), "unit-less keys are rejected");
}

#[test]
fn exhausted_solver_exits_with_three() {
    let dir = TempDir::new().unwrap();
    oracle_files(dir.path());
    let out = run_with(dir.path(), &["fit"], &["--method", "B", "--lambda-kw", "1", "--tol", "1e-300"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_record(&out)["kind"], "no_convergence");
}

#[test]
fn single_point_sweep_and_penetration_rows() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("sweep.toml");
    fs::write(
        &cfg,
        "seed = 4\n[synth]\ndays = 3\nperiod_s = 60\n[sweep]\nmethods = [\"C\", \"D\"]\nresolutions_s = [300]\nc_samples = [5]\nf_low_hz = [0.0001388888888888889]\nf_high_hz = [0.0008333333333333334]\n",
    )
    .unwrap();
    ok(&pvdisagg(dir.path(), &["sweep", "--config", cfg.to_str().unwrap(), "--penetration"]));
    let summary = read(dir.path().join("summary.csv"));
    let header: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let body = rows(&summary);
    assert_eq!(body.len(), 2);
    for r in &body {
        let v: Vec<f64> = ["min", "max", "mean", "median"].iter().map(|n| r[col(n)].parse().unwrap()).collect();
        assert!(v.iter().all(|x| *x == v[0]), "{r:?}");
    }
    assert_eq!(rows(&read(dir.path().join("sweep.csv"))).len(), 2 * 3);
    assert_eq!(rows(&read(dir.path().join("penetration.csv"))).len(), 2 * 3);
}

#[test]
fn metrics_of_the_truth_are_zero() {
    let dir = TempDir::new().unwrap();
    oracle_files(dir.path());
    let g = dir.path().join("g_true.csv");
    let out = pvdisagg(
        dir.path(),
        &["metrics", "--g-true", g.to_str().unwrap(), "--estimate", g.to_str().unwrap(), "--capacity-kwp", "14.5"],
    );
    ok(&out);
    let m: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["nrmse"], 0.0);
    let file: Value = serde_json::from_str(&read(dir.path().join("metrics.json"))).unwrap();
    assert_eq!(file["normalizer_g"], 14.5);
    assert!(file["provenance"]["config_hash"].as_str().unwrap().len() == 16);
}
