use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pvdisagg::eval::{
    compute_metrics, default_grid, generate_scenario, penetration_experiment, run_cv, write_penetration_csv,
    write_summary_csv, write_sweep_csv, CvData, RESOLUTIONS, PENETRATION_FRACTIONS,
};
use pvdisagg::methods::{disaggregate as split, fit as train, Method, MethodParams, ModelRecord};
use pvdisagg::solar::{build_bank, PlaneBank, PlaneConfig};
use pvdisagg::timeseries::{ingest_csv, resample_average, write_csv, TimeSeries, Unit};
use serde::{Deserialize, Serialize};

use crate::config::{apply_method_keys, RunConfig};
use crate::error::{Failure, Kind};
use crate::output::Outputs;

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Failure::input_msg(format!("no {what} file given (flag or [inputs] key)")))
}

fn load(path: &Path, unit: Unit) -> Result<TimeSeries> {
    let ingested = ingest_csv(path, unit)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::input)?;
    if ingested.repaired > 0 {
        log::warn!("{}: interpolated {} missing samples", path.display(), ingested.repaired);
    }
    Ok(ingested.series)
}

fn load_bank(cfg: &RunConfig, planes: &[PlaneConfig]) -> Result<PlaneBank> {
    let ghi = load(required(&cfg.inputs.ghi_csv, "GHI")?, Unit::WPerM2)?;
    let t_air = load(required(&cfg.inputs.t_air_csv, "air temperature")?, Unit::Celsius)?;
    build_bank(&ghi, &t_air, &cfg.site()?, planes, &cfg.temperature()?)
        .context("building the plane bank")
        .map_err(Failure::input)
}

fn load_flow(cfg: &RunConfig, bank: &PlaneBank) -> Result<TimeSeries> {
    let p = load(required(&cfg.inputs.flow_csv, "flow")?, Unit::Kw)?;
    if !bank.matches_grid(&p) {
        return Err(Failure::input_msg("flow and GHI files are not on the same time grid"));
    }
    Ok(p)
}

pub fn transpose(cfg: &RunConfig) -> Result<()> {
    let bank = load_bank(cfg, &cfg.planes()?)?;
    let out = Outputs::new(cfg)?;
    out.csv("bank.csv", |w, prov| bank.write_csv(w, Some(prov)))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    model: ModelRecord,
}

pub fn fit(cfg: &RunConfig) -> Result<()> {
    let bank = load_bank(cfg, &cfg.planes()?)?;
    let p = load_flow(cfg, &bank)?;
    let params = cfg.method_params(p.period())?;
    let (p, bank) = if params.sampling_period == p.period() {
        (p, bank)
    } else {
        let to = params.sampling_period;
        let p = resample_average(&p, to).map_err(Failure::input)?;
        let bank = bank.resample_average(to).map_err(Failure::input)?;
        (p, bank)
    };
    let fitted = train(&p, &bank, &params).map_err(Failure::from_method)?;
    let record = ModelRecord::new(&fitted, &bank, &params);
    let out = Outputs::new(cfg)?;
    out.json("model.json", &ModelFile { model: record.clone() })?;
    println!(
        "{}",
        serde_json::json!({ "method": params.method, "alpha_total_kwp": fitted.alpha.total(), "report": record.report })
    );
    if !fitted.report.converged {
        return Err(Failure::new(
            Kind::NoConvergence,
            anyhow::anyhow!("solver stopped after {} iterations without converging", fitted.report.iterations),
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct Audit {
    samples: usize,
    clipped: usize,
    identity_violations: usize,
    alpha_total_kwp: f64,
}

pub fn disaggregate(cfg: &RunConfig, model: &Path) -> Result<()> {
    let text = std::fs::read_to_string(model)
        .with_context(|| format!("reading model {}", model.display()))
        .map_err(Failure::input)?;
    let file: ModelFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing model {}", model.display()))
        .map_err(Failure::input)?;
    let record = file.model;
    let bank = load_bank(cfg, &record.planes)?;
    let p = load_flow(cfg, &bank)?;
    let alpha = record.capacity().map_err(Failure::input)?;
    let r = split(&p, &alpha, &bank).map_err(Failure::from_method)?;
    let out = Outputs::new(cfg)?;
    out.csv("estimates.csv", |w, prov| {
        writeln!(w, "# {prov}")?;
        writeln!(w, "timestamp,g_hat_kw,l_hat_kw")?;
        for k in 0..p.len() {
            let ts = pvdisagg::timeseries::format_timestamp(p.timestamp(k));
            writeln!(w, "{ts},{},{}", r.g_hat.values()[k], r.l_hat.values()[k])?;
        }
        Ok(())
    })?;
    let audit = Audit {
        samples: p.len(),
        clipped: r.clipped,
        identity_violations: r.identity_violations,
        alpha_total_kwp: alpha.total(),
    };
    out.json("disaggregate.json", &audit)?;
    if r.identity_violations > 0 {
        return Err(Failure::new(
            Kind::Invariant,
            anyhow::anyhow!("reconstruction identity failed on {} samples", r.identity_violations),
        ));
    }
    Ok(())
}

/// The configured grid for `method`, or its default grid.
fn grid_for(cfg: &RunConfig, method: Method) -> Result<Vec<MethodParams>> {
    let s = &cfg.sweep;
    let mut grid = default_grid(method);
    let base = grid[0].clone();
    match method {
        Method::B => {
            if let Some(ls) = &s.lambda_kw {
                grid = ls.iter().map(|&lambda| MethodParams { lambda, ..base.clone() }).collect();
            }
        }
        Method::C => {
            if let Some(cs) = &s.c_samples {
                grid = cs.iter().map(|&c| MethodParams { c, ..base.clone() }).collect();
            }
        }
        Method::D if s.f_low_hz.is_some() || s.f_high_hz.is_some() => {
            let lows = s.f_low_hz.clone().unwrap_or_else(|| vec![base.f_low]);
            let highs = s.f_high_hz.clone().unwrap_or_else(|| vec![base.f_high]);
            grid = lows
                .iter()
                .flat_map(|&f_low| highs.iter().map(move |&f_high| (f_low, f_high)))
                .filter(|(lo, hi)| lo < hi)
                .map(|(f_low, f_high)| MethodParams { f_low, f_high, ..base.clone() })
                .collect();
        }
        _ => {}
    }
    // Shared solver keys from [method] apply to every point.
    let shared = crate::config::MethodSection {
        irls_tuning: cfg.method.irls_tuning,
        night_threshold_w_m2: cfg.method.night_threshold_w_m2,
        tol: cfg.method.tol,
        ..Default::default()
    };
    for p in &mut grid {
        apply_method_keys(p, &shared)?;
    }
    if grid.is_empty() {
        return Err(Failure::input_msg(format!("empty parameter grid for method {method}")));
    }
    Ok(grid)
}

fn sweep_data(cfg: &RunConfig) -> Result<CvData> {
    let i = &cfg.inputs;
    if i.flow_csv.is_some() || i.g_true_csv.is_some() {
        let bank = load_bank(cfg, &cfg.planes()?)?;
        let p = load_flow(cfg, &bank)?;
        let g = load(required(&i.g_true_csv, "measured generation")?, Unit::Kw)?;
        let capacity = i
            .capacity_kwp
            .ok_or_else(|| Failure::input_msg("a sweep on files needs capacity_kwp"))?;
        return CvData::new(p, g, bank, capacity, cfg.seed).map_err(Failure::from_eval);
    }
    let spec = cfg.scenario()?;
    let s = generate_scenario(&spec).map_err(Failure::from_eval)?;
    CvData::from_scenario(&s, &spec, &cfg.planes()?).map_err(Failure::from_eval)
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let methods: Vec<Method> = match &cfg.sweep.methods {
        Some(names) => names.iter().map(|n| n.parse().map_err(Failure::input)).collect::<Result<_>>()?,
        None => Method::ALL.to_vec(),
    };
    let mut grid = Vec::new();
    for &m in &methods {
        grid.extend(grid_for(cfg, m)?);
    }
    let resolutions = cfg.sweep.resolutions_s.clone().unwrap_or_else(|| RESOLUTIONS.to_vec());
    let data = sweep_data(cfg)?;
    let result = run_cv(&data, &grid, &resolutions).map_err(Failure::from_eval)?;
    let out = Outputs::new(cfg)?;
    out.csv("sweep.csv", |w, prov| write_sweep_csv(w, &result, Some(prov)))?;
    out.csv("summary.csv", |w, prov| write_summary_csv(w, &result, Some(prov)))?;
    if cfg.sweep.penetration.unwrap_or(false) {
        let best: Vec<MethodParams> = methods.iter().filter_map(|&m| result.best(m).map(|b| b.0)).collect();
        let rows = penetration_experiment(&data, &best, &PENETRATION_FRACTIONS).map_err(Failure::from_eval)?;
        out.csv("penetration.csv", |w, prov| write_penetration_csv(w, &rows, Some(prov)))?;
    }
    let violations: usize = result.rows.iter().map(|r| r.identity_violations).sum();
    if violations > 0 {
        return Err(Failure::new(
            Kind::Invariant,
            anyhow::anyhow!("reconstruction identity failed on {violations} samples"),
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct Truth<'a> {
    spec: &'a pvdisagg::eval::ScenarioSpec,
    capacity_kwp: f64,
    skies: &'a [pvdisagg::eval::Sky],
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.scenario()?;
    let s = generate_scenario(&spec).map_err(Failure::from_eval)?;
    let out = Outputs::new(cfg)?;
    for (name, series) in [
        ("flow.csv", &s.p),
        ("ghi.csv", &s.ghi),
        ("t_air.csv", &s.t_air),
        ("g_true.csv", &s.g_true),
        ("l_true.csv", &s.l_true),
        ("battery.csv", &s.battery),
    ] {
        out.csv(name, |w, prov| write_csv(series, w, Some(prov)))?;
    }
    out.json(
        "truth.json",
        &Truth {
            spec: &spec,
            capacity_kwp: spec.total_capacity(),
            skies: &s.skies,
        },
    )?;
    Ok(())
}

pub fn metrics(cfg: &RunConfig, estimate: &Path) -> Result<()> {
    let g = load(required(&cfg.inputs.g_true_csv, "measured generation")?, Unit::Kw)?;
    let g_hat = load(estimate, Unit::Kw)?;
    let capacity = cfg
        .inputs
        .capacity_kwp
        .ok_or_else(|| Failure::input_msg("metrics need capacity_kwp"))?;
    let m = compute_metrics(&g, &g_hat, capacity).map_err(Failure::from_eval)?;
    let out = Outputs::new(cfg)?;
    out.json("metrics.json", &m)?;
    println!("{}", serde_json::to_string(&m).expect("serializable"));
    Ok(())
}
