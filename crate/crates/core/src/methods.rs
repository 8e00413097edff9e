//! The four capacity estimators and the reconstruction of demand and
//! generation from a trained capacity vector.
//!
//! Sign convention: `P = L − G`, so generation enters the metered flow with a
//! negative sign and `L̂ = P + Ĝ`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{design_bandpass, DspError};
use crate::optim::{
    irls_bisquare, solve_demand_regression, solve_lad, DemandProblem, OptimError, SolverReport, DEFAULT_TOL,
    DEFAULT_TUNING,
};
use crate::solar::{PlaneBank, PlaneConfig};
use crate::timeseries::{format_timestamp, true_runs, TimeSeries, Unit, DEFAULT_NIGHT_THRESHOLD, SECONDS_PER_DAY};

/// 1 kWp under 1000 W/m² yields 1 kW.
const W_PER_KW: f64 = 1000.0;

/// IRLS iteration cap for Method D.
const IRLS_MAX_ITER: usize = 200;

#[derive(Debug, Error)]
pub enum MethodError {
    #[error("capacity vector belongs to bank {expected}, got bank {got}")]
    BankMismatch { expected: String, got: String },
    #[error("power flow and plane bank are not on the same grid")]
    Alignment,
    #[error("power flow must be in kW, got {0}")]
    Unit(Unit),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    A,
    B,
    C,
    D,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::A, Method::B, Method::C, Method::D];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::A => "A",
            Method::B => "B",
            Method::C => "C",
            Method::D => "D",
        })
    }
}

impl FromStr for Method {
    type Err = MethodError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Method::A),
            "B" => Ok(Method::B),
            "C" => Ok(Method::C),
            "D" => Ok(Method::D),
            other => Err(MethodError::Params(format!("unknown method {other:?}"))),
        }
    }
}

/// Installed capacity per bank plane, kWp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityVector {
    pub alpha: Vec<f64>,
    pub bank_id: String,
}

impl CapacityVector {
    pub fn new(alpha: Vec<f64>, bank_id: impl Into<String>) -> Result<Self, MethodError> {
        if let Some(a) = alpha.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(MethodError::Params(format!("capacity {a} must be finite and nonnegative")));
        }
        Ok(Self {
            alpha,
            bank_id: bank_id.into(),
        })
    }

    pub fn zeros(bank: &PlaneBank) -> Self {
        Self {
            alpha: vec![0.0; bank.num_planes()],
            bank_id: bank.geometry_id(),
        }
    }

    /// Total capacity, kWp.
    pub fn total(&self) -> f64 {
        self.alpha.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodParams {
    pub method: Method,
    /// Expected period of the training series, s.
    pub sampling_period: u32,
    /// Demand total-variation weight (B), kW.
    pub lambda: f64,
    /// Demand segment length in samples (C).
    pub c: usize,
    /// Band-pass cutoffs (D), Hz.
    pub f_low: f64,
    pub f_high: f64,
    /// Bisquare tuning constant (D), in units of the residual scale.
    pub irls_tuning: f64,
    /// Samples whose brightest plane is at or below this level (W/m²) are
    /// left out of training. `None` trains on every sample.
    pub night_threshold: Option<f64>,
    /// Solver tolerance.
    pub tol: f64,
}

impl MethodParams {
    pub fn new(method: Method, sampling_period: u32) -> Self {
        Self {
            method,
            sampling_period,
            lambda: 1.0,
            c: 10,
            f_low: 1.0 / 7200.0,
            f_high: 1.0 / 600.0,
            irls_tuning: DEFAULT_TUNING,
            night_threshold: Some(DEFAULT_NIGHT_THRESHOLD),
            tol: DEFAULT_TOL,
        }
    }

    pub fn validate(&self) -> Result<(), MethodError> {
        let bad = |m: String| Err(MethodError::Params(m));
        if self.sampling_period == 0 {
            return bad("sampling period must be positive".into());
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return bad(format!("tolerance {} outside (0, 1)", self.tol));
        }
        if let Some(t) = self.night_threshold {
            if !(t.is_finite() && t >= 0.0) {
                return bad(format!("night threshold {t} must be finite and nonnegative"));
            }
        }
        match self.method {
            Method::A => {}
            Method::B if !(self.lambda.is_finite() && self.lambda >= 0.0) => {
                return bad(format!("lambda {} must be finite and nonnegative", self.lambda));
            }
            Method::C if self.c == 0 => return bad("segment length c must be at least 1".into()),
            Method::D => {
                if !(self.f_low > 0.0 && self.f_low < self.f_high && self.f_high.is_finite()) {
                    return bad(format!("need 0 < f_low < f_high, got {} and {}", self.f_low, self.f_high));
                }
                let nyquist = 0.5 / f64::from(self.sampling_period);
                if self.f_high >= nyquist {
                    return bad(format!(
                        "f_high {} Hz not below the {nyquist} Hz Nyquist limit at {} s",
                        self.f_high, self.sampling_period
                    ));
                }
                if !(self.irls_tuning > 0.0 && self.irls_tuning.is_finite()) {
                    return bad(format!("tuning {} must be positive", self.irls_tuning));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Output of a training run.
#[derive(Debug, Clone)]
pub struct Fit {
    pub alpha: CapacityVector,
    /// In-solver demand estimate (B and C only), kW.
    pub l_hat: Option<TimeSeries>,
    pub report: SolverReport,
}

/// Persisted form of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub bank_id: String,
    pub planes: Vec<PlaneConfig>,
    /// kWp per plane.
    pub alpha: Vec<f64>,
    pub training_start: String,
    pub training_end: String,
    pub params: MethodParams,
    pub report: SolverReport,
}

impl ModelRecord {
    pub fn new(fit: &Fit, bank: &PlaneBank, params: &MethodParams) -> Self {
        let end = bank.start_epoch() + bank.len() as i64 * i64::from(bank.period());
        Self {
            bank_id: fit.alpha.bank_id.clone(),
            planes: bank.planes().to_vec(),
            alpha: fit.alpha.alpha.clone(),
            training_start: format_timestamp(bank.start_epoch()),
            training_end: format_timestamp(end),
            params: params.clone(),
            report: fit.report.clone(),
        }
    }

    pub fn capacity(&self) -> Result<CapacityVector, MethodError> {
        CapacityVector::new(self.alpha.clone(), self.bank_id.clone())
    }
}

#[derive(Debug, Clone)]
pub struct DisaggregationResult {
    /// Estimated generation, kW.
    pub g_hat: TimeSeries,
    /// Estimated demand after clipping at zero, kW.
    pub l_hat: TimeSeries,
    pub alpha: CapacityVector,
    pub report: SolverReport,
    /// Samples where the reconstructed demand was negative and set to zero.
    pub clipped: usize,
    /// Samples where `L̂ − Ĝ = P` failed before clipping.
    pub identity_violations: usize,
}

fn check_bank(alpha: &CapacityVector, bank: &PlaneBank) -> Result<(), MethodError> {
    let id = bank.geometry_id();
    if alpha.bank_id != id || alpha.alpha.len() != bank.num_planes() {
        return Err(MethodError::BankMismatch {
            expected: alpha.bank_id.clone(),
            got: id,
        });
    }
    Ok(())
}

fn check_inputs(p: &TimeSeries, bank: &PlaneBank) -> Result<(), MethodError> {
    if p.unit() != Unit::Kw {
        return Err(MethodError::Unit(p.unit()));
    }
    if !bank.matches_grid(p) {
        return Err(MethodError::Alignment);
    }
    Ok(())
}

/// `Ĝ = Σ α_j I_j`, kW, on the bank grid.
pub fn predict_generation(alpha: &CapacityVector, bank: &PlaneBank) -> Result<TimeSeries, MethodError> {
    check_bank(alpha, bank)?;
    let g = bank.matrix() * DVector::from_column_slice(&alpha.alpha);
    let values = g.iter().map(|v| (v / W_PER_KW).max(0.0)).collect();
    TimeSeries::new(bank.start_epoch(), bank.period(), values, Unit::Kw)
        .map_err(|e| MethodError::Params(e.to_string()))
}

/// Per-sample daylight flag: the brightest plane exceeds the threshold.
pub fn daylight(bank: &PlaneBank, threshold: Option<f64>) -> Vec<bool> {
    let Some(t) = threshold else {
        return vec![true; bank.len()];
    };
    let m = bank.matrix();
    (0..bank.len())
        .map(|k| m.row(k).iter().any(|&v| v > t))
        .collect()
}

/// Index ranges split at UTC midnight, partial days included.
fn calendar_days(p: &TimeSeries) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for k in 1..p.len() {
        if p.timestamp(k).rem_euclid(SECONDS_PER_DAY) == 0 {
            out.push(start..k);
            start = k;
        }
    }
    if start < p.len() {
        out.push(start..p.len());
    }
    out
}

fn capacity(alpha: Vec<f64>, bank: &PlaneBank) -> Result<CapacityVector, MethodError> {
    // Solvers project onto the bound, so only rounding noise can be negative.
    CapacityVector::new(alpha.into_iter().map(|a| a.max(0.0)).collect(), bank.geometry_id())
}

/// Dispatches on `params.method`.
pub fn fit(p: &TimeSeries, bank: &PlaneBank, params: &MethodParams) -> Result<Fit, MethodError> {
    params.validate()?;
    if p.period() != params.sampling_period {
        return Err(MethodError::Params(format!(
            "series period {} s differs from sampling_period {} s",
            p.period(),
            params.sampling_period
        )));
    }
    match params.method {
        Method::A => fit_method_a(p, bank, params),
        Method::B => fit_method_b(p, bank, params),
        Method::C => fit_method_c(p, bank, params),
        Method::D => fit_method_d(p, bank, params),
    }
}

/// L1 regression of the differenced flow on the differenced bank. Differences
/// are taken only between consecutive daylight samples.
pub fn fit_method_a(p: &TimeSeries, bank: &PlaneBank, params: &MethodParams) -> Result<Fit, MethodError> {
    check_inputs(p, bank)?;
    let mask = daylight(bank, params.night_threshold);
    let runs = true_runs(&mask, 0..p.len());
    let j = bank.num_planes();
    let m = bank.matrix();
    let pv = p.values();
    let rows: Vec<usize> = runs.iter().flat_map(|r| r.start + 1..r.end).collect();
    if rows.len() < j + 1 {
        return Err(MethodError::Params(format!(
            "{} differenced samples for {j} planes",
            rows.len()
        )));
    }
    let x = DMatrix::from_fn(rows.len(), j, |r, c| (m[(rows[r], c)] - m[(rows[r] - 1, c)]) / W_PER_KW);
    // ΔP = ΔL − ΔG, and ΔL ≈ 0 for most samples.
    let y: Vec<f64> = rows.iter().map(|&k| -(pv[k] - pv[k - 1])).collect();
    let lad = solve_lad(&x, &y, true, params.tol)?;
    Ok(Fit {
        alpha: capacity(lad.alpha, bank)?,
        l_hat: None,
        report: lad.report,
    })
}

fn fit_demand(p: &TimeSeries, bank: &PlaneBank, params: &MethodParams, c: usize, lambda: f64) -> Result<Fit, MethodError> {
    check_inputs(p, bank)?;
    let mask = daylight(bank, params.night_threshold);
    let rows: Vec<usize> = (0..p.len()).filter(|&k| mask[k]).collect();
    if rows.is_empty() {
        return Err(MethodError::Params("no daylight samples to train on".into()));
    }
    // Runs in compacted row coordinates. Segment boundaries sit on multiples
    // of `c` samples since the epoch.
    let mut runs = Vec::new();
    let mut phases = Vec::new();
    let mut offset = 0;
    for r in true_runs(&mask, 0..p.len()) {
        let slot = p.timestamp(r.start).div_euclid(i64::from(p.period()));
        phases.push(slot.rem_euclid(c as i64) as usize);
        runs.push(offset..offset + r.len());
        offset += r.len();
    }
    let j = bank.num_planes();
    let m = bank.matrix();
    let mc = DMatrix::from_fn(rows.len(), j, |r, col| m[(rows[r], col)] / W_PER_KW);
    let pc: Vec<f64> = rows.iter().map(|&k| p.values()[k]).collect();
    let problem = DemandProblem::segmented_with_phase(pc, mc, &runs, &phases, c, lambda);
    let sol = solve_demand_regression(&problem, params.tol)?;
    let alpha = capacity(sol.alpha, bank)?;

    let g = predict_generation(&alpha, bank)?;
    let mut l: Vec<f64> = p.values().iter().zip(g.values()).map(|(a, b)| a + b).collect();
    for (r, &k) in rows.iter().enumerate() {
        l[k] = sol.l_hat[r];
    }
    Ok(Fit {
        alpha,
        l_hat: Some(p.with_values(l, Unit::Kw)),
        report: sol.report,
    })
}

/// Joint least squares with a total-variation penalty on sample-wise demand.
pub fn fit_method_b(p: &TimeSeries, bank: &PlaneBank, params: &MethodParams) -> Result<Fit, MethodError> {
    fit_demand(p, bank, params, 1, params.lambda)
}

/// Joint least squares with demand held constant over `c` samples. Segments
/// follow the sample grid and are cut short at daylight run edges.
pub fn fit_method_c(p: &TimeSeries, bank: &PlaneBank, params: &MethodParams) -> Result<Fit, MethodError> {
    if params.c == 0 {
        return Err(MethodError::Params("segment length c must be at least 1".into()));
    }
    fit_demand(p, bank, params, params.c, 0.0)
}

/// Robust regression on band-passed data. Each calendar day (or the whole
/// series when masking is off) is filtered on its own, then night samples are
/// dropped.
pub fn fit_method_d(p: &TimeSeries, bank: &PlaneBank, params: &MethodParams) -> Result<Fit, MethodError> {
    check_inputs(p, bank)?;
    let filter = design_bandpass(params.f_low, params.f_high, p.sample_rate_hz())?;
    let pieces = if params.night_threshold.is_some() {
        calendar_days(p)
    } else {
        vec![0..p.len()]
    };
    let pad = filter.padding();
    let usable: Vec<Range<usize>> = pieces.iter().filter(|r| r.len() > pad).cloned().collect();
    if usable.is_empty() {
        return Err(DspError::TooShort {
            len: pieces.iter().map(|r| r.len()).max().unwrap_or(0),
            padding: pad,
        }
        .into());
    }
    if usable.len() < pieces.len() {
        log::warn!("{} partial days shorter than the filter padding skipped", pieces.len() - usable.len());
    }

    let mask = daylight(bank, params.night_threshold);
    let j = bank.num_planes();
    let mut y = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); j];
    for r in &usable {
        let keep: Vec<usize> = r.clone().filter(|&k| mask[k]).collect();
        if keep.is_empty() {
            continue;
        }
        let fp = filter.apply_slice(&p.values()[r.clone()])?;
        y.extend(keep.iter().map(|&k| -fp[k - r.start]));
        for (c, col) in cols.iter_mut().enumerate() {
            let fm = filter.apply_slice(&bank.plane(c)[r.clone()])?;
            col.extend(keep.iter().map(|&k| fm[k - r.start] / W_PER_KW));
        }
    }
    if y.len() < j + 1 {
        return Err(MethodError::Params(format!("{} daylight samples for {j} planes", y.len())));
    }
    let x = DMatrix::from_fn(y.len(), j, |r, c| cols[c][r]);
    let irls = irls_bisquare(&x, &y, params.irls_tuning, true, params.tol, IRLS_MAX_ITER)?;
    Ok(Fit {
        alpha: capacity(irls.alpha, bank)?,
        l_hat: None,
        report: irls.report,
    })
}

/// Largest rounding error of `(P + Ĝ) − Ĝ` against `P`: one rounding per
/// operation.
fn identity_holds(p: f64, g: f64, l: f64) -> bool {
    let scale = p.abs().max(g.abs()).max(l.abs());
    (l - g - p).abs() <= 2.0 * f64::EPSILON * scale
}

/// `Ĝ` from the capacity vector and `L̂ = P + Ĝ`, with the identity audited
/// on every sample before clipping `L̂` at zero.
pub fn disaggregate(
    p: &TimeSeries,
    alpha: &CapacityVector,
    bank: &PlaneBank,
) -> Result<DisaggregationResult, MethodError> {
    check_bank(alpha, bank)?;
    check_inputs(p, bank)?;
    let g = predict_generation(alpha, bank)?;
    let mut clipped = 0;
    let mut identity_violations = 0;
    let l: Vec<f64> = p
        .values()
        .iter()
        .zip(g.values())
        .map(|(&pk, &gk)| {
            let lk = pk + gk;
            if !identity_holds(pk, gk, lk) {
                identity_violations += 1;
            }
            if lk < 0.0 {
                clipped += 1;
                0.0
            } else {
                lk
            }
        })
        .collect();
    if identity_violations > 0 {
        log::error!("reconstruction identity failed on {identity_violations} samples");
    }
    Ok(DisaggregationResult {
        l_hat: p.with_values(l, Unit::Kw),
        g_hat: g,
        alpha: alpha.clone(),
        report: SolverReport::default(),
        clipped,
        identity_violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(k: usize) -> PlaneBank {
        let planes = vec![PlaneConfig::new(0.0, 180.0).unwrap(), PlaneConfig::new(36.0, 135.0).unwrap()];
        let cols: Vec<Vec<f64>> = (0..2)
            .map(|j| {
                (0..k)
                    .map(|i| {
                        let t = i as f64 / k as f64 * std::f64::consts::PI;
                        800.0 * t.sin() * (1.0 + 0.3 * j as f64 * (3.0 * t).cos()).max(0.0) + 10.0
                    })
                    .collect()
            })
            .collect();
        PlaneBank::from_columns(planes, &cols, 0, 60).unwrap()
    }

    #[test]
    fn zero_capacity_predicts_nothing() {
        let b = bank(50);
        let g = predict_generation(&CapacityVector::zeros(&b), &b).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_capacity_is_plane_in_kw() {
        let b = bank(50);
        let a = CapacityVector::new(vec![0.0, 1.0], b.geometry_id()).unwrap();
        let g = predict_generation(&a, &b).unwrap();
        for k in 0..50 {
            assert_eq!(g.values()[k], b.plane(1)[k] / 1000.0);
        }
    }

    #[test]
    fn bank_mismatch() {
        let b = bank(20);
        let a = CapacityVector::new(vec![1.0, 1.0], "other").unwrap();
        assert!(matches!(predict_generation(&a, &b), Err(MethodError::BankMismatch { .. })));
        let short = CapacityVector::new(vec![1.0], b.geometry_id()).unwrap();
        assert!(matches!(predict_generation(&short, &b), Err(MethodError::BankMismatch { .. })));
    }

    #[test]
    fn params_validation() {
        let mut p = MethodParams::new(Method::C, 30);
        p.c = 0;
        assert!(p.validate().is_err());
        let mut p = MethodParams::new(Method::D, 30);
        p.f_low = p.f_high;
        assert!(p.validate().is_err());
        assert!(MethodParams::new(Method::B, 30).validate().is_ok());
        assert_eq!("c".parse::<Method>().unwrap(), Method::C);
    }

    #[test]
    fn calendar_split_keeps_partials() {
        let s = TimeSeries::new(86_400 - 120, 60, vec![0.0; 5], Unit::Kw).unwrap();
        assert_eq!(calendar_days(&s), vec![0..2, 2..5]);
    }

    #[test]
    fn rounding_identity() {
        assert!(identity_holds(0.1, 0.2, 0.1 + 0.2));
        assert!(!identity_holds(0.1, 0.2, 0.3 + 1e-12));
    }
}
