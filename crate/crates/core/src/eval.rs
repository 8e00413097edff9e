//! Error metrics, the synthetic prosumer scenario used as ground truth,
//! cross-validated parameter sweeps and PV penetration scaling.

use std::io::Write;
use std::ops::Range;
use std::time::Instant;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::methods::{disaggregate, fit, Method, MethodError, MethodParams};
use crate::solar::{
    build_bank, clear_sky_ghi, sun_position, PlaneBank, PlaneConfig, SiteConfig, SolarError, TemperatureModel,
};
use crate::timeseries::{
    make_folds, resample_average, DailyFoldPlan, TimeSeries, TimeSeriesError, Unit, SECONDS_PER_DAY,
};

/// Sampling periods of the cross-validation sweep, s.
pub const RESOLUTIONS: [u32; 7] = [10, 30, 60, 120, 300, 600, 900];

/// Battery controller update period, s.
pub const ACTUATION_PERIOD: u32 = 300;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("series are not on the same time grid")]
    Alignment,
    #[error("installed capacity must be positive, got {0}")]
    Capacity(f64),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    TimeSeries(#[from] TimeSeriesError),
    #[error(transparent)]
    Solar(#[from] SolarError),
    #[error(transparent)]
    Method(#[from] MethodError),
}

/// Errors of `Ĝ` against `G`, in percent of installed capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub nrmse: f64,
    pub nmae: f64,
    pub nme: f64,
    /// Installed capacity used as normalizer, kWp.
    pub normalizer_g: f64,
}

/// Metrics of `e_k = G_k − Ĝ_k` normalized by `g_capacity`.
pub fn metrics_from_errors(errors: &[f64], g_capacity: f64) -> Result<Metrics, EvalError> {
    if !(g_capacity > 0.0 && g_capacity.is_finite()) {
        return Err(EvalError::Capacity(g_capacity));
    }
    if errors.is_empty() {
        return Err(EvalError::Alignment);
    }
    let n = errors.len() as f64;
    let mse = errors.iter().map(|e| e * e).sum::<f64>() / n;
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
    let me = errors.iter().sum::<f64>() / n;
    Ok(Metrics {
        nrmse: mse.sqrt() / g_capacity * 100.0,
        nmae: mae / g_capacity * 100.0,
        nme: me / g_capacity * 100.0,
        normalizer_g: g_capacity,
    })
}

pub fn compute_metrics(g_true: &TimeSeries, g_hat: &TimeSeries, g_capacity: f64) -> Result<Metrics, EvalError> {
    if !g_true.same_grid(g_hat) {
        return Err(EvalError::Alignment);
    }
    let e: Vec<f64> = g_true.values().iter().zip(g_hat.values()).map(|(a, b)| a - b).collect();
    metrics_from_errors(&e, g_capacity)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sky {
    Clear,
    PartlyCloudy,
    Overcast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkyPlan {
    /// The three conditions in equal shares (up to rounding), shuffled over
    /// the days.
    Mixed,
    Fixed(Sky),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandModel {
    /// Lowest demand level, kW.
    pub base_kw: f64,
    /// Levels are drawn from `base + spread·U(0, 1)`, kW.
    pub level_spread_kw: f64,
    /// Demand level holding time, s.
    pub piecewise_period_s: u32,
    /// Mean number of inrushes per day.
    pub inrush_rate_per_day: f64,
    /// Largest inrush height, kW; heights are `U(0.5, 1)` of this.
    pub inrush_kw: f64,
    pub inrush_duration_s: u32,
}

impl DemandModel {
    pub fn constant(level_kw: f64) -> Self {
        Self {
            base_kw: level_kw,
            level_spread_kw: 0.0,
            piecewise_period_s: SECONDS_PER_DAY as u32,
            inrush_rate_per_day: 0.0,
            inrush_kw: 0.0,
            inrush_duration_s: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatterySpec {
    pub power_kw: f64,
    pub energy_kwh: f64,
    /// State of charge at the start of the scenario, fraction of capacity.
    pub initial_soc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub site: SiteConfig,
    pub planes: Vec<PlaneConfig>,
    /// kWp per entry of `planes`.
    pub true_alpha: Vec<f64>,
    pub demand: DemandModel,
    /// Self-consumption battery, actuated every 300 s.
    pub battery: Option<BatterySpec>,
    pub sky: SkyPlan,
    /// Standard deviation of the metering noise on `P`, kW.
    pub noise_std_kw: f64,
    pub days: usize,
    pub period: u32,
    /// Must fall on a UTC midnight.
    pub start_epoch: i64,
    pub seed: u64,
    pub temperature: TemperatureModel,
}

/// 2021-06-01T00:00:00Z
pub const DEFAULT_START: i64 = 1_622_505_600;

impl ScenarioSpec {
    /// Five Basel rooftop plants totalling 35.3 kWp, 12 kW peak demand.
    pub fn basel_template(seed: u64) -> Self {
        let plants = [(10.0, 95.0, 14.0), (7.2, 187.0, 36.0), (3.5, 266.0, 40.0), (8.0, 187.0, 40.0), (6.6, 180.0, 24.0)];
        Self {
            site: SiteConfig {
                latitude: 47.5596,
                longitude: 7.5886,
                altitude: 260.0,
                albedo: 0.2,
            },
            planes: plants.iter().map(|&(_, az, tilt)| PlaneConfig { tilt, azimuth: az }).collect(),
            true_alpha: plants.iter().map(|p| p.0).collect(),
            demand: DemandModel {
                base_kw: 0.5,
                level_spread_kw: 5.5,
                piecewise_period_s: 300,
                inrush_rate_per_day: 12.0,
                inrush_kw: 6.0,
                inrush_duration_s: 60,
            },
            battery: None,
            sky: SkyPlan::Mixed,
            noise_std_kw: 0.353,
            days: 9,
            period: 10,
            start_epoch: DEFAULT_START,
            seed,
            temperature: TemperatureModel::default(),
        }
    }

    /// The 12 kW / 26.4 kWh self-consumption battery.
    pub fn with_battery(mut self) -> Self {
        self.battery = Some(BatterySpec {
            power_kw: 12.0,
            energy_kwh: 26.4,
            initial_soc: 0.5,
        });
        self
    }

    pub fn total_capacity(&self) -> f64 {
        self.true_alpha.iter().sum()
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::Scenario(m.to_string()));
        self.site.validate()?;
        self.temperature.validate()?;
        if self.planes.len() != self.true_alpha.len() || self.planes.is_empty() {
            return bad("one capacity per plane is required");
        }
        for p in &self.planes {
            p.validate()?;
        }
        if self.true_alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return bad("capacities must be nonnegative");
        }
        let d = &self.demand;
        let nonneg = [d.base_kw, d.level_spread_kw, d.inrush_rate_per_day, d.inrush_kw, self.noise_std_kw];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("demand and noise magnitudes must be nonnegative");
        }
        if d.piecewise_period_s == 0 || d.piecewise_period_s % self.period != 0 {
            return bad("demand holding time must be a positive multiple of the period");
        }
        if let Some(b) = &self.battery {
            if !(b.power_kw >= 0.0 && b.energy_kwh >= 0.0 && (0.0..=1.0).contains(&b.initial_soc)) {
                return bad("battery ratings must be nonnegative and the initial charge within [0, 1]");
            }
            if ACTUATION_PERIOD % self.period != 0 {
                return bad("the period must divide the 300 s actuation period");
            }
        }
        if self.days == 0 {
            return bad("at least one day is required");
        }
        if self.start_epoch.rem_euclid(SECONDS_PER_DAY) != 0 {
            return bad("scenarios start at a UTC midnight");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    /// Net flow at the connection point, kW.
    pub p: TimeSeries,
    pub ghi: TimeSeries,
    pub t_air: TimeSeries,
    pub g_true: TimeSeries,
    /// Demand of the household appliances, kW.
    pub l_true: TimeSeries,
    /// Battery output towards the household, kW: positive while discharging.
    pub battery: TimeSeries,
    /// Stored energy at the end of each sample, kWh.
    pub stored_kwh: Vec<f64>,
    pub skies: Vec<Sky>,
}

fn clear_sky_index(sky: Sky, n: usize, period: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match sky {
        Sky::Clear => vec![1.0; n],
        Sky::Overcast => {
            // Knots every 15 min, linearly interpolated.
            let knots_per = (900.0 / period).max(1.0) as usize;
            let m = n / knots_per + 2;
            let knots: Vec<f64> = (0..m).map(|_| rng.random_range(0.15..0.35)).collect();
            (0..n)
                .map(|k| {
                    let i = k / knots_per;
                    let f = (k % knots_per) as f64 / knots_per as f64;
                    knots[i] * (1.0 - f) + knots[i + 1] * f
                })
                .collect()
        }
        Sky::PartlyCloudy => {
            let dwell = Exp::new(1.0 / 240.0).expect("positive rate");
            let mut out = Vec::with_capacity(n);
            let mut cloudy = rng.random_bool(0.5);
            while out.len() < n {
                let len = ((dwell.sample(rng) / period).ceil() as usize).max(1);
                let level = if cloudy {
                    rng.random_range(0.25..0.7)
                } else {
                    rng.random_range(0.95..1.05)
                };
                out.extend(std::iter::repeat_n(level, len.min(n - out.len())));
                cloudy = !cloudy;
            }
            out
        }
    }
}

/// Greedy self-consumption: every actuation step the battery absorbs the
/// previous step's average surplus or covers its average deficit, within the
/// power rating and the energy left. Returns output power and stored energy.
fn battery_flow(spec: &BatterySpec, g: &[f64], l: &[f64], period: u32) -> (Vec<f64>, Vec<f64>) {
    let n = g.len();
    let per_step = (ACTUATION_PERIOD / period) as usize;
    let step_h = f64::from(ACTUATION_PERIOD) / 3600.0;
    let dt_h = f64::from(period) / 3600.0;
    let mut energy = spec.initial_soc * spec.energy_kwh;
    let mut out = vec![0.0; n];
    let mut stored = vec![0.0; n];
    let mut surplus = 0.0f64;
    for start in (0..n).step_by(per_step) {
        let end = (start + per_step).min(n);
        let setpoint = if surplus > 0.0 {
            -surplus.min(spec.power_kw).min((spec.energy_kwh - energy) / step_h)
        } else {
            (-surplus).min(spec.power_kw).min(energy / step_h)
        };
        for k in start..end {
            out[k] = setpoint;
            energy = (energy - setpoint * dt_h).clamp(0.0, spec.energy_kwh);
            stored[k] = energy;
        }
        surplus = (start..end).map(|k| g[k] - l[k]).sum::<f64>() / (end - start) as f64;
    }
    (out, stored)
}

fn demand_profile(d: &DemandModel, n: usize, period: u32, days: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let hold = (d.piecewise_period_s / period) as usize;
    let mut l = Vec::with_capacity(n);
    while l.len() < n {
        let level = d.base_kw + d.level_spread_kw * rng.random::<f64>();
        l.extend(std::iter::repeat_n(level, hold.min(n - l.len())));
    }
    if d.inrush_rate_per_day > 0.0 && d.inrush_kw > 0.0 {
        let per_day = (SECONDS_PER_DAY / i64::from(period)) as usize;
        let width = ((d.inrush_duration_s / period) as usize).max(1);
        let count = Poisson::new(d.inrush_rate_per_day).expect("positive rate");
        for day in 0..days {
            let events = count.sample(rng) as usize;
            for _ in 0..events {
                let start = day * per_day + rng.random_range(0..per_day);
                let height = d.inrush_kw * rng.random_range(0.5..1.0);
                for v in l.iter_mut().skip(start).take(width) {
                    *v += height;
                }
            }
        }
    }
    l
}

/// Deterministic for a fixed spec, including the seed.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Scenario, EvalError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let period = spec.period;
    let per_day = (SECONDS_PER_DAY / i64::from(period)) as usize;
    let n = per_day * spec.days;

    let skies: Vec<Sky> = match spec.sky {
        SkyPlan::Fixed(s) => vec![s; spec.days],
        SkyPlan::Mixed => {
            let mut v: Vec<Sky> = (0..spec.days)
                .map(|d| [Sky::PartlyCloudy, Sky::Clear, Sky::Overcast][d % 3])
                .collect();
            v.shuffle(&mut rng);
            v
        }
    };
    let mut index = Vec::with_capacity(n);
    for &sky in &skies {
        index.extend(clear_sky_index(sky, per_day, f64::from(period), &mut rng));
    }
    let offsets: Vec<f64> = (0..spec.days).map(|_| rng.random_range(-3.0..3.0)).collect();

    let mid = |k: usize| spec.start_epoch as f64 + (k as f64 + 0.5) * f64::from(period);
    let ghi_v: Vec<f64> = (0..n)
        .map(|k| clear_sky_ghi(&sun_position(mid(k), &spec.site)) * index[k])
        .collect();
    let t_air_v: Vec<f64> = (0..n)
        .map(|k| {
            let solar_h = (mid(k) / 3600.0 + spec.site.longitude / 15.0).rem_euclid(24.0);
            18.0 + 6.0 * (2.0 * std::f64::consts::PI * (solar_h - 9.0) / 24.0).sin() + offsets[k / per_day]
        })
        .collect();
    let ghi = TimeSeries::new(spec.start_epoch, period, ghi_v, Unit::WPerM2)?;
    let t_air = TimeSeries::new(spec.start_epoch, period, t_air_v, Unit::Celsius)?;

    let plants = build_bank(&ghi, &t_air, &spec.site, &spec.planes, &spec.temperature)?;
    let g: Vec<f64> = (plants.matrix() * DVector::from_column_slice(&spec.true_alpha))
        .iter()
        .map(|v| v / 1000.0)
        .collect();
    let l = demand_profile(&spec.demand, n, period, spec.days, &mut rng);
    let (battery, stored_kwh) = match &spec.battery {
        Some(b) => battery_flow(b, &g, &l, period),
        None => (vec![0.0; n], vec![0.0; n]),
    };
    let noise = Normal::new(0.0, spec.noise_std_kw).map_err(|e| EvalError::Scenario(e.to_string()))?;
    let p: Vec<f64> = (0..n)
        .map(|k| {
            let e = if spec.noise_std_kw > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            l[k] - battery[k] - g[k] + e
        })
        .collect();

    let kw = |v: Vec<f64>| TimeSeries::new(spec.start_epoch, period, v, Unit::Kw);
    Ok(Scenario {
        p: kw(p)?,
        ghi,
        t_air,
        g_true: kw(g)?,
        l_true: kw(l)?,
        battery: kw(battery)?,
        stored_kwh,
        skies,
    })
}

/// Inputs of a cross-validated evaluation on a common base grid.
#[derive(Debug, Clone)]
pub struct CvData {
    pub p: TimeSeries,
    pub g_true: TimeSeries,
    pub bank: PlaneBank,
    /// Installed capacity, kWp.
    pub capacity_kwp: f64,
    pub fold_seed: u64,
}

impl CvData {
    pub fn new(p: TimeSeries, g_true: TimeSeries, bank: PlaneBank, capacity_kwp: f64, fold_seed: u64) -> Result<Self, EvalError> {
        if !p.same_grid(&g_true) || !bank.matches_grid(&p) {
            return Err(EvalError::Alignment);
        }
        if !(capacity_kwp > 0.0) {
            return Err(EvalError::Capacity(capacity_kwp));
        }
        Ok(Self {
            p,
            g_true,
            bank,
            capacity_kwp,
            fold_seed,
        })
    }

    /// A scenario against a bank built from its own GHI and air temperature.
    pub fn from_scenario(s: &Scenario, spec: &ScenarioSpec, planes: &[PlaneConfig]) -> Result<Self, EvalError> {
        let bank = build_bank(&s.ghi, &s.t_air, &spec.site, planes, &spec.temperature)?;
        Self::new(s.p.clone(), s.g_true.clone(), bank, spec.total_capacity(), spec.seed)
    }

    /// The flow with only `fraction` of the generation present:
    /// `P_f = P + (1 − f)·G`, with `G` and the capacity scaled by `f`.
    pub fn with_penetration(&self, fraction: f64) -> Result<Self, EvalError> {
        let p: Vec<f64> = self
            .p
            .values()
            .iter()
            .zip(self.g_true.values())
            .map(|(p, g)| p + (1.0 - fraction) * g)
            .collect();
        Self::new(
            self.p.with_values(p, Unit::Kw),
            self.g_true.scaled(fraction),
            self.bank.clone(),
            self.capacity_kwp * fraction,
            self.fold_seed,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
}

/// `None` for an empty slice.
pub fn stats(values: &[f64]) -> Option<Stats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    Some(Stats {
        min: v[0],
        max: v[n - 1],
        mean: v.iter().sum::<f64>() / n as f64,
        median,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub resolution: u32,
    /// Index into the parameter grid.
    pub point: usize,
    pub params: MethodParams,
    pub fold: usize,
    pub metrics: Option<Metrics>,
    pub converged: bool,
    pub error: Option<String>,
    pub fit_seconds: f64,
    /// Reconstruction identity failures on the test days.
    pub identity_violations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub resolution: u32,
    /// Over grid points of the fold-mean nRMSE.
    pub nrmse: Option<Stats>,
    pub points: usize,
    /// Grid points with at least one failed fold.
    pub failed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SummaryRow>,
    pub folds: DailyFoldPlan,
    /// Every test day was disjoint from its training days.
    pub folds_disjoint: bool,
}

impl SweepResult {
    /// Fold-mean nRMSE of each fully successful grid point.
    pub fn point_means(&self, method: Method, resolution: u32) -> Vec<(usize, f64)> {
        let mut points: Vec<usize> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.resolution == resolution)
            .map(|r| r.point)
            .collect();
        points.sort_unstable();
        points.dedup();
        points
            .into_iter()
            .filter_map(|pt| {
                let rows: Vec<&SweepRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.method == method && r.resolution == resolution && r.point == pt)
                    .collect();
                let vals: Option<Vec<f64>> = rows.iter().map(|r| r.metrics.map(|m| m.nrmse)).collect();
                vals.map(|v| (pt, v.iter().sum::<f64>() / v.len() as f64))
            })
            .collect()
    }

    /// Grid point with the lowest fold-mean nRMSE for `method` at any resolution.
    pub fn best(&self, method: Method) -> Option<(MethodParams, f64)> {
        let mut resolutions: Vec<u32> = self.rows.iter().filter(|r| r.method == method).map(|r| r.resolution).collect();
        resolutions.sort_unstable();
        resolutions.dedup();
        resolutions
            .into_iter()
            .flat_map(|res| {
                self.point_means(method, res).into_iter().map(move |(pt, m)| (res, pt, m))
            })
            .min_by(|a, b| a.2.total_cmp(&b.2))
            .and_then(|(res, pt, m)| {
                self.rows
                    .iter()
                    .find(|r| r.method == method && r.resolution == res && r.point == pt)
                    .map(|r| (r.params.clone(), m))
            })
    }

    /// Fold-mean metrics of a single-point run.
    pub fn mean_metrics(&self, method: Method) -> Option<Metrics> {
        let ms: Option<Vec<Metrics>> = self.rows.iter().filter(|r| r.method == method).map(|r| r.metrics).collect();
        let ms = ms?;
        if ms.is_empty() {
            return None;
        }
        let n = ms.len() as f64;
        Some(Metrics {
            nrmse: ms.iter().map(|m| m.nrmse).sum::<f64>() / n,
            nmae: ms.iter().map(|m| m.nmae).sum::<f64>() / n,
            nme: ms.iter().map(|m| m.nme).sum::<f64>() / n,
            normalizer_g: ms[0].normalizer_g,
        })
    }
}

/// Days in `days` of the day ranges, joined into one gap-free series that
/// starts at the first selected day.
fn join_days(s: &TimeSeries, ranges: &[Range<usize>], days: &[usize]) -> TimeSeries {
    let values: Vec<f64> = days.iter().flat_map(|&d| s.values()[ranges[d].clone()].iter().copied()).collect();
    let start = s.timestamp(ranges[days[0]].start);
    TimeSeries::new(start, s.period(), values, s.unit()).expect("valid subset")
}

fn join_bank(b: &PlaneBank, ranges: &[Range<usize>], days: &[usize]) -> PlaneBank {
    let cols: Vec<Vec<f64>> = (0..b.num_planes())
        .map(|j| days.iter().flat_map(|&d| b.plane(j)[ranges[d].clone()].iter().copied()).collect())
        .collect();
    let start = b.start_epoch() + ranges[days[0]].start as i64 * i64::from(b.period());
    PlaneBank::from_columns(b.planes().to_vec(), &cols, start, b.period()).expect("valid subset")
}

struct Resampled {
    p: TimeSeries,
    g: TimeSeries,
    bank: PlaneBank,
    days: Vec<Range<usize>>,
}

fn resample(data: &CvData, period: u32) -> Result<Resampled, EvalError> {
    let p = resample_average(&data.p, period)?;
    let g = resample_average(&data.g_true, period)?;
    let bank = data.bank.resample_average(period)?;
    let days = p.day_ranges();
    Ok(Resampled { p, g, bank, days })
}

fn run_fold(data: &CvData, r: &Resampled, params: &MethodParams, plan: &DailyFoldPlan, fold: usize) -> SweepRow {
    let (train, test) = plan.split(fold);
    let started = Instant::now();
    let mut row = SweepRow {
        method: params.method,
        resolution: params.sampling_period,
        point: 0,
        params: params.clone(),
        fold,
        metrics: None,
        converged: false,
        error: None,
        fit_seconds: 0.0,
        identity_violations: 0,
    };
    let p_train = join_days(&r.p, &r.days, &train);
    let b_train = join_bank(&r.bank, &r.days, &train);
    let trained = fit(&p_train, &b_train, params);
    row.fit_seconds = started.elapsed().as_secs_f64();
    let trained = match trained {
        Ok(f) => f,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    row.converged = trained.report.converged;
    let mut errors = Vec::new();
    for &d in &test {
        let rng = r.days[d].clone();
        let start = r.p.timestamp(rng.start);
        let p = TimeSeries::new(start, r.p.period(), r.p.values()[rng.clone()].to_vec(), Unit::Kw).expect("day");
        let bank = r.bank.slice(rng.clone());
        match disaggregate(&p, &trained.alpha, &bank) {
            Ok(res) => {
                row.identity_violations += res.identity_violations;
                errors.extend(r.g.values()[rng].iter().zip(res.g_hat.values()).map(|(a, b)| a - b));
            }
            Err(e) => {
                row.error = Some(e.to_string());
                return row;
            }
        }
    }
    match metrics_from_errors(&errors, data.capacity_kwp) {
        Ok(m) => row.metrics = Some(m),
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Three-fold cross-validation of every grid point at every resolution: one
/// fold of whole days trains, the other two test. Grid points run in parallel.
pub fn run_cv(data: &CvData, grid: &[MethodParams], resolutions: &[u32]) -> Result<SweepResult, EvalError> {
    let base_days = data.p.day_ranges();
    let plan = make_folds(base_days.len(), data.fold_seed)?;
    let folds_disjoint = (0..3).all(|i| {
        let (train, test) = plan.split(i);
        train.iter().all(|d| !test.contains(d))
    });
    if !folds_disjoint {
        return Err(EvalError::Scenario("fold plan reuses a training day for testing".into()));
    }

    let resampled: Vec<(u32, Resampled)> = resolutions
        .iter()
        .map(|&res| resample(data, res).map(|r| (res, r)))
        .collect::<Result<_, _>>()?;
    for (_, r) in &resampled {
        if r.days.len() != base_days.len() {
            return Err(EvalError::Scenario("resampling changed the number of whole days".into()));
        }
    }

    // A grid point invalid at some resolution (a band above Nyquist) is
    // skipped there rather than counted as a failure.
    let valid = |ri: usize, pi: usize| {
        let mut p = grid[pi].clone();
        p.sampling_period = resampled[ri].0;
        p.validate().is_ok()
    };
    let jobs: Vec<(usize, usize, usize)> = (0..resampled.len())
        .flat_map(|ri| (0..grid.len()).filter(move |&pi| valid(ri, pi)).flat_map(move |pi| (0..3).map(move |f| (ri, pi, f))))
        .collect();
    let rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|&(ri, pi, f)| {
            let (res, r) = &resampled[ri];
            let mut params = grid[pi].clone();
            params.sampling_period = *res;
            let mut row = run_fold(data, r, &params, &plan, f);
            row.point = pi;
            row
        })
        .collect();

    let mut result = SweepResult {
        rows,
        summary: Vec::new(),
        folds: plan,
        folds_disjoint,
    };
    let mut methods: Vec<Method> = grid.iter().map(|g| g.method).collect();
    methods.sort_unstable();
    methods.dedup();
    for &m in &methods {
        for (ri, &res) in resolutions.iter().enumerate() {
            let points = (0..grid.len()).filter(|&pi| grid[pi].method == m && valid(ri, pi)).count();
            let means = result.point_means(m, res);
            result.summary.push(SummaryRow {
                method: m,
                resolution: res,
                nrmse: stats(&means.iter().map(|x| x.1).collect::<Vec<_>>()),
                points,
                failed: points - means.len(),
            });
        }
    }
    Ok(result)
}

/// Parameter grid swept for `method`; the sampling period is set per
/// resolution by the sweep.
pub fn default_grid(method: Method) -> Vec<MethodParams> {
    let base = MethodParams::new(method, RESOLUTIONS[0]);
    match method {
        Method::A => vec![base],
        Method::B => [0.1, 1.0, 10.0, 100.0]
            .iter()
            .map(|&lambda| MethodParams { lambda, ..base.clone() })
            .collect(),
        Method::C => [2, 5, 10, 20, 50].iter().map(|&c| MethodParams { c, ..base.clone() }).collect(),
        Method::D => {
            let mut g = Vec::new();
            for f_low in [1.0 / 21600.0, 1.0 / 7200.0, 1.0 / 1800.0, 1.0 / 600.0] {
                for f_high in [1.0 / 3600.0, 1.0 / 1200.0, 1.0 / 300.0, 1.0 / 60.0] {
                    if f_low < f_high {
                        g.push(MethodParams {
                            f_low,
                            f_high,
                            ..base.clone()
                        });
                    }
                }
            }
            g
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PenetrationRow {
    pub method: Method,
    pub fraction: f64,
    pub resolution: u32,
    /// Fold means; `None` when a fold failed.
    pub metrics: Option<Metrics>,
}

pub const PENETRATION_FRACTIONS: [f64; 3] = [1.0, 0.5, 0.25];

/// Re-runs each method's parameters with the generation scaled by each
/// fraction. The fraction-1 rows equal the plain cross-validation.
pub fn penetration_experiment(
    data: &CvData,
    params: &[MethodParams],
    fractions: &[f64],
) -> Result<Vec<PenetrationRow>, EvalError> {
    let mut out = Vec::new();
    for &f in fractions {
        let scaled = data.with_penetration(f)?;
        let rows: Vec<Vec<PenetrationRow>> = params
            .par_iter()
            .map(|pr| {
                run_cv(&scaled, std::slice::from_ref(pr), &[pr.sampling_period]).map(|sweep| {
                    vec![PenetrationRow {
                        method: pr.method,
                        fraction: f,
                        resolution: pr.sampling_period,
                        metrics: sweep.mean_metrics(pr.method),
                    }]
                })
            })
            .collect::<Result<_, _>>()?;
        out.extend(rows.into_iter().flatten());
    }
    Ok(out)
}

fn header(out: &mut impl Write, comment: Option<&str>) -> std::io::Result<()> {
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

/// One row per method × resolution × grid point × fold.
pub fn write_sweep_csv(mut out: impl Write, result: &SweepResult, comment: Option<&str>) -> std::io::Result<()> {
    header(&mut out, comment)?;
    writeln!(
        out,
        "method,resolution_s,point,lambda,c,f_low_hz,f_high_hz,fold,nrmse,nmae,nme,converged,fit_s,identity_violations,error"
    )?;
    for r in &result.rows {
        let m = r.metrics;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{:.3},{},{}",
            r.method,
            r.resolution,
            r.point,
            r.params.lambda,
            r.params.c,
            r.params.f_low,
            r.params.f_high,
            r.fold,
            opt(m.map(|m| m.nrmse)),
            opt(m.map(|m| m.nmae)),
            opt(m.map(|m| m.nme)),
            r.converged,
            r.fit_seconds,
            r.identity_violations,
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        )?;
    }
    Ok(())
}

/// nRMSE statistics per method and resolution.
pub fn write_summary_csv(mut out: impl Write, result: &SweepResult, comment: Option<&str>) -> std::io::Result<()> {
    header(&mut out, comment)?;
    writeln!(out, "method,resolution_s,min,max,mean,median,points,failed")?;
    for s in &result.summary {
        let st = s.nrmse;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.method,
            s.resolution,
            opt(st.map(|x| x.min)),
            opt(st.map(|x| x.max)),
            opt(st.map(|x| x.mean)),
            opt(st.map(|x| x.median)),
            s.points,
            s.failed
        )?;
    }
    Ok(())
}

pub fn write_penetration_csv(mut out: impl Write, rows: &[PenetrationRow], comment: Option<&str>) -> std::io::Result<()> {
    header(&mut out, comment)?;
    writeln!(out, "method,fraction,resolution_s,nrmse,nmae,nme")?;
    for r in rows {
        let m = r.metrics;
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.method,
            r.fraction,
            r.resolution,
            opt(m.map(|m| m.nrmse)),
            opt(m.map(|m| m.nmae)),
            opt(m.map(|m| m.nme))
        )?;
    }
    Ok(())
}
