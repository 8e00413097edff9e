//! Solar geometry, GHI decomposition, plane-of-array transposition and the
//! temperature-corrected plane bank.
//!
//! Irradiance is handled in W/m² throughout. The cell temperature
//! coefficient `beta` is expressed per W/m².

use std::io::Write;

use chrono::{DateTime, Datelike, Utc};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::timeseries::{format_timestamp, TimeSeries, TimeSeriesError, Unit};

/// Zenith angle at and above which the beam component is forced to zero.
pub const DECOMPOSITION_ZENITH_CUT: f64 = 87.0;

const SOLAR_CONSTANT: f64 = 1366.1;
const DISC_SOLAR_CONSTANT: f64 = 1370.0;

#[derive(Debug, Error)]
pub enum SolarError {
    #[error("invalid site: {0}")]
    Site(String),
    #[error("invalid plane: {0}")]
    Plane(String),
    #[error("plane bank needs at least one plane")]
    EmptyBank,
    #[error("GHI and air temperature are not on the same grid")]
    Alignment,
    #[error("series unit mismatch: expected {expected}, got {got}")]
    Unit { expected: Unit, got: Unit },
    #[error("cannot resample bank period {from} s to {to} s")]
    Resample { from: u32, to: u32 },
}

impl From<TimeSeriesError> for SolarError {
    fn from(_: TimeSeriesError) -> Self {
        SolarError::Alignment
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteConfig {
    /// Degrees north.
    pub latitude: f64,
    /// Degrees east.
    pub longitude: f64,
    /// Meters above sea level.
    #[serde(default)]
    pub altitude: f64,
    #[serde(default = "default_albedo")]
    pub albedo: f64,
}

fn default_albedo() -> f64 {
    0.2
}

impl SiteConfig {
    pub fn new(latitude: f64, longitude: f64, altitude: f64, albedo: f64) -> Result<Self, SolarError> {
        let site = Self {
            latitude,
            longitude,
            altitude,
            albedo,
        };
        site.validate()?;
        Ok(site)
    }

    pub fn validate(&self) -> Result<(), SolarError> {
        if !(-90.0..=90.0).contains(&self.latitude) {
            return Err(SolarError::Site(format!("latitude {} outside [-90, 90]", self.latitude)));
        }
        if !(-180.0..=180.0).contains(&self.longitude) {
            return Err(SolarError::Site(format!(
                "longitude {} outside [-180, 180]",
                self.longitude
            )));
        }
        if !(0.0..=1.0).contains(&self.albedo) {
            return Err(SolarError::Site(format!("albedo {} outside [0, 1]", self.albedo)));
        }
        if !self.altitude.is_finite() {
            return Err(SolarError::Site("altitude must be finite".into()));
        }
        Ok(())
    }

    /// Standard-atmosphere surface pressure in Pa.
    pub fn pressure(&self) -> f64 {
        100.0 * ((44331.514 - self.altitude) / 11880.516).powf(1.0 / 0.1902632)
    }
}

/// Orientation of a candidate PV plane. Azimuth is clockwise from north,
/// 180 = south.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneConfig {
    pub tilt: f64,
    pub azimuth: f64,
}

impl PlaneConfig {
    pub fn new(tilt: f64, azimuth: f64) -> Result<Self, SolarError> {
        let p = Self { tilt, azimuth };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SolarError> {
        if !(0.0..=90.0).contains(&self.tilt) {
            return Err(SolarError::Plane(format!("tilt {} outside [0, 90]", self.tilt)));
        }
        if !(0.0..360.0).contains(&self.azimuth) {
            return Err(SolarError::Plane(format!("azimuth {} outside [0, 360)", self.azimuth)));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("tilt{}_az{}", self.tilt, self.azimuth)
    }
}

/// The 21-plane bank: the horizontal plane followed by tilts 18..72 in 18°
/// steps, each at azimuths 90, 135, 180, 225 and 270.
pub fn default_bank() -> Vec<PlaneConfig> {
    let mut planes = vec![PlaneConfig {
        tilt: 0.0,
        azimuth: 180.0,
    }];
    for tilt in [18.0, 36.0, 54.0, 72.0] {
        for azimuth in [90.0, 135.0, 180.0, 225.0, 270.0] {
            planes.push(PlaneConfig { tilt, azimuth });
        }
    }
    planes
}

/// Stable identifier of a plane geometry list.
pub fn geometry_hash(planes: &[PlaneConfig]) -> String {
    let mut h = Sha256::new();
    for p in planes {
        h.update(p.tilt.to_le_bytes());
        h.update(p.azimuth.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SunPosition {
    /// Geometric zenith angle, degrees.
    pub zenith: f64,
    /// Degrees clockwise from north.
    pub azimuth: f64,
    /// Extraterrestrial normal irradiance, W/m².
    pub extraterrestrial_normal: f64,
}

impl SunPosition {
    pub fn cos_zenith(&self) -> f64 {
        self.zenith.to_radians().cos()
    }
}

/// Sun position from the NOAA low-precision ephemeris (no refraction).
pub fn sun_position(epoch_s: f64, site: &SiteConfig) -> SunPosition {
    let jd = epoch_s / 86_400.0 + 2_440_587.5;
    let t = (jd - 2_451_545.0) / 36_525.0;

    let l0 = (280.46646 + t * (36000.76983 + 0.0003032 * t)).rem_euclid(360.0);
    let m = 357.52911 + t * (35999.05029 - 0.0001537 * t);
    let e = 0.016708634 - t * (0.000042037 + 0.0000001267 * t);
    let m_rad = m.to_radians();
    let center = m_rad.sin() * (1.914602 - t * (0.004817 + 0.000014 * t))
        + (2.0 * m_rad).sin() * (0.019993 - 0.000101 * t)
        + (3.0 * m_rad).sin() * 0.000289;
    let true_long = l0 + center;
    let omega = (125.04 - 1934.136 * t).to_radians();
    let apparent_long = (true_long - 0.00569 - 0.00478 * omega.sin()).to_radians();
    let eps0 = 23.0 + (26.0 + (21.448 - t * (46.815 + t * (0.00059 - t * 0.001813))) / 60.0) / 60.0;
    let eps = (eps0 + 0.00256 * omega.cos()).to_radians();
    let decl = (eps.sin() * apparent_long.sin()).asin();

    let y = (eps / 2.0).tan().powi(2);
    let l0_rad = l0.to_radians();
    let eot_min = 4.0
        * (y * (2.0 * l0_rad).sin() - 2.0 * e * m_rad.sin()
            + 4.0 * e * y * m_rad.sin() * (2.0 * l0_rad).cos()
            - 0.5 * y * y * (4.0 * l0_rad).sin()
            - 1.25 * e * e * (2.0 * m_rad).sin())
        .to_degrees();

    let minutes_utc = epoch_s.rem_euclid(86_400.0) / 60.0;
    let true_solar = minutes_utc + eot_min + 4.0 * site.longitude;
    let hour_angle = (true_solar / 4.0 - 180.0).to_radians();

    let lat = site.latitude.to_radians();
    let cos_z = (lat.sin() * decl.sin() + lat.cos() * decl.cos() * hour_angle.cos()).clamp(-1.0, 1.0);
    let zenith = cos_z.acos().to_degrees();
    let azimuth = (-decl.cos() * hour_angle.sin())
        .atan2(decl.sin() * lat.cos() - decl.cos() * lat.sin() * hour_angle.cos())
        .to_degrees()
        .rem_euclid(360.0);

    SunPosition {
        zenith,
        azimuth,
        extraterrestrial_normal: extraterrestrial_normal(epoch_s),
    }
}

/// Spencer's eccentricity correction applied to the solar constant.
pub fn extraterrestrial_normal(epoch_s: f64) -> f64 {
    let doy = DateTime::<Utc>::from_timestamp(epoch_s.floor() as i64, 0)
        .map_or(1, |d| d.ordinal());
    let b = 2.0 * std::f64::consts::PI * (f64::from(doy) - 1.0) / 365.0;
    SOLAR_CONSTANT
        * (1.00011 + 0.034221 * b.cos() + 0.00128 * b.sin() + 0.000719 * (2.0 * b).cos()
            + 0.000077 * (2.0 * b).sin())
}

/// Haurwitz clear-sky GHI, W/m².
pub fn clear_sky_ghi(sun: &SunPosition) -> f64 {
    let cz = sun.cos_zenith();
    if cz <= 0.0 {
        0.0
    } else {
        1098.0 * cz * (-0.057 / cz).exp()
    }
}

/// Kasten (1966) relative air mass.
fn relative_airmass(zenith: f64) -> f64 {
    1.0 / (zenith.to_radians().cos() + 0.15 * (93.885 - zenith).powf(-1.253))
}

/// DISC beam transmittance `Kn` for clearness index `kt` and air mass `am`.
fn disc_kn(kt: f64, am: f64) -> f64 {
    let (kt2, kt3) = (kt * kt, kt * kt * kt);
    let (a, b, c) = if kt <= 0.6 {
        (
            0.512 - 1.56 * kt + 2.286 * kt2 - 2.222 * kt3,
            0.37 + 0.962 * kt,
            -0.28 + 0.932 * kt - 2.048 * kt2,
        )
    } else {
        (
            -5.743 + 21.77 * kt - 27.49 * kt2 + 11.56 * kt3,
            41.4 - 118.5 * kt + 66.05 * kt2 + 31.9 * kt3,
            -47.01 + 184.2 * kt - 222.0 * kt2 + 73.81 * kt3,
        )
    };
    let knc = 0.866 - 0.122 * am + 0.0121 * am.powi(2) - 0.000653 * am.powi(3) + 1.4e-5 * am.powi(4);
    knc - (a + b * (c * am).exp())
}

/// Splits GHI into (DNI, DHI) with the DISC model at sea-level pressure.
pub fn decompose_ghi(ghi: f64, sun: &SunPosition) -> (f64, f64) {
    decompose_ghi_at(ghi, sun, 101_325.0)
}

/// DISC decomposition at the given surface pressure (Pa). The result always
/// satisfies `dni * cos(zenith) + dhi == ghi` with both parts nonnegative.
pub fn decompose_ghi_at(ghi: f64, sun: &SunPosition, pressure: f64) -> (f64, f64) {
    if ghi <= 0.0 {
        return (0.0, 0.0);
    }
    if sun.zenith >= DECOMPOSITION_ZENITH_CUT {
        return (0.0, ghi);
    }
    let cz = sun.cos_zenith();
    // DISC was fitted against a 1370 W/m² solar constant.
    let i0 = sun.extraterrestrial_normal * DISC_SOLAR_CONSTANT / SOLAR_CONSTANT;
    let kt = (ghi / (i0 * cz.max(0.065))).clamp(0.0, 1.0);
    let am = (relative_airmass(sun.zenith) * pressure / 101_325.0).min(12.0);
    let mut dni = (disc_kn(kt, am) * i0).max(0.0);
    if dni * cz > ghi {
        dni = ghi / cz;
    }
    (dni, ghi - dni * cz)
}

/// Cosine of the incidence angle between the sun and the plane normal.
pub fn cos_incidence(sun: &SunPosition, plane: &PlaneConfig) -> f64 {
    let (z, t) = (sun.zenith.to_radians(), plane.tilt.to_radians());
    z.cos() * t.cos() + z.sin() * t.sin() * (sun.azimuth - plane.azimuth).to_radians().cos()
}

/// Hay-Davies plane-of-array irradiance: beam, circumsolar and isotropic
/// sky diffuse, and ground reflection.
pub fn transpose_hay_davies(
    dni: f64,
    dhi: f64,
    ghi: f64,
    sun: &SunPosition,
    plane: &PlaneConfig,
    site: &SiteConfig,
) -> f64 {
    let cos_aoi = cos_incidence(sun, plane).max(0.0);
    let cos_tilt = plane.tilt.to_radians().cos();
    let rb = cos_aoi / sun.cos_zenith().max(0.01745);
    let anisotropy = dni / sun.extraterrestrial_normal;
    let isotropic = (dhi * (1.0 - anisotropy) * 0.5 * (1.0 + cos_tilt)).max(0.0);
    let circumsolar = (dhi * anisotropy * rb).max(0.0);
    let ground = ghi * site.albedo * 0.5 * (1.0 - cos_tilt);
    (dni * cos_aoi + isotropic + circumsolar + ground).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureModel {
    /// Cell heating per unit irradiance, °C·m²/W.
    pub beta: f64,
    /// Power temperature coefficient, 1/°C.
    pub gamma: f64,
    pub t_ref: f64,
}

impl Default for TemperatureModel {
    fn default() -> Self {
        Self {
            beta: 3.78e-2,
            gamma: -4.3e-3,
            t_ref: 25.0,
        }
    }
}

impl TemperatureModel {
    pub fn validate(&self) -> Result<(), SolarError> {
        if !(self.beta > 0.0 && self.gamma < 0.0 && self.t_ref.is_finite()) {
            return Err(SolarError::Site(format!(
                "temperature model needs beta > 0 and gamma < 0, got beta={} gamma={}",
                self.beta, self.gamma
            )));
        }
        Ok(())
    }

    pub fn cell_temperature(&self, poa: f64, t_air: f64) -> f64 {
        t_air + self.beta * poa
    }
}

/// Scales plane irradiance by the cell-temperature efficiency factor.
pub fn temperature_correct(poa: f64, t_air: f64, model: &TemperatureModel) -> f64 {
    let t_cell = model.cell_temperature(poa, t_air);
    (poa * (1.0 + model.gamma * (t_cell - model.t_ref))).max(0.0)
}

/// Temperature-corrected plane irradiance for every plane and sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneBank {
    planes: Vec<PlaneConfig>,
    /// K x J, column `j` is the series of `planes[j]`.
    irradiance: DMatrix<f64>,
    start_epoch: i64,
    period: u32,
}

impl PlaneBank {
    /// Builds a bank from precomputed columns (one `Vec` per plane).
    pub fn from_columns(
        planes: Vec<PlaneConfig>,
        columns: &[Vec<f64>],
        start_epoch: i64,
        period: u32,
    ) -> Result<Self, SolarError> {
        if planes.is_empty() || planes.len() != columns.len() {
            return Err(SolarError::EmptyBank);
        }
        let k = columns[0].len();
        if columns.iter().any(|c| c.len() != k) {
            return Err(SolarError::Alignment);
        }
        if columns.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SolarError::Plane("bank irradiance must be finite and nonnegative".into()));
        }
        let irradiance = DMatrix::from_fn(k, planes.len(), |r, c| columns[c][r]);
        Ok(Self {
            planes,
            irradiance,
            start_epoch,
            period,
        })
    }

    pub fn planes(&self) -> &[PlaneConfig] {
        &self.planes
    }

    pub fn num_planes(&self) -> usize {
        self.planes.len()
    }

    pub fn len(&self) -> usize {
        self.irradiance.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn start_epoch(&self) -> i64 {
        self.start_epoch
    }

    pub fn period(&self) -> u32 {
        self.period
    }

    /// Irradiance series of plane `j`, W/m².
    pub fn plane(&self, j: usize) -> &[f64] {
        let k = self.len();
        &self.irradiance.as_slice()[j * k..(j + 1) * k]
    }

    /// The K x J matrix in W/m².
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.irradiance
    }

    pub fn geometry_id(&self) -> String {
        geometry_hash(&self.planes)
    }

    pub fn matches_grid(&self, s: &TimeSeries) -> bool {
        s.start_epoch() == self.start_epoch && s.period() == self.period && s.len() == self.len()
    }

    /// Bank restricted to the sample indices in `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> PlaneBank {
        let rows = range.len();
        PlaneBank {
            planes: self.planes.clone(),
            irradiance: self.irradiance.rows(range.start, rows).into_owned(),
            start_epoch: self.start_epoch + range.start as i64 * i64::from(self.period),
            period: self.period,
        }
    }

    /// Block-averages every plane onto a coarser grid, matching
    /// [`crate::timeseries::resample_average`] on the same series.
    pub fn resample_average(&self, new_period: u32) -> Result<PlaneBank, SolarError> {
        if new_period == 0 || new_period % self.period != 0 {
            return Err(SolarError::Resample {
                from: self.period,
                to: new_period,
            });
        }
        let ratio = (new_period / self.period) as usize;
        if ratio == 1 {
            return Ok(self.clone());
        }
        let rows = self.len() / ratio;
        let irradiance = DMatrix::from_fn(rows, self.num_planes(), |r, c| {
            (0..ratio).map(|i| self.irradiance[(r * ratio + i, c)]).sum::<f64>() / ratio as f64
        });
        Ok(PlaneBank {
            planes: self.planes.clone(),
            irradiance,
            start_epoch: self.start_epoch,
            period: new_period,
        })
    }

    /// CSV matrix with one row per sample and one column per plane.
    pub fn write_csv(&self, mut out: impl Write, comment: Option<&str>) -> std::io::Result<()> {
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        let header: Vec<String> = self.planes.iter().map(PlaneConfig::label).collect();
        writeln!(out, "timestamp,{}", header.join(","))?;
        for k in 0..self.len() {
            let ts = format_timestamp(self.start_epoch + k as i64 * i64::from(self.period));
            let row: Vec<String> = (0..self.num_planes())
                .map(|j| format!("{}", self.irradiance[(k, j)]))
                .collect();
            writeln!(out, "{ts},{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Decomposes, transposes and temperature-corrects every GHI sample onto
/// every plane. Solar geometry is evaluated at each sample's midpoint.
pub fn build_bank(
    ghi: &TimeSeries,
    t_air: &TimeSeries,
    site: &SiteConfig,
    planes: &[PlaneConfig],
    model: &TemperatureModel,
) -> Result<PlaneBank, SolarError> {
    if !ghi.same_grid(t_air) {
        return Err(SolarError::Alignment);
    }
    if ghi.unit() != Unit::WPerM2 {
        return Err(SolarError::Unit {
            expected: Unit::WPerM2,
            got: ghi.unit(),
        });
    }
    if planes.is_empty() {
        return Err(SolarError::EmptyBank);
    }
    site.validate()?;
    for p in planes {
        p.validate()?;
    }
    let pressure = site.pressure();
    let k = ghi.len();
    let rows: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let g = ghi.values()[i].max(0.0);
            let t = t_air.values()[i];
            let sun = sun_position(ghi.midpoint(i), site);
            let (dni, dhi) = decompose_ghi_at(g, &sun, pressure);
            planes
                .iter()
                .map(|p| temperature_correct(transpose_hay_davies(dni, dhi, g, &sun, p, site), t, model))
                .collect()
        })
        .collect();
    let irradiance = DMatrix::from_fn(k, planes.len(), |r, c| rows[r][c]);
    Ok(PlaneBank {
        planes: planes.to_vec(),
        irradiance,
        start_epoch: ghi.start_epoch(),
        period: ghi.period(),
    })
}
