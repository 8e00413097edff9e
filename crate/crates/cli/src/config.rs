//! Run configuration: a flat TOML file whose keys carry their units.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pvdisagg::eval::{ScenarioSpec, Sky, SkyPlan};
use pvdisagg::methods::{Method, MethodParams};
use pvdisagg::solar::{default_bank, PlaneConfig, SiteConfig, TemperatureModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Failure;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSection {
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    #[serde(default)]
    pub altitude_m: f64,
    #[serde(default = "default_albedo")]
    pub albedo: f64,
}

fn default_albedo() -> f64 {
    0.2
}

impl Default for SiteSection {
    fn default() -> Self {
        let s = ScenarioSpec::basel_template(0).site;
        Self {
            latitude_deg: s.latitude,
            longitude_deg: s.longitude,
            altitude_m: s.altitude,
            albedo: s.albedo,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSection {
    pub beta_c_m2_per_w: f64,
    pub gamma_per_c: f64,
    pub t_ref_c: f64,
}

impl Default for TemperatureSection {
    fn default() -> Self {
        let t = TemperatureModel::default();
        Self {
            beta_c_m2_per_w: t.beta,
            gamma_per_c: t.gamma,
            t_ref_c: t.t_ref,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSection {
    pub tilt_deg: f64,
    pub azimuth_deg: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputsSection {
    pub flow_csv: Option<PathBuf>,
    pub ghi_csv: Option<PathBuf>,
    pub t_air_csv: Option<PathBuf>,
    /// Measured generation, for sweeps and metrics.
    pub g_true_csv: Option<PathBuf>,
    pub capacity_kwp: Option<f64>,
}

/// Method settings. Unset keys take the library defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    pub name: Option<String>,
    pub period_s: Option<u32>,
    pub lambda_kw: Option<f64>,
    pub c_samples: Option<usize>,
    pub f_low_hz: Option<f64>,
    pub f_high_hz: Option<f64>,
    pub f_low_period_s: Option<f64>,
    pub f_high_period_s: Option<f64>,
    pub irls_tuning: Option<f64>,
    /// Negative disables night masking.
    pub night_threshold_w_m2: Option<f64>,
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub days: Option<usize>,
    pub period_s: Option<u32>,
    pub battery: Option<bool>,
    pub noise_std_kw: Option<f64>,
    /// `mixed`, `clear`, `partly_cloudy` or `overcast`.
    pub sky: Option<String>,
    pub start_epoch_s: Option<i64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub methods: Option<Vec<String>>,
    pub resolutions_s: Option<Vec<u32>>,
    pub lambda_kw: Option<Vec<f64>>,
    pub c_samples: Option<Vec<usize>>,
    pub f_low_hz: Option<Vec<f64>>,
    pub f_high_hz: Option<Vec<f64>>,
    pub penetration: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub site: SiteSection,
    #[serde(default)]
    pub temperature: TemperatureSection,
    /// Empty selects the default 21-plane bank.
    #[serde(default)]
    pub planes: Vec<PlaneSection>,
    #[serde(default)]
    pub inputs: InputsSection,
    #[serde(default)]
    pub method: MethodSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(Failure::input)?;
        let cfg: Self = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
            .map_err(Failure::input)?;
        // Relative input paths resolve against the config's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(cfg.rebase(base))
    }

    fn rebase(mut self, base: &Path) -> Self {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        let i = &mut self.inputs;
        fix(&mut i.flow_csv);
        fix(&mut i.ghi_csv);
        fix(&mut i.t_air_csv);
        fix(&mut i.g_true_csv);
        fix(&mut self.output_dir);
        self
    }

    /// First 16 hex digits of the SHA-256 of the effective configuration.
    /// Where the outputs go does not count.
    pub fn hash(&self) -> String {
        let mut cfg = self.clone();
        cfg.output_dir = None;
        let text = toml::to_string(&cfg).unwrap_or_default();
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn site(&self) -> Result<SiteConfig> {
        let s = &self.site;
        SiteConfig::new(s.latitude_deg, s.longitude_deg, s.altitude_m, s.albedo).map_err(Failure::input)
    }

    pub fn temperature(&self) -> Result<TemperatureModel> {
        let t = &self.temperature;
        let m = TemperatureModel {
            beta: t.beta_c_m2_per_w,
            gamma: t.gamma_per_c,
            t_ref: t.t_ref_c,
        };
        m.validate().map_err(Failure::input)?;
        Ok(m)
    }

    pub fn planes(&self) -> Result<Vec<PlaneConfig>> {
        if self.planes.is_empty() {
            return Ok(default_bank());
        }
        self.planes
            .iter()
            .map(|p| PlaneConfig::new(p.tilt_deg, p.azimuth_deg).map_err(Failure::input))
            .collect()
    }

    /// Method parameters with `period` as the sampling period when the
    /// config leaves it unset.
    pub fn method_params(&self, period: u32) -> Result<MethodParams> {
        let m = &self.method;
        let method: Method = m.name.as_deref().unwrap_or("C").parse().map_err(Failure::input)?;
        let mut p = MethodParams::new(method, m.period_s.unwrap_or(period));
        apply_method_keys(&mut p, m)?;
        p.validate().map_err(Failure::input)?;
        Ok(p)
    }

    pub fn scenario(&self) -> Result<ScenarioSpec> {
        let mut spec = ScenarioSpec::basel_template(self.seed);
        spec.site = self.site()?;
        spec.temperature = self.temperature()?;
        let s = &self.synth;
        if let Some(v) = s.days {
            spec.days = v;
        }
        if let Some(v) = s.period_s {
            spec.period = v;
            // Demand levels hold for a whole number of samples.
            let hold = spec.demand.piecewise_period_s;
            if v > 0 && hold % v != 0 {
                spec.demand.piecewise_period_s = hold.div_ceil(v) * v;
            }
        }
        if let Some(v) = s.noise_std_kw {
            spec.noise_std_kw = v;
        }
        if let Some(v) = s.start_epoch_s {
            spec.start_epoch = v;
        }
        if let Some(sky) = &s.sky {
            spec.sky = match sky.as_str() {
                "mixed" => SkyPlan::Mixed,
                "clear" => SkyPlan::Fixed(Sky::Clear),
                "partly_cloudy" => SkyPlan::Fixed(Sky::PartlyCloudy),
                "overcast" => SkyPlan::Fixed(Sky::Overcast),
                other => return Err(Failure::input_msg(format!("unknown sky {other:?}"))),
            };
        }
        if s.battery.unwrap_or(false) {
            spec = spec.with_battery();
        }
        spec.validate().map_err(Failure::input)?;
        Ok(spec)
    }
}

pub fn apply_method_keys(p: &mut MethodParams, m: &MethodSection) -> Result<()> {
    if let Some(v) = m.lambda_kw {
        p.lambda = v;
    }
    if let Some(v) = m.c_samples {
        p.c = v;
    }
    p.f_low = cutoff(m.f_low_hz, m.f_low_period_s, "f_low")?.unwrap_or(p.f_low);
    p.f_high = cutoff(m.f_high_hz, m.f_high_period_s, "f_high")?.unwrap_or(p.f_high);
    if let Some(v) = m.irls_tuning {
        p.irls_tuning = v;
    }
    if let Some(v) = m.night_threshold_w_m2 {
        p.night_threshold = (v >= 0.0).then_some(v);
    }
    if let Some(v) = m.tol {
        p.tol = v;
    }
    Ok(())
}

/// A cutoff given either in Hz or as a period in seconds.
fn cutoff(hz: Option<f64>, period_s: Option<f64>, name: &str) -> Result<Option<f64>> {
    match (hz, period_s) {
        (Some(_), Some(_)) => Err(Failure::input_msg(format!("give {name} in Hz or as a period, not both"))),
        (Some(f), None) => Ok(Some(f)),
        (None, Some(t)) if t > 0.0 => Ok(Some(1.0 / t)),
        (None, Some(t)) => Err(Failure::input_msg(format!("{name} period {t} s must be positive"))),
        (None, None) => Ok(None),
    }
}
