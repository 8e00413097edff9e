//! Sixth-order Butterworth band-pass filters as cascaded second-order sections.

use std::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

use crate::timeseries::TimeSeries;

/// Order of the analog low-pass prototype. The band-pass transform doubles it.
const PROTOTYPE_ORDER: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("invalid band: need 0 < f_low ({f_low}) < f_high ({f_high}) < rate/2 ({half})")]
    Design { f_low: f64, f_high: f64, half: f64 },
    #[error("unstable design: pole radius {0}")]
    Unstable(f64),
    #[error("series of {len} samples is shorter than the {padding}-sample edge padding")]
    TooShort { len: usize, padding: usize },
    #[error("series sampled at {series} Hz, filter designed for {filter} Hz")]
    RateMismatch { series: f64, filter: f64 },
}

/// One biquad, `b0 + b1 z^-1 + b2 z^-2` over `1 + a1 z^-1 + a2 z^-2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Section {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Section {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let num = self.b[0] + z_inv * (self.b[1] + z_inv * self.b[2]);
        let den = 1.0 + z_inv * (self.a[0] + z_inv * self.a[1]);
        num / den
    }

    /// Steady-state transposed direct form II state for a unit step input.
    fn step_state(&self) -> [f64; 2] {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        // (I - A^T) zi = b[1..] - a * b0
        let (r0, r1) = (b1 - a1 * b0, b2 - a2 * b0);
        let det = (1.0 + a1) + a2;
        let z0 = (r0 + r1) / det;
        let z1 = r1 - a2 * z0;
        [z0, z1]
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandpassFilter {
    pub f_low: f64,
    pub f_high: f64,
    pub sample_rate: f64,
    pub sections: Vec<Section>,
    pub zero_phase: bool,
    poles: Vec<Complex64>,
}

/// Designs the band-pass by prewarping the cutoffs, transforming an analog
/// Butterworth low-pass prototype and mapping it with the bilinear transform.
pub fn design_bandpass(f_low: f64, f_high: f64, sample_rate: f64) -> Result<BandpassFilter, DspError> {
    let half = sample_rate / 2.0;
    if !(f_low > 0.0 && f_low < f_high && f_high < half && sample_rate.is_finite()) {
        return Err(DspError::Design { f_low, f_high, half });
    }
    let fs2 = 2.0 * sample_rate;
    let w1 = fs2 * (PI * f_low / sample_rate).tan();
    let w2 = fs2 * (PI * f_high / sample_rate).tan();
    let bw = w2 - w1;
    let w0 = (w1 * w2).sqrt();

    let n = PROTOTYPE_ORDER as i32;
    let mut analog = Vec::with_capacity(2 * PROTOTYPE_ORDER);
    for m in (-n + 1..n).step_by(2) {
        let proto = -Complex64::from_polar(1.0, PI * f64::from(m) / (2.0 * f64::from(n)));
        let p = proto * (bw / 2.0);
        let root = (p * p - w0 * w0).sqrt();
        analog.push(p + root);
        analog.push(p - root);
    }
    let poles: Vec<Complex64> = analog.iter().map(|&s| (fs2 + s) / (fs2 - s)).collect();
    let max_radius = poles.iter().map(|p| p.norm()).fold(0.0, f64::max);
    if max_radius >= 1.0 {
        return Err(DspError::Unstable(max_radius));
    }

    let mut sections = pair_poles(&poles)
        .into_iter()
        .map(|a| Section { b: [1.0, 0.0, -1.0], a })
        .collect::<Vec<_>>();

    // Unit gain at the (warped) band centre, spread evenly over the sections.
    let f0 = sample_rate / PI * (w0 / fs2).atan();
    let g = response_of(&sections, f0, sample_rate).norm();
    let per_section = g.powf(-1.0 / sections.len() as f64);
    for s in &mut sections {
        for b in &mut s.b {
            *b *= per_section;
        }
    }

    Ok(BandpassFilter {
        f_low,
        f_high,
        sample_rate,
        sections,
        zero_phase: true,
        poles,
    })
}

/// Denominators `[a1, a2]` from conjugate pairs, real poles paired together.
fn pair_poles(poles: &[Complex64]) -> Vec<[f64; 2]> {
    let scale = poles.iter().map(|p| p.norm()).fold(1.0, f64::max);
    let tol = 1e-12 * scale;
    let mut out = Vec::new();
    let mut reals = Vec::new();
    for p in poles {
        if p.im > tol {
            out.push([-2.0 * p.re, p.norm_sqr()]);
        } else if p.im.abs() <= tol {
            reals.push(p.re);
        }
    }
    reals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    for pair in reals.chunks(2) {
        match *pair {
            [r1, r2] => out.push([-(r1 + r2), r1 * r2]),
            [r] => out.push([-r, 0.0]),
            _ => unreachable!(),
        }
    }
    out
}

fn response_of(sections: &[Section], f: f64, rate: f64) -> Complex64 {
    let z_inv = Complex64::from_polar(1.0, -2.0 * PI * f / rate);
    sections.iter().map(|s| s.response(z_inv)).product()
}

impl BandpassFilter {
    /// Complex response of a single pass at frequency `f` (Hz).
    pub fn response(&self, f: f64) -> Complex64 {
        response_of(&self.sections, f, self.sample_rate)
    }

    /// Magnitude of a single pass.
    pub fn magnitude(&self, f: f64) -> f64 {
        self.response(f).norm()
    }

    pub fn poles(&self) -> &[Complex64] {
        &self.poles
    }

    pub fn causal(mut self) -> Self {
        self.zero_phase = false;
        self
    }

    /// Samples for the slowest mode to decay to 1%.
    pub fn settling_samples(&self) -> usize {
        let r = self.poles.iter().map(|p| p.norm()).fold(0.0, f64::max);
        (100f64.ln() / -r.ln()).ceil().max(1.0) as usize
    }

    /// Odd-reflection padding used by zero-phase filtering.
    pub fn padding(&self) -> usize {
        3 * self.settling_samples()
    }

    /// Causal cascade with optional initial state per section.
    fn run(&self, x: &[f64], init: Option<(&[[f64; 2]], f64)>) -> Vec<f64> {
        let mut state: Vec<[f64; 2]> = match init {
            Some((zi, scale)) => zi.iter().map(|z| [z[0] * scale, z[1] * scale]).collect(),
            None => vec![[0.0; 2]; self.sections.len()],
        };
        let mut y = x.to_vec();
        for (s, z) in self.sections.iter().zip(state.iter_mut()) {
            for v in y.iter_mut() {
                let input = *v;
                let out = s.b[0] * input + z[0];
                z[0] = s.b[1] * input - s.a[0] * out + z[1];
                z[1] = s.b[2] * input - s.a[1] * out;
                *v = out;
            }
        }
        y
    }

    fn step_states(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let zi = s.step_state();
                let out = [zi[0] * scale, zi[1] * scale];
                scale *= s.dc_gain();
                out
            })
            .collect()
    }

    /// Filters a raw sample slice according to `zero_phase`.
    pub fn apply_slice(&self, x: &[f64]) -> Result<Vec<f64>, DspError> {
        if !self.zero_phase {
            return Ok(self.run(x, None));
        }
        let pad = self.padding();
        if x.len() <= pad {
            return Err(DspError::TooShort {
                len: x.len(),
                padding: pad,
            });
        }
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let zi = self.step_states();
        let fwd = self.run(&ext, Some((&zi, ext[0])));
        let mut rev: Vec<f64> = fwd.into_iter().rev().collect();
        let last = rev[0];
        rev = self.run(&rev, Some((&zi, last)));
        rev.reverse();
        Ok(rev[pad..pad + n].to_vec())
    }

    pub fn apply(&self, s: &TimeSeries) -> Result<TimeSeries, DspError> {
        let rate = s.sample_rate_hz();
        if (rate - self.sample_rate).abs() > 1e-9 * self.sample_rate {
            return Err(DspError::RateMismatch {
                series: rate,
                filter: self.sample_rate,
            });
        }
        let y = self.apply_slice(s.values())?;
        Ok(s.with_values(y, s.unit()))
    }
}

/// Converts a period in seconds to a frequency in Hz.
pub fn period_to_hz(period_s: f64) -> f64 {
    1.0 / period_s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::Unit;

    #[test]
    fn cutoffs_at_half_power() {
        let f = design_bandpass(1.0 / 3600.0, 1.0 / 300.0, 0.1).unwrap();
        assert_eq!(f.sections.len(), 3);
        assert!((f.magnitude(f.f_low) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-3);
        assert!((f.magnitude(f.f_high) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-3);
        assert!(f.magnitude(0.0) <= 1e-6);
        assert!(f.magnitude((f.f_low * f.f_high).sqrt()) > 0.99);
        assert!(f.poles().iter().all(|p| p.norm() < 1.0));
    }

    #[test]
    fn wide_band_with_real_poles() {
        let f = design_bandpass(0.001, 0.4, 1.0).unwrap();
        assert_eq!(f.sections.len(), 3);
        assert!((f.magnitude(0.001) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-3);
        assert!((f.magnitude(0.4) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-3);
    }

    #[test]
    fn invalid_bands() {
        assert!(design_bandpass(0.0, 0.1, 1.0).is_err());
        assert!(design_bandpass(0.2, 0.1, 1.0).is_err());
        assert!(design_bandpass(0.1, 0.5, 1.0).is_err());
    }

    #[test]
    fn constant_and_zero_inputs() {
        let f = design_bandpass(0.01, 0.05, 1.0).unwrap();
        let y = f.apply_slice(&vec![3.0; 2000]).unwrap();
        assert!(y.iter().all(|v| v.abs() <= 1e-6 * 3.0), "{:?}", y.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        let z = f.apply_slice(&vec![0.0; 2000]).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn band_centre_sinusoid_keeps_amplitude_and_phase() {
        let f = design_bandpass(0.01, 0.05, 1.0).unwrap();
        let fc = 1.0 / PI * ((2.0 * (PI * 0.01).tan() * 2.0 * (PI * 0.05).tan()).sqrt() / 2.0).atan();
        let x: Vec<f64> = (0..4000).map(|k| (2.0 * PI * fc * k as f64).sin()).collect();
        let y = f.apply_slice(&x).unwrap();
        let amp = y[1000..3000].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((0.99..=1.01).contains(&amp), "{amp}");
    }

    #[test]
    fn too_short() {
        let f = design_bandpass(0.01, 0.05, 1.0).unwrap();
        assert!(matches!(f.apply_slice(&[1.0; 10]), Err(DspError::TooShort { .. })));
    }

    #[test]
    fn rate_mismatch() {
        let f = design_bandpass(0.001, 0.01, 0.1).unwrap();
        let s = TimeSeries::new(0, 60, vec![0.0; 5000], Unit::Kw).unwrap();
        assert!(matches!(f.apply(&s), Err(DspError::RateMismatch { .. })));
    }
}
