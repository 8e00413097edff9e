//! Uniformly sampled series, CSV ingestion, resampling and daily fold plans.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Largest fraction of grid points that may be missing from an ingested file.
pub const MAX_MISSING_FRACTION: f64 = 0.05;

/// Default GHI level below which a sample counts as night.
pub const DEFAULT_NIGHT_THRESHOLD: f64 = 5.0;

#[derive(Debug, Error)]
pub enum TimeSeriesError {
    #[error("line {line}: non-uniform time grid ({message})")]
    Grid { line: usize, message: String },
    #[error("{missing} of {expected} samples missing, more than 5% of the grid")]
    TooSparse { missing: usize, expected: usize },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("cannot resample period {from} s to {to} s")]
    Resample { from: u32, to: u32 },
    #[error("at least 3 days are needed for three folds, got {days}")]
    Fold { days: usize },
    #[error("series are not on the same time grid")]
    Alignment,
    #[error("sampling period {0} s must be positive and divide 86400")]
    Period(u32),
    #[error("sample {0} is not finite")]
    NonFinite(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Kw,
    WPerM2,
    Celsius,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Unit::Kw => "kW",
            Unit::WPerM2 => "W/m2",
            Unit::Celsius => "degC",
        })
    }
}

/// A uniformly sampled scalar series. Sample `k` covers
/// `[start_epoch + k*period, start_epoch + (k+1)*period)` in UTC seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    start_epoch: i64,
    period: u32,
    values: Vec<f64>,
    unit: Unit,
}

impl TimeSeries {
    pub fn new(
        start_epoch: i64,
        period: u32,
        values: Vec<f64>,
        unit: Unit,
    ) -> Result<Self, TimeSeriesError> {
        if period == 0 || SECONDS_PER_DAY % i64::from(period) != 0 {
            return Err(TimeSeriesError::Period(period));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(TimeSeriesError::NonFinite(k));
        }
        Ok(Self {
            start_epoch,
            period,
            values,
            unit,
        })
    }

    pub fn start_epoch(&self) -> i64 {
        self.start_epoch
    }

    pub fn period(&self) -> u32 {
        self.period
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Start of sample `k`.
    pub fn timestamp(&self, k: usize) -> i64 {
        self.start_epoch + k as i64 * i64::from(self.period)
    }

    /// Centre of sample `k`, the instant used for solar geometry.
    pub fn midpoint(&self, k: usize) -> f64 {
        self.timestamp(k) as f64 + 0.5 * f64::from(self.period)
    }

    pub fn sample_rate_hz(&self) -> f64 {
        1.0 / f64::from(self.period)
    }

    pub fn samples_per_day(&self) -> usize {
        (SECONDS_PER_DAY / i64::from(self.period)) as usize
    }

    pub fn same_grid(&self, other: &TimeSeries) -> bool {
        self.start_epoch == other.start_epoch
            && self.period == other.period
            && self.len() == other.len()
    }

    pub fn ensure_same_grid(&self, other: &TimeSeries) -> Result<(), TimeSeriesError> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(TimeSeriesError::Alignment)
        }
    }

    /// Same grid, new values. Panics if lengths differ.
    pub fn with_values(&self, values: Vec<f64>, unit: Unit) -> Self {
        assert_eq!(values.len(), self.len(), "length mismatch");
        Self {
            start_epoch: self.start_epoch,
            period: self.period,
            values,
            unit,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.with_values(self.values.iter().map(|v| v * factor).collect(), self.unit)
    }

    /// Index ranges of the complete UTC days covered by the series.
    /// Leading and trailing partial days are skipped.
    pub fn day_ranges(&self) -> Vec<Range<usize>> {
        let period = i64::from(self.period);
        let into_day = self.start_epoch.rem_euclid(SECONDS_PER_DAY);
        let to_midnight = (SECONDS_PER_DAY - into_day) % SECONDS_PER_DAY;
        let first = ((to_midnight + period - 1) / period) as usize;
        let per_day = self.samples_per_day();
        let mut out = Vec::new();
        let mut start = first;
        while start + per_day <= self.len() {
            out.push(start..start + per_day);
            start += per_day;
        }
        out
    }
}

/// Outcome of reading a CSV series.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub series: TimeSeries,
    /// Samples filled by linear interpolation.
    pub repaired: usize,
}

pub fn ingest_csv(path: impl AsRef<Path>, unit: Unit) -> Result<Ingested, TimeSeriesError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, unit)
}

/// Parses `timestamp,value` CSV. Lines starting with `#` are ignored, as is
/// a `timestamp,...` header. Missing grid rows and empty/NaN values are
/// repaired by linear interpolation as long as at most 5% of the grid is
/// affected.
pub fn read_csv(reader: impl Read, unit: Unit) -> Result<Ingested, TimeSeriesError> {
    let mut rows: Vec<(usize, i64, Option<f64>)> = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split(',');
        let ts = fields.next().unwrap_or("").trim();
        if ts.eq_ignore_ascii_case("timestamp") {
            continue;
        }
        let raw = fields.next().ok_or_else(|| TimeSeriesError::Format {
            line: lineno,
            message: "expected `timestamp,value`".into(),
        })?;
        let epoch = parse_timestamp(ts).ok_or_else(|| TimeSeriesError::Format {
            line: lineno,
            message: format!("unparsable timestamp `{ts}`"),
        })?;
        let raw = raw.trim();
        let value = if raw.is_empty() || raw.eq_ignore_ascii_case("nan") {
            None
        } else {
            let v: f64 = raw.parse().map_err(|_| TimeSeriesError::Format {
                line: lineno,
                message: format!("unparsable value `{raw}`"),
            })?;
            v.is_finite().then_some(v)
        };
        rows.push((lineno, epoch, value));
    }
    if rows.len() < 2 {
        return Err(TimeSeriesError::Format {
            line: rows.first().map_or(0, |r| r.0),
            message: "need at least two samples to infer the period".into(),
        });
    }

    let mut period = i64::MAX;
    for w in rows.windows(2) {
        let dt = w[1].1 - w[0].1;
        if dt <= 0 {
            return Err(TimeSeriesError::Grid {
                line: w[1].0,
                message: "timestamps must be strictly increasing".into(),
            });
        }
        period = period.min(dt);
    }
    for w in rows.windows(2) {
        let dt = w[1].1 - w[0].1;
        if dt % period != 0 {
            return Err(TimeSeriesError::Grid {
                line: w[1].0,
                message: format!("step of {dt} s is not a multiple of {period} s"),
            });
        }
    }
    let period_u32 = u32::try_from(period).map_err(|_| TimeSeriesError::Period(u32::MAX))?;

    let start = rows[0].1;
    let expected = ((rows[rows.len() - 1].1 - start) / period) as usize + 1;
    let mut values: Vec<Option<f64>> = vec![None; expected];
    for &(_, epoch, value) in &rows {
        values[((epoch - start) / period) as usize] = value;
    }
    let missing = values.iter().filter(|v| v.is_none()).count();
    if missing > allowed_missing(expected) || missing == expected {
        return Err(TimeSeriesError::TooSparse { missing, expected });
    }
    let filled = interpolate_gaps(&values);
    let series = TimeSeries::new(start, period_u32, filled, unit)?;
    Ok(Ingested {
        series,
        repaired: missing,
    })
}

/// A single missing sample is always tolerated, otherwise 5% of the grid.
fn allowed_missing(expected: usize) -> usize {
    ((MAX_MISSING_FRACTION * expected as f64).floor() as usize).max(1)
}

/// Linear interpolation across interior gaps, nearest value at the edges.
fn interpolate_gaps(values: &[Option<f64>]) -> Vec<f64> {
    let known: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    let mut out = vec![0.0; values.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = match values[i] {
            Some(v) => v,
            None => {
                let right = known.partition_point(|&k| k < i);
                match (right.checked_sub(1).map(|l| known[l]), known.get(right)) {
                    (Some(l), Some(&r)) => {
                        let (vl, vr) = (values[l].unwrap(), values[r].unwrap());
                        vl + (vr - vl) * (i - l) as f64 / (r - l) as f64
                    }
                    (Some(l), None) => values[l].unwrap(),
                    (None, Some(&r)) => values[r].unwrap(),
                    (None, None) => unreachable!("at least one known value"),
                }
            }
        };
    }
    out
}

pub fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
        .map(|naive| naive.and_utc().timestamp())
}

pub fn format_timestamp(epoch: i64) -> String {
    DateTime::<Utc>::from_timestamp(epoch, 0)
        .expect("timestamp in chrono range")
        .to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Writes `timestamp,value` CSV with an optional leading `#` comment line.
pub fn write_csv(
    series: &TimeSeries,
    mut out: impl Write,
    comment: Option<&str>,
) -> std::io::Result<()> {
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "timestamp,value")?;
    for (k, v) in series.values.iter().enumerate() {
        writeln!(out, "{},{}", format_timestamp(series.timestamp(k)), v)?;
    }
    Ok(())
}

/// Block-averages `s` onto a coarser grid. A trailing partial window is dropped.
pub fn resample_average(s: &TimeSeries, new_period: u32) -> Result<TimeSeries, TimeSeriesError> {
    if new_period == 0 || new_period % s.period != 0 {
        return Err(TimeSeriesError::Resample {
            from: s.period,
            to: new_period,
        });
    }
    let ratio = (new_period / s.period) as usize;
    if ratio == 1 {
        return Ok(s.clone());
    }
    let whole = s.len() / ratio;
    if whole * ratio != s.len() {
        log::warn!(
            "resampling {} s -> {} s drops {} trailing samples",
            s.period,
            new_period,
            s.len() - whole * ratio
        );
    }
    let values = s
        .values
        .chunks_exact(ratio)
        .map(|w| w.iter().sum::<f64>() / ratio as f64)
        .collect();
    TimeSeries::new(s.start_epoch, new_period, values, s.unit)
}

/// Whole days dealt into three folds after a seeded shuffle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DailyFoldPlan {
    pub folds: [Vec<usize>; 3],
    pub shuffle_seed: u64,
}

impl DailyFoldPlan {
    /// Days of fold `i` for training, the other two folds for testing.
    pub fn split(&self, i: usize) -> (Vec<usize>, Vec<usize>) {
        let train = self.folds[i].clone();
        let mut test: Vec<usize> = (0..3)
            .filter(|&f| f != i)
            .flat_map(|f| self.folds[f].iter().copied())
            .collect();
        test.sort_unstable();
        (train, test)
    }

    pub fn days(&self) -> usize {
        self.folds.iter().map(Vec::len).sum()
    }
}

pub fn make_folds(days: usize, seed: u64) -> Result<DailyFoldPlan, TimeSeriesError> {
    if days < 3 {
        return Err(TimeSeriesError::Fold { days });
    }
    let mut order: Vec<usize> = (0..days).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds: [Vec<usize>; 3] = Default::default();
    for (i, day) in order.into_iter().enumerate() {
        folds[i % 3].push(day);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(DailyFoldPlan {
        folds,
        shuffle_seed: seed,
    })
}

/// `true` where GHI exceeds `threshold` (daylight).
pub fn mask_night(ghi: &TimeSeries, threshold: f64) -> Vec<bool> {
    debug_assert_eq!(ghi.unit, Unit::WPerM2);
    ghi.values.iter().map(|&g| g > threshold).collect()
}

/// Maximal runs of consecutive `true` entries within `range`.
pub fn true_runs(mask: &[bool], range: Range<usize>) -> Vec<Range<usize>> {
    let mut runs = Vec::new();
    let mut start = None;
    for k in range.clone() {
        match (mask[k], start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                runs.push(s..k);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push(s..range.end);
    }
    runs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv(body: &str) -> Result<Ingested, TimeSeriesError> {
        read_csv(body.as_bytes(), Unit::Kw)
    }

    #[test]
    fn ingests_identity() {
        let got = csv("timestamp,value\n2024-01-01T00:00:00Z,1\n2024-01-01T00:00:10Z,2\n2024-01-01T00:00:20Z,3\n")
            .unwrap();
        assert_eq!(got.series.period(), 10);
        assert_eq!(got.series.values(), &[1.0, 2.0, 3.0]);
        assert_eq!(got.repaired, 0);
    }

    #[test]
    fn fills_missing_row_by_interpolation() {
        // 21 grid points with one missing row keeps us under the 5% cap.
        let mut body = String::from("timestamp,value\n");
        for k in 0..21 {
            if k == 2 {
                continue;
            }
            body.push_str(&format!("{},{}\n", format_timestamp(k * 10), k + 1));
        }
        let got = csv(&body).unwrap();
        assert_eq!(&got.series.values()[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(got.repaired, 1);
    }

    #[test]
    fn single_gap_in_short_file() {
        let got = csv("timestamp,value\n1970-01-01T00:00:00Z,1\n1970-01-01T00:00:10Z,2\n1970-01-01T00:00:30Z,4\n")
            .unwrap();
        assert_eq!(got.series.values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn too_many_gaps() {
        let mut body = String::new();
        for k in [0, 1, 4, 5, 6, 9] {
            body.push_str(&format!("{},{}\n", format_timestamp(k * 10), k));
        }
        let err = csv(&body).unwrap_err();
        assert!(matches!(err, TimeSeriesError::TooSparse { missing: 4, expected: 10 }), "{err}");
    }

    #[test]
    fn rejects_non_uniform_grid() {
        let err = csv("timestamp,value\n1970-01-01T00:00:00Z,1\n1970-01-01T00:00:10Z,2\n1970-01-01T00:00:20Z,3\n1970-01-01T00:00:31Z,4\n")
            .unwrap_err();
        assert!(matches!(err, TimeSeriesError::Grid { line: 5, .. }), "{err}");
    }

    #[test]
    fn reports_line_of_bad_value() {
        let err = csv("timestamp,value\n1970-01-01T00:00:00Z,1\n1970-01-01T00:00:10Z,abc\n").unwrap_err();
        assert!(matches!(err, TimeSeriesError::Format { line: 3, .. }), "{err}");
    }

    #[test]
    fn nan_values_are_repaired() {
        let mut body = String::new();
        for k in 0..40 {
            let v = if k == 7 { "NaN".to_string() } else { format!("{}", 2 * k) };
            body.push_str(&format!("{},{}\n", format_timestamp(k * 60), v));
        }
        let got = csv(&body).unwrap();
        assert_eq!(got.series.values()[7], 14.0);
        assert_eq!(got.repaired, 1);
    }

    #[test]
    fn comment_and_offset_timestamps() {
        let got = csv("# provenance\ntimestamp,value\n2024-01-01T01:00:00+01:00,5\n2024-01-01T00:00:30Z,6\n")
            .unwrap();
        assert_eq!(got.series.start_epoch(), parse_timestamp("2024-01-01T00:00:00Z").unwrap());
        assert_eq!(got.series.period(), 30);
    }

    #[test]
    fn resample_window_means() {
        let s = TimeSeries::new(0, 10, vec![1.0, 2.0, 3.0, 6.0, 6.0, 6.0], Unit::Kw).unwrap();
        let r = resample_average(&s, 30).unwrap();
        assert_eq!(r.values(), &[2.0, 6.0]);
        assert_eq!(r.period(), 30);
        assert_eq!(resample_average(&s, 10).unwrap(), s);
        assert!(matches!(resample_average(&s, 25), Err(TimeSeriesError::Resample { .. })));
    }

    #[test]
    fn resample_day_preserves_mean() {
        let values: Vec<f64> = (0..8640).map(|k| ((k as f64) * 0.013).sin() * 3.0 + 1.0).collect();
        let s = TimeSeries::new(0, 10, values, Unit::Kw).unwrap();
        let r = resample_average(&s, 900).unwrap();
        assert_eq!(r.len(), 96);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(r.values()) - mean(s.values())).abs() < 1e-12);
    }

    #[test]
    fn resample_drops_trailing_partial_window() {
        let s = TimeSeries::new(0, 10, vec![1.0; 7], Unit::Kw).unwrap();
        assert_eq!(resample_average(&s, 30).unwrap().len(), 2);
    }

    #[test]
    fn folds_partition_days() {
        let plan = make_folds(3, 99).unwrap();
        assert!(plan.folds.iter().all(|f| f.len() == 1));
        let plan = make_folds(30, 7).unwrap();
        assert!(plan.folds.iter().all(|f| f.len() == 10));
        assert_eq!(make_folds(30, 7).unwrap(), plan);
        assert!(matches!(make_folds(2, 0), Err(TimeSeriesError::Fold { days: 2 })));
        let (train, test) = plan.split(1);
        assert_eq!(train.len() + test.len(), 30);
        assert!(train.iter().all(|d| !test.contains(d)));
    }

    #[test]
    fn night_mask() {
        let zero = TimeSeries::new(0, 60, vec![0.0; 5], Unit::WPerM2).unwrap();
        assert!(mask_night(&zero, DEFAULT_NIGHT_THRESHOLD).iter().all(|m| !m));
        let g = TimeSeries::new(0, 60, vec![0.0, 5.0, 50.0], Unit::WPerM2).unwrap();
        assert_eq!(mask_night(&g, 20.0), vec![false, false, true]);
    }

    #[test]
    fn day_ranges_skip_partial_days() {
        let s = TimeSeries::new(3600, 3600, vec![0.0; 24 * 3], Unit::Kw).unwrap();
        assert_eq!(s.day_ranges(), vec![23..47, 47..71]);
    }

    #[test]
    fn period_must_divide_day() {
        assert!(matches!(
            TimeSeries::new(0, 7, vec![1.0], Unit::Kw),
            Err(TimeSeriesError::Period(7))
        ));
        assert!(matches!(
            TimeSeries::new(0, 10, vec![1.0, f64::NAN], Unit::Kw),
            Err(TimeSeriesError::NonFinite(1))
        ));
    }

    #[test]
    fn runs_of_mask() {
        let m = [false, true, true, false, true, true, true];
        assert_eq!(true_runs(&m, 0..7), vec![1..3, 4..7]);
        assert_eq!(true_runs(&m, 2..5), vec![2..3, 4..5]);
    }
}
