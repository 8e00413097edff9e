//! Bisquare M-estimation by iteratively reweighted least squares.
//!
//! The scale is fixed from the residuals of an L1 start, which makes every
//! reweighted step a majorize-minimize step, so the robust objective never
//! increases.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::lad::solve_lad;
use super::nnls::nnls;
use super::{OptimError, ScaledDesign, SolverReport};

pub const DEFAULT_TUNING: f64 = 4.685;
/// Consistency factor of the median absolute deviation under normal noise.
const MAD_NORMAL: f64 = 0.6745;

/// Weight for a residual already divided by `tuning · scale`.
pub fn bisquare_weight(u: f64) -> f64 {
    if u.abs() <= 1.0 {
        let v = 1.0 - u * u;
        v * v
    } else {
        0.0
    }
}

/// Bisquare loss of a residual already divided by `tuning · scale`, normalized
/// to saturate at 1.
pub fn bisquare_rho(u: f64) -> f64 {
    if u.abs() <= 1.0 {
        1.0 - (1.0 - u * u).powi(3)
    } else {
        1.0
    }
}

#[derive(Debug, Clone)]
pub struct IrlsFit {
    pub alpha: Vec<f64>,
    /// Residual scale used for the weights.
    pub scale: f64,
    /// Robust objective after the start and after each iteration.
    pub objective_trace: Vec<f64>,
    pub report: SolverReport,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn robust_objective(r: &DVector<f64>, cs: f64) -> f64 {
    r.iter().map(|v| bisquare_rho(v / cs)).sum()
}

pub fn irls_bisquare(
    x: &DMatrix<f64>,
    y: &[f64],
    tuning: f64,
    nonneg: bool,
    tol: f64,
    max_iter: usize,
) -> Result<IrlsFit, OptimError> {
    let started = Instant::now();
    let (k, j) = x.shape();
    if y.len() != k {
        return Err(OptimError::Dimension(format!("X has {k} rows, y has {}", y.len())));
    }
    if k < j || j == 0 {
        return Err(OptimError::Dimension(format!("need rows ≥ columns, got {k}×{j}")));
    }
    if !(tuning > 0.0) {
        return Err(OptimError::Dimension(format!("tuning {tuning} must be positive")));
    }
    let design = ScaledDesign::new(x);
    let xs = &design.x;
    let j = xs.ncols();
    let yv = DVector::from_column_slice(y);

    if j == 0 {
        return Err(OptimError::Dimension("all design columns are zero".into()));
    }
    let start = solve_lad(xs, y, nonneg, 1e-10)?;
    let mut a = DVector::from_vec(start.alpha);
    let mut r = &yv - xs * &a;

    let mut abs_dev: Vec<f64> = r.iter().copied().collect();
    let med = median(&mut abs_dev.clone());
    abs_dev.iter_mut().for_each(|v| *v = (*v - med).abs());
    let rms = (yv.norm_squared() / k as f64).sqrt();
    let floor = f64::EPSILON.sqrt() * rms;
    let scale = (median(&mut abs_dev) / MAD_NORMAL).max(floor);
    if !(scale > 0.0) {
        // y ≡ 0: the zero fit is exact.
        let report = SolverReport {
            converged: true,
            degenerate: true,
            wall_time_s: started.elapsed().as_secs_f64(),
            ..SolverReport::default()
        };
        return Ok(IrlsFit {
            alpha: vec![0.0; x.ncols()],
            scale: 0.0,
            objective_trace: vec![0.0],
            report,
        });
    }
    let cs = tuning * scale;
    let mut trace = vec![robust_objective(&r, cs)];

    let mut converged = false;
    let mut iterations = 0;
    let mut last_change = f64::INFINITY;
    while iterations < max_iter {
        iterations += 1;
        let w: Vec<f64> = r.iter().map(|v| bisquare_weight(v / cs)).collect();
        if w.iter().all(|&v| v == 0.0) {
            return Err(OptimError::DegenerateWeights);
        }
        let mut xw = xs.clone();
        let mut yw = vec![0.0; k];
        for i in 0..k {
            let sw = w[i].sqrt();
            xw.row_mut(i).scale_mut(sw);
            yw[i] = sw * y[i];
        }
        let next = if nonneg {
            DVector::from_vec(nnls(&xw, &yw)?.0)
        } else {
            let svd = xw.svd(true, true);
            svd.solve(&DVector::from_vec(yw), 1e-14).map_err(|_| OptimError::Singular)?
        };
        let change = (&next - &a).norm();
        a = next;
        r = &yv - xs * &a;
        let obj = robust_objective(&r, cs);
        let prev = *trace.last().unwrap();
        if obj > prev + 1e-9 * prev.max(1.0) {
            return Err(OptimError::Invariant(format!(
                "robust objective rose from {prev} to {obj} at iteration {iterations}"
            )));
        }
        trace.push(obj);
        last_change = change;
        if change <= tol * (1.0 + a.norm()) {
            converged = true;
            break;
        }
    }

    let alpha = design.expand(a.as_slice());
    let report = SolverReport {
        objective: *trace.last().unwrap() * cs * cs / 6.0,
        iterations,
        primal_residual: last_change,
        converged,
        wall_time_s: started.elapsed().as_secs_f64(),
        ..SolverReport::default()
    };
    if !converged {
        return Err(OptimError::NoConvergence { x: alpha, report });
    }
    Ok(IrlsFit {
        alpha,
        scale,
        objective_trace: trace,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(k, 3, |i, c| ((i * (c + 3)) as f64 * 0.37).sin().abs() + 0.1 * c as f64)
    }

    #[test]
    fn exact_data() {
        let x = design(60);
        let a0 = DVector::from_vec(vec![1.5, 0.0, 2.0]);
        let y = &x * &a0;
        let fit = irls_bisquare(&x, y.as_slice(), DEFAULT_TUNING, true, 1e-10, 50).unwrap();
        for i in 0..3 {
            assert!((fit.alpha[i] - a0[i]).abs() < 1e-8, "{:?}", fit.alpha);
        }
        assert!(fit.report.iterations <= 2);
    }

    #[test]
    fn weights() {
        assert_eq!(bisquare_weight(0.0), 1.0);
        assert_eq!(bisquare_weight(1.5), 0.0);
        assert!((bisquare_weight(0.5) - 0.5625).abs() < 1e-15);
        assert_eq!(bisquare_rho(2.0), 1.0);
    }
}
