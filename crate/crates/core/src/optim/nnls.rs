//! Lawson-Hanson active-set nonnegative least squares.

use nalgebra::{DMatrix, DVector};

use super::OptimError;

fn lstsq_subset(x: &DMatrix<f64>, y: &DVector<f64>, passive: &[usize]) -> Result<DVector<f64>, OptimError> {
    let sub = x.select_columns(passive);
    let qr = sub.qr();
    let qty = qr.q().tr_mul(y);
    qr.r().solve_upper_triangular(&qty).ok_or(OptimError::Singular)
}

/// Minimizes `‖y − Xa‖²` over `a ≥ 0`. Returns the solution and the number of
/// outer iterations.
pub fn nnls(x: &DMatrix<f64>, y: &[f64]) -> Result<(Vec<f64>, usize), OptimError> {
    let (k, j) = x.shape();
    if y.len() != k {
        return Err(OptimError::Dimension(format!("X has {k} rows, y has {}", y.len())));
    }
    let y = DVector::from_column_slice(y);
    let mut a = DVector::zeros(j);
    let mut passive = vec![false; j];
    let tol = 10.0 * f64::EPSILON * x.column_iter().map(|c| c.lp_norm(1)).fold(0.0, f64::max) * k.max(j) as f64;
    let max_iter = 3 * j + 10;

    let mut iter = 0;
    loop {
        let grad = x.tr_mul(&(&y - x * &a));
        let candidate = (0..j)
            .filter(|&i| !passive[i] && grad[i] > tol)
            .max_by(|&p, &q| grad[p].partial_cmp(&grad[q]).unwrap());
        let Some(enter) = candidate else { break };
        if iter >= max_iter {
            break;
        }
        iter += 1;
        passive[enter] = true;

        loop {
            let idx: Vec<usize> = (0..j).filter(|&i| passive[i]).collect();
            let s_p = lstsq_subset(x, &y, &idx)?;
            if s_p.iter().all(|&v| v > 0.0) {
                for (r, &i) in idx.iter().enumerate() {
                    a[i] = s_p[r];
                }
                break;
            }
            let mut step = 1.0f64;
            for (r, &i) in idx.iter().enumerate() {
                if s_p[r] <= 0.0 {
                    step = step.min(a[i] / (a[i] - s_p[r]));
                }
            }
            for (r, &i) in idx.iter().enumerate() {
                a[i] += step * (s_p[r] - a[i]);
                if a[i] <= tol.max(0.0) {
                    a[i] = 0.0;
                    passive[i] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    Ok((a.as_slice().to_vec(), iter))
}
