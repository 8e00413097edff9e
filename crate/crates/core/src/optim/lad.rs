//! Least absolute deviations, `minimize Σ|y − Xα|` with optional `α ≥ 0`,
//! solved as an LP whose auxiliary block is eliminated analytically.

use nalgebra::{DMatrix, DVector};

use super::ipm::{solve_ipm, IpmSettings, KktSystem};
use super::{OptimError, ScaledDesign, SolverReport};

struct LadKkt {
    x: DMatrix<f64>,
    q: Vec<f64>,
    h: Vec<f64>,
    nonneg: bool,
    w: Vec<f64>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl LadKkt {
    fn rows(&self) -> usize {
        self.x.nrows()
    }
    fn cols(&self) -> usize {
        self.x.ncols()
    }
}

impl KktSystem for LadKkt {
    fn num_vars(&self) -> usize {
        self.cols() + self.rows()
    }
    fn num_ineq(&self) -> usize {
        2 * self.rows() + if self.nonneg { self.cols() } else { 0 }
    }
    fn num_eq(&self) -> usize {
        0
    }
    fn q(&self) -> &[f64] {
        &self.q
    }
    fn h(&self) -> &[f64] {
        &self.h
    }
    fn b(&self) -> &[f64] {
        &[]
    }
    fn p_mul(&self, x: &[f64]) -> Vec<f64> {
        vec![0.0; x.len()]
    }
    fn g_mul(&self, v: &[f64]) -> Vec<f64> {
        let (n, j) = (self.rows(), self.cols());
        let xa = &self.x * DVector::from_column_slice(&v[..j]);
        let t = &v[j..];
        let mut out = Vec::with_capacity(self.num_ineq());
        out.extend((0..n).map(|k| xa[k] - t[k]));
        out.extend((0..n).map(|k| -xa[k] - t[k]));
        if self.nonneg {
            out.extend(v[..j].iter().map(|a| -a));
        }
        out
    }
    fn gt_mul(&self, z: &[f64]) -> Vec<f64> {
        let (n, j) = (self.rows(), self.cols());
        let (z1, z2) = (&z[..n], &z[n..2 * n]);
        let diff = DVector::from_iterator(n, (0..n).map(|k| z1[k] - z2[k]));
        let mut a = self.x.tr_mul(&diff);
        if self.nonneg {
            for i in 0..j {
                a[i] -= z[2 * n + i];
            }
        }
        let mut out = a.as_slice().to_vec();
        out.extend((0..n).map(|k| -z1[k] - z2[k]));
        out
    }
    fn a_mul(&self, _: &[f64]) -> Vec<f64> {
        Vec::new()
    }
    fn at_mul(&self, _: &[f64]) -> Vec<f64> {
        vec![0.0; self.num_vars()]
    }

    fn factor(&mut self, w: &[f64]) -> Result<(), OptimError> {
        let (n, j) = (self.rows(), self.cols());
        let mut scaled = self.x.clone();
        for k in 0..n {
            let (w1, w2) = (w[k], w[n + k]);
            let e = 4.0 * w1 * w2 / (w1 + w2);
            scaled.row_mut(k).scale_mut(e);
        }
        let mut s = self.x.tr_mul(&scaled);
        if self.nonneg {
            for i in 0..j {
                s[(i, i)] += w[2 * n + i];
            }
        }
        let jitter = 1e-14 * (1.0 + s.diagonal().amax());
        for i in 0..j {
            s[(i, i)] += jitter;
        }
        self.chol = Some(s.cholesky().ok_or(OptimError::Singular)?);
        self.w = w.to_vec();
        Ok(())
    }

    fn solve(&self, r1: &[f64], _: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (n, j) = (self.rows(), self.cols());
        let (w1, w2) = (&self.w[..n], &self.w[n..2 * n]);
        let rt = &r1[j..];
        let ratio: Vec<f64> = (0..n).map(|k| (w2[k] - w1[k]) / (w1[k] + w2[k])).collect();
        let v = DVector::from_iterator(n, (0..n).map(|k| ratio[k] * rt[k]));
        let rhs = DVector::from_column_slice(&r1[..j]) - self.x.tr_mul(&v);
        let da = self.chol.as_ref().expect("factor before solve").solve(&rhs);
        let xda = &self.x * &da;
        let mut out = da.as_slice().to_vec();
        out.extend((0..n).map(|k| (rt[k] - (w2[k] - w1[k]) * xda[k]) / (w1[k] + w2[k])));
        (out, Vec::new())
    }
}

#[derive(Debug, Clone)]
pub struct LadFit {
    pub alpha: Vec<f64>,
    /// `Σ|y − Xα|` in the original units.
    pub objective: f64,
    pub report: SolverReport,
}

pub fn solve_lad(x: &DMatrix<f64>, y: &[f64], nonneg: bool, tol: f64) -> Result<LadFit, OptimError> {
    let n = x.nrows();
    if y.len() != n {
        return Err(OptimError::Dimension(format!("X has {n} rows, y has {}", y.len())));
    }
    if n == 0 || x.ncols() == 0 {
        return Err(OptimError::Dimension("empty design".into()));
    }
    let design = ScaledDesign::new(x);
    let j = design.x.ncols();
    if j == 0 {
        let objective = y.iter().map(|v| v.abs()).sum();
        return Ok(LadFit {
            alpha: vec![0.0; x.ncols()],
            objective,
            report: SolverReport {
                objective,
                converged: true,
                degenerate: true,
                ..SolverReport::default()
            },
        });
    }
    let y_scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let y_scale = if y_scale > 0.0 { y_scale } else { 1.0 };

    let mut h: Vec<f64> = y.iter().map(|v| v / y_scale).collect();
    h.extend(y.iter().map(|v| -v / y_scale));
    if nonneg {
        h.extend(std::iter::repeat_n(0.0, j));
    }
    let mut q = vec![0.0; j];
    q.extend(std::iter::repeat_n(1.0 / n as f64, n));

    let mut kkt = LadKkt {
        x: design.x.clone(),
        q,
        h,
        nonneg,
        w: Vec::new(),
        chol: None,
    };
    let settings = IpmSettings {
        max_iter: 200,
        ..IpmSettings::with_tol(tol)
    };
    let sol = solve_ipm(&mut kkt, &settings)?;
    let scaled: Vec<f64> = sol.x[..j]
        .iter()
        .map(|&a| if nonneg { a.max(0.0) * y_scale } else { a * y_scale })
        .collect();
    let alpha = design.expand(&scaled);
    let fitted = x * DVector::from_column_slice(&alpha);
    let objective = y.iter().zip(fitted.iter()).map(|(a, b)| (a - b).abs()).sum();
    let mut report = sol.report;
    report.objective = objective;
    report.degenerate = y.iter().all(|&v| v == 0.0);
    Ok(LadFit {
        alpha,
        objective,
        report,
    })
}
