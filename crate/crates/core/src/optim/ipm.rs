//! Mehrotra predictor-corrector method for
//!
//! ```text
//! minimize ½ xᵀPx + qᵀx   subject to  Gx + s = h,  Ax = b,  s ≥ 0.
//! ```
//!
//! The linear algebra is delegated to a [`KktSystem`], so the same iteration
//! drives dense problems and the structured regressions used by the methods.

use std::time::Instant;

use super::{dot, norm_inf, OptimError, SolverReport};

/// Operator access to problem data plus a factor/solve pair for the reduced
/// Newton system
///
/// ```text
/// (P + GᵀWG) dx + Aᵀ dy = r1
///  A dx               = r2
/// ```
/// with `W = diag(w)`.
pub trait KktSystem {
    fn num_vars(&self) -> usize;
    fn num_ineq(&self) -> usize;
    fn num_eq(&self) -> usize;
    fn q(&self) -> &[f64];
    fn h(&self) -> &[f64];
    fn b(&self) -> &[f64];
    fn p_mul(&self, x: &[f64]) -> Vec<f64>;
    fn g_mul(&self, x: &[f64]) -> Vec<f64>;
    fn gt_mul(&self, z: &[f64]) -> Vec<f64>;
    fn a_mul(&self, x: &[f64]) -> Vec<f64>;
    fn at_mul(&self, y: &[f64]) -> Vec<f64>;
    fn factor(&mut self, w: &[f64]) -> Result<(), OptimError>;
    fn solve(&self, r1: &[f64], r2: &[f64]) -> (Vec<f64>, Vec<f64>);
    /// Constant dropped from the objective; only used to scale the gap test.
    fn objective_offset(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpmSettings {
    /// Residual and gap tolerance, applied as `tol · (1 + scale)`.
    pub tol: f64,
    /// Tolerance on normalized infeasibility certificates.
    pub inf_tol: f64,
    pub max_iter: usize,
    pub step_fraction: f64,
}

impl Default for IpmSettings {
    fn default() -> Self {
        Self {
            tol: super::DEFAULT_TOL,
            inf_tol: 1e-9,
            max_iter: 100,
            step_fraction: 0.99,
        }
    }
}

impl IpmSettings {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct IpmSolution {
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
    pub report: SolverReport,
}

struct Residuals {
    rd: Vec<f64>,
    rp: Vec<f64>,
    rg: Vec<f64>,
    pres: f64,
    dres: f64,
    pobj: f64,
    dobj: f64,
    gap: f64,
}

struct Iterate {
    x: Vec<f64>,
    s: Vec<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
}

fn residuals<K: KktSystem>(k: &K, it: &Iterate) -> Residuals {
    let px = k.p_mul(&it.x);
    let gtz = k.gt_mul(&it.z);
    let aty = k.at_mul(&it.y);
    let rd: Vec<f64> = (0..it.x.len())
        .map(|i| px[i] + k.q()[i] + gtz[i] + aty[i])
        .collect();
    let ax = k.a_mul(&it.x);
    let rp: Vec<f64> = ax.iter().zip(k.b()).map(|(a, b)| a - b).collect();
    let gx = k.g_mul(&it.x);
    let rg: Vec<f64> = (0..it.s.len())
        .map(|i| gx[i] + it.s[i] - k.h()[i])
        .collect();
    let xpx = dot(&it.x, &px);
    let pobj = 0.5 * xpx + dot(k.q(), &it.x);
    let dobj = -0.5 * xpx - dot(k.h(), &it.z) - dot(k.b(), &it.y);
    let pres = (norm_inf(&rp) / (1.0 + norm_inf(k.b()))).max(norm_inf(&rg) / (1.0 + norm_inf(k.h())));
    let dres = norm_inf(&rd) / (1.0 + norm_inf(k.q()));
    let gap = dot(&it.s, &it.z);
    Residuals {
        rd,
        rp,
        rg,
        pres,
        dres,
        pobj,
        dobj,
        gap,
    }
}

/// Largest `a ≤ 1` with `v + a·dv ≥ 0`.
fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, &d)| d < 0.0)
        .map(|(&x, &d)| -x / d)
        .fold(1.0, f64::min)
}

struct Direction {
    dx: Vec<f64>,
    dy: Vec<f64>,
    dz: Vec<f64>,
    ds: Vec<f64>,
}

/// Solves the linearized system
///
/// ```text
/// P dx + Gᵀdz + Aᵀdy = −rd,  A dx = −rp,  G dx + ds = −rg,  Z ds + S dz = −rc
/// ```
fn newton_raw<K: KktSystem>(k: &K, it: &Iterate, rd: &[f64], rp: &[f64], rg: &[f64], rc: &[f64]) -> Direction {
    let m = it.s.len();
    // u = S⁻¹(Z r_g − r_c)
    let u: Vec<f64> = (0..m).map(|i| (it.z[i] * rg[i] - rc[i]) / it.s[i]).collect();
    let gtu = k.gt_mul(&u);
    let r1: Vec<f64> = rd.iter().zip(&gtu).map(|(a, b)| -a - b).collect();
    let r2: Vec<f64> = rp.iter().map(|v| -v).collect();
    let (dx, dy) = k.solve(&r1, &r2);
    let gdx = k.g_mul(&dx);
    let dz: Vec<f64> = (0..m)
        .map(|i| it.z[i] / it.s[i] * gdx[i] + u[i])
        .collect();
    let ds: Vec<f64> = (0..m).map(|i| -rg[i] - gdx[i]).collect();
    Direction { dx, dy, dz, ds }
}

/// Newton direction with refinement against the unreduced system, which
/// recovers accuracy lost to the condition of `P + GᵀWG` near the boundary.
fn newton<K: KktSystem>(k: &K, it: &Iterate, r: &Residuals, rc: &[f64]) -> Direction {
    let m = it.s.len();
    let mut d = newton_raw(k, it, &r.rd, &r.rp, &r.rg, rc);
    for _ in 0..REFINE_STEPS {
        let pdx = k.p_mul(&d.dx);
        let gtdz = k.gt_mul(&d.dz);
        let atdy = k.at_mul(&d.dy);
        let ed: Vec<f64> = (0..d.dx.len()).map(|i| pdx[i] + gtdz[i] + atdy[i] + r.rd[i]).collect();
        let adx = k.a_mul(&d.dx);
        let ep: Vec<f64> = adx.iter().zip(&r.rp).map(|(a, b)| a + b).collect();
        let gdx = k.g_mul(&d.dx);
        let eg: Vec<f64> = (0..m).map(|i| gdx[i] + d.ds[i] + r.rg[i]).collect();
        let ec: Vec<f64> = (0..m)
            .map(|i| it.z[i] * d.ds[i] + it.s[i] * d.dz[i] + rc[i])
            .collect();
        let c = newton_raw(k, it, &ed, &ep, &eg, &ec);
        axpy(&mut d.dx, 1.0, &c.dx);
        axpy(&mut d.dy, 1.0, &c.dy);
        axpy(&mut d.dz, 1.0, &c.dz);
        axpy(&mut d.ds, 1.0, &c.ds);
    }
    d
}

const REFINE_STEPS: usize = 3;

/// Mehrotra's shift of a starting pair into the interior, balanced so that
/// neither side dominates the complementarity product.
fn centre_pair(s: &mut [f64], z: &mut [f64]) {
    if s.is_empty() {
        return;
    }
    let lift = |v: &mut [f64]| {
        let worst = v.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        let d = (-1.5 * worst).max(0.0);
        v.iter_mut().for_each(|x| *x += d);
    };
    lift(s);
    lift(z);
    let sz = dot(s, z);
    let (sum_s, sum_z): (f64, f64) = (s.iter().sum(), z.iter().sum());
    if sz > 0.0 && sum_s > 0.0 && sum_z > 0.0 {
        let ds = 0.5 * sz / sum_z;
        let dz = 0.5 * sz / sum_s;
        s.iter_mut().for_each(|x| *x += ds);
        z.iter_mut().for_each(|x| *x += dz);
    }
    if s.iter().chain(z.iter()).any(|&v| !(v > 0.0)) {
        s.iter_mut().for_each(|x| *x += 1.0);
        z.iter_mut().for_each(|x| *x += 1.0);
    }
}

fn initial_point<K: KktSystem>(k: &mut K) -> Result<Iterate, OptimError> {
    let (n, m) = (k.num_vars(), k.num_ineq());
    k.factor(&vec![1.0; m])?;

    let gth = k.gt_mul(k.h());
    let r1: Vec<f64> = (0..n).map(|i| gth[i] - k.q()[i]).collect();
    let (x, _) = k.solve(&r1, k.b());
    let gx = k.g_mul(&x);
    let mut s: Vec<f64> = (0..m).map(|i| k.h()[i] - gx[i]).collect();

    let r1: Vec<f64> = k.q().iter().map(|v| -v).collect();
    let (xd, y) = k.solve(&r1, &vec![0.0; k.num_eq()]);
    let mut z = k.g_mul(&xd);

    centre_pair(&mut s, &mut z);
    Ok(Iterate { x, s, z, y })
}

/// Iterations without a meaningful merit decrease before the solver gives up.
const STALL_LIMIT: usize = 8;

pub fn solve_ipm<K: KktSystem>(k: &mut K, settings: &IpmSettings) -> Result<IpmSolution, OptimError> {
    let started = Instant::now();
    let m = k.num_ineq();
    let mut it = initial_point(k)?;
    let mut best: Option<(f64, Iterate, SolverReport)> = None;
    let mut stalled = 0;
    let mut gap_mark = f64::INFINITY;

    for iter in 0..=settings.max_iter {
        let r = residuals(k, &it);
        let report = SolverReport {
            objective: r.pobj,
            iterations: iter,
            primal_residual: r.pres,
            dual_residual: r.dres,
            gap: r.gap.max((r.pobj - r.dobj).abs()),
            converged: false,
            wall_time_s: started.elapsed().as_secs_f64(),
            ..SolverReport::default()
        };
        let full_obj = (r.pobj + k.objective_offset()).abs();
        let gap_scale = settings.tol * (1.0 + full_obj);
        if r.pres <= settings.tol && r.dres <= settings.tol && report.gap <= gap_scale {
            return Ok(IpmSolution {
                x: it.x,
                s: it.s,
                z: it.z,
                y: it.y,
                report: SolverReport {
                    converged: true,
                    ..report
                },
            });
        }
        check_certificates(k, &it, settings.inf_tol)?;

        let merit = r.pres.max(r.dres).max(report.gap / (1.0 + full_obj));
        if best.as_ref().is_none_or(|(b, _, _)| merit < *b) {
            let copy = Iterate {
                x: it.x.clone(),
                s: it.s.clone(),
                z: it.z.clone(),
                y: it.y.clone(),
            };
            let improved = best.as_ref().is_none_or(|(b, _, _)| merit < (1.0 - 1e-3) * *b);
            best = Some((merit, copy, report.clone()));
            if improved {
                stalled = 0;
            } else {
                stalled += 1;
            }
        } else {
            stalled += 1;
        }
        // When the optimum is near zero the relative gap can sit still while
        // the absolute gap keeps shrinking; that still counts as progress.
        if report.gap < 0.5 * gap_mark {
            gap_mark = report.gap;
            stalled = 0;
        }
        // Residuals at the rounding floor: further steps only shrink μ.
        if iter == settings.max_iter || stalled >= STALL_LIMIT {
            break;
        }

        let w: Vec<f64> = (0..m).map(|i| it.z[i] / it.s[i]).collect();
        k.factor(&w)?;

        let mu = if m > 0 { r.gap / m as f64 } else { 0.0 };
        let rc: Vec<f64> = (0..m).map(|i| it.s[i] * it.z[i]).collect();
        let aff = newton(k, &it, &r, &rc);
        let a_aff = max_step(&it.s, &aff.ds).min(max_step(&it.z, &aff.dz));
        let sigma = if m > 0 && mu > 0.0 {
            let mu_aff = (0..m)
                .map(|i| (it.s[i] + a_aff * aff.ds[i]) * (it.z[i] + a_aff * aff.dz[i]))
                .sum::<f64>()
                / m as f64;
            (mu_aff / mu).clamp(0.0, 1.0).powi(3)
        } else {
            0.0
        };
        let rc: Vec<f64> = (0..m)
            .map(|i| it.s[i] * it.z[i] + aff.ds[i] * aff.dz[i] - sigma * mu)
            .collect();
        let d = newton(k, &it, &r, &rc);
        let a_max = max_step(&it.s, &d.ds).min(max_step(&it.z, &d.dz));
        let a = if m > 0 {
            (settings.step_fraction * a_max).min(1.0)
        } else {
            1.0
        };
        if a < 1e-14 {
            break;
        }
        axpy(&mut it.x, a, &d.dx);
        axpy(&mut it.y, a, &d.dy);
        axpy(&mut it.z, a, &d.dz);
        axpy(&mut it.s, a, &d.ds);
    }

    let (_, it, mut report) = best.expect("at least one iterate");
    report.wall_time_s = started.elapsed().as_secs_f64();
    Err(OptimError::NoConvergence { x: it.x, report })
}

fn axpy(v: &mut [f64], a: f64, d: &[f64]) {
    v.iter_mut().zip(d).for_each(|(x, dx)| *x += a * dx);
}

fn check_certificates<K: KktSystem>(k: &K, it: &Iterate, tol: f64) -> Result<(), OptimError> {
    let dual_value = -(dot(k.h(), &it.z) + dot(k.b(), &it.y));
    if dual_value > 0.0 {
        let gtz = k.gt_mul(&it.z);
        let aty = k.at_mul(&it.y);
        let r: Vec<f64> = gtz.iter().zip(&aty).map(|(a, b)| a + b).collect();
        if norm_inf(&r) <= tol * dual_value {
            return Err(OptimError::Infeasible);
        }
    }
    let descent = -dot(k.q(), &it.x);
    if descent > 0.0 {
        let gx = k.g_mul(&it.x);
        let gs: Vec<f64> = gx.iter().zip(&it.s).map(|(a, b)| a + b).collect();
        let worst = norm_inf(&k.p_mul(&it.x))
            .max(norm_inf(&k.a_mul(&it.x)))
            .max(norm_inf(&gs));
        if worst <= tol * descent {
            return Err(OptimError::Unbounded);
        }
    }
    Ok(())
}
