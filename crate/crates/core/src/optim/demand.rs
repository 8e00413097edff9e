//! Joint demand/capacity regression
//!
//! ```text
//! minimize ‖P − Bℓ + Mα‖² + β(‖ℓ‖² + ‖α‖²) + λ‖Dℓ‖₁   subject to ℓ ≥ 0, α ≥ 0
//! ```
//!
//! where `B` spreads one demand level per segment over its rows and `D`
//! differences linked neighbouring segments. The demand block of the reduced
//! Newton matrix is tridiagonal, so each step costs `O(S·J²)`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use super::ipm::{solve_ipm, IpmSettings, KktSystem};
use super::{OptimError, ScaledDesign, SolverReport, DEFAULT_BETA_REG};

#[derive(Debug, Clone)]
pub struct DemandProblem {
    /// Net flow per row, kW.
    pub p: Vec<f64>,
    /// Generation per unit capacity, rows × J.
    pub m: DMatrix<f64>,
    /// Consecutive, disjoint row ranges sharing one demand level.
    pub segments: Vec<Range<usize>>,
    /// `linked[i]` couples segments `i` and `i + 1` through the L1 penalty.
    pub linked: Vec<bool>,
    pub lambda: f64,
    pub beta_reg: f64,
}

impl DemandProblem {
    /// Segments of `c` rows within each run; a trailing short segment is kept.
    pub fn segmented(p: Vec<f64>, m: DMatrix<f64>, runs: &[Range<usize>], c: usize, lambda: f64) -> Self {
        let phases = vec![0; runs.len()];
        Self::segmented_with_phase(p, m, runs, &phases, c, lambda)
    }

    /// As [`segmented`](Self::segmented), but run `i` begins `phases[i]` rows
    /// into a segment, so boundaries can follow an outer sample grid. The first
    /// segment of such a run is short.
    pub fn segmented_with_phase(
        p: Vec<f64>,
        m: DMatrix<f64>,
        runs: &[Range<usize>],
        phases: &[usize],
        c: usize,
        lambda: f64,
    ) -> Self {
        let c = c.max(1);
        let mut segments = Vec::new();
        let mut linked = Vec::new();
        for (run, &phase) in runs.iter().zip(phases) {
            let mut start = run.start;
            let first = segments.len();
            let mut len = c - phase % c;
            while start < run.end {
                let end = (start + len).min(run.end);
                len = c;
                if segments.len() > first {
                    linked.push(true);
                } else if !segments.is_empty() {
                    linked.push(false);
                }
                segments.push(start..end);
                start = end;
            }
        }
        Self {
            p,
            m,
            segments,
            linked,
            lambda,
            beta_reg: DEFAULT_BETA_REG,
        }
    }

    fn validate(&self) -> Result<(), OptimError> {
        let k = self.p.len();
        if self.m.nrows() != k {
            return Err(OptimError::Dimension(format!("P has {k} rows, M has {}", self.m.nrows())));
        }
        if self.segments.is_empty() {
            return Err(OptimError::Dimension("empty problem".into()));
        }
        if self.linked.len() + 1 != self.segments.len() {
            return Err(OptimError::Dimension("segment links".into()));
        }
        let mut prev = self.segments[0].start;
        for s in &self.segments {
            if s.start != prev || s.end <= s.start || s.end > k {
                return Err(OptimError::Dimension(format!("bad segment {s:?}")));
            }
            prev = s.end;
        }
        if !(self.lambda >= 0.0) || !(self.beta_reg >= 0.0) {
            return Err(OptimError::Dimension("lambda and beta must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DemandFit {
    pub alpha: Vec<f64>,
    /// Demand per segment, kW.
    pub levels: Vec<f64>,
    /// Demand per row, kW.
    pub l_hat: Vec<f64>,
    /// Unregularized objective in the original units.
    pub objective: f64,
    pub report: SolverReport,
}

/// Symmetric tridiagonal LDLᵀ factorization.
#[derive(Debug, Clone, Default)]
struct Tridiag {
    d: Vec<f64>,
    l: Vec<f64>,
}

impl Tridiag {
    /// Factors `diag(d0) + Σ e_i (δ_i − δ_{i+1})(δ_i − δ_{i+1})ᵀ` with
    /// `d0 > 0` and `e ≥ 0`. Writing each pivot as `e_i + r_i` keeps every
    /// term positive, so huge link weights do not cancel.
    fn factor_chain(d0: &[f64], e: &[f64]) -> Result<Self, OptimError> {
        let n = d0.len();
        let mut d = vec![0.0; n];
        let mut l = vec![0.0; n.saturating_sub(1)];
        let mut r = d0[0];
        for i in 0..n {
            if i > 0 {
                let ep = e[i - 1];
                let rp = r;
                r = d0[i] + if ep > 0.0 { ep * rp / (ep + rp) } else { 0.0 };
            }
            let ei = if i + 1 < n { e[i] } else { 0.0 };
            d[i] = ei + r;
            if !(d[i] > 0.0) || !d[i].is_finite() {
                return Err(OptimError::Singular);
            }
            if i + 1 < n {
                l[i] = -ei / d[i];
            }
        }
        Ok(Self { d, l })
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.d.len();
        for i in 1..n {
            x[i] -= self.l[i - 1] * x[i - 1];
        }
        for i in 0..n {
            x[i] /= self.d[i];
        }
        for i in (0..n - 1).rev() {
            x[i] -= self.l[i] * x[i + 1];
        }
    }
}

struct DemandKkt {
    /// Per-segment column sums of `m`, S × J.
    bm: DMatrix<f64>,
    gram: DMatrix<f64>,
    counts: Vec<f64>,
    segments: Vec<Range<usize>>,
    /// Left segment index of each penalized pair.
    links: Vec<usize>,
    beta: f64,
    q: Vec<f64>,
    h: Vec<f64>,
    w: Vec<f64>,
    tri: Tridiag,
    tinv_c: DMatrix<f64>,
    schur: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    /// `‖P‖²` of the scaled flow.
    offset: f64,
}

impl DemandKkt {
    fn ns(&self) -> usize {
        self.segments.len()
    }
    fn nj(&self) -> usize {
        self.gram.ncols()
    }
    fn nt(&self) -> usize {
        self.links.len()
    }

    fn d_mul(&self, l: &[f64]) -> Vec<f64> {
        self.links.iter().map(|&s| l[s + 1] - l[s]).collect()
    }

    fn dt_mul(&self, v: &[f64], out: &mut [f64]) {
        for (i, &s) in self.links.iter().enumerate() {
            out[s] -= v[i];
            out[s + 1] += v[i];
        }
    }
}

impl KktSystem for DemandKkt {
    fn objective_offset(&self) -> f64 {
        self.offset
    }
    fn num_vars(&self) -> usize {
        self.ns() + self.nj() + self.nt()
    }
    fn num_ineq(&self) -> usize {
        self.ns() + self.nj() + 2 * self.nt()
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
        let (s, j) = (self.ns(), self.nj());
        let l = DVector::from_column_slice(&x[..s]);
        let a = DVector::from_column_slice(&x[s..s + j]);
        let bma = &self.bm * &a;
        let top = (0..s).map(|i| 2.0 * ((self.counts[i] + self.beta) * l[i] - bma[i]));
        let mid = 2.0 * (&self.gram * &a + a * self.beta - self.bm.tr_mul(&l));
        let mut out: Vec<f64> = top.collect();
        out.extend(mid.iter());
        out.extend(std::iter::repeat_n(0.0, self.nt()));
        out
    }

    fn g_mul(&self, x: &[f64]) -> Vec<f64> {
        let (s, j, t) = (self.ns(), self.nj(), self.nt());
        let mut out: Vec<f64> = x[..s + j].iter().map(|v| -v).collect();
        let dl = self.d_mul(&x[..s]);
        let tv = &x[s + j..];
        out.extend((0..t).map(|i| dl[i] - tv[i]));
        out.extend((0..t).map(|i| -dl[i] - tv[i]));
        out
    }

    fn gt_mul(&self, z: &[f64]) -> Vec<f64> {
        let (s, j, t) = (self.ns(), self.nj(), self.nt());
        let mut out: Vec<f64> = z[..s + j].iter().map(|v| -v).collect();
        let (z3, z4) = (&z[s + j..s + j + t], &z[s + j + t..]);
        let diff: Vec<f64> = (0..t).map(|i| z3[i] - z4[i]).collect();
        self.dt_mul(&diff, &mut out[..s]);
        out.extend((0..t).map(|i| -z3[i] - z4[i]));
        out
    }

    fn a_mul(&self, _: &[f64]) -> Vec<f64> {
        Vec::new()
    }
    fn at_mul(&self, _: &[f64]) -> Vec<f64> {
        vec![0.0; self.num_vars()]
    }

    fn factor(&mut self, w: &[f64]) -> Result<(), OptimError> {
        let (s, j, t) = (self.ns(), self.nj(), self.nt());
        let d0: Vec<f64> = (0..s).map(|i| 2.0 * (self.counts[i] + self.beta) + w[i]).collect();
        let mut e = vec![0.0; s.saturating_sub(1)];
        for (i, &seg) in self.links.iter().enumerate() {
            let (w3, w4) = (w[s + j + i], w[s + j + t + i]);
            e[seg] = 4.0 * w3 * w4 / (w3 + w4);
        }
        let tri = Tridiag::factor_chain(&d0, &e)?;

        // T⁻¹C with C = −2·BᵀM
        let mut tinv_c = &self.bm * -2.0;
        for mut col in tinv_c.column_iter_mut() {
            tri.solve_in_place(col.as_mut_slice());
        }
        let mut schur = &self.gram * 2.0 + self.bm.tr_mul(&tinv_c) * 2.0;
        for i in 0..j {
            schur[(i, i)] += 2.0 * self.beta + w[s + i];
        }
        let jitter = 1e-14 * (1.0 + schur.diagonal().amax());
        for i in 0..j {
            schur[(i, i)] += jitter;
        }
        self.schur = Some(schur.cholesky().ok_or(OptimError::Singular)?);
        self.tri = tri;
        self.tinv_c = tinv_c;
        self.w = w.to_vec();
        Ok(())
    }

    fn solve(&self, r1: &[f64], _: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (s, j, t) = (self.ns(), self.nj(), self.nt());
        let (w3, w4) = (&self.w[s + j..s + j + t], &self.w[s + j + t..]);
        let rt = &r1[s + j..];
        let mut rl = r1[..s].to_vec();
        let v: Vec<f64> = (0..t).map(|i| (w4[i] - w3[i]) / (w3[i] + w4[i]) * rt[i]).collect();
        let mut dtv = vec![0.0; s];
        self.dt_mul(&v, &mut dtv);
        rl.iter_mut().zip(&dtv).for_each(|(a, b)| *a -= b);

        let mut tinv_rl = rl.clone();
        self.tri.solve_in_place(&mut tinv_rl);
        // Cᵀ T⁻¹ r = −2 (BᵀM)ᵀ T⁻¹ r
        let ctr = self.bm.tr_mul(&DVector::from_column_slice(&tinv_rl)) * -2.0;
        let ra = DVector::from_column_slice(&r1[s..s + j]) - ctr;
        let da = self.schur.as_ref().expect("factor before solve").solve(&ra);
        let correction = &self.tinv_c * &da;
        let dl: Vec<f64> = (0..s).map(|i| tinv_rl[i] - correction[i]).collect();
        let ddl = self.d_mul(&dl);
        let dt: Vec<f64> = (0..t)
            .map(|i| (rt[i] - (w4[i] - w3[i]) * ddl[i]) / (w3[i] + w4[i]))
            .collect();
        let mut out = dl;
        out.extend(da.iter());
        out.extend(dt);
        (out, Vec::new())
    }
}

/// Within-segment scatter of `m` rows, the capacity block of `SᵀS` after
/// eliminating the demand levels, with an optional ridge.
fn reduced_hessian(gram: &DMatrix<f64>, bm: &DMatrix<f64>, counts: &[f64], beta: f64) -> DMatrix<f64> {
    let mut q = gram.clone();
    for (i, row) in bm.row_iter().enumerate() {
        let r = row.transpose();
        q -= &r * r.transpose() / (counts[i] + beta);
    }
    for i in 0..q.nrows() {
        q[(i, i)] += beta;
    }
    q
}

/// Scaled-space data shared by the objective and the polishing step.
#[derive(Clone, Copy)]
struct Scaled<'a> {
    bm: &'a DMatrix<f64>,
    bp: &'a [f64],
    gram: &'a DMatrix<f64>,
    counts: &'a [f64],
    /// `‖P‖²`, `MᵀP`.
    pp: f64,
    mp: &'a DVector<f64>,
    links: &'a [usize],
    lambda: f64,
    beta: f64,
}

impl Scaled<'_> {
    /// Full regularized objective at levels `l` and capacities `a`.
    fn objective(&self, l: &[f64], a: &DVector<f64>) -> f64 {
        let bma = self.bm * a;
        // ‖P − Bℓ + Mα‖² expanded over segment sums.
        let mut v = self.pp + a.dot(&(self.gram * a)) + 2.0 * a.dot(self.mp);
        for i in 0..l.len() {
            v += self.counts[i] * l[i] * l[i] - 2.0 * l[i] * (self.bp[i] + bma[i]);
        }
        v += self.beta * (l.iter().map(|x| x * x).sum::<f64>() + a.norm_squared());
        v + self.lambda * self.links.iter().map(|&i| (l[i + 1] - l[i]).abs()).sum::<f64>()
    }

    /// Re-solves exactly with the support of `a`, the fused demand groups and
    /// the signs of the remaining jumps taken from an interior-point iterate.
    /// `None` when the guess does not give a feasible, sign-consistent point.
    fn polish(&self, l: &[f64], a: &[f64], fuse_rel: f64) -> Option<(Vec<f64>, DVector<f64>)> {
        let (s, j) = (l.len(), a.len());
        let l_top = l.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let a_top = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let fuse_tol = fuse_rel * l_top;

        // Contiguous groups of fused segments.
        let mut group = vec![0usize; s];
        let mut sign: Vec<f64> = Vec::new();
        let mut is_link = vec![false; s.saturating_sub(1)];
        for &i in self.links {
            is_link[i] = true;
        }
        let mut g = 0;
        for i in 1..s {
            if !(is_link[i - 1] && (l[i] - l[i - 1]).abs() <= fuse_tol) {
                g += 1;
                sign.push(if is_link[i - 1] { (l[i] - l[i - 1]).signum() } else { 0.0 });
            }
            group[i] = g;
        }
        let ng = g + 1;
        let mut n_g = vec![0.0; ng];
        let mut seg_g = vec![0.0; ng];
        let mut bp_g = vec![0.0; ng];
        let mut bm_g = DMatrix::zeros(ng, j);
        for i in 0..s {
            let gi = group[i];
            n_g[gi] += self.counts[i];
            seg_g[gi] += 1.0;
            bp_g[gi] += self.bp[i];
            let mut row = bm_g.row_mut(gi);
            row += self.bm.row(i);
        }
        // Subgradient of λ Σ σ (ℓ_{g+1} − ℓ_g) per group.
        let mut c_g = vec![0.0; ng];
        for (gi, &sg) in sign.iter().enumerate() {
            c_g[gi] -= sg;
            c_g[gi + 1] += sg;
        }
        let d_g: Vec<f64> = (0..ng).map(|gi| n_g[gi] + self.beta * seg_g[gi]).collect();
        let shift: Vec<f64> = (0..ng).map(|gi| bp_g[gi] - 0.5 * self.lambda * c_g[gi]).collect();

        let mut free: Vec<usize> = (0..j).filter(|&c| a[c] > 1e-9 * a_top).collect();
        let mut alpha = DVector::zeros(j);
        for _ in 0..=j {
            let nf = free.len();
            let mut h = DMatrix::zeros(nf, nf);
            let mut r = DVector::zeros(nf);
            for (x, &cx) in free.iter().enumerate() {
                r[x] = -self.mp[cx];
                for (y, &cy) in free.iter().enumerate() {
                    h[(x, y)] = self.gram[(cx, cy)];
                }
                h[(x, x)] += self.beta;
            }
            for gi in 0..ng {
                for (x, &cx) in free.iter().enumerate() {
                    let bx = bm_g[(gi, cx)];
                    r[x] += bx * shift[gi] / d_g[gi];
                    for (y, &cy) in free.iter().enumerate() {
                        h[(x, y)] -= bx * bm_g[(gi, cy)] / d_g[gi];
                    }
                }
            }
            if nf > 0 {
                let eig = h.clone().symmetric_eigenvalues();
                if eig.min() <= 1e-10 * eig.max() {
                    return None;
                }
            }
            let af = if nf == 0 { DVector::zeros(0) } else { h.cholesky()?.solve(&r) };
            let worst = (0..nf).filter(|&x| af[x] < 0.0).min_by(|&x, &y| af[x].total_cmp(&af[y]));
            if let Some(x) = worst {
                free.remove(x);
                continue;
            }
            alpha.fill(0.0);
            for (x, &cx) in free.iter().enumerate() {
                alpha[cx] = af[x];
            }
            break;
        }
        let bma = &bm_g * &alpha;
        let lg: Vec<f64> = (0..ng).map(|gi| (shift[gi] + bma[gi]) / d_g[gi]).collect();
        if lg.iter().any(|&v| v < 0.0) {
            return None;
        }
        for (gi, &sg) in sign.iter().enumerate() {
            if sg != 0.0 && sg * (lg[gi + 1] - lg[gi]) <= 0.0 {
                return None;
            }
        }
        let levels = (0..s).map(|i| lg[group[i]]).collect();
        Some((levels, alpha))
    }
}

pub fn solve_demand_regression(problem: &DemandProblem, tol: f64) -> Result<DemandFit, OptimError> {
    problem.validate()?;
    let k = problem.m.nrows();
    let design = ScaledDesign::new(&problem.m);
    let ms = &design.x;
    let j = ms.ncols();
    let p_scale = problem.p.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let p_scale = if p_scale > 0.0 { p_scale } else { 1.0 };
    let p: Vec<f64> = problem.p.iter().map(|v| v / p_scale).collect();
    let lambda = problem.lambda / p_scale;
    let beta = problem.beta_reg;

    let s = problem.segments.len();
    let mut bm = DMatrix::zeros(s, j);
    let mut bp = vec![0.0; s];
    let counts: Vec<f64> = problem.segments.iter().map(|r| r.len() as f64).collect();
    for (i, seg) in problem.segments.iter().enumerate() {
        for row in seg.clone() {
            for c in 0..j {
                bm[(i, c)] += ms[(row, c)];
            }
            bp[i] += p[row];
        }
    }
    let gram = ms.tr_mul(&ms);

    // Demand levels alone are never rank deficient, so the capacity block
    // decides both flags.
    let (rank_deficient, min_eig, pd) = if j == 0 {
        (false, 2.0 * beta.min(1.0), true)
    } else {
        let unreg = reduced_hessian(&gram, &bm, &counts, 0.0);
        let eig = unreg.symmetric_eigenvalues();
        let reg = reduced_hessian(&gram, &bm, &counts, beta);
        let min_eig = reg.clone().symmetric_eigenvalues().min();
        (eig.min() <= 1e-10 * eig.max().max(1.0), min_eig, reg.cholesky().is_some())
    };
    if beta <= 0.0 && rank_deficient || !pd {
        return Err(OptimError::NotConvex { min_eig });
    }
    // The ridge only enters the cost when the capacity block needs it, so a
    // well-posed fit is not biased toward zero.
    let beta = if rank_deficient { beta } else { 0.0 };

    let links: Vec<usize> = if lambda > 0.0 {
        problem
            .linked
            .iter()
            .enumerate()
            .filter(|(_, &l)| l)
            .map(|(i, _)| i)
            .collect()
    } else {
        Vec::new()
    };
    let t = links.len();
    let mp = ms.tr_mul(&DVector::from_column_slice(&p));
    let mut q: Vec<f64> = bp.iter().map(|v| -2.0 * v).collect();
    q.extend(mp.iter().map(|v| 2.0 * v));
    q.extend(std::iter::repeat_n(lambda, t));

    let mut kkt = DemandKkt {
        bm,
        gram,
        counts,
        segments: problem.segments.clone(),
        links,
        beta,
        q,
        h: vec![0.0; s + j + 2 * t],
        w: Vec::new(),
        tri: Tridiag::default(),
        tinv_c: DMatrix::zeros(0, 0),
        schur: None,
        offset: p.iter().map(|v| v * v).sum(),
    };
    let settings = IpmSettings {
        max_iter: 200,
        ..IpmSettings::with_tol(tol)
    };
    let sol = solve_ipm(&mut kkt, &settings)?;

    let mut l_s: Vec<f64> = sol.x[..s].iter().map(|v| v.max(0.0)).collect();
    let mut a_s = DVector::from_iterator(j, sol.x[s..s + j].iter().map(|v| v.max(0.0)));
    let data = Scaled {
        bm: &kkt.bm,
        bp: &bp,
        gram: &kkt.gram,
        counts: &kkt.counts,
        pp: kkt.offset,
        mp: &mp,
        links: &kkt.links,
        lambda,
        beta,
    };
    // The ridge is a numerical device, so first look for an exact minimizer
    // of the unregularized cost on the active set the iterate suggests. The
    // fusion threshold is not known in advance; a few are tried and the best
    // candidate that does not raise the matching objective wins.
    let exact = Scaled { beta: 0.0, ..data };
    for cost in [&exact, &data] {
        let before = cost.objective(&l_s, &a_s);
        let mut best: Option<(f64, Vec<f64>, DVector<f64>)> = None;
        for fuse_rel in [1e-9, 1e-7, 1e-5, 1e-3] {
            if let Some((l_p, a_p)) = cost.polish(&l_s, a_s.as_slice(), fuse_rel) {
                let after = cost.objective(&l_p, &a_p);
                if after <= before + 1e-12 * (1.0 + before.abs()) && best.as_ref().is_none_or(|b| after < b.0) {
                    best = Some((after, l_p, a_p));
                }
            }
        }
        if let Some((_, l_p, a_p)) = best {
            l_s = l_p;
            a_s = a_p;
            break;
        }
    }

    let levels: Vec<f64> = l_s.iter().map(|v| v * p_scale).collect();
    let scaled: Vec<f64> = a_s.iter().map(|v| v * p_scale).collect();
    let alpha = design.expand(&scaled);
    let mut l_hat = vec![0.0; k];
    for (i, seg) in problem.segments.iter().enumerate() {
        l_hat[seg.clone()].iter_mut().for_each(|v| *v = levels[i]);
    }
    let g = &problem.m * DVector::from_column_slice(&alpha);
    let covered = problem.segments[0].start..problem.segments[s - 1].end;
    let fit: f64 = covered.map(|r| (problem.p[r] - l_hat[r] + g[r]).powi(2)).sum();
    let tv: f64 = problem
        .linked
        .iter()
        .enumerate()
        .filter(|(_, &l)| l)
        .map(|(i, _)| (levels[i + 1] - levels[i]).abs())
        .sum();
    let objective = fit + problem.lambda * tv;

    let mut report = sol.report;
    report.objective = objective;
    report.rank_deficient = rank_deficient;
    report.min_eig = Some(min_eig);
    Ok(DemandFit {
        alpha,
        levels,
        l_hat,
        objective,
        report,
    })
}
