use nalgebra::{DMatrix, DVector};

use super::ipm::{solve_ipm, IpmSettings, KktSystem};
use super::{norm_inf, OptimError, SolverReport, DEFAULT_BETA_REG};

/// Dense problem data with an LU-factored reduced KKT matrix.
#[derive(Debug, Clone)]
pub struct DenseKkt {
    p: DMatrix<f64>,
    q: Vec<f64>,
    g: DMatrix<f64>,
    h: Vec<f64>,
    a: DMatrix<f64>,
    b: Vec<f64>,
    kkt: DMatrix<f64>,
    /// Symmetric diagonal scaling applied before factoring.
    d: DVector<f64>,
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl DenseKkt {
    pub fn new(
        p: DMatrix<f64>,
        q: Vec<f64>,
        g: DMatrix<f64>,
        h: Vec<f64>,
        a: DMatrix<f64>,
        b: Vec<f64>,
    ) -> Result<Self, OptimError> {
        let n = q.len();
        let dims_ok = p.shape() == (n, n)
            && g.ncols() == n
            && g.nrows() == h.len()
            && a.ncols() == n
            && a.nrows() == b.len();
        if !dims_ok {
            return Err(OptimError::Dimension(format!(
                "P {:?}, q {}, G {:?}, h {}, A {:?}, b {}",
                p.shape(),
                n,
                g.shape(),
                h.len(),
                a.shape(),
                b.len()
            )));
        }
        Ok(Self {
            p,
            q,
            g,
            h,
            a,
            b,
            kkt: DMatrix::zeros(0, 0),
            d: DVector::zeros(0),
            lu: None,
        })
    }
}

fn mul(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    (m * DVector::from_column_slice(v)).as_slice().to_vec()
}

fn mul_t(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    if m.nrows() == 0 {
        return vec![0.0; m.ncols()];
    }
    (m.tr_mul(&DVector::from_column_slice(v))).as_slice().to_vec()
}

impl KktSystem for DenseKkt {
    fn num_vars(&self) -> usize {
        self.q.len()
    }
    fn num_ineq(&self) -> usize {
        self.h.len()
    }
    fn num_eq(&self) -> usize {
        self.b.len()
    }
    fn q(&self) -> &[f64] {
        &self.q
    }
    fn h(&self) -> &[f64] {
        &self.h
    }
    fn b(&self) -> &[f64] {
        &self.b
    }
    fn p_mul(&self, x: &[f64]) -> Vec<f64> {
        mul(&self.p, x)
    }
    fn g_mul(&self, x: &[f64]) -> Vec<f64> {
        mul(&self.g, x)
    }
    fn gt_mul(&self, z: &[f64]) -> Vec<f64> {
        mul_t(&self.g, z)
    }
    fn a_mul(&self, x: &[f64]) -> Vec<f64> {
        mul(&self.a, x)
    }
    fn at_mul(&self, y: &[f64]) -> Vec<f64> {
        mul_t(&self.a, y)
    }

    fn factor(&mut self, w: &[f64]) -> Result<(), OptimError> {
        let (n, p) = (self.num_vars(), self.num_eq());
        let mut kkt = DMatrix::zeros(n + p, n + p);
        let mut gw = self.g.clone();
        for (i, mut row) in gw.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let hess = &self.p + self.g.tr_mul(&gw);
        kkt.view_mut((0, 0), (n, n)).copy_from(&hess);
        if p > 0 {
            kkt.view_mut((n, 0), (p, n)).copy_from(&self.a);
            kkt.view_mut((0, n), (n, p)).copy_from(&self.a.transpose());
        }
        // Equilibrate so that interior-point weights spanning many decades do
        // not swamp the pivots.
        let mut d = DVector::from_element(n + p, 1.0);
        for i in 0..n {
            let v = hess[(i, i)];
            if v > 0.0 {
                d[i] = 1.0 / v.sqrt();
            }
        }
        for j in 0..p {
            let row = (0..n).fold(0.0f64, |m, i| m.max((self.a[(j, i)] * d[i]).abs()));
            if row > 0.0 {
                d[n + j] = 1.0 / row;
            }
        }
        let mut reg = kkt.clone();
        for c in 0..n + p {
            for r in 0..n + p {
                reg[(r, c)] *= d[r] * d[c];
            }
        }
        let delta = 1e-13 * (1.0 + reg.diagonal().amax());
        for i in 0..n {
            reg[(i, i)] += delta;
        }
        for i in n..n + p {
            reg[(i, i)] -= delta;
        }
        let lu = reg.lu();
        if !lu.is_invertible() {
            return Err(OptimError::Singular);
        }
        self.kkt = kkt;
        self.d = d;
        self.lu = Some(lu);
        Ok(())
    }

    fn solve(&self, r1: &[f64], r2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = r1.len();
        let rhs = DVector::from_iterator(n + r2.len(), r1.iter().chain(r2).copied());
        let lu = self.lu.as_ref().expect("factor before solve");
        let d = &self.d;
        let scaled_solve = |r: &DVector<f64>| {
            lu.solve(&r.component_mul(d)).map(|v| v.component_mul(d))
        };
        let mut sol = scaled_solve(&rhs).unwrap_or_else(|| DVector::zeros(rhs.len()));
        for _ in 0..2 {
            let res = &rhs - &self.kkt * &sol;
            if let Some(corr) = scaled_solve(&res) {
                sol += corr;
            }
        }
        (sol.rows(0, n).as_slice().to_vec(), sol.rows(n, r2.len()).as_slice().to_vec())
    }
}

/// `minimize cᵀx` subject to `A_ub x ≤ b_ub`, `A_eq x = b_eq`, `x ≥ lower`.
/// Use `f64::NEG_INFINITY` in `lower` for free variables.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub c: Vec<f64>,
    pub a_ub: DMatrix<f64>,
    pub b_ub: Vec<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: Vec<f64>,
    pub lower: Vec<f64>,
}

impl LinearProgram {
    /// A problem with `n` variables bounded below by zero and no constraints.
    pub fn nonneg(c: Vec<f64>) -> Self {
        let n = c.len();
        Self {
            c,
            a_ub: DMatrix::zeros(0, n),
            b_ub: Vec::new(),
            a_eq: DMatrix::zeros(0, n),
            b_eq: Vec::new(),
            lower: vec![0.0; n],
        }
    }
}

/// Stacks `A_ub` over the finite lower bounds written as `−x ≤ −lower`.
fn inequality_block(a_ub: &DMatrix<f64>, b_ub: &[f64], lower: &[f64]) -> (DMatrix<f64>, Vec<f64>) {
    let n = lower.len();
    let bounded: Vec<usize> = (0..n).filter(|&i| lower[i].is_finite()).collect();
    let m = a_ub.nrows() + bounded.len();
    let mut g = DMatrix::zeros(m, n);
    let mut h = Vec::with_capacity(m);
    if a_ub.nrows() > 0 {
        g.view_mut((0, 0), a_ub.shape()).copy_from(a_ub);
    }
    h.extend_from_slice(b_ub);
    for (r, &i) in bounded.iter().enumerate() {
        g[(a_ub.nrows() + r, i)] = -1.0;
        h.push(-lower[i]);
    }
    (g, h)
}

pub fn solve_lp(lp: &LinearProgram, tol: f64) -> Result<(Vec<f64>, SolverReport), OptimError> {
    let n = lp.c.len();
    if lp.lower.len() != n || lp.a_ub.ncols() != n || lp.a_eq.ncols() != n || lp.a_ub.nrows() != lp.b_ub.len() || lp.a_eq.nrows() != lp.b_eq.len() {
        return Err(OptimError::Dimension("linear program".into()));
    }
    let (g, h) = inequality_block(&lp.a_ub, &lp.b_ub, &lp.lower);
    let mut kkt = DenseKkt::new(
        DMatrix::zeros(n, n),
        lp.c.clone(),
        g,
        h,
        lp.a_eq.clone(),
        lp.b_eq.clone(),
    )?;
    let sol = solve_ipm(&mut kkt, &IpmSettings::with_tol(tol))?;
    let mut report = sol.report;
    report.degenerate = norm_inf(&lp.c) == 0.0;
    Ok((sol.x, report))
}

/// `minimize ½ xᵀHx − fᵀx` subject to `A_eq x = b_eq` and `x_i ≥ 0` where
/// `nonneg[i]`. The cost actually solved uses `H + beta_reg·I`.
#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    pub h: DMatrix<f64>,
    pub f: Vec<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: Vec<f64>,
    pub nonneg: Vec<bool>,
    pub beta_reg: f64,
}

impl QuadraticProgram {
    pub fn new(h: DMatrix<f64>, f: Vec<f64>) -> Self {
        let n = f.len();
        Self {
            h,
            f,
            a_eq: DMatrix::zeros(0, n),
            b_eq: Vec::new(),
            nonneg: vec![false; n],
            beta_reg: DEFAULT_BETA_REG,
        }
    }

    pub fn all_nonneg(mut self) -> Self {
        self.nonneg.iter_mut().for_each(|b| *b = true);
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: Vec<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta_reg = beta;
        self
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        let hx = &self.h * &xv;
        0.5 * xv.dot(&hx) + 0.5 * self.beta_reg * xv.norm_squared() - self.f.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    fn check(&self) -> Result<(), OptimError> {
        let n = self.f.len();
        if self.h.shape() != (n, n) || self.nonneg.len() != n || self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return Err(OptimError::Dimension("quadratic program".into()));
        }
        Ok(())
    }

    fn lower(&self) -> Vec<f64> {
        self.nonneg
            .iter()
            .map(|&b| if b { 0.0 } else { f64::NEG_INFINITY })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PsdCheck {
    pub regularized: DMatrix<f64>,
    pub is_pd: bool,
    pub min_eig: f64,
}

pub fn psd_check_and_regularize(h: &DMatrix<f64>, beta_reg: f64) -> PsdCheck {
    let n = h.nrows();
    let sym = (h + h.transpose()) * 0.5;
    let regularized = sym + DMatrix::identity(n, n) * beta_reg;
    let is_pd = n == 0 || regularized.clone().cholesky().is_some();
    let min_eig = if n == 0 {
        f64::INFINITY
    } else {
        regularized.clone().symmetric_eigenvalues().min()
    };
    PsdCheck {
        regularized,
        is_pd,
        min_eig,
    }
}

fn convex_hessian(q: &QuadraticProgram) -> Result<(DMatrix<f64>, f64), OptimError> {
    q.check()?;
    let check = psd_check_and_regularize(&q.h, q.beta_reg);
    if !check.is_pd {
        return Err(OptimError::NotConvex {
            min_eig: check.min_eig,
        });
    }
    Ok((check.regularized, check.min_eig))
}

pub fn solve_qp(q: &QuadraticProgram, tol: f64) -> Result<(Vec<f64>, SolverReport), OptimError> {
    let (hess, min_eig) = convex_hessian(q)?;
    let n = q.f.len();
    let (g, h) = inequality_block(&DMatrix::zeros(0, n), &[], &q.lower());
    let mut kkt = DenseKkt::new(
        hess,
        q.f.iter().map(|v| -v).collect(),
        g,
        h,
        q.a_eq.clone(),
        q.b_eq.clone(),
    )?;
    let sol = solve_ipm(&mut kkt, &IpmSettings::with_tol(tol))?;
    let mut report = sol.report;
    report.min_eig = Some(min_eig);
    let x = project_nonneg(sol.x, &q.nonneg);
    Ok((x, report))
}

fn project_nonneg(mut x: Vec<f64>, nonneg: &[bool]) -> Vec<f64> {
    for (v, &b) in x.iter_mut().zip(nonneg) {
        if b {
            *v = v.max(0.0);
        }
    }
    x
}

/// Solves `q` with an added `lambda·‖D x‖₁` through the epigraph form with one
/// auxiliary variable per row of `d`.
pub fn solve_l1_trend_qp(
    q: &QuadraticProgram,
    d: &DMatrix<f64>,
    lambda: f64,
    tol: f64,
) -> Result<(Vec<f64>, SolverReport), OptimError> {
    if !(lambda >= 0.0) {
        return Err(OptimError::Dimension(format!("lambda {lambda} must be nonnegative")));
    }
    let (hess, min_eig) = convex_hessian(q)?;
    let n = q.f.len();
    if d.ncols() != n {
        return Err(OptimError::Dimension("differencing operator".into()));
    }
    let r = d.nrows();
    let nt = n + r;

    let mut p = DMatrix::zeros(nt, nt);
    p.view_mut((0, 0), (n, n)).copy_from(&hess);
    let mut cost: Vec<f64> = q.f.iter().map(|v| -v).collect();
    cost.extend(std::iter::repeat_n(lambda, r));

    //  D x − t ≤ 0,  −D x − t ≤ 0
    let mut a_ub = DMatrix::zeros(2 * r, nt);
    a_ub.view_mut((0, 0), (r, n)).copy_from(d);
    a_ub.view_mut((r, 0), (r, n)).copy_from(&(-d));
    for i in 0..r {
        a_ub[(i, n + i)] = -1.0;
        a_ub[(r + i, n + i)] = -1.0;
    }
    let mut lower = q.lower();
    lower.extend(std::iter::repeat_n(f64::NEG_INFINITY, r));
    let (g, h) = inequality_block(&a_ub, &vec![0.0; 2 * r], &lower);
    let mut a_eq = DMatrix::zeros(q.a_eq.nrows(), nt);
    if q.a_eq.nrows() > 0 {
        a_eq.view_mut((0, 0), q.a_eq.shape()).copy_from(&q.a_eq);
    }
    let mut kkt = DenseKkt::new(p, cost, g, h, a_eq, q.b_eq.clone())?;
    let sol = solve_ipm(&mut kkt, &IpmSettings::with_tol(tol))?;
    let mut report = sol.report;
    report.min_eig = Some(min_eig);
    Ok((project_nonneg(sol.x[..n].to_vec(), &q.nonneg), report))
}

/// First-difference operator of size `(n−1)×n`.
pub fn first_difference(n: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(n.saturating_sub(1), n);
    for i in 0..n.saturating_sub(1) {
        d[(i, i)] = -1.0;
        d[(i, i + 1)] = 1.0;
    }
    d
}
