use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use pvdisagg::optim::{
    first_difference, irls_bisquare, nnls, psd_check_and_regularize, solve_l1_trend_qp, solve_lad, solve_qp,
    QuadraticProgram, DEFAULT_TUNING,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Lower bound from weak duality for `½xᵀHx − fᵀx`, `Ax = b`, `x_i ≥ 0`:
/// multipliers are fitted to the returned point and clipped to feasibility.
fn dual_bound(q: &QuadraticProgram, x: &[f64]) -> f64 {
    let n = x.len();
    let h = &q.h + DMatrix::identity(n, n) * q.beta_reg;
    let xv = DVector::from_column_slice(x);
    let f = DVector::from_column_slice(&q.f);
    let grad = &h * &xv - &f;
    let free: Vec<usize> = (0..n).filter(|&i| !q.nonneg[i] || x[i] > 1e-5).collect();
    let y = if q.a_eq.nrows() > 0 {
        let at_free = q.a_eq.transpose().select_rows(&free);
        let g_free = DVector::from_iterator(free.len(), free.iter().map(|&i| grad[i]));
        at_free.svd(true, true).solve(&g_free, 1e-12).unwrap()
    } else {
        DVector::zeros(0)
    };
    let aty = if q.a_eq.nrows() > 0 { q.a_eq.tr_mul(&y) } else { DVector::zeros(n) };
    let z = DVector::from_iterator(
        n,
        (0..n).map(|i| if q.nonneg[i] { (grad[i] - aty[i]).max(0.0) } else { 0.0 }),
    );
    let v = &f + &aty + &z;
    let u = h.clone().cholesky().unwrap().solve(&v);
    let b = DVector::from_column_slice(&q.b_eq);
    -0.5 * v.dot(&u) + if q.a_eq.nrows() > 0 { b.dot(&y) } else { 0.0 }
}

fn random_qp(rng: &mut ChaCha8Rng, n: usize, p: usize, nonneg: bool) -> QuadraticProgram {
    let s = random_matrix(rng, n + 5, n);
    let h = s.tr_mul(&s);
    let f: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let a = random_matrix(rng, p, n);
    // A feasible right-hand side from a nonnegative point.
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(0.1..1.0));
    let b = (&a * &x0).as_slice().to_vec();
    let mut q = QuadraticProgram::new(h, f).with_equalities(a, b);
    if nonneg {
        q = q.all_nonneg();
    }
    q
}

#[test]
fn l1_slope_matches_brute_force_grid() {
    let u: Vec<f64> = (1..=25).map(|i| f64::from(i) * 0.4).collect();
    let mut y: Vec<f64> = u.iter().map(|v| 2.0 * v + 0.01 * (v * 7.0).sin()).collect();
    y[11] = 80.0;
    let cost = |slope: f64| u.iter().zip(&y).map(|(a, b)| (b - slope * a).abs()).sum::<f64>();
    let best = (0..=40000)
        .map(|i| 1.0 + f64::from(i) * 5e-5)
        .min_by(|a, b| cost(*a).partial_cmp(&cost(*b)).unwrap())
        .unwrap();
    let fit = solve_lad(&DMatrix::from_column_slice(25, 1, &u), &y, false, 1e-10).unwrap();
    assert!((fit.alpha[0] - best).abs() <= 1e-4, "{} vs {best}", fit.alpha[0]);
    assert!((fit.alpha[0] - 2.0).abs() < 0.01);
    assert!(fit.objective <= cost(best) + 1e-9);
}

#[test]
fn equality_qp_matches_direct_kkt_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 20;
    let q = random_qp(&mut rng, n, 4, false);
    let h = &q.h + DMatrix::identity(n, n) * q.beta_reg;
    let mut kkt = DMatrix::zeros(n + 4, n + 4);
    kkt.view_mut((0, 0), (n, n)).copy_from(&h);
    kkt.view_mut((n, 0), (4, n)).copy_from(&q.a_eq);
    kkt.view_mut((0, n), (n, 4)).copy_from(&q.a_eq.transpose());
    let mut rhs = DVector::zeros(n + 4);
    rhs.rows_mut(0, n).copy_from_slice(&q.f);
    rhs.rows_mut(n, 4).copy_from_slice(&q.b_eq);
    let direct = kkt.lu().solve(&rhs).unwrap();
    let (x, report) = solve_qp(&q, 1e-10).unwrap();
    assert!(report.converged);
    for i in 0..n {
        assert!((x[i] - direct[i]).abs() <= 1e-6, "{i}: {} vs {}", x[i], direct[i]);
    }
}

#[test]
fn nonneg_qp_matches_active_set_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 20;
    let q = random_qp(&mut rng, n, 3, true);
    let (x, _) = solve_qp(&q, 1e-10).unwrap();
    // Fix the active set found by the solver and solve the remaining
    // equality-constrained problem directly; multipliers must have the right sign.
    let free: Vec<usize> = (0..n).filter(|&i| x[i] > 1e-6).collect();
    let nf = free.len();
    let h = &q.h + DMatrix::identity(n, n) * q.beta_reg;
    let hf = h.select_rows(&free).select_columns(&free);
    let af = q.a_eq.select_columns(&free);
    let p = af.nrows();
    let mut kkt = DMatrix::zeros(nf + p, nf + p);
    kkt.view_mut((0, 0), (nf, nf)).copy_from(&hf);
    kkt.view_mut((nf, 0), (p, nf)).copy_from(&af);
    kkt.view_mut((0, nf), (nf, p)).copy_from(&af.transpose());
    let mut rhs = DVector::zeros(nf + p);
    for (r, &i) in free.iter().enumerate() {
        rhs[r] = q.f[i];
    }
    rhs.rows_mut(nf, p).copy_from_slice(&q.b_eq);
    let sol = kkt.lu().solve(&rhs).unwrap();
    let mut full = DVector::zeros(n);
    for (r, &i) in free.iter().enumerate() {
        full[i] = sol[r];
        assert!((x[i] - sol[r]).abs() <= 1e-6);
    }
    let y = sol.rows(nf, p).into_owned();
    let reduced = &h * &full - DVector::from_column_slice(&q.f) + q.a_eq.tr_mul(&y);
    for i in (0..n).filter(|i| !free.contains(i)) {
        assert!(x[i].abs() <= 1e-6);
        assert!(reduced[i] >= -1e-6, "multiplier {i}: {}", reduced[i]);
    }
}

#[test]
fn random_qps_are_certified_by_weak_duality() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let n = rng.random_range(2..25);
        let p = rng.random_range(0..n.min(5));
        let nonneg = case % 3 != 0;
        let q = random_qp(&mut rng, n, p, nonneg);
        let (x, report) = solve_qp(&q, 1e-9).unwrap();
        assert!(report.converged);
        let obj = q.objective(&x);
        let bound = dual_bound(&q, &x);
        let ax = &q.a_eq * DVector::from_column_slice(&x);
        let feas = ax
            .iter()
            .zip(&q.b_eq)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(obj - bound <= 1e-6 * (1.0 + obj.abs()), "case {case}: gap {}", obj - bound);
        assert!(feas <= 1e-6, "case {case}: feasibility {feas}");
        assert!(report.primal_residual <= 1e-6 && report.dual_residual <= 1e-6);
        if nonneg {
            assert!(x.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn qp_beats_random_feasible_perturbations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10;
    let q = random_qp(&mut rng, n, 2, true);
    let (x, _) = solve_qp(&q, 1e-10).unwrap();
    let best = q.objective(&x);
    // Perturb within the null space of A and shrink the step to stay in the
    // orthant.
    let a = &q.a_eq;
    let aat = (a * a.transpose()).try_inverse().unwrap();
    let proj = DMatrix::identity(n, n) - a.transpose() * aat * a;
    let mut tested = 0;
    while tested < 100 {
        let d = &proj * DVector::from_fn(n, |_, _| rng.random_range(-0.2..0.2));
        let mut t = 1.0;
        while (0..n).any(|i| x[i] + t * d[i] < 0.0) && t > 1e-6 {
            t *= 0.5;
        }
        let xp: Vec<f64> = (0..n).map(|i| x[i] + t * d[i]).collect();
        if xp.iter().any(|&v| v < 0.0) {
            continue;
        }
        assert!(q.objective(&xp) >= best - 1e-9);
        tested += 1;
    }
}

#[test]
fn constructed_negative_eigenvalue_is_lifted() {
    // Q diag(1, 0.5, −1e-6) Qᵀ with a rotation Q.
    let (c, s) = (0.6f64, 0.8f64);
    let q = DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
    let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, -1e-6]));
    let h = &q * d * q.transpose();
    let check = psd_check_and_regularize(&h, 1e-4);
    assert!(check.is_pd);
    let oracle = check.regularized.clone().symmetric_eigenvalues().min();
    assert!((check.min_eig - 9.9e-5).abs() < 1e-12, "{}", check.min_eig);
    assert!((check.min_eig - oracle).abs() < 1e-15);
}

#[test]
fn trend_filter_without_penalty_is_plain_qp() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = random_qp(&mut rng, 12, 0, true);
    let (a, _) = solve_qp(&q, 1e-10).unwrap();
    let (b, _) = solve_l1_trend_qp(&q, &first_difference(12), 0.0, 1e-10).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-7);
    }
}

fn denoise_problem(y: &[f64]) -> QuadraticProgram {
    let n = y.len();
    QuadraticProgram::new(DMatrix::identity(n, n) * 2.0, y.iter().map(|v| 2.0 * v).collect()).with_beta(0.0)
}

fn trend_objective(y: &[f64], x: &[f64], lambda: f64) -> f64 {
    let fit: f64 = y.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
    let tv: f64 = x.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    fit + lambda * tv
}

/// Best three-level signal with breakpoints at `i` and `j`: a 3-variable
/// weighted trend filter solved on a fine grid around the segment means.
fn best_three_level(y: &[f64], i: usize, j: usize, lambda: f64) -> (f64, [f64; 3]) {
    let segs = [&y[..i], &y[i..j], &y[j..]];
    let n: Vec<f64> = segs.iter().map(|s| s.len() as f64).collect();
    let m: Vec<f64> = segs.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect();
    let q = QuadraticProgram::new(
        DMatrix::from_diagonal(&DVector::from_vec(n.iter().map(|v| 2.0 * v).collect())),
        (0..3).map(|k| 2.0 * n[k] * m[k]).collect(),
    )
    .with_beta(0.0);
    let (x, _) = solve_l1_trend_qp(&q, &first_difference(3), lambda, 1e-9).unwrap();
    let mut full = vec![x[0]; i];
    full.extend(std::iter::repeat_n(x[1], j - i));
    full.extend(std::iter::repeat_n(x[2], y.len() - j));
    (trend_objective(y, &full, lambda), [x[0], x[1], x[2]])
}

#[test]
fn trend_filter_breakpoints_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let truth: Vec<f64> = (0..50)
        .map(|k| if k < 17 { 1.0 } else if k < 34 { 4.0 } else { 2.0 })
        .collect();
    let y: Vec<f64> = truth.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
    let lambda = 2.0;
    let (x, _) = solve_l1_trend_qp(&denoise_problem(&y), &first_difference(50), lambda, 1e-9).unwrap();
    let breaks: Vec<usize> = (1..50).filter(|&k| (x[k] - x[k - 1]).abs() > 1e-4).collect();

    let mut best = (f64::INFINITY, 0, 0);
    for i in 1..49 {
        for j in i + 1..50 {
            let (obj, _) = best_three_level(&y, i, j, lambda);
            if obj < best.0 {
                best = (obj, i, j);
            }
        }
    }
    assert_eq!(breaks, vec![best.1, best.2], "solver {breaks:?}, brute {best:?}");
    assert!((trend_objective(&y, &x, lambda) - best.0).abs() < 1e-6);
}

#[test]
fn total_variation_decreases_along_lambda_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y: Vec<f64> = (0..40).map(|k| (k as f64 / 6.0).sin() + rng.random_range(-0.3..0.3)).collect();
    let mut last = f64::INFINITY;
    for lambda in [0.01, 0.1, 0.5, 2.0, 10.0] {
        let (x, _) = solve_l1_trend_qp(&denoise_problem(&y), &first_difference(40), lambda, 1e-9).unwrap();
        let tv: f64 = x.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
        assert!(tv <= last + 1e-7, "λ {lambda}: {tv} > {last}");
        last = tv;
    }
}

#[test]
fn noisy_constant_with_huge_penalty_is_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let y: Vec<f64> = (0..40).map(|_| 3.0 + rng.random_range(-0.5..0.5)).collect();
    let (x, _) = solve_l1_trend_qp(&denoise_problem(&y), &first_difference(40), 1e6, 1e-9).unwrap();
    let spread = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - x.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    assert!(spread < 1e-6, "{spread}");
}

fn outlier_design(rng: &mut ChaCha8Rng, k: usize) -> (DMatrix<f64>, DVector<f64>) {
    let x = DMatrix::from_fn(k, 4, |_, _| rng.random_range(0.0..1.0));
    let a0 = DVector::from_vec(vec![2.0, 0.5, 1.0, 3.0]);
    (x, a0)
}

#[test]
fn bisquare_resists_gross_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let k = 400;
    let (x, a0) = outlier_design(&mut rng, k);
    let clean = &x * &a0;
    let scale = clean.amax();
    let mut y: Vec<f64> = clean.iter().map(|v| v + rng.random_range(-0.01..0.01)).collect();
    for i in (0..k).step_by(20) {
        y[i] += 10.0 * scale;
    }
    let fit = irls_bisquare(&x, &y, DEFAULT_TUNING, true, 1e-10, 100).unwrap();
    let err = (DVector::from_vec(fit.alpha.clone()) - &a0).norm() / a0.norm();
    let ols = x.clone().svd(true, true).solve(&DVector::from_vec(y.clone()), 1e-14).unwrap();
    let ols_err = (ols - &a0).norm() / a0.norm();
    assert!(err <= 0.05, "{err}");
    assert!(ols_err > 3.0 * err, "ols {ols_err}, robust {err}");
    assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
}

#[test]
fn huge_tuning_reduces_to_nnls() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (x, a0) = outlier_design(&mut rng, 200);
    let y: Vec<f64> = (&x * &a0).iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
    let (reference, _) = nnls(&x, &y).unwrap();
    let fit = irls_bisquare(&x, &y, 1e12, true, 1e-12, 50).unwrap();
    for (a, b) in fit.alpha.iter().zip(&reference) {
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gram_plus_ridge_is_positive_definite(rows in 1usize..200, cols in 1usize..50, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_matrix(&mut rng, rows, cols);
        let check = psd_check_and_regularize(&s.tr_mul(&s), 1e-4);
        prop_assert!(check.is_pd);
        prop_assert!(check.min_eig > 0.0);
    }

    #[test]
    fn irls_objective_never_increases(seed in any::<u64>(), frac in 0.0f64..0.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, a0) = outlier_design(&mut rng, 120);
        let mut y: Vec<f64> = (&x * &a0).iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
        for v in y.iter_mut() {
            if rng.random_bool(frac) {
                *v += rng.random_range(-30.0..30.0);
            }
        }
        match irls_bisquare(&x, &y, DEFAULT_TUNING, true, 1e-9, 200) {
            Ok(fit) => prop_assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].max(1.0))),
            Err(e) => prop_assert!(!matches!(e, pvdisagg::optim::OptimError::Invariant(_)), "{e}"),
        }
    }
}
