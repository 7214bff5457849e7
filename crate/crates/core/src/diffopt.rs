//! Implicit differentiation of the relaxation's optimum with respect to the
//! program data: vector-Jacobian products dL/dc and dL/db given an adjoint
//! dL/dx at the solution.
//!
//! Two routes: KKT differentiation of the regularized QP, and
//! differentiation of the mu-perturbed optimality conditions at a barrier
//! center. Both solve one transposed linear system per adjoint. The sign
//! conventions are frozen by the finite-difference suite in this module's
//! tests: perturbing the data and re-solving must reproduce the returned
//! gradients.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{ModelError, StandardFormProgram};
use crate::solver::{solve_relaxation, Solution, SolverConfig, SolverError, SolverStatus};
use crate::sparse::SparseMatrix;

/// Both x_j and its dual below this threshold counts as degenerate
/// complementarity: the KKT Jacobian is then numerically singular and the
/// caller must re-solve with stronger regularization instead of trusting a
/// pseudo-solve.
const DEGENERACY_TOL: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("QP differentiation requires strict convexity (lambda > 0)")]
    NeedsConvexity,
    #[error("barrier differentiation requires mu > 0")]
    NeedsBarrier,
    #[error("solution is not optimal (status {0})")]
    NotOptimal(String),
    #[error("degenerate complementarity at index {index}: x = {x:.3e}, dual = {s:.3e}")]
    Degenerate { index: usize, x: f64, s: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("KKT system is singular")]
    Singular,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("evaluator failed at coordinate {index}: {message}")]
    Evaluator { index: usize, message: String },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffMethod {
    KktQp,
    Barrier,
}

#[derive(Debug, Clone)]
pub struct GradientResult {
    pub dl_dc: Vec<f64>,
    pub dl_db: Vec<f64>,
    pub method: DiffMethod,
    /// The solution the gradients were taken at.
    pub solution: Solution,
}

fn solve_dense(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>, DiffError> {
    let lu = m.clone().lu();
    let mut u = lu.solve(rhs).ok_or(DiffError::Singular)?;
    for _ in 0..2 {
        let res = rhs - m * &u;
        if res.amax() <= 1e-12 * (1.0 + rhs.amax()) {
            break;
        }
        let du = lu.solve(&res).ok_or(DiffError::Singular)?;
        u += du;
    }
    if u.iter().all(|v| v.is_finite()) {
        Ok(u)
    } else {
        Err(DiffError::Singular)
    }
}

/// Gradients through the regularized QP via the KKT Jacobian
/// [Q, -A'; A, 0; diag(s), 0, diag(x)] at the primal-dual solution, solved
/// transposed against (dL_dx, 0, 0).
pub fn differentiate_qp(
    prog: &StandardFormProgram,
    sol: &Solution,
    dl_dx: &[f64],
) -> Result<GradientResult, DiffError> {
    if prog.quad_weight <= 0.0 {
        return Err(DiffError::NeedsConvexity);
    }
    if sol.status != SolverStatus::Optimal {
        return Err(DiffError::NotOptimal(sol.status.to_string()));
    }
    let n = prog.n_vars();
    let p = prog.n_rows();
    if dl_dx.len() != n {
        return Err(DiffError::Dimension(format!(
            "adjoint has {} entries, program has {n}",
            dl_dx.len()
        )));
    }
    for j in 0..n {
        if sol.x[j] < DEGENERACY_TOL && sol.s_dual[j] < DEGENERACY_TOL {
            return Err(DiffError::Degenerate {
                index: j,
                x: sol.x[j],
                s: sol.s_dual[j],
            });
        }
    }

    // J = [Q, -A', -I; A, 0, 0; S, 0, X]; assemble J' directly.
    let dim = 2 * n + p;
    let mut jt = DMatrix::zeros(dim, dim);
    for j in 0..n {
        jt[(j, j)] = prog.quad_diag(j);
        jt[(j, n + p + j)] = sol.s_dual[j];
        jt[(n + p + j, j)] = -1.0;
        jt[(n + p + j, n + p + j)] = sol.x[j];
    }
    for r in 0..p {
        for (c, v) in prog.a.row(r) {
            jt[(c, n + r)] = v;
            jt[(n + r, c)] = -v;
        }
    }
    let mut rhs = DVector::zeros(dim);
    for j in 0..n {
        rhs[j] = dl_dx[j];
    }
    let w = solve_dense(&jt, &rhs)?;

    let dl_dc: Vec<f64> = (0..n).map(|j| -w[j]).collect();
    let dl_db: Vec<f64> = (0..p).map(|r| w[n + r]).collect();
    Ok(GradientResult {
        dl_dc,
        dl_db,
        method: DiffMethod::KktQp,
        solution: sol.clone(),
    })
}

/// Gradients at a mu-center via the perturbed optimality conditions
/// Qx + c - A'nu - mu X^-1 = 0, Ax = b, whose Jacobian is
/// [(Q + mu X^-2), -A'; A, 0].
pub fn differentiate_barrier(
    prog: &StandardFormProgram,
    sol: &Solution,
    dl_dx: &[f64],
) -> Result<GradientResult, DiffError> {
    let mu = prog.barrier_weight;
    if mu <= 0.0 {
        return Err(DiffError::NeedsBarrier);
    }
    if sol.status != SolverStatus::Optimal {
        return Err(DiffError::NotOptimal(sol.status.to_string()));
    }
    let n = prog.n_vars();
    let p = prog.n_rows();
    if dl_dx.len() != n {
        return Err(DiffError::Dimension(format!(
            "adjoint has {} entries, program has {n}",
            dl_dx.len()
        )));
    }
    for (j, &v) in sol.x.iter().enumerate() {
        if v <= 0.0 {
            return Err(DiffError::Domain(format!(
                "barrier center must be strictly positive, x[{j}] = {v}"
            )));
        }
    }

    let dim = n + p;
    let mut jt = DMatrix::zeros(dim, dim);
    for j in 0..n {
        jt[(j, j)] = prog.quad_diag(j) + mu / (sol.x[j] * sol.x[j]);
    }
    for r in 0..p {
        for (c, v) in prog.a.row(r) {
            jt[(c, n + r)] = v;
            jt[(n + r, c)] = -v;
        }
    }
    let mut rhs = DVector::zeros(dim);
    for j in 0..n {
        rhs[j] = dl_dx[j];
    }
    let w = solve_dense(&jt, &rhs)?;

    let dl_dc: Vec<f64> = (0..n).map(|j| -w[j]).collect();
    let dl_db: Vec<f64> = (0..p).map(|r| w[n + r]).collect();
    Ok(GradientResult {
        dl_dc,
        dl_db,
        method: DiffMethod::Barrier,
        solution: sol.clone(),
    })
}

/// Central-difference Jacobian of a vector map, columnwise: column j is
/// (f(x + h e_j) - f(x - h e_j)) / 2h.
pub fn finite_difference_jacobian<F>(
    f: F,
    point: &[f64],
    h: f64,
) -> Result<Vec<Vec<f64>>, DiffError>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, String>,
{
    if h <= 0.0 {
        return Err(DiffError::Domain("step h must be positive".into()));
    }
    let eval = |p: &[f64], j: usize| {
        f(p).map_err(|message| DiffError::Evaluator { index: j, message })
    };
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(point.len());
    for j in 0..point.len() {
        let mut plus = point.to_vec();
        plus[j] += h;
        let fp = eval(&plus, j)?;
        let mut minus = point.to_vec();
        minus[j] -= h;
        let fm = eval(&minus, j)?;
        if fp.len() != fm.len() {
            return Err(DiffError::Dimension(
                "evaluator output length changed between calls".into(),
            ));
        }
        cols.push(
            fp.iter()
                .zip(&fm)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect(),
        );
    }
    // Transpose to rows = outputs, cols = inputs.
    let rows = cols.first().map(|c| c.len()).unwrap_or(0);
    Ok((0..rows)
        .map(|r| cols.iter().map(|c| c[r]).collect())
        .collect())
}

/// Random program with a guaranteed strictly feasible point (b = A x0 for a
/// strictly positive x0) and a strictly feasible dual pair (c = A'nu0 + w
/// with w > 0), so the LP and any barrier center are bounded regardless of
/// the draw. Used by the gradient-check suites and the CLI.
pub fn random_strictly_feasible_program(
    n: usize,
    p: usize,
    quad_weight: f64,
    barrier_weight: f64,
    seed: u64,
) -> StandardFormProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triplets = Vec::new();
    for r in 0..p {
        for j in 0..n {
            triplets.push((r, j, rng.gen_range(-1.0..1.0)));
        }
    }
    let a = SparseMatrix::from_triplets(p, n, triplets);
    let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let b = a.mul_vec(&x0);
    let nu0: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let atnu = a.tr_mul_vec(&nu0);
    let c: Vec<f64> = (0..n)
        .map(|j| atnu[j] + rng.gen_range(0.05..1.05))
        .collect();
    StandardFormProgram::from_raw_parts(c, a, b, quad_weight, barrier_weight)
        .expect("dimensions are consistent by construction")
}

fn tight_config() -> SolverConfig {
    SolverConfig {
        comp_tol: 1e-12,
        ..SolverConfig::default()
    }
}

/// Worst relative disagreement between implicit gradients and central finite
/// differences of L(c, b) = adjoint . x*(c, b) over seeded random programs.
/// This is the oracle that freezes the sign conventions.
pub fn max_relative_gradient_error(
    method: DiffMethod,
    dim: usize,
    trials: usize,
    seed: u64,
) -> Result<f64, DiffError> {
    let dim = dim.clamp(2, 20);
    let cfg = tight_config();
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        // Degenerate draws (complementarity too tight to differentiate) are
        // redrawn deterministically rather than silently regularized.
        let mut attempt = 0u64;
        let (rel_c, rel_b) = loop {
            let trial_seed = seed
                .wrapping_mul(1_000_003)
                .wrapping_add(trial as u64 * 97 + attempt * 31 + 1);
            match gradient_check_once(method, dim, trial_seed, &cfg) {
                Ok(pair) => break pair,
                Err(DiffError::Degenerate { .. }) if attempt < 8 => attempt += 1,
                Err(e) => return Err(e),
            }
        };
        worst = worst.max(rel_c).max(rel_b);
    }
    Ok(worst)
}

fn rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale = fd
        .iter()
        .chain(analytic.iter())
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(1.0);
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs())
        .fold(0.0_f64, f64::max)
        / scale
}

fn gradient_check_once(
    method: DiffMethod,
    dim: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<(f64, f64), DiffError> {
    let n = dim;
    let p = (dim / 2).max(1);
    let (quad, barrier, h) = match method {
        DiffMethod::KktQp => (0.7, 0.0, 1e-5),
        DiffMethod::Barrier => (0.0, 1e-2, 1e-5),
    };
    let prog = random_strictly_feasible_program(n, p, quad, barrier, seed);
    check_program_gradients(&prog, h, seed ^ 0x5eed, cfg)
}

/// Compares both returned gradients against finite differences on one
/// program; returns (relative error in dL_dc, relative error in dL_db).
pub fn check_program_gradients(
    prog: &StandardFormProgram,
    h: f64,
    adjoint_seed: u64,
    cfg: &SolverConfig,
) -> Result<(f64, f64), DiffError> {
    let n = prog.n_vars();
    let method = if prog.barrier_weight > 0.0 {
        DiffMethod::Barrier
    } else {
        DiffMethod::KktQp
    };
    let mut rng = ChaCha8Rng::seed_from_u64(adjoint_seed);
    let adjoint: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let sol = solve_relaxation(prog, cfg)?;
    if sol.status != SolverStatus::Optimal {
        return Err(DiffError::NotOptimal(sol.status.to_string()));
    }
    let grad = match method {
        DiffMethod::KktQp => differentiate_qp(prog, &sol, &adjoint)?,
        DiffMethod::Barrier => differentiate_barrier(prog, &sol, &adjoint)?,
    };

    let loss_at = |prog: &StandardFormProgram| -> Result<f64, String> {
        let s = solve_relaxation(prog, cfg).map_err(|e| e.to_string())?;
        if s.status != SolverStatus::Optimal {
            return Err(format!("perturbed solve ended {}", s.status));
        }
        Ok(adjoint.iter().zip(&s.x).map(|(w, x)| w * x).sum())
    };

    let fd_c = finite_difference_jacobian(
        |c: &[f64]| {
            let p = prog.with_cost(c.to_vec()).map_err(|e| e.to_string())?;
            loss_at(&p).map(|v| vec![v])
        },
        &prog.c,
        h,
    )?
    .remove(0);
    let fd_b = finite_difference_jacobian(
        |b: &[f64]| {
            let mut p = prog.clone();
            p.b = b.to_vec();
            loss_at(&p).map(|v| vec![v])
        },
        &prog.b,
        h,
    )?
    .remove(0);

    Ok((rel_err(&grad.dl_dc, &fd_c), rel_err(&grad.dl_db, &fd_b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SolverConfig {
        tight_config()
    }

    #[test]
    fn one_dimensional_qp_matches_analytic_derivative() {
        // min 0.5 x^2 - x over x >= 0: interior optimum x* = 1, and with
        // adjoint 1, dL/dc = -1/(2 lambda) = -1.
        let prog = StandardFormProgram::from_raw_parts(
            vec![-1.0],
            SparseMatrix::from_triplets(0, 1, Vec::new()),
            Vec::new(),
            0.5,
            0.0,
        )
        .unwrap();
        let sol = solve_relaxation(&prog, &cfg()).unwrap();
        assert!((sol.x[0] - 1.0).abs() <= 1e-7);
        let g = differentiate_qp(&prog, &sol, &[1.0]).unwrap();
        assert!((g.dl_dc[0] + 1.0).abs() <= 1e-6, "dl_dc = {}", g.dl_dc[0]);
    }

    #[test]
    fn equality_pinned_qp_has_unit_b_sensitivity() {
        // min x^2 s.t. x = 0.7: x* tracks b exactly, so dL_db = dL_dx.
        let prog = StandardFormProgram::from_raw_parts(
            vec![0.0],
            SparseMatrix::from_triplets(1, 1, vec![(0, 0, 1.0)]),
            vec![0.7],
            1.0,
            0.0,
        )
        .unwrap();
        let sol = solve_relaxation(&prog, &cfg()).unwrap();
        assert!((sol.x[0] - 0.7).abs() <= 1e-8);
        let g = differentiate_qp(&prog, &sol, &[3.5]).unwrap();
        assert!((g.dl_db[0] - 3.5).abs() <= 1e-6, "dl_db = {}", g.dl_db[0]);
    }

    #[test]
    fn box_lp_barrier_center_sensitivity() {
        // min c*x over 0 <= x <= 1 at c = 0, barrier mu: center x = 0.5 and
        // dx/dc = -1/(8 mu).
        for mu in [1e-2, 1e-1] {
            let prog = StandardFormProgram::from_raw_parts(
                vec![0.0, 0.0],
                SparseMatrix::from_triplets(1, 2, vec![(0, 0, 1.0), (0, 1, 1.0)]),
                vec![1.0],
                0.0,
                mu,
            )
            .unwrap();
            let sol = solve_relaxation(&prog, &cfg()).unwrap();
            assert!((sol.x[0] - 0.5).abs() <= 1e-8);
            let g = differentiate_barrier(&prog, &sol, &[1.0, 0.0]).unwrap();
            let want = -1.0 / (8.0 * mu);
            let rel = (g.dl_dc[0] - want).abs() / want.abs();
            assert!(rel <= 1e-6, "mu {mu}: dl_dc {} want {want}", g.dl_dc[0]);
        }
    }

    #[test]
    fn symmetric_simplex_b_gradient_is_swap_invariant() {
        let prog = StandardFormProgram::from_raw_parts(
            vec![0.0, 0.0],
            SparseMatrix::from_triplets(1, 2, vec![(0, 0, 1.0), (0, 1, 1.0)]),
            vec![1.0],
            0.0,
            1e-2,
        )
        .unwrap();
        let sol = solve_relaxation(&prog, &cfg()).unwrap();
        let g1 = differentiate_barrier(&prog, &sol, &[2.0, -1.0]).unwrap();
        let g2 = differentiate_barrier(&prog, &sol, &[-1.0, 2.0]).unwrap();
        assert!((g1.dl_db[0] - g2.dl_db[0]).abs() <= 1e-9);
    }

    #[test]
    fn fd_jacobian_recovers_a_linear_map() {
        let m = [[1.0, -2.0], [3.0, 0.5], [0.0, 4.0]];
        let f = |x: &[f64]| -> Result<Vec<f64>, String> {
            Ok(m.iter()
                .map(|row| row[0] * x[0] + row[1] * x[1])
                .collect())
        };
        let j = finite_difference_jacobian(f, &[0.3, -0.7], 1e-5).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                assert!((j[r][c] - m[r][c]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn fd_jacobian_of_elementwise_square() {
        let f = |x: &[f64]| -> Result<Vec<f64>, String> {
            Ok(x.iter().map(|v| v * v).collect())
        };
        let j = finite_difference_jacobian(f, &[1.0, 1.0], 1e-5).unwrap();
        assert!((j[0][0] - 2.0).abs() <= 1e-8);
        assert!((j[1][1] - 2.0).abs() <= 1e-8);
        assert!(j[0][1].abs() <= 1e-10);
    }

    #[test]
    fn fd_jacobian_propagates_evaluator_failures() {
        let f = |x: &[f64]| -> Result<Vec<f64>, String> {
            if x[1] > 1.0 {
                Err("overflow".into())
            } else {
                Ok(vec![x[0]])
            }
        };
        match finite_difference_jacobian(f, &[0.0, 1.0], 1e-3) {
            Err(DiffError::Evaluator { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected evaluator error, got {other:?}"),
        }
    }

    #[test]
    fn qp_gradients_match_finite_differences() {
        let worst = max_relative_gradient_error(DiffMethod::KktQp, 12, 5, 11).unwrap();
        assert!(worst <= 1e-4, "relative error {worst}");
    }

    #[test]
    fn barrier_gradients_match_finite_differences() {
        let worst = max_relative_gradient_error(DiffMethod::Barrier, 12, 5, 13).unwrap();
        assert!(worst <= 1e-4, "relative error {worst}");
    }

    #[test]
    fn barrier_small_mu_matches_finite_differences() {
        // mu = 1e-4 with the matching smaller step.
        let cfg = cfg();
        let mut worst: f64 = 0.0;
        for trial in 0..5u64 {
            let prog = random_strictly_feasible_program(10, 5, 0.0, 1e-4, 211 + trial);
            let (rc, rb) = check_program_gradients(&prog, 1e-6, 77 + trial, &cfg).unwrap();
            worst = worst.max(rc).max(rb);
        }
        assert!(worst <= 1e-4, "relative error {worst}");
    }

    #[test]
    fn lambda_zero_is_rejected() {
        let prog = random_strictly_feasible_program(6, 3, 0.0, 0.0, 5);
        let sol = solve_relaxation(&prog, &cfg()).unwrap();
        assert!(matches!(
            differentiate_qp(&prog, &sol, &vec![0.0; 6]),
            Err(DiffError::NeedsConvexity)
        ));
    }

    #[test]
    fn qp_and_barrier_gradients_converge_together() {
        // On a nondegenerate program, shrinking lambda and mu drives both
        // methods' dL_dc to the same limit: successive gaps shrink.
        let cfg = cfg();
        let base = random_strictly_feasible_program(8, 4, 0.0, 0.0, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let adjoint: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut gaps = Vec::new();
        for level in [1e-2, 1e-3, 1e-4] {
            let mut qp = base.clone();
            qp.quad_weight = level;
            let qs = solve_relaxation(&qp, &cfg).unwrap();
            let qg = differentiate_qp(&qp, &qs, &adjoint).unwrap();

            let mut bar = base.clone();
            bar.barrier_weight = level;
            let bs = solve_relaxation(&bar, &cfg).unwrap();
            let bg = differentiate_barrier(&bar, &bs, &adjoint).unwrap();

            let gap = qg
                .dl_dc
                .iter()
                .zip(&bg.dl_dc)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max);
            gaps.push(gap);
        }
        assert!(
            gaps[1] < gaps[0] && gaps[2] < gaps[1],
            "gaps not shrinking: {gaps:?}"
        );
    }

    #[test]
    fn decoupled_interior_coordinate_has_zero_gradient() {
        // Coordinate 2 is outside every constraint and settles interior at
        // x = mu / c = 0.2; with zero adjoint there its data gradient
        // vanishes because its KKT row is fully decoupled.
        let prog = StandardFormProgram::from_raw_parts(
            vec![0.4, -0.2, 0.05],
            SparseMatrix::from_triplets(1, 3, vec![(0, 0, 1.0), (0, 1, 1.0)]),
            vec![1.0],
            0.0,
            1e-2,
        )
        .unwrap();
        let sol = solve_relaxation(&prog, &cfg()).unwrap();
        assert!(sol.x[2] > 0.1, "x[2] = {} not interior", sol.x[2]);
        let g = differentiate_barrier(&prog, &sol, &[1.0, 1.0, 0.0]).unwrap();
        assert!(g.dl_dc[2].abs() <= 1e-6, "dl_dc[2] = {}", g.dl_dc[2]);
    }
}
