//! Interior-point solves of the convex relaxations, branch-and-bound over
//! that core for the MILP, and a brute-force enumeration oracle for tiny
//! instances.
//!
//! One Newton core serves three uses: the LP relaxation, the regularized QP,
//! and the fixed-mu barrier center. Infeasibility is certified by a phase-1
//! artificial-variable LP rather than guessed from stalls.

mod bnb;
mod ipm;
mod oracle;

pub use bnb::branch_and_bound;
pub use oracle::brute_force_oracle;

use thiserror::Error;

use crate::model::{evaluate_objective, ModelError, ObjectiveMode, StandardFormProgram};
use crate::sparse::SparseMatrix;
use ipm::{ipm_solve, IpmInput, IpmOutput};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid program: {0}")]
    InvalidProgram(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("instance too large for oracle: {0}")]
    TooLarge(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

impl std::fmt::Display for SolverStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolverStatus::Optimal => "optimal",
            SolverStatus::Infeasible => "infeasible",
            SolverStatus::Unbounded => "unbounded",
            SolverStatus::IterationLimit => "iteration_limit",
        };
        f.write_str(s)
    }
}

/// Primal-dual point returned by every solve.
///
/// `objective` is the optimized objective for LP and regularized programs;
/// barrier solves report the linear cost at the center (the barrier term is
/// algorithmic, not part of the plan cost). Infeasible solutions carry
/// +infinity, unbounded ones -infinity.
#[derive(Debug, Clone)]
pub struct Solution {
    pub x: Vec<f64>,
    pub nu: Vec<f64>,
    pub s_dual: Vec<f64>,
    pub objective: f64,
    pub status: SolverStatus,
    pub kkt_residual: f64,
    pub mu_final: f64,
    /// Barrier parameter after each accepted iteration, for homotopy
    /// monotonicity checks.
    pub mu_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub tol_kkt: f64,
    pub max_iters: usize,
    /// Fraction-to-boundary step scaling.
    pub step_fraction: f64,
    pub bnb_int_tol: f64,
    pub bnb_node_limit: usize,
    pub bnb_gap_tol: f64,
    /// Complementarity floor the homotopy drives to. Kept well below
    /// bnb_gap_tol so duality-gap noise never breaks bound comparisons.
    pub comp_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol_kkt: 1e-8,
            max_iters: 200,
            step_fraction: 0.995,
            bnb_int_tol: 1e-6,
            bnb_node_limit: 100_000,
            bnb_gap_tol: 1e-9,
            comp_tol: 1e-11,
        }
    }
}

impl SolverConfig {
    fn check(&self) -> Result<(), SolverError> {
        let positive = [
            self.tol_kkt,
            self.bnb_int_tol,
            self.bnb_gap_tol,
            self.comp_tol,
        ];
        if positive.iter().any(|&v| v <= 0.0) || self.max_iters == 0 {
            return Err(SolverError::InvalidProgram(
                "solver tolerances must be positive".into(),
            ));
        }
        if !(self.step_fraction > 0.0 && self.step_fraction < 1.0) {
            return Err(SolverError::InvalidProgram(
                "step_fraction must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Reduced problem data shared by the direct and phase-1 solves.
struct CoreProblem<'a> {
    c: &'a [f64],
    quad: &'a [f64],
    a: &'a SparseMatrix,
    b: &'a [f64],
    mu_target: f64,
    barrier_mode: bool,
}

/// Minimum artificial mass needed to satisfy Ax = b, x >= 0: zero iff the
/// system is feasible. Returns None when the certification solve itself did
/// not converge.
fn phase1(a: &SparseMatrix, b: &[f64], cfg: &SolverConfig) -> Result<Option<f64>, SolverError> {
    let n = a.ncols();
    let p = a.nrows();
    let pos = SparseMatrix::from_triplets(p, p, (0..p).map(|i| (i, i, 1.0)));
    let neg = SparseMatrix::from_triplets(p, p, (0..p).map(|i| (i, i, -1.0)));
    let a1 = a.hstack(&pos).hstack(&neg);
    let mut c1 = vec![0.0; n];
    c1.extend(std::iter::repeat(1.0).take(2 * p));
    let quad = vec![0.0; n + 2 * p];

    // Strictly interior start: x = 1 and artificials absorbing the residual.
    let ones = vec![1.0; n];
    let r = {
        let ax = a.mul_vec(&ones);
        (0..p).map(|i| b[i] - ax[i]).collect::<Vec<f64>>()
    };
    let mut x0 = ones;
    x0.extend(r.iter().map(|v| v.max(0.0) + 1.0));
    x0.extend(r.iter().map(|v| (-v).max(0.0) + 1.0));
    let start = Some((x0, vec![0.0; p], vec![1.0; n + 2 * p]));

    let input = IpmInput {
        c: &c1,
        quad: &quad,
        a: &a1,
        b,
        mu_target: cfg.comp_tol,
        barrier_mode: false,
    };
    let out = ipm_solve(&input, cfg, start)?;
    if out.status == SolverStatus::Optimal {
        let obj: f64 = c1.iter().zip(&out.x).map(|(c, v)| c * v).sum();
        Ok(Some(obj))
    } else {
        Ok(None)
    }
}

/// Direct interior-point solve with phase-1 certification on stall.
fn solve_core(prob: &CoreProblem, cfg: &SolverConfig) -> Result<IpmOutput, SolverError> {
    let input = IpmInput {
        c: prob.c,
        quad: prob.quad,
        a: prob.a,
        b: prob.b,
        mu_target: prob.mu_target,
        barrier_mode: prob.barrier_mode,
    };
    let mut direct = ipm_solve(&input, cfg, None)?;
    if matches!(
        direct.status,
        SolverStatus::Optimal | SolverStatus::Unbounded
    ) || prob.b.is_empty()
    {
        return Ok(direct);
    }
    match phase1(prob.a, prob.b, cfg)? {
        Some(infeas) if infeas > 1e-7 => {
            direct.status = SolverStatus::Infeasible;
            Ok(direct)
        }
        _ => {
            // Feasible (or uncertified): one slower retry, then report
            // honestly whatever it reached.
            let retry_cfg = SolverConfig {
                max_iters: cfg.max_iters * 3,
                ..cfg.clone()
            };
            ipm_solve(&input, &retry_cfg, None)
        }
    }
}

fn check_program(prog: &StandardFormProgram) -> Result<(), SolverError> {
    // Zero constraints is legal (box-only programs); zero variables is not.
    if prog.n_vars() == 0 {
        return Err(SolverError::InvalidProgram(
            "structurally empty program".into(),
        ));
    }
    if prog.quad_weight < 0.0 || prog.barrier_weight < 0.0 {
        return Err(SolverError::InvalidProgram(
            "negative quadratic or barrier weight".into(),
        ));
    }
    Ok(())
}

fn objective_mode(prog: &StandardFormProgram) -> ObjectiveMode {
    if prog.quad_weight > 0.0 {
        ObjectiveMode::Regularized
    } else {
        // Barrier solutions report the linear cost at the center.
        ObjectiveMode::Linear
    }
}

fn finish(prog: &StandardFormProgram, out: IpmOutput) -> Solution {
    let objective = match out.status {
        SolverStatus::Infeasible => f64::INFINITY,
        SolverStatus::Unbounded => f64::NEG_INFINITY,
        _ => evaluate_objective(prog, &out.x, objective_mode(prog)).unwrap_or(f64::NAN),
    };
    Solution {
        x: out.x,
        nu: out.nu,
        s_dual: out.s,
        objective,
        status: out.status,
        kkt_residual: out.kkt_residual,
        mu_final: out.mu_final,
        mu_history: out.mu_history,
    }
}

/// Solves the continuous relaxation (or the fixed-mu barrier center when the
/// program carries a barrier weight).
pub fn solve_relaxation(
    prog: &StandardFormProgram,
    cfg: &SolverConfig,
) -> Result<Solution, SolverError> {
    check_program(prog)?;
    cfg.check()?;
    let quad: Vec<f64> = (0..prog.n_vars()).map(|j| prog.quad_diag(j)).collect();
    let barrier = prog.barrier_weight > 0.0;
    let prob = CoreProblem {
        c: &prog.c,
        quad: &quad,
        a: &prog.a,
        b: &prog.b,
        mu_target: if barrier {
            prog.barrier_weight
        } else {
            cfg.comp_tol
        },
        barrier_mode: barrier,
    };
    let out = solve_core(&prob, cfg)?;
    Ok(finish(prog, out))
}

/// Outcome of constraint propagation over a set of variable fixings.
struct Reduction {
    /// Per original column: the pinned value, or None if still free.
    fixed: Vec<Option<f64>>,
    row_keep: Vec<bool>,
    feasible: bool,
}

/// Propagates fixings through the constraints: empty rows are checked and
/// dropped, singleton rows pin their last variable, and zero-RHS rows whose
/// live coefficients share one sign force those variables to zero. This
/// restores a strict interior after integer fixings (a fixed visit forces
/// its delivery and linking slack to exact zero, which no interior method
/// can represent).
fn presolve(prog: &StandardFormProgram, fixings: &[(usize, f64)]) -> Result<Reduction, SolverError> {
    let n = prog.n_vars();
    let p = prog.n_rows();
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    for &(j, v) in fixings {
        if j >= n {
            return Err(SolverError::InvalidProgram(format!(
                "fixing index {j} out of range"
            )));
        }
        if let Some(old) = fixed[j] {
            if (old - v).abs() > 1e-12 {
                return Ok(Reduction {
                    fixed,
                    row_keep: vec![true; p],
                    feasible: false,
                });
            }
        }
        fixed[j] = Some(v);
    }
    let mut row_keep = vec![true; p];
    let eps = 1e-9;
    loop {
        let mut changed = false;
        for r in 0..p {
            if !row_keep[r] {
                continue;
            }
            let mut b_eff = prog.b[r];
            let mut live: Vec<(usize, f64)> = Vec::new();
            for (j, w) in prog.a.row(r) {
                match fixed[j] {
                    Some(v) => b_eff -= w * v,
                    None => live.push((j, w)),
                }
            }
            if live.is_empty() {
                if b_eff.abs() > eps {
                    return Ok(Reduction {
                        fixed,
                        row_keep,
                        feasible: false,
                    });
                }
                row_keep[r] = false;
                changed = true;
            } else if live.len() == 1 {
                let (j, w) = live[0];
                let v = b_eff / w;
                if v < -eps {
                    return Ok(Reduction {
                        fixed,
                        row_keep,
                        feasible: false,
                    });
                }
                fixed[j] = Some(v.max(0.0));
                row_keep[r] = false;
                changed = true;
            } else {
                let all_pos = live.iter().all(|&(_, w)| w > 0.0);
                let all_neg = live.iter().all(|&(_, w)| w < 0.0);
                if (all_pos && b_eff < -eps) || (all_neg && b_eff > eps) {
                    return Ok(Reduction {
                        fixed,
                        row_keep,
                        feasible: false,
                    });
                }
                if (all_pos || all_neg) && b_eff.abs() <= eps {
                    for &(j, _) in &live {
                        fixed[j] = Some(0.0);
                    }
                    row_keep[r] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(Reduction {
        fixed,
        row_keep,
        feasible: true,
    })
}

/// Solves the program with the given variables pinned to values, shrinking
/// the system by constraint propagation first. Used by branch-and-bound
/// nodes, the integer polish, and the brute-force oracle.
pub fn solve_with_fixings(
    prog: &StandardFormProgram,
    fixings: &[(usize, f64)],
    cfg: &SolverConfig,
) -> Result<Solution, SolverError> {
    check_program(prog)?;
    cfg.check()?;
    if fixings.is_empty() {
        return solve_relaxation(prog, cfg);
    }
    let red = presolve(prog, fixings)?;
    if !red.feasible {
        return Ok(Solution {
            x: vec![0.0; prog.n_vars()],
            nu: vec![0.0; prog.n_rows()],
            s_dual: vec![0.0; prog.n_vars()],
            objective: f64::INFINITY,
            status: SolverStatus::Infeasible,
            kkt_residual: f64::INFINITY,
            mu_final: 0.0,
            mu_history: Vec::new(),
        });
    }

    let n = prog.n_vars();
    let p = prog.n_rows();
    let mut col_map: Vec<Option<usize>> = vec![None; n];
    let mut kept_cols = Vec::new();
    for j in 0..n {
        if red.fixed[j].is_none() {
            col_map[j] = Some(kept_cols.len());
            kept_cols.push(j);
        }
    }
    let kept_rows: Vec<usize> = (0..p).filter(|&r| red.row_keep[r]).collect();

    let mut x_full: Vec<f64> = (0..n).map(|j| red.fixed[j].unwrap_or(0.0)).collect();
    let mut nu_full = vec![0.0; p];

    let (out_status, out_kkt, out_mu, out_hist) = if kept_cols.is_empty() {
        // Fully determined by propagation; kept rows were all dropped.
        (SolverStatus::Optimal, 0.0, 0.0, Vec::new())
    } else if kept_rows.is_empty() {
        // Unconstrained separable problem over the free variables.
        for &j in &kept_cols {
            let q = prog.quad_diag(j);
            x_full[j] = if q > 0.0 {
                (-prog.c[j] / q).max(0.0)
            } else if prog.c[j] >= 0.0 {
                0.0
            } else {
                return Ok(Solution {
                    x: x_full,
                    nu: nu_full,
                    s_dual: vec![0.0; n],
                    objective: f64::NEG_INFINITY,
                    status: SolverStatus::Unbounded,
                    kkt_residual: 0.0,
                    mu_final: 0.0,
                    mu_history: Vec::new(),
                });
            };
        }
        (SolverStatus::Optimal, 0.0, 0.0, Vec::new())
    } else {
        // Assemble the reduced system.
        let mut triplets = Vec::new();
        let mut b_red = Vec::with_capacity(kept_rows.len());
        for (rr, &r) in kept_rows.iter().enumerate() {
            let mut b_eff = prog.b[r];
            for (j, w) in prog.a.row(r) {
                match col_map[j] {
                    Some(jj) => triplets.push((rr, jj, w)),
                    None => b_eff -= w * x_full[j],
                }
            }
            b_red.push(b_eff);
        }
        let a_red = SparseMatrix::from_triplets(kept_rows.len(), kept_cols.len(), triplets);
        let c_red: Vec<f64> = kept_cols.iter().map(|&j| prog.c[j]).collect();
        let quad_red: Vec<f64> = kept_cols.iter().map(|&j| prog.quad_diag(j)).collect();
        let barrier = prog.barrier_weight > 0.0;
        let prob = CoreProblem {
            c: &c_red,
            quad: &quad_red,
            a: &a_red,
            b: &b_red,
            mu_target: if barrier {
                prog.barrier_weight
            } else {
                cfg.comp_tol
            },
            barrier_mode: barrier,
        };
        let out = solve_core(&prob, cfg)?;
        for (jj, &j) in kept_cols.iter().enumerate() {
            x_full[j] = out.x[jj];
        }
        for (rr, &r) in kept_rows.iter().enumerate() {
            nu_full[r] = out.nu[rr];
        }
        (out.status, out.kkt_residual, out.mu_final, out.mu_history)
    };

    let atnu = prog.a.tr_mul_vec(&nu_full);
    let s_full: Vec<f64> = (0..n)
        .map(|j| prog.c[j] + prog.quad_diag(j) * x_full[j] - atnu[j])
        .collect();
    let objective = match out_status {
        SolverStatus::Infeasible => f64::INFINITY,
        SolverStatus::Unbounded => f64::NEG_INFINITY,
        _ => evaluate_objective(prog, &x_full, objective_mode(prog)).unwrap_or(f64::NAN),
    };
    Ok(Solution {
        x: x_full,
        nu: nu_full,
        s_dual: s_full,
        objective,
        status: out_status,
        kkt_residual: out_kkt,
        mu_final: out_mu,
        mu_history: out_hist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::tiny2x2;
    use crate::model::{build_standard_form, Variant};

    fn raw_lp(c: Vec<f64>, triplets: Vec<(usize, usize, f64)>, b: Vec<f64>) -> StandardFormProgram {
        let p = b.len();
        let n = c.len();
        StandardFormProgram::from_raw_parts(
            c,
            SparseMatrix::from_triplets(p, n, triplets),
            b,
            0.0,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn simplex_vertex_lp() {
        // min x1 s.t. x1 + x2 = 1.
        let prog = raw_lp(
            vec![1.0, 0.0],
            vec![(0, 0, 1.0), (0, 1, 1.0)],
            vec![1.0],
        );
        let sol = solve_relaxation(&prog, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolverStatus::Optimal);
        assert!(sol.objective.abs() <= 1e-8, "objective {}", sol.objective);
        assert!(sol.x[0] <= 1e-8);
        assert!((sol.x[1] - 1.0).abs() <= 1e-7);
        assert!(sol.kkt_residual <= 1e-8);
    }

    #[test]
    fn symmetric_qp_splits_evenly() {
        // min ||x||^2 s.t. x1 + x2 = 1 (lambda = 1, c = 0).
        let mut prog = raw_lp(vec![0.0, 0.0], vec![(0, 0, 1.0), (0, 1, 1.0)], vec![1.0]);
        prog.quad_weight = 1.0;
        let sol = solve_relaxation(&prog, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolverStatus::Optimal);
        assert!((sol.x[0] - 0.5).abs() <= 1e-7);
        assert!((sol.x[1] - 0.5).abs() <= 1e-7);
        assert!((sol.objective - 0.5).abs() <= 1e-6);
    }

    #[test]
    fn barrier_center_of_unit_simplex() {
        // min 0 s.t. x1 + x2 = 1 at mu = 0.1: the center is (0.5, 0.5).
        let mut prog = raw_lp(vec![0.0, 0.0], vec![(0, 0, 1.0), (0, 1, 1.0)], vec![1.0]);
        prog.barrier_weight = 0.1;
        let sol = solve_relaxation(&prog, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolverStatus::Optimal);
        assert!((sol.x[0] - 0.5).abs() <= 1e-8, "x = {:?}", sol.x);
        assert!((sol.x[1] - 0.5).abs() <= 1e-8);
        assert!((sol.mu_final - 0.1).abs() <= 0.1 * 0.05);
    }

    #[test]
    fn homotopy_mu_strictly_decreases_until_tolerance() {
        let inst = tiny2x2();
        let prog = build_standard_form(&inst, &inst.demand, Variant::Plain).unwrap();
        let cfg = SolverConfig::default();
        let sol = solve_relaxation(&prog, &cfg).unwrap();
        assert_eq!(sol.status, SolverStatus::Optimal);
        let mus = &sol.mu_history;
        assert!(mus.len() >= 3);
        for w in mus.windows(2) {
            if w[0] <= cfg.comp_tol {
                break;
            }
            assert!(w[1] < w[0], "mu failed to decrease: {} -> {}", w[0], w[1]);
        }
        assert!(sol.mu_final <= cfg.comp_tol * 1.01);
    }

    #[test]
    fn tiny2x2_relaxation_is_feasible_and_tight() {
        let inst = tiny2x2();
        let prog = build_standard_form(&inst, &inst.demand, Variant::Plain).unwrap();
        let sol = solve_relaxation(&prog, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolverStatus::Optimal);
        assert!(sol.kkt_residual <= 1e-8);
        let ax = prog.a.mul_vec(&sol.x);
        let rp = ax
            .iter()
            .zip(&prog.b)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        assert!(rp <= 1e-8, "primal residual {rp}");
        assert!(sol.x.iter().all(|&v| v >= -1e-9));
    }

    #[test]
    fn infeasible_demand_is_certified() {
        let mut inst = tiny2x2();
        inst.demand = crate::instance::DemandMatrix::from_rows(vec![
            vec![30.0, 30.0],
            vec![30.0, 30.0],
        ]);
        let prog = build_standard_form(&inst, &inst.demand, Variant::Plain).unwrap();
        let sol = solve_relaxation(&prog, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolverStatus::Infeasible);
        assert!(sol.objective.is_infinite());
    }

    #[test]
    fn fixings_propagate_forced_zeros() {
        let inst = tiny2x2();
        let prog = build_standard_form(&inst, &inst.demand, Variant::Plain).unwrap();
        let l = prog.layout.clone();
        // No visits at all: demand cannot be met, node is infeasible.
        let mut fixings = Vec::new();
        for k in 0..3 {
            for t in 0..2 {
                fixings.push((l.z_index(k, t), 0.0));
            }
        }
        let sol = solve_with_fixings(&prog, &fixings, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolverStatus::Infeasible);

        // Visiting both customers every day via the pair route is feasible.
        let mut fixings = vec![
            (l.z_index(0, 0), 0.0),
            (l.z_index(0, 1), 0.0),
            (l.z_index(1, 0), 0.0),
            (l.z_index(1, 1), 0.0),
            (l.z_index(2, 0), 1.0),
            (l.z_index(2, 1), 1.0),
        ];
        for i in 0..2 {
            for t in 0..2 {
                fixings.push((l.y_index(i, t), 1.0));
            }
        }
        let sol = solve_with_fixings(&prog, &fixings, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolverStatus::Optimal);
        // Both periods use the pair route: routing 36 plus holding.
        assert!(sol.objective >= 36.0);
        for k in 0..3 {
            for t in 0..2 {
                let want = if k == 2 { 1.0 } else { 0.0 };
                assert!((sol.x[l.z_index(k, t)] - want).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn empty_program_is_rejected() {
        let prog = StandardFormProgram::from_raw_parts(
            Vec::new(),
            SparseMatrix::from_triplets(0, 0, Vec::new()),
            Vec::new(),
            0.0,
            0.0,
        )
        .unwrap();
        assert!(matches!(
            solve_relaxation(&prog, &SolverConfig::default()),
            Err(SolverError::InvalidProgram(_))
        ));
    }
}
