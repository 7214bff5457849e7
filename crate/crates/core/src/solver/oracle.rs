//! Exhaustive route-pattern enumeration for tiny instances, used as an
//! independent check on branch-and-bound.

use super::{solve_with_fixings, Solution, SolverConfig, SolverError, SolverStatus};
use crate::model::StandardFormProgram;

const MAX_ROUTE_BITS: usize = 20;
const MAX_VISIT_CELLS: usize = 16;

/// Enumerates all 2^(K*T) route patterns of an instance-derived program.
/// For each pattern the route block is pinned; with an unlimited visit
/// budget the visit block is pinned to the coverage indicator (exact, since
/// visits are free and only relax constraints), otherwise visits are
/// relaxed, rounded to the delivery support, and capped at the budget. The
/// surviving continuous program is solved by the interior-point core.
pub fn brute_force_oracle(
    prog: &StandardFormProgram,
    cfg: &SolverConfig,
) -> Result<Solution, SolverError> {
    let l = &prog.layout;
    if l.n_customers == 0 {
        return Err(SolverError::InvalidProgram(
            "oracle requires an instance-derived program".into(),
        ));
    }
    if prog.quad_weight != 0.0 || prog.barrier_weight != 0.0 {
        return Err(SolverError::InvalidProgram(
            "oracle runs on the plain variant".into(),
        ));
    }
    let (n, t, k) = (l.n_customers, l.horizon, l.n_routes);
    if k * t > MAX_ROUTE_BITS || n * t > MAX_VISIT_CELLS {
        return Err(SolverError::TooLarge(format!(
            "K*T = {} exceeds {MAX_ROUTE_BITS} or N*T = {} exceeds {MAX_VISIT_CELLS}",
            k * t,
            n * t
        )));
    }

    // Instance data read back from the program: demand and initial
    // inventory from the E1 right-hand sides, capacities from I1/I2.
    let demand = |i: usize, tt: usize| {
        let r = prog.rows.e1.start + i * t + tt;
        prog.b0[r] - prog.b[r]
    };
    let initial = |i: usize| prog.b0[prog.rows.e1.start + i * t];
    let cap_customer = |i: usize| prog.b0[prog.rows.i1.start + i * t];
    let cap_vehicle = prog.b0[prog.rows.i2.start];
    let visit_budget = if prog.rows.i5.is_empty() {
        None
    } else {
        Some(prog.b0[prog.rows.i5.start])
    };
    // Route incidence from the I4 coefficients on the z block.
    let mut covers = vec![vec![false; k]; n];
    for i in 0..n {
        let row = prog.rows.i4.start + i * t;
        for (col, w) in prog.a.row(row) {
            if w < 0.0 && col >= l.z_offset && col < l.z_offset + k * t {
                let kk = (col - l.z_offset) / t;
                covers[i][kk] = true;
            }
        }
    }
    // Cost-based pruning is sound only for nonnegative objectives.
    let prune_by_cost = prog.c.iter().all(|&c| c >= 0.0);

    let bits = k * t;
    let mut best: Option<Solution> = None;
    let mut z = vec![vec![0.0_f64; t]; k];

    'patterns: for pattern in 0u64..(1u64 << bits) {
        let mut routing = 0.0;
        for kk in 0..k {
            for tt in 0..t {
                let on = (pattern >> (kk * t + tt)) & 1 == 1;
                z[kk][tt] = if on { 1.0 } else { 0.0 };
                if on {
                    routing += prog.c[l.z_index(kk, tt)];
                }
            }
        }
        if prune_by_cost {
            if let Some(b) = &best {
                if routing >= b.objective - 1e-12 {
                    continue;
                }
            }
        }

        let covered = |i: usize, tt: usize| (0..k).any(|kk| covers[i][kk] && z[kk][tt] == 1.0);

        // Deliverability screen: cumulative demand must stay coverable by
        // per-visit delivery capacity plus initial stock.
        for i in 0..n {
            let mut cum = initial(i);
            let per_visit = cap_customer(i).min(cap_vehicle);
            for tt in 0..t {
                if covered(i, tt) {
                    cum += per_visit;
                }
                cum -= demand(i, tt);
                if cum < -1e-6 {
                    continue 'patterns;
                }
            }
        }

        let mut fixings: Vec<(usize, f64)> = Vec::new();
        for kk in 0..k {
            for tt in 0..t {
                fixings.push((l.z_index(kk, tt), z[kk][tt]));
            }
        }

        let candidate = match visit_budget {
            None => {
                // Free visits only relax constraints: pin to coverage.
                for i in 0..n {
                    for tt in 0..t {
                        let y = if covered(i, tt) { 1.0 } else { 0.0 };
                        fixings.push((l.y_index(i, tt), y));
                    }
                }
                solve_with_fixings(prog, &fixings, cfg)?
            }
            Some(budget) => {
                let relaxed = solve_with_fixings(prog, &fixings, cfg)?;
                if relaxed.status != SolverStatus::Optimal {
                    continue;
                }
                // Round visits onto the delivery support, largest first
                // under the budget.
                for tt in 0..t {
                    let mut active: Vec<(usize, f64)> = (0..n)
                        .filter(|&i| covered(i, tt))
                        .map(|i| (i, relaxed.x[l.q_index(i, tt)]))
                        .filter(|&(_, q)| q > 1e-7)
                        .collect();
                    active.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    active.truncate(budget as usize);
                    let chosen: Vec<usize> = active.iter().map(|&(i, _)| i).collect();
                    for i in 0..n {
                        let y = if chosen.contains(&i) { 1.0 } else { 0.0 };
                        fixings.push((l.y_index(i, tt), y));
                    }
                }
                solve_with_fixings(prog, &fixings, cfg)?
            }
        };

        if candidate.status == SolverStatus::Optimal {
            let better = best
                .as_ref()
                .map(|b| candidate.objective < b.objective - 1e-12)
                .unwrap_or(true);
            if better {
                best = Some(candidate);
            }
        }
    }

    match best {
        Some(sol) => Ok(sol),
        None => Ok(Solution {
            x: vec![0.0; prog.n_vars()],
            nu: vec![0.0; prog.n_rows()],
            s_dual: vec![0.0; prog.n_vars()],
            objective: f64::INFINITY,
            status: SolverStatus::Infeasible,
            kkt_residual: f64::INFINITY,
            mu_final: 0.0,
            mu_history: Vec::new(),
        }),
    }
}
