//! Best-first branch-and-bound over the LP relaxation.
//!
//! Nodes are ordered by relaxation bound; branching picks the masked
//! variable with fractional part nearest 0.5 (lowest index on ties) so the
//! search is reproducible. Integer-feasible nodes are polished by re-solving
//! with every masked variable pinned to its rounded value, which makes the
//! incumbent exactly integral.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{solve_relaxation, solve_with_fixings, Solution, SolverConfig, SolverError, SolverStatus};
use crate::model::StandardFormProgram;

// Exploration threshold, deliberately tighter than bnb_gap_tol: nodes are
// pruned only when they provably cannot improve the incumbent beyond solver
// noise, keeping the reported optimum within bnb_gap_tol.
const PRUNE_EPS: f64 = 1e-12;

struct Node {
    bound: f64,
    seq: usize,
    fixings: Vec<(usize, f64)>,
    sol: Solution,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.bound == other.bound && self.seq == other.seq
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // BinaryHeap is a max-heap; reverse so the smallest bound pops first,
    // FIFO among equal bounds.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Masked variable with fractional part nearest 0.5, or None when every
/// masked variable is within int_tol of an integer.
fn most_fractional(x: &[f64], mask: &[bool], int_tol: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for j in 0..x.len() {
        if !mask[j] {
            continue;
        }
        let frac = x[j] - x[j].floor();
        if frac.min(1.0 - frac) <= int_tol {
            continue;
        }
        let score = (frac - 0.5).abs();
        match best {
            Some((_, s)) if s <= score => {}
            _ => best = Some((j, score)),
        }
    }
    best.map(|(j, _)| j)
}

/// Solves the MILP over the plain LP core.
pub fn branch_and_bound(
    prog: &StandardFormProgram,
    cfg: &SolverConfig,
) -> Result<Solution, SolverError> {
    if prog.quad_weight != 0.0 || prog.barrier_weight != 0.0 {
        return Err(SolverError::InvalidProgram(
            "branch and bound runs on the plain LP core (no quadratic or barrier term)".into(),
        ));
    }
    let root = solve_relaxation(prog, cfg)?;
    match root.status {
        SolverStatus::Optimal => {}
        // Infeasible, unbounded, or stalled roots are reported as-is.
        _ => return Ok(root),
    }

    let mut heap = BinaryHeap::new();
    let mut seq = 0usize;
    heap.push(Node {
        bound: root.objective,
        seq,
        fixings: Vec::new(),
        sol: root,
    });
    let mut incumbent: Option<Solution> = None;
    let mut nodes = 0usize;

    while let Some(node) = heap.pop() {
        if let Some(inc) = &incumbent {
            // Best-first: the minimum remaining bound cannot improve on the
            // incumbent, so the incumbent is optimal.
            if node.bound >= inc.objective - PRUNE_EPS {
                break;
            }
        }
        nodes += 1;
        if nodes > cfg.bnb_node_limit {
            let mut sol = incumbent.unwrap_or(node.sol);
            sol.status = SolverStatus::IterationLimit;
            return Ok(sol);
        }

        let branch = most_fractional(&node.sol.x, &prog.integrality, cfg.bnb_int_tol);
        let j = match branch {
            None => {
                // Integral within tolerance: pin all masked variables to
                // their rounded values and re-solve for an exact incumbent.
                let fix_all: Vec<(usize, f64)> = (0..prog.n_vars())
                    .filter(|&j| prog.integrality[j])
                    .map(|j| (j, node.sol.x[j].round()))
                    .collect();
                let polished = solve_with_fixings(prog, &fix_all, cfg)?;
                let candidate = if polished.status == SolverStatus::Optimal {
                    polished
                } else {
                    // Numerically stuck polish: fall back to the node point.
                    log::debug!("polish failed with status {}", polished.status);
                    node.sol
                };
                let better = incumbent
                    .as_ref()
                    .map(|inc| candidate.objective < inc.objective)
                    .unwrap_or(true);
                if better {
                    incumbent = Some(candidate);
                }
                continue;
            }
            Some(j) => j,
        };

        let v = node.sol.x[j];
        for val in [v.floor(), v.ceil()] {
            let mut fixings = node.fixings.clone();
            fixings.push((j, val));
            let sol = solve_with_fixings(prog, &fixings, cfg)?;
            match sol.status {
                SolverStatus::Infeasible => {}
                SolverStatus::Optimal => {
                    let worth = incumbent
                        .as_ref()
                        .map(|inc| sol.objective < inc.objective - PRUNE_EPS)
                        .unwrap_or(true);
                    if worth {
                        seq += 1;
                        heap.push(Node {
                            bound: sol.objective,
                            seq,
                            fixings,
                            sol,
                        });
                    }
                }
                _ => {
                    // Unresolved node: keep exploring it ahead of everything
                    // so an inexact bound can never prune the optimum.
                    seq += 1;
                    heap.push(Node {
                        bound: f64::NEG_INFINITY,
                        seq,
                        fixings,
                        sol,
                    });
                }
            }
        }
    }

    match incumbent {
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
