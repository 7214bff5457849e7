//! Primal-dual interior-point core shared by the LP, regularized-QP, and
//! fixed-mu barrier solves.
//!
//! Mehrotra predictor-corrector on the residuals
//!   r_dual = c + Qx - A'nu - s,  r_prim = Ax - b,  r_cent = x.s - target,
//! from the all-ones infeasible start. Each iteration factors the augmented
//! system [(Q + X^-1 S), -A'; A, 0] once (dense LU with adaptive diagonal
//! regularization and iterative refinement) and reuses the factorization for
//! the corrector.
//!
//! In homotopy mode the target barrier parameter is driven to the
//! complementarity floor; in barrier mode it is clamped at the program's mu
//! so the iterates settle on the mu-center.

use nalgebra::{DMatrix, DVector};

use super::{SolverConfig, SolverError, SolverStatus};
use crate::sparse::SparseMatrix;

pub(crate) struct IpmInput<'a> {
    pub c: &'a [f64],
    /// Diagonal of the quadratic term (2*lambda pattern); zeros for LP.
    pub quad: &'a [f64],
    pub a: &'a SparseMatrix,
    pub b: &'a [f64],
    /// Homotopy floor: the complementarity tolerance, or the barrier mu.
    pub mu_target: f64,
    /// True when the iteration should stop at the mu_target center.
    pub barrier_mode: bool,
}

pub(crate) struct IpmOutput {
    pub x: Vec<f64>,
    pub nu: Vec<f64>,
    pub s: Vec<f64>,
    pub status: SolverStatus,
    pub kkt_residual: f64,
    pub mu_final: f64,
    pub mu_history: Vec<f64>,
}

/// Largest alpha keeping v + alpha*dv >= 0.
fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    let mut a = f64::INFINITY;
    for j in 0..v.len() {
        if dv[j] < 0.0 {
            a = a.min(-v[j] / dv[j]);
        }
    }
    a
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// One factorization of the regularized augmented matrix.
struct Factorization {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    m: DMatrix<f64>,
}

impl Factorization {
    fn build(
        n: usize,
        p: usize,
        h_diag: &[f64],
        a: &SparseMatrix,
        delta: f64,
    ) -> Factorization {
        let dim = n + p;
        let mut m = DMatrix::zeros(dim, dim);
        for j in 0..n {
            m[(j, j)] = h_diag[j] + delta;
        }
        for r in 0..p {
            for (c, v) in a.row(r) {
                m[(n + r, c)] = v;
                m[(c, n + r)] = -v;
            }
            m[(n + r, n + r)] = delta;
        }
        let lu = m.clone().lu();
        Factorization { lu, m }
    }

    /// LU solve with iterative refinement; None when the factorization
    /// cannot deliver a usable solution.
    fn solve(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        let mut u = self.lu.solve(rhs)?;
        let tol = 1e-11 * (1.0 + rhs.amax());
        for _ in 0..3 {
            let res = rhs - &self.m * &u;
            if res.amax() <= tol {
                break;
            }
            let du = self.lu.solve(&res)?;
            u += du;
        }
        if u.iter().all(|v| v.is_finite()) {
            let res = rhs - &self.m * &u;
            if res.amax() <= 1e-7 * (1.0 + rhs.amax()) {
                return Some(u);
            }
        }
        None
    }
}

struct Direction {
    dx: Vec<f64>,
    dnu: Vec<f64>,
    ds: Vec<f64>,
}

fn direction(
    fac: &Factorization,
    n: usize,
    p: usize,
    x: &[f64],
    s: &[f64],
    r_d: &[f64],
    r_p: &[f64],
    r_c: &[f64],
) -> Option<Direction> {
    let mut rhs = DVector::zeros(n + p);
    for j in 0..n {
        rhs[j] = -r_d[j] - r_c[j] / x[j];
    }
    for r in 0..p {
        rhs[n + r] = -r_p[r];
    }
    let u = fac.solve(&rhs)?;
    let dx: Vec<f64> = (0..n).map(|j| u[j]).collect();
    let dnu: Vec<f64> = (0..p).map(|r| u[n + r]).collect();
    let ds: Vec<f64> = (0..n)
        .map(|j| (-r_c[j] - s[j] * dx[j]) / x[j])
        .collect();
    Some(Direction { dx, dnu, ds })
}

pub(crate) fn ipm_solve(
    input: &IpmInput,
    cfg: &SolverConfig,
    start: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
) -> Result<IpmOutput, SolverError> {
    let n = input.c.len();
    let p = input.b.len();
    if n == 0 {
        return Err(SolverError::InvalidProgram(
            "structurally empty program (no variables)".into(),
        ));
    }
    for (name, slice) in [("c", input.c), ("b", input.b), ("quad", input.quad)] {
        if slice.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::InvalidProgram(format!(
                "non-finite entry in {name}"
            )));
        }
    }

    let (mut x, mut nu, mut s) = match start {
        Some((x0, nu0, s0)) => (x0, nu0, s0),
        None => (vec![1.0; n], vec![0.0; p], vec![1.0; n]),
    };

    // Residual tolerances. LP/QP solves drive complementarity to the floor,
    // so the reported residual stays well under tol_kkt; barrier solves are
    // judged on the mu-perturbed stationarity instead.
    let eps_r = (cfg.tol_kkt * 1e-2).max(1e-12);
    let mu_floor = if input.barrier_mode {
        input.mu_target
    } else {
        // Land strictly below the complementarity tolerance.
        0.2 * input.mu_target
    };

    let mut mu_history = Vec::new();
    let mut status = SolverStatus::IterationLimit;
    let mut kkt_residual = f64::INFINITY;
    let mut mu = x.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let mut stall = 0usize;
    let deltas = [0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2];

    for _iter in 0..cfg.max_iters {
        // Residuals at the current point.
        let atnu = input.a.tr_mul_vec(&nu);
        let r_d: Vec<f64> = (0..n)
            .map(|j| input.c[j] + input.quad[j] * x[j] - atnu[j] - s[j])
            .collect();
        let ax = input.a.mul_vec(&x);
        let r_p: Vec<f64> = (0..p).map(|r| ax[r] - input.b[r]).collect();
        mu = x.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        let rp_inf = inf_norm(&r_p);
        let rd_inf = inf_norm(&r_d);

        if input.barrier_mode {
            // Stationarity of the mu-perturbed system, independent of s.
            let r_center: f64 = (0..n)
                .map(|j| {
                    (input.c[j] + input.quad[j] * x[j] - atnu[j] - input.mu_target / x[j]).abs()
                })
                .fold(0.0, f64::max);
            kkt_residual = rp_inf.max(r_center);
            if kkt_residual <= 1e-10_f64.max(eps_r * 1e-2).min(cfg.tol_kkt) {
                status = SolverStatus::Optimal;
                break;
            }
        } else {
            let xs_max = x
                .iter()
                .zip(&s)
                .map(|(a, b)| a * b)
                .fold(0.0_f64, f64::max);
            kkt_residual = rp_inf.max(rd_inf).max(xs_max);
            if rp_inf <= eps_r && rd_inf <= eps_r && mu <= input.mu_target {
                status = SolverStatus::Optimal;
                break;
            }
        }

        // The barrier centering endgame runs plain Newton on the target
        // system x.s = mu_b: near the center it converges quadratically,
        // while Mehrotra's second-order term is the same size as the target
        // there and keeps deflecting the step.
        let centering = input.barrier_mode && mu <= 1.05 * input.mu_target;

        // Factor the augmented system, escalating regularization on failure.
        let h_diag: Vec<f64> = (0..n).map(|j| input.quad[j] + s[j] / x[j]).collect();
        let mut step: Option<(Factorization, Direction, f64)> = None;
        for &delta in &deltas {
            let fac = Factorization::build(n, p, &h_diag, input.a, delta);

            if centering {
                let r_c: Vec<f64> = (0..n).map(|j| x[j] * s[j] - input.mu_target).collect();
                match direction(&fac, n, p, &x, &s, &r_d, &r_p, &r_c) {
                    Some(d) => {
                        step = Some((fac, d, input.mu_target));
                        break;
                    }
                    None => continue,
                }
            }

            // Predictor: pure Newton on complementarity target 0.
            let r_c_aff: Vec<f64> = (0..n).map(|j| x[j] * s[j]).collect();
            let aff = match direction(&fac, n, p, &x, &s, &r_d, &r_p, &r_c_aff) {
                Some(d) => d,
                None => continue,
            };
            let ap = max_step(&x, &aff.dx).min(1.0);
            let ad = max_step(&s, &aff.ds).min(1.0);
            let mu_aff = (0..n)
                .map(|j| (x[j] + ap * aff.dx[j]) * (s[j] + ad * aff.ds[j]))
                .sum::<f64>()
                / n as f64;
            let sigma = (mu_aff / mu).powi(3).clamp(1e-8, 0.99);
            let target = (sigma * mu).max(mu_floor);

            // Corrector with Mehrotra's second-order term.
            let r_c: Vec<f64> = (0..n)
                .map(|j| x[j] * s[j] + aff.dx[j] * aff.ds[j] - target)
                .collect();
            match direction(&fac, n, p, &x, &s, &r_d, &r_p, &r_c) {
                Some(d) => {
                    step = Some((fac, d, target));
                    break;
                }
                None => continue,
            }
        }
        let (fac, mut dir, target) = match step {
            Some(s) => s,
            None => {
                return Err(SolverError::Numerical(
                    "augmented KKT system unsolvable at every regularization level".into(),
                ))
            }
        };

        let mut alpha_p = (cfg.step_fraction * max_step(&x, &dir.dx)).min(1.0);
        let mut alpha_d = (cfg.step_fraction * max_step(&s, &dir.ds)).min(1.0);

        // Keep the homotopy strictly monotone: while mu sits above the
        // current target it must decrease, and barrier mode must not
        // overshoot below its center. The barrier centering endgame and the
        // sub-target regime polish residuals instead, with free steps.
        let needs_decrease = !centering && mu > target * (1.0 + 1e-9);
        let mut backtrack_failed = false;
        if needs_decrease {
            let try_shrink = |mut ap: f64, mut ad: f64, d: &Direction| -> Option<(f64, f64)> {
                for _ in 0..=50 {
                    let mu_new = (0..n)
                        .map(|j| (x[j] + ap * d.dx[j]) * (s[j] + ad * d.ds[j]))
                        .sum::<f64>()
                        / n as f64;
                    let decreasing = mu_new < mu * (1.0 - 1e-12);
                    let overshoot =
                        input.barrier_mode && mu_new < input.mu_target * (1.0 - 1e-9);
                    if decreasing && !overshoot {
                        return Some((ap, ad));
                    }
                    ap *= 0.7;
                    ad *= 0.7;
                }
                None
            };
            match try_shrink(alpha_p, alpha_d, &dir) {
                Some((ap, ad)) => {
                    alpha_p = ap;
                    alpha_d = ad;
                }
                None => {
                    // The second-order term can point uphill in mu from a
                    // cold start. Fall back to the plain centering direction
                    // with a common step: its mu derivative at zero is
                    // target - mu < 0, so a decreasing step exists.
                    let r_c: Vec<f64> = (0..n).map(|j| x[j] * s[j] - target).collect();
                    let fallback = direction(&fac, n, p, &x, &s, &r_d, &r_p, &r_c)
                        .and_then(|d| {
                            let a0 = (cfg.step_fraction * max_step(&x, &d.dx))
                                .min(cfg.step_fraction * max_step(&s, &d.ds))
                                .min(1.0);
                            try_shrink(a0, a0, &d).map(|(ap, ad)| (d, ap, ad))
                        });
                    match fallback {
                        Some((d, ap, ad)) => {
                            dir = d;
                            alpha_p = ap;
                            alpha_d = ad;
                        }
                        None => backtrack_failed = true,
                    }
                }
            }
        }

        if !backtrack_failed {
            for j in 0..n {
                x[j] += alpha_p * dir.dx[j];
                s[j] += alpha_d * dir.ds[j];
            }
            for r in 0..p {
                nu[r] += alpha_d * dir.dnu[r];
            }
            mu = x.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        }
        mu_history.push(mu);

        // Divergence and stall guards.
        let xnorm = inf_norm(&x);
        if xnorm > 1e13 {
            let obj: f64 = input.c.iter().zip(&x).map(|(c, v)| c * v).sum();
            status = if obj < -1e8 {
                SolverStatus::Unbounded
            } else {
                SolverStatus::IterationLimit
            };
            break;
        }
        if backtrack_failed || (alpha_p.max(alpha_d) < 1e-9 && target > mu_floor) {
            stall += 1;
            if stall >= 3 {
                break;
            }
        } else {
            stall = 0;
        }
    }

    // Barrier solutions report the canonical center duals s = mu X^-1.
    if input.barrier_mode && status == SolverStatus::Optimal {
        for j in 0..n {
            s[j] = input.mu_target / x[j];
        }
    }

    Ok(IpmOutput {
        x,
        nu,
        s,
        status,
        kkt_residual,
        mu_final: mu,
        mu_history,
    })
}
