//! Two-stage and decision-focused training loops, the two regret metrics,
//! and the regret-vs-error sweep.
//!
//! Two regrets coexist on purpose. `objective_regret` perturbs only the
//! cost vector over a shared feasible set, so it is provably nonnegative.
//! `realized_regret` plans under predicted demand and then simulates the
//! plan against the true demand with shortage and overflow penalties;
//! demand error lives in the right-hand side, so this one can only be
//! evaluated by simulation. Training differentiates the continuous
//! relaxation; every evaluation solves the full MILP.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::diffopt::{differentiate_barrier, differentiate_qp, DiffError, DiffMethod};
use crate::instance::{generate_instance, DemandMatrix, InstanceError, IrpInstance};
use crate::model::{build_standard_form, ModelError, StandardFormProgram, Variant};
use crate::predictor::{
    adam_step, feature_dim, AdamState, DataRecord, Dataset, DemandModel, HiddenActivation,
    OutputActivation, PredictorError, Split,
};
use crate::solver::{
    branch_and_bound, solve_relaxation, Solution, SolverConfig, SolverError, SolverStatus,
};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("regret undefined: {0}")]
    Infeasible(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite loss at epoch {epoch}: {message}")]
    NonFinite { epoch: usize, message: String },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    TwoStage,
    Dfl,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub lr: f64,
    /// Relaxation regularizer for the DFL QP path.
    pub lambda: f64,
    pub diff_method: DiffMethod,
    /// Barrier parameter for the DFL barrier path.
    pub mu: f64,
    /// None derives 10 * max holding cost * horizon per instance.
    pub shortage_penalty: Option<f64>,
    /// None falls back to the shortage penalty.
    pub overflow_penalty: Option<f64>,
    /// Smooth shortage term added to the paper-literal c'x task loss; the
    /// literal loss alone rewards underprediction.
    pub shortage_aware_loss: bool,
    /// Hidden layer widths of the model built by the training entry points.
    pub hidden_dims: Vec<usize>,
    /// Compute per-epoch validation realized regret (MILP solves); turn off
    /// to keep quick experiments cheap.
    pub report_regret: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::TwoStage,
            epochs: 50,
            lr: 0.05,
            lambda: 0.1,
            diff_method: DiffMethod::KktQp,
            mu: 1e-3,
            shortage_penalty: None,
            overflow_penalty: None,
            shortage_aware_loss: true,
            hidden_dims: vec![32, 32],
            report_regret: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn check(&self) -> Result<(), TrainingError> {
        if !(self.lr >= 0.0) {
            return Err(TrainingError::InvalidParameter(
                "learning rate must be nonnegative".into(),
            ));
        }
        let pen_ok = |p: Option<f64>| p.map_or(true, |v| v > 0.0);
        if !pen_ok(self.shortage_penalty) || !pen_ok(self.overflow_penalty) {
            return Err(TrainingError::InvalidParameter(
                "penalties must be positive".into(),
            ));
        }
        match self.diff_method {
            DiffMethod::KktQp if self.lambda <= 0.0 => Err(TrainingError::InvalidParameter(
                "kkt_qp differentiation needs lambda > 0".into(),
            )),
            DiffMethod::Barrier if self.mu <= 0.0 => Err(TrainingError::InvalidParameter(
                "barrier differentiation needs mu > 0".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Ex-post simulation penalties.
#[derive(Debug, Clone, Copy)]
pub struct Penalties {
    pub shortage: f64,
    pub overflow: f64,
}

/// Default shortage price: 10 * max holding cost * horizon, high enough
/// that a shortage always dominates any holding a delivery would cost.
pub fn default_shortage_penalty(inst: &IrpInstance) -> f64 {
    let max_h = inst
        .holding_customer
        .iter()
        .fold(inst.holding_supplier, |m, &v| m.max(v));
    10.0 * max_h * inst.horizon as f64
}

impl Penalties {
    pub fn from_config(cfg: &TrainConfig, inst: &IrpInstance) -> Penalties {
        let shortage = cfg
            .shortage_penalty
            .unwrap_or_else(|| default_shortage_penalty(inst));
        let overflow = cfg.overflow_penalty.unwrap_or(shortage);
        Penalties { shortage, overflow }
    }
}

/// An integer-feasible solution decoded back into plan quantities.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    /// Deliveries q[i][t].
    pub deliveries: Vec<Vec<f64>>,
    /// Route selections z[k][t], exactly 0 or 1.
    pub routes_used: Vec<Vec<f64>>,
    /// Visit indicators y[i][t], exactly 0 or 1.
    pub visits: Vec<Vec<f64>>,
    /// Objective value under the demand the plan was computed for.
    pub planned_objective: f64,
}

/// Decodes an optimal MILP solution of an instance-derived program.
pub fn decode_plan(
    prog: &StandardFormProgram,
    sol: &Solution,
) -> Result<PlanOutcome, TrainingError> {
    let l = &prog.layout;
    if l.n_customers == 0 {
        return Err(TrainingError::Dimension(
            "raw programs carry no plan blocks".into(),
        ));
    }
    if sol.status != SolverStatus::Optimal {
        return Err(TrainingError::Infeasible(format!(
            "cannot decode a plan from a {} solution",
            sol.status
        )));
    }
    let (n, t, k) = (l.n_customers, l.horizon, l.n_routes);
    let binary = |v: f64, what: &str| -> Result<f64, TrainingError> {
        let r = v.round();
        if (v - r).abs() > 1e-6 || !(r == 0.0 || r == 1.0) {
            return Err(TrainingError::Dimension(format!(
                "{what} = {v} is not binary"
            )));
        }
        Ok(r)
    };
    let mut deliveries = vec![vec![0.0; t]; n];
    let mut visits = vec![vec![0.0; t]; n];
    for i in 0..n {
        for tt in 0..t {
            deliveries[i][tt] = sol.x[l.q_index(i, tt)].max(0.0);
            visits[i][tt] = binary(sol.x[l.y_index(i, tt)], &format!("y[{i}][{tt}]"))?;
        }
    }
    let mut routes_used = vec![vec![0.0; t]; k];
    for kk in 0..k {
        for tt in 0..t {
            routes_used[kk][tt] = binary(sol.x[l.z_index(kk, tt)], &format!("z[{kk}][{tt}]"))?;
        }
    }
    Ok(PlanOutcome {
        deliveries,
        routes_used,
        visits,
        planned_objective: sol.objective,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn require_optimal(sol: &Solution, what: &str) -> Result<(), TrainingError> {
    if sol.status != SolverStatus::Optimal {
        return Err(TrainingError::Infeasible(format!(
            "{what} ended {}",
            sol.status
        )));
    }
    Ok(())
}

/// Paper-literal regret c'(x*(c_hat) - x*(c)) over the shared feasible set.
/// Nonnegative up to branch-and-bound gap tolerance by optimality of x*(c).
pub fn objective_regret(
    prog_true: &StandardFormProgram,
    c_hat: &[f64],
    scfg: &SolverConfig,
) -> Result<f64, TrainingError> {
    let sol_true = branch_and_bound(prog_true, scfg)?;
    require_optimal(&sol_true, "solve under true costs")?;
    objective_regret_against(prog_true, c_hat, &sol_true, scfg)
}

/// Same as [`objective_regret`] with the true-cost solution precomputed,
/// for sweeps that evaluate many perturbations of one program.
pub fn objective_regret_against(
    prog_true: &StandardFormProgram,
    c_hat: &[f64],
    sol_true: &Solution,
    scfg: &SolverConfig,
) -> Result<f64, TrainingError> {
    require_optimal(sol_true, "solve under true costs")?;
    let prog_hat = prog_true.with_cost(c_hat.to_vec())?;
    let sol_hat = branch_and_bound(&prog_hat, scfg)?;
    require_optimal(&sol_hat, "solve under predicted costs")?;
    Ok(dot(&prog_true.c, &sol_hat.x) - dot(&prog_true.c, &sol_true.x))
}

/// Simulates a fixed plan against the true demand. Shortage is charged and
/// the inventory floored at zero; overflow is charged and the inventory
/// capped at capacity; holding applies to the adjusted inventory. The
/// supplier runs its normal recursion.
pub fn realized_cost(
    plan: &PlanOutcome,
    d_true: &DemandMatrix,
    inst: &IrpInstance,
    pen: &Penalties,
) -> Result<f64, TrainingError> {
    let n = inst.n_customers;
    let t = inst.horizon;
    let k = inst.routes.len();
    if plan.deliveries.len() != n
        || plan.visits.len() != n
        || plan.routes_used.len() != k
        || plan.deliveries.iter().any(|r| r.len() != t)
        || plan.visits.iter().any(|r| r.len() != t)
        || plan.routes_used.iter().any(|r| r.len() != t)
        || d_true.n_customers() != n
        || d_true.horizon() != t
    {
        return Err(TrainingError::Dimension(
            "plan or demand shape does not match the instance".into(),
        ));
    }
    let mut cost = 0.0;
    for (kk, route) in inst.routes.iter().enumerate() {
        for tt in 0..t {
            cost += route.cost * plan.routes_used[kk][tt];
        }
    }
    for i in 0..n {
        let mut s = inst.initial_inventory[i];
        for tt in 0..t {
            s += plan.deliveries[i][tt] - d_true.get(i, tt);
            if s < 0.0 {
                cost += pen.shortage * (-s);
                s = 0.0;
            }
            let cap = inst.capacity_customer[i];
            if s > cap {
                cost += pen.overflow * (s - cap);
                s = cap;
            }
            cost += inst.holding_customer[i] * s;
        }
    }
    let mut supplier = inst.supplier_initial;
    for tt in 0..t {
        let shipped: f64 = (0..n).map(|i| plan.deliveries[i][tt]).sum();
        supplier += inst.production_per_period - shipped;
        cost += inst.holding_supplier * supplier;
    }
    Ok(cost)
}

/// Plans under predicted demand, simulates under the truth, and subtracts
/// the perfect-information optimum.
pub fn realized_regret(
    d_hat: &DemandMatrix,
    d_true: &DemandMatrix,
    inst: &IrpInstance,
    cfg: &TrainConfig,
) -> Result<f64, TrainingError> {
    let scfg = SolverConfig::default();
    let prog_true = build_standard_form(inst, d_true, Variant::Plain)?;
    let sol_true = branch_and_bound(&prog_true, &scfg)?;
    require_optimal(&sol_true, "solve under true demand")?;
    realized_regret_against(d_hat, d_true, inst, cfg, sol_true.objective, &scfg)
}

/// Same with the perfect-information objective precomputed.
pub fn realized_regret_against(
    d_hat: &DemandMatrix,
    d_true: &DemandMatrix,
    inst: &IrpInstance,
    cfg: &TrainConfig,
    true_objective: f64,
    scfg: &SolverConfig,
) -> Result<f64, TrainingError> {
    let pen = Penalties::from_config(cfg, inst);
    let prog_hat = build_standard_form(inst, d_hat, Variant::Plain)?;
    let sol_hat = branch_and_bound(&prog_hat, scfg)?;
    require_optimal(&sol_hat, "planning under predicted demand")?;
    let plan = decode_plan(&prog_hat, &sol_hat)?;
    Ok(realized_cost(&plan, d_true, inst, &pen)? - true_objective)
}

fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn dfl_variant(cfg: &TrainConfig) -> Variant {
    match cfg.diff_method {
        DiffMethod::KktQp => Variant::Regularized { lambda: cfg.lambda },
        DiffMethod::Barrier => Variant::Barrier { mu: cfg.mu },
    }
}

/// Forward half of the DFL step: predict, build, solve, and evaluate the
/// task loss with its adjoint dL/dx at the relaxed optimum.
struct DflForward {
    prog: StandardFormProgram,
    sol: Solution,
    loss: f64,
    dl_dx: Vec<f64>,
}

fn dfl_forward(
    model: &DemandModel,
    rec: &DataRecord,
    cfg: &TrainConfig,
    scfg: &SolverConfig,
) -> Result<DflForward, TrainingError> {
    let inst = &rec.instance;
    let (n, t) = (inst.n_customers, inst.horizon);
    let d_hat = model.forward_instance(&rec.features, n, t)?;
    let prog = build_standard_form(inst, &d_hat, dfl_variant(cfg))?;
    let sol = solve_relaxation(&prog, scfg)?;
    require_optimal(&sol, "relaxed solve under predicted demand")?;

    // Paper-literal task loss c'x, whose adjoint is c itself.
    let mut loss = dot(&prog.c, &sol.x);
    let mut dl_dx = prog.c.clone();
    if cfg.shortage_aware_loss {
        // Smooth shortage of the linear inventory recursion under the true
        // demand: sum softplus(-s_it). d s_it / d q_itau = 1 for tau <= t.
        let p_short = Penalties::from_config(cfg, inst).shortage;
        for i in 0..n {
            let mut s_lin = vec![0.0; t];
            let mut s = inst.initial_inventory[i];
            for tt in 0..t {
                s += sol.x[prog.layout.q_index(i, tt)] - inst.demand.get(i, tt);
                s_lin[tt] = s;
                loss += p_short * softplus(-s);
            }
            for tau in 0..t {
                let pull: f64 = (tau..t).map(|tt| sigmoid(-s_lin[tt])).sum();
                dl_dx[prog.layout.q_index(i, tau)] -= p_short * pull;
            }
        }
    }
    Ok(DflForward {
        prog,
        sol,
        loss,
        dl_dx,
    })
}

/// Task loss of the DFL pipeline at the current parameters; the function
/// finite-difference tests probe.
pub fn dfl_loss(
    model: &DemandModel,
    rec: &DataRecord,
    cfg: &TrainConfig,
    scfg: &SolverConfig,
) -> Result<f64, TrainingError> {
    Ok(dfl_forward(model, rec, cfg, scfg)?.loss)
}

/// Task loss and its exact gradient over the flattened model parameters:
/// adjoint dL/dx through the implicit differentiation of the relaxation,
/// dL/db mapped onto demand via the demand map, then reverse mode through
/// the model.
pub fn dfl_loss_and_gradient(
    model: &DemandModel,
    rec: &DataRecord,
    cfg: &TrainConfig,
    scfg: &SolverConfig,
) -> Result<(f64, Vec<f64>), TrainingError> {
    cfg.check()?;
    let fwd = dfl_forward(model, rec, cfg, scfg)?;
    let grad = match cfg.diff_method {
        DiffMethod::KktQp => differentiate_qp(&fwd.prog, &fwd.sol, &fwd.dl_dx)?,
        DiffMethod::Barrier => differentiate_barrier(&fwd.prog, &fwd.sol, &fwd.dl_dx)?,
    };
    // dL/dd = B_d' dL/db.
    let (n, t) = (rec.instance.n_customers, rec.instance.horizon);
    let mut dl_dd = vec![0.0; n * t];
    for &(row, j, w) in &fwd.prog.demand_map {
        dl_dd[j] += w * grad.dl_db[row];
    }
    let grad_theta = model.backward(&rec.features, &dl_dd)?;
    Ok((fwd.loss, grad_theta))
}

/// Gradient with the degeneracy retry: a degenerate KKT system is re-solved
/// once at lambda * 10; a second failure is reported for the caller to skip.
fn dfl_gradient_with_retry(
    model: &DemandModel,
    rec: &DataRecord,
    cfg: &TrainConfig,
    scfg: &SolverConfig,
) -> Result<(f64, Vec<f64>), TrainingError> {
    match dfl_loss_and_gradient(model, rec, cfg, scfg) {
        Err(TrainingError::Diff(DiffError::Degenerate { index, .. }))
            if cfg.diff_method == DiffMethod::KktQp =>
        {
            log::debug!(
                "degenerate complementarity at index {index}; retrying with lambda {}",
                cfg.lambda * 10.0
            );
            let retry = TrainConfig {
                lambda: cfg.lambda * 10.0,
                ..cfg.clone()
            };
            dfl_loss_and_gradient(model, rec, &retry, scfg)
        }
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_realized_regret: f64,
}

/// Mean squared prediction error of the model over one split; NaN when the
/// split is empty.
pub fn dataset_mse(
    model: &DemandModel,
    data: &Dataset,
    split: Split,
) -> Result<f64, TrainingError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for rec in data.split(split) {
        let inst = &rec.instance;
        let d_hat = model.forward_instance(&rec.features, inst.n_customers, inst.horizon)?;
        let d = &inst.demand;
        total += d_hat
            .as_flat()
            .iter()
            .zip(d.as_flat())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        count += inst.n_customers * inst.horizon;
    }
    Ok(if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    })
}

/// Mean validation realized regret; infeasible plans are skipped with a
/// log line, never silently dropped from the denominator count they fail.
fn val_realized_regret(
    model: &DemandModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<f64, TrainingError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for rec in data.split(Split::Val) {
        let inst = &rec.instance;
        let d_hat = model.forward_instance(&rec.features, inst.n_customers, inst.horizon)?;
        match realized_regret(&d_hat, &inst.demand, inst, cfg) {
            Ok(r) => {
                total += r;
                count += 1;
            }
            Err(TrainingError::Infeasible(msg)) => {
                log::warn!("validation instance {} skipped: {msg}", rec.id);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    })
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(epoch as u64),
    );
    order.shuffle(&mut rng);
    order
}

fn finite_or_abort(value: f64, epoch: usize, what: &str) -> Result<f64, TrainingError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainingError::NonFinite {
            epoch,
            message: format!("{what} = {value}"),
        })
    }
}

/// Minimizes prediction MSE with one Adam update per training instance.
pub fn train_two_stage(
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(DemandModel, Vec<EpochReport>), TrainingError> {
    cfg.check()?;
    let train: Vec<&DataRecord> = data.split(Split::Train).collect();
    if train.is_empty() {
        return Err(TrainingError::EmptySplit("train".into()));
    }
    let mut dims = vec![feature_dim(data.n_customers)];
    dims.extend_from_slice(&cfg.hidden_dims);
    dims.push(1);
    let mut model = DemandModel::new(
        &dims,
        HiddenActivation::Tanh,
        OutputActivation::Softplus,
        cfg.seed,
    )?;
    let mut adam = AdamState::new(model.n_params());
    let mut reports = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for &idx in &epoch_order(train.len(), cfg.seed, epoch) {
            let rec = train[idx];
            let inst = &rec.instance;
            let cells = (inst.n_customers * inst.horizon) as f64;
            let d_hat = model.forward_instance(&rec.features, inst.n_customers, inst.horizon)?;
            let residuals: Vec<f64> = d_hat
                .as_flat()
                .iter()
                .zip(inst.demand.as_flat())
                .map(|(a, b)| a - b)
                .collect();
            let loss = residuals.iter().map(|r| r * r).sum::<f64>() / cells;
            epoch_loss += finite_or_abort(loss, epoch, "training MSE")?;
            let adjoint: Vec<f64> = residuals.iter().map(|r| 2.0 * r / cells).collect();
            let grad = model.backward(&rec.features, &adjoint)?;
            if cfg.lr > 0.0 {
                let mut params = model.flatten_params();
                adam_step(&mut params, &grad, &mut adam, cfg.lr)?;
                model.set_params(&params)?;
            }
        }
        let val_mse = dataset_mse(&model, data, Split::Val)?;
        let val_rr = if cfg.report_regret {
            val_realized_regret(&model, data, cfg)?
        } else {
            f64::NAN
        };
        reports.push(EpochReport {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_mse,
            val_realized_regret: val_rr,
        });
    }
    Ok((model, reports))
}

#[derive(Debug, Clone)]
pub struct DflEpochMetrics {
    pub epoch: usize,
    /// Mean task loss over instances that produced a gradient, measured
    /// before their update.
    pub mean_task_loss: f64,
    pub steps: usize,
    pub skipped: usize,
}

/// One decision-focused epoch: per training instance, predict, solve the
/// relaxation, differentiate, backpropagate, and update. Returns the epoch
/// metrics; degenerate instances are retried at lambda * 10 and then
/// skipped.
pub fn train_dfl_epoch(
    model: &mut DemandModel,
    adam: &mut AdamState,
    data: &Dataset,
    cfg: &TrainConfig,
    scfg: &SolverConfig,
    epoch: usize,
) -> Result<DflEpochMetrics, TrainingError> {
    cfg.check()?;
    let train: Vec<&DataRecord> = data.split(Split::Train).collect();
    if train.is_empty() {
        return Err(TrainingError::EmptySplit("train".into()));
    }
    let mut total_loss = 0.0;
    let mut steps = 0usize;
    let mut skipped = 0usize;
    for &idx in &epoch_order(train.len(), cfg.seed, epoch) {
        let rec = train[idx];
        let (loss, grad) = match dfl_gradient_with_retry(model, rec, cfg, scfg) {
            Ok(pair) => pair,
            Err(TrainingError::Diff(DiffError::Degenerate { index, .. })) => {
                log::warn!(
                    "instance {} skipped: degenerate complementarity at index {index} after retry",
                    rec.id
                );
                skipped += 1;
                continue;
            }
            Err(TrainingError::Infeasible(msg)) => {
                log::warn!("instance {} skipped: {msg}", rec.id);
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        total_loss += finite_or_abort(loss, epoch, "task loss")?;
        if cfg.lr > 0.0 {
            let mut params = model.flatten_params();
            adam_step(&mut params, &grad, adam, cfg.lr).map_err(|e| match e {
                PredictorError::NonFinite(msg) => TrainingError::NonFinite {
                    epoch,
                    message: msg,
                },
                other => TrainingError::Predictor(other),
            })?;
            model.set_params(&params)?;
        }
        steps += 1;
    }
    Ok(DflEpochMetrics {
        epoch,
        mean_task_loss: if steps == 0 {
            f64::NAN
        } else {
            total_loss / steps as f64
        },
        steps,
        skipped,
    })
}

/// Full DFL training from a given starting model (e.g. a two-stage
/// warm start).
pub fn train_dfl_from(
    mut model: DemandModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(DemandModel, Vec<EpochReport>), TrainingError> {
    cfg.check()?;
    let scfg = SolverConfig::default();
    let mut adam = AdamState::new(model.n_params());
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let metrics = train_dfl_epoch(&mut model, &mut adam, data, cfg, &scfg, epoch)?;
        let val_mse = dataset_mse(&model, data, Split::Val)?;
        let val_rr = if cfg.report_regret {
            val_realized_regret(&model, data, cfg)?
        } else {
            f64::NAN
        };
        reports.push(EpochReport {
            epoch,
            train_loss: metrics.mean_task_loss,
            val_mse,
            val_realized_regret: val_rr,
        });
    }
    Ok((model, reports))
}

/// Full DFL training from a fresh seeded model.
pub fn train_dfl(
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(DemandModel, Vec<EpochReport>), TrainingError> {
    let mut dims = vec![feature_dim(data.n_customers)];
    dims.extend_from_slice(&cfg.hidden_dims);
    dims.push(1);
    let model = DemandModel::new(
        &dims,
        HiddenActivation::Tanh,
        OutputActivation::Softplus,
        cfg.seed,
    )?;
    train_dfl_from(model, data, cfg)
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub id: usize,
    pub mse: f64,
    pub realized_regret: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub skipped: usize,
}

/// Per-instance prediction error and realized regret on one split.
pub fn evaluate_model(
    model: &DemandModel,
    data: &Dataset,
    split: Split,
    cfg: &TrainConfig,
) -> Result<EvalReport, TrainingError> {
    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for rec in data.split(split) {
        let inst = &rec.instance;
        let d_hat = model.forward_instance(&rec.features, inst.n_customers, inst.horizon)?;
        let cells = (inst.n_customers * inst.horizon) as f64;
        let mse = d_hat
            .as_flat()
            .iter()
            .zip(inst.demand.as_flat())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / cells;
        match realized_regret(&d_hat, &inst.demand, inst, cfg) {
            Ok(rr) => rows.push(EvalRow {
                id: rec.id,
                mse,
                realized_regret: rr,
            }),
            Err(TrainingError::Infeasible(msg)) => {
                log::warn!("eval instance {} skipped: {msg}", rec.id);
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(EvalReport { rows, skipped })
}

#[derive(Debug, Clone)]
pub struct RegretRow {
    pub epsilon: f64,
    pub trial: usize,
    pub mse: f64,
    pub objective_regret: f64,
    pub realized_regret: f64,
}

#[derive(Debug, Clone)]
pub struct RegretReport {
    pub rows: Vec<RegretRow>,
    pub skipped: usize,
}

/// The regret-vs-error experiment: per noise level epsilon and trial,
/// perturb demand multiplicatively for realized regret and route costs for
/// objective regret, averaged over a fixed set of desk-scale instances
/// (two customers, three periods, three routes). A trial whose planning
/// step is infeasible on any instance is skipped and counted.
pub fn sweep_regret_vs_error(
    inst_count: usize,
    eps_grid: &[f64],
    trials: usize,
    seed: u64,
) -> Result<RegretReport, TrainingError> {
    if eps_grid.is_empty() || eps_grid.iter().any(|&e| !(e >= 0.0)) {
        return Err(TrainingError::InvalidParameter(
            "eps grid must be nonempty and nonnegative".into(),
        ));
    }
    if inst_count == 0 || trials == 0 {
        return Err(TrainingError::InvalidParameter(
            "instance and trial counts must be at least 1".into(),
        ));
    }
    let scfg = SolverConfig::default();
    let cfg = TrainConfig::default();

    struct Prepared {
        inst: IrpInstance,
        prog: StandardFormProgram,
        sol_true: Solution,
    }
    let mut prepared = Vec::with_capacity(inst_count);
    for j in 0..inst_count {
        let inst_seed = seed
            .wrapping_mul(0x100000001b3)
            .wrapping_add(j as u64 + 17);
        let inst = generate_instance(2, 3, 3, inst_seed)?;
        let prog = build_standard_form(&inst, &inst.demand, Variant::Plain)?;
        let sol_true = branch_and_bound(&prog, &scfg)?;
        require_optimal(&sol_true, "sweep baseline solve")?;
        prepared.push(Prepared {
            inst,
            prog,
            sol_true,
        });
    }

    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for (ei, &eps) in eps_grid.iter().enumerate() {
        for trial in 0..trials {
            let mut mse_sum = 0.0;
            let mut obj_sum = 0.0;
            let mut real_sum = 0.0;
            let mut failed = false;
            for (j, prep) in prepared.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed.wrapping_mul(0xd6e8feb86659fd93)
                        .wrapping_add((ei * trials + trial) as u64 * 769 + j as u64 + 1),
                );
                let inst = &prep.inst;
                let (n, t) = (inst.n_customers, inst.horizon);

                // Demand mode: relative Gaussian noise, clamped at zero.
                let mut d_hat = inst.demand.clone();
                for i in 0..n {
                    for tt in 0..t {
                        let d = inst.demand.get(i, tt);
                        let noisy = d * (1.0 + eps * normal.sample(&mut rng));
                        d_hat.set(i, tt, noisy.max(0.0));
                    }
                }
                let cells = (n * t) as f64;
                mse_sum += d_hat
                    .as_flat()
                    .iter()
                    .zip(inst.demand.as_flat())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / cells;

                // Cost mode: relative noise on the route-cost entries.
                let mut c_hat = prep.prog.c.clone();
                let l = &prep.prog.layout;
                for kk in 0..l.n_routes {
                    for tt in 0..t {
                        let idx = l.z_index(kk, tt);
                        let noisy = c_hat[idx] * (1.0 + eps * normal.sample(&mut rng));
                        c_hat[idx] = noisy.max(0.0);
                    }
                }

                match realized_regret_against(
                    &d_hat,
                    &inst.demand,
                    inst,
                    &cfg,
                    prep.sol_true.objective,
                    &scfg,
                ) {
                    Ok(rr) => real_sum += rr,
                    Err(TrainingError::Infeasible(msg)) => {
                        log::warn!(
                            "sweep trial (eps {eps}, trial {trial}) skipped on instance {j}: {msg}"
                        );
                        failed = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
                obj_sum +=
                    objective_regret_against(&prep.prog, &c_hat, &prep.sol_true, &scfg)?;
            }
            if failed {
                skipped += 1;
                continue;
            }
            let denom = inst_count as f64;
            rows.push(RegretRow {
                epsilon: eps,
                trial,
                mse: mse_sum / denom,
                objective_regret: obj_sum / denom,
                realized_regret: real_sum / denom,
            });
        }
    }
    Ok(RegretReport { rows, skipped })
}

/// Mean realized regret per epsilon level, in grid order.
pub fn mean_regret_by_epsilon(report: &RegretReport) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for row in &report.rows {
        match out.iter_mut().find(|(e, _, _)| *e == row.epsilon) {
            Some((_, sum, count)) => {
                *sum += row.realized_regret;
                *count += 1;
            }
            None => out.push((row.epsilon, row.realized_regret, 1)),
        }
    }
    out.into_iter()
        .map(|(e, sum, count)| (e, sum / count as f64))
        .collect()
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "spearman needs paired samples");
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let ranks = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut m = k;
            while m + 1 < idx.len() && v[idx[m + 1]] == v[idx[k]] {
                m += 1;
            }
            let avg = (k + m) as f64 / 2.0 + 1.0;
            for &i in &idx[k..=m] {
                r[i] = avg;
            }
            k = m + 1;
        }
        r
    };
    let rx = ranks(xs);
    let ry = ranks(ys);
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        let a = rx[i] - mx;
        let b = ry[i] - my;
        cov += a * b;
        vx += a * a;
        vy += b * b;
    }
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// CSV body for a sweep report: header plus one row per (epsilon, trial).
pub fn sweep_csv(report: &RegretReport) -> String {
    let mut out = String::from("epsilon,trial,mse,objective_regret,realized_regret\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{:?},{},{:?},{:?},{:?}\n",
            r.epsilon, r.trial, r.mse, r.objective_regret, r.realized_regret
        ));
    }
    out
}

/// CSV body for per-epoch training reports.
pub fn training_csv(reports: &[EpochReport]) -> String {
    let mut out = String::from("epoch,train_loss,val_mse,val_realized_regret\n");
    for r in reports {
        out.push_str(&format!(
            "{},{:?},{:?},{:?}\n",
            r.epoch, r.train_loss, r.val_mse, r.val_realized_regret
        ));
    }
    out
}

/// CSV body for an evaluation report.
pub fn eval_csv(report: &EvalReport) -> String {
    let mut out = String::from("instance,mse,realized_regret\n");
    for r in &report.rows {
        out.push_str(&format!("{},{:?},{:?}\n", r.id, r.mse, r.realized_regret));
    }
    out
}
