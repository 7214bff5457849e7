//! Compiles an instance plus a demand matrix into an equality standard form
//! `min c'x  s.t.  Ax = b, x >= 0` with an integrality mask.
//!
//! Every inequality carries its own slack column, so `Ax = b, x >= 0` is the
//! entire feasible description. Demand enters only the right-hand side,
//! through an affine map `b = b0 + B_d vec(d)` that the training code
//! differentiates through.
//!
//! Three objective variants are supported: the plain linear objective, a
//! quadratic-regularized variant `c'x + lambda ||x||^2` that makes the
//! program strictly convex, and a log-barrier variant `c'x - mu sum log x_j`
//! whose fixed-`mu` center the solver can return for barrier
//! differentiation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instance::{DemandMatrix, IrpInstance, MaxVisits};
use crate::sparse::SparseMatrix;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid weight: {0}")]
    InvalidWeight(String),
    #[error("domain error: {0}")]
    Domain(String),
}

/// Objective variant selected at build time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    Plain,
    Regularized { lambda: f64 },
    Barrier { mu: f64 },
}

/// Which variables the quadratic regularizer covers. `All` keeps the KKT
/// system uniquely solvable; `Routes` restricts the term to the route
/// indicator block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegScope {
    All,
    Routes,
}

/// Mode selector for [`evaluate_objective`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveMode {
    Linear,
    Regularized,
    Barrier,
}

/// Ordered variable blocks of the standard form. All blocks are contiguous
/// and indexed customer-major: within a block, `(i, t)` maps to `i*T + t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableLayout {
    pub n_customers: usize,
    pub horizon: usize,
    pub n_routes: usize,
    /// Delivery quantities, N*T entries.
    pub q_offset: usize,
    /// Customer inventories, N*T entries.
    pub s_offset: usize,
    /// Supplier inventories, T entries.
    pub supplier_offset: usize,
    /// Route indicators, K*T entries.
    pub z_offset: usize,
    /// Visit indicators, N*T entries.
    pub y_offset: usize,
    /// Inequality slacks, one per inequality row, appended in row order.
    pub slack_offset: usize,
    pub n_inequalities: usize,
    pub total: usize,
}

impl VariableLayout {
    fn for_instance(n: usize, t: usize, k: usize, n_inequalities: usize) -> Self {
        let nt = n * t;
        let q_offset = 0;
        let s_offset = nt;
        let supplier_offset = 2 * nt;
        let z_offset = 2 * nt + t;
        let y_offset = z_offset + k * t;
        let slack_offset = y_offset + nt;
        VariableLayout {
            n_customers: n,
            horizon: t,
            n_routes: k,
            q_offset,
            s_offset,
            supplier_offset,
            z_offset,
            y_offset,
            slack_offset,
            n_inequalities,
            total: slack_offset + n_inequalities,
        }
    }

    /// Layout for a raw program with no named blocks (all variables are
    /// treated as structural, no slacks).
    pub fn monolithic(n_vars: usize) -> Self {
        VariableLayout {
            n_customers: 0,
            horizon: 0,
            n_routes: 0,
            q_offset: 0,
            s_offset: 0,
            supplier_offset: 0,
            z_offset: 0,
            y_offset: 0,
            slack_offset: n_vars,
            n_inequalities: 0,
            total: n_vars,
        }
    }

    pub fn n_structural(&self) -> usize {
        self.slack_offset
    }

    pub fn q_index(&self, i: usize, t: usize) -> usize {
        self.q_offset + i * self.horizon + t
    }

    pub fn s_index(&self, i: usize, t: usize) -> usize {
        self.s_offset + i * self.horizon + t
    }

    pub fn supplier_index(&self, t: usize) -> usize {
        self.supplier_offset + t
    }

    pub fn z_index(&self, k: usize, t: usize) -> usize {
        self.z_offset + k * self.horizon + t
    }

    pub fn y_index(&self, i: usize, t: usize) -> usize {
        self.y_offset + i * self.horizon + t
    }
}

/// Row ranges of the constraint matrix, in build order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowLayout {
    /// Customer inventory balance equalities, N*T rows.
    pub e1: std::ops::Range<usize>,
    /// Supplier inventory balance equalities, T rows.
    pub e2: std::ops::Range<usize>,
    /// Customer capacity, N*T rows.
    pub i1: std::ops::Range<usize>,
    /// Vehicle capacity, T rows.
    pub i2: std::ops::Range<usize>,
    /// Delivery-visit linking, N*T rows.
    pub i3: std::ops::Range<usize>,
    /// Visit-route linking, N*T rows.
    pub i4: std::ops::Range<usize>,
    /// Visit budget, T rows (empty when visits are unlimited).
    pub i5: std::ops::Range<usize>,
    /// Upper bounds z <= 1 then y <= 1, K*T + N*T rows.
    pub ub: std::ops::Range<usize>,
}

/// The standard-form program: `min c'x (+ quad/barrier terms)` subject to
/// `Ax = b, x >= 0`, with an integrality mask on the route and visit blocks.
#[derive(Debug, Clone)]
pub struct StandardFormProgram {
    pub c: Vec<f64>,
    pub a: SparseMatrix,
    pub b: Vec<f64>,
    /// Mask true exactly on integer-constrained coordinates.
    pub integrality: Vec<bool>,
    pub layout: VariableLayout,
    pub rows: RowLayout,
    /// Demand-independent part of the right-hand side.
    pub b0: Vec<f64>,
    /// Sparse triplets of B_d: `b = b0 + B_d vec(d)`, demand flattened
    /// customer-major.
    pub demand_map: Vec<(usize, usize, f64)>,
    /// Quadratic weight lambda; 0 means pure LP.
    pub quad_weight: f64,
    /// Fixed barrier parameter mu; 0 means no barrier.
    pub barrier_weight: f64,
    pub reg_scope: RegScope,
}

impl StandardFormProgram {
    pub fn n_vars(&self) -> usize {
        self.c.len()
    }

    pub fn n_rows(&self) -> usize {
        self.b.len()
    }

    /// Diagonal of the quadratic term's Hessian: `2 * lambda` on the
    /// regularized coordinates, 0 elsewhere.
    pub fn quad_diag(&self, j: usize) -> f64 {
        if self.quad_weight == 0.0 {
            return 0.0;
        }
        match self.reg_scope {
            RegScope::All => 2.0 * self.quad_weight,
            RegScope::Routes => {
                let z0 = self.layout.z_offset;
                let z1 = z0 + self.layout.n_routes * self.layout.horizon;
                if j >= z0 && j < z1 {
                    2.0 * self.quad_weight
                } else {
                    0.0
                }
            }
        }
    }

    /// A copy of the program with a replacement cost vector.
    pub fn with_cost(&self, c: Vec<f64>) -> Result<StandardFormProgram, ModelError> {
        if c.len() != self.c.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "cost length {} does not match program {}",
                c.len(),
                self.c.len()
            )));
        }
        let mut prog = self.clone();
        prog.c = c;
        Ok(prog)
    }

    /// Builds a raw program directly from parts; used for synthetic test
    /// programs and gradient checking. No named variable blocks, no demand
    /// map, no integrality.
    pub fn from_raw_parts(
        c: Vec<f64>,
        a: SparseMatrix,
        b: Vec<f64>,
        quad_weight: f64,
        barrier_weight: f64,
    ) -> Result<StandardFormProgram, ModelError> {
        if a.ncols() != c.len() || a.nrows() != b.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "A is {}x{}, c has {}, b has {}",
                a.nrows(),
                a.ncols(),
                c.len(),
                b.len()
            )));
        }
        if quad_weight < 0.0 || barrier_weight < 0.0 {
            return Err(ModelError::InvalidWeight(
                "quad and barrier weights must be nonnegative".into(),
            ));
        }
        let n = c.len();
        Ok(StandardFormProgram {
            c,
            integrality: vec![false; n],
            layout: VariableLayout::monolithic(n),
            rows: RowLayout {
                e1: 0..0,
                e2: 0..0,
                i1: 0..0,
                i2: 0..0,
                i3: 0..0,
                i4: 0..0,
                i5: 0..0,
                ub: 0..0,
            },
            b0: b.clone(),
            b,
            demand_map: Vec::new(),
            a,
            quad_weight,
            barrier_weight,
            reg_scope: RegScope::All,
        })
    }
}

/// Compiles the instance and demand into the standard form.
///
/// Row order: E1 customer balance, E2 supplier balance, I1 customer
/// capacity, I2 vehicle capacity, I3 delivery-visit link, I4 visit-route
/// link, I5 visit budget (only with a finite budget), then unit upper
/// bounds on z and y. Initial inventories fold into the first-period
/// balance right-hand sides.
pub fn build_standard_form(
    inst: &IrpInstance,
    d: &DemandMatrix,
    variant: Variant,
) -> Result<StandardFormProgram, ModelError> {
    let n = inst.n_customers;
    let t = inst.horizon;
    let k = inst.routes.len();
    if d.n_customers() != n || d.horizon() != t {
        return Err(ModelError::DimensionMismatch(format!(
            "demand is {}x{}, instance needs {n}x{t}",
            d.n_customers(),
            d.horizon()
        )));
    }
    let (quad_weight, barrier_weight) = match variant {
        Variant::Plain => (0.0, 0.0),
        Variant::Regularized { lambda } => {
            if lambda < 0.0 {
                return Err(ModelError::InvalidWeight("lambda must be >= 0".into()));
            }
            (lambda, 0.0)
        }
        Variant::Barrier { mu } => {
            if mu < 0.0 {
                return Err(ModelError::InvalidWeight("mu must be >= 0".into()));
            }
            (0.0, mu)
        }
    };

    let nt = n * t;
    let visit_limit = inst.max_visits_per_day.as_limit();
    let n_i5 = if visit_limit.is_some() { t } else { 0 };
    let n_ineq = nt + t + nt + nt + n_i5 + (k * t + nt);
    let layout = VariableLayout::for_instance(n, t, k, n_ineq);

    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut b0 = Vec::new();
    let mut demand_map = Vec::new();
    let mut row = 0usize;
    let mut slack = layout.slack_offset;
    let mut push_ineq_slack = |triplets: &mut Vec<(usize, usize, f64)>, row: usize| {
        triplets.push((row, slack, 1.0));
        slack += 1;
    };

    // E1: s_{i,t} - s_{i,t-1} - q_{i,t} = -d_{i,t}, initial inventory folded
    // into the first period.
    let e1_start = row;
    for i in 0..n {
        for tt in 0..t {
            triplets.push((row, layout.s_index(i, tt), 1.0));
            if tt > 0 {
                triplets.push((row, layout.s_index(i, tt - 1), -1.0));
            }
            triplets.push((row, layout.q_index(i, tt), -1.0));
            let base = if tt == 0 { inst.initial_inventory[i] } else { 0.0 };
            b0.push(base);
            demand_map.push((row, i * t + tt, -1.0));
            row += 1;
        }
    }
    let e1 = e1_start..row;

    // E2: S_t - S_{t-1} + sum_i q_{i,t} = P, supplier start folded into the
    // first period.
    let e2_start = row;
    for tt in 0..t {
        triplets.push((row, layout.supplier_index(tt), 1.0));
        if tt > 0 {
            triplets.push((row, layout.supplier_index(tt - 1), -1.0));
        }
        for i in 0..n {
            triplets.push((row, layout.q_index(i, tt), 1.0));
        }
        let base = if tt == 0 { inst.supplier_initial } else { 0.0 };
        b0.push(inst.production_per_period + base);
        row += 1;
    }
    let e2 = e2_start..row;

    // I1: s_{i,t} <= M_i
    let i1_start = row;
    for i in 0..n {
        for tt in 0..t {
            triplets.push((row, layout.s_index(i, tt), 1.0));
            push_ineq_slack(&mut triplets, row);
            b0.push(inst.capacity_customer[i]);
            row += 1;
        }
    }
    let i1 = i1_start..row;

    // I2: sum_i q_{i,t} <= Q
    let i2_start = row;
    for tt in 0..t {
        for i in 0..n {
            triplets.push((row, layout.q_index(i, tt), 1.0));
        }
        push_ineq_slack(&mut triplets, row);
        b0.push(inst.vehicle_capacity);
        row += 1;
    }
    let i2 = i2_start..row;

    // I3: q_{i,t} <= M_i * y_{i,t}
    let i3_start = row;
    for i in 0..n {
        for tt in 0..t {
            triplets.push((row, layout.q_index(i, tt), 1.0));
            triplets.push((row, layout.y_index(i, tt), -inst.capacity_customer[i]));
            push_ineq_slack(&mut triplets, row);
            b0.push(0.0);
            row += 1;
        }
    }
    let i3 = i3_start..row;

    // I4: y_{i,t} <= sum_k a_{i,k} z_{k,t}
    let i4_start = row;
    for i in 0..n {
        for tt in 0..t {
            triplets.push((row, layout.y_index(i, tt), 1.0));
            for (kk, route) in inst.routes.iter().enumerate() {
                if route.covers(i) {
                    triplets.push((row, layout.z_index(kk, tt), -1.0));
                }
            }
            push_ineq_slack(&mut triplets, row);
            b0.push(0.0);
            row += 1;
        }
    }
    let i4 = i4_start..row;

    // I5: sum_i y_{i,t} <= V_max (finite budgets only)
    let i5_start = row;
    if let Some(vmax) = visit_limit {
        for tt in 0..t {
            for i in 0..n {
                triplets.push((row, layout.y_index(i, tt), 1.0));
            }
            push_ineq_slack(&mut triplets, row);
            b0.push(vmax as f64);
            row += 1;
        }
    }
    let i5 = i5_start..row;

    // Unit upper bounds: z <= 1 then y <= 1.
    let ub_start = row;
    for kk in 0..k {
        for tt in 0..t {
            triplets.push((row, layout.z_index(kk, tt), 1.0));
            push_ineq_slack(&mut triplets, row);
            b0.push(1.0);
            row += 1;
        }
    }
    for i in 0..n {
        for tt in 0..t {
            triplets.push((row, layout.y_index(i, tt), 1.0));
            push_ineq_slack(&mut triplets, row);
            b0.push(1.0);
            row += 1;
        }
    }
    let ub = ub_start..row;

    debug_assert_eq!(slack, layout.total);
    debug_assert_eq!(row, b0.len());

    let mut c = vec![0.0; layout.total];
    for i in 0..n {
        for tt in 0..t {
            c[layout.s_index(i, tt)] = inst.holding_customer[i];
        }
    }
    for tt in 0..t {
        c[layout.supplier_index(tt)] = inst.holding_supplier;
    }
    for (kk, route) in inst.routes.iter().enumerate() {
        for tt in 0..t {
            c[layout.z_index(kk, tt)] = route.cost;
        }
    }

    let mut integrality = vec![false; layout.total];
    for kk in 0..k {
        for tt in 0..t {
            integrality[layout.z_index(kk, tt)] = true;
        }
    }
    for i in 0..n {
        for tt in 0..t {
            integrality[layout.y_index(i, tt)] = true;
        }
    }

    let a = SparseMatrix::from_triplets(row, layout.total, triplets);
    let mut prog = StandardFormProgram {
        c,
        a,
        b: Vec::new(),
        integrality,
        layout,
        rows: RowLayout {
            e1,
            e2,
            i1,
            i2,
            i3,
            i4,
            i5,
            ub,
        },
        b0,
        demand_map,
        quad_weight,
        barrier_weight,
        reg_scope: RegScope::All,
    };
    prog.b = demand_to_rhs(&prog, d)?;
    Ok(prog)
}

/// Evaluates `b0 + B_d vec(d)`; affine in the demand.
pub fn demand_to_rhs(
    prog: &StandardFormProgram,
    d: &DemandMatrix,
) -> Result<Vec<f64>, ModelError> {
    let n = prog.layout.n_customers;
    let t = prog.layout.horizon;
    if d.n_customers() != n || d.horizon() != t {
        return Err(ModelError::DimensionMismatch(format!(
            "demand is {}x{}, program layout needs {n}x{t}",
            d.n_customers(),
            d.horizon()
        )));
    }
    let flat = d.as_flat();
    let mut b = prog.b0.clone();
    for &(row, j, w) in &prog.demand_map {
        b[row] += w * flat[j];
    }
    Ok(b)
}

/// Objective value of a point under the requested mode.
pub fn evaluate_objective(
    prog: &StandardFormProgram,
    x: &[f64],
    mode: ObjectiveMode,
) -> Result<f64, ModelError> {
    if x.len() != prog.n_vars() {
        return Err(ModelError::DimensionMismatch(format!(
            "point has {} entries, program has {}",
            x.len(),
            prog.n_vars()
        )));
    }
    let linear: f64 = prog.c.iter().zip(x).map(|(c, v)| c * v).sum();
    match mode {
        ObjectiveMode::Linear => Ok(linear),
        ObjectiveMode::Regularized => {
            let quad: f64 = (0..x.len())
                .map(|j| 0.5 * prog.quad_diag(j) * x[j] * x[j])
                .sum();
            Ok(linear + quad)
        }
        ObjectiveMode::Barrier => {
            let mut logs = 0.0;
            for (j, &v) in x.iter().enumerate() {
                if v <= 0.0 {
                    return Err(ModelError::Domain(format!(
                        "barrier objective requires x > 0, found x[{j}] = {v}"
                    )));
                }
                logs += v.ln();
            }
            Ok(linear - prog.barrier_weight * logs)
        }
    }
}

/// Replays a decoded plan against every constraint of the formulation and
/// returns human-readable violations. Used to check that feasible integer
/// points of the standard form map back to valid plans.
pub fn replay_plan(
    inst: &IrpInstance,
    q: &[Vec<f64>],
    z: &[Vec<f64>],
    y: &[Vec<f64>],
    d: &DemandMatrix,
    tol: f64,
) -> Vec<String> {
    let n = inst.n_customers;
    let t = inst.horizon;
    let k = inst.routes.len();
    let mut out = Vec::new();

    for (mat, name, rows) in [(q, "q", n), (y, "y", n), (z, "z", k)] {
        if mat.len() != rows || mat.iter().any(|r| r.len() != t) {
            out.push(format!("{name} has wrong shape"));
            return out;
        }
    }

    for mat_name in [("z", z), ("y", y)] {
        let (name, mat) = mat_name;
        for (r, row) in mat.iter().enumerate() {
            for (tt, &v) in row.iter().enumerate() {
                if (v - v.round()).abs() > tol || v < -tol || v > 1.0 + tol {
                    out.push(format!("{name}[{r}][{tt}] = {v} is not binary"));
                }
            }
        }
    }

    // Inventory recursions.
    for i in 0..n {
        let mut s = inst.initial_inventory[i];
        for tt in 0..t {
            s = s + q[i][tt] - d.get(i, tt);
            if s < -tol {
                out.push(format!("customer {i} stockout at t={tt}: s = {s}"));
            }
            if s > inst.capacity_customer[i] + tol {
                out.push(format!(
                    "customer {i} over capacity at t={tt}: s = {s} > {}",
                    inst.capacity_customer[i]
                ));
            }
        }
    }
    let mut supplier = inst.supplier_initial;
    for tt in 0..t {
        let total: f64 = (0..n).map(|i| q[i][tt]).sum();
        supplier = supplier + inst.production_per_period - total;
        if supplier < -tol {
            out.push(format!("supplier stockout at t={tt}: S = {supplier}"));
        }
        if total > inst.vehicle_capacity + tol {
            out.push(format!(
                "vehicle over capacity at t={tt}: {total} > {}",
                inst.vehicle_capacity
            ));
        }
    }

    for i in 0..n {
        for tt in 0..t {
            if q[i][tt] < -tol {
                out.push(format!("q[{i}][{tt}] = {} negative", q[i][tt]));
            }
            if q[i][tt] > inst.capacity_customer[i] * y[i][tt] + tol {
                out.push(format!(
                    "delivery without visit: q[{i}][{tt}] = {} > M*y = {}",
                    q[i][tt],
                    inst.capacity_customer[i] * y[i][tt]
                ));
            }
            let coverage: f64 = inst
                .routes
                .iter()
                .enumerate()
                .filter(|(_, r)| r.covers(i))
                .map(|(kk, _)| z[kk][tt])
                .sum();
            if y[i][tt] > coverage + tol {
                out.push(format!(
                    "visit without route: y[{i}][{tt}] = {} > coverage {coverage}",
                    y[i][tt]
                ));
            }
        }
    }
    if let MaxVisits::Limit(vmax) = inst.max_visits_per_day {
        for tt in 0..t {
            let visits: f64 = (0..n).map(|i| y[i][tt]).sum();
            if visits > vmax as f64 + tol {
                out.push(format!("visit budget exceeded at t={tt}: {visits} > {vmax}"));
            }
        }
    }
    out
}

/// Total cost of a plan computed directly from plan quantities: customer and
/// supplier holding along the inventory recursions plus routing.
pub fn plan_cost(inst: &IrpInstance, q: &[Vec<f64>], z: &[Vec<f64>], d: &DemandMatrix) -> f64 {
    let n = inst.n_customers;
    let t = inst.horizon;
    let mut cost = 0.0;
    for i in 0..n {
        let mut s = inst.initial_inventory[i];
        for tt in 0..t {
            s = s + q[i][tt] - d.get(i, tt);
            cost += inst.holding_customer[i] * s;
        }
    }
    let mut supplier = inst.supplier_initial;
    for tt in 0..t {
        let total: f64 = (0..n).map(|i| q[i][tt]).sum();
        supplier = supplier + inst.production_per_period - total;
        cost += inst.holding_supplier * supplier;
    }
    for (kk, route) in inst.routes.iter().enumerate() {
        for tt in 0..t {
            cost += route.cost * z[kk][tt];
        }
    }
    cost
}
