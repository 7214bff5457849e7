//! IRP problem data: types, validation, synthetic generation, and JSON I/O.
//!
//! An [`IrpInstance`] bundles everything a plan depends on: the customer set,
//! the planning horizon, a fixed catalog of candidate routes (each a customer
//! subset with a traversal cost), capacities, holding costs, and the demand
//! matrix. Routing is deliberately catalog-based: selecting route `k` on day
//! `t` is a binary decision, and arc-level tours are out of scope.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("format error in field `{field}`: {problem}")]
    Format { field: String, problem: String },
    #[error("cannot write invalid instance: {0}")]
    InvalidInstance(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A candidate route: the set of customers it visits and its traversal cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    /// 0-based customer indices covered by this route.
    pub visits: Vec<usize>,
    /// Total travel cost incurred each day the route is driven.
    pub cost: f64,
}

impl Route {
    pub fn new(mut visits: Vec<usize>, cost: f64) -> Self {
        visits.sort_unstable();
        visits.dedup();
        Route { visits, cost }
    }

    pub fn covers(&self, customer: usize) -> bool {
        self.visits.binary_search(&customer).is_ok()
    }
}

/// Per-customer, per-period demand: an N x T matrix, customer-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandMatrix {
    n: usize,
    t: usize,
    values: Vec<f64>,
}

impl DemandMatrix {
    pub fn new(n: usize, t: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n * t, "demand matrix shape mismatch");
        DemandMatrix { n, t, values }
    }

    pub fn zeros(n: usize, t: usize) -> Self {
        DemandMatrix::new(n, t, vec![0.0; n * t])
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        let t = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(n * t);
        for row in &rows {
            assert_eq!(row.len(), t, "ragged demand rows");
            values.extend_from_slice(row);
        }
        DemandMatrix { n, t, values }
    }

    pub fn n_customers(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> usize {
        self.t
    }

    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.values[i * self.t + t]
    }

    pub fn set(&mut self, i: usize, t: usize, v: f64) {
        self.values[i * self.t + t] = v;
    }

    /// Flattened customer-major view: entry `i*T + t` is demand of customer
    /// `i` in period `t`. This ordering is shared with the model's balance
    /// rows and the demand-to-RHS map.
    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| self.values[i * self.t..(i + 1) * self.t].to_vec())
            .collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DemandMatrix {
        DemandMatrix {
            n: self.n,
            t: self.t,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }
}

/// Daily visit budget: the instance-level switch between the "at most
/// `limit` customers per day" rule and no budget at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaxVisits {
    Unlimited,
    Limit(usize),
}

impl MaxVisits {
    pub fn as_limit(&self) -> Option<usize> {
        match self {
            MaxVisits::Unlimited => None,
            MaxVisits::Limit(v) => Some(*v),
        }
    }
}

impl fmt::Display for MaxVisits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaxVisits::Unlimited => write!(f, "unlimited"),
            MaxVisits::Limit(v) => write!(f, "{v}"),
        }
    }
}

/// Full IRP problem data.
#[derive(Debug, Clone, PartialEq)]
pub struct IrpInstance {
    pub n_customers: usize,
    pub horizon: usize,
    pub routes: Vec<Route>,
    pub vehicle_capacity: f64,
    pub production_per_period: f64,
    pub supplier_initial: f64,
    pub holding_supplier: f64,
    pub holding_customer: Vec<f64>,
    pub capacity_customer: Vec<f64>,
    pub initial_inventory: Vec<f64>,
    pub demand: DemandMatrix,
    pub max_visits_per_day: MaxVisits,
}

/// A single violated invariant, with the offending field path.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Outcome of [`validate_instance`]: ok, or the full list of violations.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every instance invariant and reports all violations found.
/// Violations are data, not errors: the function never fails.
pub fn validate_instance(inst: &IrpInstance) -> ValidationReport {
    let mut v = Vec::new();
    let mut push = |field: &str, message: String| {
        v.push(Violation {
            field: field.to_string(),
            message,
        })
    };

    let n = inst.n_customers;
    let t = inst.horizon;
    if n == 0 {
        push("n_customers", "must be strictly positive".into());
    }
    if t == 0 {
        push("horizon", "must be strictly positive".into());
    }
    if !(inst.vehicle_capacity > 0.0) {
        push("vehicle_capacity", "must be strictly positive".into());
    }
    if !(inst.production_per_period >= 0.0) {
        push("production_per_period", "must be nonnegative".into());
    }
    if !(inst.supplier_initial >= 0.0) {
        push("supplier_initial", "must be nonnegative".into());
    }
    if !(inst.holding_supplier >= 0.0) {
        push("holding_supplier", "must be nonnegative".into());
    }
    if inst.holding_customer.len() != n {
        push("holding_customer", format!("length must be {n}"));
    }
    if inst.capacity_customer.len() != n {
        push("capacity_customer", format!("length must be {n}"));
    }
    if inst.initial_inventory.len() != n {
        push("initial_inventory", format!("length must be {n}"));
    }
    for (i, &h) in inst.holding_customer.iter().enumerate() {
        if !(h >= 0.0) {
            push(&format!("holding_customer[{i}]"), "must be nonnegative".into());
        }
    }
    for (i, &m) in inst.capacity_customer.iter().enumerate() {
        if !(m > 0.0) {
            push(
                &format!("capacity_customer[{i}]"),
                "must be strictly positive".into(),
            );
        }
    }
    for (i, &s0) in inst.initial_inventory.iter().enumerate() {
        if !(s0 >= 0.0) {
            push(&format!("initial_inventory[{i}]"), "must be nonnegative".into());
        }
        if let Some(&cap) = inst.capacity_customer.get(i) {
            if s0 > cap {
                push(
                    &format!("initial_inventory[{i}]"),
                    format!("exceeds capacity_customer[{i}] = {cap}"),
                );
            }
        }
    }
    if inst.demand.n_customers() != n || inst.demand.horizon() != t {
        push(
            "demand",
            format!(
                "dimensions {}x{} do not match instance {n}x{t}",
                inst.demand.n_customers(),
                inst.demand.horizon()
            ),
        );
    }
    for i in 0..inst.demand.n_customers() {
        for tt in 0..inst.demand.horizon() {
            if !(inst.demand.get(i, tt) >= 0.0) {
                push(&format!("demand[{i}][{tt}]"), "demand nonnegative".into());
            }
        }
    }
    if let MaxVisits::Limit(0) = inst.max_visits_per_day {
        push("max_visits_per_day", "must be positive or unlimited".into());
    }
    for (k, route) in inst.routes.iter().enumerate() {
        if route.visits.is_empty() {
            push(&format!("routes[{k}].visits"), "must be nonempty".into());
        }
        if !(route.cost >= 0.0) {
            push(&format!("routes[{k}].cost"), "must be nonnegative".into());
        }
        for &c in &route.visits {
            if c >= n {
                push(
                    &format!("routes[{k}].visits"),
                    format!("customer index {c} out of range 0..{n}"),
                );
            }
        }
    }
    for i in 0..n {
        if !inst.routes.iter().any(|r| r.covers(i)) {
            push(
                "routes",
                format!("route coverage: customer {i} is on no route"),
            );
        }
    }

    ValidationReport { violations: v }
}

/// Generates a valid, feasible synthetic instance, deterministic in `seed`.
///
/// The route catalog always contains the `n` singleton routes plus `k - n`
/// random multi-customer routes priced below the sum of their singletons.
/// Demand follows `base_i * (1 + 0.3 sin(2*pi*t / 7)) + noise`, clamped at zero,
/// which gives the predictor learnable day-of-week structure. Capacities,
/// production, and the supplier's initial stock are sized so the
/// deliver-exactly-demand plan is always feasible.
pub fn generate_instance(
    n: usize,
    t: usize,
    k: usize,
    seed: u64,
) -> Result<IrpInstance, InstanceError> {
    if n == 0 {
        return Err(InstanceError::InvalidParameter(
            "n must be at least 1".into(),
        ));
    }
    if t == 0 {
        return Err(InstanceError::InvalidParameter(
            "t must be at least 1".into(),
        ));
    }
    if k < n {
        return Err(InstanceError::InvalidParameter(format!(
            "k = {k} must be at least n = {n} so every customer can be covered"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_range = Uniform::new(2.0, 8.0);
    let bases: Vec<f64> = (0..n).map(|_| base_range.sample(&mut rng)).collect();

    let mut demand = DemandMatrix::zeros(n, t);
    for i in 0..n {
        let noise = Normal::new(0.0, 0.15 * bases[i]).unwrap();
        for tt in 0..t {
            let seasonal = 1.0 + 0.3 * (2.0 * std::f64::consts::PI * tt as f64 / 7.0).sin();
            let d = bases[i] * seasonal + noise.sample(&mut rng);
            demand.set(i, tt, d.max(0.0));
        }
    }

    let single_cost = Uniform::new(8.0, 15.0);
    let mut routes: Vec<Route> = (0..n)
        .map(|i| Route::new(vec![i], single_cost.sample(&mut rng)))
        .collect();
    let discount = Uniform::new(0.6, 0.9);
    for _ in n..k {
        let size = if n == 1 { 1 } else { rng.gen_range(2..=n.min(4)) };
        let mut visits = Vec::with_capacity(size);
        while visits.len() < size {
            let c = rng.gen_range(0..n);
            if !visits.contains(&c) {
                visits.push(c);
            }
        }
        let sum_singles: f64 = visits.iter().map(|&c| routes[c].cost).sum();
        routes.push(Route::new(visits, sum_singles * discount.sample(&mut rng)));
    }

    let peak: Vec<f64> = (0..n)
        .map(|i| (0..t).map(|tt| demand.get(i, tt)).fold(0.0, f64::max))
        .collect();
    let capacity_customer: Vec<f64> = peak
        .iter()
        .map(|&p| (p.max(1.0)) * rng.gen_range(1.5..2.5))
        .collect();
    let initial_inventory: Vec<f64> = capacity_customer
        .iter()
        .map(|&m| rng.gen_range(0.0..0.3 * m))
        .collect();
    let peak_total: f64 = (0..t)
        .map(|tt| (0..n).map(|i| demand.get(i, tt)).sum::<f64>())
        .fold(0.0, f64::max);
    let vehicle_capacity = peak_total.max(1.0) * rng.gen_range(1.2..1.8);
    let mean_total = demand.mean() * n as f64;
    let production_per_period = mean_total * rng.gen_range(1.0..1.3);
    let holding_supplier = rng.gen_range(0.05..0.15);
    // Holding in the same order of magnitude as amortized route cost keeps
    // carrying decisions nontrivial and puts the derived shortage penalty
    // well above the cost of serving a unit.
    let holding_customer: Vec<f64> = (0..n).map(|_| rng.gen_range(0.6..1.2)).collect();

    // Size the supplier's initial stock so the deliver-exactly-demand plan
    // never drives supplier inventory negative.
    let mut supplier_initial: f64 = 2.0 * mean_total;
    let mut deficit: f64 = 0.0;
    for tt in 0..t {
        let total: f64 = (0..n).map(|i| demand.get(i, tt)).sum();
        deficit += total - production_per_period;
        if deficit > supplier_initial {
            supplier_initial = deficit + 1.0;
        }
    }

    let inst = IrpInstance {
        n_customers: n,
        horizon: t,
        routes,
        vehicle_capacity,
        production_per_period,
        supplier_initial,
        holding_supplier,
        holding_customer,
        capacity_customer,
        initial_inventory,
        demand,
        max_visits_per_day: MaxVisits::Unlimited,
    };
    debug_assert!(validate_instance(&inst).is_ok());
    Ok(inst)
}

/// The canonical two-customer, two-period instance used across the test
/// suites: tight vehicle capacity and a shared route that is cheaper than
/// the two singletons combined.
pub fn tiny2x2() -> IrpInstance {
    IrpInstance {
        n_customers: 2,
        horizon: 2,
        routes: vec![
            Route::new(vec![0], 10.0),
            Route::new(vec![1], 12.0),
            Route::new(vec![0, 1], 18.0),
        ],
        vehicle_capacity: 20.0,
        production_per_period: 15.0,
        supplier_initial: 10.0,
        holding_supplier: 0.1,
        holding_customer: vec![0.2, 0.2],
        capacity_customer: vec![10.0, 10.0],
        initial_inventory: vec![0.0, 0.0],
        demand: DemandMatrix::from_rows(vec![vec![4.0, 6.0], vec![5.0, 5.0]]),
        max_visits_per_day: MaxVisits::Unlimited,
    }
}

const KNOWN_KEYS: [&str; 12] = [
    "n_customers",
    "horizon",
    "vehicle_capacity",
    "production_per_period",
    "supplier_initial",
    "holding_supplier",
    "holding_customer",
    "capacity_customer",
    "initial_inventory",
    "max_visits_per_day",
    "routes",
    "demand",
];

fn format_err(field: &str, problem: impl Into<String>) -> InstanceError {
    InstanceError::Format {
        field: field.to_string(),
        problem: problem.into(),
    }
}

fn get_field<'a>(
    obj: &'a serde_json::Map<String, serde_json::Value>,
    field: &str,
) -> Result<&'a serde_json::Value, InstanceError> {
    obj.get(field)
        .ok_or_else(|| format_err(field, "missing required field"))
}

fn as_f64(v: &serde_json::Value, field: &str) -> Result<f64, InstanceError> {
    v.as_f64().ok_or_else(|| format_err(field, "expected a number"))
}

fn as_usize(v: &serde_json::Value, field: &str) -> Result<usize, InstanceError> {
    v.as_u64()
        .map(|u| u as usize)
        .ok_or_else(|| format_err(field, "expected a nonnegative integer"))
}

fn as_f64_array(v: &serde_json::Value, field: &str) -> Result<Vec<f64>, InstanceError> {
    let arr = v
        .as_array()
        .ok_or_else(|| format_err(field, "expected an array of numbers"))?;
    arr.iter()
        .enumerate()
        .map(|(i, x)| as_f64(x, &format!("{field}[{i}]")))
        .collect()
}

/// Reads an instance from a JSON file, collecting a warning per unknown key.
pub fn read_instance_with_warnings(
    path: impl AsRef<Path>,
) -> Result<(IrpInstance, Vec<String>), InstanceError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| InstanceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_instance_json(&text)
}

/// Reads an instance from a JSON file. Unknown keys are ignored and logged
/// at warn level.
pub fn read_instance(path: impl AsRef<Path>) -> Result<IrpInstance, InstanceError> {
    let (inst, warnings) = read_instance_with_warnings(path)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(inst)
}

pub fn parse_instance_json(text: &str) -> Result<(IrpInstance, Vec<String>), InstanceError> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| format_err("<root>", format!("not valid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| format_err("<root>", "expected a JSON object"))?;

    let mut warnings = Vec::new();
    for key in obj.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            warnings.push(format!("ignoring unknown field `{key}`"));
        }
    }

    let n_customers = as_usize(get_field(obj, "n_customers")?, "n_customers")?;
    let horizon = as_usize(get_field(obj, "horizon")?, "horizon")?;
    let vehicle_capacity = as_f64(get_field(obj, "vehicle_capacity")?, "vehicle_capacity")?;
    let production_per_period = as_f64(
        get_field(obj, "production_per_period")?,
        "production_per_period",
    )?;
    let supplier_initial = as_f64(get_field(obj, "supplier_initial")?, "supplier_initial")?;
    let holding_supplier = as_f64(get_field(obj, "holding_supplier")?, "holding_supplier")?;
    let holding_customer = as_f64_array(get_field(obj, "holding_customer")?, "holding_customer")?;
    let capacity_customer =
        as_f64_array(get_field(obj, "capacity_customer")?, "capacity_customer")?;
    let initial_inventory =
        as_f64_array(get_field(obj, "initial_inventory")?, "initial_inventory")?;

    let max_visits_per_day = match get_field(obj, "max_visits_per_day")? {
        serde_json::Value::String(s) if s == "unlimited" => MaxVisits::Unlimited,
        serde_json::Value::Number(n) if n.is_u64() => {
            MaxVisits::Limit(n.as_u64().unwrap() as usize)
        }
        _ => {
            return Err(format_err(
                "max_visits_per_day",
                "expected a nonnegative integer or \"unlimited\"",
            ))
        }
    };

    let routes_val = get_field(obj, "routes")?
        .as_array()
        .ok_or_else(|| format_err("routes", "expected an array of route objects"))?;
    let mut routes = Vec::with_capacity(routes_val.len());
    for (k, rv) in routes_val.iter().enumerate() {
        let ro = rv
            .as_object()
            .ok_or_else(|| format_err(&format!("routes[{k}]"), "expected an object"))?;
        let visits_val = ro
            .get("visits")
            .ok_or_else(|| format_err(&format!("routes[{k}].visits"), "missing required field"))?;
        let visits_arr = visits_val
            .as_array()
            .ok_or_else(|| format_err(&format!("routes[{k}].visits"), "expected an array"))?;
        let visits = visits_arr
            .iter()
            .enumerate()
            .map(|(j, x)| as_usize(x, &format!("routes[{k}].visits[{j}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let cost_val = ro
            .get("cost")
            .ok_or_else(|| format_err(&format!("routes[{k}].cost"), "missing required field"))?;
        let cost = as_f64(cost_val, &format!("routes[{k}].cost"))?;
        routes.push(Route { visits, cost });
    }

    let demand_val = get_field(obj, "demand")?
        .as_array()
        .ok_or_else(|| format_err("demand", "expected an array of arrays"))?;
    if demand_val.len() != n_customers {
        return Err(format_err(
            "demand",
            format!("expected {n_customers} rows, found {}", demand_val.len()),
        ));
    }
    let mut demand_rows = Vec::with_capacity(n_customers);
    for (i, row) in demand_val.iter().enumerate() {
        let r = as_f64_array(row, &format!("demand[{i}]"))?;
        if r.len() != horizon {
            return Err(format_err(
                &format!("demand[{i}]"),
                format!("expected {horizon} entries, found {}", r.len()),
            ));
        }
        demand_rows.push(r);
    }

    let inst = IrpInstance {
        n_customers,
        horizon,
        routes,
        vehicle_capacity,
        production_per_period,
        supplier_initial,
        holding_supplier,
        holding_customer,
        capacity_customer,
        initial_inventory,
        demand: DemandMatrix::from_rows(demand_rows),
        max_visits_per_day,
    };
    Ok((inst, warnings))
}

pub fn instance_to_json(inst: &IrpInstance) -> serde_json::Value {
    let max_visits = match inst.max_visits_per_day {
        MaxVisits::Unlimited => serde_json::Value::String("unlimited".into()),
        MaxVisits::Limit(v) => serde_json::Value::from(v as u64),
    };
    serde_json::json!({
        "n_customers": inst.n_customers,
        "horizon": inst.horizon,
        "vehicle_capacity": inst.vehicle_capacity,
        "production_per_period": inst.production_per_period,
        "supplier_initial": inst.supplier_initial,
        "holding_supplier": inst.holding_supplier,
        "holding_customer": inst.holding_customer,
        "capacity_customer": inst.capacity_customer,
        "initial_inventory": inst.initial_inventory,
        "max_visits_per_day": max_visits,
        "routes": inst.routes.iter().map(|r| serde_json::json!({
            "visits": r.visits,
            "cost": r.cost,
        })).collect::<Vec<_>>(),
        "demand": inst.demand.rows(),
    })
}

/// Writes a validated instance as pretty-printed JSON.
pub fn write_instance(inst: &IrpInstance, path: impl AsRef<Path>) -> Result<(), InstanceError> {
    let report = validate_instance(inst);
    if !report.is_ok() {
        return Err(InstanceError::InvalidInstance(
            report
                .violations
                .iter()
                .map(Violation::to_string)
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }
    let path = path.as_ref();
    let json = instance_to_json(inst);
    let text = serde_json::to_string_pretty(&json).expect("instance serialization");
    std::fs::write(path, text).map_err(|source| InstanceError::Io {
        path: path.display().to_string(),
        source,
    })
}
