//! Decision-focused learning toolkit for the inventory routing problem (IRP).
//!
//! The crate covers the full predict-then-optimize pipeline:
//!
//! * [`instance`] — problem data, validation, synthetic generation, JSON I/O.
//! * [`model`] — compilation of an instance into an equality-standard-form
//!   program `min c'x  s.t. Ax = b, x >= 0` with an integrality mask, plus
//!   quadratic-regularized and log-barrier objective variants.
//! * [`solver`] — a primal-dual interior-point core for the continuous
//!   relaxations, branch-and-bound for the MILP, and a brute-force oracle
//!   for tiny instances.
//! * [`diffopt`] — gradients of the relaxed optimum with respect to the
//!   program data (`c` and `b`) via implicit differentiation of the KKT or
//!   barrier optimality conditions, with a finite-difference checker.
//! * [`predictor`] — a small feedforward demand model with exact
//!   reverse-mode gradients and an Adam optimizer.
//! * [`training`] — two-stage and decision-focused training loops, regret
//!   metrics, and the regret-vs-error sweep.

pub mod diffopt;
pub mod instance;
pub mod model;
pub mod predictor;
pub mod solver;
pub mod sparse;
pub mod training;
