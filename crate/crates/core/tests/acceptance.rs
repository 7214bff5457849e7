//! Release gate: one test per shipped guarantee, each printing a single
//! PASS/FAIL verdict line. Tolerances here are contractual; do not loosen
//! them to make a failing build green.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use irpdfl::diffopt::{
    check_program_gradients, differentiate_barrier, finite_difference_jacobian,
    max_relative_gradient_error, random_strictly_feasible_program, DiffMethod,
};
use irpdfl::instance::generate_instance;
use irpdfl::model::{build_standard_form, StandardFormProgram, Variant};
use irpdfl::predictor::{
    feature_dim, synthesize_dataset, DatasetParams, DemandModel, HiddenActivation,
    OutputActivation, Split, TargetKind,
};
use irpdfl::solver::{
    branch_and_bound, brute_force_oracle, solve_relaxation, Solution, SolverConfig, SolverStatus,
};
use irpdfl::sparse::SparseMatrix;
use irpdfl::training::{
    dataset_mse, dfl_loss, dfl_loss_and_gradient, evaluate_model, mean_regret_by_epsilon,
    objective_regret, objective_regret_against, spearman, sweep_regret_vs_error, train_dfl,
    train_dfl_from, train_two_stage, TrainConfig, TrainMode,
};

fn verdict(n: u32, what: &str, ok: bool) -> bool {
    println!(
        "acceptance criterion {n} ({what}): {}",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

fn scfg() -> SolverConfig {
    SolverConfig::default()
}

fn primal_infeasibility(prog: &StandardFormProgram, x: &[f64]) -> f64 {
    prog.a
        .mul_vec(x)
        .iter()
        .zip(&prog.b)
        .map(|(ax, b)| (ax - b).abs())
        .fold(0.0_f64, f64::max)
}

/// Small instance shapes the exhaustive oracle can afford, cycled by seed.
/// The catalog needs k >= n so singleton routes can cover every customer.
fn oracle_shape(seed: u64) -> (usize, usize, usize) {
    let n = 1 + (seed % 2) as usize;
    let t = 1 + ((seed / 2) % 2) as usize;
    let k = n + (seed % (4 - n as u64)) as usize;
    (n, t, k)
}

#[test]
fn acceptance_1_branch_and_bound_matches_oracle() {
    let start = Instant::now();
    let cfg = scfg();
    let mut worst = 0.0_f64;
    for seed in 0..50u64 {
        let (n, t, k) = oracle_shape(seed);
        let inst = generate_instance(n, t, k, 1_000 + seed).unwrap();
        let prog = build_standard_form(&inst, &inst.demand, Variant::Plain).unwrap();
        let bnb = branch_and_bound(&prog, &cfg).unwrap();
        let oracle = brute_force_oracle(&prog, &cfg).unwrap();
        assert_eq!(bnb.status, SolverStatus::Optimal, "seed {seed}");
        assert_eq!(oracle.status, SolverStatus::Optimal, "seed {seed}");
        worst = worst.max((bnb.objective - oracle.objective).abs());
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = worst <= 1e-6 && elapsed < 60.0;
    assert!(
        verdict(1, "oracle equivalence on 50 instances", ok),
        "worst gap {worst:.3e}, elapsed {elapsed:.1}s"
    );
}

#[test]
fn acceptance_2_solver_soundness() {
    let cfg = scfg();
    let mut worst_kkt = 0.0_f64;
    let mut worst_feas = 0.0_f64;
    let mut worst_bound_excess = f64::NEG_INFINITY;
    let mut checked = |prog: &StandardFormProgram, sol: &Solution| {
        assert_eq!(sol.status, SolverStatus::Optimal);
        worst_kkt = worst_kkt.max(sol.kkt_residual);
        worst_feas = worst_feas.max(primal_infeasibility(prog, &sol.x));
    };
    for seed in 0..12u64 {
        let n = 1 + (seed % 3) as usize;
        let t = 1 + ((seed / 3) % 3) as usize;
        let k = n + (seed % (4 - n as u64)) as usize;
        let inst = generate_instance(n, t, k, 2_000 + seed).unwrap();
        let prog = build_standard_form(&inst, &inst.demand, Variant::Plain).unwrap();
        let lp = solve_relaxation(&prog, &cfg).unwrap();
        let milp = branch_and_bound(&prog, &cfg).unwrap();
        checked(&prog, &lp);
        checked(&prog, &milp);
        worst_bound_excess = worst_bound_excess.max(lp.objective - milp.objective);
    }
    let ok = worst_kkt <= 1e-8 && worst_feas <= 1e-8 && worst_bound_excess <= 1e-9;
    assert!(
        verdict(2, "KKT residual, feasibility, relaxation bound", ok),
        "kkt {worst_kkt:.3e}, feas {worst_feas:.3e}, bound excess {worst_bound_excess:.3e}"
    );
}

#[test]
fn acceptance_3_qp_gradients_match_finite_differences() {
    let mut worst = 0.0_f64;
    // Five sizes, four programs each: twenty strictly convex programs.
    for (i, dim) in [4usize, 8, 12, 16, 20].into_iter().enumerate() {
        let err = max_relative_gradient_error(DiffMethod::KktQp, dim, 4, 300 + i as u64).unwrap();
        worst = worst.max(err);
    }
    let ok = worst <= 1e-4;
    assert!(
        verdict(3, "QP implicit gradients vs finite differences", ok),
        "worst relative error {worst:.3e}"
    );
}

#[test]
fn acceptance_4_barrier_gradients_match_finite_differences() {
    let cfg = scfg();
    let mut worst = 0.0_f64;
    // mu = 1e-2 is the generator default inside the checker.
    for (i, dim) in [4usize, 8, 12, 16, 20].into_iter().enumerate() {
        let err = max_relative_gradient_error(DiffMethod::Barrier, dim, 4, 400 + i as u64).unwrap();
        worst = worst.max(err);
    }
    // mu = 1e-4 on explicit draws.
    for (i, dim) in [4usize, 10, 16, 20].into_iter().enumerate() {
        for trial in 0..3u64 {
            let seed = 4_400 + 13 * i as u64 + trial;
            let prog = random_strictly_feasible_program(dim, (dim / 2).max(1), 0.0, 1e-4, seed);
            let (rel_c, rel_b) =
                check_program_gradients(&prog, 1e-5, seed ^ 0x5eed, &cfg).unwrap();
            worst = worst.max(rel_c).max(rel_b);
        }
    }
    // Analytic anchor: min c.x on the unit box at the symmetric center has
    // dx/dc = -1/(8 mu).
    let mut box_ok = true;
    for mu in [1e-2, 1e-4] {
        let prog = StandardFormProgram::from_raw_parts(
            vec![0.0, 0.0],
            SparseMatrix::from_triplets(1, 2, vec![(0, 0, 1.0), (0, 1, 1.0)]),
            vec![1.0],
            0.0,
            mu,
        )
        .unwrap();
        let sol = solve_relaxation(&prog, &cfg).unwrap();
        let g = differentiate_barrier(&prog, &sol, &[1.0, 0.0]).unwrap();
        let want = -1.0 / (8.0 * mu);
        let rel = (g.dl_dc[0] - want).abs() / want.abs();
        box_ok &= (sol.x[0] - 0.5).abs() <= 1e-8 && rel <= 1e-6;
    }
    let ok = worst <= 1e-4 && box_ok;
    assert!(
        verdict(4, "barrier gradients incl. box-LP anchor", ok),
        "worst relative error {worst:.3e}, box anchor ok: {box_ok}"
    );
}

#[test]
fn acceptance_5_regret_axioms() {
    let cfg = scfg();
    let inst = generate_instance(2, 2, 3, 55).unwrap();
    let prog = build_standard_form(&inst, &inst.demand, Variant::Plain).unwrap();
    let sol_true = branch_and_bound(&prog, &cfg).unwrap();

    let at_truth = objective_regret(&prog, &prog.c, &cfg).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut min_regret = f64::INFINITY;
    let mut scale_drift = 0.0_f64;
    for trial in 0..1_000 {
        // Multiplicative noise keeps slack costs at zero and spans
        // both mild and sign-flipping perturbations.
        let c_hat: Vec<f64> = prog
            .c
            .iter()
            .map(|&v| v * rng.gen_range(-0.5..2.5))
            .collect();
        let r = objective_regret_against(&prog, &c_hat, &sol_true, &cfg).unwrap();
        min_regret = min_regret.min(r);
        if trial % 100 == 0 {
            let scaled: Vec<f64> = c_hat.iter().map(|v| v * 3.7).collect();
            let rs = objective_regret_against(&prog, &scaled, &sol_true, &cfg).unwrap();
            scale_drift = scale_drift.max((rs - r).abs());
        }
    }
    let ok = at_truth.abs() <= 1e-9 && min_regret >= -1e-9 && scale_drift <= 1e-9;
    assert!(
        verdict(5, "regret axioms over 1000 perturbations", ok),
        "at truth {at_truth:.3e}, min {min_regret:.3e}, scale drift {scale_drift:.3e}"
    );
}

#[test]
fn acceptance_6_regret_rises_with_prediction_noise() {
    let start = Instant::now();
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 * 0.05).collect();
    let report = sweep_regret_vs_error(30, &grid, 3, 2_026).unwrap();

    let mut zero_noise_regret = 0.0_f64;
    for row in &report.rows {
        if row.epsilon == 0.0 {
            zero_noise_regret = zero_noise_regret.max(row.realized_regret.abs());
        }
    }
    let means = mean_regret_by_epsilon(&report);
    let (eps, vals): (Vec<f64>, Vec<f64>) = means.into_iter().unzip();
    let rho = spearman(&eps, &vals);
    let elapsed = start.elapsed().as_secs_f64();

    let ok = zero_noise_regret <= 1e-6 && rho >= 0.8 && elapsed < 600.0;
    assert!(
        verdict(6, "noise sweep: zero at 0, Spearman >= 0.8", ok),
        "regret at eps=0 {zero_noise_regret:.3e}, spearman {rho:.3}, elapsed {elapsed:.0}s"
    );
}

#[test]
fn acceptance_7_end_to_end_gradient() {
    let data = synthesize_dataset(
        &DatasetParams {
            n_instances: 1,
            n_customers: 2,
            horizon: 2,
            n_routes: 3,
            target: TargetKind::Nonlinear,
        },
        5,
    )
    .unwrap();
    let rec = &data.records[0];
    let model = DemandModel::new(
        &[feature_dim(2), 4, 1],
        HiddenActivation::Tanh,
        OutputActivation::Softplus,
        31,
    )
    .unwrap();
    let cfg = TrainConfig {
        mode: TrainMode::Dfl,
        ..TrainConfig::default()
    };
    let solver = scfg();
    let (_, analytic) = dfl_loss_and_gradient(&model, rec, &cfg, &solver).unwrap();

    let theta = model.flatten_params();
    let fd = finite_difference_jacobian(
        |p: &[f64]| {
            let mut m = model.clone();
            m.set_params(p).map_err(|e| e.to_string())?;
            dfl_loss(&m, rec, &cfg, &solver)
                .map(|v| vec![v])
                .map_err(|e| e.to_string())
        },
        &theta,
        1e-4,
    )
    .unwrap()
    .remove(0);

    let scale = fd
        .iter()
        .chain(analytic.iter())
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(1.0);
    let worst = analytic
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max)
        / scale;
    let ok = worst <= 1e-3;
    assert!(
        verdict(7, "end-to-end training gradient", ok),
        "relative error {worst:.3e}"
    );
}

#[test]
fn acceptance_8_learning_sanity() {
    // Two-stage: at most 200 parameter updates must halve validation MSE.
    let data = synthesize_dataset(
        &DatasetParams {
            n_instances: 10,
            n_customers: 2,
            horizon: 3,
            n_routes: 3,
            target: TargetKind::Linear,
        },
        11,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 33, // 6 training records -> 198 updates
        lr: 0.02,
        hidden_dims: vec![8],
        report_regret: false,
        seed: 1,
        ..TrainConfig::default()
    };
    let init = DemandModel::new(
        &[feature_dim(2), 8, 1],
        HiddenActivation::Tanh,
        OutputActivation::Softplus,
        cfg.seed,
    )
    .unwrap();
    let before = dataset_mse(&init, &data, Split::Val).unwrap();
    let (_, reports) = train_two_stage(&data, &cfg).unwrap();
    let after = reports.last().unwrap().val_mse;

    // Decision-focused: task loss falls over 50 updates on one instance.
    let dfl_data = synthesize_dataset(
        &DatasetParams {
            n_instances: 1,
            n_customers: 2,
            horizon: 2,
            n_routes: 3,
            target: TargetKind::Nonlinear,
        },
        3,
    )
    .unwrap();
    let dfl_cfg = TrainConfig {
        mode: TrainMode::Dfl,
        epochs: 50,
        lr: 0.02,
        hidden_dims: vec![4],
        report_regret: false,
        seed: 7,
        ..TrainConfig::default()
    };
    let (_, dfl_reports) = train_dfl(&dfl_data, &dfl_cfg).unwrap();
    let first = dfl_reports.first().unwrap().train_loss;
    let last = dfl_reports.last().unwrap().train_loss;

    let ok = after <= 0.5 * before && last < first;
    assert!(
        verdict(8, "two-stage halves val MSE; DFL loss falls", ok),
        "val MSE {before:.4} -> {after:.4}, task loss {first:.4} -> {last:.4}"
    );
}

#[test]
fn acceptance_9_dfl_beats_two_stage_on_misspecified_demand() {
    let mut ts_total = 0.0_f64;
    let mut dfl_total = 0.0_f64;
    let mut count = 0usize;
    for seed in 0..5u64 {
        let data = synthesize_dataset(
            &DatasetParams {
                n_instances: 10,
                n_customers: 2,
                horizon: 3,
                n_routes: 3,
                target: TargetKind::Nonlinear,
            },
            900 + seed,
        )
        .unwrap();
        let ts_cfg = TrainConfig {
            epochs: 40,
            lr: 0.02,
            hidden_dims: vec![8],
            report_regret: false,
            seed,
            ..TrainConfig::default()
        };
        let (ts_model, _) = train_two_stage(&data, &ts_cfg).unwrap();
        let dfl_cfg = TrainConfig {
            mode: TrainMode::Dfl,
            epochs: 8,
            lr: 0.002,
            hidden_dims: vec![8],
            report_regret: false,
            seed,
            ..TrainConfig::default()
        };
        let (dfl_model, _) = train_dfl_from(ts_model.clone(), &data, &dfl_cfg).unwrap();

        let eval_cfg = TrainConfig::default();
        let ts_eval = evaluate_model(&ts_model, &data, Split::Test, &eval_cfg).unwrap();
        let dfl_eval = evaluate_model(&dfl_model, &data, Split::Test, &eval_cfg).unwrap();
        assert!(!ts_eval.rows.is_empty() && !dfl_eval.rows.is_empty());
        for row in &ts_eval.rows {
            ts_total += row.realized_regret;
            count += 1;
        }
        for row in &dfl_eval.rows {
            dfl_total += row.realized_regret;
        }
    }
    let ts_mean = ts_total / count as f64;
    let dfl_mean = dfl_total / count as f64;
    println!("  held-out mean realized regret: dfl {dfl_mean:.6}, two-stage {ts_mean:.6}");
    let ok = dfl_mean <= ts_mean;
    assert!(
        verdict(9, "DFL <= two-stage on held-out regret", ok),
        "dfl {dfl_mean:.6} vs two-stage {ts_mean:.6}"
    );
}
