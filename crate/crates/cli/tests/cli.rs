//! End-to-end checks of the installed binary: exit codes, output formats,
//! determinism, and agreement with the exhaustive solver.

use std::path::Path;
use std::process::{Command, Output};

use irpdfl::instance::read_instance;
use irpdfl::model::{build_standard_form, Variant};
use irpdfl::solver::{brute_force_oracle, SolverConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_irpdfl"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen(dir: &Path, name: &str, n: usize, t: usize, k: usize, seed: u64) -> String {
    let path = dir.join(name).display().to_string();
    let out = run(&[
        "gen",
        "--n",
        &n.to_string(),
        "--t",
        &t.to_string(),
        "--k",
        &k.to_string(),
        "--seed",
        &seed.to_string(),
        "-o",
        &path,
    ]);
    assert!(out.status.success(), "gen failed: {}", stderr(&out));
    path
}

#[test]
fn solve_matches_the_exhaustive_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let path = gen(dir.path(), "a.json", 2, 2, 3, 7);

    let out = run(&["solve", &path, "--method", "bnb"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let line = text
        .lines()
        .find(|l| l.starts_with("status="))
        .expect("status line");
    assert!(line.starts_with("status=optimal objective="), "{line}");
    let objective: f64 = line
        .rsplit('=')
        .next()
        .unwrap()
        .trim()
        .parse()
        .expect("objective parses");

    let inst = read_instance(&path).unwrap();
    let prog = build_standard_form(&inst, &inst.demand, Variant::Plain).unwrap();
    let oracle = brute_force_oracle(&prog, &SolverConfig::default()).unwrap();
    assert!(
        (objective - oracle.objective).abs() <= 1e-6,
        "cli {objective} vs oracle {}",
        oracle.objective
    );
}

#[test]
fn missing_input_fails_naming_the_path() {
    let out = run(&["solve", "/nonexistent/missing.json", "--method", "bnb"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("missing.json"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn unknown_flag_is_a_usage_error_and_leaves_no_file() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("never.csv");
    let out = run(&[
        "sweep",
        "--bogus-flag",
        "-o",
        &target.display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!target.exists(), "usage error must not create output files");
}

#[test]
fn bad_eps_spec_is_a_usage_error_and_leaves_no_file() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("never.csv");
    let out = run(&[
        "sweep",
        "--instances",
        "1",
        "--eps",
        "nonsense",
        "-o",
        &target.display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!target.exists(), "usage error must not create output files");
}

#[test]
fn gradcheck_passes_within_tolerance() {
    let out = run(&["gradcheck", "--method", "qp", "--dim", "10", "--trials", "5"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let val: f64 = text
        .trim()
        .strip_prefix("max_relative_error=")
        .expect("error line")
        .parse()
        .unwrap();
    assert!(val <= 1e-4, "reported {val}");
}

#[test]
fn sweep_reruns_are_byte_identical_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("sweep.csv");
    let args = [
        "sweep",
        "--instances",
        "2",
        "--eps",
        "0:0.2:0.2",
        "--trials",
        "1",
        "--seed",
        "5",
        "-o",
    ];
    let path = target.display().to_string();

    let out1 = run(&[&args[..], &[&path]].concat());
    assert!(out1.status.success(), "{}", stderr(&out1));
    let first = std::fs::read(&target).unwrap();
    let out2 = run(&[&args[..], &[&path]].concat());
    assert!(out2.status.success(), "{}", stderr(&out2));
    let second = std::fs::read(&target).unwrap();
    assert_eq!(first, second, "reruns must be byte identical");

    let text = String::from_utf8(first).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("# irpdfl v1 seed=5 cmd="), "{header}");
    assert_eq!(
        lines.next().unwrap(),
        "epsilon,trial,mse,objective_regret,realized_regret"
    );
    assert_eq!(lines.count(), 2);
}

#[test]
fn demand_override_changes_the_objective() {
    let dir = tempfile::tempdir().unwrap();
    let path = gen(dir.path(), "a.json", 2, 2, 3, 11);
    let base = run(&["solve", &path, "--method", "bnb"]);
    assert!(base.status.success());

    let csv = dir.path().join("demand.csv");
    std::fs::write(&csv, "# override\n0,0\n0,0\n").unwrap();
    let zero = run(&["solve", &path, "--demand", &csv.display().to_string()]);
    assert!(zero.status.success(), "{}", stderr(&zero));
    assert_ne!(stdout(&base), stdout(&zero));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "1,2,3\n").unwrap();
    let out = run(&["solve", &path, "--demand", &bad.display().to_string()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn relaxations_bound_the_milp_from_below() {
    let dir = tempfile::tempdir().unwrap();
    let path = gen(dir.path(), "a.json", 2, 2, 3, 3);
    let parse = |args: &[&str]| -> f64 {
        let out = run(args);
        assert!(out.status.success(), "{}", stderr(&out));
        stdout(&out)
            .lines()
            .find(|l| l.starts_with("status="))
            .unwrap()
            .rsplit('=')
            .next()
            .unwrap()
            .parse()
            .unwrap()
    };
    let milp = parse(&["solve", &path, "--method", "bnb"]);
    // The reported relaxation objective includes the regularizer, so keep
    // lambda small enough that the quadratic term is immaterial.
    let qp = parse(&["solve", &path, "--method", "relax-qp", "--lambda", "1e-9"]);
    assert!(qp <= milp + 1e-3, "qp {qp} vs milp {milp}");
    let barrier = parse(&["solve", &path, "--method", "relax-barrier", "--mu", "1e-5"]);
    assert!(barrier.is_finite());
}

#[test]
fn train_and_eval_produce_model_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    for seed in 0..3u64 {
        gen(&data, &format!("inst{seed}.json"), 2, 2, 3, seed);
    }
    let model = dir.path().join("model.txt");
    let report = dir.path().join("report.csv");
    let out = run(&[
        "train",
        "--mode",
        "two-stage",
        "--epochs",
        "2",
        "--lr",
        "0.01",
        "--hidden",
        "4",
        "--data",
        &data.display().to_string(),
        "-o",
        &model.display().to_string(),
        "--report",
        &report.display().to_string(),
        "--seed",
        "1",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report_text = std::fs::read_to_string(&report).unwrap();
    assert!(report_text.starts_with("# irpdfl v1 seed=1 cmd="));
    assert!(report_text.contains("epoch,train_loss,val_mse,val_realized_regret"));
    assert!(std::fs::read_to_string(&model)
        .unwrap()
        .starts_with("IRPDFL-MLP v1"));

    let eval = dir.path().join("eval.csv");
    let out = run(&[
        "eval",
        "--model",
        &model.display().to_string(),
        "--test",
        &data.display().to_string(),
        "-o",
        &eval.display().to_string(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let eval_text = std::fs::read_to_string(&eval).unwrap();
    assert!(eval_text.contains("instance,mse,realized_regret"));
    // All three data instances are evaluated (none skipped on this seed).
    assert_eq!(eval_text.lines().count(), 2 + eval_text.lines().filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit())).count());

    // Mutually exclusive relaxation flags are a usage error.
    let out = run(&[
        "train",
        "--mode",
        "dfl",
        "--lambda",
        "0.1",
        "--mu",
        "0.001",
        "--data",
        &data.display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
