//! Command-line front end: instance generation, solving, gradient checks,
//! the regret-vs-error sweep, training, and evaluation.
//!
//! Exit codes: 0 success, 1 runtime failure (missing files, infeasible
//! models, failed checks), 2 usage errors. Output CSVs start with the
//! comment line `# irpdfl v1 seed=<seed> cmd=<argv>` and are buffered in
//! memory so a failing run never leaves a partial file behind.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use irpdfl::diffopt::{max_relative_gradient_error, DiffMethod};
use irpdfl::instance::{generate_instance, read_instance, write_instance, DemandMatrix};
use irpdfl::model::{build_standard_form, Variant};
use irpdfl::predictor::{
    instance_features, load_model, save_model, DataRecord, Dataset, Split,
};
use irpdfl::solver::{branch_and_bound, solve_relaxation, SolverConfig, SolverStatus};
use irpdfl::training::{
    decode_plan, eval_csv, evaluate_model, sweep_csv, sweep_regret_vs_error, train_dfl,
    train_two_stage, training_csv, TrainConfig, TrainMode,
};

/// Marker for errors that are the caller's fault; mapped to exit code 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

#[derive(Parser)]
#[command(
    name = "irpdfl",
    version,
    about = "Inventory-routing decision-focused learning toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SolveMethod {
    /// Exact branch and bound on the MILP.
    Bnb,
    /// Regularized continuous relaxation (quadratic term lambda).
    RelaxQp,
    /// Log-barrier relaxation at fixed mu.
    RelaxBarrier,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GradMethod {
    Qp,
    Barrier,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    TwoStage,
    Dfl,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a random instance file.
    Gen {
        /// Number of customers.
        #[arg(long, default_value_t = 2)]
        n: usize,
        /// Number of periods.
        #[arg(long, default_value_t = 3)]
        t: usize,
        /// Number of catalog routes (at least n).
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output instance path.
        #[arg(short, long, default_value = "instance.json")]
        out: PathBuf,
    },
    /// Solve an instance file and print status and objective.
    Solve {
        /// Instance JSON path.
        file: PathBuf,
        /// Optional demand override: CSV with one row per customer.
        #[arg(long)]
        demand: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SolveMethod::Bnb)]
        method: SolveMethod,
        /// Regularization weight for relax-qp.
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        /// Barrier parameter for relax-barrier.
        #[arg(long, default_value_t = 1e-3)]
        mu: f64,
        /// Optional JSON output: decoded plan (bnb) or relaxed solution.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Check implicit gradients against finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = GradMethod::Qp)]
        method: GradMethod,
        /// Program dimension (clamped to [2, 20]).
        #[arg(long, default_value_t = 10)]
        dim: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Regret-vs-error sweep over noise levels; writes plot-ready CSV.
    Sweep {
        #[arg(long, default_value_t = 30)]
        instances: usize,
        /// Noise grid as LO:HI:STEP (inclusive).
        #[arg(long, default_value = "0:0.5:0.05")]
        eps: String,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Train a demand model on a directory of instance files.
    Train {
        #[arg(long, value_enum, default_value_t = Mode::TwoStage)]
        mode: Mode,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        /// DFL differentiates a lambda-regularized QP (conflicts with --mu).
        #[arg(long)]
        lambda: Option<f64>,
        /// DFL differentiates a mu-barrier relaxation (conflicts with --lambda).
        #[arg(long)]
        mu: Option<f64>,
        /// Hidden layer widths, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "32,32")]
        hidden: Vec<usize>,
        /// Directory of instance JSON files (sorted; 60/20/20 split).
        #[arg(long)]
        data: PathBuf,
        /// Output model path.
        #[arg(short, long, default_value = "model.txt")]
        out: PathBuf,
        /// Per-epoch metrics CSV.
        #[arg(long, default_value = "report.csv")]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a saved model on a directory of instance files.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Directory of held-out instance JSON files.
        #[arg(long)]
        test: PathBuf,
        #[arg(short, long, default_value = "eval.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // Usage problems exit 2; --help and --version exit 0 via clap.
        Err(e) => e.exit(),
    };
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            if e.downcast_ref::<Usage>().is_some() {
                eprintln!("usage error: {e}");
                ExitCode::from(2)
            } else {
                // Append causes, skipping ones a wrapper already printed.
                let mut msg = e.to_string();
                for cause in e.chain().skip(1) {
                    let c = cause.to_string();
                    if !msg.contains(&c) {
                        msg.push_str(": ");
                        msg.push_str(&c);
                    }
                }
                eprintln!("error: {msg}");
                ExitCode::from(1)
            }
        }
    }
}

/// `# irpdfl v1 seed=<seed> cmd=<argv>`: every CSV records how to remake it.
fn csv_header(seed: u64) -> String {
    let argv: Vec<String> = std::env::args().collect();
    format!("# irpdfl v1 seed={seed} cmd={}\n", argv.join(" "))
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Gen { n, t, k, seed, out } => {
            let inst = generate_instance(n, t, k, seed)?;
            write_instance(&inst, &out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Solve {
            file,
            demand,
            method,
            lambda,
            mu,
            out,
        } => solve_cmd(&file, demand.as_deref(), method, lambda, mu, out.as_deref()),
        Cmd::Gradcheck {
            method,
            dim,
            trials,
            seed,
        } => {
            let method = match method {
                GradMethod::Qp => DiffMethod::KktQp,
                GradMethod::Barrier => DiffMethod::Barrier,
            };
            let worst = max_relative_gradient_error(method, dim, trials, seed)?;
            println!("max_relative_error={worst:?}");
            if worst > 1e-4 {
                eprintln!("gradient check failed: {worst:?} > 1e-4");
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep {
            instances,
            eps,
            trials,
            seed,
            out,
        } => {
            let grid = parse_eps_grid(&eps)?;
            let report = sweep_regret_vs_error(instances, &grid, trials, seed)?;
            let body = csv_header(seed) + &sweep_csv(&report);
            std::fs::write(&out, body).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "wrote {} ({} rows, {} trials skipped)",
                out.display(),
                report.rows.len(),
                report.skipped
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Train {
            mode,
            epochs,
            lr,
            lambda,
            mu,
            hidden,
            data,
            out,
            report,
            seed,
        } => {
            if lambda.is_some() && mu.is_some() {
                return Err(usage("--lambda and --mu are mutually exclusive"));
            }
            let mut cfg = TrainConfig {
                mode: match mode {
                    Mode::TwoStage => TrainMode::TwoStage,
                    Mode::Dfl => TrainMode::Dfl,
                },
                epochs,
                lr,
                hidden_dims: hidden,
                seed,
                ..TrainConfig::default()
            };
            if let Some(l) = lambda {
                if l <= 0.0 {
                    return Err(usage("--lambda must be positive"));
                }
                cfg.lambda = l;
            }
            if let Some(m) = mu {
                if m <= 0.0 {
                    return Err(usage("--mu must be positive"));
                }
                cfg.diff_method = DiffMethod::Barrier;
                cfg.mu = m;
            }
            let dataset = load_dataset_dir(&data, false)?;
            let (model, reports) = match cfg.mode {
                TrainMode::TwoStage => train_two_stage(&dataset, &cfg)?,
                TrainMode::Dfl => train_dfl(&dataset, &cfg)?,
            };
            let body = csv_header(seed) + &training_csv(&reports);
            save_model(&model, &out)?;
            std::fs::write(&report, body)
                .with_context(|| format!("writing {}", report.display()))?;
            println!(
                "trained {} epochs on {} instances; model -> {}, report -> {}",
                reports.len(),
                dataset.records.len(),
                out.display(),
                report.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval {
            model,
            test,
            out,
            seed,
        } => {
            let model = load_model(&model)?;
            let dataset = load_dataset_dir(&test, true)?;
            let cfg = TrainConfig::default();
            let report = evaluate_model(&model, &dataset, Split::Test, &cfg)?;
            let body = csv_header(seed) + &eval_csv(&report);
            std::fs::write(&out, body).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "wrote {} ({} instances, {} skipped)",
                out.display(),
                report.rows.len(),
                report.skipped
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn solve_cmd(
    file: &Path,
    demand: Option<&Path>,
    method: SolveMethod,
    lambda: f64,
    mu: f64,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let inst = read_instance(file)?;
    let d = match demand {
        Some(path) => read_demand_csv(path, inst.n_customers, inst.horizon)?,
        None => inst.demand.clone(),
    };
    let cfg = SolverConfig::default();
    let (variant, exact) = match method {
        SolveMethod::Bnb => (Variant::Plain, true),
        SolveMethod::RelaxQp => {
            if lambda <= 0.0 {
                return Err(usage("--lambda must be positive for relax-qp"));
            }
            (Variant::Regularized { lambda }, false)
        }
        SolveMethod::RelaxBarrier => {
            if mu <= 0.0 {
                return Err(usage("--mu must be positive for relax-barrier"));
            }
            (Variant::Barrier { mu }, false)
        }
    };
    let prog = build_standard_form(&inst, &d, variant)?;
    let sol = if exact {
        branch_and_bound(&prog, &cfg)?
    } else {
        solve_relaxation(&prog, &cfg)?
    };
    println!("status={} objective={:?}", sol.status, sol.objective);
    if sol.status != SolverStatus::Optimal {
        bail!("solve ended with status {}", sol.status);
    }
    if let Some(path) = out {
        let json = if exact {
            let plan = decode_plan(&prog, &sol)?;
            serde_json::json!({
                "status": sol.status.to_string(),
                "objective": sol.objective,
                "deliveries": plan.deliveries,
                "routes_used": plan.routes_used,
                "visits": plan.visits,
            })
        } else {
            serde_json::json!({
                "status": sol.status.to_string(),
                "objective": sol.objective,
                "x": sol.x,
            })
        };
        let text = serde_json::to_string_pretty(&json).expect("solution serialization");
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

/// Demand override: one CSV row per customer, `horizon` values each.
/// Comment lines starting with `#` are skipped.
fn read_demand_csv(path: &Path, n: usize, t: usize) -> Result<DemandMatrix> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading demand file {}", path.display()))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .with_context(|| format!("{}:{}: bad number {v:?}", path.display(), lineno + 1))
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    if rows.len() != n || rows.iter().any(|r| r.len() != t) {
        bail!(
            "demand file {} must have {n} rows of {t} values",
            path.display()
        );
    }
    let mut d = DemandMatrix::zeros(n, t);
    for (i, row) in rows.iter().enumerate() {
        for (tt, &v) in row.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                bail!("demand file {}: demand must be finite and nonnegative", path.display());
            }
            d.set(i, tt, v);
        }
    }
    Ok(d)
}

/// `LO:HI:STEP`, endpoints inclusive up to rounding.
fn parse_eps_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(usage(format!("--eps expects LO:HI:STEP, got {spec:?}")));
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("--eps: {p:?} is not a number")))
        })
        .collect::<Result<_>>()?;
    let (lo, hi, step) = (nums[0], nums[1], nums[2]);
    if !(lo >= 0.0) || hi < lo {
        return Err(usage("--eps needs 0 <= LO <= HI"));
    }
    if step <= 0.0 {
        if lo == hi {
            return Ok(vec![lo]);
        }
        return Err(usage("--eps STEP must be positive when LO < HI"));
    }
    let mut grid = Vec::new();
    let mut k = 0usize;
    loop {
        let v = lo + step * k as f64;
        if v > hi + 1e-12 {
            break;
        }
        grid.push(v);
        k += 1;
    }
    Ok(grid)
}

/// Loads every `*.json` instance in a directory, sorted by file name, into
/// a dataset with the positional 60/20/20 split (or all-test for eval).
fn load_dataset_dir(dir: &Path, all_test: bool) -> Result<Dataset> {
    let entries = std::fs::read_dir(dir)
        .with_context(|| format!("reading data directory {}", dir.display()))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .json instance files in {}", dir.display());
    }
    let count = paths.len();
    let mut records = Vec::with_capacity(count);
    let mut shape: Option<(usize, usize)> = None;
    for (idx, path) in paths.iter().enumerate() {
        let inst = read_instance(path)?;
        let this = (inst.n_customers, inst.horizon);
        match shape {
            None => shape = Some(this),
            Some(s) if s != this => bail!(
                "{}: instance is {}x{} but the dataset is {}x{}",
                path.display(),
                this.0,
                this.1,
                s.0,
                s.1
            ),
            _ => {}
        }
        let features = instance_features(&inst, None)?;
        let split = if all_test {
            Split::Test
        } else {
            let frac = (idx as f64 + 0.5) / count as f64;
            if frac < 0.6 {
                Split::Train
            } else if frac < 0.8 {
                Split::Val
            } else {
                Split::Test
            }
        };
        records.push(DataRecord {
            id: idx,
            instance: inst,
            features,
            split,
        });
    }
    let (n, t) = shape.expect("at least one instance");
    Ok(Dataset {
        records,
        n_customers: n,
        horizon: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eps_grid_covers_inclusive_range() {
        let g = parse_eps_grid("0:0.5:0.05").unwrap();
        assert_eq!(g.len(), 11);
        assert!((g[10] - 0.5).abs() <= 1e-12);
        assert_eq!(parse_eps_grid("0.3:0.3:0").unwrap(), vec![0.3]);
        assert!(parse_eps_grid("0:1").is_err());
        assert!(parse_eps_grid("-1:0:0.1").is_err());
        assert!(parse_eps_grid("0:1:0").is_err());
    }
}
