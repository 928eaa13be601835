use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};

use mvu_core::accountant::{default_orders, RdpMethod, RenyiProfile};
use mvu_core::designer::{build_bitwise_rr, build_generalized_rr, design_mvu, SolverOptions};
use mvu_core::dme::{
    budget_sweep, design_vector_tables, run_scalar_dme_multi, run_vector_dme, write_csv, DmeMode, DmeResult,
    DmeRun, SweepSimulation, VectorMechanism,
};
use mvu_core::lattice::{dither_with_gamma, worst_case_gamma, DitherGrid, NormPreservingConfig};
use mvu_core::mechanisms::{privatize_vector, write_payloads, VectorSpec};
use mvu_core::rng::substream;
use mvu_core::tables::{check_feasibility, deserialize, serialize, LoadPolicy};
use mvu_core::{MechanismTable, PrivacySpec};

use crate::{
    AccountArgs, BaselineArg, CheckArgs, Cli, Command, DesignArgs, MechanismKind, MethodArg, ModeArg, PrivacyKindArg,
    PrivatizeArgs, RdpMethodArg, SimulateArgs, SweepArgs,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

pub enum Status {
    Done,
    NotConverged,
}

/// Bad input from the command line or an input file.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Invalid>().is_some() {
        return 2;
    }
    match e.downcast_ref::<mvu_core::Error>() {
        Some(
            mvu_core::Error::Io(_)
            | mvu_core::Error::Json(_)
            | mvu_core::Error::Solver(_)
            | mvu_core::Error::Numeric(_)
            | mvu_core::Error::SamplingFailure { .. },
        ) => 1,
        Some(_) => 2,
        None => 1,
    }
}

pub fn dispatch(cli: &Cli) -> Result<Status> {
    match &cli.command {
        Command::Design(a) => design(cli, a),
        Command::Check(a) => check(cli, a),
        Command::Privatize(a) => privatize(cli, a),
        Command::Account(a) => account(cli, a),
        Command::SimulateDme(a) => simulate(cli, a),
        Command::BudgetSweep(a) => sweep(cli, a),
    }
}

fn out_path(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| invalid("--out is required for this subcommand"))
}

fn say(cli: &Cli, line: impl AsRef<str>) {
    if !cli.quiet {
        println!("{}", line.as_ref());
    }
}

fn tool() -> Value {
    json!({ "name": "mvu", "version": VERSION })
}

fn load_table(path: &Path) -> Result<MechanismTable> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let loaded = deserialize(&text, LoadPolicy::Strict).with_context(|| format!("loading {}", path.display()))?;
    Ok(loaded.table)
}

fn solver_options(cli: &Cli, method: MethodArg, restarts: Option<usize>, tolerance: Option<f64>) -> Result<SolverOptions> {
    let mut opts = match method {
        MethodArg::Hard => SolverOptions::default(),
        MethodArg::Penalty => SolverOptions::penalty(),
    };
    opts.seed = cli.seed;
    if let Some(r) = restarts {
        opts.restarts = r;
    }
    if let Some(t) = tolerance {
        opts.tolerance = t;
    }
    opts.validate()?;
    Ok(opts)
}

fn design(cli: &Cli, a: &DesignArgs) -> Result<Status> {
    let out = out_path(cli)?;
    let b_in = a.bin.unwrap_or(a.bout);
    let opts = solver_options(cli, a.method, a.restarts, a.tolerance)?;
    let config = json!({
        "command": "design",
        "mechanism": format!("{:?}", a.mechanism).to_lowercase(),
        "epsilon": a.epsilon,
        "b_in": b_in,
        "b_out": a.bout,
        "metric_p": a.metric_p,
        "solver": opts,
        "seed": cli.seed,
    });
    let (table, converged, diagnostic) = match a.mechanism {
        MechanismKind::Brr | MechanismKind::Grr => {
            if b_in != a.bout {
                return Err(invalid("closed-form mechanisms need --bin equal to --bout"));
            }
            let t = if a.mechanism == MechanismKind::Brr {
                build_bitwise_rr(a.epsilon, a.bout)?
            } else {
                build_generalized_rr(a.epsilon, a.bout)?
            };
            (t, true, None)
        }
        MechanismKind::Mvu | MechanismKind::MvuMetric => {
            let spec = if a.mechanism == MechanismKind::Mvu {
                PrivacySpec::pure(a.epsilon)
            } else {
                PrivacySpec::metric(a.epsilon, a.metric_p)
            };
            let r = design_mvu(spec, b_in, a.bout, &opts)?;
            (r.table, r.converged, r.diagnostic)
        }
    };
    let table = table.with_provenance("config", config);
    let report = table.check();
    fs::write(out, serialize(&table)?).with_context(|| format!("writing {}", out.display()))?;
    say(
        cli,
        format!(
            "wrote {}: objective {:.6}, realized epsilon {:.6}, valid {}, converged {}",
            out.display(),
            table.variance_objective(),
            report.realized_epsilon,
            report.valid,
            converged
        ),
    );
    if let Some(d) = diagnostic {
        eprintln!("warning: {d}");
    }
    Ok(if converged { Status::Done } else { Status::NotConverged })
}

fn check(cli: &Cli, a: &CheckArgs) -> Result<Status> {
    let text = fs::read_to_string(&a.table).with_context(|| format!("reading {}", a.table.display()))?;
    let loaded = deserialize(&text, LoadPolicy::Warn).with_context(|| format!("loading {}", a.table.display()))?;
    let mut tol = *loaded.table.tolerances();
    if let Some(v) = a.tol_dp {
        tol.dp = v;
    }
    if let Some(v) = a.tol_bias {
        tol.bias = v;
    }
    if let Some(v) = a.tol_row_sum {
        tol.row_sum = v;
    }
    let report = check_feasibility(&loaded.table, &tol);
    if let Some(out) = &cli.out {
        let doc = json!({
            "tool": tool(),
            "config": { "command": "check", "table": a.table, "tolerances": tol },
            "report": report,
        });
        fs::write(out, serde_json::to_string_pretty(&doc)?)?;
    }
    say(
        cli,
        format!(
            "{}: valid {}, dp violation {:.3e}, row-sum deviation {:.3e}, bias {:.3e}, realized epsilon {}",
            a.table.display(),
            report.valid,
            report.max_dp_violation,
            report.max_row_sum_deviation,
            report.max_bias_residual,
            report.realized_epsilon
        ),
    );
    if !report.valid {
        return Err(invalid(format!("{} violates its tolerances", a.table.display())));
    }
    Ok(Status::Done)
}

fn read_vectors(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(k, f)| {
                f.parse::<f64>()
                    .map_err(|_| invalid(format!("{} row {} column {}: not a number: {f:?}", path.display(), i + 1, k + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(invalid(format!("{} contains no vectors", path.display())));
    }
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(invalid(format!("{}: rows differ in length", path.display())));
    }
    Ok(rows)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn privatize(cli: &Cli, a: &PrivatizeArgs) -> Result<Status> {
    let out = out_path(cli)?;
    let table = load_table(&a.table)?;
    let rows = read_vectors(&a.input)?;
    let spec = VectorSpec::new(rows[0].len(), a.p, a.sensitivity)?;
    let np = if a.norm_preserving {
        let grid = DitherGrid::symmetric(table.input_levels(), a.sensitivity)?;
        let cfg = NormPreservingConfig::new(a.sensitivity, a.dither_delta).with_norm_order(a.p);
        let gamma = worst_case_gamma(spec.dim, &grid, &cfg)?;
        Some((grid, cfg, gamma))
    } else {
        None
    };
    let payloads = rows
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = substream(cli.seed, i as u64);
            let p = match &np {
                Some((grid, cfg, gamma)) => {
                    let q = dither_with_gamma(x, *gamma, grid, cfg, &mut rng)?;
                    privatize_vector(&table, &q.dithered.values, &spec, &mut rng)?
                }
                None => privatize_vector(&table, x, &spec, &mut rng)?,
            };
            Ok(p)
        })
        .collect::<std::result::Result<Vec<_>, mvu_core::Error>>()
        .with_context(|| format!("privatizing {}", a.input.display()))?;
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    write_payloads(&mut w, &payloads)?;
    w.flush()?;
    let meta = json!({
        "tool": tool(),
        "config": {
            "command": "privatize",
            "table": a.table,
            "input": a.input,
            "p": a.p,
            "sensitivity": a.sensitivity,
            "norm_preserving": a.norm_preserving,
            "dither_delta": a.dither_delta,
            "seed": cli.seed,
        },
        "count": payloads.len(),
        "d": spec.dim,
        "b_out": table.b_out(),
        "gamma": np.as_ref().map(|(_, _, g)| *g),
        "decode": "coordinate = (2*sensitivity*A[j] - sensitivity) / gamma",
    });
    fs::write(sidecar(out), serde_json::to_string_pretty(&meta)?)?;
    say(
        cli,
        format!(
            "wrote {} payloads of {} bits to {}",
            payloads.len(),
            spec.dim * table.b_out() as usize,
            out.display()
        ),
    );
    Ok(Status::Done)
}

fn account(cli: &Cli, a: &AccountArgs) -> Result<Status> {
    let out = out_path(cli)?;
    let table = load_table(&a.table)?;
    let orders = if a.alphas.is_empty() { default_orders() } else { a.alphas.clone() };
    let method = match a.method {
        RdpMethodArg::Greedy => RdpMethod::Greedy,
        RdpMethodArg::Lp => RdpMethod::Lp,
        RdpMethodArg::Exact => RdpMethod::Exact,
    };
    let profile = RenyiProfile::new(&table, a.metric_p, a.sensitivity, a.dim, &orders, method)?;
    let ledger = profile.compose(a.steps, a.delta)?;
    let doc = json!({
        "tool": tool(),
        "config": {
            "command": "account",
            "table": a.table,
            "metric_p": a.metric_p,
            "sensitivity": a.sensitivity,
            "dim": a.dim,
            "steps": a.steps,
            "delta": a.delta,
            "method": method,
            "alphas": orders,
            "seed": cli.seed,
        },
        "ledger": ledger,
    });
    fs::write(out, serde_json::to_string_pretty(&doc)?)?;
    say(
        cli,
        format!(
            "epsilon {} at delta {} after {} steps (order {})",
            ledger.epsilon, a.delta, a.steps, ledger.best_order
        ),
    );
    Ok(Status::Done)
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<Status> {
    let out = out_path(cli)?;
    let mode = match a.mode {
        ModeArg::Scalar => DmeMode::Scalar,
        ModeArg::VectorL1 => DmeMode::VectorL1,
        ModeArg::VectorL2 => DmeMode::VectorL2,
    };
    if a.table.is_empty() && a.baseline.is_empty() && !a.mvu {
        return Err(invalid("choose at least one of --table, --baseline, --mvu"));
    }
    let dim = if mode == DmeMode::Scalar { 1 } else { a.d };
    let run = DmeRun {
        mode,
        n: a.n,
        dim,
        trials: a.trials,
        seed: cli.seed,
    };
    run.validate()?;
    let mut results: Vec<DmeResult> = Vec::new();
    let mut converged = true;
    let opts = solver_options(cli, MethodArg::Hard, None, None)?;

    if mode == DmeMode::Scalar {
        if !a.baseline.is_empty() {
            return Err(invalid("baselines are only simulated in vector modes"));
        }
        let xs: Vec<f64> = if a.x.is_empty() {
            (0..=10).map(|k| -1.0 + 0.2 * k as f64).collect()
        } else {
            a.x.clone()
        };
        for path in &a.table {
            results.push(run_scalar_dme_multi(&load_table(path)?, &xs, a.n, a.trials, cli.seed)?);
        }
        if a.mvu {
            for &e in &a.epsilons {
                let r = design_mvu(PrivacySpec::pure(e), a.bin.unwrap_or(a.bout), a.bout, &opts)?;
                converged &= r.converged;
                results.push(run_scalar_dme_multi(&r.table, &xs, a.n, a.trials, cli.seed)?);
            }
        }
    } else {
        let data = run.data();
        let spec = VectorSpec::new(dim, mode.norm_order(), 1.0)?;
        let mut tables: Vec<MechanismTable> = a.table.iter().map(|p| load_table(p)).collect::<Result<_>>()?;
        if a.mvu {
            for r in design_vector_tables(&a.epsilons, spec.norm_order, a.bin.unwrap_or(9), a.bout, &opts)? {
                converged &= r.converged;
                tables.push(r.table);
            }
        }
        for t in &tables {
            let mech = VectorMechanism::Table {
                table: t,
                dither_delta: a.dither_delta,
            };
            results.push(run_vector_dme(&data, &spec, &mech, a.trials, cli.seed)?);
        }
        for b in &a.baseline {
            for &e in &a.epsilons {
                let mech = match b {
                    BaselineArg::Laplace => VectorMechanism::Laplace { epsilon: e },
                    BaselineArg::Gaussian => VectorMechanism::Gaussian {
                        epsilon: e,
                        delta: a.delta,
                    },
                };
                results.push(run_vector_dme(&data, &spec, &mech, a.trials, cli.seed)?);
            }
        }
    }

    let config = json!({
        "command": "simulate-dme",
        "mode": mode,
        "tables": a.table,
        "baselines": a.baseline.iter().map(|b| format!("{b:?}").to_lowercase()).collect::<Vec<_>>(),
        "mvu": a.mvu,
        "b_in": a.bin,
        "b_out": a.bout,
        "n": a.n,
        "d": dim,
        "epsilons": a.epsilons,
        "trials": a.trials,
        "x": a.x,
        "gaussian_delta": a.delta,
        "dither_delta": a.dither_delta,
        "seed": cli.seed,
    });
    let header = vec![
        ("tool".to_string(), format!("mvu {VERSION}")),
        ("config".to_string(), config.to_string()),
    ];
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    write_csv(&mut w, &run, &header, &results)?;
    w.flush()?;
    for r in &results {
        say(
            cli,
            format!("{:<28} epsilon {:<6} mse {:.4e}", r.mechanism, r.epsilon, r.mean()),
        );
    }
    Ok(if converged { Status::Done } else { Status::NotConverged })
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<Status> {
    let out = out_path(cli)?;
    let spec = match a.kind {
        PrivacyKindArg::Pure => PrivacySpec::pure(a.epsilon),
        PrivacyKindArg::Metric => PrivacySpec::metric(a.epsilon, a.metric_p),
    };
    let opts = solver_options(cli, MethodArg::Hard, None, None)?;
    let sim = SweepSimulation {
        n: a.n,
        trials: a.trials,
        seed: cli.seed,
    };
    let cells = budget_sweep(spec, a.bin, &a.bouts, &opts, (a.n > 0).then_some(&sim))?;
    let config = json!({
        "command": "budget-sweep",
        "privacy": spec,
        "b_in": a.bin,
        "b_outs": a.bouts,
        "n": a.n,
        "trials": a.trials,
        "seed": cli.seed,
    });
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    writeln!(w, "# tool=mvu {VERSION}")?;
    writeln!(w, "# config={config}")?;
    {
        let mut csv = csv::Writer::from_writer(&mut w);
        csv.write_record(["b_out", "objective", "converged", "mse", "diagnostic"])?;
        for c in &cells {
            csv.write_record([
                c.b_out.to_string(),
                c.objective.to_string(),
                c.converged.to_string(),
                c.mse.map(|m| m.to_string()).unwrap_or_default(),
                c.diagnostic.clone().unwrap_or_default(),
            ])?;
        }
        csv.flush()?;
    }
    w.flush()?;
    for c in &cells {
        say(
            cli,
            format!(
                "b_out {:>2}: objective {:.6} converged {}{}",
                c.b_out,
                c.objective,
                c.converged,
                c.mse.map(|m| format!(" mse {m:.4e}")).unwrap_or_default()
            ),
        );
    }
    Ok(if cells.iter().all(|c| c.converged) {
        Status::Done
    } else {
        Status::NotConverged
    })
}
