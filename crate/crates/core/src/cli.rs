//! Command-line front end. The binary only parses arguments and calls [`run`].

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::calibrate::{self, ChanceSpec};
use crate::dpnd;
use crate::error::Error;
use crate::model::{Objective, ProblemSpec};
use crate::num::{fmt17, Dec};
use crate::oracle;
use crate::policy::AllocationPolicy;
use crate::simulate;
use crate::solve::{self, DefaultSolver, SolveMode, SolveOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

/// Tolerance on `1'u <= x` before an allocation is reported as infeasible.
const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "dynalloc", version, about = "Multi-period resource allocation under a per-period budget")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum FormulaMode {
    /// Exact budget multiplier and coefficient recursion.
    #[default]
    Exact,
    /// Literal coefficient formulas with the uniform multiplier shift.
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Problem JSON (a solve report is accepted too; its problem is used).
    #[arg(short, long)]
    pub input: PathBuf,
    /// Write the artifact here instead of standard output.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SolverFlags {
    #[arg(long, value_enum, default_value_t = FormulaMode::Exact)]
    pub mode: FormulaMode,
    /// Forbid negative allocations.
    #[arg(long)]
    pub nonneg: bool,
    /// Solve each stage numerically against the exact scenario tree.
    #[arg(long, conflicts_with = "recursion")]
    pub scenario_exact: bool,
    /// Force the closed-form recursion even for one risky entity.
    #[arg(long)]
    pub recursion: bool,
}

impl SolverFlags {
    pub fn options(&self) -> SolveOptions {
        SolveOptions {
            mode: if self.scenario_exact {
                SolveMode::ScenarioExact
            } else if self.recursion {
                SolveMode::Recursion
            } else {
                SolveMode::Auto
            },
            literal: self.mode == FormulaMode::PaperLiteral,
            nonneg: self.nonneg,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the input and report the moment conditions of every period.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Solve and write the policy and value report as JSON.
    Solve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: SolverFlags,
    },
    /// Solve, then estimate per-period moments by Monte Carlo.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: SolverFlags,
        #[arg(long, default_value_t = 100_000)]
        paths: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Defaults to csv for `.csv` outputs, json otherwise.
        #[arg(long, value_enum)]
        format: Option<OutputFormat>,
    },
    /// Convert the objective to separable form, or fit a chance objective.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: SolverFlags,
        /// Targets `d_t` of the chance objective `sum w_t P[x_t > d_t]`,
        /// comma separated; the weights are the objective's `w` (or `a`).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        targets: Option<Vec<f64>>,
        /// Damping of the fixed-point update, in (0, 1].
        #[arg(long)]
        damping: Option<f64>,
        /// Write the iteration trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Budget-enforced policy next to the unconstrained one, period by period.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: SolverFlags,
    },
    /// Brute-force grid search over the scenario tree (small instances only).
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 41)]
        grid: usize,
        #[arg(long)]
        nonneg: bool,
    },
}

/// Failure of a command, mapped to an exit status.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Solver(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Solver(e)
        }
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => EXIT_VALIDATION,
            Failure::Solver(_) => EXIT_SOLVER,
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Runs one command. Artifacts go to `--output` or `out`, diagnostics to `err`.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match cli.command {
        Command::Validate { common } => validate(&common, out),
        Command::Solve { common, flags } => solve_cmd(&common, &flags, out),
        Command::Simulate {
            common,
            flags,
            paths,
            seed,
            format,
        } => simulate_cmd(&common, &flags, paths, seed, format, out),
        Command::Calibrate {
            common,
            flags,
            targets,
            damping,
            trace,
        } => calibrate_cmd(&common, &flags, targets, damping, trace.as_deref(), out),
        Command::Compare { common, flags } => compare(&common, &flags, out),
        Command::Oracle { common, grid, nonneg } => oracle_cmd(&common, grid, nonneg, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = match &f {
                Failure::Validation(msg) => writeln!(err, "error: {msg}"),
                Failure::Solver(e) => writeln!(err, "error: {e}"),
            };
            f.exit_code()
        }
    }
}

fn load(path: &Path) -> std::result::Result<ProblemSpec, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::from(Error::Schema(e.to_string())))?;
    // A solve report carries its problem under "problem".
    let problem = match value.get("problem") {
        Some(p) if value.get("solution").is_some() => p.to_string(),
        _ => text,
    };
    Ok(ProblemSpec::from_json_str(&problem)?)
}

/// Loads the problem and refuses instances whose moments fail the conditions.
fn load_checked(path: &Path) -> std::result::Result<ProblemSpec, Failure> {
    let problem = load(path)?;
    for (t, report) in problem.validation_reports().iter().enumerate() {
        if let Some(c) = report.failures().next() {
            return Err(Failure::Validation(format!(
                "period {}: {} failed ({})",
                t + 1,
                c.name,
                c.detail
            )));
        }
    }
    Ok(problem)
}

fn emit(common: &Common, out: &mut dyn Write, text: &str) -> CmdResult {
    let io = |e: std::io::Error| Failure::Validation(format!("cannot write output: {e}"));
    match &common.output {
        Some(p) => std::fs::write(p, text).map_err(io),
        None => out.write_all(text.as_bytes()).map_err(io),
    }
}

fn validate(common: &Common, out: &mut dyn Write) -> CmdResult {
    let problem = load(&common.input)?;
    let mut text = String::new();
    let mut failed = Vec::new();
    for (t, report) in problem.validation_reports().iter().enumerate() {
        for c in &report.checks {
            let status = if c.passed { "pass" } else { "FAIL" };
            let _ = writeln!(text, "period {}: {}: {} ({})", t + 1, c.name, status, c.detail);
            if !c.passed {
                failed.push(format!("period {} {}", t + 1, c.name));
            }
        }
    }
    if failed.is_empty() {
        text.push_str("assumption1: pass\n");
        emit(common, out, &text)
    } else {
        let _ = writeln!(text, "assumption1: fail ({})", failed.join(", "));
        emit(common, out, &text)?;
        Err(Failure::Validation(format!("assumption1 failed: {}", failed.join(", "))))
    }
}

fn solve_cmd(common: &Common, flags: &SolverFlags, out: &mut dyn Write) -> CmdResult {
    let problem = load_checked(&common.input)?;
    let report = solve::solve(&problem, &flags.options())?;
    let mut text = report.to_json();
    text.push('\n');
    emit(common, out, &text)
}

fn simulate_cmd(
    common: &Common,
    flags: &SolverFlags,
    paths: usize,
    seed: u64,
    format: Option<OutputFormat>,
    out: &mut dyn Write,
) -> CmdResult {
    let problem = load_checked(&common.input)?;
    let report = solve::solve(&problem, &flags.options())?;
    let summary = simulate::simulate_policy(&problem, &report.solution, paths, seed)?;
    let csv = match format {
        Some(f) => f == OutputFormat::Csv,
        None => common
            .output
            .as_ref()
            .and_then(|p| p.extension())
            .is_some_and(|e| e.eq_ignore_ascii_case("csv")),
    };
    let text = if csv {
        summary.to_csv()
    } else {
        let v = json!({
            "method": report.method,
            "claimed_objective": Dec(report.objective),
            "simulation": summary,
        });
        serde_json::to_string_pretty(&v).expect("summary serializes") + "\n"
    };
    emit(common, out, &text)
}

fn calibrate_cmd(
    common: &Common,
    flags: &SolverFlags,
    targets: Option<Vec<f64>>,
    damping: Option<f64>,
    trace_path: Option<&Path>,
    out: &mut dyn Write,
) -> CmdResult {
    let problem = load_checked(&common.input)?;
    let solver = DefaultSolver { options: flags.options() };
    let (value, trace) = if let Some(d) = targets {
        let w = match &problem.objective {
            Objective::VarianceConstrained { w, .. } | Objective::Lagrangian { w, .. } => w.clone(),
            Objective::Separable { a, .. } => a.clone(),
        };
        let r = calibrate::chance_to_meanvar(&problem, &ChanceSpec { w, d }, &solver)?;
        (json!({ "kind": "chance", "result": r }), Vec::new())
    } else {
        match &problem.objective {
            Objective::VarianceConstrained { .. } => {
                let r = calibrate::pi1_to_pi2(&problem, &solver)?;
                let trace = r.trace.clone();
                (json!({ "kind": "variance_constrained", "result": r }), trace)
            }
            Objective::Lagrangian { w, y } => {
                let r = calibrate::pi2_to_pi3(&problem, w, y, &solver, damping)?;
                let trace = r.trace.clone();
                (json!({ "kind": "lagrangian", "result": r }), trace)
            }
            Objective::Separable { .. } => {
                return Err(Failure::Validation(
                    "the objective is already separable; pass --targets for a chance objective".into(),
                ))
            }
        }
    };
    if let Some(p) = trace_path {
        std::fs::write(p, calibrate::trace_csv(&trace))
            .map_err(|e| Failure::Validation(format!("cannot write trace: {e}")))?;
    }
    emit(common, out, &(serde_json::to_string_pretty(&value).expect("serializes") + "\n"))
}

/// One row of the comparison: state, allocation and whether it fits the budget.
struct Row {
    x: f64,
    u: Vec<f64>,
}

impl Row {
    fn total(&self) -> f64 {
        self.u.iter().sum()
    }

    fn feasible(&self) -> bool {
        self.total() <= self.x + FEASIBILITY_TOL * (1.0 + self.x.abs())
    }
}

/// Allocations along the mean-return path `x_t = E[e] x + E[P]'u`.
fn mean_path(problem: &ProblemSpec, policy: &dyn AllocationPolicy) -> crate::Result<Vec<Row>> {
    let mut x = problem.x0;
    let mut rows = Vec::with_capacity(problem.horizon);
    for t in 0..problem.horizon {
        let m = problem.model.moments(t);
        let u = policy.allocate(t, x)?;
        let next = m.mean_ref * x + u.iter().zip(&m.mean_excess).map(|(u, p)| u * p).sum::<f64>();
        rows.push(Row { x, u });
        x = next;
    }
    Ok(rows)
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn compare(common: &Common, flags: &SolverFlags, out: &mut dyn Write) -> CmdResult {
    let problem = load_checked(&common.input)?;
    let options = flags.options();
    let report = solve::solve(&problem, &options)?;
    let separable = problem.with_separable(report.a.clone(), report.b.clone());
    let (_, free) = dpnd::unconstrained_policy(&separable, options.literal)?;
    let enforced = mean_path(&problem, &report.solution)?;
    let baseline = mean_path(&problem, &free)?;

    let mut text = String::new();
    let _ = writeln!(
        text,
        "# budget-enforced ({}) vs unconstrained, along the mean-return path",
        report.method
    );
    let _ = writeln!(
        text,
        "{:>6} | {:>14} {:>14} {:>10} | {:>14} {:>14} {:>10} u (enforced) / u (unconstrained)",
        "period", "x", "1'u", "status", "x", "1'u", "status"
    );
    let status = |r: &Row| if r.feasible() { "ok" } else { "INFEASIBLE" };
    for (t, (e, f)) in enforced.iter().zip(&baseline).enumerate() {
        let _ = writeln!(
            text,
            "{:>6} | {:>14.6} {:>14.6} {:>10} | {:>14.6} {:>14.6} {:>10} {} / {}",
            t + 1,
            e.x,
            e.total(),
            status(e),
            f.x,
            f.total(),
            status(f),
            fmt_vec(&e.u),
            fmt_vec(&f.u),
        );
    }
    let _ = writeln!(text, "objective (enforced): {}", fmt17(report.separable_objective));
    emit(common, out, &text)
}

fn oracle_cmd(common: &Common, grid: usize, nonneg: bool, out: &mut dyn Write) -> CmdResult {
    let problem = load_checked(&common.input)?;
    let sol = oracle::oracle_solve(&problem, grid, nonneg)?;
    let text = serde_json::to_string_pretty(&sol).expect("oracle serializes") + "\n";
    emit(common, out, &text)
}
