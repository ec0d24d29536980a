//! `cvar-mdp`: solve mean-CVaR MDPs, query and export value functions, run the
//! online policy, and check everything against brute force.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use cvar_core::model::{augment_random_costs, parse_spec, Horizon, MdpSpec, ModelError, ParsedSpec};
use cvar_core::numfmt::sig12;
use cvar_core::oracle::{cvar_of_distribution, random_spec, OracleError, OutcomeDistribution, RandomSpecConfig};
use cvar_core::policy::{run_trajectory, DerivativeSide, PolicyError, TransitionSource};
use cvar_core::solver::{
    cvar_value, solve_objective, worst_path_value, ObjectiveMode, SolverError, SolverOptions, TableHorizon,
    ValueTables, DEFAULT_SEGMENT_CAP,
};
use cvar_core::tables::TablesError;
use cvar_core::verify::{verify_spec, CheckOutcome};

const EXIT_VALIDATION: u8 = 2;
const EXIT_GUARD: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;
const EXIT_VERIFY: u8 = 5;

#[derive(Parser)]
#[command(name = "cvar-mdp", version, about = "Exact mean-CVaR optimization for finite MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve an MDP and write the value tables.
    Solve(SolveArgs),
    /// Print the optimal objective from a state.
    Value(ValueArgs),
    /// Run the online policy on a fixed or sampled trajectory.
    Policy(PolicyArgs),
    /// Write the breakpoints of one value function as CSV.
    ExportPwl(ExportArgs),
    /// Check the solver against brute force.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Pure,
    MeanPlusAlphaCvar,
    MeanPlusCvar,
}

impl From<Mode> for ObjectiveMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Pure => ObjectiveMode::PureCvar,
            Mode::MeanPlusAlphaCvar => ObjectiveMode::MeanPlusAlphaCvar,
            Mode::MeanPlusCvar => ObjectiveMode::MeanPlusCvar,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Side {
    Left,
    Right,
}

impl From<Side> for DerivativeSide {
    fn from(s: Side) -> Self {
        match s {
            Side::Left => DerivativeSide::Left,
            Side::Right => DerivativeSide::Right,
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    /// MDP document (JSON).
    #[arg(long)]
    mdp: PathBuf,
    /// Number of stages N.
    #[arg(long, conflicts_with = "infinite", required_unless_present = "infinite")]
    horizon: Option<usize>,
    /// Solve the discounted infinite-horizon problem by value iteration.
    #[arg(long, requires = "epsilon")]
    infinite: bool,
    /// Target distance of the returned iterate to the fixed point.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Objective the tables will answer.
    #[arg(long, value_enum, default_value = "pure")]
    mode: Mode,
    /// Tail level; required by `mean-plus-cvar`, which rescales the mean channel.
    #[arg(long)]
    alpha: Option<f64>,
    /// Largest number of segments allowed in any single value function.
    #[arg(long, default_value_t = DEFAULT_SEGMENT_CAP)]
    segment_cap: usize,
    /// Output tables file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TablesInput {
    /// Tables file written by `solve`.
    #[arg(long)]
    tables: PathBuf,
    /// MDP document the tables must have been solved from.
    #[arg(long)]
    mdp: Option<PathBuf>,
}

#[derive(Args)]
struct ValueArgs {
    #[command(flatten)]
    input: TablesInput,
    #[arg(long)]
    state: String,
    /// Tail level in [0, 1]; 0 gives the worst-path value.
    #[arg(long)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "pure")]
    mode: Mode,
}

#[derive(Args)]
struct PolicyArgs {
    #[command(flatten)]
    input: TablesInput,
    #[arg(long)]
    state: String,
    #[arg(long)]
    alpha: f64,
    /// Observed states: a file, or the states inline separated by spaces or commas.
    #[arg(long, conflicts_with = "simulate")]
    trace: Option<String>,
    /// Sample episodes from the model instead of following a fixed trace.
    #[arg(long)]
    simulate: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    episodes: usize,
    /// Steps per sampled episode (default: the horizon, or a 1e-6 tail cutoff).
    #[arg(long)]
    steps: Option<usize>,
    /// One-sided derivative used to seed the tracked supergradient.
    #[arg(long, value_enum, default_value = "right")]
    side: Side,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    tables: PathBuf,
    /// Stage index (default: the top stage).
    #[arg(long)]
    stage: Option<usize>,
    #[arg(long)]
    state: String,
    /// Export Q for this action instead of V.
    #[arg(long)]
    action: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, conflicts_with = "random", required_unless_present = "random")]
    mdp: Option<PathBuf>,
    /// Check seeded random instances instead of a file.
    #[arg(long)]
    random: bool,
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Comma-separated tail levels.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,0.75,1.0")]
    alphas: Vec<f64>,
    /// Horizon; random instances draw N from 1..=3 when omitted.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    fn validation(message: impl Into<String>) -> Self {
        Self::new(EXIT_VALIDATION, message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn solver_failure(context: &str, e: SolverError) -> Failure {
    let code = match e {
        SolverError::SegmentCap { .. } | SolverError::NotConverged { .. } => EXIT_GUARD,
        _ => EXIT_VALIDATION,
    };
    Failure::new(code, format!("{context}: {e}"))
}

fn policy_failure(e: PolicyError) -> Failure {
    match e {
        PolicyError::Infeasible { .. } | PolicyError::WrongStart | PolicyError::TooLong { .. } => {
            Failure::new(EXIT_INFEASIBLE, format!("trace: {e}"))
        }
        PolicyError::Solver(e) => solver_failure("policy", e),
        other => Failure::validation(format!("policy: {other}")),
    }
}

type Outcome<T> = Result<T, Failure>;

fn read(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))
}

fn write_or_print(path: Option<&Path>, text: &str) -> Outcome<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Failure::validation(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Parses a spec file; random-cost documents are expanded into the augmented
/// state space.
fn load_spec(path: &Path) -> Outcome<MdpSpec> {
    let text = read(path)?;
    let parsed = parse_spec(&text).map_err(|e: ModelError| Failure::validation(format!("{}: {e}", path.display())))?;
    Ok(match parsed {
        ParsedSpec::Plain(spec) => spec,
        ParsedSpec::RandomCost(r) => augment_random_costs(&r).spec,
    })
}

fn load_tables(input: &TablesInput) -> Outcome<ValueTables> {
    let text = read(&input.tables)?;
    let tables = ValueTables::from_json(&text)
        .map_err(|e: TablesError| Failure::validation(format!("{}: {e}", input.tables.display())))?;
    if let Some(mdp) = &input.mdp {
        let spec = load_spec(mdp)?;
        if spec.spec_hash() != tables.spec_hash() {
            return Err(Failure::validation(format!(
                "{} was not solved from {} (spec hash {} vs {})",
                input.tables.display(),
                mdp.display(),
                tables.spec_hash(),
                spec.spec_hash()
            )));
        }
    }
    Ok(tables)
}

/// Exact state name, or for augmented specs the `name@w₀` copy.
fn resolve_state(spec: &MdpSpec, name: &str) -> Outcome<usize> {
    if let Some(x) = spec.state_index(name) {
        return Ok(x);
    }
    let prefix = format!("{name}@");
    spec.states()
        .iter()
        .position(|s| s.starts_with(&prefix))
        .ok_or_else(|| Failure::validation(format!("--state: unknown state `{name}`")))
}

fn check_level(alpha: f64, allow_zero: bool) -> Outcome<()> {
    let ok = alpha.is_finite() && alpha <= 1.0 && (alpha > 0.0 || (allow_zero && alpha == 0.0));
    if ok {
        Ok(())
    } else {
        let range = if allow_zero { "[0, 1]" } else { "(0, 1]" };
        Err(Failure::validation(format!("--alpha {alpha} must lie in {range}")))
    }
}

fn cmd_solve(args: &SolveArgs) -> Outcome<()> {
    let spec = load_spec(&args.mdp)?;
    let mode = ObjectiveMode::from(args.mode);
    let alpha = match (args.mode, args.alpha) {
        (Mode::MeanPlusCvar, None) => {
            return Err(Failure::validation("--mode mean-plus-cvar needs --alpha (the mean channel is scaled by it)"))
        }
        (_, Some(a)) => {
            check_level(a, true)?;
            a
        }
        (_, None) => 1.0,
    };
    let (horizon, epsilon) = match (args.horizon, args.infinite) {
        (Some(n), false) => (Horizon::Finite(n), 0.0),
        (None, true) => {
            let eps = args.epsilon.unwrap_or(f64::NAN);
            if !(eps.is_finite() && eps > 0.0) {
                return Err(Failure::validation(format!("--epsilon {eps} must be positive")));
            }
            (Horizon::Infinite, eps)
        }
        _ => return Err(Failure::validation("give either --horizon N or --infinite --epsilon E")),
    };
    let options = SolverOptions { segment_cap: args.segment_cap, ..SolverOptions::default() };
    let tables = solve_objective(&spec, horizon, epsilon, mode, alpha, &options)
        .map_err(|e| solver_failure(&args.mdp.display().to_string(), e))?;
    fs::write(&args.out, tables.to_json()).map_err(|e| Failure::validation(format!("{}: {e}", args.out.display())))?;

    let per_stage = |n: usize| tables.stage(n).map(|s| s.v.iter().map(|f| f.num_segments()).max().unwrap_or(0));
    match tables.horizon() {
        TableHorizon::Finite(n) => {
            println!("stages: {n}");
            for k in 0..=*n {
                println!("stage {k}: max segments {}", per_stage(k).unwrap_or(0));
            }
        }
        TableHorizon::Infinite(info) => {
            println!("stages: 1 (converged after {} iterations)", info.iterations);
            println!("max segments: {}", per_stage(tables.top_stage()).unwrap_or(0));
            println!("last difference: {}", sig12(info.last_difference));
            println!("error bound: {}", sig12(info.error_bound));
        }
    }
    println!("tables written to {}", args.out.display());
    Ok(())
}

fn cmd_value(args: &ValueArgs) -> Outcome<()> {
    let tables = load_tables(&args.input)?;
    let x = resolve_state(tables.source(), &args.state)?;
    check_level(args.alpha, true)?;
    let mode = ObjectiveMode::from(args.mode);
    let value = if args.alpha == 0.0 && args.mode != Mode::MeanPlusAlphaCvar {
        if args.mode == Mode::MeanPlusCvar && !tables.source().has_zero_mean_channel() {
            return Err(Failure::validation(
                "--alpha 0 with --mode mean-plus-cvar is not supported: the worst-path game is exact for pure CVaR only",
            ));
        }
        let spec = tables.source().without_mean();
        worst_path_value(&spec, tables.horizon_kind()).map_err(|e| solver_failure("worst path", e))?[x]
    } else {
        cvar_value(&tables, x, args.alpha, mode).map_err(|e| solver_failure("value", e))?
    };
    println!("{}", sig12(value));
    Ok(())
}

/// State names from a file or an inline list.
fn parse_sequence(spec: &MdpSpec, arg: &str) -> Outcome<Vec<usize>> {
    let path = Path::new(arg);
    let (text, origin) = if path.is_file() { (read(path)?, arg.to_string()) } else { (arg.to_string(), "--trace".into()) };
    let names: Vec<&str> = text.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(Failure::validation(format!("{origin}: empty state sequence")));
    }
    names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            resolve_state(spec, n).map_err(|_| Failure::validation(format!("{origin}: position {i}: unknown state `{n}`")))
        })
        .collect()
}

fn cmd_policy(args: &PolicyArgs) -> Outcome<()> {
    let tables = load_tables(&args.input)?;
    let spec = tables.source();
    let x0 = resolve_state(spec, &args.state)?;
    check_level(args.alpha, false)?;
    let side = DerivativeSide::from(args.side);
    if let Some(seq) = &args.trace {
        let states = parse_sequence(spec, seq)?;
        let trace = run_trajectory(&tables, x0, args.alpha, side, &TransitionSource::Fixed(states)).map_err(policy_failure)?;
        return write_or_print(args.out.as_deref(), &trace.to_csv(&tables));
    }
    if !args.simulate {
        return Err(Failure::validation("give --trace SEQ or --simulate"));
    }
    if args.episodes == 0 {
        return Err(Failure::validation("--episodes must be positive"));
    }
    // One independent stream per episode, derived from the master seed.
    let mut master = ChaCha8Rng::seed_from_u64(args.seed);
    let seeds: Vec<u64> = (0..args.episodes).map(|_| master.gen()).collect();
    let mut csv = String::from("episode,total_discounted_cost,total_discounted_mean_cost\n");
    let mut costs = Vec::with_capacity(args.episodes);
    for (i, &seed) in seeds.iter().enumerate() {
        let source = TransitionSource::Sampled { seed, steps: args.steps };
        let trace = run_trajectory(&tables, x0, args.alpha, side, &source).map_err(policy_failure)?;
        csv.push_str(&format!("{i},{},{}\n", sig12(trace.total_cost), sig12(trace.total_mean_cost)));
        costs.push(trace.total_cost);
    }
    let n = costs.len() as f64;
    let dist = OutcomeDistribution::new(costs.iter().map(|&c| (c, 1.0 / n)).collect(), 0.0)
        .map_err(|e: OracleError| Failure::validation(e.to_string()))?;
    let empirical = cvar_of_distribution(&dist, args.alpha).map_err(|e| Failure::validation(e.to_string()))?;
    // Standard error of the tail-average estimator via its influence function.
    let var = empirical_var(&costs, args.alpha);
    let tail: Vec<f64> =
        costs.iter().map(|&c| var + (c - var).max(0.0) / args.alpha).collect();
    let mean_tail = tail.iter().sum::<f64>() / n;
    let sd = (tail.iter().map(|t| (t - mean_tail).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let exact = cvar_value(&tables, x0, args.alpha, ObjectiveMode::PureCvar).ok();
    if let Some(out) = &args.out {
        fs::write(out, &csv).map_err(|e| Failure::validation(format!("{}: {e}", out.display())))?;
    }
    println!("episodes: {}", args.episodes);
    println!("empirical mean cost: {}", sig12(costs.iter().sum::<f64>() / n));
    println!("empirical CVaR: {}", sig12(empirical));
    println!("standard error: {}", sig12(sd / n.sqrt()));
    if let Some(v) = exact {
        println!("exact CVaR: {}", sig12(v));
    }
    Ok(())
}

/// Upper `α`-quantile of the sample (the VaR threshold of the tail average).
fn empirical_var(costs: &[f64], alpha: f64) -> f64 {
    let mut sorted = costs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((alpha * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

fn cmd_export(args: &ExportArgs) -> Outcome<()> {
    let tables = load_tables(&TablesInput { tables: args.tables.clone(), mdp: None })?;
    let spec = tables.source();
    let x = resolve_state(spec, &args.state)?;
    let stage = args.stage.unwrap_or(tables.top_stage());
    if let TableHorizon::Finite(n) = tables.horizon() {
        if stage > *n {
            return Err(Failure::validation(format!("--stage {stage} out of range 0..={n}")));
        }
    }
    let f = match &args.action {
        None => tables.v(stage, x),
        Some(name) => {
            if stage == 0 && tables.finite_horizon().is_some() {
                return Err(Failure::validation("--action: stage 0 has no action values"));
            }
            let a = spec
                .action_index(x, name)
                .ok_or_else(|| Failure::validation(format!("--action: unknown action `{name}` at `{}`", spec.state_name(x))))?;
            tables.q(stage, x, a)
        }
    }
    .map_err(|e| Failure::validation(format!("export: {e}")))?;
    write_or_print(args.out.as_deref(), &f.to_csv(sig12))
}

fn cmd_verify(args: &VerifyArgs) -> Outcome<()> {
    for &a in &args.alphas {
        check_level(a, false)?;
    }
    let instances: Vec<(MdpSpec, usize)> = if let Some(path) = &args.mdp {
        let n = args.horizon.ok_or_else(|| Failure::validation("--horizon is required with --mdp"))?;
        vec![(load_spec(path)?, n)]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        (0..args.count)
            .map(|_| {
                let spec = random_spec(&mut rng, &RandomSpecConfig::default());
                let n = rng.gen_range(1..=3);
                (spec, args.horizon.unwrap_or(n))
            })
            .collect()
    };
    let reports: Vec<Vec<CheckOutcome>> =
        instances.par_iter().map(|(spec, n)| verify_spec(spec, *n, &args.alphas)).collect();
    let mut merged: Vec<CheckOutcome> = Vec::new();
    for (i, report) in reports.into_iter().enumerate() {
        for (k, mut outcome) in report.into_iter().enumerate() {
            if instances.len() > 1 {
                outcome.failures.iter_mut().for_each(|f| *f = format!("instance {i}: {f}"));
                if let Some(s) = outcome.skipped.take() {
                    outcome.skipped = Some(format!("instance {i}: {s}"));
                }
            }
            match merged.get_mut(k) {
                Some(m) => m.absorb(outcome),
                None => merged.push(outcome),
            }
        }
    }
    let mut failed = false;
    for m in &merged {
        println!("{m}");
        failed |= m.skipped.is_none() && !m.passed();
    }
    if failed {
        Err(Failure::new(EXIT_VERIFY, "verification failed"))
    } else {
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Value(a) => cmd_value(a),
        Command::Policy(a) => cmd_policy(a),
        Command::ExportPwl(a) => cmd_export(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
