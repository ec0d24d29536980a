//! Property checks shared by the test suites and the `verify` command.
//!
//! Each check returns a [`CheckOutcome`] with the worst error seen, so that
//! callers can print one line per property.

use std::fmt;

use rand::Rng;

use crate::model::MdpSpec;
use crate::nature::TransferInstance;
use crate::oracle::{
    cvar_of_distribution, enumerate_distribution, exhaustive_policy_search, objective_of_distribution, OracleError,
};
use crate::policy::{induced_policy, DerivativeSide, Runner, RunnerState};
use crate::pwl::{PwlConcave, KNOT_TOLERANCE};
use crate::solver::{
    cvar_value, optimal_action_set, risk_neutral_value, solve_finite, transfer_instance, worst_path_value,
    ObjectiveMode, SolverOptions, ValueTables,
};

pub const DEFAULT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub checks: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// Descriptions of the first few failing comparisons.
    pub failures: Vec<String>,
    /// Set when a resource guard prevented the check from running.
    pub skipped: Option<String>,
}

const KEEP_FAILURES: usize = 5;

impl CheckOutcome {
    pub fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self { name: name.into(), checks: 0, max_error: 0.0, tolerance, failures: Vec::new(), skipped: None }
    }

    pub fn passed(&self) -> bool {
        self.skipped.is_none() && self.failures.is_empty()
    }

    /// Records one comparison whose error is measured against the tolerance.
    pub fn record(&mut self, error: f64, context: impl FnOnce() -> String) {
        self.checks += 1;
        let error = if error.is_nan() { f64::INFINITY } else { error };
        self.max_error = self.max_error.max(error);
        if error > self.tolerance {
            if self.failures.len() < KEEP_FAILURES {
                self.failures.push(format!("{} (error {error:.3e})", context()));
            } else if self.failures.len() == KEEP_FAILURES {
                self.failures.push("…".into());
            }
        }
    }

    /// Records a failure that has no numeric error.
    pub fn fail(&mut self, context: impl Into<String>) {
        self.checks += 1;
        self.max_error = f64::INFINITY;
        if self.failures.len() < KEEP_FAILURES {
            self.failures.push(context.into());
        }
    }

    pub fn skip(&mut self, reason: impl Into<String>) {
        self.skipped.get_or_insert_with(|| reason.into());
    }

    pub fn absorb(&mut self, other: CheckOutcome) {
        self.checks += other.checks;
        self.max_error = self.max_error.max(other.max_error);
        for f in other.failures {
            if self.failures.len() <= KEEP_FAILURES {
                self.failures.push(f);
            }
        }
        if self.skipped.is_none() {
            self.skipped = other.skipped;
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.skipped.is_some() {
            "SKIP"
        } else if self.passed() {
            "PASS"
        } else {
            "FAIL"
        };
        write!(
            f,
            "{status} {} ({} checks, max error {:.3e}, tolerance {:.0e})",
            self.name, self.checks, self.max_error, self.tolerance
        )?;
        if let Some(reason) = &self.skipped {
            write!(f, " skipped: {reason}")?;
        }
        for fail in &self.failures {
            write!(f, "\n    {fail}")?;
        }
        Ok(())
    }
}

/// Error between two values, relative to `max(1, |expected|)`. Equal
/// infinities count as agreement.
pub fn rel_error(got: f64, expected: f64) -> f64 {
    if got == expected {
        return 0.0;
    }
    (got - expected).abs() / expected.abs().max(1.0)
}

/// Solver value against exhaustive policy search from every initial state.
pub fn check_against_exhaustive(
    spec: &MdpSpec,
    horizon: usize,
    alphas: &[f64],
    mode: ObjectiveMode,
    out: &mut CheckOutcome,
) {
    let mut tables_by_weight: Vec<(f64, ValueTables)> = Vec::new();
    for &alpha in alphas {
        let w = mode.mean_weight(alpha);
        if !tables_by_weight.iter().any(|(tw, _)| *tw == w) {
            match solve_finite(spec, horizon, &SolverOptions::with_mean_weight(w)) {
                Ok(t) => tables_by_weight.push((w, t)),
                Err(e) => return out.fail(format!("solver failed: {e}")),
            }
        }
        let tables = &tables_by_weight.iter().find(|(tw, _)| *tw == w).unwrap().1;
        for x0 in 0..spec.num_states() {
            let solved = match cvar_value(tables, x0, alpha, mode) {
                Ok(v) => v,
                Err(e) => return out.fail(format!("value query failed: {e}")),
            };
            match exhaustive_policy_search(spec, x0, alpha, horizon, mode) {
                Ok((_, brute)) => out.record(rel_error(solved, brute), || {
                    format!("x0 = {}, alpha = {alpha}: solver {solved}, exhaustive {brute}", spec.state_name(x0))
                }),
                Err(OracleError::TooManyPolicies { count, .. }) => {
                    return out.skip(format!("{count} policies exceed the enumeration guard"))
                }
                Err(e) => return out.fail(format!("exhaustive search failed: {e}")),
            }
        }
    }
}

/// Exact objective of the runner's policy against the solver value.
pub fn check_runner_optimality(
    tables: &ValueTables,
    x0: usize,
    alpha: f64,
    mode: ObjectiveMode,
    side: DerivativeSide,
    out: &mut CheckOutcome,
) {
    let Some(horizon) = tables.finite_horizon() else {
        return out.skip("runner optimality is checked on finite horizons only");
    };
    let spec = tables.source();
    let target = match cvar_value(tables, x0, alpha, mode) {
        Ok(v) => v,
        Err(e) => return out.fail(format!("value query failed: {e}")),
    };
    let policy = match induced_policy(tables, x0, alpha, side) {
        Ok(p) => p,
        Err(e) => return out.fail(format!("runner failed from {}: {e}", spec.state_name(x0))),
    };
    match enumerate_distribution(spec, &policy, x0, horizon).and_then(|d| objective_of_distribution(&d, alpha, mode)) {
        Ok(v) => out.record(rel_error(v, target), || {
            format!("x0 = {}, alpha = {alpha}, {side:?}: runner {v}, optimum {target}", spec.state_name(x0))
        }),
        Err(OracleError::TooManyTrajectories { limit }) => out.skip(format!("more than {limit} trajectories")),
        Err(e) => out.fail(format!("policy evaluation failed: {e}")),
    }
}

/// Along every reachable history, the level an optimal nature allocation
/// assigns to the observed successor lies in the runner's point or interval.
pub fn check_nature_consistency(
    tables: &ValueTables,
    x0: usize,
    alpha: f64,
    side: DerivativeSide,
    out: &mut CheckOutcome,
) {
    let Some(horizon) = tables.finite_horizon() else {
        return out.skip("nature consistency is checked on finite horizons only");
    };
    let runner = Runner::new(tables, side);
    let root = match runner.init(x0, alpha) {
        Ok(s) => s,
        Err(e) => return out.fail(format!("runner init failed: {e}")),
    };
    let mut stack: Vec<RunnerState> = vec![root];
    while let Some(state) = stack.pop() {
        let Some(a) = state.action else { continue };
        let stage = horizon - state.t;
        let prev = match tables.stage(stage - 1) {
            Ok(s) => &s.v,
            Err(e) => return out.fail(e.to_string()),
        };
        let inst = match transfer_instance(tables.model(), prev, state.state, a) {
            Ok(i) => i,
            Err(e) => return out.fail(e.to_string()),
        };
        let alloc = match inst.optimal_allocation(state.risk.level()) {
            Ok(al) => al,
            Err(e) => return out.fail(e.to_string()),
        };
        for (i, s) in inst.successors().iter().enumerate() {
            let truth = alloc.level(i, s.prob);
            match runner.step(&state, s.state) {
                Ok(next) => {
                    out.record(next.risk.distance(truth), || {
                        format!(
                            "t = {}, {} -> {}: allocation level {truth}, runner {:?}",
                            state.t,
                            tables.source().state_name(state.state),
                            tables.source().state_name(s.state),
                            next.risk
                        )
                    });
                    stack.push(next);
                }
                Err(e) => return out.fail(format!("runner step failed: {e}")),
            }
        }
    }
}

/// One-sided derivatives of the best response against those of the
/// successors at an optimal allocation, for each `y` in `ys`.
pub fn check_transfer_identities(inst: &TransferInstance, ys: &[f64], out: &mut CheckOutcome) {
    let f = inst.build_f();
    let scaled: Vec<PwlConcave> =
        inst.successors().iter().map(|s| s.value.scale_argument(s.prob).expect("positive probability")).collect();
    for &y in ys {
        let alloc = match inst.optimal_allocation(y) {
            Ok(a) => a,
            Err(e) => return out.fail(e.to_string()),
        };
        let mut max_right = f64::NEG_INFINITY;
        let mut min_left = f64::INFINITY;
        for (g, &z) in scaled.iter().zip(&alloc.z) {
            max_right = max_right.max(g.right_deriv(z.min(g.domain())).unwrap_or(f64::NAN));
            min_left = min_left.min(g.left_deriv(z.min(g.domain())).unwrap_or(f64::NAN));
        }
        let fr = f.right_deriv(y).unwrap_or(f64::NAN);
        let fl = f.left_deriv(y).unwrap_or(f64::NAN);
        out.record(rel_error(fr, max_right), || format!("y = {y}: right derivative {fr} vs {max_right}"));
        out.record(rel_error(fl, min_left), || format!("y = {y}: left derivative {fl} vs {min_left}"));
        let gap = if max_right <= min_left { 0.0 } else { rel_error(max_right, min_left) };
        out.record(gap, || format!("y = {y}: max right derivative {max_right} above min left {min_left}"));
        out.record(rel_error(alloc.value, f.value(y)), || format!("y = {y}: allocation value {} vs F {}", alloc.value, f.value(y)));
    }
}

/// Knots of every `V` and `Q` at a stage plus `extra` points. Points lying
/// within the knot-snap tolerance of a different knot are left out: below
/// that resolution the representation merges knots, so one-sided slopes
/// there are not defined by the stored data.
fn probe_points(tables: &ValueTables, stage: usize, x: usize, extra: &[f64]) -> Vec<f64> {
    let st = tables.stage(stage).expect("stage exists");
    let mut knots: Vec<f64> = st.v[x].knots();
    for q in &st.q[x] {
        knots.extend(q.knots());
    }
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    let tol = 2.0 * KNOT_TOLERANCE;
    let crowded = |y: f64| {
        let i = knots.partition_point(|&k| k < y);
        let near = |j: usize| knots.get(j).is_some_and(|&k| k != y && (k - y).abs() <= tol);
        near(i) || near(i + 1) || (i > 0 && near(i - 1))
    };
    let mut ys: Vec<f64> = knots.iter().copied().chain(extra.iter().copied()).filter(|&y| !crowded(y)).collect();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    ys
}

/// `d⁺V = min over optimal actions of d⁺Q` and `d⁻V = max of d⁻Q`, and
/// `V = min Q`, at all knots and at `extra` points.
pub fn check_derivative_identities(tables: &ValueTables, extra: &[f64], out: &mut CheckOutcome) {
    let stages: Vec<usize> = match tables.finite_horizon() {
        Some(n) => (1..=n).collect(),
        None => vec![tables.top_stage()],
    };
    for n in stages {
        let st = tables.stage(n).expect("stage exists");
        for x in 0..st.v.len() {
            let v = &st.v[x];
            for y in probe_points(tables, n, x, extra) {
                let set = match optimal_action_set(tables, n, x, y) {
                    Ok(s) => s,
                    Err(e) => return out.fail(e.to_string()),
                };
                let qs: Vec<&PwlConcave> = set.iter().map(|&a| &st.q[x][a]).collect();
                let right = qs.iter().map(|q| q.right_deriv(y).unwrap()).fold(f64::INFINITY, f64::min);
                let left = qs.iter().map(|q| q.left_deriv(y).unwrap()).fold(f64::NEG_INFINITY, f64::max);
                let vr = v.right_deriv(y).unwrap();
                let vl = v.left_deriv(y).unwrap();
                let qmin = st.q[x].iter().map(|q| q.value(y)).fold(f64::INFINITY, f64::min);
                let ctx = |what: &str, a: f64, b: f64| format!("stage {n}, state {x}, y = {y}: {what} {a} vs {b}");
                out.record(rel_error(vr, right), || ctx("right derivative", vr, right));
                out.record(rel_error(vl, left), || ctx("left derivative", vl, left));
                out.record(rel_error(v.value(y), qmin), || ctx("value", v.value(y), qmin));
            }
        }
    }
}

/// Structural invariants of every stored function.
pub fn check_shapes(tables: &ValueTables, out: &mut CheckOutcome) {
    for (n, st) in tables.stages().iter().enumerate() {
        for (x, f) in st.v.iter().enumerate() {
            shape_of(f, &format!("V stage {n} state {x}"), out);
        }
        for (x, qs) in st.q.iter().enumerate() {
            for (a, f) in qs.iter().enumerate() {
                shape_of(f, &format!("Q stage {n} state {x} action {a}"), out);
            }
        }
    }
}

fn shape_of(f: &PwlConcave, label: &str, out: &mut CheckOutcome) {
    if let Err(e) = f.check_invariants() {
        return out.fail(format!("{label}: {e}"));
    }
    if (f.domain() - 1.0).abs() > 1e-12 {
        return out.fail(format!("{label}: domain {}", f.domain()));
    }
    out.record(0.0, String::new);
}

/// `α = 1` against the risk-neutral program and the slope at `0` against the
/// worst-path program, for pure-CVaR tables on a finite horizon.
pub fn check_boundaries(tables: &ValueTables, out: &mut CheckOutcome) {
    let spec = tables.source();
    let horizon = tables.horizon_kind();
    let pure = spec.without_mean();
    let neutral = risk_neutral_value(&pure, horizon, 0.0);
    let worst = worst_path_value(&pure, horizon);
    let (Ok(neutral), Ok(worst)) = (neutral, worst) else {
        return out.fail("reference program failed");
    };
    let offset = tables.shift().cvar_offset();
    for x in 0..spec.num_states() {
        match cvar_value(tables, x, 1.0, ObjectiveMode::PureCvar) {
            Ok(v) => out.record(rel_error(v, neutral[x]), || {
                format!("alpha = 1 at {}: {v} vs risk-neutral {}", spec.state_name(x), neutral[x])
            }),
            Err(e) => return out.fail(e.to_string()),
        }
        let top = tables.v(tables.top_stage(), x).expect("top stage");
        let slope = top.right_deriv(0.0).unwrap() - offset;
        out.record(rel_error(slope, worst[x]), || {
            format!("slope at 0 at {}: {slope} vs worst path {}", spec.state_name(x), worst[x])
        });
    }
}

/// Runs the per-spec properties at the given levels and returns one outcome
/// per property.
pub fn verify_spec(spec: &MdpSpec, horizon: usize, alphas: &[f64]) -> Vec<CheckOutcome> {
    let tol = DEFAULT_TOLERANCE;
    let mut exhaustive = CheckOutcome::new("solver matches exhaustive policy search", tol);
    let mut runner_right = CheckOutcome::new("runner policy attains the optimum (right derivative)", tol);
    let mut runner_left = CheckOutcome::new("runner policy attains the optimum (left derivative)", tol);
    let mut nature = CheckOutcome::new("runner levels match nature's allocation", tol);
    let mut derivs = CheckOutcome::new("value/action derivative identities", tol);
    let mut shapes = CheckOutcome::new("value functions concave and well formed", 0.0);
    let mut bounds = CheckOutcome::new("alpha = 1 and alpha -> 0 boundary values", tol);

    check_against_exhaustive(spec, horizon, alphas, ObjectiveMode::PureCvar, &mut exhaustive);
    match solve_finite(spec, horizon, &SolverOptions::with_mean_weight(0.0)) {
        Ok(tables) => {
            for &alpha in alphas.iter().filter(|&&a| a > 0.0) {
                for x0 in 0..spec.num_states() {
                    check_runner_optimality(&tables, x0, alpha, ObjectiveMode::PureCvar, DerivativeSide::Right, &mut runner_right);
                    check_runner_optimality(&tables, x0, alpha, ObjectiveMode::PureCvar, DerivativeSide::Left, &mut runner_left);
                    check_nature_consistency(&tables, x0, alpha, DerivativeSide::Right, &mut nature);
                    check_nature_consistency(&tables, x0, alpha, DerivativeSide::Left, &mut nature);
                }
            }
            check_derivative_identities(&tables, alphas, &mut derivs);
            check_shapes(&tables, &mut shapes);
            check_boundaries(&tables, &mut bounds);
        }
        Err(e) => {
            for c in [&mut runner_right, &mut runner_left, &mut nature, &mut derivs, &mut shapes, &mut bounds] {
                c.fail(format!("solver failed: {e}"));
            }
        }
    }
    vec![exhaustive, runner_right, runner_left, nature, derivs, shapes, bounds]
}

/// `n` uniform draws in `(0, 1)` plus the endpoints.
pub fn random_levels<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut ys: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    ys.push(0.0);
    ys.push(1.0);
    ys
}

/// Exact `CVaR_α` of the risk channel under a policy, convenience for tests.
pub fn policy_cvar(
    spec: &MdpSpec,
    policy: &crate::oracle::HistoryPolicy,
    x0: usize,
    horizon: usize,
    alpha: f64,
) -> Result<f64, OracleError> {
    cvar_of_distribution(&enumerate_distribution(spec, policy, x0, horizon)?, alpha)
}
