//! Online execution of the optimal history-dependent policy.
//!
//! The runner carries a tail level `y` and a supergradient `u` of the current
//! action value at `y`. After each observed transition `u` is pushed through
//! the edge cost and discount, and the next level is recovered by inverting
//! the superdifferential of the successor's value function. When the inverse
//! is a whole linear piece, the runner no longer knows `y` exactly and
//! continues from the midpoint with the piece's slope as supergradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numfmt::sig12;
use crate::oracle::HistoryPolicy;
use crate::pwl::{PwlError, SuperdiffResult, SLOPE_TOLERANCE};
use crate::solver::{optimal_action_set, SolverError, ValueTables};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("alpha {0} must lie in (0, 1]")]
    Alpha(f64),
    #[error("state index {0} out of range")]
    State(usize),
    #[error("observed transition {from} --{action}--> {to} at step {t} has zero probability")]
    Infeasible { t: usize, from: String, action: String, to: String },
    #[error("the episode has already reached its horizon")]
    Finished,
    #[error("trajectory must start at the initial state")]
    WrongStart,
    #[error("trajectory has {got} states but the horizon allows at most {max}")]
    TooLong { got: usize, max: usize },
    #[error("supergradient became non-finite at step {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Pwl(#[from] PwlError),
}

/// Which one-sided derivative seeds the supergradient when `y` is known.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DerivativeSide {
    Left,
    #[default]
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RiskEstimate {
    Known(f64),
    /// Any level in `[lo, hi]` is consistent; `chosen` is the one acted upon.
    Interval { lo: f64, hi: f64, chosen: f64 },
}

impl RiskEstimate {
    pub fn level(&self) -> f64 {
        match *self {
            RiskEstimate::Known(y) => y,
            RiskEstimate::Interval { chosen, .. } => chosen,
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            RiskEstimate::Known(y) => (y, y),
            RiskEstimate::Interval { lo, hi, .. } => (lo, hi),
        }
    }

    /// Distance from `y` to the point or interval (zero when contained).
    pub fn distance(&self, y: f64) -> f64 {
        let (lo, hi) = self.bounds();
        (lo - y).max(y - hi).max(0.0)
    }

    pub fn is_known(&self) -> bool {
        matches!(self, RiskEstimate::Known(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunnerState {
    pub t: usize,
    pub state: usize,
    pub risk: RiskEstimate,
    /// Supergradient in the units of the solved (shifted) model.
    pub u: f64,
    /// Action to take now; `None` once the horizon is reached.
    pub action: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct Runner<'a> {
    tables: &'a ValueTables,
    side: DerivativeSide,
}

impl<'a> Runner<'a> {
    pub fn new(tables: &'a ValueTables, side: DerivativeSide) -> Self {
        Self { tables, side }
    }

    pub fn tables(&self) -> &'a ValueTables {
        self.tables
    }

    /// Stage index of the value functions that apply at time `t`.
    fn remaining(&self, t: usize) -> usize {
        match self.tables.finite_horizon() {
            Some(n) => n - t,
            None => self.tables.top_stage(),
        }
    }

    fn finished(&self, t: usize) -> bool {
        self.tables.finite_horizon().is_some_and(|n| t >= n)
    }

    fn seed(&self, stage: usize, x: usize, a: usize, y: f64) -> Result<f64, PolicyError> {
        let q = self.tables.q(stage, x, a)?;
        Ok(match self.side {
            DerivativeSide::Left => q.left_deriv(y)?,
            DerivativeSide::Right => q.right_deriv(y)?,
        })
    }

    /// First optimal action whose supergradient set at `y` contains the
    /// incoming `u`. Keeping `u` then keeps the threshold that the earlier
    /// choices committed to; reseeding from an arbitrary tied action can
    /// drop it (typically at `y = 0`, where every action ties at value 0).
    fn consistent_action(
        &self,
        stage: usize,
        x: usize,
        y: f64,
        u: f64,
        candidates: &[usize],
    ) -> Result<Option<usize>, PolicyError> {
        for &a in candidates {
            let q = self.tables.q(stage, x, a)?;
            let (lo, hi) = (q.right_deriv(y)?, q.left_deriv(y)?);
            let tol = SLOPE_TOLERANCE * u.abs().max(1.0);
            if lo - tol <= u && u <= hi + tol {
                return Ok(Some(a));
            }
        }
        Ok(None)
    }

    pub fn init(&self, x0: usize, alpha: f64) -> Result<RunnerState, PolicyError> {
        if !(alpha.is_finite() && alpha > 0.0 && alpha <= 1.0) {
            return Err(PolicyError::Alpha(alpha));
        }
        if x0 >= self.tables.model().num_states() {
            return Err(PolicyError::State(x0));
        }
        let n = self.remaining(0);
        let a = optimal_action_set(self.tables, n, x0, alpha)?[0];
        let u = self.seed(n, x0, a, alpha)?;
        Ok(RunnerState { t: 0, state: x0, risk: RiskEstimate::Known(alpha), u, action: Some(a) })
    }

    pub fn step(&self, current: &RunnerState, next: usize) -> Result<RunnerState, PolicyError> {
        let model = self.tables.model();
        let a = current.action.ok_or(PolicyError::Finished)?;
        let x = current.state;
        if next >= model.num_states() {
            return Err(PolicyError::State(next));
        }
        let edge = model.edge(x, a, next).ok_or_else(|| PolicyError::Infeasible {
            t: current.t,
            from: model.state_name(x).to_string(),
            action: model.actions(x)[a].clone(),
            to: model.state_name(next).to_string(),
        })?;
        let n = self.remaining(current.t);
        // A successor that receives the whole tail (level 1) sits at the
        // right end of its domain where the supergradient set reaches down
        // to 0, so the pushed value may dip below zero; it then means level 1.
        let pushed = (current.u - edge.cvar_cost) / model.discount();
        if pushed.is_nan() {
            return Err(PolicyError::NonFinite(current.t));
        }
        let u = pushed.max(0.0);
        let successor = self.tables.v(n - 1, next)?;
        let (risk, mut u) = match successor.invert_superdifferential(u) {
            SuperdiffResult::UniquePoint(y) => (RiskEstimate::Known(y), u),
            SuperdiffResult::LinearInterval { lo, hi, slope } => {
                (RiskEstimate::Interval { lo, hi, chosen: 0.5 * (lo + hi) }, slope)
            }
        };
        let t = current.t + 1;
        let action = if self.finished(t) {
            None
        } else {
            let stage = self.remaining(t);
            let y = risk.level();
            let candidates = optimal_action_set(self.tables, stage, next, y)?;
            match self.consistent_action(stage, next, y, u, &candidates)? {
                Some(a) => Some(a),
                None => {
                    let a = candidates[0];
                    if risk.is_known() {
                        u = self.seed(stage, next, a, y)?;
                    }
                    Some(a)
                }
            }
        };
        Ok(RunnerState { t, state: next, risk, u, action })
    }
}

/// Where the observed transitions come from.
#[derive(Debug, Clone, PartialEq)]
pub enum TransitionSource {
    /// Observed states `x₀, x₁, …`; the first must be the initial state.
    Fixed(Vec<usize>),
    /// Sampled from the model with a seeded generator. `steps` defaults to
    /// the horizon, or for infinite-horizon tables to the first step at which
    /// the discounted tail bound drops below `1e-6`.
    Sampled { seed: u64, steps: Option<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub state: usize,
    pub action: Option<usize>,
    pub risk: RiskEstimate,
    pub u: f64,
    /// Risk-channel cost of the transition leaving this state (terminal cost
    /// on the final row of a finite episode), in original units.
    pub step_cost: f64,
    /// Discounted risk-channel cost accumulated up to and including this row.
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    /// Total discounted risk-channel cost of the episode.
    pub total_cost: f64,
    /// Total discounted mean-channel cost of the episode.
    pub total_mean_cost: f64,
}

impl Trace {
    pub fn to_csv(&self, tables: &ValueTables) -> String {
        let spec = tables.source();
        let mut out = String::from("t,state,action,y_lo,y_hi,y_chosen,u,step_cost,cumulative_discounted_cost\n");
        for r in &self.rows {
            let (lo, hi) = r.risk.bounds();
            let action = r.action.map(|a| spec.actions(r.state)[a].clone()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.t,
                spec.state_name(r.state),
                action,
                sig12(lo),
                sig12(hi),
                sig12(r.risk.level()),
                sig12(r.u),
                sig12(r.step_cost),
                sig12(r.cumulative)
            ));
        }
        out
    }
}

/// Number of steps after which the discounted remainder `βᵗ·C/(1−β)` of an
/// infinite-horizon episode falls below `cutoff`.
pub fn truncation_steps(tables: &ValueTables, cutoff: f64) -> usize {
    let spec = tables.source();
    let beta = spec.discount();
    let c = spec.max_abs_cost().max(f64::MIN_POSITIVE);
    if beta >= 1.0 {
        return 0;
    }
    let mut t = 0;
    let mut tail = c / (1.0 - beta);
    while tail >= cutoff && t < 100_000 {
        tail *= beta;
        t += 1;
    }
    t
}

/// Runs one episode from `x0` at level `alpha`.
pub fn run_trajectory(
    tables: &ValueTables,
    x0: usize,
    alpha: f64,
    side: DerivativeSide,
    source: &TransitionSource,
) -> Result<Trace, PolicyError> {
    let runner = Runner::new(tables, side);
    let spec = tables.source();
    let beta = spec.discount();
    let horizon = tables.finite_horizon();
    let (observed, steps, mut rng) = match source {
        TransitionSource::Fixed(seq) => {
            if seq.first() != Some(&x0) {
                return Err(PolicyError::WrongStart);
            }
            if let Some(n) = horizon {
                if seq.len() > n + 1 {
                    return Err(PolicyError::TooLong { got: seq.len(), max: n + 1 });
                }
            }
            (Some(seq.as_slice()), seq.len() - 1, None)
        }
        TransitionSource::Sampled { seed, steps } => {
            let steps = steps.unwrap_or_else(|| horizon.unwrap_or_else(|| truncation_steps(tables, 1e-6)));
            let steps = horizon.map_or(steps, |n| steps.min(n));
            (None, steps, Some(ChaCha8Rng::seed_from_u64(*seed)))
        }
    };

    let mut state = runner.init(x0, alpha)?;
    let mut rows = Vec::with_capacity(steps + 1);
    let mut cumulative = 0.0;
    let mut mean_total = 0.0;
    let mut disc = 1.0;
    for t in 0..steps {
        let a = state.action.ok_or(PolicyError::Finished)?;
        let x = state.state;
        let next = match (&observed, &mut rng) {
            (Some(seq), _) => seq[t + 1],
            (None, Some(rng)) => sample(spec.transitions(x, a).iter().map(|e| (e.to, e.prob)), rng.gen::<f64>()),
            (None, None) => unreachable!(),
        };
        let next_state = runner.step(&state, next)?;
        let edge = spec.edge(x, a, next).expect("feasibility checked by the runner");
        cumulative += disc * edge.cvar_cost;
        mean_total += disc * edge.mean_cost;
        rows.push(TraceRow {
            t,
            state: x,
            action: Some(a),
            risk: state.risk,
            u: state.u,
            step_cost: edge.cvar_cost,
            cumulative,
        });
        disc *= beta;
        state = next_state;
    }
    let at_horizon = horizon == Some(state.t);
    let step_cost = if at_horizon { spec.terminal_cvar(state.state) } else { 0.0 };
    if at_horizon {
        cumulative += disc * step_cost;
        mean_total += disc * spec.terminal_mean(state.state);
    }
    rows.push(TraceRow {
        t: state.t,
        state: state.state,
        action: state.action,
        risk: state.risk,
        u: state.u,
        step_cost,
        cumulative,
    });
    Ok(Trace { rows, total_cost: cumulative, total_mean_cost: mean_total })
}

fn sample(choices: impl Iterator<Item = (usize, f64)>, r: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (to, p) in choices {
        acc += p;
        last = to;
        if r < acc {
            return to;
        }
    }
    last
}

/// The history-dependent policy the runner executes from `(x0, alpha)`,
/// tabulated over every reachable history of a finite horizon.
pub fn induced_policy(
    tables: &ValueTables,
    x0: usize,
    alpha: f64,
    side: DerivativeSide,
) -> Result<HistoryPolicy, PolicyError> {
    fn walk(
        runner: &Runner,
        state: &RunnerState,
        history: &mut Vec<usize>,
        out: &mut HistoryPolicy,
    ) -> Result<(), PolicyError> {
        let Some(a) = state.action else { return Ok(()) };
        out.insert(history.clone(), a);
        let model = runner.tables.model();
        for e in model.transitions(state.state, a) {
            let next = runner.step(state, e.to)?;
            history.push(a);
            history.push(e.to);
            walk(runner, &next, history, out)?;
            history.truncate(history.len() - 2);
        }
        Ok(())
    }
    let runner = Runner::new(tables, side);
    let root = runner.init(x0, alpha)?;
    let mut policy = HistoryPolicy::new();
    walk(&runner, &root, &mut vec![x0], &mut policy)?;
    Ok(policy)
}
