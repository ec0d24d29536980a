//! Backward induction over value functions `V_n(x, ·)` that are concave and
//! piecewise linear in the tail level `y ∈ [0, 1]`.
//!
//! `V_n(x, y)` is the optimal value of `mean-channel cost + y·CVaR_y(risk
//! channel)` over `n` remaining steps. One backup builds, for every state and
//! action, nature's best response over successors and then takes the lower
//! envelope over actions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{shift_costs, CostShift, Horizon, MdpSpec};
use crate::nature::{NatureError, Successor, TransferInstance};
use crate::pwl::{PwlConcave, PwlError};

/// Relative tolerance for membership in the optimal action set.
pub const ACTION_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_SEGMENT_CAP: usize = 1_000_000;
pub const DEFAULT_MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("stage {stage}: {segments} segments exceed the cap of {cap}")]
    SegmentCap { stage: usize, segments: usize, cap: usize },
    #[error("no convergence after {iterations} iterations (last difference {residual})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("infinite horizon requires a discount factor below 1, got {0}")]
    UndiscountedInfinite(f64),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("tolerance {0} must be finite and positive")]
    Tolerance(f64),
    #[error("alpha {0} outside [0, 1]")]
    Alpha(f64),
    #[error("alpha = 0 has no tail-average form; use the worst-path value")]
    AlphaZero,
    #[error("state index {0} out of range")]
    State(usize),
    #[error("stage {stage} not available (tables hold stages 0..={max})")]
    Stage { stage: usize, max: usize },
    #[error("tables were solved with mean weight {found}, the objective needs {required}")]
    ModeMismatch { required: f64, found: f64 },
    #[error("non-finite value encountered at stage {stage}, state {state}")]
    NonFinite { stage: usize, state: usize },
    #[error(transparent)]
    Pwl(#[from] PwlError),
    #[error(transparent)]
    Nature(#[from] NatureError),
}

/// How the mean channel `c₁` and the risk channel `c` enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveMode {
    /// `CVaR_α` of the risk channel alone (mean channel must be empty or ignored).
    PureCvar,
    /// `E[mean channel] + α·CVaR_α`.
    MeanPlusAlphaCvar,
    /// `E[mean channel] + CVaR_α`.
    MeanPlusCvar,
}

impl ObjectiveMode {
    /// Weight applied to the mean channel inside the value tables.
    pub fn mean_weight(self, alpha: f64) -> f64 {
        match self {
            ObjectiveMode::PureCvar => 0.0,
            ObjectiveMode::MeanPlusAlphaCvar => 1.0,
            ObjectiveMode::MeanPlusCvar => alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Multiplier of the mean channel in the solved model.
    pub mean_weight: f64,
    /// Error raised when any single function exceeds this many segments.
    pub segment_cap: usize,
    /// Optional slope tolerance for merging nearly collinear segments after
    /// each backup. Off by default; results are then no longer exact.
    pub simplify: Option<f64>,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { mean_weight: 1.0, segment_cap: DEFAULT_SEGMENT_CAP, simplify: None, max_iterations: DEFAULT_MAX_ITERATIONS }
    }
}

impl SolverOptions {
    pub fn with_mean_weight(mean_weight: f64) -> Self {
        Self { mean_weight, ..Self::default() }
    }
}

/// Value functions of one stage; `q` is empty at stage 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub v: Vec<PwlConcave>,
    pub q: Vec<Vec<PwlConcave>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfiniteInfo {
    pub epsilon: f64,
    pub iterations: usize,
    /// Sup-norm distance between the last two iterates.
    pub last_difference: f64,
    /// Guaranteed distance `last_difference·β/(1−β)` to the fixed point.
    pub error_bound: f64,
    /// A-priori bound `C·βⁿ/(1−β)` on the distance of iterate `n` to the
    /// fixed point, `C` the largest one-step cost.
    pub geometric_bound: f64,
    /// Sup-norm differences `‖V_n − V_{n−1}‖` for `n = 1, 2, …`.
    pub differences: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TableHorizon {
    Finite(usize),
    Infinite(InfiniteInfo),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueTables {
    pub(crate) source: MdpSpec,
    pub(crate) model: MdpSpec,
    pub(crate) shift: CostShift,
    pub(crate) mean_weight: f64,
    pub(crate) horizon: TableHorizon,
    /// Finite horizon: stages `0..=N`. Infinite horizon: the converged stage only.
    pub(crate) stages: Vec<Stage>,
}

impl ValueTables {
    /// The spec as supplied by the caller.
    pub fn source(&self) -> &MdpSpec {
        &self.source
    }

    /// The spec whose costs the tables actually encode (shifted, mean-weighted).
    pub fn model(&self) -> &MdpSpec {
        &self.model
    }

    pub fn shift(&self) -> &CostShift {
        &self.shift
    }

    pub fn mean_weight(&self) -> f64 {
        self.mean_weight
    }

    pub fn horizon(&self) -> &TableHorizon {
        &self.horizon
    }

    /// `Some(N)` for finite-horizon tables.
    pub fn finite_horizon(&self) -> Option<usize> {
        match self.horizon {
            TableHorizon::Finite(n) => Some(n),
            TableHorizon::Infinite(_) => None,
        }
    }

    pub fn horizon_kind(&self) -> Horizon {
        match self.horizon {
            TableHorizon::Finite(n) => Horizon::Finite(n),
            TableHorizon::Infinite(_) => Horizon::Infinite,
        }
    }

    /// Top stage index: `N`, or `1` for infinite-horizon tables.
    pub fn top_stage(&self) -> usize {
        self.finite_horizon().unwrap_or(1)
    }

    /// Stage `n`. Infinite-horizon tables return the converged stage for any `n`.
    pub fn stage(&self, n: usize) -> Result<&Stage, SolverError> {
        match self.horizon {
            TableHorizon::Finite(max) => self.stages.get(n).ok_or(SolverError::Stage { stage: n, max }),
            TableHorizon::Infinite(_) => Ok(&self.stages[0]),
        }
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn v(&self, n: usize, x: usize) -> Result<&PwlConcave, SolverError> {
        self.stage(n)?.v.get(x).ok_or(SolverError::State(x))
    }

    pub fn q(&self, n: usize, x: usize, a: usize) -> Result<&PwlConcave, SolverError> {
        let stage = self.stage(n)?;
        if n == 0 && self.finite_horizon().is_some() {
            return Err(SolverError::Stage { stage: 0, max: self.top_stage() });
        }
        stage.q.get(x).and_then(|qs| qs.get(a)).ok_or(SolverError::State(x))
    }

    pub fn spec_hash(&self) -> String {
        self.source.spec_hash()
    }

    /// Whether these tables answer queries for `mode` at `alpha`.
    pub fn supports(&self, mode: ObjectiveMode, alpha: f64) -> Result<(), SolverError> {
        let required = mode.mean_weight(alpha);
        if (required - self.mean_weight).abs() <= 1e-12 || self.source.has_zero_mean_channel() {
            Ok(())
        } else {
            Err(SolverError::ModeMismatch { required, found: self.mean_weight })
        }
    }

    pub fn total_segments(&self) -> usize {
        self.stages
            .iter()
            .map(|s| {
                s.v.iter().map(PwlConcave::num_segments).sum::<usize>()
                    + s.q.iter().flatten().map(PwlConcave::num_segments).sum::<usize>()
            })
            .sum()
    }
}

fn check_cap(f: &PwlConcave, stage: usize, cap: usize) -> Result<(), SolverError> {
    if f.num_segments() > cap {
        Err(SolverError::SegmentCap { stage, segments: f.num_segments(), cap })
    } else {
        Ok(())
    }
}

/// Nature's problem at `(x, a)` given successor values `prev`.
pub fn transfer_instance(
    model: &MdpSpec,
    prev: &[PwlConcave],
    x: usize,
    a: usize,
) -> Result<TransferInstance, SolverError> {
    let beta = model.discount();
    let successors = model
        .transitions(x, a)
        .iter()
        .map(|e| {
            Ok(Successor {
                state: e.to,
                prob: e.prob,
                value: prev[e.to].transform_successor(e.mean_cost, e.cvar_cost, beta)?,
            })
        })
        .collect::<Result<Vec<_>, PwlError>>()?;
    Ok(TransferInstance::new(successors)?)
}

/// One Bellman backup producing stage `stage` from `prev = V_{stage−1}`.
pub fn backup(model: &MdpSpec, prev: &[PwlConcave], stage: usize, options: &SolverOptions) -> Result<Stage, SolverError> {
    let rows: Vec<(PwlConcave, Vec<PwlConcave>)> = (0..model.num_states())
        .into_par_iter()
        .map(|x| {
            let qs = (0..model.actions(x).len())
                .map(|a| {
                    let mut q = transfer_instance(model, prev, x, a)?.build_f();
                    if let Some(eps) = options.simplify {
                        q = q.simplify(eps);
                    }
                    check_cap(&q, stage, options.segment_cap)?;
                    Ok(q)
                })
                .collect::<Result<Vec<_>, SolverError>>()?;
            let mut v = PwlConcave::min_envelope(&qs)?;
            if let Some(eps) = options.simplify {
                v = v.simplify(eps);
            }
            check_cap(&v, stage, options.segment_cap)?;
            if !v.value_at_zero().is_finite() {
                return Err(SolverError::NonFinite { stage, state: x });
            }
            Ok((v, qs))
        })
        .collect::<Result<_, SolverError>>()?;
    let (v, q) = rows.into_iter().unzip();
    Ok(Stage { v, q })
}

/// `V_0(x, y) = v₀¹(x) + y·v₀(x)`.
pub fn terminal_stage(model: &MdpSpec) -> Result<Stage, SolverError> {
    let v = (0..model.num_states())
        .map(|x| PwlConcave::linear(model.terminal_mean(x), model.terminal_cvar(x), 1.0))
        .collect::<Result<_, _>>()?;
    Ok(Stage { v, q: Vec::new() })
}

/// Exact tables `V_0 … V_N` and `Q_1 … Q_N`.
pub fn solve_finite(spec: &MdpSpec, horizon: usize, options: &SolverOptions) -> Result<ValueTables, SolverError> {
    if horizon == 0 {
        return Err(SolverError::ZeroHorizon);
    }
    let (shifted, shift) = shift_costs(spec, Horizon::Finite(horizon));
    let model = shifted.with_mean_weight(options.mean_weight);
    let mut stages = vec![terminal_stage(&model)?];
    for n in 1..=horizon {
        let next = backup(&model, &stages[n - 1].v, n, options)?;
        stages.push(next);
    }
    Ok(ValueTables {
        source: spec.clone(),
        model,
        shift,
        mean_weight: options.mean_weight,
        horizon: TableHorizon::Finite(horizon),
        stages,
    })
}

fn sup_distance(a: &[PwlConcave], b: &[PwlConcave]) -> Result<f64, SolverError> {
    let mut d: f64 = 0.0;
    for (f, g) in a.iter().zip(b) {
        d = d.max(f.sup_distance(g)?);
    }
    Ok(d)
}

/// Value iteration from `V_0 = 0` (terminal costs are ignored) until
/// successive iterates are within `epsilon·(1−β)/β`, which places the last
/// iterate within `epsilon` of the fixed point.
pub fn solve_infinite(spec: &MdpSpec, epsilon: f64, options: &SolverOptions) -> Result<ValueTables, SolverError> {
    let beta = spec.discount();
    if beta >= 1.0 {
        return Err(SolverError::UndiscountedInfinite(beta));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(SolverError::Tolerance(epsilon));
    }
    let (shifted, shift) = shift_costs(spec, Horizon::Infinite);
    let model = shifted.with_zero_terminal().with_mean_weight(options.mean_weight);
    let threshold = epsilon * (1.0 - beta) / beta;
    let mut prev = terminal_stage(&model)?.v;
    let mut differences = Vec::new();
    for n in 1..=options.max_iterations {
        let stage = backup(&model, &prev, n, options)?;
        let d = sup_distance(&stage.v, &prev)?;
        differences.push(d);
        if d <= threshold {
            let c = model.max_step_cost();
            let info = InfiniteInfo {
                epsilon,
                iterations: n,
                last_difference: d,
                error_bound: d * beta / (1.0 - beta),
                geometric_bound: c * beta.powi(n as i32) / (1.0 - beta),
                differences,
            };
            return Ok(ValueTables {
                source: spec.clone(),
                model,
                shift,
                mean_weight: options.mean_weight,
                horizon: TableHorizon::Infinite(info),
                stages: vec![stage],
            });
        }
        prev = stage.v;
    }
    Err(SolverError::NotConverged {
        iterations: options.max_iterations,
        residual: differences.last().copied().unwrap_or(f64::NAN),
    })
}

/// Solves with the mean weight that `mode` requires at `alpha`.
pub fn solve_objective(
    spec: &MdpSpec,
    horizon: Horizon,
    epsilon: f64,
    mode: ObjectiveMode,
    alpha: f64,
    options: &SolverOptions,
) -> Result<ValueTables, SolverError> {
    check_alpha(alpha)?;
    let opts = SolverOptions { mean_weight: mode.mean_weight(alpha), ..options.clone() };
    match horizon {
        Horizon::Finite(n) => solve_finite(spec, n, &opts),
        Horizon::Infinite => solve_infinite(spec, epsilon, &opts),
    }
}

fn check_alpha(alpha: f64) -> Result<(), SolverError> {
    if alpha.is_finite() && (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(SolverError::Alpha(alpha))
    }
}

/// Optimal objective from state `x` in original cost units.
///
/// `V(x, α)` combines `mean_weight·E[mean]` with `α·CVaR_α`; the cost shift
/// is removed and the result divided by `α` where the objective requires.
pub fn cvar_value(tables: &ValueTables, x: usize, alpha: f64, mode: ObjectiveMode) -> Result<f64, SolverError> {
    check_alpha(alpha)?;
    if alpha == 0.0 && mode != ObjectiveMode::MeanPlusAlphaCvar {
        return Err(SolverError::AlphaZero);
    }
    tables.supports(mode, alpha)?;
    let top = tables.top_stage();
    let raw = tables.v(top, x)?.eval(alpha)?;
    let w = if tables.source.has_zero_mean_channel() { 0.0 } else { tables.mean_weight };
    let offset = w * tables.shift.mean_offset() + alpha * tables.shift.cvar_offset();
    let shifted = raw - offset;
    Ok(match mode {
        ObjectiveMode::MeanPlusAlphaCvar => shifted,
        ObjectiveMode::PureCvar | ObjectiveMode::MeanPlusCvar => shifted / alpha,
    })
}

/// Worst-path dynamic program `min_a max_{x'} [c̃ + β·W(x')]` with
/// `c̃(x,a,x') = c(x,a,x') + Σ_z p(z|x,a)·c₁(x,a,z)`. For a pure CVaR problem
/// (zero mean channel) this is the `α → 0` limit, the essential supremum of
/// the cost under the best policy.
pub fn worst_path_value(spec: &MdpSpec, horizon: Horizon) -> Result<Vec<f64>, SolverError> {
    let m = spec.num_states();
    let beta = spec.discount();
    let backup = |w: &[f64]| -> Vec<f64> {
        (0..m)
            .map(|x| {
                (0..spec.actions(x).len())
                    .map(|a| {
                        let edges = spec.transitions(x, a);
                        let mean: f64 = edges.iter().map(|e| e.prob * e.mean_cost).sum();
                        edges.iter().map(|e| e.cvar_cost + mean + beta * w[e.to]).fold(f64::NEG_INFINITY, f64::max)
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    match horizon {
        Horizon::Finite(n) => {
            let mut w: Vec<f64> = (0..m).map(|x| spec.terminal_cvar(x) + spec.terminal_mean(x)).collect();
            for _ in 0..n {
                w = backup(&w);
            }
            Ok(w)
        }
        Horizon::Infinite => {
            if beta >= 1.0 {
                return Err(SolverError::UndiscountedInfinite(beta));
            }
            infinite_fixed_point(m, beta, spec.max_abs_cost(), backup)
        }
    }
}

/// Risk-neutral dynamic program on `mean_weight·c₁ + c`.
pub fn risk_neutral_value(spec: &MdpSpec, horizon: Horizon, mean_weight: f64) -> Result<Vec<f64>, SolverError> {
    let m = spec.num_states();
    let beta = spec.discount();
    let backup = |w: &[f64]| -> Vec<f64> {
        (0..m)
            .map(|x| {
                (0..spec.actions(x).len())
                    .map(|a| {
                        spec.transitions(x, a)
                            .iter()
                            .map(|e| e.prob * (mean_weight * e.mean_cost + e.cvar_cost + beta * w[e.to]))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    match horizon {
        Horizon::Finite(n) => {
            let mut w: Vec<f64> =
                (0..m).map(|x| spec.terminal_cvar(x) + mean_weight * spec.terminal_mean(x)).collect();
            for _ in 0..n {
                w = backup(&w);
            }
            Ok(w)
        }
        Horizon::Infinite => {
            if beta >= 1.0 {
                return Err(SolverError::UndiscountedInfinite(beta));
            }
            infinite_fixed_point(m, beta, spec.max_abs_cost() * (1.0 + mean_weight.abs()), backup)
        }
    }
}

fn infinite_fixed_point(
    m: usize,
    beta: f64,
    scale: f64,
    backup: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<Vec<f64>, SolverError> {
    let target = 1e-13 * (scale / (1.0 - beta)).max(1.0) * (1.0 - beta) / beta;
    let mut w = vec![0.0; m];
    for _ in 0..DEFAULT_MAX_ITERATIONS {
        let next = backup(&w);
        let d = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        w = next;
        if d <= target {
            return Ok(w);
        }
    }
    Err(SolverError::NotConverged { iterations: DEFAULT_MAX_ITERATIONS, residual: f64::NAN })
}

/// Actions whose `Q` at `(x, y)` is within [`ACTION_TOLERANCE`] of `V`,
/// relative to `|V|`, in index order. The tolerance is purely relative
/// because values near `y = 0` are themselves of order `y`.
pub fn optimal_action_set(tables: &ValueTables, stage: usize, x: usize, y: f64) -> Result<Vec<usize>, SolverError> {
    if stage == 0 {
        return Err(SolverError::Stage { stage, max: tables.top_stage() });
    }
    let st = tables.stage(stage)?;
    let qs = st.q.get(x).ok_or(SolverError::State(x))?;
    let vals = qs.iter().map(|q| q.eval(y)).collect::<Result<Vec<_>, _>>()?;
    let best = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = ACTION_TOLERANCE * best.abs();
    Ok((0..vals.len()).filter(|&a| vals[a] <= best + tol).collect())
}
