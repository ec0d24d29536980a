//! Brute-force references that share no code with the solver: exact outcome
//! distributions of history-dependent policies, exhaustive policy search, a
//! grid search for nature's problem, and random instance generators.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::model::{MdpSpec, Outcome, RandomCostSpec, RandomTransition, Transition};
use crate::nature::{Successor, TransferInstance};
use crate::pwl::{PwlConcave, Segment};
use crate::solver::ObjectiveMode;

pub const MAX_TRAJECTORIES: usize = 100_000;
pub const MAX_POLICIES: usize = 1_000_000;
const ATOM_MERGE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("distribution is empty")]
    Empty,
    #[error("atom probabilities sum to {0}, expected 1")]
    ProbabilitySum(f64),
    #[error("alpha {0} outside (0, 1]")]
    Alpha(f64),
    #[error("policy has no action for history {0:?}")]
    MissingDecision(Vec<usize>),
    #[error("policy chooses action {action} unavailable after history {history:?}")]
    InvalidAction { history: Vec<usize>, action: usize },
    #[error("more than {limit} trajectories")]
    TooManyTrajectories { limit: usize },
    #[error("{count} policies exceed the limit of {limit}")]
    TooManyPolicies { count: f64, limit: usize },
    #[error("grid search needs 1..={max} successors, got {got}")]
    GridSize { got: usize, max: usize },
    #[error("grid resolution {0} must lie in (0, 1]")]
    Resolution(f64),
    #[error("tail mass {0} outside [0, 1]")]
    Level(f64),
}

/// Finite distribution of the total discounted risk-channel cost, together
/// with the expected total discounted mean-channel cost.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeDistribution {
    /// `(value, probability)` sorted by value, atoms closer than `1e-12` merged.
    atoms: Vec<(f64, f64)>,
    mean_channel: f64,
}

impl OutcomeDistribution {
    pub fn new(mut atoms: Vec<(f64, f64)>, mean_channel: f64) -> Result<Self, OracleError> {
        atoms.retain(|a| a.1 > 0.0);
        if atoms.is_empty() {
            return Err(OracleError::Empty);
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(OracleError::ProbabilitySum(total));
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
        for (v, p) in atoms {
            match merged.last_mut() {
                Some(last) if v - last.0 <= ATOM_MERGE * v.abs().max(1.0) => last.1 += p,
                _ => merged.push((v, p)),
            }
        }
        Ok(Self { atoms: merged, mean_channel })
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn mean_channel(&self) -> f64 {
        self.mean_channel
    }

    pub fn expectation(&self) -> f64 {
        self.atoms.iter().map(|(v, p)| v * p).sum()
    }

    pub fn max(&self) -> f64 {
        self.atoms.last().unwrap().0
    }
}

/// `CVaR_α`: the average of the worst `α` probability mass of the risk
/// channel, splitting the boundary atom. `α = 0` gives the maximum.
pub fn cvar_of_distribution(dist: &OutcomeDistribution, alpha: f64) -> Result<f64, OracleError> {
    if !(alpha.is_finite() && (0.0..=1.0).contains(&alpha)) {
        return Err(OracleError::Alpha(alpha));
    }
    if alpha == 0.0 {
        return Ok(dist.max());
    }
    let mut remaining = alpha;
    let mut acc = 0.0;
    for &(v, p) in dist.atoms.iter().rev() {
        let take = p.min(remaining);
        acc += take * v;
        remaining -= take;
        if remaining <= 0.0 {
            break;
        }
    }
    // Rounding in the probabilities can leave a sliver of mass; it sits on the lowest atom.
    if remaining > 0.0 {
        acc += remaining * dist.atoms[0].0;
    }
    Ok(acc / alpha)
}

/// `min_w { w + E[(Z − w)⁺]/α }`, attained at an atom.
pub fn cvar_min_over_atoms(dist: &OutcomeDistribution, alpha: f64) -> Result<f64, OracleError> {
    if !(alpha.is_finite() && alpha > 0.0 && alpha <= 1.0) {
        return Err(OracleError::Alpha(alpha));
    }
    Ok(dist
        .atoms
        .iter()
        .map(|&(w, _)| w + dist.atoms.iter().map(|&(v, p)| p * (v - w).max(0.0)).sum::<f64>() / alpha)
        .fold(f64::INFINITY, f64::min))
}

/// Objective of a distribution under `mode` (`α = 0` uses the maximum).
pub fn objective_of_distribution(
    dist: &OutcomeDistribution,
    alpha: f64,
    mode: ObjectiveMode,
) -> Result<f64, OracleError> {
    let cvar = cvar_of_distribution(dist, alpha)?;
    Ok(match mode {
        ObjectiveMode::PureCvar => cvar,
        ObjectiveMode::MeanPlusAlphaCvar => dist.mean_channel + alpha * cvar,
        ObjectiveMode::MeanPlusCvar => dist.mean_channel + cvar,
    })
}

/// A deterministic history-dependent policy. Keys are histories
/// `[x₀, a₀, x₁, a₁, …, x_t]` of state and action indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HistoryPolicy {
    decisions: BTreeMap<Vec<usize>, usize>,
}

impl HistoryPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, history: Vec<usize>, action: usize) {
        self.decisions.insert(history, action);
    }

    pub fn action(&self, history: &[usize]) -> Option<usize> {
        self.decisions.get(history).copied()
    }

    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<usize>, &usize)> {
        self.decisions.iter()
    }
}

/// Exact distribution of the discounted costs over `horizon` steps from `x0`,
/// including terminal costs.
pub fn enumerate_distribution(
    spec: &MdpSpec,
    policy: &HistoryPolicy,
    x0: usize,
    horizon: usize,
) -> Result<OutcomeDistribution, OracleError> {
    struct Walk<'a> {
        spec: &'a MdpSpec,
        policy: &'a HistoryPolicy,
        horizon: usize,
        atoms: Vec<(f64, f64)>,
        mean: f64,
    }
    impl Walk<'_> {
        fn go(&mut self, history: &mut Vec<usize>, t: usize, prob: f64, disc: f64, z: f64, z1: f64) -> Result<(), OracleError> {
            let x = *history.last().unwrap();
            if t == self.horizon {
                if self.atoms.len() >= MAX_TRAJECTORIES {
                    return Err(OracleError::TooManyTrajectories { limit: MAX_TRAJECTORIES });
                }
                let total = z + disc * self.spec.terminal_cvar(x);
                self.mean += prob * (z1 + disc * self.spec.terminal_mean(x));
                self.atoms.push((total, prob));
                return Ok(());
            }
            let a = self.policy.action(history).ok_or_else(|| OracleError::MissingDecision(history.clone()))?;
            if a >= self.spec.actions(x).len() {
                return Err(OracleError::InvalidAction { history: history.clone(), action: a });
            }
            let beta = self.spec.discount();
            for e in self.spec.transitions(x, a) {
                history.push(a);
                history.push(e.to);
                self.go(history, t + 1, prob * e.prob, disc * beta, z + disc * e.cvar_cost, z1 + disc * e.mean_cost)?;
                history.truncate(history.len() - 2);
            }
            Ok(())
        }
    }
    let mut walk = Walk { spec, policy, horizon, atoms: Vec::new(), mean: 0.0 };
    walk.go(&mut vec![x0], 0, 1.0, 1.0, 0.0, 0.0)?;
    OutcomeDistribution::new(walk.atoms, walk.mean)
}

/// Number of deterministic policies that differ on reachable histories.
pub fn count_policies(spec: &MdpSpec, x0: usize, horizon: usize) -> f64 {
    fn count(spec: &MdpSpec, x: usize, remaining: usize, memo: &mut BTreeMap<(usize, usize), f64>) -> f64 {
        if remaining == 0 {
            return 1.0;
        }
        if let Some(&c) = memo.get(&(x, remaining)) {
            return c;
        }
        let c = (0..spec.actions(x).len())
            .map(|a| spec.transitions(x, a).iter().map(|e| count(spec, e.to, remaining - 1, memo)).product::<f64>())
            .sum();
        memo.insert((x, remaining), c);
        c
    }
    count(spec, x0, horizon, &mut BTreeMap::new())
}

/// Policy restricted to the subtree below one node.
#[derive(Debug)]
struct SubPolicy {
    action: usize,
    /// One child per transition of `action`, in declaration order.
    children: Vec<Rc<SubPolicy>>,
}

/// A subtree policy with the conditional law of the remaining discounted
/// cost: risk-channel atoms and the mean-channel expectation.
#[derive(Debug, Clone)]
struct SubOption {
    policy: Option<Rc<SubPolicy>>,
    atoms: Rc<Vec<(f64, f64)>>,
    mean: f64,
}

fn subtree_options(spec: &MdpSpec, x: usize, remaining: usize) -> Vec<SubOption> {
    if remaining == 0 {
        return vec![SubOption {
            policy: None,
            atoms: Rc::new(vec![(spec.terminal_cvar(x), 1.0)]),
            mean: spec.terminal_mean(x),
        }];
    }
    let mut out = Vec::new();
    for a in 0..spec.actions(x).len() {
        let edges = spec.transitions(x, a);
        let lists: Vec<Vec<SubOption>> = edges.iter().map(|e| subtree_options(spec, e.to, remaining - 1)).collect();
        for_each_combination(&lists, |_, combo| {
            let (atoms, mean) = combine(spec.discount(), edges, combo);
            out.push(SubOption {
                policy: Some(Rc::new(SubPolicy {
                    action: a,
                    children: combo.iter().map(|o| o.policy.clone().unwrap_or_else(leaf)).collect(),
                })),
                atoms: Rc::new(atoms),
                mean,
            });
        });
    }
    out
}

fn leaf() -> Rc<SubPolicy> {
    Rc::new(SubPolicy { action: usize::MAX, children: Vec::new() })
}

fn combine(beta: f64, edges: &[Transition], combo: &[&SubOption]) -> (Vec<(f64, f64)>, f64) {
    let mut atoms = Vec::new();
    let mut mean = 0.0;
    for (e, o) in edges.iter().zip(combo) {
        atoms.extend(o.atoms.iter().map(|&(v, p)| (e.cvar_cost + beta * v, e.prob * p)));
        mean += e.prob * (e.mean_cost + beta * o.mean);
    }
    (atoms, mean)
}

/// Calls `f` on every element of the cartesian product, last list fastest.
fn for_each_combination<'a>(lists: &'a [Vec<SubOption>], mut f: impl FnMut(&[usize], &[&'a SubOption])) {
    if lists.iter().any(Vec::is_empty) {
        return;
    }
    let mut idx = vec![0usize; lists.len()];
    loop {
        let combo: Vec<&SubOption> = idx.iter().zip(lists).map(|(&i, l)| &l[i]).collect();
        f(&idx, &combo);
        let mut k = lists.len();
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < lists[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
}

fn flatten(spec: &MdpSpec, node: &SubPolicy, history: &mut Vec<usize>, out: &mut HistoryPolicy) {
    if node.action == usize::MAX {
        return;
    }
    out.insert(history.clone(), node.action);
    let x = *history.last().unwrap();
    for (e, child) in spec.transitions(x, node.action).iter().zip(&node.children) {
        history.push(node.action);
        history.push(e.to);
        flatten(spec, child, history, out);
        history.truncate(history.len() - 2);
    }
}

/// Best deterministic history-dependent policy by enumeration of every policy
/// on the reachable history tree. Ties keep the first policy in enumeration
/// order (actions ascending, earlier histories varying slowest).
pub fn exhaustive_policy_search(
    spec: &MdpSpec,
    x0: usize,
    alpha: f64,
    horizon: usize,
    mode: ObjectiveMode,
) -> Result<(HistoryPolicy, f64), OracleError> {
    if !(alpha.is_finite() && (0.0..=1.0).contains(&alpha)) {
        return Err(OracleError::Alpha(alpha));
    }
    let count = count_policies(spec, x0, horizon);
    if count > MAX_POLICIES as f64 {
        return Err(OracleError::TooManyPolicies { count, limit: MAX_POLICIES });
    }
    if horizon == 0 {
        let dist = OutcomeDistribution::new(vec![(spec.terminal_cvar(x0), 1.0)], spec.terminal_mean(x0))?;
        return Ok((HistoryPolicy::new(), objective_of_distribution(&dist, alpha, mode)?));
    }
    let mut best: Option<(f64, usize, Vec<usize>)> = None;
    for a in 0..spec.actions(x0).len() {
        let edges = spec.transitions(x0, a);
        let lists: Vec<Vec<SubOption>> = edges.iter().map(|e| subtree_options(spec, e.to, horizon - 1)).collect();
        let mut failure = None;
        for_each_combination(&lists, |idx, combo| {
            if failure.is_some() {
                return;
            }
            let (atoms, mean) = combine(spec.discount(), edges, combo);
            let value = OutcomeDistribution::new(atoms, mean)
                .and_then(|d| objective_of_distribution(&d, alpha, mode));
            match value {
                Ok(v) => {
                    let tol = 1e-12 * v.abs().max(1.0);
                    if best.as_ref().is_none_or(|b| v < b.0 - tol) {
                        best = Some((v, a, idx.to_vec()));
                    }
                }
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
    }
    let (value, a, picks) = best.expect("at least one action");
    let edges = spec.transitions(x0, a);
    let root = SubPolicy {
        action: a,
        children: edges
            .iter()
            .zip(&picks)
            .map(|(e, &i)| subtree_options(spec, e.to, horizon - 1)[i].policy.clone().unwrap_or_else(leaf))
            .collect(),
    };
    let mut policy = HistoryPolicy::new();
    flatten(spec, &root, &mut vec![x0], &mut policy);
    Ok((policy, value))
}

/// Nature's problem solved on a grid of step `h`: mass for all successors but
/// the last is restricted to multiples of `h`, the last absorbs the remainder.
/// Never exceeds the exact optimum; the shortfall is `O(h·max slope)`.
#[derive(Debug, Clone)]
pub struct GridOracle {
    h: f64,
    /// Best value of the first `k−1` successors with total mass `j·h`.
    table: Vec<f64>,
    last: (f64, PwlConcave),
}

pub const GRID_MAX_SUCCESSORS: usize = 4;

impl GridOracle {
    pub fn new(inst: &TransferInstance, resolution: f64) -> Result<Self, OracleError> {
        let succ = inst.successors();
        if succ.is_empty() || succ.len() > GRID_MAX_SUCCESSORS {
            return Err(OracleError::GridSize { got: succ.len(), max: GRID_MAX_SUCCESSORS });
        }
        if !(resolution > 0.0 && resolution <= 1.0) {
            return Err(OracleError::Resolution(resolution));
        }
        let h = resolution;
        let point = |s: &Successor, k: usize| s.prob * s.value.value((k as f64 * h / s.prob).min(1.0));
        let mut table = vec![0.0];
        for s in &succ[..succ.len() - 1] {
            let n = (s.prob / h + 1e-9).floor() as usize;
            let own: Vec<f64> = (0..=n).map(|k| point(s, k)).collect();
            let mut next = vec![f64::NEG_INFINITY; table.len() + n];
            for (j, &base) in table.iter().enumerate() {
                for (k, &v) in own.iter().enumerate() {
                    let cand = base + v;
                    if cand > next[j + k] {
                        next[j + k] = cand;
                    }
                }
            }
            table = next;
        }
        let last = succ.last().unwrap();
        Ok(Self { h, table, last: (last.prob, last.value.clone()) })
    }

    pub fn best_response(&self, y: f64) -> Result<f64, OracleError> {
        if !(y.is_finite() && (-1e-12..=1.0 + 1e-12).contains(&y)) {
            return Err(OracleError::Level(y));
        }
        let y = y.clamp(0.0, 1.0);
        let (p, f) = &self.last;
        let mut best = f64::NEG_INFINITY;
        for (j, &base) in self.table.iter().enumerate() {
            let used = j as f64 * self.h;
            if used > y + 1e-12 {
                break;
            }
            let rest = (y - used).max(0.0);
            if rest > p + 1e-12 || base == f64::NEG_INFINITY {
                continue;
            }
            best = best.max(base + p * f.value((rest / p).min(1.0)));
        }
        Ok(best)
    }
}

pub fn grid_best_response(inst: &TransferInstance, y: f64, resolution: f64) -> Result<f64, OracleError> {
    GridOracle::new(inst, resolution)?.best_response(y)
}

// ---------------------------------------------------------------------------
// Random instances
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RandomSpecConfig {
    pub min_states: usize,
    pub max_states: usize,
    pub max_actions: usize,
    /// Integer costs are drawn from `0..=max_cost`.
    pub max_cost: u32,
    /// Probabilities are multiples of `1 / 2^prob_bits`.
    pub prob_bits: u32,
    /// Draw mean-channel costs as well.
    pub with_mean: bool,
    /// Draw terminal costs as well.
    pub with_terminal: bool,
    pub discounts: Vec<f64>,
}

impl Default for RandomSpecConfig {
    fn default() -> Self {
        Self {
            min_states: 2,
            max_states: 3,
            max_actions: 2,
            max_cost: 10,
            prob_bits: 2,
            with_mean: false,
            with_terminal: true,
            discounts: vec![0.5, 0.75, 1.0],
        }
    }
}

/// Splits `2^bits` units into `k ≥ 1` positive parts, returned as probabilities.
fn dyadic_split<R: Rng>(rng: &mut R, k: usize, bits: u32) -> Vec<f64> {
    let units = 1usize << bits;
    let k = k.min(units);
    let mut cuts: Vec<usize> = (1..units).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(k - 1).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(k);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(units)) {
        out.push((c - prev) as f64 / units as f64);
        prev = c;
    }
    out
}

fn random_support<R: Rng>(rng: &mut R, m: usize, bits: u32) -> Vec<(usize, f64)> {
    let k = rng.gen_range(1..=m);
    let mut states: Vec<usize> = (0..m).collect();
    states.shuffle(rng);
    states.truncate(k);
    states.sort_unstable();
    let probs = dyadic_split(rng, states.len(), bits);
    states.into_iter().zip(probs).collect()
}

pub fn random_spec<R: Rng>(rng: &mut R, cfg: &RandomSpecConfig) -> MdpSpec {
    let m = rng.gen_range(cfg.min_states..=cfg.max_states);
    let discount = cfg.discounts[rng.gen_range(0..cfg.discounts.len())];
    let cost = |rng: &mut R| rng.gen_range(0..=cfg.max_cost) as f64;
    let mut actions = Vec::with_capacity(m);
    let mut transitions = Vec::with_capacity(m);
    for _ in 0..m {
        let k = rng.gen_range(1..=cfg.max_actions);
        actions.push((0..k).map(|a| format!("a{a}")).collect());
        transitions.push(
            (0..k)
                .map(|_| {
                    random_support(rng, m, cfg.prob_bits)
                        .into_iter()
                        .map(|(to, prob)| Transition {
                            to,
                            prob,
                            cvar_cost: cost(rng),
                            mean_cost: if cfg.with_mean { cost(rng) } else { 0.0 },
                        })
                        .collect()
                })
                .collect(),
        );
    }
    let terminal_cvar = (0..m).map(|_| if cfg.with_terminal { cost(rng) } else { 0.0 }).collect();
    let terminal_mean =
        (0..m).map(|_| if cfg.with_terminal && cfg.with_mean { cost(rng) } else { 0.0 }).collect();
    MdpSpec::from_parts((0..m).map(|x| format!("x{x}")).collect(), actions, discount, transitions, terminal_cvar, terminal_mean)
        .expect("generated spec is valid")
}

/// Random concave function on `[0, 1]` with slopes that are multiples of `1/2`
/// in `[0, 3]` and dyadic segment lengths.
pub fn random_concave<R: Rng>(rng: &mut R) -> PwlConcave {
    let k = rng.gen_range(1..=4);
    let mut slopes: Vec<f64> = (0..=6).map(|i| i as f64 * 0.5).collect();
    slopes.shuffle(rng);
    let mut slopes: Vec<f64> = slopes.into_iter().take(k).collect();
    slopes.sort_by(|a, b| b.total_cmp(a));
    let lengths = dyadic_split(rng, k, 3);
    let start = rng.gen_range(0..=4) as f64 * 0.5;
    PwlConcave::new(start, slopes.into_iter().zip(lengths).map(|(q, l)| Segment::new(q, l)).collect(), 1.0)
        .expect("generated function is valid")
}

/// Random nature problem with 1–3 successors and dyadic probabilities.
pub fn random_transfer_instance<R: Rng>(rng: &mut R) -> TransferInstance {
    let k = rng.gen_range(1..=3);
    let probs = dyadic_split(rng, k, 3);
    let successors =
        probs.into_iter().enumerate().map(|(state, prob)| Successor { state, prob, value: random_concave(rng) }).collect();
    TransferInstance::new(successors).expect("generated instance is valid")
}

/// Random spec whose risk-channel edge costs have 1–2 outcomes with dyadic
/// probabilities, labelled `lo`/`hi`.
pub fn random_cost_spec<R: Rng>(rng: &mut R, cfg: &RandomSpecConfig) -> RandomCostSpec {
    let base = random_spec(rng, cfg);
    let m = base.num_states();
    let labels = vec!["lo".to_string(), "hi".to_string()];
    let transitions = (0..m)
        .map(|x| {
            (0..base.actions(x).len())
                .map(|a| {
                    base.transitions(x, a)
                        .iter()
                        .map(|e| {
                            let outcomes = if rng.gen_bool(0.5) {
                                vec![Outcome { label: 0, cost: e.cvar_cost, prob: 1.0 }]
                            } else {
                                let p = dyadic_split(rng, 2, 2);
                                let hi = e.cvar_cost + rng.gen_range(1..=cfg.max_cost.max(1)) as f64;
                                vec![
                                    Outcome { label: 0, cost: e.cvar_cost, prob: p[0] },
                                    Outcome { label: 1, cost: hi, prob: p[1] },
                                ]
                            };
                            RandomTransition { to: e.to, prob: e.prob, mean_cost: e.mean_cost, outcomes }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    RandomCostSpec::from_parts(
        base.states().to_vec(),
        (0..m).map(|x| base.actions(x).to_vec()).collect(),
        base.discount(),
        transitions,
        (0..m).map(|x| base.terminal_cvar(x)).collect(),
        (0..m).map(|x| base.terminal_mean(x)).collect(),
        labels,
    )
    .expect("generated random-cost spec is valid")
}
