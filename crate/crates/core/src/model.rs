//! Finite MDP instances: validation, JSON ingest, cost normalization and the
//! state augmentation that turns finite-support random costs into an ordinary
//! MDP on `states × outcome labels`.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Absolute tolerance on probability sums. Rows within it are renormalized,
/// rows outside it are rejected.
pub const PROB_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("malformed document: {0}")]
    Schema(String),
    #[error("the model declares no states")]
    NoStates,
    #[error("duplicate state `{0}`")]
    DuplicateState(String),
    #[error("unknown state `{name}` referenced in {context}")]
    UnknownState { name: String, context: String },
    #[error("state `{0}` has no actions")]
    NoActions(String),
    #[error("duplicate action `{action}` at state `{state}`")]
    DuplicateAction { state: String, action: String },
    #[error("unknown action `{action}` at state `{state}`")]
    UnknownAction { state: String, action: String },
    #[error("duplicate transition ({state}, {action}) -> {to}")]
    DuplicateTransition { state: String, action: String, to: String },
    #[error("invalid probability {prob} at ({state}, {action}) -> {to}")]
    InvalidProbability { state: String, action: String, to: String, prob: f64 },
    #[error("probabilities at ({state}, {action}) sum to {sum}, expected 1")]
    ProbabilitySum { state: String, action: String, sum: f64 },
    #[error("non-finite {what} at {location}")]
    NonFinite { what: &'static str, location: String },
    #[error("discount factor {0} must lie in (0, 1]")]
    Discount(f64),
    #[error("transition ({state}, {action}) -> {to} must carry exactly one of `cvar_cost` or `outcomes`")]
    CostShape { state: String, action: String, to: String },
    #[error("outcome probabilities on ({state}, {action}) -> {to} sum to {sum}, expected 1")]
    OutcomeSum { state: String, action: String, to: String, sum: f64 },
    #[error("invalid outcome on ({state}, {action}) -> {to}: {reason}")]
    InvalidOutcome { state: String, action: String, to: String, reason: String },
    #[error("document describes random costs; expected a plain MDP")]
    UnexpectedRandomCosts,
}

/// Planning horizon of an objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Horizon {
    Finite(usize),
    Infinite,
}

/// One positive-probability edge `x --a--> to`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub to: usize,
    pub prob: f64,
    pub cvar_cost: f64,
    pub mean_cost: f64,
}

/// A validated finite MDP with a risk (CVaR) cost channel and a mean cost
/// channel. States and actions are dense indices in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpSpec {
    states: Vec<String>,
    actions: Vec<Vec<String>>,
    discount: f64,
    transitions: Vec<Vec<Vec<Transition>>>,
    terminal_cvar: Vec<f64>,
    terminal_mean: Vec<f64>,
}

/// Raw edge used by [`MdpSpec::from_parts`]; probabilities may still need
/// renormalization and zero-probability edges are dropped.
pub type EdgeList = Vec<Transition>;

impl MdpSpec {
    /// Validates and normalizes an MDP given in index form.
    ///
    /// `transitions[x][a]` lists the outgoing edges of `(x, a)`.
    pub fn from_parts(
        states: Vec<String>,
        actions: Vec<Vec<String>>,
        discount: f64,
        transitions: Vec<Vec<EdgeList>>,
        terminal_cvar: Vec<f64>,
        terminal_mean: Vec<f64>,
    ) -> Result<Self, ModelError> {
        check_states(&states)?;
        check_discount(discount)?;
        let m = states.len();
        if actions.len() != m || transitions.len() != m {
            return Err(ModelError::Schema(format!(
                "expected per-state action and transition lists for {m} states"
            )));
        }
        if terminal_cvar.len() != m || terminal_mean.len() != m {
            return Err(ModelError::Schema(format!("expected {m} terminal costs per channel")));
        }
        for (x, acts) in actions.iter().enumerate() {
            check_actions(&states[x], acts)?;
            if transitions[x].len() != acts.len() {
                return Err(ModelError::Schema(format!(
                    "state `{}` declares {} actions but {} transition rows",
                    states[x],
                    acts.len(),
                    transitions[x].len()
                )));
            }
        }
        for x in 0..m {
            finite("terminal_cvar_cost", terminal_cvar[x], || states[x].clone())?;
            finite("terminal_mean_cost", terminal_mean[x], || states[x].clone())?;
        }

        let mut rows = transitions;
        for (x, per_action) in rows.iter_mut().enumerate() {
            for (a, edges) in per_action.iter_mut().enumerate() {
                let loc = |to: usize| (states[x].clone(), actions[x][a].clone(), name_or_index(&states, to));
                let mut seen = vec![false; m];
                for e in edges.iter() {
                    if e.to >= m {
                        return Err(ModelError::UnknownState {
                            name: e.to.to_string(),
                            context: format!("transition ({}, {})", states[x], actions[x][a]),
                        });
                    }
                    let (s, act, to) = loc(e.to);
                    if seen[e.to] {
                        return Err(ModelError::DuplicateTransition { state: s, action: act, to });
                    }
                    seen[e.to] = true;
                    if !e.prob.is_finite() || e.prob < 0.0 {
                        return Err(ModelError::InvalidProbability { state: s, action: act, to, prob: e.prob });
                    }
                    let where_ = || format!("({}, {}) -> {}", states[x], actions[x][a], states[e.to]);
                    finite("cvar_cost", e.cvar_cost, where_)?;
                    finite("mean_cost", e.mean_cost, where_)?;
                }
                let sum: f64 = edges.iter().map(|e| e.prob).sum();
                if (sum - 1.0).abs() > PROB_TOLERANCE {
                    return Err(ModelError::ProbabilitySum {
                        state: states[x].clone(),
                        action: actions[x][a].clone(),
                        sum,
                    });
                }
                edges.retain(|e| e.prob > 0.0);
                for e in edges.iter_mut() {
                    e.prob /= sum;
                }
            }
        }

        Ok(Self { states, actions, discount, transitions: rows, terminal_cvar, terminal_mean })
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn state_name(&self, x: usize) -> &str {
        &self.states[x]
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s == name)
    }

    pub fn actions(&self, x: usize) -> &[String] {
        &self.actions[x]
    }

    pub fn action_index(&self, x: usize, name: &str) -> Option<usize> {
        self.actions[x].iter().position(|s| s == name)
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Positive-probability edges of `(x, a)` in declaration order.
    pub fn transitions(&self, x: usize, a: usize) -> &[Transition] {
        &self.transitions[x][a]
    }

    pub fn edge(&self, x: usize, a: usize, to: usize) -> Option<&Transition> {
        self.transitions[x][a].iter().find(|e| e.to == to)
    }

    pub fn terminal_cvar(&self, x: usize) -> f64 {
        self.terminal_cvar[x]
    }

    pub fn terminal_mean(&self, x: usize) -> f64 {
        self.terminal_mean[x]
    }

    fn all_edges(&self) -> impl Iterator<Item = &Transition> {
        self.transitions.iter().flatten().flatten()
    }

    /// True when every mean-channel cost (one-step and terminal) is zero.
    pub fn has_zero_mean_channel(&self) -> bool {
        self.all_edges().all(|e| e.mean_cost == 0.0) && self.terminal_mean.iter().all(|&v| v == 0.0)
    }

    /// Largest absolute one-step cost of either channel.
    pub fn max_abs_cost(&self) -> f64 {
        self.all_edges()
            .map(|e| e.cvar_cost.abs().max(e.mean_cost.abs()))
            .fold(0.0, f64::max)
    }

    /// Largest combined one-step cost `c₁ + c` over all edges.
    pub fn max_step_cost(&self) -> f64 {
        self.all_edges().map(|e| e.cvar_cost + e.mean_cost).fold(0.0, f64::max)
    }

    /// Copy with every edge and terminal cost rewritten by `f(cvar, mean)`.
    pub fn map_costs(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let mut out = self.clone();
        for e in out.transitions.iter_mut().flatten().flatten() {
            let (c, c1) = f(e.cvar_cost, e.mean_cost);
            e.cvar_cost = c;
            e.mean_cost = c1;
        }
        for x in 0..out.states.len() {
            let (c, c1) = f(out.terminal_cvar[x], out.terminal_mean[x]);
            out.terminal_cvar[x] = c;
            out.terminal_mean[x] = c1;
        }
        out
    }

    /// Copy with the mean channel multiplied by `weight`.
    pub fn with_mean_weight(&self, weight: f64) -> Self {
        self.map_costs(|c, c1| (c, weight * c1))
    }

    /// Copy with the mean channel removed (a pure CVaR problem).
    pub fn without_mean(&self) -> Self {
        self.with_mean_weight(0.0)
    }

    /// Copy with both terminal cost functions set to zero.
    pub fn with_zero_terminal(&self) -> Self {
        let mut out = self.clone();
        out.terminal_cvar.iter_mut().for_each(|v| *v = 0.0);
        out.terminal_mean.iter_mut().for_each(|v| *v = 0.0);
        out
    }

    pub fn to_document(&self) -> MdpDocument {
        let mut transitions = Vec::new();
        for x in 0..self.states.len() {
            for (a, edges) in self.transitions[x].iter().enumerate() {
                for e in edges {
                    transitions.push(TransitionEntry {
                        from: self.states[x].clone(),
                        action: self.actions[x][a].clone(),
                        to: self.states[e.to].clone(),
                        prob: e.prob,
                        cvar_cost: Some(e.cvar_cost),
                        outcomes: None,
                        mean_cost: e.mean_cost,
                    });
                }
            }
        }
        MdpDocument {
            states: self.states.clone(),
            actions: self.states.iter().cloned().zip(self.actions.iter().cloned()).collect(),
            discount: self.discount,
            transitions,
            terminal_cvar_cost: self.states.iter().cloned().zip(self.terminal_cvar.iter().copied()).collect(),
            terminal_mean_cost: self.states.iter().cloned().zip(self.terminal_mean.iter().copied()).collect(),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("document serializes")
    }

    /// Hex SHA-256 of the canonical document serialization.
    pub fn spec_hash(&self) -> String {
        let canonical = serde_json::to_string(&self.to_document()).expect("document serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Parses a plain MDP; random-cost documents are rejected.
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        match parse_spec(text)? {
            ParsedSpec::Plain(spec) => Ok(spec),
            ParsedSpec::RandomCost(_) => Err(ModelError::UnexpectedRandomCosts),
        }
    }

    pub fn from_document(doc: &MdpDocument) -> Result<Self, ModelError> {
        match from_document(doc)? {
            ParsedSpec::Plain(spec) => Ok(spec),
            ParsedSpec::RandomCost(_) => Err(ModelError::UnexpectedRandomCosts),
        }
    }
}

fn name_or_index(states: &[String], i: usize) -> String {
    states.get(i).cloned().unwrap_or_else(|| i.to_string())
}

fn finite(what: &'static str, v: f64, location: impl FnOnce() -> String) -> Result<(), ModelError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite { what, location: location() })
    }
}

fn check_states(states: &[String]) -> Result<(), ModelError> {
    if states.is_empty() {
        return Err(ModelError::NoStates);
    }
    for (i, s) in states.iter().enumerate() {
        if states[..i].contains(s) {
            return Err(ModelError::DuplicateState(s.clone()));
        }
    }
    Ok(())
}

fn check_actions(state: &str, acts: &[String]) -> Result<(), ModelError> {
    if acts.is_empty() {
        return Err(ModelError::NoActions(state.to_string()));
    }
    for (i, a) in acts.iter().enumerate() {
        if acts[..i].contains(a) {
            return Err(ModelError::DuplicateAction { state: state.to_string(), action: a.clone() });
        }
    }
    Ok(())
}

fn check_discount(discount: f64) -> Result<(), ModelError> {
    if discount.is_finite() && discount > 0.0 && discount <= 1.0 {
        Ok(())
    } else {
        Err(ModelError::Discount(discount))
    }
}

// ---------------------------------------------------------------------------
// Random one-step costs with finite support
// ---------------------------------------------------------------------------

/// One cost outcome `w'` of an edge, with its conditional probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    /// Index into [`RandomCostSpec::labels`].
    pub label: usize,
    pub cost: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomTransition {
    pub to: usize,
    pub prob: f64,
    pub mean_cost: f64,
    pub outcomes: Vec<Outcome>,
}

/// An MDP whose risk-channel cost on each edge is a finite random variable.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomCostSpec {
    states: Vec<String>,
    actions: Vec<Vec<String>>,
    discount: f64,
    transitions: Vec<Vec<Vec<RandomTransition>>>,
    terminal_cvar: Vec<f64>,
    terminal_mean: Vec<f64>,
    labels: Vec<String>,
}

impl RandomCostSpec {
    pub fn from_parts(
        states: Vec<String>,
        actions: Vec<Vec<String>>,
        discount: f64,
        transitions: Vec<Vec<Vec<RandomTransition>>>,
        terminal_cvar: Vec<f64>,
        terminal_mean: Vec<f64>,
        labels: Vec<String>,
    ) -> Result<Self, ModelError> {
        // Validate the skeleton through the plain constructor using the
        // outcome means as stand-in costs.
        let skeleton: Vec<Vec<EdgeList>> = transitions
            .iter()
            .map(|per_action| {
                per_action
                    .iter()
                    .map(|edges| {
                        edges
                            .iter()
                            .map(|e| Transition { to: e.to, prob: e.prob, cvar_cost: 0.0, mean_cost: e.mean_cost })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        MdpSpec::from_parts(
            states.clone(),
            actions.clone(),
            discount,
            skeleton,
            terminal_cvar.clone(),
            terminal_mean.clone(),
        )?;

        let mut rows = transitions;
        for (x, per_action) in rows.iter_mut().enumerate() {
            for (a, edges) in per_action.iter_mut().enumerate() {
                let sum: f64 = edges.iter().map(|e| e.prob).sum();
                edges.retain(|e| e.prob > 0.0);
                for e in edges.iter_mut() {
                    e.prob /= sum;
                    let (s, act, to) = (states[x].clone(), actions[x][a].clone(), states[e.to].clone());
                    let bad = |reason: String| ModelError::InvalidOutcome {
                        state: s.clone(),
                        action: act.clone(),
                        to: to.clone(),
                        reason,
                    };
                    if e.outcomes.is_empty() {
                        return Err(bad("empty outcome list".into()));
                    }
                    for (i, o) in e.outcomes.iter().enumerate() {
                        if o.label >= labels.len() {
                            return Err(bad(format!("unknown label index {}", o.label)));
                        }
                        if e.outcomes[..i].iter().any(|p| p.label == o.label) {
                            return Err(bad(format!("duplicate label `{}`", labels[o.label])));
                        }
                        if !o.prob.is_finite() || o.prob < 0.0 {
                            return Err(bad(format!("invalid probability {}", o.prob)));
                        }
                        if !o.cost.is_finite() {
                            return Err(bad("non-finite cost".into()));
                        }
                    }
                    let osum: f64 = e.outcomes.iter().map(|o| o.prob).sum();
                    if (osum - 1.0).abs() > PROB_TOLERANCE {
                        return Err(ModelError::OutcomeSum { state: s, action: act, to, sum: osum });
                    }
                    e.outcomes.retain(|o| o.prob > 0.0);
                    for o in e.outcomes.iter_mut() {
                        o.prob /= osum;
                    }
                }
            }
        }
        Ok(Self { states, actions, discount, transitions: rows, terminal_cvar, terminal_mean, labels })
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn actions(&self, x: usize) -> &[String] {
        &self.actions[x]
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn transitions(&self, x: usize, a: usize) -> &[RandomTransition] {
        &self.transitions[x][a]
    }

    pub fn terminal_cvar(&self, x: usize) -> f64 {
        self.terminal_cvar[x]
    }

    pub fn terminal_mean(&self, x: usize) -> f64 {
        self.terminal_mean[x]
    }

    /// Outcome labels in first-declaration order; the first is `w₀`.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn to_document(&self) -> MdpDocument {
        let mut transitions = Vec::new();
        for x in 0..self.states.len() {
            for (a, edges) in self.transitions[x].iter().enumerate() {
                for e in edges {
                    transitions.push(TransitionEntry {
                        from: self.states[x].clone(),
                        action: self.actions[x][a].clone(),
                        to: self.states[e.to].clone(),
                        prob: e.prob,
                        cvar_cost: None,
                        outcomes: Some(
                            e.outcomes
                                .iter()
                                .map(|o| OutcomeEntry {
                                    cost: o.cost,
                                    prob: o.prob,
                                    label: Some(self.labels[o.label].clone()),
                                })
                                .collect(),
                        ),
                        mean_cost: e.mean_cost,
                    });
                }
            }
        }
        MdpDocument {
            states: self.states.clone(),
            actions: self.states.iter().cloned().zip(self.actions.iter().cloned()).collect(),
            discount: self.discount,
            transitions,
            terminal_cvar_cost: self.states.iter().cloned().zip(self.terminal_cvar.iter().copied()).collect(),
            terminal_mean_cost: self.states.iter().cloned().zip(self.terminal_mean.iter().copied()).collect(),
        }
    }
}

/// Result of [`augment_random_costs`].
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSpec {
    pub spec: MdpSpec,
    /// `(x, w)` for each augmented state.
    pub origin: Vec<(usize, usize)>,
    /// Augmented index of `(x, w₀)` for each original state `x`.
    pub initial: Vec<usize>,
}

impl AugmentedSpec {
    pub fn index_of(&self, x: usize, w: usize) -> usize {
        x * (self.origin.len() / self.initial.len()) + w
    }
}

/// Augments each state with the label of the cost outcome that led into it,
/// so that the random costs become deterministic functions of the edge
/// `(x, w) --a--> (x', w')`. Transitions and costs ignore the `w` component.
pub fn augment_random_costs(rspec: &RandomCostSpec) -> AugmentedSpec {
    let m = rspec.num_states();
    let k = rspec.labels.len().max(1);
    let mut states = Vec::with_capacity(m * k);
    let mut origin = Vec::with_capacity(m * k);
    let mut actions = Vec::with_capacity(m * k);
    let mut transitions = Vec::with_capacity(m * k);
    let mut terminal_cvar = Vec::with_capacity(m * k);
    let mut terminal_mean = Vec::with_capacity(m * k);
    for x in 0..m {
        let rows: Vec<EdgeList> = rspec.transitions[x]
            .iter()
            .map(|edges| {
                edges
                    .iter()
                    .flat_map(|e| {
                        e.outcomes.iter().map(move |o| Transition {
                            to: e.to * k + o.label,
                            prob: e.prob * o.prob,
                            cvar_cost: o.cost,
                            mean_cost: e.mean_cost,
                        })
                    })
                    .collect()
            })
            .collect();
        for w in 0..k {
            let label = rspec.labels.get(w).map(String::as_str).unwrap_or("0");
            states.push(format!("{}@{}", rspec.states[x], label));
            origin.push((x, w));
            actions.push(rspec.actions[x].clone());
            transitions.push(rows.clone());
            terminal_cvar.push(rspec.terminal_cvar[x]);
            terminal_mean.push(rspec.terminal_mean[x]);
        }
    }
    let spec = MdpSpec::from_parts(states, actions, rspec.discount, transitions, terminal_cvar, terminal_mean)
        .expect("augmentation of a validated random-cost spec is valid");
    AugmentedSpec { spec, origin, initial: (0..m).map(|x| x * k).collect() }
}

// ---------------------------------------------------------------------------
// Cost normalization
// ---------------------------------------------------------------------------

/// Uniform per-channel cost shift making every cost nonnegative, together
/// with the factor that turns a per-step shift into an objective offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostShift {
    /// Amount `K` added to every risk-channel cost.
    pub cvar_shift: f64,
    /// Amount `K₁` added to every mean-channel cost.
    pub mean_shift: f64,
    /// `Σ_{t=0}^{N} βᵗ` for a finite horizon (terminal costs are shifted too),
    /// `1/(1-β)` for the infinite horizon.
    pub objective_factor: f64,
}

impl CostShift {
    pub fn none(discount: f64, horizon: Horizon) -> Self {
        Self { cvar_shift: 0.0, mean_shift: 0.0, objective_factor: objective_factor(discount, horizon) }
    }

    pub fn is_identity(&self) -> bool {
        self.cvar_shift == 0.0 && self.mean_shift == 0.0
    }

    /// Amount by which the total discounted risk-channel cost grows.
    pub fn cvar_offset(&self) -> f64 {
        self.cvar_shift * self.objective_factor
    }

    /// Amount by which the total discounted mean-channel cost grows.
    pub fn mean_offset(&self) -> f64 {
        self.mean_shift * self.objective_factor
    }
}

/// Discounted count of shifted cost terms over a horizon.
pub fn objective_factor(discount: f64, horizon: Horizon) -> f64 {
    match horizon {
        Horizon::Finite(n) if discount == 1.0 => (n + 1) as f64,
        Horizon::Finite(n) => (1.0 - discount.powi(n as i32 + 1)) / (1.0 - discount),
        Horizon::Infinite => 1.0 / (1.0 - discount),
    }
}

/// Adds `K = max(0, -min cost)` to every cost of each channel. Terminal costs
/// take part only for finite horizons.
pub fn shift_costs(spec: &MdpSpec, horizon: Horizon) -> (MdpSpec, CostShift) {
    let with_terminal = matches!(horizon, Horizon::Finite(_));
    let mut min_c = spec.all_edges().map(|e| e.cvar_cost).fold(f64::INFINITY, f64::min);
    let mut min_c1 = spec.all_edges().map(|e| e.mean_cost).fold(f64::INFINITY, f64::min);
    if with_terminal {
        min_c = spec.terminal_cvar.iter().copied().fold(min_c, f64::min);
        min_c1 = spec.terminal_mean.iter().copied().fold(min_c1, f64::min);
    }
    let k = if min_c.is_finite() { (-min_c).max(0.0) } else { 0.0 };
    let k1 = if min_c1.is_finite() { (-min_c1).max(0.0) } else { 0.0 };
    let shift = CostShift { cvar_shift: k, mean_shift: k1, objective_factor: objective_factor(spec.discount, horizon) };
    if k == 0.0 && k1 == 0.0 {
        return (spec.clone(), shift);
    }
    let mut out = spec.clone();
    for e in out.transitions.iter_mut().flatten().flatten() {
        e.cvar_cost += k;
        e.mean_cost += k1;
    }
    if with_terminal {
        out.terminal_cvar.iter_mut().for_each(|v| *v += k);
        out.terminal_mean.iter_mut().for_each(|v| *v += k1);
    }
    (out, shift)
}

// ---------------------------------------------------------------------------
// JSON documents
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDocument {
    pub states: Vec<String>,
    pub actions: IndexMap<String, Vec<String>>,
    pub discount: f64,
    pub transitions: Vec<TransitionEntry>,
    #[serde(default)]
    pub terminal_cvar_cost: IndexMap<String, f64>,
    #[serde(default)]
    pub terminal_mean_cost: IndexMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionEntry {
    pub from: String,
    pub action: String,
    pub to: String,
    pub prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cvar_cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcomes: Option<Vec<OutcomeEntry>>,
    #[serde(default)]
    pub mean_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeEntry {
    pub cost: f64,
    pub prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// A parsed document: plain, or carrying per-edge outcome lists.
#[derive(Debug, Clone, PartialEq)]
pub enum ParsedSpec {
    Plain(MdpSpec),
    RandomCost(RandomCostSpec),
}

/// Parses an MDP document. Any transition with an `outcomes` list makes the
/// whole document a [`RandomCostSpec`]; plain edges in such a document become
/// single-outcome edges.
pub fn parse_spec(text: &str) -> Result<ParsedSpec, ModelError> {
    let doc: MdpDocument = serde_json::from_str(text).map_err(|e| ModelError::Schema(e.to_string()))?;
    from_document(&doc)
}

pub fn from_document(doc: &MdpDocument) -> Result<ParsedSpec, ModelError> {
    check_states(&doc.states)?;
    let index = |name: &str, context: &str| {
        doc.states.iter().position(|s| s == name).ok_or_else(|| ModelError::UnknownState {
            name: name.to_string(),
            context: context.to_string(),
        })
    };
    for key in doc.actions.keys() {
        index(key, "actions")?;
    }
    let actions: Vec<Vec<String>> = doc
        .states
        .iter()
        .map(|s| doc.actions.get(s).cloned().ok_or_else(|| ModelError::NoActions(s.clone())))
        .collect::<Result<_, _>>()?;
    let m = doc.states.len();
    let mut terminal_cvar = vec![0.0; m];
    let mut terminal_mean = vec![0.0; m];
    for (name, v) in &doc.terminal_cvar_cost {
        terminal_cvar[index(name, "terminal_cvar_cost")?] = *v;
    }
    for (name, v) in &doc.terminal_mean_cost {
        terminal_mean[index(name, "terminal_mean_cost")?] = *v;
    }

    let random = doc.transitions.iter().any(|t| t.outcomes.is_some());
    let mut labels: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<Vec<RandomTransition>>> =
        actions.iter().map(|acts| vec![Vec::new(); acts.len()]).collect();
    for t in &doc.transitions {
        let x = index(&t.from, "transition `from`")?;
        let to = index(&t.to, &format!("transition ({}, {})", t.from, t.action))?;
        let a = actions[x].iter().position(|s| s == &t.action).ok_or_else(|| ModelError::UnknownAction {
            state: t.from.clone(),
            action: t.action.clone(),
        })?;
        let shape_err =
            || ModelError::CostShape { state: t.from.clone(), action: t.action.clone(), to: t.to.clone() };
        let outcomes = match (&t.cvar_cost, &t.outcomes) {
            (Some(c), None) => {
                if labels.is_empty() {
                    labels.push("0".to_string());
                }
                vec![Outcome { label: 0, cost: *c, prob: 1.0 }]
            }
            (None, Some(list)) => list
                .iter()
                .enumerate()
                .map(|(i, o)| {
                    let name = o.label.clone().unwrap_or_else(|| i.to_string());
                    let label = match labels.iter().position(|l| *l == name) {
                        Some(p) => p,
                        None => {
                            labels.push(name);
                            labels.len() - 1
                        }
                    };
                    Outcome { label, cost: o.cost, prob: o.prob }
                })
                .collect(),
            _ => return Err(shape_err()),
        };
        rows[x][a].push(RandomTransition { to, prob: t.prob, mean_cost: t.mean_cost, outcomes });
    }

    if random {
        return RandomCostSpec::from_parts(
            doc.states.clone(),
            actions,
            doc.discount,
            rows,
            terminal_cvar,
            terminal_mean,
            labels,
        )
        .map(ParsedSpec::RandomCost);
    }
    let plain: Vec<Vec<EdgeList>> = rows
        .into_iter()
        .map(|per_action| {
            per_action
                .into_iter()
                .map(|edges| {
                    edges
                        .into_iter()
                        .map(|e| Transition {
                            to: e.to,
                            prob: e.prob,
                            cvar_cost: e.outcomes[0].cost,
                            mean_cost: e.mean_cost,
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    MdpSpec::from_parts(doc.states.clone(), actions, doc.discount, plain, terminal_cvar, terminal_mean)
        .map(ParsedSpec::Plain)
}
