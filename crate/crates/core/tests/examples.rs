//! Small models with values worked out by hand, and runner behaviour on
//! levels it can only bracket.

use cvar_core::model::{Horizon, MdpSpec};
use cvar_core::oracle::{random_spec, RandomSpecConfig};
use cvar_core::policy::{run_trajectory, DerivativeSide, RiskEstimate, TransitionSource};
use cvar_core::solver::{
    cvar_value, optimal_action_set, solve_finite, solve_objective, worst_path_value, ObjectiveMode, SolverOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TWO_STAGE: &str = r#"{
  "states": ["s", "m", "g", "b"],
  "actions": {"s": ["go"], "m": ["gamble", "safe"], "g": ["stay"], "b": ["stay"]},
  "discount": 1.0,
  "transitions": [
    {"from": "s", "action": "go", "to": "m", "prob": 1.0, "cvar_cost": 1.0, "mean_cost": 2.0},
    {"from": "m", "action": "gamble", "to": "g", "prob": 0.5, "cvar_cost": 0.0},
    {"from": "m", "action": "gamble", "to": "b", "prob": 0.5, "cvar_cost": 10.0},
    {"from": "m", "action": "safe", "to": "g", "prob": 1.0, "cvar_cost": 8.0, "mean_cost": 1.0},
    {"from": "g", "action": "stay", "to": "g", "prob": 1.0, "cvar_cost": 0.0},
    {"from": "b", "action": "stay", "to": "b", "prob": 1.0, "cvar_cost": 0.0}
  ]
}"#;

fn pure() -> SolverOptions {
    SolverOptions::with_mean_weight(0.0)
}

#[test]
fn two_stage_values() {
    let spec = MdpSpec::from_json(TWO_STAGE).unwrap();
    let s = spec.state_index("s").unwrap();
    let t = solve_finite(&spec, 2, &pure()).unwrap();
    // 1 + min(CVaR of the gamble = min(10, 5/α), 8).
    for (alpha, want) in [(1.0, 6.0), (0.75, 1.0 + 5.0 / 0.75), (0.625, 9.0), (0.5, 9.0), (0.1, 9.0)] {
        let got = cvar_value(&t, s, alpha, ObjectiveMode::PureCvar).unwrap();
        assert!((got - want).abs() < 1e-12, "alpha {alpha}: {got} vs {want}");
    }
    assert_eq!(worst_path_value(&spec.without_mean(), Horizon::Finite(2)).unwrap()[s], 9.0);
}

#[test]
fn two_stage_with_mean_channel() {
    let spec = MdpSpec::from_json(TWO_STAGE).unwrap();
    let s = spec.state_index("s").unwrap();
    for alpha in [0.25, 0.5, 1.0] {
        // E[mean] + α·CVaR: the gamble gives 2 + α·min(10, 5/α) = 2 + min(10α, 5),
        // the safe move 3 + 8α; plus α for the first step.
        let t = solve_objective(&spec, Horizon::Finite(2), 0.0, ObjectiveMode::MeanPlusAlphaCvar, alpha, &pure()).unwrap();
        let want = alpha + f64::min(2.0 + f64::min(10.0 * alpha, 5.0), 3.0 + 8.0 * alpha);
        let got = cvar_value(&t, s, alpha, ObjectiveMode::MeanPlusAlphaCvar).unwrap();
        assert!((got - want).abs() < 1e-12, "alpha {alpha}: {got} vs {want}");

        // E[mean] + CVaR.
        let t = solve_objective(&spec, Horizon::Finite(2), 0.0, ObjectiveMode::MeanPlusCvar, alpha, &pure()).unwrap();
        let want = 1.0 + f64::min(2.0 + f64::min(10.0, 5.0 / alpha), 3.0 + 8.0);
        let got = cvar_value(&t, s, alpha, ObjectiveMode::MeanPlusCvar).unwrap();
        assert!((got - want).abs() < 1e-12, "alpha {alpha}: {got} vs {want}");
    }
}

#[test]
fn two_stage_runner_commits_at_the_first_step() {
    let spec = MdpSpec::from_json(TWO_STAGE).unwrap();
    let t = solve_finite(&spec, 2, &pure()).unwrap();
    let idx = |n: &str| spec.state_index(n).unwrap();
    let trace =
        run_trajectory(&t, idx("s"), 1.0, DerivativeSide::Right, &TransitionSource::Fixed(vec![idx("s"), idx("m"), idx("b")]))
            .unwrap();
    assert_eq!(trace.rows[1].action, spec.action_index(idx("m"), "gamble"));
    assert_eq!(trace.total_cost, 11.0);
    let trace =
        run_trajectory(&t, idx("s"), 0.5, DerivativeSide::Right, &TransitionSource::Fixed(vec![idx("s"), idx("m"), idx("g")]))
            .unwrap();
    assert_eq!(trace.rows[1].action, spec.action_index(idx("m"), "safe"));
    assert_eq!(trace.total_cost, 9.0);
}

/// Where the runner can only bracket the level, `V` is linear on the bracket
/// and every `Q ≥ V` touching it inside must coincide with it there, so the
/// optimal action set cannot depend on which point of the bracket is used.
#[test]
fn bracketed_levels_give_stable_actions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut brackets = 0;
    for _ in 0..40 {
        let spec = random_spec(&mut rng, &RandomSpecConfig::default());
        let n = rng.gen_range(2..=4);
        let tables = solve_finite(&spec, n, &pure()).unwrap();
        for ep in 0..10 {
            let x0 = rng.gen_range(0..spec.num_states());
            let alpha = [0.1, 0.3, 0.5, 0.9][ep % 4];
            let source = TransitionSource::Sampled { seed: rng.gen(), steps: None };
            let trace = run_trajectory(&tables, x0, alpha, DerivativeSide::Right, &source).unwrap();
            for row in &trace.rows {
                let RiskEstimate::Interval { lo, hi, chosen } = row.risk else { continue };
                let stage = n - row.t;
                if stage == 0 || hi - lo < 1e-6 {
                    continue;
                }
                brackets += 1;
                let reference = optimal_action_set(&tables, stage, row.state, chosen).unwrap();
                for k in 1..=10 {
                    let y = lo + (hi - lo) * k as f64 / 11.0;
                    assert_eq!(optimal_action_set(&tables, stage, row.state, y).unwrap(), reference, "y {y} in [{lo}, {hi}]");
                }
            }
        }
    }
    assert!(brackets > 20, "only {brackets} bracketed levels");
}
