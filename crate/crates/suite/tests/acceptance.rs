//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Runs without the libtest harness so the
//! report is always visible.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cvar_core::model::{augment_random_costs, MdpDocument, MdpSpec, TransitionEntry};
use cvar_core::nature::TransferInstance;
use cvar_core::oracle::{
    enumerate_distribution, exhaustive_policy_search, objective_of_distribution, random_cost_spec,
    random_spec, random_transfer_instance, GridOracle, RandomSpecConfig,
};
use cvar_core::policy::{induced_policy, DerivativeSide};
use cvar_core::pwl::PwlConcave;
use cvar_core::solver::{
    cvar_value, solve_finite, solve_infinite, transfer_instance, ObjectiveMode, SolverOptions, TableHorizon,
    ValueTables,
};
use cvar_core::verify::{
    check_boundaries, check_derivative_identities, check_nature_consistency, check_shapes,
    check_transfer_identities, random_levels, rel_error, CheckOutcome, DEFAULT_TOLERANCE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALPHAS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 1.0];
const PURE: ObjectiveMode = ObjectiveMode::PureCvar;

struct Instance {
    spec: MdpSpec,
    horizon: usize,
    tables: ValueTables,
}

/// The 50 seeded verification instances shared by several criteria.
fn verification_instances() -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..50)
        .map(|_| {
            let spec = random_spec(&mut rng, &RandomSpecConfig::default());
            let horizon = rng.gen_range(1..=3);
            let tables = solve_finite(&spec, horizon, &SolverOptions::with_mean_weight(0.0)).expect("solve");
            Instance { spec, horizon, tables }
        })
        .collect()
}

struct Report {
    lines: Vec<(String, bool)>,
}

impl Report {
    fn add(&mut self, label: &str, outcome: &CheckOutcome, notes: &[String]) {
        let mut line = format!("[{label}] {outcome}");
        for n in notes {
            line.push_str("\n    note: ");
            line.push_str(n);
        }
        println!("{line}");
        self.lines.push((label.to_string(), outcome.passed()));
    }

    /// A criterion made of parts with different tolerances.
    fn add_parts(&mut self, label: &str, title: &str, parts: &[CheckOutcome]) {
        let ok = parts.iter().all(CheckOutcome::passed);
        println!("[{label}] {} {title}", if ok { "PASS" } else { "FAIL" });
        for p in parts {
            println!("    - {}", p.to_string().replace('\n', "\n      "));
        }
        self.lines.push((label.to_string(), ok));
    }
}

fn criterion_1(instances: &[Instance], report: &mut Report) {
    let mut out = CheckOutcome::new("solver value equals exhaustive policy search", DEFAULT_TOLERANCE);
    let start = Instant::now();
    let (mut below, mut above) = (0, 0);
    let mut gap_instances = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        for x0 in 0..inst.spec.num_states() {
            for &alpha in &ALPHAS {
                let (_, best) = exhaustive_policy_search(&inst.spec, x0, alpha, inst.horizon, PURE).expect("search");
                let value = cvar_value(&inst.tables, x0, alpha, PURE).expect("value");
                let err = rel_error(value, best);
                if err > DEFAULT_TOLERANCE {
                    if value < best {
                        below += 1;
                    } else {
                        above += 1;
                    }
                    if gap_instances.last() != Some(&i) {
                        gap_instances.push(i);
                    }
                }
                out.record(err, || format!("instance {i}, N = {}, x0 = {x0}, alpha = {alpha}: solver {value}, exhaustive {best}", inst.horizon));
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(60) {
        out.fail(format!("runtime {elapsed:?} exceeds 60 s"));
    }
    let notes = vec![
        format!("runtime {elapsed:.2?}"),
        format!(
            "mismatches: {below} with solver below the deterministic optimum, {above} above, on instances {gap_instances:?}"
        ),
    ];
    report.add("1", &out, &notes);
}

/// Bellman consistency of the stored tables against the grid oracle: each
/// `Q_n(x,·,a)` is compared at sample levels with an independent brute-force
/// best response over `V_{n−1}`. Returns the largest excess of the grid over
/// `Q` (should be 0) and of `Q` over the grid (grid error, `O(h)`).
fn bellman_residual(inst: &Instance, ys: &[f64]) -> (f64, f64) {
    let (mut above, mut below): (f64, f64) = (0.0, 0.0);
    let model = inst.tables.model();
    for n in 1..=inst.horizon {
        let prev = &inst.tables.stage(n - 1).unwrap().v;
        for x in 0..model.num_states() {
            for a in 0..model.actions(x).len() {
                let ti = transfer_instance(model, prev, x, a).unwrap();
                let q = inst.tables.q(n, x, a).unwrap();
                let grid = GridOracle::new(&ti, 1e-3).unwrap();
                for &y in ys {
                    let g = grid.best_response(y).unwrap();
                    above = above.max(g - q.value(y));
                    below = below.max(q.value(y) - g);
                }
            }
        }
    }
    (above, below)
}

fn criterion_2(instances: &[Instance], report: &mut Report) {
    let mut out = CheckOutcome::new("runner-induced policy attains the solver value (both sides)", DEFAULT_TOLERANCE);
    let (mut vs_exhaustive, mut total) = (0, 0);
    for (i, inst) in instances.iter().enumerate() {
        for x0 in 0..inst.spec.num_states() {
            for &alpha in &ALPHAS {
                let target = cvar_value(&inst.tables, x0, alpha, PURE).unwrap();
                let (_, best) = exhaustive_policy_search(&inst.spec, x0, alpha, inst.horizon, PURE).unwrap();
                for side in [DerivativeSide::Right, DerivativeSide::Left] {
                    let policy = induced_policy(&inst.tables, x0, alpha, side).expect("runner");
                    let dist = enumerate_distribution(&inst.spec, &policy, x0, inst.horizon).unwrap();
                    let got = objective_of_distribution(&dist, alpha, PURE).unwrap();
                    total += 1;
                    if rel_error(got, best) <= DEFAULT_TOLERANCE {
                        vs_exhaustive += 1;
                    }
                    out.record(rel_error(got, target), || {
                        format!("instance {i}, x0 = {x0}, alpha = {alpha}, {side:?}: runner {got}, solver {target}, exhaustive {best}")
                    });
                }
            }
        }
    }
    let notes = vec![format!("runner policy equals the exhaustive optimum in {vs_exhaustive}/{total} runs")];
    report.add("2", &out, &notes);
}

fn criterion_3(report: &mut Report, functions: &mut Vec<PwlConcave>) {
    let mut out = CheckOutcome::new("transfer derivative identities and ordering", DEFAULT_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let inst = random_transfer_instance(&mut rng);
        let f = inst.build_f();
        let mut ys = f.knots();
        ys.extend((0..100).map(|_| rng.gen_range(0.0..1.0)));
        check_transfer_identities(&inst, &ys, &mut out);
        functions.push(f);
    }
    report.add("3", &out, &[]);
}

fn criterion_4(report: &mut Report, functions: &mut Vec<PwlConcave>) {
    let mut lower = CheckOutcome::new("build_f dominates the grid best response", 1e-12);
    let mut close = CheckOutcome::new("build_f within 1e-2 of the grid best response", 1e-2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in 0..100 {
        let inst: TransferInstance = random_transfer_instance(&mut rng);
        let f = inst.build_f();
        let grid = GridOracle::new(&inst, 1e-3).unwrap();
        let mut ys = f.knots();
        ys.extend(random_levels(&mut rng, 20));
        for y in ys {
            let exact = f.eval(y).unwrap();
            let g = grid.best_response(y).unwrap();
            lower.record((g - exact).max(0.0), || format!("instance {k}, y = {y}: grid {g} above F {exact}"));
            close.record(exact - g, || format!("instance {k}, y = {y}: F {exact}, grid {g}"));
        }
        functions.push(f);
    }
    report.add_parts("4", "build_f against the 1e-3 grid best response", &[lower, close]);
}

/// Deterministic transitions: every edge has probability one.
fn deterministic_instances() -> Vec<(MdpSpec, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = RandomSpecConfig { prob_bits: 0, ..RandomSpecConfig::default() };
    (0..20).map(|_| (random_spec(&mut rng, &cfg), rng.gen_range(1..=3))).collect()
}

fn criterion_5(instances: &[Instance], report: &mut Report, extra: &mut Vec<ValueTables>) {
    let mut neutral = CheckOutcome::new("alpha = 1 equals risk-neutral DP; slope at 0 equals worst path", DEFAULT_TOLERANCE);
    for inst in instances {
        check_boundaries(&inst.tables, &mut neutral);
        // The worst-path comparison is stated for zero-terminal specs.
        let zero = inst.spec.with_zero_terminal();
        let t = solve_finite(&zero, inst.horizon, &SolverOptions::with_mean_weight(0.0)).unwrap();
        check_boundaries(&t, &mut neutral);
        extra.push(t);
    }
    let mut spread = CheckOutcome::new("deterministic specs: slope spread of V_N", 1e-12);
    let mut flat = CheckOutcome::new("deterministic specs: CVaR independent of alpha", DEFAULT_TOLERANCE);
    for (spec, n) in deterministic_instances() {
        let t = solve_finite(&spec, n, &SolverOptions::with_mean_weight(0.0)).unwrap();
        for x in 0..spec.num_states() {
            let v = t.v(n, x).unwrap();
            let slopes: Vec<f64> = v.segments().iter().map(|s| s.slope).collect();
            let hi = slopes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = slopes.iter().cloned().fold(f64::INFINITY, f64::min);
            spread.record(hi - lo, || format!("state {x}: slopes {slopes:?}"));
            let base = cvar_value(&t, x, 1.0, PURE).unwrap();
            for &alpha in &ALPHAS {
                let v = cvar_value(&t, x, alpha, PURE).unwrap();
                flat.record(rel_error(v, base), || format!("state {x}: CVaR at {alpha} is {v}, mean {base}"));
            }
        }
        extra.push(t);
    }
    report.add_parts("5", "boundary consistency", &[neutral, spread, flat]);
}

fn criterion_6(report: &mut Report, extra: &mut Vec<ValueTables>) {
    let mut out = CheckOutcome::new("contraction of value iteration and final error bound", 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = RandomSpecConfig { discounts: vec![0.5], ..RandomSpecConfig::default() };
    // Exact tables grow geometrically with the iteration count, and the
    // reference runs twice as many iterations; 1e-2 keeps it under the cap.
    let epsilon = 1e-2;
    let mut iterations = Vec::new();
    let mut segments = 0;
    for k in 0..10 {
        let spec = random_spec(&mut rng, &cfg);
        let t = solve_infinite(&spec, epsilon, &SolverOptions::default()).expect("infinite solve");
        let TableHorizon::Infinite(info) = t.horizon().clone() else { unreachable!() };
        let beta = spec.discount();
        for w in info.differences.windows(2) {
            out.record((w[1] - (beta * w[0] + 1e-12)).max(0.0), || {
                format!("spec {k}: difference {} after {}", w[1], w[0])
            });
        }
        if info.error_bound > epsilon {
            out.fail(format!("spec {k}: reported bound {} exceeds epsilon", info.error_bound));
        }
        // The reference iterate V_{2N} is within β^N·ε of the fixed point.
        let n = info.iterations;
        let reference = solve_finite(&spec.with_zero_terminal(), 2 * n, &SolverOptions::default()).unwrap();
        let allowed = info.error_bound * (1.0 + beta.powi(n as i32));
        for x in 0..spec.num_states() {
            let d = t.v(t.top_stage(), x).unwrap().sup_distance(reference.v(2 * n, x).unwrap()).unwrap();
            out.record((d - allowed).max(0.0), || format!("spec {k}, state {x}: distance {d} to V_2N, bound {allowed}"));
        }
        iterations.push(n);
        segments = segments.max(t.total_segments());
        extra.push(t);
        extra.push(reference);
    }
    let notes = vec![format!("iterations per spec {iterations:?}; largest table {segments} segments")];
    report.add("6", &out, &notes);
}

fn criterion_7(instances: &[Instance], report: &mut Report) {
    let mut out = CheckOutcome::new("runner levels agree with nature's optimal allocation", DEFAULT_TOLERANCE);
    for inst in instances {
        for x0 in 0..inst.spec.num_states() {
            for &alpha in &ALPHAS {
                for side in [DerivativeSide::Right, DerivativeSide::Left] {
                    check_nature_consistency(&inst.tables, x0, alpha, side, &mut out);
                }
            }
        }
    }
    report.add("7", &out, &[]);
}

/// Writes out the product state space from the document form of the
/// random-cost spec, without going through the library's augmentation.
fn pre_expand(doc: &MdpDocument, labels: &[String]) -> MdpSpec {
    let name = |x: &str, w: &str| format!("{x}#{w}");
    let mut states = Vec::new();
    let mut actions = indexmap::IndexMap::new();
    let mut terminal_cvar_cost = indexmap::IndexMap::new();
    let mut terminal_mean_cost = indexmap::IndexMap::new();
    for x in &doc.states {
        for w in labels {
            states.push(name(x, w));
            actions.insert(name(x, w), doc.actions[x].clone());
            terminal_cvar_cost.insert(name(x, w), doc.terminal_cvar_cost.get(x).copied().unwrap_or(0.0));
            terminal_mean_cost.insert(name(x, w), doc.terminal_mean_cost.get(x).copied().unwrap_or(0.0));
        }
    }
    let mut transitions = Vec::new();
    for e in &doc.transitions {
        let outcomes = e.outcomes.clone().expect("random-cost document");
        for w in labels {
            for o in &outcomes {
                transitions.push(TransitionEntry {
                    from: name(&e.from, w),
                    action: e.action.clone(),
                    to: name(&e.to, o.label.as_deref().expect("labelled outcome")),
                    prob: e.prob * o.prob,
                    cvar_cost: Some(o.cost),
                    outcomes: None,
                    mean_cost: e.mean_cost,
                });
            }
        }
    }
    let expanded = MdpDocument {
        states,
        actions,
        discount: doc.discount,
        transitions,
        terminal_cvar_cost,
        terminal_mean_cost,
    };
    MdpSpec::from_document(&expanded).expect("expanded spec is valid")
}

fn criterion_8(report: &mut Report, extra: &mut Vec<ValueTables>) {
    let mut out = CheckOutcome::new("random-cost augmentation", DEFAULT_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in 0..10 {
        let rspec = random_cost_spec(&mut rng, &RandomSpecConfig::default());
        let n = rng.gen_range(1..=3);
        let aug = augment_random_costs(&rspec);
        let t = solve_finite(&aug.spec, n, &SolverOptions::with_mean_weight(0.0)).unwrap();
        let manual = pre_expand(&rspec.to_document(), rspec.labels());
        let tm = solve_finite(&manual, n, &SolverOptions::with_mean_weight(0.0)).unwrap();
        let by_state: BTreeMap<String, usize> =
            manual.states().iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        for (i, &(x, w)) in aug.origin.iter().enumerate() {
            let head = aug.initial[x];
            let d = t.v(n, i).unwrap().sup_distance(t.v(n, head).unwrap()).unwrap();
            out.record(d, || format!("spec {k}: state {} differs from {}", aug.spec.state_name(i), aug.spec.state_name(head)));
            let twin = by_state[&format!("{}#{}", rspec.states()[x], rspec.labels()[w])];
            for &alpha in &ALPHAS {
                let a = cvar_value(&t, i, alpha, PURE).unwrap();
                let b = cvar_value(&tm, twin, alpha, PURE).unwrap();
                out.record(rel_error(a, b), || format!("spec {k}, {} at {alpha}: {a} vs pre-expanded {b}", aug.spec.state_name(i)));
            }
        }
        extra.push(t);
        extra.push(tm);
    }
    report.add("8", &out, &[]);
}

fn criterion_9(all: &[&ValueTables], functions: &[PwlConcave], report: &mut Report) {
    let mut out = CheckOutcome::new("shape invariants and value/action derivative identities", DEFAULT_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in all {
        check_shapes(t, &mut out);
        check_derivative_identities(t, &random_levels(&mut rng, 10), &mut out);
    }
    for f in functions {
        match f.check_invariants() {
            Ok(()) => out.record(0.0, String::new),
            Err(e) => out.fail(e.to_string()),
        }
    }
    report.add("9", &out, &[format!("{} tables, {} transfer functions", all.len(), functions.len())]);
}

fn main() -> ExitCode {
    let mut report = Report { lines: Vec::new() };
    let instances = verification_instances();
    let mut extra = Vec::new();
    let mut functions = Vec::new();

    criterion_1(&instances, &mut report);
    let (mut above, mut below) = (0.0f64, 0.0f64);
    for inst in &instances {
        let (a, b) = bellman_residual(inst, &[0.0, 0.1, 0.25, 0.5, 0.75, 1.0]);
        above = above.max(a);
        below = below.max(b);
    }
    println!(
        "    note: tables vs independent 1e-3 grid Bellman backup on all 50 instances: grid above Q by at most {above:.3e}, below by at most {below:.3e}"
    );
    criterion_2(&instances, &mut report);
    criterion_3(&mut report, &mut functions);
    criterion_4(&mut report, &mut functions);
    criterion_5(&instances, &mut report, &mut extra);
    criterion_6(&mut report, &mut extra);
    criterion_7(&instances, &mut report);
    criterion_8(&mut report, &mut extra);
    let all: Vec<&ValueTables> = instances.iter().map(|i| &i.tables).chain(extra.iter()).collect();
    criterion_9(&all, &functions, &mut report);

    let failed: Vec<&str> = report.lines.iter().filter(|(_, ok)| !ok).map(|(l, _)| l.as_str()).collect();
    println!("acceptance: {} of {} criteria passed", report.lines.len() - failed.len(), report.lines.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
