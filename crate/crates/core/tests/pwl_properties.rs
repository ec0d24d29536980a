//! Piecewise-linear operations against pointwise definitions.

use cvar_core::pwl::{PwlConcave, Segment, SuperdiffResult};
use proptest::prelude::*;

const TOL: f64 = 1e-9;

/// Nondecreasing concave function on `[0, domain]` from unsorted slopes and
/// positive weights.
fn concave(domain: f64) -> impl Strategy<Value = PwlConcave> {
    (-5.0..5.0f64, prop::collection::vec((0.0..10.0f64, 0.05..1.0f64), 1..6)).prop_map(move |(start, mut raw)| {
        raw.sort_by(|a, b| b.0.total_cmp(&a.0));
        let total: f64 = raw.iter().map(|s| s.1).sum();
        let segments = raw.iter().map(|&(q, w)| Segment::new(q, domain * w / total)).collect();
        PwlConcave::new(start, segments, domain).unwrap()
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * a.abs().max(b.abs()).max(1.0)
}

/// Best split of `y` between `f` and `g`: a maximizer of the concave sum sits
/// at a knot of one of them or at the end of the feasible range.
fn best_split(f: &PwlConcave, g: &PwlConcave, y: f64) -> f64 {
    let lo = (y - g.domain()).max(0.0);
    let hi = y.min(f.domain());
    let mut candidates = vec![lo, hi];
    candidates.extend(f.knots());
    candidates.extend(g.knots().iter().map(|k| y - k));
    candidates
        .into_iter()
        .filter(|z| (lo..=hi).contains(z))
        .map(|z| f.value(z) + g.value((y - z).clamp(0.0, g.domain())))
        .fold(f64::NEG_INFINITY, f64::max)
}

proptest! {
    #[test]
    fn envelope_is_pointwise_min(fs in prop::collection::vec(concave(1.0), 1..5), y in 0.0..=1.0f64) {
        let env = PwlConcave::min_envelope(&fs).unwrap();
        let direct = fs.iter().map(|f| f.value(y)).fold(f64::INFINITY, f64::min);
        prop_assert!(close(env.value(y), direct), "{} vs {direct}", env.value(y));
        env.check_invariants().unwrap();
    }

    #[test]
    fn merge_is_sup_convolution(f in concave(0.4), g in concave(0.6), t in 0.0..=1.0f64) {
        let h = PwlConcave::merge(&[f.clone(), g.clone()]).unwrap();
        prop_assert!(close(h.domain(), 1.0));
        let y = t * h.domain();
        prop_assert!(close(h.value(y), best_split(&f, &g, y)), "{} vs {}", h.value(y), best_split(&f, &g, y));
    }

    #[test]
    fn scaling_and_shifting(f in concave(1.0), p in 0.01..=1.0f64, c1 in -3.0..3.0f64, c in 0.0..3.0f64,
                            beta in 0.1..=1.0f64, t in 0.0..=1.0f64) {
        let s = f.scale_argument(p).unwrap();
        prop_assert!(close(s.value(t * p), p * f.value(t)));
        let h = f.transform_successor(c1, c, beta).unwrap();
        prop_assert!(close(h.value(t), c1 + t * c + beta * f.value(t)));
    }

    #[test]
    fn derivatives_bracket_chords(f in concave(1.0), y in 0.01..0.99f64) {
        let (r, l) = (f.right_deriv(y).unwrap(), f.left_deriv(y).unwrap());
        prop_assert!(r <= l + TOL);
        let h = 1e-6;
        let right = (f.value(y + h) - f.value(y)) / h;
        let left = (f.value(y) - f.value(y - h)) / h;
        prop_assert!(right <= l + 1e-6 && left >= r - 1e-6);
    }

    #[test]
    fn inverse_superdifferential_contains_u(f in concave(1.0), u in 0.0..12.0f64) {
        let check = |y: f64| {
            let r = f.right_deriv(y).unwrap();
            let l = if y > 0.0 { f.left_deriv(y).unwrap() } else { f64::INFINITY };
            // At y = 1 every u below the last slope qualifies.
            let r = if y >= f.domain() { f64::NEG_INFINITY } else { r };
            r - TOL <= u && u <= l + TOL
        };
        match f.invert_superdifferential(u) {
            SuperdiffResult::UniquePoint(y) => prop_assert!(check(y), "u {u} at {y}"),
            SuperdiffResult::LinearInterval { lo, hi, slope } => {
                prop_assert!(close(slope, u));
                prop_assert!(check(lo) && check(hi) && check(0.5 * (lo + hi)));
            }
        }
    }

    #[test]
    fn breakpoints_roundtrip(f in concave(1.0)) {
        let g = PwlConcave::from_breakpoints(&f.breakpoints()).unwrap();
        for y in [0.0, 0.13, 0.5, 0.77, 1.0] {
            prop_assert!(close(f.value(y), g.value(y)));
        }
    }
}
