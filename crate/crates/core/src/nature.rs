//! Nature's side of one Bellman step: distribute the tail mass `y` over the
//! successors of `(x, a)` so as to maximize the successors' value.
//!
//! Successor `x'` with probability `p` and value function `V(x', ·)` on
//! `[0, 1]` contributes `p·V(x', z/p)` when it receives mass `z ∈ [0, p]`.
//! The best response `F(y)` is the merge of these scaled functions, and an
//! optimal allocation fills mass greedily in order of decreasing slope.

use thiserror::Error;

use crate::model::PROB_TOLERANCE;
use crate::pwl::{slopes_coincide, PwlConcave, PwlError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NatureError {
    #[error("transfer instance has no positive-probability successors")]
    Empty,
    #[error("successor probabilities sum to {0}, expected 1")]
    ProbabilitySum(f64),
    #[error("invalid successor probability {0}")]
    Probability(f64),
    #[error("successor value function must live on [0, 1], got [0, {0}]")]
    Domain(f64),
    #[error("tail mass {0} outside [0, 1]")]
    Level(f64),
    #[error(transparent)]
    Pwl(#[from] PwlError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Successor {
    pub state: usize,
    pub prob: f64,
    /// `V(x', ·)` on `[0, 1]`, already including the edge's costs.
    pub value: PwlConcave,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferInstance {
    successors: Vec<Successor>,
}

/// An optimal split of the tail mass `y` among the successors, aligned with
/// [`TransferInstance::successors`].
#[derive(Debug, Clone, PartialEq)]
pub struct NatureAllocation {
    pub y: f64,
    /// Mass `z = y·b·p` given to each successor.
    pub z: Vec<f64>,
    /// Likelihood ratios `b`, with `Σ b·p = 1`.
    pub b: Vec<f64>,
    /// `Σ p·V(x', z/p)`.
    pub value: f64,
}

impl NatureAllocation {
    /// Successor tail level `y·b = z/p` for successor `i`.
    pub fn level(&self, i: usize, prob: f64) -> f64 {
        (self.z[i] / prob).clamp(0.0, 1.0)
    }
}

impl TransferInstance {
    /// Zero-probability successors are dropped.
    pub fn new(successors: Vec<Successor>) -> Result<Self, NatureError> {
        for s in &successors {
            if !(s.prob.is_finite() && (0.0..=1.0 + PROB_TOLERANCE).contains(&s.prob)) {
                return Err(NatureError::Probability(s.prob));
            }
            if (s.value.domain() - 1.0).abs() > 1e-12 {
                return Err(NatureError::Domain(s.value.domain()));
            }
        }
        let successors: Vec<Successor> = successors.into_iter().filter(|s| s.prob > 0.0).collect();
        if successors.is_empty() {
            return Err(NatureError::Empty);
        }
        let sum: f64 = successors.iter().map(|s| s.prob).sum();
        if (sum - 1.0).abs() > PROB_TOLERANCE {
            return Err(NatureError::ProbabilitySum(sum));
        }
        Ok(Self { successors })
    }

    pub fn successors(&self) -> &[Successor] {
        &self.successors
    }

    fn scaled(&self) -> Vec<PwlConcave> {
        self.successors
            .iter()
            .map(|s| s.value.scale_argument(s.prob).expect("positive probability"))
            .collect()
    }

    /// Best response `F` on `[0, 1]`.
    pub fn build_f(&self) -> PwlConcave {
        let merged = PwlConcave::merge(&self.scaled()).expect("nonempty instance");
        // Probabilities sum to one only up to rounding; pin the domain.
        let mut segments = merged.segments().to_vec();
        let excess = merged.domain() - 1.0;
        segments.last_mut().unwrap().length -= excess;
        PwlConcave::new(merged.value_at_zero(), segments, 1.0).expect("merged function is valid")
    }

    /// A maximizer of `Σ p·V(x', z/p)` subject to `Σ z = y`, `0 ≤ z ≤ p`.
    ///
    /// Mass is poured into segments in order of decreasing slope; segments
    /// with equal slopes are served in successor declaration order.
    pub fn optimal_allocation(&self, y: f64) -> Result<NatureAllocation, NatureError> {
        if !(y.is_finite() && (-1e-12..=1.0 + 1e-12).contains(&y)) {
            return Err(NatureError::Level(y));
        }
        let y = y.clamp(0.0, 1.0);
        let scaled = self.scaled();
        // (slope, length, successor), stable in successor and segment order.
        let mut pieces: Vec<(f64, f64, usize)> = scaled
            .iter()
            .enumerate()
            .flat_map(|(i, f)| f.segments().iter().map(move |s| (s.slope, s.length, i)))
            .collect();
        pieces.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut tiers: Vec<Vec<(f64, f64, usize)>> = Vec::new();
        for piece in pieces {
            match tiers.last_mut() {
                Some(tier) if slopes_coincide(tier[0].0, piece.0) => tier.push(piece),
                _ => tiers.push(vec![piece]),
            }
        }

        let n = self.successors.len();
        let mut z = vec![0.0; n];
        let mut remaining = y;
        'fill: for mut tier in tiers {
            tier.sort_by_key(|p| p.2);
            for (_, len, i) in tier {
                if remaining <= 0.0 {
                    break 'fill;
                }
                let take = len.min(remaining);
                z[i] += take;
                remaining -= take;
            }
        }
        for (i, s) in self.successors.iter().enumerate() {
            z[i] = z[i].min(s.prob);
        }
        if y == 1.0 {
            for (i, s) in self.successors.iter().enumerate() {
                z[i] = s.prob;
            }
        }
        let value = scaled.iter().zip(&z).map(|(f, &zi)| f.value(zi)).sum();
        let b = self
            .successors
            .iter()
            .zip(&z)
            .map(|(s, &zi)| if y > 0.0 { zi / (y * s.prob) } else { 1.0 })
            .collect();
        Ok(NatureAllocation { y, z, b, value })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pwl::Segment;

    fn succ(state: usize, prob: f64, start: f64, segs: &[(f64, f64)]) -> Successor {
        let value = PwlConcave::new(start, segs.iter().map(|&(q, l)| Segment::new(q, l)).collect(), 1.0).unwrap();
        Successor { state, prob, value }
    }

    fn coin() -> TransferInstance {
        // successor values y ↦ 10y (bad outcome) and y ↦ 0 (good outcome)
        TransferInstance::new(vec![succ(0, 0.5, 0.0, &[(0.0, 1.0)]), succ(1, 0.5, 0.0, &[(10.0, 1.0)])]).unwrap()
    }

    #[test]
    fn coin_best_response() {
        let f = coin().build_f();
        assert_eq!(f.segments(), &[Segment::new(10.0, 0.5), Segment::new(0.0, 0.5)]);
        // y·CVaR_y of the coin cost: 10y up to y = 1/2, then 5
        assert_eq!(f.eval(0.25).unwrap(), 2.5);
        assert_eq!(f.eval(0.75).unwrap(), 5.0);
    }

    #[test]
    fn allocation_fills_steepest_first() {
        let inst = coin();
        let al = inst.optimal_allocation(0.25).unwrap();
        assert_eq!(al.z, vec![0.0, 0.25]);
        assert_eq!(al.b, vec![0.0, 2.0]);
        assert_eq!(al.value, 2.5);
        assert_eq!(al.level(1, 0.5), 0.5);
        let full = inst.optimal_allocation(1.0).unwrap();
        assert_eq!(full.z, vec![0.5, 0.5]);
        assert_eq!(full.b, vec![1.0, 1.0]);
        let none = inst.optimal_allocation(0.0).unwrap();
        assert_eq!(none.b, vec![1.0, 1.0]);
    }

    #[test]
    fn ties_follow_declaration_order() {
        let inst =
            TransferInstance::new(vec![succ(0, 0.5, 0.0, &[(4.0, 1.0)]), succ(1, 0.5, 0.0, &[(4.0, 1.0)])]).unwrap();
        let al = inst.optimal_allocation(0.25).unwrap();
        assert_eq!(al.z, vec![0.25, 0.0]);
    }

    #[test]
    fn zero_probability_successors_dropped() {
        let inst = TransferInstance::new(vec![succ(0, 0.0, 0.0, &[(4.0, 1.0)]), succ(1, 1.0, 1.0, &[(2.0, 1.0)])])
            .unwrap();
        assert_eq!(inst.successors().len(), 1);
        assert_eq!(inst.build_f().value_at_zero(), 1.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            TransferInstance::new(vec![succ(0, 0.4, 0.0, &[(1.0, 1.0)])]),
            Err(NatureError::ProbabilitySum(_))
        ));
        assert!(matches!(TransferInstance::new(vec![]), Err(NatureError::Empty)));
        assert!(coin().optimal_allocation(1.5).is_err());
    }
}
