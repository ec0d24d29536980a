//! Nondecreasing concave piecewise-linear functions on `[0, L]`.
//!
//! A function is stored as its value at zero plus a list of `(slope, length)`
//! segments with strictly decreasing nonnegative slopes and lengths summing to
//! `L`. Outside the domain the left derivative at `0` is `+∞` and the right
//! derivative at `L` is `0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance under which two slopes are treated as equal.
pub const SLOPE_TOLERANCE: f64 = 1e-9;
/// Relative distance (against `max(1, L)`) under which a query snaps to a knot.
pub const KNOT_TOLERANCE: f64 = 1e-12;
/// Segments shorter than this fraction of the domain are folded into a neighbour.
pub const MIN_SEGMENT_FRACTION: f64 = 1e-15;
/// Relative tolerance on `Σ lengths = L`.
pub const LENGTH_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PwlError {
    #[error("domain length {0} must be finite and positive")]
    Domain(f64),
    #[error("function has no segments")]
    Empty,
    #[error("segment {index} has invalid slope {slope}")]
    Slope { index: usize, slope: f64 },
    #[error("segment {index} has invalid length {length}")]
    Length { index: usize, length: f64 },
    #[error("slopes not strictly decreasing at segment {index}: {prev} then {next}")]
    NotConcave { index: usize, prev: f64, next: f64 },
    #[error("segment lengths sum to {sum}, expected {domain}")]
    LengthSum { sum: f64, domain: f64 },
    #[error("non-finite value at zero: {0}")]
    Start(f64),
    #[error("query {y} outside domain [0, {domain}]")]
    OutOfDomain { y: f64, domain: f64 },
    #[error("domains differ: {0} vs {1}")]
    DomainMismatch(f64, f64),
    #[error("invalid scaling factor {0}")]
    Scale(f64),
    #[error("invalid breakpoint list: {0}")]
    Breakpoints(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub slope: f64,
    pub length: f64,
}

impl Segment {
    pub fn new(slope: f64, length: f64) -> Self {
        Self { slope, length }
    }
}

/// One row of the knot table: position, value there and right derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakpoint {
    pub y: f64,
    pub value: f64,
    pub right_slope: f64,
}

/// Preimage of a supergradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SuperdiffResult {
    /// Exactly one point has `u` in its superdifferential.
    UniquePoint(f64),
    /// `u` matches the slope of the segment `[lo, hi]`; every point of it qualifies.
    LinearInterval { lo: f64, hi: f64, slope: f64 },
}

pub fn slopes_coincide(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= SLOPE_TOLERANCE * a.abs().max(b.abs()).max(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PwlConcave {
    start: f64,
    segments: Vec<Segment>,
    domain: f64,
    /// Knot positions and values, derived from the fields above.
    knots: Vec<f64>,
    values: Vec<f64>,
}

enum Position {
    /// Exactly at knot `i` (`0..=n`).
    Knot(usize),
    /// Strictly inside segment `i`, at the given (clamped) coordinate.
    Inside(usize, f64),
}

impl PwlConcave {
    /// Builds a function from raw segments. Adjacent slopes within
    /// [`SLOPE_TOLERANCE`] are coalesced and negligible segments absorbed.
    pub fn new(start: f64, segments: Vec<Segment>, domain: f64) -> Result<Self, PwlError> {
        if !(domain.is_finite() && domain > 0.0) {
            return Err(PwlError::Domain(domain));
        }
        if !start.is_finite() {
            return Err(PwlError::Start(start));
        }
        if segments.is_empty() {
            return Err(PwlError::Empty);
        }
        for (index, s) in segments.iter().enumerate() {
            if !(s.slope.is_finite() && s.slope >= 0.0) {
                return Err(PwlError::Slope { index, slope: s.slope });
            }
            if !(s.length.is_finite() && s.length >= 0.0) {
                return Err(PwlError::Length { index, length: s.length });
            }
        }
        let sum: f64 = segments.iter().map(|s| s.length).sum();
        if (sum - domain).abs() > LENGTH_SUM_TOLERANCE * domain.max(1.0) {
            return Err(PwlError::LengthSum { sum, domain });
        }

        let min_len = MIN_SEGMENT_FRACTION * domain;
        let mut kept: Vec<Segment> = Vec::with_capacity(segments.len());
        let mut carry = 0.0;
        for s in segments {
            if s.length < min_len {
                carry += s.length;
                continue;
            }
            match kept.last_mut() {
                Some(last) if slopes_coincide(last.slope, s.slope) => last.length += s.length + carry,
                _ => kept.push(Segment::new(s.slope, s.length + carry)),
            }
            carry = 0.0;
        }
        match kept.last_mut() {
            Some(last) => last.length += carry,
            None => return Err(PwlError::Empty),
        }
        for i in 1..kept.len() {
            if kept[i].slope >= kept[i - 1].slope {
                return Err(PwlError::NotConcave { index: i, prev: kept[i - 1].slope, next: kept[i].slope });
            }
        }
        Ok(Self::assemble(start, kept, domain))
    }

    fn assemble(start: f64, segments: Vec<Segment>, domain: f64) -> Self {
        let mut knots = Vec::with_capacity(segments.len() + 1);
        let mut values = Vec::with_capacity(segments.len() + 1);
        let (mut y, mut v) = (0.0, start);
        knots.push(0.0);
        values.push(start);
        for (i, s) in segments.iter().enumerate() {
            let next = if i + 1 == segments.len() { domain } else { y + s.length };
            v += s.slope * (next - y);
            y = next;
            knots.push(y);
            values.push(v);
        }
        Self { start, segments, domain, knots, values }
    }

    /// Like [`PwlConcave::new`] but first repairs slope inversions by pooling
    /// adjacent violators into their length-weighted mean slope. Used where
    /// floating-point crossings can produce slopes that are concave only up
    /// to rounding.
    pub fn new_repaired(start: f64, segments: Vec<Segment>, domain: f64) -> Result<Self, PwlError> {
        let mut pooled: Vec<Segment> = Vec::with_capacity(segments.len());
        for s in segments {
            if s.length <= 0.0 {
                continue;
            }
            pooled.push(s);
            while pooled.len() >= 2 {
                let b = pooled[pooled.len() - 1];
                let a = pooled[pooled.len() - 2];
                if b.slope < a.slope && !slopes_coincide(a.slope, b.slope) {
                    break;
                }
                let len = a.length + b.length;
                let slope = (a.slope * a.length + b.slope * b.length) / len;
                pooled.pop();
                *pooled.last_mut().unwrap() = Segment::new(slope, len);
            }
        }
        Self::new(start, pooled, domain)
    }

    pub fn linear(start: f64, slope: f64, domain: f64) -> Result<Self, PwlError> {
        Self::new(start, vec![Segment::new(slope, domain)], domain)
    }

    pub fn constant(value: f64, domain: f64) -> Result<Self, PwlError> {
        Self::linear(value, 0.0, domain)
    }

    /// Rebuilds a function from its knot table.
    pub fn from_breakpoints(rows: &[Breakpoint]) -> Result<Self, PwlError> {
        if rows.len() < 2 {
            return Err(PwlError::Breakpoints("need at least two rows".into()));
        }
        if rows[0].y != 0.0 {
            return Err(PwlError::Breakpoints(format!("first knot at {} instead of 0", rows[0].y)));
        }
        let mut segments = Vec::with_capacity(rows.len() - 1);
        for w in rows.windows(2) {
            if w[1].y <= w[0].y {
                return Err(PwlError::Breakpoints("knots not increasing".into()));
            }
            segments.push(Segment::new(w[0].right_slope, w[1].y - w[0].y));
        }
        let f = Self::new(rows[0].value, segments, rows[rows.len() - 1].y)?;
        for r in rows {
            let v = f.eval(r.y)?;
            if (v - r.value).abs() > 1e-9 * v.abs().max(1.0) {
                return Err(PwlError::Breakpoints(format!(
                    "value {} at y = {} inconsistent with slopes (expected {v})",
                    r.value, r.y
                )));
            }
        }
        Ok(f)
    }

    pub fn domain(&self) -> f64 {
        self.domain
    }

    pub fn value_at_zero(&self) -> f64 {
        self.start
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    /// Positions `0 = y₀ < … < y_n = L`.
    pub fn knots(&self) -> Vec<f64> {
        self.knots.clone()
    }

    /// Values at [`PwlConcave::knots`].
    pub fn knot_values(&self) -> &[f64] {
        &self.values
    }

    pub fn breakpoints(&self) -> Vec<Breakpoint> {
        self.knots
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (&y, &value))| Breakpoint {
                y,
                value,
                right_slope: self.segments.get(i).map_or(0.0, |s| s.slope),
            })
            .collect()
    }

    fn snap_tolerance(&self) -> f64 {
        KNOT_TOLERANCE * self.domain.max(1.0)
    }

    fn check_domain(&self, y: f64) -> Result<f64, PwlError> {
        let tol = self.snap_tolerance();
        if y.is_nan() || y < -tol || y > self.domain + tol {
            return Err(PwlError::OutOfDomain { y, domain: self.domain });
        }
        Ok(y.clamp(0.0, self.domain))
    }

    fn locate(&self, y: f64, knots: &[f64]) -> Position {
        let tol = self.snap_tolerance();
        // first knot strictly beyond y
        let idx = knots.partition_point(|&k| k <= y);
        if idx > 0 && y - knots[idx - 1] <= tol {
            return Position::Knot(idx - 1);
        }
        if idx < knots.len() && knots[idx] - y <= tol {
            return Position::Knot(idx);
        }
        Position::Inside(idx - 1, y)
    }

    pub fn eval(&self, y: f64) -> Result<f64, PwlError> {
        let y = self.check_domain(y)?;
        Ok(match self.locate(y, &self.knots) {
            Position::Knot(i) => self.values[i],
            Position::Inside(i, y) => self.values[i] + self.segments[i].slope * (y - self.knots[i]),
        })
    }

    /// Evaluation for callers that already guarantee `y ∈ [0, L]` up to rounding.
    pub fn value(&self, y: f64) -> f64 {
        self.eval(y.clamp(0.0, self.domain)).expect("clamped query")
    }

    pub fn right_deriv(&self, y: f64) -> Result<f64, PwlError> {
        let y = self.check_domain(y)?;
        let knots = &self.knots;
        Ok(match self.locate(y, knots) {
            Position::Knot(i) => self.segments.get(i).map_or(0.0, |s| s.slope),
            Position::Inside(i, _) => self.segments[i].slope,
        })
    }

    pub fn left_deriv(&self, y: f64) -> Result<f64, PwlError> {
        let y = self.check_domain(y)?;
        let knots = &self.knots;
        Ok(match self.locate(y, knots) {
            Position::Knot(0) => f64::INFINITY,
            Position::Knot(i) => self.segments[i - 1].slope,
            Position::Inside(i, _) => self.segments[i].slope,
        })
    }

    /// Points `y` whose superdifferential `[f'₊(y), f'₋(y)]` contains `u`.
    ///
    /// Negative `u` is treated as `0`, so the answer always exists.
    pub fn invert_superdifferential(&self, u: f64) -> SuperdiffResult {
        let u = u.max(0.0);
        if u.is_infinite() {
            return SuperdiffResult::UniquePoint(0.0);
        }
        let knots = &self.knots;
        for (i, s) in self.segments.iter().enumerate() {
            if slopes_coincide(u, s.slope) {
                return SuperdiffResult::LinearInterval { lo: knots[i], hi: knots[i + 1], slope: s.slope };
            }
            if u > s.slope {
                // u lies strictly between the left and right slopes at knot i.
                return SuperdiffResult::UniquePoint(knots[i]);
            }
        }
        SuperdiffResult::UniquePoint(self.domain)
    }

    /// `y ↦ c₁ + y·c + β·f(y)`: slopes become `c + β·q`.
    pub fn transform_successor(&self, c1: f64, c: f64, beta: f64) -> Result<Self, PwlError> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(PwlError::Scale(beta));
        }
        Self::new(
            c1 + beta * self.start,
            self.segments.iter().map(|s| Segment::new(c + beta * s.slope, s.length)).collect(),
            self.domain,
        )
    }

    /// `z ↦ p·f(z/p)` on `[0, p·L]`: slopes unchanged, lengths scaled by `p`.
    pub fn scale_argument(&self, p: f64) -> Result<Self, PwlError> {
        if !(p.is_finite() && p > 0.0) {
            return Err(PwlError::Scale(p));
        }
        Ok(Self::assemble(
            p * self.start,
            self.segments.iter().map(|s| Segment::new(s.slope, p * s.length)).collect(),
            p * self.domain,
        ))
    }

    /// Sup-convolution `F(y) = max { Σ fᵢ(zᵢ) : Σ zᵢ = y, 0 ≤ zᵢ ≤ Lᵢ }` of
    /// concave functions: all segments sorted by decreasing slope.
    pub fn merge(parts: &[PwlConcave]) -> Result<Self, PwlError> {
        if parts.is_empty() {
            return Err(PwlError::Empty);
        }
        let start: f64 = parts.iter().map(|f| f.start).sum();
        let domain: f64 = parts.iter().map(|f| f.domain).sum();
        let mut all: Vec<Segment> = parts.iter().flat_map(|f| f.segments.iter().copied()).collect();
        all.sort_by(|a, b| b.slope.total_cmp(&a.slope));
        let mut merged: Vec<Segment> = Vec::with_capacity(all.len());
        for s in all {
            match merged.last_mut() {
                Some(last) if slopes_coincide(last.slope, s.slope) => last.length += s.length,
                _ => merged.push(s),
            }
        }
        // The summed domain and the summed lengths agree to rounding; make it exact.
        let sum: f64 = merged.iter().map(|s| s.length).sum();
        merged.last_mut().unwrap().length += domain - sum;
        Self::new(start, merged, domain)
    }

    /// Pointwise minimum of functions sharing a domain.
    ///
    /// Sweeps the union of all knots; on each elementary interval every input
    /// is affine, so the lower envelope switches lines only at crossings where
    /// a smaller slope takes over.
    pub fn min_envelope(parts: &[PwlConcave]) -> Result<Self, PwlError> {
        let first = parts.first().ok_or(PwlError::Empty)?;
        let domain = first.domain;
        for f in &parts[1..] {
            if (f.domain - domain).abs() > LENGTH_SUM_TOLERANCE * domain.max(1.0) {
                return Err(PwlError::DomainMismatch(domain, f.domain));
            }
        }
        if parts.len() == 1 {
            return Ok(first.clone());
        }
        let tol = first.snap_tolerance();
        let mut grid: Vec<f64> = parts.iter().flat_map(|f| f.knots.iter().copied()).collect();
        grid.sort_by(f64::total_cmp);
        grid.dedup_by(|b, a| *b - *a <= tol);
        *grid.last_mut().unwrap() = domain;

        let tables: Vec<(&[f64], &[f64])> = parts.iter().map(|f| (f.knots.as_slice(), f.values.as_slice())).collect();
        let mut cursor = vec![0usize; parts.len()];
        let mut pieces: Vec<Segment> = Vec::new();
        let start = parts.iter().map(|f| f.start).fold(f64::INFINITY, f64::min);

        for w in grid.windows(2) {
            let (a, b) = (w[0], w[1]);
            // Each input's line on [a, b]: value at a and slope.
            let lines: Vec<(f64, f64)> = parts
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let (k, v) = &tables[i];
                    while cursor[i] + 1 < f.segments.len() && k[cursor[i] + 1] <= a + tol {
                        cursor[i] += 1;
                    }
                    let s = cursor[i];
                    (v[s] + f.segments[s].slope * (a - k[s]), f.segments[s].slope)
                })
                .collect();
            let at = |j: usize, y: f64| lines[j].0 + lines[j].1 * (y - a);

            let vmin = lines.iter().map(|l| l.0).fold(f64::INFINITY, f64::min);
            let vtol = 1e-12 * vmin.abs().max(1.0);
            let mut cur = (0..lines.len())
                .filter(|&j| lines[j].0 <= vmin + vtol)
                .min_by(|&i, &j| lines[i].1.total_cmp(&lines[j].1).then(i.cmp(&j)))
                .unwrap();
            let mut pos = a;
            loop {
                let mut next: Option<(f64, usize)> = None;
                for j in 0..lines.len() {
                    if lines[j].1 >= lines[cur].1 {
                        continue;
                    }
                    let gap = (at(j, pos) - at(cur, pos)).max(0.0);
                    let t = pos + gap / (lines[cur].1 - lines[j].1);
                    let better = match next {
                        None => true,
                        Some((tb, jb)) => {
                            t < tb || (t == tb && (lines[j].1, j) < (lines[jb].1, jb))
                        }
                    };
                    if better {
                        next = Some((t, j));
                    }
                }
                match next {
                    Some((t, j)) if t < b - tol => {
                        if t > pos {
                            pieces.push(Segment::new(lines[cur].1, t - pos));
                        }
                        cur = j;
                        pos = t;
                    }
                    _ => {
                        pieces.push(Segment::new(lines[cur].1, b - pos));
                        break;
                    }
                }
            }
        }
        Self::new_repaired(start, pieces, domain)
    }

    /// `max |f − g|` over the union of knots (both are affine in between).
    pub fn sup_distance(&self, other: &Self) -> Result<f64, PwlError> {
        if (self.domain - other.domain).abs() > LENGTH_SUM_TOLERANCE * self.domain.max(1.0) {
            return Err(PwlError::DomainMismatch(self.domain, other.domain));
        }
        let mut d: f64 = 0.0;
        for y in self.knots().into_iter().chain(other.knots()) {
            d = d.max((self.value(y) - other.value(y)).abs());
        }
        Ok(d)
    }

    /// Merges adjacent segments whose slopes differ by at most `eps`,
    /// replacing them by their length-weighted mean slope. The result stays
    /// concave and is within `eps · L` of the input.
    pub fn simplify(&self, eps: f64) -> Self {
        let mut out: Vec<Segment> = Vec::with_capacity(self.segments.len());
        let mut anchor = f64::NAN;
        for s in &self.segments {
            match out.last_mut() {
                Some(last) if anchor - s.slope <= eps => {
                    let len = last.length + s.length;
                    last.slope = (last.slope * last.length + s.slope * s.length) / len;
                    last.length = len;
                }
                _ => {
                    anchor = s.slope;
                    out.push(*s);
                }
            }
        }
        Self::new(self.start, out, self.domain).expect("simplification keeps a valid function")
    }

    /// Re-checks every structural invariant; used on deserialized data and
    /// by the verification suites.
    pub fn check_invariants(&self) -> Result<(), PwlError> {
        if !(self.domain.is_finite() && self.domain > 0.0) {
            return Err(PwlError::Domain(self.domain));
        }
        if !self.start.is_finite() {
            return Err(PwlError::Start(self.start));
        }
        if self.segments.is_empty() {
            return Err(PwlError::Empty);
        }
        let min_len = MIN_SEGMENT_FRACTION * self.domain;
        for (index, s) in self.segments.iter().enumerate() {
            if !(s.slope.is_finite() && s.slope >= 0.0) {
                return Err(PwlError::Slope { index, slope: s.slope });
            }
            if !(s.length.is_finite() && s.length >= min_len) {
                return Err(PwlError::Length { index, length: s.length });
            }
            if index > 0 && s.slope >= self.segments[index - 1].slope {
                return Err(PwlError::NotConcave { index, prev: self.segments[index - 1].slope, next: s.slope });
            }
        }
        let sum: f64 = self.segments.iter().map(|s| s.length).sum();
        if (sum - self.domain).abs() > LENGTH_SUM_TOLERANCE * self.domain.max(1.0) {
            return Err(PwlError::LengthSum { sum, domain: self.domain });
        }
        Ok(())
    }

    /// Knot table as CSV with header `y,value,right_slope`.
    pub fn to_csv(&self, fmt: impl Fn(f64) -> String) -> String {
        let mut out = String::from("y,value,right_slope\n");
        for b in self.breakpoints() {
            out.push_str(&format!("{},{},{}\n", fmt(b.y), fmt(b.value), fmt(b.right_slope)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(start: f64, segs: &[(f64, f64)]) -> PwlConcave {
        let domain = segs.iter().map(|s| s.1).sum();
        PwlConcave::new(start, segs.iter().map(|&(q, l)| Segment::new(q, l)).collect(), domain).unwrap()
    }

    #[test]
    fn eval_and_derivatives_at_knots() {
        let g = f(1.0, &[(3.0, 0.25), (1.0, 0.5), (0.0, 0.25)]);
        assert_eq!(g.knots(), vec![0.0, 0.25, 0.75, 1.0]);
        assert_eq!(g.eval(0.0).unwrap(), 1.0);
        assert_eq!(g.eval(0.25).unwrap(), 1.75);
        assert_eq!(g.eval(0.5).unwrap(), 2.0);
        assert_eq!(g.eval(1.0).unwrap(), 2.25);
        assert_eq!(g.left_deriv(0.0).unwrap(), f64::INFINITY);
        assert_eq!(g.right_deriv(0.0).unwrap(), 3.0);
        assert_eq!(g.left_deriv(0.25).unwrap(), 3.0);
        assert_eq!(g.right_deriv(0.25).unwrap(), 1.0);
        assert_eq!(g.left_deriv(1.0).unwrap(), 0.0);
        assert_eq!(g.right_deriv(1.0).unwrap(), 0.0);
        // near-knot queries snap
        assert_eq!(g.right_deriv(0.25 - 1e-14).unwrap(), 1.0);
        assert!(g.eval(1.1).is_err());
        assert!(g.eval(-0.1).is_err());
    }

    #[test]
    fn constructor_normalizes() {
        let g = f(0.0, &[(2.0, 0.5), (2.0 + 1e-12, 0.25), (1.0, 1e-17), (1.0, 0.25)]);
        assert_eq!(g.num_segments(), 2);
        assert!((g.domain() - 1.0).abs() < 1e-15);
        assert!(PwlConcave::new(0.0, vec![Segment::new(1.0, 0.5), Segment::new(2.0, 0.5)], 1.0).is_err());
        assert!(PwlConcave::new(0.0, vec![Segment::new(-1.0, 1.0)], 1.0).is_err());
        assert!(PwlConcave::new(0.0, vec![Segment::new(1.0, 0.5)], 1.0).is_err());
    }

    #[test]
    fn superdifferential_inversion() {
        let g = f(0.0, &[(3.0, 0.25), (1.0, 0.5), (0.0, 0.25)]);
        assert_eq!(g.invert_superdifferential(5.0), SuperdiffResult::UniquePoint(0.0));
        assert_eq!(g.invert_superdifferential(f64::INFINITY), SuperdiffResult::UniquePoint(0.0));
        assert_eq!(g.invert_superdifferential(2.0), SuperdiffResult::UniquePoint(0.25));
        assert_eq!(g.invert_superdifferential(0.5), SuperdiffResult::UniquePoint(0.75));
        assert_eq!(
            g.invert_superdifferential(1.0),
            SuperdiffResult::LinearInterval { lo: 0.25, hi: 0.75, slope: 1.0 }
        );
        assert_eq!(
            g.invert_superdifferential(0.0),
            SuperdiffResult::LinearInterval { lo: 0.75, hi: 1.0, slope: 0.0 }
        );
        let h = f(0.0, &[(2.0, 1.0)]);
        assert_eq!(h.invert_superdifferential(0.0), SuperdiffResult::UniquePoint(1.0));
        assert_eq!(h.invert_superdifferential(-3.0), SuperdiffResult::UniquePoint(1.0));
    }

    #[test]
    fn merge_is_sup_convolution() {
        // p = 1/2 each, values y·10 and y·0 on [0,1] scaled to [0,1/2]
        let a = f(0.0, &[(10.0, 1.0)]).scale_argument(0.5).unwrap();
        let b = f(0.0, &[(0.0, 1.0)]).scale_argument(0.5).unwrap();
        let m = PwlConcave::merge(&[a, b]).unwrap();
        assert_eq!(m.segments(), &[Segment::new(10.0, 0.5), Segment::new(0.0, 0.5)]);
        assert_eq!(m.eval(0.5).unwrap(), 5.0);
        assert_eq!(m.eval(1.0).unwrap(), 5.0);
    }

    #[test]
    fn merge_coalesces_equal_slopes() {
        let a = f(1.0, &[(2.0, 0.5), (1.0, 0.5)]).scale_argument(0.5).unwrap();
        let b = f(2.0, &[(2.0, 1.0)]).scale_argument(0.5).unwrap();
        let m = PwlConcave::merge(&[a, b]).unwrap();
        assert_eq!(m.value_at_zero(), 1.5);
        assert_eq!(m.segments(), &[Segment::new(2.0, 0.75), Segment::new(1.0, 0.25)]);
    }

    #[test]
    fn transform_shifts_slopes() {
        let g = f(1.0, &[(3.0, 0.5), (1.0, 0.5)]).transform_successor(2.0, 4.0, 0.5).unwrap();
        assert_eq!(g.value_at_zero(), 2.5);
        assert_eq!(g.segments(), &[Segment::new(5.5, 0.5), Segment::new(4.5, 0.5)]);
    }

    #[test]
    fn min_envelope_of_crossing_lines() {
        let a = f(0.0, &[(2.0, 1.0)]);
        let b = f(0.5, &[(1.0, 1.0)]);
        let m = PwlConcave::min_envelope(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.knots(), vec![0.0, 0.5, 1.0]);
        for i in 0..=20 {
            let y = i as f64 / 20.0;
            let expected = a.value(y).min(b.value(y));
            assert!((m.value(y) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn min_envelope_prefers_smaller_slope_on_ties() {
        let a = f(0.0, &[(2.0, 1.0)]);
        let b = f(0.0, &[(1.0, 1.0)]);
        let m = PwlConcave::min_envelope(&[a, b.clone()]).unwrap();
        assert_eq!(m, b);
    }

    #[test]
    fn min_envelope_rejects_domain_mismatch() {
        let a = f(0.0, &[(2.0, 1.0)]);
        let b = f(0.0, &[(1.0, 2.0)]);
        assert!(matches!(PwlConcave::min_envelope(&[a, b]), Err(PwlError::DomainMismatch(..))));
    }

    #[test]
    fn breakpoint_round_trip() {
        let g = f(0.25, &[(3.0, 0.125), (1.5, 0.625), (0.0, 0.25)]);
        let back = PwlConcave::from_breakpoints(&g.breakpoints()).unwrap();
        assert_eq!(g, back);
        let csv = g.to_csv(|v| v.to_string());
        assert!(csv.starts_with("y,value,right_slope\n0,0.25,3\n"));
    }

    #[test]
    fn simplify_stays_close() {
        let g = f(0.0, &[(3.0, 0.25), (2.9, 0.25), (1.0, 0.5)]);
        let s = g.simplify(0.2);
        assert_eq!(s.num_segments(), 2);
        assert!(g.sup_distance(&s).unwrap() <= 0.2 * g.domain());
    }

    #[test]
    fn repaired_constructor_pools_violators() {
        let g = PwlConcave::new_repaired(
            0.0,
            vec![Segment::new(2.0, 0.5), Segment::new(1.0, 0.25), Segment::new(1.0 + 1e-6, 0.25)],
            1.0,
        )
        .unwrap();
        assert_eq!(g.num_segments(), 2);
        g.check_invariants().unwrap();
    }
}
