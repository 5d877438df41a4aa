//! The logarithmic potential `Φ(v) = Σ b_i sign(v_i) ln|v_i|`, its restriction
//! `C_w(λ) = Φ(γ(w, λ))` to a fiber, and the monotone solve `C_w(λ) = C`.
//!
//! Divergent values are reported as sentinels and never enter arithmetic.

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::fiber::{Fiber, FiberTrace, Segment};
use crate::model::{AllocationModel, KineticState, ModelError, Task};
use crate::strata::OrthantSignature;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PotentialError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("state lies on the coordinate hyperplanes {indices:?}")]
    BoundaryState { indices: Vec<usize> },
    #[error("fiber parameter lies on the crossings of {indices:?}")]
    CrossingState { indices: Vec<usize> },
    #[error("level {level} is not reached before the parameter cap {cap:e}")]
    NoBracket { level: f64, cap: f64 },
    #[error("segment {segment} has zero width: the fiber skips layer {segment}")]
    NonGenericSegment { segment: usize },
    #[error("segment {segment} does not exist; a fiber has segments 0..={last}")]
    SegmentOutOfRange { segment: usize, last: usize },
    #[error(
        "level {level} on segment {segment} lies closer to a crossing than floating point resolves"
    )]
    Unresolvable { segment: usize, level: f64 },
    #[error("level must be finite, got {0}")]
    NonFiniteLevel(f64),
    #[error("indices {i} and {j} do not form a hinge of {orthant}")]
    NotAHinge {
        i: usize,
        j: usize,
        orthant: OrthantSignature,
    },
    #[error("solver option {name} must be positive and finite, got {value}")]
    BadOption { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Divergence {
    NegInfinity,
    PosInfinity,
    /// Terms diverging to both signs at once.
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PotentialValue {
    Finite(f64),
    Divergent {
        limit: Divergence,
        indices: Vec<usize>,
    },
}

impl PotentialValue {
    pub fn finite(&self) -> Option<f64> {
        match self {
            PotentialValue::Finite(c) => Some(*c),
            PotentialValue::Divergent { .. } => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, PotentialValue::Finite(_))
    }

    pub fn boundary_indices(&self) -> &[usize] {
        match self {
            PotentialValue::Finite(_) => &[],
            PotentialValue::Divergent { indices, .. } => indices,
        }
    }
}

/// Sums `scale · Σ coeff_i ln|x_i|` where `coeff_i = b_i sign(x_i)`. For the
/// indices flagged in `halted`, `toward_minus(i)` decides the sign of the
/// divergence.
fn log_sum(
    b: &DVector<f64>,
    x: &DVector<f64>,
    scale: f64,
    halted: &[usize],
    toward_minus: impl Fn(usize) -> bool,
) -> PotentialValue {
    if halted.is_empty() {
        let sum: f64 = b
            .iter()
            .zip(x.iter())
            .map(|(bi, xi)| bi * xi.signum() * xi.abs().ln())
            .sum();
        return PotentialValue::Finite(scale * sum);
    }
    let minus = halted.iter().filter(|&&i| toward_minus(i)).count();
    let limit = match minus {
        0 => Divergence::PosInfinity,
        k if k == halted.len() => Divergence::NegInfinity,
        _ => Divergence::Indeterminate,
    };
    PotentialValue::Divergent {
        limit,
        indices: halted.to_vec(),
    }
}

/// `Φ(v)`. Coordinates with `|v_i| ≤ zero` diverge; an exact zero takes the
/// limit from its entry side, i.e. `−∞`.
pub fn potential(model: &AllocationModel, v: &KineticState) -> Result<PotentialValue, ModelError> {
    model.check_state(v)?;
    let b = model.null_vector();
    let halted = v.halted(model.tolerances().zero);
    Ok(log_sum(b, v.as_vector(), 1.0, &halted, |i| {
        v[i] == 0.0 || b[i] * v[i] > 0.0
    }))
}

/// `∇Φ(v) = D(v)⁻¹ b`.
pub fn potential_gradient(
    model: &AllocationModel,
    v: &KineticState,
) -> Result<DVector<f64>, PotentialError> {
    model.check_state(v)?;
    let halted = v.halted(model.tolerances().zero);
    if !halted.is_empty() {
        return Err(PotentialError::BoundaryState { indices: halted });
    }
    Ok(model.null_vector().component_div(&v.map(f64::abs)))
}

/// Unit normal of the leaf through a regular `v`.
pub fn leaf_normal(
    model: &AllocationModel,
    v: &KineticState,
) -> Result<DVector<f64>, PotentialError> {
    let g = potential_gradient(model, v)?;
    Ok(&g / g.norm())
}

impl Fiber<'_> {
    /// `C_w(λ) = ½ Σ b_i sign(x_i) ln|x_i|` evaluated on `x = z + λ b`.
    pub fn potential(&self, lambda: f64) -> PotentialValue {
        let b = self.model().null_vector();
        let x = self.transformed(lambda);
        let halted = self.on_crossing(lambda);
        log_sum(b, &x, 0.5, &halted, |i| x[i] == 0.0 || b[i] * x[i] > 0.0)
    }

    /// `C_w` at `λ = λ*_k + μ`, evaluated relative to crossing `k`. Only exact
    /// zeros count as halted; `entry(i)` picks the side their limit comes from.
    fn potential_near_with(
        &self,
        k: usize,
        mu: f64,
        entry: impl Fn(usize) -> bool,
    ) -> (PotentialValue, DVector<f64>) {
        let b = self.model().null_vector();
        let x = self.transformed_near(k, mu);
        let halted: Vec<usize> = (0..x.len()).filter(|&i| x[i] == 0.0).collect();
        (log_sum(b, &x, 0.5, &halted, entry), x)
    }

    /// `C_w(λ*_k + μ)` computed from crossing `k`. Unlike [`Fiber::potential`]
    /// there is no tolerance band: any nonzero `μ` gives a finite value.
    pub fn potential_near(&self, k: usize, mu: f64) -> PotentialValue {
        let b = self.model().null_vector();
        let x = self.transformed_near(k, mu);
        let halted: Vec<usize> = (0..x.len()).filter(|&i| x[i] == 0.0).collect();
        log_sum(b, &x, 0.5, &halted, |i| b[i] * x[i] >= 0.0)
    }

    /// `dC_w/dλ = Σ b_i² / (2 |x_i|)`.
    pub fn potential_slope(&self, lambda: f64) -> Result<f64, PotentialError> {
        let halted = self.on_crossing(lambda);
        if !halted.is_empty() {
            return Err(PotentialError::CrossingState { indices: halted });
        }
        let b = self.model().null_vector();
        let x = self.transformed(lambda);
        Ok(b.iter()
            .zip(x.iter())
            .map(|(bi, xi)| bi * bi / (2.0 * xi.abs()))
            .sum())
    }
}

pub fn potential_along_fiber(
    model: &AllocationModel,
    w: &Task,
    lambda: f64,
) -> Result<PotentialValue, ModelError> {
    Ok(Fiber::new(model, w.clone())?.potential(lambda))
}

pub fn potential_slope(
    model: &AllocationModel,
    w: &Task,
    lambda: f64,
) -> Result<f64, PotentialError> {
    Fiber::new(model, w.clone())?.potential_slope(lambda)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Largest `|λ|` explored on the unbounded end segments.
    pub lambda_cap: f64,
    /// Bisection stops once the bracket width is this fraction of its magnitude.
    pub bisection_rel: f64,
    /// Newton steps applied after bisection.
    pub polish_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            lambda_cap: 1e12,
            bisection_rel: 1e-12,
            polish_steps: 3,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), PotentialError> {
        for (name, value) in [
            ("lambda_cap", self.lambda_cap),
            ("bisection_rel", self.bisection_rel),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(PotentialError::BadOption { name, value });
            }
        }
        Ok(())
    }
}

/// A state on a leaf, tagged with where it was found.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionPoint {
    pub v: KineticState,
    /// Fiber parameter, rounded; `v` is computed from the nearest crossing and
    /// is the authoritative location.
    pub lambda: f64,
    /// Requested level.
    pub level: f64,
    /// `C_w(λ)` at the returned parameter.
    pub potential: f64,
    pub orthant: OrthantSignature,
    pub layer: usize,
}

#[derive(Clone, Copy)]
enum Side {
    Below,
    Above,
}

/// The segment of `trace` that lies in layer `segment`, i.e. the interval
/// between the `segment`-th and `segment+1`-th sorted crossings.
pub fn locate_segment(trace: &FiberTrace, segment: usize) -> Result<&Segment, PotentialError> {
    let last = trace.crossings.len();
    if segment > last {
        return Err(PotentialError::SegmentOutOfRange { segment, last });
    }
    trace
        .segment_for_layer(segment)
        .ok_or(PotentialError::NonGenericSegment { segment })
}

/// Index of the crossing nearest to `lambda`.
fn nearest_crossing(fiber: &Fiber<'_>, lambda: f64) -> usize {
    let star = fiber.crossing_lambdas();
    (0..star.len())
        .min_by(|&i, &j| {
            (star[i] - lambda)
                .abs()
                .total_cmp(&(star[j] - lambda).abs())
        })
        .expect("fibers have n >= 2 crossings")
}

/// Solves `C_w(λ) = level` on one segment of an already traced fiber.
///
/// The search variable is the offset `μ` from the segment end nearest the
/// root, so roots lying extremely close to a crossing are still resolved.
pub fn solve_on_segment(
    fiber: &Fiber<'_>,
    seg: &Segment,
    level: f64,
    opts: &SolverOptions,
) -> Result<SectionPoint, PotentialError> {
    if !level.is_finite() {
        return Err(PotentialError::NonFiniteLevel(level));
    }
    opts.validate()?;
    let orthant = seg.orthant;
    let unresolvable = PotentialError::Unresolvable {
        segment: seg.layer,
        level,
    };
    let no_bracket = PotentialError::NoBracket {
        level,
        cap: opts.lambda_cap,
    };
    let star = fiber.crossing_lambdas();
    // Sentinels inside the segment resolve from the orthant's side.
    let side = |k: usize, mu: f64| -> Result<Side, PotentialError> {
        match fiber.potential_near_with(k, mu, |i| orthant.is_entry(i)).0 {
            PotentialValue::Finite(c) if c < level => Ok(Side::Below),
            PotentialValue::Finite(_) => Ok(Side::Above),
            PotentialValue::Divergent {
                limit: Divergence::NegInfinity,
                ..
            } => Ok(Side::Below),
            PotentialValue::Divergent {
                limit: Divergence::PosInfinity,
                ..
            } => Ok(Side::Above),
            PotentialValue::Divergent { .. } => Err(unresolvable.clone()),
        }
    };

    // Bracket [lo, hi] in μ around anchor crossing `k`; μ = 0 is the crossing itself.
    let (k, mut lo, mut hi) = match (seg.lower, seg.upper) {
        (Some(a), Some(b)) => {
            let (ka, kb) = (nearest_crossing(fiber, a), nearest_crossing(fiber, b));
            let half = 0.5 * (b - a);
            match side(ka, half)? {
                Side::Above => (ka, 0.0, half),
                Side::Below => (kb, (star[ka] + half) - star[kb], 0.0),
            }
        }
        (Some(anchor), None) => {
            let k = nearest_crossing(fiber, anchor);
            let (mut lo, mut step) = (0.0, 1.0);
            loop {
                if (star[k] + step).abs() > opts.lambda_cap {
                    return Err(no_bracket);
                }
                match side(k, step)? {
                    Side::Below => lo = step,
                    Side::Above => break (k, lo, step),
                }
                step *= 2.0;
            }
        }
        (None, Some(anchor)) => {
            let k = nearest_crossing(fiber, anchor);
            let (mut hi, mut step) = (0.0, 1.0);
            loop {
                if (star[k] - step).abs() > opts.lambda_cap {
                    return Err(no_bracket);
                }
                match side(k, -step)? {
                    Side::Above => hi = -step,
                    Side::Below => break (k, -step, hi),
                }
                step *= 2.0;
            }
        }
        (None, None) => unreachable!("every fiber has at least one crossing"),
    };

    // Relative stopping: near μ = 0 the bracket keeps shrinking with the root.
    while hi - lo > opts.bisection_rel * lo.abs().max(hi.abs()) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match side(k, mid)? {
            Side::Below => lo = mid,
            Side::Above => hi = mid,
        }
    }

    // A bracket end still sitting on the crossing means the level lies closer
    // to it than the smallest representable offset.
    if lo == 0.0 || hi == 0.0 {
        return Err(unresolvable);
    }
    let mut mu = 0.5 * (lo + hi);
    for _ in 0..opts.polish_steps {
        let (value, x) = fiber.potential_near_with(k, mu, |i| orthant.is_entry(i));
        let Some(c) = value.finite() else { break };
        let b = fiber.model().null_vector();
        let slope: f64 = b
            .iter()
            .zip(x.iter())
            .map(|(bi, xi)| bi * bi / (2.0 * xi.abs()))
            .sum();
        let next = mu - (c - level) / slope;
        if !(next >= lo && next <= hi) || next == mu {
            break;
        }
        mu = next;
    }

    let v = fiber.state_near(k, mu);
    let achieved = fiber.potential_near(k, mu).finite();
    let inside = fiber.model().sign_pattern().orthant_of(&v) == Some(orthant);
    match achieved {
        Some(potential) if inside => Ok(SectionPoint {
            v,
            lambda: star[k] + mu,
            level,
            potential,
            orthant,
            layer: orthant.layer(),
        }),
        _ => Err(unresolvable),
    }
}

/// The unique point of the fiber of `w` on segment `segment` with `C_w(λ) = level`.
pub fn section_intersection(
    model: &AllocationModel,
    w: &Task,
    segment: usize,
    level: f64,
    opts: &SolverOptions,
) -> Result<SectionPoint, PotentialError> {
    let fiber = Fiber::new(model, w.clone())?;
    let trace = fiber.trace();
    let seg = locate_segment(&trace, segment)?;
    solve_on_segment(&fiber, seg, level, opts)
}

/// A point of the leaf `Φ = level` inside `orthant`, at distance `d` from the
/// hinge where `v_i = v_j = 0`, with every other coordinate equal to
/// `|base_k|` carrying the orthant's sign.
pub fn petal_point(
    model: &AllocationModel,
    orthant: &OrthantSignature,
    (i, j): (usize, usize),
    base: &KineticState,
    level: f64,
    d: f64,
) -> Result<KineticState, PotentialError> {
    model.check_state(base)?;
    if !level.is_finite() {
        return Err(PotentialError::NonFiniteLevel(level));
    }
    if !(d.is_finite() && d > 0.0) {
        return Err(PotentialError::BadOption {
            name: "distance",
            value: d,
        });
    }
    if i == j || orthant.is_entry(i) == orthant.is_entry(j) {
        return Err(PotentialError::NotAHinge {
            i,
            j,
            orthant: *orthant,
        });
    }
    let b = model.null_vector();
    let n = b.len();
    let mut v = DVector::from_fn(n, |k, _| base[k].abs() * f64::from(orthant.sign(k)));
    let rest: Vec<usize> = (0..n).filter(|&k| k != i && k != j).collect();
    let halted: Vec<usize> = rest.iter().copied().filter(|&k| v[k] == 0.0).collect();
    if !halted.is_empty() {
        return Err(PotentialError::BoundaryState { indices: halted });
    }
    let offset: f64 = rest
        .iter()
        .map(|&k| b[k] * v[k].signum() * v[k].abs().ln())
        .sum();
    let (ai, aj) = (
        b[i] * f64::from(orthant.sign(i)),
        b[j] * f64::from(orthant.sign(j)),
    );

    // t = ln(|v_i| / |v_j|); the hinge part of Φ is monotone in t
    let radii = |t: f64| {
        let ri = d / (1.0 + (-2.0 * t).exp()).sqrt();
        let rj = d / (1.0 + (2.0 * t).exp()).sqrt();
        (ri, rj)
    };
    let residual = |t: f64| {
        let (ri, rj) = radii(t);
        ai * ri.ln() + aj * rj.ln() + offset - level
    };
    let increasing = ai > 0.0;
    let below = |t: f64| (residual(t) < 0.0) == increasing;
    let (mut lo, mut hi) = (-1.0, 1.0);
    while below(hi) {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(PotentialError::Unresolvable {
                segment: orthant.layer(),
                level,
            });
        }
    }
    while !below(lo) {
        lo *= 2.0;
        if lo < -1e300 {
            return Err(PotentialError::Unresolvable {
                segment: orthant.layer(),
                level,
            });
        }
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if below(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (ri, rj) = radii(0.5 * (lo + hi));
    v[i] = ri * f64::from(orthant.sign(i));
    v[j] = rj * f64::from(orthant.sign(j));
    let state = KineticState::from_raw(v);
    if !state.is_regular(0.0) {
        return Err(PotentialError::Unresolvable {
            segment: orthant.layer(),
            level,
        });
    }
    Ok(state)
}
