//! Right-inverses of the actuation map built from the leaves of the potential.
//!
//! The extremal inverse picks, for every task, the point of its fiber on a fixed
//! leaf inside `O⁺` or `O⁻`. It is defined on all of task space, including the
//! origin, and never touches a coordinate hyperplane. Transitional layers give
//! inverses that exclude `w = 0` and degrade near reciprocal hinges. The naive
//! inverse `g⁻¹(A⁺ w)` is kept as a baseline.

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::fiber::Fiber;
use crate::model::{untransform, AllocationModel, KineticState, ModelError, Task};
use crate::potential::{
    locate_segment, solve_on_segment, PotentialError, SectionPoint, SolverOptions,
};
use crate::strata::{OrthantSignature, StratumKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InverseError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solver(#[from] PotentialError),
    #[error("layer {layer} is outside 0..={n}")]
    LayerOutOfRange { layer: usize, n: usize },
    #[error("the zero task has no preimage in transitional layer {layer}")]
    OriginExcluded { layer: usize },
    #[error("the fiber touches a hinge on {indices:?} at λ = {lambda} and skips the layer")]
    HingeContact { indices: Vec<usize>, lambda: f64 },
    #[error("time stamps must be finite and strictly increasing (sample {index})")]
    NonIncreasingTime { index: usize },
    #[error("orthant changed from {from} to {to} at sample {index}")]
    SignatureChanged {
        index: usize,
        from: OrthantSignature,
        to: OrthantSignature,
    },
    #[error("hinge margin must be positive and finite, got {0}")]
    BadMargin(f64),
    #[error("sample {index}: {source}")]
    AtSample {
        index: usize,
        #[source]
        source: Box<InverseError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    /// `sign(v) = sign(b)`.
    Positive,
    /// `sign(v) = −sign(b)`.
    Negative,
}

impl Branch {
    pub fn layer(self, n: usize) -> usize {
        match self {
            Branch::Positive => n,
            Branch::Negative => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectionInverseConfig {
    pub layer: usize,
    pub level: f64,
    pub solver: SolverOptions,
    /// A solution with `min|v_i| < hinge_margin · max|v_i|` is reported as near a hinge.
    pub hinge_margin: f64,
}

impl SectionInverseConfig {
    pub fn new(layer: usize, level: f64) -> Self {
        Self {
            layer,
            level,
            solver: SolverOptions::default(),
            hinge_margin: 1e-6,
        }
    }
}

/// The two smallest coordinates of a solution that came close to a boundary stratum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HingeProximity {
    pub indices: [usize; 2],
    /// `Hinge` when one index is an entry and the other an exit index, a fold otherwise.
    pub kind: StratumKind,
    pub min_abs: f64,
    /// `min|v_i| / max|v_i|`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SectionOutcome {
    Point {
        point: SectionPoint,
        hinge: Option<HingeProximity>,
    },
    /// The fiber passes through the common boundary of the layer's orthants
    /// instead of through one of them.
    HingeContact { indices: Vec<usize>, lambda: f64 },
}

fn solve_layer(
    model: &AllocationModel,
    w: &Task,
    layer: usize,
    level: f64,
    opts: &SolverOptions,
) -> Result<Result<SectionPoint, (Vec<usize>, f64)>, InverseError> {
    let fiber = Fiber::new(model, w.clone())?;
    let trace = fiber.trace();
    match locate_segment(&trace, layer) {
        Ok(seg) => Ok(Ok(solve_on_segment(&fiber, seg, level, opts)?)),
        Err(PotentialError::NonGenericSegment { .. }) => {
            let g = trace
                .group_skipping(layer)
                .expect("a missing layer lies inside a merged crossing group");
            Ok(Err((g.indices.clone(), 0.5 * (g.lower + g.upper))))
        }
        Err(e) => Err(e.into()),
    }
}

/// The point of the fiber of `w` on the leaf `Φ = level` inside an extremal orthant.
pub fn extremal_section(
    model: &AllocationModel,
    w: &Task,
    level: f64,
    branch: Branch,
    opts: &SolverOptions,
) -> Result<SectionPoint, InverseError> {
    let layer = branch.layer(model.kinetic_dim());
    match solve_layer(model, w, layer, level, opts)? {
        Ok(point) => Ok(point),
        // extremal segments are never skipped: only bounded segments can vanish
        Err((indices, lambda)) => Err(InverseError::HingeContact { indices, lambda }),
    }
}

pub fn extremal_inverse(
    model: &AllocationModel,
    w: &Task,
    level: f64,
    branch: Branch,
    opts: &SolverOptions,
) -> Result<KineticState, InverseError> {
    Ok(extremal_section(model, w, level, branch, opts)?.v)
}

pub fn section_inverse(
    model: &AllocationModel,
    w: &Task,
    config: &SectionInverseConfig,
) -> Result<SectionOutcome, InverseError> {
    let n = model.kinetic_dim();
    let layer = config.layer;
    if layer > n {
        return Err(InverseError::LayerOutOfRange { layer, n });
    }
    if !(config.hinge_margin.is_finite() && config.hinge_margin > 0.0) {
        return Err(InverseError::BadMargin(config.hinge_margin));
    }
    model.check_task(w)?;
    if layer != 0 && layer != n && w.iter().all(|x| *x == 0.0) {
        return Err(InverseError::OriginExcluded { layer });
    }
    match solve_layer(model, w, layer, config.level, &config.solver)? {
        Err((indices, lambda)) => Ok(SectionOutcome::HingeContact { indices, lambda }),
        Ok(point) => {
            let hinge = hinge_proximity(&point.v, &point.orthant, config.hinge_margin);
            Ok(SectionOutcome::Point { point, hinge })
        }
    }
}

fn hinge_proximity(
    v: &KineticState,
    orthant: &OrthantSignature,
    margin: f64,
) -> Option<HingeProximity> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()));
    let min_abs = v[order[0]].abs();
    let max_abs = v.amax();
    if min_abs >= margin * max_abs {
        return None;
    }
    let mut indices = [order[0], order[1]];
    indices.sort_unstable();
    let (ei, ej) = (orthant.is_entry(indices[0]), orthant.is_entry(indices[1]));
    let kind = match (ei, ej) {
        (true, true) => StratumKind::EntryFold,
        (false, false) => StratumKind::ExitFold,
        _ => StratumKind::Hinge,
    };
    Some(HingeProximity {
        indices,
        kind,
        min_abs,
        ratio: min_abs / max_abs,
    })
}

/// `g⁻¹(A⁺ w)`: the λ = 0 point of every fiber.
pub fn naive_minimum_norm_inverse(
    model: &AllocationModel,
    w: &Task,
) -> Result<KineticState, ModelError> {
    model.check_task(w)?;
    Ok(untransform(&model.particular_solution(w)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Allocator {
    Extremal { branch: Branch, level: f64 },
    Section(SectionInverseConfig),
    Naive,
}

impl Allocator {
    pub fn label(&self) -> String {
        match self {
            Allocator::Extremal { branch, level } => {
                let b = match branch {
                    Branch::Positive => "positive",
                    Branch::Negative => "negative",
                };
                format!("extremal-{b} C={level}")
            }
            Allocator::Section(c) => format!("section layer={} C={}", c.layer, c.level),
            Allocator::Naive => "naive".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftSample {
    pub t: f64,
    pub w: Task,
    pub v: KineticState,
    /// `‖v_k − v_{k−1}‖ / (t_k − t_{k−1})`, zero for the first sample.
    pub speed: f64,
    /// `None` when some coordinate is exactly zero.
    pub orthant: Option<OrthantSignature>,
    pub min_abs: f64,
    pub hinge: Option<HingeProximity>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LiftSummary {
    pub allocator: String,
    pub samples: usize,
    pub max_speed: f64,
    pub signature_changes: usize,
    pub min_abs: f64,
    pub hinge_events: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedTrajectory {
    pub allocator: String,
    pub samples: Vec<LiftSample>,
}

impl LiftedTrajectory {
    pub fn summary(&self) -> LiftSummary {
        LiftSummary {
            allocator: self.allocator.clone(),
            samples: self.samples.len(),
            max_speed: self.samples.iter().fold(0.0, |acc, s| acc.max(s.speed)),
            signature_changes: self
                .samples
                .windows(2)
                .filter(|p| p[0].orthant != p[1].orthant)
                .count(),
            min_abs: self
                .samples
                .iter()
                .fold(f64::INFINITY, |acc, s| acc.min(s.min_abs)),
            hinge_events: self.samples.iter().filter(|s| s.hinge.is_some()).count(),
        }
    }

    pub fn max_speed(&self) -> f64 {
        self.summary().max_speed
    }
}

/// Inverts every sample independently and records finite-difference speeds.
pub fn lift_trajectory(
    model: &AllocationModel,
    samples: &[(f64, Task)],
    allocator: &Allocator,
) -> Result<LiftedTrajectory, InverseError> {
    let at = |index: usize| {
        move |e: InverseError| InverseError::AtSample {
            index,
            source: Box::new(e),
        }
    };
    let pattern = model.sign_pattern();
    let expected = match allocator {
        Allocator::Extremal { branch, .. } => Some(match branch {
            Branch::Positive => pattern.extremal_positive(),
            Branch::Negative => pattern.extremal_negative(),
        }),
        _ => None,
    };

    let mut out: Vec<LiftSample> = Vec::with_capacity(samples.len());
    for (index, (t, w)) in samples.iter().enumerate() {
        let ordered = index == 0 || *t > samples[index - 1].0;
        if !(t.is_finite() && ordered) {
            return Err(InverseError::NonIncreasingTime { index });
        }
        let (v, hinge) = match allocator {
            Allocator::Extremal { branch, level } => (
                extremal_inverse(model, w, *level, *branch, &SolverOptions::default())
                    .map_err(at(index))?,
                None,
            ),
            Allocator::Section(config) => {
                match section_inverse(model, w, config).map_err(at(index))? {
                    SectionOutcome::Point { point, hinge } => (point.v, hinge),
                    SectionOutcome::HingeContact { indices, lambda } => {
                        return Err(at(index)(InverseError::HingeContact { indices, lambda }));
                    }
                }
            }
            Allocator::Naive => (
                naive_minimum_norm_inverse(model, w).map_err(|e| at(index)(e.into()))?,
                None,
            ),
        };
        let orthant = pattern.orthant_of(&v);
        if let (Some(exp), Some(got)) = (expected, orthant) {
            if exp != got {
                return Err(InverseError::SignatureChanged {
                    index,
                    from: exp,
                    to: got,
                });
            }
        }
        let speed = match out.last() {
            Some(prev) => (v.as_vector() - prev.v.as_vector()).norm() / (t - prev.t),
            None => 0.0,
        };
        out.push(LiftSample {
            t: *t,
            w: w.clone(),
            min_abs: v.min_abs(),
            v,
            speed,
            orthant,
            hinge,
        });
    }
    Ok(LiftedTrajectory {
        allocator: allocator.label(),
        samples: out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeRow {
    pub h: f64,
    /// `‖v_e(w₀ + h d) − v_e(w₀)‖ / h` for the extremal inverse.
    pub extremal: f64,
    /// The same quotient for the naive inverse.
    pub naive: f64,
}

/// Difference quotients of the extremal and naive inverses along `direction`.
pub fn smoothness_probe(
    model: &AllocationModel,
    w0: &Task,
    direction: &DVector<f64>,
    level: f64,
    branch: Branch,
    scales: &[f64],
) -> Result<Vec<ProbeRow>, InverseError> {
    model.check_task(w0)?;
    let d = Task::new(direction / direction.norm())?;
    model.check_task(&d)?;
    let opts = SolverOptions::default();
    let base_e = extremal_inverse(model, w0, level, branch, &opts)?;
    let base_n = naive_minimum_norm_inverse(model, w0)?;
    scales
        .iter()
        .map(|&h| {
            let w = Task::new(w0.as_vector() + d.as_vector() * h)?;
            let e = extremal_inverse(model, &w, level, branch, &opts)?;
            let n = naive_minimum_norm_inverse(model, &w)?;
            Ok(ProbeRow {
                h,
                extremal: (e.as_vector() - base_e.as_vector()).norm() / h,
                naive: (n.as_vector() - base_n.as_vector()).norm() / h,
            })
        })
        .collect()
}
