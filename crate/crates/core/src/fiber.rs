//! Constant-task fibers `γ(w, λ) = g⁻¹(z + λ b)`, their tangents, hyperplane
//! crossings and the orthant sequence they traverse.

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::model::{signed_sqrt, AllocationModel, KineticState, ModelError, Task};
use crate::strata::OrthantSignature;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FiberError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("parameter list must be positive, finite and strictly increasing (entry {index} is {value})")]
    BadParameters { index: usize, value: f64 },
}

/// Relative width inside which neighbouring crossings are merged.
pub const CROSSING_MERGE_REL: f64 = 1e-9;

/// The fiber over one task, with its particular solution cached.
#[derive(Debug, Clone)]
pub struct Fiber<'m> {
    model: &'m AllocationModel,
    w: Task,
    z: DVector<f64>,
}

impl<'m> Fiber<'m> {
    pub fn new(model: &'m AllocationModel, w: Task) -> Result<Self, ModelError> {
        model.check_task(&w)?;
        let z = model.particular_solution(&w);
        Ok(Self { model, w, z })
    }

    pub fn model(&self) -> &'m AllocationModel {
        self.model
    }

    pub fn task(&self) -> &Task {
        &self.w
    }

    /// Minimum-norm point `A⁺ w` of the transformed line.
    pub fn particular(&self) -> &DVector<f64> {
        &self.z
    }

    /// `x(λ) = z + λ b`.
    pub fn transformed(&self, lambda: f64) -> DVector<f64> {
        &self.z + self.model.null_vector() * lambda
    }

    /// Indices whose transformed coordinate is indistinguishable from zero at `λ`.
    pub fn on_crossing(&self, lambda: f64) -> Vec<usize> {
        let b = self.model.null_vector();
        let rel = self.model.tolerances().crossing_rel;
        (0..self.z.len())
            .filter(|&i| {
                let step = lambda * b[i];
                (self.z[i] + step).abs() <= rel * (self.z[i].abs() + step.abs())
            })
            .collect()
    }

    pub fn state(&self, lambda: f64) -> KineticState {
        KineticState::from_raw(self.transformed(lambda).map(signed_sqrt))
    }

    /// `x` at `λ = λ*_k + μ`, measured from crossing `k` so that `x_k = b_k μ`
    /// keeps full relative precision however small `μ` gets.
    pub fn transformed_near(&self, k: usize, mu: f64) -> DVector<f64> {
        let b = self.model.null_vector();
        let star = self.crossing_lambdas();
        DVector::from_fn(self.z.len(), |j, _| {
            if j == k {
                b[j] * mu
            } else {
                b[j] * ((star[k] - star[j]) + mu)
            }
        })
    }

    pub fn state_near(&self, k: usize, mu: f64) -> KineticState {
        KineticState::from_raw(self.transformed_near(k, mu).map(signed_sqrt))
    }

    pub fn point(&self, lambda: f64) -> FiberPoint {
        let x = self.transformed(lambda);
        let v = KineticState::from_raw(x.map(signed_sqrt));
        let halted = self.on_crossing(lambda);
        let b = self.model.null_vector();
        let tangent = if halted.is_empty() {
            FiberTangent::Finite(DVector::from_fn(x.len(), |i, _| {
                b[i] / (2.0 * x[i].abs().sqrt())
            }))
        } else {
            FiberTangent::Divergent {
                direction: limiting_direction(self.model, &halted),
                indices: halted,
            }
        };
        FiberPoint { v, lambda, tangent }
    }

    /// `λ*_i = −z_i / b_i`, unsorted, indexed by actuator.
    pub fn crossing_lambdas(&self) -> DVector<f64> {
        let b = self.model.null_vector();
        DVector::from_fn(self.z.len(), |i, _| -self.z[i] / b[i])
    }

    pub fn trace(&self) -> FiberTrace {
        let n = self.z.len();
        let raw = self.crossing_lambdas();
        let mut crossings: Vec<Crossing> = raw
            .iter()
            .enumerate()
            .map(|(index, &lambda)| Crossing { lambda, index })
            .collect();
        crossings.sort_by(|a, b| a.lambda.total_cmp(&b.lambda).then(a.index.cmp(&b.index)));

        let spread = crossings[n - 1].lambda - crossings[0].lambda;
        let band = CROSSING_MERGE_REL * (spread + 1.0);
        let mut groups: Vec<CrossingGroup> = Vec::new();
        for (k, c) in crossings.iter().enumerate() {
            match groups.last_mut() {
                Some(g) if c.lambda - crossings[k - 1].lambda <= band => {
                    g.indices.push(c.index);
                    g.upper = c.lambda;
                }
                _ => groups.push(CrossingGroup {
                    lower: c.lambda,
                    upper: c.lambda,
                    indices: vec![c.index],
                }),
            }
        }

        let pattern = self.model.sign_pattern();
        let mut entry = 0u64;
        let mut segments = Vec::with_capacity(groups.len() + 1);
        for s in 0..=groups.len() {
            if s > 0 {
                entry |= groups[s - 1]
                    .indices
                    .iter()
                    .fold(0u64, |acc, i| acc | (1 << i));
            }
            let orthant = pattern.from_entry_mask(entry);
            segments.push(Segment {
                lower: (s > 0).then(|| groups[s - 1].upper),
                upper: groups.get(s).map(|g| g.lower),
                layer: orthant.layer(),
                orthant,
            });
        }

        FiberTrace {
            w: self.w.clone(),
            z: self.z.clone(),
            generic: groups.len() == n,
            skipped: n + 1 - segments.len(),
            crossings,
            groups,
            segments,
        }
    }
}

/// Unit limit of the tangent direction as the coordinates in `halted` vanish:
/// the central direction restricted to those coordinates.
fn limiting_direction(model: &AllocationModel, halted: &[usize]) -> DVector<f64> {
    let c = model.central_direction();
    let mut d = DVector::zeros(c.len());
    for &i in halted {
        d[i] = c[i];
    }
    let norm = d.norm();
    d / norm
}

/// `dγ/dλ`, or its direction where some coordinate sits on its hyperplane.
#[derive(Debug, Clone, PartialEq)]
pub enum FiberTangent {
    Finite(DVector<f64>),
    Divergent {
        indices: Vec<usize>,
        direction: DVector<f64>,
    },
}

impl FiberTangent {
    pub fn is_divergent(&self) -> bool {
        matches!(self, FiberTangent::Divergent { .. })
    }

    /// Unit direction in both cases.
    pub fn direction(&self) -> DVector<f64> {
        match self {
            FiberTangent::Finite(t) => t / t.norm(),
            FiberTangent::Divergent { direction, .. } => direction.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiberPoint {
    pub v: KineticState,
    pub lambda: f64,
    pub tangent: FiberTangent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Crossing {
    pub lambda: f64,
    pub index: usize,
}

/// Crossings merged into one event; more than one index means the fiber
/// passes through a deeper stratum and skips orthants.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossingGroup {
    pub lower: f64,
    pub upper: f64,
    pub indices: Vec<usize>,
}

/// An open λ-interval between consecutive crossing groups. `None` bounds are infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Segment {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub orthant: OrthantSignature,
    pub layer: usize,
}

impl Segment {
    /// A point strictly inside the interval, one unit beyond a finite end.
    pub fn interior(&self) -> f64 {
        match (self.lower, self.upper) {
            (Some(lo), Some(hi)) => 0.5 * (lo + hi),
            (Some(lo), None) => lo + 1.0,
            (None, Some(hi)) => hi - 1.0,
            (None, None) => 0.0,
        }
    }

    pub fn contains(&self, lambda: f64) -> bool {
        self.lower.is_none_or(|lo| lambda > lo) && self.upper.is_none_or(|hi| lambda < hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiberTrace {
    #[serde(serialize_with = "serialize_task")]
    pub w: Task,
    #[serde(serialize_with = "serialize_vector")]
    pub z: DVector<f64>,
    /// Sorted ascending by λ.
    pub crossings: Vec<Crossing>,
    pub groups: Vec<CrossingGroup>,
    /// One per traversed orthant, in order of increasing λ.
    pub segments: Vec<Segment>,
    pub generic: bool,
    /// Number of orthants the fiber skips relative to a generic trace.
    pub skipped: usize,
}

impl FiberTrace {
    pub fn orthant_sequence(&self) -> Vec<OrthantSignature> {
        self.segments.iter().map(|s| s.orthant).collect()
    }

    pub fn segment_for_layer(&self, layer: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.layer == layer)
    }

    /// The group whose passage skips `layer`, if the fiber skips it.
    pub fn group_skipping(&self, layer: usize) -> Option<&CrossingGroup> {
        let mut before = 0;
        for g in &self.groups {
            let after = before + g.indices.len();
            if layer > before && layer < after {
                return Some(g);
            }
            before = after;
        }
        None
    }
}

fn serialize_vector<S: serde::Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

fn serialize_task<S: serde::Serializer>(w: &Task, s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(w.iter())
}

pub fn fiber_point(
    model: &AllocationModel,
    w: &Task,
    lambda: f64,
) -> Result<FiberPoint, ModelError> {
    Ok(Fiber::new(model, w.clone())?.point(lambda))
}

pub fn crossing_parameters(model: &AllocationModel, w: &Task) -> Result<FiberTrace, ModelError> {
    Ok(Fiber::new(model, w.clone())?.trace())
}

/// Tangent line of the fiber through `v`.
#[derive(Debug, Clone, PartialEq)]
pub enum TangentSpace {
    /// Unnormalized direction `D(v)⁻¹ b`.
    Regular(DVector<f64>),
    /// `v` lies on the hyperplanes in `indices`; `direction` is the unit limit.
    Degenerate {
        indices: Vec<usize>,
        direction: DVector<f64>,
    },
}

pub fn fiber_tangent_space(
    model: &AllocationModel,
    v: &KineticState,
) -> Result<TangentSpace, ModelError> {
    model.check_state(v)?;
    let halted = v.halted(model.tolerances().zero);
    if halted.is_empty() {
        Ok(TangentSpace::Regular(
            model.null_vector().component_div(&v.map(f64::abs)),
        ))
    } else {
        Ok(TangentSpace::Degenerate {
            direction: limiting_direction(model, &halted),
            indices: halted,
        })
    }
}

/// `⟨dγ/dλ, c⟩ = Σ b_i² / (2 |v_i| √|b_i|)`; infinite when some `v_i = 0`.
pub fn forward_progress(model: &AllocationModel, v: &KineticState) -> Result<f64, ModelError> {
    model.check_state(v)?;
    Ok(model
        .null_vector()
        .iter()
        .zip(v.iter())
        .map(|(bi, vi)| bi * bi / (2.0 * vi.abs() * bi.abs().sqrt()))
        .sum())
}

/// Angle in `[0, π]` between two nonzero vectors, accurate near 0 and π.
pub fn angle_between(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let a = a / a.norm();
    let b = b / b.norm();
    2.0 * (&a - &b).norm().atan2((&a + &b).norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AsymptoticRow {
    pub lambda: f64,
    /// `‖γ(w, λ) − γ(0, λ)‖`.
    pub distance: f64,
    /// Angle between the fiber tangent and the central direction.
    pub angle: f64,
}

/// Rows for every `λ` in `lambdas` followed by the mirrored rows at `−λ`.
pub fn asymptotic_diagnostics(
    model: &AllocationModel,
    w: &Task,
    lambdas: &[f64],
) -> Result<Vec<AsymptoticRow>, FiberError> {
    for (index, &value) in lambdas.iter().enumerate() {
        let ordered = index == 0 || value > lambdas[index - 1];
        if !(value.is_finite() && value > 0.0 && ordered) {
            return Err(FiberError::BadParameters { index, value });
        }
    }
    let fiber = Fiber::new(model, w.clone())?;
    let b = model.null_vector();
    let c = model.central_direction();
    let row = |lambda: f64| {
        let x = fiber.transformed(lambda);
        // √|x| − √|λb| as z/(√|x| + √|λb|) where the signs agree, to avoid cancellation
        let distance = (0..x.len())
            .map(|i| {
                let y = lambda * b[i];
                let d = if x[i] * y > 0.0 {
                    fiber.particular()[i] / (x[i].abs().sqrt() + y.abs().sqrt())
                } else {
                    signed_sqrt(x[i]) - signed_sqrt(y)
                };
                d * d
            })
            .sum::<f64>()
            .sqrt();
        let angle = angle_between(&fiber.point(lambda).tangent.direction(), c);
        AsymptoticRow {
            lambda,
            distance,
            angle,
        }
    };
    let mut rows: Vec<AsymptoticRow> = lambdas.iter().map(|&l| row(l)).collect();
    rows.extend(lambdas.iter().map(|&l| row(-l)));
    Ok(rows)
}
