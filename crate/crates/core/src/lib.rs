//! Geometry and inversion of minimally redundant signed-quadratic actuation maps
//! `w = A (v ⊙ |v|)` with `A ∈ ℝ^{m×(m+1)}`.
//!
//! Fibers are lines `z + λ b` in the transformed coordinates `x = v ⊙ |v|`.
//! The logarithmic potential `Φ(v) = Σ b_i sign(v_i) ln|v_i|` is strictly
//! increasing along every fiber, so each of its level sets meets a fiber segment
//! exactly once. Inside the two extremal orthants this yields a smooth
//! right-inverse that never touches a coordinate hyperplane.

pub mod cli;
pub mod export;
pub mod fiber;
pub mod inverse;
pub mod model;
pub mod potential;
pub mod strata;

pub use model::{AllocationModel, KineticState, LoadError, ModelError, Task, Tolerances};
pub use strata::{OrthantKind, OrthantSignature, SignPattern, StratumDescriptor, StratumKind};
