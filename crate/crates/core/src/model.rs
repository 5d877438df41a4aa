//! The validated signed-quadratic actuation model `w = A (v ⊙ |v|)`.
//!
//! An [`AllocationModel`] is built once from an `m × (m+1)` allocation matrix and
//! is immutable afterwards. Construction checks full row rank, minimal
//! redundancy and strict redundancy (no zero entry in the null-space
//! generator), and caches the pseudoinverse, the unit null-space generator `b`
//! (oriented so that `b[0] > 0`) and the central direction `c`.

use std::ops::Deref;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SVD};
use serde::Deserialize;
use thiserror::Error;

use crate::strata::{SignPattern, MAX_DIM};

/// Numerical thresholds used across the crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Full row rank requires `sigma_min > rank_rel * sigma_max`.
    pub rank_rel: f64,
    /// A null-space entry with `|b_i| <= redundancy_rel * max_j |b_j|` is a structural zero.
    pub redundancy_rel: f64,
    /// Kinetic coordinates with `|v_i| <= zero` count as halted.
    pub zero: f64,
    /// A transformed coordinate `x_i = z_i + λ b_i` is on its hyperplane when
    /// `|x_i| <= crossing_rel * (|z_i| + |λ b_i|)`, i.e. inside the cancellation noise.
    pub crossing_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rank_rel: 1e-10,
            redundancy_rel: 1e-9,
            zero: 1e-12,
            crossing_rel: 1e-14,
        }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("rank_rel", self.rank_rel),
            ("redundancy_rel", self.redundancy_rel),
            ("zero", self.zero),
            ("crossing_rel", self.crossing_rel),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(ModelError::BadTolerance { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("allocation matrix is empty")]
    Empty,
    #[error("row {row} has {found} entries, expected {expected}")]
    Ragged {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("allocation matrix is {m}x{n}; exactly one redundant actuator requires n = m + 1")]
    WrongShape { m: usize, n: usize },
    #[error("rank deficient: smallest singular value {sigma_min:e} is below {threshold:e}")]
    RankDeficient { sigma_min: f64, threshold: f64 },
    #[error("null-space component {index} is {value:e}; actuator {index} is not redundant")]
    DegenerateRedundancy { index: usize, value: f64 },
    #[error("kinetic dimension {n} exceeds the supported maximum {max}")]
    TooLarge { n: usize, max: usize },
    #[error("vector has a non-finite entry at index {index}")]
    NonFiniteVector { index: usize },
    #[error("vector has length {found}, expected {expected}")]
    DimensionMismatch { found: usize, expected: usize },
    #[error("tolerance {name} must be positive and finite, got {value}")]
    BadTolerance { name: &'static str, value: f64 },
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read model file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model file {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid model in {path}: {source}")]
    Model {
        path: String,
        #[source]
        source: ModelError,
    },
}

fn check_finite(v: &DVector<f64>) -> Result<(), ModelError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(ModelError::NonFiniteVector { index }),
        None => Ok(()),
    }
}

/// An actuator state `v ∈ ℝⁿ` with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct KineticState(DVector<f64>);

impl KineticState {
    pub fn new(v: DVector<f64>) -> Result<Self, ModelError> {
        check_finite(&v)?;
        Ok(Self(v))
    }

    pub fn from_slice(v: &[f64]) -> Result<Self, ModelError> {
        Self::new(DVector::from_column_slice(v))
    }

    pub(crate) fn from_raw(v: DVector<f64>) -> Self {
        debug_assert!(v.iter().all(|x| x.is_finite()));
        Self(v)
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }

    /// True when no coordinate is within `zero` of its hyperplane.
    pub fn is_regular(&self, zero: f64) -> bool {
        self.0.iter().all(|x| x.abs() > zero)
    }

    /// Indices with `|v_i| <= zero`.
    pub fn halted(&self, zero: f64) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, x)| x.abs() <= zero)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn min_abs(&self) -> f64 {
        self.0.iter().fold(f64::INFINITY, |acc, x| acc.min(x.abs()))
    }
}

impl Deref for KineticState {
    type Target = DVector<f64>;
    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

/// A task `w ∈ ℝᵐ` with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Task(DVector<f64>);

impl Task {
    pub fn new(w: DVector<f64>) -> Result<Self, ModelError> {
        check_finite(&w)?;
        Ok(Self(w))
    }

    pub fn from_slice(w: &[f64]) -> Result<Self, ModelError> {
        Self::new(DVector::from_column_slice(w))
    }

    pub fn zeros(m: usize) -> Self {
        Self(DVector::zeros(m))
    }

    pub(crate) fn from_raw(w: DVector<f64>) -> Self {
        debug_assert!(w.iter().all(|x| x.is_finite()));
        Self(w)
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

impl Deref for Task {
    type Target = DVector<f64>;
    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

/// `x_i = v_i |v_i|`.
pub fn transform(v: &KineticState) -> DVector<f64> {
    v.map(|vi| vi * vi.abs())
}

/// `v_i = sign(x_i) sqrt(|x_i|)`, the exact inverse of [`transform`].
///
/// `x` must be finite.
pub fn untransform(x: &DVector<f64>) -> KineticState {
    KineticState::from_raw(x.map(signed_sqrt))
}

#[inline]
pub(crate) fn signed_sqrt(x: f64) -> f64 {
    // copysign keeps -0.0 out of the picture for exact zeros
    if x == 0.0 {
        0.0
    } else {
        x.abs().sqrt().copysign(x)
    }
}

#[derive(Deserialize)]
struct ModelFile {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct AllocationModel {
    a: DMatrix<f64>,
    pinv: DMatrix<f64>,
    b: DVector<f64>,
    c: DVector<f64>,
    singular_values: DVector<f64>,
    pattern: SignPattern,
    tol: Tolerances,
}

impl AllocationModel {
    pub fn new(a: DMatrix<f64>) -> Result<Self, ModelError> {
        Self::with_tolerances(a, Tolerances::default())
    }

    pub fn with_tolerances(a: DMatrix<f64>, tol: Tolerances) -> Result<Self, ModelError> {
        tol.validate()?;
        let (m, n) = a.shape();
        if m == 0 || n == 0 {
            return Err(ModelError::Empty);
        }
        for row in 0..m {
            for col in 0..n {
                if !a[(row, col)].is_finite() {
                    return Err(ModelError::NonFinite { row, col });
                }
            }
        }
        if n != m + 1 {
            return Err(ModelError::WrongShape { m, n });
        }
        if n > MAX_DIM {
            return Err(ModelError::TooLarge { n, max: MAX_DIM });
        }

        let svd = SVD::new(a.clone(), true, true);
        let singular_values = svd.singular_values.clone();
        let sigma_max = singular_values[0];
        let sigma_min = singular_values[m - 1];
        let threshold = tol.rank_rel * sigma_max;
        if sigma_min.is_nan() || sigma_min <= threshold {
            return Err(ModelError::RankDeficient {
                sigma_min,
                threshold,
            });
        }
        let pinv = svd
            .pseudo_inverse(threshold)
            .expect("u and v were requested");

        // Pad to a square matrix so the SVD yields a complete right basis; the
        // right singular vector of the zero singular value spans ker A.
        let mut square = DMatrix::zeros(n, n);
        square.view_mut((0, 0), (m, n)).copy_from(&a);
        let full = SVD::new(square, false, true);
        let v_t = full.v_t.expect("v was requested");
        let mut b: DVector<f64> = v_t.row(n - 1).transpose();
        // One projection step removes the residual row-space component.
        let residual = &pinv * (&a * &b);
        b -= residual;
        b /= b.norm();

        let b_max = b.amax();
        if let Some(index) = b
            .iter()
            .position(|bi| bi.abs() <= tol.redundancy_rel * b_max)
        {
            return Err(ModelError::DegenerateRedundancy {
                index,
                value: b[index],
            });
        }
        if b[0] < 0.0 {
            b.neg_mut();
        }
        let c = b.map(signed_sqrt);
        let pattern = SignPattern::from_null_vector(&b);

        Ok(Self {
            a,
            pinv,
            b,
            c,
            singular_values,
            pattern,
            tol,
        })
    }

    /// Builds from row-major rows, reporting ragged rows by index.
    pub fn from_rows(rows: &[Vec<f64>], tol: Tolerances) -> Result<Self, ModelError> {
        let m = rows.len();
        if m == 0 {
            return Err(ModelError::Empty);
        }
        let n = rows[0].len();
        for (row, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(ModelError::Ragged {
                    row,
                    found: r.len(),
                    expected: n,
                });
            }
        }
        let a = DMatrix::from_fn(m, n, |i, j| rows[i][j]);
        Self::with_tolerances(a, tol)
    }

    /// Parses `{"A": [[...], ...]}`.
    pub fn from_json_str(text: &str, tol: Tolerances) -> Result<Self, LoadError> {
        Self::parse_named(text, "<inline>", tol)
    }

    pub fn load(path: impl AsRef<Path>, tol: Tolerances) -> Result<Self, LoadError> {
        let path = path.as_ref();
        let name = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
            path: name.clone(),
            source,
        })?;
        Self::parse_named(&text, &name, tol)
    }

    fn parse_named(text: &str, name: &str, tol: Tolerances) -> Result<Self, LoadError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|source| LoadError::Parse {
            path: name.to_string(),
            source,
        })?;
        Self::from_rows(&file.a, tol).map_err(|source| LoadError::Model {
            path: name.to_string(),
            source,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn pseudo_inverse(&self) -> &DMatrix<f64> {
        &self.pinv
    }

    /// Unit generator of `ker A`, with `b[0] > 0`.
    pub fn null_vector(&self) -> &DVector<f64> {
        &self.b
    }

    /// `c_i = sign(b_i) sqrt(|b_i|)`; the central fiber is `{ s c : s ∈ ℝ }`.
    pub fn central_direction(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }

    pub fn sign_pattern(&self) -> SignPattern {
        self.pattern
    }

    pub fn tolerances(&self) -> &Tolerances {
        &self.tol
    }

    pub fn task_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn kinetic_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn check_state(&self, v: &KineticState) -> Result<(), ModelError> {
        if v.len() != self.kinetic_dim() {
            return Err(ModelError::DimensionMismatch {
                found: v.len(),
                expected: self.kinetic_dim(),
            });
        }
        Ok(())
    }

    pub fn check_task(&self, w: &Task) -> Result<(), ModelError> {
        if w.len() != self.task_dim() {
            return Err(ModelError::DimensionMismatch {
                found: w.len(),
                expected: self.task_dim(),
            });
        }
        Ok(())
    }

    /// `f(v) = A (v ⊙ |v|)`.
    pub fn actuation(&self, v: &KineticState) -> Task {
        Task::from_raw(&self.a * transform(v))
    }

    /// `J(v) = 2 A diag(|v|)`. Columns of halted actuators are zero.
    pub fn jacobian(&self, v: &KineticState) -> DMatrix<f64> {
        let mut j = &self.a * 2.0;
        for (col, vi) in v.iter().enumerate() {
            j.column_mut(col).scale_mut(vi.abs());
        }
        j
    }

    /// Minimum-norm solution `z = A⁺ w` of `A x = w` in transformed space.
    pub fn particular_solution(&self, w: &Task) -> DVector<f64> {
        &self.pinv * w.as_vector()
    }

    /// `‖A‖₂`, the largest singular value.
    pub fn norm(&self) -> f64 {
        self.singular_values[0]
    }
}
