#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signquad::{AllocationModel, KineticState, Task, Tolerances};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn model(rows: &[&[f64]]) -> AllocationModel {
    let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
    AllocationModel::from_rows(&rows, Tolerances::default()).unwrap()
}

pub fn task(w: &[f64]) -> Task {
    Task::from_slice(w).unwrap()
}

pub fn state(v: &[f64]) -> KineticState {
    KineticState::from_slice(v).unwrap()
}

/// Random `(n-1) × n` model with entries in [-1, 1] whose null vector stays
/// away from zero entries, so sweeps do not sit on the redundancy threshold.
pub fn random_model(rng: &mut ChaCha8Rng, n: usize) -> AllocationModel {
    loop {
        let a = DMatrix::from_fn(n - 1, n, |_, _| rng.random_range(-1.0..1.0));
        if let Ok(m) = AllocationModel::new(a) {
            let b = m.null_vector();
            let s = m.singular_values();
            if b.iter().all(|x| x.abs() > 0.05) && s[s.len() - 1] > 0.05 * s[0] {
                return m;
            }
        }
    }
}

pub fn random_task(rng: &mut ChaCha8Rng, m: usize, scale: f64) -> Task {
    Task::new(DVector::from_fn(m, |_, _| rng.random_range(-scale..scale))).unwrap()
}

/// `Σ A_ij v_j |v_j|` written out, independent of the library's transform.
pub fn actuate(a: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..a.nrows())
        .map(|r| (0..a.ncols()).map(|c| a[(r, c)] * v[c] * v[c].abs()).sum())
        .collect()
}

/// `‖A x − w‖∞ / max_r (Σ_c |A_rc x_c| + |w_r|)`.
pub fn relative_task_error(a: &DMatrix<f64>, v: &[f64], w: &[f64]) -> f64 {
    let got = actuate(a, v);
    let (mut err, mut scale) = (0.0f64, 0.0f64);
    for r in 0..a.nrows() {
        err = err.max((got[r] - w[r]).abs());
        let row: f64 = (0..a.ncols())
            .map(|c| (a[(r, c)] * v[c] * v[c].abs()).abs())
            .sum();
        scale = scale.max(row + w[r].abs());
    }
    if scale == 0.0 {
        0.0
    } else {
        err / scale
    }
}

/// `Σ b_i sign(v_i) ln|v_i|` from raw numbers.
pub fn phi(b: &DVector<f64>, v: &[f64]) -> f64 {
    b.iter()
        .zip(v)
        .map(|(bi, vi)| bi * vi.signum() * vi.abs().ln())
        .sum()
}

/// `½ Σ b_i sign(x_i) ln|x_i|` on `x = z + λ b`, computed from scratch.
pub fn c_w(z: &DVector<f64>, b: &DVector<f64>, lambda: f64) -> f64 {
    0.5 * z
        .iter()
        .zip(b.iter())
        .map(|(zi, bi)| {
            let x = zi + lambda * bi;
            bi * x.signum() * x.abs().ln()
        })
        .sum::<f64>()
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

pub fn report(k: usize, pass: bool, detail: impl std::fmt::Display) {
    println!(
        "criterion {k}: {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}
