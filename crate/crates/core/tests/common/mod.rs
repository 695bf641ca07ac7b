//! Reference implementations used as test oracles. Nothing here calls the
//! library's solver.
#![allow(dead_code)]

use gradmatch::GradientBank;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gaussian elimination with partial pivoting; `None` if singular.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

fn gram(bank: &GradientBank, set: &[usize], lambda: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let t = bank.target();
    let a = set
        .iter()
        .map(|&i| set.iter().map(|&j| bank.row(i).dot(&bank.row(j)) + if i == j { lambda } else { 0.0 }).collect())
        .collect();
    let rhs = set.iter().map(|&i| bank.row(i).dot(&t)).collect();
    (a, rhs)
}

/// `(GᵀG + λI)⁻¹ Gᵀ b` over `set`, ignoring the sign constraint.
pub fn ridge_closed_form(bank: &GradientBank, set: &[usize], lambda: f64) -> Option<Vec<f64>> {
    let (a, rhs) = gram(bank, set, lambda);
    solve_dense(a, rhs)
}

pub fn objective(bank: &GradientBank, set: &[usize], w: &[f64], lambda: f64) -> f64 {
    let mut r = -&bank.target();
    for (&i, &wi) in set.iter().zip(w) {
        r.scaled_add(wi, &bank.row(i));
    }
    r.dot(&r) + lambda * w.iter().map(|v| v * v).sum::<f64>()
}

/// Exact nonnegative ridge fit by enumerating supports: the optimum is the
/// unique support whose unconstrained fit is positive and whose excluded
/// coordinates have nonnegative partial derivatives. Falls back to the best
/// feasible support when degeneracy makes the KKT test ambiguous.
pub fn nnls_ridge_exact(bank: &GradientBank, set: &[usize], lambda: f64) -> (Vec<f64>, f64) {
    let m = set.len();
    assert!(m <= 12, "support enumeration is exponential");
    let mut best = (vec![0.0; m], objective(bank, set, &vec![0.0; m], lambda));
    for mask in 1usize..1 << m {
        let support: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
        let cols: Vec<usize> = support.iter().map(|&i| set[i]).collect();
        let Some(z) = ridge_closed_form(bank, &cols, lambda) else { continue };
        if z.iter().any(|v| *v <= 0.0) {
            continue;
        }
        let mut w = vec![0.0; m];
        for (&i, v) in support.iter().zip(z) {
            w[i] = v;
        }
        let obj = objective(bank, set, &w, lambda);
        if obj < best.1 {
            best = (w, obj);
        }
    }
    best
}

/// FISTA on the nonnegative ridge problem, run to a fixed point.
pub fn nnls_ridge_pg(bank: &GradientBank, set: &[usize], lambda: f64) -> Vec<f64> {
    let m = set.len();
    let (a, rhs) = gram(bank, set, lambda);
    // Lipschitz constant of the gradient 2(Aw − rhs): 2·‖A‖ bounded by the
    // Frobenius norm.
    let lip = 2.0 * a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let step = 1.0 / lip.max(1e-12);
    let mut w = vec![0.0; m];
    let mut y = w.clone();
    let mut t = 1.0f64;
    for _ in 0..2_000_000 {
        let grad: Vec<f64> = (0..m).map(|i| 2.0 * ((0..m).map(|j| a[i][j] * y[j]).sum::<f64>() - rhs[i])).collect();
        let next: Vec<f64> = (0..m).map(|i| (y[i] - step * grad[i]).max(0.0)).collect();
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let moved = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        y = (0..m).map(|i| next[i] + (t - 1.0) / t_next * (next[i] - w[i])).collect();
        w = next;
        t = t_next;
        if moved < 1e-15 {
            break;
        }
    }
    w
}

/// `E_λ({j})` in closed form: `‖b‖² − (g_jᵀb)₊² / (‖g_j‖² + λ)`.
pub fn singleton_error(bank: &GradientBank, j: usize, lambda: f64) -> f64 {
    let g = bank.row(j);
    let t = bank.target();
    let gb = g.dot(&t).max(0.0);
    t.dot(&t) - gb * gb / (g.dot(&g) + lambda)
}

pub fn random_bank(rng: &mut ChaCha8Rng, n: usize, d: usize, unit_rows: bool) -> GradientBank {
    let mut rows: Array2<f64> = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    for mut r in rows.rows_mut() {
        let norm: f64 = r.dot(&r).sqrt();
        let scale = if unit_rows { 1.0 / norm } else { rng.random_range(0.2..3.0) / norm };
        r.mapv_inplace(|v| v * scale);
    }
    let target = Array1::from_shape_fn(d, |_| rng.random_range(-2.0..2.0));
    GradientBank::new(rows, target).unwrap()
}

/// `F_λ(S) = ‖b‖² − E_λ(S)` for every subset of size ≤ `max_size` (NaN
/// elsewhere), indexed by bitmask, via the exact support-enumeration fit.
pub fn all_f(bank: &GradientBank, lambda: f64, max_size: usize) -> Vec<f64> {
    let n = bank.n_elements();
    let l_max = bank.target_norm_sq();
    (0..1usize << n)
        .map(|mask| {
            if mask.count_ones() as usize > max_size {
                return f64::NAN;
            }
            let set: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
            l_max - nnls_ridge_exact(bank, &set, lambda).1
        })
        .collect()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}
