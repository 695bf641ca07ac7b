//! The regularised gradient-matching problem over a fixed subset `X`:
//!
//! ```text
//! min_{w >= 0}  ‖Σ_{i∈X} w_i g_i − b‖² + λ‖w‖²
//! ```
//!
//! solved with a warm-startable Lawson–Hanson active-set method. Each
//! free-set subproblem `(A_PᵀA_P + λI) z = A_Pᵀb` is solved by Cholesky on
//! the `|P|×|P|` Gram matrix when `|P| ≤ d`, and through the `d×d` system
//! `(A_P A_Pᵀ + λI) y = b, z = A_Pᵀy` otherwise. If a subproblem is
//! numerically singular the solver falls back to projected coordinate
//! descent.

use ndarray::{Array1, ArrayView1};

use crate::bank::GradientBank;
use crate::error::{invalid, Error, Result};

pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub lambda: f64,
    /// KKT tolerance, relative to `max(1, ‖b‖·max_i‖g_i‖)`.
    pub tol: f64,
    /// Defaults to `10 · |X| · d_g`.
    pub max_iters: Option<usize>,
    /// Solve the plain ridge problem without the `w ≥ 0` constraint.
    pub allow_negative_weights: bool,
}

impl SolverOptions {
    pub fn new(lambda: f64) -> Self {
        Self { lambda, tol: DEFAULT_TOL, max_iters: None, allow_negative_weights: false }
    }

    pub fn unconstrained(lambda: f64) -> Self {
        Self { allow_negative_weights: true, ..Self::new(lambda) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightSolution {
    /// Aligned with the subset passed to the solver.
    pub weights: Vec<f64>,
    /// `Σ w_i g_i − b`.
    pub residual_vector: Array1<f64>,
    /// `‖residual‖² + λ‖w‖²`.
    pub objective_value: f64,
    pub iterations: usize,
}

struct Problem<'a> {
    cols: Vec<ArrayView1<'a, f64>>,
    b: ArrayView1<'a, f64>,
    lambda: f64,
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        self.b.len()
    }

    /// `b − A w`.
    fn misfit(&self, w: &[f64]) -> Array1<f64> {
        let mut r = self.b.to_owned();
        for (c, &wi) in self.cols.iter().zip(w) {
            if wi != 0.0 {
                r.scaled_add(-wi, c);
            }
        }
        r
    }

    /// Negative half-gradient `Aᵀ(b − Aw) − λw`.
    fn dual(&self, w: &[f64], misfit: &Array1<f64>) -> Vec<f64> {
        self.cols.iter().zip(w).map(|(c, &wi)| c.dot(misfit) - self.lambda * wi).collect()
    }

    /// Solves the unconstrained ridge system restricted to `free`.
    fn solve_free(&self, free: &[usize]) -> Option<Vec<f64>> {
        let d = self.dim();
        let s = free.len();
        if s == 0 {
            return Some(Vec::new());
        }
        if s <= d || self.lambda == 0.0 {
            let mut gram = vec![0.0; s * s];
            let mut rhs = vec![0.0; s];
            for (a, &i) in free.iter().enumerate() {
                rhs[a] = self.cols[i].dot(&self.b);
                for (bi, &j) in free.iter().enumerate().take(a + 1) {
                    let v = self.cols[i].dot(&self.cols[j]);
                    gram[a * s + bi] = v;
                    gram[bi * s + a] = v;
                }
                gram[a * s + a] += self.lambda;
            }
            cholesky_solve(&mut gram, &mut rhs, s).then_some(rhs)
        } else {
            let mut m = vec![0.0; d * d];
            for &i in free {
                let c = &self.cols[i];
                for r in 0..d {
                    let cr = c[r];
                    if cr == 0.0 {
                        continue;
                    }
                    for q in 0..=r {
                        m[r * d + q] += cr * c[q];
                    }
                }
            }
            for r in 0..d {
                for q in 0..r {
                    m[q * d + r] = m[r * d + q];
                }
                m[r * d + r] += self.lambda;
            }
            let mut y = self.b.to_vec();
            if !cholesky_solve(&mut m, &mut y, d) {
                return None;
            }
            let y = Array1::from(y);
            Some(free.iter().map(|&i| self.cols[i].dot(&y)).collect())
        }
    }
}

/// In-place Cholesky factorisation and solve of a symmetric `n×n` system.
/// Returns `false` if the matrix is not numerically positive definite.
fn cholesky_solve(a: &mut [f64], rhs: &mut [f64], n: usize) -> bool {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let floor = scale * 1e-13;
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if !(diag > floor) {
            return false;
        }
        let l = diag.sqrt();
        a[j * n + j] = l;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / l;
        }
    }
    for i in 0..n {
        let mut v = rhs[i];
        for k in 0..i {
            v -= a[i * n + k] * rhs[k];
        }
        rhs[i] = v / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = rhs[i];
        for k in i + 1..n {
            v -= a[k * n + i] * rhs[k];
        }
        rhs[i] = v / a[i * n + i];
    }
    true
}

fn finish(p: &Problem, weights: Vec<f64>, iterations: usize) -> WeightSolution {
    let misfit = p.misfit(&weights);
    let wnorm: f64 = weights.iter().map(|w| w * w).sum();
    let objective_value = misfit.dot(&misfit) + p.lambda * wnorm;
    WeightSolution { weights, residual_vector: -misfit, objective_value, iterations }
}

pub fn solve_nnls_ridge(bank: &GradientBank, subset: &[usize], opts: &SolverOptions) -> Result<WeightSolution> {
    solve_nnls_ridge_warm(bank, subset, opts, None)
}

/// Like [`solve_nnls_ridge`], starting from `warm` (clamped to `w ≥ 0`).
pub fn solve_nnls_ridge_warm(
    bank: &GradientBank,
    subset: &[usize],
    opts: &SolverOptions,
    warm: Option<&[f64]>,
) -> Result<WeightSolution> {
    if !(opts.lambda >= 0.0) {
        return Err(invalid(format!("lambda {} must be nonnegative", opts.lambda)));
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= bank.n_elements()) {
        return Err(invalid(format!("element {bad} out of range")));
    }
    let p = Problem { cols: subset.iter().map(|&i| bank.row(i)).collect(), b: bank.target(), lambda: opts.lambda };
    let m = subset.len();
    if m == 0 {
        return Ok(finish(&p, Vec::new(), 0));
    }
    if opts.allow_negative_weights {
        let all: Vec<usize> = (0..m).collect();
        let w = p.solve_free(&all).ok_or(Error::SingularSystem)?;
        return Ok(finish(&p, w, 1));
    }

    let max_col = p.cols.iter().map(|c| c.dot(c).sqrt()).fold(0.0, f64::max);
    let tol = opts.tol * (p.b.dot(&p.b).sqrt() * max_col).max(1.0);
    let max_iters = opts.max_iters.unwrap_or(10 * m * p.dim()).max(1);

    let mut w = vec![0.0; m];
    if let Some(init) = warm {
        for (wi, &v) in w.iter_mut().zip(init) {
            *wi = v.max(0.0);
        }
    }
    match active_set(&p, w.clone(), tol, max_iters) {
        Ok((w, it)) => Ok(finish(&p, w, it)),
        Err(Error::SingularSystem) => {
            let (w, it) = coordinate_descent(&p, w, tol, max_iters)?;
            Ok(finish(&p, w, it))
        }
        Err(e) => Err(e),
    }
}

fn kkt_ok(dual: &[f64], free: &[bool], tol: f64) -> bool {
    dual.iter().zip(free).all(|(&g, &f)| if f { g.abs() <= tol } else { g <= tol })
}

/// Lawson–Hanson iterations. `w` must be feasible.
fn active_set(p: &Problem, mut w: Vec<f64>, tol: f64, max_iters: usize) -> Result<(Vec<f64>, usize)> {
    let m = w.len();
    let mut free: Vec<bool> = w.iter().map(|&v| v > 0.0).collect();
    let mut iters = 0;
    let mut last_added: Option<usize> = None;

    loop {
        // Re-optimise over the current free set, stepping back to the
        // feasible boundary whenever the unconstrained solution leaves it.
        loop {
            iters += 1;
            if iters > max_iters {
                return Err(Error::NoConvergence(max_iters));
            }
            let idx: Vec<usize> = (0..m).filter(|&i| free[i]).collect();
            let z = p.solve_free(&idx).ok_or(Error::SingularSystem)?;
            if z.iter().all(|&v| v > 0.0) {
                for v in w.iter_mut() {
                    *v = 0.0;
                }
                for (&i, &v) in idx.iter().zip(&z) {
                    w[i] = v;
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            let mut blocking = idx[0];
            for (&i, &zi) in idx.iter().zip(&z) {
                if zi <= 0.0 {
                    let a = w[i] / (w[i] - zi);
                    if a < alpha {
                        alpha = a;
                        blocking = i;
                    }
                }
            }
            for (&i, &zi) in idx.iter().zip(&z) {
                w[i] += alpha * (zi - w[i]);
                if w[i] <= 1e-14 * (1.0 + zi.abs()) {
                    w[i] = 0.0;
                    free[i] = false;
                }
            }
            w[blocking] = 0.0;
            free[blocking] = false;
        }

        let misfit = p.misfit(&w);
        let dual = p.dual(&w, &misfit);
        if kkt_ok(&dual, &free, tol) {
            return Ok((w, iters));
        }
        let candidate = (0..m)
            .filter(|&i| !free[i])
            .max_by(|&a, &b| dual[a].total_cmp(&dual[b]).then(b.cmp(&a)));
        match candidate {
            Some(t) if dual[t] > tol => {
                if last_added == Some(t) {
                    // Numerically stuck: the column just added was dropped
                    // again without progress.
                    return Ok((w, iters));
                }
                free[t] = true;
                last_added = Some(t);
            }
            // Free-set stationarity off by rounding only; the inner solve
            // already used the exact subspace solution.
            _ => return Ok((w, iters)),
        }
    }
}

fn coordinate_descent(p: &Problem, mut w: Vec<f64>, tol: f64, max_iters: usize) -> Result<(Vec<f64>, usize)> {
    let diag: Vec<f64> = p.cols.iter().map(|c| c.dot(c) + p.lambda).collect();
    let mut misfit = p.misfit(&w);
    for sweep in 1..=max_iters {
        for (i, c) in p.cols.iter().enumerate() {
            if diag[i] <= 0.0 {
                if w[i] != 0.0 {
                    misfit.scaled_add(w[i], c);
                    w[i] = 0.0;
                }
                continue;
            }
            let g = c.dot(&misfit) - p.lambda * w[i];
            let next = (w[i] + g / diag[i]).max(0.0);
            if next != w[i] {
                misfit.scaled_add(-(next - w[i]), c);
                w[i] = next;
            }
        }
        let dual = p.dual(&w, &misfit);
        let free: Vec<bool> = w.iter().map(|&v| v > 0.0).collect();
        if kkt_ok(&dual, &free, tol) {
            return Ok((w, sweep));
        }
    }
    Err(Error::NoConvergence(max_iters))
}

/// Largest KKT violation of `weights` for the nonnegative problem, in units
/// of the objective gradient (factor 2 included).
pub fn kkt_violation(bank: &GradientBank, subset: &[usize], weights: &[f64], lambda: f64) -> f64 {
    let resid = bank.weighted_sum(subset, weights) - &bank.target();
    subset
        .iter()
        .zip(weights)
        .map(|(&i, &w)| {
            let g = 2.0 * bank.row(i).dot(&resid) + 2.0 * lambda * w;
            if w > 0.0 {
                g.abs()
            } else {
                (-g).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// `E_λ(X) = min_{w≥0} ‖Σ w_i g_i − b‖² + λ‖w‖²`; `E_λ(∅) = ‖b‖²`.
pub fn eval_e_lambda(bank: &GradientBank, subset: &[usize], lambda: f64) -> Result<f64> {
    Ok(solve_nnls_ridge(bank, subset, &SolverOptions::new(lambda))?.objective_value)
}

/// `r_j = 2 g_jᵀ(Σ_{i∈X} w_i g_i − b) + 2λ w_j` for every element `j` of the
/// bank (`w_j = 0` outside `X`).
pub fn residual_gradient(bank: &GradientBank, subset: &[usize], weights: &[f64], lambda: f64) -> Array1<f64> {
    let resid = bank.weighted_sum(subset, weights) - &bank.target();
    let mut r = bank.rows().dot(&resid) * 2.0;
    for (&i, &w) in subset.iter().zip(weights) {
        r[i] += 2.0 * lambda * w;
    }
    r
}

/// `E_λ` and its maximisation form `F_λ(X) = l_max − E_λ(X)`.
#[derive(Clone, Copy, Debug)]
pub struct MatchObjective<'a> {
    pub bank: &'a GradientBank,
    pub options: SolverOptions,
    pub l_max: f64,
}

impl<'a> MatchObjective<'a> {
    /// Uses `l_max = E_λ(∅) = ‖b‖²`, so `F_λ(∅) = 0`.
    pub fn new(bank: &'a GradientBank, lambda: f64) -> Self {
        Self::with_options(bank, SolverOptions::new(lambda))
    }

    pub fn with_options(bank: &'a GradientBank, options: SolverOptions) -> Self {
        Self { bank, options, l_max: bank.target_norm_sq() }
    }

    pub fn e(&self, subset: &[usize]) -> Result<f64> {
        Ok(solve_nnls_ridge(self.bank, subset, &self.options)?.objective_value)
    }

    pub fn f(&self, subset: &[usize]) -> Result<f64> {
        Ok(self.l_max - self.e(subset)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    fn bank(rows: Array2<f64>, target: Array1<f64>) -> GradientBank {
        GradientBank::new(rows, target).unwrap()
    }

    #[test]
    fn exact_fit_identity() {
        let b = bank(array![[1.0, 0.0], [0.0, 1.0]], array![1.0, 2.0]);
        let s = solve_nnls_ridge(&b, &[0, 1], &SolverOptions::new(0.0)).unwrap();
        assert_abs_diff_eq!(s.weights[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.weights[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.objective_value, 0.0, epsilon = 1e-20);
    }

    #[test]
    fn ridge_shrinks_identity_fit() {
        // (I + I)^{-1} b = b / 2.
        let b = bank(array![[1.0, 0.0], [0.0, 1.0]], array![1.0, 2.0]);
        let s = solve_nnls_ridge(&b, &[0, 1], &SolverOptions::new(1.0)).unwrap();
        assert_abs_diff_eq!(s.weights[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.weights[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn negative_weight_is_clipped() {
        let b = bank(array![[1.0, 0.0]], array![-1.0, 0.0]);
        let s = solve_nnls_ridge(&b, &[0], &SolverOptions::new(0.0)).unwrap();
        assert_eq!(s.weights, vec![0.0]);
        assert_abs_diff_eq!(s.objective_value, 1.0, epsilon = 1e-15);
        let free = solve_nnls_ridge(&b, &[0], &SolverOptions::unconstrained(0.0)).unwrap();
        assert_abs_diff_eq!(free.weights[0], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn empty_subset_gives_target_norm() {
        let b = bank(array![[1.0, 0.0]], array![3.0, 4.0]);
        assert_abs_diff_eq!(eval_e_lambda(&b, &[], 0.5).unwrap(), 25.0);
    }

    #[test]
    fn column_equal_to_target() {
        let b = bank(array![[0.3, -0.2], [1.5, 2.0]], array![1.5, 2.0]);
        assert_abs_diff_eq!(eval_e_lambda(&b, &[1], 0.0).unwrap(), 0.0, epsilon = 1e-20);
    }

    #[test]
    fn residual_gradient_hand_values() {
        let b = bank(array![[1.0, 0.0], [0.0, 1.0]], array![3.0, 4.0]);
        let r = residual_gradient(&b, &[], &[], 0.5);
        assert_eq!(r, array![-6.0, -8.0]);
        let s = solve_nnls_ridge(&b, &[0, 1], &SolverOptions::new(0.0)).unwrap();
        let r = residual_gradient(&b, &[0, 1], &s.weights, 0.0);
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn wide_subset_uses_the_dual_system() {
        // 5 columns in 2 dimensions: the |P| > d branch.
        let rows = array![[1.0, 0.2], [0.5, 1.0], [0.9, 0.9], [0.1, 0.4], [2.0, 0.1]];
        let b = bank(rows, array![3.0, 2.0]);
        let s = solve_nnls_ridge(&b, &[0, 1, 2, 3, 4], &SolverOptions::new(0.5)).unwrap();
        assert!(kkt_violation(&b, &[0, 1, 2, 3, 4], &s.weights, 0.5) < 1e-8);
        let u = solve_nnls_ridge(&b, &[0, 1, 2, 3, 4], &SolverOptions::unconstrained(0.5)).unwrap();
        // Unconstrained optimum dominates.
        assert!(u.objective_value <= s.objective_value + 1e-12);
    }

    #[test]
    fn dependent_columns_without_ridge() {
        let rows = array![[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let b = bank(rows, array![2.0, 3.0]);
        let s = solve_nnls_ridge(&b, &[0, 1, 2, 3], &SolverOptions::new(0.0)).unwrap();
        assert_abs_diff_eq!(s.objective_value, 0.0, epsilon = 1e-18);
    }

    #[test]
    fn warm_start_reaches_same_optimum() {
        let rows = array![[1.0, 0.2, 0.0], [0.5, 1.0, -0.3], [0.9, -0.9, 0.2], [0.1, 0.4, 1.0]];
        let b = bank(rows, array![1.0, 2.0, -0.5]);
        let cold = solve_nnls_ridge(&b, &[0, 1, 2, 3], &SolverOptions::new(0.1)).unwrap();
        let warm = solve_nnls_ridge_warm(&b, &[0, 1, 2, 3], &SolverOptions::new(0.1), Some(&[5.0, 0.0, 3.0, 1.0])).unwrap();
        for (a, c) in cold.weights.iter().zip(&warm.weights) {
            assert_abs_diff_eq!(a, c, epsilon = 1e-10);
        }
    }

    #[test]
    fn f_lambda_is_lmax_minus_e() {
        let b = bank(array![[1.0, 0.0], [0.0, 1.0]], array![3.0, 4.0]);
        let obj = MatchObjective::new(&b, 0.5);
        assert_eq!(obj.f(&[]).unwrap(), 0.0);
        let e = obj.e(&[1]).unwrap();
        assert_eq!(obj.f(&[1]).unwrap(), obj.l_max - e);
    }
}
