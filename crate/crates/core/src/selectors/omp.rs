use std::time::Instant;

use ndarray::Array1;

use super::{Selection, SelectorConfig};
use crate::bank::GradientBank;
use crate::error::{invalid, Error, Result};
use crate::solver::solve_nnls_ridge_warm;

/// Orthogonal matching pursuit on the regularised matching error.
///
/// Starting from `X = ∅`, repeatedly adds the unselected element with the
/// strongest residual-gradient score and refits all weights, until
/// `|X| = k` or `E_λ(X)/‖b‖² < ε`. Selected elements are masked out of the
/// argmax; ties go to the lowest index.
///
/// With nonnegative weights only elements whose residual gradient is
/// negative (those that can lower the error) are eligible. With
/// `normalize_scores` the score `|r_j|` is divided by `sqrt(‖g_j‖² + λ)`,
/// which is the exact single-element gain ranking; for equal-norm rows it
/// orders elements identically to the raw `|r_j|`.
///
/// `residual_trace` records `E_λ` before the first pick and after every
/// refit.
pub fn omp_select(bank: &GradientBank, cfg: &SelectorConfig) -> Result<Selection> {
    let start = Instant::now();
    let n = bank.n_elements();
    let k = cfg.budget_k;
    if k == 0 || k > n {
        return Err(invalid(format!("budget {k} not in [1, {n}]")));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(invalid("epsilon must be positive"));
    }
    if bank.rows().iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateBank);
    }
    let opts = cfg.solver_options();
    let norm = bank.target_norm_sq();
    let scale: Vec<f64> = bank
        .rows()
        .rows()
        .into_iter()
        .map(|r| {
            let sq = r.dot(&r);
            if sq == 0.0 {
                0.0
            } else if cfg.normalize_scores {
                (sq + cfg.lambda).sqrt()
            } else {
                1.0
            }
        })
        .collect();

    let mut indices: Vec<usize> = Vec::with_capacity(k);
    let mut weights: Vec<f64> = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let mut objective = norm;
    let mut trace = vec![objective];
    let mut resid: Array1<f64> = -&bank.target();

    while norm > 0.0 && indices.len() < k && objective / norm >= cfg.epsilon {
        let corr = bank.rows().dot(&resid);
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if chosen[j] || scale[j] == 0.0 {
                continue;
            }
            let r = 2.0 * corr[j];
            let raw = if cfg.allow_negative_weights { r.abs() } else { -r };
            let score = raw / scale[j];
            if score > 0.0 && best.is_none_or(|(_, s)| score > s) {
                best = Some((j, score));
            }
        }
        let Some((e, _)) = best else { break };
        chosen[e] = true;
        indices.push(e);
        weights.push(0.0);
        let sol = solve_nnls_ridge_warm(bank, &indices, &opts, Some(&weights))?;
        weights = sol.weights;
        objective = sol.objective_value;
        resid = sol.residual_vector;
        trace.push(objective);
    }

    Ok(Selection {
        indices,
        weights,
        residual: objective,
        elapsed_s: start.elapsed().as_secs_f64(),
        strategy_tag: "grad-match".into(),
        residual_trace: trace,
    })
}
