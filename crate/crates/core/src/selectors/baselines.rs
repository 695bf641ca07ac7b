use std::time::Instant;

use ndarray::ArrayView1;
use rand::seq::index;

use super::Selection;
use crate::bank::GradientBank;
use crate::error::{invalid, Result};
use crate::rng::{stream_rng, Stream};

/// Taylor approximation of GLISTER: the `k` elements with the largest
/// `g_iᵀ v`, each with weight 1. Ties go to the lower index.
pub fn glister_taylor_select(bank: &GradientBank, val_target: ArrayView1<f64>, budget_k: usize) -> Result<Selection> {
    let start = Instant::now();
    if val_target.len() != bank.dim() {
        return Err(invalid("validation target dimension mismatch"));
    }
    if budget_k == 0 {
        return Err(invalid("budget must be positive"));
    }
    let scores = bank.rows().dot(&val_target);
    let mut order: Vec<usize> = (0..bank.n_elements()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(budget_k);
    let weights = vec![1.0; order.len()];
    let resid = bank.weighted_sum(&order, &weights) - &bank.target();
    Ok(Selection {
        residual: resid.dot(&resid),
        indices: order,
        weights,
        elapsed_s: start.elapsed().as_secs_f64(),
        strategy_tag: "glister".into(),
        residual_trace: Vec::new(),
    })
}

/// `k` of `n` elements uniformly without replacement, ascending, weight 1.
pub fn random_select(n_elements: usize, budget_k: usize, seed: u64) -> Result<Selection> {
    let start = Instant::now();
    if budget_k == 0 || budget_k > n_elements {
        return Err(invalid(format!("budget {budget_k} not in [1, {n_elements}]")));
    }
    let mut indices = index::sample(&mut stream_rng(seed, Stream::Selection), n_elements, budget_k).into_vec();
    indices.sort_unstable();
    Ok(Selection {
        weights: vec![1.0; indices.len()],
        indices,
        residual: f64::NAN,
        elapsed_s: start.elapsed().as_secs_f64(),
        strategy_tag: "random".into(),
        residual_trace: Vec::new(),
    })
}
