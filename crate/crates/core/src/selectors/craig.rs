//! CRAIG: medoids of the gradient space found by greedy maximisation of the
//! facility-location function
//!
//! ```text
//! F̂(X) = Σ_i max_{j∈X} (L − ‖g_i − g_j‖),   L = max_{i,j} ‖g_i − g_j‖ + 1
//! ```
//!
//! which is equivalent to minimising `Ê(X) = Σ_i min_{j∈X} ‖g_i − g_j‖`.
//! Weights are cluster sizes.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use rayon::prelude::*;

use super::Selection;
use crate::bank::GradientBank;
use crate::error::{invalid, Result};

/// Dense pairwise similarities `L − ‖g_i − g_j‖`, row-major.
struct Similarity {
    n: usize,
    sim: Vec<f64>,
}

impl Similarity {
    fn new(bank: &GradientBank) -> Self {
        let n = bank.n_elements();
        let dist: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let gi = bank.row(i);
                (0..n).map(move |j| {
                    let gj = bank.row(j);
                    gi.iter().zip(gj.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                })
            })
            .collect();
        let l_max = dist.iter().copied().fold(0.0, f64::max) + 1.0;
        Self { n, sim: dist.into_iter().map(|d| l_max - d).collect() }
    }

    fn gain(&self, j: usize, best: &[f64]) -> f64 {
        // s is symmetric; row j holds s_{ij} for every i.
        self.sim[j * self.n..(j + 1) * self.n].iter().zip(best).map(|(s, b)| (s - b).max(0.0)).sum()
    }

    fn absorb(&self, j: usize, best: &mut [f64]) {
        for (b, s) in best.iter_mut().zip(&self.sim[j * self.n..(j + 1) * self.n]) {
            if *s > *b {
                *b = *s;
            }
        }
    }
}

#[derive(PartialEq)]
struct Candidate {
    gain: f64,
    index: usize,
    round: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain.total_cmp(&other.gain).then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Lazy greedy facility location.
pub fn craig_select(bank: &GradientBank, budget_k: usize) -> Result<Selection> {
    let start = Instant::now();
    check_budget(bank, budget_k)?;
    let sim = Similarity::new(bank);
    let n = bank.n_elements();
    let k = budget_k.min(n);
    let mut best = vec![0.0; n];
    let mut heap: BinaryHeap<Candidate> = (0..n).map(|j| Candidate { gain: sim.gain(j, &best), index: j, round: 0 }).collect();
    let mut order = Vec::with_capacity(k);
    while order.len() < k {
        let Some(top) = heap.pop() else { break };
        if top.round == order.len() {
            sim.absorb(top.index, &mut best);
            order.push(top.index);
        } else {
            heap.push(Candidate { gain: sim.gain(top.index, &best), index: top.index, round: order.len() });
        }
    }
    Ok(finish(bank, &sim, order, start))
}

/// Plain greedy facility location, re-evaluating every gain each round.
/// Returns the same selection as [`craig_select`].
pub fn craig_select_naive(bank: &GradientBank, budget_k: usize) -> Result<Selection> {
    let start = Instant::now();
    check_budget(bank, budget_k)?;
    let sim = Similarity::new(bank);
    let n = bank.n_elements();
    let mut best = vec![0.0; n];
    let mut chosen = vec![false; n];
    let mut order = Vec::new();
    while order.len() < budget_k.min(n) {
        let mut pick: Option<(usize, f64)> = None;
        for j in (0..n).filter(|&j| !chosen[j]) {
            let g = sim.gain(j, &best);
            if pick.is_none_or(|(_, pg)| g > pg) {
                pick = Some((j, g));
            }
        }
        let (j, _) = pick.expect("an unselected element remains");
        chosen[j] = true;
        sim.absorb(j, &mut best);
        order.push(j);
    }
    Ok(finish(bank, &sim, order, start))
}

fn check_budget(bank: &GradientBank, k: usize) -> Result<()> {
    if k == 0 || bank.n_elements() == 0 {
        return Err(invalid("CRAIG needs a positive budget and a nonempty bank"));
    }
    Ok(())
}

fn finish(bank: &GradientBank, sim: &Similarity, order: Vec<usize>, start: Instant) -> Selection {
    let weights = medoid_weights(sim, &order);
    let resid = bank.weighted_sum(&order, &weights) - &bank.target();
    Selection {
        residual: resid.dot(&resid),
        indices: order,
        weights,
        elapsed_s: start.elapsed().as_secs_f64(),
        strategy_tag: "craig".into(),
        residual_trace: Vec::new(),
    }
}

/// Number of elements whose most similar selected element is each medoid;
/// ties go to the medoid with the lower element index.
fn medoid_weights(sim: &Similarity, selected: &[usize]) -> Vec<f64> {
    let mut counts = vec![0.0; selected.len()];
    for i in 0..sim.n {
        let mut owner = 0;
        for (slot, &j) in selected.iter().enumerate() {
            let s = sim.sim[j * sim.n + i];
            let cur = sim.sim[selected[owner] * sim.n + i];
            if s > cur || (s == cur && j < selected[owner]) {
                owner = slot;
            }
        }
        counts[owner] += 1.0;
    }
    counts
}

/// Cluster-size weights for an arbitrary medoid set.
pub fn craig_weights(bank: &GradientBank, selected: &[usize]) -> Vec<f64> {
    medoid_weights(&Similarity::new(bank), selected)
}

/// `Ê(X) = Σ_i min_{j∈X} ‖g_i − g_j‖`.
pub fn craig_upper_bound(bank: &GradientBank, selected: &[usize]) -> f64 {
    bank.rows()
        .rows()
        .into_iter()
        .map(|gi| {
            selected
                .iter()
                .map(|&j| {
                    let d = &gi - &bank.row(j);
                    d.dot(&d).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}
