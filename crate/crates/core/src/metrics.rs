//! Post-hoc analysis of runs and brute-force checks of the matching
//! objective's theory on small instances.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bank::GradientBank;
use crate::error::{invalid, Error, Result};
use crate::selectors::{omp_select, SelectorConfig, Strategy};
use crate::solver::{solve_nnls_ridge, SolverOptions};
use crate::trainer::RunRecord;

/// Relative gradient matching error `‖Σ w_i g_i − b‖ / ‖b‖`, with `b` the
/// bank target.
pub fn gradient_error(bank: &GradientBank, indices: &[usize], weights: &[f64]) -> Result<f64> {
    if indices.len() != weights.len() {
        return Err(invalid("indices and weights differ in length"));
    }
    let target = bank.target();
    let norm = target.dot(&target).sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroGradient);
    }
    let diff = bank.weighted_sum(indices, weights) - &target;
    Ok(diff.dot(&diff).sqrt() / norm)
}

/// Percentage of the `n` training samples that appear in none of `selections`.
pub fn redundancy(selections: &[Vec<usize>], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut seen = vec![false; n];
    for &i in selections.iter().flatten() {
        if i < n {
            seen[i] = true;
        }
    }
    100.0 * seen.iter().filter(|s| !**s).count() as f64 / n as f64
}

/// Redundancy of a run; epochs trained on the full set use every sample.
pub fn run_redundancy(record: &RunRecord) -> f64 {
    if record.epochs.iter().any(|e| e.selection_round.is_none()) {
        return 0.0;
    }
    let sets: Vec<Vec<usize>> = record.selections.iter().map(|s| s.sample_indices.clone()).collect();
    redundancy(&sets, record.n_train)
}

/// Aggregate of one configuration over its replicate seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: Strategy,
    pub budget_fraction: f64,
    pub seeds: Vec<u64>,
    /// Test accuracy in percent.
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub time_mean_s: f64,
    pub selection_time_mean_s: f64,
    pub mean_grad_error: Option<f64>,
    pub redundancy_pct: f64,
    pub selections_performed: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize_runs(records: &[RunRecord]) -> Result<RunSummary> {
    let first = records.first().ok_or_else(|| invalid("no run records to summarize"))?;
    if records.iter().any(|r| r.strategy != first.strategy || r.budget_fraction != first.budget_fraction) {
        return Err(invalid("records mix strategies or budgets"));
    }
    let acc: Vec<f64> = records.iter().map(|r| 100.0 * r.final_accuracy).collect();
    let (accuracy_mean, accuracy_std) = mean_std(&acc);
    let time_mean_s = mean_std(&records.iter().map(|r| r.total_time_s).collect::<Vec<_>>()).0;
    let selection_time_mean_s = mean_std(&records.iter().map(|r| r.selection_time_s()).collect::<Vec<_>>()).0;
    let errs: Vec<f64> = records.iter().filter_map(RunRecord::mean_grad_error).collect();
    let selections_performed = records.iter().map(|r| r.selections.len()).sum();
    let mut notes = Vec::new();
    if selections_performed == 0 && first.strategy != Strategy::Full {
        notes.push("no selection performed".to_string());
    }
    Ok(RunSummary {
        strategy: first.strategy,
        budget_fraction: first.budget_fraction,
        seeds: records.iter().map(|r| r.seed).collect(),
        accuracy_mean,
        accuracy_std,
        time_mean_s,
        selection_time_mean_s,
        mean_grad_error: (!errs.is_empty()).then(|| mean_std(&errs).0),
        redundancy_pct: mean_std(&records.iter().map(run_redundancy).collect::<Vec<_>>()).0,
        selections_performed,
        notes,
    })
}

/// One row of the comparison against full training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub strategy: Strategy,
    pub budget_fraction: f64,
    pub final_accuracy: f64,
    /// Full-training accuracy minus this accuracy, in percentage points.
    pub relative_error_vs_full: Option<f64>,
    /// Full-training wall time over this run's wall time.
    pub speedup: Option<f64>,
    pub mean_grad_error: Option<f64>,
    pub redundancy_pct: f64,
}

/// Compares every summary with the full-training summary among them, if any.
pub fn experiment_table(summaries: &[RunSummary]) -> Vec<ExperimentSummary> {
    let full = summaries.iter().find(|s| s.strategy == Strategy::Full);
    summaries
        .iter()
        .map(|s| ExperimentSummary {
            strategy: s.strategy,
            budget_fraction: s.budget_fraction,
            final_accuracy: s.accuracy_mean,
            relative_error_vs_full: full.map(|f| f.accuracy_mean - s.accuracy_mean),
            speedup: full.filter(|_| s.time_mean_s > 0.0).map(|f| f.time_mean_s / s.time_mean_s),
            mean_grad_error: s.mean_grad_error,
            redundancy_pct: s.redundancy_pct,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradErrorRow {
    pub strategy: Strategy,
    pub budget_fraction: f64,
    pub mean_error: f64,
    pub runs: usize,
}

/// Mean gradient error per (strategy, budget), averaging each run's mean over
/// its selection epochs. Runs without recorded errors are skipped.
pub fn gradient_error_table(records: &[RunRecord]) -> Vec<GradErrorRow> {
    let mut groups: BTreeMap<(String, u64), (Strategy, f64, Vec<f64>)> = BTreeMap::new();
    for r in records {
        if let Some(e) = r.mean_grad_error() {
            groups
                .entry((r.strategy.name().to_string(), r.budget_fraction.to_bits()))
                .or_insert_with(|| (r.strategy, r.budget_fraction, Vec::new()))
                .2
                .push(e);
        }
    }
    groups
        .into_values()
        .map(|(strategy, budget_fraction, errs)| GradErrorRow {
            strategy,
            budget_fraction,
            mean_error: mean_std(&errs).0,
            runs: errs.len(),
        })
        .collect()
}

fn opt_cell(v: Option<f64>, digits: usize) -> String {
    v.filter(|x| x.is_finite()).map(|x| format!("{x:.digits$}")).unwrap_or_default()
}

pub fn experiment_csv(rows: &[ExperimentSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["strategy", "budget_fraction", "final_accuracy", "relative_error", "speedup", "mean_grad_error", "redundancy_pct"])?;
    for r in rows {
        w.write_record([
            r.strategy.name().to_string(),
            format!("{}", r.budget_fraction),
            format!("{:.4}", r.final_accuracy),
            opt_cell(r.relative_error_vs_full, 4),
            opt_cell(r.speedup, 4),
            opt_cell(r.mean_grad_error, 6),
            format!("{:.2}", r.redundancy_pct),
        ])?;
    }
    csv_string(w)
}

pub fn experiment_markdown(rows: &[ExperimentSummary]) -> String {
    let mut s = String::from("| strategy | budget | accuracy (%) | rel. error (pp) | speedup | grad error | redundancy (%) |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {:.0}% | {:.2} | {} | {} | {} | {:.1} |",
            r.strategy,
            100.0 * r.budget_fraction,
            r.final_accuracy,
            opt_cell(r.relative_error_vs_full, 2),
            opt_cell(r.speedup, 2),
            opt_cell(r.mean_grad_error, 4),
            r.redundancy_pct
        );
    }
    s
}

/// `speedup,relative_error` points for plotting; one row per summary.
pub fn scatter_csv(rows: &[ExperimentSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["strategy", "budget_fraction", "speedup", "relative_error"])?;
    for r in rows {
        w.write_record([
            r.strategy.name().to_string(),
            format!("{}", r.budget_fraction),
            opt_cell(r.speedup, 4),
            opt_cell(r.relative_error_vs_full, 4),
        ])?;
    }
    csv_string(w)
}

pub fn gradient_error_csv(rows: &[GradErrorRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["strategy", "budget_fraction", "mean_error", "runs"])?;
    for r in rows {
        w.write_record([r.strategy.name().to_string(), format!("{}", r.budget_fraction), format!("{:.6}", r.mean_error), r.runs.to_string()])?;
    }
    csv_string(w)
}

pub fn gradient_error_markdown(rows: &[GradErrorRow]) -> String {
    let mut s = String::from("| strategy | budget | mean gradient error | runs |\n|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(s, "| {} | {:.0}% | {:.4} | {} |", r.strategy, 100.0 * r.budget_fraction, r.mean_error, r.runs);
    }
    s
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub const MAX_EXHAUSTIVE: usize = 12;

/// `F_λ` for every subset of a small bank, indexed by bitmask.
struct Exhaustive {
    n: usize,
    f: Vec<f64>,
}

impl Exhaustive {
    /// Evaluates every subset of size at most `max_size`; larger masks are NaN.
    fn new(bank: &GradientBank, lambda: f64, max_size: usize) -> Result<Self> {
        let n = bank.n_elements();
        if n > MAX_EXHAUSTIVE {
            return Err(Error::TooLarge(n));
        }
        let l_max = bank.target_norm_sq();
        let opts = SolverOptions::new(lambda);
        let mut f = vec![f64::NAN; 1 << n];
        for (mask, slot) in f.iter_mut().enumerate() {
            if (mask.count_ones() as usize) > max_size {
                continue;
            }
            let set = members(mask, n);
            *slot = l_max - solve_nnls_ridge(bank, &set, &opts)?.objective_value;
        }
        Ok(Self { n, f })
    }

    fn masks_up_to(&self, size: usize) -> impl Iterator<Item = usize> + '_ {
        (0..1usize << self.n).filter(move |m| m.count_ones() as usize <= size)
    }
}

fn members(mask: usize, n: usize) -> Vec<usize> {
    (0..n).filter(|i| mask >> i & 1 == 1).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifierReport {
    pub optimum_f: f64,
    pub optimum_set: Vec<usize>,
    pub omp_f: f64,
    pub omp_set: Vec<usize>,
    /// `min F(j|S) / F(j|T)` over `S ⊆ T`, `|T| ≤ k`, `j ∉ T`, `F(j|T) > 1e-12`;
    /// `+∞` when no pair qualifies.
    pub gamma_hat: f64,
    /// `min Σ_{j∈S} F(j|L) / F(S|L)` over disjoint `L`, `S` with `|L|, |S| ≤ k`
    /// and `F(S|L) > 1e-12`.
    pub submodularity_ratio: f64,
    /// `λ / (λ + k ∇²_max)` with `∇_max` the largest row norm.
    pub bound: f64,
}

/// Exhaustive optimum, OMP value and weak-submodularity constants of `F_λ`
/// for cardinality `k`. Banks larger than [`MAX_EXHAUSTIVE`] are rejected.
pub fn brute_force_verifier(bank: &GradientBank, k: usize, lambda: f64) -> Result<VerifierReport> {
    let n = bank.n_elements();
    if n > MAX_EXHAUSTIVE {
        return Err(Error::TooLarge(n));
    }
    if k == 0 || k > n {
        return Err(invalid(format!("k = {k} not in [1, {n}]")));
    }
    let ex = Exhaustive::new(bank, lambda, (2 * k).min(n))?;
    let f = &ex.f;

    let (mut best_mask, mut best) = (0usize, f64::NEG_INFINITY);
    for m in ex.masks_up_to(k) {
        if f[m] > best {
            best = f[m];
            best_mask = m;
        }
    }

    let cfg = SelectorConfig { budget_k: k, lambda, epsilon: f64::MIN_POSITIVE, ..SelectorConfig::default() };
    let omp = omp_select(bank, &cfg)?;
    let omp_f = bank.target_norm_sq() - omp.residual;

    let mut gamma_hat = f64::INFINITY;
    for t in ex.masks_up_to(k) {
        for j in (0..n).filter(|j| t >> j & 1 == 0) {
            let denom = f[t | 1 << j] - f[t];
            if denom <= 1e-12 {
                continue;
            }
            // All submasks s of t, including t itself and the empty set.
            let mut s = t;
            loop {
                let ratio = (f[s | 1 << j] - f[s]) / denom;
                gamma_hat = gamma_hat.min(ratio);
                if s == 0 {
                    break;
                }
                s = (s - 1) & t;
            }
        }
    }

    let mut ratio = f64::INFINITY;
    for l in ex.masks_up_to(k) {
        let rest = !l & ((1 << n) - 1);
        let mut s = rest;
        while s != 0 {
            if s.count_ones() as usize <= k {
                let joint = f[l | s] - f[l];
                if joint > 1e-12 {
                    let singles: f64 = members(s, n).iter().map(|&j| f[l | 1 << j] - f[l]).sum();
                    ratio = ratio.min(singles / joint);
                }
            }
            s = (s - 1) & rest;
        }
    }

    let grad_max = bank.max_row_norm();
    Ok(VerifierReport {
        optimum_f: best,
        optimum_set: members(best_mask, n),
        omp_f,
        omp_set: omp.indices,
        gamma_hat,
        submodularity_ratio: ratio,
        bound: lambda / (lambda + k as f64 * grad_max * grad_max),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetCoverReport {
    pub omp_size: usize,
    /// Whether OMP stopped because `E_λ / ‖b‖² < ε`.
    pub stopped_by_epsilon: bool,
    /// Size of the smallest set with `E_λ ≤ ε ‖b‖²`, if one exists.
    pub optimal_size: Option<usize>,
    /// `λ / (λ + (|X_omp| + |X*|) ∇²_max)`.
    pub gamma_bound: f64,
    /// `(|X*| / γ) ln(1/ε)`.
    pub size_limit: f64,
    pub holds: bool,
}

/// Runs ε-stopped OMP without a cardinality limit and compares its size with
/// the smallest subset reaching the same relative error.
pub fn set_cover_check(bank: &GradientBank, lambda: f64, epsilon: f64) -> Result<SetCoverReport> {
    let n = bank.n_elements();
    if n > MAX_EXHAUSTIVE {
        return Err(Error::TooLarge(n));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(invalid("relative epsilon must lie in (0, 1)"));
    }
    let l_max = bank.target_norm_sq();
    let cfg = SelectorConfig { budget_k: n, lambda, epsilon, ..SelectorConfig::default() };
    let omp = omp_select(bank, &cfg)?;
    let stopped_by_epsilon = l_max > 0.0 && omp.residual / l_max < epsilon;

    let ex = Exhaustive::new(bank, lambda, n)?;
    let optimal_size = (0..1usize << n)
        .filter(|&m| l_max - ex.f[m] <= epsilon * l_max)
        .map(|m| m.count_ones() as usize)
        .min();

    let grad_max = bank.max_row_norm();
    let (gamma_bound, size_limit, holds) = match optimal_size {
        Some(opt) => {
            let k = (omp.indices.len() + opt) as f64;
            let gamma = lambda / (lambda + k * grad_max * grad_max);
            let limit = opt as f64 / gamma * (1.0 / epsilon).ln();
            (gamma, limit, omp.indices.len() as f64 <= limit)
        }
        None => (f64::NAN, f64::NAN, false),
    };
    Ok(SetCoverReport { omp_size: omp.indices.len(), stopped_by_epsilon, optimal_size, gamma_bound, size_limit, holds })
}
