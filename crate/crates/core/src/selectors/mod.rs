//! Subset selection strategies and the dispatcher used by the trainer.

mod baselines;
mod craig;
mod omp;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use baselines::{glister_taylor_select, random_select};
pub use craig::{craig_select, craig_select_naive, craig_upper_bound, craig_weights};
pub use omp::omp_select;

use crate::bank::{apportion_budget, build_per_batch, build_per_class, build_per_sample, GradientBank, TargetSource};
use crate::dataset::Dataset;
use crate::error::{invalid, Result};
use crate::model::ModelState;
use crate::solver::SolverOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Element ids in selection order (sample ids, or batch ids in per-batch mode).
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    /// Matching error achieved by the returned weights. `NaN` (serialised as
    /// `null`) when the strategy has no bank to measure against.
    #[serde(with = "nan_as_null")]
    pub residual: f64,
    pub elapsed_s: f64,
    #[serde(rename = "strategy")]
    pub strategy_tag: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub residual_trace: Vec<f64>,
}

impl Selection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub budget_k: usize,
    pub lambda: f64,
    /// Relative stopping tolerance on `E_λ(X) / ‖b‖²`.
    pub epsilon: f64,
    pub per_batch: bool,
    pub batch_size: usize,
    pub per_class: bool,
    pub is_valid: bool,
    pub allow_negative_weights: bool,
    /// Rank OMP candidates by `|r_j| / sqrt(‖g_j‖² + λ)` instead of `|r_j|`.
    pub normalize_scores: bool,
    pub seed: u64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            budget_k: 1,
            lambda: 0.5,
            epsilon: 0.01,
            per_batch: false,
            batch_size: 20,
            per_class: false,
            is_valid: false,
            allow_negative_weights: false,
            normalize_scores: true,
            seed: 0,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget_k == 0 {
            return Err(invalid("budget_k must be at least 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid("epsilon must be positive"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(invalid("lambda must be a nonnegative number"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if self.per_batch && self.per_class {
            return Err(invalid("per-batch and per-class modes cannot be combined"));
        }
        Ok(())
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions { allow_negative_weights: self.allow_negative_weights, ..SolverOptions::new(self.lambda) }
    }

    fn with_budget(&self, k: usize) -> Self {
        Self { budget_k: k, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "grad-match")]
    GradMatch,
    #[serde(rename = "grad-match-pb")]
    GradMatchPB,
    #[serde(rename = "craig")]
    Craig,
    #[serde(rename = "craig-pb")]
    CraigPB,
    #[serde(rename = "glister")]
    Glister,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Full,
        Strategy::Random,
        Strategy::GradMatch,
        Strategy::GradMatchPB,
        Strategy::Craig,
        Strategy::CraigPB,
        Strategy::Glister,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::Random => "random",
            Strategy::GradMatch => "grad-match",
            Strategy::GradMatchPB => "grad-match-pb",
            Strategy::Craig => "craig",
            Strategy::CraigPB => "craig-pb",
            Strategy::Glister => "glister",
        }
    }

    pub fn is_per_batch(self) -> bool {
        matches!(self, Strategy::GradMatchPB | Strategy::CraigPB)
    }

    /// Strategies whose selection needs gradients of the current model.
    pub fn is_adaptive(self) -> bool {
        !matches!(self, Strategy::Full | Strategy::Random)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        let alias = match key.as_str() {
            "gradmatch" => "grad-match",
            "gradmatchpb" | "gradmatch-pb" => "grad-match-pb",
            "craigpb" => "craig-pb",
            other => other,
        };
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == alias)
            .ok_or_else(|| invalid(format!("unknown strategy '{s}'")))
    }
}

/// The datasets a selection may draw on.
#[derive(Clone, Copy, Debug)]
pub struct SelectionData<'a> {
    pub train: &'a Dataset,
    pub validation: Option<&'a Dataset>,
}

/// A selection together with the training samples each element stands for.
#[derive(Clone, Debug, PartialEq)]
pub struct Subset {
    pub selection: Selection,
    /// `groups[i]` lists the sample ids of `selection.indices[i]`.
    pub groups: Vec<Vec<usize>>,
}

impl Subset {
    pub fn is_per_batch(&self) -> bool {
        self.groups.iter().any(|g| g.len() != 1)
    }

    pub fn sample_indices(&self) -> Vec<usize> {
        self.groups.iter().flatten().copied().collect()
    }

    /// Each sample inherits the weight of its element.
    pub fn sample_weights(&self) -> Vec<f64> {
        self.groups.iter().zip(&self.selection.weights).flat_map(|(g, &w)| std::iter::repeat_n(w, g.len())).collect()
    }

    pub fn sample_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

/// Runs `strategy` against the current model.
///
/// Per-batch strategies (and `cfg.per_batch`) select `max(1, round(k/B))`
/// mini-batches; per-class mode splits `k` across classes in proportion to
/// their sizes, solves each class independently and concatenates the results
/// in class order. `cfg.seed` drives the batch partition and random draws.
pub fn select(strategy: Strategy, model: &ModelState, data: SelectionData, cfg: &SelectorConfig) -> Result<Subset> {
    let start = Instant::now();
    cfg.validate()?;
    let train = data.train;
    let n = train.n_samples();
    if n == 0 {
        return Err(invalid("empty training set"));
    }
    let per_batch = cfg.per_batch || strategy.is_per_batch();
    if per_batch && cfg.per_class {
        return Err(invalid("per-batch and per-class modes cannot be combined"));
    }
    let k = cfg.budget_k.min(n);
    let target = if strategy.is_adaptive() {
        TargetSource::from_flag(cfg.is_valid, data.validation)?
    } else {
        TargetSource::Training
    };

    let mut subset = match strategy {
        Strategy::Full => Subset {
            selection: Selection {
                indices: (0..n).collect(),
                weights: vec![1.0; n],
                residual: 0.0,
                elapsed_s: 0.0,
                strategy_tag: String::new(),
                residual_trace: Vec::new(),
            },
            groups: (0..n).map(|i| vec![i]).collect(),
        },
        Strategy::Random if per_batch => {
            let batches = crate::bank::batch_partition(n, cfg.batch_size, cfg.seed);
            let bk = batch_budget(k, cfg.batch_size, batches.len());
            let selection = random_select(batches.len(), bk, cfg.seed)?;
            let groups = selection.indices.iter().map(|&b| batches[b].clone()).collect();
            Subset { selection, groups }
        }
        Strategy::Random if cfg.per_class => {
            let mut parts = Vec::new();
            let budgets = apportion_budget(&train.class_counts(), k);
            for (c, &kc) in budgets.iter().enumerate().filter(|(_, kc)| **kc > 0) {
                let members = train.indices_of_class(c);
                let sel = random_select(members.len(), kc, crate::rng::mix_seed(cfg.seed, c as u64))?;
                let ids = sel.indices.iter().map(|&i| members[i]).collect();
                parts.push((ids, sel));
            }
            merge_class_parts(parts)
        }
        Strategy::Random => {
            let selection = random_select(n, k, cfg.seed)?;
            let groups = selection.indices.iter().map(|&i| vec![i]).collect();
            Subset { selection, groups }
        }
        _ if per_batch => {
            let bank = build_per_batch(model, train, cfg.batch_size, target, cfg.seed)?;
            let bk = batch_budget(k, cfg.batch_size, bank.n_elements());
            let selection = run_on_bank(strategy, &bank, &cfg.with_budget(bk))?;
            let groups = selection.indices.iter().map(|&b| bank.element_map()[b].clone()).collect();
            Subset { selection, groups }
        }
        _ if cfg.per_class => {
            let budgets = apportion_budget(&train.class_counts(), k);
            let parts = budgets
                .par_iter()
                .enumerate()
                .filter(|(_, kc)| **kc > 0)
                .map(|(c, &kc)| {
                    let bank = build_per_class(model, train, c, target)?;
                    let sel = run_on_bank(strategy, &bank, &cfg.with_budget(kc))?;
                    let ids = sel.indices.iter().map(|&i| bank.element_map()[i][0]).collect();
                    Ok((ids, sel))
                })
                .collect::<Result<Vec<_>>>()?;
            merge_class_parts(parts)
        }
        _ => {
            let bank = build_per_sample(model, train, target)?;
            let selection = run_on_bank(strategy, &bank, &cfg.with_budget(k))?;
            let groups = selection.indices.iter().map(|&i| vec![i]).collect();
            Subset { selection, groups }
        }
    };
    subset.selection.strategy_tag = tag(strategy, per_batch, cfg.per_class);
    subset.selection.elapsed_s = start.elapsed().as_secs_f64();
    Ok(subset)
}

/// `max(1, round(k / B))`, capped at the number of batches.
pub fn batch_budget(k: usize, batch_size: usize, n_batches: usize) -> usize {
    ((k as f64 / batch_size as f64).round() as usize).max(1).min(n_batches)
}

/// Selects on an already built bank with the bank-level routine of `strategy`.
pub fn run_on_bank(strategy: Strategy, bank: &GradientBank, cfg: &SelectorConfig) -> Result<Selection> {
    let k = cfg.budget_k.min(bank.n_elements());
    match strategy {
        Strategy::GradMatch | Strategy::GradMatchPB => omp_select(bank, &cfg.with_budget(k)),
        Strategy::Craig | Strategy::CraigPB => craig_select(bank, k),
        Strategy::Glister => glister_taylor_select(bank, bank.target(), k),
        Strategy::Random => random_select(bank.n_elements(), k, cfg.seed),
        Strategy::Full => {
            let indices: Vec<usize> = (0..bank.n_elements()).collect();
            let weights = vec![1.0; indices.len()];
            let r = bank.weighted_sum(&indices, &weights) - &bank.target();
            Ok(Selection {
                residual: r.dot(&r),
                indices,
                weights,
                elapsed_s: 0.0,
                strategy_tag: "full".into(),
                residual_trace: Vec::new(),
            })
        }
    }
}

fn merge_class_parts(parts: Vec<(Vec<usize>, Selection)>) -> Subset {
    let mut indices = Vec::new();
    let mut weights = Vec::new();
    let mut residual = 0.0;
    for (ids, sel) in parts {
        indices.extend(ids);
        weights.extend(sel.weights);
        residual += sel.residual;
    }
    let groups = indices.iter().map(|&i| vec![i]).collect();
    Subset {
        selection: Selection {
            indices,
            weights,
            residual,
            elapsed_s: 0.0,
            strategy_tag: String::new(),
            residual_trace: Vec::new(),
        },
        groups,
    }
}

fn tag(strategy: Strategy, per_batch: bool, per_class: bool) -> String {
    let base = strategy.name();
    if per_batch && !strategy.is_per_batch() && strategy != Strategy::Full {
        format!("{base}-pb")
    } else if per_class && strategy != Strategy::Full {
        format!("{base}-per-class")
    } else {
        base.to_string()
    }
}
