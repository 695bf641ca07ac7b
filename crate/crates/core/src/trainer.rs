//! Adaptive subset training: optional full-data warm start, then weighted
//! mini-batch SGD on a subset that is re-selected every `R` epochs.

use std::f64::consts::PI;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bank::{build_per_sample, GradientBank, TargetSource};
use crate::dataset::Dataset;
use crate::error::{invalid, Error, Result};
use crate::metrics::gradient_error;
use crate::model::{ModelState, Sgd, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY};
use crate::rng::{mix_seed, stream_rng, Stream};
use crate::selectors::{select, Selection, SelectionData, SelectorConfig, Strategy, Subset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub selection_interval: usize,
    pub budget_fraction: f64,
    pub strategy: Strategy,
    pub warm_kappa: f64,
    pub lr0: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub is_valid: bool,
    pub lambda: f64,
    pub epsilon: f64,
    /// Select mini-batches instead of samples (implied by the `-pb` strategies).
    pub per_batch: bool,
    pub per_class: bool,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Record the gradient error and alignment of every selection.
    pub diagnostics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_epochs: 100,
            selection_interval: 20,
            budget_fraction: 0.1,
            strategy: Strategy::GradMatchPB,
            warm_kappa: 0.5,
            lr0: 0.01,
            batch_size: 20,
            seed: 0,
            is_valid: false,
            lambda: 0.5,
            epsilon: 0.01,
            per_batch: false,
            per_class: false,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            diagnostics: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(invalid("total_epochs must be at least 1"));
        }
        if self.selection_interval == 0 {
            return Err(invalid("selection_interval must be at least 1"));
        }
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(invalid("budget_fraction must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.warm_kappa) {
            return Err(invalid("warm_kappa must be in [0, 1]"));
        }
        if !(self.lr0 > 0.0) {
            return Err(invalid("lr0 must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        self.selector(1, 0).validate()
    }

    /// Sample budget `max(1, round(fraction · n))`.
    pub fn budget_k(&self, n: usize) -> usize {
        ((self.budget_fraction * n as f64).round() as usize).clamp(1, n.max(1))
    }

    pub fn selector(&self, budget_k: usize, seed: u64) -> SelectorConfig {
        SelectorConfig {
            budget_k,
            lambda: self.lambda,
            epsilon: self.epsilon,
            per_batch: self.per_batch,
            batch_size: self.batch_size,
            per_class: self.per_class,
            is_valid: self.is_valid,
            seed,
            ..SelectorConfig::default()
        }
    }
}

/// `(T_f, T_s)` with `T_s = round(κT)` and `T_f = round(T_s · fraction)`.
pub fn warm_schedule(total_epochs: usize, kappa: f64, budget_fraction: f64) -> (usize, usize) {
    let t_s = (kappa * total_epochs as f64).round() as usize;
    let t_f = (t_s as f64 * budget_fraction).round() as usize;
    (t_f.min(total_epochs), t_s.min(total_epochs))
}

pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    lr0 * 0.5 * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss over the whole training set after the epoch.
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub lr: f64,
    pub selection_time_s: f64,
    pub train_time_s: f64,
    pub subset_size: usize,
    /// Index into `RunRecord::selections` of the subset trained on, if any.
    pub selection_round: Option<usize>,
    pub grad_error: Option<f64>,
    pub alignment_cos: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionEvent {
    pub epoch: usize,
    pub strategy: String,
    /// Training samples covered by the selection.
    pub sample_indices: Vec<usize>,
    /// Selection-level weights (per batch in per-batch mode).
    pub weights: Vec<f64>,
    pub element_count: usize,
    pub residual: Option<f64>,
    pub elapsed_s: f64,
    pub grad_error: Option<f64>,
    pub alignment: Option<Alignment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: Strategy,
    pub budget_fraction: f64,
    pub seed: u64,
    pub n_train: usize,
    pub warm_epochs: usize,
    pub epochs: Vec<EpochRecord>,
    pub selections: Vec<SelectionEvent>,
    pub final_accuracy: f64,
    pub total_time_s: f64,
    pub speedup_vs_full: Option<f64>,
}

impl RunRecord {
    /// A copy with every wall-clock field zeroed, for determinism checks.
    pub fn without_timings(&self) -> RunRecord {
        let mut r = self.clone();
        r.total_time_s = 0.0;
        r.speedup_vs_full = None;
        for e in &mut r.epochs {
            e.selection_time_s = 0.0;
            e.train_time_s = 0.0;
        }
        for s in &mut r.selections {
            s.elapsed_s = 0.0;
        }
        r
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    pub fn selection_time_s(&self) -> f64 {
        self.epochs.iter().map(|e| e.selection_time_s).sum()
    }

    /// Mean gradient error over the selection epochs that recorded one.
    pub fn mean_grad_error(&self) -> Option<f64> {
        let errs: Vec<f64> = self.selections.iter().filter_map(|s| s.grad_error).collect();
        (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
    }

    pub fn set_speedup(&mut self, full_time_s: f64) {
        self.speedup_vs_full = (self.total_time_s > 0.0).then(|| full_time_s / self.total_time_s);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub validation: Option<&'a Dataset>,
    pub test: &'a Dataset,
}

/// Alignment of a weighted subset gradient with the target gradient, and the
/// step size below which a gradient step on the subset loss is guaranteed to
/// lower the target loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub dot: f64,
    pub cos_angle: f64,
    pub lr_bound: f64,
}

/// Estimates the constants of the step-size condition
/// `lr ≤ 2‖∇L‖ cos Θ / (𝓛 σ)`.
///
/// `𝓛` bounds the curvature of the mean softmax cross-entropy in the
/// output-layer parameters: the softmax Jacobian has spectral norm at most
/// 1/2, so `𝓛 = ½ · max_i ‖(1, h_i)‖²`. `σ` is the running maximum of the
/// norm of the normalised subset gradient `Σ (w_i/Σw) g_i` over all
/// observations so far.
#[derive(Clone, Debug, PartialEq)]
pub struct LrBoundEstimator {
    pub smoothness: f64,
    pub sigma: f64,
}

impl LrBoundEstimator {
    pub fn new(smoothness: f64) -> Self {
        Self { smoothness, sigma: 0.0 }
    }

    pub fn for_model(model: &ModelState, train: &Dataset) -> Self {
        let max_sq = (0..train.n_samples())
            .map(|i| 1.0 + model.penultimate(train.row(i)).iter().map(|v| v * v).sum::<f64>())
            .fold(0.0, f64::max);
        Self::new(0.5 * max_sq)
    }
}

/// `dot = (Σ w_i g_i)ᵀ b`, `cos = dot / (‖Σ w_i g_i‖ ‖b‖)`. The bound uses
/// the mean gradient `b / n` as `∇L`.
pub fn alignment_diagnostic(bank: &GradientBank, sel: &Selection, est: &mut LrBoundEstimator) -> Result<Alignment> {
    if sel.is_empty() {
        return Err(invalid("alignment of an empty selection"));
    }
    let sum = bank.weighted_sum(&sel.indices, &sel.weights);
    let target = bank.target();
    let (sn, tn) = (sum.dot(&sum).sqrt(), target.dot(&target).sqrt());
    if sn == 0.0 || tn == 0.0 {
        return Err(Error::ZeroGradient);
    }
    let dot = sum.dot(&target);
    let cos_angle = dot / (sn * tn);
    let wsum: f64 = sel.weights.iter().sum();
    est.sigma = est.sigma.max(sn / wsum);
    let grad_mean = tn / bank.n_elements() as f64;
    let lr_bound = if est.smoothness > 0.0 && est.sigma > 0.0 {
        2.0 * grad_mean * cos_angle / (est.smoothness * est.sigma)
    } else {
        f64::INFINITY
    };
    Ok(Alignment { dot, cos_angle, lr_bound })
}

/// Runs the adaptive training loop.
///
/// The first `T_f` epochs (see [`warm_schedule`]) train on the full training
/// set. Selection happens at the first subset epoch and every
/// `selection_interval` epochs after that; in between the previous subset is
/// reused. Each epoch visits every selected element once in a freshly
/// shuffled order: samples are grouped into mini-batches of `batch_size`,
/// while in per-batch mode each selected batch is one mini-batch.
///
/// Reported time covers selection and SGD steps, not evaluation or
/// diagnostics.
pub fn train(cfg: &TrainConfig, data: TrainData, model_init: &ModelState) -> Result<(ModelState, RunRecord)> {
    run(cfg, data, model_init, None)
}

/// Full-data training stopped before the first epoch that would start with
/// the cumulative wall time already at or past `budget_time_s`.
pub fn full_early_stop_baseline(
    cfg: &TrainConfig,
    budget_time_s: f64,
    data: TrainData,
    model_init: &ModelState,
) -> Result<(ModelState, RunRecord)> {
    let full = TrainConfig { strategy: Strategy::Full, budget_fraction: 1.0, ..cfg.clone() };
    run(&full, data, model_init, Some(budget_time_s))
}

fn run(
    cfg: &TrainConfig,
    data: TrainData,
    model_init: &ModelState,
    time_budget: Option<f64>,
) -> Result<(ModelState, RunRecord)> {
    cfg.validate()?;
    let train = data.train;
    if train.is_empty() || data.test.is_empty() {
        return Err(invalid("training and test sets must be nonempty"));
    }
    model_init.check_compatible(train)?;
    model_init.check_compatible(data.test)?;
    if let Some(v) = data.validation {
        model_init.check_compatible(v)?;
    }
    let n = train.n_samples();
    let t_total = cfg.total_epochs;
    let (t_f, _) = if cfg.strategy == Strategy::Full { (t_total, 0) } else { warm_schedule(t_total, cfg.warm_kappa, cfg.budget_fraction) };
    let k = cfg.budget_k(n);

    let mut model = model_init.clone();
    let mut opt = Sgd::with_params(model.param_count(), cfg.momentum, cfg.weight_decay);
    let mut shuffle_rng = stream_rng(cfg.seed, Stream::Shuffle);
    let full_subset = full_set(n);
    let mut current: Option<Subset> = None;
    let mut current_round: Option<usize> = None;
    let mut estimator = cfg.diagnostics.then(|| LrBoundEstimator::for_model(&model, train));

    let mut record = RunRecord {
        strategy: cfg.strategy,
        budget_fraction: cfg.budget_fraction,
        seed: cfg.seed,
        n_train: n,
        warm_epochs: t_f,
        epochs: Vec::with_capacity(t_total),
        selections: Vec::new(),
        final_accuracy: model.accuracy(data.test),
        total_time_s: 0.0,
        speedup_vs_full: None,
    };

    for epoch in 0..t_total {
        if time_budget.is_some_and(|b| record.total_time_s >= b) {
            break;
        }
        let lr = cosine_lr(epoch, t_total, cfg.lr0);
        let mut selection_time_s = 0.0;
        let mut grad_error = None;
        let mut alignment_cos = None;
        let in_subset_phase = epoch >= t_f;

        if in_subset_phase && (epoch - t_f) % cfg.selection_interval == 0 {
            let start = Instant::now();
            let sel_cfg = cfg.selector(k, mix_seed(cfg.seed, epoch as u64));
            let subset = select(cfg.strategy, &model, SelectionData { train, validation: data.validation }, &sel_cfg)?;
            selection_time_s = start.elapsed().as_secs_f64();
            let mut event = SelectionEvent {
                epoch,
                strategy: subset.selection.strategy_tag.clone(),
                sample_indices: subset.sample_indices(),
                weights: subset.selection.weights.clone(),
                element_count: subset.selection.len(),
                residual: subset.selection.residual.is_finite().then_some(subset.selection.residual),
                elapsed_s: selection_time_s,
                grad_error: None,
                alignment: None,
            };
            if let Some(est) = estimator.as_mut().filter(|_| !subset.selection.is_empty()) {
                let bank = build_per_sample(&model, train, TargetSource::Training)?;
                let err = gradient_error(&bank, &event.sample_indices, &subset.sample_weights())?;
                let sample_sel = Selection {
                    indices: event.sample_indices.clone(),
                    weights: subset.sample_weights(),
                    ..subset.selection.clone()
                };
                let al = alignment_diagnostic(&bank, &sample_sel, est).ok();
                grad_error = Some(err);
                alignment_cos = al.map(|a| a.cos_angle);
                event.grad_error = grad_error;
                event.alignment = al;
            }
            record.selections.push(event);
            // An empty selection (no element can lower the error) keeps the
            // previous subset.
            if !subset.selection.is_empty() {
                current = Some(subset);
                current_round = Some(record.selections.len() - 1);
            }
        }

        let (subset, round) = match (&current, in_subset_phase) {
            (Some(s), true) => (s, current_round),
            _ => (&full_subset, None),
        };
        let start = Instant::now();
        run_epoch(&mut model, &mut opt, train, subset, cfg.batch_size, lr, &mut shuffle_rng, epoch)?;
        let train_time_s = start.elapsed().as_secs_f64();
        record.total_time_s += selection_time_s + train_time_s;

        record.epochs.push(EpochRecord {
            epoch,
            train_loss: model.mean_loss(train),
            test_accuracy: model.accuracy(data.test),
            lr,
            selection_time_s,
            train_time_s,
            subset_size: subset.sample_count(),
            selection_round: round,
            grad_error,
            alignment_cos,
        });
    }
    record.final_accuracy = model.accuracy(data.test);
    Ok((model, record))
}

fn full_set(n: usize) -> Subset {
    Subset {
        selection: Selection {
            indices: (0..n).collect(),
            weights: vec![1.0; n],
            residual: 0.0,
            elapsed_s: 0.0,
            strategy_tag: Strategy::Full.name().into(),
            residual_trace: Vec::new(),
        },
        groups: (0..n).map(|i| vec![i]).collect(),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut ModelState,
    opt: &mut Sgd,
    train: &Dataset,
    subset: &Subset,
    batch_size: usize,
    lr: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
    epoch: usize,
) -> Result<()> {
    let batches: Vec<(Vec<usize>, Vec<f64>)> = if subset.is_per_batch() {
        let mut order: Vec<usize> = (0..subset.groups.len()).collect();
        order.shuffle(rng);
        order
            .into_iter()
            .map(|g| (subset.groups[g].clone(), vec![subset.selection.weights[g]; subset.groups[g].len()]))
            .collect()
    } else {
        let ids = subset.sample_indices();
        let ws = subset.sample_weights();
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.shuffle(rng);
        order
            .chunks(batch_size)
            .map(|c| (c.iter().map(|&p| ids[p]).collect(), c.iter().map(|&p| ws[p]).collect()))
            .collect()
    };
    for (idx, w) in batches {
        if w.iter().sum::<f64>() <= 0.0 {
            continue;
        }
        let (loss, grad) = model.batch_gradient(train, &idx, Some(&w))?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        opt.step(model, &grad, lr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_gaussian_blobs, split, SplitSpec};
    use crate::model::Arch;
    use approx::assert_abs_diff_eq;

    fn data() -> (Dataset, Dataset, Dataset) {
        let d = make_gaussian_blobs(60, 2, 3, 4.0, 3).unwrap();
        split(&d, &SplitSpec { train_fraction: 0.7, validation_fraction: 0.15, seed: 3 }).unwrap()
    }

    #[test]
    fn warm_schedule_examples() {
        assert_eq!(warm_schedule(300, 0.5, 0.1), (15, 150));
        assert_eq!(warm_schedule(300, 0.0, 0.1).0, 0);
        assert_eq!(warm_schedule(40, 1.0, 1.0), (40, 40));
    }

    #[test]
    fn cosine_lr_examples() {
        assert_eq!(cosine_lr(0, 300, 0.01), 0.01);
        assert_abs_diff_eq!(cosine_lr(150, 300, 0.01), 0.005, epsilon = 1e-15);
        let expect = 0.01 * 0.5 * (1.0 + (299.0 * PI / 300.0).cos());
        assert_abs_diff_eq!(cosine_lr(299, 300, 0.01), expect, epsilon = 1e-18);
        assert_abs_diff_eq!(cosine_lr(299, 300, 0.01), 2.74e-7, epsilon = 1e-9);
    }

    #[test]
    fn selection_epochs_follow_interval() {
        let (tr, va, te) = data();
        let m = ModelState::init(Arch::LogisticRegression, 3, 2, 0).unwrap();
        let cfg = TrainConfig {
            total_epochs: 10,
            selection_interval: 3,
            warm_kappa: 0.0,
            strategy: Strategy::GradMatch,
            budget_fraction: 0.2,
            ..TrainConfig::default()
        };
        let (_, rec) = train(&cfg, TrainData { train: &tr, validation: Some(&va), test: &te }, &m).unwrap();
        let epochs: Vec<usize> = rec.selections.iter().map(|s| s.epoch).collect();
        assert_eq!(epochs, vec![0, 3, 6, 9]);
        assert_eq!(rec.epochs.len(), 10);
        assert_eq!(rec.epochs[4].selection_round, Some(1));
        assert_eq!(rec.epochs[5].selection_round, Some(1));
    }

    #[test]
    fn interval_equal_to_epochs_selects_once() {
        let (tr, _, te) = data();
        let m = ModelState::init(Arch::LogisticRegression, 3, 2, 0).unwrap();
        let cfg = TrainConfig { total_epochs: 6, selection_interval: 6, warm_kappa: 0.0, strategy: Strategy::Craig, ..TrainConfig::default() };
        let (_, rec) = train(&cfg, TrainData { train: &tr, validation: None, test: &te }, &m).unwrap();
        assert_eq!(rec.selections.len(), 1);
        assert_eq!(rec.selections[0].epoch, 0);
    }

    #[test]
    fn warm_start_delays_selection() {
        let (tr, _, te) = data();
        let m = ModelState::init(Arch::LogisticRegression, 3, 2, 0).unwrap();
        let cfg = TrainConfig { total_epochs: 20, warm_kappa: 0.5, budget_fraction: 0.3, strategy: Strategy::Glister, ..TrainConfig::default() };
        let (_, rec) = train(&cfg, TrainData { train: &tr, validation: None, test: &te }, &m).unwrap();
        assert_eq!(rec.warm_epochs, 3);
        assert_eq!(rec.selections[0].epoch, 3);
        assert!(rec.epochs[..3].iter().all(|e| e.subset_size == tr.n_samples()));
    }

    #[test]
    fn random_full_budget_matches_full_training() {
        let (tr, _, te) = data();
        let m = ModelState::init(Arch::Mlp { hidden_width: 4 }, 3, 2, 2).unwrap();
        let base = TrainConfig { total_epochs: 5, warm_kappa: 0.0, budget_fraction: 1.0, seed: 9, ..TrainConfig::default() };
        let d = TrainData { train: &tr, validation: None, test: &te };
        let (full, _) = train(&TrainConfig { strategy: Strategy::Full, ..base.clone() }, d, &m).unwrap();
        let (rnd, _) = train(&TrainConfig { strategy: Strategy::Random, ..base }, d, &m).unwrap();
        assert_eq!(full.theta(), rnd.theta());
    }

    #[test]
    fn early_stop_with_zero_budget_returns_init() {
        let (tr, _, te) = data();
        let m = ModelState::init(Arch::LogisticRegression, 3, 2, 0).unwrap();
        let cfg = TrainConfig { total_epochs: 5, ..TrainConfig::default() };
        let d = TrainData { train: &tr, validation: None, test: &te };
        let (model, rec) = full_early_stop_baseline(&cfg, 0.0, d, &m).unwrap();
        assert!(rec.epochs.is_empty());
        assert_eq!(model.theta(), m.theta());
        let (_, rec) = full_early_stop_baseline(&cfg, f64::INFINITY, d, &m).unwrap();
        assert_eq!(rec.epochs.len(), 5);
    }

    #[test]
    fn alignment_of_exact_match_is_one() {
        let bank = GradientBank::new(ndarray::array![[1.0, 0.0], [0.0, 1.0]], ndarray::array![2.0, 3.0]).unwrap();
        let sel = Selection {
            indices: vec![0, 1],
            weights: vec![2.0, 3.0],
            residual: 0.0,
            elapsed_s: 0.0,
            strategy_tag: String::new(),
            residual_trace: vec![],
        };
        let a = alignment_diagnostic(&bank, &sel, &mut LrBoundEstimator::new(1.0)).unwrap();
        assert_abs_diff_eq!(a.cos_angle, 1.0, epsilon = 1e-12);
        let orth = Selection { indices: vec![0], weights: vec![1.0], ..sel.clone() };
        let bank = bank.with_target(ndarray::array![0.0, 3.0]).unwrap();
        let a = alignment_diagnostic(&bank, &orth, &mut LrBoundEstimator::new(1.0)).unwrap();
        assert_eq!(a.dot, 0.0);
        assert_eq!(a.cos_angle, 0.0);
    }

    #[test]
    fn zero_subset_gradient_is_an_error() {
        let bank = GradientBank::new(ndarray::array![[0.0, 0.0], [0.0, 1.0]], ndarray::array![0.0, 1.0]).unwrap();
        let sel = Selection { indices: vec![0], weights: vec![1.0], residual: 0.0, elapsed_s: 0.0, strategy_tag: String::new(), residual_trace: vec![] };
        assert!(matches!(alignment_diagnostic(&bank, &sel, &mut LrBoundEstimator::new(1.0)), Err(Error::ZeroGradient)));
    }
}
