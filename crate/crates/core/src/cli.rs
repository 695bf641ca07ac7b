//! The operations behind the `gradmatch` subcommands.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration or input data,
//! 3 numerical failure, 4 missing or corrupt records.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bank::{build_per_sample, GradientBank, TargetSource};
use crate::config::{ExperimentConfig, Overrides};
use crate::error::{Error, Result};
use crate::metrics::{
    brute_force_verifier, experiment_csv, experiment_markdown, experiment_table, gradient_error, gradient_error_csv,
    gradient_error_markdown, gradient_error_table, scatter_csv, set_cover_check, summarize_runs, RunSummary,
    SetCoverReport, VerifierReport,
};
use crate::model::ModelState;
use crate::selectors::{select, Selection, SelectionData};
use crate::trainer::{alignment_diagnostic, train, Alignment, LrBoundEstimator, RunRecord, TrainData};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_RECORDS: i32 = 4;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "GRADMATCH_THREADS";

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) => EXIT_USAGE,
        Error::NonFiniteGradient
        | Error::NonFiniteLoss { .. }
        | Error::NoConvergence(_)
        | Error::SingularSystem
        | Error::DegenerateBank
        | Error::ZeroGradient
        | Error::TooLarge(_) => EXIT_NUMERIC,
        Error::CorruptRecord(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => EXIT_RECORDS,
        _ => EXIT_CONFIG,
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, Serialize)]
pub struct SelectDiagnostics {
    /// `E_λ / ‖b‖²` of the returned weights, when the strategy fits weights.
    pub relative_residual: Option<f64>,
    pub grad_error: f64,
    pub alignment: Option<Alignment>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelectOutput {
    #[serde(flatten)]
    pub selection: Selection,
    pub sample_indices: Vec<usize>,
    pub diagnostics: SelectDiagnostics,
}

/// One selection round with the first configured seed; writes
/// `<output_dir>/selection.json` and returns its path.
pub fn cmd_select(config_path: &Path, checkpoint: Option<&Path>, overrides: &Overrides) -> Result<PathBuf> {
    let cfg = load_config(config_path, overrides)?;
    let data = cfg.load_data()?;
    let seed = cfg.seeds[0];
    let model = match checkpoint {
        Some(p) => ModelState::load_checkpoint(p).map_err(|e| Error::Config(format!("checkpoint {}: {e}", p.display())))?,
        None => cfg.init_model(&data.train, seed)?,
    };
    model.check_compatible(&data.train)?;
    let k = cfg.train.budget_k(data.train.n_samples());
    let sel_cfg = cfg.train.selector(k, seed);
    let subset = select(
        cfg.train.strategy,
        &model,
        SelectionData { train: &data.train, validation: Some(&data.validation) },
        &sel_cfg,
    )?;

    let bank = build_per_sample(&model, &data.train, TargetSource::Training)?;
    let sample_indices = subset.sample_indices();
    let sample_weights = subset.sample_weights();
    let grad_error = gradient_error(&bank, &sample_indices, &sample_weights)?;
    let alignment = if sample_indices.is_empty() {
        None
    } else {
        let sample_sel = Selection { indices: sample_indices.clone(), weights: sample_weights, ..subset.selection.clone() };
        alignment_diagnostic(&bank, &sample_sel, &mut LrBoundEstimator::for_model(&model, &data.train)).ok()
    };
    let target_norm = if cfg.train.is_valid {
        build_per_sample(&model, &data.train, TargetSource::Validation(&data.validation))?.target_norm_sq()
    } else {
        bank.target_norm_sq()
    };
    let relative_residual = (subset.selection.residual.is_finite() && target_norm > 0.0 && !cfg.train.per_class)
        .then(|| subset.selection.residual / target_norm);

    let out = SelectOutput {
        selection: subset.selection,
        sample_indices,
        diagnostics: SelectDiagnostics { relative_residual, grad_error, alignment },
    };
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join("selection.json");
    fs::write(&path, serde_json::to_string_pretty(&out)?)?;
    Ok(path)
}

/// Trains once per configured seed. Writes `config.json`, and for each seed
/// `seed-<s>/epochs.jsonl` (one epoch per line) and `seed-<s>/run.json`,
/// then `summary.json` with the mean and standard deviation across seeds.
pub fn cmd_train(config_path: &Path, overrides: &Overrides) -> Result<(PathBuf, RunSummary)> {
    let cfg = load_config(config_path, overrides)?;
    let data = cfg.load_data()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;
    cfg.save(&out.join("config.json"))?;

    let mut records = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let model = cfg.init_model(&data.train, seed)?;
        let tc = crate::trainer::TrainConfig { seed, ..cfg.train.clone() };
        let (_, record) = train(
            &tc,
            TrainData { train: &data.train, validation: Some(&data.validation), test: &data.test },
            &model,
        )?;
        write_run(&out.join(format!("seed-{seed}")), &record)?;
        records.push(record);
    }
    let summary = summarize_runs(&records)?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok((out, summary))
}

pub fn write_run(dir: &Path, record: &RunRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut lines = fs::File::create(dir.join("epochs.jsonl"))?;
    for e in &record.epochs {
        serde_json::to_writer(&mut lines, e)?;
        lines.write_all(b"\n")?;
    }
    fs::write(dir.join("run.json"), serde_json::to_string(record)?)?;
    Ok(())
}

/// The run records stored under a `cmd_train` output directory, ordered by
/// directory name.
pub fn read_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let corrupt = |m: String| Error::CorruptRecord(m);
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| corrupt(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("run.json").is_file())
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let file = p.join("run.json");
            let text = fs::read_to_string(&file).map_err(|e| corrupt(format!("{}: {e}", file.display())))?;
            serde_json::from_str(&text).map_err(|e| corrupt(format!("{}: {e}", file.display())))
        })
        .collect()
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let file = dir.join("summary.json");
    let text = fs::read_to_string(&file).map_err(|e| Error::CorruptRecord(format!("{}: {e}", file.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::CorruptRecord(format!("{}: {e}", file.display())))
}

#[derive(Clone, Debug)]
pub struct ReportOutput {
    pub markdown: String,
    pub summary_csv: String,
    pub scatter_csv: String,
    pub grad_error_csv: String,
}

/// Builds the comparison tables from training output directories. Duplicate
/// directories count once. When `out_dir` is given the tables are also
/// written there as `summary.csv`, `summary.md`, `scatter.csv` and
/// `grad_error.csv`.
pub fn cmd_report(run_dirs: &[PathBuf], out_dir: Option<&Path>) -> Result<ReportOutput> {
    if run_dirs.is_empty() {
        return Err(Error::Usage("report needs at least one run directory".into()));
    }
    let mut seen = HashSet::new();
    let mut summaries = Vec::new();
    let mut records = Vec::new();
    for dir in run_dirs {
        let key = fs::canonicalize(dir).map_err(|e| Error::CorruptRecord(format!("{}: {e}", dir.display())))?;
        if !seen.insert(key) {
            continue;
        }
        summaries.push(read_summary(dir)?);
        records.extend(read_runs(dir)?);
    }
    let table = experiment_table(&summaries);
    let errors = gradient_error_table(&records);
    let mut markdown = experiment_markdown(&table);
    if !errors.is_empty() {
        markdown.push('\n');
        markdown.push_str(&gradient_error_markdown(&errors));
    }
    let report = ReportOutput {
        markdown,
        summary_csv: experiment_csv(&table)?,
        scatter_csv: scatter_csv(&table)?,
        grad_error_csv: gradient_error_csv(&errors)?,
    };
    if let Some(out) = out_dir {
        fs::create_dir_all(out)?;
        fs::write(out.join("summary.csv"), &report.summary_csv)?;
        fs::write(out.join("summary.md"), &report.markdown)?;
        fs::write(out.join("scatter.csv"), &report.scatter_csv)?;
        fs::write(out.join("grad_error.csv"), &report.grad_error_csv)?;
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub instances: usize,
    pub n: usize,
    pub k: usize,
    pub dim: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { instances: 50, n: 8, k: 3, dim: 4, lambda: 0.5, epsilon: 0.1, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyInstance {
    pub verifier: VerifierReport,
    pub set_cover: SetCoverReport,
    pub approximation_holds: bool,
    pub gamma_hat_holds: bool,
    pub submodularity_ratio_holds: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub instances: Vec<VerifyInstance>,
    pub approximation_failures: usize,
    pub gamma_hat_failures: usize,
    pub submodularity_ratio_failures: usize,
    pub set_cover_failures: usize,
}

/// A bank of `n` random unit-norm rows in `dim` dimensions with a random
/// target, as used by the exhaustive checks.
pub fn random_unit_bank(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<GradientBank> {
    let mut rows: Array2<f64> = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0));
    for mut r in rows.rows_mut() {
        let norm = r.dot(&r).sqrt().max(f64::MIN_POSITIVE);
        r.mapv_inplace(|v| v / norm);
    }
    let target = Array1::from_shape_fn(dim, |_| rng.random_range(-2.0..2.0));
    GradientBank::new(rows, target)
}

/// Exhaustive checks of the approximation factor, weak submodularity and
/// the set-cover bound on random unit-norm banks.
pub fn cmd_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    if opts.instances == 0 || opts.k == 0 || opts.k > opts.n || opts.dim == 0 {
        return Err(Error::Usage("verify needs instances ≥ 1, 1 ≤ k ≤ n and dim ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut instances = Vec::with_capacity(opts.instances);
    for _ in 0..opts.instances {
        let bank = random_unit_bank(opts.n, opts.dim, &mut rng)?;
        let v = brute_force_verifier(&bank, opts.k, opts.lambda)?;
        let sc = set_cover_check(&bank, opts.lambda, opts.epsilon)?;
        let approx_bound = 1.0 - (-v.bound).exp();
        instances.push(VerifyInstance {
            approximation_holds: v.omp_f >= approx_bound * v.optimum_f - 1e-9,
            gamma_hat_holds: v.gamma_hat >= v.bound - 1e-9,
            submodularity_ratio_holds: v.submodularity_ratio >= v.bound - 1e-9,
            verifier: v,
            set_cover: sc,
        });
    }
    let count = |f: fn(&VerifyInstance) -> bool| instances.iter().filter(|i| !f(i)).count();
    Ok(VerifyReport {
        approximation_failures: count(|i| i.approximation_holds),
        gamma_hat_failures: count(|i| i.gamma_hat_holds),
        submodularity_ratio_failures: count(|i| i.submodularity_ratio_holds),
        set_cover_failures: count(|i| !i.set_cover.stopped_by_epsilon || i.set_cover.holds),
        instances,
    })
}
