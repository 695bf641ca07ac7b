//! Gradient banks: the matrices of element gradients (per sample, per
//! mini-batch, or per class) and the target gradient that selection tries to
//! match.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{invalid, Error, Result};
use crate::model::ModelState;
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementKind {
    Sample,
    Batch { size: usize },
    ClassRestricted { class: usize },
}

/// Where the target gradient comes from: the summed training loss, or the
/// summed loss of a held-out validation set.
#[derive(Clone, Copy, Debug)]
pub enum TargetSource<'a> {
    Training,
    Validation(&'a Dataset),
}

impl<'a> TargetSource<'a> {
    /// `is_valid` with no validation set is a configuration error.
    pub fn from_flag(is_valid: bool, validation: Option<&'a Dataset>) -> Result<Self> {
        match (is_valid, validation) {
            (false, _) => Ok(Self::Training),
            (true, Some(v)) if !v.is_empty() => Ok(Self::Validation(v)),
            (true, _) => Err(invalid("is_valid requires a nonempty validation set")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientBank {
    rows: Array2<f64>,
    kind: ElementKind,
    element_map: Vec<Vec<usize>>,
    target: Array1<f64>,
}

impl GradientBank {
    /// A sample-level bank from explicit rows; element `i` maps to sample `i`.
    pub fn new(rows: Array2<f64>, target: Array1<f64>) -> Result<Self> {
        let map = (0..rows.nrows()).map(|i| vec![i]).collect();
        Self::with_parts(rows, target, ElementKind::Sample, map)
    }

    fn with_parts(rows: Array2<f64>, target: Array1<f64>, kind: ElementKind, element_map: Vec<Vec<usize>>) -> Result<Self> {
        if rows.ncols() != target.len() {
            return Err(invalid(format!("rows have {} columns, target has {}", rows.ncols(), target.len())));
        }
        if element_map.len() != rows.nrows() {
            return Err(invalid("element map does not match row count"));
        }
        if rows.iter().chain(target.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        Ok(Self { rows, kind, element_map, target })
    }

    pub fn n_elements(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.rows.row(i)
    }

    pub fn target(&self) -> ArrayView1<'_, f64> {
        self.target.view()
    }

    pub fn kind(&self) -> ElementKind {
        self.kind
    }

    /// Sample indices covered by each element.
    pub fn element_map(&self) -> &[Vec<usize>] {
        &self.element_map
    }

    pub fn column_sum(&self) -> Array1<f64> {
        self.rows.sum_axis(Axis(0))
    }

    pub fn target_norm_sq(&self) -> f64 {
        self.target.dot(&self.target)
    }

    pub fn max_row_norm(&self) -> f64 {
        self.rows.rows().into_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max)
    }

    pub fn with_target(mut self, target: Array1<f64>) -> Result<Self> {
        if target.len() != self.dim() {
            return Err(invalid("target dimension mismatch"));
        }
        self.target = target;
        Ok(self)
    }

    /// Same rows restricted to `elements`, in that order, with the target
    /// unchanged.
    pub fn restrict(&self, elements: &[usize]) -> GradientBank {
        GradientBank {
            rows: self.rows.select(Axis(0), elements),
            kind: self.kind,
            element_map: elements.iter().map(|&e| self.element_map[e].clone()).collect(),
            target: self.target.clone(),
        }
    }

    /// `Σ_i w_i g_i` over the given elements.
    pub fn weighted_sum(&self, elements: &[usize], weights: &[f64]) -> Array1<f64> {
        let mut acc = Array1::zeros(self.dim());
        for (&e, &w) in elements.iter().zip(weights) {
            acc.scaled_add(w, &self.rows.row(e));
        }
        acc
    }

    /// Binary dump: `b"GMBANK01"`, `n_elements` and `d_g` as little-endian
    /// u64, then the rows row-major and the target, all little-endian f64.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(BANK_MAGIC)?;
        w.write_all(&(self.n_elements() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        for v in self.rows.iter().chain(self.target.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dump written by [`GradientBank::write_binary`] as a
    /// sample-level bank.
    pub fn read_binary(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let truncated = || Error::TruncatedFile { path: path.to_path_buf() };
        if bytes.len() < 24 || &bytes[..8] != BANK_MAGIC {
            return Err(Error::CorruptRecord(format!("{}: not a gradient bank dump", path.display())));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let body = bytes.get(24..24 + 8 * (n + 1) * d).ok_or_else(truncated)?;
        let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let rows = Array2::from_shape_vec((n, d), vals[..n * d].to_vec()).map_err(|e| invalid(e.to_string()))?;
        Self::new(rows, Array1::from(vals[n * d..].to_vec()))
    }

    /// CSV dump: header `element,g0,...`, one line per row, then a final
    /// line whose `element` field is `target`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["element".to_string()];
        header.extend((0..self.dim()).map(|j| format!("g{j}")));
        w.write_record(&header)?;
        for (i, row) in self.rows.rows().into_iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        let mut rec = vec!["target".to_string()];
        rec.extend(self.target.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
        w.flush()?;
        Ok(())
    }
}

const BANK_MAGIC: &[u8; 8] = b"GMBANK01";

fn stack_rows(rows: Vec<Vec<f64>>, dim: usize) -> Array2<f64> {
    let n = rows.len();
    Array2::from_shape_vec((n, dim), rows.into_iter().flatten().collect()).expect("row lengths are uniform")
}

fn per_sample_rows(model: &ModelState, d: &Dataset, indices: &[usize]) -> Vec<Vec<f64>> {
    indices.par_iter().map(|&i| model.last_layer_grad_of(d.row(i), d.label(i))).collect()
}

fn sum_rows(rows: &[Vec<f64>], dim: usize) -> Array1<f64> {
    let mut acc = Array1::zeros(dim);
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    acc
}

fn full_target(model: &ModelState, train_rows: &[Vec<f64>], target: TargetSource) -> Array1<f64> {
    let dim = model.last_layer_dim();
    match target {
        TargetSource::Training => sum_rows(train_rows, dim),
        TargetSource::Validation(v) => {
            let idx: Vec<usize> = (0..v.n_samples()).collect();
            sum_rows(&per_sample_rows(model, v, &idx), dim)
        }
    }
}

fn check_sources(model: &ModelState, train: &Dataset, target: TargetSource) -> Result<()> {
    model.check_compatible(train)?;
    if let TargetSource::Validation(v) = target {
        model.check_compatible(v)?;
    }
    if train.is_empty() {
        return Err(invalid("training set is empty"));
    }
    Ok(())
}

/// One row per training sample (its last-layer gradient); the target is the
/// summed last-layer gradient of the target source.
pub fn build_per_sample(model: &ModelState, train: &Dataset, target: TargetSource) -> Result<GradientBank> {
    check_sources(model, train, target)?;
    let idx: Vec<usize> = (0..train.n_samples()).collect();
    let rows = per_sample_rows(model, train, &idx);
    let tgt = full_target(model, &rows, target);
    let map = idx.iter().map(|&i| vec![i]).collect();
    GradientBank::with_parts(stack_rows(rows, model.last_layer_dim()), tgt, ElementKind::Sample, map)
}

/// Seeded shuffle of `0..n` cut into contiguous chunks of `batch_size`.
pub fn batch_partition(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream_rng(seed, Stream::Batches));
    perm.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// One row per mini-batch holding the SUM of its members' last-layer
/// gradients, so the rows add up to the full training gradient.
pub fn build_per_batch(
    model: &ModelState,
    train: &Dataset,
    batch_size: usize,
    target: TargetSource,
    seed: u64,
) -> Result<GradientBank> {
    if batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    check_sources(model, train, target)?;
    let dim = model.last_layer_dim();
    let idx: Vec<usize> = (0..train.n_samples()).collect();
    let sample_rows = per_sample_rows(model, train, &idx);
    let batches = batch_partition(train.n_samples(), batch_size, seed);
    let rows: Vec<Vec<f64>> = batches
        .iter()
        .map(|b| {
            let mut acc = vec![0.0; dim];
            for &i in b {
                for (a, v) in acc.iter_mut().zip(&sample_rows[i]) {
                    *a += v;
                }
            }
            acc
        })
        .collect();
    let tgt = full_target(model, &sample_rows, target);
    GradientBank::with_parts(stack_rows(rows, dim), tgt, ElementKind::Batch { size: batch_size }, batches)
}

/// Rows restricted to training samples of `class`, and columns restricted to
/// that class's output block (`h + 1` entries). The target sums the same
/// block over target-source samples of `class`.
pub fn build_per_class(model: &ModelState, train: &Dataset, class: usize, target: TargetSource) -> Result<GradientBank> {
    check_sources(model, train, target)?;
    if class >= model.class_count() {
        return Err(invalid(format!("class {class} out of range")));
    }
    let members = train.indices_of_class(class);
    if members.is_empty() {
        return Err(Error::EmptyClass(class));
    }
    let dim = model.class_block_dim();
    let rows: Vec<Vec<f64>> = members
        .par_iter()
        .map(|&i| model.class_block_grad(train.row(i), train.label(i), class))
        .collect();
    let tgt = match target {
        TargetSource::Training => sum_rows(&rows, dim),
        TargetSource::Validation(v) => {
            let vrows: Vec<Vec<f64>> = v
                .indices_of_class(class)
                .par_iter()
                .map(|&i| model.class_block_grad(v.row(i), v.label(i), class))
                .collect();
            sum_rows(&vrows, dim)
        }
    };
    let map = members.iter().map(|&i| vec![i]).collect();
    GradientBank::with_parts(stack_rows(rows, dim), tgt, ElementKind::ClassRestricted { class }, map)
}

/// Per-class budgets `max(1, round(k * n_c / n))`; empty classes get 0.
/// The total can differ from `k` by rounding.
pub fn apportion_budget(class_counts: &[usize], k: usize) -> Vec<usize> {
    let n: usize = class_counts.iter().sum();
    class_counts
        .iter()
        .map(|&nc| {
            if nc == 0 {
                0
            } else {
                ((k as f64 * nc as f64 / n as f64).round() as usize).clamp(1, nc)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_gaussian_blobs;
    use crate::model::Arch;

    fn setup() -> (ModelState, Dataset) {
        let d = make_gaussian_blobs(5, 2, 3, 1.0, 4).unwrap();
        (ModelState::init(Arch::LogisticRegression, 3, 2, 1).unwrap(), d)
    }

    fn max_abs_diff(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn single_sample_target_equals_row() {
        let (m, d) = setup();
        let one = d.subset(&[3]);
        let bank = build_per_sample(&m, &one, TargetSource::Training).unwrap();
        assert_eq!(bank.n_elements(), 1);
        assert_eq!(bank.row(0), bank.target());
    }

    #[test]
    fn training_target_is_column_sum() {
        let (m, d) = setup();
        let bank = build_per_sample(&m, &d, TargetSource::Training).unwrap();
        assert!(max_abs_diff(bank.target(), bank.column_sum().view()) < 1e-12);
        assert_eq!(bank.dim(), 2 * 4);
    }

    #[test]
    fn validation_equal_to_train_matches_training_bank() {
        let (m, d) = setup();
        let a = build_per_sample(&m, &d, TargetSource::Training).unwrap();
        let b = build_per_sample(&m, &d, TargetSource::Validation(&d)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_sizes_follow_ceiling() {
        let (m, d) = setup();
        let bank = build_per_batch(&m, &d, 3, TargetSource::Training, 0).unwrap();
        let sizes: Vec<usize> = bank.element_map().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
    }

    #[test]
    fn batch_rows_sum_member_gradients() {
        let (m, d) = setup();
        let samples = build_per_sample(&m, &d, TargetSource::Training).unwrap();
        let batches = build_per_batch(&m, &d, 4, TargetSource::Training, 9).unwrap();
        for (row, members) in batches.rows().rows().into_iter().zip(batches.element_map()) {
            let mut acc = Array1::<f64>::zeros(samples.dim());
            for &i in members {
                acc += &samples.row(i);
            }
            assert!(max_abs_diff(row, acc.view()) < 1e-12);
        }
        assert!(max_abs_diff(batches.column_sum().view(), samples.column_sum().view()) < 1e-10);
        assert!(max_abs_diff(batches.target(), samples.target()) < 1e-12);
    }

    #[test]
    fn batch_of_one_reproduces_sample_rows() {
        let (m, d) = setup();
        let samples = build_per_sample(&m, &d, TargetSource::Training).unwrap();
        let batches = build_per_batch(&m, &d, 1, TargetSource::Training, 5).unwrap();
        for (row, members) in batches.rows().rows().into_iter().zip(batches.element_map()) {
            assert_eq!(row, samples.row(members[0]));
        }
    }

    #[test]
    fn batch_of_everything_is_the_target() {
        let (m, d) = setup();
        let bank = build_per_batch(&m, &d, d.n_samples(), TargetSource::Training, 5).unwrap();
        assert_eq!(bank.n_elements(), 1);
        assert!(max_abs_diff(bank.row(0), bank.target()) < 1e-12);
    }

    #[test]
    fn per_class_restricts_rows_and_columns() {
        let (m, d) = setup();
        let bank = build_per_class(&m, &d, 0, TargetSource::Training).unwrap();
        assert_eq!(bank.dim(), 4);
        assert_eq!(bank.n_elements(), 5);
        let full = build_per_sample(&m, &d, TargetSource::Training).unwrap();
        for (r, members) in bank.rows().rows().into_iter().zip(bank.element_map()) {
            let i = members[0];
            assert_eq!(d.label(i), 0);
            assert_eq!(r, full.row(i).slice(ndarray::s![0..4]));
        }
    }

    #[test]
    fn per_class_single_sample_and_empty_class() {
        let (m, d) = setup();
        let one = d.subset(&[0, 5, 6]);
        let bank = build_per_class(&m, &one, 0, TargetSource::Training).unwrap();
        assert_eq!(bank.n_elements(), 1);
        let none = d.subset(&[5, 6]);
        assert!(matches!(build_per_class(&m, &none, 0, TargetSource::Training), Err(Error::EmptyClass(0))));
    }

    #[test]
    fn apportionment() {
        assert_eq!(apportion_budget(&[30, 10], 4), vec![3, 1]);
        assert_eq!(apportion_budget(&[100, 1, 0], 10), vec![10, 1, 0]);
    }

    #[test]
    fn binary_dump_round_trips() {
        let (m, d) = setup();
        let bank = build_per_sample(&m, &d, TargetSource::Training).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bank.bin");
        bank.write_binary(&p).unwrap();
        assert_eq!(GradientBank::read_binary(&p).unwrap(), bank);
        bank.write_csv(&dir.path().join("bank.csv")).unwrap();
    }
}
