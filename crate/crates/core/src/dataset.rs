//! Datasets: loading (MNIST IDX, CSV), synthetic generation, splitting and
//! class-imbalance corruption.
//!
//! Every randomized operation is a pure function of its inputs and a 64-bit
//! seed.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{stream_rng, Stream};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

/// Feature matrix plus integer labels in `[0, class_count)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    split: SplitTag,
    class_count: usize,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        class_count: usize,
        split: SplitTag,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(invalid(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if class_count == 0 {
            return Err(invalid("class_count must be positive"));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidLabel { label, class_count });
        }
        Ok(Self { features, labels, split, class_count })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split_tag(&self) -> SplitTag {
        self.split
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    /// Rows `indices` in the given order, keeping the split tag.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            class_count: self.class_count,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == class).then_some(i))
            .collect()
    }
}

/// Fractions for a train / validation / test partition. The test set gets
/// whatever is left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let t = self.train_fraction;
        let v = self.validation_fraction;
        if !(t > 0.0 && t <= 1.0) {
            return Err(invalid(format!("train_fraction {t} not in (0, 1]")));
        }
        if !(0.0..1.0).contains(&v) {
            return Err(invalid(format!("validation_fraction {v} not in [0, 1)")));
        }
        if t + v > 1.0 + 1e-12 {
            return Err(invalid("train_fraction + validation_fraction exceeds 1"));
        }
        Ok(())
    }
}

// Guards against products like 0.29 * 100 = 28.999999999999996.
fn floor_frac(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Seeded partition of `0..n` into (train, validation, test) index lists.
///
/// Train size is `round(train_fraction * n)`, validation size is
/// `floor(validation_fraction * n)`, the remainder is test.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    let n_train = ((spec.train_fraction * n as f64).round() as usize).min(n);
    let n_val = floor_frac(spec.validation_fraction, n).min(n - n_train);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream_rng(spec.seed, Stream::Split));
    let test = perm.split_off(n_train + n_val);
    let val = perm.split_off(n_train);
    Ok((perm, val, test))
}

pub fn split(d: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let (tr, va, te) = split_indices(d.n_samples(), spec)?;
    Ok((
        d.subset(&tr).with_split(SplitTag::Train),
        d.subset(&va).with_split(SplitTag::Validation),
        d.subset(&te).with_split(SplitTag::Test),
    ))
}

/// Isotropic unit-variance Gaussian classes; class `c` is centred at
/// `class_sep * e_{c mod dim}`. Samples are emitted class by class.
pub fn make_gaussian_blobs(
    n_per_class: usize,
    class_count: usize,
    dim: usize,
    class_sep: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 || class_count == 0 || dim == 0 || !(class_sep > 0.0) {
        return Err(invalid("make_gaussian_blobs arguments must be positive"));
    }
    let mut rng = stream_rng(seed, Stream::Blobs);
    let n = n_per_class * class_count;
    let mut features = Array2::<f64>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for c in 0..class_count {
        for s in 0..n_per_class {
            let mut row = features.row_mut(c * n_per_class + s);
            for x in row.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
            }
            row[c % dim] += class_sep;
            labels.push(c);
        }
    }
    Dataset::new(features, labels, class_count, SplitTag::Train)
}

/// Shrinks `floor(affected_fraction * C)` seeded-random classes by removing
/// `floor(removal_fraction * n_c)` of their samples (uniformly without
/// replacement). Surviving samples keep their original relative order.
pub fn induce_class_imbalance(
    d: &Dataset,
    affected_fraction: f64,
    removal_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    for (name, f) in [("affected_fraction", affected_fraction), ("removal_fraction", removal_fraction)] {
        if !(0.0..=1.0).contains(&f) {
            return Err(invalid(format!("{name} {f} not in [0, 1]")));
        }
    }
    let c = d.class_count();
    let n_affected = floor_frac(affected_fraction, c);
    let mut rng = stream_rng(seed, Stream::Imbalance);
    let mut affected = index::sample(&mut rng, c, n_affected).into_vec();
    affected.sort_unstable();

    let mut keep = vec![true; d.n_samples()];
    for &class in &affected {
        let members = d.indices_of_class(class);
        let n_remove = floor_frac(removal_fraction, members.len());
        if n_remove > 0 && n_remove == members.len() {
            return Err(Error::EmptyResult(class));
        }
        for pos in index::sample(&mut rng, members.len(), n_remove) {
            keep[members[pos]] = false;
        }
    }
    let kept: Vec<usize> = (0..d.n_samples()).filter(|&i| keep[i]).collect();
    Ok(d.subset(&kept))
}

// ---------------------------------------------------------------- IDX files

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::TruncatedFile { path: path.to_path_buf() })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = read_u32_be(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected, found });
    }
    Ok(())
}

/// Raw contents of an IDX image file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    let bytes = fs::read(path)?;
    check_magic(&bytes, IDX_IMAGE_MAGIC, path)?;
    let count = read_u32_be(&bytes, 4, path)? as usize;
    let rows = read_u32_be(&bytes, 8, path)? as usize;
    let cols = read_u32_be(&bytes, 12, path)? as usize;
    let len = count * rows * cols;
    let pixels = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::TruncatedFile { path: path.to_path_buf() })?
        .to_vec();
    Ok(IdxImages { rows, cols, pixels })
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    check_magic(&bytes, IDX_LABEL_MAGIC, path)?;
    let count = read_u32_be(&bytes, 4, path)? as usize;
    Ok(bytes
        .get(8..8 + count)
        .ok_or_else(|| Error::TruncatedFile { path: path.to_path_buf() })?
        .to_vec())
}

pub fn write_idx_images(path: &Path, images: &IdxImages) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    for v in [images.count(), images.rows, images.cols] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Loads an MNIST image/label IDX pair; pixels are scaled to `[0, 1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.count() != labels.len() {
        return Err(Error::CountMismatch { images: images.count(), labels: labels.len() });
    }
    let width = images.rows * images.cols;
    let features = Array2::from_shape_vec(
        (labels.len(), width),
        images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )
    .map_err(|e| invalid(e.to_string()))?;
    Dataset::new(features, labels.iter().map(|&l| usize::from(l)).collect(), 10, SplitTag::Train)
}

/// Inverse of [`load_mnist_idx`]; features are mapped back to bytes with
/// `round(255 * x)`.
pub fn save_mnist_idx(
    d: &Dataset,
    rows: usize,
    cols: usize,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    if rows * cols != d.n_features() {
        return Err(invalid(format!(
            "{rows}x{cols} images do not match {} features",
            d.n_features()
        )));
    }
    let pixels = d
        .features()
        .iter()
        .map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let labels: Vec<u8> = d
        .labels()
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::InvalidLabel { label: l, class_count: 256 }))
        .collect::<Result<_>>()?;
    write_idx_images(images_path, &IdxImages { rows, cols, pixels })?;
    write_idx_labels(labels_path, &labels)
}

// ---------------------------------------------------------------------- CSV

/// Reads a CSV file with header `label,f0,f1,...`. When `class_count` is
/// `None` it is inferred as `max(label) + 1`.
pub fn load_csv(path: &Path, class_count: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.get(0).map(str::trim) != Some("label") {
        return Err(invalid(format!("{}: first column must be `label`", path.display())));
    }
    let width = headers.len() - 1;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let parse_err = |field: &str| invalid(format!("{}: row {}: bad value `{field}`", path.display(), line + 1));
        let label_field = record.get(0).unwrap_or("");
        labels.push(label_field.trim().parse::<usize>().map_err(|_| parse_err(label_field))?);
        for field in record.iter().skip(1) {
            values.push(field.trim().parse::<f64>().map_err(|_| parse_err(field))?);
        }
    }
    if labels.is_empty() {
        return Err(invalid(format!("{}: no data rows", path.display())));
    }
    let classes = class_count.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let features = Array2::from_shape_vec((labels.len(), width), values)
        .map_err(|e| invalid(e.to_string()))?;
    Dataset::new(features, labels, classes, SplitTag::Train)
}

pub fn save_csv(d: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    header.extend((0..d.n_features()).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for i in 0..d.n_samples() {
        let mut rec = vec![d.label(i).to_string()];
        rec.extend(d.row(i).iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
