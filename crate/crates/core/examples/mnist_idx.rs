//! Loads MNIST-format IDX files and trains logistic regression on a 10%
//! GradMatchPB subset.
//!
//! cargo run --release --example mnist_idx -- train-images-idx3-ubyte train-labels-idx1-ubyte
//!
//! Without arguments a small synthetic IDX pair is written to the temp
//! directory and used instead.

use std::path::PathBuf;

use gradmatch::dataset::{load_mnist_idx, split, write_idx_images, write_idx_labels, IdxImages};
use gradmatch::model::{Arch, ModelState};
use gradmatch::trainer::{train, TrainConfig, TrainData};
use gradmatch::{SplitSpec, Strategy};
use rand::{Rng, SeedableRng};

fn synthetic_pair() -> gradmatch::Result<(PathBuf, PathBuf)> {
    // Each digit lights up its own band of rows, plus noise.
    let (count, rows, cols) = (1000, 28, 28);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let labels: Vec<u8> = (0..count).map(|_| rng.random_range(0..10u8)).collect();
    let mut pixels = Vec::with_capacity(count * rows * cols);
    for &y in &labels {
        for r in 0..rows {
            for _ in 0..cols {
                let on = r / 3 == y as usize && rng.random_bool(0.7);
                pixels.push(if on { rng.random_range(128..=255) } else { rng.random_range(0..40) });
            }
        }
    }
    let dir = std::env::temp_dir().join("gradmatch-mnist-example");
    std::fs::create_dir_all(&dir)?;
    let (img, lbl) = (dir.join("images.idx3-ubyte"), dir.join("labels.idx1-ubyte"));
    write_idx_images(&img, &IdxImages { rows, cols, pixels })?;
    write_idx_labels(&lbl, &labels)?;
    Ok((img, lbl))
}

fn main() -> gradmatch::Result<()> {
    let args: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    let (images, labels) = match args.as_slice() {
        [i, l] => (i.clone(), l.clone()),
        _ => synthetic_pair()?,
    };
    let data = load_mnist_idx(&images, &labels)?;
    println!("{} images, {} features, class counts {:?}", data.n_samples(), data.n_features(), data.class_counts());

    let (tr, va, te) = split(&data, &SplitSpec { train_fraction: 0.8, validation_fraction: 0.1, seed: 0 })?;
    let cfg = TrainConfig {
        total_epochs: 20,
        selection_interval: 5,
        budget_fraction: 0.1,
        strategy: Strategy::GradMatchPB,
        lr0: 0.05,
        ..TrainConfig::default()
    };
    let init = ModelState::init(Arch::LogisticRegression, data.n_features(), 10, 0)?;
    let (_, record) = train(&cfg, TrainData { train: &tr, validation: Some(&va), test: &te }, &init)?;
    println!("test accuracy {:.2}% in {:.2}s", 100.0 * record.final_accuracy, record.total_time_s);
    Ok(())
}
