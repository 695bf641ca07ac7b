//! Matching the validation gradient instead of the training gradient when
//! the training split is class-imbalanced.
//!
//! cargo run --release --example class_imbalance

use gradmatch::dataset::{induce_class_imbalance, make_gaussian_blobs, split};
use gradmatch::model::{Arch, ModelState};
use gradmatch::trainer::{train, TrainConfig, TrainData};
use gradmatch::{SplitSpec, Strategy};

fn main() -> gradmatch::Result<()> {
    let data = make_gaussian_blobs(500, 4, 4, 2.0, 11)?;
    let (tr, va, te) = split(&data, &SplitSpec { train_fraction: 0.8, validation_fraction: 0.1, seed: 11 })?;
    // Only the training split is skewed; validation and test stay balanced.
    let tr = induce_class_imbalance(&tr, 0.3, 0.9, 11)?;
    println!("training class counts {:?}", tr.class_counts());
    let splits = TrainData { train: &tr, validation: Some(&va), test: &te };

    for (label, strategy, is_valid) in [
        ("grad-match, validation target", Strategy::GradMatch, true),
        ("grad-match, training target", Strategy::GradMatch, false),
        ("random", Strategy::Random, false),
    ] {
        let mut acc = 0.0;
        for seed in 1..=5 {
            let cfg = TrainConfig {
                total_epochs: 60,
                budget_fraction: 0.3,
                warm_kappa: 0.0,
                strategy,
                is_valid,
                seed,
                ..TrainConfig::default()
            };
            let init = ModelState::init(Arch::LogisticRegression, 4, 4, seed)?;
            acc += train(&cfg, splits, &init)?.1.final_accuracy / 5.0;
        }
        println!("{label:<30} mean accuracy {:.2}%", 100.0 * acc);
    }
    Ok(())
}
