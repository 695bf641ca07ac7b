//! Full training against GradMatchPB and Random at a 10% budget on
//! two-class blobs.
//!
//! cargo run --release --example train_blobs

use gradmatch::dataset::{make_gaussian_blobs, split};
use gradmatch::model::{Arch, ModelState};
use gradmatch::trainer::{train, TrainConfig, TrainData};
use gradmatch::{SplitSpec, Strategy};

fn main() -> gradmatch::Result<()> {
    let data = make_gaussian_blobs(1000, 2, 5, 3.0, 0)?;
    let (train_set, validation, test) =
        split(&data, &SplitSpec { train_fraction: 0.8, validation_fraction: 0.1, seed: 0 })?;
    let splits = TrainData { train: &train_set, validation: Some(&validation), test: &test };

    let mut full_time = None;
    for (strategy, budget) in [(Strategy::Full, 1.0), (Strategy::GradMatchPB, 0.1), (Strategy::Random, 0.1)] {
        let cfg = TrainConfig { strategy, budget_fraction: budget, warm_kappa: 0.0, seed: 7, ..TrainConfig::default() };
        let init = ModelState::init(Arch::LogisticRegression, 5, 2, cfg.seed)?;
        let (_, mut record) = train(&cfg, splits, &init)?;
        let base = *full_time.get_or_insert(record.total_time_s);
        record.set_speedup(base);
        println!(
            "{:<14} budget {:>4.0}%  accuracy {:6.2}%  time {:.3}s  speedup {:.1}x  selections {}",
            strategy.name(),
            100.0 * budget,
            100.0 * record.final_accuracy,
            record.total_time_s,
            record.speedup_vs_full.unwrap_or(1.0),
            record.selections.len()
        );
    }
    Ok(())
}
