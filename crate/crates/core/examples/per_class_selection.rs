//! Per-class and per-batch selection from the same model, showing how the
//! budget is spread.
//!
//! cargo run --release --example per_class_selection

use gradmatch::dataset::{induce_class_imbalance, make_gaussian_blobs};
use gradmatch::model::{Arch, ModelState};
use gradmatch::selectors::{select, SelectionData, SelectorConfig, Strategy};

fn main() -> gradmatch::Result<()> {
    let data = make_gaussian_blobs(200, 5, 6, 2.0, 4)?;
    let data = induce_class_imbalance(&data, 0.4, 0.75, 4)?;
    let model = ModelState::init(Arch::Mlp { hidden_width: 12 }, 6, 5, 4)?;
    let sel_data = SelectionData { train: &data, validation: None };
    println!("class counts      {:?}", data.class_counts());

    let per_class = SelectorConfig { budget_k: 100, per_class: true, epsilon: 1e-6, ..SelectorConfig::default() };
    let subset = select(Strategy::GradMatch, &model, sel_data, &per_class)?;
    let mut picked = vec![0; data.class_count()];
    for i in subset.sample_indices() {
        picked[data.label(i)] += 1;
    }
    println!("per-class picks   {picked:?} ({})", subset.selection.strategy_tag);

    let per_batch = SelectorConfig { budget_k: 100, batch_size: 20, ..SelectorConfig::default() };
    let subset = select(Strategy::GradMatchPB, &model, sel_data, &per_batch)?;
    println!(
        "per-batch: {} batches, {} samples, {:.4}s",
        subset.selection.len(),
        subset.sample_count(),
        subset.selection.elapsed_s
    );
    Ok(())
}
