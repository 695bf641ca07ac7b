//! Relative gradient error of GradMatch, CRAIG and Random subsets on a
//! partly trained MLP, at several budgets.
//!
//! cargo run --release --example craig_vs_gradmatch

use gradmatch::bank::{build_per_sample, TargetSource};
use gradmatch::dataset::make_gaussian_blobs;
use gradmatch::metrics::gradient_error;
use gradmatch::model::{Arch, ModelState, Sgd};
use gradmatch::selectors::{craig_select, craig_upper_bound, omp_select, random_select, SelectorConfig};

fn main() -> gradmatch::Result<()> {
    let data = make_gaussian_blobs(150, 4, 6, 2.0, 2)?;
    let n = data.n_samples();
    let mut model = ModelState::init(Arch::Mlp { hidden_width: 8 }, 6, 4, 2)?;
    let mut opt = Sgd::new(model.param_count());
    let all: Vec<usize> = (0..n).collect();
    for _ in 0..5 {
        for batch in all.chunks(20) {
            let (_, g) = model.batch_gradient(&data, batch, None)?;
            opt.step(&mut model, &g, 0.05)?;
        }
    }
    let bank = build_per_sample(&model, &data, TargetSource::Training)?;

    println!("budget  grad-match  craig   random  craig bound");
    for frac in [0.05, 0.1, 0.3] {
        let k = (frac * n as f64).round() as usize;
        let gm = omp_select(&bank, &SelectorConfig { budget_k: k, ..SelectorConfig::default() })?;
        let cr = craig_select(&bank, k)?;
        let rd = random_select(n, k, 0)?;
        println!(
            "{:>5.0}%  {:>10.4}  {:>6.4}  {:>6.4}  {:>10.3}",
            100.0 * frac,
            gradient_error(&bank, &gm.indices, &gm.weights)?,
            gradient_error(&bank, &cr.indices, &cr.weights)?,
            gradient_error(&bank, &rd.indices, &rd.weights)?,
            craig_upper_bound(&bank, &cr.indices),
        );
    }
    Ok(())
}
