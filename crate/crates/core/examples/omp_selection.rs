//! One OMP selection round on per-sample last-layer gradients of a freshly
//! initialised MLP, printing the residual after every pick.
//!
//! cargo run --release --example omp_selection

use gradmatch::bank::{build_per_sample, TargetSource};
use gradmatch::dataset::make_gaussian_blobs;
use gradmatch::model::{Arch, ModelState};
use gradmatch::selectors::{omp_select, SelectorConfig};

fn main() -> gradmatch::Result<()> {
    let data = make_gaussian_blobs(100, 4, 6, 2.0, 1)?;
    let model = ModelState::init(Arch::Mlp { hidden_width: 8 }, 6, 4, 1)?;
    let bank = build_per_sample(&model, &data, TargetSource::Training)?;
    println!("bank: {} elements of dimension {}", bank.n_elements(), bank.dim());

    let cfg = SelectorConfig { budget_k: 40, epsilon: 1e-4, ..SelectorConfig::default() };
    let sel = omp_select(&bank, &cfg)?;
    let l_max = bank.target_norm_sq();
    for (step, e) in sel.residual_trace.iter().enumerate() {
        println!("{step:3}  E/|b|^2 = {:.6}", e / l_max);
    }
    println!("picked {:?}", sel.indices);
    println!("weights sum to {:.2} (n = {})", sel.weights.iter().sum::<f64>(), bank.n_elements());
    Ok(())
}
