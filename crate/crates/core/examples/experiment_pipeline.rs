//! The file-based workflow: write a config, train several strategies with
//! replicate seeds, then tabulate the runs.
//!
//! cargo run --release --example experiment_pipeline [output-dir]

use std::path::PathBuf;

use gradmatch::cli::{cmd_report, cmd_train};
use gradmatch::config::{ExperimentConfig, Overrides};
use gradmatch::Strategy;

fn main() -> gradmatch::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("gradmatch-pipeline"));
    std::fs::create_dir_all(&root)?;

    let mut cfg = ExperimentConfig::example();
    cfg.train.total_epochs = 40;
    cfg.seeds = vec![1, 2, 3];
    cfg.train.diagnostics = true;
    let config_path = root.join("experiment.json");
    cfg.save(&config_path)?;

    let mut dirs = Vec::new();
    for (strategy, budget) in [
        (Strategy::Full, 1.0),
        (Strategy::GradMatchPB, 0.1),
        (Strategy::CraigPB, 0.1),
        (Strategy::Random, 0.1),
    ] {
        let overrides = Overrides {
            strategy: Some(strategy),
            budget: Some(budget),
            output_dir: Some(root.join(format!("{}-{}", strategy.name(), (budget * 100.0) as u32))),
            ..Overrides::default()
        };
        let (dir, summary) = cmd_train(&config_path, &overrides)?;
        println!("{strategy}: {:.2} ± {:.2}", summary.accuracy_mean, summary.accuracy_std);
        dirs.push(dir);
    }

    let report = cmd_report(&dirs, Some(&root.join("tables")))?;
    println!("\n{}", report.markdown);
    println!("tables written to {}", root.join("tables").display());
    Ok(())
}
