use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gradmatch::cli::{self, VerifyOptions, EXIT_USAGE, THREADS_ENV};
use gradmatch::config::Overrides;
use gradmatch::selectors::Strategy;

/// Gradient-matching subset selection experiments.
#[derive(Parser)]
#[command(name = "gradmatch", version)]
struct Cli {
    /// Worker threads for gradient and selection work.
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one selection round and write selection.json.
    Select {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        flags: Flags,
    },
    /// Train once per seed and write run records plus a summary.
    Train {
        config: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Tabulate finished training runs.
    Report {
        run_dirs: Vec<PathBuf>,
        /// Also write CSV and Markdown tables here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Brute-force checks of the selection guarantees on small random banks.
    Verify {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the per-instance report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Flags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Budget as a fraction of the training set.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    per_batch: bool,
    #[arg(long)]
    warm_kappa: Option<f64>,
    #[arg(long)]
    is_valid: bool,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl From<Flags> for Overrides {
    fn from(f: Flags) -> Self {
        Overrides {
            seed: f.seed,
            strategy: f.strategy,
            budget: f.budget,
            per_batch: f.per_batch,
            warm_kappa: f.warm_kappa,
            is_valid: f.is_valid,
            output_dir: f.output_dir,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    if let Some(t) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}

fn run(command: Command) -> gradmatch::Result<()> {
    match command {
        Command::Select { config, checkpoint, flags } => {
            let path = cli::cmd_select(&config, checkpoint.as_deref(), &flags.into())?;
            println!("{}", path.display());
        }
        Command::Train { config, flags } => {
            let (dir, s) = cli::cmd_train(&config, &flags.into())?;
            println!(
                "{} {:.0}%: accuracy {:.2} ± {:.2} over {} seeds, {:.3}s mean time -> {}",
                s.strategy,
                100.0 * s.budget_fraction,
                s.accuracy_mean,
                s.accuracy_std,
                s.seeds.len(),
                s.time_mean_s,
                dir.display()
            );
            for note in &s.notes {
                println!("note: {note}");
            }
        }
        Command::Report { run_dirs, out } => {
            let r = cli::cmd_report(&run_dirs, out.as_deref())?;
            print!("{}", r.markdown);
        }
        Command::Verify { instances, n, k, dim, lambda, epsilon, seed, json } => {
            let r = cli::cmd_verify(&VerifyOptions { instances, n, k, dim, lambda, epsilon, seed })?;
            println!("instances: {}", r.instances.len());
            println!("approximation factor violations: {}", r.approximation_failures);
            println!("per-element gamma violations: {}", r.gamma_hat_failures);
            println!("submodularity ratio violations: {}", r.submodularity_ratio_failures);
            println!("set-cover violations: {}", r.set_cover_failures);
            if let Some(p) = json {
                std::fs::write(p, serde_json::to_string_pretty(&r)?)?;
            }
        }
    }
    Ok(())
}
