//! Brute-force checks of the OMP guarantees on small random banks.
//!
//! cargo run --release --example verify_theory

use gradmatch::cli::{cmd_verify, VerifyOptions};

fn main() -> gradmatch::Result<()> {
    let opts = VerifyOptions { instances: 30, n: 8, k: 3, ..VerifyOptions::default() };
    let report = cmd_verify(&opts)?;
    for (i, inst) in report.instances.iter().enumerate().take(5) {
        let v = &inst.verifier;
        println!(
            "instance {i}: F(omp) {:.4} / F(opt) {:.4}, gamma_hat {:.4}, ratio {:.4}, bound {:.4}",
            v.omp_f, v.optimum_f, v.gamma_hat, v.submodularity_ratio, v.bound
        );
    }
    println!("instances:                       {}", report.instances.len());
    println!("approximation factor violations: {}", report.approximation_failures);
    println!("per-element gamma violations:    {}", report.gamma_hat_failures);
    println!("submodularity ratio violations:  {}", report.submodularity_ratio_failures);
    println!("set-cover violations:            {}", report.set_cover_failures);
    Ok(())
}
