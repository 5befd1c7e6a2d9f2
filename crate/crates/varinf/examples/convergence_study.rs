//! Law-of-large-numbers convergence study: simulate the N-individual system
//! for increasing N, measure the sup-over-time L1 distance to the
//! deterministic limit, and fit the decay rate.
//!
//! ```bash
//! cargo run --example convergence_study
//! ```

use std::path::Path;

use varinf::config::load_config;
use varinf::harness::convergence_study;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = load_config(Path::new("crates/varinf/configs/acceptance_2x2.toml"))
        .or_else(|_| load_config(Path::new("configs/acceptance_2x2.toml")))?;
    let sizes = [250usize, 1000, 4000, 16000];
    let replicas = 6;
    let report = convergence_study(&cfg, &sizes, replicas, 0.05, cfg.seed)?;

    println!("config digest: {}...", &report.digest[..16]);
    println!(
        "{:>8} {:>12} {:>12} {:>8}",
        "N", "mean error", "stderr", "floor!"
    );
    for i in 0..report.sizes.len() {
        println!(
            "{:>8} {:>12.5} {:>12.5} {:>8}",
            report.sizes[i],
            report.mean_errors[i],
            report.stderr_errors[i],
            report.floor_violations[i]
        );
    }
    println!(
        "\nfitted slope of log(mean error) vs log(N): {:.3} +/- {:.3}",
        report.slope, report.slope_halfwidth
    );
    println!("(a slope near -0.5 is the central-limit-theorem rate)");
    Ok(())
}
