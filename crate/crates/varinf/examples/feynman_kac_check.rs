//! Verify the backward-equation duality and the probabilistic path
//! representation of the susceptible fraction.
//!
//! The susceptible mass admits two independent descriptions: the forward
//! Volterra solve, and an expectation over single-individual mobility paths
//! discounted by the accumulated infection pressure along the path. This
//! example checks both the exact duality pairing and a Monte Carlo estimate
//! of the path representation.
//!
//! ```bash
//! cargo run --example feynman_kac_check
//! ```

use std::path::Path;

use varinf::config::load_config;
use varinf::feynman_kac::{duality_residual, s_representation_check, solve_backward};
use varinf::grid::TimeGrid;
use varinf::limit::solve_multipatch;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = load_config(Path::new("crates/varinf/configs/acceptance_2x2.toml"))
        .or_else(|_| load_config(Path::new("configs/acceptance_2x2.toml")))?;
    let step = 0.005;
    let grid = TimeGrid::new(cfg.horizon, step)?;
    let sol = solve_multipatch(&cfg, &grid)?;

    println!("duality residuals (terminal time {}):", cfg.horizon);
    for k in 0..cfg.num_groups {
        for l in 0..cfg.num_patches {
            let bw = solve_backward(&sol, &cfg.nu, k, cfg.horizon, l, step)?;
            let res = duality_residual(&sol, &bw)?;
            println!("  k = {}, l = {}: {res:.3e}", k + 1, l + 1);
        }
    }

    let checkpoints = [2.0, 5.0, 10.0];
    let rows = s_representation_check(&sol, &cfg, &checkpoints, 20_000, cfg.seed)?;
    println!("\npath representation, 20000 Monte Carlo paths:");
    println!(
        "{:>3} {:>3} {:>6} {:>12} {:>12} {:>10} {:>8}",
        "k", "l", "t", "deterministic", "estimate", "stderr", "z"
    );
    for r in &rows {
        println!(
            "{:>3} {:>3} {:>6.1} {:>12.6} {:>12.6} {:>10.2e} {:>8.2}",
            r.group + 1,
            r.patch + 1,
            r.t,
            r.deterministic,
            r.estimate,
            r.stderr,
            r.zscore
        );
    }
    Ok(())
}
