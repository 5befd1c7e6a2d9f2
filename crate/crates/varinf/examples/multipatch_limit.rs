//! Solve the full multi-group / multi-patch limit system on the 2x2
//! configuration and report the final state of every cell together with the
//! analytic bound checks (Gronwall force bound and per-cell mass floor).
//!
//! ```bash
//! cargo run --example multipatch_limit
//! ```

use std::path::Path;

use varinf::config::load_config;
use varinf::grid::TimeGrid;
use varinf::limit::{check_bounds, solve_multipatch};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = load_config(Path::new("crates/varinf/configs/acceptance_2x2.toml"))
        .or_else(|_| load_config(Path::new("configs/acceptance_2x2.toml")))?;
    let grid = TimeGrid::new(cfg.horizon, 0.01)?;
    let sol = solve_multipatch(&cfg, &grid)?;

    let last = grid.steps();
    println!("state at t = {}:", cfg.horizon);
    println!(
        "{:>3} {:>3} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "k", "l", "S", "I", "R", "B", "F"
    );
    for k in 0..cfg.num_groups {
        for l in 0..cfg.num_patches {
            let e = k * cfg.num_patches + l;
            println!(
                "{:>3} {:>3} {:>10.6} {:>10.6} {:>10.6} {:>10.6} {:>10.6}",
                k + 1,
                l + 1,
                sol.s[e][last],
                sol.ibar[e][last],
                sol.rbar[e][last],
                sol.bbar[e][last],
                sol.fbar[e][last],
            );
        }
    }
    let total_b: f64 = (0..cfg.num_cells()).map(|e| sol.bbar[e][last]).sum();
    println!("\ntotal mass at T: {total_b:.12} (should be 1)");
    println!(
        "solver: max sweeps per step {}, largest sweep update {:.3e}",
        sol.max_sweeps, sol.max_residual
    );

    let report = check_bounds(&sol, &cfg);
    println!(
        "force bound margin {:.4e} (ok: {}), mass floor margin {:.4e} (ok: {})",
        report.force_margin, report.force_ok, report.mass_margin, report.mass_ok
    );
    Ok(())
}
