//! Run the exact event-driven N-individual simulation on the 2x2
//! configuration and print a coarse trajectory of per-cell counts next to
//! the deterministic limit fractions.
//!
//! ```bash
//! cargo run --example abm_trajectory
//! ```

use std::path::Path;

use varinf::abm::{simulate, SimOptions};
use varinf::config::load_config;
use varinf::grid::TimeGrid;
use varinf::limit::solve_multipatch;
use varinf::rng::substream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = load_config(Path::new("crates/varinf/configs/acceptance_2x2.toml"))
        .or_else(|_| load_config(Path::new("configs/acceptance_2x2.toml")))?;
    let opts = SimOptions {
        output_step: 0.5,
        check_decomposition: true,
    };
    let mut rng = substream(cfg.seed, &[0x61626d]);
    let traj = simulate(&cfg, &opts, &mut rng)?;

    let grid = TimeGrid::new(cfg.horizon, 0.5)?;
    let sol = solve_multipatch(&cfg, &grid)?;

    let n = cfg.population as f64;
    println!(
        "population {}, {} events, {} infections over [0, {}]",
        cfg.population,
        traj.event_count,
        traj.infections.len(),
        cfg.horizon
    );
    println!("\ncell (k=1, l=1): simulated fraction vs limit");
    println!(
        "{:>6} {:>9} {:>9} {:>9} {:>9}",
        "t", "S^N", "Sbar", "I^N", "Ibar"
    );
    for (idx, t) in traj.grid.times().enumerate() {
        println!(
            "{t:>6.1} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            traj.s[0][idx] as f64 / n,
            sol.s[0][idx],
            traj.i[0][idx] as f64 / n,
            sol.ibar[0][idx],
        );
    }
    Ok(())
}
