//! Solve the homogeneous (one group, one patch) limit system for a Markov
//! SIR configuration and compare against the classical ODE.
//!
//! With a constant-plateau infectivity of rate 0.5 and an exponential
//! plateau duration of rate 0.25, the mean infectivity is
//! `0.5 * exp(-0.25 t)` and the Volterra system collapses to
//! `dS/dt = -0.5 S I`, `dI/dt = 0.5 S I - 0.25 I`.
//!
//! ```bash
//! cargo run --example homogeneous_limit
//! ```

use std::path::Path;

use varinf::config::load_config;
use varinf::grid::TimeGrid;
use varinf::limit::solve_homogeneous;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = load_config(Path::new("crates/varinf/configs/homogeneous_sir.toml"))
        .or_else(|_| load_config(Path::new("configs/homogeneous_sir.toml")))?;
    let grid = TimeGrid::new(cfg.horizon, 1e-3)?;
    let sol = solve_homogeneous(&cfg, &grid)?;

    // Independent RK4 integration of the Markov ODE.
    let (c, mu) = (0.5, 0.25);
    let f = |s: f64, i: f64| (-c * s * i, c * s * i - mu * i);
    let (mut s, mut i) = (cfg.s0[0], cfg.i0[0]);
    let h = grid.step();
    let mut ode = vec![(s, i)];
    for _ in 0..grid.steps() {
        let (k1s, k1i) = f(s, i);
        let (k2s, k2i) = f(s + 0.5 * h * k1s, i + 0.5 * h * k1i);
        let (k3s, k3i) = f(s + 0.5 * h * k2s, i + 0.5 * h * k2i);
        let (k4s, k4i) = f(s + h * k3s, i + h * k3i);
        s += h / 6.0 * (k1s + 2.0 * k2s + 2.0 * k3s + k4s);
        i += h / 6.0 * (k1i + 2.0 * k2i + 2.0 * k3i + k4i);
        ode.push((s, i));
    }

    println!(
        "{:>6} {:>10} {:>10} {:>10} {:>12}",
        "t", "S", "I", "R", "|S - S_ode|"
    );
    let mut max_err = 0.0f64;
    for (n, t) in grid.times().enumerate() {
        let err = (sol.s[0][n] - ode[n].0)
            .abs()
            .max((sol.ibar[0][n] - ode[n].1).abs());
        max_err = max_err.max(err);
        if n % (grid.steps() / 10).max(1) == 0 {
            println!(
                "{t:>6.2} {:>10.6} {:>10.6} {:>10.6} {:>12.3e}",
                sol.s[0][n],
                sol.ibar[0][n],
                sol.rbar[0][n],
                (sol.s[0][n] - ode[n].0).abs()
            );
        }
    }
    println!("\nmax |Volterra - ODE| over the grid: {max_err:.3e}");
    Ok(())
}
