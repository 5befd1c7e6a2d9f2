//! Command-line front end: config ingestion, run orchestration, CSV and
//! manifest persistence, optional SVG plots.

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::abm::{simulate, ModelConfig, SimOptions};
use crate::config::{document_digest, parse_config};
use crate::error::{Error, Result};
use crate::feynman_kac::{duality_residual, s_representation_check, solve_backward};
use crate::grid::TimeGrid;
use crate::harness::convergence_study;
use crate::limit::{check_bounds, solve_multipatch, LimitSolution};
use crate::mckv::{coupling_study, fixed_point_m};
use crate::rng::substream;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "varinf",
    version,
    about = "Stochastic epidemic models with varying infectivity: simulation, deterministic limits and verification runs"
)]
pub struct Cli {
    /// Worker threads for parallel batches (default: machine parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Model configuration file (TOML).
    pub config: PathBuf,
    /// Output directory for CSVs, manifest and plots.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Master seed override (default: the config's seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Horizon override.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Emit SVG plots next to the CSVs.
    #[arg(long)]
    pub plots: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the exact event-driven N-individual simulation.
    Abm {
        #[command(flatten)]
        common: CommonArgs,
        /// Output sampling step.
        #[arg(long, default_value_t = 0.05)]
        grid_step: f64,
    },
    /// Solve the deterministic limit system.
    Limit {
        #[command(flatten)]
        common: CommonArgs,
        /// Solver grid step.
        #[arg(long, default_value_t = 0.01)]
        grid_step: f64,
    },
    /// Verify the backward duality and the path representation of S.
    FkCheck {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 0.001)]
        grid_step: f64,
        /// Monte Carlo paths for the representation check.
        #[arg(long, default_value_t = 100_000)]
        mc_paths: usize,
    },
    /// Compute the McKean-Vlasov fixed point and compare it to the limit
    /// force of infection.
    Mckv {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 0.01)]
        grid_step: f64,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
    },
    /// Coupled finite-N vs limit-particle mismatch experiment.
    Coupling {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 0.01)]
        grid_step: f64,
        /// Population sizes, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = vec![250, 1000, 4000, 16000])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        replicas: usize,
    },
    /// Convergence study of the simulation toward the limit.
    Convergence {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 0.05)]
        grid_step: f64,
        #[arg(long, value_delimiter = ',', default_values_t = vec![250, 1000, 4000, 16000])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        replicas: usize,
    },
}

struct RunContext {
    cfg: ModelConfig,
    digest: String,
    seed: u64,
    out_dir: PathBuf,
    plots: bool,
    outputs: Vec<String>,
    started: u64,
}

impl RunContext {
    fn new(common: &CommonArgs) -> Result<RunContext> {
        let text = fs::read_to_string(&common.config)?;
        let mut cfg = parse_config(&text)?;
        let digest = document_digest(&text)?;
        if let Some(h) = common.horizon {
            if !(h > 0.0) {
                return Err(Error::argument(format!("horizon must be > 0, got {h}")));
            }
            cfg.horizon = h;
        }
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        fs::create_dir_all(&common.out_dir)?;
        Ok(RunContext {
            seed: cfg.seed,
            cfg,
            digest,
            out_dir: common.out_dir.clone(),
            plots: common.plots,
            outputs: Vec::new(),
            started: unix_now(),
        })
    }

    fn write_file(&mut self, name: &str, content: &str) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        let mut f = fs::File::create(&path)?;
        f.write_all(content.as_bytes())?;
        self.outputs.push(name.to_string());
        Ok(path)
    }

    fn finish(&mut self, command: &str) -> Result<()> {
        let manifest = serde_json::json!({
            "manifest_version": 1,
            "tool_version": VERSION,
            "command": command,
            "config_digest": self.digest,
            "seed": self.seed,
            "started_unix": self.started,
            "finished_unix": unix_now(),
            "outputs": self.outputs,
        });
        let path = self.out_dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())?;
        Ok(())
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn fmt_f(x: f64) -> String {
    // Shortest round-trip decimal; '.' separator, locale independent.
    format!("{x:?}")
}

/// CSV of a limit solution: one row per (t, k, l), 1-based k and l.
fn limit_csv(sol: &LimitSolution) -> String {
    let mut out = String::from("t,k,l,S,I,R,B,Fbar,Gammabar\n");
    for (n, t) in sol.grid.times().enumerate() {
        for k in 0..sol.num_groups {
            for l in 0..sol.num_patches {
                let e = k * sol.num_patches + l;
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    fmt_f(t),
                    k + 1,
                    l + 1,
                    fmt_f(sol.s[e][n]),
                    fmt_f(sol.ibar[e][n]),
                    fmt_f(sol.rbar[e][n]),
                    fmt_f(sol.bbar[e][n]),
                    fmt_f(sol.fbar[e][n]),
                    fmt_f(sol.gammabar[e][n]),
                ));
            }
        }
    }
    out
}

/// Minimal deterministic SVG line chart.
fn svg_chart(title: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
    ];
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for (_, pts) in series {
        for &(x, y) in pts {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if !xmin.is_finite() || xmax == xmin {
        xmax = xmin + 1.0;
    }
    if !ymin.is_finite() || ymax == ymin {
        ymax = ymin + 1.0;
    }
    let sx = |x: f64| M + (x - xmin) / (xmax - xmin) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - ymin) / (ymax - ymin) * (H - 2.0 * M);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{title}</text>\n\
         <line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n",
        W / 2.0,
        H - M,
        W - M,
        H - M,
        H - M,
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            W - M + 4.0 - 40.0,
            M + 16.0 * i as f64,
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{M}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">[{}, {}] x [{}, {}]</text>\n",
        H - 8.0,
        fmt_f(xmin),
        fmt_f(xmax),
        fmt_f(ymin),
        fmt_f(ymax),
    ));
    svg.push_str("</svg>\n");
    svg
}

fn checkpoints_for(horizon: f64) -> Vec<f64> {
    [2.0, 5.0, 10.0]
        .iter()
        .copied()
        .filter(|&t| t <= horizon)
        .chain(std::iter::once(horizon))
        .collect::<Vec<f64>>()
        .into_iter()
        .fold(Vec::new(), |mut acc, t| {
            if !acc.iter().any(|&x: &f64| (x - t).abs() < 1e-12) {
                acc.push(t);
            }
            acc
        })
}

/// Execute a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    if let Some(threads) = cli.threads {
        // Best effort: fails harmlessly if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Abm { common, grid_step } => {
            let mut ctx = RunContext::new(&common)?;
            let opts = SimOptions {
                output_step: grid_step,
                check_decomposition: false,
            };
            let mut rng = substream(ctx.seed, &[0x61626d]);
            let traj = simulate(&ctx.cfg, &opts, &mut rng)?;
            let mut csv = String::from("t,k,l,S,I,R,B,Fbar,Gammabar\n");
            for (n, t) in traj.grid.times().enumerate() {
                for k in 0..traj.num_groups {
                    for l in 0..traj.num_patches {
                        let e = k * traj.num_patches + l;
                        csv.push_str(&format!(
                            "{},{},{},{},{},{},{},{},{}\n",
                            fmt_f(t),
                            k + 1,
                            l + 1,
                            traj.s[e][n],
                            traj.i[e][n],
                            traj.r[e][n],
                            traj.b[e][n],
                            fmt_f(traj.fbar[e][n]),
                            fmt_f(traj.gammabar[e][n]),
                        ));
                    }
                }
            }
            ctx.write_file("abm.csv", &csv)?;
            if ctx.plots {
                let series: Vec<(String, Vec<(f64, f64)>)> = (0..traj.num_groups
                    * traj.num_patches)
                    .map(|e| {
                        (
                            format!(
                                "I k{} l{}",
                                e / traj.num_patches + 1,
                                e % traj.num_patches + 1
                            ),
                            traj.grid
                                .times()
                                .enumerate()
                                .map(|(n, t)| (t, traj.i[e][n] as f64))
                                .collect(),
                        )
                    })
                    .collect();
                let refs: Vec<(&str, Vec<(f64, f64)>)> = series
                    .iter()
                    .map(|(n, p)| (n.as_str(), p.clone()))
                    .collect();
                let svg = svg_chart("infected counts", &refs);
                ctx.write_file("abm_infected.svg", &svg)?;
            }
            println!(
                "abm: population {}, {} events, {} infections",
                ctx.cfg.population,
                traj.event_count,
                traj.infections.len()
            );
            ctx.finish("abm")
        }
        Command::Limit { common, grid_step } => {
            let mut ctx = RunContext::new(&common)?;
            let grid = TimeGrid::new(ctx.cfg.horizon, grid_step)?;
            let sol = solve_multipatch(&ctx.cfg, &grid)?;
            let report = check_bounds(&sol, &ctx.cfg);
            ctx.write_file("limit.csv", &limit_csv(&sol))?;
            if ctx.plots {
                let cells = sol.num_groups * sol.num_patches;
                let series: Vec<(String, Vec<(f64, f64)>)> = (0..cells)
                    .map(|e| {
                        (
                            format!(
                                "I k{} l{}",
                                e / sol.num_patches + 1,
                                e % sol.num_patches + 1
                            ),
                            sol.grid
                                .times()
                                .enumerate()
                                .map(|(n, t)| (t, sol.ibar[e][n]))
                                .collect(),
                        )
                    })
                    .collect();
                let refs: Vec<(&str, Vec<(f64, f64)>)> = series
                    .iter()
                    .map(|(n, p)| (n.as_str(), p.clone()))
                    .collect();
                let svg = svg_chart("infected fractions (limit)", &refs);
                ctx.write_file("limit_infected.svg", &svg)?;
            }
            println!(
                "limit: {} steps, max sweeps {}, force margin {:.3e}, mass margin {:.3e}",
                grid.steps(),
                sol.max_sweeps,
                report.force_margin,
                report.mass_margin
            );
            if !report.force_ok || !report.mass_ok {
                return Err(Error::Solver {
                    step: grid.steps(),
                    time: grid.horizon(),
                    residual: report.force_margin.min(report.mass_margin),
                    message: "analytic bounds violated by the solution".into(),
                });
            }
            ctx.finish("limit")
        }
        Command::FkCheck {
            common,
            grid_step,
            mc_paths,
        } => {
            let mut ctx = RunContext::new(&common)?;
            let grid = TimeGrid::new(ctx.cfg.horizon, grid_step)?;
            let sol = solve_multipatch(&ctx.cfg, &grid)?;
            let mut dual_csv = String::from("k,l,t,residual\n");
            let mut worst = 0.0f64;
            for k in 0..ctx.cfg.num_groups {
                for l in 0..ctx.cfg.num_patches {
                    let bw = solve_backward(&sol, &ctx.cfg.nu, k, ctx.cfg.horizon, l, grid_step)?;
                    let res = duality_residual(&sol, &bw)?;
                    worst = worst.max(res);
                    dual_csv.push_str(&format!(
                        "{},{},{},{}\n",
                        k + 1,
                        l + 1,
                        fmt_f(ctx.cfg.horizon),
                        fmt_f(res)
                    ));
                }
            }
            ctx.write_file("fk_duality.csv", &dual_csv)?;
            let checkpoints = checkpoints_for(ctx.cfg.horizon);
            let rows = s_representation_check(&sol, &ctx.cfg, &checkpoints, mc_paths, ctx.seed)?;
            let mut csv = String::from("k,l,t,deterministic,mc_estimate,stderr,zscore\n");
            let mut worst_z = 0.0f64;
            for r in &rows {
                worst_z = worst_z.max(r.zscore.abs());
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.group + 1,
                    r.patch + 1,
                    fmt_f(r.t),
                    fmt_f(r.deterministic),
                    fmt_f(r.estimate),
                    fmt_f(r.stderr),
                    fmt_f(r.zscore),
                ));
            }
            ctx.write_file("fk_representation.csv", &csv)?;
            println!(
                "fk-check: max duality residual {worst:.3e}, max |z| {worst_z:.2} over {} checkpoints",
                rows.len()
            );
            ctx.finish("fk-check")
        }
        Command::Mckv {
            common,
            grid_step,
            tol,
            max_iter,
        } => {
            let mut ctx = RunContext::new(&common)?;
            let grid = TimeGrid::new(ctx.cfg.horizon, grid_step)?;
            let fp = fixed_point_m(&ctx.cfg, &grid, tol, max_iter)?;
            let sol = solve_multipatch(&ctx.cfg, &grid)?;
            let cells = ctx.cfg.num_cells();
            let mut csv = String::from("t,k,l,mstar,fbar,abs_diff\n");
            let mut worst = 0.0f64;
            for (n, t) in grid.times().enumerate() {
                for e in 0..cells {
                    let d = (fp.m[e][n] - sol.fbar[e][n]).abs();
                    worst = worst.max(d);
                    csv.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        fmt_f(t),
                        e / ctx.cfg.num_patches + 1,
                        e % ctx.cfg.num_patches + 1,
                        fmt_f(fp.m[e][n]),
                        fmt_f(sol.fbar[e][n]),
                        fmt_f(d),
                    ));
                }
            }
            ctx.write_file("mckv.csv", &csv)?;
            println!(
                "mckv: fixed point in {} iterations (residual {:.3e}), sup |m* - F| = {:.3e}",
                fp.iterations, fp.residual, worst
            );
            ctx.finish("mckv")
        }
        Command::Coupling {
            common,
            grid_step,
            sizes,
            replicas,
        } => {
            let mut ctx = RunContext::new(&common)?;
            let grid = TimeGrid::new(ctx.cfg.horizon, grid_step)?;
            let sol = solve_multipatch(&ctx.cfg, &grid)?;
            let rows = coupling_study(&ctx.cfg, &sol, &sizes, replicas, ctx.seed)?;
            let mut csv = String::from("N,k,replica,mean_sup_mismatch,tau_mismatch_fraction\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.population,
                    r.group + 1,
                    r.replica,
                    fmt_f(r.mean_sup_mismatch),
                    fmt_f(r.tau_mismatch_fraction),
                ));
            }
            ctx.write_file("coupling.csv", &csv)?;
            let means = crate::mckv::mean_mismatch_by_size(&rows, &sizes);
            for (n, m) in sizes.iter().zip(&means) {
                println!("coupling: N = {n:>6}, mean mismatch fraction = {m:.5}");
            }
            ctx.finish("coupling")
        }
        Command::Convergence {
            common,
            grid_step,
            sizes,
            replicas,
        } => {
            let mut ctx = RunContext::new(&common)?;
            let report = convergence_study(&ctx.cfg, &sizes, replicas, grid_step, ctx.seed)?;
            let mut csv = String::from("N,replica,error\n");
            for (i, errs) in report.errors.iter().enumerate() {
                for (r, e) in errs.iter().enumerate() {
                    csv.push_str(&format!("{},{},{}\n", report.sizes[i], r, fmt_f(*e)));
                }
            }
            ctx.write_file("convergence.csv", &csv)?;
            let mut summary = String::from("N,mean_error,stderr,floor_violations\n");
            for i in 0..report.sizes.len() {
                summary.push_str(&format!(
                    "{},{},{},{}\n",
                    report.sizes[i],
                    fmt_f(report.mean_errors[i]),
                    fmt_f(report.stderr_errors[i]),
                    report.floor_violations[i],
                ));
            }
            summary.push_str(&format!(
                "# slope = {} +/- {}\n",
                fmt_f(report.slope),
                fmt_f(report.slope_halfwidth)
            ));
            ctx.write_file("convergence_summary.csv", &summary)?;
            if ctx.plots {
                let pts: Vec<(f64, f64)> = report
                    .sizes
                    .iter()
                    .zip(&report.mean_errors)
                    .map(|(&n, &e)| ((n as f64).log10(), e.log10()))
                    .collect();
                let svg = svg_chart("log10 mean error vs log10 N", &[("mean error", pts)]);
                ctx.write_file("convergence_loglog.svg", &svg)?;
            }
            println!(
                "convergence: slope {:.3} +/- {:.3}, mean error at N={} is {:.4}",
                report.slope,
                report.slope_halfwidth,
                report.sizes.last().unwrap(),
                report.mean_errors.last().unwrap()
            );
            ctx.finish("convergence")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses_all_subcommands() {
        for cmd in [
            "abm",
            "limit",
            "fk-check",
            "mckv",
            "coupling",
            "convergence",
        ] {
            let args = ["varinf", cmd, "config.toml"];
            let cli = Cli::try_parse_from(args).unwrap();
            let _ = cli.command;
        }
        let cli = Cli::try_parse_from([
            "varinf",
            "--threads",
            "2",
            "convergence",
            "config.toml",
            "--sizes",
            "100,200",
            "--replicas",
            "3",
            "--plots",
        ])
        .unwrap();
        match cli.command {
            Command::Convergence {
                sizes,
                replicas,
                common,
                ..
            } => {
                assert_eq!(sizes, vec![100, 200]);
                assert_eq!(replicas, 3);
                assert!(common.plots);
            }
            _ => panic!("wrong command"),
        }
    }

    #[test]
    fn float_format_round_trips() {
        for &x in &[0.1, 1.0 / 3.0, 12345.6789, 1e-15] {
            let s = fmt_f(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
        }
    }
}
