//! Convergence studies: simulated trajectories against the deterministic
//! limit across population sizes, with rate fitting and floor monitoring.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::abm::{simulate, AbmTrajectory, ModelConfig, SimOptions};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::limit::{solve_multipatch, LimitSolution};
use crate::rng::substream;

/// Content hash of a model configuration (stable for identical configs).
pub fn config_digest(cfg: &ModelConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(format!("{cfg:?}").as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sum over cells of the sup-over-grid L1 distance between a simulated
/// trajectory and the limit, over (S, I, R, F).
pub fn error_metric(traj: &AbmTrajectory, sol: &LimitSolution) -> Result<f64> {
    if traj.grid.len() != sol.grid.len()
        || (traj.grid.step() - sol.grid.step()).abs() > 1e-12 * sol.grid.step()
    {
        return Err(Error::argument(format!(
            "grid mismatch: trajectory has {} points at step {}, limit {} at {}",
            traj.grid.len(),
            traj.grid.step(),
            sol.grid.len(),
            sol.grid.step()
        )));
    }
    if traj.num_groups != sol.num_groups || traj.num_patches != sol.num_patches {
        return Err(Error::argument(
            "trajectory and limit have different dimensions".to_string(),
        ));
    }
    let cells = sol.num_groups * sol.num_patches;
    let mut total = 0.0;
    for e in 0..cells {
        let mut sup = 0.0f64;
        for n in 0..sol.grid.len() {
            let d = (traj.sbar(e, n) - sol.s[e][n]).abs()
                + (traj.ibar(e, n) - sol.ibar[e][n]).abs()
                + (traj.rbar(e, n) - sol.rbar[e][n]).abs()
                + (traj.fbar[e][n] - sol.fbar[e][n]).abs();
            sup = sup.max(d);
        }
        total += sup;
    }
    Ok(total)
}

/// Least-squares slope of `y` against `x` with its standard error.
fn fit_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - (intercept + slope * a);
            r * r
        })
        .sum();
    let dof = (x.len() as f64 - 2.0).max(1.0);
    let se = (ss_res / dof / sxx).sqrt();
    (slope, se)
}

/// Result of a convergence study across population sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub digest: String,
    pub sizes: Vec<usize>,
    /// `errors[i][r]`: replica `r` of size `sizes[i]`.
    pub errors: Vec<Vec<f64>>,
    pub mean_errors: Vec<f64>,
    pub stderr_errors: Vec<f64>,
    /// Fitted slope of log(mean error) against log(N), with half-width of
    /// a ~95% confidence interval.
    pub slope: f64,
    pub slope_halfwidth: f64,
    /// Per size: replicas whose minimum cell mass dipped below the analytic
    /// floor `C*_T = min_e B_e(0) exp(-nu_bar T) / 2`.
    pub floor_violations: Vec<usize>,
    pub floor: f64,
}

/// Analytic mass floor `C*_T` used to monitor the rare-event set of the
/// coupling lemmas.
pub fn mass_floor(cfg: &ModelConfig) -> f64 {
    let mut worst = f64::INFINITY;
    for k in 0..cfg.num_groups {
        for l in 0..cfg.num_patches {
            let e = cfg.cell(k, l);
            worst = worst.min(cfg.b0(e) * (-cfg.nu_bar_diag(k, l) * cfg.horizon).exp());
        }
    }
    0.5 * worst
}

/// Run `replicas` simulations for each population size against one limit
/// solve on the same output grid, and fit the error decay rate. Replicas
/// run in parallel on substreams keyed by (size, replica); the report is
/// bitwise reproducible for fixed inputs.
pub fn convergence_study(
    cfg: &ModelConfig,
    sizes: &[usize],
    replicas: usize,
    output_step: f64,
    seed: u64,
) -> Result<ConvergenceReport> {
    if sizes.len() < 2 {
        return Err(Error::argument(
            "convergence study needs at least two population sizes".to_string(),
        ));
    }
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::argument(
            "population sizes must be strictly ascending".to_string(),
        ));
    }
    if replicas == 0 {
        return Err(Error::argument("replicas must be >= 1".to_string()));
    }
    let grid = TimeGrid::new(cfg.horizon, output_step)?;
    let sol = solve_multipatch(cfg, &grid)?;
    let floor = mass_floor(cfg);
    let opts = SimOptions {
        output_step,
        check_decomposition: false,
    };
    let digest = config_digest(cfg);

    let mut jobs = Vec::new();
    for (i, &n) in sizes.iter().enumerate() {
        for r in 0..replicas {
            jobs.push((i, n, r));
        }
    }
    let results: Vec<Result<(usize, f64, bool)>> = jobs
        .par_iter()
        .map(|&(i, n, r)| {
            let mut run_cfg = cfg.clone();
            run_cfg.population = n;
            let mut rng = substream(seed, &[0x636f6e76, n as u64, r as u64]);
            let traj = simulate(&run_cfg, &opts, &mut rng).map_err(|e| match e {
                Error::Solver {
                    step,
                    time,
                    residual,
                    message,
                } => Error::Solver {
                    step,
                    time,
                    residual,
                    message: format!("size {n} replica {r}: {message}"),
                },
                other => other,
            })?;
            let err = error_metric(&traj, &sol)?;
            let cells = cfg.num_cells();
            let mut violated = false;
            'outer: for e in 0..cells {
                for m in 0..grid.len() {
                    if traj.bbar(e, m) < floor {
                        violated = true;
                        break 'outer;
                    }
                }
            }
            Ok((i, err, violated))
        })
        .collect();

    let mut errors = vec![Vec::with_capacity(replicas); sizes.len()];
    let mut floor_violations = vec![0usize; sizes.len()];
    for res in results {
        let (i, err, violated) = res?;
        errors[i].push(err);
        if violated {
            floor_violations[i] += 1;
        }
    }

    let mut mean_errors = Vec::with_capacity(sizes.len());
    let mut stderr_errors = Vec::with_capacity(sizes.len());
    for errs in &errors {
        let n = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / n;
        let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        mean_errors.push(mean);
        stderr_errors.push((var / n).sqrt());
    }
    let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = mean_errors.iter().map(|m| m.ln()).collect();
    let (slope, se) = fit_slope(&xs, &ys);
    Ok(ConvergenceReport {
        digest,
        sizes: sizes.to_vec(),
        errors,
        mean_errors,
        stderr_errors,
        slope,
        slope_halfwidth: 2.0 * se,
        floor_violations,
        floor,
    })
}

/// Two-sample Kolmogorov-Smirnov test. Returns the statistic and whether
/// the samples pass (fail to reject equality) at significance `alpha`,
/// using the asymptotic threshold `c(alpha) sqrt((n+m)/(nm))` with
/// c(0.01) = 1.628 and c(0.05) = 1.358.
pub fn ks_two_sample(a: &[f64], b: &[f64], alpha: f64) -> Result<(f64, bool)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::argument(
            "KS test needs non-empty samples".to_string(),
        ));
    }
    let c = if (alpha - 0.01).abs() < 1e-12 {
        1.628
    } else if (alpha - 0.05).abs() < 1e-12 {
        1.358
    } else {
        return Err(Error::argument(format!(
            "unsupported KS significance level {alpha}"
        )));
    };
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len(), ys.len());
    let mut i = 0usize;
    let mut j = 0usize;
    let mut d = 0.0f64;
    while i < n && j < m {
        let v = xs[i].min(ys[j]);
        while i < n && xs[i] <= v {
            i += 1;
        }
        while j < m && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let threshold = c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt();
    Ok((d, d <= threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abm::ContactSchedule;
    use crate::infectivity::{InfectivityLaw, LawFamily, ScalarDist};
    use crate::mobility::RateSchedule;

    fn markov_config(n: usize) -> ModelConfig {
        let law = InfectivityLaw {
            family: LawFamily::ConstantPlateau {
                rate: 0.5,
                duration: ScalarDist::Exponential { rate: 0.25 },
            },
            cap: 1.0,
        };
        ModelConfig {
            num_groups: 1,
            num_patches: 1,
            gamma: 1.0,
            beta: ContactSchedule::scalar(1.0, 1).unwrap(),
            nu: RateSchedule::zero(1, 1),
            lambda_new: vec![law.clone()],
            lambda_initial: vec![law],
            s0: vec![0.99],
            i0: vec![0.01],
            r0: vec![0.0],
            population: n,
            horizon: 8.0,
            seed: 3,
            mc_curve_samples: None,
        }
    }

    fn synthetic_solution(traj: &AbmTrajectory) -> LimitSolution {
        let cells = traj.num_groups * traj.num_patches;
        let len = traj.grid.len();
        let field = |f: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
            (0..cells)
                .map(|e| (0..len).map(|n| f(e, n)).collect())
                .collect()
        };
        LimitSolution {
            grid: traj.grid.clone(),
            num_groups: traj.num_groups,
            num_patches: traj.num_patches,
            s: field(&|e, n| traj.sbar(e, n)),
            fbar: traj.fbar.clone(),
            ibar: field(&|e, n| traj.ibar(e, n)),
            rbar: field(&|e, n| traj.rbar(e, n)),
            bbar: field(&|e, n| traj.bbar(e, n)),
            gammabar: traj.gammabar.clone(),
            max_sweeps: 0,
            max_residual: 0.0,
        }
    }

    #[test]
    fn error_metric_zero_on_identical_inputs_and_exact_on_perturbation() {
        let cfg = markov_config(400);
        let mut rng = substream(1, &[0]);
        let traj = simulate(&cfg, &SimOptions::default(), &mut rng).unwrap();
        let mut sol = synthetic_solution(&traj);
        assert_eq!(error_metric(&traj, &sol).unwrap(), 0.0);
        for v in sol.s[0].iter_mut() {
            *v += 0.1;
        }
        let err = error_metric(&traj, &sol).unwrap();
        assert!((err - 0.1).abs() < 1e-12, "got {err}");
    }

    #[test]
    fn error_metric_rejects_grid_mismatch() {
        let cfg = markov_config(200);
        let mut rng = substream(2, &[0]);
        let traj = simulate(&cfg, &SimOptions::default(), &mut rng).unwrap();
        let mut sol = synthetic_solution(&traj);
        sol.grid = TimeGrid::new(8.0, 0.1).unwrap();
        assert!(error_metric(&traj, &sol).is_err());
    }

    #[test]
    fn study_is_deterministic_and_errors_shrink() {
        let cfg = markov_config(1);
        let sizes = [100, 400, 1600];
        let a = convergence_study(&cfg, &sizes, 6, 0.05, 77).unwrap();
        let b = convergence_study(&cfg, &sizes, 6, 0.05, 77).unwrap();
        assert_eq!(a, b);
        assert!(a.errors.iter().flatten().all(|&e| e >= 0.0));
        assert!(
            a.mean_errors[2] < a.mean_errors[0],
            "means {:?}",
            a.mean_errors
        );
        assert!(a.slope < 0.0, "slope {}", a.slope);
    }

    #[test]
    fn digest_stable_and_sensitive() {
        let a = markov_config(100);
        let mut b = markov_config(100);
        assert_eq!(config_digest(&a), config_digest(&b));
        b.gamma = 0.5;
        assert_ne!(config_digest(&a), config_digest(&b));
    }

    #[test]
    fn ks_accepts_same_distribution_and_rejects_shifted() {
        let mut rng = substream(5, &[1]);
        let a: Vec<f64> = (0..400).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
        let b: Vec<f64> = (0..400).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
        let (_, pass) = ks_two_sample(&a, &b, 0.01).unwrap();
        assert!(pass);
        let shifted: Vec<f64> = a.iter().map(|x| x + 0.4).collect();
        let (stat, pass) = ks_two_sample(&a, &shifted, 0.01).unwrap();
        assert!(!pass, "stat {stat}");
    }
}
