//! Backward dual of the susceptible flow and its probabilistic
//! representation.
//!
//! For a group `k`, terminal time `t` and patch `l`, the backward system
//! `du/ds = D_k(s) u - Q_k(s) u`, `u(t) = e_l` (with `D_k` the diagonal of
//! the infection intensities and `Q_k` the susceptible mobility generator)
//! is dual to the forward susceptible equation: `<S(s), u(s)>` is constant
//! in `s`, so `S^l(t) = <S(0), u(0)>`. The same `u` is the conditional
//! expectation `u^{l'}(s) = E[1_{X(t)=l} exp(-int_s^t Gamma^{X(r)}(r) dr) |
//! X(s) = l']` along susceptible mobility paths, which gives an independent
//! Monte Carlo oracle for the deterministic solver.

use rand::Rng;

use crate::abm::ModelConfig;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::limit::LimitSolution;
use crate::mobility::{sample_patch_path, Compartment, RateSchedule};
use crate::rng::substream;

/// Solution of the backward dual system on a uniform grid over `[0, t]`.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    pub group: usize,
    pub terminal_time: f64,
    pub terminal_patch: usize,
    pub grid: TimeGrid,
    /// `u[n][l']` at `s = grid.t(n)`.
    pub u: Vec<Vec<f64>>,
}

impl BackwardSolution {
    /// `u^{l'}(0)`: the dual weight of initial patch `l'`.
    pub fn initial(&self, lp: usize) -> f64 {
        self.u[0][lp]
    }
}

/// Integrate the backward system with classical RK4, interpolating the
/// intensity linearly between the grid points of `sol`.
pub fn solve_backward(
    sol: &LimitSolution,
    nu: &RateSchedule,
    k: usize,
    t: f64,
    l: usize,
    step: f64,
) -> Result<BackwardSolution> {
    if !(step > 0.0) {
        return Err(Error::argument(format!(
            "backward step must be > 0, got {step}"
        )));
    }
    if t > sol.grid.horizon() + 1e-12 {
        return Err(Error::argument(format!(
            "terminal time {t} exceeds the solution horizon {}",
            sol.grid.horizon()
        )));
    }
    let lpatch = sol.num_patches;
    if k >= sol.num_groups || l >= lpatch {
        return Err(Error::argument(format!(
            "terminal cell ({k}, {l}) out of range"
        )));
    }
    let grid = TimeGrid::new(t, step)?;
    let n = grid.steps();
    let gamma = |s: f64, lp: usize| sol.grid.interp(&sol.gammabar[k * lpatch + lp], s);
    // du/ds = D(s) u - Q(s) u, rows of Q indexed by the current patch.
    let deriv = |s: f64, u: &[f64], out: &mut [f64]| {
        let q = nu.generator_at(k, Compartment::S, s);
        for lp in 0..lpatch {
            let mut acc = gamma(s, lp) * u[lp];
            for lq in 0..lpatch {
                acc -= q.get(lp, lq) * u[lq];
            }
            out[lp] = acc;
        }
    };
    let mut u = vec![vec![0.0; lpatch]; n + 1];
    u[n][l] = 1.0;
    let h = grid.step();
    let mut k1 = vec![0.0; lpatch];
    let mut k2 = vec![0.0; lpatch];
    let mut k3 = vec![0.0; lpatch];
    let mut k4 = vec![0.0; lpatch];
    let mut tmp = vec![0.0; lpatch];
    for m in (0..n).rev() {
        let s1 = grid.t(m + 1);
        let s_mid = s1 - 0.5 * h;
        let s0 = grid.t(m);
        let cur = u[m + 1].clone();
        deriv(s1, &cur, &mut k1);
        for lp in 0..lpatch {
            tmp[lp] = cur[lp] - 0.5 * h * k1[lp];
        }
        deriv(s_mid, &tmp, &mut k2);
        for lp in 0..lpatch {
            tmp[lp] = cur[lp] - 0.5 * h * k2[lp];
        }
        deriv(s_mid, &tmp, &mut k3);
        for lp in 0..lpatch {
            tmp[lp] = cur[lp] - h * k3[lp];
        }
        deriv(s0, &tmp, &mut k4);
        for lp in 0..lpatch {
            u[m][lp] = cur[lp] - h / 6.0 * (k1[lp] + 2.0 * k2[lp] + 2.0 * k3[lp] + k4[lp]);
        }
    }
    Ok(BackwardSolution {
        group: k,
        terminal_time: t,
        terminal_patch: l,
        grid,
        u,
    })
}

/// Maximum discrete derivative of `<S(s), u(s)>` along the shared grid. The
/// inner product is conserved by the continuous dynamics, so the residual
/// measures the combined discretization error of the two solvers.
pub fn duality_residual(sol: &LimitSolution, bw: &BackwardSolution) -> Result<f64> {
    let h = bw.grid.step();
    if (h - sol.grid.step()).abs() > 1e-12 * h {
        return Err(Error::argument(format!(
            "grid mismatch: backward step {h}, forward step {}",
            sol.grid.step()
        )));
    }
    let k = bw.group;
    let lpatch = sol.num_patches;
    let inner = |n: usize| -> f64 {
        (0..lpatch)
            .map(|lp| sol.s[k * lpatch + lp][n] * bw.u[n][lp])
            .sum()
    };
    let mut worst = 0.0f64;
    let mut prev = inner(0);
    for n in 1..bw.grid.len() {
        let cur = inner(n);
        worst = worst.max(((cur - prev) / h).abs());
        prev = cur;
    }
    Ok(worst)
}

/// One row of a Monte Carlo representation check.
#[derive(Debug, Clone)]
pub struct FkCheckRow {
    pub group: usize,
    pub patch: usize,
    pub t: f64,
    pub deterministic: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub zscore: f64,
}

/// Estimate `S^l_k(t)` at each checkpoint by sampling susceptible mobility
/// paths started from the initial susceptible distribution (with a cemetery
/// atom carrying the mass `1 - sum_l S^l_k(0)`) and discounting by the
/// accumulated intensity along the path.
pub fn s_representation_check(
    sol: &LimitSolution,
    cfg: &ModelConfig,
    checkpoints: &[f64],
    mc_paths: usize,
    seed: u64,
) -> Result<Vec<FkCheckRow>> {
    if mc_paths == 0 {
        return Err(Error::argument("mc_paths must be positive".to_string()));
    }
    for &t in checkpoints {
        if !(t >= 0.0 && t <= sol.grid.horizon() + 1e-12) {
            return Err(Error::argument(format!(
                "checkpoint {t} outside the solution horizon"
            )));
        }
    }
    let lpatch = cfg.num_patches;
    let h = sol.grid.step();
    let horizon = checkpoints.iter().cloned().fold(0.0, f64::max);
    let mut rows = Vec::new();
    for k in 0..cfg.num_groups {
        let s0: Vec<f64> = (0..lpatch).map(|l| cfg.s0[cfg.cell(k, l)]).collect();
        let total_s0: f64 = s0.iter().sum();
        // Accumulators: per checkpoint and landing patch, sum of weights and
        // of squared weights.
        let mut sums = vec![vec![0.0f64; lpatch]; checkpoints.len()];
        let mut sqs = vec![vec![0.0f64; lpatch]; checkpoints.len()];
        let mut rng = substream(seed, &[0x666b72, k as u64]);
        for _ in 0..mc_paths {
            let v = rng.gen::<f64>();
            // Initial patch from the susceptible distribution, 1-based with
            // 0 as the cemetery.
            let mut acc = 0.0;
            let mut start = 0usize;
            for (l, &w) in s0.iter().enumerate() {
                acc += w;
                if v < acc {
                    start = l + 1;
                    break;
                }
            }
            if v >= total_s0 {
                start = 0;
            }
            if start == 0 {
                continue; // cemetery: the indicator vanishes at every t
            }
            let path = sample_patch_path(&cfg.nu, k, Compartment::S, start, 0.0, horizon, &mut rng);
            // Discount integral by trapezoid on the solver grid, split at
            // the path's jump times.
            let mut cum = 0.0;
            let mut prev_t = 0.0;
            let mut prev_g = sol.at(&sol.gammabar, cfg.cell(k, path.patch_at(0.0) - 1), 0.0);
            let mut ck = 0usize;
            let mut jumps = path.jumps().iter().peekable();
            let mut next_grid = 1usize;
            while ck < checkpoints.len() {
                // Next breakpoint: grid node, jump, or checkpoint.
                let t_grid = if next_grid < sol.grid.len() {
                    sol.grid.t(next_grid)
                } else {
                    f64::INFINITY
                };
                let t_jump = jumps.peek().map(|(tj, _)| *tj).unwrap_or(f64::INFINITY);
                let t_ck = checkpoints[ck];
                let t_next = t_grid.min(t_jump).min(t_ck);
                let patch_before = path.patch_at(0.5 * (prev_t + t_next)) - 1;
                let g_next = sol.at(&sol.gammabar, cfg.cell(k, patch_before), t_next);
                cum += 0.5 * (t_next - prev_t) * (prev_g + g_next);
                prev_t = t_next;
                if t_next == t_jump {
                    jumps.next();
                    prev_g = sol.at(
                        &sol.gammabar,
                        cfg.cell(k, path.patch_at(t_next) - 1),
                        t_next,
                    );
                } else {
                    prev_g = g_next;
                }
                if t_next == t_grid {
                    next_grid += 1;
                }
                while ck < checkpoints.len() && checkpoints[ck] <= prev_t {
                    let w = (-cum).exp();
                    let l_here = path.patch_at(checkpoints[ck]) - 1;
                    sums[ck][l_here] += w;
                    sqs[ck][l_here] += w * w;
                    ck += 1;
                }
            }
        }
        for (ci, &t) in checkpoints.iter().enumerate() {
            let n_idx = ((t / h).round() as usize).min(sol.grid.steps());
            for l in 0..lpatch {
                let mean = sums[ci][l] / mc_paths as f64;
                let var = (sqs[ci][l] / mc_paths as f64 - mean * mean).max(0.0);
                let stderr = (var / mc_paths as f64).sqrt();
                let det = sol.s[cfg.cell(k, l)][n_idx];
                let diff = mean - det;
                let zscore = if stderr > 0.0 {
                    diff / stderr
                } else if diff.abs() < 1e-12 {
                    0.0
                } else {
                    f64::INFINITY
                };
                rows.push(FkCheckRow {
                    group: k,
                    patch: l,
                    t,
                    deterministic: det,
                    estimate: mean,
                    stderr,
                    zscore,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abm::ContactSchedule;
    use crate::infectivity::{InfectivityLaw, LawFamily, ScalarDist};
    use crate::limit::solve_multipatch;
    use crate::matrix::SqMat;
    use crate::mobility::{PiecewiseMatrices, DEFAULT_TRANSITION_STEP};

    fn law(rate: f64, mu: f64) -> InfectivityLaw {
        InfectivityLaw {
            family: LawFamily::ConstantPlateau {
                rate,
                duration: ScalarDist::Exponential { rate: mu },
            },
            cap: 1.0,
        }
    }

    fn two_patch_config() -> ModelConfig {
        let m = SqMat::from_rows(&[vec![0.0, 0.12], vec![0.08, 0.0]]).unwrap();
        let nu = RateSchedule::uniform(1, PiecewiseMatrices::constant(m).unwrap());
        ModelConfig {
            num_groups: 1,
            num_patches: 2,
            gamma: 0.5,
            beta: ContactSchedule::scalar(1.0, 2).unwrap(),
            nu,
            lambda_new: vec![law(0.5, 0.25)],
            lambda_initial: vec![law(0.5, 0.25)],
            s0: vec![0.55, 0.40],
            i0: vec![0.01, 0.005],
            r0: vec![0.02, 0.015],
            population: 1,
            horizon: 10.0,
            seed: 11,
            mc_curve_samples: None,
        }
    }

    fn markov_config() -> ModelConfig {
        ModelConfig {
            num_groups: 1,
            num_patches: 1,
            gamma: 1.0,
            beta: ContactSchedule::scalar(1.0, 1).unwrap(),
            nu: RateSchedule::zero(1, 1),
            lambda_new: vec![law(0.5, 0.25)],
            lambda_initial: vec![law(0.5, 0.25)],
            s0: vec![0.99],
            i0: vec![0.01],
            r0: vec![0.0],
            population: 1,
            horizon: 10.0,
            seed: 0,
            mc_curve_samples: None,
        }
    }

    #[test]
    fn zero_intensity_recovers_transition_probabilities() {
        let mut cfg = two_patch_config();
        cfg.i0 = vec![0.0, 0.0];
        cfg.r0 = vec![0.03, 0.02];
        let grid = TimeGrid::new(8.0, 0.01).unwrap();
        let sol = solve_multipatch(&cfg, &grid).unwrap();
        for l in 0..2 {
            let bw = solve_backward(&sol, &cfg.nu, 0, 8.0, l, 0.01).unwrap();
            for &s in &[0.0, 2.5, 6.0] {
                let q = cfg
                    .nu
                    .transition_matrix(0, Compartment::S, s, 8.0, DEFAULT_TRANSITION_STEP)
                    .unwrap();
                let n = bw.grid.floor_index(s);
                for lp in 0..2 {
                    assert!(
                        (bw.u[n][lp] - q.get(lp, l)).abs() < 1e-8,
                        "u({s})[{lp}] vs q = {} vs {}",
                        bw.u[n][lp],
                        q.get(lp, l)
                    );
                }
            }
        }
    }

    #[test]
    fn scalar_case_is_an_exponential_integral() {
        let cfg = markov_config();
        let grid = TimeGrid::new(10.0, 1e-3).unwrap();
        let sol = solve_multipatch(&cfg, &grid).unwrap();
        let bw = solve_backward(&sol, &cfg.nu, 0, 10.0, 0, 1e-3).unwrap();
        // u(0) = exp(-int_0^t Gamma) and S(t) = S(0) u(0).
        let expected = sol.s[0][grid.steps()] / sol.s[0][0];
        assert!((bw.initial(0) - expected).abs() < 1e-7);
    }

    #[test]
    fn duality_residual_is_second_order_small() {
        let cfg = two_patch_config();
        let grid = TimeGrid::new(10.0, 1e-3).unwrap();
        let sol = solve_multipatch(&cfg, &grid).unwrap();
        for l in 0..2 {
            let bw = solve_backward(&sol, &cfg.nu, 0, 10.0, l, 1e-3).unwrap();
            let res = duality_residual(&sol, &bw).unwrap();
            assert!(res <= 10.0 * 1e-3 * 1e-3, "residual {res:e}");
            // Adjoint consistency at the endpoints.
            let dual: f64 = (0..2).map(|lp| sol.s[lp][0] * bw.initial(lp)).sum();
            assert!((dual - sol.s[l][grid.steps()]).abs() < 1e-7);
            // Discounting never exceeds the bare transition probability.
            let q = cfg
                .nu
                .transition_matrix(0, Compartment::S, 0.0, 10.0, DEFAULT_TRANSITION_STEP)
                .unwrap();
            for lp in 0..2 {
                assert!(bw.initial(lp) <= q.get(lp, l) + 1e-9);
            }
        }
    }

    #[test]
    fn perturbed_intensity_breaks_duality() {
        let cfg = two_patch_config();
        let grid = TimeGrid::new(10.0, 1e-3).unwrap();
        let mut sol = solve_multipatch(&cfg, &grid).unwrap();
        for v in sol.gammabar[0].iter_mut() {
            *v += 0.1;
        }
        let bw = solve_backward(&sol, &cfg.nu, 0, 10.0, 0, 1e-3).unwrap();
        let res = duality_residual(&sol, &bw).unwrap();
        assert!(res > 1e-3, "negative control too small: {res:e}");
    }

    #[test]
    fn monte_carlo_representation_matches_solver() {
        let cfg = two_patch_config();
        let grid = TimeGrid::new(10.0, 0.01).unwrap();
        let sol = solve_multipatch(&cfg, &grid).unwrap();
        let rows = s_representation_check(&sol, &cfg, &[2.0, 5.0, 10.0], 100_000, 99).unwrap();
        assert_eq!(rows.len(), 6);
        for row in &rows {
            assert!(
                row.zscore.abs() <= 4.0,
                "z = {} at (k={}, l={}, t={})",
                row.zscore,
                row.group,
                row.patch,
                row.t
            );
        }
    }

    #[test]
    fn representation_without_discounting_is_pure_migration() {
        let mut cfg = two_patch_config();
        cfg.i0 = vec![0.0, 0.0];
        cfg.r0 = vec![0.03, 0.02];
        let grid = TimeGrid::new(6.0, 0.01).unwrap();
        let sol = solve_multipatch(&cfg, &grid).unwrap();
        let rows = s_representation_check(&sol, &cfg, &[6.0], 50_000, 7).unwrap();
        for row in &rows {
            assert!(row.zscore.abs() <= 4.0, "z = {}", row.zscore);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let cfg = markov_config();
        let grid = TimeGrid::new(2.0, 0.01).unwrap();
        let sol = solve_multipatch(&cfg, &grid).unwrap();
        assert!(solve_backward(&sol, &cfg.nu, 0, 2.0, 0, 0.0).is_err());
        assert!(solve_backward(&sol, &cfg.nu, 0, 5.0, 0, 0.01).is_err());
        assert!(solve_backward(&sol, &cfg.nu, 0, 2.0, 3, 0.01).is_err());
        let bw = solve_backward(&sol, &cfg.nu, 0, 2.0, 0, 0.02).unwrap();
        assert!(duality_residual(&sol, &bw).is_err());
    }
}
