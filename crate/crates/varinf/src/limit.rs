//! Deterministic large-population limit of the epidemic model.
//!
//! The limit is a system of Volterra integral equations for, per cell
//! `(k, l)`: the susceptible fraction `S`, the scaled force of infection `F`,
//! the infected and recovered fractions `I`, `R`, the cell mass
//! `B = S + I + R` and the per-susceptible intensity
//! `Gamma = B^{-gamma} * sum beta F`. The solver marches forward on a uniform
//! grid with trapezoid quadrature of the convolution terms and a fixed-point
//! sweep per step; the transition matrices `q(s, t)` of infected mobility are
//! maintained incrementally by one-step composition, so memory stays
//! O(steps * L^2) per group.

use crate::abm::{ContactSchedule, ModelConfig};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::infectivity::mean_curves;
use crate::matrix::SqMat;
use crate::mobility::{Compartment, DEFAULT_TRANSITION_STEP};
use crate::rng::mix;

/// Mean infectivity curves and infected-period CDFs per group, sampled on
/// the solver grid.
#[derive(Debug, Clone)]
pub struct MeanCurveSet {
    pub lambda_new: Vec<Vec<f64>>,
    pub lambda_init: Vec<Vec<f64>>,
    pub cdf_new: Vec<Vec<f64>>,
    pub cdf_init: Vec<Vec<f64>>,
}

/// Evaluate the per-group mean curves on `grid` (closed form where
/// available, Monte Carlo otherwise, with sub-seeds fixed by the config
/// seed so results are reproducible).
pub fn mean_curve_set(cfg: &ModelConfig, grid: &TimeGrid) -> Result<MeanCurveSet> {
    let mut set = MeanCurveSet {
        lambda_new: Vec::new(),
        lambda_init: Vec::new(),
        cdf_new: Vec::new(),
        cdf_init: Vec::new(),
    };
    for k in 0..cfg.num_groups {
        let new = mean_curves(
            &cfg.lambda_new[k],
            grid,
            cfg.mc_curve_samples,
            mix(cfg.seed, &[0x63757276, k as u64, 0]),
        )?;
        let init = mean_curves(
            &cfg.lambda_initial[k],
            grid,
            cfg.mc_curve_samples,
            mix(cfg.seed, &[0x63757276, k as u64, 1]),
        )?;
        set.lambda_new.push(new.lambda_bar);
        set.cdf_new.push(new.cdf);
        set.lambda_init.push(init.lambda_bar);
        set.cdf_init.push(init.cdf);
    }
    Ok(set)
}

/// Solution of the limit system on a uniform grid, per cell `e = k * L + l`.
#[derive(Debug, Clone)]
pub struct LimitSolution {
    pub grid: TimeGrid,
    pub num_groups: usize,
    pub num_patches: usize,
    pub s: Vec<Vec<f64>>,
    pub fbar: Vec<Vec<f64>>,
    pub ibar: Vec<Vec<f64>>,
    pub rbar: Vec<Vec<f64>>,
    pub bbar: Vec<Vec<f64>>,
    pub gammabar: Vec<Vec<f64>>,
    /// Largest number of fixed-point sweeps used by any step.
    pub max_sweeps: usize,
    /// Largest sweep-to-sweep update observed during the fixed-point
    /// iterations (steps are only accepted once the update reaches the
    /// floating-point noise floor).
    pub max_residual: f64,
}

impl LimitSolution {
    /// Linear interpolation of a field at time `t`.
    pub fn at(&self, field: &[Vec<f64>], e: usize, t: f64) -> f64 {
        self.grid.interp(&field[e], t)
    }
}

/// Transition kernels of infected mobility for one group, advanced step by
/// step: `cols[m] = q(t_m, t_n)`, `phi[m] = int_0^{t_n - t_m} q(t_m, t_m + u)
/// F(du)` and `psi = int_0^{t_n} q(0, s) F0(ds)`.
/// Columns and phi blocks are stored flat and contiguous (one `dim x dim`
/// row-major block per past grid time) so the per-step O(n) passes stream
/// through memory instead of chasing one heap allocation per block.
struct Kernels {
    cols: Vec<f64>,
    phi: Vec<f64>,
    psi: SqMat,
    scratch: Vec<f64>,
    dim: usize,
}

impl Kernels {
    fn new(dim: usize, f_at0: f64, f0_at0: f64) -> Kernels {
        let mut ker = Kernels {
            cols: Vec::new(),
            phi: Vec::new(),
            psi: SqMat::identity(dim).scale(f0_at0),
            scratch: vec![0.0; dim * dim],
            dim,
        };
        ker.push_new_column(f_at0);
        ker
    }

    /// Append the blocks for the newest grid time: `q(t_n, t_n) = I` and
    /// `phi = I * F(0)` (the duration atom at zero).
    fn push_new_column(&mut self, f_at0: f64) {
        let d = self.dim;
        for i in 0..d {
            for j in 0..d {
                let id = if i == j { 1.0 } else { 0.0 };
                self.cols.push(id);
                self.phi.push(id * f_at0);
            }
        }
    }

    /// `q(t_m, t_n)[from][to]` for the current step `n`.
    #[inline]
    fn col(&self, m: usize, from: usize, to: usize) -> f64 {
        self.cols[(m * self.dim + from) * self.dim + to]
    }

    /// `phi(t_m, t_n)[from][to]` for the current step `n`.
    #[inline]
    fn phi_at(&self, m: usize, from: usize, to: usize) -> f64 {
        self.phi[(m * self.dim + from) * self.dim + to]
    }

    /// Advance from step `n - 1` to `n` with the one-step transition matrix
    /// `qstep = q(t_{n-1}, t_n)`.
    fn advance(&mut self, qstep: &SqMat, cdf_new: &[f64], cdf_init: &[f64], n: usize) {
        let d = self.dim;
        let dd = d * d;
        debug_assert_eq!(self.cols.len(), n * dd);
        let d_init = cdf_init[n] - cdf_init[n - 1];
        if qstep.is_identity() {
            // Frozen columns: only the phi/psi trapezoid increments remain.
            if d_init != 0.0 {
                for (p, a) in self.psi.data_mut().iter_mut().zip(&self.cols[..dd]) {
                    *p += d_init * a;
                }
            }
            for m in 0..n {
                let df = cdf_new[n - m] - cdf_new[n - 1 - m];
                if df != 0.0 {
                    let base = m * dd;
                    for i in 0..dd {
                        self.phi[base + i] += df * self.cols[base + i];
                    }
                }
            }
            self.push_new_column(cdf_new[0]);
            return;
        }
        let q = qstep.data();
        for m in 0..n {
            let base = m * dd;
            // scratch = cols[m] * qstep.
            self.scratch.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..d {
                for mid in 0..d {
                    let c = self.cols[base + i * d + mid];
                    if c != 0.0 {
                        for j in 0..d {
                            self.scratch[i * d + j] += c * q[mid * d + j];
                        }
                    }
                }
            }
            if m == 0 && d_init != 0.0 {
                for ((p, a), b) in self
                    .psi
                    .data_mut()
                    .iter_mut()
                    .zip(&self.cols[base..base + dd])
                    .zip(&self.scratch)
                {
                    *p += 0.5 * d_init * (a + b);
                }
            }
            let df = cdf_new[n - m] - cdf_new[n - 1 - m];
            if df != 0.0 {
                for i in 0..dd {
                    self.phi[base + i] += 0.5 * df * (self.cols[base + i] + self.scratch[i]);
                }
            }
            self.cols[base..base + dd].copy_from_slice(&self.scratch);
        }
        self.push_new_column(cdf_new[0]);
    }
}

/// Inflow integrand `sum_{l'} nu^{l',l}(t) x[l']` (diagonal included) for one
/// group and compartment; writes per-patch values into `out`.
fn nu_flow(cfg: &ModelConfig, comp: Compartment, k: usize, t: f64, x: &[f64], out: &mut [f64]) {
    let lpatch = cfg.num_patches;
    let q = cfg.nu.generator_at(k, comp, t);
    for l in 0..lpatch {
        let mut acc = 0.0;
        for lp in 0..lpatch {
            acc += q.get(lp, l) * x[cfg.cell(k, lp)];
        }
        out[cfg.cell(k, l)] = acc;
    }
}

fn beta_dot(beta_now: &[f64], cells: usize, e: usize, f: impl Fn(usize) -> f64) -> f64 {
    let mut acc = 0.0;
    for e2 in 0..cells {
        acc += ContactSchedule::get(beta_now, cells, e, e2) * f(e2);
    }
    acc
}

/// Per-cell floor `B(0) exp(-nu_bar * horizon)` from the migration rates;
/// the solver errors out if a cell mass ever crosses it (it provably
/// cannot for a correct solve).
fn mass_floors(cfg: &ModelConfig) -> Vec<f64> {
    (0..cfg.num_cells())
        .map(|e| {
            let (k, l) = (e / cfg.num_patches, e % cfg.num_patches);
            cfg.b0(e) * (-cfg.nu_bar_diag(k, l) * cfg.horizon).exp()
        })
        .collect()
}

const MAX_SWEEPS: usize = 50;
const SWEEP_TOL: f64 = 1e-12;

/// Solve the full coupled system. When `given_force` is provided the
/// per-susceptible intensity is built from it instead of the computed force
/// (the response map of the McKean-Vlasov fixed point); the returned `fbar`
/// is then the response.
fn march_full(
    cfg: &ModelConfig,
    grid: &TimeGrid,
    curves: &MeanCurveSet,
    given_force: Option<&[Vec<f64>]>,
) -> Result<LimitSolution> {
    let cells = cfg.num_cells();
    let lpatch = cfg.num_patches;
    let h = grid.step();
    let half_h = 0.5 * h;
    let steps = grid.steps();
    let floors = mass_floors(cfg);

    let mut s = vec![Vec::with_capacity(steps + 1); cells];
    let mut f = vec![Vec::with_capacity(steps + 1); cells];
    let mut ib = vec![Vec::with_capacity(steps + 1); cells];
    let mut rb = vec![Vec::with_capacity(steps + 1); cells];
    let mut bb = vec![Vec::with_capacity(steps + 1); cells];
    let mut gm = vec![Vec::with_capacity(steps + 1); cells];
    let mut sg = vec![Vec::with_capacity(steps + 1); cells];

    let mut kernels: Vec<Kernels> = (0..cfg.num_groups)
        .map(|k| Kernels::new(lpatch, curves.cdf_new[k][0], curves.cdf_init[k][0]))
        .collect();

    // n = 0: all convolutions over [0, 0] vanish except the initial-infected
    // atom terms carried by psi.
    let mut psi_term = vec![0.0; cells];
    for k in 0..cfg.num_groups {
        for l in 0..lpatch {
            let e = cfg.cell(k, l);
            let mut acc = 0.0;
            for lp in 0..lpatch {
                acc += cfg.i0[cfg.cell(k, lp)] * kernels[k].psi.get(lp, l);
            }
            psi_term[e] = acc;
        }
    }
    let beta0 = cfg.beta.at(0.0);
    for e in 0..cells {
        let k = e / lpatch;
        s[e].push(cfg.s0[e]);
        ib[e].push((cfg.i0[e] - psi_term[e]).max(0.0));
        rb[e].push(cfg.r0[e] + psi_term[e]);
        bb[e].push(cfg.b0(e));
        f[e].push(curves.lambda_init[k][0] * cfg.i0[e]);
    }
    for e in 0..cells {
        let force = |e2: usize| match given_force {
            Some(m) => m[e2][0],
            None => f[e2][0],
        };
        let g0 = bb[e][0].powf(-cfg.gamma) * beta_dot(beta0, cells, e, force);
        gm[e].push(g0);
        sg[e].push(s[e][0] * g0);
    }

    // Running trapezoid accumulators (values through the committed step).
    let mut cum_sg = vec![0.0; cells];
    let mut cum_nu_i = vec![0.0; cells];
    let mut cum_nu_r = vec![0.0; cells];
    let mut vi_prev = vec![0.0; cells];
    let mut vr_prev = vec![0.0; cells];
    let mut vb_prev = vec![0.0; cells];
    {
        let i0v: Vec<f64> = (0..cells).map(|e| ib[e][0]).collect();
        let r0v: Vec<f64> = (0..cells).map(|e| rb[e][0]).collect();
        let s0v: Vec<f64> = (0..cells).map(|e| s[e][0]).collect();
        let mut tmp = vec![0.0; cells];
        for k in 0..cfg.num_groups {
            nu_flow(cfg, Compartment::I, k, 0.0, &i0v, &mut vi_prev);
            nu_flow(cfg, Compartment::R, k, 0.0, &r0v, &mut vr_prev);
            nu_flow(cfg, Compartment::S, k, 0.0, &s0v, &mut tmp);
        }
        for k in 0..cfg.num_groups {
            nu_flow(cfg, Compartment::S, k, 0.0, &s0v, &mut tmp);
        }
        for e in 0..cells {
            vb_prev[e] = tmp[e] + vi_prev[e] + vr_prev[e];
        }
    }

    let mut max_sweeps = 0usize;
    let mut max_residual = 0.0f64;
    let mut base_f = vec![0.0; cells];
    let mut base_ti = vec![0.0; cells];
    let mut vs_now = vec![0.0; cells];
    let mut vi_now = vec![0.0; cells];
    let mut vr_now = vec![0.0; cells];

    for n in 1..=steps {
        let t_prev = grid.t(n - 1);
        let t_n = grid.t(n);
        let t_mid = t_prev + half_h;

        for (k, ker) in kernels.iter_mut().enumerate() {
            let qstep = cfg.nu.transition_matrix(
                k,
                Compartment::I,
                t_prev,
                t_n,
                DEFAULT_TRANSITION_STEP.min(h),
            )?;
            ker.advance(&qstep, &curves.cdf_new[k], &curves.cdf_init[k], n);
        }

        // Step bases: everything not involving the step-n unknowns.
        for k in 0..cfg.num_groups {
            let ker = &kernels[k];
            let lam0 = &curves.lambda_init[k];
            let lam = &curves.lambda_new[k];
            for l in 0..lpatch {
                let e = cfg.cell(k, l);
                let mut acc_f = 0.0;
                for lp in 0..lpatch {
                    acc_f += cfg.i0[cfg.cell(k, lp)] * ker.col(0, lp, l);
                }
                acc_f *= lam0[n];
                let mut acc_ti = 0.0;
                for m in 0..n {
                    let w = if m == 0 { half_h } else { h };
                    let lam_nm = lam[n - m];
                    let mut conv = 0.0;
                    let mut rec = 0.0;
                    for lp in 0..lpatch {
                        let sgv = sg[cfg.cell(k, lp)][m];
                        conv += sgv * ker.col(m, lp, l);
                        rec += sgv * ker.phi_at(m, lp, l);
                    }
                    acc_f += w * lam_nm * conv;
                    acc_ti += w * rec;
                }
                base_f[e] = acc_f;
                base_ti[e] = acc_ti;
                let mut acc_psi = 0.0;
                for lp in 0..lpatch {
                    acc_psi += cfg.i0[cfg.cell(k, lp)] * ker.psi.get(lp, l);
                }
                psi_term[e] = acc_psi;
            }
        }

        let beta_now = cfg.beta.at(t_n);
        // Step-n iterates, seeded with the previous values.
        let mut s_n: Vec<f64> = (0..cells).map(|e| s[e][n - 1]).collect();
        let mut f_n: Vec<f64> = (0..cells).map(|e| f[e][n - 1]).collect();
        let mut i_n: Vec<f64> = (0..cells).map(|e| ib[e][n - 1]).collect();
        let mut r_n: Vec<f64> = (0..cells).map(|e| rb[e][n - 1]).collect();
        let mut b_n: Vec<f64> = (0..cells).map(|e| bb[e][n - 1]).collect();
        let mut g_n: Vec<f64> = (0..cells).map(|e| gm[e][n - 1]).collect();

        let mut prev_change = f64::INFINITY;
        let mut sweeps = 0usize;
        loop {
            sweeps += 1;
            let mut change = 0.0f64;

            // Force of infection, with the half-weight t_n quadrature node.
            for e in 0..cells {
                let k = e / lpatch;
                let new = base_f[e] + half_h * curves.lambda_new[k][0] * s_n[e] * g_n[e];
                change = change.max((new - f_n[e]).abs());
                f_n[e] = new;
            }
            // Cell masses via the migration-flow identity.
            for k in 0..cfg.num_groups {
                nu_flow(cfg, Compartment::S, k, t_n, &s_n, &mut vs_now);
                nu_flow(cfg, Compartment::I, k, t_n, &i_n, &mut vi_now);
                nu_flow(cfg, Compartment::R, k, t_n, &r_n, &mut vr_now);
            }
            for e in 0..cells {
                let vb_now = vs_now[e] + vi_now[e] + vr_now[e];
                let new = bb[e][n - 1] + half_h * (vb_prev[e] + vb_now);
                change = change.max((new - b_n[e]).abs());
                b_n[e] = new;
                if new < floors[e] * (1.0 - 1e-9) {
                    return Err(Error::Solver {
                        step: n,
                        time: t_n,
                        residual: floors[e] - new,
                        message: format!("cell mass crossed its analytic floor {}", floors[e]),
                    });
                }
            }
            // Per-susceptible intensity.
            for e in 0..cells {
                let dot = beta_dot(beta_now, cells, e, |e2| match given_force {
                    Some(m) => m[e2][n],
                    None => f_n[e2],
                });
                let new = b_n[e].powf(-cfg.gamma) * dot;
                change = change.max((new - g_n[e]).abs());
                g_n[e] = new;
            }
            // Susceptibles: midpoint-exponential update of
            // dS/dt = (Q_S^T - diag(Gamma)) S per group.
            for k in 0..cfg.num_groups {
                let q = cfg.nu.generator_at(k, Compartment::S, t_mid);
                let mut m = SqMat::zeros(lpatch);
                for l in 0..lpatch {
                    for lp in 0..lpatch {
                        m.set(l, lp, h * q.get(lp, l));
                    }
                    let e = cfg.cell(k, l);
                    let gmid = 0.5 * (gm[e][n - 1] + g_n[e]);
                    m.set(l, l, m.get(l, l) - h * gmid);
                }
                let prop = m.expm();
                let prev: Vec<f64> = (0..lpatch).map(|l| s[cfg.cell(k, l)][n - 1]).collect();
                let next = prop.matvec(&prev);
                for l in 0..lpatch {
                    let e = cfg.cell(k, l);
                    change = change.max((next[l] - s_n[e]).abs());
                    s_n[e] = next[l];
                }
            }
            // Infected and recovered from their integral expressions.
            for e in 0..cells {
                let k = e / lpatch;
                let sg_now = s_n[e] * g_n[e];
                let atom = curves.cdf_new[k][0];
                let ti = base_ti[e] + half_h * atom * sg_now;
                let cum_sg_n = cum_sg[e] + half_h * (sg[e][n - 1] + sg_now);
                let new_i = (cfg.i0[e] - psi_term[e] + cum_sg_n - ti
                    + cum_nu_i[e]
                    + half_h * (vi_prev[e] + vi_now[e]))
                    .max(0.0);
                let new_r =
                    cfg.r0[e] + psi_term[e] + ti + cum_nu_r[e] + half_h * (vr_prev[e] + vr_now[e]);
                change = change
                    .max((new_i - i_n[e]).abs())
                    .max((new_r - r_n[e]).abs());
                i_n[e] = new_i;
                r_n[e] = new_r;
            }

            if change == 0.0 {
                break;
            }
            if change < SWEEP_TOL && change >= prev_change {
                break; // floating-point noise floor
            }
            if sweeps >= MAX_SWEEPS {
                if change > SWEEP_TOL {
                    return Err(Error::Solver {
                        step: n,
                        time: t_n,
                        residual: change,
                        message: "step sweep did not converge".into(),
                    });
                }
                break;
            }
            prev_change = change;
            max_residual = max_residual.max(change);
        }
        max_sweeps = max_sweeps.max(sweeps);

        // Commit and roll the trapezoid accumulators forward.
        for k in 0..cfg.num_groups {
            nu_flow(cfg, Compartment::S, k, t_n, &s_n, &mut vs_now);
            nu_flow(cfg, Compartment::I, k, t_n, &i_n, &mut vi_now);
            nu_flow(cfg, Compartment::R, k, t_n, &r_n, &mut vr_now);
        }
        for e in 0..cells {
            let sg_now = s_n[e] * g_n[e];
            cum_sg[e] += half_h * (sg[e][n - 1] + sg_now);
            cum_nu_i[e] += half_h * (vi_prev[e] + vi_now[e]);
            cum_nu_r[e] += half_h * (vr_prev[e] + vr_now[e]);
            vi_prev[e] = vi_now[e];
            vr_prev[e] = vr_now[e];
            vb_prev[e] = vs_now[e] + vi_now[e] + vr_now[e];
            s[e].push(s_n[e]);
            f[e].push(f_n[e]);
            ib[e].push(i_n[e]);
            rb[e].push(r_n[e]);
            bb[e].push(b_n[e]);
            gm[e].push(g_n[e]);
            sg[e].push(sg_now);
        }
    }

    Ok(LimitSolution {
        grid: grid.clone(),
        num_groups: cfg.num_groups,
        num_patches: cfg.num_patches,
        s,
        fbar: f,
        ibar: ib,
        rbar: rb,
        bbar: bb,
        gammabar: gm,
        max_sweeps,
        max_residual,
    })
}

/// Solve the full multipatch-multigroup limit system.
pub fn solve_multipatch(cfg: &ModelConfig, grid: &TimeGrid) -> Result<LimitSolution> {
    cfg.validate()?;
    let curves = mean_curve_set(cfg, grid)?;
    march_full(cfg, grid, &curves, None)
}

/// Response map of the limit system to a given force-of-infection family
/// `m[e][n]`: compartments evolve under the intensity built from `m`, and
/// the returned `fbar` is the force they generate in turn. The limit
/// solution is its unique fixed point.
pub fn respond(cfg: &ModelConfig, grid: &TimeGrid, m: &[Vec<f64>]) -> Result<LimitSolution> {
    cfg.validate()?;
    if m.len() != cfg.num_cells() || m.iter().any(|v| v.len() != grid.len()) {
        return Err(Error::argument(
            "force iterate has wrong shape for the grid".to_string(),
        ));
    }
    let curves = mean_curve_set(cfg, grid)?;
    march_full(cfg, grid, &curves, Some(m))
}

/// Homogeneous model (K = L = 1, no migration): the same march, whose
/// intensity reduces to `beta * F` with the cell mass pinned at 1.
pub fn solve_homogeneous(cfg: &ModelConfig, grid: &TimeGrid) -> Result<LimitSolution> {
    if cfg.num_groups != 1 || cfg.num_patches != 1 {
        return Err(Error::argument(
            "solve_homogeneous requires K = L = 1".to_string(),
        ));
    }
    if cfg.nu.rate_bound() != 0.0 {
        return Err(Error::argument(
            "solve_homogeneous requires zero migration rates".to_string(),
        ));
    }
    solve_multipatch(cfg, grid)
}

/// gamma = 0: the (S, F) subsystem is closed and solved first on its own;
/// I, R and B are then reconstructed from their integral expressions. An
/// independent code path from [`solve_multipatch`], used to cross-validate
/// the full solver.
pub fn solve_multipatch_gamma0(cfg: &ModelConfig, grid: &TimeGrid) -> Result<LimitSolution> {
    if cfg.gamma != 0.0 {
        return Err(Error::argument(format!(
            "solve_multipatch_gamma0 requires gamma = 0, got {}",
            cfg.gamma
        )));
    }
    cfg.validate()?;
    let curves = mean_curve_set(cfg, grid)?;
    let cells = cfg.num_cells();
    let lpatch = cfg.num_patches;
    let h = grid.step();
    let half_h = 0.5 * h;
    let steps = grid.steps();

    let mut s = vec![Vec::with_capacity(steps + 1); cells];
    let mut f = vec![Vec::with_capacity(steps + 1); cells];
    let mut gm = vec![Vec::with_capacity(steps + 1); cells];
    let mut sg = vec![Vec::with_capacity(steps + 1); cells];
    // Stored per step for the reconstruction pass.
    let mut psi_terms = vec![vec![0.0; cells]];
    let mut ti_terms = vec![vec![0.0; cells]];

    let mut kernels: Vec<Kernels> = (0..cfg.num_groups)
        .map(|k| Kernels::new(lpatch, curves.cdf_new[k][0], curves.cdf_init[k][0]))
        .collect();
    for k in 0..cfg.num_groups {
        for l in 0..lpatch {
            let e = cfg.cell(k, l);
            let mut acc = 0.0;
            for lp in 0..lpatch {
                acc += cfg.i0[cfg.cell(k, lp)] * kernels[k].psi.get(lp, l);
            }
            psi_terms[0][e] = acc;
        }
    }

    let beta0 = cfg.beta.at(0.0);
    for e in 0..cells {
        let k = e / lpatch;
        s[e].push(cfg.s0[e]);
        f[e].push(curves.lambda_init[k][0] * cfg.i0[e]);
    }
    for e in 0..cells {
        let g0 = beta_dot(beta0, cells, e, |e2| f[e2][0]);
        gm[e].push(g0);
        sg[e].push(s[e][0] * g0);
    }

    let mut base_f = vec![0.0; cells];
    let mut base_ti = vec![0.0; cells];
    let mut max_sweeps = 0usize;
    let mut max_residual = 0.0f64;

    for n in 1..=steps {
        let t_prev = grid.t(n - 1);
        let t_n = grid.t(n);
        let t_mid = t_prev + half_h;
        for (k, ker) in kernels.iter_mut().enumerate() {
            let qstep = cfg.nu.transition_matrix(
                k,
                Compartment::I,
                t_prev,
                t_n,
                DEFAULT_TRANSITION_STEP.min(h),
            )?;
            ker.advance(&qstep, &curves.cdf_new[k], &curves.cdf_init[k], n);
        }
        let mut psi_term = vec![0.0; cells];
        for k in 0..cfg.num_groups {
            let ker = &kernels[k];
            let lam0 = &curves.lambda_init[k];
            let lam = &curves.lambda_new[k];
            for l in 0..lpatch {
                let e = cfg.cell(k, l);
                let mut acc_f = 0.0;
                for lp in 0..lpatch {
                    acc_f += cfg.i0[cfg.cell(k, lp)] * ker.col(0, lp, l);
                }
                acc_f *= lam0[n];
                let mut acc_ti = 0.0;
                for m in 0..n {
                    let w = if m == 0 { half_h } else { h };
                    let lam_nm = lam[n - m];
                    let mut conv = 0.0;
                    let mut rec = 0.0;
                    for lp in 0..lpatch {
                        let sgv = sg[cfg.cell(k, lp)][m];
                        conv += sgv * ker.col(m, lp, l);
                        rec += sgv * ker.phi_at(m, lp, l);
                    }
                    acc_f += w * lam_nm * conv;
                    acc_ti += w * rec;
                }
                base_f[e] = acc_f;
                base_ti[e] = acc_ti;
                let mut acc_psi = 0.0;
                for lp in 0..lpatch {
                    acc_psi += cfg.i0[cfg.cell(k, lp)] * ker.psi.get(lp, l);
                }
                psi_term[e] = acc_psi;
            }
        }

        let beta_now = cfg.beta.at(t_n);
        let mut s_n: Vec<f64> = (0..cells).map(|e| s[e][n - 1]).collect();
        let mut f_n: Vec<f64> = (0..cells).map(|e| f[e][n - 1]).collect();
        let mut g_n: Vec<f64> = (0..cells).map(|e| gm[e][n - 1]).collect();
        let mut prev_change = f64::INFINITY;
        let mut sweeps = 0usize;
        loop {
            sweeps += 1;
            let mut change = 0.0f64;
            for e in 0..cells {
                let k = e / lpatch;
                let new = base_f[e] + half_h * curves.lambda_new[k][0] * s_n[e] * g_n[e];
                change = change.max((new - f_n[e]).abs());
                f_n[e] = new;
            }
            for e in 0..cells {
                let new = beta_dot(beta_now, cells, e, |e2| f_n[e2]);
                change = change.max((new - g_n[e]).abs());
                g_n[e] = new;
            }
            for k in 0..cfg.num_groups {
                let q = cfg.nu.generator_at(k, Compartment::S, t_mid);
                let mut m = SqMat::zeros(lpatch);
                for l in 0..lpatch {
                    for lp in 0..lpatch {
                        m.set(l, lp, h * q.get(lp, l));
                    }
                    let e = cfg.cell(k, l);
                    let gmid = 0.5 * (gm[e][n - 1] + g_n[e]);
                    m.set(l, l, m.get(l, l) - h * gmid);
                }
                let prop = m.expm();
                let prev: Vec<f64> = (0..lpatch).map(|l| s[cfg.cell(k, l)][n - 1]).collect();
                let next = prop.matvec(&prev);
                for l in 0..lpatch {
                    let e = cfg.cell(k, l);
                    change = change.max((next[l] - s_n[e]).abs());
                    s_n[e] = next[l];
                }
            }
            if change == 0.0 {
                break;
            }
            if change < SWEEP_TOL && change >= prev_change {
                break;
            }
            if sweeps >= MAX_SWEEPS {
                if change > SWEEP_TOL {
                    return Err(Error::Solver {
                        step: n,
                        time: t_n,
                        residual: change,
                        message: "step sweep did not converge".into(),
                    });
                }
                break;
            }
            prev_change = change;
            max_residual = max_residual.max(change);
        }
        max_sweeps = max_sweeps.max(sweeps);

        let mut ti_n = vec![0.0; cells];
        for e in 0..cells {
            let k = e / lpatch;
            let sg_now = s_n[e] * g_n[e];
            ti_n[e] = base_ti[e] + half_h * curves.cdf_new[k][0] * sg_now;
            s[e].push(s_n[e]);
            f[e].push(f_n[e]);
            gm[e].push(g_n[e]);
            sg[e].push(sg_now);
        }
        psi_terms.push(psi_term);
        ti_terms.push(ti_n);
    }

    // Reconstruction pass: I, R and B from the solved (S, Gamma) history.
    let mut ib = vec![Vec::with_capacity(steps + 1); cells];
    let mut rb = vec![Vec::with_capacity(steps + 1); cells];
    let mut bb = vec![Vec::with_capacity(steps + 1); cells];
    for e in 0..cells {
        ib[e].push((cfg.i0[e] - psi_terms[0][e]).max(0.0));
        rb[e].push(cfg.r0[e] + psi_terms[0][e]);
        bb[e].push(cfg.b0(e));
    }
    let mut cum_sg = vec![0.0; cells];
    let mut cum_nu_i = vec![0.0; cells];
    let mut cum_nu_r = vec![0.0; cells];
    let mut vi_prev = vec![0.0; cells];
    let mut vr_prev = vec![0.0; cells];
    let mut vb_prev = vec![0.0; cells];
    let mut vs_now = vec![0.0; cells];
    let mut vi_now = vec![0.0; cells];
    let mut vr_now = vec![0.0; cells];
    {
        let i0v: Vec<f64> = (0..cells).map(|e| ib[e][0]).collect();
        let r0v: Vec<f64> = (0..cells).map(|e| rb[e][0]).collect();
        let s0v: Vec<f64> = (0..cells).map(|e| s[e][0]).collect();
        let mut tmp = vec![0.0; cells];
        for k in 0..cfg.num_groups {
            nu_flow(cfg, Compartment::I, k, 0.0, &i0v, &mut vi_prev);
            nu_flow(cfg, Compartment::R, k, 0.0, &r0v, &mut vr_prev);
            nu_flow(cfg, Compartment::S, k, 0.0, &s0v, &mut tmp);
        }
        for e in 0..cells {
            vb_prev[e] = tmp[e] + vi_prev[e] + vr_prev[e];
        }
    }
    for n in 1..=steps {
        let t_n = grid.t(n);
        let s_n: Vec<f64> = (0..cells).map(|e| s[e][n]).collect();
        let mut i_n: Vec<f64> = (0..cells).map(|e| ib[e][n - 1]).collect();
        let mut r_n: Vec<f64> = (0..cells).map(|e| rb[e][n - 1]).collect();
        let mut b_n: Vec<f64> = (0..cells).map(|e| bb[e][n - 1]).collect();
        let mut prev_change = f64::INFINITY;
        let mut sweeps = 0usize;
        loop {
            sweeps += 1;
            let mut change = 0.0f64;
            for k in 0..cfg.num_groups {
                nu_flow(cfg, Compartment::S, k, t_n, &s_n, &mut vs_now);
                nu_flow(cfg, Compartment::I, k, t_n, &i_n, &mut vi_now);
                nu_flow(cfg, Compartment::R, k, t_n, &r_n, &mut vr_now);
            }
            for e in 0..cells {
                let vb_now = vs_now[e] + vi_now[e] + vr_now[e];
                let new_b = bb[e][n - 1] + half_h * (vb_prev[e] + vb_now);
                let sg_now = sg[e][n];
                let cum_sg_n = cum_sg[e] + half_h * (sg[e][n - 1] + sg_now);
                let new_i = (cfg.i0[e] - psi_terms[n][e] + cum_sg_n - ti_terms[n][e]
                    + cum_nu_i[e]
                    + half_h * (vi_prev[e] + vi_now[e]))
                    .max(0.0);
                let new_r = cfg.r0[e]
                    + psi_terms[n][e]
                    + ti_terms[n][e]
                    + cum_nu_r[e]
                    + half_h * (vr_prev[e] + vr_now[e]);
                change = change
                    .max((new_i - i_n[e]).abs())
                    .max((new_r - r_n[e]).abs())
                    .max((new_b - b_n[e]).abs());
                i_n[e] = new_i;
                r_n[e] = new_r;
                b_n[e] = new_b;
            }
            if change == 0.0 {
                break;
            }
            if change < SWEEP_TOL && change >= prev_change {
                break;
            }
            if sweeps >= MAX_SWEEPS {
                if change > SWEEP_TOL {
                    return Err(Error::Solver {
                        step: n,
                        time: t_n,
                        residual: change,
                        message: "reconstruction sweep did not converge".into(),
                    });
                }
                break;
            }
            prev_change = change;
        }
        max_sweeps = max_sweeps.max(sweeps);
        for e in 0..cells {
            cum_sg[e] += half_h * (sg[e][n - 1] + sg[e][n]);
            cum_nu_i[e] += half_h * (vi_prev[e] + vi_now[e]);
            cum_nu_r[e] += half_h * (vr_prev[e] + vr_now[e]);
            vi_prev[e] = vi_now[e];
            vr_prev[e] = vr_now[e];
            vb_prev[e] = vs_now[e] + vi_now[e] + vr_now[e];
            ib[e].push(i_n[e]);
            rb[e].push(r_n[e]);
            bb[e].push(b_n[e]);
        }
    }

    Ok(LimitSolution {
        grid: grid.clone(),
        num_groups: cfg.num_groups,
        num_patches: cfg.num_patches,
        s,
        fbar: f,
        ibar: ib,
        rbar: rb,
        bbar: bb,
        gammabar: gm,
        max_sweeps,
        max_residual,
    })
}

/// Analytic a priori bound on the total force of infection,
/// `lambda* L K exp(lambda* beta* L K t)`.
pub fn fbar_bound(cfg: &ModelConfig, t: f64) -> f64 {
    let lk = (cfg.num_patches * cfg.num_groups) as f64;
    cfg.lambda_star() * lk * (cfg.lambda_star() * cfg.beta_star() * lk * t).exp()
}

/// Result of checking the two analytic bounds on a solution.
#[derive(Debug, Clone)]
pub struct BoundsReport {
    /// Minimum over the grid of `bound(t) - sum_e F(t)`; nonnegative when the
    /// Gronwall bound holds.
    pub force_margin: f64,
    pub force_ok: bool,
    /// Minimum over cells and grid of `B(t) - B(0) exp(-nu_bar t)`.
    pub mass_margin: f64,
    pub mass_ok: bool,
}

/// Verify the Gronwall force bound and the per-cell mass floor pointwise.
pub fn check_bounds(sol: &LimitSolution, cfg: &ModelConfig) -> BoundsReport {
    let cells = cfg.num_cells();
    let mut force_margin = f64::INFINITY;
    let mut mass_margin = f64::INFINITY;
    for (n, t) in sol.grid.times().enumerate() {
        let total: f64 = (0..cells).map(|e| sol.fbar[e][n]).sum();
        force_margin = force_margin.min(fbar_bound(cfg, t) - total);
        for e in 0..cells {
            let (k, l) = (e / cfg.num_patches, e % cfg.num_patches);
            let floor = cfg.b0(e) * (-cfg.nu_bar_diag(k, l) * t).exp();
            mass_margin = mass_margin.min(sol.bbar[e][n] - floor);
        }
    }
    BoundsReport {
        force_margin,
        force_ok: force_margin >= 0.0,
        mass_margin,
        mass_ok: mass_margin >= -1e-9,
    }
}
