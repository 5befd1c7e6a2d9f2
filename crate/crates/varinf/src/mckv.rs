//! McKean-Vlasov characterization of the limit: the fixed point
//! `m* = G(m*)` of the response map, i.i.d. limit particles, and the
//! pathwise coupling between the N-agent system and its limit particles.
//!
//! A limit particle carries a mobility path `X` (with the non-susceptible
//! initial mass parked on the absorbing cemetery patch 0), an infection
//! indicator `A` that jumps at rate `Gamma^{X(t)}(t)` read from the limit
//! solution, and an infectivity path drawn at infection. The coupling
//! experiment runs the finite-N system and one limit particle per initially
//! susceptible individual on shared randomness, so their infection
//! indicators disagree only when the finite-N intensity differs from the
//! limit intensity at a shared candidate point.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use rayon::prelude::*;

use crate::abm::{largest_remainder, ContactSchedule, ModelConfig};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::infectivity::{sample_path, InfectivityPath};
use crate::limit::{respond, LimitSolution};
use crate::mobility::{sample_patch_path, Compartment, PatchPath};
use crate::rng::substream;

/// Result of the Picard iteration for the fixed point of the response map.
#[derive(Debug, Clone)]
pub struct FixedPointResult {
    /// `m*[e][n]` on the grid, per cell `e = k * L + l`.
    pub m: Vec<Vec<f64>>,
    pub iterations: usize,
    pub residual: f64,
    /// Full limit solution evaluated at the fixed point.
    pub solution: LimitSolution,
}

/// Plain Picard iteration `m <- G(m)` from `m = 0`; the map is a contraction
/// on bounded horizons, so no relaxation is needed.
pub fn fixed_point_m(
    cfg: &ModelConfig,
    grid: &TimeGrid,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointResult> {
    if !(tol > 0.0) {
        return Err(Error::argument(format!("tol must be > 0, got {tol}")));
    }
    let cells = cfg.num_cells();
    let mut m = vec![vec![0.0; grid.len()]; cells];
    let mut residual = f64::INFINITY;
    for iter in 1..=max_iter {
        let sol = respond(cfg, grid, &m)?;
        residual = 0.0;
        for e in 0..cells {
            for n in 0..grid.len() {
                residual = residual.max((sol.fbar[e][n] - m[e][n]).abs());
            }
        }
        m = sol.fbar.clone();
        if residual < tol {
            return Ok(FixedPointResult {
                m,
                iterations: iter,
                residual,
                solution: sol,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual,
    })
}

/// One i.i.d. particle of the limit system.
#[derive(Debug, Clone)]
pub struct LimitParticle {
    pub group: usize,
    /// Mobility path; start patch 0 is the absorbing cemetery carrying the
    /// non-susceptible initial mass.
    pub path: PatchPath,
    /// Infection time (+inf if never infected before the horizon).
    pub tau: f64,
    pub infectivity: Option<InfectivityPath>,
}

impl LimitParticle {
    /// Infection indicator `A(t)`.
    pub fn a(&self, t: f64) -> u8 {
        u8::from(t >= self.tau)
    }
}

/// Sample a limit particle of group `k`: initial patch from the susceptible
/// distribution (cemetery with the remaining mass), susceptible mobility
/// path, infection by thinning at the intensity read from `sol`, and an
/// infectivity draw at infection.
pub fn sample_limit_particle<R: Rng>(
    cfg: &ModelConfig,
    sol: &LimitSolution,
    k: usize,
    rng: &mut R,
) -> LimitParticle {
    let lpatch = cfg.num_patches;
    let horizon = sol.grid.horizon();
    // Initial patch: P(l) = S^l(0), cemetery with the leftover.
    let v = rng.gen::<f64>();
    let mut acc = 0.0;
    let mut start = 0usize;
    for l in 0..lpatch {
        acc += cfg.s0[cfg.cell(k, l)];
        if v < acc {
            start = l + 1;
            break;
        }
    }
    let path = sample_patch_path(&cfg.nu, k, Compartment::S, start, 0.0, horizon, rng);
    if start == 0 {
        // Cemetery: the intensity is zero by convention, A stays 0.
        return LimitParticle {
            group: k,
            path,
            tau: f64::INFINITY,
            infectivity: None,
        };
    }
    // Dominating rate: node maximum bounds the linear interpolant.
    let ghat = (0..lpatch)
        .flat_map(|l| sol.gammabar[cfg.cell(k, l)].iter().copied())
        .fold(0.0f64, f64::max);
    let mut tau = f64::INFINITY;
    if ghat > 0.0 {
        let mut t = 0.0;
        loop {
            t += -rng.gen::<f64>().ln() / ghat;
            if t > horizon {
                break;
            }
            let l = path.patch_at(t) - 1;
            let g = sol.at(&sol.gammabar, cfg.cell(k, l), t);
            if rng.gen::<f64>() * ghat < g {
                tau = t;
                break;
            }
        }
    }
    let infectivity = if tau.is_finite() {
        Some(sample_path(&cfg.lambda_new[k], rng))
    } else {
        None
    };
    LimitParticle {
        group: k,
        path,
        tau,
        infectivity,
    }
}

/// Mismatch statistics of one coupled run, per group.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingRow {
    pub population: usize,
    pub group: usize,
    pub replica: usize,
    /// Mean over initially susceptible individuals of
    /// `sup_{t <= T} |A^N_j(t) - A_j(t)|`.
    pub mean_sup_mismatch: f64,
    /// Fraction with `tau^N /\ T != tau /\ T` (identical for indicator
    /// processes with a single jump, reported separately per the CSV schema).
    pub tau_mismatch_fraction: f64,
    /// Candidate points at which the finite-N intensity exceeded the shared
    /// dominating rate (thinning exactness breach; 0 in healthy runs).
    pub dominating_breaches: u64,
}

const COUPLE_TAG: u64 = 0x636f7570;

#[derive(Debug, Clone, Copy)]
enum Ev {
    /// Patch change of individual `id` (ignored unless its compartment
    /// still matches `comp`).
    Move {
        id: usize,
        to: usize,
        comp: u8,
    },
    PathChange {
        id: usize,
    },
    Recovery {
        id: usize,
    },
    /// Thinning candidate of susceptible `id` with mark `u`.
    Candidate {
        id: usize,
        u: f64,
    },
}

struct EvItem {
    time: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for EvItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for EvItem {}
impl PartialOrd for EvItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for EvItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

const COMP_S: u8 = 0;
const COMP_I: u8 = 1;
const COMP_R: u8 = 2;

struct Person {
    group: usize,
    /// Current patch, 0-based.
    patch: usize,
    comp: u8,
    infected_at: f64,
    inf_path: Option<InfectivityPath>,
    cur_value: f64,
    /// Index into the susceptible bookkeeping arrays (usize::MAX otherwise).
    sus_idx: usize,
}

struct Coupled<'a> {
    cfg: &'a ModelConfig,
    n: f64,
    persons: Vec<Person>,
    s: Vec<u64>,
    i: Vec<u64>,
    r: Vec<u64>,
    force: Vec<f64>,
    heap: BinaryHeap<EvItem>,
    seq: u64,
}

impl<'a> Coupled<'a> {
    fn push(&mut self, time: f64, ev: Ev) {
        self.seq += 1;
        self.heap.push(EvItem {
            time,
            seq: self.seq,
            ev,
        });
    }

    fn cell_of(&self, id: usize) -> usize {
        self.cfg
            .cell(self.persons[id].group, self.persons[id].patch)
    }

    fn gamma_n(&self, e: usize, t: f64) -> f64 {
        let b = self.s[e] + self.i[e] + self.r[e];
        if b == 0 {
            return 0.0;
        }
        let cells = self.cfg.num_cells();
        let beta_now = self.cfg.beta.at(t);
        let mut acc = 0.0;
        for e2 in 0..cells {
            acc += ContactSchedule::get(beta_now, cells, e, e2) * self.force[e2] / self.n;
        }
        (b as f64 / self.n).powf(-self.cfg.gamma) * acc
    }

    /// Attach an infectivity path to `id` at time `t` and schedule its
    /// breakpoints; returns false for a degenerate empty infected period.
    fn start_infection(&mut self, id: usize, t: f64, path: InfectivityPath) -> bool {
        if path.eta() == 0.0 {
            self.persons[id].comp = COMP_R;
            return false;
        }
        let cur = path.eval(0.0);
        let e = self.cell_of(id);
        self.force[e] += cur;
        for bp in path.interior_breakpoints() {
            self.push(t + bp, Ev::PathChange { id });
        }
        self.push(t + path.eta(), Ev::Recovery { id });
        let p = &mut self.persons[id];
        p.comp = COMP_I;
        p.infected_at = t;
        p.cur_value = cur;
        p.inf_path = Some(path);
        true
    }

    fn schedule_moves(&mut self, path: &PatchPath, id: usize, comp: u8) {
        for &(tj, to) in path.jumps() {
            self.push(
                tj,
                Ev::Move {
                    id,
                    to: to - 1,
                    comp,
                },
            );
        }
    }
}

/// Run one coupled replica: the exact N-agent system and one limit particle
/// per initially susceptible individual, on shared per-individual
/// substreams. Returns one row per group.
pub fn coupling_experiment(
    cfg: &ModelConfig,
    sol: &LimitSolution,
    n: usize,
    replica: usize,
    seed: u64,
) -> Result<Vec<CouplingRow>> {
    cfg.validate()?;
    let cells = cfg.num_cells();
    let lpatch = cfg.num_patches;
    let horizon = cfg.horizon.min(sol.grid.horizon());

    // Shared dominating rate for both thinning checks: safely above the
    // limit intensity and the finite-N intensity under the mass floor.
    let sup_gamma = sol
        .gammabar
        .iter()
        .flat_map(|v| v.iter().copied())
        .fold(0.0f64, f64::max);
    let min_b = sol
        .bbar
        .iter()
        .flat_map(|v| v.iter().copied())
        .fold(f64::INFINITY, f64::min);
    let max_beta_row = {
        let cells_n = cells;
        cfg.beta
            .breakpoints()
            .iter()
            .map(|&b| {
                let v = cfg.beta.at(b);
                (0..cells_n)
                    .map(|e| {
                        (0..cells_n)
                            .map(|e2| ContactSchedule::get(v, cells_n, e, e2))
                            .sum()
                    })
                    .fold(0.0f64, f64::max)
            })
            .fold(0.0f64, f64::max)
    };
    let ghat = (4.0 * sup_gamma)
        .max(cfg.lambda_star() * max_beta_row * (0.5 * min_b).powf(-cfg.gamma))
        .max(1e-9);

    // Integer allocation, identical to the plain simulator.
    let mut fractions = Vec::with_capacity(3 * cells);
    fractions.extend_from_slice(&cfg.s0);
    fractions.extend_from_slice(&cfg.i0);
    fractions.extend_from_slice(&cfg.r0);
    let counts = largest_remainder(&fractions, n as u64);

    let mut st = Coupled {
        cfg,
        n: n as f64,
        persons: Vec::new(),
        s: counts[..cells].to_vec(),
        i: vec![0; cells],
        r: counts[2 * cells..].to_vec(),
        force: vec![0.0; cells],
        heap: BinaryHeap::new(),
        seq: 0,
    };

    // Per-susceptible shared data.
    let mut sus_of_group: Vec<Vec<usize>> = vec![Vec::new(); cfg.num_groups];
    let mut sus_paths: Vec<PatchPath> = Vec::new();
    let mut sus_inf_paths: Vec<InfectivityPath> = Vec::new();
    let mut tau_n: Vec<f64> = Vec::new();
    let mut tau_lim: Vec<f64> = Vec::new();

    let mut j = 0u64;
    for e in 0..cells {
        let (k, l) = (e / lpatch, e % lpatch);
        for _ in 0..counts[e] {
            // Shared stream, consumed in a fixed order by both systems:
            // mobility path, candidate points, infectivity draw.
            let mut rng = substream(seed, &[COUPLE_TAG, n as u64, replica as u64, 1, j]);
            let path = sample_patch_path(&cfg.nu, k, Compartment::S, l + 1, 0.0, horizon, &mut rng);
            let id = st.persons.len();
            let sidx = sus_paths.len();
            let mut t = 0.0;
            loop {
                t += -rng.gen::<f64>().ln() / ghat;
                if t > horizon {
                    break;
                }
                st.push(
                    t,
                    Ev::Candidate {
                        id,
                        u: rng.gen::<f64>(),
                    },
                );
            }
            sus_inf_paths.push(sample_path(&cfg.lambda_new[k], &mut rng));
            st.persons.push(Person {
                group: k,
                patch: l,
                comp: COMP_S,
                infected_at: f64::NAN,
                inf_path: None,
                cur_value: 0.0,
                sus_idx: sidx,
            });
            st.schedule_moves(&path, id, COMP_S);
            sus_of_group[k].push(sidx);
            sus_paths.push(path);
            tau_n.push(f64::INFINITY);
            tau_lim.push(f64::INFINITY);
            j += 1;
        }
    }

    // Initially infected: infectivity path, infected-phase mobility, then
    // recovered-phase mobility; only the N system consumes these streams.
    let mut m = 0u64;
    for e in 0..cells {
        let (k, l) = (e / lpatch, e % lpatch);
        for _ in 0..counts[cells + e] {
            let mut rng = substream(seed, &[COUPLE_TAG, n as u64, replica as u64, 3, m]);
            let path = sample_path(&cfg.lambda_initial[k], &mut rng);
            let id = st.persons.len();
            st.persons.push(Person {
                group: k,
                patch: l,
                comp: COMP_S, // placeholder, set by start_infection
                infected_at: 0.0,
                inf_path: None,
                cur_value: 0.0,
                sus_idx: usize::MAX,
            });
            let eta = path.eta();
            if st.start_infection(id, 0.0, path) {
                st.i[e] += 1;
                let ipath = sample_patch_path(
                    &cfg.nu,
                    k,
                    Compartment::I,
                    l + 1,
                    0.0,
                    eta.min(horizon),
                    &mut rng,
                );
                st.schedule_moves(&ipath, id, COMP_I);
                if eta < horizon {
                    let rpath = sample_patch_path(
                        &cfg.nu,
                        k,
                        Compartment::R,
                        ipath.patch_at(eta),
                        eta,
                        horizon,
                        &mut rng,
                    );
                    st.schedule_moves(&rpath, id, COMP_R);
                }
            } else {
                st.r[e] += 1;
            }
            m += 1;
        }
    }

    // Initially recovered: only their migrations matter (through the cell
    // masses).
    let mut ridx = 0u64;
    for e in 0..cells {
        let (k, l) = (e / lpatch, e % lpatch);
        for _ in 0..counts[2 * cells + e] {
            let mut rng = substream(seed, &[COUPLE_TAG, n as u64, replica as u64, 4, ridx]);
            let path = sample_patch_path(&cfg.nu, k, Compartment::R, l + 1, 0.0, horizon, &mut rng);
            let id = st.persons.len();
            st.persons.push(Person {
                group: k,
                patch: l,
                comp: COMP_R,
                infected_at: f64::NAN,
                inf_path: None,
                cur_value: 0.0,
                sus_idx: usize::MAX,
            });
            st.schedule_moves(&path, id, COMP_R);
            ridx += 1;
        }
    }

    let mut breaches = 0u64;
    while let Some(item) = st.heap.pop() {
        let t = item.time;
        if t > horizon {
            break;
        }
        match item.ev {
            Ev::Move { id, to, comp } => {
                if st.persons[id].comp != comp {
                    continue; // stale: the individual changed compartment
                }
                let from_e = st.cell_of(id);
                let to_e = st.cfg.cell(st.persons[id].group, to);
                if from_e == to_e {
                    continue;
                }
                match comp {
                    COMP_S => {
                        st.s[from_e] -= 1;
                        st.s[to_e] += 1;
                    }
                    COMP_I => {
                        st.i[from_e] -= 1;
                        st.i[to_e] += 1;
                        let v = st.persons[id].cur_value;
                        st.force[from_e] = (st.force[from_e] - v).max(0.0);
                        st.force[to_e] += v;
                    }
                    _ => {
                        st.r[from_e] -= 1;
                        st.r[to_e] += 1;
                    }
                }
                st.persons[id].patch = to;
            }
            Ev::PathChange { id } => {
                if st.persons[id].comp != COMP_I {
                    continue;
                }
                let e = st.cell_of(id);
                let p = &st.persons[id];
                let new = p.inf_path.as_ref().unwrap().eval(t - p.infected_at);
                let old = p.cur_value;
                st.force[e] += new - old;
                st.persons[id].cur_value = new;
            }
            Ev::Recovery { id } => {
                if st.persons[id].comp != COMP_I {
                    continue;
                }
                let e = st.cell_of(id);
                st.force[e] = (st.force[e] - st.persons[id].cur_value).max(0.0);
                st.persons[id].cur_value = 0.0;
                st.persons[id].comp = COMP_R;
                st.i[e] -= 1;
                st.r[e] += 1;
            }
            Ev::Candidate { id, u } => {
                let sidx = st.persons[id].sus_idx;
                let k = st.persons[id].group;
                // Finite-N acceptance check.
                if st.persons[id].comp == COMP_S {
                    let e = st.cell_of(id);
                    let g = st.gamma_n(e, t);
                    if g > ghat {
                        breaches += 1;
                    }
                    if u * ghat < g {
                        tau_n[sidx] = t;
                        st.s[e] -= 1;
                        let path = sus_inf_paths[sidx].clone();
                        if st.start_infection(id, t, path) {
                            st.i[e] += 1;
                            // Post-infection mobility from a disjoint stream
                            // (the limit particle never consumes it).
                            let mut prng = substream(
                                seed,
                                &[COUPLE_TAG, n as u64, replica as u64, 2, sidx as u64],
                            );
                            let eta = st.persons[id].inf_path.as_ref().unwrap().eta();
                            let rec_t = (t + eta).min(horizon);
                            let ipath = sample_patch_path(
                                &cfg.nu,
                                k,
                                Compartment::I,
                                st.persons[id].patch + 1,
                                t,
                                rec_t,
                                &mut prng,
                            );
                            st.schedule_moves(&ipath, id, COMP_I);
                            if rec_t < horizon {
                                let rpath = sample_patch_path(
                                    &cfg.nu,
                                    k,
                                    Compartment::R,
                                    ipath.patch_at(rec_t),
                                    rec_t,
                                    horizon,
                                    &mut prng,
                                );
                                st.schedule_moves(&rpath, id, COMP_R);
                            }
                        } else {
                            st.r[e] += 1;
                        }
                    }
                }
                // Limit-particle acceptance check on the same (t, u).
                if tau_lim[sidx].is_infinite() {
                    let l = sus_paths[sidx].patch_at(t) - 1;
                    let g = sol.at(&sol.gammabar, cfg.cell(k, l), t);
                    if u * ghat < g {
                        tau_lim[sidx] = t;
                    }
                }
            }
        }
    }

    let mut rows = Vec::with_capacity(cfg.num_groups);
    for k in 0..cfg.num_groups {
        let ids = &sus_of_group[k];
        let total = ids.len().max(1) as f64;
        let mismatches = ids
            .iter()
            .filter(|&&sidx| tau_n[sidx].min(horizon) != tau_lim[sidx].min(horizon))
            .count() as f64;
        rows.push(CouplingRow {
            population: n,
            group: k,
            replica,
            mean_sup_mismatch: mismatches / total,
            tau_mismatch_fraction: mismatches / total,
            dominating_breaches: breaches,
        });
    }
    Ok(rows)
}

/// Coupled replicas across population sizes, parallel over (N, replica)
/// with a deterministic lexicographic reduction.
pub fn coupling_study(
    cfg: &ModelConfig,
    sol: &LimitSolution,
    sizes: &[usize],
    replicas: usize,
    seed: u64,
) -> Result<Vec<CouplingRow>> {
    let mut jobs = Vec::new();
    for &n in sizes {
        for r in 0..replicas {
            jobs.push((n, r));
        }
    }
    let results: Vec<Result<Vec<CouplingRow>>> = jobs
        .par_iter()
        .map(|&(n, r)| coupling_experiment(cfg, sol, n, r, seed))
        .collect();
    let mut rows = Vec::new();
    for res in results {
        rows.extend(res?);
    }
    Ok(rows)
}

/// Mean tau-mismatch fraction per population size (averaged over replicas
/// and groups), in the order of `sizes`.
pub fn mean_mismatch_by_size(rows: &[CouplingRow], sizes: &[usize]) -> Vec<f64> {
    sizes
        .iter()
        .map(|&n| {
            let sel: Vec<f64> = rows
                .iter()
                .filter(|r| r.population == n)
                .map(|r| r.tau_mismatch_fraction)
                .collect();
            sel.iter().sum::<f64>() / sel.len().max(1) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infectivity::{InfectivityLaw, LawFamily, ScalarDist};
    use crate::limit::{solve_homogeneous, solve_multipatch};
    use crate::matrix::SqMat;
    use crate::mobility::{PiecewiseMatrices, RateSchedule};

    fn law() -> InfectivityLaw {
        InfectivityLaw {
            family: LawFamily::ConstantPlateau {
                rate: 0.5,
                duration: ScalarDist::Exponential { rate: 0.25 },
            },
            cap: 1.0,
        }
    }

    fn markov_config() -> ModelConfig {
        ModelConfig {
            num_groups: 1,
            num_patches: 1,
            gamma: 1.0,
            beta: ContactSchedule::scalar(1.0, 1).unwrap(),
            nu: RateSchedule::zero(1, 1),
            lambda_new: vec![law()],
            lambda_initial: vec![law()],
            s0: vec![0.99],
            i0: vec![0.01],
            r0: vec![0.0],
            population: 1000,
            horizon: 10.0,
            seed: 5,
            mc_curve_samples: None,
        }
    }

    fn two_patch_config() -> ModelConfig {
        let mob = SqMat::from_rows(&[vec![0.0, 0.1], vec![0.06, 0.0]]).unwrap();
        ModelConfig {
            num_groups: 1,
            num_patches: 2,
            gamma: 0.5,
            beta: ContactSchedule::constant(vec![0.9, 0.3, 0.3, 0.8], 2).unwrap(),
            nu: RateSchedule::uniform(1, PiecewiseMatrices::constant(mob).unwrap()),
            lambda_new: vec![law()],
            lambda_initial: vec![law()],
            s0: vec![0.55, 0.38],
            i0: vec![0.01, 0.005],
            r0: vec![0.03, 0.025],
            population: 1000,
            horizon: 10.0,
            seed: 5,
            mc_curve_samples: None,
        }
    }

    #[test]
    fn no_initial_infected_fixed_point_is_zero() {
        let mut cfg = markov_config();
        cfg.i0 = vec![0.0];
        cfg.r0 = vec![0.01];
        let grid = TimeGrid::new(5.0, 0.01).unwrap();
        let fp = fixed_point_m(&cfg, &grid, 1e-10, 10).unwrap();
        assert!(fp.iterations <= 2);
        assert!(fp.m.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn fixed_point_equals_homogeneous_force() {
        let cfg = markov_config();
        let grid = TimeGrid::new(10.0, 0.01).unwrap();
        let fp = fixed_point_m(&cfg, &grid, 1e-10, 200).unwrap();
        let sol = solve_homogeneous(&cfg, &grid).unwrap();
        let worst = fp.m[0]
            .iter()
            .zip(&sol.fbar[0])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst <= 1e-8, "fixed point differs by {worst:e}");
    }

    #[test]
    fn fixed_point_equals_multipatch_force() {
        let cfg = two_patch_config();
        let grid = TimeGrid::new(10.0, 0.01).unwrap();
        let fp = fixed_point_m(&cfg, &grid, 1e-10, 200).unwrap();
        let sol = solve_multipatch(&cfg, &grid).unwrap();
        let mut worst = 0.0f64;
        for e in 0..2 {
            for n in 0..grid.len() {
                worst = worst.max((fp.m[e][n] - sol.fbar[e][n]).abs());
            }
        }
        assert!(worst <= 1e-8, "fixed point differs by {worst:e}");
    }

    #[test]
    fn particles_from_cemetery_or_zero_intensity_stay_uninfected() {
        let mut cfg = two_patch_config();
        cfg.i0 = vec![0.0, 0.0];
        cfg.r0 = vec![0.04, 0.03];
        let grid = TimeGrid::new(5.0, 0.01).unwrap();
        let sol = solve_multipatch(&cfg, &grid).unwrap();
        let mut rng = substream(9, &[0]);
        for _ in 0..500 {
            let p = sample_limit_particle(&cfg, &sol, 0, &mut rng);
            assert!(p.tau.is_infinite());
            assert!(p.infectivity.is_none());
            assert_eq!(p.a(4.0), 0);
        }
    }

    #[test]
    fn particle_survival_matches_discounted_intensity() {
        // No migration: X is frozen, so P(tau > t) = exp(-int_0^t Gamma) =
        // S(t)/S(0).
        let cfg = markov_config();
        let grid = TimeGrid::new(10.0, 0.01).unwrap();
        let sol = solve_homogeneous(&cfg, &grid).unwrap();
        let mut rng = substream(10, &[0]);
        let t_check = 5.0;
        let mut survived = 0u64;
        let mut started = 0u64;
        let samples = 100_000;
        for _ in 0..samples {
            let p = sample_limit_particle(&cfg, &sol, 0, &mut rng);
            if p.path.start_patch() == 0 {
                continue;
            }
            started += 1;
            if p.tau > t_check {
                survived += 1;
            }
        }
        let est = survived as f64 / started as f64;
        let n5 = grid.floor_index(t_check);
        let expected = sol.s[0][n5] / sol.s[0][0];
        let se = (expected * (1.0 - expected) / started as f64).sqrt();
        assert!(
            (est - expected).abs() <= 4.0 * se,
            "survival {est} vs {expected} (se {se:e})"
        );
    }

    #[test]
    fn particle_marginal_matches_s() {
        let cfg = two_patch_config();
        let grid = TimeGrid::new(10.0, 0.01).unwrap();
        let sol = solve_multipatch(&cfg, &grid).unwrap();
        let mut rng = substream(12, &[0]);
        let t_check = 6.0;
        let samples = 100_000usize;
        let mut hits = [0u64; 2];
        for _ in 0..samples {
            let p = sample_limit_particle(&cfg, &sol, 0, &mut rng);
            if p.path.start_patch() == 0 || p.tau <= t_check {
                continue;
            }
            hits[p.path.patch_at(t_check) - 1] += 1;
        }
        let n_idx = grid.floor_index(t_check);
        for l in 0..2 {
            let est = hits[l] as f64 / samples as f64;
            let expected = sol.s[l][n_idx];
            let se = (expected * (1.0 - expected) / samples as f64).sqrt();
            assert!(
                (est - expected).abs() <= 4.0 * se,
                "patch {l}: {est} vs {expected}"
            );
        }
    }

    #[test]
    fn zero_contact_coupling_has_no_mismatch() {
        let mut cfg = two_patch_config();
        cfg.beta = ContactSchedule::scalar(0.0, 2).unwrap();
        let grid = TimeGrid::new(10.0, 0.01).unwrap();
        let sol = solve_multipatch(&cfg, &grid).unwrap();
        let rows = coupling_experiment(&cfg, &sol, 400, 0, 31).unwrap();
        for row in rows {
            assert_eq!(row.mean_sup_mismatch, 0.0);
            assert_eq!(row.dominating_breaches, 0);
        }
    }

    #[test]
    fn coupling_is_deterministic() {
        let cfg = two_patch_config();
        let grid = TimeGrid::new(10.0, 0.01).unwrap();
        let sol = solve_multipatch(&cfg, &grid).unwrap();
        let a = coupling_experiment(&cfg, &sol, 300, 1, 17).unwrap();
        let b = coupling_experiment(&cfg, &sol, 300, 1, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn coupling_mismatch_shrinks_with_population() {
        let cfg = two_patch_config();
        let grid = TimeGrid::new(10.0, 0.01).unwrap();
        let sol = solve_multipatch(&cfg, &grid).unwrap();
        let sizes = [200, 3200];
        let rows = coupling_study(&cfg, &sol, &sizes, 8, 23).unwrap();
        assert!(rows.iter().all(|r| r.dominating_breaches == 0));
        let means = mean_mismatch_by_size(&rows, &sizes);
        assert!(means[1] < means[0], "mismatch did not shrink: {means:?}");
    }
}
