//! Exact event-driven simulation of the N-individual epidemic.
//!
//! Individuals belong to a group `k < K` and occupy a patch `l < L`. While
//! infected they carry a sampled infectivity path; the force of infection in
//! a cell `(k, l)` is the sum of the current infectivity values of the
//! infected individuals of group `k` presently in patch `l`. Between events
//! every transition rate is constant (contact and migration schedules are
//! piecewise constant, infectivity paths are step functions), so the
//! event-driven scheme samples the exact law of the model.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::infectivity::{sample_path, InfectivityLaw, InfectivityPath};
use crate::mobility::{Compartment, RateSchedule};

/// Piecewise-constant contact rates `beta[(k,l),(k',l')](t)`, stored flat per
/// time segment with cell index `e = k * L + l`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactSchedule {
    breakpoints: Vec<f64>,
    values: Vec<Vec<f64>>,
    cells: usize,
}

impl ContactSchedule {
    pub fn new(breakpoints: Vec<f64>, values: Vec<Vec<f64>>, cells: usize) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints[0] != 0.0 {
            return Err(Error::config(
                "contact schedule breakpoints must start at 0",
            ));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config(
                "contact schedule breakpoints must be strictly ascending",
            ));
        }
        if values.len() != breakpoints.len() {
            return Err(Error::config(format!(
                "contact schedule has {} breakpoints but {} matrices",
                breakpoints.len(),
                values.len()
            )));
        }
        for v in &values {
            if v.len() != cells * cells {
                return Err(Error::config(format!(
                    "contact matrix must have {} entries, got {}",
                    cells * cells,
                    v.len()
                )));
            }
            if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(Error::config("contact rates must be finite and >= 0"));
            }
        }
        Ok(ContactSchedule {
            breakpoints,
            values,
            cells,
        })
    }

    /// Constant-in-time schedule.
    pub fn constant(values: Vec<f64>, cells: usize) -> Result<Self> {
        Self::new(vec![0.0], vec![values], cells)
    }

    /// All pairs share one scalar rate.
    pub fn scalar(rate: f64, cells: usize) -> Result<Self> {
        Self::constant(vec![rate; cells * cells], cells)
    }

    /// Flat (KL)x(KL) rate matrix in force at time `t` (right-continuous).
    pub fn at(&self, t: f64) -> &[f64] {
        let idx = match self
            .breakpoints
            .binary_search_by(|b| b.partial_cmp(&t).unwrap())
        {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        };
        &self.values[idx]
    }

    #[inline]
    pub fn get(values: &[f64], cells: usize, e: usize, e2: usize) -> f64 {
        values[e * cells + e2]
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// beta*: the maximal contact rate over all pairs and times.
    pub fn max_rate(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, &x| m.max(x))
    }
}

/// Full model specification shared by the simulator and the limit solvers.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub num_groups: usize,
    pub num_patches: usize,
    /// Mixing exponent in [0, 1]: 0 = frequency-independent across patches,
    /// 1 = local frequency-dependent mixing.
    pub gamma: f64,
    pub beta: ContactSchedule,
    pub nu: RateSchedule,
    /// Infectivity law of newly infected individuals, per group.
    pub lambda_new: Vec<InfectivityLaw>,
    /// Infectivity law of initially infected individuals, per group.
    pub lambda_initial: Vec<InfectivityLaw>,
    /// Initial fractions per cell `e = k * L + l`; the three vectors sum to 1.
    pub s0: Vec<f64>,
    pub i0: Vec<f64>,
    pub r0: Vec<f64>,
    /// Population size used by the simulator (the limit solvers ignore it).
    pub population: usize,
    pub horizon: f64,
    pub seed: u64,
    /// Monte Carlo sample count for mean infectivity curves of laws without
    /// a closed form (None = closed form where available, else 10^5).
    pub mc_curve_samples: Option<usize>,
}

impl ModelConfig {
    #[inline]
    pub fn cell(&self, k: usize, l: usize) -> usize {
        k * self.num_patches + l
    }

    pub fn num_cells(&self) -> usize {
        self.num_groups * self.num_patches
    }

    pub fn b0(&self, e: usize) -> f64 {
        self.s0[e] + self.i0[e] + self.r0[e]
    }

    pub fn lambda_star(&self) -> f64 {
        self.lambda_new
            .iter()
            .chain(&self.lambda_initial)
            .fold(0.0f64, |m, law| m.max(law.cap))
    }

    pub fn beta_star(&self) -> f64 {
        self.beta.max_rate()
    }

    /// Validate the whole configuration, collecting every violation.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let cells = self.num_cells();
        if self.num_groups == 0 || self.num_patches == 0 {
            errors.push("group and patch counts must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            errors.push(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if self.beta.cells() != cells {
            errors.push(format!(
                "contact schedule is sized for {} cells, model has {}",
                self.beta.cells(),
                cells
            ));
        }
        if self.nu.num_groups() != self.num_groups || self.nu.num_patches() != self.num_patches {
            errors.push("rate schedule dimensions do not match the model".into());
        }
        if self.lambda_new.len() != self.num_groups || self.lambda_initial.len() != self.num_groups
        {
            errors.push("one infectivity law per group is required (new and initial)".into());
        }
        for (i, law) in self.lambda_new.iter().enumerate() {
            errors.extend(law.validate(&format!("lambda_new[{i}]")));
        }
        for (i, law) in self.lambda_initial.iter().enumerate() {
            errors.extend(law.validate(&format!("lambda_initial[{i}]")));
        }
        for (name, v) in [("s0", &self.s0), ("i0", &self.i0), ("r0", &self.r0)] {
            if v.len() != cells {
                errors.push(format!(
                    "{name} must have {} entries, got {}",
                    cells,
                    v.len()
                ));
            } else if v.iter().any(|x| !(*x >= 0.0)) {
                errors.push(format!("{name} entries must be >= 0"));
            }
        }
        if self.s0.len() == cells && self.i0.len() == cells && self.r0.len() == cells {
            let total: f64 = (0..cells).map(|e| self.b0(e)).sum();
            if (total - 1.0).abs() > 1e-9 {
                errors.push(format!("initial fractions must sum to 1, got {total}"));
            }
            for e in 0..cells {
                if !(self.b0(e) > 0.0) {
                    errors.push(format!(
                        "initial mass of cell (k={}, l={}) must be > 0",
                        e / self.num_patches,
                        e % self.num_patches
                    ));
                }
            }
        }
        if !(self.horizon > 0.0) {
            errors.push(format!("horizon must be > 0, got {}", self.horizon));
        }
        if self.population == 0 {
            errors.push("population must be >= 1".into());
        }
        if let Some(0) = self.mc_curve_samples {
            errors.push("mc_curve_samples must be >= 1 when given".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Worst-case diagonal migration rate `max(-nu^{ll})` over compartments
    /// and times, per cell; used for the population floor
    /// `B(0) exp(-nu_bar t)`.
    pub fn nu_bar_diag(&self, k: usize, l: usize) -> f64 {
        let mut worst = 0.0f64;
        for comp in Compartment::ALL {
            let sched = self.nu.schedule(k, comp);
            worst = worst.max(sched.rate_bound_at_state(l));
        }
        worst
    }
}

/// Largest-remainder allocation of `total` units proportional to `fractions`
/// (assumed nonnegative, summing to ~1). Ties broken by index order.
pub fn largest_remainder(fractions: &[f64], total: u64) -> Vec<u64> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(assigned);
    for &i in &order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Record of one infection event in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct InfectionEvent {
    pub time: f64,
    pub group: usize,
    pub patch: usize,
}

/// Grid-sampled output of a simulation run. Cell index `e = k * L + l`;
/// counts are right-continuous at the sample times.
#[derive(Debug, Clone)]
pub struct AbmTrajectory {
    pub grid: TimeGrid,
    pub num_groups: usize,
    pub num_patches: usize,
    pub population: usize,
    pub s: Vec<Vec<u64>>,
    pub i: Vec<Vec<u64>>,
    pub r: Vec<Vec<u64>>,
    pub b: Vec<Vec<u64>>,
    /// Scaled force of infection per cell.
    pub fbar: Vec<Vec<f64>>,
    /// Per-susceptible infection intensity per cell.
    pub gammabar: Vec<Vec<f64>>,
    pub infections: Vec<InfectionEvent>,
    pub event_count: u64,
}

impl AbmTrajectory {
    pub fn sbar(&self, e: usize, n: usize) -> f64 {
        self.s[e][n] as f64 / self.population as f64
    }

    pub fn ibar(&self, e: usize, n: usize) -> f64 {
        self.i[e][n] as f64 / self.population as f64
    }

    pub fn rbar(&self, e: usize, n: usize) -> f64 {
        self.r[e][n] as f64 / self.population as f64
    }

    pub fn bbar(&self, e: usize, n: usize) -> f64 {
        self.b[e][n] as f64 / self.population as f64
    }
}

struct Infected {
    group: usize,
    patch: usize,
    infected_at: f64,
    path: InfectivityPath,
    cur_value: f64,
    /// Position in `active[cell]`, for O(1) removal.
    slot: usize,
    alive: bool,
    initial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scheduled {
    /// Infectivity value change of infected `id` (its path steps at this age).
    PathChange { id: usize },
    /// Infected period of `id` ends: move to R.
    Recovery { id: usize },
    /// A contact or migration schedule breakpoint: rates must be re-read.
    RateBreak,
}

struct HeapItem {
    time: f64,
    seq: u64,
    kind: Scheduled,
}

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    // Reversed: BinaryHeap is a max-heap, we want the earliest time on top.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

struct SimState<'a> {
    cfg: &'a ModelConfig,
    n: f64,
    s: Vec<u64>,
    i: Vec<u64>,
    r: Vec<u64>,
    /// Sum of current infectivity values per cell (unscaled).
    force: Vec<f64>,
    infected: Vec<Infected>,
    /// Indices of alive infected per cell.
    active: Vec<Vec<usize>>,
    heap: BinaryHeap<HeapItem>,
    seq: u64,
    events: u64,
    // Decomposition counters for the consistency identity.
    initial_alive: u64,
    cum_infections: u64,
    cum_new_recoveries: u64,
    cum_initial_recoveries: u64,
    r0_total: u64,
    infections: Vec<InfectionEvent>,
}

impl<'a> SimState<'a> {
    fn schedule(&mut self, time: f64, kind: Scheduled) {
        self.seq += 1;
        self.heap.push(HeapItem {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn force_bar(&self, e: usize) -> f64 {
        self.force[e] / self.n
    }

    /// Per-susceptible infection intensity of cell `e` at time `t`
    /// (0 when the cell is empty, by convention).
    fn gamma_bar(&self, e: usize, beta_now: &[f64]) -> f64 {
        let b = self.s[e] + self.i[e] + self.r[e];
        if b == 0 {
            return 0.0;
        }
        let cells = self.cfg.num_cells();
        let mut acc = 0.0;
        for e2 in 0..cells {
            acc += ContactSchedule::get(beta_now, cells, e, e2) * self.force_bar(e2);
        }
        (b as f64 / self.n).powf(-self.cfg.gamma) * acc
    }

    fn rebuild_force(&mut self) {
        self.force.iter_mut().for_each(|f| *f = 0.0);
        for e in 0..self.active.len() {
            let mut acc = 0.0;
            for &id in &self.active[e] {
                acc += self.infected[id].cur_value;
            }
            self.force[e] = acc;
        }
    }

    fn add_infected(
        &mut self,
        t: f64,
        group: usize,
        patch: usize,
        path: InfectivityPath,
        initial: bool,
    ) {
        let e = self.cfg.cell(group, patch);
        if path.eta() == 0.0 {
            // Degenerate all-zero path: the infected period is empty.
            self.r[e] += 1;
            if initial {
                self.cum_initial_recoveries += 1;
                self.initial_alive -= 1;
            } else {
                self.cum_new_recoveries += 1;
            }
            return;
        }
        let id = self.infected.len();
        let cur = path.eval(0.0);
        for bp in path.interior_breakpoints() {
            self.schedule(t + bp, Scheduled::PathChange { id });
        }
        self.schedule(t + path.eta(), Scheduled::Recovery { id });
        let slot = self.active[e].len();
        self.active[e].push(id);
        self.force[e] += cur;
        self.infected.push(Infected {
            group,
            patch,
            infected_at: t,
            path,
            cur_value: cur,
            slot,
            alive: true,
            initial,
        });
        self.i[e] += 1;
    }

    fn apply_path_change(&mut self, t: f64, id: usize) {
        let rec = &self.infected[id];
        if !rec.alive {
            return;
        }
        let e = self.cfg.cell(rec.group, rec.patch);
        let new = rec.path.eval(t - rec.infected_at);
        let old = rec.cur_value;
        self.force[e] += new - old;
        self.infected[id].cur_value = new;
    }

    fn apply_recovery(&mut self, id: usize) {
        let rec = &self.infected[id];
        debug_assert!(rec.alive);
        let e = self.cfg.cell(rec.group, rec.patch);
        self.force[e] -= rec.cur_value;
        if self.force[e] < 0.0 {
            self.force[e] = 0.0;
        }
        let slot = rec.slot;
        let initial = rec.initial;
        let last = *self.active[e].last().unwrap();
        self.active[e].swap_remove(slot);
        if last != id {
            self.infected[last].slot = slot;
        }
        self.infected[id].alive = false;
        self.infected[id].cur_value = 0.0;
        self.i[e] -= 1;
        self.r[e] += 1;
        if initial {
            self.cum_initial_recoveries += 1;
            self.initial_alive -= 1;
        } else {
            self.cum_new_recoveries += 1;
        }
    }

    fn move_infected(&mut self, id: usize, to: usize) {
        let rec = &self.infected[id];
        let from_e = self.cfg.cell(rec.group, rec.patch);
        let to_e = self.cfg.cell(rec.group, to);
        let v = rec.cur_value;
        let slot = rec.slot;
        self.force[from_e] -= v;
        if self.force[from_e] < 0.0 {
            self.force[from_e] = 0.0;
        }
        self.force[to_e] += v;
        let last = *self.active[from_e].last().unwrap();
        self.active[from_e].swap_remove(slot);
        if last != id {
            self.infected[last].slot = slot;
        }
        let rec = &mut self.infected[id];
        rec.patch = to;
        rec.slot = self.active[to_e].len();
        self.active[to_e].push(id);
        self.i[from_e] -= 1;
        self.i[to_e] += 1;
    }

    fn check_decomposition(&self) -> Result<()> {
        let i_total: u64 = self.i.iter().sum();
        let r_total: u64 = self.r.iter().sum();
        let i_decomp = self.initial_alive + self.cum_infections - self.cum_new_recoveries;
        let r_decomp = self.r0_total + self.cum_initial_recoveries + self.cum_new_recoveries;
        if i_total != i_decomp || r_total != r_decomp {
            return Err(Error::Solver {
                step: self.events as usize,
                time: f64::NAN,
                residual: (i_total as f64 - i_decomp as f64).abs()
                    + (r_total as f64 - r_decomp as f64).abs(),
                message: "I/R decomposition identity violated".into(),
            });
        }
        Ok(())
    }
}

/// Options controlling a simulation run.
#[derive(Debug, Clone)]
pub struct SimOptions {
    /// Output sampling step.
    pub output_step: f64,
    /// Cross-check the two count decompositions at every event.
    pub check_decomposition: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            output_step: 0.05,
            check_decomposition: false,
        }
    }
}

/// Run the exact event-driven simulation.
pub fn simulate<R: Rng>(
    cfg: &ModelConfig,
    opts: &SimOptions,
    rng: &mut R,
) -> Result<AbmTrajectory> {
    cfg.validate()?;
    let cells = cfg.num_cells();
    let n = cfg.population as u64;
    let grid = TimeGrid::new(cfg.horizon, opts.output_step)?;
    let lambda_star = cfg.lambda_star();

    // Integer allocation over the 3*KL compartment cells.
    let mut fractions = Vec::with_capacity(3 * cells);
    fractions.extend_from_slice(&cfg.s0);
    fractions.extend_from_slice(&cfg.i0);
    fractions.extend_from_slice(&cfg.r0);
    let counts = largest_remainder(&fractions, n);
    let s: Vec<u64> = counts[..cells].to_vec();
    let i_init: Vec<u64> = counts[cells..2 * cells].to_vec();
    let r: Vec<u64> = counts[2 * cells..].to_vec();

    let r0_total: u64 = r.iter().sum();
    let mut st = SimState {
        cfg,
        n: cfg.population as f64,
        s,
        i: vec![0; cells],
        r,
        force: vec![0.0; cells],
        infected: Vec::new(),
        active: vec![Vec::new(); cells],
        heap: BinaryHeap::new(),
        seq: 0,
        events: 0,
        initial_alive: 0,
        cum_infections: 0,
        cum_new_recoveries: 0,
        cum_initial_recoveries: 0,
        r0_total,
        infections: Vec::new(),
    };

    // Rate breakpoints of the contact and migration schedules.
    for &b in cfg.beta.breakpoints() {
        if b > 0.0 && b < cfg.horizon {
            st.schedule(b, Scheduled::RateBreak);
        }
    }
    for k in 0..cfg.num_groups {
        for comp in Compartment::ALL {
            for &b in cfg.nu.schedule(k, comp).breakpoints() {
                if b > 0.0 && b < cfg.horizon {
                    st.schedule(b, Scheduled::RateBreak);
                }
            }
        }
    }

    // Initial infecteds get age-0 paths from the initial-infectivity law.
    for k in 0..cfg.num_groups {
        for l in 0..cfg.num_patches {
            let count = i_init[cfg.cell(k, l)];
            st.initial_alive += count;
            for _ in 0..count {
                let path = sample_path(&cfg.lambda_initial[k], rng);
                st.add_infected(0.0, k, l, path, true);
            }
        }
    }

    let mut out_s = vec![vec![0u64; grid.len()]; cells];
    let mut out_i = vec![vec![0u64; grid.len()]; cells];
    let mut out_r = vec![vec![0u64; grid.len()]; cells];
    let mut out_b = vec![vec![0u64; grid.len()]; cells];
    let mut out_f = vec![vec![0.0; grid.len()]; cells];
    let mut out_g = vec![vec![0.0; grid.len()]; cells];
    let mut next_sample = 0usize;

    let mut t = 0.0f64;
    // Scratch: category rates in a fixed order (infections per cell, then
    // migrations per compartment/group/from/to).
    let mut inf_rate = vec![0.0f64; cells];

    loop {
        // All rates are constant until the next scheduled breakpoint.
        let beta_now = cfg.beta.at(t);
        let mut total = 0.0f64;
        for e in 0..cells {
            let g = st.gamma_bar(e, beta_now);
            debug_assert!(st.force[e] <= lambda_star * st.n * (1.0 + 1e-9) + 1e-9);
            inf_rate[e] = st.s[e] as f64 * g;
            total += inf_rate[e];
        }
        let mut mig_total = 0.0f64;
        for comp in Compartment::ALL {
            for k in 0..cfg.num_groups {
                let q = cfg.nu.generator_at(k, comp, t);
                for l in 0..cfg.num_patches {
                    let count = match comp {
                        Compartment::S => st.s[cfg.cell(k, l)],
                        Compartment::I => st.i[cfg.cell(k, l)],
                        Compartment::R => st.r[cfg.cell(k, l)],
                    } as f64;
                    mig_total += count * (-q.get(l, l));
                }
            }
        }
        total += mig_total;

        let next_scheduled = st.heap.peek().map(|h| h.time).unwrap_or(f64::INFINITY);
        let candidate = if total > 0.0 {
            t + -rng.gen::<f64>().ln() / total
        } else {
            f64::INFINITY
        };
        let t_event = candidate.min(next_scheduled);

        // Emit samples strictly before the next state change (counts are
        // right-continuous, so ties go to the event first).
        while next_sample < grid.len() && grid.t(next_sample) < t_event {
            let ts = grid.t(next_sample);
            let beta_s = cfg.beta.at(ts);
            for e in 0..cells {
                out_s[e][next_sample] = st.s[e];
                out_i[e][next_sample] = st.i[e];
                out_r[e][next_sample] = st.r[e];
                out_b[e][next_sample] = st.s[e] + st.i[e] + st.r[e];
                out_f[e][next_sample] = st.force_bar(e);
                out_g[e][next_sample] = st.gamma_bar(e, beta_s);
            }
            next_sample += 1;
        }
        if next_sample >= grid.len() {
            break;
        }

        if next_scheduled <= candidate {
            // Deterministic breakpoint.
            let item = st.heap.pop().unwrap();
            t = item.time;
            match item.kind {
                Scheduled::PathChange { id } => st.apply_path_change(t, id),
                Scheduled::Recovery { id } => st.apply_recovery(id),
                Scheduled::RateBreak => {}
            }
        } else {
            // Stochastic event.
            t = candidate;
            let mut u = rng.gen::<f64>() * total;
            let mut done = false;
            for e in 0..cells {
                if u < inf_rate[e] {
                    let (k, l) = (e / cfg.num_patches, e % cfg.num_patches);
                    st.s[e] -= 1;
                    st.cum_infections += 1;
                    st.infections.push(InfectionEvent {
                        time: t,
                        group: k,
                        patch: l,
                    });
                    let path = sample_path(&cfg.lambda_new[k], rng);
                    st.add_infected(t, k, l, path, false);
                    done = true;
                    break;
                }
                u -= inf_rate[e];
            }
            if !done {
                'mig: for comp in Compartment::ALL {
                    for k in 0..cfg.num_groups {
                        let q = cfg.nu.generator_at(k, comp, t);
                        for from in 0..cfg.num_patches {
                            let e = cfg.cell(k, from);
                            let count = match comp {
                                Compartment::S => st.s[e],
                                Compartment::I => st.i[e],
                                Compartment::R => st.r[e],
                            } as f64;
                            if count == 0.0 {
                                continue;
                            }
                            for to in 0..cfg.num_patches {
                                if to == from {
                                    continue;
                                }
                                let rate = count * q.get(from, to);
                                if u < rate {
                                    let e2 = cfg.cell(k, to);
                                    match comp {
                                        Compartment::S => {
                                            st.s[e] -= 1;
                                            st.s[e2] += 1;
                                        }
                                        Compartment::R => {
                                            st.r[e] -= 1;
                                            st.r[e2] += 1;
                                        }
                                        Compartment::I => {
                                            // Uniform pick among the infected present.
                                            let pick = rng.gen_range(0..st.active[e].len());
                                            let id = st.active[e][pick];
                                            st.move_infected(id, to);
                                        }
                                    }
                                    done = true;
                                    break 'mig;
                                }
                                u -= rate;
                            }
                        }
                    }
                }
                if !done {
                    // Floating-point leftover: treat as a no-op thinning miss.
                }
            }
        }

        st.events += 1;
        if st.events.is_multiple_of(4096) {
            st.rebuild_force();
        }
        if opts.check_decomposition {
            st.check_decomposition()?;
        }
        // Exact conservation after every event.
        let total_pop: u64 = (0..cells).map(|e| st.s[e] + st.i[e] + st.r[e]).sum();
        debug_assert_eq!(total_pop, n);
        if total_pop != n {
            return Err(Error::Solver {
                step: st.events as usize,
                time: t,
                residual: (total_pop as f64 - n as f64).abs(),
                message: "population count not conserved".into(),
            });
        }
    }

    Ok(AbmTrajectory {
        grid,
        num_groups: cfg.num_groups,
        num_patches: cfg.num_patches,
        population: cfg.population,
        s: out_s,
        i: out_i,
        r: out_r,
        b: out_b,
        fbar: out_f,
        gammabar: out_g,
        infections: st.infections,
        event_count: st.events,
    })
}

/// Homogeneous-model run (K = L = 1, no migration): same engine with the
/// two I/R count decompositions cross-checked after every event.
pub fn simulate_homogeneous<R: Rng>(
    cfg: &ModelConfig,
    opts: &SimOptions,
    rng: &mut R,
) -> Result<AbmTrajectory> {
    if cfg.num_groups != 1 || cfg.num_patches != 1 {
        return Err(Error::argument(
            "simulate_homogeneous requires K = L = 1".to_string(),
        ));
    }
    if cfg.nu.rate_bound() != 0.0 {
        return Err(Error::argument(
            "simulate_homogeneous requires zero migration rates".to_string(),
        ));
    }
    let opts = SimOptions {
        check_decomposition: true,
        ..opts.clone()
    };
    simulate(cfg, &opts, rng)
}

/// Fixed-step Euler-thinning cross-check scheme (bias O(dt)): within each
/// step the infection and migration intensities are frozen at the step
/// start; recoveries and infectivity changes still occur at exact ages.
pub fn simulate_euler<R: Rng>(
    cfg: &ModelConfig,
    opts: &SimOptions,
    dt: f64,
    rng: &mut R,
) -> Result<AbmTrajectory> {
    if !(dt > 0.0) {
        return Err(Error::argument(format!("dt must be > 0, got {dt}")));
    }
    // Implemented as the exact engine on a config whose randomness is
    // filtered through step-frozen rates: we approximate by simulating
    // per-step counts directly.
    cfg.validate()?;
    let cells = cfg.num_cells();
    let n = cfg.population as u64;
    let grid = TimeGrid::new(cfg.horizon, opts.output_step)?;

    let mut fractions = Vec::with_capacity(3 * cells);
    fractions.extend_from_slice(&cfg.s0);
    fractions.extend_from_slice(&cfg.i0);
    fractions.extend_from_slice(&cfg.r0);
    let counts = largest_remainder(&fractions, n);
    let r0_total: u64 = counts[2 * cells..].iter().sum();
    let mut st = SimState {
        cfg,
        n: cfg.population as f64,
        s: counts[..cells].to_vec(),
        i: vec![0; cells],
        r: counts[2 * cells..].to_vec(),
        force: vec![0.0; cells],
        infected: Vec::new(),
        active: vec![Vec::new(); cells],
        heap: BinaryHeap::new(),
        seq: 0,
        events: 0,
        initial_alive: 0,
        cum_infections: 0,
        cum_new_recoveries: 0,
        cum_initial_recoveries: 0,
        r0_total,
        infections: Vec::new(),
    };
    for k in 0..cfg.num_groups {
        for l in 0..cfg.num_patches {
            let count = counts[cells + cfg.cell(k, l)];
            st.initial_alive += count;
            for _ in 0..count {
                let path = sample_path(&cfg.lambda_initial[k], rng);
                st.add_infected(0.0, k, l, path, true);
            }
        }
    }

    let steps = (cfg.horizon / dt).ceil() as usize;
    let mut out_s = vec![vec![0u64; grid.len()]; cells];
    let mut out_i = vec![vec![0u64; grid.len()]; cells];
    let mut out_r = vec![vec![0u64; grid.len()]; cells];
    let mut out_b = vec![vec![0u64; grid.len()]; cells];
    let mut out_f = vec![vec![0.0; grid.len()]; cells];
    let mut out_g = vec![vec![0.0; grid.len()]; cells];
    let mut next_sample = 0usize;

    for step in 0..=steps {
        let t = (step as f64 * dt).min(cfg.horizon);
        // Process scheduled age events up to t.
        while let Some(item) = st.heap.peek() {
            if item.time > t {
                break;
            }
            let item = st.heap.pop().unwrap();
            match item.kind {
                Scheduled::PathChange { id } => st.apply_path_change(item.time, id),
                Scheduled::Recovery { id } => st.apply_recovery(id),
                Scheduled::RateBreak => {}
            }
        }
        while next_sample < grid.len() && grid.t(next_sample) <= t + 1e-12 {
            let ts = grid.t(next_sample);
            let beta_s = cfg.beta.at(ts);
            for e in 0..cells {
                out_s[e][next_sample] = st.s[e];
                out_i[e][next_sample] = st.i[e];
                out_r[e][next_sample] = st.r[e];
                out_b[e][next_sample] = st.s[e] + st.i[e] + st.r[e];
                out_f[e][next_sample] = st.force_bar(e);
                out_g[e][next_sample] = st.gamma_bar(e, beta_s);
            }
            next_sample += 1;
        }
        if step == steps {
            break;
        }

        let beta_now = cfg.beta.at(t);
        // Infections: binomial with the step-frozen per-susceptible hazard.
        for e in 0..cells {
            let g = st.gamma_bar(e, beta_now);
            if g <= 0.0 || st.s[e] == 0 {
                continue;
            }
            let p = 1.0 - (-g * dt).exp();
            let mut hits = 0u64;
            for _ in 0..st.s[e] {
                if rng.gen::<f64>() < p {
                    hits += 1;
                }
            }
            let (k, l) = (e / cfg.num_patches, e % cfg.num_patches);
            for _ in 0..hits {
                st.s[e] -= 1;
                st.cum_infections += 1;
                st.infections.push(InfectionEvent {
                    time: t,
                    group: k,
                    patch: l,
                });
                let path = sample_path(&cfg.lambda_new[k], rng);
                st.add_infected(t, k, l, path, false);
            }
        }
        // Migrations with step-frozen rates.
        for comp in Compartment::ALL {
            for k in 0..cfg.num_groups {
                let q = cfg.nu.generator_at(k, comp, t).clone();
                for from in 0..cfg.num_patches {
                    for to in 0..cfg.num_patches {
                        if to == from || q.get(from, to) == 0.0 {
                            continue;
                        }
                        let e = cfg.cell(k, from);
                        let count = match comp {
                            Compartment::S => st.s[e],
                            Compartment::I => st.i[e],
                            Compartment::R => st.r[e],
                        };
                        let p = 1.0 - (-q.get(from, to) * dt).exp();
                        let mut movers = 0u64;
                        for _ in 0..count {
                            if rng.gen::<f64>() < p {
                                movers += 1;
                            }
                        }
                        let e2 = cfg.cell(k, to);
                        for _ in 0..movers {
                            match comp {
                                Compartment::S => {
                                    st.s[e] -= 1;
                                    st.s[e2] += 1;
                                }
                                Compartment::R => {
                                    st.r[e] -= 1;
                                    st.r[e2] += 1;
                                }
                                Compartment::I => {
                                    if st.active[e].is_empty() {
                                        continue;
                                    }
                                    let pick = rng.gen_range(0..st.active[e].len());
                                    let id = st.active[e][pick];
                                    st.move_infected(id, to);
                                }
                            }
                        }
                    }
                }
            }
        }
        st.events += 1;
    }

    Ok(AbmTrajectory {
        grid,
        num_groups: cfg.num_groups,
        num_patches: cfg.num_patches,
        population: cfg.population,
        s: out_s,
        i: out_i,
        r: out_r,
        b: out_b,
        fbar: out_f,
        gammabar: out_g,
        infections: st.infections,
        event_count: st.events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infectivity::{LawFamily, ScalarDist};
    use crate::rng::substream;

    pub(crate) fn homogeneous_config(beta: f64, n: usize) -> ModelConfig {
        ModelConfig {
            num_groups: 1,
            num_patches: 1,
            gamma: 1.0,
            beta: ContactSchedule::scalar(beta, 1).unwrap(),
            nu: RateSchedule::zero(1, 1),
            lambda_new: vec![InfectivityLaw {
                family: LawFamily::ConstantPlateau {
                    rate: 0.5,
                    duration: ScalarDist::Exponential { rate: 0.25 },
                },
                cap: 1.0,
            }],
            lambda_initial: vec![InfectivityLaw {
                family: LawFamily::ConstantPlateau {
                    rate: 0.5,
                    duration: ScalarDist::Exponential { rate: 0.25 },
                },
                cap: 1.0,
            }],
            s0: vec![0.99],
            i0: vec![0.01],
            r0: vec![0.0],
            population: n,
            horizon: 10.0,
            seed: 1,
            mc_curve_samples: None,
        }
    }

    #[test]
    fn largest_remainder_sums_exactly() {
        let c = largest_remainder(&[0.333, 0.333, 0.334], 100);
        assert_eq!(c.iter().sum::<u64>(), 100);
        assert_eq!(c, vec![33, 33, 34]);
        let c = largest_remainder(&[0.5, 0.5], 101);
        assert_eq!(c, vec![51, 50]); // tie broken by index
    }

    #[test]
    fn zero_beta_means_no_infections() {
        let cfg = homogeneous_config(0.0, 500);
        let mut rng = substream(3, &[0]);
        let traj = simulate(&cfg, &SimOptions::default(), &mut rng).unwrap();
        assert!(traj.infections.is_empty());
        let last = traj.grid.steps();
        assert_eq!(traj.s[0][last], traj.s[0][0]);
        assert_eq!(traj.b[0][last], 500);
    }

    #[test]
    fn zero_infectivity_freezes_s() {
        let mut cfg = homogeneous_config(1.0, 500);
        let zero_law = InfectivityLaw {
            family: LawFamily::Deterministic {
                bounds: vec![0.0, 1.0],
                values: vec![0.0],
            },
            cap: 1.0,
        };
        cfg.lambda_new = vec![zero_law.clone()];
        cfg.lambda_initial = vec![zero_law];
        let mut rng = substream(3, &[1]);
        let traj = simulate(&cfg, &SimOptions::default(), &mut rng).unwrap();
        assert!(traj.infections.is_empty());
        assert!(traj.fbar[0].iter().all(|&f| f == 0.0));
    }

    #[test]
    fn single_initial_infected_recovers_at_deterministic_eta() {
        let mut cfg = homogeneous_config(0.0, 100);
        cfg.s0 = vec![0.99];
        cfg.i0 = vec![0.01];
        cfg.lambda_initial = vec![InfectivityLaw {
            family: LawFamily::ConstantPlateau {
                rate: 0.5,
                duration: ScalarDist::Deterministic { value: 3.0 },
            },
            cap: 1.0,
        }];
        let mut rng = substream(4, &[0]);
        let traj = simulate_homogeneous(&cfg, &SimOptions::default(), &mut rng).unwrap();
        let idx_before = traj.grid.floor_index(2.95);
        let idx_after = traj.grid.floor_index(3.0);
        assert_eq!(traj.i[0][idx_before], 1);
        assert_eq!(traj.r[0][idx_after], 1);
        assert_eq!(traj.i[0][idx_after], 0);
    }

    #[test]
    fn conservation_and_decomposition_hold() {
        let cfg = homogeneous_config(1.0, 2000);
        let mut rng = substream(11, &[0]);
        let traj = simulate_homogeneous(&cfg, &SimOptions::default(), &mut rng).unwrap();
        for n in 0..traj.grid.len() {
            assert_eq!(traj.s[0][n] + traj.i[0][n] + traj.r[0][n], 2000);
        }
        assert!(!traj.infections.is_empty());
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let cfg = homogeneous_config(1.0, 300);
        let a = simulate(&cfg, &SimOptions::default(), &mut substream(7, &[9])).unwrap();
        let b = simulate(&cfg, &SimOptions::default(), &mut substream(7, &[9])).unwrap();
        assert_eq!(a.s, b.s);
        assert_eq!(a.fbar, b.fbar);
        assert_eq!(a.event_count, b.event_count);
    }

    #[test]
    fn migration_conserves_population_across_patches() {
        use crate::matrix::SqMat;
        use crate::mobility::PiecewiseMatrices;
        let m = SqMat::from_rows(&[vec![0.0, 0.5], vec![0.5, 0.0]]).unwrap();
        let cfg = ModelConfig {
            num_groups: 1,
            num_patches: 2,
            gamma: 0.5,
            beta: ContactSchedule::scalar(0.8, 2).unwrap(),
            nu: RateSchedule::uniform(1, PiecewiseMatrices::constant(m).unwrap()),
            lambda_new: vec![homogeneous_config(1.0, 1).lambda_new[0].clone()],
            lambda_initial: vec![homogeneous_config(1.0, 1).lambda_initial[0].clone()],
            s0: vec![0.59, 0.3],
            i0: vec![0.01, 0.01],
            r0: vec![0.05, 0.04],
            population: 1000,
            horizon: 5.0,
            seed: 0,
            mc_curve_samples: None,
        };
        let mut rng = substream(21, &[0]);
        let traj = simulate(&cfg, &SimOptions::default(), &mut rng).unwrap();
        for n in 0..traj.grid.len() {
            let total: u64 = (0..2).map(|e| traj.b[e][n]).sum();
            assert_eq!(total, 1000);
        }
        assert!(traj.event_count > 0);
    }

    #[test]
    fn invalid_config_collects_all_errors() {
        let mut cfg = homogeneous_config(1.0, 100);
        cfg.gamma = 2.0;
        cfg.s0 = vec![0.5];
        cfg.i0 = vec![0.1];
        cfg.r0 = vec![0.1];
        match cfg.validate() {
            Err(Error::Config(errs)) => assert!(errs.len() >= 2, "{errs:?}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
