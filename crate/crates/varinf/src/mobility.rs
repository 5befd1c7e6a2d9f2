//! Time-inhomogeneous Markov mobility on patches.
//!
//! Each (group, compartment) pair carries its own piecewise-constant-in-time
//! migration rate matrix. The module provides generators, transition
//! matrices (forward Kolmogorov, RK4) and exact path sampling by thinning.
//! Patches are numbered `1..=L`; patch `0` is a reserved absorbing cemetery
//! state used only by the Feynman-Kac and limit-particle machinery.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::SqMat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Compartment {
    S,
    I,
    R,
}

impl Compartment {
    pub const ALL: [Compartment; 3] = [Compartment::S, Compartment::I, Compartment::R];

    fn index(self) -> usize {
        match self {
            Compartment::S => 0,
            Compartment::I => 1,
            Compartment::R => 2,
        }
    }
}

/// Piecewise-constant-in-time sequence of L x L matrices. Right-continuous:
/// the matrix of segment `i` applies on `[breakpoints[i], breakpoints[i+1])`,
/// and the last segment extends beyond its breakpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseMatrices {
    breakpoints: Vec<f64>,
    matrices: Vec<SqMat>,
}

impl PiecewiseMatrices {
    /// `breakpoints[0]` must be 0 and breakpoints strictly ascending; one
    /// matrix per breakpoint. Off-diagonal entries must be nonnegative; the
    /// diagonal is overwritten with minus the off-diagonal row sum so the
    /// generator invariant holds by construction.
    pub fn new(breakpoints: Vec<f64>, mut matrices: Vec<SqMat>) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints[0] != 0.0 {
            return Err(Error::config("rate schedule breakpoints must start at 0"));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config(
                "rate schedule breakpoints must be strictly ascending",
            ));
        }
        if matrices.len() != breakpoints.len() {
            return Err(Error::config(format!(
                "rate schedule has {} breakpoints but {} matrices",
                breakpoints.len(),
                matrices.len()
            )));
        }
        let dim = matrices[0].dim();
        for m in matrices.iter_mut() {
            if m.dim() != dim {
                return Err(Error::config("rate matrices must all share one dimension"));
            }
            for i in 0..dim {
                let mut out = 0.0;
                for j in 0..dim {
                    if i == j {
                        continue;
                    }
                    let v = m.get(i, j);
                    if !(v >= 0.0) {
                        return Err(Error::config(format!(
                            "migration rate ({},{}) must be >= 0, got {v}",
                            i + 1,
                            j + 1
                        )));
                    }
                    out += v;
                }
                m.set(i, i, -out);
            }
        }
        Ok(PiecewiseMatrices {
            breakpoints,
            matrices,
        })
    }

    pub fn constant(matrix: SqMat) -> Result<Self> {
        Self::new(vec![0.0], vec![matrix])
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(SqMat::zeros(dim)).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.matrices[0].dim()
    }

    /// Matrix in force at time `t` (right-continuous; last segment extends
    /// past the schedule horizon).
    pub fn at(&self, t: f64) -> &SqMat {
        let idx = match self
            .breakpoints
            .binary_search_by(|b| b.partial_cmp(&t).unwrap())
        {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        };
        &self.matrices[idx]
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Segment boundaries strictly inside `(s, t)`.
    fn cuts_between(&self, s: f64, t: f64) -> Vec<f64> {
        self.breakpoints
            .iter()
            .copied()
            .filter(|&b| b > s && b < t)
            .collect()
    }

    /// Maximal total outflow rate over all times and states.
    pub fn rate_bound(&self) -> f64 {
        let mut nu_star: f64 = 0.0;
        for m in &self.matrices {
            for i in 0..m.dim() {
                nu_star = nu_star.max(-m.get(i, i));
            }
        }
        nu_star
    }

    /// Maximal total outflow rate from one patch over all times.
    pub fn rate_bound_at_state(&self, l: usize) -> f64 {
        self.matrices
            .iter()
            .fold(0.0f64, |m, q| m.max(-q.get(l, l)))
    }

    pub fn max_rate_entry(&self) -> f64 {
        self.matrices.iter().fold(0.0, |m, q| m.max(q.max_abs()))
    }
}

/// Migration rates for every (group, compartment) pair of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct RateSchedule {
    num_groups: usize,
    num_patches: usize,
    // indexed [group * 3 + compartment]
    schedules: Vec<PiecewiseMatrices>,
}

impl RateSchedule {
    pub fn zero(num_groups: usize, num_patches: usize) -> Self {
        RateSchedule {
            num_groups,
            num_patches,
            schedules: vec![PiecewiseMatrices::zero(num_patches); num_groups * 3],
        }
    }

    /// Same schedule for every group and compartment.
    pub fn uniform(num_groups: usize, sched: PiecewiseMatrices) -> Self {
        RateSchedule {
            num_groups,
            num_patches: sched.dim(),
            schedules: vec![sched; num_groups * 3],
        }
    }

    pub fn set(&mut self, k: usize, comp: Compartment, sched: PiecewiseMatrices) -> Result<()> {
        if sched.dim() != self.num_patches {
            return Err(Error::config(format!(
                "rate schedule dimension {} does not match patch count {}",
                sched.dim(),
                self.num_patches
            )));
        }
        self.schedules[k * 3 + comp.index()] = sched;
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    pub fn schedule(&self, k: usize, comp: Compartment) -> &PiecewiseMatrices {
        &self.schedules[k * 3 + comp.index()]
    }

    /// Generator matrix nu_k(t) for the given group and compartment.
    pub fn generator_at(&self, k: usize, comp: Compartment, t: f64) -> &SqMat {
        self.schedule(k, comp).at(t)
    }

    /// Dominating rate nu* across all groups, compartments and times.
    pub fn rate_bound(&self) -> f64 {
        self.schedules
            .iter()
            .fold(0.0, |m, s| m.max(s.rate_bound()))
    }

    /// Transition matrix `q(s,t)` with `q(s,t)[l][l'] = P(X(t)=l'+1 | X(s)=l+1)`,
    /// from the forward Kolmogorov equation dM/dt = M Q(t), M(s) = I, solved
    /// with classical RK4 (substeps never straddle a rate breakpoint).
    pub fn transition_matrix(
        &self,
        k: usize,
        comp: Compartment,
        s: f64,
        t: f64,
        step: f64,
    ) -> Result<SqMat> {
        if !(s <= t) {
            return Err(Error::argument(format!(
                "transition_matrix requires s <= t, got s = {s}, t = {t}"
            )));
        }
        if !(step > 0.0) {
            return Err(Error::argument(format!("step must be > 0, got {step}")));
        }
        let sched = self.schedule(k, comp);
        let dim = sched.dim();
        let mut m = SqMat::identity(dim);
        if t == s {
            return Ok(m);
        }
        let mut edges = vec![s];
        edges.extend(sched.cuts_between(s, t));
        edges.push(t);
        for w in edges.windows(2) {
            let (a, b) = (w[0], w[1]);
            let q = sched.at(a);
            let nsub = ((b - a) / step).ceil().max(1.0) as usize;
            let h = (b - a) / nsub as f64;
            for _ in 0..nsub {
                // Q constant on the segment, so the stages share one matrix.
                let k1 = m.matmul(q);
                let k2 = m.add(&k1.scale(0.5 * h)).matmul(q);
                let k3 = m.add(&k2.scale(0.5 * h)).matmul(q);
                let k4 = m.add(&k3.scale(h)).matmul(q);
                m.axpy(h / 6.0, &k1);
                m.axpy(h / 3.0, &k2);
                m.axpy(h / 3.0, &k3);
                m.axpy(h / 6.0, &k4);
            }
        }
        let mut worst_drift = 0.0f64;
        for i in 0..dim {
            let sum: f64 = m.row(i).iter().sum();
            worst_drift = worst_drift.max((sum - 1.0).abs());
        }
        if worst_drift > 1e-12 {
            log::warn!(
                "transition_matrix row-sum drift {worst_drift:e} exceeds 1e-12; renormalizing \
                 (consider a smaller step)"
            );
            for i in 0..dim {
                let sum: f64 = m.row(i).iter().sum();
                for j in 0..dim {
                    m.set(i, j, m.get(i, j) / sum);
                }
            }
        }
        for i in 0..dim {
            for j in 0..dim {
                m.set(i, j, m.get(i, j).clamp(0.0, 1.0));
            }
        }
        Ok(m)
    }
}

/// Default ODE step for transition matrices.
pub const DEFAULT_TRANSITION_STEP: f64 = 1e-2;

/// One sampled mobility path. Right-continuous; patch `0` (cemetery) is
/// absorbing.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPath {
    start_time: f64,
    start_patch: usize,
    jumps: Vec<(f64, usize)>,
}

impl PatchPath {
    pub fn constant(start_time: f64, patch: usize) -> Self {
        PatchPath {
            start_time,
            start_patch: patch,
            jumps: Vec::new(),
        }
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn start_patch(&self) -> usize {
        self.start_patch
    }

    pub fn jumps(&self) -> &[(f64, usize)] {
        &self.jumps
    }

    /// Patch occupied at time `t >= start_time` (right-continuous).
    pub fn patch_at(&self, t: f64) -> usize {
        debug_assert!(t >= self.start_time - 1e-12);
        let k = self.jumps.partition_point(|&(tj, _)| tj <= t);
        if k == 0 {
            self.start_patch
        } else {
            self.jumps[k - 1].1
        }
    }
}

/// Exact sample of the time-inhomogeneous chain on `[s, horizon]` by
/// thinning a homogeneous Poisson stream at the dominating rate nu*.
pub fn sample_patch_path<R: Rng>(
    sched: &RateSchedule,
    k: usize,
    comp: Compartment,
    start_patch: usize,
    s: f64,
    horizon: f64,
    rng: &mut R,
) -> PatchPath {
    debug_assert!(start_patch <= sched.num_patches());
    debug_assert!(horizon >= s);
    let nu_star = sched.schedule(k, comp).rate_bound();
    if start_patch == 0 || nu_star == 0.0 {
        return PatchPath::constant(s, start_patch);
    }
    let mut path = PatchPath::constant(s, start_patch);
    let mut cur = start_patch;
    let mut t = s;
    loop {
        t += -rng.gen::<f64>().ln() / nu_star;
        if t > horizon {
            return path;
        }
        let q = sched.generator_at(k, comp, t);
        let out = -q.get(cur - 1, cur - 1);
        if rng.gen::<f64>() * nu_star < out {
            // Accepted: pick the destination proportionally to the rates.
            let mut v = rng.gen::<f64>() * out;
            let mut dest = cur;
            for j in 0..q.dim() {
                if j == cur - 1 {
                    continue;
                }
                v -= q.get(cur - 1, j);
                if v < 0.0 {
                    dest = j + 1;
                    break;
                }
            }
            if dest != cur {
                cur = dest;
                path.jumps.push((t, cur));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    fn symmetric_two_patch() -> RateSchedule {
        let m = SqMat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        RateSchedule::uniform(1, PiecewiseMatrices::constant(m).unwrap())
    }

    #[test]
    fn generator_fills_diagonal() {
        let sched = symmetric_two_patch();
        let q = sched.generator_at(0, Compartment::S, 0.3);
        assert_eq!(q.get(0, 0), -1.0);
        assert_eq!(q.get(0, 1), 1.0);
        assert_eq!(q.get(1, 0), 1.0);
        assert_eq!(q.get(1, 1), -1.0);
    }

    #[test]
    fn breakpoint_is_right_continuous() {
        let a = SqMat::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let b = SqMat::from_rows(&[vec![0.0, 3.0], vec![0.0, 0.0]]).unwrap();
        let pm = PiecewiseMatrices::new(vec![0.0, 5.0], vec![a, b]).unwrap();
        assert_eq!(pm.at(4.999).get(0, 1), 1.0);
        assert_eq!(pm.at(5.0).get(0, 1), 3.0);
        assert_eq!(pm.at(100.0).get(0, 1), 3.0); // extends beyond horizon
    }

    #[test]
    fn transition_identity_at_equal_times() {
        let sched = symmetric_two_patch();
        let q = sched
            .transition_matrix(0, Compartment::I, 1.5, 1.5, 1e-2)
            .unwrap();
        assert_eq!(q, SqMat::identity(2));
    }

    #[test]
    fn transition_matches_two_state_closed_form() {
        let sched = symmetric_two_patch();
        let q = sched
            .transition_matrix(0, Compartment::I, 0.0, 1.0, 1e-2)
            .unwrap();
        let expected = (1.0 + (-2.0f64).exp()) / 2.0;
        assert!((q.get(0, 0) - expected).abs() < 1e-8);
        assert!((q.get(0, 1) - (1.0 - expected)).abs() < 1e-8);
    }

    #[test]
    fn constant_rate_matches_matrix_exponential() {
        let m = SqMat::from_rows(&[
            vec![0.0, 0.7, 0.2],
            vec![0.4, 0.0, 1.1],
            vec![0.3, 0.9, 0.0],
        ])
        .unwrap();
        let sched = RateSchedule::uniform(1, PiecewiseMatrices::constant(m).unwrap());
        let t = 1.7;
        let q = sched
            .transition_matrix(0, Compartment::S, 0.0, t, 1e-2)
            .unwrap();
        let e = sched.generator_at(0, Compartment::S, 0.0).scale(t).expm();
        for i in 0..3 {
            for j in 0..3 {
                assert!((q.get(i, j) - e.get(i, j)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn rejects_reversed_times() {
        let sched = symmetric_two_patch();
        assert!(sched
            .transition_matrix(0, Compartment::S, 2.0, 1.0, 1e-2)
            .is_err());
    }

    #[test]
    fn zero_rates_give_constant_path() {
        let sched = RateSchedule::zero(1, 3);
        let mut rng = substream(1, &[0]);
        let p = sample_patch_path(&sched, 0, Compartment::S, 2, 0.0, 10.0, &mut rng);
        assert!(p.jumps().is_empty());
        assert_eq!(p.patch_at(7.3), 2);
    }

    #[test]
    fn cemetery_is_absorbing() {
        let sched = symmetric_two_patch();
        let mut rng = substream(1, &[1]);
        let p = sample_patch_path(&sched, 0, Compartment::S, 0, 0.0, 10.0, &mut rng);
        assert!(p.jumps().is_empty());
        assert_eq!(p.patch_at(5.0), 0);
    }

    #[test]
    fn empirical_occupancy_matches_transition_matrix() {
        // Asymmetric schedule with a mid-horizon rate change.
        let a = SqMat::from_rows(&[vec![0.0, 1.2], vec![0.4, 0.0]]).unwrap();
        let b = SqMat::from_rows(&[vec![0.0, 0.3], vec![0.9, 0.0]]).unwrap();
        let pm = PiecewiseMatrices::new(vec![0.0, 1.0], vec![a, b]).unwrap();
        let sched = RateSchedule::uniform(1, pm);
        let t = 2.0;
        let q = sched
            .transition_matrix(0, Compartment::I, 0.0, t, 1e-2)
            .unwrap();
        let n = 100_000usize;
        let mut rng = substream(2024, &[5]);
        let mut hits = 0usize;
        for _ in 0..n {
            let p = sample_patch_path(&sched, 0, Compartment::I, 1, 0.0, t, &mut rng);
            if p.patch_at(t) == 1 {
                hits += 1;
            }
        }
        let p_hat = hits as f64 / n as f64;
        let p = q.get(0, 0);
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (p_hat - p).abs() <= 4.0 * se,
            "occupancy {p_hat} vs transition probability {p} (se {se:e})"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn chapman_kolmogorov(
            dim in 1usize..=4,
            seed in any::<u64>(),
        ) {
            let mut rng = substream(seed, &[0xcc]);
            let mut mats = Vec::new();
            for _ in 0..2 {
                let mut m = SqMat::zeros(dim);
                for i in 0..dim {
                    for j in 0..dim {
                        if i != j {
                            m.set(i, j, 2.0 * rand::Rng::gen::<f64>(&mut rng));
                        }
                    }
                }
                mats.push(m);
            }
            let pm = PiecewiseMatrices::new(vec![0.0, 0.9], mats).unwrap();
            let sched = RateSchedule::uniform(1, pm);
            let q02 = sched.transition_matrix(0, Compartment::S, 0.0, 2.0, 1e-2).unwrap();
            let q01 = sched.transition_matrix(0, Compartment::S, 0.0, 1.0, 1e-2).unwrap();
            let q12 = sched.transition_matrix(0, Compartment::S, 1.0, 2.0, 1e-2).unwrap();
            let comp = q01.matmul(&q12);
            for i in 0..dim {
                let sum: f64 = q02.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-10);
                for j in 0..dim {
                    prop_assert!((q02.get(i, j) - comp.get(i, j)).abs() < 1e-8);
                }
            }
        }
    }
}
