//! Random infection-age-dependent infectivity functions.
//!
//! Each infected individual carries a random right-continuous step function
//! `lambda(t)` of its infection age, bounded by a global cap `lambda_star`,
//! vanishing for `t < 0` and for `t >= eta` (the infected period). The laws
//! here also expose the deterministic summaries consumed by the limit
//! solver: the mean curve `lambda_bar(t)` and the CDF `F(t)` of `eta`.

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::rng::substream;

/// Parametric scalar distribution used for durations, latencies and
/// piecewise-table values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum ScalarDist {
    Exponential { rate: f64 },
    Gamma { shape: f64, scale: f64 },
    Deterministic { value: f64 },
    Uniform { min: f64, max: f64 },
}

impl ScalarDist {
    pub fn validate(&self, what: &str, errors: &mut Vec<String>) {
        match self {
            ScalarDist::Exponential { rate } => {
                if !(*rate > 0.0) {
                    errors.push(format!("{what}: exponential rate must be > 0, got {rate}"));
                }
            }
            ScalarDist::Gamma { shape, scale } => {
                if !(*shape > 0.0) || !(*scale > 0.0) {
                    errors.push(format!(
                        "{what}: gamma shape/scale must be > 0, got ({shape}, {scale})"
                    ));
                }
            }
            ScalarDist::Deterministic { value } => {
                if !(*value >= 0.0) {
                    errors.push(format!(
                        "{what}: deterministic value must be >= 0, got {value}"
                    ));
                }
            }
            ScalarDist::Uniform { min, max } => {
                if !(*min >= 0.0 && *max >= *min) {
                    errors.push(format!(
                        "{what}: uniform bounds must satisfy 0 <= min <= max, got ({min}, {max})"
                    ));
                }
            }
        }
    }

    /// Right-continuous CDF.
    pub fn cdf(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        match self {
            ScalarDist::Exponential { rate } => 1.0 - (-rate * t).exp(),
            ScalarDist::Gamma { shape, scale } => {
                if t == 0.0 {
                    0.0
                } else {
                    gamma_lr(*shape, t / scale)
                }
            }
            ScalarDist::Deterministic { value } => {
                if t >= *value {
                    1.0
                } else {
                    0.0
                }
            }
            ScalarDist::Uniform { min, max } => {
                if t < *min {
                    0.0
                } else if t >= *max {
                    1.0
                } else {
                    (t - min) / (max - min)
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            ScalarDist::Exponential { rate } => 1.0 / rate,
            ScalarDist::Gamma { shape, scale } => shape * scale,
            ScalarDist::Deterministic { value } => *value,
            ScalarDist::Uniform { min, max } => 0.5 * (min + max),
        }
    }

    /// Supremum of the support (`inf` for exponential/gamma).
    pub fn sup_support(&self) -> f64 {
        match self {
            ScalarDist::Exponential { .. } | ScalarDist::Gamma { .. } => f64::INFINITY,
            ScalarDist::Deterministic { value } => *value,
            ScalarDist::Uniform { max, .. } => *max,
        }
    }

    pub fn as_deterministic(&self) -> Option<f64> {
        match self {
            ScalarDist::Deterministic { value } => Some(*value),
            _ => None,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            ScalarDist::Exponential { rate } => rand_distr::Exp::new(*rate).unwrap().sample(rng),
            ScalarDist::Gamma { shape, scale } => {
                rand_distr::Gamma::new(*shape, *scale).unwrap().sample(rng)
            }
            ScalarDist::Deterministic { value } => *value,
            ScalarDist::Uniform { min, max } => {
                if max > min {
                    rng.gen_range(*min..*max)
                } else {
                    *min
                }
            }
        }
    }
}

/// Family of a random infectivity law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LawFamily {
    /// `lambda(t) = rate` on `[0, D)`, `D ~ duration`.
    ConstantPlateau { rate: f64, duration: ScalarDist },
    /// `lambda(t) = rate` on `[Z, Z + D)` with latency `Z` and plateau
    /// duration `D` independent.
    DelayedPlateau {
        latency: ScalarDist,
        rate: f64,
        plateau: ScalarDist,
    },
    /// Fixed breakpoints, random value per segment. `bounds` has one more
    /// entry than `values`, starts at 0, and the path vanishes beyond the
    /// last bound. Value distributions must have bounded support.
    PiecewiseTable {
        bounds: Vec<f64>,
        values: Vec<ScalarDist>,
    },
    /// A fixed path.
    Deterministic { bounds: Vec<f64>, values: Vec<f64> },
}

/// Law of a random infectivity function, with the global cap `lambda_star`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfectivityLaw {
    #[serde(flatten)]
    pub family: LawFamily,
    pub cap: f64,
}

fn validate_bounds(bounds: &[f64], nvals: usize, what: &str, errors: &mut Vec<String>) {
    if bounds.len() != nvals + 1 {
        errors.push(format!(
            "{what}: expected {} bounds for {} segments, got {}",
            nvals + 1,
            nvals,
            bounds.len()
        ));
        return;
    }
    if bounds.first() != Some(&0.0) {
        errors.push(format!("{what}: first bound must be 0"));
    }
    if bounds.windows(2).any(|w| !(w[1] > w[0])) {
        errors.push(format!("{what}: bounds must be strictly ascending"));
    }
}

impl InfectivityLaw {
    pub fn validate(&self, what: &str) -> Vec<String> {
        let mut errors = Vec::new();
        if !(self.cap > 0.0) {
            errors.push(format!(
                "{what}: cap lambda_star must be > 0, got {}",
                self.cap
            ));
        }
        match &self.family {
            LawFamily::ConstantPlateau { rate, duration } => {
                if !(*rate >= 0.0 && *rate <= self.cap) {
                    errors.push(format!("{what}: rate {rate} outside [0, {}]", self.cap));
                }
                duration.validate(&format!("{what}.duration"), &mut errors);
            }
            LawFamily::DelayedPlateau {
                latency,
                rate,
                plateau,
            } => {
                if !(*rate >= 0.0 && *rate <= self.cap) {
                    errors.push(format!("{what}: rate {rate} outside [0, {}]", self.cap));
                }
                latency.validate(&format!("{what}.latency"), &mut errors);
                plateau.validate(&format!("{what}.plateau"), &mut errors);
            }
            LawFamily::PiecewiseTable { bounds, values } => {
                validate_bounds(bounds, values.len(), what, &mut errors);
                for (i, v) in values.iter().enumerate() {
                    v.validate(&format!("{what}.values[{i}]"), &mut errors);
                    if v.sup_support() > self.cap {
                        errors.push(format!(
                            "{what}.values[{i}]: support exceeds cap {} (unbounded value \
                             distributions are not allowed in tables)",
                            self.cap
                        ));
                    }
                }
            }
            LawFamily::Deterministic { bounds, values } => {
                validate_bounds(bounds, values.len(), what, &mut errors);
                for (i, v) in values.iter().enumerate() {
                    if !(*v >= 0.0 && *v <= self.cap) {
                        errors.push(format!("{what}.values[{i}]: {v} outside [0, {}]", self.cap));
                    }
                }
            }
        }
        errors
    }
}

/// One sampled infectivity path: a right-continuous step function stored
/// parametrically (segment starts + values), with its duration `eta` and
/// latency `zeta`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfectivityPath {
    starts: Vec<f64>,
    values: Vec<f64>,
    eta: f64,
    zeta: f64,
}

impl InfectivityPath {
    /// Build from segment bounds (`bounds.len() == values.len() + 1`,
    /// `bounds[0] == 0`). Trailing zero segments are trimmed so that
    /// `eta` is the true supremum of the support.
    pub fn from_segments(bounds: &[f64], values: &[f64]) -> InfectivityPath {
        debug_assert_eq!(bounds.len(), values.len() + 1);
        let mut last_nonzero = None;
        for (i, &v) in values.iter().enumerate() {
            if v > 0.0 {
                last_nonzero = Some(i);
            }
        }
        match last_nonzero {
            None => InfectivityPath {
                starts: Vec::new(),
                values: Vec::new(),
                eta: 0.0,
                zeta: f64::INFINITY,
            },
            Some(last) => {
                let first = values.iter().position(|&v| v > 0.0).unwrap();
                let starts = bounds[..=last].to_vec();
                let values = values[..=last].to_vec();
                InfectivityPath {
                    starts,
                    values,
                    eta: bounds[last + 1],
                    zeta: bounds[first],
                }
            }
        }
    }

    /// Infected period: `lambda(t) = 0` for `t >= eta`.
    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Exposed period: first age with positive infectivity (`inf` for the
    /// all-zero path).
    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    /// Evaluate at infection age `t`. O(log #segments).
    pub fn eval(&self, t: f64) -> f64 {
        if t < 0.0 || t >= self.eta || self.starts.is_empty() {
            return 0.0;
        }
        let idx = match self.starts.binary_search_by(|s| s.partial_cmp(&t).unwrap()) {
            Ok(i) => i,
            Err(0) => return 0.0,
            Err(i) => i - 1,
        };
        self.values[idx]
    }

    /// Segment boundaries strictly inside `(0, eta)`, i.e. the ages at which
    /// the running value changes (used by the event-driven simulator).
    pub fn interior_breakpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.starts.iter().copied().filter(|&s| s > 0.0)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().fold(0.0, |m, &v| m.max(v))
    }
}

/// Draw one path. Identical RNG state produces an identical path.
pub fn sample_path<R: Rng>(law: &InfectivityLaw, rng: &mut R) -> InfectivityPath {
    match &law.family {
        LawFamily::ConstantPlateau { rate, duration } => {
            let d = duration.sample(rng);
            if d > 0.0 && *rate > 0.0 {
                InfectivityPath::from_segments(&[0.0, d], &[*rate])
            } else {
                InfectivityPath::from_segments(&[0.0, 1.0], &[0.0])
            }
        }
        LawFamily::DelayedPlateau {
            latency,
            rate,
            plateau,
        } => {
            let z = latency.sample(rng);
            let d = plateau.sample(rng);
            if d > 0.0 && *rate > 0.0 {
                if z > 0.0 {
                    InfectivityPath::from_segments(&[0.0, z, z + d], &[0.0, *rate])
                } else {
                    InfectivityPath::from_segments(&[0.0, d], &[*rate])
                }
            } else {
                InfectivityPath::from_segments(&[0.0, 1.0], &[0.0])
            }
        }
        LawFamily::PiecewiseTable { bounds, values } => {
            let vals: Vec<f64> = values
                .iter()
                .map(|d| d.sample(rng).clamp(0.0, law.cap))
                .collect();
            InfectivityPath::from_segments(bounds, &vals)
        }
        LawFamily::Deterministic { bounds, values } => {
            InfectivityPath::from_segments(bounds, values)
        }
    }
}

/// Deterministic summaries of a law on a grid.
#[derive(Debug, Clone)]
pub struct MeanCurves {
    /// `lambda_bar(t_i) = E[lambda(t_i)]`.
    pub lambda_bar: Vec<f64>,
    /// `F(t_i) = P(eta <= t_i)`.
    pub cdf: Vec<f64>,
    /// Standard error of `lambda_bar` per grid point when Monte Carlo was used.
    pub stderr: Option<Vec<f64>>,
    pub closed_form: bool,
}

/// Pointwise evaluator returning `(lambda_bar(t), F(t))`.
type PointFn = Box<dyn Fn(f64) -> (f64, f64)>;

fn closed_point(family: &LawFamily) -> Option<PointFn> {
    match family {
        LawFamily::ConstantPlateau { rate, duration } => {
            let rate = *rate;
            let duration = duration.clone();
            Some(Box::new(move |t| {
                let f = duration.cdf(t);
                (rate * (1.0 - f), f)
            }))
        }
        LawFamily::DelayedPlateau {
            latency,
            rate,
            plateau,
        } => {
            let rate = *rate;
            if let Some(z0) = latency.as_deterministic() {
                let plateau = plateau.clone();
                return Some(Box::new(move |t| {
                    let fz = if t >= z0 { 1.0 } else { 0.0 };
                    let feta = plateau.cdf(t - z0);
                    (rate * (fz - feta), feta)
                }));
            }
            if let Some(d0) = plateau.as_deterministic() {
                let latency = latency.clone();
                return Some(Box::new(move |t| {
                    let fz = latency.cdf(t);
                    let feta = latency.cdf(t - d0);
                    (rate * (fz - feta), feta)
                }));
            }
            None
        }
        LawFamily::PiecewiseTable { bounds, values } => {
            let bounds = bounds.clone();
            let values = values.clone();
            // eta is deterministic: end of the last segment whose value
            // distribution is not a.s. zero.
            let eta = values
                .iter()
                .enumerate()
                .rev()
                .find(|(_, v)| v.sup_support() > 0.0)
                .map(|(i, _)| bounds[i + 1])
                .unwrap_or(0.0);
            Some(Box::new(move |t| {
                let f = if t >= eta { 1.0 } else { 0.0 };
                if t < 0.0 || t >= eta {
                    return (0.0, f);
                }
                let idx = match bounds.binary_search_by(|s| s.partial_cmp(&t).unwrap()) {
                    Ok(i) => i,
                    Err(i) => i - 1,
                };
                let lb = if idx < values.len() {
                    values[idx].mean()
                } else {
                    0.0
                };
                (lb, f)
            }))
        }
        LawFamily::Deterministic { bounds, values } => {
            let path = InfectivityPath::from_segments(bounds, values);
            Some(Box::new(move |t| {
                let f = if t >= path.eta() { 1.0 } else { 0.0 };
                (path.eval(t), f)
            }))
        }
    }
}

/// Evaluate `lambda_bar` and `F` on the grid.
///
/// Closed forms are used when available and no Monte Carlo sample count is
/// requested; otherwise the curves are estimated from `mc_samples` sampled
/// paths drawn from a substream fixed by `(mc_seed, law)` position, so the
/// result is deterministic given the configuration seed.
pub fn mean_curves(
    law: &InfectivityLaw,
    grid: &TimeGrid,
    mc_samples: Option<usize>,
    mc_seed: u64,
) -> Result<MeanCurves> {
    if let Some(0) = mc_samples {
        return Err(Error::config("mean_curves: mc_samples must be >= 1"));
    }
    if mc_samples.is_none() {
        if let Some(f) = closed_point(&law.family) {
            let mut lambda_bar = Vec::with_capacity(grid.len());
            let mut cdf = Vec::with_capacity(grid.len());
            for t in grid.times() {
                let (l, c) = f(t);
                lambda_bar.push(l);
                cdf.push(c);
            }
            return Ok(MeanCurves {
                lambda_bar,
                cdf,
                stderr: None,
                closed_form: true,
            });
        }
    }
    let samples = mc_samples.unwrap_or(100_000);
    let mut rng = substream(mc_seed, &[0x6d63]);
    let npts = grid.len();
    let mut sum = vec![0.0; npts];
    let mut sumsq = vec![0.0; npts];
    let mut f_count = vec![0usize; npts];
    for _ in 0..samples {
        let path = sample_path(law, &mut rng);
        for (i, t) in grid.times().enumerate() {
            let v = path.eval(t);
            sum[i] += v;
            sumsq[i] += v * v;
            if path.eta() <= t {
                f_count[i] += 1;
            }
        }
    }
    let n = samples as f64;
    let lambda_bar: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let stderr: Vec<f64> = sumsq
        .iter()
        .zip(&lambda_bar)
        .map(|(sq, m)| ((sq / n - m * m).max(0.0) / n).sqrt())
        .collect();
    let cdf: Vec<f64> = f_count.iter().map(|&c| c as f64 / n).collect();
    Ok(MeanCurves {
        lambda_bar,
        cdf,
        stderr: Some(stderr),
        closed_form: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_plateau(rate: f64, mu: f64) -> InfectivityLaw {
        InfectivityLaw {
            family: LawFamily::ConstantPlateau {
                rate,
                duration: ScalarDist::Exponential { rate: mu },
            },
            cap: 1.0,
        }
    }

    #[test]
    fn plateau_sample_has_single_segment() {
        let law = exp_plateau(0.5, 0.25);
        let mut rng = substream(7, &[0]);
        let path = sample_path(&law, &mut rng);
        assert_eq!(path.zeta(), 0.0);
        assert!(path.eta() > 0.0);
        assert_eq!(path.eval(path.eta() * 0.5), 0.5);
        assert_eq!(path.eval(path.eta()), 0.0);
        assert_eq!(path.eval(-1.0), 0.0);
    }

    #[test]
    fn zero_path_conventions() {
        let law = InfectivityLaw {
            family: LawFamily::Deterministic {
                bounds: vec![0.0, 2.0],
                values: vec![0.0],
            },
            cap: 1.0,
        };
        let mut rng = substream(7, &[0]);
        let path = sample_path(&law, &mut rng);
        assert_eq!(path.eta(), 0.0);
        assert_eq!(path.zeta(), f64::INFINITY);
        assert_eq!(path.eval(0.5), 0.0);
    }

    #[test]
    fn delayed_plateau_deterministic_components() {
        let law = InfectivityLaw {
            family: LawFamily::DelayedPlateau {
                latency: ScalarDist::Deterministic { value: 2.0 },
                rate: 1.0,
                plateau: ScalarDist::Deterministic { value: 3.0 },
            },
            cap: 1.0,
        };
        let mut rng = substream(7, &[0]);
        let path = sample_path(&law, &mut rng);
        assert_eq!(path.zeta(), 2.0);
        assert_eq!(path.eta(), 5.0);
        assert_eq!(path.eval(1.0), 0.0);
        assert_eq!(path.eval(2.0), 1.0);
        assert_eq!(path.eval(4.999), 1.0);
        assert_eq!(path.eval(5.0), 0.0);
    }

    #[test]
    fn sample_determinism() {
        let law = exp_plateau(0.5, 0.25);
        let p1 = sample_path(&law, &mut substream(99, &[3]));
        let p2 = sample_path(&law, &mut substream(99, &[3]));
        assert_eq!(p1, p2);
    }

    #[test]
    fn closed_form_markov_plateau() {
        // lambda_bar(2) = 0.5 e^{-0.5}, F(2) = 1 - e^{-0.5}
        let law = exp_plateau(0.5, 0.25);
        let grid = TimeGrid::new(2.0, 1.0).unwrap();
        let mc = mean_curves(&law, &grid, None, 0).unwrap();
        assert!(mc.closed_form);
        assert!((mc.lambda_bar[2] - 0.5 * (-0.5f64).exp()).abs() < 1e-12);
        assert!((mc.cdf[2] - (1.0 - (-0.5f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_matches_closed_form() {
        let law = exp_plateau(0.5, 0.25);
        let grid = TimeGrid::new(8.0, 0.5).unwrap();
        let closed = mean_curves(&law, &grid, None, 0).unwrap();
        let mc = mean_curves(&law, &grid, Some(100_000), 12345).unwrap();
        let se = mc.stderr.as_ref().unwrap();
        for i in 0..grid.len() {
            let tol = 4.0 * se[i].max(1e-4);
            assert!(
                (mc.lambda_bar[i] - closed.lambda_bar[i]).abs() <= tol,
                "lambda_bar mismatch at index {i}: {} vs {}",
                mc.lambda_bar[i],
                closed.lambda_bar[i]
            );
            // Binomial standard error for the CDF.
            let p = closed.cdf[i];
            let se_f = (p * (1.0 - p) / 100_000.0).sqrt().max(1e-4);
            assert!((mc.cdf[i] - p).abs() <= 4.0 * se_f);
        }
    }

    #[test]
    fn cdf_is_monotone_and_bounded() {
        let law = InfectivityLaw {
            family: LawFamily::DelayedPlateau {
                latency: ScalarDist::Uniform { min: 0.5, max: 1.5 },
                rate: 0.8,
                plateau: ScalarDist::Gamma {
                    shape: 2.0,
                    scale: 1.0,
                },
            },
            cap: 1.0,
        };
        let grid = TimeGrid::new(10.0, 0.25).unwrap();
        let mc = mean_curves(&law, &grid, Some(20_000), 7).unwrap();
        for w in mc.cdf.windows(2) {
            assert!(w[1] + 1e-12 >= w[0]);
        }
        for (&l, &f) in mc.lambda_bar.iter().zip(&mc.cdf) {
            assert!((0.0..=1.0).contains(&f));
            assert!(l >= 0.0 && l <= law.cap + 1e-12);
        }
    }

    #[test]
    fn mc_samples_zero_is_config_error() {
        let law = exp_plateau(0.5, 0.25);
        let grid = TimeGrid::new(1.0, 0.5).unwrap();
        assert!(mean_curves(&law, &grid, Some(0), 0).is_err());
    }

    #[test]
    fn latency_forces_zero_at_origin() {
        let law = InfectivityLaw {
            family: LawFamily::DelayedPlateau {
                latency: ScalarDist::Deterministic { value: 1.0 },
                rate: 1.0,
                plateau: ScalarDist::Exponential { rate: 1.0 },
            },
            cap: 1.0,
        };
        let grid = TimeGrid::new(1.0, 0.5).unwrap();
        let mc = mean_curves(&law, &grid, None, 0).unwrap();
        assert_eq!(mc.lambda_bar[0], 0.0);
    }
}
