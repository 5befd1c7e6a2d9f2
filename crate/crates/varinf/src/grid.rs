//! Uniform time grids used by the deterministic solvers and exporters.

use crate::error::{Error, Result};

/// Uniform grid `t_i = i * step`, `i = 0..=n`, covering `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    step: f64,
    n: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::argument(format!(
                "grid step must be > 0, got {step}"
            )));
        }
        if !(horizon >= 0.0) {
            return Err(Error::argument(format!(
                "horizon must be >= 0, got {horizon}"
            )));
        }
        let n = (horizon / step).round().max(1.0) as usize;
        Ok(TimeGrid { step, n })
    }

    #[inline]
    pub fn step(&self) -> f64 {
        self.step
    }

    /// Number of steps; the grid has `steps() + 1` points.
    #[inline]
    pub fn steps(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n + 1
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.step
    }

    pub fn horizon(&self) -> f64 {
        self.t(self.n)
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(|i| self.t(i))
    }

    /// Index of the last grid point `<= t` (clamped to the grid).
    pub fn floor_index(&self, t: f64) -> usize {
        if t <= 0.0 {
            return 0;
        }
        ((t / self.step).floor() as usize).min(self.n)
    }

    /// Linear interpolation of a grid function at time `t` (clamped).
    pub fn interp(&self, values: &[f64], t: f64) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        if t <= 0.0 {
            return values[0];
        }
        if t >= self.horizon() {
            return values[self.n];
        }
        let x = t / self.step;
        let i = (x.floor() as usize).min(self.n - 1);
        let w = x - i as f64;
        values[i] * (1.0 - w) + values[i + 1] * w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interp_is_exact_at_nodes_and_linear_between() {
        let g = TimeGrid::new(1.0, 0.25).unwrap();
        let v: Vec<f64> = g.times().map(|t| 2.0 * t).collect();
        assert_eq!(g.interp(&v, 0.5), 1.0);
        assert!((g.interp(&v, 0.3) - 0.6).abs() < 1e-15);
        assert_eq!(g.interp(&v, 2.0), 2.0);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(TimeGrid::new(1.0, 0.0).is_err());
        assert!(TimeGrid::new(1.0, -0.5).is_err());
    }
}
