//! Small dense square matrices (patch dimension L is tiny, typically 2-5).

use crate::error::{Error, Result};

/// Row-major square matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct SqMat {
    n: usize,
    data: Vec<f64>,
}

impl SqMat {
    pub fn zeros(n: usize) -> Self {
        SqMat {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::argument(format!(
                    "matrix row has {} entries, expected {}",
                    r.len(),
                    n
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(SqMat { n, data })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Exact (bitwise) identity test.
    pub fn is_identity(&self) -> bool {
        let n = self.n;
        self.data
            .iter()
            .enumerate()
            .all(|(idx, &v)| v == if idx / n == idx % n { 1.0 } else { 0.0 })
    }

    pub fn copy_from(&mut self, other: &SqMat) {
        debug_assert_eq!(self.n, other.n);
        self.data.copy_from_slice(&other.data);
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn transpose(&self) -> SqMat {
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[j * n + i] = self.data[i * n + j];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &SqMat) -> SqMat {
        let n = self.n;
        debug_assert_eq!(n, rhs.n);
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                let rr = &rhs.data[k * n..(k + 1) * n];
                let or = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    or[j] += a * rr[j];
                }
            }
        }
        out
    }

    /// `out = self * rhs`, writing into a preallocated matrix (hot path of the
    /// limit solver's transition-column recursion).
    pub fn matmul_into(&self, rhs: &SqMat, out: &mut SqMat) {
        let n = self.n;
        out.data.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                let rr = &rhs.data[k * n..(k + 1) * n];
                let or = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    or[j] += a * rr[j];
                }
            }
        }
    }

    /// Matrix-vector product `self * v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.data[i * n + j] * v[j];
            }
            out[i] = acc;
        }
        out
    }

    pub fn scale(&self, s: f64) -> SqMat {
        SqMat {
            n: self.n,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, rhs: &SqMat) -> SqMat {
        SqMat {
            n: self.n,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn axpy(&mut self, s: f64, rhs: &SqMat) {
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += s * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    fn norm_inf(&self) -> f64 {
        let n = self.n;
        (0..n)
            .map(|i| self.row(i).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Matrix exponential by scaling-and-squaring with a Taylor series.
    ///
    /// The 1x1 case returns `exp` of the entry directly so that scalar and
    /// matrix code paths agree bitwise.
    pub fn expm(&self) -> SqMat {
        let n = self.n;
        if n == 1 {
            let mut m = Self::zeros(1);
            m.data[0] = self.data[0].exp();
            return m;
        }
        let norm = self.norm_inf();
        let squarings = if norm > 0.5 {
            (norm / 0.5).log2().ceil().max(0.0) as u32
        } else {
            0
        };
        let a = self.scale(0.5f64.powi(squarings as i32));
        // Taylor series of exp(a); terms decay fast since ||a|| <= 0.5.
        let mut result = Self::identity(n);
        let mut term = Self::identity(n);
        for k in 1..=24 {
            term = term.matmul(&a).scale(1.0 / k as f64);
            result = result.add(&term);
            if term.max_abs() < 1e-300 {
                break;
            }
        }
        for _ in 0..squarings {
            result = result.matmul(&result);
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_matches_two_state_closed_form() {
        // Generator [[-1, 1], [1, -1]]: exp(tQ) has diagonal (1+e^{-2t})/2.
        let q = SqMat::from_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let e = q.scale(1.0).expm();
        let expected = (1.0 + (-2.0f64).exp()) / 2.0;
        assert!((e.get(0, 0) - expected).abs() < 1e-13);
        assert!((e.get(0, 1) - (1.0 - expected)).abs() < 1e-13);
    }

    #[test]
    fn expm_scalar_is_exp() {
        let mut m = SqMat::zeros(1);
        m.set(0, 0, -0.731);
        assert_eq!(m.expm().get(0, 0), (-0.731f64).exp());
    }

    #[test]
    fn matmul_identity() {
        let q = SqMat::from_rows(&[vec![0.3, 0.7], vec![0.9, 0.1]]).unwrap();
        let i = SqMat::identity(2);
        assert_eq!(q.matmul(&i), q);
    }
}
