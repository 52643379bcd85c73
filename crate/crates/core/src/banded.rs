//! Symmetric positive-definite banded matrices and their Cholesky factors.

use crate::error::{Error, Result};

/// Lower band of a symmetric matrix: entry `(i, j)` with `0 <= i - j <= bw`
/// lives at `data[i * (bw + 1) + (i - j)]`.
#[derive(Debug, Clone)]
pub struct BandedSpd {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandedSpd {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i >= j && i - j <= self.bw);
        i * (self.bw + 1) + (i - j)
    }

    /// Entry `(i, j)`; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Add `v` to `(i, j)` (and implicitly `(j, i)`).
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.data[i * (self.bw + 1)]
    }

    pub fn set_diag(&mut self, i: usize, v: f64) {
        let k = i * (self.bw + 1);
        self.data[k] = v;
    }

    /// Zero row and column `i` and put `1` on the diagonal.
    pub fn pin(&mut self, i: usize) {
        let lo = i.saturating_sub(self.bw);
        for j in lo..i {
            let k = self.idx(i, j);
            self.data[k] = 0.0;
        }
        let hi = (i + self.bw).min(self.n - 1);
        for r in i + 1..=hi {
            let k = self.idx(r, i);
            self.data[k] = 0.0;
        }
        self.set_diag(i, 1.0);
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            for j in lo..=i {
                let a = self.data[self.idx(i, j)];
                y[i] += a * x[j];
                if j != i {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    /// In-place Cholesky `A = L Lᵀ`.
    pub fn cholesky(mut self) -> Result<BandedCholesky> {
        let n = self.n;
        let bw = self.bw;
        let w = bw + 1;
        let scale = (0..n).map(|i| self.diag(i).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        for j in 0..n {
            let lo = j.saturating_sub(bw);
            let mut d = self.data[j * w];
            for k in lo..j {
                let l = self.data[j * w + (j - k)];
                d -= l * l;
            }
            if !(d > scale * 1e-15) {
                return Err(Error::Singular {
                    condition: if d > 0.0 { scale / d } else { f64::INFINITY },
                    matrix: Vec::new(),
                });
            }
            let ljj = d.sqrt();
            self.data[j * w] = ljj;
            let hi = (j + bw).min(n - 1);
            for i in j + 1..=hi {
                let lo_i = i.saturating_sub(bw).max(lo);
                let mut s = self.data[i * w + (i - j)];
                for k in lo_i..j {
                    s -= self.data[i * w + (i - k)] * self.data[j * w + (j - k)];
                }
                self.data[i * w + (i - j)] = s / ljj;
            }
        }
        Ok(BandedCholesky { factor: self })
    }
}

#[derive(Debug, Clone)]
pub struct BandedCholesky {
    factor: BandedSpd,
}

impl BandedCholesky {
    /// Solve `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let f = &self.factor;
        let n = f.n;
        let bw = f.bw;
        let w = bw + 1;
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = b[i];
            for k in lo..i {
                s -= f.data[i * w + (i - k)] * b[k];
            }
            b[i] = s / f.data[i * w];
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut s = b[i];
            for k in i + 1..=hi {
                s -= f.data[k * w + (k - i)] * b[k];
            }
            b[i] = s / f.data[i * w];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn random_spd(n: usize, bw: usize, seed: u64) -> (BandedSpd, DMatrix<f64>) {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
        };
        let mut a = BandedSpd::zeros(n, bw);
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(bw)..i {
                let v = next();
                a.add(i, j, v);
                dense[(i, j)] += v;
                dense[(j, i)] += v;
            }
            let v = 2.0 * bw as f64 + 1.0 + next();
            a.add(i, i, v);
            dense[(i, i)] += v;
        }
        (a, dense)
    }

    #[test]
    fn solves_match_dense() {
        for (n, bw) in [(1, 0), (5, 1), (40, 7), (30, 29)] {
            let (a, dense) = random_spd(n, bw, 17 + n as u64);
            let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
            let x = a.clone().cholesky().unwrap().solve(&b);
            let ax = a.mul_vec(&x);
            for i in 0..n {
                assert!((ax[i] - b[i]).abs() < 1e-12);
            }
            let xd = dense.lu().solve(&nalgebra::DVector::from_vec(b.clone())).unwrap();
            for i in 0..n {
                assert!((x[i] - xd[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pin_isolates_coordinate() {
        let (mut a, _) = random_spd(10, 3, 5);
        a.pin(4);
        let mut b = vec![1.0; 10];
        b[4] = 0.0;
        let x = a.cholesky().unwrap().solve(&b);
        assert_eq!(x[4], 0.0);
    }

    #[test]
    fn indefinite_is_rejected() {
        let mut a = BandedSpd::zeros(2, 1);
        a.add(0, 0, 1.0);
        a.add(1, 1, 1.0);
        a.add(1, 0, 2.0);
        assert!(matches!(a.cholesky(), Err(Error::Singular { .. })));
    }
}
