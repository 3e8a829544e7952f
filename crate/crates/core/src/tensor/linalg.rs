//! Cholesky factorisation and triangular solves for small dense SPD systems.

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Factor the `n×n` row-major matrix `a`, reading only its lower triangle.
    pub fn factor(a: &[f64], n: usize) -> Result<Self> {
        assert_eq!(a.len(), n * n);
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i * n + j];
                for p in 0..j {
                    s -= l[i * n + p] * l[j * n + p];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        let diag: Vec<f64> = (0..i).map(|d| l[d * n + d]).collect();
                        return Err(Error::Numerical(format!(
                            "matrix not positive definite at pivot {i} of {n} (pivot value {s:.3e}); {}",
                            condition_report(&diag)
                        )));
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Self { n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Rough condition estimate `(max L_ii / min L_ii)^2`.
    pub fn condition_estimate(&self) -> f64 {
        let diag = (0..self.n).map(|i| self.lower[i * self.n + i]);
        let (lo, hi) = diag.fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d), hi.max(d)));
        (hi / lo).powi(2)
    }

    /// Solve `A X = B` in place, `B` being `n×m` row-major.
    pub fn solve_in_place(&self, b: &mut [f64], m: usize) {
        let n = self.n;
        assert_eq!(b.len(), n * m);
        let l = &self.lower;
        // forward: L y = b
        for i in 0..n {
            for p in 0..i {
                let lip = l[i * n + p];
                if lip != 0.0 {
                    for c in 0..m {
                        b[i * m + c] -= lip * b[p * m + c];
                    }
                }
            }
            let d = l[i * n + i];
            for c in 0..m {
                b[i * m + c] /= d;
            }
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            for p in i + 1..n {
                let lpi = l[p * n + i];
                if lpi != 0.0 {
                    for c in 0..m {
                        b[i * m + c] -= lpi * b[p * m + c];
                    }
                }
            }
            let d = l[i * n + i];
            for c in 0..m {
                b[i * m + c] /= d;
            }
        }
    }

    pub fn solve(&self, b: &[f64], m: usize) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x, m);
        x
    }
}

fn condition_report(diag: &[f64]) -> String {
    if diag.is_empty() {
        return "no stable pivots".to_string();
    }
    let lo = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = diag.iter().cloned().fold(0.0, f64::max);
    format!("condition of leading block >= {:.3e}", (hi / lo).powi(2))
}
