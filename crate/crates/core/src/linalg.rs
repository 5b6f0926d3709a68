//! Tridiagonal systems.

use crate::error::{Error, Result};

/// LU factors of a tridiagonal matrix, reusable for many right-hand sides.
///
/// Row `i` reads `lower[i] * y[i-1] + diag[i] * y[i] + upper[i] * y[i+1]`;
/// `lower[0]` and `upper[n-1]` are ignored.
#[derive(Debug, Clone)]
pub(crate) struct TridiagLu {
    lower: Vec<f64>,
    inv_pivot: Vec<f64>,
    upper_mod: Vec<f64>,
}

impl TridiagLu {
    pub(crate) fn factor(lower: &[f64], diag: &[f64], upper: &[f64]) -> Result<Self> {
        let n = diag.len();
        if lower.len() != n || upper.len() != n || n == 0 {
            return Err(Error::Numeric("tridiagonal band length mismatch".into()));
        }
        let mut inv_pivot = vec![0.0; n];
        let mut upper_mod = vec![0.0; n];
        let mut prev_upper = 0.0;
        for i in 0..n {
            let pivot = if i == 0 {
                diag[0]
            } else {
                diag[i] - lower[i] * prev_upper
            };
            if !pivot.is_finite() || pivot.abs() < 1e-300 {
                return Err(Error::Numeric(format!("singular tridiagonal pivot at row {i}")));
            }
            inv_pivot[i] = 1.0 / pivot;
            upper_mod[i] = if i + 1 < n { upper[i] * inv_pivot[i] } else { 0.0 };
            prev_upper = upper_mod[i];
        }
        Ok(Self {
            lower: lower.to_vec(),
            inv_pivot,
            upper_mod,
        })
    }

    /// Solves in place: `rhs` is overwritten with the solution.
    pub(crate) fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = self.inv_pivot.len();
        debug_assert_eq!(rhs.len(), n);
        rhs[0] *= self.inv_pivot[0];
        for i in 1..n {
            rhs[i] = (rhs[i] - self.lower[i] * rhs[i - 1]) * self.inv_pivot[i];
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= self.upper_mod[i] * rhs[i + 1];
        }
    }
}
