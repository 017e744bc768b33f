//! Symmetric-matrix helpers on top of nalgebra's eigendecomposition.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigenvalues below this are clamped before inversion or square roots.
pub const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn new(m: &DMatrix<f64>) -> Self {
        let e = SymmetricEigen::new(m.clone());
        Self {
            values: e.eigenvalues,
            vectors: e.eigenvectors,
        }
    }

    /// `Q f(Λ) Qᵀ`
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let s = f(self.values[j]);
            scaled.column_mut(j).scale_mut(s);
        }
        &scaled * self.vectors.transpose()
    }

    /// Inverse of `M + shift·I`, with the shifted spectrum floored.
    pub fn shifted_inverse(&self, shift: f64) -> DMatrix<f64> {
        self.map(|l| 1.0 / (l + shift).max(EIGEN_FLOOR))
    }

    pub fn sqrt(&self) -> DMatrix<f64> {
        self.map(|l| l.max(0.0).sqrt())
    }

    pub fn log_det_shifted(&self, shift: f64) -> f64 {
        self.values.iter().map(|l| (l + shift).max(EIGEN_FLOOR).ln()).sum()
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    SymEigen::new(&symmetrize(m)).sqrt()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shifted_inverse_matches_direct_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let e = SymEigen::new(&m);
        let inv = e.shifted_inverse(0.25);
        let shifted = &m + DMatrix::identity(2, 2) * 0.25;
        let prod = shifted * inv;
        assert!((prod - DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-12);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = psd_sqrt(&m);
        assert!((&r * &r - m).abs().max() < 1e-12);
    }
}
