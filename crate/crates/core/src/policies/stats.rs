use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Running second moments `Σ_τ Y_τ Y_τᵀ` of a history.
///
/// Both the leave-one-out regressions and the EM updates depend on the
/// history only through this Gram matrix and the row count, so a sweep over
/// increasing `t` costs a single pass over the data.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    rows: usize,
    gram: DMatrix<f64>,
}

impl SufficientStats {
    pub fn new(num_workers: usize) -> Self {
        Self {
            rows: 0,
            gram: DMatrix::zeros(num_workers, num_workers),
        }
    }

    pub fn from_rows(rows: &DMatrix<f64>) -> Self {
        let mut s = Self::new(rows.ncols());
        s.extend(rows, 0, rows.nrows()).expect("columns match");
        s
    }

    /// Statistics with a given Gram matrix, e.g. `n · S` for the population
    /// moments of `n` rounds.
    pub fn from_gram(rows: usize, gram: DMatrix<f64>) -> Result<Self> {
        if !gram.is_square() {
            return Err(Error::NotSquare {
                rows: gram.nrows(),
                cols: gram.ncols(),
            });
        }
        Ok(Self { rows, gram })
    }

    /// Adds rows `start..end` of `rows`.
    pub fn extend(&mut self, rows: &DMatrix<f64>, start: usize, end: usize) -> Result<()> {
        if rows.ncols() != self.num_workers() {
            return Err(Error::DimensionMismatch {
                expected: self.num_workers(),
                found: rows.ncols(),
            });
        }
        if start > end || end > rows.nrows() {
            return Err(Error::IndexOutOfRange {
                index: end,
                dim: rows.nrows(),
            });
        }
        if end > start {
            let block = rows.rows(start, end - start);
            self.gram.gemm_tr(1.0, &block, &block, 1.0);
            self.rows += end - start;
        }
        Ok(())
    }

    pub fn push(&mut self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.num_workers() {
            return Err(Error::DimensionMismatch {
                expected: self.num_workers(),
                found: y.len(),
            });
        }
        self.gram.ger(1.0, y, y, 1.0);
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn num_workers(&self) -> usize {
        self.gram.nrows()
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn incremental_matches_batch() {
        let rows = DMatrix::from_fn(9, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let batch = SufficientStats::from_rows(&rows);
        let mut inc = SufficientStats::new(3);
        inc.extend(&rows, 0, 4).unwrap();
        inc.extend(&rows, 4, 4).unwrap();
        for r in 4..9 {
            inc.push(&rows.row(r).transpose()).unwrap();
        }
        assert_eq!(inc.rows(), 9);
        assert!((inc.gram() - batch.gram()).amax() < 1e-12);
        assert!((batch.gram() - rows.transpose() * &rows).amax() < 1e-12);
        assert!(inc.extend(&rows, 5, 10).is_err());
        assert!(inc.push(&DVector::zeros(2)).is_err());
    }
}
