//! Boolean observation masks over an `N x M` data matrix.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("mask is {got_rows}x{got_cols} but data is {rows}x{cols}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("column {0} has no observed entries")]
    EmptyColumn(usize),
}

/// `true` marks an observed entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationMask {
    rows: usize,
    cols: usize,
    observed: Vec<bool>,
}

impl ObservationMask {
    pub fn all_observed(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            observed: vec![true; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, observed: Vec<bool>) -> Result<Self, MaskError> {
        if observed.len() != rows * cols {
            return Err(MaskError::ShapeMismatch {
                rows,
                cols,
                got_rows: observed.len() / cols.max(1),
                got_cols: cols,
            });
        }
        Ok(Self { rows, cols, observed })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_observed(&self, r: usize, c: usize) -> bool {
        self.observed[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, observed: bool) {
        self.observed[r * self.cols + c] = observed;
    }

    pub fn observed_rows(&self, c: usize) -> Vec<usize> {
        (0..self.rows).filter(|&r| self.is_observed(r, c)).collect()
    }

    pub fn hidden_rows(&self, c: usize) -> Vec<usize> {
        (0..self.rows).filter(|&r| !self.is_observed(r, c)).collect()
    }

    pub fn hidden_count(&self) -> usize {
        self.observed.iter().filter(|o| !**o).count()
    }

    pub fn hidden_fraction(&self) -> f64 {
        self.hidden_count() as f64 / self.observed.len().max(1) as f64
    }

    pub fn is_fully_observed(&self) -> bool {
        self.observed.iter().all(|o| *o)
    }

    pub fn check_shape(&self, rows: usize, cols: usize) -> Result<(), MaskError> {
        if self.rows != rows || self.cols != cols {
            return Err(MaskError::ShapeMismatch {
                rows,
                cols,
                got_rows: self.rows,
                got_cols: self.cols,
            });
        }
        Ok(())
    }

    /// Fails on the first column without any observed entry.
    pub fn check_columns(&self) -> Result<(), MaskError> {
        for c in 0..self.cols {
            if !(0..self.rows).any(|r| self.is_observed(r, c)) {
                return Err(MaskError::EmptyColumn(c));
            }
        }
        Ok(())
    }
}
