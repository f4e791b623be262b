use crate::{Error, Result};

/// Dense row-major matrix of `f32` values.
///
/// This is deliberately minimal: the models in this crate are small enough
/// that hand-written loops beat pulling in a linear-algebra stack, and
/// keeping the storage layout explicit makes the artifact formats trivial.
/// Reductions that feed probabilities are done in `f64` by the callers.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// All-zeros matrix. `rows` and `cols` must both be non-zero.
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::domain(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        Ok(Matrix { rows, cols, data: vec![0.0; rows * cols] })
    }

    /// Wraps an existing row-major buffer, validating shape and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::domain(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::domain(format!(
                "matrix buffer has {} entries, expected {}x{} = {}",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "matrix entry {bad} is not finite: {}",
                data[bad]
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    /// Writes one entry. Finiteness is the caller's responsibility on this
    /// hot path; use [`Matrix::validate_finite`] at trust boundaries.
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        debug_assert!(r < self.rows);
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        debug_assert!(r < self.rows);
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Re-checks the finiteness invariant, for use after bulk mutation or
    /// file ingestion.
    pub fn validate_finite(&self) -> Result<()> {
        if let Some(bad) = self.data.iter().position(|v| !v.is_finite()) {
            let (r, c) = (bad / self.cols, bad % self.cols);
            return Err(Error::numeric(format!(
                "matrix entry ({r}, {c}) is not finite: {}",
                self.data[bad]
            )));
        }
        Ok(())
    }

    /// Copies row `r` into an `f64` buffer (the usual first step before any
    /// probability computation).
    pub fn row_f64(&self, r: usize) -> Vec<f64> {
        self.row(r).iter().map(|&v| v as f64).collect()
    }

    /// Stacks the given rows (in order) into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::domain("cannot gather zero rows".to_string()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::domain(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_vec(indices.len(), self.cols, data)
    }
}
