use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observation times and a `d × n` matrix of noisy state measurements
/// (`values[(i, j)]` is state `i` at time `times[j]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    times: Vec<f64>,
    values: DMatrix<f64>,
}

impl Dataset {
    /// Times must be finite, non-negative and non-decreasing; ties are
    /// allowed.
    pub fn new(times: Vec<f64>, values: DMatrix<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidArgument("dataset has no observations".into()));
        }
        if values.ncols() != times.len() || values.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} times but a {}x{} value matrix",
                times.len(),
                values.nrows(),
                values.ncols()
            )));
        }
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::InvalidArgument("times must be finite and non-negative".into()));
        }
        if let Some(j) = times.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument(format!("times decrease at index {}", j + 1)));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite observation".into()));
        }
        Ok(Self { times, values })
    }

    /// Builds a dataset from per-state rows.
    pub fn from_rows(times: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self> {
        let n = times.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch("ragged observation rows".into()));
        }
        let values = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
        Self::new(times, values)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn dim_state(&self) -> usize {
        self.values.nrows()
    }

    /// Largest observation time.
    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn observation(&self, j: usize) -> Vec<f64> {
        self.values.column(j).iter().copied().collect()
    }

    /// Keeps the observations whose indices satisfy `keep`.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Result<Self> {
        let idx: Vec<usize> = (0..self.n()).filter(|&j| keep(j)).collect();
        let times = idx.iter().map(|&j| self.times[j]).collect();
        let values = DMatrix::from_fn(self.dim_state(), idx.len(), |i, k| self.values[(i, idx[k])]);
        Self::new(times, values)
    }

    /// Dataset on `τ = t / scale`.
    pub fn rescale_time(&self, scale: f64) -> Result<Self> {
        Self::new(self.times.iter().map(|t| t / scale).collect(), self.values.clone())
    }
}
