use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Mat;

/// Uniform grid `t_i = i·T/N` on `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Invalid(format!("horizon must be positive, got {horizon}")));
        }
        if steps < 2 {
            return Err(Error::Invalid(format!("grid needs at least 2 steps, got {steps}")));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn h(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Number of nodes, `N + 1`.
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.horizon / self.steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.node(i)).collect()
    }

    /// Midpoint of the step `[t_j, t_{j+1}]`.
    pub fn midpoint(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.horizon / self.steps as f64
    }

    /// Nodes and midpoints, `2N + 1` points.
    pub fn half_nodes(&self) -> Vec<f64> {
        (0..=2 * self.steps)
            .map(|i| {
                if i == 2 * self.steps {
                    self.horizon
                } else {
                    i as f64 * self.horizon / (2 * self.steps) as f64
                }
            })
            .collect()
    }

    /// Index of the node nearest to `t`, clamped into the grid.
    pub fn nearest(&self, t: f64) -> usize {
        let i = (t / self.h()).round();
        if i <= 0.0 {
            0
        } else {
            (i as usize).min(self.steps)
        }
    }
}

/// One matrix per grid node, all of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixPath {
    pub grid: TimeGrid,
    pub values: Vec<Mat>,
}

/// Feedback gain `Θ(t_i)`, one `k×n` matrix per node.
pub type Strategy = MatrixPath;

impl MatrixPath {
    pub fn new(grid: TimeGrid, values: Vec<Mat>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Invalid(format!(
                "path has {} values for {} grid nodes",
                values.len(),
                grid.len()
            )));
        }
        let shape = values[0].shape();
        if let Some(bad) = values.iter().find(|v| v.shape() != shape) {
            return Err(Error::dim("matrix path", shape, bad.shape()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("matrix path has non-finite entries".into()));
        }
        Ok(MatrixPath { grid, values })
    }

    pub fn constant(grid: TimeGrid, value: Mat) -> Self {
        MatrixPath {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    pub fn at(&self, i: usize) -> &Mat {
        &self.values[i]
    }

    /// Largest spectral norm over the nodes.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(Mat::spectral_norm).fold(0.0, f64::max)
    }

    /// Largest entrywise difference to another path on the same grid.
    pub fn max_abs_diff(&self, other: &MatrixPath) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).max_abs())
            .fold(0.0, f64::max)
    }

    pub fn scale(&self, a: f64) -> MatrixPath {
        MatrixPath {
            grid: self.grid,
            values: self.values.iter().map(|v| v.scale(a)).collect(),
        }
    }
}
