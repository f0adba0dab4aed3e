use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::net::Network;

/// Dense row-major covariate matrix, one row per individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl Covariates {
    pub fn new(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_rows * n_cols {
            return Err(invalid(format!(
                "covariate buffer has {} entries, expected {n_rows} x {n_cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("covariates must be finite"));
        }
        Ok(Self { n_rows, n_cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(invalid("ragged covariate rows"));
        }
        Self::new(rows.len(), n_cols, rows.concat())
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            data: vec![0.0; n_rows * n_cols],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.get(i, j)).collect()
    }

    /// Rows `rows` in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.n_cols);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        Self {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            data,
        }
    }

    /// Columns `cols` in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.n_rows * cols.len());
        for i in 0..self.n_rows {
            data.extend(cols.iter().map(|&j| self.get(i, j)));
        }
        Self {
            n_rows: self.n_rows,
            n_cols: cols.len(),
            data,
        }
    }

    pub fn is_constant_column(&self, j: usize) -> bool {
        (1..self.n_rows).all(|i| self.get(i, j) == self.get(0, j))
    }
}

/// One observed cross-section: network, covariates, outcomes at horizon `S`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub network: Network,
    pub x: Covariates,
    pub y: Vec<bool>,
    pub horizon: f64,
}

impl Sample {
    pub fn new(network: Network, x: Covariates, y: Vec<bool>, horizon: f64) -> Result<Self> {
        if x.n_rows() != network.len() || y.len() != network.len() {
            return Err(invalid(format!(
                "size mismatch: network {}, covariates {}, outcomes {}",
                network.len(),
                x.n_rows(),
                y.len()
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid(format!("horizon must be positive and finite, got {horizon}")));
        }
        Ok(Self {
            network,
            x,
            y,
            horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_adopters(&self) -> usize {
        self.y.iter().filter(|&&v| v).count()
    }

    /// Per-component views, in the network's component order.
    pub fn component_data(&self) -> Vec<ComponentData> {
        self.network
            .components()
            .iter()
            .map(|members| ComponentData {
                network: self.network.induced(members),
                x: self.x.select_rows(members),
                y: members.iter().map(|&i| self.y[i]).collect(),
                horizon: self.horizon,
                members: members.clone(),
            })
            .collect()
    }
}

/// The individuals of one component with local labels `0..n`.
#[derive(Debug, Clone)]
pub struct ComponentData {
    pub network: Network,
    pub x: Covariates,
    pub y: Vec<bool>,
    pub horizon: f64,
    /// Global labels of the local individuals.
    pub members: Vec<usize>,
}

impl ComponentData {
    /// Standalone component; `members` become `0..n`.
    pub fn new(network: Network, x: Covariates, y: Vec<bool>, horizon: f64) -> Result<Self> {
        let sample = Sample::new(network, x, y, horizon)?;
        Ok(Self {
            members: (0..sample.len()).collect(),
            network: sample.network,
            x: sample.x,
            y: sample.y,
            horizon: sample.horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Local indices with `y = 1`, ascending.
    pub fn adopters(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.y[i]).collect()
    }

    pub fn n_adopters(&self) -> usize {
        self.y.iter().filter(|&&v| v).count()
    }

    pub fn with_outcomes(&self, y: Vec<bool>) -> Self {
        Self { y, ..self.clone() }
    }
}
