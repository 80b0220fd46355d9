//! Flat containers for sample sets and recorded trajectories.

use crate::error::{Error, Result};

/// n samples of dimension dim, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    dim: usize,
    data: Vec<f64>,
}

impl SampleBatch {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::invalid(
                "SampleBatch::new",
                format!("data length {} is not a multiple of dim {}", data.len(), dim),
            ));
        }
        Ok(SampleBatch { dim, data })
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        SampleBatch {
            dim,
            data: vec![0.0; n * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::Dim {
                    op: "SampleBatch::from_rows",
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        SampleBatch::new(dim, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Per-sample states at every grid node, sample-major:
/// `data[sample][node][dim]` with node indices matching the grid (node 0 is
/// t = 0, node n_nodes - 1 is t = 1).
#[derive(Debug, Clone)]
pub struct Trajectories {
    n_nodes: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Trajectories {
    pub(crate) fn zeros(n_samples: usize, n_nodes: usize, dim: usize) -> Self {
        Trajectories {
            n_nodes,
            dim,
            data: vec![0.0; n_samples * n_nodes * dim],
        }
    }

    pub fn n_samples(&self) -> usize {
        self.data.len() / (self.n_nodes * self.dim)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, sample: usize, node: usize) -> &[f64] {
        let base = (sample * self.n_nodes + node) * self.dim;
        &self.data[base..base + self.dim]
    }

    /// All sample states at one node, as a batch.
    pub fn node_batch(&self, node: usize) -> SampleBatch {
        let n = self.n_samples();
        let mut data = Vec::with_capacity(n * self.dim);
        for s in 0..n {
            data.extend_from_slice(self.state(s, node));
        }
        SampleBatch {
            dim: self.dim,
            data,
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn stride(&self) -> usize {
        self.n_nodes * self.dim
    }
}
