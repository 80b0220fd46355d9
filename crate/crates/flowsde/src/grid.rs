//! Discretization grids on [0, 1].
//!
//! A `TimeGrid` holds the node times 0 = t_0 < t_1 < ... < t_N = 1 of a
//! rollout. Samplers traverse it from t_N = 1 down to t_0 = 0; step k is the
//! transition from node k to node k - 1.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with nodes t_i = i / n_steps.
    pub fn uniform(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::invalid("TimeGrid::uniform", "need at least one step"));
        }
        let n = n_steps as f64;
        let mut nodes: Vec<f64> = (0..=n_steps).map(|i| i as f64 / n).collect();
        // i/N rounds; the endpoints must be exact.
        nodes[0] = 0.0;
        nodes[n_steps] = 1.0;
        Ok(TimeGrid { nodes })
    }

    /// Arbitrary strictly increasing nodes running from exactly 0 to exactly 1.
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::invalid("TimeGrid::from_nodes", "need at least two nodes"));
        }
        if nodes[0] != 0.0 || *nodes.last().unwrap() != 1.0 {
            return Err(Error::invalid(
                "TimeGrid::from_nodes",
                format!(
                    "grid must run from 0 to 1, got [{}, {}]",
                    nodes[0],
                    nodes.last().unwrap()
                ),
            ));
        }
        for w in nodes.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(Error::invalid(
                    "TimeGrid::from_nodes",
                    format!("nodes must increase strictly, got {} then {}", w[0], w[1]),
                ));
            }
        }
        Ok(TimeGrid { nodes })
    }

    pub fn n_steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    /// Steps in sampling order: (step index k, t = t_k, t' = t_{k-1}) for
    /// k = N, ..., 1.
    pub fn steps_desc(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        (1..self.nodes.len())
            .rev()
            .map(move |k| (k, self.nodes[k], self.nodes[k - 1]))
    }
}
