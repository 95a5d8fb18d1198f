//! Time partitions of `[0, T]` and the trapezoidal quadrature helpers used everywhere a
//! `ds`-integral appears. Stochastic (`dW`) sums are always left-endpoint and live with the
//! solvers; deterministic time integrals are always trapezoidal so that solvers and
//! diagnostics measure residuals under one shared convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance under which a grid counts as uniform.
const UNIFORM_TOL: f64 = 1e-12;

/// A partition `0 = t_0 < t_1 < ... < t_N = T` of the time interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with `n_steps` steps on `[0, horizon]`.
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::Config(format!(
                "time horizon must be positive and finite, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        let nodes = (0..=n_steps)
            .map(|i| horizon * i as f64 / n_steps as f64)
            .collect();
        Ok(Self { nodes })
    }

    /// Grid from explicit nodes; they must start at 0 and increase strictly.
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Config("time grid needs at least two nodes".into()));
        }
        if nodes[0] != 0.0 {
            return Err(Error::Config(format!(
                "time grid must start at 0, got {}",
                nodes[0]
            )));
        }
        for w in nodes.windows(2) {
            if !(w[1].is_finite() && w[1] > w[0]) {
                return Err(Error::Config(format!(
                    "time grid nodes must increase strictly, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { nodes })
    }

    /// Final time `T`.
    #[inline]
    pub fn horizon(&self) -> f64 {
        *self.nodes.last().expect("grid is non-empty")
    }

    /// Number of steps `N`.
    #[inline]
    pub fn n_steps(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Number of nodes `N + 1`.
    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Node `t_i`.
    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    /// All nodes.
    #[inline]
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Step `t_{j+1} - t_j`.
    #[inline]
    pub fn step(&self, j: usize) -> f64 {
        self.nodes[j + 1] - self.nodes[j]
    }

    /// Whether all steps agree to a relative `1e-12`.
    pub fn is_uniform(&self) -> bool {
        let mean = self.horizon() / self.n_steps() as f64;
        self.nodes
            .windows(2)
            .all(|w| ((w[1] - w[0]) - mean).abs() <= UNIFORM_TOL * mean.max(1.0))
    }

    /// Trapezoidal weights for `INT_{t_i}^{T} . ds`, aligned with nodes `i..=N`.
    ///
    /// Degenerate tail (`i == N`) yields the single weight `0`.
    pub fn trapezoid_tail_weights(&self, i: usize) -> Vec<f64> {
        let n = self.n_steps();
        assert!(i <= n, "tail start {i} out of range (N = {n})");
        let mut w = vec![0.0; n + 1 - i];
        for j in i..n {
            let h = self.step(j);
            w[j - i] += 0.5 * h;
            w[j + 1 - i] += 0.5 * h;
        }
        w
    }

    /// Trapezoidal weights for `INT_0^T . dt`, aligned with all nodes.
    pub fn trapezoid_full_weights(&self) -> Vec<f64> {
        self.trapezoid_tail_weights(0)
    }

    /// Trapezoidal value of `INT_0^T f dt` for node samples produced by `f(i)`.
    pub fn trapezoid(&self, f: impl Fn(usize) -> f64) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.n_steps() {
            acc += 0.5 * self.step(j) * (f(j) + f(j + 1));
        }
        acc
    }

    /// Cumulative trapezoid `F(t_i) = INT_0^{t_i} f dt` for node samples.
    pub fn cumulative_trapezoid(&self, samples: &[f64]) -> Vec<f64> {
        assert_eq!(samples.len(), self.n_nodes(), "one sample per node");
        let mut acc = vec![0.0; self.n_nodes()];
        for j in 0..self.n_steps() {
            acc[j + 1] = acc[j] + 0.5 * self.step(j) * (samples[j] + samples[j + 1]);
        }
        acc
    }
}
