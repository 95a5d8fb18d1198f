//! Path ensembles and the one-/two-parameter process tables the solvers operate on.
//!
//! Storage layout is node-major: for a fixed node (or node pair) all paths are contiguous.
//! Every hot loop in the crate — regression targets, driver evaluation, residual sums —
//! reads "all paths at one slice", so this layout keeps them linear scans.

use crate::error::{Error, Result};
use crate::model::TimeGrid;

/// Default cap on a single allocation request (two-parameter tables dominate).
///
/// `M * (N+1)^2 * m * d` doubles at the documented desk scale (M = 5e4, N = 64, m = d = 1)
/// is ~1.7 GiB, which this budget admits with headroom for the rest of the solver state.
pub const DEFAULT_MEMORY_BUDGET_BYTES: usize = 3 << 30;

fn checked_alloc(elements: usize, what: &str, budget: usize) -> Result<Vec<f64>> {
    let bytes = elements.checked_mul(8).ok_or_else(|| {
        Error::Capacity(format!("{what}: element count {elements} overflows"))
    })?;
    if bytes > budget {
        return Err(Error::Capacity(format!(
            "{what}: {bytes} bytes exceed the {budget}-byte memory budget"
        )));
    }
    Ok(vec![0.0; elements])
}

/// A Monte Carlo ensemble of discretised `d`-dimensional Brownian paths.
///
/// Increments `dW[j]` and node values `W[j]` are stored so that
/// `W[p][j+1][k] == W[p][j][k] + dW[p][j][k]` holds exactly in floating point: the node
/// values are built once by that very summation and never recomputed.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    dim: usize,
    seed: u64,
    /// Node values, laid out `[node j][path p][component k]`, `j = 0..=N`.
    w: Vec<f64>,
    /// Increments, laid out `[step j][path p][component k]`, `j = 0..N`.
    dw: Vec<f64>,
}

impl PathEnsemble {
    /// Build an ensemble from raw increments (node-major layout, `[j][p][k]`).
    ///
    /// Node values are produced by exact telescoping per path.
    pub(crate) fn from_increments(
        grid: TimeGrid,
        n_paths: usize,
        dim: usize,
        seed: u64,
        dw: Vec<f64>,
        budget: usize,
    ) -> Result<Self> {
        let n = grid.n_steps();
        assert_eq!(dw.len(), n * n_paths * dim, "increment table size");
        let mut w = checked_alloc((n + 1) * n_paths * dim, "path ensemble nodes", budget)?;
        let slice = n_paths * dim;
        for j in 0..n {
            let (done, rest) = w.split_at_mut((j + 1) * slice);
            let prev = &done[j * slice..];
            let next = &mut rest[..slice];
            let inc = &dw[j * slice..(j + 1) * slice];
            for idx in 0..slice {
                next[idx] = prev[idx] + inc[idx];
            }
        }
        Ok(Self {
            grid,
            n_paths,
            dim,
            seed,
            w,
            dw,
        })
    }

    #[inline]
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    #[inline]
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// Brownian dimension `d`.
    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// All node values at node `j`: `n_paths * dim` entries, path-major.
    #[inline]
    pub fn w_slice(&self, j: usize) -> &[f64] {
        let s = self.n_paths * self.dim;
        &self.w[j * s..(j + 1) * s]
    }

    /// All increments over `[t_j, t_{j+1})`: `n_paths * dim` entries, path-major.
    #[inline]
    pub fn dw_slice(&self, j: usize) -> &[f64] {
        let s = self.n_paths * self.dim;
        &self.dw[j * s..(j + 1) * s]
    }

    /// `W_k(t_j)` on path `p`.
    #[inline]
    pub fn w_at(&self, j: usize, p: usize, k: usize) -> f64 {
        self.w[(j * self.n_paths + p) * self.dim + k]
    }

    /// `W_k(t_{j+1}) - W_k(t_j)` on path `p`.
    #[inline]
    pub fn dw_at(&self, j: usize, p: usize, k: usize) -> f64 {
        self.dw[(j * self.n_paths + p) * self.dim + k]
    }

    /// View of one stored path.
    #[inline]
    pub fn path(&self, p: usize) -> PathRef<'_> {
        PathRef::Ensemble { ens: self, p }
    }
}

/// Read access to one Brownian trajectory, either stored in an ensemble or synthesised
/// (e.g. the hybrid past/future paths the nested Monte Carlo oracle builds).
#[derive(Clone, Copy)]
pub enum PathRef<'a> {
    Ensemble { ens: &'a PathEnsemble, p: usize },
    /// Owned node values, `[node j][component k]`, plus the dimension.
    Owned { w: &'a [f64], dim: usize },
}

impl PathRef<'_> {
    /// `W_k(t_j)` along this trajectory.
    #[inline]
    pub fn w(&self, j: usize, k: usize) -> f64 {
        match self {
            PathRef::Ensemble { ens, p } => ens.w_at(j, *p, k),
            PathRef::Owned { w, dim } => w[j * dim + k],
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        match self {
            PathRef::Ensemble { ens, .. } => ens.dim(),
            PathRef::Owned { dim, .. } => *dim,
        }
    }
}

/// One-parameter process table: values `X(t_i)` per path and component,
/// laid out `[node i][path p][component c]`.
#[derive(Debug, Clone)]
pub struct Process1P {
    values: Vec<f64>,
    n_nodes: usize,
    n_paths: usize,
    dim_m: usize,
    /// Producer's claim that slice `i` is `F_{t_i}`-measurable (checkable via `check_adapted`).
    pub adapted: bool,
}

impl Process1P {
    pub fn zeros(n_nodes: usize, n_paths: usize, dim_m: usize, adapted: bool) -> Self {
        Self {
            values: vec![0.0; n_nodes * n_paths * dim_m],
            n_nodes,
            n_paths,
            dim_m,
            adapted,
        }
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    #[inline]
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// Value dimension `m`.
    #[inline]
    pub fn dim_m(&self) -> usize {
        self.dim_m
    }

    /// All values at node `i`: `n_paths * dim_m` entries, path-major.
    #[inline]
    pub fn slice(&self, i: usize) -> &[f64] {
        let s = self.n_paths * self.dim_m;
        &self.values[i * s..(i + 1) * s]
    }

    #[inline]
    pub fn slice_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.n_paths * self.dim_m;
        &mut self.values[i * s..(i + 1) * s]
    }

    #[inline]
    pub fn at(&self, i: usize, p: usize, c: usize) -> f64 {
        self.values[(i * self.n_paths + p) * self.dim_m + c]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, p: usize, c: usize) -> &mut f64 {
        &mut self.values[(i * self.n_paths + p) * self.dim_m + c]
    }

    /// The `m` components at node `i`, path `p`, as one contiguous slice.
    #[inline]
    pub fn at_slice(&self, i: usize, p: usize) -> &[f64] {
        let o = (i * self.n_paths + p) * self.dim_m;
        &self.values[o..o + self.dim_m]
    }

    /// Mean over paths of component `c` at node `i`.
    pub fn path_mean(&self, i: usize, c: usize) -> f64 {
        let s = self.slice(i);
        let m = self.dim_m;
        let mut acc = 0.0;
        for p in 0..self.n_paths {
            acc += s[p * m + c];
        }
        acc / self.n_paths as f64
    }

    /// Population standard deviation over paths of component `c` at node `i`.
    pub fn path_sd(&self, i: usize, c: usize) -> f64 {
        let mean = self.path_mean(i, c);
        let s = self.slice(i);
        let m = self.dim_m;
        let mut acc = 0.0;
        for p in 0..self.n_paths {
            let d = s[p * m + c] - mean;
            acc += d * d;
        }
        (acc / self.n_paths as f64).sqrt()
    }

    /// Checks every entry is finite.
    pub fn validate_finite(&self, what: &str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Precondition(format!("{what} contains non-finite values")))
        }
    }

    /// Raw storage, for workers that split the table into disjoint node slices.
    #[inline]
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Which part of the `(t_i, s_j)` square a two-parameter table covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainMode {
    /// Only `j >= i` (the region the adapted solver identifies).
    UpperTriangle,
    /// The full square (upper triangle plus the martingale extension below the diagonal).
    FullSquare,
}

/// Two-parameter process table: values `Z(t_i, s_j)` per path, an `m x d` matrix per entry,
/// laid out `[row i][column j][path p][entry c*d + k]`.
///
/// Storage is always the dense `(N+1)^2` block square — the honest `O(M N^2 m d)` memory
/// cost of carrying a two-parameter integrand — and `domain` records which half is meaningful.
#[derive(Debug, Clone)]
pub struct Process2P {
    values: Vec<f64>,
    n_nodes: usize,
    n_paths: usize,
    dim_m: usize,
    dim_d: usize,
    domain: DomainMode,
}

impl Process2P {
    pub fn zeros(
        n_nodes: usize,
        n_paths: usize,
        dim_m: usize,
        dim_d: usize,
        domain: DomainMode,
    ) -> Result<Self> {
        Self::zeros_with_budget(
            n_nodes,
            n_paths,
            dim_m,
            dim_d,
            domain,
            DEFAULT_MEMORY_BUDGET_BYTES,
        )
    }

    pub fn zeros_with_budget(
        n_nodes: usize,
        n_paths: usize,
        dim_m: usize,
        dim_d: usize,
        domain: DomainMode,
        budget: usize,
    ) -> Result<Self> {
        let elements = n_nodes
            .checked_mul(n_nodes)
            .and_then(|v| v.checked_mul(n_paths))
            .and_then(|v| v.checked_mul(dim_m * dim_d))
            .ok_or_else(|| Error::Capacity("two-parameter table size overflows".into()))?;
        let values = checked_alloc(elements, "two-parameter process table", budget)?;
        Ok(Self {
            values,
            n_nodes,
            n_paths,
            dim_m,
            dim_d,
            domain,
        })
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    #[inline]
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    #[inline]
    pub fn dim_m(&self) -> usize {
        self.dim_m
    }

    #[inline]
    pub fn dim_d(&self) -> usize {
        self.dim_d
    }

    #[inline]
    pub fn domain(&self) -> DomainMode {
        self.domain
    }

    pub fn set_domain(&mut self, domain: DomainMode) {
        self.domain = domain;
    }

    #[inline]
    fn block_offset(&self, i: usize, j: usize) -> usize {
        (i * self.n_nodes + j) * self.n_paths * self.dim_m * self.dim_d
    }

    /// All values at the node pair `(i, j)`: `n_paths * m * d` entries, path-major.
    #[inline]
    pub fn block(&self, i: usize, j: usize) -> &[f64] {
        let s = self.n_paths * self.dim_m * self.dim_d;
        let o = self.block_offset(i, j);
        &self.values[o..o + s]
    }

    #[inline]
    pub fn block_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let s = self.n_paths * self.dim_m * self.dim_d;
        let o = self.block_offset(i, j);
        &mut self.values[o..o + s]
    }

    /// Entry `(c, k)` of the matrix `Z(t_i, s_j)` on path `p`.
    #[inline]
    pub fn at(&self, i: usize, j: usize, p: usize, c: usize, k: usize) -> f64 {
        self.values[self.block_offset(i, j) + (p * self.dim_m + c) * self.dim_d + k]
    }

    /// Raw storage, for workers that split the table into disjoint rows; one
    /// row `i` spans `n_nodes * n_paths * m * d` consecutive entries.
    #[inline]
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Mean over paths of the Frobenius norm of `Z(t_i, s_j)`.
    pub fn path_mean_abs(&self, i: usize, j: usize) -> f64 {
        let md = self.dim_m * self.dim_d;
        let b = self.block(i, j);
        let mut acc = 0.0;
        for p in 0..self.n_paths {
            let mut sq = 0.0;
            for e in 0..md {
                let v = b[p * md + e];
                sq += v * v;
            }
            acc += sq.sqrt();
        }
        acc / self.n_paths as f64
    }
}
