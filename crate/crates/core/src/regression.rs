//! Conditional expectations by global least-squares regression on per-slice bases
//! (the Longstaff–Schwartz convention), martingale-integrand extraction, and a
//! nested Monte Carlo oracle for independent cross-checking.
//!
//! The basis at slice `j` consists of an (unpenalized, implicit) intercept plus
//! monomials in the Brownian components `W_k(t_j)` up to a configured degree.
//! Power columns are scaled by `t_j^{-e/2}` so all columns are O(1), then
//! mean-centered; ridge regularization touches only the centered block, which
//! keeps projections of constants exact to machine precision.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::model::{Feature, FreeTerm, PathEnsemble, PathRef, Process1P};
use crate::paths::standard_normal_from_bits;

/// Configuration for the per-slice regression bases.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RegressionConfig {
    /// Monomial degree in each Brownian component (0 = intercept only).
    pub basis_degree: usize,
    /// Ridge added to the centered Gram matrix. `None` picks the default
    /// `1e-8 * trace / n_columns`; `Some(0.0)` demands exact normal equations
    /// and turns singularity into an error.
    pub ridge: Option<f64>,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            basis_degree: 3,
            ridge: None,
        }
    }
}

#[derive(Debug)]
struct SliceBasis {
    /// Centered, scaled basis columns, column-major `[col][path]`.
    cols: Vec<f64>,
    n_cols: usize,
    chol: Option<Cholesky<f64, Dyn>>,
}

/// Factored regression bases for every time slice of one ensemble.
///
/// Building them costs one pass over the ensemble; afterwards any number of
/// targets can be projected at any slice, byte-identically and in parallel.
#[derive(Debug)]
pub struct SliceBases {
    slices: Vec<SliceBasis>,
    n_paths: usize,
}

/// Build and factor the basis at every slice of the ensemble.
///
/// Errors with a config error when the basis would break the over-fit guard
/// (`columns + 1 < M/10`), and with a numerical-rank error when the caller
/// forced `ridge = 0` on collinear columns.
pub fn build_slice_bases(ens: &PathEnsemble, cfg: &RegressionConfig) -> Result<SliceBases> {
    let m_paths = ens.n_paths();
    let d = ens.dim();
    let max_cols = d * cfg.basis_degree;
    if 10 * (max_cols + 1) >= m_paths {
        return Err(Error::Config(format!(
            "{} basis functions need at least {} paths (over-fit guard), got {m_paths}",
            max_cols + 1,
            10 * (max_cols + 1) + 1
        )));
    }
    let grid = ens.grid();
    let mut slices = Vec::with_capacity(grid.n_nodes());
    for j in 0..grid.n_nodes() {
        slices.push(build_one_slice(ens, cfg, j, m_paths, d)?);
    }
    Ok(SliceBases {
        slices,
        n_paths: m_paths,
    })
}

fn build_one_slice(
    ens: &PathEnsemble,
    cfg: &RegressionConfig,
    j: usize,
    m_paths: usize,
    d: usize,
) -> Result<SliceBasis> {
    let t = ens.grid().node(j);
    let mut cols: Vec<f64> = Vec::new();
    let mut n_cols = 0usize;
    if j > 0 && cfg.basis_degree > 0 {
        let w = ens.w_slice(j);
        let inv_sqrt_t = 1.0 / t.sqrt();
        for k in 0..d {
            for e in 1..=cfg.basis_degree {
                let scale = inv_sqrt_t.powi(e as i32);
                let start = cols.len();
                cols.resize(start + m_paths, 0.0);
                let col = &mut cols[start..];
                let mut sum = 0.0;
                for p in 0..m_paths {
                    let v = scale * w[p * d + k].powi(e as i32);
                    col[p] = v;
                    sum += v;
                }
                let mean = sum / m_paths as f64;
                let mut var = 0.0;
                for v in col.iter_mut() {
                    *v -= mean;
                    var += *v * *v;
                }
                if var / (m_paths as f64) < 1e-18 {
                    // Degenerate column (e.g. a constant state) — drop it.
                    cols.truncate(start);
                } else {
                    n_cols += 1;
                }
            }
        }
    }
    let chol = if n_cols == 0 {
        None
    } else {
        let mut gram = DMatrix::<f64>::zeros(n_cols, n_cols);
        for a in 0..n_cols {
            for b in a..n_cols {
                let dot: f64 = cols[a * m_paths..(a + 1) * m_paths]
                    .iter()
                    .zip(&cols[b * m_paths..(b + 1) * m_paths])
                    .map(|(x, y)| x * y)
                    .sum();
                gram[(a, b)] = dot;
                gram[(b, a)] = dot;
            }
        }
        let ridge = match cfg.ridge {
            Some(r) => r,
            None => 1e-8 * gram.trace() / n_cols as f64,
        };
        for a in 0..n_cols {
            gram[(a, a)] += ridge;
        }
        match Cholesky::new(gram) {
            Some(c) => Some(c),
            None => {
                return Err(Error::NumericalRank(format!(
                    "normal equations at slice {j} are singular; set ridge > 0"
                )))
            }
        }
    };
    Ok(SliceBasis { cols, n_cols, chol })
}

impl SliceBases {
    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// Number of active (non-degenerate) basis columns at slice `j`, intercept excluded.
    pub fn n_columns(&self, j: usize) -> usize {
        self.slices[j].n_cols
    }

    /// Project `targets` (path-major, `k` components per path) onto the basis at
    /// slice `j`, writing fitted values into `out` (same layout).
    ///
    /// The fitted values are the least-squares approximation of the conditional
    /// expectation given the state at `t_j`; they are functions of that state by
    /// construction. Linear, and idempotent on basis-representable inputs.
    pub fn project_into(
        &self,
        j: usize,
        targets: &[f64],
        k: usize,
        out: &mut [f64],
    ) -> Result<()> {
        let m = self.n_paths;
        if targets.len() != m * k || out.len() != m * k {
            return Err(Error::Precondition(format!(
                "projection shapes: expected {m} paths x {k} components"
            )));
        }
        let sl = &self.slices[j];
        let inv_m = 1.0 / m as f64;
        for c in 0..k {
            let mut mean = 0.0;
            for p in 0..m {
                let v = targets[p * k + c];
                if !v.is_finite() {
                    return Err(Error::Precondition(format!(
                        "projection target at slice {j} contains a non-finite value"
                    )));
                }
                mean += v;
            }
            mean *= inv_m;
            if let (Some(chol), true) = (&sl.chol, sl.n_cols > 0) {
                let mut xty = DVector::<f64>::zeros(sl.n_cols);
                for a in 0..sl.n_cols {
                    let col = &sl.cols[a * m..(a + 1) * m];
                    let mut dot = 0.0;
                    for p in 0..m {
                        dot += col[p] * (targets[p * k + c] - mean);
                    }
                    xty[a] = dot;
                }
                let beta = chol.solve(&xty);
                for p in 0..m {
                    let mut v = mean;
                    for a in 0..sl.n_cols {
                        v += beta[a] * sl.cols[a * m + p];
                    }
                    out[p * k + c] = v;
                }
            } else {
                for p in 0..m {
                    out[p * k + c] = mean;
                }
            }
        }
        Ok(())
    }

    /// Convenience wrapper allocating the output.
    pub fn project(&self, j: usize, targets: &[f64], k: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; targets.len()];
        self.project_into(j, targets, k, &mut out)?;
        Ok(out)
    }
}

/// Extract the integrand of the martingale representation from a sampled
/// (approximate) martingale: at each step `j`,
///
/// ```text
/// Z_j = project( (mart_{j+1} - mart_j) * dW_j , j ) / step(j),
/// ```
///
/// entrywise over the `m x d` components. Differencing against the current
/// value removes the level of the martingale from the regression target, which
/// cuts the estimator's variance by roughly a factor `1/step` without touching
/// its conditional mean. The final slice (no increment beyond it) stays zero.
///
/// Returns a table with `m * d` components per path, entry `(c, k)` at `c*d + k`.
pub fn martingale_integrand(
    mart: &Process1P,
    ens: &PathEnsemble,
    bases: &SliceBases,
) -> Result<Process1P> {
    let n = ens.grid().n_steps();
    let m_paths = ens.n_paths();
    if mart.n_paths() != m_paths || mart.n_nodes() != n + 1 {
        return Err(Error::Precondition(
            "martingale table does not match the ensemble".into(),
        ));
    }
    let m = mart.dim_m();
    let d = ens.dim();
    let mut out = Process1P::zeros(n + 1, m_paths, m * d, true);
    let mut target = vec![0.0f64; m_paths * m * d];
    for j in 0..n {
        let cur = mart.slice(j);
        let next = mart.slice(j + 1);
        let dw = ens.dw_slice(j);
        for p in 0..m_paths {
            for c in 0..m {
                let diff = next[p * m + c] - cur[p * m + c];
                for k in 0..d {
                    target[(p * m + c) * d + k] = diff * dw[p * d + k];
                }
            }
        }
        let step = ens.grid().step(j);
        let slice = out.slice_mut(j);
        bases.project_into(j, &target, m * d, slice)?;
        slice.iter_mut().for_each(|v| *v /= step);
    }
    Ok(out)
}

/// Conditional expectation of `psi(t_i)` given the state at `t_j`, by brute
/// force: for every path, keep the realized prefix up to `t_j`, resimulate
/// `branches` independent futures, and average the functional over them.
///
/// Before simulating, the declared feature set is audited: the functional is
/// evaluated on two synthetic paths that agree on every declared feature (and
/// the whole prefix) but differ elsewhere in the future; a disagreement means
/// the declaration is dishonest and poisons feature-based consumers, so it is
/// reported as a contract error.
pub fn nested_mc_oracle(
    psi: &FreeTerm,
    eval_index: usize,
    cond_index: usize,
    ens: &PathEnsemble,
    branches: usize,
    seed_salt: u64,
) -> Result<Vec<f64>> {
    let grid = ens.grid();
    let n = grid.n_steps();
    let d = ens.dim();
    let m = psi.dim_m;
    let m_paths = ens.n_paths();
    if cond_index > n || eval_index > n {
        return Err(Error::Precondition("node index beyond the grid".into()));
    }
    if branches == 0 {
        return Err(Error::Config("oracle needs at least one branch".into()));
    }
    audit_features(psi, eval_index, cond_index, ens)?;

    let mut values = vec![0.0f64; m_paths * m];
    let mut buf = vec![0.0f64; (n + 1) * d];
    let mut psi_out = vec![0.0f64; m];
    let mut acc = vec![0.0f64; m];
    let oracle_seed = ens.seed() ^ seed_salt ^ 0xa5a5_5a5a_1234_fedc;
    for p in 0..m_paths {
        for j in 0..=cond_index {
            for k in 0..d {
                buf[j * d + k] = ens.w_at(j, p, k);
            }
        }
        let mut rng = ChaCha12Rng::seed_from_u64(oracle_seed);
        rng.set_stream(p as u64);
        acc.fill(0.0);
        for _ in 0..branches {
            for j in cond_index..n {
                let sd = grid.step(j).sqrt();
                for k in 0..d {
                    buf[(j + 1) * d + k] =
                        buf[j * d + k] + sd * standard_normal_from_bits(rng.next_u64());
                }
            }
            let path = PathRef::Owned { w: &buf, dim: d };
            psi.eval(grid, eval_index, &path, &mut psi_out);
            for c in 0..m {
                acc[c] += psi_out[c];
            }
        }
        for c in 0..m {
            values[p * m + c] = acc[c] / branches as f64;
        }
    }
    Ok(values)
}

/// Check the declared features by evaluating on two futures that pin the
/// declared functionals and nothing else.
fn audit_features(
    psi: &FreeTerm,
    eval_index: usize,
    cond_index: usize,
    ens: &PathEnsemble,
) -> Result<()> {
    let grid = ens.grid();
    let n = grid.n_steps();
    let d = ens.dim();
    let m = psi.dim_m;
    let features = psi.features();
    // Nodes whose values must be preserved in the alternative future.
    let mut pinned = vec![false; n + 1];
    if features.contains(&Feature::CurrentState) {
        pinned[eval_index] = true;
    }
    if features.contains(&Feature::TerminalState) {
        pinned[n] = true;
    }
    let mut a = vec![0.0f64; (n + 1) * d];
    let mut b = vec![0.0f64; (n + 1) * d];
    let mut out_a = vec![0.0f64; m];
    let mut out_b = vec![0.0f64; m];
    for p in 0..ens.n_paths().min(3) {
        for j in 0..=n {
            for k in 0..d {
                a[j * d + k] = ens.w_at(j, p, k);
            }
        }
        // Alternative: same prefix and pinned nodes, straight lines in between,
        // i.e. every unpinned future node moves.
        b.copy_from_slice(&a);
        let mut anchor = cond_index;
        for j in (cond_index + 1)..=n {
            if pinned[j] || j == n {
                for jj in (anchor + 1)..j {
                    let frac = (grid.node(jj) - grid.node(anchor))
                        / (grid.node(j) - grid.node(anchor));
                    for k in 0..d {
                        b[jj * d + k] =
                            a[anchor * d + k] + frac * (a[j * d + k] - a[anchor * d + k]);
                    }
                }
                if !pinned[j] && j == n {
                    // Terminal not declared: shift it (and the line toward it).
                    for k in 0..d {
                        b[n * d + k] += 1.0 + a[n * d + k].abs();
                    }
                    for jj in (anchor + 1)..n {
                        let frac = (grid.node(jj) - grid.node(anchor))
                            / (grid.node(n) - grid.node(anchor));
                        for k in 0..d {
                            b[jj * d + k] = a[anchor * d + k]
                                + frac * (b[n * d + k] - a[anchor * d + k]);
                        }
                    }
                }
                anchor = j;
            }
        }
        let pa = PathRef::Owned { w: &a, dim: d };
        let pb = PathRef::Owned { w: &b, dim: d };
        psi.eval(grid, eval_index, &pa, &mut out_a);
        psi.eval(grid, eval_index, &pb, &mut out_b);
        for c in 0..m {
            let scale = 1.0 + out_a[c].abs();
            if (out_a[c] - out_b[c]).abs() > 1e-9 * scale {
                return Err(Error::Contract(format!(
                    "free term value moved with an undeclared path feature \
                     (component {c}: {} vs {})",
                    out_a[c], out_b[c]
                )));
            }
        }
    }
    Ok(())
}
