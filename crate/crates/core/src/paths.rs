//! Seeded Brownian path generation and path statistics.
//!
//! Each path owns an independent counter-based RNG stream keyed by `(seed, path index)`,
//! so the ensemble is bit-identical no matter how work is scheduled across threads.
//! Gaussian increments come from the inverse normal CDF applied to 53-bit uniforms —
//! a monotone coupling that keeps antithetic or quasi-random extensions open.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;
use std::sync::OnceLock;

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{PathEnsemble, Process1P, TimeGrid, DEFAULT_MEMORY_BUDGET_BYTES};

fn std_normal() -> &'static Normal {
    static CELL: OnceLock<Normal> = OnceLock::new();
    CELL.get_or_init(|| Normal::new(0.0, 1.0).expect("standard normal"))
}

/// Map 64 random bits to a standard normal deviate via the inverse CDF.
///
/// The top 53 bits give a uniform on (0, 1) that is symmetric and bounded away
/// from both endpoints, so the quantile map never produces infinities.
#[inline]
pub fn standard_normal_from_bits(bits: u64) -> f64 {
    let u = ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
    std_normal().inverse_cdf(u)
}

/// The RNG stream that drives path `p` of an ensemble with the given seed.
fn path_stream(seed: u64, p: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(p);
    rng
}

/// Generate a seeded ensemble of `n_paths` Brownian paths of dimension `dim` on `grid`.
///
/// Increments over `[t_j, t_{j+1})` are independent centered Gaussians with variance
/// `step(j)` per component. Identical `(grid, n_paths, dim, seed)` yield identical
/// ensembles regardless of thread count.
pub fn generate_paths(
    grid: &TimeGrid,
    n_paths: usize,
    dim: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    generate_paths_with_budget(grid, n_paths, dim, seed, DEFAULT_MEMORY_BUDGET_BYTES)
}

pub fn generate_paths_with_budget(
    grid: &TimeGrid,
    n_paths: usize,
    dim: usize,
    seed: u64,
    budget: usize,
) -> Result<PathEnsemble> {
    if n_paths == 0 || dim == 0 {
        return Err(Error::Config(format!(
            "ensemble needs at least one path and one component (got {n_paths}, {dim})"
        )));
    }
    let n = grid.n_steps();
    let per_path = n * dim;
    let total = per_path
        .checked_mul(n_paths)
        .ok_or_else(|| Error::Capacity("increment table size overflows".into()))?;
    // Three tables of this size coexist transiently (path-major scratch,
    // node-major increments, node values).
    if total.saturating_mul(3 * 8) > budget {
        return Err(Error::Capacity(format!(
            "ensemble of {n_paths} x {n} x {dim} needs {} bytes, over the {budget}-byte budget",
            total * 3 * 8
        )));
    }
    let sqrt_steps: Vec<f64> = (0..n).map(|j| grid.step(j).sqrt()).collect();

    // Each path draws its increments from its own stream, path-contiguously.
    let mut scratch = vec![0.0f64; total];
    scratch
        .par_chunks_mut(per_path)
        .enumerate()
        .for_each(|(p, chunk)| {
            let mut rng = path_stream(seed, p as u64);
            for j in 0..n {
                let sd = sqrt_steps[j];
                for k in 0..dim {
                    chunk[j * dim + k] = sd * standard_normal_from_bits(rng.next_u64());
                }
            }
        });

    // Transpose to the node-major layout the solvers consume.
    let mut dw = vec![0.0f64; total];
    for j in 0..n {
        let row = &mut dw[j * n_paths * dim..(j + 1) * n_paths * dim];
        for p in 0..n_paths {
            let src = &scratch[p * per_path + j * dim..p * per_path + (j + 1) * dim];
            row[p * dim..(p + 1) * dim].copy_from_slice(src);
        }
    }
    drop(scratch);
    PathEnsemble::from_increments(grid.clone(), n_paths, dim, seed, dw, budget)
}

/// Degree of dependence of `proc` at node `i` on future increments, as the R^2 of a
/// linear regression (with intercept) of the values on `dW[j], j >= i`.
///
/// Adapted processes give values near 0 (below `3/sqrt(M)` in practice); a process
/// reading terminal information gives values of order 1. Deterministic slices
/// return 0 by convention. For multi-component processes the maximum over
/// components is returned.
pub fn check_adapted(proc: &Process1P, ens: &PathEnsemble, i: usize) -> Result<f64> {
    let n = ens.grid().n_steps();
    let m_paths = ens.n_paths();
    if proc.n_paths() != m_paths || proc.n_nodes() != n + 1 {
        return Err(Error::Precondition(
            "process and ensemble shapes do not match".into(),
        ));
    }
    if i >= n {
        return Ok(0.0); // no future increments left to leak from
    }
    let d = ens.dim();
    let n_feat = (n - i) * d;
    if n_feat + 1 >= m_paths {
        return Err(Error::Precondition(format!(
            "adaptedness check needs more paths than features ({m_paths} vs {n_feat})"
        )));
    }

    // Feature matrix: future increments, mean-centered.
    let mut feats = vec![0.0f64; n_feat * m_paths]; // [feature][path]
    for (fj, j) in (i..n).enumerate() {
        let slice = ens.dw_slice(j);
        for k in 0..d {
            let col = &mut feats[(fj * d + k) * m_paths..(fj * d + k + 1) * m_paths];
            for p in 0..m_paths {
                col[p] = slice[p * d + k];
            }
            let mean = col.iter().sum::<f64>() / m_paths as f64;
            col.iter_mut().for_each(|v| *v -= mean);
        }
    }
    let gram = {
        let mut g = nalgebra::DMatrix::<f64>::zeros(n_feat, n_feat);
        for a in 0..n_feat {
            for b in a..n_feat {
                let dot = feats[a * m_paths..(a + 1) * m_paths]
                    .iter()
                    .zip(&feats[b * m_paths..(b + 1) * m_paths])
                    .map(|(x, y)| x * y)
                    .sum::<f64>();
                g[(a, b)] = dot;
                g[(b, a)] = dot;
            }
        }
        // Tiny ridge: this is a diagnostic, bias toward stability.
        let tr = g.trace().max(1e-300);
        for a in 0..n_feat {
            g[(a, a)] += 1e-10 * tr / n_feat as f64;
        }
        g
    };
    let chol = nalgebra::Cholesky::new(gram).ok_or_else(|| {
        Error::NumericalRank("future-increment design matrix is singular".into())
    })?;

    let mut worst: f64 = 0.0;
    for c in 0..proc.dim_m() {
        let slice = proc.slice(i);
        let vals: Vec<f64> = (0..m_paths).map(|p| slice[p * proc.dim_m() + c]).collect();
        let mean = vals.iter().sum::<f64>() / m_paths as f64;
        let sst: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
        if sst <= 1e-14 * m_paths as f64 * (1.0 + mean * mean) {
            continue; // deterministic slice: 0 by convention
        }
        let mut xty = nalgebra::DVector::<f64>::zeros(n_feat);
        for a in 0..n_feat {
            xty[a] = feats[a * m_paths..(a + 1) * m_paths]
                .iter()
                .zip(&vals)
                .map(|(x, y)| x * (y - mean))
                .sum::<f64>();
        }
        let beta = chol.solve(&xty);
        let ss_explained = xty.dot(&beta);
        worst = worst.max((ss_explained / sst).clamp(0.0, 1.0));
    }
    Ok(worst)
}

/// Threshold under which an R^2 from [`check_adapted`] is considered noise.
pub fn adapted_threshold(n_paths: usize) -> f64 {
    3.0 / (n_paths as f64).sqrt()
}

const DUMP_MAGIC: u64 = 0x42_53_56_49_45_50_41_54; // "BSVIEPAT"

/// Write the ensemble to a binary file: a header of five little-endian u64
/// (magic, paths, steps, dim, seed), the grid nodes, then all increments
/// path-major as little-endian f64.
pub fn dump_paths(ens: &PathEnsemble, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let grid = ens.grid();
    let n = grid.n_steps();
    for v in [
        DUMP_MAGIC,
        ens.n_paths() as u64,
        n as u64,
        ens.dim() as u64,
        ens.seed(),
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for j in 0..=n {
        w.write_all(&grid.node(j).to_le_bytes())?;
    }
    for p in 0..ens.n_paths() {
        for j in 0..n {
            for k in 0..ens.dim() {
                w.write_all(&ens.dw_at(j, p, k).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read an ensemble written by [`dump_paths`].
pub fn load_paths(path: &Path) -> Result<PathEnsemble> {
    let mut r = BufReader::new(File::open(path)?);
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |r: &mut BufReader<File>| -> Result<u64> {
        r.read_exact(&mut u64buf)?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let magic = read_u64(&mut r)?;
    if magic != DUMP_MAGIC {
        return Err(Error::Config("not an ensemble dump file".into()));
    }
    let n_paths = read_u64(&mut r)? as usize;
    let n = read_u64(&mut r)? as usize;
    let dim = read_u64(&mut r)? as usize;
    let seed = read_u64(&mut r)?;
    let mut f64buf = [0u8; 8];
    let mut nodes = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        r.read_exact(&mut f64buf)?;
        nodes.push(f64::from_le_bytes(f64buf));
    }
    let grid = TimeGrid::from_nodes(nodes)?;
    let total = n
        .checked_mul(n_paths)
        .and_then(|v| v.checked_mul(dim))
        .ok_or_else(|| Error::Capacity("dump dimensions overflow".into()))?;
    if total * 8 > DEFAULT_MEMORY_BUDGET_BYTES {
        return Err(Error::Capacity("dump exceeds the memory budget".into()));
    }
    let mut dw = vec![0.0f64; total];
    for p in 0..n_paths {
        for j in 0..n {
            for k in 0..dim {
                r.read_exact(&mut f64buf)?;
                dw[(j * n_paths + p) * dim + k] = f64::from_le_bytes(f64buf);
            }
        }
    }
    PathEnsemble::from_increments(grid, n_paths, dim, seed, dw, DEFAULT_MEMORY_BUDGET_BYTES)
}
