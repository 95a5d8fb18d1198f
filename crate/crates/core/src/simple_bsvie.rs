//! Solver for the driver-frozen ("simple") equation
//!
//! ```text
//! Y(t) = psi(t) + INT_t^T f(t, s) ds - INT_t^T Z(t, s) dW(s),
//! ```
//!
//! where the source field `f(t, s)` no longer depends on the unknowns, plus the
//! martingale extension that fills `Z(t, s)` for `s < t`.
//!
//! For each grid node `t_i` the solver builds the auxiliary martingale-plus-drift
//! family `lambda(t_i, t_j) = E[ psi(t_i) + INT_{t_j}^T f(t_i, s) ds | F_j ]`,
//! backward in `j` with one regression per slice; `Y(t_i) = lambda(t_i, t_i)`,
//! and `Z(t_i, .)` is the integrand of the martingale part of `lambda(t_i, .)`.
//! Rows are independent, so they are processed in parallel; every row writes a
//! disjoint region and every value is a pure function of the shared inputs, so
//! results are byte-identical for any thread count.

use rayon::prelude::*;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{
    DomainMode, Driver, Feature, FreeTerm, PathEnsemble, PathRef, Process1P, Process2P,
};
use crate::paths::{adapted_threshold, check_adapted};
use crate::regression::SliceBases;

/// A source field `f(t_i, s_j)` with every unknown frozen: evaluated blockwise
/// over paths at a node pair. Implementations must be pure functions of the
/// node pair and the ensemble — solver parallelism relies on it.
pub trait FrozenField: Sync {
    /// Value dimension `m` of the field.
    fn dim_m(&self) -> usize;

    /// Write `f(t_i, s_j)` for every path into `out` (`n_paths * m`, path-major).
    fn eval_block(&self, i: usize, j: usize, ens: &PathEnsemble, out: &mut [f64]);
}

/// `f = 0`.
pub struct ZeroField {
    pub dim_m: usize,
}

impl FrozenField for ZeroField {
    fn dim_m(&self) -> usize {
        self.dim_m
    }
    fn eval_block(&self, _i: usize, _j: usize, _ens: &PathEnsemble, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// A scalar deterministic field `f(t, s)`.
pub struct DeterministicField {
    f: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
}

impl DeterministicField {
    pub fn new(f: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>) -> Self {
        DeterministicField { f }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(Arc::new(move |_, _| c))
    }
}

impl FrozenField for DeterministicField {
    fn dim_m(&self) -> usize {
        1
    }
    fn eval_block(&self, i: usize, j: usize, ens: &PathEnsemble, out: &mut [f64]) {
        let t = ens.grid().node(i);
        let s = ens.grid().node(j);
        out.fill((self.f)(t, s));
    }
}

/// The scalar affine field `f(t, s) = c0 + c_t t + c_s s + c_w W_1(s)`.
pub struct AffineBrownianField {
    pub constant: f64,
    pub t_coeff: f64,
    pub s_coeff: f64,
    pub w_coeff: f64,
}

impl FrozenField for AffineBrownianField {
    fn dim_m(&self) -> usize {
        1
    }
    fn eval_block(&self, i: usize, j: usize, ens: &PathEnsemble, out: &mut [f64]) {
        let t = ens.grid().node(i);
        let s = ens.grid().node(j);
        let base = self.constant + self.t_coeff * t + self.s_coeff * s;
        let d = ens.dim();
        let w = ens.w_slice(j);
        for (p, o) in out.iter_mut().enumerate() {
            *o = base + self.w_coeff * w[p * d];
        }
    }
}

/// A driver with its arguments frozen at tabulated iterates: the field
///
/// ```text
/// f(t_i, s_j) = g(t_i, s_j, y(s_j), z(t_i, s_j), z(s_j, t_i)),
/// ```
///
/// where `y` and `z` are previous-iterate tables. A missing `z` table freezes
/// both `z` arguments at zero; if `z` covers only the upper triangle, the
/// reflected argument `z(s_j, t_i)` reads the zero fill below the diagonal
/// (callers that need it populated run the martingale extension first).
pub struct FrozenDriverField<'a> {
    g: &'a Driver,
    y: &'a Process1P,
    z: Option<&'a Process2P>,
    zero_block: Vec<f64>,
}

impl<'a> FrozenDriverField<'a> {
    pub fn new(g: &'a Driver, y: &'a Process1P, z: Option<&'a Process2P>) -> Result<Self> {
        if y.dim_m() != g.dim_m {
            return Err(Error::Precondition(format!(
                "frozen y has dimension {}, driver expects {}",
                y.dim_m(),
                g.dim_m
            )));
        }
        if let Some(z) = z {
            if z.dim_m() != g.dim_m || z.dim_d() != g.dim_d {
                return Err(Error::Precondition(format!(
                    "frozen z is {}x{}, driver expects {}x{}",
                    z.dim_m(),
                    z.dim_d(),
                    g.dim_m,
                    g.dim_d
                )));
            }
        }
        Ok(FrozenDriverField {
            g,
            y,
            z,
            zero_block: vec![0.0; g.dim_m * g.dim_d],
        })
    }
}

impl FrozenField for FrozenDriverField<'_> {
    fn dim_m(&self) -> usize {
        self.g.dim_m
    }

    fn eval_block(&self, i: usize, j: usize, ens: &PathEnsemble, out: &mut [f64]) {
        let grid = ens.grid();
        let t = grid.node(i);
        let s = grid.node(j);
        let m = self.g.dim_m;
        let d = self.g.dim_d;
        let md = m * d;
        let stochastic = self.g.has_stochastic_coeff();
        let shared = if stochastic {
            None
        } else {
            Some(self.g.coeff_sample(t, s, None))
        };
        let (z_fwd, z_rev) = match self.z {
            Some(z) => (Some(z.block(i, j)), Some(z.block(j, i))),
            None => (None, None),
        };
        for p in 0..ens.n_paths() {
            let y_sl = self.y.at_slice(j, p);
            let z_sl = z_fwd.map_or(&self.zero_block[..], |b| &b[p * md..(p + 1) * md]);
            let zeta_sl = z_rev.map_or(&self.zero_block[..], |b| &b[p * md..(p + 1) * md]);
            let out_sl = &mut out[p * m..(p + 1) * m];
            if let Some(c) = &shared {
                self.g.eval_with(c, t, s, j, p, y_sl, z_sl, zeta_sl, out_sl);
            } else {
                let path = PathRef::Ensemble { ens, p };
                let c = self.g.coeff_sample(t, s, Some((&path, j)));
                self.g.eval_with(&c, t, s, j, p, y_sl, z_sl, zeta_sl, out_sl);
            }
        }
    }
}

/// Solve the driver-frozen equation on the grid of `ens`.
///
/// Returns the value table `Y` (adapted by construction) and the integrand
/// table `Z` on the upper triangle `j >= i` (the final column stays zero —
/// there is no increment beyond the horizon to identify it from).
///
/// The regression target for `Z` is the *increment* of the value family plus
/// its drift compensation, `(lambda_{j+1} - lambda_j + drift_j) dW_j / step_j`:
/// subtracting the current value removes the level from the target and the
/// drift term removes the systematic `O(step)` correlation between the source
/// and the Brownian increment, leaving an estimator whose error is pure
/// regression noise.
///
/// Free terms that declare a dependence on the running evaluation node are
/// rejected: their conditional expectations at earlier slices are not functions
/// of the slice state in the span of the per-slice bases, so one shared basis
/// per slice — the design that makes the row sweep affordable — cannot
/// represent them.
pub fn solve_simple<F: FrozenField>(
    psi: &FreeTerm,
    field: &F,
    ens: &PathEnsemble,
    bases: &SliceBases,
) -> Result<(Process1P, Process2P)> {
    let grid = ens.grid();
    let n = grid.n_steps();
    let m = psi.dim_m;
    let d = ens.dim();
    let md = m * d;
    let mp = ens.n_paths();
    if field.dim_m() != m {
        return Err(Error::Precondition(format!(
            "field dimension {} does not match free term dimension {m}",
            field.dim_m()
        )));
    }
    if bases.n_slices() != n + 1 || bases.n_paths() != mp {
        return Err(Error::Precondition(
            "regression bases were built for a different ensemble".into(),
        ));
    }
    if psi.features().contains(&Feature::CurrentState) {
        return Err(Error::Config(
            "free terms depending on the running evaluation node are not supported \
             by the shared per-slice bases; use the nested Monte Carlo oracle for them"
                .into(),
        ));
    }
    let psi_tab = psi.tabulate(ens)?;

    let mut y = Process1P::zeros(n + 1, mp, m, true);
    let mut z = Process2P::zeros(n + 1, mp, m, d, DomainMode::UpperTriangle)?;

    let slice_len = mp * m;
    let z_block_len = mp * md;
    let z_row_len = (n + 1) * z_block_len;
    y.values_mut()
        .par_chunks_mut(slice_len)
        .zip(z.values_mut().par_chunks_mut(z_row_len))
        .enumerate()
        .try_for_each(|(i, (y_row, z_row))| -> Result<()> {
            let psi_i = psi_tab.slice(i);
            if i == n {
                y_row.copy_from_slice(psi_i);
                return Ok(());
            }
            let n_lam = n + 1 - i;
            let mut lam = vec![0.0f64; n_lam * slice_len];
            let mut drift = vec![0.0f64; (n - i) * slice_len];
            let mut f_next = vec![0.0f64; slice_len];
            let mut f_cur = vec![0.0f64; slice_len];
            let mut g_acc = vec![0.0f64; slice_len];
            let mut target = vec![0.0f64; slice_len];

            // Backward sweep: accumulate the trapezoid tail of the source and
            // project the conditional value at each slice.
            lam[(n - i) * slice_len..].copy_from_slice(psi_i);
            field.eval_block(i, n, ens, &mut f_next);
            for j in (i..n).rev() {
                field.eval_block(i, j, ens, &mut f_cur);
                let half = 0.5 * grid.step(j);
                let dr = &mut drift[(j - i) * slice_len..(j - i + 1) * slice_len];
                for q in 0..slice_len {
                    dr[q] = half * (f_cur[q] + f_next[q]);
                    g_acc[q] += dr[q];
                    target[q] = psi_i[q] + g_acc[q];
                }
                let out = &mut lam[(j - i) * slice_len..(j - i + 1) * slice_len];
                bases.project_into(j, &target, m, out)?;
                std::mem::swap(&mut f_next, &mut f_cur);
            }
            if lam[..slice_len].iter().any(|v| !v.is_finite()) {
                return Err(Error::Precondition(format!(
                    "value family at node {i} became non-finite; check the source field"
                )));
            }
            y_row.copy_from_slice(&lam[..slice_len]);

            // Forward sweep: integrand of the martingale part per step.
            let mut z_target = vec![0.0f64; mp * md];
            for j in i..n {
                let cur = &lam[(j - i) * slice_len..(j - i + 1) * slice_len];
                let next = &lam[(j - i + 1) * slice_len..(j - i + 2) * slice_len];
                let dr = &drift[(j - i) * slice_len..(j - i + 1) * slice_len];
                let dw = ens.dw_slice(j);
                for p in 0..mp {
                    for c in 0..m {
                        let diff = next[p * m + c] - cur[p * m + c] + dr[p * m + c];
                        for k in 0..d {
                            z_target[(p * m + c) * d + k] = diff * dw[p * d + k];
                        }
                    }
                }
                let out = &mut z_row[j * z_block_len..(j + 1) * z_block_len];
                bases.project_into(j, &z_target, md, out)?;
                let inv_step = 1.0 / grid.step(j);
                out.iter_mut().for_each(|v| *v *= inv_step);
            }
            Ok(())
        })?;

    Ok((y, z))
}

/// Fill the lower triangle `s_j < t_i` of `z` with the integrand of the
/// martingale representation of `Y(t_i)`:
///
/// ```text
/// Y(t_i) = E[Y(t_i)] + SUM_{j < i} Z(t_i, s_j) dW_j   (up to regression error),
/// ```
///
/// via the conditional-value chain `v_j = E[Y(t_i) | F_j]`. The input must be
/// adapted — its claim is audited on three interior slices before any work —
/// because conditional values of look-ahead tables are not functions of the
/// slice state and the identity above silently breaks.
pub fn m_extend(
    y: &Process1P,
    ens: &PathEnsemble,
    bases: &SliceBases,
    z: &mut Process2P,
) -> Result<()> {
    let grid = ens.grid();
    let n = grid.n_steps();
    let m = y.dim_m();
    let d = ens.dim();
    let md = m * d;
    let mp = ens.n_paths();
    if y.n_nodes() != n + 1 || y.n_paths() != mp {
        return Err(Error::Precondition(
            "value table does not match the ensemble".into(),
        ));
    }
    if z.n_nodes() != n + 1 || z.n_paths() != mp || z.dim_m() != m || z.dim_d() != d {
        return Err(Error::Precondition(
            "integrand table does not match the value table".into(),
        ));
    }
    if !y.adapted {
        return Err(Error::Precondition(
            "martingale extension needs an adapted value table".into(),
        ));
    }
    let threshold = adapted_threshold(mp);
    for i in [n / 4, n / 2, (3 * n) / 4] {
        if i == 0 || i >= n {
            continue;
        }
        let score = check_adapted(y, ens, i)?;
        if score > threshold {
            return Err(Error::Contract(format!(
                "value table claims adaptedness but node {i} depends on future \
                 increments (score {score:.3} > {threshold:.3})"
            )));
        }
    }

    let slice_len = mp * m;
    let z_block_len = mp * md;
    let z_row_len = (n + 1) * z_block_len;
    z.values_mut()
        .par_chunks_mut(z_row_len)
        .enumerate()
        .try_for_each(|(i, z_row)| -> Result<()> {
            if i == 0 {
                return Ok(());
            }
            let y_i = y.slice(i);
            let mut v_next = y_i.to_vec();
            let mut v_cur = vec![0.0f64; slice_len];
            let mut z_target = vec![0.0f64; mp * md];
            for j in (0..i).rev() {
                bases.project_into(j, y_i, m, &mut v_cur)?;
                let dw = ens.dw_slice(j);
                for p in 0..mp {
                    for c in 0..m {
                        let diff = v_next[p * m + c] - v_cur[p * m + c];
                        for k in 0..d {
                            z_target[(p * m + c) * d + k] = diff * dw[p * d + k];
                        }
                    }
                }
                let out = &mut z_row[j * z_block_len..(j + 1) * z_block_len];
                bases.project_into(j, &z_target, md, out)?;
                let inv_step = 1.0 / grid.step(j);
                out.iter_mut().for_each(|v| *v *= inv_step);
                std::mem::swap(&mut v_next, &mut v_cur);
            }
            Ok(())
        })?;
    z.set_domain(DomainMode::FullSquare);
    Ok(())
}
