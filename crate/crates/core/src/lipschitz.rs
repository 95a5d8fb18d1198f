//! Fixed-point solver for the full equation
//!
//! ```text
//! Y(t) = psi(t) + INT_t^T g(t, s, Y(s), Z(t, s), Z(s, t)) ds - INT_t^T Z(t, s) dW(s)
//! ```
//!
//! with a Lipschitz driver, by iterating the map that freezes the unknowns
//! inside `g` and solves the resulting driver-frozen equation. Convergence is
//! measured in an exponentially weighted norm whose exponent `beta` trades
//! sharpness of the metric against the contraction rate; iterates themselves do
//! not depend on `beta`, so raising it only changes the yardstick.
//!
//! Two solution notions are supported: the *martingale-complete* mode, which
//! extends every iterate's integrand below the diagonal so the reflected
//! argument `Z(s, t)` is available to the driver, and the *adapted* mode, which
//! identifies the integrand on `s >= t` only and therefore requires a driver
//! that never reads the reflected argument.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    build_weight_profile, DomainMode, Driver, FreeTerm, PathEnsemble, Process1P, Process2P,
    TimeGrid, WeightMode, WeightProfile,
};
use crate::regression::SliceBases;
use crate::simple_bsvie::{m_extend, solve_simple, FrozenDriverField};

/// Which solution notion the fixed-point iteration targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolutionMode {
    /// Identify `Z` on the full square; the driver may read `Z(s, t)`.
    #[serde(rename = "m_solution")]
    MSolution,
    /// Identify `Z` on `s >= t` only; the driver must not read `Z(s, t)`.
    #[serde(rename = "adapted")]
    Adapted,
}

/// Which region of the `(t, s)` square a norm integrates `z` over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormDomain {
    /// Both triangles: `INT_0^T INT_0^T`.
    Square,
    /// Upper triangle only: `INT_0^T INT_t^T`.
    Upper,
}

/// Configuration of the fixed-point iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Weight exponent; `None` picks the driver-derived default.
    pub beta: Option<f64>,
    /// Which accumulated clock drives the weights.
    pub weight_mode: WeightMode,
    /// Exponent `p` for the heavier clock (used only in that regime).
    pub p_exponent: f64,
    /// Stop when the weighted distance between successive iterates falls below this.
    pub tol: f64,
    /// Hard cap on fixed-point iterations per attempt.
    pub max_iter: usize,
    /// Solution notion.
    pub mode: SolutionMode,
    /// Stop tolerance for inner solves when this config drives an outer
    /// recursion; `None` derives one from `tol`.
    pub inner_tol: Option<f64>,
    /// How many times `beta` may be doubled after a divergence before giving up.
    pub max_beta_doublings: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            beta: None,
            weight_mode: WeightMode::Plain,
            p_exponent: 1.5,
            tol: 1e-8,
            max_iter: 60,
            mode: SolutionMode::MSolution,
            inner_tol: None,
            max_beta_doublings: 5,
        }
    }
}

/// What a fixed-point (or outer recursion) run did, for reports and post-mortems.
#[derive(Debug, Clone, Serialize)]
pub struct SolverReport {
    /// Number of iterations actually performed (in the final attempt).
    pub iterations: usize,
    /// Distance between successive iterates, per iteration.
    pub distances: Vec<f64>,
    /// `distances[k] / distances[k-1]`; `None` where the denominator is
    /// numerically zero (below ten machine epsilons of scale).
    pub contraction_factors: Vec<Option<f64>>,
    /// The weight exponent in force for the recorded attempt.
    pub beta_used: f64,
    /// How many divergence-triggered doublings happened before that.
    pub beta_doublings: usize,
    /// Whether the stop tolerance was reached.
    pub converged: bool,
    /// Solution notion of the run.
    pub mode: SolutionMode,
    /// `E INT |Y_n|^2 dt` per iterate, recorded by the outer recursion
    /// (empty for plain fixed-point runs); index 0 is the initial iterate.
    pub value_masses: Vec<f64>,
    /// Maximum equation residual, filled in by callers that run diagnostics.
    pub final_residual: Option<f64>,
    /// Estimate-check ratios, filled in by callers that run diagnostics.
    pub estimate_ratios: Option<serde_json::Value>,
    /// Human-readable remarks (metric regime, warnings, doubling history).
    pub notes: Vec<String>,
}

impl SolverReport {
    fn new(mode: SolutionMode, beta: f64) -> Self {
        SolverReport {
            iterations: 0,
            distances: Vec::new(),
            contraction_factors: Vec::new(),
            beta_used: beta,
            beta_doublings: 0,
            converged: false,
            mode,
            value_masses: Vec::new(),
            final_residual: None,
            estimate_ratios: None,
            notes: Vec::new(),
        }
    }

    /// Largest recorded contraction factor, if any were defined.
    pub fn sup_factor(&self) -> Option<f64> {
        self.contraction_factors
            .iter()
            .flatten()
            .fold(None, |acc, &f| Some(acc.map_or(f, |a: f64| a.max(f))))
    }
}

/// The weighted norm
///
/// ```text
/// [ E INT_0^T w(t) |y(t)|^2 dt + E INT INT_D w(s) |z(t, s)|^2 ds dt ]^(1/2)
/// ```
///
/// with `w(t) = exp(beta * A(t))` from the profile, the outer integral by
/// trapezoid, and the inner integral by left-endpoint step sums (the integrand
/// table is a step process in `s`). `D` is the full square or the upper
/// triangle; asking for the square while `z` only covers the upper triangle is
/// a contract error.
pub fn weighted_norm(
    y: &Process1P,
    z: &Process2P,
    w: &WeightProfile,
    grid: &TimeGrid,
    domain: NormDomain,
) -> Result<f64> {
    diff_weighted_norm(y, None, z, None, w, grid, domain)
}

/// `weighted_norm` of the difference of two pairs, streamed without forming
/// difference tables; `None` for the second pair means zero.
pub fn diff_weighted_norm(
    y1: &Process1P,
    y0: Option<&Process1P>,
    z1: &Process2P,
    z0: Option<&Process2P>,
    w: &WeightProfile,
    grid: &TimeGrid,
    domain: NormDomain,
) -> Result<f64> {
    let n = grid.n_steps();
    if y1.n_nodes() != n + 1 || z1.n_nodes() != n + 1 || w.alpha2.len() != n + 1 {
        return Err(Error::Precondition(
            "weighted norm needs tables and weights on one grid".into(),
        ));
    }
    if domain == NormDomain::Square
        && (z1.domain() != DomainMode::FullSquare
            || z0.is_some_and(|z| z.domain() != DomainMode::FullSquare))
    {
        return Err(Error::Contract(
            "square-domain norm over an upper-triangle integrand table".into(),
        ));
    }
    let mp = y1.n_paths() as f64;
    let outer = grid.trapezoid_full_weights();
    let mut total = 0.0;
    for i in 0..=n {
        let s1 = y1.slice(i);
        let s0 = y0.map(|y| y.slice(i));
        let mut acc = 0.0;
        for (q, v1) in s1.iter().enumerate() {
            let d = v1 - s0.map_or(0.0, |s| s[q]);
            acc += d * d;
        }
        total += outer[i] * w.weight(i) * acc / mp;

        let j_lo = match domain {
            NormDomain::Square => 0,
            NormDomain::Upper => i,
        };
        let mut z_acc = 0.0;
        for j in j_lo..n {
            let b1 = z1.block(i, j);
            let b0 = z0.map(|z| z.block(i, j));
            let mut block_acc = 0.0;
            for (q, v1) in b1.iter().enumerate() {
                let d = v1 - b0.map_or(0.0, |b| b[q]);
                block_acc += d * d;
            }
            z_acc += grid.step(j) * w.weight(j) * block_acc / mp;
        }
        total += outer[i] * z_acc;
    }
    Ok(total.sqrt())
}

/// One application of the fixed-point map: freeze `(y, z)` inside the driver,
/// solve the resulting driver-frozen equation, and (in martingale-complete
/// mode) extend the new integrand below the diagonal so the next application
/// can read the reflected argument.
///
/// In adapted mode a driver that reads the reflected argument is rejected —
/// that argument does not exist in this notion of solution. In
/// martingale-complete mode, a driver that reads it requires the incoming `z`
/// to cover the full square.
pub fn theta_map(
    y: &Process1P,
    z: &Process2P,
    g: &Driver,
    psi: &FreeTerm,
    ens: &PathEnsemble,
    bases: &SliceBases,
    mode: SolutionMode,
) -> Result<(Process1P, Process2P)> {
    if mode == SolutionMode::Adapted && g.uses_zeta {
        return Err(Error::Config(
            "adapted mode cannot serve drivers that read the reflected argument z(s, t)"
                .into(),
        ));
    }
    if mode == SolutionMode::MSolution && g.uses_zeta && z.domain() != DomainMode::FullSquare {
        return Err(Error::Precondition(
            "the driver reads z(s, t) but the incoming iterate has no lower triangle"
                .into(),
        ));
    }
    let field = FrozenDriverField::new(g, y, Some(z))?;
    let (y_new, mut z_new) = solve_simple(psi, &field, ens, bases)?;
    if mode == SolutionMode::MSolution {
        m_extend(&y_new, ens, bases, &mut z_new)?;
    }
    Ok((y_new, z_new))
}

/// Solve the Lipschitz equation by fixed-point iteration from `(0, 0)`.
///
/// The driver must be genuinely Lipschitz in `y` (no concavity modulus
/// attached). Stochastic response coefficients are accepted in adapted mode
/// only; the martingale-complete theory needs deterministic ones. On measured
/// divergence (three consecutive contraction factors at or above one) the
/// weight exponent is doubled and the iteration restarts, up to the configured
/// number of doublings; a still-divergent run returns a divergence error
/// carrying the report.
pub fn solve_lipschitz(
    g: &Driver,
    psi: &FreeTerm,
    ens: &PathEnsemble,
    bases: &SliceBases,
    cfg: &SolverConfig,
) -> Result<(Process1P, Process2P, SolverReport)> {
    solve_lipschitz_from(g, psi, ens, bases, cfg, None)
}

/// As [`solve_lipschitz`] but optionally starting from a given iterate pair —
/// the fixed point is the same for any start; a warm one just arrives faster.
pub(crate) fn solve_lipschitz_from(
    g: &Driver,
    psi: &FreeTerm,
    ens: &PathEnsemble,
    bases: &SliceBases,
    cfg: &SolverConfig,
    start: Option<(&Process1P, &Process2P)>,
) -> Result<(Process1P, Process2P, SolverReport)> {
    g.validate(ens.grid().horizon())?;
    if g.modulus.is_some() {
        return Err(Error::Config(
            "driver declares a concave response modulus; use the outer recursion solver"
                .into(),
        ));
    }
    if cfg.mode == SolutionMode::Adapted && g.uses_zeta {
        return Err(Error::Config(
            "adapted mode cannot serve drivers that read the reflected argument z(s, t)"
                .into(),
        ));
    }
    if cfg.mode == SolutionMode::MSolution && g.has_stochastic_coeff() {
        return Err(Error::Config(
            "stochastic response coefficients are supported in adapted mode only".into(),
        ));
    }
    if !cfg.tol.is_finite() || cfg.tol <= 0.0 || cfg.max_iter == 0 {
        return Err(Error::Config(
            "solver needs tol > 0 and max_iter >= 1".into(),
        ));
    }
    let grid = ens.grid();
    let horizon = grid.horizon();

    // Weight clock: nodewise alpha^2 for deterministic coefficients, a constant
    // supremum envelope otherwise (the metric must stay deterministic), floored
    // away from zero so the profile stays valid for driverless corners.
    let mut notes: Vec<String> = Vec::new();
    let alpha2: Vec<f64> = if g.has_stochastic_coeff() {
        let sup = g.r1.sup_bound(horizon).powi(2)
            + g.r2.sup_bound(horizon).powi(2)
            + g.r3.sup_bound(horizon).powi(2);
        notes.push(
            "stochastic response coefficients: weight clock uses their supremum envelope"
                .to_string(),
        );
        vec![sup.max(1e-9); grid.n_nodes()]
    } else {
        g.alpha2_nodes(grid)?
            .into_iter()
            .map(|a| a.max(1e-9))
            .collect()
    };
    let mut beta = match cfg.beta {
        Some(b) => {
            if !b.is_finite() || b <= 0.0 {
                return Err(Error::Config(format!(
                    "weight exponent must be positive, got {b}"
                )));
            }
            b
        }
        None => g.default_beta(horizon),
    };
    let base_profile = build_weight_profile(grid, &alpha2, beta, cfg.p_exponent, cfg.weight_mode)?;

    let kc = g.kernel_condition(grid);
    let sup_a2 = alpha2.iter().cloned().fold(0.0f64, f64::max);
    if beta < 2.0 * kc * sup_a2 {
        notes.push(format!(
            "kernel-size functional {kc:.3e} is large relative to beta {beta:.3e}; \
             contraction may be slow"
        ));
    }

    let norm_domain = match cfg.mode {
        SolutionMode::MSolution => NormDomain::Square,
        SolutionMode::Adapted => NormDomain::Upper,
    };
    let fresh_pair = |mode: SolutionMode| -> Result<(Process1P, Process2P)> {
        let y = Process1P::zeros(grid.n_nodes(), ens.n_paths(), g.dim_m, true);
        // A zero table trivially satisfies the martingale identity on the full
        // square, so the first frozen evaluation may read both triangles.
        let dom = match mode {
            SolutionMode::MSolution => DomainMode::FullSquare,
            SolutionMode::Adapted => DomainMode::UpperTriangle,
        };
        let z = Process2P::zeros(grid.n_nodes(), ens.n_paths(), g.dim_m, g.dim_d, dom)?;
        Ok((y, z))
    };

    let mut doublings = 0usize;
    loop {
        let w = base_profile.with_beta(beta)?;
        let mut report = SolverReport::new(cfg.mode, beta);
        report.beta_doublings = doublings;
        report.notes = notes.clone();

        let (mut y_prev, mut z_prev) = match start {
            Some((y0, z0)) => (y0.clone(), z0.clone()),
            None => fresh_pair(cfg.mode)?,
        };
        let mut diverged = false;
        let mut consecutive_bad = 0usize;
        for _k in 0..cfg.max_iter {
            let (y_new, z_new) = theta_map(&y_prev, &z_prev, g, psi, ens, bases, cfg.mode)?;
            let dist = diff_weighted_norm(
                &y_new,
                Some(&y_prev),
                &z_new,
                Some(&z_prev),
                &w,
                grid,
                norm_domain,
            )?;
            let factor = match report.distances.last() {
                Some(&prev) if prev > 10.0 * f64::EPSILON * (1.0 + dist) => {
                    Some(dist / prev)
                }
                _ => None,
            };
            report.distances.push(dist);
            report.contraction_factors.push(factor);
            report.iterations += 1;
            y_prev = y_new;
            z_prev = z_new;
            if dist < cfg.tol {
                report.converged = true;
                break;
            }
            match factor {
                Some(f) if f >= 1.0 => {
                    consecutive_bad += 1;
                    if consecutive_bad >= 3 {
                        diverged = true;
                        break;
                    }
                }
                _ => consecutive_bad = 0,
            }
        }

        if diverged {
            if doublings < cfg.max_beta_doublings {
                doublings += 1;
                beta *= 2.0;
                notes.push(format!(
                    "divergence in the weighted metric; doubling beta to {beta:.3e} \
                     (doubling {doublings})"
                ));
                continue;
            }
            report.notes.push(
                "iteration still divergent after the allowed beta doublings".to_string(),
            );
            return Err(Error::Divergence {
                message: format!(
                    "fixed-point iteration failed to contract (beta reached {beta:.3e}); \
                     try a larger weight exponent or a smaller kernel"
                ),
                report: Box::new(report),
            });
        }
        if !report.converged {
            report
                .notes
                .push("iteration cap reached before the stop tolerance".to_string());
        }
        y_prev.validate_finite("fixed-point value table")?;
        return Ok((y_prev, z_prev, report));
    }
}

/// Both sides of the two-data stability bound on `[S, T]`:
///
/// ```text
/// lhs = E INT_S^T |dY(t)|^2 dt + E INT_S^T INT_D |dZ(t, s)|^2 ds dt,
/// rhs = C [ E INT_S^T |dpsi(t)|^2 dt
///         + E INT_S^T ( INT_t^T |(g1 - g2)(t, s, Y2(s), Z2(t, s), Z2(s, t))| ds )^2 dt ],
/// ```
///
/// where `dY, dZ, dpsi` are differences of the two solutions' tables and the
/// driver gap is evaluated along the second solution. `D` is the full square
/// when both integrand tables cover it, the upper triangle otherwise.
#[allow(clippy::too_many_arguments)]
pub fn stability_gap(
    sol1: (&Process1P, &Process2P),
    sol2: (&Process1P, &Process2P),
    psi1: &Process1P,
    psi2: &Process1P,
    g1: &Driver,
    g2: &Driver,
    ens: &PathEnsemble,
    s_index: usize,
    c: f64,
) -> Result<(f64, f64)> {
    let grid = ens.grid();
    let n = grid.n_steps();
    let (y1, z1) = sol1;
    let (y2, z2) = sol2;
    if s_index > n {
        return Err(Error::Precondition("start index beyond the grid".into()));
    }
    let m = y1.dim_m();
    let d = z1.dim_d();
    let md = m * d;
    let mp = ens.n_paths();
    let full = z1.domain() == DomainMode::FullSquare && z2.domain() == DomainMode::FullSquare;

    let tail = grid.trapezoid_tail_weights(s_index);
    let mut lhs = 0.0;
    let mut rhs_psi = 0.0;
    let mut rhs_g = 0.0;
    let mut g_buf1 = vec![0.0f64; m];
    let mut g_buf2 = vec![0.0f64; m];
    let zeros = vec![0.0f64; md];
    for (off, &wt) in tail.iter().enumerate() {
        let i = s_index + off;
        // Value and free-term gaps.
        let (sy1, sy2) = (y1.slice(i), y2.slice(i));
        let (sp1, sp2) = (psi1.slice(i), psi2.slice(i));
        let mut y_acc = 0.0;
        let mut p_acc = 0.0;
        for q in 0..mp * m {
            let dy = sy1[q] - sy2[q];
            y_acc += dy * dy;
            let dp = sp1[q] - sp2[q];
            p_acc += dp * dp;
        }
        lhs += wt * y_acc / mp as f64;
        rhs_psi += wt * p_acc / mp as f64;

        // Integrand gap over the step grid.
        let j_lo = if full { s_index } else { i };
        let mut z_acc = 0.0;
        for j in j_lo..n {
            let (b1, b2) = (z1.block(i, j), z2.block(i, j));
            let mut block = 0.0;
            for q in 0..mp * md {
                let dz = b1[q] - b2[q];
                block += dz * dz;
            }
            z_acc += grid.step(j) * block / mp as f64;
        }
        lhs += wt * z_acc;

        // Driver gap along solution 2, squared after the inner integral.
        let t = grid.node(i);
        let inner = grid.trapezoid_tail_weights(i);
        let mut gap_sq_acc = 0.0;
        for p in 0..mp {
            let mut gap = 0.0;
            for (ioff, &iw) in inner.iter().enumerate() {
                let j = i + ioff;
                let s = grid.node(j);
                let y_sl = y2.at_slice(j, p);
                let zb = z2.block(i, j);
                let z_sl = &zb[p * md..(p + 1) * md];
                let zeta_sl: &[f64] = if full {
                    let rb = z2.block(j, i);
                    &rb[p * md..(p + 1) * md]
                } else {
                    &zeros
                };
                let path = crate::model::PathRef::Ensemble { ens, p };
                let c1 = g1.coeff_sample(t, s, Some((&path, j)));
                let c2 = g2.coeff_sample(t, s, Some((&path, j)));
                g1.eval_with(&c1, t, s, j, p, y_sl, z_sl, zeta_sl, &mut g_buf1);
                g2.eval_with(&c2, t, s, j, p, y_sl, z_sl, zeta_sl, &mut g_buf2);
                let mut norm = 0.0;
                for cix in 0..m {
                    let dg = g_buf1[cix] - g_buf2[cix];
                    norm += dg * dg;
                }
                gap += iw * norm.sqrt();
            }
            gap_sq_acc += gap * gap;
        }
        rhs_g += wt * gap_sq_acc / mp as f64;
    }
    Ok((lhs, c * (rhs_psi + rhs_g)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Coeff, TimeGrid};
    use crate::paths::generate_paths;
    use crate::regression::{build_slice_bases, RegressionConfig};
    use approx::assert_relative_eq;

    fn setup(m_paths: usize, n: usize, seed: u64) -> (PathEnsemble, SliceBases) {
        let grid = TimeGrid::uniform(1.0, n).unwrap();
        let ens = generate_paths(&grid, m_paths, 1, seed).unwrap();
        let bases = build_slice_bases(&ens, &RegressionConfig::default()).unwrap();
        (ens, bases)
    }

    fn unit_profile(grid: &TimeGrid, beta: f64) -> WeightProfile {
        let alpha2 = vec![1.0; grid.n_nodes()];
        build_weight_profile(grid, &alpha2, beta, 1.5, WeightMode::Plain).unwrap()
    }

    #[test]
    fn weighted_norm_matches_closed_forms() {
        let grid = TimeGrid::uniform(1.0, 64).unwrap();
        let w = unit_profile(&grid, 2.0);
        let y0 = Process1P::zeros(65, 10, 1, true);
        let z0 = Process2P::zeros(65, 10, 1, 1, DomainMode::UpperTriangle).unwrap();
        assert_eq!(weighted_norm(&y0, &z0, &w, &grid, NormDomain::Upper).unwrap(), 0.0);

        let mut ones = Process1P::zeros(65, 10, 1, true);
        for i in 0..65 {
            ones.slice_mut(i).fill(1.0);
        }
        let got = weighted_norm(&ones, &z0, &w, &grid, NormDomain::Upper).unwrap();
        let want = (((2.0f64).exp() - 1.0) / 2.0).sqrt();
        assert_relative_eq!(got, want, max_relative = 1e-3);

        // Vanishing exponent recovers the unweighted norm.
        let w0 = unit_profile(&grid, 1e-8);
        let got = weighted_norm(&ones, &z0, &w0, &grid, NormDomain::Upper).unwrap();
        assert_relative_eq!(got, 1.0, max_relative = 1e-6);
    }

    #[test]
    fn square_norm_needs_a_full_table() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let w = unit_profile(&grid, 1.0);
        let y = Process1P::zeros(5, 10, 1, true);
        let z = Process2P::zeros(5, 10, 1, 1, DomainMode::UpperTriangle).unwrap();
        let err = weighted_norm(&y, &z, &w, &grid, NormDomain::Square).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn zero_driver_map_ignores_its_argument() {
        let (ens, bases) = setup(800, 4, 31);
        let g = Driver::zero(1, 1);
        let psi = FreeTerm::terminal_state();
        let zeros = Process1P::zeros(5, 800, 1, true);
        let z0 = Process2P::zeros(5, 800, 1, 1, DomainMode::FullSquare).unwrap();
        let (ya, _za) =
            theta_map(&zeros, &z0, &g, &psi, &ens, &bases, SolutionMode::MSolution).unwrap();
        let mut junk = Process1P::zeros(5, 800, 1, true);
        for i in 0..5 {
            junk.slice_mut(i).fill(7.0);
        }
        let (yb, _zb) =
            theta_map(&junk, &z0, &g, &psi, &ens, &bases, SolutionMode::MSolution).unwrap();
        for i in 0..5 {
            for p in 0..800 {
                assert_eq!(ya.at(i, p, 0), yb.at(i, p, 0));
            }
        }
    }

    #[test]
    fn hand_iteration_of_the_linear_map() {
        let (ens, bases) = setup(800, 8, 32);
        // g = y, psi = 1: first application gives Y = 1, second Y = 1 + (T - t).
        let g = Driver::linear_scalar(1.0, 1.0, 0.0, 0.0, 0.0);
        let psi = FreeTerm::constant(1.0);
        let y0 = Process1P::zeros(9, 800, 1, true);
        let z0 = Process2P::zeros(9, 800, 1, 1, DomainMode::FullSquare).unwrap();
        let (y1, z1) = theta_map(&y0, &z0, &g, &psi, &ens, &bases, SolutionMode::MSolution).unwrap();
        for i in 0..9 {
            for p in 0..800 {
                assert!((y1.at(i, p, 0) - 1.0).abs() < 1e-12);
            }
        }
        let (y2, _z2) = theta_map(&y1, &z1, &g, &psi, &ens, &bases, SolutionMode::MSolution).unwrap();
        for i in 0..9 {
            let want = 1.0 + (1.0 - ens.grid().node(i));
            for p in 0..800 {
                assert!(
                    (y2.at(i, p, 0) - want).abs() < 1e-12,
                    "node {i}: {} vs {want}",
                    y2.at(i, p, 0)
                );
            }
        }
    }

    #[test]
    fn zero_driver_solve_stops_after_one_effective_iteration() {
        let (ens, bases) = setup(2000, 8, 33);
        let g = Driver::zero(1, 1);
        let psi = FreeTerm::terminal_state();
        let cfg = SolverConfig::default();
        let (y, _z, report) = solve_lipschitz(&g, &psi, &ens, &bases, &cfg).unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations, 2);
        assert!(report.distances[1] < cfg.tol, "{:?}", report.distances);
        // The fixed point is the driver-frozen solution itself.
        let r = (0..2000)
            .map(|p| (y.at(4, p, 0) - ens.w_at(4, p, 0)).powi(2))
            .sum::<f64>()
            / 2000.0;
        assert!(r < 5e-3, "squared gap {r}");
    }

    #[test]
    fn deterministic_volterra_equation_matches_the_exponential() {
        let (ens, bases) = setup(500, 32, 34);
        // Y(t) = 1 + INT_t^T Y(s) ds has the solution e^{T-t}; everything is
        // deterministic, so regressions are exact and only quadrature remains.
        let g = Driver::linear_scalar(1.0, 1.0, 0.0, 0.0, 0.0);
        let psi = FreeTerm::constant(1.0);
        let (y, z, report) = solve_lipschitz(&g, &psi, &ens, &bases, &SolverConfig::default()).unwrap();
        assert!(report.converged);
        let mut sup = 0.0f64;
        for i in 0..=32 {
            let want = (1.0 - ens.grid().node(i)).exp();
            sup = sup.max((y.at(i, 0, 0) - want).abs());
        }
        assert!(sup <= 0.02 * 1.0f64.exp(), "sup error {sup}");
        // The integrand is zero up to projection roundoff (the value family is
        // deterministic but not dyadic, so means carry ~1e-16 dust).
        for i in 0..=32 {
            for j in 0..=32 {
                assert!(z.path_mean_abs(i, j) < 1e-9, "block ({i},{j})");
            }
        }
        for f in report.contraction_factors.iter().flatten() {
            assert!(*f < 1.0, "factor {f}");
        }
    }

    #[test]
    fn adapted_mode_rejects_reflected_readers_and_m_mode_rejects_stochastic() {
        let (ens, bases) = setup(500, 4, 35);
        let psi = FreeTerm::constant(1.0);
        let g_zeta = Driver::linear_scalar(1.0, 0.0, 0.0, 1.0, 0.0);
        let cfg = SolverConfig {
            mode: SolutionMode::Adapted,
            ..SolverConfig::default()
        };
        let err = solve_lipschitz(&g_zeta, &psi, &ens, &bases, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");

        let mut g_stoch = Driver::linear_scalar(0.5, 0.0, 1.0, 0.0, 0.0);
        g_stoch.r2 = Coeff::AbsState {
            base: 0.5,
            scale: 0.5,
            cap: 1.0,
        };
        let err = solve_lipschitz(
            &g_stoch,
            &psi,
            &ens,
            &bases,
            &SolverConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");

        // The same stochastic driver is legitimate in adapted mode.
        let cfg = SolverConfig {
            mode: SolutionMode::Adapted,
            tol: 1e-6,
            ..SolverConfig::default()
        };
        let (_y, z, report) = solve_lipschitz(&g_stoch, &psi, &ens, &bases, &cfg).unwrap();
        assert!(report.converged);
        assert_eq!(z.domain(), DomainMode::UpperTriangle);
        assert!(report
            .notes
            .iter()
            .any(|s| s.contains("supremum envelope")));
    }

    #[test]
    fn weak_metric_diverges_and_doubling_rescues_it() {
        let (ens, bases) = setup(200, 16, 36);
        // A strong kernel makes early iterates grow; a tiny exponent sees that
        // growth as divergence, and doubling the exponent restores contraction.
        let g = Driver::linear_scalar(5.0, 1.0, 0.0, 0.0, 0.0);
        let psi = FreeTerm::constant(1.0);
        let strict = SolverConfig {
            beta: Some(2.0),
            max_beta_doublings: 0,
            ..SolverConfig::default()
        };
        let err = solve_lipschitz(&g, &psi, &ens, &bases, &strict).unwrap_err();
        match &err {
            Error::Divergence { report, .. } => {
                assert!(report.distances.len() >= 3);
                assert_eq!(err.exit_code(), 3);
            }
            other => panic!("expected divergence, got {other}"),
        }

        let flexible = SolverConfig {
            beta: Some(2.0),
            ..SolverConfig::default()
        };
        let (y, _z, report) = solve_lipschitz(&g, &psi, &ens, &bases, &flexible).unwrap();
        assert!(report.converged);
        assert!(report.beta_doublings >= 1);
        assert_relative_eq!(
            report.beta_used,
            2.0 * (2.0f64).powi(report.beta_doublings as i32),
            epsilon = 1e-12
        );
        // The solution is the classical exponential regardless of the metric.
        let want = (5.0f64).exp();
        assert_relative_eq!(y.at(0, 0, 0), want, max_relative = 0.05);
    }

    #[test]
    fn stability_gap_sides_behave() {
        let (ens, bases) = setup(2000, 8, 37);
        let g = Driver::linear_scalar(1.0, 1.0, 0.0, 0.0, 0.0);
        let psi1 = FreeTerm::terminal_state();
        let cfg = SolverConfig::default();
        let (y1, z1, _) = solve_lipschitz(&g, &psi1, &ens, &bases, &cfg).unwrap();
        let p1 = psi1.tabulate(&ens).unwrap();

        // Identical data: zero gap on both value sides.
        let (lhs, rhs) =
            stability_gap((&y1, &z1), (&y1, &z1), &p1, &p1, &g, &g, &ens, 0, 64.0).unwrap();
        assert_eq!(lhs, 0.0);
        assert_eq!(rhs, 0.0);

        // Constant shift of the free term.
        let eps = 0.1;
        let psi2 = FreeTerm::brownian_poly(eps, 0.0, 1.0, 0.0, 0.0);
        let (y2, z2, _) = solve_lipschitz(&g, &psi2, &ens, &bases, &cfg).unwrap();
        let p2 = psi2.tabulate(&ens).unwrap();
        let (lhs, rhs) =
            stability_gap((&y1, &z1), (&y2, &z2), &p1, &p2, &g, &g, &ens, 0, 64.0).unwrap();
        assert!(lhs > 0.0);
        assert!(lhs <= rhs, "lhs {lhs} rhs {rhs}");
        // rhs = C eps^2 T for a pure free-term shift.
        assert_relative_eq!(rhs, 64.0 * eps * eps, max_relative = 1e-6);

        // A driver gap adds its integrated square to the right side.
        let g2 = Driver::linear_scalar(1.0, 1.0, 0.0, 0.0, 0.3);
        let (_l, rhs_g) =
            stability_gap((&y1, &z1), (&y1, &z1), &p1, &p1, &g, &g2, &ens, 0, 64.0).unwrap();
        // INT_0^T (0.3 (T-t))^2 dt = 0.09 / 3.
        assert_relative_eq!(rhs_g, 64.0 * 0.03, max_relative = 1e-2);
    }
}
