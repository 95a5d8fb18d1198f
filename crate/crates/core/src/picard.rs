//! Outer recursion for drivers whose response to `y` is merely continuous with
//! a concave modulus (not Lipschitz), plus the concavity inequality and the
//! convergence monitors that certify such runs.
//!
//! The recursion freezes the `y` argument at the previous outer iterate — the
//! frozen driver is genuinely Lipschitz in the remaining `z` arguments — and
//! solves that equation with the fixed-point solver, warm-started from the
//! previous outer solution. The outer stopping quantity is the unweighted
//! squared gap `E INT |Y_n - Y_{n-1}|^2 dt`, the same quantity the convergence
//! argument for this recursion runs through.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lipschitz::{solve_lipschitz_from, SolverConfig, SolverReport};
use crate::model::{Modulus, PathEnsemble, Process1P, Process2P, TimeGrid};
use crate::regression::SliceBases;
use crate::model::{Driver, FreeTerm};

/// `E INT |a - b|^2 dt` by trapezoid over the grid — the outer metric.
pub fn value_gap_squared(a: &Process1P, b: &Process1P, grid: &TimeGrid) -> Result<f64> {
    if a.n_nodes() != grid.n_nodes() || b.n_nodes() != grid.n_nodes()
        || a.n_paths() != b.n_paths() || a.dim_m() != b.dim_m()
    {
        return Err(Error::Precondition(
            "value tables must share the grid and shape".into(),
        ));
    }
    let outer = grid.trapezoid_full_weights();
    let mp = a.n_paths() as f64;
    let mut total = 0.0;
    for (i, w) in outer.iter().enumerate() {
        let (sa, sb) = (a.slice(i), b.slice(i));
        let mut acc = 0.0;
        for (va, vb) in sa.iter().zip(sb) {
            let d = va - vb;
            acc += d * d;
        }
        total += w * acc / mp;
    }
    Ok(total)
}

/// `E INT |y|^2 dt` by trapezoid over the grid — the mass the boundedness
/// check compares against its a-priori bound.
pub fn value_mass(y: &Process1P, grid: &TimeGrid) -> f64 {
    let outer = grid.trapezoid_full_weights();
    let mp = y.n_paths() as f64;
    let mut total = 0.0;
    for (i, w) in outer.iter().enumerate() {
        let s = y.slice(i);
        total += w * s.iter().map(|v| v * v).sum::<f64>() / mp;
    }
    total
}

/// Solve the equation with a concave-modulus driver by the outer recursion,
/// starting from `Y_0 = 0`.
pub fn picard_solve(
    g: &Driver,
    psi: &FreeTerm,
    ens: &PathEnsemble,
    bases: &SliceBases,
    cfg: &SolverConfig,
) -> Result<(Process1P, Process2P, SolverReport)> {
    picard_solve_from(g, psi, ens, bases, cfg, None)
}

/// As [`picard_solve`] but with a caller-chosen initial iterate — used by the
/// uniqueness probe, which compares runs from different starts.
///
/// Errors: a driver without a modulus is a configuration error (use the
/// fixed-point solver directly); an outer gap sequence that fails to decrease
/// three steps in a row is a divergence error carrying the partial report.
pub fn picard_solve_from(
    g: &Driver,
    psi: &FreeTerm,
    ens: &PathEnsemble,
    bases: &SliceBases,
    cfg: &SolverConfig,
    y_start: Option<&Process1P>,
) -> Result<(Process1P, Process2P, SolverReport)> {
    g.validate(ens.grid().horizon())?;
    if g.modulus.is_none() {
        return Err(Error::Config(
            "outer recursion needs a driver with a concave response modulus; \
             Lipschitz drivers go to the fixed-point solver directly"
                .into(),
        ));
    }
    if !cfg.tol.is_finite() || cfg.tol <= 0.0 || cfg.max_iter == 0 {
        return Err(Error::Config(
            "solver needs tol > 0 and max_iter >= 1".into(),
        ));
    }
    let grid = ens.grid();

    let mut report = SolverReport {
        iterations: 0,
        distances: Vec::new(),
        contraction_factors: Vec::new(),
        beta_used: 0.0,
        beta_doublings: 0,
        converged: false,
        mode: cfg.mode,
        value_masses: Vec::new(),
        final_residual: None,
        estimate_ratios: None,
        notes: vec!["outer recursion with the response argument frozen per step".to_string()],
    };
    if g.has_stochastic_coeff() {
        report
            .notes
            .push("unproven regime: stochastic response coefficients".to_string());
    }

    // Inner solves stop well below the outer resolution: the outer metric is a
    // squared mass, the inner one a weighted norm, so the inner tolerance lives
    // on the square-root scale of the outer one.
    let inner_tol = cfg
        .inner_tol
        .unwrap_or_else(|| (cfg.tol.sqrt() * 1e-2).max(1e-12));
    let inner_cfg = SolverConfig {
        tol: inner_tol,
        inner_tol: None,
        ..cfg.clone()
    };

    let mut y_prev = match y_start {
        Some(y0) => y0.clone(),
        None => Process1P::zeros(grid.n_nodes(), ens.n_paths(), g.dim_m, true),
    };
    report.value_masses.push(value_mass(&y_prev, grid));
    let mut z_prev: Option<Process2P> = None;
    let mut consecutive_bad = 0usize;
    let mut total_inner = 0usize;

    for _n in 0..cfg.max_iter {
        let frozen = g.freeze_y(Arc::new(y_prev.clone()));
        let start = z_prev.as_ref().map(|z| (&y_prev, z));
        let (y_new, z_new, inner) =
            solve_lipschitz_from(&frozen, psi, ens, bases, &inner_cfg, start)?;
        total_inner += inner.iterations;
        report.beta_used = inner.beta_used;
        report.beta_doublings = report.beta_doublings.max(inner.beta_doublings);

        let gap = value_gap_squared(&y_new, &y_prev, grid)?;
        let factor = match report.distances.last() {
            Some(&prev) if prev > 10.0 * f64::EPSILON * (1.0 + gap) => Some(gap / prev),
            _ => None,
        };
        report.distances.push(gap);
        report.contraction_factors.push(factor);
        report.iterations += 1;
        report.value_masses.push(value_mass(&y_new, grid));

        y_prev = y_new;
        z_prev = Some(z_new);
        if gap < cfg.tol {
            report.converged = true;
            break;
        }
        match factor {
            Some(f) if f >= 1.0 => {
                consecutive_bad += 1;
                if consecutive_bad >= 3 {
                    report.notes.push(format!(
                        "outer gap failed to decrease for 3 consecutive steps \
                         (total inner iterations {total_inner})"
                    ));
                    return Err(Error::Divergence {
                        message: "outer recursion failed to contract; the scenario may \
                                  exceed the small-data regime this recursion needs"
                            .to_string(),
                        report: Box::new(report),
                    });
                }
            }
            _ => consecutive_bad = 0,
        }
    }
    report
        .notes
        .push(format!("total inner fixed-point iterations: {total_inner}"));
    if !report.converged {
        report
            .notes
            .push("outer iteration cap reached before the stop tolerance".to_string());
    }
    let z = z_prev.expect("at least one outer step ran");
    Ok((y_prev, z, report))
}

/// Both sides of the averaged concavity inequality on `[t, T]`:
///
/// ```text
/// (1/(T-t)) INT_t^T c(f(s)) ds  <=  c( (1/(T-t)) INT_t^T f(s) ds )
/// ```
///
/// evaluated with one shared set of normalized trapezoid weights, which makes
/// the inequality a finite Jensen inequality — exact up to rounding, no
/// quadrature gap between the sides.
///
/// `samples` holds `f(t_j)` on all grid nodes (only `j >= t_index` is used).
/// The map `c` is audited for midpoint concavity over the sample range first;
/// a failed audit is a contract error, nonnegative samples are a precondition.
pub fn concavity_lemma_check(
    c: &dyn Fn(f64) -> f64,
    samples: &[f64],
    t_index: usize,
    grid: &TimeGrid,
) -> Result<(f64, f64)> {
    let n = grid.n_steps();
    if samples.len() != grid.n_nodes() {
        return Err(Error::Precondition(format!(
            "need one sample per node: {} vs {}",
            samples.len(),
            grid.n_nodes()
        )));
    }
    if t_index >= n {
        return Err(Error::Precondition(
            "averaging needs a nonempty interval: t must precede the horizon".into(),
        ));
    }
    let tail = &samples[t_index..];
    if tail.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Precondition(
            "samples must be nonnegative and finite".into(),
        ));
    }
    let lo = tail.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Midpoint concavity audit over the sample range.
    let span = (hi - lo).max(1e-9);
    let probes = 12usize;
    for a in 0..probes {
        for b in a..probes {
            let x = lo + span * a as f64 / (probes - 1) as f64;
            let y = lo + span * b as f64 / (probes - 1) as f64;
            let mid = c(0.5 * (x + y));
            let avg = 0.5 * (c(x) + c(y));
            let scale = 1.0 + mid.abs() + avg.abs();
            if mid < avg - 1e-12 * scale {
                return Err(Error::Contract(format!(
                    "map is not midpoint-concave on the sample range: \
                     c(({x:.4}+{y:.4})/2) = {mid:.6} < {avg:.6}"
                )));
            }
        }
    }

    let weights = grid.trapezoid_tail_weights(t_index);
    let total: f64 = weights.iter().sum();
    let mut lhs = 0.0;
    let mut mean = 0.0;
    for (off, &w) in weights.iter().enumerate() {
        let p = w / total;
        lhs += p * c(tail[off]);
        mean += p * tail[off];
    }
    Ok((lhs, c(mean)))
}

/// Verdict of a convergence-monitor check, with reasons when it fails.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MonitorVerdict {
    pub consistent: bool,
    pub reasons: Vec<String>,
}

impl MonitorVerdict {
    fn ok() -> Self {
        MonitorVerdict {
            consistent: true,
            reasons: Vec::new(),
        }
    }
    fn flag(&mut self, reason: String) {
        self.consistent = false;
        self.reasons.push(reason);
    }
}

/// Check an outer gap sequence against the qualitative conclusions of the
/// concave-modulus convergence argument: after a two-step burn-in (early gaps
/// are regression-noise dominated) the sequence must be non-increasing, obey
/// the one-step domination `phi_n <= C rho(phi_{n-1})` up to rounding slack,
/// and end below `tol`.
pub fn bihari_monitor(
    distance_seq: &[f64],
    modulus: &Modulus,
    c: f64,
    tol: f64,
) -> MonitorVerdict {
    const BURN_IN: usize = 2;
    let mut verdict = MonitorVerdict::ok();
    if distance_seq.is_empty() {
        verdict.flag("empty distance sequence".to_string());
        return verdict;
    }
    if distance_seq.iter().any(|v| !v.is_finite() || *v < 0.0) {
        verdict.flag("distances must be nonnegative and finite".to_string());
        return verdict;
    }
    for k in (BURN_IN + 1)..distance_seq.len() {
        let (prev, cur) = (distance_seq[k - 1], distance_seq[k]);
        if cur > prev * (1.0 + 1e-12) + 1e-15 {
            verdict.flag(format!(
                "gap increased after burn-in at step {k}: {prev:.3e} -> {cur:.3e}"
            ));
        }
        let bound = c * modulus.rho(prev) + 1e-12 * (1.0 + prev);
        if cur > bound {
            verdict.flag(format!(
                "one-step domination failed at step {k}: {cur:.3e} > C rho = {bound:.3e}"
            ));
        }
    }
    let last = *distance_seq.last().unwrap();
    if last >= tol {
        verdict.flag(format!("final gap {last:.3e} is not below tol {tol:.3e}"));
    }
    verdict
}

/// Result of the boundedness check on the iterate masses.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GronwallCheck {
    pub sup_mass: f64,
    pub bound: f64,
    pub consistent: bool,
}

/// Check that the per-step value masses `E INT |Y_n|^2 dt` stay below the
/// a-priori bound assembled from the data mass, the modulus' linear envelope
/// `rho(u) <= a + b u`, the kernel size `sup_l`, and the horizon:
///
/// ```text
/// sup_n E INT |Y_n|^2  <=  C (data_mass + L^2 T^2 a) exp(C L^2 T^2 b).
/// ```
pub fn gronwall_bound_check(
    norm_seq: &[f64],
    linear_bound: (f64, f64),
    sup_l: f64,
    horizon: f64,
    data_mass: f64,
    c: f64,
) -> GronwallCheck {
    let (a, b) = linear_bound;
    let l2t2 = sup_l * sup_l * horizon * horizon;
    let bound = c * (data_mass + l2t2 * a) * (c * l2t2 * b).exp();
    let sup_mass = norm_seq.iter().cloned().fold(0.0f64, f64::max);
    let consistent = norm_seq.iter().all(|v| v.is_finite()) && sup_mass <= bound;
    GronwallCheck {
        sup_mass,
        bound,
        consistent,
    }
}
