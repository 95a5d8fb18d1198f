//! Exponential time weights for the solver's contraction metric and for the
//! a-priori energy estimates.
//!
//! The weight at time `t` is `exp(beta * A(t))` where `A(t) = INT_0^t alpha^2(s) ds`
//! accumulates the squared coefficient process `alpha^2 = r1^2 + r2^2 + r3^2`,
//! assumed bounded below by a positive floor. A second regime replaces `A` with
//! `A*(t) = INT_0^t (alpha^2(s))^(p/(2-p)) ds` for an exponent `p` in `(1, 2)`;
//! that regime needs `alpha^2 >= 1`, which makes `A* >= A` pointwise and the
//! weights correspondingly heavier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::grid::TimeGrid;

/// Which accumulated clock drives the exponential weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightMode {
    /// `A(t) = INT alpha^2`.
    #[serde(rename = "A")]
    Plain,
    /// `A*(t) = INT (alpha^2)^(p/(2-p))`, valid only when `alpha^2 >= 1`.
    #[serde(rename = "A_star")]
    AStar,
}

/// Precomputed weight data on a fixed grid (deterministic coefficients).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightProfile {
    /// `alpha^2` sampled at each grid node.
    pub alpha2: Vec<f64>,
    /// `A(t_j)` by cumulative trapezoid.
    pub a_cum: Vec<f64>,
    /// `A*(t_j)` by cumulative trapezoid of `(alpha^2)^(p/(2-p))`.
    pub a_star_cum: Vec<f64>,
    /// Weight exponent multiplier.
    pub beta: f64,
    /// The exponent `p` used in the `A*` regime.
    pub p_exponent: f64,
    /// Active regime.
    pub mode: WeightMode,
    /// `min_j alpha^2(t_j)`, the observed lower floor.
    pub delta_floor: f64,
}

impl WeightProfile {
    /// The accumulated clock actually in force at node `j`.
    #[inline]
    pub fn clock(&self, j: usize) -> f64 {
        match self.mode {
            WeightMode::Plain => self.a_cum[j],
            WeightMode::AStar => self.a_star_cum[j],
        }
    }

    /// `exp(beta * clock(t_j))`.
    #[inline]
    pub fn weight(&self, j: usize) -> f64 {
        (self.beta * self.clock(j)).exp()
    }

    /// Same profile with a different `beta` (the clocks are beta-independent).
    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        if !beta.is_finite() || beta <= 0.0 {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        let mut out = self.clone();
        out.beta = beta;
        Ok(out)
    }
}

/// Build a [`WeightProfile`] from nodewise samples of `alpha^2`.
///
/// Errors: `Precondition` when `alpha^2` violates its floor (`<= 0`, or `< 1`
/// in the `A*` regime); `Config` for `p` outside `(1, 2)`, nonpositive `beta`,
/// or a length mismatch with the grid.
pub fn build_weight_profile(
    grid: &TimeGrid,
    alpha2: &[f64],
    beta: f64,
    p_exponent: f64,
    mode: WeightMode,
) -> Result<WeightProfile> {
    if alpha2.len() != grid.n_nodes() {
        return Err(Error::Config(format!(
            "alpha^2 has {} samples but the grid has {} nodes",
            alpha2.len(),
            grid.n_nodes()
        )));
    }
    if !beta.is_finite() || beta <= 0.0 {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    if !(p_exponent > 1.0 && p_exponent < 2.0) {
        return Err(Error::Config(format!(
            "exponent p must lie in (1, 2), got {p_exponent}"
        )));
    }
    let mut delta_floor = f64::INFINITY;
    for (j, &a) in alpha2.iter().enumerate() {
        if !a.is_finite() || a <= 0.0 {
            return Err(Error::Precondition(format!(
                "alpha^2 must stay positive; node {j} has {a}"
            )));
        }
        delta_floor = delta_floor.min(a);
    }
    if mode == WeightMode::AStar && delta_floor < 1.0 {
        return Err(Error::Precondition(format!(
            "the A* regime needs alpha^2 >= 1 everywhere; found floor {delta_floor}"
        )));
    }
    let q = p_exponent / (2.0 - p_exponent);
    let a_cum = grid.cumulative_trapezoid(alpha2);
    let powered: Vec<f64> = alpha2.iter().map(|&a| a.powf(q)).collect();
    let a_star_cum = grid.cumulative_trapezoid(&powered);
    Ok(WeightProfile {
        alpha2: alpha2.to_vec(),
        a_cum,
        a_star_cum,
        beta,
        p_exponent,
        mode,
        delta_floor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid() -> TimeGrid {
        TimeGrid::uniform(1.0, 4).unwrap()
    }

    #[test]
    fn constant_alpha_gives_linear_clock() {
        let g = grid();
        let alpha2 = vec![2.0; g.n_nodes()];
        let w = build_weight_profile(&g, &alpha2, 3.0, 1.5, WeightMode::Plain).unwrap();
        for j in 0..g.n_nodes() {
            // Trapezoid is exact on constants: A(t) = 2 t.
            assert_relative_eq!(w.a_cum[j], 2.0 * g.node(j), epsilon = 1e-15);
            assert_relative_eq!(
                w.weight(j),
                (3.0 * 2.0 * g.node(j)).exp(),
                epsilon = 1e-12
            );
        }
        assert_eq!(w.delta_floor, 2.0);
    }

    #[test]
    fn a_star_clock_dominates_plain_clock() {
        let g = grid();
        // alpha^2 = 4, p = 1.5 => exponent q = 3, so the powered rate is 64.
        let alpha2 = vec![4.0; g.n_nodes()];
        let w = build_weight_profile(&g, &alpha2, 1.0, 1.5, WeightMode::AStar).unwrap();
        for j in 0..g.n_nodes() {
            assert_relative_eq!(w.a_star_cum[j], 64.0 * g.node(j), epsilon = 1e-12);
            assert!(w.a_star_cum[j] >= w.a_cum[j]);
            assert_relative_eq!(w.clock(j), w.a_star_cum[j], epsilon = 1e-15);
        }
        // At the unit floor the two clocks coincide exactly.
        let ones = vec![1.0; g.n_nodes()];
        let w1 = build_weight_profile(&g, &ones, 1.0, 1.7, WeightMode::AStar).unwrap();
        for j in 0..g.n_nodes() {
            assert_relative_eq!(w1.a_star_cum[j], w1.a_cum[j], epsilon = 1e-15);
        }
    }

    #[test]
    fn rejects_invalid_configurations() {
        let g = grid();
        let ok = vec![1.5; g.n_nodes()];
        // p outside (1, 2).
        assert!(build_weight_profile(&g, &ok, 1.0, 1.0, WeightMode::Plain).is_err());
        assert!(build_weight_profile(&g, &ok, 1.0, 2.0, WeightMode::Plain).is_err());
        // Nonpositive beta.
        assert!(build_weight_profile(&g, &ok, 0.0, 1.5, WeightMode::Plain).is_err());
        // Length mismatch.
        assert!(build_weight_profile(&g, &ok[..3], 1.0, 1.5, WeightMode::Plain).is_err());
        // alpha^2 floor violations.
        let mut bad = ok.clone();
        bad[2] = 0.0;
        let err = build_weight_profile(&g, &bad, 1.0, 1.5, WeightMode::Plain).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        let half = vec![0.5; g.n_nodes()];
        let err = build_weight_profile(&g, &half, 1.0, 1.5, WeightMode::AStar).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        // The same samples are fine in the plain regime.
        assert!(build_weight_profile(&g, &half, 1.0, 1.5, WeightMode::Plain).is_ok());
    }

    #[test]
    fn with_beta_rescales_only_the_exponent() {
        let g = grid();
        let alpha2 = vec![1.0; g.n_nodes()];
        let w = build_weight_profile(&g, &alpha2, 2.0, 1.5, WeightMode::Plain).unwrap();
        let w2 = w.with_beta(4.0).unwrap();
        assert_eq!(w.a_cum, w2.a_cum);
        for j in 0..g.n_nodes() {
            assert_relative_eq!(w2.weight(j), w.weight(j).powi(2), epsilon = 1e-12);
        }
        assert!(w.with_beta(-1.0).is_err());
    }
}
