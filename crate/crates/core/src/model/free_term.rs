//! Free terms: the terminal data `psi(t)` of the backward equation, one
//! square-integrable random variable per time node, measurable with respect to
//! the full path.
//!
//! A free term declares which path functionals it reads (its *features*), so
//! downstream consumers — the regression basis, the nested Monte Carlo oracle's
//! dependence probe — can reason about it without inspecting the closure.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::grid::TimeGrid;
use crate::model::process::{PathEnsemble, PathRef, Process1P};

/// Path functionals a free term may read, beyond deterministic time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Feature {
    /// `W(t_i)` — the Brownian state at the evaluation node.
    CurrentState,
    /// `W(T)` — the Brownian state at the horizon.
    TerminalState,
}

type CustomFreeTermFn = dyn Fn(f64, usize, &PathRef<'_>, &TimeGrid, &mut [f64]) + Send + Sync;

/// The functional form of the free term.
#[derive(Clone)]
pub enum FreeTermKind {
    /// `psi(t) = c`.
    Constant { value: f64 },
    /// `psi(t) = SUM_k coeffs[k] t^k` (deterministic).
    TimePoly { coeffs: Vec<f64> },
    /// `psi(t) = constant + t_coeff t + (w_terminal + t_times_w_terminal t) W_1(T)
    ///          + w_terminal_sq (W_1(T)^2 - T)`.
    ///
    /// Every conditional expectation of this family is a polynomial in the
    /// conditioning state, which keeps the default regression basis exact.
    BrownianPoly {
        constant: f64,
        t_coeff: f64,
        w_terminal: f64,
        t_times_w_terminal: f64,
        w_terminal_sq: f64,
    },
    /// Arbitrary path functional; the declared features must be honest.
    Custom {
        name: String,
        features: Vec<Feature>,
        f: Arc<CustomFreeTermFn>,
    },
}

impl fmt::Debug for FreeTermKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FreeTermKind::Constant { value } => write!(f, "Constant({value})"),
            FreeTermKind::TimePoly { coeffs } => write!(f, "TimePoly({coeffs:?})"),
            FreeTermKind::BrownianPoly {
                constant,
                t_coeff,
                w_terminal,
                t_times_w_terminal,
                w_terminal_sq,
            } => write!(
                f,
                "BrownianPoly(c={constant}, t={t_coeff}, wT={w_terminal}, \
                 t.wT={t_times_w_terminal}, wT2={w_terminal_sq})"
            ),
            FreeTermKind::Custom { name, features, .. } => {
                write!(f, "Custom({name}, features={features:?})")
            }
        }
    }
}

/// Terminal data `psi(t_i)` with its feature declaration.
#[derive(Clone, Debug)]
pub struct FreeTerm {
    pub kind: FreeTermKind,
    pub dim_m: usize,
}

impl FreeTerm {
    pub fn constant(value: f64) -> Self {
        FreeTerm {
            kind: FreeTermKind::Constant { value },
            dim_m: 1,
        }
    }

    pub fn time_poly(coeffs: Vec<f64>) -> Self {
        FreeTerm {
            kind: FreeTermKind::TimePoly { coeffs },
            dim_m: 1,
        }
    }

    /// `psi(t) = t W_1(T)` — the workhorse closed-form example.
    pub fn t_times_terminal() -> Self {
        Self::brownian_poly(0.0, 0.0, 0.0, 1.0, 0.0)
    }

    /// `psi(t) = W_1(T)`.
    pub fn terminal_state() -> Self {
        Self::brownian_poly(0.0, 0.0, 1.0, 0.0, 0.0)
    }

    pub fn brownian_poly(
        constant: f64,
        t_coeff: f64,
        w_terminal: f64,
        t_times_w_terminal: f64,
        w_terminal_sq: f64,
    ) -> Self {
        FreeTerm {
            kind: FreeTermKind::BrownianPoly {
                constant,
                t_coeff,
                w_terminal,
                t_times_w_terminal,
                w_terminal_sq,
            },
            dim_m: 1,
        }
    }

    pub fn custom(
        name: &str,
        features: Vec<Feature>,
        dim_m: usize,
        f: Arc<CustomFreeTermFn>,
    ) -> Self {
        FreeTerm {
            kind: FreeTermKind::Custom {
                name: name.to_string(),
                features,
                f,
            },
            dim_m,
        }
    }

    /// The declared path features.
    pub fn features(&self) -> Vec<Feature> {
        match &self.kind {
            FreeTermKind::Constant { .. } | FreeTermKind::TimePoly { .. } => vec![],
            FreeTermKind::BrownianPoly {
                w_terminal,
                t_times_w_terminal,
                w_terminal_sq,
                ..
            } => {
                if *w_terminal != 0.0 || *t_times_w_terminal != 0.0 || *w_terminal_sq != 0.0 {
                    vec![Feature::TerminalState]
                } else {
                    vec![]
                }
            }
            FreeTermKind::Custom { features, .. } => features.clone(),
        }
    }

    /// Evaluate `psi(t_i)` along one trajectory into `out` (length `dim_m`).
    pub fn eval(&self, grid: &TimeGrid, i: usize, path: &PathRef<'_>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim_m);
        let t = grid.node(i);
        match &self.kind {
            FreeTermKind::Constant { value } => out.fill(*value),
            FreeTermKind::TimePoly { coeffs } => {
                let mut v = 0.0;
                for &c in coeffs.iter().rev() {
                    v = v * t + c;
                }
                out.fill(v);
            }
            FreeTermKind::BrownianPoly {
                constant,
                t_coeff,
                w_terminal,
                t_times_w_terminal,
                w_terminal_sq,
            } => {
                let n = grid.n_steps();
                let wt = path.w(n, 0);
                out[0] = constant
                    + t_coeff * t
                    + (w_terminal + t_times_w_terminal * t) * wt
                    + w_terminal_sq * (wt * wt - grid.horizon());
            }
            FreeTermKind::Custom { f, .. } => f(t, i, path, grid, out),
        }
    }

    /// Evaluate the free term at every node on every path of the ensemble.
    ///
    /// The resulting table is flagged adapted only when the free term reads no
    /// terminal information. Errors when any value is non-finite (the free term
    /// must have finite second moments on the sample).
    pub fn tabulate(&self, ens: &PathEnsemble) -> Result<Process1P> {
        let grid = ens.grid();
        let n_nodes = grid.n_nodes();
        let adapted = !self.features().contains(&Feature::TerminalState);
        let mut table = Process1P::zeros(n_nodes, ens.n_paths(), self.dim_m, adapted);
        for i in 0..n_nodes {
            let slice = table.slice_mut(i);
            for p in 0..ens.n_paths() {
                let path = ens.path(p);
                self.eval(grid, i, &path, &mut slice[p * self.dim_m..(p + 1) * self.dim_m]);
            }
        }
        table.validate_finite("free term")?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim_m == 0 {
            return Err(Error::Config("free term dimension must be positive".into()));
        }
        if let FreeTermKind::Custom { features, name, .. } = &self.kind {
            let mut seen = Vec::new();
            for f in features {
                if seen.contains(f) {
                    return Err(Error::Config(format!(
                        "free term {name} declares feature {f:?} twice"
                    )));
                }
                seen.push(*f);
            }
        }
        Ok(())
    }
}
