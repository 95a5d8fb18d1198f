//! Driver descriptions: the integrand `g(t, s, y, z, zeta)` of the backward
//! equation, together with the structural data the solvers need — a two-time
//! kernel `L(t, s)`, coefficient processes `r1, r2, r3` bounding the response to
//! each argument, and (for drivers that are not Lipschitz in `y`) a concavity
//! modulus.
//!
//! The declared structure is
//!
//! ```text
//! |g(t,s,y,z,zeta) - g(t,s,ybar,zbar,zetabar)|
//!     <= L(t,s) * ( r1(s)|y - ybar| + r2(s)|z - zbar| + r3(s)|zeta - zetabar| )
//! ```
//!
//! with the first term replaced by `rho(|y - ybar|^2)^(1/2)` when a modulus is
//! present. [`Driver::spot_check`] verifies the declaration empirically on
//! random samples, so a misdeclared driver fails fast instead of corrupting a
//! solve.

use std::fmt;
use std::sync::Arc;

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::model::grid::TimeGrid;
use crate::model::modulus::{f_example_raw, Modulus};
use crate::model::process::{PathRef, Process1P};

/// Two-time kernel `L(t, s)`, evaluated on the region `s >= t`.
#[derive(Clone)]
pub enum Kernel {
    Constant(f64),
    Custom {
        name: String,
        f: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    },
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::Constant(l) => write!(f, "Kernel::Constant({l})"),
            Kernel::Custom { name, .. } => write!(f, "Kernel::Custom({name})"),
        }
    }
}

impl Kernel {
    #[inline]
    pub fn eval(&self, t: f64, s: f64) -> f64 {
        match self {
            Kernel::Constant(l) => *l,
            Kernel::Custom { f, .. } => f(t, s),
        }
    }

    /// Supremum of `|L|` over the triangle `0 <= t <= s <= horizon`,
    /// exact for constants and a 65 x 65 grid scan otherwise.
    pub fn sup_abs(&self, horizon: f64) -> f64 {
        match self {
            Kernel::Constant(l) => l.abs(),
            Kernel::Custom { f, .. } => {
                let mut sup: f64 = 0.0;
                for a in 0..=64 {
                    let t = horizon * a as f64 / 64.0;
                    for b in a..=64 {
                        let s = horizon * b as f64 / 64.0;
                        sup = sup.max(f(t, s).abs());
                    }
                }
                sup
            }
        }
    }
}

/// A scalar coefficient process `r(s)`, possibly adapted to the driving noise.
#[derive(Clone, Debug)]
pub enum Coeff {
    Constant(f64),
    /// `base + slope * s`.
    Affine { base: f64, slope: f64 },
    /// `base + scale * min(|W_1(s)|, cap)` — bounded, adapted, genuinely random.
    AbsState { base: f64, scale: f64, cap: f64 },
}

impl Coeff {
    /// Does the coefficient depend on the path?
    pub fn is_stochastic(&self) -> bool {
        matches!(self, Coeff::AbsState { .. })
    }

    /// Evaluate at time `s`; stochastic coefficients read the Brownian state at
    /// node `j` of `path`.
    #[inline]
    pub fn eval(&self, s: f64, path: Option<(&PathRef<'_>, usize)>) -> f64 {
        match self {
            Coeff::Constant(c) => *c,
            Coeff::Affine { base, slope } => base + slope * s,
            Coeff::AbsState { base, scale, cap } => {
                let (p, j) = path.expect("stochastic coefficient evaluated without a path");
                base + scale * p.w(j, 0).abs().min(*cap)
            }
        }
    }

    /// Upper bound of the coefficient over `[0, horizon]`.
    pub fn sup_bound(&self, horizon: f64) -> f64 {
        match self {
            Coeff::Constant(c) => *c,
            Coeff::Affine { base, slope } => (base + slope * horizon).max(*base),
            Coeff::AbsState { base, scale, cap } => base + scale * cap,
        }
    }

    /// Lower bound of the coefficient over `[0, horizon]`.
    pub fn inf_bound(&self, horizon: f64) -> f64 {
        match self {
            Coeff::Constant(c) => *c,
            Coeff::Affine { base, slope } => (base + slope * horizon).min(*base),
            Coeff::AbsState { base, .. } => *base,
        }
    }

    fn validate(&self, what: &str, horizon: f64) -> Result<()> {
        let ok = match self {
            Coeff::Constant(c) => c.is_finite() && *c >= 0.0,
            Coeff::Affine { base, slope } => {
                base.is_finite() && slope.is_finite() && self.inf_bound(horizon) >= 0.0
            }
            Coeff::AbsState { base, scale, cap } => {
                base.is_finite() && *base >= 0.0 && *scale >= 0.0 && *cap > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "coefficient {what} must stay finite and nonnegative on [0, {horizon}]: {self:?}"
            )))
        }
    }
}

/// Kernel and coefficient values frozen at one `(t, s)` evaluation point, so the
/// hot loop pays for kernel/coefficient lookups once per node pair.
#[derive(Clone, Copy, Debug)]
pub struct CoeffSample {
    pub l: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
}

type CustomDriverFn =
    dyn Fn(f64, f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync;

/// The functional form of the driver.
#[derive(Clone)]
pub enum DriverKind {
    /// `g = 0`.
    Zero,
    /// `g_c = L (a_y r1 y_c + a_z r2 SUM_k z_ck + a_zeta r3 SUM_k zeta_ck + a_const)`.
    ///
    /// The mixing fractions must satisfy `|a| <= 1` so the declared coefficients
    /// dominate the true response.
    Linear {
        a_y: f64,
        a_z: f64,
        a_zeta: f64,
        a_const: f64,
    },
    /// `g_c = L ( f(y_c) + r2 SUM_k |z_ck| + r3 SUM_k |zeta_ck| )` where `f` is the
    /// capped square-root-log response — continuous and bounded but not Lipschitz
    /// in `y`, covered by the `u ln(1 + 1/u)` modulus.
    CappedLogMix { f_cap: f64 },
    /// A base driver with its `y` argument replaced by a tabulated process: the
    /// value fed to `base` at node `j`, path `p` is `y_frozen[j, p]`, regardless
    /// of the `y` passed in. Used by the outer fixed-point recursion.
    FrozenY {
        base: Box<DriverKind>,
        y_frozen: Arc<Process1P>,
    },
    Custom {
        name: String,
        f: Arc<CustomDriverFn>,
    },
}

impl fmt::Debug for DriverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriverKind::Zero => write!(f, "Zero"),
            DriverKind::Linear {
                a_y,
                a_z,
                a_zeta,
                a_const,
            } => write!(f, "Linear(a_y={a_y}, a_z={a_z}, a_zeta={a_zeta}, a_const={a_const})"),
            DriverKind::CappedLogMix { f_cap } => write!(f, "CappedLogMix(f_cap={f_cap})"),
            DriverKind::FrozenY { base, .. } => write!(f, "FrozenY({base:?})"),
            DriverKind::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

/// A complete driver description.
#[derive(Clone, Debug)]
pub struct Driver {
    pub kind: DriverKind,
    pub kernel: Kernel,
    /// Declared response coefficient to the `y` argument.
    pub r1: Coeff,
    /// Declared response coefficient to the `z` argument.
    pub r2: Coeff,
    /// Declared response coefficient to the diagonal-reflected `zeta` argument.
    pub r3: Coeff,
    /// Kernel integrability exponent used by [`Driver::kernel_condition`].
    pub q_exponent: f64,
    /// Concavity modulus when the driver is not Lipschitz in `y`.
    pub modulus: Option<Modulus>,
    /// Whether the driver actually reads `zeta = Z(s, t)`.
    pub uses_zeta: bool,
    /// Solution dimension `m`.
    pub dim_m: usize,
    /// Noise dimension `d`.
    pub dim_d: usize,
}

impl Driver {
    /// The trivial driver `g = 0`.
    pub fn zero(dim_m: usize, dim_d: usize) -> Self {
        Driver {
            kind: DriverKind::Zero,
            kernel: Kernel::Constant(0.0),
            r1: Coeff::Constant(0.0),
            r2: Coeff::Constant(0.0),
            r3: Coeff::Constant(0.0),
            q_exponent: 4.0,
            modulus: None,
            uses_zeta: false,
            dim_m,
            dim_d,
        }
    }

    /// A scalar linear driver with constant kernel level `l` and unit
    /// coefficients: `g = l (a_y y + a_z z + a_zeta zeta + a_const)`.
    pub fn linear_scalar(l: f64, a_y: f64, a_z: f64, a_zeta: f64, a_const: f64) -> Self {
        Driver {
            kind: DriverKind::Linear {
                a_y,
                a_z,
                a_zeta,
                a_const,
            },
            kernel: Kernel::Constant(l),
            r1: Coeff::Constant(if a_y != 0.0 { 1.0 } else { 0.0 }),
            r2: Coeff::Constant(if a_z != 0.0 { 1.0 } else { 0.0 }),
            r3: Coeff::Constant(if a_zeta != 0.0 { 1.0 } else { 0.0 }),
            q_exponent: 4.0,
            modulus: None,
            uses_zeta: a_zeta != 0.0,
            dim_m: 1,
            dim_d: 1,
        }
    }

    /// The scalar mixed driver `g = l (f(y) + |z| + |zeta|)` with the capped
    /// square-root-log response in `y`; carries the `u ln(1 + 1/u)` modulus.
    pub fn capped_log_mix(l: f64, f_cap: f64) -> Result<Self> {
        if !(f_cap > 0.0 && f_cap < 1.0) {
            return Err(Error::Config(format!(
                "response cap must lie in (0, 1); got {f_cap}"
            )));
        }
        Ok(Driver {
            kind: DriverKind::CappedLogMix { f_cap },
            kernel: Kernel::Constant(l),
            r1: Coeff::Constant(1.0),
            r2: Coeff::Constant(1.0),
            r3: Coeff::Constant(1.0),
            q_exponent: 4.0,
            modulus: Some(Modulus::x_log1p()),
            uses_zeta: true,
            dim_m: 1,
            dim_d: 1,
        })
    }

    /// Replace the `y` argument with a tabulated process, keeping everything
    /// else (kernel, coefficients, dimensions) intact. The frozen driver no
    /// longer reacts to the `y` iterate — the table value is substituted at
    /// evaluation time — so the concavity modulus is dropped: the remaining
    /// dependence on the kernel arguments is globally Lipschitz. The `y`
    /// coefficient stays as declared; it still scales the (now exogenous)
    /// frozen term and over-counting it in weight defaults is harmless.
    pub fn freeze_y(&self, y_frozen: Arc<Process1P>) -> Driver {
        let mut out = self.clone();
        out.kind = DriverKind::FrozenY {
            base: Box::new(self.kind.clone()),
            y_frozen,
        };
        out.modulus = None;
        out
    }

    /// Any stochastic coefficient present?
    pub fn has_stochastic_coeff(&self) -> bool {
        self.r1.is_stochastic() || self.r2.is_stochastic() || self.r3.is_stochastic()
    }

    /// Sample the kernel and coefficients at evaluation point `(t, s)`; `path`
    /// and `j` feed stochastic coefficients.
    #[inline]
    pub fn coeff_sample(
        &self,
        t: f64,
        s: f64,
        path: Option<(&PathRef<'_>, usize)>,
    ) -> CoeffSample {
        CoeffSample {
            l: self.kernel.eval(t, s),
            r1: self.r1.eval(s, path),
            r2: self.r2.eval(s, path),
            r3: self.r3.eval(s, path),
        }
    }

    /// Evaluate the driver with a frozen [`CoeffSample`]. The node index `j`
    /// and path index `p` locate tabulated lookups for frozen-`y` drivers;
    /// `y` has length `m`, `z` and `zeta` length `m * d` (row-major), and the
    /// result lands in `out` (length `m`).
    #[allow(clippy::too_many_arguments)] // hot inner-loop eval; a params struct would obscure it
    #[inline]
    pub fn eval_with(
        &self,
        c: &CoeffSample,
        t: f64,
        s: f64,
        j: usize,
        p: usize,
        y: &[f64],
        z: &[f64],
        zeta: &[f64],
        out: &mut [f64],
    ) {
        eval_kind(
            &self.kind, c, t, s, j, p, y, z, zeta, out, self.dim_m, self.dim_d,
        );
    }

    /// `sup_t (INT_t^T L(t, s)^q ds)^(2/q)` by trapezoid on the grid — the
    /// kernel-size functional that scales every contraction estimate.
    pub fn kernel_condition(&self, grid: &TimeGrid) -> f64 {
        let q = self.q_exponent;
        let mut sup: f64 = 0.0;
        for i in 0..grid.n_nodes() {
            let t = grid.node(i);
            let mut integral = 0.0;
            for (off, wq) in grid.trapezoid_tail_weights(i).iter().enumerate() {
                let s = grid.node(i + off);
                integral += wq * self.kernel.eval(t, s).abs().powf(q);
            }
            sup = sup.max(integral.powf(2.0 / q));
        }
        sup
    }

    /// Nodewise `alpha^2 = r1^2 + r2^2 + r3^2` for deterministic coefficients;
    /// errors when any coefficient is stochastic (then `alpha^2` is a process
    /// and callers must sample it per path).
    pub fn alpha2_nodes(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        if self.has_stochastic_coeff() {
            return Err(Error::Precondition(
                "alpha^2 is path-dependent here; sample it per path instead".into(),
            ));
        }
        Ok((0..grid.n_nodes())
            .map(|j| {
                let s = grid.node(j);
                let (r1, r2, r3) = (
                    self.r1.eval(s, None),
                    self.r2.eval(s, None),
                    self.r3.eval(s, None),
                );
                r1 * r1 + r2 * r2 + r3 * r3
            })
            .collect())
    }

    /// Default metric exponent: `max(8, 4 * sup L^2 * sup(alpha^2) * T)`, large
    /// enough that the fixed-point map contracts comfortably in ordinary cases.
    pub fn default_beta(&self, horizon: f64) -> f64 {
        let l2 = self.kernel.sup_abs(horizon).powi(2);
        let a2 = self.r1.sup_bound(horizon).powi(2)
            + self.r2.sup_bound(horizon).powi(2)
            + self.r3.sup_bound(horizon).powi(2);
        (4.0 * l2 * a2 * horizon).max(8.0)
    }

    /// Structural validation of the declaration itself.
    pub fn validate(&self, horizon: f64) -> Result<()> {
        if self.dim_m == 0 || self.dim_d == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive (m = {}, d = {})",
                self.dim_m, self.dim_d
            )));
        }
        if !self.q_exponent.is_finite() || self.q_exponent <= 2.0 {
            return Err(Error::Config(format!(
                "kernel exponent q must be finite and > 2, got {}",
                self.q_exponent
            )));
        }
        self.r1.validate("r1", horizon)?;
        self.r2.validate("r2", horizon)?;
        self.r3.validate("r3", horizon)?;
        validate_kind(&self.kind, self.dim_m)?;
        Ok(())
    }

    /// Empirical check of the declared response bound on `n_samples` random
    /// argument pairs across several scales. Returns a contract error on the
    /// first violation.
    pub fn spot_check(&self, horizon: f64, seed: u64, n_samples: usize) -> Result<()> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let m = self.dim_m;
        let d = self.dim_d;
        let scales = [1e-4, 1e-2, 1.0, 10.0];
        let mut y = vec![0.0; m];
        let mut yb = vec![0.0; m];
        let mut z = vec![0.0; m * d];
        let mut zb = vec![0.0; m * d];
        let mut ze = vec![0.0; m * d];
        let mut zeb = vec![0.0; m * d];
        let mut g = vec![0.0; m];
        let mut gb = vec![0.0; m];
        for n in 0..n_samples {
            let sc = scales[n % scales.len()];
            let t = horizon * uniform(&mut rng);
            let s = t + (horizon - t) * uniform(&mut rng);
            for v in y.iter_mut().chain(yb.iter_mut()) {
                *v = sc * gauss(&mut rng);
            }
            for v in z
                .iter_mut()
                .chain(zb.iter_mut())
                .chain(ze.iter_mut())
                .chain(zeb.iter_mut())
            {
                *v = sc * gauss(&mut rng);
            }
            // One shared coefficient draw for both evaluations (same scenario,
            // perturbed arguments). Stochastic coefficients get a synthetic
            // Brownian state of the right scale.
            let wval = [s.sqrt() * gauss(&mut rng)];
            let pr = PathRef::Owned { w: &wval, dim: 1 };
            let c = self.coeff_sample(t, s, Some((&pr, 0)));
            self.eval_with(&c, t, s, 0, 0, &y, &z, &ze, &mut g);
            self.eval_with(&c, t, s, 0, 0, &yb, &zb, &zeb, &mut gb);
            let dg = l2_dist(&g, &gb);
            let dy = l2_dist(&y, &yb);
            let dz = l2_dist(&z, &zb);
            let dze = l2_dist(&ze, &zeb);
            let y_term = match &self.modulus {
                Some(rho) => rho.rho(dy * dy).sqrt(),
                None => c.r1 * dy,
            };
            let bound = c.l.abs() * (y_term + c.r2 * dz + c.r3 * dze);
            if dg > bound * (1.0 + 1e-9) + 1e-12 {
                return Err(Error::Contract(format!(
                    "declared response bound violated at sample {n}: |dg| = {dg} > {bound} \
                     (t = {t}, s = {s}, scale = {sc})"
                )));
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn eval_kind(
    kind: &DriverKind,
    c: &CoeffSample,
    t: f64,
    s: f64,
    j: usize,
    p: usize,
    y: &[f64],
    z: &[f64],
    zeta: &[f64],
    out: &mut [f64],
    m: usize,
    d: usize,
) {
    debug_assert_eq!(y.len(), m);
    debug_assert_eq!(z.len(), m * d);
    debug_assert_eq!(zeta.len(), m * d);
    debug_assert_eq!(out.len(), m);
    match kind {
        DriverKind::Zero => out.fill(0.0),
        DriverKind::Linear {
            a_y,
            a_z,
            a_zeta,
            a_const,
        } => {
            for cix in 0..m {
                let zsum: f64 = z[cix * d..(cix + 1) * d].iter().sum();
                let zesum: f64 = zeta[cix * d..(cix + 1) * d].iter().sum();
                out[cix] = c.l
                    * (a_y * c.r1 * y[cix]
                        + a_z * c.r2 * zsum
                        + a_zeta * c.r3 * zesum
                        + a_const);
            }
        }
        DriverKind::CappedLogMix { f_cap } => {
            for cix in 0..m {
                let zsum: f64 = z[cix * d..(cix + 1) * d].iter().map(|v| v.abs()).sum();
                let zesum: f64 = zeta[cix * d..(cix + 1) * d].iter().map(|v| v.abs()).sum();
                out[cix] =
                    c.l * (f_example_raw(y[cix], *f_cap) + c.r2 * zsum + c.r3 * zesum);
            }
        }
        DriverKind::FrozenY { base, y_frozen } => {
            let yf = y_frozen.at_slice(j, p);
            eval_kind(base, c, t, s, j, p, yf, z, zeta, out, m, d);
        }
        DriverKind::Custom { f, .. } => f(t, s, y, z, zeta, out),
    }
}

fn validate_kind(kind: &DriverKind, m: usize) -> Result<()> {
    match kind {
        DriverKind::Linear {
            a_y, a_z, a_zeta, ..
        } => {
            if a_y.abs() > 1.0 || a_z.abs() > 1.0 || a_zeta.abs() > 1.0 {
                return Err(Error::Config(
                    "linear mixing fractions must lie in [-1, 1] so the declared \
                     coefficients dominate the response"
                        .into(),
                ));
            }
            Ok(())
        }
        DriverKind::CappedLogMix { f_cap } => {
            if !(*f_cap > 0.0 && *f_cap < 1.0) {
                return Err(Error::Config(format!(
                    "response cap must lie in (0, 1); got {f_cap}"
                )));
            }
            Ok(())
        }
        DriverKind::FrozenY { base, y_frozen } => {
            if y_frozen.dim_m() != m {
                return Err(Error::Config(format!(
                    "frozen state has dimension {} but the driver expects {m}",
                    y_frozen.dim_m()
                )));
            }
            validate_kind(base, m)
        }
        DriverKind::Zero | DriverKind::Custom { .. } => Ok(()),
    }
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[inline]
fn uniform(rng: &mut ChaCha12Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn gauss(rng: &mut ChaCha12Rng) -> f64 {
    crate::paths::standard_normal_from_bits(rng.next_u64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_driver_evaluates_to_zero() {
        let drv = Driver::zero(2, 3);
        let c = drv.coeff_sample(0.2, 0.7, None);
        let mut out = vec![9.0; 2];
        drv.eval_with(&c, 0.2, 0.7, 0, 0, &[1.0, 2.0], &[1.0; 6], &[1.0; 6], &mut out);
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn linear_driver_hand_value() {
        // g = 2 (0.5 y + 0.25 z + 0.25 zeta + 0.1) at (y, z, zeta) = (1, 2, 3):
        // 2 (0.5 + 0.5 + 0.75 + 0.1) = 3.7.
        let drv = Driver::linear_scalar(2.0, 0.5, 0.25, 0.25, 0.1);
        let c = drv.coeff_sample(0.1, 0.4, None);
        let mut out = [0.0];
        drv.eval_with(&c, 0.1, 0.4, 0, 0, &[1.0], &[2.0], &[3.0], &mut out);
        assert_relative_eq!(out[0], 3.7, epsilon = 1e-15);
        assert!(drv.uses_zeta);
        drv.validate(1.0).unwrap();
    }

    #[test]
    fn frozen_state_overrides_the_y_argument() {
        let drv = Driver::linear_scalar(1.0, 1.0, 0.0, 0.0, 0.0);
        let mut table = Process1P::zeros(3, 2, 1, true);
        *table.at_mut(1, 1, 0) = 5.0;
        let frozen = drv.freeze_y(Arc::new(table));
        let c = frozen.coeff_sample(0.0, 0.5, None);
        let mut out = [0.0];
        // y argument says 100, the table at (j=1, p=1) says 5; the table wins.
        frozen.eval_with(&c, 0.0, 0.5, 1, 1, &[100.0], &[0.0], &[0.0], &mut out);
        assert_relative_eq!(out[0], 5.0, epsilon = 1e-15);
        // Freezing drops the modulus (the remaining arguments are Lipschitz)
        // but keeps the declared coefficients.
        assert!(frozen.modulus.is_none());
        assert!(matches!(frozen.r1, Coeff::Constant(c) if c == 1.0));
    }

    #[test]
    fn default_beta_floors_at_eight_and_scales_up() {
        let small = Driver::linear_scalar(0.1, 1.0, 0.0, 0.0, 0.0);
        assert_eq!(small.default_beta(1.0), 8.0);
        // L = 3, all three unit coefficients: 4 * 9 * 3 * 1 = 108.
        let big = Driver::linear_scalar(3.0, 0.5, 0.5, 0.5, 0.0);
        assert_relative_eq!(big.default_beta(1.0), 108.0, epsilon = 1e-12);
    }

    #[test]
    fn kernel_condition_constant_and_exponential() {
        let grid = TimeGrid::uniform(1.0, 64).unwrap();
        let drv = Driver::linear_scalar(3.0, 1.0, 0.0, 0.0, 0.0);
        // q = 4: (sup_t INT_t^T 3^4 ds)^(2/4) = 81^(1/2) = 9, exact under trapezoid.
        assert_relative_eq!(drv.kernel_condition(&grid), 9.0, epsilon = 1e-12);

        let mut exp_drv = Driver::linear_scalar(1.0, 1.0, 0.0, 0.0, 0.0);
        exp_drv.kernel = Kernel::Custom {
            name: "exp".into(),
            f: Arc::new(|t, s| (s - t).exp()),
        };
        // (sup_t INT_t^T e^{4(s-t)} ds)^(1/2) = ((e^4 - 1) / 4)^(1/2) at t = 0.
        let exact = ((4.0f64.exp() - 1.0) / 4.0).sqrt();
        let approx = exp_drv.kernel_condition(&grid);
        assert!(
            (approx - exact).abs() / exact < 1e-3,
            "{approx} vs {exact}"
        );
    }

    #[test]
    fn alpha2_nodes_and_stochastic_gate() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let drv = Driver::linear_scalar(1.0, 0.5, 0.5, 0.5, 0.0);
        let a2 = drv.alpha2_nodes(&grid).unwrap();
        for v in a2 {
            assert_relative_eq!(v, 3.0, epsilon = 1e-15);
        }
        let mut stoch = drv.clone();
        stoch.r2 = Coeff::AbsState {
            base: 1.0,
            scale: 0.5,
            cap: 2.0,
        };
        assert!(stoch.has_stochastic_coeff());
        assert!(stoch.alpha2_nodes(&grid).is_err());
        // sup bound of the stochastic coefficient: 1 + 0.5 * 2 = 2.
        assert_relative_eq!(stoch.r2.sup_bound(1.0), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn spot_check_accepts_honest_declarations() {
        Driver::linear_scalar(2.0, 0.8, 0.6, 0.4, 0.3)
            .spot_check(1.0, 7, 4096)
            .unwrap();
        Driver::capped_log_mix(0.3, 0.1)
            .unwrap()
            .spot_check(1.0, 11, 4096)
            .unwrap();
    }

    #[test]
    fn spot_check_rejects_understated_coefficients() {
        // The custom body responds with slope 2 in y, but the declaration only
        // admits slope 1.
        let mut drv = Driver::linear_scalar(1.0, 1.0, 0.0, 0.0, 0.0);
        drv.kind = DriverKind::Custom {
            name: "overdriven".into(),
            f: Arc::new(|_t, _s, y, _z, _zeta, out| out[0] = 2.0 * y[0]),
        };
        let err = drv.spot_check(1.0, 3, 512).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err:?}");
    }

    #[test]
    fn mixing_fractions_outside_unit_interval_are_rejected() {
        let drv = Driver::linear_scalar(1.0, 1.5, 0.0, 0.0, 0.0);
        assert!(matches!(drv.validate(1.0), Err(Error::Config(_))));
    }
}
