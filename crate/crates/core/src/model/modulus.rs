//! Concavity moduli: the nondecreasing concave functions `rho` with `rho(0) = 0` that
//! quantify how a driver responds to `y`-perturbations when it is not Lipschitz in `y`
//! (the bound reads `|g(..,y,..) - g(..,ybar,..)| <= L * rho(|y - ybar|^2)^(1/2)`).
//!
//! Three standard moduli are built in, all of the borderline log type whose Osgood
//! integral `INT_0+ du/rho(u)` diverges, so uniqueness arguments still apply:
//!
//! * `u ln(1/u)` on `[0, cap]`, continued linearly with its left slope;
//! * `u ln(1/u) ln ln(1/u)` on `[0, cap]`, continued linearly;
//! * `u ln(1 + 1/u)` on `(0, 1)`, constant `ln 2` beyond.
//!
//! Each modulus carries a linear domination certificate `(a, b)` with
//! `rho(u) <= a + b u`, fitted once by a numeric scan with 10% headroom.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Upper end of the scan window used to fit the linear domination certificate.
const CERT_SCAN_MAX: f64 = 100.0;
/// Number of log-spaced scan points.
const CERT_SCAN_POINTS: usize = 4000;
/// Multiplicative headroom applied to the fitted certificate.
const CERT_HEADROOM: f64 = 1.1;

#[derive(Clone)]
enum ModulusImpl {
    /// `u ln(1/u)` on `[0, cap]`, tangent continuation beyond.
    XLogCapped { cap: f64 },
    /// `u ln(1/u) ln ln(1/u)` on `[0, cap]`, tangent continuation beyond.
    XLogLogCapped { cap: f64 },
    /// `u ln(1 + 1/u)` on `(0, 1)`, constant `ln 2` beyond.
    XLog1p,
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

/// A concavity modulus together with its linear domination certificate.
#[derive(Clone)]
pub struct Modulus {
    name: String,
    imp: ModulusImpl,
    /// `(a, b)` with `rho(u) <= a + b u` on the scanned range (and, by concavity, beyond).
    pub linear_bound: (f64, f64),
}

impl fmt::Debug for Modulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Modulus")
            .field("name", &self.name)
            .field("linear_bound", &self.linear_bound)
            .finish()
    }
}

fn x_log_capped(u: f64, cap: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else if u <= cap {
        u * (1.0 / u).ln()
    } else {
        // Tangent continuation with the left slope ln(1/cap) - 1.
        cap * (1.0 / cap).ln() + ((1.0 / cap).ln() - 1.0) * (u - cap)
    }
}

fn x_log_log_capped(u: f64, cap: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else if u <= cap {
        let l = (1.0 / u).ln();
        u * l * l.ln()
    } else {
        let l = (1.0 / cap).ln();
        let slope = l * l.ln() - l.ln() - 1.0;
        cap * l * l.ln() + slope * (u - cap)
    }
}

fn x_log1p_inv(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else if u < 1.0 {
        u * (1.0 + 1.0 / u).ln()
    } else {
        std::f64::consts::LN_2
    }
}

/// Fit `(a, b)` with `rho(u) <= a + b u` for all scanned `u` in `(0, CERT_SCAN_MAX]`,
/// with 10% headroom. For a concave `rho` the certificate extends to all `u >= 0`
/// because the slope beyond the window is at most the fitted tail slope.
fn fit_linear_bound(rho: &dyn Fn(f64) -> f64) -> (f64, f64) {
    let tail_slope = (rho(CERT_SCAN_MAX) - rho(CERT_SCAN_MAX - 1.0)).max(0.0);
    let b = (CERT_HEADROOM * tail_slope).max(1e-9);
    let lo: f64 = 1e-12;
    let ratio = (CERT_SCAN_MAX / lo).ln();
    let mut worst: f64 = 0.0;
    for i in 0..CERT_SCAN_POINTS {
        let u = lo * (ratio * i as f64 / (CERT_SCAN_POINTS - 1) as f64).exp();
        worst = worst.max(rho(u) - b * u);
    }
    let a = (CERT_HEADROOM * worst).max(1e-12);
    (a, b)
}

impl Modulus {
    fn build(name: &str, imp: ModulusImpl) -> Self {
        let linear_bound = {
            let imp = imp.clone();
            fit_linear_bound(&move |u| eval_impl(&imp, u))
        };
        Self {
            name: name.to_string(),
            imp,
            linear_bound,
        }
    }

    /// `u ln(1/u)` capped at `cap`, continued linearly.
    pub fn x_log(cap: f64) -> Result<Self> {
        validate_log_cap(cap)?;
        Ok(Self::build("x_log", ModulusImpl::XLogCapped { cap }))
    }

    /// `u ln(1/u) ln ln(1/u)` capped at `cap`, continued linearly.
    pub fn x_log_log(cap: f64) -> Result<Self> {
        validate_log_cap(cap)?;
        // The left slope at the cap must stay positive or the modulus stops increasing.
        let l = (1.0 / cap).ln();
        if l * l.ln() - l.ln() - 1.0 <= 0.0 {
            return Err(Error::Config(format!(
                "modulus cap {cap} too large: u ln(1/u) ln ln(1/u) is no longer increasing there"
            )));
        }
        Ok(Self::build("x_log_log", ModulusImpl::XLogLogCapped { cap }))
    }

    /// `u ln(1 + 1/u)` on `(0,1)`, constant `ln 2` beyond.
    pub fn x_log1p() -> Self {
        Self::build("x_log1p", ModulusImpl::XLog1p)
    }

    /// User-supplied modulus; the caller vouches for concavity and monotonicity
    /// (property checks will reject it otherwise).
    pub fn custom(
        name: &str,
        rho: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    ) -> Self {
        Self::build(name, ModulusImpl::Custom(rho))
    }

    /// Evaluate `rho(u)` for `u >= 0`.
    #[inline]
    pub fn rho(&self, u: f64) -> f64 {
        eval_impl(&self.imp, u)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

fn eval_impl(imp: &ModulusImpl, u: f64) -> f64 {
    match imp {
        ModulusImpl::XLogCapped { cap } => x_log_capped(u, *cap),
        ModulusImpl::XLogLogCapped { cap } => x_log_log_capped(u, *cap),
        ModulusImpl::XLog1p => x_log1p_inv(u),
        ModulusImpl::Custom(f) => f(u),
    }
}

fn validate_log_cap(cap: f64) -> Result<()> {
    // Beyond 1/e the log moduli stop increasing before the cap, so reject early.
    let max_cap = (-1.0f64).exp();
    if !(cap > 0.0 && cap < max_cap) {
        return Err(Error::Config(format!(
            "modulus cap must lie in (0, 1/e); got {cap}"
        )));
    }
    Ok(())
}

/// The three standard moduli with a shared cap for the two log forms (default 0.1).
pub fn standard_moduli(cap: f64) -> Result<Vec<Modulus>> {
    Ok(vec![
        Modulus::x_log(cap)?,
        Modulus::x_log_log(cap)?,
        Modulus::x_log1p(),
    ])
}

/// The capped square-root-log response
///
/// ```text
/// f(x) = 0                              for x = 0,
///        |x| sqrt(ln(1 + 1/|x|))        for 0 < |x| < cap,
///        cap sqrt(ln(1 + 1/cap))        for |x| >= cap,
/// ```
///
/// which is continuous, bounded, not Lipschitz at 0, yet satisfies
/// `|f(y) - f(ybar)|^2 <= rho(|y - ybar|^2)` for the `u ln(1 + 1/u)` modulus.
pub fn f_example(x: f64, cap: f64) -> Result<f64> {
    if !(cap > 0.0 && cap < 1.0) {
        return Err(Error::Config(format!(
            "response cap must lie in (0, 1); got {cap}"
        )));
    }
    Ok(f_example_raw(x, cap))
}

/// Unchecked form of [`f_example`] for hot loops; `cap` must already be validated.
#[inline]
pub fn f_example_raw(x: f64, cap: f64) -> f64 {
    let ax = x.abs();
    if ax == 0.0 {
        0.0
    } else if ax < cap {
        ax * (1.0 + 1.0 / ax).ln().sqrt()
    } else {
        cap * (1.0 + 1.0 / cap).ln().sqrt()
    }
}
