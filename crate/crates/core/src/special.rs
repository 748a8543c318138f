//! Gamma-family special functions: ln Γ, the regularized lower incomplete
//! gamma P(a, x), and its inverse.
//!
//! Everything here is self-contained double-precision numerics. P(a, x) uses
//! the classic series/continued-fraction split at x = a + 1; the inverse is a
//! bracketed Newton iteration with bisection fallback. Iteration is driven to
//! machine precision internally; [`Tolerance`] bounds iteration counts and
//! sets the accuracy target for the inverse.

#[allow(unused_imports)]
use num_traits::Float;

/// Convergence control for iterative evaluations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    /// Absolute tolerance on residuals (inverse solves stop at |P(a,x) − u| ≤ abs_tol).
    pub abs_tol: f64,
    /// Relative tolerance on iteration deltas.
    pub rel_tol: f64,
    /// Iteration cap for series, continued fractions, and root finding.
    pub max_iter: usize,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { abs_tol: 1e-12, rel_tol: 1e-10, max_iter: 300 }
    }
}

impl Tolerance {
    /// True when the tolerance satisfies its own invariants.
    pub fn is_valid(&self) -> bool {
        self.abs_tol > 0.0 && self.rel_tol > 0.0 && self.max_iter >= 1
    }
}

/// Failure modes of the special-function evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecialError {
    /// Input outside the documented domain.
    Domain(&'static str),
    /// An iteration failed to converge within `max_iter`.
    NoConvergence(&'static str),
}

impl core::fmt::Display for SpecialError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SpecialError::Domain(what) => write!(f, "domain error: {what}"),
            SpecialError::NoConvergence(what) => write!(f, "no convergence: {what}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SpecialError {}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// Stirling cutoff: arguments below this are shifted up by the recurrence
/// ln Γ(z) = ln Γ(z+1) − ln z before the asymptotic series is applied.
const STIRLING_MIN: f64 = 10.0;

/// Coefficients B_{2n} / (2n (2n−1)) of the Stirling asymptotic series in
/// descending powers z^{−1} … z^{−13}; truncation error < 3e-17 for z ≥ 10.
const STIRLING_COEFFS: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360_360.0,
    1.0 / 156.0,
];

/// Natural log of the gamma function, ln Γ(a).
///
/// Relative error ≤ 1e-12 across a ∈ [1e-3, 1e6].
pub fn log_gamma(a: f64) -> Result<f64, SpecialError> {
    if !a.is_finite() || a <= 0.0 {
        return Err(SpecialError::Domain("log_gamma requires finite a > 0"));
    }
    let mut z = a;
    let mut shift = 0.0;
    while z < STIRLING_MIN {
        shift += z.ln();
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut series = 0.0;
    for &c in STIRLING_COEFFS.iter().rev() {
        series = series * inv2 + c;
    }
    series *= inv;
    Ok((z - 0.5) * z.ln() - z + LN_SQRT_2PI + series - shift)
}

/// Regularized lower incomplete gamma function P(a, x) = γ(a, x)/Γ(a).
///
/// Series expansion for x < a + 1, Lentz continued fraction for the upper
/// tail otherwise. Values land in [0, 1] and are nondecreasing in x.
pub fn reg_lower_inc_gamma(a: f64, x: f64, tol: &Tolerance) -> Result<f64, SpecialError> {
    if !a.is_finite() || a <= 0.0 {
        return Err(SpecialError::Domain("reg_lower_inc_gamma requires finite a > 0"));
    }
    reg_lower_inc_gamma_with_lngamma(a, x, log_gamma(a)?, tol)
}

/// [`reg_lower_inc_gamma`] with ln Γ(a) supplied by the caller, for hot paths
/// that evaluate many x under one cached a.
pub(crate) fn reg_lower_inc_gamma_with_lngamma(
    a: f64,
    x: f64,
    ln_gamma_a: f64,
    tol: &Tolerance,
) -> Result<f64, SpecialError> {
    if !x.is_finite() || x < 0.0 {
        return Err(SpecialError::Domain("reg_lower_inc_gamma requires finite x >= 0"));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    // ln of the shared prefactor x^a e^{−x} / Γ(a).
    let ln_pre = a * x.ln() - x - ln_gamma_a;
    let value = if x < a + 1.0 {
        let mut ap = a;
        let mut del = 1.0 / a;
        let mut sum = del;
        let mut converged = false;
        for _ in 0..tol.max_iter {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() <= sum.abs() * f64::EPSILON {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(SpecialError::NoConvergence("lower incomplete gamma series"));
        }
        sum * ln_pre.exp()
    } else {
        // Lentz's algorithm for the upper-tail continued fraction Q(a, x).
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        let mut converged = false;
        for i in 1..=tol.max_iter {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() <= f64::EPSILON {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(SpecialError::NoConvergence("upper incomplete gamma continued fraction"));
        }
        1.0 - ln_pre.exp() * h
    };
    Ok(value.clamp(0.0, 1.0))
}

/// Inverse of [`reg_lower_inc_gamma`] in x: returns x ≥ 0 with P(a, x) = u.
///
/// The root is bracketed by doubling, then refined by Newton steps that fall
/// back to bisection whenever they leave the bracket. Stops when the residual
/// |P(a, x) − u| drops to `tol.abs_tol`.
pub fn inv_reg_lower_inc_gamma(a: f64, u: f64, tol: &Tolerance) -> Result<f64, SpecialError> {
    if !a.is_finite() || a <= 0.0 {
        return Err(SpecialError::Domain("inv_reg_lower_inc_gamma requires finite a > 0"));
    }
    if !u.is_finite() || !(0.0..1.0).contains(&u) {
        return Err(SpecialError::Domain("inv_reg_lower_inc_gamma requires u in [0, 1)"));
    }
    if u == 0.0 {
        return Ok(0.0);
    }
    let ln_gamma_a = log_gamma(a)?;

    // Bracket the root: P(a, lo) < u <= P(a, hi).
    let mut lo = 0.0;
    let mut hi = a.max(1.0);
    let mut p_hi = reg_lower_inc_gamma(a, hi, tol)?;
    let mut expand = 0;
    while p_hi < u {
        lo = hi;
        hi *= 2.0;
        p_hi = reg_lower_inc_gamma(a, hi, tol)?;
        expand += 1;
        if expand > 200 {
            return Err(SpecialError::NoConvergence("inverse incomplete gamma bracketing"));
        }
    }

    let mut x = 0.5 * (lo + hi);
    for _ in 0..tol.max_iter {
        let p = reg_lower_inc_gamma(a, x, tol)?;
        let f = p - u;
        if f.abs() <= tol.abs_tol {
            return Ok(x);
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        // Newton step using the gamma density; bisect when it leaves the bracket.
        let ln_pdf = (a - 1.0) * x.ln() - x - ln_gamma_a;
        let mut next = f64::NAN;
        if ln_pdf > -700.0 {
            next = x - f / ln_pdf.exp();
        }
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if next == x {
            // Bracket collapsed to one representable value.
            return Ok(x);
        }
        x = next;
    }
    Err(SpecialError::NoConvergence("inverse incomplete gamma iteration"))
}
