//! Slow, independent reference estimators used to validate the fast paths:
//! adaptive quadrature for kernel masses and compensators, central finite
//! differences for analytic gradients, and self-normalized importance
//! sampling for posterior expectations.
//!
//! Everything here trades speed for trustworthiness and shares no code with
//! the closed-form implementations it checks.

use alloc::vec::Vec;
use core::fmt;
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::model::{evidence_loglik, Architecture, EventSequence, LatentState, SequenceParams};
use crate::simulate::forward_sample;

/// Minimum effective sample size below which an importance-sampling
/// estimate is refused rather than reported.
pub const MIN_EFFECTIVE_SAMPLES: f64 = 50.0;

const MAX_BISECTIONS: u32 = 60;

/// Why a reference estimator could not produce a trustworthy number.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    /// Invalid argument (bad interval, bad draw count, ...).
    Domain(&'static str),
    /// The adaptive rule hit its depth limit before meeting the tolerance.
    NoConvergence(&'static str),
    /// The integrand or objective returned NaN or infinity.
    NonFinite(&'static str),
    /// The importance weights are too degenerate to trust: effective sample
    /// size below [`MIN_EFFECTIVE_SAMPLES`].
    Degenerate { ess: f64 },
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Domain(what) => write!(f, "invalid oracle input: {what}"),
            Self::NoConvergence(what) => write!(f, "adaptive rule failed to converge: {what}"),
            Self::NonFinite(what) => write!(f, "non-finite evaluation: {what}"),
            Self::Degenerate { ess } => write!(
                f,
                "importance weights too degenerate: effective sample size {ess:.2} \
                 below {MIN_EFFECTIVE_SAMPLES}"
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for OracleError {}

/// A Monte Carlo reference value with its uncertainty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleEstimate {
    /// Self-normalized estimate of the expectation.
    pub value: f64,
    /// Delta-method standard error of `value`.
    pub std_error: f64,
    /// Effective sample size of the weights, (sum w)^2 / sum w^2.
    pub ess: f64,
    /// Number of prior draws used.
    pub n_draws: usize,
}

/// Integrate `g` over [a, b] by adaptive Simpson bisection until the local
/// error estimate meets `tol`.
///
/// # Errors
/// [`OracleError::Domain`] for an invalid interval or tolerance,
/// [`OracleError::NonFinite`] if `g` returns NaN/infinity, and
/// [`OracleError::NoConvergence`] if refinement hits the depth cap.
pub fn quadrature(g: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64, OracleError> {
    if !(a.is_finite() && b.is_finite() && a <= b) {
        return Err(OracleError::Domain("quadrature interval must be finite with a <= b"));
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(OracleError::Domain("quadrature tolerance must be positive"));
    }
    if a == b {
        return Ok(0.0);
    }
    let eval = |x: f64| -> Result<f64, OracleError> {
        let y = g(x);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(OracleError::NonFinite("integrand value"))
        }
    };
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (eval(a)?, eval(m)?, eval(b)?);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_split(&eval, a, b, fa, fm, fb, whole, tol, MAX_BISECTIONS)
}

/// One level of adaptive Simpson: accept when the two half-interval rules
/// agree with the parent rule to within 15x the local tolerance (the
/// standard Richardson error estimate), otherwise recurse on both halves.
#[allow(clippy::too_many_arguments)]
fn simpson_split(
    eval: &impl Fn(f64) -> Result<f64, OracleError>,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64, OracleError> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let (flm, frm) = (eval(lm)?, eval(rm)?);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    // A panel this narrow cannot move the total by more than float noise;
    // refusing to accept it would spin forever on an endpoint jump or an
    // integrable singularity just outside the interval.
    if b - a <= 1e-14 * (b.abs().max(a.abs()).max(1.0)) {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(OracleError::NoConvergence("interval refinement depth exhausted"));
    }
    let half = 0.5 * tol;
    Ok(simpson_split(eval, a, m, fa, flm, fm, left, half, depth - 1)?
        + simpson_split(eval, m, b, fm, frm, fb, right, half, depth - 1)?)
}

/// Central-difference gradient of `objective` at `at`, one coordinate at a
/// time, with per-coordinate step `rel_step * max(1, |x_i|)`.
///
/// # Errors
/// [`OracleError::Domain`] for a non-positive step and
/// [`OracleError::NonFinite`] if any probe evaluation is NaN/infinite.
pub fn finite_diff_grad(
    objective: impl Fn(&[f64]) -> f64,
    at: &[f64],
    rel_step: f64,
) -> Result<Vec<f64>, OracleError> {
    if !(rel_step.is_finite() && rel_step > 0.0) {
        return Err(OracleError::Domain("finite-difference step must be positive"));
    }
    if at.iter().any(|x| !x.is_finite()) {
        return Err(OracleError::Domain("gradient point must be finite"));
    }
    let mut grad = Vec::with_capacity(at.len());
    let mut probe = at.to_vec();
    for i in 0..at.len() {
        let h = rel_step * at[i].abs().max(1.0);
        probe[i] = at[i] + h;
        let plus = objective(&probe);
        probe[i] = at[i] - h;
        let minus = objective(&probe);
        probe[i] = at[i];
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(OracleError::NonFinite("objective probe"));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Posterior expectation of `f` over hidden states by importance sampling:
/// draw hidden layers from the prior with [`forward_sample`], weight each
/// draw by its evidence likelihood against the observed sequence, and
/// self-normalize. The standard error comes from the delta method for ratio
/// estimators.
///
/// # Errors
/// [`OracleError::Domain`] for `n_draws == 0`,
/// [`OracleError::NonFinite`] if `f` returns NaN/infinity on a weighted
/// draw, and [`OracleError::Degenerate`] when the effective sample size
/// falls below [`MIN_EFFECTIVE_SAMPLES`] (including all weights zero).
pub fn importance_posterior_expectation(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    f: impl Fn(&LatentState) -> f64,
    n_draws: usize,
    rng: &mut impl Rng,
) -> Result<OracleEstimate, OracleError> {
    if n_draws == 0 {
        return Err(OracleError::Domain("importance sampling needs at least one draw"));
    }
    let mut log_weights = Vec::with_capacity(n_draws);
    let mut values = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let (state, _prior_evidence) = forward_sample(arch, params, evidence.t_end(), rng);
        log_weights.push(evidence_loglik(arch, params, evidence, &state));
        values.push(f(&state));
    }
    let max_lw = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max_lw.is_finite() {
        return Err(OracleError::Degenerate { ess: 0.0 });
    }
    let mut w_sum = 0.0;
    let mut w2_sum = 0.0;
    let mut wf_sum = 0.0;
    for (lw, v) in log_weights.iter().zip(&values) {
        let w = (lw - max_lw).exp();
        if w == 0.0 {
            // Zero-weight draws contribute nothing; skipping them keeps a
            // non-finite integrand there (e.g. a log-likelihood of -inf on
            // a state the posterior rules out) from poisoning the sums
            // with 0 * inf.
            continue;
        }
        if !v.is_finite() {
            return Err(OracleError::NonFinite("expectation integrand on a weighted draw"));
        }
        w_sum += w;
        w2_sum += w * w;
        wf_sum += w * v;
    }
    let ess = w_sum * w_sum / w2_sum;
    if ess.is_nan() || ess < MIN_EFFECTIVE_SAMPLES {
        return Err(OracleError::Degenerate { ess });
    }
    let value = wf_sum / w_sum;
    let mut var_num = 0.0;
    for (lw, v) in log_weights.iter().zip(&values) {
        let w = (lw - max_lw).exp();
        if w == 0.0 {
            continue;
        }
        var_num += w * w * (v - value) * (v - value);
    }
    let std_error = var_num.sqrt() / w_sum;
    Ok(OracleEstimate { value, std_error, ess, n_draws })
}
