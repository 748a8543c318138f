//! Monte Carlo EM: fits kernel parameters and base rates from event data.
//!
//! Each iteration runs the posterior sampler per sequence (E-step, warm
//! started from the previous iteration's final state), then updates
//! parameters (M-step): top-layer rates by their closed-form maximizer,
//! kernel parameters by an Adam ascent step on the Monte Carlo average of
//! the log-likelihood gradient, and virtual base rates / virtual kernels by
//! the same recipe applied to the virtual-process fit objective, in which a
//! sample's *real* events play the role of the virtual processes' data.
//!
//! Gradients are exact closed forms for weights (p), rate parameters (beta),
//! and base rates; shape parameters (alpha) use a central finite difference
//! of the single likelihood factor that depends on them, which equals the
//! full-objective derivative because each edge's kernel enters exactly one
//! factor. All gradients are carried in unconstrained coordinates (softplus
//! transform), so positivity survives every update by construction.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::mcmc::{init_state, run_chain, ChainConfig, ChainStats, MoveKind};
use crate::model::{
    data_events, kernel_eval, kernel_mass, node_loglik_real, real_loglik_total, sigmoid, softplus,
    softplus_inv, Architecture, EventSequence, KernelParams, LatentState, NodeId, SequenceParams,
    StateView,
};
use crate::rng::RngStream;

/// Smallest admissible top-layer rate; applied when a node's mean sampled
/// count is zero so the rate stays strictly positive.
pub const MU_FLOOR: f64 = 1e-8;

/// Hard cap on kernel shape parameters; crossing it aborts the fit as
/// divergent (the kernel has collapsed toward a spike and the chain's
/// acceptance ratios are no longer numerically trustworthy).
const ALPHA_DIVERGENCE_CAP: f64 = 1e3;
/// Caps on kernel mass / rate coordinates and on virtual base rates, past
/// which the fit aborts as divergent: beyond them the samplers would draw
/// astronomically many events or push the incomplete-gamma inversions out
/// of their reliable range.  The caps are deliberately far below the point
/// of numerical failure so that a single overshooting update is caught
/// before any chain has to run at an absurd rate.
const P_DIVERGENCE_CAP: f64 = 1e5;
const BETA_DIVERGENCE_CAP: f64 = 1e5;
const RATE_DIVERGENCE_CAP: f64 = 1e5;
/// Rate-only adaptation rounds run per sequence before the first recorded
/// EM iteration (see the warmup note in [`mcem_fit`]).
const WARMUP_ROUNDS: usize = 5;

/// Event mass credited to every top node and virtual base process when
/// adapting rates on an observed window ([`adapt_base_rates`]): rates are
/// floored at `pseudocount / t_end`. A branch of the cascade that explains
/// nothing observed so far would otherwise have its rate driven to the
/// numerical floor, and a later event of an unprecedented kind could never
/// be explained — materializing the required top-layer event would cost
/// `ln` of that floor. Half an event keeps such branches workable while
/// barely perturbing rates the data actually informs.
const ADAPT_RATE_PSEUDOCOUNT: f64 = 0.5;

/// Fitting hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MCEMConfig {
    /// Step size for the observed-process kernel parameters.
    pub r: f64,
    /// Step size for virtual kernel parameters and virtual base rates.
    pub r_tilde: f64,
    /// Adam first/second moment decay rates.
    pub adam_betas: (f64, f64),
    /// Adam denominator stabilizer.
    pub adam_eps: f64,
    /// Relative step for the central finite difference that supplies shape
    /// (alpha) gradients, taken in unconstrained coordinates.
    pub alpha_fd_step: f64,
    /// Maximum number of EM iterations.
    pub max_iters: usize,
    /// Stop when the objective estimate changes by less than this between
    /// consecutive iterations.
    pub loglik_tol: f64,
    /// Sampler schedule used for every E-step chain.
    pub chain: ChainConfig,
    /// Sequences per iteration; 0 trains on the full dataset every time.
    /// Mini-batches walk the dataset round-robin so coverage is even and
    /// runs stay reproducible.
    pub batch: usize,
    /// Append the synthetic terminal event to E-step chains (recommended:
    /// it keeps virtual candidates available near the window end).
    pub include_terminal: bool,
    /// Skip kernel updates, fitting only base rates (used for test-time
    /// rate adaptation and for checks against a known kernel).
    pub freeze_kernels: bool,
}

impl Default for MCEMConfig {
    fn default() -> Self {
        Self {
            r: 0.05,
            r_tilde: 0.05,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            alpha_fd_step: 1e-4,
            max_iters: 100,
            loglik_tol: 1e-3,
            chain: ChainConfig::default(),
            batch: 0,
            include_terminal: true,
            freeze_kernels: false,
        }
    }
}

impl MCEMConfig {
    pub fn is_valid(&self) -> bool {
        self.r > 0.0
            && self.r_tilde > 0.0
            && self.adam_betas.0 >= 0.0
            && self.adam_betas.0 < 1.0
            && self.adam_betas.1 >= 0.0
            && self.adam_betas.1 < 1.0
            && self.adam_eps > 0.0
            && self.alpha_fd_step > 0.0
            && self.max_iters >= 1
            && self.loglik_tol > 0.0
            && self.chain.is_valid()
    }
}

/// Gradient sums in unconstrained coordinates, accumulated over posterior
/// samples. Kernel entries are ordered `[d/du_p, d/du_alpha, d/du_beta]`
/// per edge; `mu_virtual` is indexed by the flat hidden-node index.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccum {
    pub real: Vec<[f64; 3]>,
    pub virt: Vec<[f64; 3]>,
    pub mu_virtual: Vec<f64>,
    pub n_samples: u64,
}

impl GradAccum {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            real: alloc::vec![[0.0; 3]; arch.real_edges().len()],
            virt: alloc::vec![[0.0; 3]; arch.virtual_edges().len()],
            mu_virtual: alloc::vec![0.0; arch.n_hidden_nodes()],
            n_samples: 0,
        }
    }

    /// Fold another accumulator into this one.
    pub fn add(&mut self, other: &GradAccum) {
        for (a, b) in self.real.iter_mut().zip(&other.real) {
            for i in 0..3 {
                a[i] += b[i];
            }
        }
        for (a, b) in self.virt.iter_mut().zip(&other.virt) {
            for i in 0..3 {
                a[i] += b[i];
            }
        }
        for (a, b) in self.mu_virtual.iter_mut().zip(&other.mu_virtual) {
            *a += *b;
        }
        self.n_samples += other.n_samples;
    }

    pub fn is_finite(&self) -> bool {
        self.real.iter().chain(self.virt.iter()).all(|g| g.iter().all(|v| v.is_finite()))
            && self.mu_virtual.iter().all(|v| v.is_finite())
    }
}

/// Log-likelihood factor of one non-top node's observed-side process, with
/// one in-edge's kernel replaced. Mirrors the factor used by the sampler;
/// exists so shape-parameter finite differences don't have to rebuild the
/// whole architecture per probe.
fn real_factor_override(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    sample: &LatentState,
    node: NodeId,
    edge_override: usize,
    theta_over: &KernelParams,
) -> f64 {
    debug_assert!(node.layer < arch.n_hidden_layers());
    let _ = params;
    let t_end = evidence.t_end();
    let edges = arch.real_edges_into(node);
    let mut ll = 0.0;
    for &t in data_events(evidence, sample, node) {
        let mut lambda = 0.0;
        for &e in edges {
            let edge = &arch.real_edges()[e];
            let th = if e == edge_override { theta_over } else { &edge.theta };
            for &tp in sample.real(edge.parent) {
                if tp >= t {
                    break;
                }
                lambda += kernel_eval(th, t - tp);
            }
        }
        if lambda <= 0.0 {
            return f64::NEG_INFINITY;
        }
        ll += lambda.ln();
    }
    for &e in edges {
        let edge = &arch.real_edges()[e];
        let th = if e == edge_override { theta_over } else { &edge.theta };
        for &tp in sample.real(edge.parent) {
            ll -= kernel_mass(th, t_end - tp);
        }
    }
    ll
}

/// Virtual-process fit factor of one hidden node: the sample's *real*
/// events at that node are scored as if the virtual process had produced
/// them. One in-edge's kernel may be replaced (finite-difference probes).
fn vpp_factor_override(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    sample: &LatentState,
    node: NodeId,
    edge_override: usize,
    theta_over: &KernelParams,
) -> f64 {
    let t_end = evidence.t_end();
    let edges = arch.virtual_edges_into(node);
    let terminal = sample.include_terminal_event() && node.layer >= 2;
    let mut ll = 0.0;
    for &t in sample.real(node) {
        let mut lambda = params.mu_virtual_at(node);
        for &e in edges {
            let edge = &arch.virtual_edges()[e];
            let th = if e == edge_override { theta_over } else { &edge.theta };
            let children = data_events(evidence, sample, edge.source);
            let start = children.partition_point(|&tc| tc <= t);
            for &tc in &children[start..] {
                lambda += kernel_eval(th, tc - t);
            }
            if terminal {
                lambda += kernel_eval(th, t_end - t);
            }
        }
        if lambda <= 0.0 {
            return f64::NEG_INFINITY;
        }
        ll += lambda.ln();
    }
    for &e in edges {
        let edge = &arch.virtual_edges()[e];
        let th = if e == edge_override { theta_over } else { &edge.theta };
        for &tc in data_events(evidence, sample, edge.source) {
            ll -= kernel_mass(th, tc);
        }
        if terminal {
            ll -= kernel_mass(th, t_end);
        }
    }
    ll
}

/// Gradient of the observed-side log-likelihood (all real factors) for one
/// posterior sample, in unconstrained coordinates. Weights and rate
/// parameters are closed forms; shapes use a central finite difference of
/// the one factor that depends on them, stepped by
/// `alpha_fd_step * max(1, |u_alpha|)`.
///
/// Returns `None` (an invalid sample to be skipped, not an error) when the
/// sample has a data event at zero intensity or a gradient entry fails to
/// be finite.
pub fn grad_real(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    sample: &LatentState,
    alpha_fd_step: f64,
) -> Option<GradAccum> {
    let mut acc = GradAccum::zeros(arch);
    acc.n_samples = 1;
    let t_end = evidence.t_end();
    // Closed-form weight and rate components, per child node.
    for layer in 0..arch.n_hidden_layers() {
        for k in 0..arch.layer_size(layer) {
            let node = NodeId::new(layer, k);
            let edges = arch.real_edges_into(node);
            if edges.is_empty() {
                continue;
            }
            let mut phi_sum = alloc::vec![0.0; edges.len()];
            let mut dbeta_sum = alloc::vec![0.0; edges.len()];
            for &t in data_events(evidence, sample, node) {
                let mut lambda = 0.0;
                for (j, &e) in edges.iter().enumerate() {
                    let edge = &arch.real_edges()[e];
                    let th = &edge.theta;
                    phi_sum[j] = 0.0;
                    dbeta_sum[j] = 0.0;
                    for &tp in sample.real(edge.parent) {
                        if tp >= t {
                            break;
                        }
                        let x = t - tp;
                        let f = kernel_eval(th, x);
                        phi_sum[j] += f;
                        dbeta_sum[j] += f * (th.alpha() / th.beta() - x);
                    }
                    lambda += phi_sum[j];
                }
                if lambda <= 0.0 {
                    return None;
                }
                for (j, &e) in edges.iter().enumerate() {
                    let th = &arch.real_edges()[e].theta;
                    acc.real[e][0] += phi_sum[j] / (th.p() * lambda);
                    acc.real[e][2] += dbeta_sum[j] / lambda;
                }
            }
            for &e in edges {
                let edge = &arch.real_edges()[e];
                let th = &edge.theta;
                for &tp in sample.real(edge.parent) {
                    let x = t_end - tp;
                    acc.real[e][0] -= kernel_mass(th, x) / th.p();
                    acc.real[e][2] -= kernel_eval(th, x) * x / th.beta();
                }
            }
        }
    }
    // Map to unconstrained coordinates; fill shapes by finite difference.
    for e in 0..arch.real_edges().len() {
        let edge = &arch.real_edges()[e];
        let u = edge.theta.u();
        acc.real[e][0] *= sigmoid(u[0]);
        acc.real[e][2] *= sigmoid(u[2]);
        let h = alpha_fd_step * u[1].abs().max(1.0);
        let up = KernelParams::from_unconstrained(u[0], u[1] + h, u[2]);
        let um = KernelParams::from_unconstrained(u[0], u[1] - h, u[2]);
        let fp = real_factor_override(arch, params, evidence, sample, edge.child, e, &up);
        let fm = real_factor_override(arch, params, evidence, sample, edge.child, e, &um);
        if !fp.is_finite() || !fm.is_finite() {
            return None;
        }
        acc.real[e][1] = (fp - fm) / (2.0 * h);
    }
    if acc.is_finite() {
        Some(acc)
    } else {
        None
    }
}

/// Gradient of the virtual-process fit objective for one posterior sample:
/// every hidden node's *real* events are scored against its virtual
/// intensity, and the gradient flows to virtual base rates and virtual
/// kernel parameters (unconstrained coordinates; same closed-form /
/// finite-difference split as [`grad_real`]).
///
/// Returns `None` when some real event sits at zero virtual intensity (the
/// objective is -inf there and its gradient is undefined) or any entry
/// fails to be finite.
pub fn grad_virtual(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    sample: &LatentState,
    alpha_fd_step: f64,
) -> Option<GradAccum> {
    let mut acc = GradAccum::zeros(arch);
    acc.n_samples = 1;
    let t_end = evidence.t_end();
    for node in arch.hidden_nodes() {
        let flat = arch.hidden_index(node);
        let edges = arch.virtual_edges_into(node);
        let terminal = sample.include_terminal_event() && node.layer >= 2;
        let mut phi_sum = alloc::vec![0.0; edges.len()];
        let mut dbeta_sum = alloc::vec![0.0; edges.len()];
        for &t in sample.real(node) {
            let mut lambda = params.mu_virtual_at(node);
            for (j, &e) in edges.iter().enumerate() {
                let edge = &arch.virtual_edges()[e];
                let th = &edge.theta;
                phi_sum[j] = 0.0;
                dbeta_sum[j] = 0.0;
                let children = data_events(evidence, sample, edge.source);
                let start = children.partition_point(|&tc| tc <= t);
                for &tc in &children[start..] {
                    let x = tc - t;
                    let f = kernel_eval(th, x);
                    phi_sum[j] += f;
                    dbeta_sum[j] += f * (th.alpha() / th.beta() - x);
                }
                if terminal {
                    let x = t_end - t;
                    let f = kernel_eval(th, x);
                    phi_sum[j] += f;
                    dbeta_sum[j] += f * (th.alpha() / th.beta() - x);
                }
                lambda += phi_sum[j];
            }
            if lambda <= 0.0 {
                return None;
            }
            acc.mu_virtual[flat] += 1.0 / lambda;
            for (j, &e) in edges.iter().enumerate() {
                let th = &arch.virtual_edges()[e].theta;
                acc.virt[e][0] += phi_sum[j] / (th.p() * lambda);
                acc.virt[e][2] += dbeta_sum[j] / lambda;
            }
        }
        acc.mu_virtual[flat] -= t_end;
        for &e in edges {
            let edge = &arch.virtual_edges()[e];
            let th = &edge.theta;
            for &tc in data_events(evidence, sample, edge.source) {
                acc.virt[e][0] -= kernel_mass(th, tc) / th.p();
                acc.virt[e][2] -= kernel_eval(th, tc) * tc / th.beta();
            }
            if terminal {
                acc.virt[e][0] -= kernel_mass(th, t_end) / th.p();
                acc.virt[e][2] -= kernel_eval(th, t_end) * t_end / th.beta();
            }
        }
        acc.mu_virtual[flat] *= sigmoid(softplus_inv(params.mu_virtual_at(node)));
    }
    for e in 0..arch.virtual_edges().len() {
        let edge = &arch.virtual_edges()[e];
        let u = edge.theta.u();
        acc.virt[e][0] *= sigmoid(u[0]);
        acc.virt[e][2] *= sigmoid(u[2]);
        let h = alpha_fd_step * u[1].abs().max(1.0);
        let up = KernelParams::from_unconstrained(u[0], u[1] + h, u[2]);
        let um = KernelParams::from_unconstrained(u[0], u[1] - h, u[2]);
        let fp = vpp_factor_override(arch, params, evidence, sample, edge.target, e, &up);
        let fm = vpp_factor_override(arch, params, evidence, sample, edge.target, e, &um);
        if !fp.is_finite() || !fm.is_finite() {
            return None;
        }
        acc.virt[e][1] = (fp - fm) / (2.0 * h);
    }
    if acc.is_finite() {
        Some(acc)
    } else {
        None
    }
}

/// Base-rate gradient only (unconstrained), for the cheap test-time rate
/// adaptation loop that leaves kernels untouched.
fn grad_mu_virtual_only(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    sample: &LatentState,
) -> Option<Vec<f64>> {
    let t_end = evidence.t_end();
    let mut grad = alloc::vec![0.0; arch.n_hidden_nodes()];
    for node in arch.hidden_nodes() {
        let flat = arch.hidden_index(node);
        for &t in sample.real(node) {
            let lambda = crate::model::virtual_intensity(arch, params, evidence, sample, node, t);
            if lambda <= 0.0 {
                return None;
            }
            grad[flat] += 1.0 / lambda;
        }
        grad[flat] -= t_end;
        grad[flat] *= sigmoid(softplus_inv(params.mu_virtual_at(node)));
    }
    Some(grad)
}

/// Exact maximizer of the Monte Carlo average of the top-layer likelihood
/// terms: per top node, the mean sampled event count divided by the window
/// length, floored at [`MU_FLOOR`].
///
/// # Panics
/// If `samples` is empty or `t_end` is not positive.
pub fn maximize_top_rates(arch: &Architecture, samples: &[LatentState], t_end: f64) -> Vec<f64> {
    assert!(!samples.is_empty(), "maximize_top_rates: need at least one sample");
    assert!(t_end > 0.0, "maximize_top_rates: window length must be positive");
    let top = arch.n_hidden_layers();
    (0..arch.layer_size(top))
        .map(|k| {
            let node = NodeId::new(top, k);
            let mean: f64 = samples.iter().map(|s| s.node(node).real.len() as f64).sum::<f64>()
                / samples.len() as f64;
            (mean / t_end).max(MU_FLOOR)
        })
        .collect()
}

/// Adam accumulator (ascent direction). Moments persist for the life of the
/// value; the fit loop never resets them between iterations.
#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    fn new(dim: usize) -> Self {
        Self { m: alloc::vec![0.0; dim], v: alloc::vec![0.0; dim], t: 0 }
    }

    /// One ascent step `x += lr * m_hat / (sqrt(v_hat) + eps)`.
    fn step(&mut self, x: &mut [f64], grad: &[f64], lr: f64, betas: (f64, f64), eps: f64) {
        debug_assert_eq!(x.len(), self.m.len());
        debug_assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..x.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            x[i] += lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

/// Why a fit stopped without a result.
#[derive(Debug, Clone, PartialEq)]
pub enum FitError {
    BadConfig(String),
    EmptyDataset,
    /// A sequence's type count disagrees with the architecture.
    Mismatch(String),
    /// The objective or a parameter left the finite range.
    Diverged { iter: usize, detail: String },
}

impl core::fmt::Display for FitError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            FitError::BadConfig(s) => write!(f, "invalid fit configuration: {s}"),
            FitError::EmptyDataset => write!(f, "empty dataset"),
            FitError::Mismatch(s) => write!(f, "dataset/architecture mismatch: {s}"),
            FitError::Diverged { iter, detail } => {
                write!(f, "fit diverged at iteration {iter}: {detail}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for FitError {}

/// One line of the training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    /// Monte Carlo estimate of the expected complete-data log-likelihood of
    /// the observed-side factors, scaled to the full dataset.
    pub objective: f64,
    /// Standard error of `objective` over the per-sample totals.
    pub objective_se: f64,
    /// Per-move acceptance rates pooled over this iteration's chains
    /// (resample, flip, swap); NaN when a move never ran.
    pub accept_resample: f64,
    pub accept_flip: f64,
    pub accept_swap: f64,
    /// Samples whose gradient was invalid and skipped this iteration.
    pub skipped_samples: u64,
}

/// Everything a finished fit hands back.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Architecture carrying the fitted kernels.
    pub arch: Architecture,
    /// Fitted base rates, one per training sequence.
    pub seq_params: Vec<SequenceParams>,
    pub trace: Vec<IterationRecord>,
    /// True when the objective tolerance stopped the loop (false: max_iters).
    pub converged: bool,
    pub skipped_samples: u64,
}

impl FitResult {
    /// Mean base rates over training sequences: the starting point for
    /// sequences never seen in training.
    pub fn mean_params(&self) -> SequenceParams {
        mean_sequence_params(&self.seq_params)
    }
}

/// Elementwise mean of per-sequence base rates.
///
/// # Panics
/// On an empty slice.
pub fn mean_sequence_params(all: &[SequenceParams]) -> SequenceParams {
    assert!(!all.is_empty(), "mean_sequence_params: empty slice");
    let n = all.len() as f64;
    let mut mu = alloc::vec![0.0; all[0].mu.len()];
    let mut mu_virtual: Vec<Vec<f64>> =
        all[0].mu_virtual.iter().map(|l| alloc::vec![0.0; l.len()]).collect();
    for p in all {
        for (a, b) in mu.iter_mut().zip(&p.mu) {
            *a += b / n;
        }
        for (la, lb) in mu_virtual.iter_mut().zip(&p.mu_virtual) {
            for (a, b) in la.iter_mut().zip(lb) {
                *a += b / n;
            }
        }
    }
    SequenceParams { mu, mu_virtual }
}

/// Data-scaled kernel starting point: unit weight, unit shape, and a rate
/// parameter placing the kernel mean at T / (1 + mean per-type event count),
/// so offspring of a typical parent land inside the window.
pub fn default_kernel_init(dataset: &[EventSequence]) -> KernelParams {
    if dataset.is_empty() {
        return KernelParams::from_natural(1.0, 1.0, 1.0);
    }
    let n = dataset.len() as f64;
    let mean_t: f64 = dataset.iter().map(|s| s.t_end()).sum::<f64>() / n;
    let mean_count: f64 = dataset
        .iter()
        .map(|s| s.total_events() as f64 / s.n_types() as f64)
        .sum::<f64>()
        / n;
    KernelParams::from_natural(1.0, 1.0, (1.0 + mean_count) / mean_t)
}

/// Data-scaled base-rate starting point for one sequence: event density
/// spread over each layer's nodes, floored away from zero.
pub fn init_sequence_params(arch: &Architecture, evidence: &EventSequence) -> SequenceParams {
    let t = evidence.t_end();
    let total = evidence.total_events() as f64;
    let top = arch.n_hidden_layers();
    let mu =
        alloc::vec![(total / (t * arch.layer_size(top) as f64)).max(MU_FLOOR); arch.layer_size(top)];
    let mu_virtual: Vec<Vec<f64>> = (1..=top)
        .map(|layer| {
            let rate = (total / (t * arch.layer_size(layer) as f64)).max(0.1) * 0.5;
            alloc::vec![rate; arch.layer_size(layer)]
        })
        .collect();
    SequenceParams { mu, mu_virtual }
}

/// Per-sequence E-step output.
struct SeqOut {
    seq: usize,
    final_state: LatentState,
    /// Observed-side log-likelihood of each retained sample.
    sample_lls: Vec<f64>,
    /// Closed-form top-rate maximizer for this sequence's samples.
    mu: Vec<f64>,
    grads_real: GradAccum,
    grads_virt: GradAccum,
    skipped: u64,
    stats: ChainStats,
    /// Description of a non-finite factor, if any sample had one.
    bad: Option<String>,
}

fn seq_salt(iter: usize, seq: usize) -> u64 {
    ((iter as u64 + 1) << 32) ^ seq as u64
}

/// Standard error of the mean of a serially correlated series, by batch
/// means: the series is cut into ~sqrt(len) consecutive batches whose means
/// are close to independent, and the spread of the batch means estimates
/// the Monte Carlo error. Retained posterior samples are autocorrelated,
/// so the naive iid formula would understate the noise band that ascent
/// checks compare against. Falls back to the iid formula below 9 points.
pub(crate) fn batch_means_se(xs: &[f64]) -> f64 {
    let s = xs.len();
    if s < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / s as f64;
    if s < 9 {
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (s as f64 - 1.0);
        return (var / s as f64).sqrt();
    }
    let b = (s as f64).sqrt() as usize;
    let n_b = s / b;
    let means: Vec<f64> =
        (0..n_b).map(|i| xs[i * b..(i + 1) * b].iter().sum::<f64>() / b as f64).collect();
    let grand = means.iter().sum::<f64>() / n_b as f64;
    let var = means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>() / (n_b as f64 - 1.0);
    (var / n_b as f64).sqrt()
}

/// Reject parameter coordinates an optimizer step pushed out of the usable
/// range, *before* they are turned into kernels (whose constructor requires
/// strictly positive effective values).
fn check_kernel_coords(which: &str, u: &[f64], iter: usize) -> Result<(), FitError> {
    for (e, chunk) in u.chunks(3).enumerate() {
        if chunk.iter().any(|v| !v.is_finite()) {
            return Err(FitError::Diverged {
                iter,
                detail: format!("{which} {e} left the finite range"),
            });
        }
        let (p, alpha, beta) = (softplus(chunk[0]), softplus(chunk[1]), softplus(chunk[2]));
        if !(p > 0.0 && alpha > 0.0 && beta > 0.0) {
            return Err(FitError::Diverged {
                iter,
                detail: format!("{which} {e} collapsed to zero (underflowed coordinates)"),
            });
        }
        for (name, value, cap) in [
            ("mass", p, P_DIVERGENCE_CAP),
            ("shape", alpha, ALPHA_DIVERGENCE_CAP),
            ("rate", beta, BETA_DIVERGENCE_CAP),
        ] {
            if value >= cap {
                return Err(FitError::Diverged {
                    iter,
                    detail: format!("{which} {e} {name} parameter grew to {value:.3e} (cap {cap:.0e})"),
                });
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn estep_one(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    warm: &LatentState,
    config: &MCEMConfig,
    stream: RngStream,
    iter: usize,
    seq: usize,
) -> SeqOut {
    let mut rng = stream.substream(seq_salt(iter, seq)).rng();
    let (samples, stats) = run_chain(arch, params, evidence, warm.clone(), &config.chain, &mut rng);
    let mut sample_lls = Vec::with_capacity(samples.len());
    let mut grads_real = GradAccum::zeros(arch);
    let mut grads_virt = GradAccum::zeros(arch);
    let mut skipped = 0;
    let mut bad = None;
    for s in &samples {
        let ll = real_loglik_total(arch, params, evidence, s);
        if !ll.is_finite() && bad.is_none() {
            bad = Some(locate_bad_factor(arch, params, evidence, s, seq));
        }
        sample_lls.push(ll);
        match grad_real(arch, params, evidence, s, config.alpha_fd_step) {
            Some(g) => grads_real.add(&g),
            None => skipped += 1,
        }
        match grad_virtual(arch, params, evidence, s, config.alpha_fd_step) {
            Some(g) => grads_virt.add(&g),
            None => skipped += 1,
        }
    }
    let mu = maximize_top_rates(arch, &samples, evidence.t_end());
    let final_state = samples.into_iter().next_back().expect("n_samples >= 1");
    SeqOut { seq, final_state, sample_lls, mu, grads_real, grads_virt, skipped, stats, bad }
}

/// Name the first non-finite factor of a sample, for divergence diagnostics.
fn locate_bad_factor(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    sample: &LatentState,
    seq: usize,
) -> String {
    for layer in 0..=arch.n_hidden_layers() {
        for k in 0..arch.layer_size(layer) {
            let node = NodeId::new(layer, k);
            let f = node_loglik_real(arch, params, evidence, sample, node);
            if !f.is_finite() {
                return format!(
                    "sequence {seq}: observed-side factor at node ({layer},{k}) is {f}"
                );
            }
        }
    }
    format!("sequence {seq}: objective non-finite but every factor finite (overflow in the sum)")
}

fn flatten_kernels(edges_u: impl Iterator<Item = [f64; 3]>) -> Vec<f64> {
    let mut out = Vec::new();
    for u in edges_u {
        out.extend_from_slice(&u);
    }
    out
}

/// Fit kernels and base rates by Monte Carlo EM.
///
/// `arch` supplies the wiring *and* the kernel starting point (see
/// [`default_kernel_init`]); base rates start from the data-scaled defaults
/// of [`init_sequence_params`]. Kernel parameters and virtual kernels are
/// shared across sequences; top rates and virtual base rates are
/// per-sequence. The returned trace has one record per completed iteration.
///
/// Runs are deterministic for a fixed `stream`, architecture, dataset, and
/// configuration — exactly reproducible regardless of thread count, because
/// per-sequence work is reduced in sequence order.
pub fn mcem_fit(
    arch: &Architecture,
    dataset: &[EventSequence],
    config: &MCEMConfig,
    stream: RngStream,
) -> Result<FitResult, FitError> {
    if !config.is_valid() {
        return Err(FitError::BadConfig(String::from(
            "step sizes, tolerances, and chain schedule must be positive/valid",
        )));
    }
    if dataset.is_empty() {
        return Err(FitError::EmptyDataset);
    }
    for (n, s) in dataset.iter().enumerate() {
        if s.n_types() != arch.n_types() {
            return Err(FitError::Mismatch(format!(
                "sequence {n} has {} event types, architecture expects {}",
                s.n_types(),
                arch.n_types()
            )));
        }
    }

    let n_seq = dataset.len();
    let mut arch_fit = arch.clone();
    let n_re = arch_fit.real_edges().len();
    let n_ve = arch_fit.virtual_edges().len();
    let n_h = arch_fit.n_hidden_nodes();

    let mut u_real = flatten_kernels(arch_fit.real_edges().iter().map(|e| e.theta.u()));
    let mut u_virt = flatten_kernels(arch_fit.virtual_edges().iter().map(|e| e.theta.u()));
    let mut seq_params: Vec<SequenceParams> =
        dataset.iter().map(|ev| init_sequence_params(&arch_fit, ev)).collect();
    let mut u_mu: Vec<Vec<f64>> = seq_params
        .iter()
        .map(|p| arch_fit.hidden_nodes().map(|nd| softplus_inv(p.mu_virtual_at(nd))).collect())
        .collect();

    let mut adam_real = AdamState::new(3 * n_re);
    let mut adam_virt = AdamState::new(3 * n_ve);
    let mut adam_mu: Vec<AdamState> = (0..n_seq).map(|_| AdamState::new(n_h)).collect();

    // Warmup: several rate-only adaptation rounds per sequence before the
    // recorded EM loop. Base rates converge to their empirical fixed point
    // by alternating chains with closed-form/ascent updates; skipping this
    // would make the first recorded iterations show a large objective drop
    // that is an entropy effect of the moving posterior (the data-scaled
    // initial rates concentrate the posterior on minimal latent states),
    // not a fitting failure.
    let warmup = |n: usize| -> Result<(LatentState, SequenceParams, u64), FitError> {
        let mut p = seq_params[n].clone();
        let (state, skipped) = adapt_base_rates(
            &arch_fit,
            &dataset[n],
            &mut p,
            config,
            WARMUP_ROUNDS,
            stream.substream((1u64 << 63) ^ n as u64),
        )
        .map_err(|e| match e {
            FitError::Diverged { iter, detail } => FitError::Diverged {
                iter,
                detail: format!("sequence {n} warmup: {detail}"),
            },
            other => other,
        })?;
        Ok((state, p, skipped))
    };
    #[cfg(feature = "parallel")]
    let warmed: Vec<(LatentState, SequenceParams, u64)> = {
        use rayon::prelude::*;
        (0..n_seq)
            .into_par_iter()
            .map(warmup)
            .collect::<Result<Vec<_>, FitError>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let warmed: Vec<(LatentState, SequenceParams, u64)> =
        (0..n_seq).map(warmup).collect::<Result<Vec<_>, FitError>>()?;
    let mut warm: Vec<LatentState> = Vec::with_capacity(n_seq);
    let mut total_skipped = 0u64;
    for (n, (state, p, skipped)) in warmed.into_iter().enumerate() {
        warm.push(state);
        total_skipped += skipped;
        u_mu[n] = arch_fit.hidden_nodes().map(|nd| softplus_inv(p.mu_virtual_at(nd))).collect();
        seq_params[n] = p;
    }

    let mut trace = Vec::new();
    let mut converged = false;
    let mut prev_obj = f64::NAN;

    for iter in 0..config.max_iters {
        // Round-robin batch: iteration i covers B consecutive indices mod N.
        let b = if config.batch == 0 || config.batch >= n_seq { n_seq } else { config.batch };
        let batch: Vec<usize> = (0..b).map(|j| (iter * b + j) % n_seq).collect();
        let scale = n_seq as f64 / b as f64;

        let run = |&n: &usize| {
            estep_one(
                &arch_fit,
                &seq_params[n],
                &dataset[n],
                &warm[n],
                config,
                stream,
                iter,
                n,
            )
        };
        #[cfg(feature = "parallel")]
        let outs: Vec<SeqOut> = {
            use rayon::prelude::*;
            batch.par_iter().map(run).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let outs: Vec<SeqOut> = batch.iter().map(run).collect();

        // Ordered reduction: objective, pooled stats, pooled kernel grads.
        let s_count = config.chain.n_samples;
        let mut obj_samples = alloc::vec![0.0; s_count];
        let mut pooled = ChainStats::default();
        let mut sum_real = GradAccum::zeros(&arch_fit);
        let mut sum_virt = GradAccum::zeros(&arch_fit);
        let mut iter_skipped = 0u64;
        let mut bad: Option<String> = None;
        for out in &outs {
            for (acc, ll) in obj_samples.iter_mut().zip(&out.sample_lls) {
                *acc += ll * scale;
            }
            pooled.merge(&out.stats);
            sum_real.add(&out.grads_real);
            sum_virt.add(&out.grads_virt);
            iter_skipped += out.skipped;
            if bad.is_none() {
                bad = out.bad.clone();
            }
        }
        total_skipped += iter_skipped;
        let objective = obj_samples.iter().sum::<f64>() / s_count as f64;
        let objective_se = batch_means_se(&obj_samples);
        if objective.is_nan() || objective == f64::INFINITY {
            return Err(FitError::Diverged {
                iter,
                detail: bad.unwrap_or_else(|| String::from("objective is not finite")),
            });
        }

        // M-step. Top rates first (closed form, per sequence), then kernels
        // (shared Adam ascent), then virtual base rates (per-sequence Adam).
        for out in outs {
            let n = out.seq;
            seq_params[n].mu = out.mu;
            if out.grads_virt.n_samples > 0 {
                let grad: Vec<f64> = out
                    .grads_virt
                    .mu_virtual
                    .iter()
                    .map(|g| g / out.grads_virt.n_samples as f64)
                    .collect();
                adam_mu[n].step(
                    &mut u_mu[n],
                    &grad,
                    config.r_tilde,
                    config.adam_betas,
                    config.adam_eps,
                );
                for nd in arch_fit.hidden_nodes() {
                    let flat = arch_fit.hidden_index(nd);
                    seq_params[n].mu_virtual[nd.layer - 1][nd.node] = softplus(u_mu[n][flat]);
                }
            }
            warm[n] = out.final_state;
            for (layer, rates) in seq_params[n].mu_virtual.iter().enumerate() {
                for (k, &rate) in rates.iter().enumerate() {
                    if !rate.is_finite() || rate >= RATE_DIVERGENCE_CAP {
                        return Err(FitError::Diverged {
                            iter,
                            detail: format!(
                                "sequence {n}: virtual base rate at node ({},{k}) grew to {rate:.3e}",
                                layer + 1
                            ),
                        });
                    }
                }
            }
        }

        if !config.freeze_kernels {
            if sum_real.n_samples > 0 {
                let d = sum_real.n_samples as f64;
                let grad: Vec<f64> =
                    sum_real.real.iter().flat_map(|g| g.iter().map(move |v| v / d)).collect();
                adam_real.step(&mut u_real, &grad, config.r, config.adam_betas, config.adam_eps);
                check_kernel_coords("kernel", &u_real, iter)?;
                for e in 0..n_re {
                    arch_fit.set_real_theta(
                        e,
                        KernelParams::from_unconstrained(
                            u_real[3 * e],
                            u_real[3 * e + 1],
                            u_real[3 * e + 2],
                        ),
                    );
                }
            }
            if sum_virt.n_samples > 0 {
                let d = sum_virt.n_samples as f64;
                let grad: Vec<f64> =
                    sum_virt.virt.iter().flat_map(|g| g.iter().map(move |v| v / d)).collect();
                adam_virt.step(&mut u_virt, &grad, config.r_tilde, config.adam_betas, config.adam_eps);
                check_kernel_coords("virtual kernel", &u_virt, iter)?;
                for e in 0..n_ve {
                    arch_fit.set_virtual_theta(
                        e,
                        KernelParams::from_unconstrained(
                            u_virt[3 * e],
                            u_virt[3 * e + 1],
                            u_virt[3 * e + 2],
                        ),
                    );
                }
            }
        }

        trace.push(IterationRecord {
            iter,
            objective,
            objective_se,
            accept_resample: pooled.acceptance_rate(MoveKind::Resample),
            accept_flip: pooled.acceptance_rate(MoveKind::Flip),
            accept_swap: pooled.acceptance_rate(MoveKind::Swap),
            skipped_samples: iter_skipped,
        });

        if iter > 0 && (objective - prev_obj).abs() < config.loglik_tol {
            converged = true;
            break;
        }
        prev_obj = objective;
    }

    Ok(FitResult { arch: arch_fit, seq_params, trace, converged, skipped_samples: total_skipped })
}

/// Test-time base-rate adaptation: alternate posterior sampling with rate
/// updates (closed-form top rates, Adam ascent on virtual base rates) while
/// kernels stay fixed. Samples outside the posterior's support (non-finite
/// complete log-likelihood, as happens while a cold chain is still finding
/// a hidden configuration that explains the data) are excluded from the
/// updates. Every adapted rate is floored at half an event of mass over the
/// window (see [`ADAPT_RATE_PSEUDOCOUNT`]), so a branch that has explained
/// nothing so far stays available to explain a later, unprecedented event.
/// Returns the final warm chain state (useful to seed prediction chains)
/// and the number of excluded samples. A rate escaping the numerically safe
/// range aborts with [`FitError::Diverged`] *before* any chain would have
/// to sample at it.
pub fn adapt_base_rates(
    arch: &Architecture,
    evidence: &EventSequence,
    params: &mut SequenceParams,
    config: &MCEMConfig,
    rounds: usize,
    stream: RngStream,
) -> Result<(LatentState, u64), FitError> {
    let mut rng = stream.substream(0x0adab).rng();
    let warm = init_state(arch, params, evidence, config.include_terminal, &mut rng);
    adapt_base_rates_from(arch, evidence, params, config, rounds, warm, stream)
}

/// As [`adapt_base_rates`], but continuing from a caller-provided chain
/// state instead of a freshly initialized one. This is the warm-restart
/// form used when a window grows event by event during sequential
/// prediction: the previous window's chain state is a much better starting
/// point than a cold draw.
pub fn adapt_base_rates_from(
    arch: &Architecture,
    evidence: &EventSequence,
    params: &mut SequenceParams,
    config: &MCEMConfig,
    rounds: usize,
    init: LatentState,
    stream: RngStream,
) -> Result<(LatentState, u64), FitError> {
    let mut warm = init;
    let mut adam = AdamState::new(arch.n_hidden_nodes());
    // Floor every adapted rate at a half-event pseudocount over the window
    // (see ADAPT_RATE_PSEUDOCOUNT). Applied on entry as well, so rates
    // inherited from a previous, shorter window obey the current floor.
    let rate_floor = if evidence.t_end() > 0.0 {
        ADAPT_RATE_PSEUDOCOUNT / evidence.t_end()
    } else {
        MU_FLOOR
    };
    let u_floor = softplus_inv(rate_floor);
    let mut u_mu: Vec<f64> = arch
        .hidden_nodes()
        .map(|nd| softplus_inv(params.mu_virtual_at(nd)).max(u_floor))
        .collect();
    for nd in arch.hidden_nodes() {
        params.mu_virtual[nd.layer - 1][nd.node] = softplus(u_mu[arch.hidden_index(nd)]);
    }
    for r in params.mu.iter_mut() {
        *r = r.max(rate_floor);
    }
    let mut skipped = 0u64;
    for round in 0..rounds {
        let mut rng = stream.substream(1 + round as u64).rng();
        let (samples, stats) =
            run_chain(arch, params, evidence, warm.clone(), &config.chain, &mut rng);
        // A sample whose complete log-likelihood is not finite lies outside
        // the posterior's support (typically a not-yet-equilibrated state
        // that leaves an observed event with zero intensity). Rate updates
        // computed from such states are meaningless — a cold chain with no
        // top-layer events yet would drag the top rate to its floor and the
        // model could never escape — so only valid samples update the
        // rates, and a round with none leaves them untouched.
        let valid: Vec<LatentState> = samples
            .iter()
            .zip(&stats.loglik_trace)
            .filter(|(_, ll)| ll.is_finite())
            .map(|(s, _)| s.clone())
            .collect();
        skipped += (samples.len() - valid.len()) as u64;
        if !valid.is_empty() {
            params.mu = maximize_top_rates(arch, &valid, evidence.t_end());
            for r in params.mu.iter_mut() {
                *r = r.max(rate_floor);
            }
        }
        let mut grad = alloc::vec![0.0; arch.n_hidden_nodes()];
        let mut ok = 0u64;
        for s in &valid {
            match grad_mu_virtual_only(arch, params, evidence, s) {
                Some(g) => {
                    for (a, b) in grad.iter_mut().zip(&g) {
                        *a += b;
                    }
                    ok += 1;
                }
                None => skipped += 1,
            }
        }
        if ok > 0 {
            for g in grad.iter_mut() {
                *g /= ok as f64;
            }
            adam.step(&mut u_mu, &grad, config.r_tilde, config.adam_betas, config.adam_eps);
            for u in u_mu.iter_mut() {
                *u = u.max(u_floor);
            }
            for nd in arch.hidden_nodes() {
                params.mu_virtual[nd.layer - 1][nd.node] = softplus(u_mu[arch.hidden_index(nd)]);
            }
        }
        for (rate, what) in params
            .mu
            .iter()
            .map(|r| (*r, "top rate"))
            .chain(params.mu_virtual.iter().flatten().map(|r| (*r, "virtual base rate")))
        {
            if !rate.is_finite() || rate >= RATE_DIVERGENCE_CAP {
                return Err(FitError::Diverged {
                    iter: round,
                    detail: format!("rate adaptation pushed a {what} to {rate:.3e}"),
                });
            }
        }
        warm = samples.into_iter().next_back().expect("n_samples >= 1");
    }
    Ok((warm, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{complete_loglik, node_loglik_virtual, NodeOverlay};
    use crate::oracle::finite_diff_grad;
    use crate::simulate::forward_sample;
    use alloc::vec;

    fn kp(p: f64, alpha: f64, beta: f64) -> KernelParams {
        KernelParams::from_natural(p, alpha, beta)
    }

    /// A populated two-hidden-layer instance for gradient checks.
    fn grad_instance(seed: u64) -> (Architecture, SequenceParams, EventSequence, LatentState) {
        let arch = Architecture::chain(2, 2, kp(1.3, 1.7, 1.1), kp(0.9, 1.4, 0.8));
        let params = SequenceParams::constant(&arch, 0.8, 0.3);
        let mut rng = RngStream::new(seed, 7).rng();
        let (mut state, evidence) = forward_sample(&arch, &params, 5.0, &mut rng);
        for node in arch.hidden_nodes() {
            state.node_mut(node).virt =
                crate::simulate::sample_vpp(&arch, &params, &evidence, &state, node, &mut rng);
        }
        state.set_include_terminal_event(true);
        (arch, params, evidence, state)
    }

    /// Full virtual-fit objective (sum over hidden nodes) with one virtual
    /// edge's kernel replaced, evaluated through the independently tested
    /// likelihood code: each node's real events are overlaid as its virtual
    /// data and scored by `node_loglik_virtual`.
    fn vpp_objective_with(
        arch: &Architecture,
        params: &SequenceParams,
        evidence: &EventSequence,
        state: &LatentState,
        edge: usize,
        u: &[f64],
    ) -> f64 {
        let mut arch2 = arch.clone();
        arch2.set_virtual_theta(edge, KernelParams::from_unconstrained(u[0], u[1], u[2]));
        arch2
            .hidden_nodes()
            .map(|node| {
                let overlay = NodeOverlay {
                    base: state,
                    node,
                    real: state.real(node),
                    virt: state.real(node),
                };
                node_loglik_virtual(&arch2, params, evidence, &overlay, node)
            })
            .sum()
    }

    fn real_objective_with(
        arch: &Architecture,
        params: &SequenceParams,
        evidence: &EventSequence,
        state: &LatentState,
        edge: usize,
        u: &[f64],
    ) -> f64 {
        let mut arch2 = arch.clone();
        arch2.set_real_theta(edge, KernelParams::from_unconstrained(u[0], u[1], u[2]));
        real_loglik_total(&arch2, params, evidence, state)
    }

    #[test]
    fn mu_virtual_grad_of_empty_node_is_minus_t() {
        let arch = Architecture::chain(1, 1, kp(1.0, 1.0, 1.0), kp(1.0, 1.0, 1.0));
        let params = SequenceParams::constant(&arch, 0.5, 0.4);
        let evidence = EventSequence::new(3.0, vec![vec![]]).unwrap();
        let state = LatentState::empty(&arch, false);
        let acc = grad_virtual(&arch, &params, &evidence, &state, 1e-4).unwrap();
        // No real events: d/d(mu~) = -T in natural coordinates; the stored
        // entry carries the softplus chain factor.
        let natural = acc.mu_virtual[0] / sigmoid(softplus_inv(0.4));
        assert!((natural - (-3.0)).abs() < 1e-12, "got {natural}");
    }

    #[test]
    fn empty_model_has_zero_kernel_gradients() {
        let arch = Architecture::chain(1, 1, kp(1.0, 1.0, 1.0), kp(1.0, 1.0, 1.0));
        let params = SequenceParams::constant(&arch, 0.5, 0.4);
        let evidence = EventSequence::new(3.0, vec![vec![]]).unwrap();
        let state = LatentState::empty(&arch, false);
        let real = grad_real(&arch, &params, &evidence, &state, 1e-4).unwrap();
        assert_eq!(real.real[0], [0.0; 3]);
        let virt = grad_virtual(&arch, &params, &evidence, &state, 1e-4).unwrap();
        assert_eq!(virt.virt[0], [0.0; 3]);
    }

    #[test]
    fn virtual_weight_and_rate_grads_match_finite_differences() {
        let mut checked = 0;
        for seed in 0..6u64 {
            let (arch, params, evidence, state) = grad_instance(900 + seed);
            if state.total_real() == 0 {
                continue;
            }
            let acc = match grad_virtual(&arch, &params, &evidence, &state, 1e-4) {
                Some(a) => a,
                None => continue,
            };
            for e in 0..arch.virtual_edges().len() {
                let u = arch.virtual_edges()[e].theta.u();
                let fd = finite_diff_grad(
                    |v| vpp_objective_with(&arch, &params, &evidence, &state, e, v),
                    &u,
                    1e-6,
                )
                .unwrap();
                for (i, tol) in [(0usize, 1e-5), (2usize, 1e-5), (1usize, 1e-4)] {
                    let got = acc.virt[e][i];
                    let want = fd[i];
                    let denom = want.abs().max(1e-8);
                    assert!(
                        ((got - want) / denom).abs() < tol,
                        "virtual edge {e} coord {i}: closed {got} vs fd {want} (seed {seed})"
                    );
                }
                checked += 1;
            }
        }
        assert!(checked >= 8, "only {checked} edges exercised");
    }

    #[test]
    fn real_weight_and_rate_grads_match_finite_differences() {
        let mut checked = 0;
        for seed in 0..6u64 {
            let (arch, params, evidence, state) = grad_instance(300 + seed);
            if evidence.total_events() == 0 {
                continue;
            }
            let acc = match grad_real(&arch, &params, &evidence, &state, 1e-4) {
                Some(a) => a,
                None => continue,
            };
            for e in 0..arch.real_edges().len() {
                let u = arch.real_edges()[e].theta.u();
                let fd = finite_diff_grad(
                    |v| real_objective_with(&arch, &params, &evidence, &state, e, v),
                    &u,
                    1e-6,
                )
                .unwrap();
                for (i, tol) in [(0usize, 1e-5), (2usize, 1e-5), (1usize, 1e-4)] {
                    let got = acc.real[e][i];
                    let want = fd[i];
                    let denom = want.abs().max(1e-8);
                    assert!(
                        ((got - want) / denom).abs() < tol,
                        "real edge {e} coord {i}: closed {got} vs fd {want} (seed {seed})"
                    );
                }
                checked += 1;
            }
        }
        assert!(checked >= 8, "only {checked} edges exercised");
    }

    #[test]
    fn shape_gradient_is_step_size_stable() {
        let (arch, params, evidence, state) = grad_instance(42);
        let a1 = grad_real(&arch, &params, &evidence, &state, 1e-4).unwrap();
        let a2 = grad_real(&arch, &params, &evidence, &state, 5e-5).unwrap();
        let v1 = grad_virtual(&arch, &params, &evidence, &state, 1e-4).unwrap();
        let v2 = grad_virtual(&arch, &params, &evidence, &state, 5e-5).unwrap();
        for e in 0..arch.real_edges().len() {
            let (g1, g2) = (a1.real[e][1], a2.real[e][1]);
            assert!(((g1 - g2) / g2.abs().max(1e-8)).abs() < 1e-3, "real {e}: {g1} vs {g2}");
        }
        for e in 0..arch.virtual_edges().len() {
            let (g1, g2) = (v1.virt[e][1], v2.virt[e][1]);
            assert!(((g1 - g2) / g2.abs().max(1e-8)).abs() < 1e-3, "virt {e}: {g1} vs {g2}");
        }
    }

    #[test]
    fn top_rate_maximizer_worked_examples() {
        let arch = Architecture::chain(1, 1, kp(1.0, 1.0, 1.0), kp(1.0, 1.0, 1.0));
        let top = NodeId::new(1, 0);
        let mut s1 = LatentState::empty(&arch, false);
        s1.node_mut(top).real = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(maximize_top_rates(&arch, &[s1.clone()], 10.0), vec![0.5]);

        let mut s2 = LatentState::empty(&arch, false);
        s2.node_mut(top).real = vec![0.5, 1.5];
        let mut s3 = LatentState::empty(&arch, false);
        s3.node_mut(top).real = vec![0.2, 0.9, 1.4, 2.8];
        assert_eq!(maximize_top_rates(&arch, &[s2, s3], 3.0), vec![1.0]);

        let empty = LatentState::empty(&arch, false);
        assert_eq!(maximize_top_rates(&arch, &[empty], 3.0), vec![MU_FLOOR]);
    }

    #[test]
    fn top_rate_maximizer_beats_nearby_rates() {
        // Objective: mean over samples of m ln(mu) - mu T.
        let counts = [2.0, 4.0, 1.0];
        let t = 3.0;
        let mu_star: f64 = counts.iter().sum::<f64>() / counts.len() as f64 / t;
        let objective = |mu: f64| {
            counts.iter().map(|m| m * mu.ln()).sum::<f64>() / counts.len() as f64 - mu * t
        };
        assert!(objective(mu_star) > objective(mu_star * 1.01));
        assert!(objective(mu_star) > objective(mu_star * 0.99));
    }

    #[test]
    fn adam_climbs_a_concave_objective() {
        let mut adam = AdamState::new(1);
        let mut x = [0.0];
        for _ in 0..600 {
            let grad = [-2.0 * (x[0] - 3.0)];
            adam.step(&mut x, &grad, 0.05, (0.9, 0.999), 1e-8);
        }
        assert!((x[0] - 3.0).abs() < 0.05, "got {}", x[0]);
    }

    /// A small synthetic dataset from a known single-hidden-layer model.
    fn tiny_dataset(n_seq: usize, t_end: f64, seed: u64) -> (Architecture, Vec<EventSequence>) {
        let arch = Architecture::chain(1, 1, kp(0.9, 2.0, 1.5), kp(0.9, 2.0, 1.5));
        let truth = SequenceParams::constant(&arch, 0.5, 0.3);
        let dataset: Vec<EventSequence> = (0..n_seq)
            .map(|n| {
                let mut rng = RngStream::new(seed, n as u64).rng();
                loop {
                    let (_, ev) = forward_sample(&arch, &truth, t_end, &mut rng);
                    if ev.total_events() > 0 {
                        return ev;
                    }
                }
            })
            .collect();
        (arch, dataset)
    }

    #[test]
    fn fit_objective_is_nondecreasing_up_to_noise() {
        let (arch, dataset) = tiny_dataset(4, 6.0, 11);
        let config = MCEMConfig {
            r: 0.02,
            r_tilde: 0.02,
            max_iters: 10,
            loglik_tol: 1e-12,
            chain: ChainConfig { burn_in: 400, n_samples: 48, thin: 2, ..ChainConfig::default() },
            ..MCEMConfig::default()
        };
        let fit = mcem_fit(&arch, &dataset, &config, RngStream::new(77, 0)).unwrap();
        assert_eq!(fit.trace.len(), 10);
        // Nondecreasing up to Monte Carlo noise; one excursion in ten
        // comparisons is within the tolerance of this sample size.
        let mut violations = 0;
        for w in fit.trace.windows(2) {
            let slack =
                2.0 * (w[0].objective_se.powi(2) + w[1].objective_se.powi(2)).sqrt();
            if w[1].objective < w[0].objective - slack {
                violations += 1;
            }
        }
        assert!(
            violations <= 1,
            "{violations} ascent violations; trace: {:?}",
            fit.trace.iter().map(|r| r.objective).collect::<Vec<_>>()
        );
        // Rates stayed positive and finite through every update.
        for p in &fit.seq_params {
            assert!(p.validate(&fit.arch).is_ok());
        }
        for e in fit.arch.real_edges() {
            assert!(e.theta.p() > 0.0 && e.theta.alpha() > 0.0 && e.theta.beta() > 0.0);
        }
    }

    #[test]
    fn frozen_kernel_fit_recovers_top_rate_scale() {
        let (arch, dataset) = tiny_dataset(6, 8.0, 23);
        let config = MCEMConfig {
            freeze_kernels: true,
            max_iters: 8,
            loglik_tol: 1e-12,
            chain: ChainConfig { burn_in: 400, n_samples: 32, thin: 2, ..ChainConfig::default() },
            ..MCEMConfig::default()
        };
        let fit = mcem_fit(&arch, &dataset, &config, RngStream::new(5, 0)).unwrap();
        // Kernels untouched.
        assert_eq!(fit.arch.real_edges()[0].theta, arch.real_edges()[0].theta);
        assert_eq!(fit.arch.virtual_edges()[0].theta, arch.virtual_edges()[0].theta);
        // Top rates land at a plausible scale around the truth 0.5 (a loose
        // band: few sequences, short windows).
        for p in &fit.seq_params {
            assert!(p.mu[0] > 0.05 && p.mu[0] < 2.5, "mu = {}", p.mu[0]);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let (arch, dataset) = tiny_dataset(3, 5.0, 31);
        let config = MCEMConfig {
            max_iters: 3,
            loglik_tol: 1e-12,
            chain: ChainConfig { burn_in: 150, n_samples: 16, thin: 1, ..ChainConfig::default() },
            ..MCEMConfig::default()
        };
        let a = mcem_fit(&arch, &dataset, &config, RngStream::new(99, 4)).unwrap();
        let b = mcem_fit(&arch, &dataset, &config, RngStream::new(99, 4)).unwrap();
        for (ra, rb) in a.trace.iter().zip(&b.trace) {
            assert_eq!(ra.objective.to_bits(), rb.objective.to_bits());
        }
        for (ea, eb) in a.arch.real_edges().iter().zip(b.arch.real_edges()) {
            assert_eq!(ea.theta, eb.theta);
        }
        for (pa, pb) in a.seq_params.iter().zip(&b.seq_params) {
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn runaway_step_size_aborts_with_diagnostic() {
        let (arch, dataset) = tiny_dataset(2, 5.0, 47);
        // Runaway kernel step: caught by the kernel-coordinate guard.
        let config = MCEMConfig {
            r: 1e8,
            r_tilde: 0.05,
            max_iters: 6,
            loglik_tol: 1e-12,
            chain: ChainConfig { burn_in: 100, n_samples: 8, thin: 1, ..ChainConfig::default() },
            ..MCEMConfig::default()
        };
        match mcem_fit(&arch, &dataset, &config, RngStream::new(3, 0)) {
            Err(FitError::Diverged { .. }) => {}
            other => panic!("expected divergence abort, got {other:?}"),
        }
        // Runaway virtual-rate step: caught by the rate guard before any
        // chain would have to sample at an astronomical rate.
        let config = MCEMConfig { r: 0.05, r_tilde: 1e8, ..config };
        match mcem_fit(&arch, &dataset, &config, RngStream::new(3, 0)) {
            Err(FitError::Diverged { .. }) => {}
            other => panic!("expected divergence abort, got {other:?}"),
        }
    }

    #[test]
    fn mini_batch_walks_the_dataset() {
        let (arch, dataset) = tiny_dataset(3, 5.0, 59);
        let config = MCEMConfig {
            batch: 2,
            max_iters: 4,
            loglik_tol: 1e-12,
            chain: ChainConfig { burn_in: 150, n_samples: 12, thin: 1, ..ChainConfig::default() },
            ..MCEMConfig::default()
        };
        let fit = mcem_fit(&arch, &dataset, &config, RngStream::new(13, 0)).unwrap();
        assert_eq!(fit.trace.len(), 4);
        assert!(fit.trace.iter().all(|r| r.objective.is_finite()));
        // Every sequence's rates were touched at least once across the
        // round-robin batches (3 sequences, batch 2, 4 iterations).
        for p in &fit.seq_params {
            assert!(p.validate(&fit.arch).is_ok());
        }
    }

    #[test]
    fn invalid_configs_and_datasets_are_rejected() {
        let (arch, dataset) = tiny_dataset(1, 5.0, 61);
        let bad = MCEMConfig { r: 0.0, ..MCEMConfig::default() };
        assert!(matches!(
            mcem_fit(&arch, &dataset, &bad, RngStream::new(1, 0)),
            Err(FitError::BadConfig(_))
        ));
        assert!(matches!(
            mcem_fit(&arch, &[], &MCEMConfig::default(), RngStream::new(1, 0)),
            Err(FitError::EmptyDataset)
        ));
        let wrong = EventSequence::new(4.0, vec![vec![0.5], vec![1.0]]).unwrap();
        assert!(matches!(
            mcem_fit(&arch, &[wrong], &MCEMConfig::default(), RngStream::new(1, 0)),
            Err(FitError::Mismatch(_))
        ));
    }

    #[test]
    fn mean_params_averages_elementwise() {
        let a = SequenceParams { mu: vec![1.0], mu_virtual: vec![vec![0.2, 0.4]] };
        let b = SequenceParams { mu: vec![3.0], mu_virtual: vec![vec![0.6, 0.0]] };
        let m = mean_sequence_params(&[a, b]);
        assert!((m.mu[0] - 2.0).abs() < 1e-15);
        assert!((m.mu_virtual[0][0] - 0.4).abs() < 1e-15);
        assert!((m.mu_virtual[0][1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn data_scaled_defaults_have_expected_shape() {
        let ev = EventSequence::new(10.0, vec![vec![1.0, 2.0, 3.0], vec![4.0]]).unwrap();
        let kernel = default_kernel_init(&[ev.clone()]);
        // Mean per-type count 2, window 10: kernel mean sits at 10/3.
        assert!((kernel.alpha() / kernel.beta() - 10.0 / 3.0).abs() < 1e-9);
        assert!((kernel.p() - 1.0).abs() < 1e-9);

        let arch = Architecture::chain(2, 1, kernel, kernel);
        let params = init_sequence_params(&arch, &ev);
        assert!(params.validate(&arch).is_ok());
        assert!((params.mu[0] - 0.4).abs() < 1e-12); // 4 events / (10 * 1 top node)
    }

    #[test]
    fn rate_adaptation_improves_evidence_fit() {
        // Data generated with a hot top rate; adaptation starting from a low
        // rate should climb toward it and the complete loglik should not
        // get worse on average.
        let arch = Architecture::chain(1, 1, kp(0.9, 2.0, 1.5), kp(0.9, 2.0, 1.5));
        let truth = SequenceParams::constant(&arch, 1.0, 0.3);
        let mut rng = RngStream::new(17, 0).rng();
        let evidence = loop {
            let (_, ev) = forward_sample(&arch, &truth, 8.0, &mut rng);
            if ev.total_events() >= 4 {
                break ev;
            }
        };
        let mut params = SequenceParams::constant(&arch, 0.05, 0.05);
        let config = MCEMConfig {
            chain: ChainConfig { burn_in: 300, n_samples: 24, thin: 2, ..ChainConfig::default() },
            ..MCEMConfig::default()
        };
        let (warm, _skipped) =
            adapt_base_rates(&arch, &evidence, &mut params, &config, 6, RngStream::new(21, 3))
                .unwrap();
        assert!(params.validate(&arch).is_ok());
        assert!(params.mu[0] > 0.05, "top rate should move up from 0.05, got {}", params.mu[0]);
        assert!(complete_loglik(&arch, &params, &evidence, &warm).is_finite());
    }
}
