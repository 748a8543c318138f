//! Auxiliary-variable Markov chain over the hidden real/virtual events.
//!
//! Three moves drive the chain, each touching exactly one hidden node:
//!
//! 1. **Resample** — redraw the node's virtual events directly from their
//!    target process. An exact (Gibbs-style) draw, so it is always accepted.
//! 2. **Flip** — pick one event from the union of the node's real and
//!    virtual sets and move it to the other set.
//! 3. **Swap** — exchange one real and one virtual event of the node.
//!
//! Acceptance is always decided by [`affected_ratio`], which re-evaluates
//! exactly the likelihood factors a single-node edit can touch. The
//! closed-form flip ratios ([`ratio_flip_v2r`], [`ratio_flip_r2v`]) are kept
//! as cross-checked fast paths; the swap ratio is deliberately left to the
//! exact recomputation because its two edits interact within one node.

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::model::{
    complete_loglik, data_events, insert_sorted, kernel_eval, kernel_mass, node_loglik_real,
    node_loglik_virtual, real_intensity, virtual_intensity, Architecture, EventSequence,
    LatentState, NodeId, NodeOverlay, SequenceParams, StateView,
};
use crate::simulate::sample_vpp;

/// Move-selection distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoveProbs {
    pub p_resample: f64,
    pub p_flip: f64,
    pub p_swap: f64,
}

impl Default for MoveProbs {
    fn default() -> Self {
        Self { p_resample: 0.2, p_flip: 0.6, p_swap: 0.2 }
    }
}

impl MoveProbs {
    /// Nonnegative and summing to one (within float tolerance).
    pub fn is_valid(&self) -> bool {
        let s = self.p_resample + self.p_flip + self.p_swap;
        self.p_resample >= 0.0
            && self.p_flip >= 0.0
            && self.p_swap >= 0.0
            && (s - 1.0).abs() < 1e-9
    }
}

/// Chain schedule: burn-in steps, then `n_samples` retained states spaced
/// `thin` steps apart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainConfig {
    pub burn_in: usize,
    pub n_samples: usize,
    pub thin: usize,
    pub move_probs: MoveProbs,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self { burn_in: 100, n_samples: 64, thin: 1, move_probs: MoveProbs::default() }
    }
}

impl ChainConfig {
    pub fn is_valid(&self) -> bool {
        self.n_samples >= 1 && self.thin >= 1 && self.move_probs.is_valid()
    }
}

/// The move families, usable as counter indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveKind {
    Resample = 0,
    Flip = 1,
    Swap = 2,
}

pub const N_MOVE_KINDS: usize = 3;

/// Mixing diagnostics: per-move selection/acceptance/no-op counters and the
/// joint log-likelihood at each retained sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChainStats {
    pub selected: [u64; N_MOVE_KINDS],
    pub accepted: [u64; N_MOVE_KINDS],
    /// Degenerate picks (nothing to flip or swap), counted as steps that
    /// proposed nothing rather than re-rolled into another move.
    pub noop: [u64; N_MOVE_KINDS],
    pub loglik_trace: Vec<f64>,
}

impl ChainStats {
    /// Accepted / (selected - noop); NaN when the move never really ran.
    pub fn acceptance_rate(&self, kind: MoveKind) -> f64 {
        let i = kind as usize;
        self.accepted[i] as f64 / (self.selected[i] - self.noop[i]) as f64
    }

    /// Fraction of steps that selected this move.
    pub fn move_fraction(&self, kind: MoveKind) -> f64 {
        let total: u64 = self.selected.iter().sum();
        self.selected[kind as usize] as f64 / total as f64
    }

    pub fn total_steps(&self) -> u64 {
        self.selected.iter().sum()
    }

    /// Fold another chain's counters into this one (trace is appended).
    pub fn merge(&mut self, other: &ChainStats) {
        for i in 0..N_MOVE_KINDS {
            self.selected[i] += other.selected[i];
            self.accepted[i] += other.accepted[i];
            self.noop[i] += other.noop[i];
        }
        self.loglik_trace.extend_from_slice(&other.loglik_trace);
    }
}

/// A single-node edit: the node's prospective real and virtual event sets.
#[derive(Debug, Clone, Copy)]
pub struct Proposal<'a> {
    pub node: NodeId,
    pub real: &'a [f64],
    pub virt: &'a [f64],
}

/// Log likelihood ratio of `proposal` against the current state, computed by
/// re-evaluating only the factors a single-node edit can change: the node's
/// own real and virtual factors, the real factors of children reached
/// through its outgoing real edges, and the virtual factors of targets
/// reached through its outgoing virtual edges. Equals the difference of full
/// joint log-likelihoods whenever the untouched factors are finite.
///
/// Infinities resolve to certain-move semantics: a proposed state with an
/// impossible factor gives -inf (certain rejection); if only the current
/// state has an impossible factor the ratio is +inf (certain acceptance, the
/// chain escapes an impossible configuration).
pub fn affected_ratio(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    state: &LatentState,
    proposal: &Proposal<'_>,
) -> f64 {
    let node = proposal.node;
    let overlay =
        NodeOverlay { base: state, node, real: proposal.real, virt: proposal.virt };
    let mut sum = 0.0;
    let mut escape = false;
    // Accumulate one (old, new) factor pair. Returns false when the
    // proposal is already certainly rejected.
    let pair = |old: f64, new: f64, sum: &mut f64, escape: &mut bool| -> bool {
        if new == f64::NEG_INFINITY {
            return false;
        }
        if old == f64::NEG_INFINITY {
            *escape = true;
        } else {
            *sum += new - old;
        }
        true
    };

    let own_real_old = node_loglik_real(arch, params, evidence, state, node);
    let own_real_new = node_loglik_real(arch, params, evidence, &overlay, node);
    if !pair(own_real_old, own_real_new, &mut sum, &mut escape) {
        return f64::NEG_INFINITY;
    }
    let own_virt_old = node_loglik_virtual(arch, params, evidence, state, node);
    let own_virt_new = node_loglik_virtual(arch, params, evidence, &overlay, node);
    if !pair(own_virt_old, own_virt_new, &mut sum, &mut escape) {
        return f64::NEG_INFINITY;
    }

    // Factors beyond the node itself react only to its real events.
    if proposal.real != state.real(node) {
        let mut last_child: Option<NodeId> = None;
        for &e in arch.real_edges_out_of(node) {
            let child = arch.real_edges()[e].child;
            if last_child == Some(child) {
                continue; // adjacency is sorted, duplicates are adjacent
            }
            last_child = Some(child);
            let old = node_loglik_real(arch, params, evidence, state, child);
            let new = node_loglik_real(arch, params, evidence, &overlay, child);
            if !pair(old, new, &mut sum, &mut escape) {
                return f64::NEG_INFINITY;
            }
        }
        let mut last_target: Option<NodeId> = None;
        for &e in arch.virtual_edges_out_of(node) {
            let target = arch.virtual_edges()[e].target;
            if last_target == Some(target) {
                continue;
            }
            last_target = Some(target);
            let old = node_loglik_virtual(arch, params, evidence, state, target);
            let new = node_loglik_virtual(arch, params, evidence, &overlay, target);
            if !pair(old, new, &mut sum, &mut escape) {
                return f64::NEG_INFINITY;
            }
        }
    }
    if escape {
        f64::INFINITY
    } else {
        sum
    }
}

/// Real intensity of `at_node` at time `t`, with one occurrence of the
/// parent event `excl_t` at `excl_node` left out of every kernel sum.
fn real_intensity_excluding(
    arch: &Architecture,
    params: &SequenceParams,
    state: &LatentState,
    at_node: NodeId,
    t: f64,
    excl_node: NodeId,
    excl_t: f64,
) -> f64 {
    if at_node.layer == arch.n_hidden_layers() {
        return params.mu[at_node.node];
    }
    let mut lambda = 0.0;
    for &e in arch.real_edges_into(at_node) {
        let edge = &arch.real_edges()[e];
        let mut skipped = false;
        for &tp in state.real(edge.parent) {
            if tp >= t {
                break;
            }
            if !skipped && edge.parent == excl_node && tp == excl_t {
                skipped = true;
                continue;
            }
            lambda += kernel_eval(&edge.theta, t - tp);
        }
    }
    lambda
}

/// Virtual intensity of `at_node` at `t`, with one occurrence of the source
/// real event `excl_t` at `excl_node` left out.
#[allow(clippy::too_many_arguments)]
fn virtual_intensity_excluding(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    state: &LatentState,
    at_node: NodeId,
    t: f64,
    excl_node: NodeId,
    excl_t: f64,
) -> f64 {
    let mut lambda = params.mu_virtual_at(at_node);
    let terminal = state.include_terminal_event() && at_node.layer >= 2;
    for &e in arch.virtual_edges_into(at_node) {
        let edge = &arch.virtual_edges()[e];
        let children = data_events(evidence, state, edge.source);
        let start = children.partition_point(|&tc| tc <= t);
        let mut skipped = false;
        for &tc in &children[start..] {
            if !skipped && edge.source == excl_node && tc == excl_t {
                skipped = true;
                continue;
            }
            lambda += kernel_eval(&edge.theta, tc - t);
        }
        if terminal {
            lambda += kernel_eval(&edge.theta, evidence.t_end() - t);
        }
    }
    lambda
}

/// Closed-form log ratio for flipping the virtual event `t_virt` of `node`
/// into a real event: the intensity swap at the event itself, a factor per
/// downstream real event after `t_virt` (its intensity gains the new
/// kernels), a factor per upstream virtual event before `t_virt`, and the
/// two compensator exponents.
pub fn ratio_flip_v2r(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    state: &LatentState,
    node: NodeId,
    t_virt: f64,
) -> f64 {
    let t_end = evidence.t_end();
    let lam_real = real_intensity(arch, params, evidence, state, node, t_virt);
    let lam_virt = virtual_intensity(arch, params, evidence, state, node, t_virt);
    debug_assert!(lam_virt > 0.0, "flipping a virtual event that has zero virtual intensity");
    let mut ratio = lam_real.ln() - lam_virt.ln();
    for &e in arch.real_edges_out_of(node) {
        let edge = &arch.real_edges()[e];
        ratio -= kernel_mass(&edge.theta, t_end - t_virt);
        let children = data_events(evidence, state, edge.child);
        let start = children.partition_point(|&tc| tc <= t_virt);
        for &tc in &children[start..] {
            let lam = real_intensity(arch, params, evidence, state, edge.child, tc);
            ratio += (lam + kernel_eval(&edge.theta, tc - t_virt)).ln() - lam.ln();
        }
    }
    for &e in arch.virtual_edges_out_of(node) {
        let edge = &arch.virtual_edges()[e];
        ratio -= kernel_mass(&edge.theta, t_virt);
        let uppers = state.virt(edge.target);
        for &tu in uppers {
            if tu >= t_virt {
                break;
            }
            let lam = virtual_intensity(arch, params, evidence, state, edge.target, tu);
            ratio += (lam + kernel_eval(&edge.theta, t_virt - tu)).ln() - lam.ln();
        }
    }
    ratio
}

/// Closed-form log ratio for flipping the real event `t_real` of `node` into
/// a virtual event. Downstream intensities are recomputed by direct
/// exclusion sums (never by subtracting the kernel), so an event orphaned by
/// the removal yields an exact -inf.
pub fn ratio_flip_r2v(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    state: &LatentState,
    node: NodeId,
    t_real: f64,
) -> f64 {
    let t_end = evidence.t_end();
    let lam_real = real_intensity(arch, params, evidence, state, node, t_real);
    let lam_virt = virtual_intensity(arch, params, evidence, state, node, t_real);
    // lam_real = 0 means the current state is impossible; the ratio becomes
    // +inf so the chain escapes, unless an orphaned downstream event turns
    // the proposal itself impossible below (rejection dominates).
    let mut ratio = lam_virt.ln() - lam_real.ln();
    for &e in arch.real_edges_out_of(node) {
        let edge = &arch.real_edges()[e];
        ratio += kernel_mass(&edge.theta, t_end - t_real);
        let children = data_events(evidence, state, edge.child);
        let start = children.partition_point(|&tc| tc <= t_real);
        for &tc in &children[start..] {
            let lam = real_intensity(arch, params, evidence, state, edge.child, tc);
            let lam_without =
                real_intensity_excluding(arch, params, state, edge.child, tc, node, t_real);
            if lam_without <= 0.0 {
                return f64::NEG_INFINITY; // orphaned event, certain rejection
            }
            ratio += lam_without.ln() - lam.ln();
        }
    }
    for &e in arch.virtual_edges_out_of(node) {
        let edge = &arch.virtual_edges()[e];
        ratio += kernel_mass(&edge.theta, t_real);
        let uppers = state.virt(edge.target);
        for &tu in uppers {
            if tu >= t_real {
                break;
            }
            let lam = virtual_intensity(arch, params, evidence, state, edge.target, tu);
            let lam_without = virtual_intensity_excluding(
                arch, params, evidence, state, edge.target, tu, node, t_real,
            );
            if lam_without <= 0.0 {
                return f64::NEG_INFINITY;
            }
            ratio += lam_without.ln() - lam.ln();
        }
    }
    ratio
}

/// Posterior conditional intensity for inserting a real event into `node` at
/// `t`, given everything else: the prior intensity times, per downstream
/// child, the compensator discount over the remaining window and the
/// intensity lift at every later child event.
pub fn pcif(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    state: &LatentState,
    node: NodeId,
    t: f64,
) -> f64 {
    let t_end = evidence.t_end();
    let mut log_rate = real_intensity(arch, params, evidence, state, node, t).ln();
    for &e in arch.real_edges_out_of(node) {
        let edge = &arch.real_edges()[e];
        log_rate -= kernel_mass(&edge.theta, t_end - t);
        let children = data_events(evidence, state, edge.child);
        let start = children.partition_point(|&tc| tc <= t);
        for &tc in &children[start..] {
            let lam = real_intensity(arch, params, evidence, state, edge.child, tc);
            log_rate += (lam + kernel_eval(&edge.theta, tc - t)).ln() - lam.ln();
        }
    }
    log_rate.exp()
}

/// Draw the initial state for a fresh chain: real sets empty, virtual sets
/// sampled from their processes given the empty reals. The virtual events
/// then seed real candidates through the flip move.
pub fn init_state(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    include_terminal_event: bool,
    rng: &mut impl Rng,
) -> LatentState {
    let mut state = LatentState::empty(arch, include_terminal_event);
    for layer in 1..=arch.n_hidden_layers() {
        for k in 0..arch.layer_size(layer) {
            let node = NodeId::new(layer, k);
            state.node_mut(node).virt = sample_vpp(arch, params, evidence, &state, node, rng);
        }
    }
    state
}

/// Accept/reject from a log ratio: certain moves skip the uniform draw, so
/// RNG consumption stays deterministic for a given proposal outcome.
fn accept(log_ratio: f64, rng: &mut impl Rng) -> bool {
    if log_ratio == f64::NEG_INFINITY {
        return false;
    }
    if log_ratio >= 0.0 {
        return true;
    }
    rng.gen::<f64>().ln() < log_ratio
}

/// Advance the chain by one move: pick a hidden node uniformly, pick a move
/// family from `probs`, propose, and accept by the exact affected-factor
/// ratio. Degenerate picks (empty flip/swap pools) count as no-ops.
pub fn step(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    state: &mut LatentState,
    probs: &MoveProbs,
    rng: &mut impl Rng,
    stats: &mut ChainStats,
) {
    let node = arch.hidden_node(rng.gen_range(0..arch.n_hidden_nodes()));
    let u: f64 = rng.gen();
    let kind = if u < probs.p_resample {
        MoveKind::Resample
    } else if u < probs.p_resample + probs.p_flip {
        MoveKind::Flip
    } else {
        MoveKind::Swap
    };
    stats.selected[kind as usize] += 1;
    match kind {
        MoveKind::Resample => {
            // Exact draw from the virtual process: always accepted.
            let fresh = sample_vpp(arch, params, evidence, state, node, rng);
            state.node_mut(node).virt = fresh;
            stats.accepted[kind as usize] += 1;
        }
        MoveKind::Flip => {
            let events = state.node(node);
            let (n_real, n_virt) = (events.real.len(), events.virt.len());
            if n_real + n_virt == 0 {
                stats.noop[kind as usize] += 1;
                return;
            }
            let pick = rng.gen_range(0..n_real + n_virt);
            let (new_real, new_virt) = if pick < n_real {
                let t = events.real[pick];
                let mut real = events.real.clone();
                real.remove(pick);
                let mut virt = events.virt.clone();
                insert_sorted(&mut virt, t);
                (real, virt)
            } else {
                let t = events.virt[pick - n_real];
                let mut virt = events.virt.clone();
                virt.remove(pick - n_real);
                let mut real = events.real.clone();
                insert_sorted(&mut real, t);
                (real, virt)
            };
            let proposal = Proposal { node, real: &new_real, virt: &new_virt };
            if accept(affected_ratio(arch, params, evidence, state, &proposal), rng) {
                let slot = state.node_mut(node);
                slot.real = new_real;
                slot.virt = new_virt;
                stats.accepted[kind as usize] += 1;
            }
        }
        MoveKind::Swap => {
            let events = state.node(node);
            let (n_real, n_virt) = (events.real.len(), events.virt.len());
            if n_real == 0 || n_virt == 0 {
                stats.noop[kind as usize] += 1;
                return;
            }
            let i = rng.gen_range(0..n_real);
            let j = rng.gen_range(0..n_virt);
            let (t_real, t_virt) = (events.real[i], events.virt[j]);
            let mut real = events.real.clone();
            real.remove(i);
            insert_sorted(&mut real, t_virt);
            let mut virt = events.virt.clone();
            virt.remove(j);
            insert_sorted(&mut virt, t_real);
            let proposal = Proposal { node, real: &real, virt: &virt };
            if accept(affected_ratio(arch, params, evidence, state, &proposal), rng) {
                let slot = state.node_mut(node);
                slot.real = real;
                slot.virt = virt;
                stats.accepted[kind as usize] += 1;
            }
        }
    }
}

/// Run the schedule: `burn_in` steps, then `n_samples` retained states each
/// `thin` steps apart. The last retained sample is the final chain state,
/// ready to warm-start the next sweep.
pub fn run_chain(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    init: LatentState,
    config: &ChainConfig,
    rng: &mut impl Rng,
) -> (Vec<LatentState>, ChainStats) {
    assert!(config.is_valid(), "invalid chain configuration");
    let mut state = init;
    let mut stats = ChainStats::default();
    for _ in 0..config.burn_in {
        step(arch, params, evidence, &mut state, &config.move_probs, rng, &mut stats);
    }
    let mut samples = Vec::with_capacity(config.n_samples);
    for _ in 0..config.n_samples {
        for _ in 0..config.thin {
            step(arch, params, evidence, &mut state, &config.move_probs, rng, &mut stats);
        }
        stats.loglik_trace.push(complete_loglik(arch, params, evidence, &state));
        samples.push(state.clone());
    }
    (samples, stats)
}
