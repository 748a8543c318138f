//! Exact ancestral sampling of the generative model and direct sampling of
//! the virtual processes.
//!
//! Window truncation is handled by exact conditioning: event counts come
//! from Poisson draws with the truncated kernel mass, and offsets invert the
//! truncated gamma CDF. No rejection steps, so a fixed RNG stream always
//! consumes the same number of draws for the same counts, and the virtual
//! draw is an exact sample of its target process (which is what makes the
//! resample move's acceptance probability exactly one).

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::model::{
    data_events, kernel_mass, kernel_mass_between, Architecture, EventSequence, KernelParams,
    LatentState, NodeId, SequenceParams, StateView,
};
use crate::special::{inv_reg_lower_inc_gamma, reg_lower_inc_gamma};

/// Poisson count with mean `mean` (0 allowed).
pub(crate) fn poisson_count(mean: f64, rng: &mut impl Rng) -> usize {
    debug_assert!(mean >= 0.0 && mean.is_finite(), "poisson mean must be finite >= 0: {mean}");
    if mean <= 0.0 {
        return 0;
    }
    let dist = Poisson::new(mean).expect("positive finite mean");
    dist.sample(rng) as usize
}

/// Draw from the gamma(alpha, beta) offset distribution of `theta`
/// conditioned to (lo, hi], by CDF inversion of the uniform `u` in (0, 1).
pub(crate) fn truncated_gamma_offset(theta: &KernelParams, lo: f64, hi: f64, u: f64) -> f64 {
    debug_assert!(0.0 <= lo && lo < hi);
    let tol = crate::model::MASS_TOL;
    let p_lo = if lo == 0.0 {
        0.0
    } else {
        reg_lower_inc_gamma(theta.alpha(), theta.beta() * lo, &tol).expect("valid kernel params")
    };
    let p_hi =
        reg_lower_inc_gamma(theta.alpha(), theta.beta() * hi, &tol).expect("valid kernel params");
    let target = p_lo + u * (p_hi - p_lo);
    // u < 1 keeps target < p_hi, so the inverse stays within (lo, hi].
    let x = inv_reg_lower_inc_gamma(theta.alpha(), target.min(1.0 - f64::EPSILON), &tol)
        .expect("target is a valid probability");
    (x / theta.beta()).clamp(lo, hi)
}

/// Homogeneous Poisson process on [0, T]: Poisson(rate T) count, sorted
/// i.i.d. uniform times.
///
/// # Panics
/// On negative or non-finite rate, or negative T.
pub fn sample_hpp(rate: f64, t_end: f64, rng: &mut impl Rng) -> Vec<f64> {
    assert!(rate >= 0.0 && rate.is_finite(), "sample_hpp: rate must be finite >= 0, got {rate}");
    assert!(t_end >= 0.0, "sample_hpp: window must be nonnegative, got {t_end}");
    let n = poisson_count(rate * t_end, rng);
    let mut times: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * t_end).collect();
    times.sort_by(f64::total_cmp);
    times
}

/// Children of one parent event within the window: Poisson count with the
/// truncated kernel mass, offsets from the truncated gamma, sorted absolute
/// times `t_parent + offset`.
///
/// # Panics
/// Unless 0 <= t_parent <= T.
pub fn sample_children(
    theta: &KernelParams,
    t_parent: f64,
    t_end: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    assert!(
        0.0 <= t_parent && t_parent <= t_end,
        "sample_children: parent {t_parent} outside [0, {t_end}]"
    );
    let horizon = t_end - t_parent;
    if horizon == 0.0 {
        return Vec::new();
    }
    let n = poisson_count(kernel_mass(theta, horizon), rng);
    let mut times: Vec<f64> = (0..n)
        .map(|_| t_parent + truncated_gamma_offset(theta, 0.0, horizon, rng.gen::<f64>()))
        .collect();
    times.sort_by(f64::total_cmp);
    times
}

/// Draw a complete realization: top-layer HPPs, then each lower node as the
/// superposition of child clusters over all parent edges and parent events.
/// Returns the hidden layers as a [`LatentState`] (virtual sets empty,
/// terminal flag off) and the evidence layer as an [`EventSequence`].
pub fn forward_sample(
    arch: &Architecture,
    params: &SequenceParams,
    t_end: f64,
    rng: &mut impl Rng,
) -> (LatentState, EventSequence) {
    let mut state = LatentState::empty(arch, false);
    let top = arch.n_hidden_layers();
    for k in 0..arch.layer_size(top) {
        state.node_mut(NodeId::new(top, k)).real = sample_hpp(params.mu[k], t_end, rng);
    }
    let mut evidence_events: Vec<Vec<f64>> = Vec::new();
    for layer in (0..top).rev() {
        for k in 0..arch.layer_size(layer) {
            let node = NodeId::new(layer, k);
            let mut events = Vec::new();
            for &e in arch.real_edges_into(node) {
                let edge = &arch.real_edges()[e];
                // Clone keeps the borrow checker happy; parent sets are final
                // by the time a lower layer is generated.
                let parents = state.real(edge.parent).to_vec();
                for tp in parents {
                    events.extend(sample_children(&edge.theta, tp, t_end, rng));
                }
            }
            events.sort_by(f64::total_cmp);
            if layer == 0 {
                evidence_events.push(events);
            } else {
                state.node_mut(node).real = events;
            }
        }
    }
    let evidence = EventSequence::new(t_end, evidence_events)
        .expect("sampled events are sorted and in-window");
    (state, evidence)
}

/// Exact draw of one hidden node's virtual process: the superposition of a
/// base-rate HPP and, per child real event (terminal event included when the
/// flag is set and the child layer is hidden), a reversed cluster placed at
/// `t_child - offset` with offsets from the gamma truncated to (0, t_child].
///
/// # Panics
/// If `node.layer == 0`.
pub fn sample_vpp(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    state: &(impl StateView + ?Sized),
    node: NodeId,
    rng: &mut impl Rng,
) -> Vec<f64> {
    assert!(node.layer >= 1, "sample_vpp: evidence layer has no virtual process");
    let t_end = evidence.t_end();
    let mut times = sample_hpp(params.mu_virtual_at(node), t_end, rng);
    let terminal = state.include_terminal() && node.layer >= 2;
    for &e in arch.virtual_edges_into(node) {
        let edge = &arch.virtual_edges()[e];
        let children = data_events(evidence, state, edge.source);
        let mut reversed_cluster = |tc: f64| {
            if tc <= 0.0 {
                return;
            }
            let n = poisson_count(kernel_mass(&edge.theta, tc), rng);
            for _ in 0..n {
                let offset = truncated_gamma_offset(&edge.theta, 0.0, tc, rng.gen::<f64>());
                times.push((tc - offset).max(0.0));
            }
        };
        for &tc in children {
            reversed_cluster(tc);
        }
        if terminal {
            reversed_cluster(t_end);
        }
    }
    times.sort_by(f64::total_cmp);
    times
}

/// A realization being extended past its original window, layer by layer.
///
/// Seeded from observed history plus one posterior draw of the hidden reals;
/// [`ForwardRun::extend`] then generates all events in (upto, to] for every
/// node, conditioning each existing event's remaining cluster mass on the
/// children it has already produced (independent-increment restriction of
/// the cluster processes to disjoint windows).
#[derive(Debug, Clone)]
pub struct ForwardRun {
    /// Sorted times per node, indexed [layer][node]; layer 0 is evidence.
    events: Vec<Vec<Vec<f64>>>,
    upto: f64,
}

impl ForwardRun {
    /// Seed from history: evidence events plus the hidden reals of `state`.
    pub fn new(arch: &Architecture, evidence: &EventSequence, state: &LatentState) -> Self {
        let mut events: Vec<Vec<Vec<f64>>> = Vec::with_capacity(arch.n_hidden_layers() + 1);
        events.push((0..arch.n_types()).map(|k| evidence.events(k).to_vec()).collect());
        for layer in 1..=arch.n_hidden_layers() {
            events.push(
                (0..arch.layer_size(layer))
                    .map(|k| state.real(NodeId::new(layer, k)).to_vec())
                    .collect(),
            );
        }
        Self { events, upto: evidence.t_end() }
    }

    /// End of the generated window so far.
    pub fn upto(&self) -> f64 {
        self.upto
    }

    pub fn node_events(&self, node: NodeId) -> &[f64] {
        &self.events[node.layer][node.node]
    }

    /// Generate every event in (self.upto, to], top layer first.
    pub fn extend(
        &mut self,
        arch: &Architecture,
        params: &SequenceParams,
        to: f64,
        rng: &mut impl Rng,
    ) {
        let from = self.upto;
        assert!(to > from, "extend: window must grow ({from} -> {to})");
        let top = arch.n_hidden_layers();
        for k in 0..arch.layer_size(top) {
            let n = poisson_count(params.mu[k] * (to - from), rng);
            let mut fresh: Vec<f64> = (0..n).map(|_| from + rng.gen::<f64>() * (to - from)).collect();
            fresh.sort_by(f64::total_cmp);
            self.events[top][k].extend(fresh);
        }
        for layer in (0..top).rev() {
            for k in 0..arch.layer_size(layer) {
                let node = NodeId::new(layer, k);
                let mut fresh: Vec<f64> = Vec::new();
                for &e in arch.real_edges_into(node) {
                    let edge = &arch.real_edges()[e];
                    let parents = self.events[layer + 1][edge.parent.node].clone();
                    for tp in parents {
                        let lo = (from - tp).max(0.0);
                        let hi = to - tp;
                        if hi <= lo {
                            continue;
                        }
                        let mean = kernel_mass_between(&edge.theta, lo, hi);
                        let n = poisson_count(mean, rng);
                        for _ in 0..n {
                            let off =
                                truncated_gamma_offset(&edge.theta, lo, hi, rng.gen::<f64>());
                            fresh.push(tp + off);
                        }
                    }
                }
                fresh.sort_by(f64::total_cmp);
                self.events[layer][k].extend(fresh);
            }
        }
        self.upto = to;
    }

    /// Earliest evidence event strictly after `after`, with its 0-based type.
    /// Ties on time break toward the smaller type index.
    pub fn first_evidence_after(&self, after: f64) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (k, times) in self.events[0].iter().enumerate() {
            let idx = times.partition_point(|&t| t <= after);
            if let Some(&t) = times.get(idx) {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, k));
                }
            }
        }
        best
    }
}
