//! Model structure, parameters, and closed-form likelihood factors.
//!
//! A model is a stack of point processes over a window [0, T]. Layer 0 is
//! the observed event stream (one sequence of times per event type); layers
//! 1..=L are latent. The top layer is homogeneous with per-node rate mu.
//! Every other real node's intensity is a sum of gamma kernels centered at
//! the real events of its parents one layer up. Each hidden node also owns
//! a "virtual" process running in the reverse time direction, driven by the
//! real events one layer *down*; virtual events are the candidate pool the
//! sampler flips into real events.
//!
//! The joint density factorizes per node, and every factor has a closed-form
//! compensator, so exact log-likelihoods (and their differences under local
//! edits) are cheap. All of that lives here; the moves live in [`crate::mcmc`].

use alloc::string::String;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::special::{log_gamma, SpecialError, Tolerance};

/// Tolerance used by the closed-form mass evaluations.
pub(crate) const MASS_TOL: Tolerance = Tolerance { abs_tol: 1e-12, rel_tol: 1e-10, max_iter: 300 };

/// Numerically stable ln(1 + e^u); always strictly positive.
pub fn softplus(u: f64) -> f64 {
    let v = u.max(0.0) + (-u.abs()).exp().ln_1p();
    v.max(f64::MIN_POSITIVE)
}

/// Inverse of [`softplus`] on (0, inf).
pub fn softplus_inv(v: f64) -> f64 {
    debug_assert!(v > 0.0, "softplus_inv requires positive input, got {v}");
    if v >= 1.0 {
        // u = v + ln(1 - e^{-v})
        v + (-(-v).exp_m1()).ln()
    } else {
        v.exp_m1().ln()
    }
}

/// Logistic sigmoid, the derivative of [`softplus`].
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Address of one node: `layer` 0 is the evidence layer, `layer` L the top.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    pub layer: usize,
    pub node: usize,
}

impl NodeId {
    pub fn new(layer: usize, node: usize) -> Self {
        Self { layer, node }
    }
}

impl core::fmt::Display for NodeId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "({}, {})", self.layer, self.node)
    }
}

/// Gamma kernel parameters, stored unconstrained.
///
/// Effective values are p = softplus(u_p), alpha = softplus(u_alpha),
/// beta = softplus(u_beta), so positivity holds by construction. The kernel is
/// phi(x) = p * beta^alpha x^{alpha-1} e^{-beta x} / Gamma(alpha) for x > 0
/// and 0 for x <= 0; p is its total mass. Construction caches the effective
/// values and the log-normalizer, so evaluation is a single exp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    u_p: f64,
    u_alpha: f64,
    u_beta: f64,
    p: f64,
    alpha: f64,
    beta: f64,
    /// ln p + alpha ln beta - ln Gamma(alpha)
    ln_coeff: f64,
    ln_gamma_alpha: f64,
}

impl KernelParams {
    /// Build from unconstrained coordinates.
    pub fn from_unconstrained(u_p: f64, u_alpha: f64, u_beta: f64) -> Self {
        assert!(
            u_p.is_finite() && u_alpha.is_finite() && u_beta.is_finite(),
            "kernel parameters must be finite: ({u_p}, {u_alpha}, {u_beta})"
        );
        let p = softplus(u_p);
        let alpha = softplus(u_alpha);
        let beta = softplus(u_beta);
        let ln_gamma_alpha =
            log_gamma(alpha).expect("softplus output is positive, log_gamma cannot fail");
        let ln_coeff = p.ln() + alpha * beta.ln() - ln_gamma_alpha;
        Self { u_p, u_alpha, u_beta, p, alpha, beta, ln_coeff, ln_gamma_alpha }
    }

    /// Build from effective (positive) values.
    pub fn from_natural(p: f64, alpha: f64, beta: f64) -> Self {
        assert!(p > 0.0 && alpha > 0.0 && beta > 0.0, "natural kernel parameters must be positive");
        Self::from_unconstrained(softplus_inv(p), softplus_inv(alpha), softplus_inv(beta))
    }

    pub fn u_p(&self) -> f64 {
        self.u_p
    }
    pub fn u_alpha(&self) -> f64 {
        self.u_alpha
    }
    pub fn u_beta(&self) -> f64 {
        self.u_beta
    }
    pub fn u(&self) -> [f64; 3] {
        [self.u_p, self.u_alpha, self.u_beta]
    }
    /// Total kernel mass.
    pub fn p(&self) -> f64 {
        self.p
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Gamma kernel density scaled by total mass p; 0 for x <= 0.
///
/// Total on the reals: x = 0 returns 0 even where alpha < 1 would diverge
/// (the kernel is defined as its left limit there).
pub fn kernel_eval(theta: &KernelParams, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    (theta.ln_coeff + (theta.alpha - 1.0) * x.ln() - theta.beta * x).exp()
}

/// Cumulative kernel mass Phi(x) = integral of the kernel over (0, x]
/// = p * P(alpha, beta x). Phi(0) = 0 and Phi -> p as x -> infinity.
///
/// # Panics
/// On x < 0 (caller contract) or if the incomplete-gamma iteration diverges
/// (unreachable for the parameter ranges the fitting loop enforces).
pub fn kernel_mass(theta: &KernelParams, x: f64) -> f64 {
    assert!(x >= 0.0, "kernel_mass: negative horizon {x}");
    if x == 0.0 {
        return 0.0;
    }
    let p = crate::special::reg_lower_inc_gamma_with_lngamma(
        theta.alpha,
        theta.beta * x,
        theta.ln_gamma_alpha,
        &MASS_TOL,
    )
    .expect("incomplete gamma did not converge: alpha out of supported range");
    theta.p * p
}

/// Proportion of the kernel mass between two horizons 0 <= a <= b.
pub(crate) fn kernel_mass_between(theta: &KernelParams, a: f64, b: f64) -> f64 {
    (kernel_mass(theta, b) - kernel_mass(theta, a)).max(0.0)
}

/// Structural and dimensional validation failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelError {
    BadWindow(String),
    UnsortedEvents { type_index: usize },
    TimeOutOfWindow { type_index: usize },
    BadArchitecture(String),
    BadParams(String),
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelError::BadWindow(msg) => write!(f, "bad window: {msg}"),
            ModelError::UnsortedEvents { type_index } => {
                write!(f, "events of type {} are not strictly increasing", type_index + 1)
            }
            ModelError::TimeOutOfWindow { type_index } => {
                write!(f, "events of type {} fall outside [0, T]", type_index + 1)
            }
            ModelError::BadArchitecture(msg) => write!(f, "bad architecture: {msg}"),
            ModelError::BadParams(msg) => write!(f, "bad parameters: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ModelError {}

impl From<SpecialError> for ModelError {
    fn from(e: SpecialError) -> Self {
        ModelError::BadParams(alloc::format!("{e}"))
    }
}

/// A real kernel edge: events at `parent` (layer l+1) raise the intensity of
/// `child` (layer l) through `theta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealEdge {
    pub parent: NodeId,
    pub child: NodeId,
    pub theta: KernelParams,
}

/// A virtual kernel edge: real events at `source` (layer l-1) raise the
/// reverse-time intensity of the virtual process at `target` (layer l).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualEdge {
    pub source: NodeId,
    pub target: NodeId,
    pub theta: KernelParams,
}

/// Layer stack plus kernel wiring.
///
/// Edge absence is structural: a missing map entry means the kernel is
/// identically zero, and no parameter exists for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    layer_sizes: Vec<usize>,
    real_edges: Vec<RealEdge>,
    virtual_edges: Vec<VirtualEdge>,
    // Edge-id adjacency, indexed [layer][node]. Lists are sorted by the far
    // endpoint's node index so iteration order (and thus every float sum and
    // RNG consumption order) is canonical.
    real_in: Vec<Vec<Vec<usize>>>,  // edges whose child is (layer, node)
    real_out: Vec<Vec<Vec<usize>>>, // edges whose parent is (layer, node)
    virt_in: Vec<Vec<Vec<usize>>>,  // edges whose target is (layer, node)
    virt_out: Vec<Vec<Vec<usize>>>, // edges whose source is (layer, node)
    /// Flat index offset of each hidden layer into [0, n_hidden_nodes).
    hidden_offsets: Vec<usize>,
}

impl Architecture {
    /// Build and validate an explicit wiring.
    ///
    /// `layer_sizes` is [K_0, ..., K_L] with L >= 1 hidden layers. Real edges
    /// must span exactly one layer downward (parent layer = child layer + 1);
    /// virtual edges one layer upward (target layer = source layer + 1).
    pub fn new(
        layer_sizes: Vec<usize>,
        real_edges: Vec<RealEdge>,
        virtual_edges: Vec<VirtualEdge>,
    ) -> Result<Self, ModelError> {
        if layer_sizes.len() < 2 {
            return Err(ModelError::BadArchitecture(String::from(
                "need at least one hidden layer on top of the evidence layer",
            )));
        }
        if layer_sizes[0] == 0 {
            return Err(ModelError::BadArchitecture(String::from(
                "evidence layer must have at least one type",
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(ModelError::BadArchitecture(String::from("empty layer")));
        }
        let n_layers = layer_sizes.len();
        let in_bounds = |n: NodeId| n.layer < n_layers && n.node < layer_sizes[n.layer];
        for e in &real_edges {
            if !in_bounds(e.parent) || !in_bounds(e.child) || e.parent.layer != e.child.layer + 1 {
                return Err(ModelError::BadArchitecture(alloc::format!(
                    "real edge {} -> {} is out of bounds or spans the wrong layers",
                    e.parent,
                    e.child
                )));
            }
        }
        for e in &virtual_edges {
            if !in_bounds(e.source) || !in_bounds(e.target) || e.target.layer != e.source.layer + 1
            {
                return Err(ModelError::BadArchitecture(alloc::format!(
                    "virtual edge {} -> {} is out of bounds or spans the wrong layers",
                    e.source,
                    e.target
                )));
            }
        }

        let empty = || {
            layer_sizes.iter().map(|&k| alloc::vec![Vec::new(); k]).collect::<Vec<Vec<Vec<usize>>>>()
        };
        let (mut real_in, mut real_out, mut virt_in, mut virt_out) =
            (empty(), empty(), empty(), empty());
        for (id, e) in real_edges.iter().enumerate() {
            real_in[e.child.layer][e.child.node].push(id);
            real_out[e.parent.layer][e.parent.node].push(id);
        }
        for (id, e) in virtual_edges.iter().enumerate() {
            virt_in[e.target.layer][e.target.node].push(id);
            virt_out[e.source.layer][e.source.node].push(id);
        }
        for lists in real_in.iter_mut().flatten() {
            lists.sort_by_key(|&id| (real_edges[id].parent.node, id));
        }
        for lists in real_out.iter_mut().flatten() {
            lists.sort_by_key(|&id| (real_edges[id].child.node, id));
        }
        for lists in virt_in.iter_mut().flatten() {
            lists.sort_by_key(|&id| (virtual_edges[id].source.node, id));
        }
        for lists in virt_out.iter_mut().flatten() {
            lists.sort_by_key(|&id| (virtual_edges[id].target.node, id));
        }

        let mut hidden_offsets = Vec::with_capacity(n_layers - 1);
        let mut acc = 0;
        for &k in layer_sizes.iter().skip(1) {
            hidden_offsets.push(acc);
            acc += k;
        }

        Ok(Self {
            layer_sizes,
            real_edges,
            virtual_edges,
            real_in,
            real_out,
            virt_in,
            virt_out,
            hidden_offsets,
        })
    }

    /// Chain wiring with `n` hidden layers over `k0` observed types.
    ///
    /// Layers 1..n-1 have one node per type wired type-to-type; the single
    /// top node connects to every node below it. `n = 1` degenerates to one
    /// hidden node driving all types. Virtual edges mirror the real edges.
    pub fn chain(k0: usize, n: usize, theta: KernelParams, theta_virtual: KernelParams) -> Self {
        assert!(k0 >= 1 && n >= 1, "chain wiring needs k0 >= 1 and n >= 1 hidden layers");
        let mut sizes = alloc::vec![k0];
        for _ in 1..n {
            sizes.push(k0);
        }
        sizes.push(1);
        let mut real = Vec::new();
        for layer in 0..n {
            let (k_child, k_parent) = (sizes[layer], sizes[layer + 1]);
            if k_parent == 1 {
                for c in 0..k_child {
                    real.push(RealEdge {
                        parent: NodeId::new(layer + 1, 0),
                        child: NodeId::new(layer, c),
                        theta,
                    });
                }
            } else {
                for c in 0..k_child {
                    real.push(RealEdge {
                        parent: NodeId::new(layer + 1, c),
                        child: NodeId::new(layer, c),
                        theta,
                    });
                }
            }
        }
        let virt = mirror_edges(&real, theta_virtual);
        Self::new(sizes, real, virt).expect("chain wiring is structurally valid")
    }

    /// Dense wiring: every node is connected to every node one layer away.
    pub fn fully_connected(
        layer_sizes: Vec<usize>,
        theta: KernelParams,
        theta_virtual: KernelParams,
    ) -> Result<Self, ModelError> {
        let mut real = Vec::new();
        for layer in 0..layer_sizes.len().saturating_sub(1) {
            for p in 0..layer_sizes[layer + 1] {
                for c in 0..layer_sizes[layer] {
                    real.push(RealEdge {
                        parent: NodeId::new(layer + 1, p),
                        child: NodeId::new(layer, c),
                        theta,
                    });
                }
            }
        }
        let virt = mirror_edges(&real, theta_virtual);
        Self::new(layer_sizes, real, virt)
    }

    /// Number of hidden layers L.
    pub fn n_hidden_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Node count of a layer (layer 0 = evidence).
    pub fn layer_size(&self, layer: usize) -> usize {
        self.layer_sizes[layer]
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    /// Observed type count K_0.
    pub fn n_types(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn real_edges(&self) -> &[RealEdge] {
        &self.real_edges
    }

    pub fn virtual_edges(&self) -> &[VirtualEdge] {
        &self.virtual_edges
    }

    /// Replace the kernel of a real edge (used by the fitting loop).
    pub fn set_real_theta(&mut self, edge_id: usize, theta: KernelParams) {
        self.real_edges[edge_id].theta = theta;
    }

    /// Replace the kernel of a virtual edge.
    pub fn set_virtual_theta(&mut self, edge_id: usize, theta: KernelParams) {
        self.virtual_edges[edge_id].theta = theta;
    }

    /// Ids of real edges whose child is `node`.
    pub fn real_edges_into(&self, node: NodeId) -> &[usize] {
        &self.real_in[node.layer][node.node]
    }

    /// Ids of real edges whose parent is `node`.
    pub fn real_edges_out_of(&self, node: NodeId) -> &[usize] {
        &self.real_out[node.layer][node.node]
    }

    /// Ids of virtual edges whose target is `node`.
    pub fn virtual_edges_into(&self, node: NodeId) -> &[usize] {
        &self.virt_in[node.layer][node.node]
    }

    /// Ids of virtual edges whose source is `node`.
    pub fn virtual_edges_out_of(&self, node: NodeId) -> &[usize] {
        &self.virt_out[node.layer][node.node]
    }

    /// Total number of hidden nodes across layers 1..=L.
    pub fn n_hidden_nodes(&self) -> usize {
        self.layer_sizes.iter().skip(1).sum()
    }

    /// Flat index of a hidden node in [0, n_hidden_nodes), layer-major.
    pub fn hidden_index(&self, node: NodeId) -> usize {
        debug_assert!(node.layer >= 1);
        self.hidden_offsets[node.layer - 1] + node.node
    }

    /// Inverse of [`Architecture::hidden_index`].
    pub fn hidden_node(&self, flat: usize) -> NodeId {
        let mut layer = 1;
        while layer < self.layer_sizes.len() - 1 && flat >= self.hidden_offsets[layer] {
            layer += 1;
        }
        NodeId::new(layer, flat - self.hidden_offsets[layer - 1])
    }

    /// Hidden node ids in flat order.
    pub fn hidden_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (1..self.layer_sizes.len())
            .flat_map(move |layer| (0..self.layer_sizes[layer]).map(move |n| NodeId::new(layer, n)))
    }

    /// Hidden nodes with no downward kernel path to the evidence layer.
    /// Such nodes can never explain data; callers should warn.
    pub fn unreachable_hidden_nodes(&self) -> Vec<NodeId> {
        let mut reachable: Vec<Vec<bool>> =
            self.layer_sizes.iter().map(|&k| alloc::vec![false; k]).collect();
        for flag in reachable[0].iter_mut() {
            *flag = true;
        }
        for layer in 1..self.layer_sizes.len() {
            for node in 0..self.layer_sizes[layer] {
                let id = NodeId::new(layer, node);
                let ok = self
                    .real_edges_out_of(id)
                    .iter()
                    .any(|&e| reachable[layer - 1][self.real_edges[e].child.node]);
                reachable[layer][node] = ok;
            }
        }
        self.hidden_nodes().filter(|n| !reachable[n.layer][n.node]).collect()
    }
}

/// One mirrored virtual edge per real edge, all sharing `theta`.
pub fn mirror_edges(real: &[RealEdge], theta: KernelParams) -> Vec<VirtualEdge> {
    real.iter().map(|e| VirtualEdge { source: e.child, target: e.parent, theta }).collect()
}

/// Per-sequence base rates.
///
/// `mu[k]` is the homogeneous rate of top node k (must stay positive);
/// `mu_virtual[l-1][k]` is the base rate of the virtual process at hidden
/// node (l, k) (nonnegative). Both are natural-space values; the fitting
/// loop maps them through softplus coordinates when it updates them.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceParams {
    pub mu: Vec<f64>,
    pub mu_virtual: Vec<Vec<f64>>,
}

impl SequenceParams {
    /// Uniform rates for every node of `arch`.
    pub fn constant(arch: &Architecture, mu: f64, mu_virtual: f64) -> Self {
        let l = arch.n_hidden_layers();
        Self {
            mu: alloc::vec![mu; arch.layer_size(l)],
            mu_virtual: (1..=l).map(|layer| alloc::vec![mu_virtual; arch.layer_size(layer)]).collect(),
        }
    }

    pub fn mu_virtual_at(&self, node: NodeId) -> f64 {
        self.mu_virtual[node.layer - 1][node.node]
    }

    pub fn validate(&self, arch: &Architecture) -> Result<(), ModelError> {
        let l = arch.n_hidden_layers();
        if self.mu.len() != arch.layer_size(l) {
            return Err(ModelError::BadParams(String::from("mu length != top layer size")));
        }
        if self.mu.iter().any(|&m| m <= 0.0 || !m.is_finite()) {
            return Err(ModelError::BadParams(String::from("mu must be positive and finite")));
        }
        if self.mu_virtual.len() != l {
            return Err(ModelError::BadParams(String::from("mu_virtual layer count mismatch")));
        }
        for (i, layer) in self.mu_virtual.iter().enumerate() {
            if layer.len() != arch.layer_size(i + 1) {
                return Err(ModelError::BadParams(String::from("mu_virtual node count mismatch")));
            }
            if layer.iter().any(|&m| m < 0.0 || !m.is_finite()) {
                return Err(ModelError::BadParams(String::from(
                    "mu_virtual must be nonnegative and finite",
                )));
            }
        }
        Ok(())
    }
}

/// Observed data: a window [0, T] and per-type sorted event times.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    t_end: f64,
    events: Vec<Vec<f64>>,
}

impl EventSequence {
    /// Validates strict within-type ordering and containment in [0, T].
    pub fn new(t_end: f64, events: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        if !t_end.is_finite() || t_end < 0.0 {
            return Err(ModelError::BadWindow(alloc::format!("T = {t_end}")));
        }
        for (k, times) in events.iter().enumerate() {
            if times.windows(2).any(|w| w[0] >= w[1]) {
                return Err(ModelError::UnsortedEvents { type_index: k });
            }
            if times.iter().any(|&t| !t.is_finite() || t < 0.0 || t > t_end) {
                return Err(ModelError::TimeOutOfWindow { type_index: k });
            }
        }
        Ok(Self { t_end, events })
    }

    /// Window length T.
    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_types(&self) -> usize {
        self.events.len()
    }

    pub fn events(&self, k: usize) -> &[f64] {
        &self.events[k]
    }

    pub fn all_events(&self) -> &[Vec<f64>] {
        &self.events
    }

    pub fn total_events(&self) -> usize {
        self.events.iter().map(Vec::len).sum()
    }

    /// The sequence truncated to the window [0, cut] (events at `cut` kept).
    pub fn prefix(&self, cut: f64) -> Self {
        let events = self
            .events
            .iter()
            .map(|ts| {
                let end = ts.partition_point(|&t| t <= cut);
                ts[..end].to_vec()
            })
            .collect();
        Self { t_end: cut, events }
    }
}

/// Real and virtual event times of every hidden node, plus the flag that
/// appends a synthetic real event at T to hidden nodes for virtual-intensity
/// purposes only (the synthetic event never enters real-likelihood sums and
/// is never a data point).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// Indexed [layer-1][node].
    nodes: Vec<Vec<NodeEvents>>,
    include_terminal_event: bool,
}

/// Sorted event times of one hidden node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeEvents {
    pub real: Vec<f64>,
    pub virt: Vec<f64>,
}

impl LatentState {
    pub fn empty(arch: &Architecture, include_terminal_event: bool) -> Self {
        let nodes = (1..=arch.n_hidden_layers())
            .map(|layer| alloc::vec![NodeEvents::default(); arch.layer_size(layer)])
            .collect();
        Self { nodes, include_terminal_event }
    }

    pub fn include_terminal_event(&self) -> bool {
        self.include_terminal_event
    }

    pub fn set_include_terminal_event(&mut self, on: bool) {
        self.include_terminal_event = on;
    }

    pub fn node(&self, node: NodeId) -> &NodeEvents {
        &self.nodes[node.layer - 1][node.node]
    }

    pub fn node_mut(&mut self, node: NodeId) -> &mut NodeEvents {
        &mut self.nodes[node.layer - 1][node.node]
    }

    /// Total real event count across hidden nodes.
    pub fn total_real(&self) -> usize {
        self.nodes.iter().flatten().map(|n| n.real.len()).sum()
    }

    /// Total virtual event count across hidden nodes.
    pub fn total_virtual(&self) -> usize {
        self.nodes.iter().flatten().map(|n| n.virt.len()).sum()
    }
}

/// Insert into a sorted vector, keeping order (duplicates allowed).
pub fn insert_sorted(times: &mut Vec<f64>, t: f64) -> usize {
    let idx = times.partition_point(|&x| x <= t);
    times.insert(idx, t);
    idx
}

/// Read access to latent events, so likelihood code can run against either a
/// concrete [`LatentState`] or a one-node overlay proposed by a move.
pub trait StateView {
    /// Real events of a hidden node (layer >= 1), terminal event excluded.
    fn real(&self, node: NodeId) -> &[f64];
    /// Virtual events of a hidden node.
    fn virt(&self, node: NodeId) -> &[f64];
    fn include_terminal(&self) -> bool;
}

impl StateView for LatentState {
    fn real(&self, node: NodeId) -> &[f64] {
        &self.nodes[node.layer - 1][node.node].real
    }
    fn virt(&self, node: NodeId) -> &[f64] {
        &self.nodes[node.layer - 1][node.node].virt
    }
    fn include_terminal(&self) -> bool {
        self.include_terminal_event
    }
}

/// A state with one node's event sets replaced; everything else reads from
/// the base state. Lets move-ratio code evaluate "state after this edit"
/// without cloning the full state.
pub struct NodeOverlay<'a> {
    pub base: &'a LatentState,
    pub node: NodeId,
    pub real: &'a [f64],
    pub virt: &'a [f64],
}

impl StateView for NodeOverlay<'_> {
    fn real(&self, node: NodeId) -> &[f64] {
        if node == self.node {
            self.real
        } else {
            self.base.real(node)
        }
    }
    fn virt(&self, node: NodeId) -> &[f64] {
        if node == self.node {
            self.virt
        } else {
            self.base.virt(node)
        }
    }
    fn include_terminal(&self) -> bool {
        self.base.include_terminal_event
    }
}

/// Events acting as a node's data: observed times for layer 0, sampled real
/// times for hidden layers.
pub(crate) fn data_events<'a>(
    evidence: &'a EventSequence,
    state: &'a (impl StateView + ?Sized),
    node: NodeId,
) -> &'a [f64] {
    if node.layer == 0 {
        evidence.events(node.node)
    } else {
        state.real(node)
    }
}

/// Conditional intensity of a real node at time t.
///
/// Top layer: the constant mu_k. Other layers: sum of kernels over all
/// parent real events (synthetic terminal event excluded).
///
/// # Panics
/// On an out-of-range node id.
pub fn real_intensity(
    arch: &Architecture,
    params: &SequenceParams,
    _evidence: &EventSequence,
    state: &(impl StateView + ?Sized),
    node: NodeId,
    t: f64,
) -> f64 {
    if node.layer == arch.n_hidden_layers() {
        return params.mu[node.node];
    }
    let mut lambda = 0.0;
    for &e in arch.real_edges_into(node) {
        let edge = &arch.real_edges()[e];
        let parents = state.real(edge.parent);
        for &tp in parents {
            if tp >= t {
                break;
            }
            lambda += kernel_eval(&edge.theta, t - tp);
        }
    }
    lambda
}

/// Intensity of the reverse-time virtual process of hidden node (l, k) at t.
///
/// Base rate plus reversed kernels over the real events one layer down; the
/// synthetic terminal event at T joins the children when the flag is set and
/// the child layer is hidden.
///
/// # Panics
/// If `node.layer == 0` (the evidence layer owns no virtual process) or the
/// id is out of range.
pub fn virtual_intensity(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    state: &(impl StateView + ?Sized),
    node: NodeId,
    t: f64,
) -> f64 {
    assert!(node.layer >= 1, "virtual_intensity: evidence layer has no virtual process");
    let mut lambda = params.mu_virtual_at(node);
    let terminal =
        if state.include_terminal() && node.layer >= 2 { Some(evidence.t_end()) } else { None };
    for &e in arch.virtual_edges_into(node) {
        let edge = &arch.virtual_edges()[e];
        let children = data_events(evidence, state, edge.source);
        let start = children.partition_point(|&tc| tc <= t);
        for &tc in &children[start..] {
            lambda += kernel_eval(&edge.theta, tc - t);
        }
        if let Some(tt) = terminal {
            lambda += kernel_eval(&edge.theta, tt - t);
        }
    }
    lambda
}

/// Log-likelihood factor of one real node: sum of log-intensities at its
/// data events minus the closed-form compensator (mu T for the top layer,
/// else the summed kernel masses over the remaining window per parent event).
///
/// Returns -inf when any event sits at zero intensity (an impossible
/// configuration, not an error).
pub fn node_loglik_real(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    state: &(impl StateView + ?Sized),
    node: NodeId,
) -> f64 {
    let t_end = evidence.t_end();
    if node.layer == arch.n_hidden_layers() {
        let mu = params.mu[node.node];
        let m = state.real(node).len();
        let mut ll = -mu * t_end;
        if m > 0 {
            ll += (m as f64) * mu.ln(); // mu = 0 with events present -> -inf
        }
        return ll;
    }
    let data = data_events(evidence, state, node);
    let mut ll = 0.0;
    for &t in data {
        let lambda = real_intensity(arch, params, evidence, state, node, t);
        if lambda <= 0.0 {
            return f64::NEG_INFINITY;
        }
        ll += lambda.ln();
    }
    for &e in arch.real_edges_into(node) {
        let edge = &arch.real_edges()[e];
        for &tp in state.real(edge.parent) {
            ll -= kernel_mass(&edge.theta, t_end - tp);
        }
    }
    ll
}

/// Log-likelihood factor of one hidden node's virtual process: its virtual
/// events are the data; the compensator is mu~ T plus one full kernel mass
/// Phi~(t_child) per child real event (the reversed kernel integrates over
/// (0, t_child]). The terminal event joins both pieces when the flag is set.
pub fn node_loglik_virtual(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    state: &(impl StateView + ?Sized),
    node: NodeId,
) -> f64 {
    let mut ll = 0.0;
    for &t in state.virt(node) {
        let lambda = virtual_intensity(arch, params, evidence, state, node, t);
        if lambda <= 0.0 {
            return f64::NEG_INFINITY;
        }
        ll += lambda.ln();
    }
    ll - virtual_compensator(arch, params, evidence, state, node)
}

/// Closed-form integral of the virtual intensity over [0, T].
pub(crate) fn virtual_compensator(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    state: &(impl StateView + ?Sized),
    node: NodeId,
) -> f64 {
    let t_end = evidence.t_end();
    let mut total = params.mu_virtual_at(node) * t_end;
    let terminal = state.include_terminal() && node.layer >= 2;
    for &e in arch.virtual_edges_into(node) {
        let edge = &arch.virtual_edges()[e];
        for &tc in data_events(evidence, state, edge.source) {
            total += kernel_mass(&edge.theta, tc);
        }
        if terminal {
            total += kernel_mass(&edge.theta, t_end);
        }
    }
    total
}

/// Joint log-density of (evidence, real latent, virtual latent): the sum of
/// every real factor (layers 0..=L) and every virtual factor (layers 1..=L).
pub fn complete_loglik(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    state: &(impl StateView + ?Sized),
) -> f64 {
    let mut ll = real_loglik_total(arch, params, evidence, state);
    for layer in 1..=arch.n_hidden_layers() {
        for k in 0..arch.layer_size(layer) {
            ll += node_loglik_virtual(arch, params, evidence, state, NodeId::new(layer, k));
        }
    }
    ll
}

/// Sum of the real factors only (layers 0..=L). This is the joint density of
/// (evidence, latent reals) under the generative model, i.e. the quantity the
/// posterior sampler targets and the EM objective averages.
pub fn real_loglik_total(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    state: &(impl StateView + ?Sized),
) -> f64 {
    let mut ll = 0.0;
    for layer in 0..=arch.n_hidden_layers() {
        for k in 0..arch.layer_size(layer) {
            ll += node_loglik_real(arch, params, evidence, state, NodeId::new(layer, k));
        }
    }
    ll
}

/// Evidence-layer factors only: log p(x | latent reals).
pub fn evidence_loglik(
    arch: &Architecture,
    params: &SequenceParams,
    evidence: &EventSequence,
    state: &(impl StateView + ?Sized),
) -> f64 {
    let mut ll = 0.0;
    for k in 0..arch.n_types() {
        ll += node_loglik_real(arch, params, evidence, state, NodeId::new(0, k));
    }
    ll
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::quadrature;
    use crate::rng::RngStream;
    use crate::simulate::forward_sample;
    use alloc::vec;

    fn kp(p: f64, alpha: f64, beta: f64) -> KernelParams {
        KernelParams::from_natural(p, alpha, beta)
    }

    /// One hidden layer, one node per layer.
    fn tiny(theta: KernelParams, theta_v: KernelParams) -> Architecture {
        Architecture::chain(1, 1, theta, theta_v)
    }

    #[test]
    fn softplus_round_trip_and_positivity() {
        for u in [-40.0, -5.0, -0.1, 0.0, 0.3, 8.0, 40.0] {
            let v = softplus(u);
            assert!(v > 0.0);
            let back = softplus_inv(v);
            assert!((back - u).abs() <= 1e-9 * u.abs().max(1.0), "u={u} back={back}");
        }
        // sigmoid is the derivative of softplus.
        for u in [-3.0, -0.5, 0.0, 1.2, 6.0] {
            let h = 1e-6;
            let fd = (softplus(u + h) - softplus(u - h)) / (2.0 * h);
            assert!((sigmoid(u) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn kernel_params_round_trip() {
        let theta = kp(2.0, 3.0, 0.5);
        assert!((theta.p() - 2.0).abs() < 1e-12);
        assert!((theta.alpha() - 3.0).abs() < 1e-12);
        assert!((theta.beta() - 0.5).abs() < 1e-12);
        let again = KernelParams::from_unconstrained(theta.u_p(), theta.u_alpha(), theta.u_beta());
        assert_eq!(theta, again);
    }

    #[test]
    fn kernel_eval_zero_left_of_origin() {
        let theta = kp(1.0, 1.0, 1.0);
        assert_eq!(kernel_eval(&theta, -1.0), 0.0);
        assert_eq!(kernel_eval(&theta, 0.0), 0.0);
        // Even when alpha < 1 would diverge at 0+, x = 0 stays 0.
        assert_eq!(kernel_eval(&kp(1.0, 0.4, 1.0), 0.0), 0.0);
    }

    #[test]
    fn kernel_eval_exponential_case() {
        let v = kernel_eval(&kp(1.0, 1.0, 1.0), 0.5);
        assert!((v - (-0.5f64).exp()).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn kernel_eval_matches_direct_formula() {
        // p=2, alpha=3, beta=2, x=1: p * b^a x^(a-1) e^(-bx) / Gamma(3)
        //   = 2 * 8 * 1 * e^-2 / 2 = 8 e^-2.
        let v = kernel_eval(&kp(2.0, 3.0, 2.0), 1.0);
        assert!((v - 8.0 * (-2.0f64).exp()).abs() < 1e-10, "got {v}");
    }

    #[test]
    fn kernel_mass_at_zero_and_exponential() {
        let theta = kp(2.0, 1.0, 1.0);
        assert_eq!(kernel_mass(&theta, 0.0), 0.0);
        let v = kernel_mass(&theta, 10.0);
        assert!((v - 2.0 * (1.0 - (-10.0f64).exp())).abs() < 1e-10, "got {v}");
    }

    #[test]
    #[should_panic(expected = "negative horizon")]
    fn kernel_mass_rejects_negative() {
        let _ = kernel_mass(&kp(1.0, 1.0, 1.0), -0.1);
    }

    #[test]
    fn kernel_mass_agrees_with_quadrature() {
        let v = kernel_mass(&kp(1.5, 2.5, 0.7), 4.0);
        let q = quadrature(|t| kernel_eval(&kp(1.5, 2.5, 0.7), t), 0.0, 4.0, 1e-11).unwrap();
        assert!((v - q).abs() < 1e-8, "mass {v} vs quadrature {q}");
    }

    #[test]
    fn kernel_mass_quadrature_random_draws() {
        // Property over random parameters and horizons.
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut uniform = move || {
            rng_state ^= rng_state >> 12;
            rng_state ^= rng_state << 25;
            rng_state ^= rng_state >> 27;
            (rng_state.wrapping_mul(0x2545F4914F6CDD1D) >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..40 {
            let p = 0.2 + 3.0 * uniform();
            let alpha = 0.5 + 5.0 * uniform();
            let beta = 0.2 + 3.0 * uniform();
            let x = 0.1 + 6.0 * uniform();
            let theta = kp(p, alpha, beta);
            // Start a hair inside 0 to keep the alpha < 1 singularity out of
            // the panel, and compare against the matching mass difference.
            let lo = 1e-6 * x;
            let v = kernel_mass(&theta, x) - kernel_mass(&theta, lo);
            let q = quadrature(|t| kernel_eval(&theta, t), lo, x, 1e-11).unwrap();
            assert!((v - q).abs() < 1e-8, "p={p} a={alpha} b={beta} x={x}: {v} vs {q}");
        }
    }

    #[test]
    fn real_intensity_top_layer_is_constant() {
        let arch = tiny(kp(1.0, 1.0, 1.0), kp(1.0, 1.0, 1.0));
        let params = SequenceParams::constant(&arch, 0.7, 0.0);
        let evidence = EventSequence::new(4.0, vec![vec![]]).unwrap();
        let state = LatentState::empty(&arch, false);
        for t in [0.0, 1.3, 4.0] {
            assert_eq!(real_intensity(&arch, &params, &evidence, &state, NodeId::new(1, 0), t), 0.7);
        }
    }

    #[test]
    fn real_intensity_empty_parents_is_zero() {
        let arch = tiny(kp(1.0, 1.0, 1.0), kp(1.0, 1.0, 1.0));
        let params = SequenceParams::constant(&arch, 0.7, 0.0);
        let evidence = EventSequence::new(4.0, vec![vec![]]).unwrap();
        let state = LatentState::empty(&arch, false);
        assert_eq!(real_intensity(&arch, &params, &evidence, &state, NodeId::new(0, 0), 2.0), 0.0);
    }

    #[test]
    fn real_intensity_single_parent_exponential() {
        let arch = tiny(kp(1.0, 1.0, 1.0), kp(1.0, 1.0, 1.0));
        let params = SequenceParams::constant(&arch, 0.7, 0.0);
        let evidence = EventSequence::new(4.0, vec![vec![]]).unwrap();
        let mut state = LatentState::empty(&arch, false);
        state.node_mut(NodeId::new(1, 0)).real = vec![1.0];
        let lam = real_intensity(&arch, &params, &evidence, &state, NodeId::new(0, 0), 1.5);
        assert!((lam - (-0.5f64).exp()).abs() < 1e-12, "got {lam}");
        // Causality: before and at the parent time the kernel contributes 0.
        assert_eq!(real_intensity(&arch, &params, &evidence, &state, NodeId::new(0, 0), 1.0), 0.0);
        assert_eq!(real_intensity(&arch, &params, &evidence, &state, NodeId::new(0, 0), 0.5), 0.0);
    }

    #[test]
    fn virtual_intensity_base_rate_only() {
        let arch = tiny(kp(1.0, 1.0, 1.0), kp(1.0, 1.0, 1.0));
        let params = SequenceParams::constant(&arch, 1.0, 0.4);
        let evidence = EventSequence::new(4.0, vec![vec![]]).unwrap();
        let state = LatentState::empty(&arch, false);
        let lam = virtual_intensity(&arch, &params, &evidence, &state, NodeId::new(1, 0), 2.0);
        assert_eq!(lam, 0.4);
    }

    #[test]
    fn virtual_intensity_reversed_kernel() {
        let arch = tiny(kp(1.0, 1.0, 1.0), kp(1.0, 1.0, 1.0));
        let params = SequenceParams::constant(&arch, 1.0, 0.0);
        let evidence = EventSequence::new(4.0, vec![vec![2.0]]).unwrap();
        let state = LatentState::empty(&arch, false);
        let node = NodeId::new(1, 0);
        let before = virtual_intensity(&arch, &params, &evidence, &state, node, 1.5);
        assert!((before - (-0.5f64).exp()).abs() < 1e-12, "got {before}");
        // Reverse-time causality: at or after the child the kernel is 0.
        assert_eq!(virtual_intensity(&arch, &params, &evidence, &state, node, 2.5), 0.0);
        assert_eq!(virtual_intensity(&arch, &params, &evidence, &state, node, 2.0), 0.0);
    }

    #[test]
    #[should_panic(expected = "no virtual process")]
    fn virtual_intensity_rejects_evidence_layer() {
        let arch = tiny(kp(1.0, 1.0, 1.0), kp(1.0, 1.0, 1.0));
        let params = SequenceParams::constant(&arch, 1.0, 0.0);
        let evidence = EventSequence::new(4.0, vec![vec![]]).unwrap();
        let state = LatentState::empty(&arch, false);
        let _ = virtual_intensity(&arch, &params, &evidence, &state, NodeId::new(0, 0), 1.0);
    }

    #[test]
    fn loglik_real_top_layer_closed_forms() {
        let arch = tiny(kp(1.0, 1.0, 1.0), kp(1.0, 1.0, 1.0));
        let evidence1 = EventSequence::new(1.0, vec![vec![]]).unwrap();
        let params1 = SequenceParams::constant(&arch, 1.0, 0.0);
        let state = LatentState::empty(&arch, false);
        let ll = node_loglik_real(&arch, &params1, &evidence1, &state, NodeId::new(1, 0));
        assert!((ll - (-1.0)).abs() < 1e-12, "got {ll}");

        let evidence10 = EventSequence::new(10.0, vec![vec![]]).unwrap();
        let params05 = SequenceParams::constant(&arch, 0.5, 0.0);
        let mut state5 = LatentState::empty(&arch, false);
        state5.node_mut(NodeId::new(1, 0)).real = vec![1.0, 3.0, 5.0, 7.0, 9.0];
        let ll5 = node_loglik_real(&arch, &params05, &evidence10, &state5, NodeId::new(1, 0));
        let expect = -5.0 + 5.0 * 0.5f64.ln();
        assert!((ll5 - expect).abs() < 1e-10, "got {ll5}, want {expect}");
    }

    #[test]
    fn loglik_real_hidden_node_hand_value() {
        // Two hidden layers; the middle node has one parent at 0 and its own
        // events at {0.5, 1.0} under a unit-exponential kernel on T = 2:
        // log e^-0.5 + log e^-1 - (1 - e^-2).
        let arch = Architecture::chain(1, 2, kp(1.0, 1.0, 1.0), kp(1.0, 1.0, 1.0));
        let params = SequenceParams::constant(&arch, 1.0, 0.0);
        let evidence = EventSequence::new(2.0, vec![vec![]]).unwrap();
        let mut state = LatentState::empty(&arch, false);
        state.node_mut(NodeId::new(2, 0)).real = vec![0.0];
        state.node_mut(NodeId::new(1, 0)).real = vec![0.5, 1.0];
        let ll = node_loglik_real(&arch, &params, &evidence, &state, NodeId::new(1, 0));
        let expect = -1.5 - (1.0 - (-2.0f64).exp());
        assert!((ll - expect).abs() < 1e-10, "got {ll}, want {expect}");
        assert!((expect - (-2.3646647)).abs() < 1e-7);

        // Compensator against quadrature of the intensity itself.
        let compensator = quadrature(
            |t| real_intensity(&arch, &params, &evidence, &state, NodeId::new(1, 0), t),
            0.0,
            2.0,
            1e-11,
        )
        .unwrap();
        assert!((compensator - (1.0 - (-2.0f64).exp())).abs() < 1e-8);
    }

    #[test]
    fn loglik_real_zero_intensity_event_is_neg_inf() {
        // An evidence event with no hidden parents has zero intensity.
        let arch = tiny(kp(1.0, 1.0, 1.0), kp(1.0, 1.0, 1.0));
        let params = SequenceParams::constant(&arch, 1.0, 0.0);
        let evidence = EventSequence::new(4.0, vec![vec![1.0]]).unwrap();
        let state = LatentState::empty(&arch, false);
        let ll = node_loglik_real(&arch, &params, &evidence, &state, NodeId::new(0, 0));
        assert_eq!(ll, f64::NEG_INFINITY);
    }

    #[test]
    fn loglik_virtual_base_rate_only() {
        let arch = tiny(kp(1.0, 1.0, 1.0), kp(1.0, 1.0, 1.0));
        let params = SequenceParams::constant(&arch, 1.0, 0.5);
        let evidence = EventSequence::new(3.0, vec![vec![]]).unwrap();
        let state = LatentState::empty(&arch, false);
        let ll = node_loglik_virtual(&arch, &params, &evidence, &state, NodeId::new(1, 0));
        assert!((ll - (-1.5)).abs() < 1e-12, "got {ll}");
    }

    #[test]
    fn loglik_virtual_hand_value() {
        // mu~ = 0, child at 2, one virtual event at 1.5, T = 5:
        // log e^-0.5 - Phi~(2) = -0.5 - (1 - e^-2).
        let arch = tiny(kp(1.0, 1.0, 1.0), kp(1.0, 1.0, 1.0));
        let params = SequenceParams::constant(&arch, 1.0, 0.0);
        let evidence = EventSequence::new(5.0, vec![vec![2.0]]).unwrap();
        let mut state = LatentState::empty(&arch, false);
        state.node_mut(NodeId::new(1, 0)).virt = vec![1.5];
        let ll = node_loglik_virtual(&arch, &params, &evidence, &state, NodeId::new(1, 0));
        let expect = -0.5 - (1.0 - (-2.0f64).exp());
        assert!((ll - expect).abs() < 1e-10, "got {ll}, want {expect}");
        assert!((expect - (-1.3646647)).abs() < 1e-7);
    }

    #[test]
    fn loglik_virtual_zero_intensity_is_neg_inf() {
        // Virtual event after every child with mu~ = 0: intensity 0.
        let arch = tiny(kp(1.0, 1.0, 1.0), kp(1.0, 1.0, 1.0));
        let params = SequenceParams::constant(&arch, 1.0, 0.0);
        let evidence = EventSequence::new(5.0, vec![vec![2.0]]).unwrap();
        let mut state = LatentState::empty(&arch, false);
        state.node_mut(NodeId::new(1, 0)).virt = vec![3.0];
        let ll = node_loglik_virtual(&arch, &params, &evidence, &state, NodeId::new(1, 0));
        assert_eq!(ll, f64::NEG_INFINITY);
    }

    #[test]
    fn complete_loglik_empty_instance() {
        let arch = tiny(kp(1.0, 1.0, 1.0), kp(1.0, 1.0, 1.0));
        let params = SequenceParams::constant(&arch, 1.0, 0.5);
        let evidence = EventSequence::new(1.0, vec![vec![]]).unwrap();
        let state = LatentState::empty(&arch, false);
        let ll = complete_loglik(&arch, &params, &evidence, &state);
        assert!((ll - (-1.5)).abs() < 1e-12, "got {ll}");
    }

    /// A 2-hidden-layer state with events on every node for structural tests.
    fn busy_instance() -> (Architecture, SequenceParams, EventSequence, LatentState) {
        let arch = Architecture::chain(2, 2, kp(1.3, 1.8, 1.1), kp(0.9, 1.2, 0.8));
        let params = SequenceParams::constant(&arch, 0.6, 0.3);
        let evidence = EventSequence::new(6.0, vec![vec![1.0, 2.2, 4.8], vec![0.7, 3.3]]).unwrap();
        let mut state = LatentState::empty(&arch, false);
        state.node_mut(NodeId::new(1, 0)).real = vec![0.5, 2.0];
        state.node_mut(NodeId::new(1, 0)).virt = vec![1.1, 3.9];
        state.node_mut(NodeId::new(1, 1)).real = vec![0.2, 3.0];
        state.node_mut(NodeId::new(1, 1)).virt = vec![2.4];
        state.node_mut(NodeId::new(2, 0)).real = vec![0.1, 1.7];
        state.node_mut(NodeId::new(2, 0)).virt = vec![0.9, 4.4];
        (arch, params, evidence, state)
    }

    #[test]
    fn complete_loglik_is_factor_sum_in_any_order() {
        let (arch, params, evidence, state) = busy_instance();
        let total = complete_loglik(&arch, &params, &evidence, &state);
        assert!(total.is_finite());
        // Re-sum the factors in reverse enumeration order.
        let mut nodes: Vec<(NodeId, bool)> = Vec::new();
        for layer in 0..=arch.n_hidden_layers() {
            for k in 0..arch.layer_size(layer) {
                nodes.push((NodeId::new(layer, k), false));
                if layer >= 1 {
                    nodes.push((NodeId::new(layer, k), true));
                }
            }
        }
        let mut reversed = 0.0;
        for &(node, virtual_factor) in nodes.iter().rev() {
            reversed += if virtual_factor {
                node_loglik_virtual(&arch, &params, &evidence, &state, node)
            } else {
                node_loglik_real(&arch, &params, &evidence, &state, node)
            };
        }
        assert!((total - reversed).abs() < 1e-12 * total.abs().max(1.0));
    }

    #[test]
    fn evidence_factor_is_exactly_zero_when_disconnected_and_empty() {
        // Type 1 observes nothing and no hidden events feed it.
        let arch = tiny(kp(1.0, 1.0, 1.0), kp(1.0, 1.0, 1.0));
        let params = SequenceParams::constant(&arch, 1.0, 0.0);
        let evidence = EventSequence::new(4.0, vec![vec![]]).unwrap();
        let state = LatentState::empty(&arch, false);
        assert_eq!(node_loglik_real(&arch, &params, &evidence, &state, NodeId::new(0, 0)), 0.0);
    }

    #[test]
    fn terminal_event_touches_only_virtual_factors_with_t_end_terms() {
        let (arch, params, evidence, mut state) = busy_instance();
        state.set_include_terminal_event(false);
        let real_off: Vec<f64> = arch
            .hidden_nodes()
            .map(|n| node_loglik_real(&arch, &params, &evidence, &state, n))
            .collect();
        let v1_off = node_loglik_virtual(&arch, &params, &evidence, &state, NodeId::new(1, 0));
        let v2_off = node_loglik_virtual(&arch, &params, &evidence, &state, NodeId::new(2, 0));
        state.set_include_terminal_event(true);
        let real_on: Vec<f64> = arch
            .hidden_nodes()
            .map(|n| node_loglik_real(&arch, &params, &evidence, &state, n))
            .collect();
        let v1_on = node_loglik_virtual(&arch, &params, &evidence, &state, NodeId::new(1, 0));
        let v2_on = node_loglik_virtual(&arch, &params, &evidence, &state, NodeId::new(2, 0));
        // Real factors identical bit for bit; layer-1 virtual factor too
        // (its children are evidence types, which never gain a terminal).
        assert_eq!(real_off, real_on);
        assert_eq!(v1_off, v1_on);
        // The layer-2 factor picks up exactly the t_child = T terms: one
        // kernel at T - t~ per in-edge inside each log, and one Phi~(T) per
        // in-edge in the compensator (each child node gains one terminal).
        let node2 = NodeId::new(2, 0);
        let t_end = evidence.t_end();
        let mut expect_delta = 0.0;
        for &e in arch.virtual_edges_into(node2) {
            expect_delta -= kernel_mass(&arch.virtual_edges()[e].theta, t_end);
        }
        state.set_include_terminal_event(false);
        for &tv in &state.node(node2).virt.clone() {
            let base = virtual_intensity(&arch, &params, &evidence, &state, node2, tv);
            let terminal_terms: f64 = arch
                .virtual_edges_into(node2)
                .iter()
                .map(|&e| kernel_eval(&arch.virtual_edges()[e].theta, t_end - tv))
                .sum();
            expect_delta += ((base + terminal_terms) / base).ln();
        }
        assert!(
            ((v2_on - v2_off) - expect_delta).abs() < 1e-10,
            "delta {} vs expected {expect_delta}",
            v2_on - v2_off
        );
    }

    #[test]
    fn complete_loglik_matches_forward_frequencies() {
        // Density-vs-frequency check on a discretized slice of the state
        // space: P(one top event in [a, b], no evidence events) is both the
        // quadrature of exp(complete_loglik) over the bin and a forward-
        // simulation frequency.
        let theta = kp(1.2, 1.4, 2.0);
        let arch = tiny(theta, theta);
        let params = SequenceParams::constant(&arch, 0.5, 0.0);
        let t_end = 1.0;
        let evidence = EventSequence::new(t_end, vec![vec![]]).unwrap();
        let (a, b) = (0.2, 0.5);
        let density = |s: f64| {
            let mut state = LatentState::empty(&arch, false);
            state.node_mut(NodeId::new(1, 0)).real = vec![s];
            complete_loglik(&arch, &params, &evidence, &state).exp()
        };
        let p_bin = quadrature(density, a, b, 1e-10).unwrap();

        let n = 200_000usize;
        let mut hits = 0usize;
        let mut rng = RngStream::new(30, 0).rng();
        for _ in 0..n {
            let (state, ev) = forward_sample(&arch, &params, t_end, &mut rng);
            let tops = state.real(NodeId::new(1, 0));
            if ev.total_events() == 0 && tops.len() == 1 && (a..b).contains(&tops[0]) {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        let se = (p_bin * (1.0 - p_bin) / n as f64).sqrt();
        assert!(
            (freq - p_bin).abs() <= 3.0 * se,
            "frequency {freq} vs density integral {p_bin} (se {se})"
        );
    }

    #[test]
    fn architecture_rejects_bad_edges() {
        let theta = kp(1.0, 1.0, 1.0);
        // Edge spanning two layers.
        let bad = Architecture::new(
            vec![1, 1, 1],
            vec![RealEdge { parent: NodeId::new(2, 0), child: NodeId::new(0, 0), theta }],
            vec![],
        );
        assert!(bad.is_err());
        // Node index out of range.
        let bad2 = Architecture::new(
            vec![1, 1],
            vec![RealEdge { parent: NodeId::new(1, 1), child: NodeId::new(0, 0), theta }],
            vec![],
        );
        assert!(bad2.is_err());
        // No hidden layer at all.
        assert!(Architecture::new(vec![3], vec![], vec![]).is_err());
    }

    #[test]
    fn architecture_reports_unreachable_nodes() {
        let theta = kp(1.0, 1.0, 1.0);
        let arch = Architecture::new(
            vec![1, 2],
            vec![RealEdge { parent: NodeId::new(1, 0), child: NodeId::new(0, 0), theta }],
            vec![VirtualEdge { source: NodeId::new(0, 0), target: NodeId::new(1, 0), theta }],
        )
        .unwrap();
        assert_eq!(arch.unreachable_hidden_nodes(), vec![NodeId::new(1, 1)]);
        let chain = Architecture::chain(2, 2, theta, theta);
        assert!(chain.unreachable_hidden_nodes().is_empty());
    }

    #[test]
    fn chain_wiring_shape() {
        let theta = kp(1.0, 1.0, 1.0);
        let arch = Architecture::chain(3, 2, theta, theta);
        assert_eq!(arch.layer_sizes(), &[3, 3, 1]);
        // Layer 1 mirrors the types one-to-one; the single top node feeds all.
        assert_eq!(arch.real_edges().len(), 6);
        assert_eq!(arch.virtual_edges().len(), 6);
        for k in 0..3 {
            let into = arch.real_edges_into(NodeId::new(0, k));
            assert_eq!(into.len(), 1);
            assert_eq!(arch.real_edges()[into[0]].parent, NodeId::new(1, k));
        }
        for e in arch.virtual_edges() {
            assert_eq!(e.target.layer, e.source.layer + 1);
        }
    }

    #[test]
    fn mirror_edges_reverses_real_wiring() {
        let theta = kp(1.0, 1.0, 1.0);
        let real = vec![RealEdge { parent: NodeId::new(1, 0), child: NodeId::new(0, 2), theta }];
        let virt = mirror_edges(&real, theta);
        assert_eq!(virt.len(), 1);
        assert_eq!(virt[0].source, NodeId::new(0, 2));
        assert_eq!(virt[0].target, NodeId::new(1, 0));
    }

    #[test]
    fn event_sequence_validation() {
        assert!(EventSequence::new(5.0, vec![vec![1.0, 1.0]]).is_err()); // not strictly increasing
        assert!(EventSequence::new(5.0, vec![vec![2.0, 1.0]]).is_err()); // unsorted
        assert!(EventSequence::new(5.0, vec![vec![6.0]]).is_err()); // out of window
        assert!(EventSequence::new(-1.0, vec![vec![]]).is_err()); // bad window
        let ok = EventSequence::new(5.0, vec![vec![0.0, 2.0, 5.0]]).unwrap();
        assert_eq!(ok.total_events(), 3);
    }

    #[test]
    fn event_sequence_prefix_truncates() {
        let seq = EventSequence::new(10.0, vec![vec![1.0, 4.0, 7.0], vec![5.0]]).unwrap();
        let cut = seq.prefix(4.5);
        assert_eq!(cut.t_end(), 4.5);
        assert_eq!(cut.events(0), &[1.0, 4.0]);
        assert_eq!(cut.events(1), &[] as &[f64]);
    }

    #[test]
    fn insert_sorted_keeps_order() {
        let mut v = vec![1.0, 3.0, 5.0];
        assert_eq!(insert_sorted(&mut v, 4.0), 2);
        assert_eq!(insert_sorted(&mut v, 0.5), 0);
        assert_eq!(insert_sorted(&mut v, 6.0), 5);
        assert_eq!(v, vec![0.5, 1.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn node_overlay_substitutes_one_node() {
        let (arch, _params, _evidence, state) = busy_instance();
        let node = NodeId::new(1, 0);
        let new_real = vec![0.25];
        let new_virt = vec![2.5, 2.75];
        let overlay = NodeOverlay { base: &state, node, real: &new_real, virt: &new_virt };
        assert_eq!(overlay.real(node), &[0.25]);
        assert_eq!(overlay.virt(node), &[2.5, 2.75]);
        let other = NodeId::new(1, 1);
        assert_eq!(overlay.real(other), state.real(other));
        assert_eq!(overlay.virt(other), state.virt(other));
        assert_eq!(overlay.include_terminal(), state.include_terminal());
        let _ = &arch;
    }

    #[test]
    fn sequence_params_validation() {
        let arch = tiny(kp(1.0, 1.0, 1.0), kp(1.0, 1.0, 1.0));
        let good = SequenceParams::constant(&arch, 1.0, 0.0);
        assert!(good.validate(&arch).is_ok());
        let bad_mu = SequenceParams { mu: vec![0.0], mu_virtual: vec![vec![0.0]] };
        assert!(bad_mu.validate(&arch).is_err());
        let bad_virtual = SequenceParams { mu: vec![1.0], mu_virtual: vec![vec![-0.1]] };
        assert!(bad_virtual.validate(&arch).is_err());
        let bad_len = SequenceParams { mu: vec![1.0, 1.0], mu_virtual: vec![vec![0.0]] };
        assert!(bad_len.validate(&arch).is_err());
    }
}
