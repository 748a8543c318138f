//! File formats: datasets (JSON lines), models, architecture specs, and run
//! configurations (JSON).
//!
//! Event types are 1-indexed in every file (`k` from 1 to the number of
//! types) and 0-indexed inside the library; the loaders and writers here do
//! the conversion. Saving is canonical — fixed field order, shortest
//! round-trip float formatting — so save → load → save is byte-identical.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use strata_core::mcmc::{ChainConfig, MoveProbs};
use strata_core::mcem::MCEMConfig;
use strata_core::model::{mirror_edges, RealEdge, VirtualEdge};
use strata_core::predict::PredictConfig;
use strata_core::{Architecture, EventSequence, KernelParams, NodeId, SequenceParams};

use crate::CliError;

/// Version stamp written into model files; loading rejects other values.
pub const MODEL_FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// One event in a dataset line: time and 1-indexed type.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub t: f64,
    pub k: usize,
}

/// One dataset line: an observation window and its events in time order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceRecord {
    #[serde(rename = "T")]
    pub t_end: f64,
    pub events: Vec<EventRecord>,
}

impl SequenceRecord {
    /// Flatten an [`EventSequence`] into the file representation: events
    /// merged across types, sorted by time (ties by type), types 1-indexed.
    pub fn from_sequence(seq: &EventSequence) -> Self {
        let mut events: Vec<EventRecord> = Vec::with_capacity(seq.total_events());
        for k in 0..seq.n_types() {
            events.extend(seq.events(k).iter().map(|&t| EventRecord { t, k: k + 1 }));
        }
        events.sort_by(|a, b| (a.t, a.k).partial_cmp(&(b.t, b.k)).expect("finite times"));
        Self { t_end: seq.t_end(), events }
    }

    /// Validate against the declared type count and build the in-memory
    /// sequence (0-indexed per-type event lists).
    pub fn into_sequence(self, n_types: usize, line: usize) -> Result<EventSequence, CliError> {
        let mut by_type = vec![Vec::new(); n_types];
        let mut prev = f64::NEG_INFINITY;
        for ev in &self.events {
            if ev.k < 1 || ev.k > n_types {
                return Err(CliError::Schema(format!(
                    "line {line}: event type {} outside 1..={n_types}",
                    ev.k
                )));
            }
            if !ev.t.is_finite() || ev.t < 0.0 || ev.t > self.t_end {
                return Err(CliError::Schema(format!(
                    "line {line}: event time {} outside [0, {}]",
                    ev.t, self.t_end
                )));
            }
            if ev.t < prev {
                return Err(CliError::Schema(format!(
                    "line {line}: events not sorted by time ({} after {prev})",
                    ev.t
                )));
            }
            prev = ev.t;
            by_type[ev.k - 1].push(ev.t);
        }
        EventSequence::new(self.t_end, by_type)
            .map_err(|e| CliError::Schema(format!("line {line}: {e}")))
    }
}

/// Load a JSON-lines dataset, validating against the declared type count.
pub fn load_dataset(path: &Path, n_types: usize) -> Result<Vec<EventSequence>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Schema(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SequenceRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Schema(format!("line {}: {e}", i + 1)))?;
        out.push(rec.into_sequence(n_types, i + 1)?);
    }
    Ok(out)
}

/// Write a dataset as canonical JSON lines.
pub fn save_dataset(path: &Path, dataset: &[EventSequence]) -> Result<(), CliError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for seq in dataset {
        let rec = SequenceRecord::from_sequence(seq);
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

/// Kernel parameters in unconstrained coordinates (softplus of the natural
/// mass/shape/rate), which round-trip exactly and never go out of range.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaRecord {
    pub u_p: f64,
    pub u_alpha: f64,
    pub u_beta: f64,
}

impl ThetaRecord {
    fn from_kernel(theta: &KernelParams) -> Self {
        Self { u_p: theta.u_p(), u_alpha: theta.u_alpha(), u_beta: theta.u_beta() }
    }

    fn to_kernel(self) -> Result<KernelParams, CliError> {
        if ![self.u_p, self.u_alpha, self.u_beta].iter().all(|u| u.is_finite()) {
            return Err(CliError::Schema(String::from(
                "kernel coordinates must be finite",
            )));
        }
        Ok(KernelParams::from_unconstrained(self.u_p, self.u_alpha, self.u_beta))
    }
}

/// A downward kernel edge: `parent = [layer, node]` one layer above `child`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealEdgeRecord {
    pub parent: [usize; 2],
    pub child: [usize; 2],
    pub theta: ThetaRecord,
}

/// An upward virtual edge: real events at `source` drive the virtual
/// process at `target` one layer above.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VirtualEdgeRecord {
    pub source: [usize; 2],
    pub target: [usize; 2],
    pub theta: ThetaRecord,
}

/// Base rates: `mu` per top node, `mu_virtual[l-1]` per hidden layer l.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesRecord {
    pub mu: Vec<f64>,
    pub mu_virtual: Vec<Vec<f64>>,
}

impl RatesRecord {
    fn from_params(p: &SequenceParams) -> Self {
        Self { mu: p.mu.clone(), mu_virtual: p.mu_virtual.clone() }
    }

    fn to_params(&self) -> SequenceParams {
        SequenceParams { mu: self.mu.clone(), mu_virtual: self.mu_virtual.clone() }
    }
}

/// A saved model: wiring, kernels, and base rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    /// `[K_0, ..., K_L]`: evidence types first, top layer last.
    pub layer_sizes: Vec<usize>,
    pub real_edges: Vec<RealEdgeRecord>,
    pub virtual_edges: Vec<VirtualEdgeRecord>,
    /// Starting rates for sequences outside the training set (the mean of
    /// `sequence_rates` when the model came out of training).
    pub default_rates: RatesRecord,
    /// Fitted per-sequence rates, parallel to the training dataset. Empty
    /// when not applicable.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sequence_rates: Vec<RatesRecord>,
}

/// A loaded model, converted to library types.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Architecture,
    pub defaults: SequenceParams,
    pub sequence_rates: Vec<SequenceParams>,
}

impl ModelFile {
    pub fn from_model(
        arch: &Architecture,
        defaults: &SequenceParams,
        sequence_rates: &[SequenceParams],
    ) -> Self {
        let node = |n: NodeId| [n.layer, n.node];
        Self {
            format_version: MODEL_FORMAT_VERSION,
            layer_sizes: arch.layer_sizes().to_vec(),
            real_edges: arch
                .real_edges()
                .iter()
                .map(|e| RealEdgeRecord {
                    parent: node(e.parent),
                    child: node(e.child),
                    theta: ThetaRecord::from_kernel(&e.theta),
                })
                .collect(),
            virtual_edges: arch
                .virtual_edges()
                .iter()
                .map(|e| VirtualEdgeRecord {
                    source: node(e.source),
                    target: node(e.target),
                    theta: ThetaRecord::from_kernel(&e.theta),
                })
                .collect(),
            default_rates: RatesRecord::from_params(defaults),
            sequence_rates: sequence_rates.iter().map(RatesRecord::from_params).collect(),
        }
    }

    pub fn into_model(self) -> Result<Model, CliError> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(CliError::Schema(format!(
                "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let real: Vec<RealEdge> = self
            .real_edges
            .iter()
            .map(|e| {
                Ok(RealEdge {
                    parent: NodeId::new(e.parent[0], e.parent[1]),
                    child: NodeId::new(e.child[0], e.child[1]),
                    theta: e.theta.to_kernel()?,
                })
            })
            .collect::<Result<_, CliError>>()?;
        let virt: Vec<VirtualEdge> = self
            .virtual_edges
            .iter()
            .map(|e| {
                Ok(VirtualEdge {
                    source: NodeId::new(e.source[0], e.source[1]),
                    target: NodeId::new(e.target[0], e.target[1]),
                    theta: e.theta.to_kernel()?,
                })
            })
            .collect::<Result<_, CliError>>()?;
        let arch = Architecture::new(self.layer_sizes, real, virt)?;
        let defaults = self.default_rates.to_params();
        defaults.validate(&arch)?;
        let sequence_rates: Vec<SequenceParams> =
            self.sequence_rates.iter().map(RatesRecord::to_params).collect();
        for p in &sequence_rates {
            p.validate(&arch)?;
        }
        Ok(Model { arch, defaults, sequence_rates })
    }
}

pub fn load_model(path: &Path) -> Result<Model, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Schema(format!("cannot read {}: {e}", path.display())))?;
    let file: ModelFile = serde_json::from_str(&text)?;
    file.into_model()
}

pub fn save_model(path: &Path, file: &ModelFile) -> Result<(), CliError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", serde_json::to_string_pretty(file)?)?;
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Architecture specs (training input)
// ---------------------------------------------------------------------------

/// Wiring shorthand for a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WiringSpec {
    /// One parent per child: layers of equal width are wired node-to-node,
    /// a width-1 parent layer fans out to every child.
    Chain,
    /// Every node wired to every node one layer away.
    FullyConnected,
    /// Explicit downward `[parent, child]` node pairs; virtual edges mirror
    /// them automatically.
    Explicit { real_edges: Vec<([usize; 2], [usize; 2])> },
}

/// Architecture input for `train`: the wiring shape without parameters
/// (kernels are initialized from the data).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpecFile {
    /// `[K_0, ..., K_L]`: evidence types first, top layer last.
    pub layer_sizes: Vec<usize>,
    pub wiring: WiringSpec,
}

impl ArchSpecFile {
    /// Materialize the wiring with one shared kernel initialization.
    pub fn into_architecture(self, theta: KernelParams) -> Result<Architecture, CliError> {
        let sizes = self.layer_sizes;
        let real: Vec<RealEdge> = match self.wiring {
            WiringSpec::Chain => {
                if sizes.len() < 2 {
                    return Err(CliError::Schema(String::from(
                        "layer_sizes needs at least one hidden layer",
                    )));
                }
                let mut real = Vec::new();
                for layer in 0..sizes.len() - 1 {
                    let (k_child, k_parent) = (sizes[layer], sizes[layer + 1]);
                    if k_parent != 1 && k_parent != k_child {
                        return Err(CliError::Schema(format!(
                            "chain wiring needs equal adjacent layer sizes or a \
                             width-1 parent layer; got {k_child} under {k_parent}"
                        )));
                    }
                    for c in 0..k_child {
                        let p = if k_parent == 1 { 0 } else { c };
                        real.push(RealEdge {
                            parent: NodeId::new(layer + 1, p),
                            child: NodeId::new(layer, c),
                            theta,
                        });
                    }
                }
                real
            }
            WiringSpec::FullyConnected => {
                let mut real = Vec::new();
                for layer in 0..sizes.len().saturating_sub(1) {
                    for p in 0..sizes[layer + 1] {
                        for c in 0..sizes[layer] {
                            real.push(RealEdge {
                                parent: NodeId::new(layer + 1, p),
                                child: NodeId::new(layer, c),
                                theta,
                            });
                        }
                    }
                }
                real
            }
            WiringSpec::Explicit { real_edges } => real_edges
                .into_iter()
                .map(|(p, c)| RealEdge {
                    parent: NodeId::new(p[0], p[1]),
                    child: NodeId::new(c[0], c[1]),
                    theta,
                })
                .collect(),
        };
        let virt = mirror_edges(&real, theta);
        Ok(Architecture::new(sizes, real, virt)?)
    }
}

pub fn load_arch_spec(path: &Path) -> Result<ArchSpecFile, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Schema(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Move-selection probabilities (must sum to 1).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoveProbsSection {
    pub p_resample: f64,
    pub p_flip: f64,
    pub p_swap: f64,
}

impl Default for MoveProbsSection {
    fn default() -> Self {
        let d = MoveProbs::default();
        Self { p_resample: d.p_resample, p_flip: d.p_flip, p_swap: d.p_swap }
    }
}

/// Sampler schedule for every posterior chain.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSection {
    pub burn_in: usize,
    pub n_samples: usize,
    pub thin: usize,
    pub move_probs: MoveProbsSection,
}

impl Default for ChainSection {
    fn default() -> Self {
        let d = ChainConfig::default();
        Self {
            burn_in: d.burn_in,
            n_samples: d.n_samples,
            thin: d.thin,
            move_probs: MoveProbsSection::default(),
        }
    }
}

impl ChainSection {
    pub fn to_core(self) -> ChainConfig {
        ChainConfig {
            burn_in: self.burn_in,
            n_samples: self.n_samples,
            thin: self.thin,
            move_probs: MoveProbs {
                p_resample: self.move_probs.p_resample,
                p_flip: self.move_probs.p_flip,
                p_swap: self.move_probs.p_swap,
            },
        }
    }
}

/// EM optimizer settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McemSection {
    pub r: f64,
    pub r_tilde: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub alpha_fd_step: f64,
    pub max_iters: usize,
    pub loglik_tol: f64,
    /// Sequences per iteration; 0 trains on the full dataset.
    pub batch: usize,
    pub include_terminal: bool,
    pub freeze_kernels: bool,
}

impl Default for McemSection {
    fn default() -> Self {
        let d = MCEMConfig::default();
        Self {
            r: d.r,
            r_tilde: d.r_tilde,
            adam_betas: d.adam_betas,
            adam_eps: d.adam_eps,
            alpha_fd_step: d.alpha_fd_step,
            max_iters: d.max_iters,
            loglik_tol: d.loglik_tol,
            batch: d.batch,
            include_terminal: d.include_terminal,
            freeze_kernels: d.freeze_kernels,
        }
    }
}

/// Prediction and held-out scoring settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    /// Posterior draws (and forward continuations) per predicted event.
    pub n_mc: usize,
    /// Base-rate refit rounds before held-out scoring.
    pub adapt_rounds: usize,
    /// Base-rate refit rounds after each observed event during prediction.
    pub adapt_per_event: usize,
    /// Censoring horizon as a multiple of the sequence duration.
    pub horizon_factor: f64,
}

impl Default for PredictSection {
    fn default() -> Self {
        let d = PredictConfig::default();
        Self {
            n_mc: d.n_mc,
            adapt_rounds: d.adapt_rounds,
            adapt_per_event: d.adapt_per_event,
            horizon_factor: d.horizon_factor,
        }
    }
}

/// The complete run configuration (`--config`). Every field has a default,
/// so `{}` is a valid file; unknown keys are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    /// Base seed; the `--seed` flag overrides it.
    pub seed: u64,
    pub chain: ChainSection,
    pub mcem: McemSection,
    pub predict: PredictSection,
}

impl RunConfigFile {
    pub fn to_mcem_config(&self) -> Result<MCEMConfig, CliError> {
        let m = self.mcem;
        let config = MCEMConfig {
            r: m.r,
            r_tilde: m.r_tilde,
            adam_betas: m.adam_betas,
            adam_eps: m.adam_eps,
            alpha_fd_step: m.alpha_fd_step,
            max_iters: m.max_iters,
            loglik_tol: m.loglik_tol,
            chain: self.chain.to_core(),
            batch: m.batch,
            include_terminal: m.include_terminal,
            freeze_kernels: m.freeze_kernels,
        };
        if !config.is_valid() {
            return Err(CliError::Schema(String::from(
                "invalid mcem/chain configuration (step sizes, tolerances, and \
                 the chain schedule must be positive; move probabilities must \
                 sum to 1)",
            )));
        }
        Ok(config)
    }

    pub fn to_predict_config(&self) -> Result<PredictConfig, CliError> {
        let p = self.predict;
        let config = PredictConfig {
            fit: self.to_mcem_config()?,
            adapt_rounds: p.adapt_rounds,
            adapt_per_event: p.adapt_per_event,
            n_mc: p.n_mc,
            horizon_factor: p.horizon_factor,
        };
        if !config.is_valid() {
            return Err(CliError::Schema(String::from(
                "invalid prediction configuration (n_mc >= 1, horizon_factor > 0)",
            )));
        }
        Ok(config)
    }
}

/// Load a run config, or defaults when no path is given.
pub fn load_run_config(path: Option<&Path>) -> Result<RunConfigFile, CliError> {
    match path {
        None => Ok(RunConfigFile::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Schema(format!("cannot read {}: {e}", p.display())))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}
