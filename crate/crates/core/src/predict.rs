//! Next-event prediction and held-out scoring.
//!
//! Everything here treats the trained model as fixed kernels plus *default*
//! per-sequence base rates (typically the mean of the fitted training
//! rates): an unseen sequence starts from the defaults and only its base
//! rates are re-adapted to the data it reveals, never the kernels.
//!
//! Two evaluation protocols are provided:
//!
//! * [`heldout_loglik_per_event`] scores a whole sequence at once: base
//!   rates are refit by alternating posterior sampling with rate updates,
//!   then the evidence-layer log-likelihood is averaged over posterior
//!   samples and divided by the event count.
//! * [`evaluate`] walks each sequence one event at a time, predicting every
//!   event's time and type from the strictly earlier window via
//!   [`predict_next`], and reports the time RMSE and type accuracy.
//!
//! Prediction itself is plain forward simulation: each posterior sample of
//! the hidden layers is continued past the window's end (the top layer as a
//! fresh homogeneous process, existing hidden events through their kernel
//! tails, new hidden events spawning recursively) until the first evidence
//! event appears; the predicted time is the mean of those first-event times
//! and the predicted type their most common type.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // no_std builds take sqrt from the trait
use num_traits::Float;
use rand::Rng;

use crate::mcem::{adapt_base_rates, adapt_base_rates_from, FitError, MCEMConfig};
use crate::mcmc::{init_state, run_chain, ChainConfig};
use crate::model::{evidence_loglik, Architecture, EventSequence, LatentState, SequenceParams};
use crate::rng::RngStream;
use crate::simulate::ForwardRun;

/// Salt for the held-out base-rate refit stream.
const SALT_ADAPT: u64 = 0x6865_6c64;
/// Salt for the held-out scoring-chain stream.
const SALT_SCORE: u64 = 0x7363_6f72;
/// Chain re-runs (with doubled burn-in each time) a prediction step may use
/// to find its first valid posterior sample before giving up. Climbing into
/// the posterior's support can need a burst of lucky moves right after an
/// event with no precedent (say, a type's first appearance), so a fixed
/// burn-in occasionally falls short no matter how generous.
const MAX_EQUILIBRATION_ATTEMPTS: usize = 4;

/// Settings for prediction and held-out scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictConfig {
    /// Chain and rate-update settings. `fit.chain` drives both the
    /// rate-adaptation rounds and the posterior chains behind each
    /// prediction (where `n_samples` is overridden by [`n_mc`]); `fit.r_tilde`
    /// and the Adam fields drive the virtual-rate updates;
    /// `fit.include_terminal` is passed through to every chain.
    ///
    /// [`n_mc`]: PredictConfig::n_mc
    pub fit: MCEMConfig,
    /// Base-rate refit rounds before held-out scoring.
    pub adapt_rounds: usize,
    /// Base-rate refit rounds after each observed event during sequential
    /// prediction (0 keeps the default rates throughout).
    pub adapt_per_event: usize,
    /// Posterior samples drawn per predicted event, each continued forward
    /// once.
    pub n_mc: usize,
    /// Censoring horizon for the forward continuation, as a multiple of the
    /// sequence duration: a draw with no evidence event within
    /// `horizon_factor * T` past the window is excluded from the estimate.
    pub horizon_factor: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            fit: MCEMConfig::default(),
            adapt_rounds: 8,
            adapt_per_event: 1,
            n_mc: 50,
            horizon_factor: 100.0,
        }
    }
}

impl PredictConfig {
    pub fn is_valid(&self) -> bool {
        self.fit.is_valid()
            && self.n_mc >= 1
            && self.horizon_factor.is_finite()
            && self.horizon_factor > 0.0
    }
}

/// One one-step-ahead prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    /// Number of events observed before this prediction (so the record
    /// predicts the event with this 0-based position in time order).
    pub index: usize,
    /// The event that actually occurred, `(time, type)`, attached by
    /// [`evaluate`]; `None` when predicting genuinely unseen data.
    pub observed: Option<(f64, usize)>,
    /// Predicted time: mean first-event time over the forward draws.
    pub t_hat: f64,
    /// Predicted type: most common first-event type over the forward draws,
    /// ties broken toward the smaller type index.
    pub k_hat: usize,
    /// Forward draws that produced an event before the censoring horizon
    /// (the sample count behind `t_hat` and `k_hat`).
    pub n_mc: usize,
}

/// Output of [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Root mean squared error of `t_hat` against the observed times.
    pub rmse: f64,
    /// Fraction of records whose `k_hat` matches the observed type.
    pub accuracy: f64,
    /// Per-sequence prediction logs, in test-set order.
    pub records: Vec<Vec<PredictionRecord>>,
    /// Total forward draws budgeted (records × `n_mc`).
    pub n_draws: u64,
    /// Draws excluded from the estimates: chain samples outside the
    /// posterior's support, plus forward draws censored at the horizon.
    pub n_excluded: u64,
}

/// Index of the largest count, ties broken toward the smaller index.
fn argmax_smallest_tie(counts: &[usize]) -> usize {
    let mut best = 0;
    for (k, &c) in counts.iter().enumerate().skip(1) {
        if c > counts[best] {
            best = k;
        }
    }
    best
}

/// All events of a sequence in global time order as `(time, type)`, ties on
/// time ordered by type index.
fn global_order(seq: &EventSequence) -> Vec<(f64, usize)> {
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(seq.total_events());
    for k in 0..seq.n_types() {
        order.extend(seq.events(k).iter().map(|&t| (t, k)));
    }
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order
}

/// Average per-event evidence log-likelihood of a held-out sequence.
///
/// Kernels stay frozen at the trained values; the sequence's base rates are
/// refit from the `defaults` by `config.adapt_rounds` rounds of
/// [`adapt_base_rates`]. The score is then the mean over posterior samples
/// of the evidence-layer factors, divided by the sequence's event count. A
/// sampled hidden configuration that leaves an observed event with zero
/// intensity contributes negative infinity, so the score is `-inf` whenever
/// the model cannot explain the data.
///
/// # Errors
/// [`FitError::BadConfig`] for invalid settings, [`FitError::Mismatch`] for
/// shape disagreements, [`FitError::EmptyDataset`] when the sequence has no
/// events (the per-event average is undefined), and [`FitError::Diverged`]
/// propagated from rate adaptation.
pub fn heldout_loglik_per_event(
    arch: &Architecture,
    defaults: &SequenceParams,
    evidence: &EventSequence,
    config: &PredictConfig,
    stream: RngStream,
) -> Result<f64, FitError> {
    if !config.is_valid() {
        return Err(FitError::BadConfig(format!("invalid prediction settings: {config:?}")));
    }
    defaults.validate(arch).map_err(|e| FitError::Mismatch(format!("{e}")))?;
    if evidence.n_types() != arch.n_types() {
        return Err(FitError::Mismatch(format!(
            "sequence has {} event types, architecture expects {}",
            evidence.n_types(),
            arch.n_types()
        )));
    }
    if evidence.total_events() == 0 {
        return Err(FitError::EmptyDataset);
    }
    let mut params = defaults.clone();
    let (warm, _skipped) = adapt_base_rates(
        arch,
        evidence,
        &mut params,
        &config.fit,
        config.adapt_rounds,
        stream.substream(SALT_ADAPT),
    )?;
    let mut rng = stream.substream(SALT_SCORE).rng();
    let (samples, _stats) = run_chain(arch, &params, evidence, warm, &config.fit.chain, &mut rng);
    let total: f64 = samples.iter().map(|s| evidence_loglik(arch, &params, evidence, s)).sum();
    Ok(total / samples.len() as f64 / evidence.total_events() as f64)
}

/// Predict the next event after the observed window.
///
/// `history` is everything known so far: its window `[0, t_end]` must end
/// at (or after) the last observed event, and the prediction targets the
/// first event past `t_end`. `state` is a chain state for that window —
/// warm from the previous prediction step when stepping through a sequence,
/// or freshly initialized otherwise; the chain is re-equilibrated with
/// `config.fit.chain.burn_in` sweeps either way, and `config.n_mc`
/// thinned posterior samples are drawn (samples outside the posterior's
/// support, from a chain still climbing toward states that explain the
/// data, are excluded). Each remaining sample is continued by forward
/// simulation until its first evidence event or until the absolute time
/// `horizon`, whichever comes first; draws that reach `horizon` without an
/// event are excluded (a warning is printed when more than 1% are).
///
/// For an empty window (`t_end == 0`, no events) the posterior over hidden
/// configurations is the point mass on the empty state, so the chain is
/// skipped and the draws are independent unconditional simulations.
///
/// Returns the prediction and the updated chain state to warm-start the
/// next step. The predicted time always exceeds `history.t_end()`.
///
/// # Errors
/// [`FitError::BadConfig`] for invalid settings or a horizon not strictly
/// past the window, [`FitError::Mismatch`] for shape disagreements, and
/// [`FitError::Diverged`] when every draw was censored (the model pushes
/// the next event beyond any usable horizon).
pub fn predict_next(
    arch: &Architecture,
    params: &SequenceParams,
    history: &EventSequence,
    state: LatentState,
    horizon: f64,
    config: &PredictConfig,
    rng: &mut impl Rng,
) -> Result<(PredictionRecord, LatentState), FitError> {
    if !config.is_valid() {
        return Err(FitError::BadConfig(format!("invalid prediction settings: {config:?}")));
    }
    if history.n_types() != arch.n_types() {
        return Err(FitError::Mismatch(format!(
            "history has {} event types, architecture expects {}",
            history.n_types(),
            arch.n_types()
        )));
    }
    let t_last = history.t_end();
    if !(horizon.is_finite() && horizon > t_last) {
        return Err(FitError::BadConfig(format!(
            "censoring horizon {horizon} does not lie past the window end {t_last}"
        )));
    }

    let empty_window = history.total_events() == 0 && t_last == 0.0;
    let (samples, next_state) = if empty_window {
        // Nothing can occupy a zero-length window: the posterior is the
        // point mass on the empty state and the draws below are independent
        // unconditional continuations.
        let s = LatentState::empty(arch, config.fit.include_terminal);
        (vec![s.clone(); config.n_mc], s)
    } else {
        // Keep only samples inside the posterior's support: a state with a
        // non-finite complete log-likelihood (the chain still climbing
        // toward a configuration that explains every observed event) is not
        // a posterior draw, and continuing it forward would bias the
        // prediction toward event-free futures. When a whole chain comes up
        // empty the warm start itself is usually the problem -- a state
        // carried over from a window that never needed some branch of the
        // cascade can sit many coordinated flips away from explaining an
        // unprecedented event -- so retries abandon it for a fresh
        // bottom-up seeding of every virtual process, with doubled burn-in.
        let mut chain_state = state;
        let mut valid: Vec<LatentState> = Vec::new();
        for attempt in 0..MAX_EQUILIBRATION_ATTEMPTS {
            if attempt > 0 {
                chain_state =
                    init_state(arch, params, history, config.fit.include_terminal, rng);
            }
            let chain_cfg = ChainConfig {
                burn_in: config.fit.chain.burn_in << attempt,
                n_samples: config.n_mc,
                ..config.fit.chain
            };
            let (samples, stats) = run_chain(arch, params, history, chain_state, &chain_cfg, rng);
            chain_state = samples.last().expect("n_mc >= 1 is checked by is_valid").clone();
            valid = samples
                .into_iter()
                .zip(&stats.loglik_trace)
                .filter(|(_, ll)| ll.is_finite())
                .map(|(s, _)| s)
                .collect();
            if !valid.is_empty() {
                break;
            }
        }
        if valid.is_empty() {
            return Err(FitError::Diverged {
                iter: history.total_events(),
                detail: format!(
                    "no valid posterior sample on the window ending at {t_last:.4} \
                     after {MAX_EQUILIBRATION_ATTEMPTS} chains (warm, then freshly \
                     seeded) of escalating burn-in"
                ),
            });
        }
        (valid, chain_state)
    };

    let span = horizon - t_last;
    let mut times: Vec<f64> = Vec::with_capacity(config.n_mc);
    let mut counts = vec![0usize; arch.n_types()];
    let mut censored = 0usize;
    for s in &samples {
        let mut run = ForwardRun::new(arch, history, s);
        let mut hit: Option<(f64, usize)> = None;
        // Grow the simulated window geometrically: most draws resolve within
        // a small fraction of the horizon, so start fine and double.
        let mut step = span / 1024.0;
        while run.upto() < horizon {
            let to = (run.upto() + step).min(horizon);
            run.extend(arch, params, to, rng);
            if let Some(found) = run.first_evidence_after(t_last) {
                hit = Some(found);
                break;
            }
            step *= 2.0;
        }
        match hit {
            Some((t, k)) => {
                times.push(t);
                counts[k] += 1;
            }
            None => censored += 1,
        }
    }

    if times.is_empty() {
        return Err(FitError::Diverged {
            iter: history.total_events(),
            detail: format!(
                "all {} forward draws were censored at the horizon {horizon:.4}",
                config.n_mc
            ),
        });
    }
    #[cfg(feature = "std")]
    if censored * 100 > config.n_mc {
        std::eprintln!(
            "warning: {censored}/{} forward draws hit the censoring horizon {horizon:.4} \
             and were excluded",
            config.n_mc
        );
    }
    #[cfg(not(feature = "std"))]
    let _ = censored;

    let t_hat = times.iter().sum::<f64>() / times.len() as f64;
    let record = PredictionRecord {
        index: history.total_events(),
        observed: None,
        t_hat,
        k_hat: argmax_smallest_tie(&counts),
        n_mc: times.len(),
    };
    Ok((record, next_state))
}

/// Sequential one-step-ahead evaluation over a test set.
///
/// For every event of every sequence, in time order, the event's time and
/// type are predicted from the strictly earlier events alone
/// ([`predict_next`] on the window ending at the previous event), with the
/// chain state warm-started across steps and the base rates re-adapted to
/// the growing window: the first observed event triggers the full
/// cold-start adaptation (`config.adapt_rounds` rounds from a fresh chain
/// state), each later one `config.adapt_per_event` incremental rounds.
/// Sequences are independent (and evaluated in parallel under the
/// `parallel` feature, with identical results either way).
///
/// Returns the RMSE of the predicted times, the fraction of correctly
/// predicted types, and the full per-record log.
///
/// # Errors
/// [`FitError::EmptyDataset`] when the test set contains no events at all;
/// validation and divergence errors propagated from the per-sequence work,
/// tagged with the sequence and event position.
pub fn evaluate(
    arch: &Architecture,
    defaults: &SequenceParams,
    test_set: &[EventSequence],
    config: &PredictConfig,
    stream: RngStream,
) -> Result<EvalReport, FitError> {
    if !config.is_valid() {
        return Err(FitError::BadConfig(format!("invalid prediction settings: {config:?}")));
    }
    defaults.validate(arch).map_err(|e| FitError::Mismatch(format!("{e}")))?;
    if test_set.is_empty() {
        return Err(FitError::EmptyDataset);
    }
    for (n, seq) in test_set.iter().enumerate() {
        if seq.n_types() != arch.n_types() {
            return Err(FitError::Mismatch(format!(
                "test sequence {n} has {} event types, architecture expects {}",
                seq.n_types(),
                arch.n_types()
            )));
        }
    }

    let eval_seq = |n: usize| -> Result<Vec<PredictionRecord>, FitError> {
        let seq = &test_set[n];
        let seq_stream = stream.substream(n as u64);
        let order = global_order(seq);
        let mut params = defaults.clone();
        let mut state = LatentState::empty(arch, config.fit.include_terminal);
        let mut records = Vec::with_capacity(order.len());
        for (i, &(t_i, k_i)) in order.iter().enumerate() {
            let t_last = if i == 0 { 0.0 } else { order[i - 1].0 };
            // The window holds exactly the i earlier events. It is rebuilt
            // explicitly rather than cut at t_last so that an event tied
            // with the previous one (same time, different type) stays out.
            let mut window_events = vec![Vec::new(); seq.n_types()];
            for &(t, k) in &order[..i] {
                window_events[k].push(t);
            }
            let window = EventSequence::new(t_last, window_events)
                .map_err(|e| FitError::Mismatch(format!("sequence {n}, event {i}: {e}")))?;

            let tag_err = |e: FitError| match e {
                FitError::Diverged { iter, detail } => FitError::Diverged {
                    iter,
                    detail: format!("sequence {n}, event {i}: {detail}"),
                },
                other => other,
            };
            if i == 1 {
                // First nonempty window: the chain has never seen data, so
                // run the full cold-start adaptation (fresh initial state,
                // several rounds) rather than one incremental round.
                let rounds = config.adapt_rounds.max(config.adapt_per_event);
                let (w, _skipped) = adapt_base_rates(
                    arch,
                    &window,
                    &mut params,
                    &config.fit,
                    rounds,
                    seq_stream.substream((i as u64) << 1),
                )
                .map_err(tag_err)?;
                state = w;
            } else if i > 1 && config.adapt_per_event > 0 {
                let (w, _skipped) = adapt_base_rates_from(
                    arch,
                    &window,
                    &mut params,
                    &config.fit,
                    config.adapt_per_event,
                    state,
                    seq_stream.substream((i as u64) << 1),
                )
                .map_err(tag_err)?;
                state = w;
            }

            let horizon = t_last + config.horizon_factor * seq.t_end();
            let mut rng = seq_stream.substream(((i as u64) << 1) | 1).rng();
            let (mut rec, next_state) =
                predict_next(arch, &params, &window, state, horizon, config, &mut rng)
                    .map_err(tag_err)?;
            state = next_state;
            rec.observed = Some((t_i, k_i));
            records.push(rec);
        }
        Ok(records)
    };

    #[cfg(feature = "parallel")]
    let per_seq: Vec<Vec<PredictionRecord>> = {
        use rayon::prelude::*;
        (0..test_set.len()).into_par_iter().map(eval_seq).collect::<Result<Vec<_>, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let per_seq: Vec<Vec<PredictionRecord>> =
        (0..test_set.len()).map(eval_seq).collect::<Result<Vec<_>, _>>()?;

    let mut sq_err = 0.0;
    let mut correct = 0usize;
    let mut n_records = 0usize;
    let mut n_draws = 0u64;
    let mut n_excluded = 0u64;
    for rec in per_seq.iter().flatten() {
        let (t_true, k_true) = rec.observed.expect("evaluate attaches the observed event");
        sq_err += (rec.t_hat - t_true) * (rec.t_hat - t_true);
        correct += usize::from(rec.k_hat == k_true);
        n_records += 1;
        n_draws += config.n_mc as u64;
        n_excluded += (config.n_mc - rec.n_mc) as u64;
    }
    if n_records == 0 {
        return Err(FitError::EmptyDataset);
    }
    Ok(EvalReport {
        rmse: (sq_err / n_records as f64).sqrt(),
        accuracy: correct as f64 / n_records as f64,
        records: per_seq,
        n_draws,
        n_excluded,
    })
}
