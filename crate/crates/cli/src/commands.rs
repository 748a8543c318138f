//! The four commands behind the `strata` binary.
//!
//! Each command prints a single JSON summary line to stdout and writes its
//! bulk output (datasets, models, traces, prediction records) to the paths
//! given on the command line. All randomness flows from one seed — the
//! `--seed` flag when given, otherwise the config file's `seed` field — and
//! results are identical for any `--threads` value.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use strata_core::mcem::{default_kernel_init, mcem_fit};
use strata_core::model::StateView;
use strata_core::predict::{evaluate, heldout_loglik_per_event};
use strata_core::simulate::forward_sample;
use strata_core::{EventSequence, RngStream};

use crate::files::{
    load_arch_spec, load_dataset, load_model, load_run_config, save_dataset, save_model,
    ModelFile, RunConfigFile,
};
use crate::CliError;

/// Distinct RNG stream id per command, so two commands sharing one seed
/// never consume the same random numbers.
const STREAM_SIMULATE: u64 = 0x51;
const STREAM_TRAIN: u64 = 0x7e;
const STREAM_EVAL: u64 = 0xe1;
const STREAM_PREDICT: u64 = 0xbd;

/// Load the run config (defaults when absent) and resolve the seed, with
/// the `--seed` flag taking precedence over the file.
fn resolve_config(
    config_path: Option<&Path>,
    seed_flag: Option<u64>,
) -> Result<(RunConfigFile, u64), CliError> {
    let config = load_run_config(config_path)?;
    let seed = seed_flag.unwrap_or(config.seed);
    Ok((config, seed))
}

/// Run `f` on a dedicated thread pool (`threads = 0` picks the CPU count).
/// Work inside is reduced in a fixed order, so the pool size never changes
/// any output.
fn with_pool<T: Send>(
    threads: usize,
    f: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Schema(format!("cannot build thread pool: {e}")))?;
    pool.install(f)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| {
        CliError::Schema(format!("cannot create {}: {e}", path.display()))
    })?))
}

fn print_summary<T: Serialize>(summary: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string(summary)?);
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct HiddenLayerRecord<'a> {
    layer: usize,
    node: usize,
    times: &'a [f64],
}

#[derive(Serialize)]
struct HiddenRecord<'a> {
    #[serde(rename = "T")]
    t_end: f64,
    layers: Vec<HiddenLayerRecord<'a>>,
}

#[derive(Serialize)]
struct SimulateSummary {
    sequences: usize,
    t_end: f64,
    total_events: usize,
    out: String,
}

/// Draw `n` independent sequences from a saved model's default rates and
/// write them as a dataset; optionally also write the hidden layers, one
/// sidecar line per sequence.
pub fn cmd_simulate(
    model_path: &Path,
    n: usize,
    t_end: f64,
    out: &Path,
    hidden: Option<&Path>,
    config_path: Option<&Path>,
    seed_flag: Option<u64>,
) -> Result<(), CliError> {
    if !t_end.is_finite() || t_end <= 0.0 {
        return Err(CliError::Schema(format!(
            "--t-end must be positive and finite, got {t_end}"
        )));
    }
    let (_config, seed) = resolve_config(config_path, seed_flag)?;
    let model = load_model(model_path)?;
    let stream = RngStream::new(seed, STREAM_SIMULATE);

    let mut dataset = Vec::with_capacity(n);
    let mut hidden_states = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream.substream(i as u64).rng();
        let (state, evidence) = forward_sample(&model.arch, &model.defaults, t_end, &mut rng);
        hidden_states.push(state);
        dataset.push(evidence);
    }
    save_dataset(out, &dataset)?;

    if let Some(hidden_path) = hidden {
        let mut w = create(hidden_path)?;
        for state in &hidden_states {
            let layers: Vec<HiddenLayerRecord> = model
                .arch
                .hidden_nodes()
                .map(|nd| HiddenLayerRecord {
                    layer: nd.layer,
                    node: nd.node,
                    times: state.real(nd),
                })
                .collect();
            writeln!(w, "{}", serde_json::to_string(&HiddenRecord { t_end, layers })?)?;
        }
        w.flush()?;
    }

    print_summary(&SimulateSummary {
        sequences: n,
        t_end,
        total_events: dataset.iter().map(EventSequence::total_events).sum(),
        out: out.display().to_string(),
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct AcceptRates {
    resample: f64,
    flip: f64,
    swap: f64,
}

#[derive(Serialize)]
struct TraceLine {
    iter: usize,
    objective: f64,
    objective_se: f64,
    /// Acceptance rates; a move that never ran serializes as `null`.
    accept: AcceptRates,
    skipped_samples: u64,
}

#[derive(Serialize)]
struct TrainSummary {
    iterations: usize,
    converged: bool,
    objective: f64,
    skipped_samples: u64,
    model: String,
}

/// Fit a model to a dataset given an architecture spec, write the fitted
/// model, and optionally a JSON-lines training trace.
#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    data: &Path,
    arch_path: &Path,
    out: &Path,
    trace: Option<&Path>,
    config_path: Option<&Path>,
    seed_flag: Option<u64>,
    threads: usize,
) -> Result<(), CliError> {
    let (config, seed) = resolve_config(config_path, seed_flag)?;
    let spec = load_arch_spec(arch_path)?;
    let n_types = *spec
        .layer_sizes
        .first()
        .ok_or_else(|| CliError::Schema(String::from("layer_sizes must not be empty")))?;
    let dataset = load_dataset(data, n_types)?;
    let theta = default_kernel_init(&dataset);
    let arch = spec.into_architecture(theta)?;
    let mcem = config.to_mcem_config()?;
    let stream = RngStream::new(seed, STREAM_TRAIN);

    let fit = with_pool(threads, || {
        mcem_fit(&arch, &dataset, &mcem, stream).map_err(CliError::from)
    })?;

    let file = ModelFile::from_model(&fit.arch, &fit.mean_params(), &fit.seq_params);
    save_model(out, &file)?;

    if let Some(trace_path) = trace {
        let mut w = create(trace_path)?;
        for rec in &fit.trace {
            let line = TraceLine {
                iter: rec.iter,
                objective: rec.objective,
                objective_se: rec.objective_se,
                accept: AcceptRates {
                    resample: rec.accept_resample,
                    flip: rec.accept_flip,
                    swap: rec.accept_swap,
                },
                skipped_samples: rec.skipped_samples,
            };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        w.flush()?;
    }

    print_summary(&TrainSummary {
        iterations: fit.trace.len(),
        converged: fit.converged,
        objective: fit.trace.last().map_or(f64::NAN, |r| r.objective),
        skipped_samples: fit.skipped_samples,
        model: out.display().to_string(),
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EvalSummary {
    /// Event-weighted mean held-out log-likelihood per event; `null` when
    /// some sequence is impossible under the model.
    loglik_per_event: f64,
    n_events: usize,
}

/// Score a dataset under a trained model: held-out log-likelihood per event,
/// averaged over sequences with event-count weights.
pub fn cmd_eval(
    model_path: &Path,
    data: &Path,
    out: Option<&Path>,
    config_path: Option<&Path>,
    seed_flag: Option<u64>,
    threads: usize,
) -> Result<(), CliError> {
    let (config, seed) = resolve_config(config_path, seed_flag)?;
    let model = load_model(model_path)?;
    let test = load_dataset(data, model.arch.n_types())?;
    let predict_cfg = config.to_predict_config()?;
    let stream = RngStream::new(seed, STREAM_EVAL);

    // Each sequence gets its own substream, and the weighted reduction runs
    // sequentially afterwards, so the thread count cannot change the result.
    let scores: Vec<(f64, usize)> = with_pool(threads, || {
        use rayon::prelude::*;
        (0..test.len())
            .into_par_iter()
            .map(|i| {
                let seq = &test[i];
                if seq.total_events() == 0 {
                    return Ok((0.0, 0));
                }
                heldout_loglik_per_event(
                    &model.arch,
                    &model.defaults,
                    seq,
                    &predict_cfg,
                    stream.substream(i as u64),
                )
                .map(|v| (v, seq.total_events()))
                .map_err(CliError::from)
            })
            .collect()
    })?;

    let n_events: usize = scores.iter().map(|&(_, w)| w).sum();
    if n_events == 0 {
        return Err(CliError::Schema(String::from("dataset has no events to score")));
    }
    let total: f64 = scores.iter().map(|&(v, w)| v * w as f64).sum();
    let summary = EvalSummary { loglik_per_event: total / n_events as f64, n_events };

    if let Some(out_path) = out {
        let mut w = create(out_path)?;
        writeln!(w, "{}", serde_json::to_string(&summary)?)?;
        w.flush()?;
    }
    print_summary(&summary)
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EventOut {
    t: f64,
    k: usize,
}

#[derive(Serialize)]
struct RecordLine {
    sequence: usize,
    index: usize,
    observed: Option<EventOut>,
    predicted: EventOut,
    /// Forward draws behind the prediction (censored draws excluded).
    n_mc: usize,
}

#[derive(Serialize)]
struct PredictSummary {
    rmse: f64,
    accuracy: f64,
    n_draws: u64,
    n_excluded: u64,
}

/// Next-event prediction over a dataset: for every event, predict its time
/// and type from the preceding events, then report time RMSE and type
/// accuracy. Optionally writes one JSON line per prediction.
pub fn cmd_predict(
    model_path: &Path,
    data: &Path,
    records: Option<&Path>,
    config_path: Option<&Path>,
    seed_flag: Option<u64>,
    threads: usize,
) -> Result<(), CliError> {
    let (config, seed) = resolve_config(config_path, seed_flag)?;
    let model = load_model(model_path)?;
    let test = load_dataset(data, model.arch.n_types())?;
    let predict_cfg = config.to_predict_config()?;
    let stream = RngStream::new(seed, STREAM_PREDICT);

    let report = with_pool(threads, || {
        evaluate(&model.arch, &model.defaults, &test, &predict_cfg, stream)
            .map_err(CliError::from)
    })?;

    if let Some(records_path) = records {
        let mut w = create(records_path)?;
        for (s, seq_records) in report.records.iter().enumerate() {
            for rec in seq_records {
                let line = RecordLine {
                    sequence: s,
                    index: rec.index,
                    observed: rec.observed.map(|(t, k)| EventOut { t, k: k + 1 }),
                    predicted: EventOut { t: rec.t_hat, k: rec.k_hat + 1 },
                    n_mc: rec.n_mc,
                };
                writeln!(w, "{}", serde_json::to_string(&line)?)?;
            }
        }
        w.flush()?;
    }

    print_summary(&PredictSummary {
        rmse: report.rmse,
        accuracy: report.accuracy,
        n_draws: report.n_draws,
        n_excluded: report.n_excluded,
    })
}
