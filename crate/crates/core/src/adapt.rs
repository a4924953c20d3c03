//! Online adaptation loop: per-sample prediction, method-specific ingestion,
//! an adaptation event every `t0` samples, and evaluator-side bookkeeping.
//!
//! [`Adapter`] only ever sees features. The hidden label and benign flag of a
//! [`StreamSample`] are read by [`run_stream`] for scoring and diagnostics,
//! never passed into the adapter.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::memory::{EvictionPolicy, InsertOutcome, MemoryBank};
use crate::network::{Network, Prediction};
use crate::optim::{adaptation_step, entropy_and_grads, AdamState, EsmConfig, StepReport};
use crate::seed::{RngTree, TAG_EVICTION};
use crate::stream::{Scenario, StreamSample};
use crate::tape::mean_entropy_value;
use crate::tensor::Tensor;

/// Which of the three mechanisms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Flags {
    /// High-confidence gate on memory admission.
    pub hc: bool,
    /// Class-balanced eviction (FIFO when off).
    pub uc: bool,
    /// Sharpness-aware entropy step (plain entropy step when off).
    pub esm: bool,
}

impl Flags {
    pub const ALL_ON: Flags = Flags {
        hc: true,
        uc: true,
        esm: true,
    };
    pub const ALL_OFF: Flags = Flags {
        hc: false,
        uc: false,
        esm: false,
    };

    /// All eight combinations, ordered by `(hc, uc, esm)` as a 3-bit number.
    pub fn all() -> [Flags; 8] {
        std::array::from_fn(|i| Flags {
            hc: i & 4 != 0,
            uc: i & 2 != 0,
            esm: i & 1 != 0,
        })
    }

    pub fn count_on(self) -> usize {
        self.hc as usize + self.uc as usize + self.esm as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    /// No adaptation.
    Source,
    /// Running statistics re-estimated from the raw incoming window.
    BnStats,
    /// Memory-based entropy adaptation with the given mechanisms. All off is
    /// the plain entropy-minimization baseline; all on is the full method.
    Adaptive(Flags),
}

impl Method {
    pub const EM: Method = Method::Adaptive(Flags::ALL_OFF);
    pub const SOTTA: Method = Method::Adaptive(Flags::ALL_ON);

    pub fn flags(self) -> Option<Flags> {
        match self {
            Method::Adaptive(f) => Some(f),
            _ => None,
        }
    }

    /// `source`, `bnstats`, `em`, `sotta`, or `abl:<on flags joined by +>`
    /// (`abl:none` never appears since that is `em`).
    pub fn label(self) -> String {
        match self {
            Method::Source => "source".into(),
            Method::BnStats => "bnstats".into(),
            Method::Adaptive(Flags::ALL_OFF) => "em".into(),
            Method::Adaptive(Flags::ALL_ON) => "sotta".into(),
            Method::Adaptive(f) => {
                let on: Vec<&str> = [(f.hc, "hc"), (f.uc, "uc"), (f.esm, "esm")]
                    .into_iter()
                    .filter_map(|(b, n)| b.then_some(n))
                    .collect();
                format!("abl:{}", on.join("+"))
            }
        }
    }

    /// The eight ablation configurations in flag order.
    pub fn ablations() -> [Method; 8] {
        Flags::all().map(Method::Adaptive)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "source" => return Ok(Method::Source),
            "bnstats" | "bn-stats" | "bn_stats" => return Ok(Method::BnStats),
            "em" | "tent" => return Ok(Method::EM),
            "sotta" => return Ok(Method::SOTTA),
            _ => {}
        }
        let Some(rest) = s.strip_prefix("abl:") else {
            return Err(Error::InvalidArgument(format!("unknown method `{s}`")));
        };
        let mut f = Flags::ALL_OFF;
        if rest != "none" && !rest.is_empty() {
            for part in rest.split('+') {
                let slot = match part {
                    "hc" => &mut f.hc,
                    "uc" => &mut f.uc,
                    "esm" => &mut f.esm,
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "unknown ablation flag `{other}` in `{s}`"
                        )))
                    }
                };
                if *slot {
                    return Err(Error::InvalidArgument(format!(
                        "ablation flag `{part}` repeated in `{s}`"
                    )));
                }
                *slot = true;
            }
        }
        Ok(Method::Adaptive(f))
    }
}

/// Confidence threshold default keyed to the number of classes.
pub fn default_c0(classes: usize) -> f64 {
    if classes <= 10 {
        0.99
    } else if classes <= 100 {
        0.66
    } else {
        0.33
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    /// Confidence threshold used when the gate is on.
    pub c0: f64,
    /// BN statistics momentum.
    pub m: f64,
    /// Samples between adaptation events.
    pub t0: usize,
    /// Memory capacity.
    pub capacity: usize,
    /// `esm_enabled` is overridden by the method's flags.
    pub esm: EsmConfig,
}

impl MethodConfig {
    pub fn new(method: Method, classes: usize) -> Self {
        Self {
            method,
            c0: default_c0(classes),
            m: 0.2,
            t0: 64,
            capacity: 64,
            esm: EsmConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t0 == 0 {
            return Err(Error::InvalidArgument("t0 must be >= 1".into()));
        }
        if self.capacity == 0 {
            return Err(Error::InvalidArgument(
                "memory capacity must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.c0) {
            return Err(Error::InvalidArgument(format!(
                "c0 must lie in [0, 1), got {}",
                self.c0
            )));
        }
        if !(0.0..=1.0).contains(&self.m) {
            return Err(Error::InvalidArgument(format!(
                "m must lie in [0, 1], got {}",
                self.m
            )));
        }
        self.esm.validate()
    }

    /// Admission threshold actually applied: `c0` with the gate on, 0 without.
    pub fn effective_threshold(&self) -> f64 {
        match self.method.flags() {
            Some(f) if f.hc => self.c0,
            _ => 0.0,
        }
    }

    fn effective_esm(&self) -> EsmConfig {
        EsmConfig {
            esm_enabled: self.method.flags().is_some_and(|f| f.esm),
            ..self.esm.clone()
        }
    }
}

/// What one adaptation event did.
#[derive(Clone, Debug, PartialEq)]
pub enum EventOutcome {
    /// Nothing to adapt on (empty memory or buffer).
    Skipped,
    /// Running statistics re-estimated; no gradient step.
    StatsOnly,
    Stepped {
        report: StepReport,
        loss_after: f64,
    },
    /// Closing log row after the last sample when no event fired there.
    StreamEnd,
}

// One engine lives per stream run, so the variant size gap costs nothing.
#[allow(clippy::large_enum_variant)]
enum Engine {
    Source,
    BnStats { buffer: Vec<Tensor> },
    Memory { bank: MemoryBank, adam: AdamState },
}

/// Method state driven by features and the model's own predictions only.
pub struct Adapter {
    cfg: MethodConfig,
    esm: EsmConfig,
    threshold: f64,
    engine: Engine,
    seen: usize,
}

impl Adapter {
    pub fn new(cfg: &MethodConfig, classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let engine = match cfg.method {
            Method::Source => Engine::Source,
            Method::BnStats => Engine::BnStats { buffer: Vec::new() },
            Method::Adaptive(f) => {
                let policy = if f.uc {
                    EvictionPolicy::ClassBalanced
                } else {
                    EvictionPolicy::Fifo
                };
                Engine::Memory {
                    bank: MemoryBank::new(cfg.capacity, classes, policy, seed)?,
                    adam: AdamState::new(),
                }
            }
        };
        Ok(Self {
            esm: cfg.effective_esm(),
            threshold: cfg.effective_threshold(),
            cfg: cfg.clone(),
            engine,
            seen: 0,
        })
    }

    pub fn memory(&self) -> Option<&MemoryBank> {
        match &self.engine {
            Engine::Memory { bank, .. } => Some(bank),
            _ => None,
        }
    }

    /// Hands one sample and its prediction to the method. Returns the memory
    /// outcome for memory-based methods.
    pub fn ingest(&mut self, features: &Tensor, pred: Prediction) -> Option<InsertOutcome> {
        self.seen += 1;
        match &mut self.engine {
            Engine::Source => None,
            Engine::BnStats { buffer } => {
                buffer.push(features.clone());
                None
            }
            Engine::Memory { bank, .. } => Some(bank.maybe_insert(
                features.clone(),
                pred.label,
                pred.confidence,
                self.threshold,
            )),
        }
    }

    /// True after every `t0`-th sample. Source has no events.
    pub fn event_due(&self) -> bool {
        !matches!(self.engine, Engine::Source)
            && self.seen > 0
            && self.seen.is_multiple_of(self.cfg.t0)
    }

    /// One adaptation event on `net`.
    pub fn adapt(&mut self, net: &mut Network) -> Result<EventOutcome> {
        match &mut self.engine {
            Engine::Source => Ok(EventOutcome::Skipped),
            Engine::BnStats { buffer } => {
                if buffer.is_empty() {
                    return Ok(EventOutcome::Skipped);
                }
                let refs: Vec<&Tensor> = buffer.iter().collect();
                let batch = Tensor::vstack(&refs)?;
                buffer.clear();
                let stats = net.forward(&batch, false)?.bn_stats;
                net.ema_update(&stats, self.cfg.m)?;
                Ok(EventOutcome::StatsOnly)
            }
            Engine::Memory { bank, adam } => {
                if bank.is_empty() {
                    return Ok(EventOutcome::Skipped);
                }
                let batch = bank.as_batch()?;
                let stats = net.forward(&batch, false)?.bn_stats;
                net.ema_update(&stats, self.cfg.m)?;
                let report = adaptation_step(net, &batch, &self.esm, adam)?;
                let loss_after = mean_entropy_value(&net.logits(&batch)?);
                Ok(EventOutcome::Stepped { report, loss_after })
            }
        }
    }
}

/// One row of the per-event log.
#[derive(Clone, Debug, PartialEq)]
pub struct EventLog {
    /// Number of stream samples processed when the event fired.
    pub step: usize,
    pub cumulative_accuracy: f64,
    pub outcome: EventOutcome,
    /// Mean per-sample ‖∇E‖ over the noisy samples of the window just
    /// closed, under the model that predicted them.
    pub noisy_grad_norm: Option<f64>,
    pub memory_len: usize,
}

impl EventLog {
    pub fn skipped(&self) -> bool {
        self.outcome == EventOutcome::Skipped
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamResult {
    pub scenario: Scenario,
    pub method: Method,
    pub seed: u64,
    pub benign_total: usize,
    pub benign_correct: usize,
    pub benign_accuracy: f64,
    pub events: Vec<EventLog>,
    pub insertions: usize,
    pub noisy_insertions: usize,
    pub skipped_events: usize,
    /// Mean prediction entropy of the final model over the last `t0` stream samples.
    pub final_loss: f64,
    /// Average of the logged noisy-window gradient norms.
    pub mean_noisy_grad_norm: Option<f64>,
    /// Fingerprint of the final parameters and running statistics.
    pub final_fingerprint: u64,
}

impl StreamResult {
    pub fn noisy_insertion_fraction(&self) -> f64 {
        if self.insertions == 0 {
            0.0
        } else {
            self.noisy_insertions as f64 / self.insertions as f64
        }
    }
}

/// Options for [`run_stream`] that do not change the adaptation itself.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Compute the noisy-window gradient-norm diagnostic.
    pub diagnostics: bool,
}

fn mean_noisy_grad_norm(net: &Network, window: &[Tensor]) -> Result<Option<f64>> {
    if window.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for x in window {
        total += entropy_and_grads(net, x)?.1.global_norm();
    }
    Ok(Some(total / window.len() as f64))
}

/// Drives `stream` through the method, adapting `net` in place.
pub fn run_stream_on(
    net: &mut Network,
    stream: &[StreamSample],
    cfg: &MethodConfig,
    seed: u64,
    opts: RunOptions,
) -> Result<StreamResult> {
    if stream.is_empty() {
        return Err(Error::NoSamples);
    }
    let classes = net.spec().classes;
    let tree = RngTree::new(seed);
    let mut adapter = Adapter::new(cfg, classes, tree.derive_seed(TAG_EVICTION))?;
    let mut result = StreamResult {
        scenario: stream[0].provenance().scenario,
        method: cfg.method,
        seed,
        benign_total: 0,
        benign_correct: 0,
        benign_accuracy: 0.0,
        events: Vec::new(),
        insertions: 0,
        noisy_insertions: 0,
        skipped_events: 0,
        final_loss: 0.0,
        mean_noisy_grad_norm: None,
        final_fingerprint: 0,
    };
    let mut noisy_window: Vec<Tensor> = Vec::new();

    for sample in stream {
        let pred = net.predict_with_confidence(&sample.features)?;
        let hidden = sample.provenance();
        if hidden.is_benign {
            result.benign_total += 1;
            if hidden.true_label == Some(pred.label) {
                result.benign_correct += 1;
            }
        } else if opts.diagnostics {
            noisy_window.push(sample.features.clone());
        }

        if let Some(outcome) = adapter.ingest(&sample.features, pred) {
            if outcome.inserted() {
                result.insertions += 1;
                if !hidden.is_benign {
                    result.noisy_insertions += 1;
                }
            }
        }

        if adapter.event_due() {
            let noisy_grad_norm = mean_noisy_grad_norm(net, &noisy_window)?;
            noisy_window.clear();
            let outcome = adapter.adapt(net)?;
            if outcome == EventOutcome::Skipped {
                result.skipped_events += 1;
            }
            result.events.push(EventLog {
                step: adapter.seen,
                cumulative_accuracy: ratio(result.benign_correct, result.benign_total),
                outcome,
                noisy_grad_norm,
                memory_len: adapter.memory().map_or(0, MemoryBank::len),
            });
        }
    }

    if result.events.last().map(|e| e.step) != Some(stream.len()) {
        result.events.push(EventLog {
            step: stream.len(),
            cumulative_accuracy: ratio(result.benign_correct, result.benign_total),
            outcome: EventOutcome::StreamEnd,
            noisy_grad_norm: mean_noisy_grad_norm(net, &noisy_window)?,
            memory_len: adapter.memory().map_or(0, MemoryBank::len),
        });
    }
    result.benign_accuracy = ratio(result.benign_correct, result.benign_total);
    let tail_start = stream.len().saturating_sub(cfg.t0);
    let tail: Vec<&Tensor> = stream[tail_start..].iter().map(|s| &s.features).collect();
    result.final_loss = mean_entropy_value(&net.logits(&Tensor::vstack(&tail)?)?);
    let norms: Vec<f64> = result
        .events
        .iter()
        .filter_map(|e| e.noisy_grad_norm)
        .collect();
    result.mean_noisy_grad_norm =
        (!norms.is_empty()).then(|| norms.iter().sum::<f64>() / norms.len() as f64);
    result.final_fingerprint = net.fingerprint();
    Ok(result)
}

/// [`run_stream_on`] on a private copy of `net`; the checkpoint is untouched.
pub fn run_stream(
    net: &Network,
    stream: &[StreamSample],
    cfg: &MethodConfig,
    seed: u64,
) -> Result<StreamResult> {
    let mut local = net.clone();
    run_stream_on(
        &mut local,
        stream,
        cfg,
        seed,
        RunOptions { diagnostics: true },
    )
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub scenario: Scenario,
    pub method: Method,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

/// Benign-accuracy mean and population std per (scenario, method), sorted by
/// scenario then method.
pub fn evaluate_result(results: &[StreamResult]) -> Result<Vec<GroupSummary>> {
    if results.is_empty() {
        return Err(Error::NoSamples);
    }
    let mut groups: std::collections::BTreeMap<(Scenario, Method), Vec<f64>> = Default::default();
    for r in results {
        groups
            .entry((r.scenario, r.method))
            .or_default()
            .push(r.benign_accuracy);
    }
    Ok(groups
        .into_iter()
        .map(|((scenario, method), mut v)| {
            // summation order must not depend on input order
            v.sort_by(f64::total_cmp);
            let (mean, std) = mean_std(&v);
            GroupSummary {
                scenario,
                method,
                runs: v.len(),
                mean,
                std,
            }
        })
        .collect())
}
