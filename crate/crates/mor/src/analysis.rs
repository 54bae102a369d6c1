//! Expert-activation statistics over a trained adapter stack.
//!
//! Restoring an image routes every layer's adapter pool once per input; this
//! module replays a dataset through a checkpointed model, records each
//! routing decision, and reduces the records to the two summaries that
//! describe router behaviour:
//!
//! - how many parameterless zero experts each layer selects on average,
//!   split by degradation regime (severe inputs should claim more real
//!   capacity and thus fewer zero slots);
//! - how often each individual expert is selected, per regime, which
//!   exposes specialization — experts whose frequency shifts between
//!   regimes are the ones the router ties to specific corruptions.
//!
//! Both reduce to plain CSV so any plotting tool can consume them. The
//! image-quality metrics that usually accompany these tables live in
//! [`crate::metrics`].

use std::collections::BTreeMap;

use crate::degrade::DegradationProfile;
use crate::error::{Error, Result};
use crate::trainer::{Checkpoint, Sample, TrainState};

// ---------------------------------------------------------------------------
// The activation log.
// ---------------------------------------------------------------------------

/// One routing decision: which experts one layer kept for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    /// Adapter layer index within the generator (0-based, front to back).
    pub layer: usize,
    /// Sample index in dataset order.
    pub sample: usize,
    /// Kept expert indices, ascending. Indices `>= n_real` are zero experts.
    pub selected: Vec<usize>,
    /// Unrenormalized softmax probabilities of the kept experts, aligned
    /// with `selected`.
    pub gates: Vec<f64>,
    /// Scalar degradation severity of the sample.
    pub severity: f64,
    /// Degradation recipe tag the sample came from (`deg1`, `deg2`).
    pub regime: String,
}

impl ActivationRecord {
    /// Number of kept zero experts, given the split point of the pool.
    fn zero_selected(&self, n_real: usize) -> usize {
        self.selected.iter().filter(|&&i| i >= n_real).count()
    }
}

/// Every routing decision of one model over one dataset, with the pool
/// shape needed to interpret the indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationLog {
    records: Vec<ActivationRecord>,
    n_layers: usize,
    n_real: usize,
    n_routed: usize,
    top_k: usize,
}

impl ActivationLog {
    /// Assemble a log from raw records, checking the routing invariants:
    /// every record keeps exactly `top_k` strictly ascending indices below
    /// `n_routed`, one gate per index, and a known layer id.
    pub fn from_records(
        records: Vec<ActivationRecord>,
        n_layers: usize,
        n_real: usize,
        n_routed: usize,
        top_k: usize,
    ) -> Result<Self> {
        let inv = |why: String| Error::InvalidArgument {
            what: "ActivationLog",
            why,
        };
        if n_real > n_routed {
            return Err(inv(format!(
                "{n_real} real experts exceed the routed pool of {n_routed}"
            )));
        }
        for rec in &records {
            if rec.layer >= n_layers {
                return Err(inv(format!(
                    "record for layer {} in a {}-layer model",
                    rec.layer, n_layers
                )));
            }
            if rec.selected.len() != top_k || rec.gates.len() != top_k {
                return Err(inv(format!(
                    "record keeps {} experts with {} gates; expected top_k {}",
                    rec.selected.len(),
                    rec.gates.len(),
                    top_k
                )));
            }
            if rec.selected.iter().any(|&i| i >= n_routed) {
                return Err(inv(format!(
                    "selected index out of range in {:?} (pool size {})",
                    rec.selected, n_routed
                )));
            }
            if rec.selected.windows(2).any(|w| w[0] >= w[1]) {
                return Err(inv(format!(
                    "selected indices {:?} are not strictly ascending",
                    rec.selected
                )));
            }
        }
        Ok(ActivationLog {
            records,
            n_layers,
            n_real,
            n_routed,
            top_k,
        })
    }

    pub fn records(&self) -> &[ActivationRecord] {
        &self.records
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_real(&self) -> usize {
        self.n_real
    }

    pub fn n_routed(&self) -> usize {
        self.n_routed
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    /// Distinct regime tags, sorted, after checking each against the
    /// degradation recipe vocabulary.
    fn regimes(&self) -> Result<Vec<String>> {
        let mut tags: Vec<String> = Vec::new();
        for rec in &self.records {
            if DegradationProfile::by_name(&rec.regime).is_none() {
                return Err(Error::InvalidArgument {
                    what: "ActivationLog",
                    why: format!(
                        "unknown degradation regime tag {:?} (not a built-in recipe)",
                        rec.regime
                    ),
                });
            }
            if !tags.contains(&rec.regime) {
                tags.push(rec.regime.clone());
            }
        }
        tags.sort();
        Ok(tags)
    }
}

/// Replay `samples` through the checkpointed model and record every routing
/// decision, layer by layer, in dataset order.
pub fn log_activations(ckpt: &Checkpoint, samples: &[Sample]) -> Result<ActivationLog> {
    let state = TrainState::from_checkpoint(ckpt)?;
    record_activations(&state, samples)
}

/// [`log_activations`] for an already-materialized training state.
pub fn record_activations(state: &TrainState, samples: &[Sample]) -> Result<ActivationLog> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument {
            what: "record_activations",
            why: "no samples to analyze".into(),
        });
    }
    let mor = state.config.mor_config();
    let mut records = Vec::with_capacity(samples.len() * 2);
    for (i, s) in samples.iter().enumerate() {
        let fwd = state.generator.forward(s.input.data(), &s.scores)?;
        for (layer, routing) in fwd.routing.iter().enumerate() {
            records.push(ActivationRecord {
                layer,
                sample: i,
                selected: routing.selected.clone(),
                gates: routing.gates.clone(),
                severity: s.severity,
                regime: s.regime.clone(),
            });
        }
    }
    ActivationLog::from_records(records, 2, mor.n_real, mor.n_routed(), mor.top_k)
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

/// Mean zero-expert selections for one (layer, regime) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroCountRow {
    pub layer: usize,
    pub regime: String,
    /// Records contributing to the mean.
    pub samples: usize,
    /// Mean number of kept zero experts per sample; at most `min(z, k)`.
    pub mean_zero_active: f64,
}

/// Mean number of selected zero experts per layer and regime, rows ordered
/// by layer then regime name. Errors on a regime tag that is not a known
/// degradation recipe.
pub fn zero_expert_counts(log: &ActivationLog) -> Result<Vec<ZeroCountRow>> {
    let regimes = log.regimes()?;
    let mut rows = Vec::with_capacity(log.n_layers * regimes.len());
    for layer in 0..log.n_layers {
        for regime in &regimes {
            let mut samples = 0usize;
            let mut total = 0usize;
            for rec in &log.records {
                if rec.layer == layer && rec.regime == *regime {
                    samples += 1;
                    total += rec.zero_selected(log.n_real);
                }
            }
            let mean_zero_active = if samples == 0 {
                0.0
            } else {
                total as f64 / samples as f64
            };
            rows.push(ZeroCountRow {
                layer,
                regime: regime.clone(),
                samples,
                mean_zero_active,
            });
        }
    }
    Ok(rows)
}

/// Selection frequency of one expert within one regime.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertFrequencyRow {
    pub regime: String,
    /// Expert index in the routed pool.
    pub expert: usize,
    /// `"real"` or `"zero"`.
    pub kind: &'static str,
    /// Samples (in this regime) that kept the expert.
    pub count: usize,
    /// `count / samples(regime)` — selections are 0/1 per sample, so the
    /// frequencies of one regime sum to `top_k`.
    pub frequency: f64,
}

/// Per-expert selection frequency in one layer, split by regime. Rows are
/// ordered by regime name, then expert index.
pub fn expert_frequency(log: &ActivationLog, layer: usize) -> Result<Vec<ExpertFrequencyRow>> {
    if layer >= log.n_layers {
        return Err(Error::InvalidArgument {
            what: "expert_frequency",
            why: format!("layer {layer} out of range (model has {})", log.n_layers),
        });
    }
    let regimes = log.regimes()?;
    let mut counts: BTreeMap<&str, (usize, Vec<usize>)> = regimes
        .iter()
        .map(|r| (r.as_str(), (0usize, vec![0usize; log.n_routed])))
        .collect();
    for rec in &log.records {
        if rec.layer != layer {
            continue;
        }
        let (samples, per_expert) = counts
            .get_mut(rec.regime.as_str())
            .expect("regimes() covers every record");
        *samples += 1;
        for &i in &rec.selected {
            per_expert[i] += 1;
        }
    }
    let mut rows = Vec::with_capacity(regimes.len() * log.n_routed);
    for (regime, (samples, per_expert)) in counts {
        for (expert, &count) in per_expert.iter().enumerate() {
            rows.push(ExpertFrequencyRow {
                regime: regime.to_string(),
                expert,
                kind: if expert < log.n_real { "real" } else { "zero" },
                count,
                frequency: if samples == 0 {
                    0.0
                } else {
                    count as f64 / samples as f64
                },
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// CSV rendering.
// ---------------------------------------------------------------------------

/// Header of the zero-expert count table.
pub const ZERO_COUNTS_HEADER: &str = "layer,regime,samples,mean_zero_active";

/// Render zero-expert counts as CSV (header plus one row per layer×regime).
pub fn zero_counts_csv(rows: &[ZeroCountRow]) -> String {
    let mut out = String::from(ZERO_COUNTS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6}\n",
            r.layer, r.regime, r.samples, r.mean_zero_active
        ));
    }
    out
}

/// Header of the per-expert frequency table.
pub const EXPERT_FREQ_HEADER: &str = "regime,expert,kind,count,frequency";

/// Render expert frequencies as CSV (header plus one row per regime×expert).
pub fn expert_frequency_csv(rows: &[ExpertFrequencyRow]) -> String {
    let mut out = String::from(EXPERT_FREQ_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            r.regime, r.expert, r.kind, r.count, r.frequency
        ));
    }
    out
}
