use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::SimConfig;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Generate,
    Preprocess,
    Train,
    /// Pipeline mode: generation and training overlap.
    Concurrent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub phase: Phase,
    /// Sequences holding a decode slot during the tick.
    pub in_flight: u64,
    /// Finished sequences waiting in the ring buffer (or the training queue
    /// in conventional mode) at the end of the tick.
    pub queue_depth: u64,
    pub version: u64,
    pub tokens_emitted: u64,
    pub paused: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub start_tick: u64,
    pub end_tick: u64,
    /// Version of the weights the step trains; the update produces
    /// `version + 1`.
    pub version: u64,
    pub sequence_ids: Vec<u64>,
    /// Token count per lag in optimizer steps.
    pub lag_histogram: BTreeMap<u64, u64>,
    pub max_lag_steps: u64,
    pub mean_lag_steps: f64,
    /// Token lag in samples: samples consumed before this one minus samples
    /// consumed when the token's weights were current.
    pub max_lag_samples: u64,
    pub min_lag_samples: u64,
    pub ess: Option<f64>,
    /// Ticks the trainer waited for data before this step.
    pub stall_ticks: u64,
}

impl StepRecord {
    pub fn batch_tokens(&self) -> u64 {
        self.lag_histogram.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SimEvent {
    WeightUpdate { tick: u64, version: u64, pause_ticks: u64 },
    Stall { tick: u64, waited_ticks: u64 },
    Eviction { tick: u64, sequence_id: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "fate", rename_all = "snake_case")]
pub enum SequenceFate {
    Consumed { step: u64, tick: u64, index: u64 },
    Evicted { tick: u64 },
    Queued,
    InProgress,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimSequence {
    pub id: u64,
    pub target_length: u32,
    pub tokens_emitted: u32,
    /// Run-length encoded `(version, count)` pairs, one version per token.
    pub token_versions: Vec<(u64, u32)>,
    pub start_version: u64,
    /// `None` for warm-start sequences that exist before tick 0.
    pub start_tick: Option<u64>,
    pub finish_tick: Option<u64>,
    /// Earliest tick the trainer may consume it.
    pub ready_tick: Option<u64>,
    pub fate: SequenceFate,
}

impl SimSequence {
    pub(crate) fn new(id: u64, target_length: u32, start_version: u64, start_tick: Option<u64>) -> Self {
        SimSequence {
            id,
            target_length,
            tokens_emitted: 0,
            token_versions: Vec::new(),
            start_version,
            start_tick,
            finish_tick: None,
            ready_tick: None,
            fate: SequenceFate::InProgress,
        }
    }

    pub(crate) fn emit(&mut self, version: u64) {
        match self.token_versions.last_mut() {
            Some((v, n)) if *v == version => *n += 1,
            _ => self.token_versions.push((version, 1)),
        }
        self.tokens_emitted += 1;
    }

    pub fn is_finished(&self) -> bool {
        self.tokens_emitted == self.target_length
    }

    pub fn versions(&self) -> Vec<u64> {
        self.token_versions
            .iter()
            .flat_map(|&(v, n)| std::iter::repeat_n(v, n as usize))
            .collect()
    }
}

/// Sequence accounting at the end of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conservation {
    pub generated: u64,
    pub consumed: u64,
    pub evicted: u64,
    pub queued: u64,
    pub in_progress: u64,
}

impl Conservation {
    pub fn balanced(&self) -> bool {
        self.generated == self.consumed + self.evicted + self.queued + self.in_progress
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub config: SimConfig,
    pub ticks: Vec<TickRecord>,
    pub steps: Vec<StepRecord>,
    pub events: Vec<SimEvent>,
    pub sequences: Vec<SimSequence>,
    pub conservation: Conservation,
}

#[derive(Serialize)]
struct SequenceRow<'a> {
    id: u64,
    target_length: u32,
    tokens_emitted: u32,
    start_tick: Option<u64>,
    finish_tick: Option<u64>,
    fate: &'a str,
    consumed_step: Option<u64>,
    token_versions: &'a str,
}

#[derive(Serialize)]
struct StepRow<'a> {
    step: u64,
    start_tick: u64,
    end_tick: u64,
    version: u64,
    batch_tokens: u64,
    mean_lag_steps: f64,
    max_lag_steps: u64,
    max_lag_samples: u64,
    min_lag_samples: u64,
    ess: Option<f64>,
    stall_ticks: u64,
    lag_histogram: &'a str,
}

impl SimTrace {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn first_update_tick(&self) -> Option<u64> {
        self.events.iter().find_map(|e| match e {
            SimEvent::WeightUpdate { tick, .. } => Some(*tick),
            _ => None,
        })
    }

    pub fn write_ticks_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for t in &self.ticks {
            out.serialize(t)?;
        }
        out.flush()?;
        Ok(())
    }

    /// One row per optimizer step; the histogram column is `lag:count`
    /// pairs joined with `;`.
    pub fn write_steps_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for s in &self.steps {
            let hist = s
                .lag_histogram
                .iter()
                .map(|(k, v)| format!("{k}:{v}"))
                .collect::<Vec<_>>()
                .join(";");
            out.serialize(StepRow {
                step: s.step,
                start_tick: s.start_tick,
                end_tick: s.end_tick,
                version: s.version,
                batch_tokens: s.batch_tokens(),
                mean_lag_steps: s.mean_lag_steps,
                max_lag_steps: s.max_lag_steps,
                max_lag_samples: s.max_lag_samples,
                min_lag_samples: s.min_lag_samples,
                ess: s.ess,
                stall_ticks: s.stall_ticks,
                lag_histogram: &hist,
            })?;
        }
        out.flush()?;
        Ok(())
    }

    /// One row per sequence; `token_versions` lists the weight version of
    /// every token joined with `;`.
    pub fn write_sequences_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for q in &self.sequences {
            let (fate, consumed_step) = match q.fate {
                SequenceFate::Consumed { step, .. } => ("consumed", Some(step)),
                SequenceFate::Evicted { .. } => ("evicted", None),
                SequenceFate::Queued => ("queued", None),
                SequenceFate::InProgress => ("in_progress", None),
            };
            let versions = q.versions().iter().map(u64::to_string).collect::<Vec<_>>().join(";");
            out.serialize(SequenceRow {
                id: q.id,
                target_length: q.target_length,
                tokens_emitted: q.tokens_emitted,
                start_tick: q.start_tick,
                finish_tick: q.finish_tick,
                fate,
                consumed_step,
                token_versions: &versions,
            })?;
        }
        out.flush()?;
        Ok(())
    }

    /// Line-delimited JSON, one event per line.
    pub fn write_event_log<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}
