use std::collections::{BTreeMap, VecDeque};

use super::analysis::ess_trace;
use super::config::{LengthSampling, SimConfig};
use super::trace::{Conservation, Phase, SequenceFate, SimEvent, SimSequence, SimTrace, StepRecord, TickRecord};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, StreamRng};
use crate::throughput::Mode;

struct LengthSource<'a> {
    config: &'a SimConfig,
    rng: StreamRng,
}

impl<'a> LengthSource<'a> {
    fn new(config: &'a SimConfig) -> Self {
        LengthSource {
            config,
            rng: stream_rng(config.seed, 0),
        }
    }

    fn next(&mut self, id: u64) -> u32 {
        match self.config.length_sampling {
            LengthSampling::Random => self.config.lengths.sample(&mut self.rng),
            LengthSampling::Cycle => self.config.lengths.nth_cyclic(id),
        }
    }
}

/// Lag statistics for a batch consumed while `version` is current. The
/// sequence at position `p` of the batch is global sample `first_index + p`.
#[allow(clippy::too_many_arguments)]
fn step_record(
    step: u64,
    start_tick: u64,
    end_tick: u64,
    version: u64,
    ids: Vec<u64>,
    first_index: u64,
    train_batch: u64,
    seqs: &[SimSequence],
    stall_ticks: u64,
) -> StepRecord {
    let mut hist = BTreeMap::new();
    let mut lag_sum = 0u64;
    let mut tokens = 0u64;
    let mut max_samples = 0u64;
    let mut min_samples = u64::MAX;
    for (pos, &id) in ids.iter().enumerate() {
        let index = first_index + pos as u64;
        for &(v, n) in &seqs[id as usize].token_versions {
            let lag = version - v;
            *hist.entry(lag).or_insert(0) += n as u64;
            lag_sum += lag * n as u64;
            tokens += n as u64;
            let sample_lag = index - v * train_batch;
            max_samples = max_samples.max(sample_lag);
            min_samples = min_samples.min(sample_lag);
        }
    }
    StepRecord {
        step,
        start_tick,
        end_tick,
        version,
        sequence_ids: ids,
        max_lag_steps: hist.keys().next_back().copied().unwrap_or(0),
        mean_lag_steps: if tokens == 0 {
            0.0
        } else {
            lag_sum as f64 / tokens as f64
        },
        lag_histogram: hist,
        max_lag_samples: max_samples,
        min_lag_samples: if min_samples == u64::MAX { 0 } else { min_samples },
        ess: None,
        stall_ticks,
    }
}

fn finish_trace(
    config: &SimConfig,
    ticks: Vec<TickRecord>,
    steps: Vec<StepRecord>,
    events: Vec<SimEvent>,
    sequences: Vec<SimSequence>,
) -> Result<SimTrace> {
    let mut conservation = Conservation {
        generated: sequences.len() as u64,
        ..Default::default()
    };
    for s in &sequences {
        match s.fate {
            SequenceFate::Consumed { .. } => conservation.consumed += 1,
            SequenceFate::Evicted { .. } => conservation.evicted += 1,
            SequenceFate::Queued => conservation.queued += 1,
            SequenceFate::InProgress => conservation.in_progress += 1,
        }
    }
    let mut trace = SimTrace {
        config: config.clone(),
        ticks,
        steps,
        events,
        sequences,
        conservation,
    };
    if let Some(drift) = &config.drift {
        let values = ess_trace(&trace, drift)?;
        for (step, ess) in trace.steps.iter_mut().zip(values) {
            step.ess = Some(ess);
        }
    }
    Ok(trace)
}

/// Alternating generate / train schedule. All units decode the whole RL
/// step's `S = B G` sequences together; training then takes `G` steps of
/// `train_ticks_per_step` ticks each with instantaneous weight updates.
pub fn run_conventional(config: &SimConfig) -> Result<SimTrace> {
    config.validate()?;
    if config.mode != Mode::Conventional {
        return Err(Error::invalid("run_conventional needs mode = conventional"));
    }
    let b = config.train_batch;
    let s = config.samples_per_rl_step();
    let mut lengths = LengthSource::new(config);
    let mut seqs: Vec<SimSequence> = Vec::new();
    let mut ticks = Vec::new();
    let mut steps = Vec::new();
    let mut events = Vec::new();
    let mut tick = 0u64;
    let mut version = 0u64;
    let mut consumed = 0u64;

    while (steps.len() as u64) < config.total_optimizer_steps {
        let first = seqs.len() as u64;
        for id in first..first + s {
            let len = lengths.next(id);
            seqs.push(SimSequence::new(id, len, version, Some(tick)));
        }
        let batch_ids: Vec<u64> = (first..first + s).collect();
        let mut finished = 0u64;
        let mut active = s;
        while active > 0 {
            let in_flight = active;
            for &id in &batch_ids {
                let seq = &mut seqs[id as usize];
                if seq.is_finished() {
                    continue;
                }
                seq.emit(version);
                if seq.is_finished() {
                    seq.finish_tick = Some(tick);
                    seq.ready_tick = Some(tick + 1 + config.preprocessor_delay_ticks);
                    seq.fate = SequenceFate::Queued;
                    finished += 1;
                    active -= 1;
                }
            }
            ticks.push(TickRecord {
                tick,
                phase: Phase::Generate,
                in_flight,
                queue_depth: finished,
                version,
                tokens_emitted: in_flight,
                paused: false,
            });
            tick += 1;
        }
        for _ in 0..config.preprocessor_delay_ticks {
            ticks.push(TickRecord {
                tick,
                phase: Phase::Preprocess,
                in_flight: 0,
                queue_depth: finished,
                version,
                tokens_emitted: 0,
                paused: false,
            });
            tick += 1;
        }
        let mut queue = finished;
        for k in 0..config.steps_per_rl_step {
            if steps.len() as u64 == config.total_optimizer_steps {
                break;
            }
            let ids: Vec<u64> = batch_ids[(k * b) as usize..((k + 1) * b) as usize].to_vec();
            for (pos, &id) in ids.iter().enumerate() {
                seqs[id as usize].fate = SequenceFate::Consumed {
                    step: steps.len() as u64,
                    tick,
                    index: consumed + pos as u64,
                };
            }
            let start = tick;
            let end = tick + config.train_ticks_per_step;
            let record = step_record(steps.len() as u64, start, end, version, ids, consumed, b, &seqs, 0);
            consumed += b;
            queue -= b;
            for _ in 0..config.train_ticks_per_step {
                ticks.push(TickRecord {
                    tick,
                    phase: Phase::Train,
                    in_flight: 0,
                    queue_depth: queue,
                    version,
                    tokens_emitted: 0,
                    paused: false,
                });
                tick += 1;
            }
            version += 1;
            events.push(SimEvent::WeightUpdate {
                tick,
                version,
                pause_ticks: 0,
            });
            steps.push(record);
        }
    }
    finish_trace(config, ticks, steps, events, seqs)
}

struct Training {
    end: u64,
    record: StepRecord,
}

/// Concurrent actors and trainer. Each tick: (1) sequences whose
/// preprocessing is done enter the ring buffer, evicting the oldest when
/// full; (2) the trainer finishes its step (bumping the version and pausing
/// the actors) and starts the next one if a full batch is queued; (3) every
/// slot is refilled and, unless paused, emits one token stamped with the
/// current version.
pub fn run_pipeline(config: &SimConfig) -> Result<SimTrace> {
    config.validate()?;
    if config.mode != Mode::Pipeline {
        return Err(Error::invalid("run_pipeline needs mode = pipeline"));
    }
    let b = config.train_batch;
    let n_slots = (config.n_inference_units * config.gen_batch) as usize;
    let max_len = config.lengths.max_len() as u64;
    let mut lengths = LengthSource::new(config);
    let mut seqs: Vec<SimSequence> = Vec::new();
    let mut ring: VecDeque<u64> = VecDeque::new();
    let mut preprocessing: VecDeque<u64> = VecDeque::new();
    let mut ticks = Vec::new();
    let mut steps = Vec::new();
    let mut events = Vec::new();

    for id in 0..config.warm_start_sequences {
        let len = lengths.next(id);
        let mut seq = SimSequence::new(id, len, 0, None);
        seq.token_versions.push((0, len));
        seq.tokens_emitted = len;
        seq.ready_tick = Some(0);
        seq.fate = SequenceFate::Queued;
        seqs.push(seq);
        ring.push_back(id);
    }

    let offsets: Vec<u64> = (0..n_slots as u64)
        .map(|k| {
            if config.staggered_start {
                k * max_len / n_slots as u64
            } else {
                0
            }
        })
        .collect();
    let mut slots: Vec<Option<u64>> = vec![None; n_slots];
    let mut version = 0u64;
    let mut pause_until = 0u64;
    let mut consumed = 0u64;
    let mut trainer: Option<Training> = None;
    let mut waiting_since: Option<u64> = None;
    let mut tick = 0u64;

    loop {
        while let Some(&id) = preprocessing.front() {
            if seqs[id as usize].ready_tick.expect("finished") > tick {
                break;
            }
            preprocessing.pop_front();
            if config.queue_capacity.is_some_and(|cap| ring.len() as u64 >= cap) {
                let old = ring.pop_front().expect("capacity >= 1");
                seqs[old as usize].fate = SequenceFate::Evicted { tick };
                events.push(SimEvent::Eviction { tick, sequence_id: old });
            }
            ring.push_back(id);
        }

        if trainer.as_ref().is_some_and(|t| t.end == tick) {
            let done = trainer.take().expect("checked");
            steps.push(done.record);
            version += 1;
            pause_until = tick + config.weight_transfer_pause_ticks;
            events.push(SimEvent::WeightUpdate {
                tick,
                version,
                pause_ticks: config.weight_transfer_pause_ticks,
            });
            if steps.len() as u64 == config.total_optimizer_steps {
                break;
            }
        }
        if trainer.is_none() {
            if ring.len() as u64 >= b {
                let ids: Vec<u64> = ring.drain(..b as usize).collect();
                let step = steps.len() as u64;
                for (pos, &id) in ids.iter().enumerate() {
                    seqs[id as usize].fate = SequenceFate::Consumed {
                        step,
                        tick,
                        index: consumed + pos as u64,
                    };
                }
                let stall = waiting_since.take().map_or(0, |since| tick - since);
                if stall > 0 {
                    events.push(SimEvent::Stall {
                        tick: tick - stall,
                        waited_ticks: stall,
                    });
                }
                let end = tick + config.train_ticks_per_step;
                let record = step_record(step, tick, end, version, ids, consumed, b, &seqs, stall);
                consumed += b;
                trainer = Some(Training { end, record });
            } else if waiting_since.is_none() {
                waiting_since = Some(tick);
            }
        }

        for (slot, &offset) in slots.iter_mut().zip(&offsets) {
            if slot.is_none() && tick >= offset {
                let id = seqs.len() as u64;
                let len = lengths.next(id);
                seqs.push(SimSequence::new(id, len, version, Some(tick)));
                *slot = Some(id);
            }
        }
        let in_flight = slots.iter().filter(|s| s.is_some()).count() as u64;
        let paused = tick < pause_until;
        let mut emitted = 0;
        if !paused {
            for slot in slots.iter_mut() {
                let Some(id) = *slot else { continue };
                let seq = &mut seqs[id as usize];
                seq.emit(version);
                emitted += 1;
                if seq.is_finished() {
                    seq.finish_tick = Some(tick);
                    seq.ready_tick = Some(tick + 1 + config.preprocessor_delay_ticks);
                    seq.fate = SequenceFate::Queued;
                    preprocessing.push_back(id);
                    *slot = None;
                }
            }
        }
        ticks.push(TickRecord {
            tick,
            phase: Phase::Concurrent,
            in_flight,
            queue_depth: ring.len() as u64,
            version,
            tokens_emitted: emitted,
            paused,
        });
        tick += 1;
    }
    finish_trace(config, ticks, steps, events, seqs)
}

/// Run the simulation the config's mode selects. Identical configs give
/// identical traces.
pub fn replay(config: &SimConfig) -> Result<SimTrace> {
    match config.mode {
        Mode::Conventional => run_conventional(config),
        Mode::Pipeline => run_pipeline(config),
    }
}
