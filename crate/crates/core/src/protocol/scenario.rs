//! Scripted trainer-side runs against an engine, producing a transcript of
//! every token event and the engine's own log.

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::client::EngineClient;
use super::engine::{serve_engine, EngineConfig};
use super::group::{init_process_group, ProcessGroup};
use super::wire::{EngineEvent, EngineLogEntry, FinishReason, Gate, GenerateRequest, TokenEvent, WeightUpdatePayload};
use crate::error::{Error, Result};
use crate::rl_math::{MixedPolicySchedule, Policy};

fn default_timeout_ms() -> u64 {
    5000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Start {
        stream: String,
        prompt_id: u64,
        max_tokens: u64,
        seed: u64,
        #[serde(default)]
        terminator: Option<u32>,
        #[serde(default)]
        gates: Vec<Gate>,
    },
    /// Push `checkpoints[checkpoint]` as the next version (or `version` when
    /// given explicitly).
    Update {
        checkpoint: usize,
        #[serde(default)]
        version: Option<u64>,
    },
    /// Wait until the stream (every started stream when absent) has
    /// delivered `position` or finished.
    WaitFor {
        #[serde(default)]
        stream: Option<String>,
        position: u64,
    },
    /// Wait for completion of one stream or of all started streams.
    Await {
        #[serde(default)]
        stream: Option<String>,
    },
    Sleep {
        ms: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    #[serde(default = "default_timeout_ms")]
    pub step_timeout_ms: u64,
    #[serde(default)]
    pub actions: Vec<Action>,
}

impl Default for ScenarioScript {
    fn default() -> Self {
        ScenarioScript {
            step_timeout_ms: default_timeout_ms(),
            actions: Vec::new(),
        }
    }
}

/// A script plus the checkpoints its updates refer to.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub script: ScenarioScript,
    pub checkpoints: Vec<Policy>,
}

impl Scenario {
    /// One stream sampled under `checkpoints[g]` in segment `g` of
    /// `schedule`: each update is sent once the stream has emitted the token
    /// just before a switch point, and a gate holds the stream at the switch
    /// point until the update lands.
    pub fn mixed_policy(
        checkpoints: Vec<Policy>,
        schedule: &MixedPolicySchedule,
        prompt_id: u64,
        seed: u64,
        terminator: Option<u32>,
    ) -> Result<Self> {
        if checkpoints.len() < schedule.num_segments() {
            return Err(Error::invalid(format!(
                "schedule has {} segments but only {} checkpoints were supplied",
                schedule.num_segments(),
                checkpoints.len()
            )));
        }
        let stream = "mixed".to_string();
        let gates = schedule
            .switch_points
            .iter()
            .enumerate()
            .map(|(g, &t)| Gate {
                position: t as u64,
                min_version: g as u64 + 1,
            })
            .collect();
        let mut actions = vec![Action::Start {
            stream: stream.clone(),
            prompt_id,
            max_tokens: schedule.max_len as u64,
            seed,
            terminator,
            gates,
        }];
        for (g, &t) in schedule.switch_points.iter().enumerate() {
            actions.push(Action::WaitFor {
                stream: Some(stream.clone()),
                position: t as u64 - 1,
            });
            actions.push(Action::Update {
                checkpoint: g + 1,
                version: None,
            });
        }
        actions.push(Action::Await { stream: None });
        Ok(Scenario {
            script: ScenarioScript {
                actions,
                ..Default::default()
            },
            checkpoints,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ScenarioStatus {
    Completed,
    Failed { step: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamTranscript {
    pub label: String,
    pub stream_id: u64,
    pub request: GenerateRequest,
    pub events: Vec<TokenEvent>,
    pub finish: Option<FinishReason>,
    pub error: Option<String>,
}

impl StreamTranscript {
    pub fn tokens(&self) -> Vec<u32> {
        self.events.iter().map(|e| e.token).collect()
    }

    pub fn versions(&self) -> Vec<u64> {
        self.events.iter().map(|e| e.weight_version).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum UpdateOutcome {
    Applied { version: u64 },
    Rejected { message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub step: usize,
    pub checkpoint: usize,
    pub version: u64,
    pub checksum: u32,
    pub outcome: UpdateOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub status: ScenarioStatus,
    pub initial_version: u64,
    pub group_id: Option<String>,
    pub streams: Vec<StreamTranscript>,
    pub updates: Vec<UpdateRecord>,
    pub engine_log: Vec<EngineLogEntry>,
}

impl Transcript {
    pub fn is_completed(&self) -> bool {
        self.status == ScenarioStatus::Completed
    }

    pub fn stream(&self, label: &str) -> Option<&StreamTranscript> {
        self.streams.iter().find(|s| s.label == label)
    }

    /// The policy behind every version the engine served: `initial` at the
    /// starting version plus each applied update's checkpoint.
    pub fn policies_by_version(&self, initial: &Policy, checkpoints: &[Policy]) -> BTreeMap<u64, Policy> {
        let mut out = BTreeMap::new();
        out.insert(self.initial_version, initial.clone());
        for u in &self.updates {
            if let UpdateOutcome::Applied { version } = u.outcome {
                out.insert(version, checkpoints[u.checkpoint].clone());
            }
        }
        out
    }
}

#[derive(Default)]
struct Progress {
    events: Vec<TokenEvent>,
    finish: Option<FinishReason>,
    error: Option<String>,
}

impl Progress {
    fn done(&self) -> bool {
        self.finish.is_some() || self.error.is_some()
    }
}

struct LiveStream {
    label: String,
    stream_id: u64,
    request: GenerateRequest,
    progress: Arc<(Mutex<Progress>, Condvar)>,
}

impl LiveStream {
    fn snapshot(&self) -> StreamTranscript {
        let p = self.progress.0.lock().unwrap_or_else(|p| p.into_inner());
        StreamTranscript {
            label: self.label.clone(),
            stream_id: self.stream_id,
            request: self.request.clone(),
            events: p.events.clone(),
            finish: p.finish,
            error: p.error.clone(),
        }
    }

    /// Wait until `ready` holds, up to `deadline`.
    fn wait_until(&self, deadline: Instant, ready: impl Fn(&Progress) -> bool) -> bool {
        let (lock, cv) = &*self.progress;
        let mut p = lock.lock().unwrap_or_else(|p| p.into_inner());
        while !ready(&p) {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            p = cv.wait_timeout(p, deadline - now).unwrap_or_else(|p| p.into_inner()).0;
        }
        true
    }
}

struct Driver<'a> {
    client: EngineClient,
    scenario: &'a Scenario,
    group: Option<ProcessGroup>,
    next_version: u64,
    streams: Vec<LiveStream>,
    updates: Vec<UpdateRecord>,
}

impl Driver<'_> {
    fn targets(&self, stream: &Option<String>) -> std::result::Result<Vec<&LiveStream>, String> {
        match stream {
            None => Ok(self.streams.iter().collect()),
            Some(label) => self
                .streams
                .iter()
                .find(|s| &s.label == label)
                .map(|s| vec![s])
                .ok_or_else(|| format!("unknown stream {label:?}")),
        }
    }

    /// `Ok(Err(reason))` marks a failed step; `Err` is a hard error.
    fn step(&mut self, index: usize, action: &Action, timeout: Duration) -> Result<std::result::Result<(), String>> {
        let deadline = Instant::now() + timeout;
        match action {
            Action::Start {
                stream,
                prompt_id,
                max_tokens,
                seed,
                terminator,
                gates,
            } => {
                if self.streams.iter().any(|s| &s.label == stream) {
                    return Ok(Err(format!("stream {stream:?} started twice")));
                }
                let request = GenerateRequest {
                    prompt_id: *prompt_id,
                    max_tokens: *max_tokens,
                    seed: *seed,
                    terminator: *terminator,
                    gates: gates.clone(),
                };
                let ts = self.client.generate_stream(request.clone())?;
                let progress = Arc::new((Mutex::new(Progress::default()), Condvar::new()));
                let shared = Arc::clone(&progress);
                let stream_id = ts.stream_id();
                std::thread::spawn(move || {
                    let mut ts = ts;
                    let (lock, cv) = &*shared;
                    for e in ts.by_ref() {
                        let mut p = lock.lock().unwrap_or_else(|p| p.into_inner());
                        match e {
                            Ok(e) => p.events.push(e),
                            Err(e) => p.error = Some(e.to_string()),
                        }
                        cv.notify_all();
                    }
                    let mut p = lock.lock().unwrap_or_else(|p| p.into_inner());
                    p.finish = ts.finish_reason();
                    if p.finish.is_none() && p.error.is_none() {
                        p.error = Some("stream ended without completion".into());
                    }
                    cv.notify_all();
                });
                self.streams.push(LiveStream {
                    label: stream.clone(),
                    stream_id,
                    request,
                    progress,
                });
                Ok(Ok(()))
            }
            Action::Update { checkpoint, version } => {
                let Some(policy) = self.scenario.checkpoints.get(*checkpoint) else {
                    return Ok(Err(format!(
                        "checkpoint {checkpoint} not among the {} supplied",
                        self.scenario.checkpoints.len()
                    )));
                };
                if self.group.is_none() {
                    self.group = Some(init_process_group(&[self.client.addr().to_string()])?);
                }
                let group = self.group.as_ref().expect("formed above");
                let version = version.unwrap_or(self.next_version);
                let payload = WeightUpdatePayload::new(version, policy.to_document());
                let outcome = match super::group::request_weight_update(group, &payload) {
                    Ok(applied) => {
                        self.next_version = applied + 1;
                        UpdateOutcome::Applied { version: applied }
                    }
                    Err(e @ (Error::VersionConflict { .. } | Error::ChecksumMismatch { .. } | Error::Rejected(_))) => {
                        UpdateOutcome::Rejected { message: e.to_string() }
                    }
                    Err(e) => return Err(e),
                };
                self.updates.push(UpdateRecord {
                    step: index,
                    checkpoint: *checkpoint,
                    version,
                    checksum: payload.checksum,
                    outcome,
                });
                Ok(Ok(()))
            }
            Action::WaitFor { stream, position } => {
                let targets = match self.targets(stream) {
                    Ok(t) => t,
                    Err(e) => return Ok(Err(e)),
                };
                for s in targets {
                    if !s.wait_until(deadline, |p| p.done() || p.events.len() as u64 > *position) {
                        return Ok(Err(format!(
                            "timed out waiting for {} to reach position {position}",
                            s.label
                        )));
                    }
                }
                Ok(Ok(()))
            }
            Action::Await { stream } => {
                let targets = match self.targets(stream) {
                    Ok(t) => t,
                    Err(e) => return Ok(Err(e)),
                };
                for s in targets {
                    if !s.wait_until(deadline, Progress::done) {
                        return Ok(Err(format!("timed out waiting for {} to finish", s.label)));
                    }
                    if let Some(e) = &s.progress.0.lock().unwrap_or_else(|p| p.into_inner()).error {
                        return Ok(Err(format!("stream {} failed: {e}", s.label)));
                    }
                }
                Ok(Ok(()))
            }
            Action::Sleep { ms } => {
                std::thread::sleep(Duration::from_millis(*ms));
                Ok(Ok(()))
            }
        }
    }
}

/// Run `scenario` against the engine at `addr`. Connectivity failures are
/// errors; a step that fails or times out yields a transcript with
/// [`ScenarioStatus::Failed`] holding everything received so far.
pub fn drive_scenario(addr: &str, scenario: &Scenario) -> Result<Transcript> {
    let client = EngineClient::new(addr);
    let health = client.health()?;
    let mut driver = Driver {
        client,
        scenario,
        group: None,
        next_version: health.weight_version + 1,
        streams: Vec::new(),
        updates: Vec::new(),
    };
    let timeout = Duration::from_millis(scenario.script.step_timeout_ms);
    let mut status = ScenarioStatus::Completed;
    for (i, action) in scenario.script.actions.iter().enumerate() {
        if let Err(reason) = driver.step(i, action, timeout)? {
            status = ScenarioStatus::Failed { step: i, reason };
            break;
        }
    }
    let engine_log = driver.client.event_log().unwrap_or_default();
    Ok(Transcript {
        status,
        initial_version: health.weight_version,
        group_id: driver.group.as_ref().map(|g| g.group_id.clone()),
        streams: driver.streams.iter().map(LiveStream::snapshot).collect(),
        updates: driver.updates,
        engine_log,
    })
}

/// Serve `config` on a loopback port, drive `scenario` against it and shut
/// the engine down.
pub fn run_loopback(config: EngineConfig, scenario: &Scenario) -> Result<Transcript> {
    let engine = serve_engine(config)?;
    let transcript = drive_scenario(&engine.addr().to_string(), scenario);
    engine.shutdown();
    transcript
}

/// Outcome of [`verify_transcript`]; `problems` is empty when every check
/// passed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TranscriptCheck {
    pub streams: usize,
    pub events: usize,
    pub problems: Vec<String>,
}

impl TranscriptCheck {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Recompute every event's log-probability offline from the policy of its
/// stamped version, replaying the decode state the way the engine does
/// (carried over between versions, or rebuilt when `recompute_state`).
/// Also checks contiguous positions, nondecreasing versions and that
/// version changes happen exactly at the boundaries the engine logged.
pub fn verify_transcript(
    transcript: &Transcript,
    policies: &BTreeMap<u64, Policy>,
    recompute_state: bool,
) -> TranscriptCheck {
    let mut check = TranscriptCheck::default();
    let mut boundaries: BTreeMap<(u64, u64), u64> = BTreeMap::new();
    for entry in &transcript.engine_log {
        if let EngineEvent::WeightUpdate {
            to_version, boundary, ..
        } = &entry.event
        {
            for b in boundary {
                boundaries.insert((b.stream_id, *to_version), b.position);
            }
        }
    }
    for s in &transcript.streams {
        check.streams += 1;
        check.events += s.events.len();
        let label = &s.label;
        for (i, e) in s.events.iter().enumerate() {
            if e.position != i as u64 {
                check
                    .problems
                    .push(format!("{label}: event {i} carries position {}", e.position));
            }
        }
        for w in s.events.windows(2) {
            if w[1].weight_version < w[0].weight_version {
                check
                    .problems
                    .push(format!("{label}: version decreases at position {}", w[1].position));
            }
        }
        for (&(stream_id, version), &position) in &boundaries {
            if stream_id != s.stream_id {
                continue;
            }
            let before = s.events.iter().take_while(|e| e.position < position);
            let after = s.events.iter().skip_while(|e| e.position < position);
            if before.clone().any(|e| e.weight_version >= version) || after.clone().any(|e| e.weight_version < version)
            {
                check.problems.push(format!(
                    "{label}: stamps disagree with the logged boundary for version {version} at position {position}"
                ));
            }
        }
        let mut state = None;
        let mut current = None;
        for e in &s.events {
            let Some(policy) = policies.get(&e.weight_version) else {
                check
                    .problems
                    .push(format!("{label}: no policy for version {}", e.weight_version));
                break;
            };
            let st = state.get_or_insert_with(|| policy.start(s.request.prompt_id));
            if current.is_some_and(|v| v != e.weight_version) && recompute_state {
                policy.recompute(st);
            }
            current = Some(e.weight_version);
            let lps = policy.next_logprobs(st);
            let Some(&expected) = lps.get(e.token as usize) else {
                check
                    .problems
                    .push(format!("{label}: token {} outside vocabulary", e.token));
                break;
            };
            if expected.to_bits() != e.logprob.to_bits() {
                check.problems.push(format!(
                    "{label}: position {} log-probability {} but version {} gives {expected}",
                    e.position, e.logprob, e.weight_version
                ));
            }
            if policy.push(st, e.token).is_err() {
                break;
            }
        }
    }
    check
}
