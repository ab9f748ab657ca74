//! Loopback generation engine. A scheduler thread advances every active
//! stream by one token per round while holding the engine lock; weight
//! updates take the same lock, so they land between rounds and every token
//! is computed entirely under one version.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::Duration;

use super::group::group_id_for;
use super::wire::{
    EngineEvent, EngineLogEntry, FinishReason, GenerateRequest, Rejection, Request, Response, StreamPosition,
    TokenEvent, WeightUpdatePayload,
};
use crate::error::{Error, Result};
use crate::rl_math::{sample_categorical, DecodeState, Policy};
use crate::rng::{stream_rng, StreamRng};

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub policy: Policy,
    /// `host:port`; port 0 picks a free port.
    pub bind: String,
    /// Rebuild every stream's hidden state under the new weights after an
    /// update instead of keeping the stale one.
    pub recompute_state: bool,
    /// Pause between scheduling rounds, standing in for decode compute time.
    pub round_delay: Duration,
}

impl EngineConfig {
    pub fn new(policy: Policy) -> Self {
        EngineConfig {
            policy,
            bind: "127.0.0.1:0".into(),
            recompute_state: false,
            round_delay: Duration::ZERO,
        }
    }
}

struct ActiveStream {
    prompt_id: u64,
    max_tokens: u64,
    terminator: Option<u32>,
    gates: Vec<super::wire::Gate>,
    rng: StreamRng,
    /// Created when the first token is computed, under that token's weights.
    state: Option<DecodeState>,
    position: u64,
    tx: mpsc::Sender<Response>,
}

impl ActiveStream {
    fn gated(&self, version: u64) -> bool {
        self.gates
            .iter()
            .any(|g| g.position == self.position && version < g.min_version)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct GroupDescriptor {
    group_id: String,
    members: Vec<String>,
    rank: u64,
}

struct Core {
    policy: Policy,
    version: u64,
    recompute_state: bool,
    streams: BTreeMap<u64, ActiveStream>,
    next_stream_id: u64,
    group: Option<GroupDescriptor>,
    log: Vec<EngineLogEntry>,
    shutdown: bool,
}

impl Core {
    fn record(&mut self, event: EngineEvent) {
        let seq = self.log.len() as u64;
        self.log.push(EngineLogEntry { seq, event });
    }

    fn has_runnable(&self) -> bool {
        self.streams.values().any(|s| !s.gated(self.version))
    }

    /// One scheduling round: at most one token for every stream, in stream
    /// id order.
    fn round(&mut self) {
        let version = self.version;
        let mut finished = Vec::new();
        for (&id, s) in self.streams.iter_mut() {
            if s.gated(version) {
                continue;
            }
            let state = s.state.get_or_insert_with(|| self.policy.start(s.prompt_id));
            let lps = self.policy.next_logprobs(state);
            let token = sample_categorical(&lps, &mut s.rng);
            self.policy
                .push(state, token)
                .expect("sampled tokens are inside the vocabulary");
            let event = TokenEvent {
                stream_id: id,
                position: s.position,
                token,
                logprob: lps[token as usize],
                weight_version: version,
            };
            s.position += 1;
            let delivered = s.tx.send(Response::Token(event)).is_ok();
            let reason = if Some(token) == s.terminator {
                Some(FinishReason::Terminator)
            } else if s.position == s.max_tokens {
                Some(FinishReason::MaxTokens)
            } else {
                None
            };
            match (delivered, reason) {
                (false, _) => finished.push((id, None)),
                (true, Some(reason)) => {
                    let _ = s.tx.send(Response::Done {
                        stream_id: id,
                        reason,
                        tokens: s.position,
                    });
                    finished.push((id, Some(reason)));
                }
                (true, None) => {}
            }
        }
        for (id, reason) in finished {
            let s = self.streams.remove(&id).expect("present");
            self.record(match reason {
                Some(reason) => EngineEvent::StreamFinished {
                    stream_id: id,
                    tokens: s.position,
                    reason,
                },
                None => EngineEvent::StreamClosed {
                    stream_id: id,
                    tokens: s.position,
                },
            });
        }
    }

    fn apply_update(&mut self, group_id: &str, payload: &WeightUpdatePayload) -> std::result::Result<u64, Rejection> {
        match &self.group {
            Some(g) if g.group_id == group_id => {}
            Some(g) => {
                return Err(Rejection::Group {
                    message: format!("engine belongs to group {}, not {group_id}", g.group_id),
                })
            }
            None => {
                return Err(Rejection::Group {
                    message: "no process group has been initialized".into(),
                })
            }
        }
        if payload.new_version != self.version + 1 {
            return Err(Rejection::VersionConflict {
                current: self.version,
                requested: payload.new_version,
            });
        }
        let computed = payload.computed_checksum();
        if computed != payload.checksum {
            return Err(Rejection::ChecksumMismatch {
                expected: payload.checksum,
                computed,
            });
        }
        let policy = Policy::from_document(&payload.policy).map_err(|e| Rejection::BadRequest {
            message: format!("unusable policy: {e}"),
        })?;
        if policy.vocab_size() != self.policy.vocab_size() {
            return Err(Rejection::BadRequest {
                message: format!(
                    "vocabulary size {} differs from the serving policy's {}",
                    policy.vocab_size(),
                    self.policy.vocab_size()
                ),
            });
        }
        let boundary = self
            .streams
            .iter()
            .map(|(&stream_id, s)| StreamPosition {
                stream_id,
                position: s.position,
            })
            .collect();
        if self.recompute_state {
            for s in self.streams.values_mut() {
                if let Some(state) = &mut s.state {
                    policy.recompute(state);
                }
            }
        }
        let from_version = self.version;
        self.policy = policy;
        self.version += 1;
        self.record(EngineEvent::WeightUpdate {
            from_version,
            to_version: self.version,
            checksum: payload.checksum,
            boundary,
        });
        Ok(self.version)
    }

    fn close_all(&mut self) {
        let streams = std::mem::take(&mut self.streams);
        for (stream_id, s) in streams {
            self.record(EngineEvent::StreamClosed {
                stream_id,
                tokens: s.position,
            });
        }
    }
}

struct Shared {
    core: Mutex<Core>,
    wake: Condvar,
    addr: SocketAddr,
    round_delay: Duration,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Core> {
        self.core.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn begin_shutdown(&self) {
        {
            let mut core = self.lock();
            if core.shutdown {
                return;
            }
            core.shutdown = true;
            core.close_all();
        }
        self.wake.notify_all();
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.addr);
    }
}

/// A running engine. Dropping the handle shuts the engine down.
pub struct EngineHandle {
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl EngineHandle {
    pub fn addr(&self) -> SocketAddr {
        self.shared.addr
    }

    pub fn weight_version(&self) -> u64 {
        self.shared.lock().version
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    /// Block until a client requests shutdown.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    fn stop(&mut self) {
        self.shared.begin_shutdown();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for EngineHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

pub fn serve_engine(config: EngineConfig) -> Result<EngineHandle> {
    config.policy.validate()?;
    let listener = TcpListener::bind(&config.bind).map_err(|source| Error::Bind {
        addr: config.bind.clone(),
        source,
    })?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        core: Mutex::new(Core {
            policy: config.policy,
            version: 0,
            recompute_state: config.recompute_state,
            streams: BTreeMap::new(),
            next_stream_id: 0,
            group: None,
            log: Vec::new(),
            shutdown: false,
        }),
        wake: Condvar::new(),
        addr,
        round_delay: config.round_delay,
    });
    let scheduler = {
        let shared = Arc::clone(&shared);
        std::thread::Builder::new()
            .name("engine-scheduler".into())
            .spawn(move || run_scheduler(&shared))?
    };
    let acceptor = {
        let shared = Arc::clone(&shared);
        std::thread::Builder::new()
            .name("engine-accept".into())
            .spawn(move || run_acceptor(&shared, listener))?
    };
    Ok(EngineHandle {
        shared,
        threads: vec![scheduler, acceptor],
    })
}

fn run_scheduler(shared: &Shared) {
    loop {
        {
            let mut core = shared.lock();
            while !core.shutdown && !core.has_runnable() {
                core = shared.wake.wait(core).unwrap_or_else(|p| p.into_inner());
            }
            if core.shutdown {
                return;
            }
            core.round();
        }
        if shared.round_delay.is_zero() {
            std::thread::yield_now();
        } else {
            std::thread::sleep(shared.round_delay);
        }
    }
}

fn run_acceptor(shared: &Arc<Shared>, listener: TcpListener) {
    for conn in listener.incoming() {
        if shared.lock().shutdown {
            return;
        }
        let Ok(conn) = conn else { continue };
        let shared = Arc::clone(shared);
        let _ = std::thread::Builder::new().name("engine-conn".into()).spawn(move || {
            let _ = handle_connection(&shared, conn);
        });
    }
}

fn send(out: &mut TcpStream, response: &Response) -> std::io::Result<()> {
    let mut line = serde_json::to_vec(response).map_err(std::io::Error::other)?;
    line.push(b'\n');
    out.write_all(&line)?;
    out.flush()
}

fn handle_connection(shared: &Shared, conn: TcpStream) -> std::io::Result<()> {
    conn.set_nodelay(true)?;
    let mut out = conn.try_clone()?;
    let mut line = String::new();
    BufReader::new(conn).read_line(&mut line)?;
    if line.trim().is_empty() {
        return Ok(());
    }
    let request = match serde_json::from_str::<Request>(&line) {
        Ok(r) => r,
        Err(e) => {
            let reason = Rejection::BadRequest {
                message: format!("malformed request: {e}"),
            };
            return send(&mut out, &Response::Rejected { reason });
        }
    };
    match request {
        Request::Health => {
            let core = shared.lock();
            let response = Response::Health {
                weight_version: core.version,
                active_streams: core.streams.len() as u64,
                recompute_state: core.recompute_state,
                group_id: core.group.as_ref().map(|g| g.group_id.clone()),
            };
            drop(core);
            send(&mut out, &response)
        }
        Request::Generate(req) => handle_generate(shared, &mut out, req),
        Request::InitProcessGroup {
            group_id,
            members,
            rank,
        } => {
            let response = init_group(&mut shared.lock(), group_id, members, rank);
            send(&mut out, &response)
        }
        Request::DestroyProcessGroup { group_id } => {
            let mut core = shared.lock();
            let response = match &core.group {
                Some(g) if g.group_id == group_id => {
                    core.group = None;
                    core.record(EngineEvent::GroupLeft {
                        group_id: group_id.clone(),
                    });
                    Response::GroupLeft { group_id }
                }
                _ => Response::Rejected {
                    reason: Rejection::Group {
                        message: format!("engine is not a member of {group_id}"),
                    },
                },
            };
            drop(core);
            send(&mut out, &response)
        }
        Request::RequestWeightUpdate { group_id, payload } => {
            let response = {
                let mut core = shared.lock();
                match core.apply_update(&group_id, &payload) {
                    Ok(applied_version) => Response::UpdateApplied { applied_version },
                    Err(reason) => {
                        core.record(EngineEvent::UpdateRejected { reason: reason.clone() });
                        Response::Rejected { reason }
                    }
                }
            };
            shared.wake.notify_all();
            send(&mut out, &response)
        }
        Request::EventLog => {
            let entries = shared.lock().log.clone();
            send(&mut out, &Response::EventLog { entries })
        }
        Request::Shutdown => {
            let result = send(&mut out, &Response::ShuttingDown);
            shared.begin_shutdown();
            result
        }
    }
}

fn init_group(core: &mut Core, group_id: String, members: Vec<String>, rank: u64) -> Response {
    let reject = |message: String| Response::Rejected {
        reason: Rejection::Group { message },
    };
    let (expected_id, canonical) = group_id_for(&members);
    if canonical != members || expected_id != group_id {
        return reject(format!("group id {group_id} does not match its canonical member list"));
    }
    if rank >= members.len() as u64 {
        return reject(format!("rank {rank} outside a group of {}", members.len()));
    }
    let desc = GroupDescriptor {
        group_id: group_id.clone(),
        members,
        rank,
    };
    match &core.group {
        Some(existing) if *existing == desc => {}
        Some(existing) => {
            return reject(format!("engine already belongs to group {}", existing.group_id));
        }
        None => {
            core.record(EngineEvent::GroupJoined {
                group_id: group_id.clone(),
                rank,
            });
            core.group = Some(desc.clone());
        }
    }
    Response::GroupJoined {
        group_id,
        rank,
        size: desc.members.len() as u64,
    }
}

fn handle_generate(shared: &Shared, out: &mut TcpStream, req: GenerateRequest) -> std::io::Result<()> {
    let (tx, rx) = mpsc::channel();
    let stream_id = {
        let mut core = shared.lock();
        let problem = if core.shutdown {
            Some("engine is shutting down".to_string())
        } else if req.max_tokens == 0 {
            Some("max_tokens must be positive".to_string())
        } else {
            req.terminator
                .and_then(|t| core.policy.check_token(t).err())
                .map(|e| e.to_string())
        };
        if let Some(message) = problem {
            drop(core);
            return send(
                out,
                &Response::Rejected {
                    reason: Rejection::BadRequest { message },
                },
            );
        }
        let id = core.next_stream_id;
        core.next_stream_id += 1;
        let version = core.version;
        core.streams.insert(
            id,
            ActiveStream {
                prompt_id: req.prompt_id,
                max_tokens: req.max_tokens,
                terminator: req.terminator,
                gates: req.gates,
                rng: stream_rng(req.seed, 0),
                state: None,
                position: 0,
                tx,
            },
        );
        core.record(EngineEvent::StreamStarted {
            stream_id: id,
            prompt_id: req.prompt_id,
            max_tokens: req.max_tokens,
            version,
        });
        // Send the acknowledgement before the scheduler can emit tokens.
        if let Err(e) = send(out, &Response::Accepted { stream_id: id }) {
            core.streams.remove(&id);
            core.record(EngineEvent::StreamClosed {
                stream_id: id,
                tokens: 0,
            });
            return Err(e);
        }
        id
    };
    shared.wake.notify_all();
    for response in rx {
        if let Err(e) = send(out, &response) {
            let mut core = shared.lock();
            if let Some(s) = core.streams.remove(&stream_id) {
                core.record(EngineEvent::StreamClosed {
                    stream_id,
                    tokens: s.position,
                });
            }
            return Err(e);
        }
    }
    Ok(())
}
