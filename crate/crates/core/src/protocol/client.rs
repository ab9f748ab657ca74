use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use super::wire::{
    EngineLogEntry, FinishReason, GenerateRequest, Rejection, Request, Response, TokenEvent, WeightUpdatePayload,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HealthStatus {
    pub weight_version: u64,
    pub active_streams: u64,
    pub recompute_state: bool,
    pub group_id: Option<String>,
}

/// Trainer-side client. Every call opens its own connection.
#[derive(Debug, Clone)]
pub struct EngineClient {
    addr: String,
    connect_timeout: Duration,
}

fn rejection_error(reason: Rejection) -> Error {
    match reason {
        Rejection::VersionConflict { current, requested } => Error::VersionConflict { current, requested },
        Rejection::ChecksumMismatch { expected, computed } => Error::ChecksumMismatch { expected, computed },
        other => Error::Rejected(other.to_string()),
    }
}

fn unexpected(r: &Response) -> Error {
    Error::Protocol(format!(
        "unexpected response: {}",
        serde_json::to_string(r).unwrap_or_default()
    ))
}

fn read_response(reader: &mut BufReader<TcpStream>) -> Result<Option<Response>> {
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    serde_json::from_str(&line)
        .map(Some)
        .map_err(|e| Error::Protocol(format!("malformed response line: {e}")))
}

impl EngineClient {
    pub fn new(addr: impl Into<String>) -> Self {
        EngineClient {
            addr: addr.into(),
            connect_timeout: Duration::from_secs(2),
        }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn connect(&self) -> Result<TcpStream> {
        let err = |source| Error::Connect {
            addr: self.addr.clone(),
            source,
        };
        let addrs = self.addr.to_socket_addrs().map_err(err)?;
        let mut last = std::io::Error::new(std::io::ErrorKind::NotFound, "address resolved to nothing");
        for a in addrs {
            match TcpStream::connect_timeout(&a, self.connect_timeout) {
                Ok(s) => {
                    s.set_nodelay(true).map_err(err)?;
                    return Ok(s);
                }
                Err(e) => last = e,
            }
        }
        Err(err(last))
    }

    fn open(&self, request: &Request) -> Result<BufReader<TcpStream>> {
        let mut stream = self.connect()?;
        let mut line = serde_json::to_vec(request)?;
        line.push(b'\n');
        stream.write_all(&line)?;
        stream.flush()?;
        Ok(BufReader::new(stream))
    }

    fn call(&self, request: &Request) -> Result<Response> {
        let mut reader = self.open(request)?;
        match read_response(&mut reader)? {
            Some(Response::Rejected { reason }) => Err(rejection_error(reason)),
            Some(r) => Ok(r),
            None => Err(Error::Protocol("engine closed the connection without answering".into())),
        }
    }

    pub fn health(&self) -> Result<HealthStatus> {
        match self.call(&Request::Health)? {
            Response::Health {
                weight_version,
                active_streams,
                recompute_state,
                group_id,
            } => Ok(HealthStatus {
                weight_version,
                active_streams,
                recompute_state,
                group_id,
            }),
            r => Err(unexpected(&r)),
        }
    }

    pub fn generate_stream(&self, request: GenerateRequest) -> Result<TokenStream> {
        let mut reader = self.open(&Request::Generate(request))?;
        match read_response(&mut reader)? {
            Some(Response::Accepted { stream_id }) => Ok(TokenStream {
                stream_id,
                reader,
                next_position: 0,
                finish: None,
                closed: false,
            }),
            Some(Response::Rejected { reason }) => Err(rejection_error(reason)),
            Some(r) => Err(unexpected(&r)),
            None => Err(Error::StreamClosed { stream_id: None }),
        }
    }

    pub(crate) fn join_group(&self, group_id: &str, members: &[String], rank: u64) -> Result<()> {
        match self.call(&Request::InitProcessGroup {
            group_id: group_id.into(),
            members: members.to_vec(),
            rank,
        })? {
            Response::GroupJoined { .. } => Ok(()),
            r => Err(unexpected(&r)),
        }
    }

    pub(crate) fn leave_group(&self, group_id: &str) -> Result<()> {
        match self.call(&Request::DestroyProcessGroup {
            group_id: group_id.into(),
        })? {
            Response::GroupLeft { .. } => Ok(()),
            r => Err(unexpected(&r)),
        }
    }

    pub fn request_weight_update(&self, group_id: &str, payload: &WeightUpdatePayload) -> Result<u64> {
        match self.call(&Request::RequestWeightUpdate {
            group_id: group_id.into(),
            payload: payload.clone(),
        })? {
            Response::UpdateApplied { applied_version } => Ok(applied_version),
            r => Err(unexpected(&r)),
        }
    }

    pub fn event_log(&self) -> Result<Vec<EngineLogEntry>> {
        match self.call(&Request::EventLog)? {
            Response::EventLog { entries } => Ok(entries),
            r => Err(unexpected(&r)),
        }
    }

    pub fn shutdown(&self) -> Result<()> {
        match self.call(&Request::Shutdown)? {
            Response::ShuttingDown => Ok(()),
            r => Err(unexpected(&r)),
        }
    }
}

/// Token events of one generation request, in position order. Ends after
/// the engine's completion record; a connection that closes before it
/// yields a single [`Error::StreamClosed`].
pub struct TokenStream {
    stream_id: u64,
    reader: BufReader<TcpStream>,
    next_position: u64,
    finish: Option<FinishReason>,
    closed: bool,
}

impl TokenStream {
    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn finish_reason(&self) -> Option<FinishReason> {
        self.finish
    }

    /// Drain the stream.
    pub fn collect_events(mut self) -> Result<(Vec<TokenEvent>, FinishReason)> {
        let mut events = Vec::new();
        for e in self.by_ref() {
            events.push(e?);
        }
        let reason = self.finish.ok_or(Error::StreamClosed {
            stream_id: Some(self.stream_id),
        })?;
        Ok((events, reason))
    }

    fn fail(&mut self, e: Error) -> Option<Result<TokenEvent>> {
        self.closed = true;
        Some(Err(e))
    }
}

impl Iterator for TokenStream {
    type Item = Result<TokenEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.closed || self.finish.is_some() {
            return None;
        }
        let closed = Error::StreamClosed {
            stream_id: Some(self.stream_id),
        };
        match read_response(&mut self.reader) {
            Ok(Some(Response::Token(e))) => {
                if e.stream_id != self.stream_id || e.position != self.next_position {
                    return self.fail(Error::Protocol(format!(
                        "stream {} expected position {}, got stream {} position {}",
                        self.stream_id, self.next_position, e.stream_id, e.position
                    )));
                }
                self.next_position += 1;
                Some(Ok(e))
            }
            Ok(Some(Response::Done { reason, .. })) => {
                self.finish = Some(reason);
                None
            }
            Ok(Some(r)) => self.fail(unexpected(&r)),
            Ok(None) => self.fail(closed),
            Err(Error::Io(_)) => self.fail(closed),
            Err(e) => self.fail(e),
        }
    }
}
