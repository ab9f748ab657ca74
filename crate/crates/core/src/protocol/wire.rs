//! Line-delimited JSON records exchanged with the engine. Each connection
//! carries one request line; the engine answers with one or more response
//! lines and closes.

use serde::{Deserialize, Serialize};

/// Hold a stream at `position` until the engine runs weights of at least
/// `min_version`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gate {
    pub position: u64,
    pub min_version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt_id: u64,
    pub max_tokens: u64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminator: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gates: Vec<Gate>,
}

/// New weights for the engine. `checksum` is the CRC-32 of the UTF-8 bytes
/// of `policy`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightUpdatePayload {
    pub new_version: u64,
    pub policy: String,
    pub checksum: u32,
}

impl WeightUpdatePayload {
    pub fn new(new_version: u64, policy: String) -> Self {
        let checksum = crc32fast::hash(policy.as_bytes());
        WeightUpdatePayload {
            new_version,
            policy,
            checksum,
        }
    }

    pub fn computed_checksum(&self) -> u32 {
        crc32fast::hash(self.policy.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "endpoint")]
pub enum Request {
    #[serde(rename = "/health")]
    Health,
    #[serde(rename = "/v1/chat/completions")]
    Generate(GenerateRequest),
    #[serde(rename = "/init_process_group")]
    InitProcessGroup {
        group_id: String,
        members: Vec<String>,
        rank: u64,
    },
    #[serde(rename = "/destroy_process_group")]
    DestroyProcessGroup { group_id: String },
    #[serde(rename = "/request_weight_update")]
    RequestWeightUpdate {
        group_id: String,
        payload: WeightUpdatePayload,
    },
    #[serde(rename = "/event_log")]
    EventLog,
    #[serde(rename = "/shutdown")]
    Shutdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenEvent {
    pub stream_id: u64,
    pub position: u64,
    pub token: u32,
    pub logprob: f64,
    pub weight_version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    MaxTokens,
    Terminator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum Rejection {
    VersionConflict { current: u64, requested: u64 },
    ChecksumMismatch { expected: u32, computed: u32 },
    Group { message: String },
    BadRequest { message: String },
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::VersionConflict { current, requested } => {
                write!(f, "version conflict: engine at {current}, update carries {requested}")
            }
            Rejection::ChecksumMismatch { expected, computed } => {
                write!(f, "checksum mismatch: expected {expected:08x}, computed {computed:08x}")
            }
            Rejection::Group { message } | Rejection::BadRequest { message } => f.write_str(message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    Health {
        weight_version: u64,
        active_streams: u64,
        recompute_state: bool,
        group_id: Option<String>,
    },
    Accepted {
        stream_id: u64,
    },
    Token(TokenEvent),
    Done {
        stream_id: u64,
        reason: FinishReason,
        tokens: u64,
    },
    GroupJoined {
        group_id: String,
        rank: u64,
        size: u64,
    },
    GroupLeft {
        group_id: String,
    },
    UpdateApplied {
        applied_version: u64,
    },
    EventLog {
        entries: Vec<EngineLogEntry>,
    },
    ShuttingDown,
    Rejected {
        reason: Rejection,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPosition {
    pub stream_id: u64,
    pub position: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EngineEvent {
    StreamStarted {
        stream_id: u64,
        prompt_id: u64,
        max_tokens: u64,
        version: u64,
    },
    StreamFinished {
        stream_id: u64,
        tokens: u64,
        reason: FinishReason,
    },
    /// The client went away or the engine shut down before completion.
    StreamClosed {
        stream_id: u64,
        tokens: u64,
    },
    /// `boundary` lists, for every active stream, the first position that
    /// will carry the new version.
    WeightUpdate {
        from_version: u64,
        to_version: u64,
        checksum: u32,
        boundary: Vec<StreamPosition>,
    },
    UpdateRejected {
        reason: Rejection,
    },
    GroupJoined {
        group_id: String,
        rank: u64,
    },
    GroupLeft {
        group_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineLogEntry {
    pub seq: u64,
    pub event: EngineEvent,
}
