//! In-flight weight updates over a loopback wire protocol: a generation
//! engine that swaps weights between tokens, the trainer-side client and
//! process-group helpers, and a scenario driver.

pub mod client;
pub mod engine;
pub mod group;
pub mod scenario;
pub mod wire;

pub use client::{EngineClient, HealthStatus, TokenStream};
pub use engine::{serve_engine, EngineConfig, EngineHandle};
pub use group::{destroy_process_group, group_id_for, init_process_group, request_weight_update, ProcessGroup};
pub use scenario::{
    drive_scenario, run_loopback, verify_transcript, Action, Scenario, ScenarioScript, ScenarioStatus,
    StreamTranscript, Transcript, TranscriptCheck, UpdateOutcome, UpdateRecord,
};
pub use wire::{
    EngineEvent, EngineLogEntry, FinishReason, Gate, GenerateRequest, Rejection, Request, Response, StreamPosition,
    TokenEvent, WeightUpdatePayload,
};
