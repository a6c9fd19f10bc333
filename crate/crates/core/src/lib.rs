//! Workflow copilot: staged deployment, application supervision and unified
//! telemetry for co-deployed multi-application workflows.
//!
//! The crate is organised around a single per-run event store. Companions,
//! the tracepoint collector, the monitors and the stage engine all append to
//! it; the HTTP API and replay tooling only ever read from it.

pub mod api;
pub mod chaos;
pub mod clock;
pub mod companion;
pub mod monitors;
pub mod stage;
pub mod store;
pub mod tracepoint;
pub mod workflow;
pub mod workloads;

pub use store::{Event, EventDraft, EventKind, EventStore, Query};
pub use workflow::{
    estimate_system_failure, parse_workflow, reduce_to_single_node, ApplicationSpec, ChannelKind,
    ChannelSpec, CheckKind, CheckSpec, ReliabilityEstimate, StageKind, StageSpec, WorkflowSpec,
};

/// Environment variables forming the contract between the supervisor and
/// the applications it launches.
pub mod env {
    pub const RUN_ID: &str = "COPILOT_RUN_ID";
    pub const APP: &str = "COPILOT_APP";
    pub const TRACE_ADDR: &str = "COPILOT_TRACE_ADDR";
    pub const CHANNEL_DIR: &str = "COPILOT_CHANNEL_DIR";
    pub const NODES: &str = "COPILOT_NODES";
    pub const SCALE: &str = "COPILOT_SCALE";
    pub const STAGE: &str = "COPILOT_STAGE";
    pub const HOME: &str = "COPILOT_HOME";
    pub const API_TOKEN: &str = "COPILOT_API_TOKEN";
}
