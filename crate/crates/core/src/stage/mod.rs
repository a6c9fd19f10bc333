//! The staged deployment machine and its supervisor.

mod checks;
mod engine;
mod state;

pub use checks::{run_check, run_checks};
pub use engine::{
    Engine, EngineError, GateError, RunHandle, RunOptions, RunOutcome, SteerCommand, SteerError,
    UNGATED_STAGE,
};
pub use state::{
    CheckResult, DecidedBy, Decision, GateDecision, IllegalTransition, Outcome, StageEntry,
    StageMachine, StageState, StageStatus, SUPERVISOR_SOURCE,
};
