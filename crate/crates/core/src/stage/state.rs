use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::monitors::MONITOR_SOURCE;
use crate::store::{Event, EventDraft, EventKind};
use crate::workflow::ReliabilityEstimate;

/// Source of stage events written by the supervisor.
pub const SUPERVISOR_SOURCE: &str = "supervisor";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Checking,
    AwaitingApproval,
    Running,
    Passed,
    Failed,
    Aborted,
}

impl StageStatus {
    pub const ALL: [StageStatus; 7] = [
        StageStatus::Pending,
        StageStatus::Checking,
        StageStatus::AwaitingApproval,
        StageStatus::Running,
        StageStatus::Passed,
        StageStatus::Failed,
        StageStatus::Aborted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageStatus::Pending => "pending",
            StageStatus::Checking => "checking",
            StageStatus::AwaitingApproval => "awaiting_approval",
            StageStatus::Running => "running",
            StageStatus::Passed => "passed",
            StageStatus::Failed => "failed",
            StageStatus::Aborted => "aborted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, StageStatus::Failed | StageStatus::Aborted)
    }

    /// The transition relation of the deployment machine.
    pub fn can_move_to(self, to: StageStatus) -> bool {
        use StageStatus::*;
        matches!(
            (self, to),
            (Pending, Checking)
                | (Checking, Passed)
                | (Checking, Failed)
                | (Passed, AwaitingApproval)
                | (Passed, Running)
                | (AwaitingApproval, Running)
                | (AwaitingApproval, Aborted)
                | (Running, Passed)
                | (Running, Failed)
                | (Running, Aborted)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub stage: String,
    pub check_id: String,
    pub outcome: Outcome,
    pub detail: String,
    pub duration_ms: u64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.outcome == Outcome::Pass
    }

    pub fn to_draft(&self) -> EventDraft {
        EventDraft::new(SUPERVISOR_SOURCE, EventKind::Stage)
            .with("event", "check")
            .with("stage", self.stage.as_str())
            .with("check_id", self.check_id.as_str())
            .with(
                "outcome",
                match self.outcome {
                    Outcome::Pass => "pass",
                    Outcome::Fail => "fail",
                },
            )
            .with("detail", self.detail.as_str())
            .with("duration_ms", self.duration_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecidedBy {
    Automatic,
    Operator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Proceed,
    Halt,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Proceed => "proceed",
            Decision::Halt => "halt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub stage: String,
    pub decided_by: DecidedBy,
    pub decision: Decision,
    pub at: i64,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issued_by: Option<String>,
}

impl GateDecision {
    pub fn to_draft(&self) -> EventDraft {
        EventDraft::new(SUPERVISOR_SOURCE, EventKind::Stage)
            .with("event", "gate")
            .with("stage", self.stage.as_str())
            .with(
                "decided_by",
                match self.decided_by {
                    DecidedBy::Automatic => "automatic",
                    DecidedBy::Operator => "operator",
                },
            )
            .with("decision", self.decision.as_str())
            .with("at", self.at)
            .with("reason", self.reason.as_str())
            .with_opt("issued_by", self.issued_by.clone())
    }

    fn from_event(e: &Event) -> Option<Self> {
        Some(Self {
            stage: e.str_field("stage")?.to_string(),
            decided_by: match e.str_field("decided_by")? {
                "operator" => DecidedBy::Operator,
                _ => DecidedBy::Automatic,
            },
            decision: match e.str_field("decision")? {
                "halt" => Decision::Halt,
                _ => Decision::Proceed,
            },
            at: e.i64_field("at").unwrap_or(e.ts),
            reason: e.str_field("reason").unwrap_or_default().to_string(),
            issued_by: e.str_field("issued_by").map(str::to_string),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("illegal transition {from:?} -> {to:?}")]
pub struct IllegalTransition {
    pub from: StageStatus,
    pub to: StageStatus,
}

/// Position of a run in the deployment machine. Every accepted move yields
/// the stage event recording it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageMachine {
    pub current: String,
    pub status: StageStatus,
}

impl StageMachine {
    pub fn new(first_stage: &str) -> Self {
        Self {
            current: first_stage.to_string(),
            status: StageStatus::Pending,
        }
    }

    /// Moves to `to`, entering `stage` (which must be the current stage
    /// unless the move leaves `passed`).
    pub fn transition(
        &mut self,
        stage: &str,
        to: StageStatus,
        reason: &str,
    ) -> Result<EventDraft, IllegalTransition> {
        let from = self.status;
        let stage_ok = stage == self.current || from == StageStatus::Passed;
        if !from.can_move_to(to) || !stage_ok {
            return Err(IllegalTransition { from, to });
        }
        self.current = stage.to_string();
        self.status = to;
        Ok(EventDraft::new(SUPERVISOR_SOURCE, EventKind::Stage)
            .with("event", "transition")
            .with("stage", stage)
            .with("from_status", from.as_str())
            .with("to_status", to.as_str())
            .with("reason", reason))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub name: String,
    pub kind: String,
    pub status: StageStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub run_id: String,
    pub current: String,
    pub status: StageStatus,
    pub stages: Vec<StageEntry>,
    pub check_results: Vec<CheckResult>,
    /// The most recent gate decision.
    pub gate: Option<GateDecision>,
    pub gates: Vec<GateDecision>,
    pub reliability: Option<ReliabilityEstimate>,
    /// Final run status once the supervisor has finished.
    pub outcome: Option<StageStatus>,
    pub outcome_reason: Option<String>,
}

impl StageState {
    /// Rebuilds the state from a run's events.
    pub fn from_events<'a>(run_id: &str, events: impl IntoIterator<Item = &'a Event>) -> Self {
        let mut st = StageState {
            run_id: run_id.to_string(),
            current: String::new(),
            status: StageStatus::Pending,
            stages: Vec::new(),
            check_results: Vec::new(),
            gate: None,
            gates: Vec::new(),
            reliability: None,
            outcome: None,
            outcome_reason: None,
        };
        for e in events {
            if e.kind != EventKind::Stage || e.source == MONITOR_SOURCE {
                continue;
            }
            match e.str_field("event") {
                Some("plan") => {
                    if let (Some(name), Some(kind)) =
                        (e.str_field("stage"), e.str_field("stage_kind"))
                    {
                        if st.current.is_empty() {
                            st.current = name.to_string();
                        }
                        st.stages.push(StageEntry {
                            name: name.to_string(),
                            kind: kind.to_string(),
                            status: StageStatus::Pending,
                        });
                    }
                }
                Some("transition") => {
                    let (Some(stage), Some(to)) = (
                        e.str_field("stage"),
                        e.str_field("to_status").and_then(StageStatus::parse),
                    ) else {
                        continue;
                    };
                    st.current = stage.to_string();
                    st.status = to;
                    if let Some(entry) = st.stages.iter_mut().find(|s| s.name == stage) {
                        entry.status = to;
                    }
                }
                Some("check") => {
                    st.check_results.push(CheckResult {
                        stage: e.str_field("stage").unwrap_or_default().to_string(),
                        check_id: e.str_field("check_id").unwrap_or_default().to_string(),
                        outcome: if e.str_field("outcome") == Some("pass") {
                            Outcome::Pass
                        } else {
                            Outcome::Fail
                        },
                        detail: e.str_field("detail").unwrap_or_default().to_string(),
                        duration_ms: e.u64_field("duration_ms").unwrap_or(0),
                    });
                }
                Some("gate") => {
                    if let Some(g) = GateDecision::from_event(e) {
                        st.gate = Some(g.clone());
                        st.gates.push(g);
                    }
                }
                Some("reliability") => {
                    let probs: Vec<f64> = e
                        .str_field("component_probabilities")
                        .and_then(|s| serde_json::from_str(s).ok())
                        .unwrap_or_default();
                    if let Some(p) = e.f64_field("system_failure_probability") {
                        st.reliability = Some(ReliabilityEstimate {
                            component_probabilities: probs,
                            system_failure_probability: p,
                        });
                    }
                }
                Some("outcome") => {
                    st.outcome = e.str_field("status").and_then(StageStatus::parse);
                    st.outcome_reason = e.str_field("reason").map(str::to_string);
                }
                _ => {}
            }
        }
        st
    }

    pub fn recorded_decision(&self, stage: &str, decision: Decision) -> Option<&GateDecision> {
        self.gates
            .iter()
            .find(|g| g.stage == stage && g.decision == decision)
    }
}

pub(crate) fn reliability_draft(est: &ReliabilityEstimate, apps: &[String]) -> EventDraft {
    EventDraft::new(SUPERVISOR_SOURCE, EventKind::Stage)
        .with("event", "reliability")
        .with("system_failure_probability", est.system_failure_probability)
        .with(
            "component_probabilities",
            Value::String(
                serde_json::to_string(&est.component_probabilities).expect("floats serialize"),
            ),
        )
        .with("applications", apps.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn happy_path_is_legal() {
        let mut m = StageMachine::new("static");
        m.transition("static", StageStatus::Checking, "").unwrap();
        m.transition("static", StageStatus::Passed, "").unwrap();
        m.transition("single-node", StageStatus::Running, "")
            .unwrap();
        m.transition("single-node", StageStatus::Passed, "")
            .unwrap();
        m.transition("scaled", StageStatus::AwaitingApproval, "")
            .unwrap();
        m.transition("scaled", StageStatus::Running, "").unwrap();
        m.transition("scaled", StageStatus::Passed, "").unwrap();
    }

    #[test]
    fn failed_is_terminal() {
        let mut m = StageMachine::new("static");
        m.transition("static", StageStatus::Checking, "").unwrap();
        m.transition("static", StageStatus::Failed, "").unwrap();
        for to in StageStatus::ALL {
            assert!(m.transition("static", to, "").is_err());
            assert!(m.transition("next", to, "").is_err());
        }
    }

    #[test]
    fn stage_changes_only_when_leaving_passed() {
        let mut m = StageMachine::new("static");
        assert!(m.transition("other", StageStatus::Checking, "").is_err());
        m.transition("static", StageStatus::Checking, "").unwrap();
        assert!(m.transition("other", StageStatus::Passed, "").is_err());
    }

    proptest! {
        #[test]
        fn only_relation_moves_are_accepted(moves in proptest::collection::vec((0usize..7, any::<bool>()), 0..40)) {
            let mut m = StageMachine::new("s0");
            let mut stage_n = 0;
            for (to_i, switch) in moves {
                let to = StageStatus::ALL[to_i];
                let before = m.clone();
                let stage = if switch { format!("s{}", stage_n + 1) } else { format!("s{stage_n}") };
                let legal = before.status.can_move_to(to) && (!switch || before.status == StageStatus::Passed);
                match m.transition(&stage, to, "") {
                    Ok(_) => {
                        prop_assert!(legal);
                        if switch { stage_n += 1; }
                        prop_assert_eq!(m.status, to);
                    }
                    Err(_) => {
                        prop_assert!(!legal);
                        prop_assert_eq!(&m, &before);
                    }
                }
            }
        }
    }
}
