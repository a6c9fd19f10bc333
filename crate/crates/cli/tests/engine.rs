mod common;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use common::*;
use copilot_core::chaos::{FaultInstance, FaultKind, FaultPlan};
use copilot_core::monitors::replay_run;
use copilot_core::stage::{DecidedBy, Decision, GateError, RunOutcome, SteerError, UNGATED_STAGE};
use copilot_core::store::{Event, EventKind, EventStore};

const PAIR_RUN: &str = "tick_ms = 50\ngrace_multiplier = 2\nsteer_timeout_ms = 300";

const SENDER: &str = "iterations = 40\nstep_ms = 10\nheartbeat_every = 5\n\n\
[[channels]]\nname = \"ab\"\nbytes_per_step = 512\ndirection = \"send\"\n";
const RECEIVER: &str = "iterations = 40\nstep_ms = 10\nheartbeat_every = 5\n\n\
[[channels]]\nname = \"ab\"\ndirection = \"recv\"\n";
const PAIR_CHANNEL: &str = "[[channels]]\nname = \"ab\"\nfrom_app = \"a\"\nto_app = \"b\"\nkind = \"bulk_data\"\nstall_timeout_ms = 500\n";

fn pair() -> copilot_core::workloads::Fixture {
    workflow(
        PAIR_RUN,
        &[app("a", SENDER), app("b", RECEIVER)],
        &format!("{PAIR_CHANNEL}{GATED_STAGES}"),
    )
}

fn launches_in(events: &[Arc<Event>], stage: &str) -> usize {
    of_kind(events, EventKind::Launched)
        .into_iter()
        .filter(|e| e.str_field("stage") == Some(stage))
        .count()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn manual_gate_waits_for_operator() {
    let s = start(&pair(), |_| {}).await;
    let waiting = wait_for(&s.log, Duration::from_secs(20), |e| {
        is_transition(e, "scaled", "awaiting_approval")
    })
    .await;
    assert!(waiting.is_some(), "scaled never reached its gate");
    let before = s.log.all();
    assert_eq!(launches_in(&before, "scaled"), 0);
    assert_eq!(launches_in(&before, "single-node"), 2);

    let h = &s.handle;
    let wrong = h.decide("single-node", Decision::Proceed, "", None).await;
    assert!(matches!(wrong, Err(GateError::Conflict(_))), "{wrong:?}");
    let unknown = h.decide("nope", Decision::Proceed, "", None).await;
    assert_eq!(unknown, Err(GateError::UnknownStage("nope".into())));
    let steer = h.steer("a", "set_rate", BTreeMap::new(), "op").await;
    assert!(matches!(steer, Err(SteerError::NotLive(_))), "{steer:?}");

    let g = h
        .decide(
            "scaled",
            Decision::Proceed,
            "single node looked fine",
            Some("alice".into()),
        )
        .await
        .unwrap();
    assert_eq!(g.decided_by, DecidedBy::Operator);
    assert_eq!(g.issued_by.as_deref(), Some("alice"));
    // A retried request gets the recorded decision back.
    let again = h
        .decide(
            "scaled",
            Decision::Proceed,
            "single node looked fine",
            Some("alice".into()),
        )
        .await;
    if let Ok(again) = again {
        assert_eq!(again, g);
    }
    assert_eq!(s.task.await.unwrap(), RunOutcome::Passed);
    let events = s.log.all();
    let operator_gates = stage_event(&events, "gate")
        .into_iter()
        .filter(|e| e.str_field("decided_by") == Some("operator"))
        .count();
    assert_eq!(operator_gates, 1);
    assert_eq!(launches_in(&events, "scaled"), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn repeated_decision_is_idempotent_while_waiting() {
    // Halt twice at the gate: the second request must not add a decision.
    let s = start(&pair(), |_| {}).await;
    wait_for(&s.log, Duration::from_secs(20), |e| {
        is_transition(e, "scaled", "awaiting_approval")
    })
    .await
    .unwrap();
    let first = s
        .handle
        .decide("scaled", Decision::Halt, "no", None)
        .await
        .unwrap();
    let second = s.handle.decide("scaled", Decision::Halt, "no", None).await;
    match second {
        Ok(g) => assert_eq!(g, first),
        Err(e) => assert_eq!(e, GateError::Finished),
    }
    let outcome = s.task.await.unwrap();
    assert_eq!(outcome, RunOutcome::Aborted);
    assert_eq!(outcome.exit_code(), 3);
    let events = s.log.all();
    assert_eq!(
        stage_event(&events, "gate").len(),
        2,
        "single-node, then the operator halt"
    );
    assert_eq!(launches_in(&events, "scaled"), 0);
    assert!(events.iter().any(|e| is_transition(e, "scaled", "aborted")));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn halt_during_execution_aborts() {
    let slow = "iterations = 2000\nstep_ms = 10\nheartbeat_every = 5\n";
    let fx = workflow(PAIR_RUN, &[app("a", slow)], GATED_STAGES);
    let s = start(&fx, |o| o.auto_approve = true).await;
    wait_for(&s.log, Duration::from_secs(20), |e| {
        is_transition(e, "single-node", "running")
    })
    .await
    .unwrap();
    wait_for(&s.log, Duration::from_secs(10), |e| {
        e.kind == EventKind::Heartbeat
    })
    .await
    .unwrap();
    let g = s
        .handle
        .decide("single-node", Decision::Halt, "enough", Some("bob".into()))
        .await
        .unwrap();
    assert_eq!(g.decision, Decision::Halt);
    assert_eq!(s.task.await.unwrap(), RunOutcome::Aborted);
    let events = s.log.all();
    let exits = of_kind(&events, EventKind::Exit);
    assert_eq!(exits.len(), 1);
    assert!(exits[0].i64_field("signal").is_some());
    assert!(events
        .iter()
        .any(|e| is_transition(e, "single-node", "aborted")));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn failed_static_check_stops_before_launch() {
    let stages = GATED_STAGES.replace(
        "checks = [{ id = \"exe\", kind = \"executable-exists\", target = \"copilot-mock\" }]",
        "checks = [\n  { id = \"exe\", kind = \"executable-exists\", target = \"copilot-mock\" },\n  \
         { id = \"libsim\", kind = \"library-resolvable\", target = \"lib/libsim.so\" },\n]",
    );
    let fx = workflow(
        PAIR_RUN,
        &[app("a", SENDER), app("b", RECEIVER)],
        &format!("{PAIR_CHANNEL}{stages}"),
    );
    let (outcome, events) = run_to_end(&fx, |o| o.auto_approve = true).await;
    assert_eq!(outcome, RunOutcome::Failed);
    assert_eq!(outcome.exit_code(), 2);
    assert!(of_kind(&events, EventKind::Launched).is_empty());
    let checks = stage_event(&events, "check");
    assert_eq!(checks.len(), 2);
    let lib = checks
        .iter()
        .find(|e| e.str_field("check_id") == Some("libsim"))
        .unwrap();
    assert_eq!(lib.str_field("outcome"), Some("fail"));
    let outcome_ev = stage_event(&events, "outcome");
    assert!(outcome_ev[0]
        .str_field("reason")
        .unwrap()
        .contains("libsim"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn silent_application_halts_single_node() {
    let silent = "iterations = 500\nstep_ms = 10\nheartbeat_every = 5\n\n[misbehavior]\nsilence_after_step = 20\n";
    let fx = workflow(PAIR_RUN, &[app("a", silent)], GATED_STAGES);
    let (outcome, events) = run_to_end(&fx, |o| o.auto_approve = true).await;
    assert_eq!(outcome, RunOutcome::Failed);
    let stalled = verdicts(&events, "health")
        .into_iter()
        .find(|e| e.str_field("status") == Some("stalled"))
        .expect("stalled verdict");
    assert_eq!(stalled.str_field("subject"), Some("a"));
    let halt = stage_event(&events, "halt");
    assert_eq!(halt.len(), 1);
    assert!(halt[0].seq > stalled.seq);
    let last_beat = of_kind(&events, EventKind::Heartbeat).last().unwrap().mono;
    // Deadline is interval * grace after the last beat; one tick of quantization.
    let lag_ms = (halt[0].mono - last_beat) / 1_000_000;
    assert!(
        lag_ms <= 200 + 50 + 250,
        "halt {lag_ms} ms after the last beat"
    );
    assert!(events
        .iter()
        .any(|e| is_transition(e, "single-node", "failed")));
    assert_eq!(launches_in(&events, "scaled"), 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn killed_application_halts_promptly() {
    let long = "iterations = 1000\nstep_ms = 10\nheartbeat_every = 5\n";
    let fx = workflow(PAIR_RUN, &[app("a", long), app("b", long)], GATED_STAGES);
    let plan = FaultPlan {
        seed: 0,
        faults: vec![FaultInstance {
            target: "a".into(),
            kind: FaultKind::Kill,
            at_ms: 500,
            channel: None,
            path: None,
        }],
    };
    let (outcome, events) = run_to_end(&fx, |o| {
        o.gated = false;
        o.faults = Some(plan);
    })
    .await;
    assert_eq!(outcome, RunOutcome::Failed);
    let fault = of_kind(&events, EventKind::FaultInjected);
    assert_eq!(fault.len(), 1);
    assert_eq!(fault[0].bool_field("noop"), Some(false));
    let exit_a = of_kind(&events, EventKind::Exit)
        .into_iter()
        .find(|e| e.source == "a")
        .unwrap()
        .clone();
    assert_eq!(exit_a.i64_field("signal"), Some(9));
    let halt = stage_event(&events, "halt");
    assert_eq!(halt.len(), 1);
    let lag_ms = (halt[0].mono - exit_a.mono) / 1_000_000;
    assert!(lag_ms < 1000, "halt {lag_ms} ms after exit");
    // The surviving application is stopped by the halt.
    let exit_b = of_kind(&events, EventKind::Exit)
        .into_iter()
        .find(|e| e.source == "b")
        .unwrap()
        .clone();
    assert!(exit_b.i64_field("signal").is_some());
    assert!(launches_in(&events, UNGATED_STAGE) == 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn steering_is_acknowledged_or_times_out() {
    let listener =
        "iterations = 300\nstep_ms = 10\nheartbeat_every = 5\nsteering_handlers = [\"set_rate\"]\n";
    let deaf = "iterations = 300\nstep_ms = 10\nheartbeat_every = 5\nsteering_handlers = [\"set_rate\"]\n\n\
                [misbehavior]\nignore_steering = true\n";
    let fx = workflow(
        PAIR_RUN,
        &[app("a", listener), app("b", deaf)],
        GATED_STAGES,
    );
    let s = start(&fx, |o| o.auto_approve = true).await;
    let running = wait_for(&s.log, Duration::from_secs(20), |e| {
        is_transition(e, "scaled", "running")
    })
    .await
    .unwrap();
    for name in ["a", "b"] {
        wait_for(&s.log, Duration::from_secs(10), |e| {
            e.kind == EventKind::Heartbeat && e.source == name && e.seq > running.seq
        })
        .await
        .unwrap();
    }
    let h = &s.handle;
    let args = BTreeMap::from([("value".to_string(), "2".to_string())]);
    let ok = h.steer("a", "set_rate", args.clone(), "op").await.unwrap();
    assert!(ok.delivered);
    let bad_verb = h
        .steer("a", "explode", BTreeMap::new(), "op")
        .await
        .unwrap();
    let ignored = h.steer("b", "set_rate", args, "op").await.unwrap();
    assert_eq!(
        h.steer("zz", "set_rate", BTreeMap::new(), "op").await,
        Err(SteerError::UnknownApp("zz".into()))
    );
    assert_eq!(s.task.await.unwrap(), RunOutcome::Passed);

    let events = s.log.all();
    let status_of = |id: &str| {
        verdicts(&events, "steering")
            .into_iter()
            .find(|e| e.str_field("subject") == Some(id))
            .cloned()
    };
    let applied = status_of(&ok.command_id).expect("verdict for applied command");
    assert_eq!(applied.str_field("status"), Some("applied"));
    assert!(applied.u64_field("latency_ns").unwrap() > 0);
    let rejected = status_of(&bad_verb.command_id).unwrap();
    assert_eq!(rejected.str_field("status"), Some("rejected"));
    let timed_out = status_of(&ignored.command_id).unwrap();
    assert_eq!(timed_out.str_field("status"), Some("timed_out"));
    let issue = of_kind(&events, EventKind::SteerIssue)
        .into_iter()
        .find(|e| e.str_field("command_id") == Some(ignored.command_id.as_str()))
        .unwrap()
        .clone();
    // Reported within one tick of the deadline.
    let deadline = issue.mono + 300 * 1_000_000;
    let seen = timed_out.u64_field("at").unwrap();
    assert!(
        seen >= deadline && seen <= deadline + 50 * 1_000_000,
        "at {seen} deadline {deadline}"
    );
    assert!(of_kind(&events, EventKind::SteerAck)
        .iter()
        .all(|e| e.source != "b"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn live_stage_keeps_the_scaled_execution() {
    let stages = format!(
        "{GATED_STAGES}\n[[stages]]\nname = \"live\"\nkind = \"live\"\napproval = \"automatic\"\ntimeout_ms = 30000\n"
    );
    let fx = workflow(
        PAIR_RUN,
        &[app("a", SENDER), app("b", RECEIVER)],
        &format!("{PAIR_CHANNEL}{stages}"),
    );
    let (outcome, events) = run_to_end(&fx, |o| o.auto_approve = true).await;
    assert_eq!(outcome, RunOutcome::Passed);
    assert_eq!(launches_in(&events, "scaled"), 2);
    assert_eq!(launches_in(&events, "live"), 0);
    assert_eq!(of_kind(&events, EventKind::Launched).len(), 4);
    for stage in ["static", "single-node", "scaled", "live"] {
        assert!(
            events.iter().any(|e| is_transition(e, stage, "passed")),
            "{stage} passed"
        );
    }
    let gate = stage_event(&events, "gate")
        .into_iter()
        .find(|e| e.str_field("stage") == Some("scaled"))
        .unwrap();
    assert_eq!(gate.str_field("reason"), Some("auto-approve"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn skipped_stage_is_recorded_and_not_run() {
    let stages = GATED_STAGES.replace(
        "name = \"scaled\"\nkind = \"scaled\"",
        "name = \"scaled\"\nkind = \"scaled\"\nskip = true",
    );
    let fx = workflow(
        PAIR_RUN,
        &[app("a", SENDER), app("b", RECEIVER)],
        &format!("{PAIR_CHANNEL}{stages}"),
    );
    let (outcome, events) = run_to_end(&fx, |o| o.auto_approve = true).await;
    assert_eq!(outcome, RunOutcome::Passed);
    let skips = stage_event(&events, "skip");
    assert_eq!(skips.len(), 1);
    assert_eq!(skips[0].str_field("stage"), Some("scaled"));
    assert_eq!(launches_in(&events, "single-node"), 2);
    assert_eq!(launches_in(&events, "scaled"), 0);
    assert!(stage_event(&events, "gate")
        .iter()
        .all(|e| e.str_field("stage") != Some("scaled")));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stored_run_replays_identically() {
    let root = tempfile::tempdir().unwrap();
    let store = Arc::new(EventStore::open(root.path()).unwrap());
    let s = start_in(store.clone(), &pair(), |o| o.auto_approve = true).await;
    assert_eq!(s.task.await.unwrap(), RunOutcome::Passed);
    store.close();
    let report = replay_run(&root.path().join(&s.handle.run_id)).unwrap();
    assert!(!report.stored.is_empty());
    assert!(
        report.identical(),
        "first mismatch at {:?}",
        report.first_mismatch()
    );
    let channel = verdicts(&s.log.all(), "channel")
        .into_iter()
        .any(|e| e.str_field("subject") == Some("ab") && e.str_field("status") == Some("healthy"));
    assert!(channel, "channel ab reported healthy");
}
