mod common;

use std::sync::Arc;
use std::time::Duration;

use common::*;
use copilot_core::api;
use copilot_core::stage::{Engine, RunOutcome};
use copilot_core::store::EventKind;
use reqwest::StatusCode;
use serde_json::{json, Value};

const RUN: &str = "tick_ms = 50\ngrace_multiplier = 2\nsteer_timeout_ms = 300";
const A: &str =
    "iterations = 40\nstep_ms = 10\nheartbeat_every = 5\nsteering_handlers = [\"set_rate\"]\n\n\
[[channels]]\nname = \"ab\"\nbytes_per_step = 512\ndirection = \"send\"\n";
const B: &str = "iterations = 40\nstep_ms = 10\nheartbeat_every = 5\n\n\
[[channels]]\nname = \"ab\"\ndirection = \"recv\"\n";
const CHANNEL: &str = "[[channels]]\nname = \"ab\"\nfrom_app = \"a\"\nto_app = \"b\"\nkind = \"bulk_data\"\nstall_timeout_ms = 500\n";

fn pair(a: &str) -> copilot_core::workloads::Fixture {
    workflow(
        RUN,
        &[app("a", a), app("b", B)],
        &format!("{CHANNEL}{GATED_STAGES}"),
    )
}

async fn serve(engine: Arc<Engine>, token: Option<&str>) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(api::serve(
        listener,
        api::router(engine, token.map(str::to_string)),
    ));
    base
}

async fn get_json(c: &reqwest::Client, url: &str) -> (StatusCode, Value) {
    let r = c.get(url).send().await.unwrap();
    let status = r.status();
    (status, r.json().await.unwrap_or(Value::Null))
}

async fn post_json(c: &reqwest::Client, url: &str, body: Value) -> (StatusCode, Value) {
    let r = c.post(url).json(&body).send().await.unwrap();
    let status = r.status();
    (status, r.json().await.unwrap_or(Value::Null))
}

async fn ndjson(c: &reqwest::Client, url: &str) -> (StatusCode, Vec<Value>) {
    let r = c.get(url).send().await.unwrap();
    let status = r.status();
    let text = r.text().await.unwrap();
    if status != StatusCode::OK {
        return (status, vec![serde_json::from_str(&text).unwrap()]);
    }
    (
        status,
        text.lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect(),
    )
}

/// Reads an SSE body until `n` events with ids have arrived.
async fn sse_ids(resp: reqwest::Response, n: usize) -> Vec<(u64, String)> {
    let mut resp = resp;
    let mut buf = String::new();
    let mut out = Vec::new();
    let deadline = tokio::time::Instant::now() + Duration::from_secs(20);
    while out.len() < n {
        let chunk = tokio::time::timeout_at(deadline, resp.chunk())
            .await
            .expect("stream stalled")
            .unwrap()
            .expect("stream ended early");
        buf.push_str(&String::from_utf8_lossy(&chunk));
        while let Some(end) = buf.find("\n\n") {
            let frame: String = buf.drain(..end + 2).collect();
            let mut id = None;
            let mut event = String::new();
            for line in frame.lines() {
                if let Some(v) = line.strip_prefix("id:") {
                    id = v.trim().parse().ok();
                } else if let Some(v) = line.strip_prefix("event:") {
                    event = v.trim().to_string();
                }
            }
            if let Some(id) = id {
                out.push((id, event));
            }
        }
    }
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn gate_and_query_endpoints() {
    let s = start(&pair(A), |_| {}).await;
    let base = serve(s.engine.clone(), None).await;
    let c = reqwest::Client::new();
    let id = s.handle.run_id.clone();
    let run = format!("{base}/runs/{id}");

    let stream = c
        .get(format!("{run}/stream?kinds=stage"))
        .send()
        .await
        .unwrap();
    assert_eq!(stream.status(), StatusCode::OK);
    assert!(stream.headers()["content-type"]
        .to_str()
        .unwrap()
        .starts_with("text/event-stream"));

    wait_for(&s.log, Duration::from_secs(20), |e| {
        is_transition(e, "scaled", "awaiting_approval")
    })
    .await
    .unwrap();
    let (st, runs) = get_json(&c, &format!("{base}/runs")).await;
    assert_eq!(st, StatusCode::OK);
    let mine = runs
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["run_id"] == id.as_str())
        .unwrap();
    assert_eq!(mine["live"], true);
    assert_eq!(mine["status"], "awaiting_approval");
    assert_eq!(mine["current"], "scaled");

    let (st, detail) = get_json(&c, &run).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(detail["state"]["status"], "awaiting_approval");
    assert_eq!(detail["state"]["stages"].as_array().unwrap().len(), 3);
    assert!(detail["reliability"]["system_failure_probability"].is_number());

    let (st, body) = post_json(
        &c,
        &format!("{run}/stages/single-node/decision"),
        json!({"decision": "proceed"}),
    )
    .await;
    assert_eq!(st, StatusCode::CONFLICT, "{body}");
    let (st, _) = post_json(
        &c,
        &format!("{run}/stages/nope/decision"),
        json!({"decision": "proceed"}),
    )
    .await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, body) = post_json(
        &c,
        &format!("{run}/stages/scaled/decision"),
        json!({"decision": "maybe"}),
    )
    .await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert!(
        body["error"].as_str().unwrap().starts_with("decision"),
        "{body}"
    );
    let (st, _) = post_json(
        &c,
        &format!("{run}/steer"),
        json!({"target_app": "a", "verb": "set_rate"}),
    )
    .await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, _) = post_json(
        &c,
        &format!("{run}/steer"),
        json!({"target_app": "zz", "verb": "set_rate"}),
    )
    .await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let proceed = json!({"decision": "proceed", "reason": "ok", "issued_by": "carol"});
    let (st, g) = post_json(
        &c,
        &format!("{run}/stages/scaled/decision"),
        proceed.clone(),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{g}");
    assert_eq!(g["decided_by"], "operator");
    assert_eq!(g["issued_by"], "carol");

    // Everything the stream carried so far is a stage event, in seq order.
    let frames = sse_ids(stream, 8).await;
    assert!(frames.iter().all(|(_, ev)| ev == "stage"));
    assert!(frames.windows(2).all(|w| w[0].0 < w[1].0));

    assert_eq!(s.task.await.unwrap(), RunOutcome::Passed);
    // After the run ends the recorded decision is still returned for a retry.
    let (st, again) = post_json(&c, &format!("{run}/stages/scaled/decision"), proceed).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(again, g);
    let (st, _) = post_json(
        &c,
        &format!("{run}/stages/scaled/decision"),
        json!({"decision": "halt"}),
    )
    .await;
    assert_eq!(st, StatusCode::CONFLICT);

    let (_, detail) = get_json(&c, &run).await;
    assert_eq!(detail["live"], false);
    assert_eq!(detail["state"]["outcome"], "passed");
    assert_eq!(detail["exits"].as_array().unwrap().len(), 4);
    assert!(detail["verdicts"]
        .as_array()
        .unwrap()
        .iter()
        .any(|v| v["monitor"] == "channel"));
    let last_seq = detail["last_seq"].as_u64().unwrap();
    assert_eq!(last_seq, s.log.last_seq());

    let (st, exits) = ndjson(&c, &format!("{run}/events?kinds=exit")).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(exits.len(), 4);
    let (_, page) = ndjson(&c, &format!("{run}/events?seq_after=10&limit=3")).await;
    let seqs: Vec<u64> = page.iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, vec![11, 12, 13]);
    let (_, from_a) = ndjson(&c, &format!("{run}/events?sources=a&kinds=launched,exit")).await;
    assert_eq!(from_a.len(), 4);
    assert!(from_a.iter().all(|e| e["source"] == "a"));
    let all = s.log.all();
    let mid = all[all.len() / 2].ts;
    let (_, window) = ndjson(&c, &format!("{run}/events?t0={mid}&t1={mid}")).await;
    let want = all.iter().filter(|e| e.ts == mid).count();
    assert_eq!(window.len(), want);

    for (query, param) in [
        ("kinds=bogus", "kinds"),
        ("limit=0", "limit"),
        ("seq_after=x", "seq_after"),
        ("t0=5&t1=1", "t0"),
        ("colour=red", "colour"),
    ] {
        let (st, body) = ndjson(&c, &format!("{run}/events?{query}")).await;
        assert_eq!(st, StatusCode::BAD_REQUEST, "{query}");
        assert_eq!(body[0]["param"], param, "{query}");
    }
    let (st, _) = get_json(&c, &format!("{base}/runs/nope")).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = ndjson(&c, &format!("{base}/runs/nope/events")).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    // A reconnect resumes after the given id.
    let resumed = c
        .get(format!("{run}/stream"))
        .header("Last-Event-ID", (last_seq - 2).to_string())
        .send()
        .await
        .unwrap();
    let ids: Vec<u64> = sse_ids(resumed, 2)
        .await
        .into_iter()
        .map(|(i, _)| i)
        .collect();
    assert_eq!(ids, vec![last_seq - 1, last_seq]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn steering_endpoints() {
    let long_a = A.replace("iterations = 40", "iterations = 150");
    let long_b = B.replace("iterations = 40", "iterations = 150");
    let stages = GATED_STAGES.replace("approval = \"manual\"", "approval = \"automatic\"");
    let fx = workflow(
        RUN,
        &[app("a", &long_a), app("b", &long_b)],
        &format!("{CHANNEL}{stages}"),
    );
    let s = start(&fx, |_| {}).await;
    let base = serve(s.engine.clone(), None).await;
    let c = reqwest::Client::new();
    let run = format!("{base}/runs/{}", s.handle.run_id);
    let running = wait_for(&s.log, Duration::from_secs(20), |e| {
        is_transition(e, "scaled", "running")
    })
    .await
    .unwrap();
    wait_for(&s.log, Duration::from_secs(10), |e| {
        e.kind == EventKind::Heartbeat && e.source == "a" && e.seq > running.seq
    })
    .await
    .unwrap();

    let (st, cmd) = post_json(
        &c,
        &format!("{run}/steer"),
        json!({"target_app": "a", "verb": "set_rate", "args": {"value": "3"}, "issued_by": "dave"}),
    )
    .await;
    assert_eq!(st, StatusCode::ACCEPTED, "{cmd}");
    assert_eq!(cmd["target_app"], "a");
    assert_eq!(cmd["delivered"], true);
    let (st, body) = post_json(&c, &format!("{run}/steer"), json!({"target_app": "a"})).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("verb"), "{body}");

    let id = cmd["command_id"].as_str().unwrap().to_string();
    let mut row = Value::Null;
    for _ in 0..100 {
        let (_, rows) = get_json(&c, &format!("{run}/steering")).await;
        row = rows
            .as_array()
            .unwrap()
            .iter()
            .find(|r| r["command_id"] == id.as_str())
            .cloned()
            .unwrap();
        if row["status"] != "pending" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert_eq!(row["status"], "applied", "{row}");
    assert_eq!(row["issued_by"], "dave");
    assert_eq!(row["args"]["value"], "3");
    assert!(row["latency_ns"].as_u64().unwrap() > 0);
    assert_eq!(row["duplicate_acks"], 0);
    assert_eq!(s.task.await.unwrap(), RunOutcome::Passed);
    let (st, _) = post_json(
        &c,
        &format!("{run}/steer"),
        json!({"target_app": "a", "verb": "set_rate"}),
    )
    .await;
    assert_eq!(st, StatusCode::CONFLICT);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bearer_token_is_enforced() {
    let engine = Engine::new(Arc::new(copilot_core::store::EventStore::in_memory()));
    let base = serve(engine, Some("s3cret")).await;
    let c = reqwest::Client::new();
    let url = format!("{base}/runs");
    assert_eq!(
        c.get(&url).send().await.unwrap().status(),
        StatusCode::UNAUTHORIZED
    );
    let wrong = c.get(&url).bearer_auth("guess").send().await.unwrap();
    assert_eq!(wrong.status(), StatusCode::UNAUTHORIZED);
    let ok = c.get(&url).bearer_auth("s3cret").send().await.unwrap();
    assert_eq!(ok.status(), StatusCode::OK);
    assert_eq!(ok.json::<Value>().await.unwrap(), json!([]));
}
