//! HTTP interface for dashboards and scripts: run state, event queries, a
//! live event stream, gate decisions and steering.

// Handlers short-circuit with a ready `Response` as the error type.
#![allow(clippy::result_large_err)]

use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query as QueryParams, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::companion::ExitReport;
use crate::monitors::MONITOR_SOURCE;
use crate::stage::{Decision, Engine, GateError, StageState, SteerError};
use crate::store::{Event, EventFilter, EventKind, Query, RunLog, StoreError};

/// Keep-alive comment interval on event streams.
pub const KEEPALIVE: Duration = Duration::from_secs(5);

#[derive(Clone)]
struct ApiState {
    engine: Arc<Engine>,
    token: Option<Arc<str>>,
}

/// The full router. When `token` is set every request must carry
/// `Authorization: Bearer <token>`.
pub fn router(engine: Arc<Engine>, token: Option<String>) -> Router {
    let state = ApiState {
        engine,
        token: token.filter(|t| !t.is_empty()).map(Into::into),
    };
    Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{id}", get(run_detail))
        .route("/runs/{id}/events", get(run_events))
        .route("/runs/{id}/stream", get(run_stream))
        .route("/runs/{id}/stages/{stage}/decision", post(decide))
        .route("/runs/{id}/steer", post(steer))
        .route("/runs/{id}/steering", get(steering))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

/// Serves `router` until the task is dropped.
pub async fn serve(listener: tokio::net::TcpListener, router: Router) -> std::io::Result<()> {
    axum::serve(listener, router).await
}

async fn auth(State(st): State<ApiState>, req: Request, next: Next) -> Response {
    if let Some(token) = &st.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == &**token);
        if !ok {
            return err(StatusCode::UNAUTHORIZED, "missing or wrong bearer token");
        }
    }
    next.run(req).await
}

fn err(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

fn bad_param(name: &str, why: impl std::fmt::Display) -> Response {
    (
        StatusCode::BAD_REQUEST,
        Json(json!({ "error": format!("{name}: {why}"), "param": name })),
    )
        .into_response()
}

fn store_err(e: StoreError) -> Response {
    match e {
        StoreError::UnknownRun(id) => err(StatusCode::NOT_FOUND, format!("no run {id}")),
        StoreError::InvalidQuery(m) => err(StatusCode::BAD_REQUEST, m),
        other => err(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
    }
}

fn find_run(st: &ApiState, id: &str) -> Result<Arc<RunLog>, Response> {
    match st.engine.store().run(id) {
        Ok(Some(log)) => Ok(log),
        Ok(None) => Err(err(StatusCode::NOT_FOUND, format!("no run {id}"))),
        Err(e) => Err(store_err(e)),
    }
}

fn state_of(log: &RunLog) -> StageState {
    let events = log.all();
    StageState::from_events(log.id(), events.iter().map(|e| e.as_ref()))
}

#[derive(Serialize)]
struct RunSummary {
    run_id: String,
    current: String,
    status: String,
    outcome: Option<String>,
    live: bool,
}

async fn list_runs(State(st): State<ApiState>) -> Response {
    let mut out = Vec::new();
    for id in st.engine.store().run_ids() {
        let Ok(Some(log)) = st.engine.store().run(&id) else {
            continue;
        };
        let s = state_of(&log);
        out.push(RunSummary {
            live: st.engine.handle(&id).is_some(),
            run_id: id,
            current: s.current,
            status: s.status.as_str().into(),
            outcome: s.outcome.map(|o| o.as_str().into()),
        });
    }
    Json(out).into_response()
}

/// Latest verdict per (monitor, subject).
fn latest_verdicts(events: &[Arc<Event>]) -> Vec<Value> {
    let mut latest: BTreeMap<(String, String), Value> = BTreeMap::new();
    for e in events
        .iter()
        .filter(|e| e.kind == EventKind::Verdict && e.source == MONITOR_SOURCE)
    {
        let key = (
            e.str_field("monitor").unwrap_or_default().to_string(),
            e.str_field("subject").unwrap_or_default().to_string(),
        );
        let mut v = serde_json::to_value(&e.fields).unwrap_or(Value::Null);
        if let Value::Object(m) = &mut v {
            m.insert("seq".into(), e.seq.into());
            m.insert("ts".into(), e.ts.into());
        }
        latest.insert(key, v);
    }
    latest.into_values().collect()
}

async fn run_detail(State(st): State<ApiState>, Path(id): Path<String>) -> Response {
    let log = match find_run(&st, &id) {
        Ok(l) => l,
        Err(r) => return r,
    };
    let events = log.all();
    let state = StageState::from_events(&id, events.iter().map(|e| e.as_ref()));
    let exits: Vec<ExitReport> = events
        .iter()
        .filter_map(|e| ExitReport::from_event(e))
        .collect();
    Json(json!({
        "run_id": id,
        "live": st.engine.handle(&id).is_some(),
        "state": state,
        "reliability": state.reliability,
        "verdicts": latest_verdicts(&events),
        "exits": exits,
        "last_seq": log.last_seq(),
    }))
    .into_response()
}

fn parse_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// Builds a query from URL parameters; errors name the offending one.
fn parse_query(id: &str, p: &HashMap<String, String>) -> Result<Query, Response> {
    let mut q = Query::run(id);
    for (k, v) in p {
        match k.as_str() {
            "sources" => q.filter.sources = Some(parse_list(v).map(str::to_string).collect()),
            "kinds" => {
                let kinds: Result<_, _> = parse_list(v).map(|k| k.parse::<EventKind>()).collect();
                q.filter.kinds = Some(kinds.map_err(|e| bad_param("kinds", e))?);
            }
            "t0" => q.t0 = Some(v.parse().map_err(|e| bad_param("t0", e))?),
            "t1" => q.t1 = Some(v.parse().map_err(|e| bad_param("t1", e))?),
            "seq_after" => q.seq_after = Some(v.parse().map_err(|e| bad_param("seq_after", e))?),
            "limit" => {
                let n: usize = v.parse().map_err(|e| bad_param("limit", e))?;
                if n == 0 {
                    return Err(bad_param("limit", "must be positive"));
                }
                q.limit = Some(n);
            }
            other => return Err(bad_param(other, "unknown parameter")),
        }
    }
    if let (Some(a), Some(b)) = (q.t0, q.t1) {
        if a > b {
            return Err(bad_param("t0", "must not exceed t1"));
        }
    }
    Ok(q)
}

async fn run_events(
    State(st): State<ApiState>,
    Path(id): Path<String>,
    QueryParams(params): QueryParams<HashMap<String, String>>,
) -> Response {
    let log = match find_run(&st, &id) {
        Ok(l) => l,
        Err(r) => return r,
    };
    let q = match parse_query(&id, &params) {
        Ok(q) => q,
        Err(r) => return r,
    };
    let mut body = String::new();
    for e in log.query(&q) {
        body.push_str(&e.to_line());
        body.push('\n');
    }
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
}

fn sse_event(e: &Event) -> SseEvent {
    SseEvent::default()
        .id(e.seq.to_string())
        .event(e.kind.as_str())
        .data(e.to_line())
}

async fn run_stream(
    State(st): State<ApiState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    QueryParams(mut params): QueryParams<HashMap<String, String>>,
) -> Response {
    let log = match find_run(&st, &id) {
        Ok(l) => l,
        Err(r) => return r,
    };
    // A reconnecting browser resumes from its last event id.
    if let Some(last) = headers.get("last-event-id").and_then(|v| v.to_str().ok()) {
        params.insert("seq_after".into(), last.to_string());
    }
    params.remove("limit");
    let q = match parse_query(&id, &params) {
        Ok(q) => q,
        Err(r) => return r,
    };
    let filter: EventFilter = q.filter.clone();
    // Subscribe before the backfill so nothing falls between them.
    let sub = log.subscribe(filter, crate::store::SUBSCRIBER_BUFFER).ok();
    let cut = sub.as_ref().map_or(u64::MAX, |s| s.start_after);
    let backfill: Vec<Result<SseEvent, Infallible>> = log
        .query(&q)
        .into_iter()
        .filter(|e| e.seq <= cut)
        .map(|e| Ok(sse_event(&e)))
        .collect();
    let live = stream::unfold(sub, |sub| async move {
        let mut sub = sub?;
        match sub.next().await {
            Ok(Some(e)) => Some((Ok(sse_event(&e)), Some(sub))),
            Ok(None) => None,
            Err(o) => Some((
                Ok(SseEvent::default().event("overflow").data(o.to_string())),
                None,
            )),
        }
    });
    let body: std::pin::Pin<Box<dyn Stream<Item = Result<SseEvent, Infallible>> + Send>> =
        Box::pin(stream::iter(backfill).chain(live));
    Sse::new(body)
        .keep_alive(KeepAlive::new().interval(KEEPALIVE))
        .into_response()
}

#[derive(Deserialize)]
struct DecisionBody {
    decision: Decision,
    #[serde(default)]
    reason: String,
    #[serde(default)]
    issued_by: Option<String>,
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, Response> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        err(StatusCode::BAD_REQUEST, format!("{path}: {}", e.inner()))
    })
}

async fn decide(
    State(st): State<ApiState>,
    Path((id, stage)): Path<(String, String)>,
    body: axum::body::Bytes,
) -> Response {
    let body: DecisionBody = match parse_body(&body) {
        Ok(b) => b,
        Err(r) => return r,
    };
    let log = match find_run(&st, &id) {
        Ok(l) => l,
        Err(r) => return r,
    };
    let result = match st.engine.handle(&id) {
        Some(h) => {
            h.decide(&stage, body.decision, &body.reason, body.issued_by)
                .await
        }
        None => Err(GateError::Finished),
    };
    match result {
        Ok(g) => Json(g).into_response(),
        Err(GateError::UnknownStage(s)) => err(StatusCode::NOT_FOUND, format!("no stage {s}")),
        Err(GateError::Conflict(m)) => err(StatusCode::CONFLICT, m),
        Err(GateError::Finished) => {
            // The supervisor is gone; answer from the record.
            let state = state_of(&log);
            if !state.stages.iter().any(|s| s.name == stage) {
                return err(StatusCode::NOT_FOUND, format!("no stage {stage}"));
            }
            match state.recorded_decision(&stage, body.decision) {
                Some(g) if g.decided_by == crate::stage::DecidedBy::Operator => {
                    Json(g.clone()).into_response()
                }
                _ => err(StatusCode::CONFLICT, "run has finished"),
            }
        }
    }
}

#[derive(Deserialize)]
struct SteerBody {
    target_app: String,
    verb: String,
    #[serde(default)]
    args: BTreeMap<String, String>,
    #[serde(default)]
    issued_by: Option<String>,
}

async fn steer(
    State(st): State<ApiState>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> Response {
    let body: SteerBody = match parse_body(&body) {
        Ok(b) => b,
        Err(r) => return r,
    };
    if let Err(r) = find_run(&st, &id) {
        return r;
    }
    let Some(h) = st.engine.handle(&id) else {
        return err(StatusCode::CONFLICT, "run has finished");
    };
    let issued_by = body.issued_by.unwrap_or_else(|| "api".into());
    match h
        .steer(&body.target_app, &body.verb, body.args, &issued_by)
        .await
    {
        Ok(c) => (StatusCode::ACCEPTED, Json(c)).into_response(),
        Err(SteerError::UnknownApp(a)) => err(StatusCode::NOT_FOUND, format!("no application {a}")),
        Err(e) => err(StatusCode::CONFLICT, e.to_string()),
    }
}

/// One steering command and how it ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringRow {
    pub command_id: String,
    pub target_app: String,
    pub verb: String,
    pub args: Value,
    pub issued_by: String,
    pub issued_at: i64,
    pub delivered: bool,
    /// `pending`, `applied`, `rejected` or `timed_out`.
    pub status: String,
    pub latency_ns: Option<u64>,
    pub duplicate_acks: u64,
}

/// Steering lifecycle rows rebuilt from a run's events.
pub fn steering_rows(events: &[Arc<Event>]) -> Vec<SteeringRow> {
    let mut rows: Vec<SteeringRow> = Vec::new();
    let mut index = HashMap::new();
    for e in events {
        match e.kind {
            EventKind::SteerIssue => {
                let Some(id) = e.str_field("command_id") else {
                    continue;
                };
                index.insert(id.to_string(), rows.len());
                rows.push(SteeringRow {
                    command_id: id.into(),
                    target_app: e.str_field("target").unwrap_or_default().into(),
                    verb: e.str_field("verb").unwrap_or_default().into(),
                    args: e
                        .str_field("args")
                        .and_then(|a| serde_json::from_str(a).ok())
                        .unwrap_or(Value::Null),
                    issued_by: e.str_field("issued_by").unwrap_or_default().into(),
                    issued_at: e.ts,
                    delivered: e.bool_field("delivered").unwrap_or(false),
                    status: "pending".into(),
                    latency_ns: None,
                    duplicate_acks: 0,
                });
            }
            EventKind::Verdict if e.str_field("monitor") == Some("steering") => {
                let Some(&i) = e.str_field("subject").and_then(|s| index.get(s)) else {
                    continue;
                };
                match e.str_field("status") {
                    Some("duplicate_ack") => rows[i].duplicate_acks += 1,
                    Some(s) => {
                        rows[i].status = s.into();
                        rows[i].latency_ns = e.u64_field("latency_ns");
                    }
                    None => {}
                }
            }
            _ => {}
        }
    }
    rows
}

async fn steering(State(st): State<ApiState>, Path(id): Path<String>) -> Response {
    match find_run(&st, &id) {
        Ok(log) => Json(steering_rows(&log.all())).into_response(),
        Err(r) => r,
    }
}
