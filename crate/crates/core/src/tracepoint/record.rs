use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Prefix marking a tracepoint record embedded in a log line.
pub const LOG_PREFIX: &str = "@TP ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckStatus {
    Applied,
    Rejected,
}

impl AckStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            AckStatus::Applied => "applied",
            AckStatus::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tracepoint {
    Heartbeat {
        iteration: u64,
    },
    SteerAck {
        command_id: String,
        status: AckStatus,
    },
    IoStat {
        channel: String,
        bytes: u64,
        latency_us: Option<u64>,
    },
    Progress {
        phase: String,
    },
}

impl Tracepoint {
    pub fn kind(&self) -> &'static str {
        match self {
            Tracepoint::Heartbeat { .. } => "heartbeat",
            Tracepoint::SteerAck { .. } => "steer_ack",
            Tracepoint::IoStat { .. } => "io_stat",
            Tracepoint::Progress { .. } => "progress",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TracepointEvent {
    pub ts_wall: i64,
    pub seq: u64,
    pub run_id: String,
    pub app_name: String,
    pub payload: Tracepoint,
    /// Events the emitter dropped locally before this one; 0 is omitted on
    /// the wire.
    pub dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("truncated record")]
    Truncated,
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("unknown kind `{0}`")]
    UnknownKind(String),
    #[error("missing required field `{0}`")]
    MissingField(&'static str),
    #[error("invalid value for field `{0}`")]
    InvalidField(&'static str),
}

impl DecodeError {
    pub fn reason(&self) -> &'static str {
        match self {
            DecodeError::Truncated => "truncated",
            DecodeError::Malformed(_) => "malformed",
            DecodeError::UnknownKind(_) => "unknown-kind",
            DecodeError::MissingField(_) => "missing-field",
            DecodeError::InvalidField(_) => "invalid-field",
        }
    }
}

/// Encodes one record: compact JSON with lexicographically sorted keys,
/// terminated by a single newline.
pub fn encode(event: &TracepointEvent) -> Vec<u8> {
    let mut m = BTreeMap::<&str, Value>::new();
    m.insert("ts", event.ts_wall.into());
    m.insert("seq", event.seq.into());
    m.insert("run", event.run_id.clone().into());
    m.insert("app", event.app_name.clone().into());
    m.insert("kind", event.payload.kind().into());
    if event.dropped > 0 {
        m.insert("dropped", event.dropped.into());
    }
    match &event.payload {
        Tracepoint::Heartbeat { iteration } => {
            m.insert("iteration", (*iteration).into());
        }
        Tracepoint::SteerAck { command_id, status } => {
            m.insert("command_id", command_id.clone().into());
            m.insert("status", status.as_str().into());
        }
        Tracepoint::IoStat {
            channel,
            bytes,
            latency_us,
        } => {
            m.insert("channel", channel.clone().into());
            m.insert("bytes", (*bytes).into());
            if let Some(l) = latency_us {
                m.insert("latency_us", (*l).into());
            }
        }
        Tracepoint::Progress { phase } => {
            m.insert("phase", phase.clone().into());
        }
    }
    let mut out = serde_json::to_vec(&m).expect("records always serialize");
    out.push(b'\n');
    out
}

/// Decodes a newline-terminated record.
pub fn decode(bytes: &[u8]) -> Result<TracepointEvent, DecodeError> {
    let Some(body) = bytes.strip_suffix(b"\n") else {
        return Err(DecodeError::Truncated);
    };
    let body = body.strip_suffix(b"\r").unwrap_or(body);
    decode_body(body)
}

/// Decodes a record whose line terminator has already been removed.
pub fn decode_line(line: &str) -> Result<TracepointEvent, DecodeError> {
    decode_body(line.trim_end_matches(['\r', '\n']).as_bytes())
}

fn decode_body(body: &[u8]) -> Result<TracepointEvent, DecodeError> {
    let value: Value = serde_json::from_slice(body).map_err(|e| {
        if e.is_eof() {
            DecodeError::Truncated
        } else {
            DecodeError::Malformed(e.to_string())
        }
    })?;
    let Value::Object(m) = value else {
        return Err(DecodeError::Malformed("record is not an object".into()));
    };
    let kind = req_str(&m, "kind")?;
    let payload = match kind.as_str() {
        "heartbeat" => Tracepoint::Heartbeat {
            iteration: req_u64(&m, "iteration")?,
        },
        "steer_ack" => Tracepoint::SteerAck {
            command_id: req_str(&m, "command_id")?,
            status: match req_str(&m, "status")?.as_str() {
                "applied" => AckStatus::Applied,
                "rejected" => AckStatus::Rejected,
                _ => return Err(DecodeError::InvalidField("status")),
            },
        },
        "io_stat" => Tracepoint::IoStat {
            channel: req_str(&m, "channel")?,
            bytes: req_u64(&m, "bytes")?,
            latency_us: opt_u64(&m, "latency_us")?,
        },
        "progress" => Tracepoint::Progress {
            phase: req_str(&m, "phase")?,
        },
        _ => return Err(DecodeError::UnknownKind(kind)),
    };
    let ts_wall = match m.get("ts") {
        None => return Err(DecodeError::MissingField("ts")),
        Some(v) => v.as_i64().ok_or(DecodeError::InvalidField("ts"))?,
    };
    Ok(TracepointEvent {
        ts_wall,
        seq: req_u64(&m, "seq")?,
        run_id: req_str(&m, "run")?,
        app_name: req_str(&m, "app")?,
        payload,
        dropped: opt_u64(&m, "dropped")?.unwrap_or(0),
    })
}

fn req_str(m: &Map<String, Value>, key: &'static str) -> Result<String, DecodeError> {
    match m.get(key) {
        None => Err(DecodeError::MissingField(key)),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(DecodeError::InvalidField(key)),
    }
}

fn req_u64(m: &Map<String, Value>, key: &'static str) -> Result<u64, DecodeError> {
    opt_u64(m, key)?.ok_or(DecodeError::MissingField(key))
}

fn opt_u64(m: &Map<String, Value>, key: &'static str) -> Result<Option<u64>, DecodeError> {
    match m.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v.as_u64().map(Some).ok_or(DecodeError::InvalidField(key)),
    }
}

/// First line an emitter sends on a new connection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub hello: String,
    pub run: String,
    pub app: String,
}

impl Hello {
    pub fn new(run: &str, app: &str) -> Self {
        Self {
            hello: "copilot-trace/1".into(),
            run: run.into(),
            app: app.into(),
        }
    }
}

/// Messages from the collector down to an instrumented application.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Downlink {
    Steer {
        command_id: String,
        verb: String,
        #[serde(default)]
        args: BTreeMap<String, String>,
    },
    /// Chaos control: stop emitting heartbeats while continuing to run.
    HeartbeatSilence,
    /// Chaos control: stop sending on one channel.
    ChannelSilence { channel: String },
    /// Chaos control: exit immediately with the given code.
    Exit { code: i32 },
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hb(seq: u64, iteration: u64) -> TracepointEvent {
        TracepointEvent {
            ts_wall: 1_700_000_000_000,
            seq,
            run_id: "r1".into(),
            app_name: "nest".into(),
            payload: Tracepoint::Heartbeat { iteration },
            dropped: 0,
        }
    }

    #[test]
    fn heartbeat_round_trips() {
        let e = hb(1, 0);
        let bytes = encode(&e);
        let text = std::str::from_utf8(&bytes).unwrap();
        assert_eq!(
            text,
            "{\"app\":\"nest\",\"iteration\":0,\"kind\":\"heartbeat\",\"run\":\"r1\",\"seq\":1,\"ts\":1700000000000}\n"
        );
        assert_eq!(decode(&bytes).unwrap(), e);
    }

    #[test]
    fn io_stat_preserves_fields() {
        let e = TracepointEvent {
            payload: Tracepoint::IoStat {
                channel: "B".into(),
                bytes: 1_048_576,
                latency_us: None,
            },
            ..hb(2, 0)
        };
        let back = decode(&encode(&e)).unwrap();
        assert_eq!(back.payload, e.payload);
    }

    #[test]
    fn distinct_reject_reasons() {
        assert_eq!(
            decode(b"{\"kind\":\"heartbeat\"").unwrap_err(),
            DecodeError::Truncated
        );
        assert_eq!(
            decode(b"{\"kind\":\"heartbeat\",\"iteration\":1}").unwrap_err(),
            DecodeError::Truncated
        );
        assert_eq!(
            decode_line("{\"kind\":\"heartbeat\",\"iteration\":1").unwrap_err(),
            DecodeError::Truncated
        );
        let bogus = b"{\"app\":\"a\",\"kind\":\"bogus\",\"run\":\"r\",\"seq\":1,\"ts\":0}\n";
        assert_eq!(
            decode(bogus).unwrap_err(),
            DecodeError::UnknownKind("bogus".into())
        );
        let missing = b"{\"app\":\"a\",\"kind\":\"heartbeat\",\"run\":\"r\",\"seq\":1,\"ts\":0}\n";
        assert_eq!(
            decode(missing).unwrap_err(),
            DecodeError::MissingField("iteration")
        );
        assert!(matches!(
            decode(b"garbage\n"),
            Err(DecodeError::Malformed(_))
        ));
        assert!(matches!(decode(b"[1,2]\n"), Err(DecodeError::Malformed(_))));
    }

    #[test]
    fn downlink_wire_shape() {
        let d = Downlink::Steer {
            command_id: "c1".into(),
            verb: "set_rate".into(),
            args: [("value".to_string(), "2".to_string())].into(),
        };
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(
            s,
            r#"{"type":"steer","command_id":"c1","verb":"set_rate","args":{"value":"2"}}"#
        );
        assert_eq!(serde_json::from_str::<Downlink>(&s).unwrap(), d);
    }

    fn arb_payload() -> impl Strategy<Value = Tracepoint> {
        prop_oneof![
            any::<u64>().prop_map(|iteration| Tracepoint::Heartbeat { iteration }),
            ("[a-z0-9-]{1,12}", any::<bool>()).prop_map(|(command_id, ok)| Tracepoint::SteerAck {
                command_id,
                status: if ok {
                    AckStatus::Applied
                } else {
                    AckStatus::Rejected
                },
            }),
            (
                "\\PC{1,8}",
                any::<u64>(),
                proptest::option::of(any::<u64>())
            )
                .prop_map(|(channel, bytes, latency_us)| Tracepoint::IoStat {
                    channel,
                    bytes,
                    latency_us
                }),
            "\\PC{0,16}".prop_map(|phase| Tracepoint::Progress { phase }),
        ]
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(
            ts_wall in any::<i64>(),
            seq in any::<u64>(),
            run_id in "\\PC{1,12}",
            app_name in "\\PC{1,12}",
            payload in arb_payload(),
            dropped in 0u64..5,
        ) {
            let e = TracepointEvent { ts_wall, seq, run_id, app_name, payload, dropped };
            prop_assert_eq!(decode(&encode(&e)).unwrap(), e);
        }
    }
}
