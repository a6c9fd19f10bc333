//! In-application monitoring points: wire records, the collector that
//! ingests them into the store, and the emitter linked into applications.
//!
//! Wire format: one compact JSON object per line, keys sorted, UTF-8.
//! Common keys are `ts` (UTC ms), `seq` (per-source, strictly increasing),
//! `run`, `app`, `kind` and an optional `dropped` counter; the remaining keys
//! depend on `kind`. The same record is accepted inside a log line when
//! prefixed with `@TP `.

mod collector;
mod emitter;
mod record;

pub use collector::{Acceptance, Collector, CollectorCore, CollectorStats};
pub use emitter::{Emitter, EmitterConfig};
pub use record::{
    decode, decode_line, encode, AckStatus, DecodeError, Downlink, Hello, Tracepoint,
    TracepointEvent, LOG_PREFIX,
};

#[cfg(test)]
mod tests {
    use std::sync::Arc;
    use std::time::Duration;

    use tokio::io::AsyncWriteExt;

    use super::*;
    use crate::store::{EventKind, EventStore, Query};

    fn hb(app: &str, seq: u64) -> TracepointEvent {
        TracepointEvent {
            ts_wall: 0,
            seq,
            run_id: "r".into(),
            app_name: app.into(),
            payload: Tracepoint::Heartbeat { iteration: seq },
            dropped: 0,
        }
    }

    fn core() -> Arc<CollectorCore> {
        let store = Arc::new(EventStore::in_memory());
        store.create_run("r", "").unwrap();
        CollectorCore::new(store, "r").unwrap()
    }

    #[test]
    fn lower_seq_is_flagged_out_of_order() {
        let c = core();
        assert!(matches!(
            c.ingest(None, hb("a", 5), "test").unwrap(),
            Acceptance::Stored {
                out_of_order: false,
                ..
            }
        ));
        assert!(matches!(
            c.ingest(None, hb("a", 4), "test").unwrap(),
            Acceptance::Stored {
                out_of_order: true,
                ..
            }
        ));
        // 6 still follows 5
        assert!(matches!(
            c.ingest(None, hb("a", 6), "test").unwrap(),
            Acceptance::Stored {
                out_of_order: false,
                ..
            }
        ));
        assert_eq!(
            c.ingest(None, hb("a", 6), "test").unwrap(),
            Acceptance::Duplicate
        );
        let stored = c.store().unwrap().query(&Query::run("r")).unwrap();
        assert_eq!(stored.len(), 3);
        assert_eq!(stored[1].bool_field("out_of_order"), Some(true));
    }

    #[test]
    fn mismatched_attribution_is_suspect() {
        let c = core();
        let got = c.ingest(Some(("r", "b")), hb("a", 1), "test").unwrap();
        assert!(matches!(got, Acceptance::Stored { suspect: true, .. }));
        let got = c.ingest(Some(("r", "c")), hb("c", 1), "test").unwrap();
        assert!(matches!(got, Acceptance::Stored { suspect: false, .. }));
    }

    #[test]
    fn rebuilt_core_remembers_accepted_seqs() {
        let c = core();
        for s in 1..=3 {
            c.ingest(None, hb("a", s), "test").unwrap();
        }
        let again = CollectorCore::new(c.store().unwrap().clone(), "r").unwrap();
        assert_eq!(
            again.ingest(None, hb("a", 3), "test").unwrap(),
            Acceptance::Duplicate
        );
        assert!(matches!(
            again.ingest(None, hb("a", 4), "test").unwrap(),
            Acceptance::Stored {
                out_of_order: false,
                ..
            }
        ));
    }

    #[tokio::test]
    async fn garbage_lines_do_not_poison_the_stream() {
        let c = core();
        let collector = Collector::bind(c.clone(), "127.0.0.1:0").await.unwrap();
        let mut s = tokio::net::TcpStream::connect(collector.addr)
            .await
            .unwrap();
        let hello = serde_json::to_string(&Hello::new("r", "a")).unwrap() + "\n";
        s.write_all(hello.as_bytes()).await.unwrap();
        let mut payload = Vec::new();
        for i in 1..=10_000u64 {
            payload.extend(encode(&hb("a", i)));
            if i % 100 == 0 {
                payload.extend_from_slice(b"{\"kind\":\"bogus\" this is not json\n");
            }
        }
        s.write_all(&payload).await.unwrap();
        s.shutdown().await.unwrap();
        let deadline = tokio::time::Instant::now() + Duration::from_secs(20);
        while c.stats().accepted + c.stats().rejected < 10_100 {
            assert!(tokio::time::Instant::now() < deadline, "{:?}", c.stats());
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
        assert_eq!(c.stats().accepted, 10_000);
        assert_eq!(c.stats().rejected, 100);
        let beats = c
            .store()
            .unwrap()
            .query(&Query::run("r").kinds([EventKind::Heartbeat]))
            .unwrap();
        assert_eq!(beats.len(), 10_000);
        assert!(beats
            .windows(2)
            .all(|w| w[0].u64_field("tp_seq").unwrap() < w[1].u64_field("tp_seq").unwrap()));
        collector.shutdown().await;
    }
}
