use std::hint::black_box;
use std::sync::Arc;

use copilot_core::store::EventStore;
use copilot_core::tracepoint::{decode, encode, CollectorCore, Tracepoint, TracepointEvent};
use criterion::{criterion_group, criterion_main, Criterion, Throughput};

fn io_stat(seq: u64) -> TracepointEvent {
    TracepointEvent {
        ts_wall: 1_700_000_000_000 + seq as i64,
        seq,
        run_id: "bench".into(),
        app_name: "sim".into(),
        payload: Tracepoint::IoStat {
            channel: "halo".into(),
            bytes: 65_536,
            latency_us: Some(120),
        },
        dropped: 0,
    }
}

fn codec(c: &mut Criterion) {
    let ev = io_stat(7);
    let bytes = encode(&ev);
    let mut g = c.benchmark_group("codec");
    g.throughput(Throughput::Bytes(bytes.len() as u64));
    g.bench_function("encode", |b| b.iter(|| black_box(encode(black_box(&ev)))));
    g.bench_function("decode", |b| {
        b.iter(|| black_box(decode(black_box(&bytes)).unwrap()))
    });
    g.finish();
}

fn ingest(c: &mut Criterion) {
    let store = Arc::new(EventStore::in_memory());
    store.create_run("bench", "").unwrap();
    let core = CollectorCore::new(store, "bench").unwrap();
    let mut seq = 0;
    c.bench_function("collector_ingest", |b| {
        b.iter(|| {
            seq += 1;
            black_box(
                core.ingest(Some(("bench", "sim")), io_stat(seq), "socket")
                    .unwrap(),
            )
        })
    });
}

criterion_group!(benches, codec, ingest);
criterion_main!(benches);
