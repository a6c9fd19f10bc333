//! Line-oriented ingest endpoint for companions running in their own
//! process. Each line is a JSON object `{"run": <id>, "draft": <EventDraft>}`;
//! the endpoint answers every line with `ok <seq>` or `err <reason>`.

use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use std::io::BufReader;

use tokio::io::{AsyncBufReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;

use super::{EventDraft, EventSink, EventStore, StoreError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestRecord {
    pub run: String,
    pub draft: EventDraft,
}

pub struct IngestServer {
    pub addr: SocketAddr,
    task: JoinHandle<()>,
}

impl IngestServer {
    pub async fn bind(store: Arc<EventStore>, addr: &str) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let task = tokio::spawn(async move {
            while let Ok((stream, _)) = listener.accept().await {
                tokio::spawn(serve_conn(store.clone(), stream));
            }
        });
        Ok(Self { addr, task })
    }

    pub fn shutdown(self) {
        self.task.abort();
    }
}

// Remote companions may be the first writers of a run.
fn append_or_create(store: &EventStore, rec: IngestRecord) -> Result<u64, StoreError> {
    if store.run(&rec.run)?.is_none() {
        match store.create_run(&rec.run, "") {
            Ok(_) | Err(StoreError::RunExists(_)) => {}
            Err(e) => return Err(e),
        }
    }
    store.append(&rec.run, rec.draft)
}

async fn serve_conn(store: Arc<EventStore>, stream: TcpStream) {
    let (rd, mut wr) = stream.into_split();
    let mut lines = tokio::io::BufReader::new(rd).lines();
    while let Ok(Some(line)) = lines.next_line().await {
        let reply = match serde_json::from_str::<IngestRecord>(&line) {
            Ok(rec) => match append_or_create(&store, rec) {
                Ok(seq) => format!("ok {seq}\n"),
                Err(e) => format!("err {e}\n"),
            },
            Err(e) => format!("err {e}\n"),
        };
        if wr.write_all(reply.as_bytes()).await.is_err() {
            break;
        }
    }
}

/// Client side of the ingest endpoint; appends are acknowledged one by one
/// so a returned `Ok` means the event is in the remote log.
pub struct RemoteSink {
    run: String,
    conn: Mutex<(BufReader<std::net::TcpStream>, std::net::TcpStream)>,
}

impl RemoteSink {
    pub fn connect(addr: &str, run: &str) -> std::io::Result<Self> {
        let stream = std::net::TcpStream::connect(addr)?;
        let _ = stream.set_nodelay(true);
        let rd = BufReader::new(stream.try_clone()?);
        Ok(Self {
            run: run.to_string(),
            conn: Mutex::new((rd, stream)),
        })
    }

    fn roundtrip(&self, draft: EventDraft) -> std::io::Result<Result<u64, String>> {
        let mut line = serde_json::to_string(&IngestRecord {
            run: self.run.clone(),
            draft,
        })?;
        line.push('\n');
        let mut conn = self.conn.lock().unwrap();
        let (rd, wr) = &mut *conn;
        wr.write_all(line.as_bytes())?;
        let mut reply = String::new();
        if rd.read_line(&mut reply)? == 0 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "ingest closed",
            ));
        }
        let reply = reply.trim_end();
        Ok(match reply.strip_prefix("ok ") {
            Some(seq) => seq.parse().map_err(|_| format!("bad reply `{reply}`")),
            None => Err(reply.trim_start_matches("err ").to_string()),
        })
    }
}

impl EventSink for RemoteSink {
    fn append(&self, draft: EventDraft) -> Result<u64, StoreError> {
        match self.roundtrip(draft) {
            Ok(Ok(seq)) => Ok(seq),
            Ok(Err(reason)) => Err(StoreError::InvalidEvent(reason)),
            Err(e) => Err(StoreError::Io(e.to_string())),
        }
    }
}
