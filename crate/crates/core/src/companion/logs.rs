//! Log streams: declared log files plus the child's stdout and stderr.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use regex::Regex;
use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncReadExt, AsyncSeekExt, BufReader};
use tokio::sync::watch;

use crate::store::{EventDraft, EventKind, EventSink, Fields};
use crate::tracepoint::{decode_line, CollectorCore, LOG_PREFIX};

const RESERVED: [&str; 5] = ["stream", "line", "raw", "parsed", "path"];

/// Turns raw lines into log events and relays embedded tracepoints.
pub struct LineHandler {
    pub app: String,
    pub pattern: Option<Regex>,
    pub sink: Arc<dyn EventSink>,
    pub relay: Option<Arc<CollectorCore>>,
}

impl LineHandler {
    /// Builds the event for one line of `stream` (a file path, `stdout` or
    /// `stderr`). Named captures become string fields.
    pub fn draft(&self, stream: &str, line_no: u64, raw: &str) -> EventDraft {
        let mut d = EventDraft::new(&self.app, EventKind::Log)
            .with("stream", stream)
            .with("line", line_no)
            .with("raw", raw);
        let caps = self.pattern.as_ref().and_then(|p| p.captures(raw));
        match caps {
            Some(caps) => {
                let mut fields = Fields::new();
                for name in self.pattern.as_ref().unwrap().capture_names().flatten() {
                    if let Some(m) = caps.name(name) {
                        if !RESERVED.contains(&name) {
                            fields.insert(name.to_string(), m.as_str().into());
                        }
                    }
                }
                for (k, v) in fields {
                    d.set(k, v);
                }
                d.set("parsed", true);
            }
            None => d.set("parsed", false),
        }
        d
    }

    pub fn handle(&self, stream: &str, line_no: u64, bytes: &[u8]) {
        let text = String::from_utf8_lossy(bytes);
        let text = text.strip_suffix('\n').unwrap_or(&text);
        let text = text.strip_suffix('\r').unwrap_or(text);
        if let Some(record) = text.strip_prefix(LOG_PREFIX) {
            if let Some(core) = &self.relay {
                match decode_line(record) {
                    Ok(ev) => {
                        let _ = core.ingest(None, ev, "log");
                    }
                    Err(e) => core.note_reject(&e, "log"),
                }
                return;
            }
        }
        let _ = self.sink.append(self.draft(stream, line_no, text));
    }
}

/// Reads a child pipe to EOF.
pub async fn pump<R: AsyncRead + Unpin>(
    reader: R,
    stream: &'static str,
    handler: Arc<LineHandler>,
) {
    let mut rd = BufReader::new(reader);
    let mut buf = Vec::new();
    let mut n = 0;
    loop {
        buf.clear();
        match rd.read_until(b'\n', &mut buf).await {
            Ok(0) | Err(_) => break,
            Ok(_) => {
                n += 1;
                handler.handle(stream, n, &buf);
            }
        }
    }
}

/// Follows one log file from its start. The file may appear after the
/// application starts. When `stop` flips, whatever is left in the file is
/// drained (a final line without newline included) and tailing ends.
pub async fn tail_file(
    path: PathBuf,
    poll: Duration,
    handler: Arc<LineHandler>,
    mut stop: watch::Receiver<bool>,
) {
    let name = path.display().to_string();
    // Content present before launch belongs to an earlier process.
    let mut offset = tokio::fs::metadata(&path).await.map_or(0, |m| m.len());
    let mut pending: Vec<u8> = Vec::new();
    let mut line_no = 0u64;
    loop {
        let stopping = *stop.borrow();
        if path.exists() {
            // A truncated file is read again from the start.
            if tokio::fs::metadata(&path)
                .await
                .is_ok_and(|m| m.len() < offset)
            {
                offset = 0;
            }
            match read_from(&path, offset).await {
                Ok(chunk) => {
                    offset += chunk.len() as u64;
                    pending.extend_from_slice(&chunk);
                    let mut start = 0;
                    while let Some(nl) = pending[start..].iter().position(|&b| b == b'\n') {
                        line_no += 1;
                        handler.handle(&name, line_no, &pending[start..start + nl + 1]);
                        start += nl + 1;
                    }
                    pending.drain(..start);
                }
                Err(e) => {
                    let _ = handler.sink.append(
                        EventDraft::new(&handler.app, EventKind::LogError)
                            .with("path", name.as_str())
                            .with("error", e.to_string()),
                    );
                    return;
                }
            }
        }
        if stopping {
            if !pending.is_empty() {
                line_no += 1;
                handler.handle(&name, line_no, &pending);
            }
            return;
        }
        tokio::select! {
            _ = tokio::time::sleep(poll) => {}
            _ = stop.changed() => {}
        }
    }
}

async fn read_from(path: &PathBuf, offset: u64) -> std::io::Result<Vec<u8>> {
    let mut f = tokio::fs::File::open(path).await?;
    f.seek(std::io::SeekFrom::Start(offset)).await?;
    let mut out = Vec::new();
    f.read_to_end(&mut out).await?;
    Ok(out)
}
