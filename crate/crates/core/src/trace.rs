//! Session trace files: a header line followed by every message that crossed
//! the gateway, one JSON object per line.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::IntentAnnotation;
use crate::assembly::PlanDocument;
use crate::gaze::StreamConfig;
use crate::orchestrator::OrchestratorConfig;
use crate::protocol::WireMessage;

pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    /// `sim` for simulator runs, `live` for gateway sessions.
    pub source: String,
    pub seed: Option<u64>,
    pub plan: PlanDocument,
    pub stream: StreamConfig,
    pub orchestrator: OrchestratorConfig,
    /// Ground truth for scripted runs. Empty for live sessions.
    #[serde(default)]
    pub annotations: Vec<IntentAnnotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMessage {
    pub t_us: i64,
    pub dir: Direction,
    /// Connection the message arrived on or was sent to. 0 is the
    /// simulator; outbound broadcasts carry no connection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conn: Option<u64>,
    pub msg: WireMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum TraceRecord {
    Header(TraceHeader),
    Message(TraceMessage),
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace is empty")]
    Empty,
    #[error("line 1 is not a trace header")]
    MissingHeader,
    #[error("unsupported trace version {0}")]
    Version(u32),
    #[error("line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("line {line}: timestamp {t_us} us goes backwards")]
    Order { line: usize, t_us: i64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, header: &TraceHeader) -> io::Result<Self> {
        write_line(&mut out, &TraceRecord::Header(header.clone()))?;
        Ok(Self { out })
    }

    pub fn message(&mut self, t_us: i64, dir: Direction, conn: Option<u64>, msg: &WireMessage) -> io::Result<()> {
        let rec = TraceRecord::Message(TraceMessage { t_us, dir, conn, msg: msg.clone() });
        write_line(&mut self.out, &rec)
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

fn write_line<W: Write>(out: &mut W, rec: &TraceRecord) -> io::Result<()> {
    serde_json::to_writer(&mut *out, rec)?;
    out.write_all(b"\n")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub messages: Vec<TraceMessage>,
    /// The last line was cut off; `messages` holds everything before it.
    pub truncated: bool,
}

impl Trace {
    pub fn inbound(&self) -> impl Iterator<Item = &TraceMessage> {
        self.messages.iter().filter(|m| m.dir == Direction::In)
    }
}

/// Parses a trace. A broken final line is tolerated and reported through
/// `truncated`; a broken line anywhere else is an error.
pub fn read_trace(text: &str) -> Result<Trace, TraceError> {
    let lines: Vec<&str> = text.lines().collect();
    let Some(first) = lines.first() else { return Err(TraceError::Empty) };
    let header = match serde_json::from_str::<TraceRecord>(first) {
        Ok(TraceRecord::Header(h)) => h,
        _ => return Err(TraceError::MissingHeader),
    };
    if header.version != TRACE_FORMAT_VERSION {
        return Err(TraceError::Version(header.version));
    }
    let mut messages = Vec::with_capacity(lines.len());
    let mut truncated = false;
    let mut last_t = i64::MIN;
    for (i, line) in lines.iter().enumerate().skip(1) {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceRecord>(line) {
            Ok(TraceRecord::Message(m)) => {
                if m.t_us < last_t {
                    return Err(TraceError::Order { line: line_no, t_us: m.t_us });
                }
                last_t = m.t_us;
                messages.push(m);
            }
            Ok(TraceRecord::Header(_)) => {
                return Err(TraceError::Corrupt { line: line_no, message: "second header".into() });
            }
            Err(_) if line_no == lines.len() => truncated = true,
            Err(e) => return Err(TraceError::Corrupt { line: line_no, message: e.to_string() }),
        }
    }
    Ok(Trace { header, messages, truncated })
}
