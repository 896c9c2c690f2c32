//! Newline-delimited JSON envelopes exchanged between tiers.
//!
//! One envelope per line, UTF-8:
//!
//! ```text
//! {"msg_id":"edge-3","correlates_to":"client-1","sent_at":1700000000000,"msg_type":"Status","payload":{...}}
//! ```
//!
//! Both transports carry encoded lines, so an in-process run exercises the
//! same encode/decode path as TCP.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::mpsc::{self, Receiver, Sender};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::cloud_policy::{FleetDescriptor, Strategy};
use crate::instruction::InstructionSequence;
use crate::orchestrator::Verdict;
use crate::planner::TaskSpec;
use crate::world::Observation;

pub const MSG_TYPES: [&str; 7] =
    ["TaskRequest", "StrategyResponse", "InstructionDispatch", "Observation", "Status", "Ack", "Error"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub msg_id: String,
    #[serde(default)]
    pub correlates_to: Option<String>,
    /// Milliseconds since the Unix epoch.
    pub sent_at: u64,
    #[serde(flatten)]
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "msg_type", content = "payload")]
pub enum Body {
    TaskRequest(TaskRequest),
    StrategyResponse(StrategyResponse),
    InstructionDispatch(InstructionDispatch),
    Observation(Observation),
    Status(StatusReport),
    Ack(Ack),
    Error(ErrorReport),
}

impl Body {
    pub fn msg_type(&self) -> &'static str {
        match self {
            Body::TaskRequest(_) => "TaskRequest",
            Body::StrategyResponse(_) => "StrategyResponse",
            Body::InstructionDispatch(_) => "InstructionDispatch",
            Body::Observation(_) => "Observation",
            Body::Status(_) => "Status",
            Body::Ack(_) => "Ack",
            Body::Error(_) => "Error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRequest {
    pub task: TaskSpec,
    /// Filled in by the edge before forwarding to the cloud.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fleet: Option<FleetDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyResponse {
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionDispatch {
    pub task_id: String,
    pub phase: String,
    pub sequences: Vec<InstructionSequence>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSummary {
    pub iterations: u32,
    pub instruction_counts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exhausted: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation_log_path: Option<String>,
}

/// Per-robot status from the device, or the final task status from the edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatusReport {
    pub task_id: String,
    pub state: TaskState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robot_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<TaskSummary>,
}

impl StatusReport {
    pub fn new(task_id: impl Into<String>, state: TaskState) -> Self {
        Self {
            task_id: task_id.into(),
            state,
            robot_id: None,
            phase: None,
            failed_index: None,
            verdict: None,
            detail: None,
            summary: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ack {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorReport {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("decode error{}: {reason}", offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
pub struct DecodeError {
    /// Byte offset into the line, for syntax errors.
    pub offset: Option<usize>,
    pub reason: String,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// One JSON document plus the terminating newline.
pub fn encode(env: &Envelope) -> String {
    let mut line = serde_json::to_string(env).expect("envelopes serialize");
    line.push('\n');
    line
}

pub fn decode(line: &str) -> Result<Envelope, DecodeError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    let value: serde_json::Value = serde_json::from_str(line)
        .map_err(|e| DecodeError { offset: Some(byte_offset(line, e.line(), e.column())), reason: e.to_string() })?;
    let obj =
        value.as_object().ok_or_else(|| DecodeError { offset: Some(0), reason: "envelope is not an object".into() })?;
    match obj.get("msg_type") {
        None => return Err(DecodeError { offset: None, reason: "missing field `msg_type`".into() }),
        Some(serde_json::Value::String(t)) if MSG_TYPES.contains(&t.as_str()) => {}
        Some(other) => return Err(DecodeError { offset: None, reason: format!("unknown msg_type {other}") }),
    }
    for field in ["msg_id", "sent_at", "payload"] {
        if !obj.contains_key(field) {
            return Err(DecodeError { offset: None, reason: format!("missing field `{field}`") });
        }
    }
    serde_json::from_value(value).map_err(|e| DecodeError { offset: None, reason: e.to_string() })
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

#[derive(Debug, thiserror::Error)]
pub enum LinkError {
    #[error("connection closed")]
    Closed,
    #[error("timed out waiting for a message")]
    Timeout,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{error} in line {line:?}")]
    Decode { error: DecodeError, line: String },
}

/// A bidirectional, FIFO, line-oriented connection.
pub trait Link: Send {
    fn send_line(&mut self, line: &str) -> Result<(), LinkError>;
    fn recv_line(&mut self) -> Result<String, LinkError>;

    fn send(&mut self, env: &Envelope) -> Result<(), LinkError> {
        self.send_line(&encode(env))
    }

    fn recv(&mut self) -> Result<Envelope, LinkError> {
        let line = self.recv_line()?;
        decode(&line).map_err(|error| LinkError::Decode { error, line })
    }
}

/// In-process link over a pair of channels.
pub struct ChannelLink {
    tx: Sender<String>,
    rx: Receiver<String>,
    timeout: Option<Duration>,
}

pub fn channel_pair() -> (ChannelLink, ChannelLink) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (ChannelLink { tx: a_tx, rx: a_rx, timeout: None }, ChannelLink { tx: b_tx, rx: b_rx, timeout: None })
}

impl ChannelLink {
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }
}

impl Link for ChannelLink {
    fn send_line(&mut self, line: &str) -> Result<(), LinkError> {
        self.tx.send(line.to_owned()).map_err(|_| LinkError::Closed)
    }

    fn recv_line(&mut self) -> Result<String, LinkError> {
        match self.timeout {
            None => self.rx.recv().map_err(|_| LinkError::Closed),
            Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                mpsc::RecvTimeoutError::Timeout => LinkError::Timeout,
                mpsc::RecvTimeoutError::Disconnected => LinkError::Closed,
            }),
        }
    }
}

pub struct TcpLink {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpLink {
    pub fn new(stream: TcpStream) -> std::io::Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self { reader: BufReader::new(stream.try_clone()?), writer: stream })
    }

    pub fn connect(addr: &str) -> std::io::Result<Self> {
        Self::new(TcpStream::connect(addr)?)
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> std::io::Result<()> {
        self.writer.set_read_timeout(timeout)
    }
}

impl Link for TcpLink {
    fn send_line(&mut self, line: &str) -> Result<(), LinkError> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        Ok(())
    }

    fn recv_line(&mut self) -> Result<String, LinkError> {
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Ok(0) => Err(LinkError::Closed),
            Ok(_) => Ok(line),
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                Err(LinkError::Timeout)
            }
            Err(e) => Err(e.into()),
        }
    }
}

/// Sequential msg ids, `"{prefix}-{n}"` from 1.
#[derive(Debug, Clone)]
pub struct IdGen {
    prefix: String,
    next: u64,
}

impl IdGen {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self { prefix: prefix.into(), next: 1 }
    }

    pub fn next_id(&mut self) -> String {
        let id = format!("{}-{}", self.prefix, self.next);
        self.next += 1;
        id
    }

    pub fn envelope(&mut self, correlates_to: Option<&str>, body: Body) -> Envelope {
        Envelope { msg_id: self.next_id(), correlates_to: correlates_to.map(str::to_owned), sent_at: now_ms(), body }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub link: String,
    pub direction: Direction,
    pub envelope: Envelope,
}

/// Zeroes timestamps and renumbers msg ids by first appearance, so logs from
/// different runs or transports can be compared byte for byte.
pub fn normalize_log(log: &[LogEntry]) -> Vec<LogEntry> {
    let mut ids: HashMap<String, String> = HashMap::new();
    let mut rename = |id: &str| {
        let n = ids.len();
        ids.entry(id.to_owned()).or_insert_with(|| format!("m{n}")).clone()
    };
    log.iter()
        .map(|e| {
            let mut env = e.envelope.clone();
            env.msg_id = rename(&env.msg_id);
            env.correlates_to = env.correlates_to.as_deref().map(&mut rename);
            env.sent_at = 0;
            LogEntry { link: e.link.clone(), direction: e.direction, envelope: env }
        })
        .collect()
}

pub fn log_to_jsonl(log: &[LogEntry]) -> String {
    log.iter().map(|e| serde_json::to_string(e).expect("log entries serialize") + "\n").collect()
}

/// Every `correlates_to` names a msg id seen earlier on the same link.
pub fn check_causality(log: &[LogEntry]) -> Result<(), String> {
    let mut seen: HashMap<&str, Vec<&str>> = HashMap::new();
    for (i, e) in log.iter().enumerate() {
        if let Some(c) = &e.envelope.correlates_to {
            if !seen.get(e.link.as_str()).is_some_and(|ids| ids.contains(&c.as_str())) {
                return Err(format!("entry {i} on {} correlates to unseen {c}", e.link));
            }
        }
        seen.entry(e.link.as_str()).or_default().push(&e.envelope.msg_id);
    }
    Ok(())
}
