//! JSON-lines request/response protocol for out-of-process learners.
//!
//! The harness spawns the learner with piped stdin/stdout and exchanges one
//! UTF-8 JSON object per line, strictly one request in flight. Requests
//! carry a strictly increasing `id` starting at 0 with `hello`; every
//! response echoes the id. See `PROTOCOL.md` at the repository root for the
//! payload of each op.

use crate::learners::{Learner, LearnerError, TrainReport};
use crate::types::{EmbeddingVector, KnowledgeItem};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;
use thiserror::Error;

pub const PROTOCOL_VERSION: u64 = 1;

/// Ops a server may declare in its `hello` response.
pub const ALL_OPS: [&str; 6] = ["train", "answer", "embed", "predict_loss", "snapshot_id", "shutdown"];

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("failed to start learner process: {0}")]
    Spawn(std::io::Error),
    #[error("learner speaks protocol version {found}, expected {expected}")]
    VersionMismatch { expected: u64, found: u64 },
    #[error("no response to `{op}` within {secs} s")]
    Timeout { op: String, secs: f64 },
    #[error("malformed response line: {0}")]
    BadLine(String),
    #[error("response id {found} does not match request id {expected}")]
    IdMismatch { expected: u64, found: u64 },
    #[error("learner error {code}: {message}")]
    Remote { code: String, message: String },
    #[error("learner process exited")]
    ChildExited,
    #[error("learner does not support required op `{0}`")]
    MissingOp(String),
    #[error("session is closed")]
    Closed,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl ProtocolError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Spawn(_) => "spawn_failed",
            Self::VersionMismatch { .. } => "version_mismatch",
            Self::Timeout { .. } => "timeout",
            Self::BadLine(_) => "bad_line",
            Self::IdMismatch { .. } => "id_mismatch",
            Self::Remote { .. } => "remote_error",
            Self::ChildExited => "child_exited",
            Self::MissingOp(_) => "missing_capability",
            Self::Closed => "session_closed",
            Self::Io(_) => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub version: u64,
    pub ops: Vec<String>,
}

impl Capabilities {
    pub fn supports(&self, op: &str) -> bool {
        self.ops.iter().any(|o| o == op)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalConfig {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

fn default_timeout() -> f64 {
    30.0
}

/// A live connection to a learner process.
pub struct Session {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    timeout: Duration,
    caps: Capabilities,
    closed: bool,
}

impl Session {
    /// Spawns `command` and performs the handshake. `required` lists ops the
    /// run depends on beyond the always-required ones.
    pub fn spawn(command: &[String], timeout: Duration, required: &[&str]) -> Result<Self, ProtocolError> {
        let (prog, args) = command
            .split_first()
            .ok_or_else(|| ProtocolError::Spawn(std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty command")))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(ProtocolError::Spawn)?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let mut session = Self {
            child,
            stdin,
            lines: rx,
            next_id: 0,
            timeout,
            caps: Capabilities {
                version: 0,
                ops: Vec::new(),
            },
            closed: false,
        };
        session.handshake(required)?;
        Ok(session)
    }

    pub fn capabilities(&self) -> &Capabilities {
        &self.caps
    }

    fn handshake(&mut self, required: &[&str]) -> Result<(), ProtocolError> {
        let mut payload = Map::new();
        payload.insert("version".into(), json!(PROTOCOL_VERSION));
        let resp = self.call_raw("hello", payload)?;
        let version = resp.get("version").and_then(Value::as_u64).ok_or_else(|| {
            self.abort();
            ProtocolError::BadLine("hello response lacks `version`".into())
        })?;
        if version != PROTOCOL_VERSION {
            self.abort();
            return Err(ProtocolError::VersionMismatch {
                expected: PROTOCOL_VERSION,
                found: version,
            });
        }
        let ops = resp
            .get("ops")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|o| o.as_str().map(str::to_string)).collect())
            .unwrap_or_default();
        self.caps = Capabilities { version, ops };
        for op in ["train", "answer", "snapshot_id"].iter().chain(required) {
            if !self.caps.supports(op) {
                self.abort();
                return Err(ProtocolError::MissingOp(op.to_string()));
            }
        }
        Ok(())
    }

    /// Sends one request and returns the `ok` response object.
    pub fn remote_call(&mut self, op: &str, payload: Map<String, Value>) -> Result<Map<String, Value>, ProtocolError> {
        self.call_raw(op, payload)
    }

    fn call_raw(&mut self, op: &str, payload: Map<String, Value>) -> Result<Map<String, Value>, ProtocolError> {
        if self.closed {
            return Err(ProtocolError::Closed);
        }
        let id = self.next_id;
        self.next_id += 1;
        let mut msg = Map::new();
        msg.insert("id".into(), json!(id));
        msg.insert("op".into(), json!(op));
        msg.extend(payload);
        let mut line = serde_json::to_string(&Value::Object(msg)).expect("json values serialize");
        line.push('\n');
        let write = match self.stdin.as_mut() {
            Some(w) => w.write_all(line.as_bytes()).and_then(|_| w.flush()),
            None => Err(std::io::Error::new(std::io::ErrorKind::BrokenPipe, "stdin closed")),
        };
        if write.is_err() {
            self.abort();
            return Err(ProtocolError::ChildExited);
        }
        let raw = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(l)) => l,
            Ok(Err(e)) => {
                self.abort();
                return Err(ProtocolError::Io(e));
            }
            Err(RecvTimeoutError::Timeout) => {
                self.abort();
                return Err(ProtocolError::Timeout {
                    op: op.to_string(),
                    secs: self.timeout.as_secs_f64(),
                });
            }
            Err(RecvTimeoutError::Disconnected) => {
                self.abort();
                return Err(ProtocolError::ChildExited);
            }
        };
        let resp = match serde_json::from_str::<Value>(&raw) {
            Ok(Value::Object(m)) => m,
            _ => {
                self.abort();
                return Err(ProtocolError::BadLine(truncate(&raw)));
            }
        };
        match resp.get("id").and_then(Value::as_u64) {
            Some(found) if found == id => {}
            Some(found) => {
                self.abort();
                return Err(ProtocolError::IdMismatch { expected: id, found });
            }
            None => {
                self.abort();
                return Err(ProtocolError::BadLine(truncate(&raw)));
            }
        }
        match resp.get("ok").and_then(Value::as_bool) {
            Some(true) => Ok(resp),
            Some(false) => {
                let err = resp.get("error");
                let field = |k: &str| {
                    err.and_then(|e| e.get(k))
                        .and_then(Value::as_str)
                        .unwrap_or("")
                        .to_string()
                };
                Err(ProtocolError::Remote {
                    code: field("code"),
                    message: field("message"),
                })
            }
            None => {
                self.abort();
                Err(ProtocolError::BadLine(truncate(&raw)))
            }
        }
    }

    /// Sends `shutdown` and waits for the process to exit.
    pub fn shutdown(mut self) -> Result<ExitStatus, ProtocolError> {
        self.call_raw("shutdown", Map::new())?;
        self.stdin.take();
        self.closed = true;
        Ok(self.child.wait()?)
    }

    fn abort(&mut self) {
        if !self.closed {
            self.closed = true;
            self.stdin.take();
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }

    /// Whether the session has been torn down after a failure.
    pub fn is_closed(&self) -> bool {
        self.closed
    }
}

impl Drop for Session {
    /// Closes stdin so a well-behaved server sees EOF and exits, then kills
    /// whatever is still running after a short grace period.
    fn drop(&mut self) {
        if self.closed {
            return;
        }
        self.stdin.take();
        for _ in 0..20 {
            if let Ok(Some(_)) = self.child.try_wait() {
                self.closed = true;
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        self.abort();
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(200).collect()
}

fn field<T: for<'de> Deserialize<'de>>(resp: &Map<String, Value>, key: &str) -> Result<T, ProtocolError> {
    let v = resp
        .get(key)
        .ok_or_else(|| ProtocolError::BadLine(format!("response lacks `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| ProtocolError::BadLine(format!("`{key}`: {e}")))
}

/// A learner living in another process.
pub struct ExternalLearner {
    session: Session,
    dim: usize,
}

impl ExternalLearner {
    pub fn new(session: Session, dim: usize) -> Self {
        Self { session, dim }
    }

    pub fn spawn(cfg: &ExternalConfig, dim: usize, required: &[&str]) -> Result<Self, ProtocolError> {
        let timeout = Duration::from_secs_f64(cfg.timeout_s.max(0.0));
        Ok(Self::new(Session::spawn(&cfg.command, timeout, required)?, dim))
    }

    pub fn shutdown(self) -> Result<ExitStatus, ProtocolError> {
        self.session.shutdown()
    }

    fn call(&mut self, op: &str, payload: Value) -> Result<Map<String, Value>, LearnerError> {
        let Value::Object(m) = payload else {
            unreachable!("payloads are objects")
        };
        Ok(self.session.remote_call(op, m)?)
    }
}

impl Learner for ExternalLearner {
    fn train_batch(&mut self, items: &[KnowledgeItem]) -> Result<TrainReport, LearnerError> {
        if items.is_empty() {
            return Ok(TrainReport::default());
        }
        let r = self.call("train", json!({ "items": items }))?;
        Ok(TrainReport {
            tokens_processed: field(&r, "tokens_processed")?,
            cost_seconds: field(&r, "cost_seconds")?,
            items_seen: r.get("items_seen").and_then(Value::as_u64).unwrap_or(items.len() as u64) as usize,
            skipped: r.get("skipped").and_then(Value::as_u64).unwrap_or(0) as usize,
            replay_tokens: 0,
        })
    }

    fn answer(&mut self, queries: &[String]) -> Result<Vec<String>, LearnerError> {
        let r = self.call("answer", json!({ "queries": queries }))?;
        let answers: Vec<String> = field(&r, "answers")?;
        if answers.len() != queries.len() {
            return Err(ProtocolError::BadLine(format!("{} answers for {} queries", answers.len(), queries.len())).into());
        }
        Ok(answers)
    }

    fn embed(&mut self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LearnerError> {
        let r = self.call("embed", json!({ "texts": texts, "dim": self.dim }))?;
        let vectors: Vec<Vec<f64>> = field(&r, "vectors")?;
        if vectors.len() != texts.len() || vectors.iter().any(|v| v.len() != self.dim) {
            return Err(ProtocolError::BadLine("embed vectors do not match request shape".into()).into());
        }
        Ok(vectors.into_iter().map(EmbeddingVector::new).collect())
    }

    fn predict_loss(&mut self, items: &[KnowledgeItem]) -> Result<Vec<f64>, LearnerError> {
        let r = self.call("predict_loss", json!({ "items": items }))?;
        let losses: Vec<f64> = field(&r, "losses")?;
        if losses.len() != items.len() {
            return Err(ProtocolError::BadLine("loss count does not match items".into()).into());
        }
        Ok(losses)
    }

    fn snapshot_id(&mut self) -> Result<u64, LearnerError> {
        let r = self.call("snapshot_id", json!({}))?;
        Ok(field(&r, "snapshot_id")?)
    }
}

// ---------------------------------------------------------------------------
// Server side
// ---------------------------------------------------------------------------

fn error_response(id: Value, code: &str, message: impl Into<String>) -> Value {
    json!({ "id": id, "ok": false, "error": { "code": code, "message": message.into() } })
}

fn handle<L: Learner>(learner: &mut L, req: &Map<String, Value>) -> Result<Value, (&'static str, String)> {
    let op = req.get("op").and_then(Value::as_str).ok_or(("bad_request", "missing `op`".to_string()))?;
    let get = |k: &str| req.get(k).cloned().ok_or(("bad_request", format!("missing `{k}`")));
    let learner_err = |e: LearnerError| ("learner_error", e.to_string());
    let bad = |e: serde_json::Error| ("bad_request", e.to_string());
    Ok(match op {
        "hello" => json!({ "version": PROTOCOL_VERSION, "ops": ALL_OPS }),
        "train" => {
            let items: Vec<KnowledgeItem> = serde_json::from_value(get("items")?).map_err(bad)?;
            let r = learner.train_batch(&items).map_err(learner_err)?;
            json!({
                "tokens_processed": r.tokens_processed,
                "cost_seconds": r.cost_seconds,
                "items_seen": r.items_seen,
                "skipped": r.skipped,
            })
        }
        "answer" => {
            let queries: Vec<String> = serde_json::from_value(get("queries")?).map_err(bad)?;
            json!({ "answers": learner.answer(&queries).map_err(learner_err)? })
        }
        "embed" => {
            let texts: Vec<String> = serde_json::from_value(get("texts")?).map_err(bad)?;
            let vectors = learner.embed(&texts).map_err(learner_err)?;
            json!({ "vectors": vectors })
        }
        "predict_loss" => {
            let items: Vec<KnowledgeItem> = serde_json::from_value(get("items")?).map_err(bad)?;
            json!({ "losses": learner.predict_loss(&items).map_err(learner_err)? })
        }
        "snapshot_id" => json!({ "snapshot_id": learner.snapshot_id().map_err(learner_err)? }),
        "shutdown" => json!({}),
        other => return Err(("unsupported_op", format!("unknown op `{other}`"))),
    })
}

/// Serves `learner` over a line protocol until `shutdown` or end of input.
/// Returns the process exit code.
pub fn serve<L: Learner, R: BufRead, W: Write>(learner: &mut L, input: R, mut output: W) -> std::io::Result<i32> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (resp, stop) = match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(req)) => {
                let id = req.get("id").cloned().unwrap_or(Value::Null);
                let stop = req.get("op").and_then(Value::as_str) == Some("shutdown");
                let resp = match handle(learner, &req) {
                    Ok(Value::Object(mut body)) => {
                        body.insert("id".into(), id);
                        body.insert("ok".into(), Value::Bool(true));
                        Value::Object(body)
                    }
                    Ok(_) => unreachable!("handlers return objects"),
                    Err((code, msg)) => error_response(id, code, msg),
                };
                (resp, stop)
            }
            _ => (error_response(Value::Null, "bad_request", "request is not a JSON object"), false),
        };
        serde_json::to_writer(&mut output, &resp)?;
        output.write_all(b"\n")?;
        output.flush()?;
        if stop {
            return Ok(0);
        }
    }
    Ok(0)
}
