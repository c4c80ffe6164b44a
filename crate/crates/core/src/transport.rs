//! Request routing between nodes.
//!
//! Every node exposes one [`Node::handle`] entry point taking a method, path
//! and JSON body. The in-process [`SimNetwork`] and the HTTP transport in the
//! CLI both drive the same handlers. `SimNetwork` is single-threaded in the
//! sense that matters for determinism: messages are delivered synchronously or
//! from a FIFO deferred queue that the harness drains explicitly, and every
//! hop is appended to a transcript.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::{Arc, Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical::canonical_string;
use crate::error::{ApiError, ErrorCode};
use crate::model::NodeUrl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Get,
    Post,
    Put,
    Delete,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Get => "GET",
            Method::Post => "POST",
            Method::Put => "PUT",
            Method::Delete => "DELETE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiRequest {
    pub method: Method,
    pub path: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub query: BTreeMap<String, String>,
    #[serde(default)]
    pub body: Value,
}

impl ApiRequest {
    pub fn new(method: Method, path: impl Into<String>) -> Self {
        Self { method, path: path.into(), query: BTreeMap::new(), body: Value::Null }
    }

    pub fn get(path: impl Into<String>) -> Self {
        Self::new(Method::Get, path)
    }

    pub fn post<T: Serialize>(path: impl Into<String>, body: &T) -> Self {
        Self::new(Method::Post, path).with_body(body)
    }

    pub fn with_body<T: Serialize>(mut self, body: &T) -> Self {
        self.body = serde_json::to_value(body).expect("request bodies serialize to JSON");
        self
    }

    pub fn with_query(mut self, key: &str, value: impl ToString) -> Self {
        self.query.insert(key.to_string(), value.to_string());
        self
    }

    pub fn segments(&self) -> Vec<&str> {
        self.path.split('/').filter(|s| !s.is_empty()).collect()
    }

    pub fn body_as<T: DeserializeOwned>(&self) -> Result<T, ApiError> {
        serde_json::from_value(self.body.clone())
            .map_err(|e| ApiError::malformed(format!("{} {}: {e}", self.method, self.path)))
    }
}

/// Serializes a handler result into the response body.
pub fn reply<T: Serialize>(value: T) -> Result<Value, ApiError> {
    serde_json::to_value(value).map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))
}

pub trait Node: Send + Sync {
    fn base_url(&self) -> &NodeUrl;
    fn handle(&self, req: &ApiRequest) -> Result<Value, ApiError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CallError {
    #[error("{target} unreachable: {reason}")]
    Unreachable { target: String, reason: String },
    #[error(transparent)]
    Remote(ApiError),
    #[error("undecodable response from {target}: {reason}")]
    Decode { target: String, reason: String },
}

impl CallError {
    /// Remote error code, if the peer answered at all.
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            CallError::Remote(e) => Some(e.code),
            _ => None,
        }
    }

    pub fn is_unreachable(&self) -> bool {
        matches!(self, CallError::Unreachable { .. })
    }
}

pub trait Transport: Send + Sync {
    /// Synchronous request/response.
    fn call(&self, from: &NodeUrl, to: &NodeUrl, req: ApiRequest) -> Result<Value, CallError>;

    /// Fire-and-forget delivery. Failures are logged, never reported back.
    fn post_deferred(&self, from: &NodeUrl, to: &NodeUrl, req: ApiRequest);
}

pub fn call_typed<T: DeserializeOwned>(
    transport: &dyn Transport,
    from: &NodeUrl,
    to: &NodeUrl,
    req: ApiRequest,
) -> Result<T, CallError> {
    let value = transport.call(from, to, req)?;
    serde_json::from_value(value).map_err(|e| CallError::Decode { target: to.to_string(), reason: e.to_string() })
}

/// One hop in the transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    /// Logical timestamp.
    pub seq: u64,
    pub dir: Direction,
    pub from: String,
    pub to: String,
    pub method: Method,
    pub path: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub deferred: bool,
    #[serde(default)]
    pub body: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Request,
    Response,
    Error,
    Dropped,
}

/// Scripted faults. Rules match on target node and a path prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRule {
    pub to: NodeUrl,
    #[serde(default)]
    pub path_prefix: String,
    /// How many matching messages the rule applies to; `None` = unlimited.
    #[serde(default)]
    pub count: Option<u32>,
}

impl FaultRule {
    pub fn matches(&self, to: &NodeUrl, path: &str) -> bool {
        &self.to == to && path.starts_with(&self.path_prefix)
    }
}

#[derive(Debug, Default)]
struct Faults {
    down: BTreeSet<NodeUrl>,
    drop: Vec<FaultRule>,
    duplicate: Vec<FaultRule>,
    delay: Vec<FaultRule>,
}

fn take_rule(rules: &mut Vec<FaultRule>, to: &NodeUrl, path: &str) -> bool {
    let Some(i) = rules.iter().position(|r| r.matches(to, path)) else {
        return false;
    };
    match &mut rules[i].count {
        Some(1) => {
            rules.remove(i);
        }
        Some(n) => *n -= 1,
        None => {}
    }
    true
}

#[derive(Debug, Clone)]
struct Deferred {
    from: NodeUrl,
    to: NodeUrl,
    req: ApiRequest,
}

#[derive(Default)]
struct SimState {
    seq: u64,
    transcript: Vec<TranscriptEntry>,
    deferred: VecDeque<Deferred>,
    held: VecDeque<Deferred>,
    faults: Faults,
}

/// Deterministic in-process transport.
#[derive(Default)]
pub struct SimNetwork {
    nodes: RwLock<BTreeMap<NodeUrl, Arc<dyn Node>>>,
    state: Mutex<SimState>,
}

impl SimNetwork {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn register(&self, node: Arc<dyn Node>) {
        self.nodes.write().unwrap().insert(node.base_url().clone(), node);
    }

    /// Drops every registered node so reference cycles through the
    /// transport are released.
    pub fn shutdown(&self) {
        self.nodes.write().unwrap().clear();
    }

    pub fn set_down(&self, node: &NodeUrl, down: bool) {
        let mut st = self.state.lock().unwrap();
        if down {
            st.faults.down.insert(node.clone());
        } else {
            st.faults.down.remove(node);
        }
    }

    pub fn drop_messages(&self, rule: FaultRule) {
        self.state.lock().unwrap().faults.drop.push(rule);
    }

    pub fn duplicate_messages(&self, rule: FaultRule) {
        self.state.lock().unwrap().faults.duplicate.push(rule);
    }

    /// Holds matching deferred messages until [`SimNetwork::release_held`].
    pub fn delay_messages(&self, rule: FaultRule) {
        self.state.lock().unwrap().faults.delay.push(rule);
    }

    pub fn release_held(&self) {
        let mut st = self.state.lock().unwrap();
        st.faults.delay.clear();
        let held: Vec<_> = st.held.drain(..).collect();
        st.deferred.extend(held);
    }

    pub fn clear_faults(&self) {
        self.state.lock().unwrap().faults = Faults::default();
    }

    #[allow(clippy::too_many_arguments)]
    fn log(
        &self,
        st: &mut SimState,
        dir: Direction,
        from: &NodeUrl,
        to: &NodeUrl,
        req: &ApiRequest,
        deferred: bool,
        body: Value,
    ) {
        st.seq += 1;
        let entry = TranscriptEntry {
            seq: st.seq,
            dir,
            from: from.to_string(),
            to: to.to_string(),
            method: req.method,
            path: path_with_query(req),
            deferred,
            body,
        };
        st.transcript.push(entry);
    }

    fn deliver(&self, from: &NodeUrl, to: &NodeUrl, req: ApiRequest, deferred: bool) -> Result<Value, CallError> {
        let duplicate;
        {
            let mut st = self.state.lock().unwrap();
            self.log(&mut st, Direction::Request, from, to, &req, deferred, req.body.clone());
            let dropped = st.faults.down.contains(to) || take_rule(&mut st.faults.drop, to, &req.path);
            if dropped {
                self.log(&mut st, Direction::Dropped, from, to, &req, deferred, Value::Null);
                return Err(CallError::Unreachable { target: to.to_string(), reason: "message dropped".into() });
            }
            duplicate = take_rule(&mut st.faults.duplicate, to, &req.path);
        }
        let node = self.nodes.read().unwrap().get(to).cloned();
        let Some(node) = node else {
            let mut st = self.state.lock().unwrap();
            self.log(&mut st, Direction::Dropped, from, to, &req, deferred, Value::Null);
            return Err(CallError::Unreachable { target: to.to_string(), reason: "no such node".into() });
        };
        if duplicate {
            let first = node.handle(&req);
            let mut st = self.state.lock().unwrap();
            let body = match &first {
                Ok(v) => v.clone(),
                Err(e) => serde_json::to_value(e).unwrap_or(Value::Null),
            };
            let dir = if first.is_ok() { Direction::Response } else { Direction::Error };
            self.log(&mut st, dir, to, from, &req, deferred, body);
            self.log(&mut st, Direction::Request, from, to, &req, deferred, req.body.clone());
        }
        let result = node.handle(&req);
        let mut st = self.state.lock().unwrap();
        match &result {
            Ok(v) => self.log(&mut st, Direction::Response, to, from, &req, deferred, v.clone()),
            Err(e) => {
                let body = serde_json::to_value(e).unwrap_or(Value::Null);
                self.log(&mut st, Direction::Error, to, from, &req, deferred, body)
            }
        }
        result.map_err(CallError::Remote)
    }

    /// Delivers queued deferred messages in FIFO order until none remain.
    /// Returns how many were delivered.
    pub fn settle(&self) -> usize {
        let mut delivered = 0;
        // Bounded so a rotation storm cannot spin forever.
        while delivered < 100_000 {
            let next = self.state.lock().unwrap().deferred.pop_front();
            let Some(msg) = next else { break };
            if let Err(e) = self.deliver(&msg.from, &msg.to, msg.req, true) {
                log::debug!("deferred delivery failed: {e}");
            }
            delivered += 1;
        }
        delivered
    }

    pub fn pending_deferred(&self) -> usize {
        self.state.lock().unwrap().deferred.len()
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.state.lock().unwrap().transcript.clone()
    }

    /// JSON-lines rendering, one canonical entry per line.
    pub fn transcript_jsonl(&self) -> String {
        render_jsonl(&self.state.lock().unwrap().transcript)
    }
}

/// A scripted network fault.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "fault", rename_all = "snake_case")]
pub enum Fault {
    Down {
        node: NodeUrl,
    },
    Up {
        node: NodeUrl,
    },
    Drop(FaultRule),
    Duplicate(FaultRule),
    /// Hold matching deferred messages until `Release`.
    Delay(FaultRule),
    Release,
    Clear,
}

/// A transport the harness can also drive: register nodes, flush deferred
/// messages, read the transcript and inject faults.
pub trait Fabric: Transport {
    fn register(&self, node: Arc<dyn Node>);
    /// Delivers outstanding deferred messages; returns how many.
    fn settle(&self) -> usize;
    fn transcript(&self) -> Vec<TranscriptEntry>;
    fn inject(&self, fault: &Fault) -> Result<(), String>;
    fn shutdown(&self);
}

impl Fabric for SimNetwork {
    fn register(&self, node: Arc<dyn Node>) {
        SimNetwork::register(self, node)
    }

    fn settle(&self) -> usize {
        SimNetwork::settle(self)
    }

    fn transcript(&self) -> Vec<TranscriptEntry> {
        SimNetwork::transcript(self)
    }

    fn inject(&self, fault: &Fault) -> Result<(), String> {
        match fault {
            Fault::Down { node } => self.set_down(node, true),
            Fault::Up { node } => self.set_down(node, false),
            Fault::Drop(r) => self.drop_messages(r.clone()),
            Fault::Duplicate(r) => self.duplicate_messages(r.clone()),
            Fault::Delay(r) => self.delay_messages(r.clone()),
            Fault::Release => self.release_held(),
            Fault::Clear => self.clear_faults(),
        }
        Ok(())
    }

    fn shutdown(&self) {
        SimNetwork::shutdown(self)
    }
}

pub fn render_jsonl(entries: &[TranscriptEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&canonical_string(e));
        out.push('\n');
    }
    out
}

fn path_with_query(req: &ApiRequest) -> String {
    if req.query.is_empty() {
        return req.path.clone();
    }
    let q: Vec<String> = req.query.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("{}?{}", req.path, q.join("&"))
}

impl Transport for SimNetwork {
    fn call(&self, from: &NodeUrl, to: &NodeUrl, req: ApiRequest) -> Result<Value, CallError> {
        self.deliver(from, to, req, false)
    }

    fn post_deferred(&self, from: &NodeUrl, to: &NodeUrl, req: ApiRequest) {
        let mut st = self.state.lock().unwrap();
        let msg = Deferred { from: from.clone(), to: to.clone(), req };
        if take_rule(&mut st.faults.delay, to, &msg.req.path) {
            st.held.push_back(msg);
        } else {
            st.deferred.push_back(msg);
        }
    }
}
