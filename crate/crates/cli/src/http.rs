//! Nodes over real HTTP: an axum front end for any [`Node`], a blocking ureq
//! client implementing [`Transport`], and [`HttpFabric`], which runs a whole
//! scenario with every hop crossing a loopback socket.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{Method as HttpMethod, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::{Json, Router};
use serde_json::Value;

use d2_core::error::{ApiError, ErrorCode};
use d2_core::model::NodeUrl;
use d2_core::transport::{ApiRequest, CallError, Fabric, Fault, Method, Node, SimNetwork, TranscriptEntry, Transport};

/// Informational header naming the calling node.
pub const FROM_HEADER: &str = "x-d2-from";

fn method_of(m: &HttpMethod) -> Option<Method> {
    Some(match *m {
        HttpMethod::GET => Method::Get,
        HttpMethod::POST => Method::Post,
        HttpMethod::PUT => Method::Put,
        HttpMethod::DELETE => Method::Delete,
        _ => return None,
    })
}

pub fn error_response(e: ApiError) -> Response {
    let status = StatusCode::from_u16(e.code.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, Json(e)).into_response()
}

/// Hands one HTTP request to `node` on the blocking pool.
pub async fn dispatch(
    node: Arc<dyn Node>,
    method: HttpMethod,
    uri: Uri,
    query: BTreeMap<String, String>,
    body: Bytes,
) -> Response {
    let Some(method) = method_of(&method) else {
        return error_response(ApiError::not_found(uri.path()));
    };
    let body = if body.is_empty() {
        Value::Null
    } else {
        match serde_json::from_slice(&body) {
            Ok(v) => v,
            Err(e) => return error_response(ApiError::malformed(format!("body is not JSON: {e}"))),
        }
    };
    let req = ApiRequest { method, path: uri.path().to_string(), query, body };
    match tokio::task::spawn_blocking(move || node.handle(&req)).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => error_response(e),
        Err(e) => error_response(ApiError::new(ErrorCode::Internal, e.to_string())),
    }
}

async fn fallback(
    State(node): State<Arc<dyn Node>>,
    method: HttpMethod,
    uri: Uri,
    Query(query): Query<BTreeMap<String, String>>,
    body: Bytes,
) -> Response {
    dispatch(node, method, uri, query, body).await
}

/// Routes every path to `node`.
pub fn node_router(node: Arc<dyn Node>) -> Router {
    Router::new().fallback(fallback).with_state(node)
}

pub fn http_agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).timeout_global(Some(timeout)).build().into()
}

/// One request to `base`, decoding either the JSON result or an [`ApiError`].
pub fn send(
    agent: &ureq::Agent,
    base: &str,
    from: &NodeUrl,
    to: &NodeUrl,
    req: &ApiRequest,
) -> Result<Value, CallError> {
    let url = format!("{}{}", base.trim_end_matches('/'), req.path);
    let query = req.query.iter().map(|(k, v)| (k.as_str(), v.as_str()));
    let sent = match req.method {
        Method::Get => agent.get(&url).query_pairs(query).header(FROM_HEADER, from.as_str()).call(),
        Method::Post => agent.post(&url).query_pairs(query).header(FROM_HEADER, from.as_str()).send_json(&req.body),
        Method::Put => agent.put(&url).query_pairs(query).header(FROM_HEADER, from.as_str()).send_json(&req.body),
        Method::Delete => agent
            .delete(&url)
            .query_pairs(query)
            .header(FROM_HEADER, from.as_str())
            .force_send_body()
            .send_json(&req.body),
    };
    let unreachable = |e: ureq::Error| CallError::Unreachable { target: to.to_string(), reason: e.to_string() };
    let mut resp = sent.map_err(unreachable)?;
    let status = resp.status();
    let body: Value =
        resp.body_mut().read_json().map_err(|e| CallError::Decode { target: to.to_string(), reason: e.to_string() })?;
    if status.is_success() {
        return Ok(body);
    }
    match serde_json::from_value::<ApiError>(body) {
        Ok(e) => Err(CallError::Remote(e)),
        Err(_) => Err(CallError::Decode { target: to.to_string(), reason: format!("HTTP {status}") }),
    }
}

/// Blocking client that maps node URLs to the socket addresses actually
/// serving them. Node URLs stay the identities that get signed; only the
/// address book knows where they listen.
pub struct HttpClient {
    agent: ureq::Agent,
    book: RwLock<BTreeMap<NodeUrl, String>>,
}

impl HttpClient {
    pub fn new(book: BTreeMap<NodeUrl, String>) -> Self {
        Self { agent: http_agent(Duration::from_secs(90)), book: RwLock::new(book) }
    }

    pub fn add_peer(&self, node: NodeUrl, base: impl Into<String>) {
        self.book.write().unwrap().insert(node, base.into());
    }

    fn base(&self, to: &NodeUrl) -> Result<String, CallError> {
        self.book
            .read()
            .unwrap()
            .get(to)
            .cloned()
            .ok_or_else(|| CallError::Unreachable { target: to.to_string(), reason: "not in the address book".into() })
    }
}

impl Transport for HttpClient {
    fn call(&self, from: &NodeUrl, to: &NodeUrl, req: ApiRequest) -> Result<Value, CallError> {
        send(&self.agent, &self.base(to)?, from, to, &req)
    }

    fn post_deferred(&self, from: &NodeUrl, to: &NodeUrl, req: ApiRequest) {
        let base = match self.base(to) {
            Ok(b) => b,
            Err(e) => return log::warn!("deferred {}: {e}", req.path),
        };
        let (agent, from, to) = (self.agent.clone(), from.clone(), to.clone());
        std::thread::spawn(move || {
            if let Err(e) = send(&agent, &base, &from, &to, &req) {
                log::warn!("deferred {}: {e}", req.path);
            }
        });
    }
}

/// Stand-in registered with the simulated network; forwards each delivery
/// to the real node over HTTP.
struct Remote {
    url: NodeUrl,
    base: String,
    agent: ureq::Agent,
}

impl Node for Remote {
    fn base_url(&self) -> &NodeUrl {
        &self.url
    }

    fn handle(&self, req: &ApiRequest) -> Result<Value, ApiError> {
        send(&self.agent, &self.base, &self.url, &self.url, req).map_err(|e| match e {
            CallError::Remote(api) => api,
            other => ApiError::new(ErrorCode::Internal, other.to_string()),
        })
    }
}

/// Scenario fabric where each node listens on its own loopback port.
///
/// Scheduling, faults and the transcript come from an inner [`SimNetwork`],
/// so a scenario behaves the same as in-process while every message is an
/// actual HTTP exchange handled by the same axum front end `serve` uses.
pub struct HttpFabric {
    sim: Arc<SimNetwork>,
    agent: ureq::Agent,
    runtime: Mutex<Option<tokio::runtime::Runtime>>,
    addrs: Mutex<BTreeMap<NodeUrl, SocketAddr>>,
}

impl HttpFabric {
    pub fn new() -> std::io::Result<Arc<Self>> {
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        Ok(Arc::new(Self {
            sim: SimNetwork::new(),
            agent: http_agent(Duration::from_secs(30)),
            runtime: Mutex::new(Some(runtime)),
            addrs: Mutex::new(BTreeMap::new()),
        }))
    }

    /// Where each registered node is listening.
    pub fn addresses(&self) -> BTreeMap<NodeUrl, SocketAddr> {
        self.addrs.lock().unwrap().clone()
    }
}

impl Transport for HttpFabric {
    fn call(&self, from: &NodeUrl, to: &NodeUrl, req: ApiRequest) -> Result<Value, CallError> {
        self.sim.call(from, to, req)
    }

    fn post_deferred(&self, from: &NodeUrl, to: &NodeUrl, req: ApiRequest) {
        self.sim.post_deferred(from, to, req)
    }
}

impl Fabric for HttpFabric {
    fn register(&self, node: Arc<dyn Node>) {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        listener.set_nonblocking(true).expect("nonblocking listener");
        let addr = listener.local_addr().expect("bound address");
        let url = node.base_url().clone();
        let guard = self.runtime.lock().unwrap();
        let Some(rt) = guard.as_ref() else { return };
        rt.spawn(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("tokio listener");
            if let Err(e) = axum::serve(listener, node_router(node)).await {
                log::error!("server on {addr}: {e}");
            }
        });
        self.addrs.lock().unwrap().insert(url.clone(), addr);
        self.sim.register(Arc::new(Remote { url, base: format!("http://{addr}"), agent: self.agent.clone() }));
    }

    fn settle(&self) -> usize {
        self.sim.settle()
    }

    fn transcript(&self) -> Vec<TranscriptEntry> {
        self.sim.transcript()
    }

    fn inject(&self, fault: &Fault) -> Result<(), String> {
        self.sim.inject(fault)
    }

    fn shutdown(&self) {
        self.sim.shutdown();
        if let Some(rt) = self.runtime.lock().unwrap().take() {
            rt.shutdown_background();
        }
    }
}
