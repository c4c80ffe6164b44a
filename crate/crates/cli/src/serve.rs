//! `d2sim serve`: one real node on a TCP port.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Weak};
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, Method as HttpMethod, Uri};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use futures::StreamExt;
use serde::Deserialize;
use tower_http::services::ServeDir;

use d2_core::agent::{AgentService, UserAgent};
use d2_core::clock::{Clock, SystemClock};
use d2_core::crypto::KdfParams;
use d2_core::harness::{NodeSpec, Plan, Scenario};
use d2_core::hub::HubNode;
use d2_core::provider::ProviderNode;
use d2_core::transport::{Node, Transport};
use d2_core::trust::TrustRegistry;

use crate::http::{dispatch, node_router, HttpClient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Role {
    Hub,
    Provider,
    Agent,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    /// Node name within the deployment.
    pub name: String,
    pub listen: SocketAddr,
    /// Scenario file whose seed and node list fix every key and URL, so
    /// separately launched nodes agree without exchanging keys.
    pub deployment: PathBuf,
    /// Node name to base address, e.g. `"hub1": "http://127.0.0.1:7001"`.
    #[serde(default)]
    pub peers: BTreeMap<String, String>,
    /// Hub store file.
    #[serde(default)]
    pub store_path: Option<PathBuf>,
    /// Agent vault file. An existing vault starts locked.
    #[serde(default)]
    pub vault_path: Option<PathBuf>,
    /// Signed trust registry. Loaded when present, otherwise written.
    #[serde(default)]
    pub registry_path: Option<PathBuf>,
    /// PIN for a new vault; defaults to the deployment's agent PIN.
    #[serde(default)]
    pub pin: Option<String>,
    #[serde(default)]
    pub kdf: Option<KdfParams>,
    /// Static console assets served under `/console/`.
    #[serde(default)]
    pub console_dir: Option<PathBuf>,
    /// Hub inbox long-poll length for the agent.
    #[serde(default = "default_poll_secs")]
    pub poll_secs: u64,
}

fn default_poll_secs() -> u64 {
    20
}

impl ServeConfig {
    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut cfg.deployment);
        for p in [&mut cfg.store_path, &mut cfg.vault_path, &mut cfg.registry_path, &mut cfg.console_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        Ok(cfg)
    }
}

fn registry(cfg: &ServeConfig, plan: &Plan) -> anyhow::Result<Arc<TrustRegistry>> {
    let Some(path) = &cfg.registry_path else { return Ok(plan.registry.clone()) };
    if path.exists() {
        let r = TrustRegistry::load(path, None).map_err(|e| anyhow!("{}: {e}", path.display()))?;
        return Ok(Arc::new(r));
    }
    std::fs::write(path, serde_json::to_vec_pretty(plan.registry.as_ref())?)?;
    Ok(plan.registry.clone())
}

/// Calls `tick` once a second until the node is dropped.
fn ticker<T: Send + Sync + 'static>(node: &Arc<T>, tick: fn(&T)) {
    let weak: Weak<T> = Arc::downgrade(node);
    std::thread::spawn(move || loop {
        std::thread::sleep(Duration::from_secs(1));
        match weak.upgrade() {
            Some(n) => tick(&n),
            None => return,
        }
    });
}

/// Builds the node named in `cfg` and its router.
pub fn build(role: Role, cfg: &ServeConfig) -> anyhow::Result<Router> {
    let scenario = Scenario::load(&cfg.deployment).with_context(|| format!("loading {}", cfg.deployment.display()))?;
    let spec = scenario.node(&cfg.name).ok_or_else(|| anyhow!("no node `{}` in the deployment", cfg.name))?;
    let matches = matches!(
        (role, spec),
        (Role::Hub, NodeSpec::Hub { .. })
            | (Role::Provider, NodeSpec::Provider { .. })
            | (Role::Agent, NodeSpec::Agent { .. })
    );
    if !matches {
        bail!("node `{}` is not a {role:?}", cfg.name);
    }
    let mut plan = Plan::new(&scenario)?;
    let registry = registry(cfg, &plan)?;
    let client = HttpClient::new(BTreeMap::new());
    for (name, base) in &cfg.peers {
        let url = plan.urls.get(name).ok_or_else(|| anyhow!("unknown peer `{name}`"))?;
        client.add_peer(url.clone(), base.clone());
    }
    let transport: Arc<dyn Transport> = Arc::new(client);
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);

    match role {
        Role::Hub => {
            let i = plan.hubs.iter().position(|h| h.0 == cfg.name).expect("hub is planned");
            let (_, mut hub_cfg, _) = plan.hubs.swap_remove(i);
            hub_cfg.store_path = cfg.store_path.clone();
            let hub = Arc::new(HubNode::new(hub_cfg, registry, clock, transport));
            ticker(&hub, HubNode::tick);
            Ok(node_router(hub))
        }
        Role::Provider => {
            let i = plan.providers.iter().position(|p| p.0 == cfg.name).expect("provider is planned");
            let (_, p_cfg, seeds) = plan.providers.swap_remove(i);
            for (symbol, id) in &plan.usernames {
                if seeds.iter().any(|s| &s.identifier == id) {
                    println!("user @{symbol} = {id}");
                }
            }
            let provider = Arc::new(ProviderNode::new(p_cfg, &seeds, registry, clock, transport.clone()));
            ticker(&provider, ProviderNode::tick);
            Ok(node_router(provider))
        }
        Role::Agent => {
            let NodeSpec::Agent { pin, policies, .. } = spec else { unreachable!() };
            let kdf = cfg.kdf.unwrap_or_default();
            let config = plan.agent_config(&cfg.name, kdf, cfg.vault_path.clone()).expect("agent is planned");
            let agent = match &cfg.vault_path {
                Some(p) if p.exists() => UserAgent::locked(config, transport.clone(), clock),
                _ => {
                    let pin = cfg.pin.as_deref().unwrap_or(pin);
                    let mut agent = UserAgent::create(config, pin, transport.clone(), clock)?;
                    agent.set_policies(policies.clone())?;
                    agent
                }
            };
            let svc = AgentService::spawn(agent, transport, Some(Duration::from_secs(cfg.poll_secs)));
            Ok(agent_router(svc, cfg.console_dir.clone()))
        }
    }
}

/// The agent API, with `GET /events` upgraded to server-sent events when
/// the client asks for `text/event-stream`.
pub fn agent_router(svc: Arc<AgentService>, console: Option<PathBuf>) -> Router {
    let node: Arc<dyn Node> = svc.clone();
    let router = Router::new().route("/events", get(events).with_state(svc)).merge(node_router(node));
    match console {
        Some(dir) => router.nest_service("/console", ServeDir::new(dir)),
        None => router,
    }
}

async fn events(
    State(svc): State<Arc<AgentService>>,
    headers: HeaderMap,
    uri: Uri,
    Query(query): Query<BTreeMap<String, String>>,
) -> Response {
    let sse =
        headers.get(header::ACCEPT).and_then(|v| v.to_str().ok()).is_some_and(|a| a.contains("text/event-stream"));
    if !sse {
        return dispatch(svc, HttpMethod::GET, uri, query, Bytes::new()).await;
    }
    let resume =
        headers.get("last-event-id").and_then(|v| v.to_str().ok()).and_then(|s| s.parse::<usize>().ok()).map(|i| i + 1);
    let since = query.get("since").and_then(|s| s.parse().ok()).or(resume).unwrap_or(0);
    let log = svc.events().clone();
    let stream = futures::stream::unfold(since, move |next| {
        let log = log.clone();
        async move {
            let got = tokio::task::spawn_blocking(move || log.wait_since(next, Duration::from_secs(15))).await.ok()?;
            let after = got.last().map(|(i, _)| i + 1).unwrap_or(next);
            let batch: Vec<Result<Event, Infallible>> = got
                .into_iter()
                .map(|(i, e)| {
                    let v = serde_json::to_value(&e).unwrap_or_default();
                    let kind = v["kind"].as_str().unwrap_or("event").to_string();
                    Ok(Event::default().id(i.to_string()).event(kind).data(v.to_string()))
                })
                .collect();
            Some((futures::stream::iter(batch), after))
        }
    })
    .flatten();
    Sse::new(stream).keep_alive(KeepAlive::default()).into_response()
}

/// Serves until ctrl-c.
pub async fn serve(role: Role, cfg: ServeConfig) -> anyhow::Result<()> {
    let router = tokio::task::block_in_place(|| build(role, &cfg))?;
    let listener =
        tokio::net::TcpListener::bind(cfg.listen).await.with_context(|| format!("binding {}", cfg.listen))?;
    println!("{role:?} {} listening on http://{}", cfg.name, listener.local_addr()?);
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
