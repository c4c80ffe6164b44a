//! Long-running agent: one actor thread owns the [`UserAgent`]; the console
//! API and the inbox poller only enqueue work for it.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AgentEvent, Policy, SealedVault, UserAgent};
use crate::api::Client;
use crate::error::{ApiError, ErrorCode};
use crate::model::{HubAddress, NodeUrl};
use crate::transport::{reply, ApiRequest, Method, Node, Transport};
use crate::wire::{AccountId, Ack, RequestId, Verdict};

pub type AgentCommand = Box<dyn FnOnce(&mut UserAgent) + Send>;

/// Append-only event history with blocking reads, backing `GET /events`.
#[derive(Default)]
pub struct EventLog {
    entries: Mutex<Vec<AgentEvent>>,
    signal: Condvar,
}

impl EventLog {
    pub fn push(&self, events: impl IntoIterator<Item = AgentEvent>) {
        let mut e = self.entries.lock().unwrap();
        let before = e.len();
        e.extend(events);
        if e.len() > before {
            self.signal.notify_all();
        }
    }

    /// Events with index ≥ `since`, waiting up to `wait` for at least one.
    pub fn wait_since(&self, since: usize, wait: Duration) -> Vec<(usize, AgentEvent)> {
        let guard = self.entries.lock().unwrap();
        let (guard, _) = self.signal.wait_timeout_while(guard, wait, |e| e.len() <= since).unwrap();
        guard.iter().enumerate().skip(since).map(|(i, e)| (i, e.clone())).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecideBody {
    pub request_id: RequestId,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterBody {
    pub provider: NodeUrl,
    pub identifier: String,
    pub password: String,
    pub hub: HubAddress,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MigrateBody {
    pub target_hub: HubAddress,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PinBody {
    pub pin: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportBody {
    pub vault: SealedVault,
    pub pin: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventsResponse {
    pub next: usize,
    pub events: Vec<AgentEvent>,
}

pub struct AgentService {
    url: NodeUrl,
    commands: Mutex<Sender<AgentCommand>>,
    events: Arc<EventLog>,
    accounts: Arc<Mutex<Vec<(HubAddress, AccountId)>>>,
    stop: Arc<AtomicBool>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl AgentService {
    /// Starts the actor and, when `poll_wait` is set, an inbox poller that
    /// long-polls every hub account.
    pub fn spawn(agent: UserAgent, transport: Arc<dyn Transport>, poll_wait: Option<Duration>) -> Arc<Self> {
        let url = agent.url().clone();
        let (tx, rx) = mpsc::channel::<AgentCommand>();
        let events = Arc::new(EventLog::default());
        let accounts = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));

        let actor = {
            let events = events.clone();
            let accounts = accounts.clone();
            std::thread::spawn(move || {
                let mut agent = agent;
                let mut published = agent.events().len();
                while let Ok(cmd) = rx.recv() {
                    cmd(&mut agent);
                    let all = agent.events();
                    events.push(all[published.min(all.len())..].iter().cloned());
                    published = all.len();
                    if let Ok(v) = agent.vault() {
                        *accounts.lock().unwrap() =
                            v.accounts.iter().map(|(h, a)| (h.clone(), a.account_id.clone())).collect();
                    }
                }
            })
        };
        let svc =
            Arc::new(Self { url, commands: Mutex::new(tx), events, accounts, stop, threads: Mutex::new(vec![actor]) });
        if let Some(wait) = poll_wait {
            let weak = Arc::downgrade(&svc);
            let stop = svc.stop.clone();
            let accounts = svc.accounts.clone();
            let from = svc.url.clone();
            let poller = std::thread::spawn(move || {
                let mut seen = std::collections::BTreeSet::new();
                while !stop.load(Ordering::Relaxed) {
                    let targets = accounts.lock().unwrap().clone();
                    let mut fresh = false;
                    for (hub, account_id) in targets {
                        let client = Client::new(transport.as_ref(), &from);
                        let alerts = match client.inbox(&hub, &account_id, wait.as_secs()) {
                            Ok(r) => r.alerts,
                            Err(e) => {
                                log::debug!("inbox {hub}: {e}");
                                continue;
                            }
                        };
                        let new: Vec<_> = alerts.into_iter().filter(|a| seen.insert(a.request_id.clone())).collect();
                        if new.is_empty() {
                            continue;
                        }
                        fresh = true;
                        let Some(svc) = weak.upgrade() else { return };
                        svc.submit(move |agent| {
                            if let Err(e) = agent.handle_alerts(&hub, new) {
                                log::warn!("handling alerts: {e}");
                            }
                        });
                    }
                    if !fresh {
                        std::thread::sleep(Duration::from_millis(500));
                    }
                }
            });
            svc.threads.lock().unwrap().push(poller);
        }
        // Publish the initial account list.
        svc.submit(|_| {});
        svc
    }

    pub fn events(&self) -> &Arc<EventLog> {
        &self.events
    }

    fn submit(&self, f: impl FnOnce(&mut UserAgent) + Send + 'static) {
        let _ = self.commands.lock().unwrap().send(Box::new(f));
    }

    /// Runs `f` on the actor and waits for its result.
    pub fn run<T: Send + 'static>(
        &self,
        f: impl FnOnce(&mut UserAgent) -> Result<T, ApiError> + Send + 'static,
    ) -> Result<T, ApiError> {
        let (tx, rx) = mpsc::channel();
        self.submit(move |agent| {
            let _ = tx.send(f(agent));
        });
        rx.recv().map_err(|_| ApiError::new(ErrorCode::Internal, "agent stopped"))?
    }

    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::Relaxed);
        // Replacing the sender closes the actor's channel.
        let (tx, _) = mpsc::channel();
        *self.commands.lock().unwrap() = tx;
        for t in self.threads.lock().unwrap().drain(..) {
            let _ = t.join();
        }
    }

    fn route(&self, req: &ApiRequest) -> Result<Value, ApiError> {
        let segs = req.segments();
        match (req.method, segs.as_slice()) {
            (Method::Get, ["pending"]) => {
                let p = self.run(|a| a.vault().map(|_| a.pending()))?;
                reply(p)
            }
            (Method::Post, ["decide"]) => {
                let b: DecideBody = req.body_as()?;
                self.run(move |a| a.decide(&b.request_id, b.verdict))?;
                reply(Ack::OK)
            }
            (Method::Get, ["identities"]) => reply(self.run(|a| a.identities())?),
            (Method::Post, ["register"]) => {
                let b: RegisterBody = req.body_as()?;
                reply(self.run(move |a| a.register_identity(&b.provider, &b.identifier, &b.password, &b.hub))?)
            }
            (Method::Post, ["renew"]) => reply(self.run(|a| a.renew_all())?),
            (Method::Post, ["migrate"]) => {
                let b: MigrateBody = req.body_as()?;
                reply(self.run(move |a| a.migrate(&b.target_hub))?)
            }
            (Method::Post, ["unlock"]) => {
                let b: PinBody = req.body_as()?;
                self.run(move |a| a.unlock(&b.pin))?;
                reply(Ack::OK)
            }
            (Method::Post, ["export"]) => {
                let b: PinBody = req.body_as()?;
                reply(self.run(move |a| a.export_vault(&b.pin))?)
            }
            (Method::Post, ["import"]) => {
                let b: ImportBody = req.body_as()?;
                self.run(move |a| a.import_vault(&b.vault, &b.pin))?;
                reply(Ack::OK)
            }
            (Method::Get, ["policies"]) => reply(self.run(|a| a.vault().map(|v| v.policies.clone()))?),
            (Method::Put, ["policies"]) => {
                let b: Vec<Policy> = req.body_as()?;
                self.run(move |a| a.set_policies(b))?;
                reply(Ack::OK)
            }
            (Method::Get, ["events"]) => {
                let since = req.query.get("since").and_then(|s| s.parse().ok()).unwrap_or(0);
                let wait = req.query.get("wait").and_then(|s| s.parse().ok()).unwrap_or(0u64).min(60);
                let got = self.events.wait_since(since, Duration::from_secs(wait));
                let next = got.last().map(|(i, _)| i + 1).unwrap_or(since);
                reply(EventsResponse { next, events: got.into_iter().map(|(_, e)| e).collect() })
            }
            _ => Err(ApiError::not_found(&req.path)),
        }
    }
}

impl Node for AgentService {
    fn base_url(&self) -> &NodeUrl {
        &self.url
    }

    fn handle(&self, req: &ApiRequest) -> Result<Value, ApiError> {
        self.route(req)
    }
}
