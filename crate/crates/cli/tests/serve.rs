use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

const NODES: [(&str, &str); 6] = [
    ("hub1", "hub"),
    ("email", "provider"),
    ("gov", "provider"),
    ("telco", "provider"),
    ("bank", "provider"),
    ("alice", "agent"),
];

struct Running {
    child: Child,
}

impl Drop for Running {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// Starts a node and waits for it to listen; returns any `user @x = id`
/// lines it printed first.
fn launch(role: &str, config: &Path) -> (Running, BTreeMap<String, String>) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_d2sim"))
        .args(["serve", "--role", role, "--config", config.to_str().unwrap()])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(stdout).lines().map_while(Result::ok) {
            if tx.send(line).is_err() {
                return;
            }
        }
    });
    let running = Running { child };
    let mut users = BTreeMap::new();
    loop {
        let line = rx.recv_timeout(Duration::from_secs(20)).expect("node starts");
        if line.contains("listening on") {
            return (running, users);
        }
        if let Some(rest) = line.strip_prefix("user @") {
            let (sym, id) = rest.split_once(" = ").unwrap();
            users.insert(sym.to_string(), id.to_string());
        }
    }
}

fn http() -> ureq::Agent {
    d2sim::http::http_agent(Duration::from_secs(20))
}

fn get(url: &str) -> Value {
    http().get(url).call().unwrap().body_mut().read_json().unwrap()
}

fn post(url: &str, body: Value) -> Value {
    http().post(url).send_json(&body).unwrap().body_mut().read_json().unwrap()
}

fn wait_for<T>(what: &str, mut f: impl FnMut() -> Option<T>) -> T {
    let until = Instant::now() + Duration::from_secs(10);
    while Instant::now() < until {
        if let Some(v) = f() {
            return v;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    panic!("timed out waiting for {what}");
}

struct Net {
    dir: tempfile::TempDir,
    base: BTreeMap<String, String>,
    running: BTreeMap<String, Running>,
    users: BTreeMap<String, String>,
}

impl Net {
    fn config(&self, name: &str) -> PathBuf {
        self.dir.path().join(format!("{name}.json"))
    }

    fn start(&mut self, name: &str) {
        let role = NODES.iter().find(|n| n.0 == name).unwrap().1;
        let (r, users) = launch(role, &self.config(name));
        self.users.extend(users);
        self.running.insert(name.to_string(), r);
    }

    fn url(&self, name: &str, path: &str) -> String {
        format!("{}{path}", self.base[name])
    }
}

fn network() -> Net {
    let dir = tempfile::tempdir().unwrap();
    let deployment = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/kyc_direct.json");
    let listen: BTreeMap<String, u16> = NODES.iter().map(|(n, _)| (n.to_string(), free_port())).collect();
    let base: BTreeMap<String, String> =
        listen.iter().map(|(n, p)| (n.clone(), format!("http://127.0.0.1:{p}"))).collect();
    let peers: BTreeMap<&String, &String> = base.iter().filter(|(n, _)| n.as_str() != "alice").collect();
    for (name, _) in NODES {
        let mut cfg = json!({
            "name": name,
            "listen": format!("127.0.0.1:{}", listen[name]),
            "deployment": deployment,
            "peers": peers,
        });
        match name {
            "hub1" => cfg["store_path"] = json!("hub1.store"),
            "alice" => {
                cfg["vault_path"] = json!("alice.vault");
                cfg["registry_path"] = json!("registry.json");
                cfg["kdf"] = json!({"m_cost_kib": 64, "t_cost": 1, "p_cost": 1});
                cfg["poll_secs"] = json!(1);
            }
            _ => {}
        }
        std::fs::write(dir.path().join(format!("{name}.json")), serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    }
    let mut net = Net { dir, base, running: BTreeMap::new(), users: BTreeMap::new() };
    for (name, _) in NODES {
        net.start(name);
    }
    net
}

fn register_all(net: &Net) {
    for (provider, user) in [("email", "alice_mail"), ("gov", "alice_gov"), ("telco", "alice_telco")] {
        let row = post(
            &net.url("alice", "/register"),
            json!({
                "provider": format!("https://{provider}.com"),
                "identifier": net.users[user],
                "password": format!("pw-{user}"),
                "hub": "https://hub1.example",
            }),
        );
        assert_eq!(row["d2vc"]["issuer"], format!("https://{provider}.com"));
    }
}

fn start_kyc(net: &Net) -> String {
    let started = post(
        &net.url("bank", "/kyc"),
        json!({
            "identifier": net.users["alice_mail"],
            "bootstrap": "https://email.com",
            "mode": "direct",
            "predicates": [
                {"kind": "age_over", "years": 18},
                {"kind": "address_matches", "address": "12 rue de la paix 75002 PARIS"},
            ],
        }),
    );
    assert_eq!(started["state"], "pending");
    started["request_id"].as_str().unwrap().to_string()
}

fn pending_alert(net: &Net, id: &str) -> Value {
    wait_for("alert at the agent", || {
        get(&net.url("alice", "/pending")).as_array().unwrap().iter().find(|p| p["alert"]["request_id"] == id).cloned()
    })
}

fn kyc_state(net: &Net, id: &str, want: &str) -> Value {
    wait_for(want, || {
        let r = get(&net.url("bank", &format!("/kyc/{id}")));
        (r["state"] == want).then_some(r)
    })
}

/// Reads server-sent events until one of kind `until` arrives.
fn sse_until(url: String, until: &'static str) -> mpsc::Receiver<Vec<String>> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let resp = http().get(&url).header("accept", "text/event-stream").call().unwrap();
        let mut kinds = Vec::new();
        for line in BufReader::new(resp.into_body().into_reader()).lines().map_while(Result::ok) {
            if let Some(kind) = line.strip_prefix("event: ") {
                kinds.push(kind.to_string());
                if kind == until {
                    break;
                }
            }
        }
        let _ = tx.send(kinds);
    });
    rx
}

#[test]
fn console_flow_over_real_processes() {
    let mut net = network();
    register_all(&net);
    let ids = get(&net.url("alice", "/identities"));
    assert_eq!(ids.as_array().unwrap().len(), 3);

    let events = sse_until(net.url("alice", "/events"), "decided");

    // Approve, picking gov for age and telco for address.
    let id = start_kyc(&net);
    let alert = pending_alert(&net, &id);
    assert_eq!(alert["alert"]["requester"], "https://bank.com");
    assert_eq!(alert["alert"]["candidates"]["Age Validation"], json!(["https://gov.com"]));
    let selection = json!({"Age Validation": "https://gov.com", "Address Validation": "https://telco.com"});
    post(&net.url("alice", "/decide"), json!({"request_id": id, "verdict": {"approve": {"selection": selection}}}));
    let done = kyc_state(&net, &id, "complete");
    assert_eq!(done["verdict"], true);
    let results: Vec<&Value> = done["attestations"].as_array().unwrap().iter().map(|a| &a["result"]).collect();
    assert_eq!(results, [true, true]);

    let kinds = events.recv_timeout(Duration::from_secs(10)).expect("event stream");
    assert!(kinds.contains(&"alert".to_string()), "{kinds:?}");
    assert_eq!(kinds.last().map(String::as_str), Some("decided"));

    // Reject the next one.
    let id = start_kyc(&net);
    pending_alert(&net, &id);
    post(&net.url("alice", "/decide"), json!({"request_id": id, "verdict": "reject"}));
    kyc_state(&net, &id, "denied");

    // The vault survives a restart, locked until the PIN is given.
    drop(net.running.remove("alice"));
    let vault = std::fs::read(net.dir.path().join("alice.vault")).unwrap();
    for id in net.users.values() {
        assert!(!vault.windows(id.len()).any(|w| w == id.as_bytes()));
    }
    assert!(net.dir.path().join("registry.json").exists());
    net.start("alice");
    let locked = http().get(&net.url("alice", "/identities")).call().unwrap();
    assert_eq!(locked.status(), 423);
    let bad = http().post(&net.url("alice", "/unlock")).send_json(json!({"pin": "0000"})).unwrap();
    assert!(bad.status().is_client_error());
    post(&net.url("alice", "/unlock"), json!({"pin": "4821"}));
    assert_eq!(get(&net.url("alice", "/identities")).as_array().unwrap().len(), 3);

    let store = std::fs::read(net.dir.path().join("hub1.store")).unwrap();
    for id in net.users.values() {
        assert!(!store.windows(id.len()).any(|w| w == id.as_bytes()));
    }
}

#[test]
fn serve_rejects_a_role_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let deployment = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/kyc_direct.json");
    let cfg = json!({"name": "gov", "listen": "127.0.0.1:0", "deployment": deployment});
    let path = dir.path().join("gov.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_d2sim"))
        .args(["serve", "--role", "hub", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not a Hub"));
}
