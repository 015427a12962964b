//! The mock EHR / sensor HTTP server.
//!
//! Serves the cursor envelope `{"cursor": "<idx>", "items": [...]}` from
//! `GET /api/patients?since=<cursor>&limit=<n>` (or `/api/sensors`),
//! records score deliveries at `POST /emr/score` and alert webhooks at
//! `POST /alerts`, and injects faults exactly per script. Cursor state is
//! serialized per scenario; documents are pre-rendered at construction so
//! request interleaving cannot perturb content.

use std::io::Read;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::{Map, Value};

use crate::generator::{ehr_schedule, sensor_schedule, Schedule};
use crate::scenario::{Fault, ScenarioScript};

/// A recorded POST (sink delivery or alert webhook).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordedPost {
    pub path: String,
    pub body: String,
}

/// Which schedule a server serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServeMode {
    Ehr,
    Sensor,
}

struct ServerState {
    script: ScenarioScript,
    schedule: Schedule,
    /// Items visible to pollers; grows by one cycle per release.
    released: Mutex<Vec<Value>>,
    released_cycles: Mutex<usize>,
    /// Data GET counter driving the fault schedule (1-based).
    data_requests: AtomicU64,
    sink: Mutex<Vec<RecordedPost>>,
    webhook: Mutex<Vec<RecordedPost>>,
    webhook_failing: AtomicBool,
    /// Raw response bodies served on the data endpoint, in order.
    served: Mutex<Vec<String>>,
}

/// Handle to a running mock server; shuts down on drop.
pub struct MockServer {
    port: u16,
    mode: ServeMode,
    state: Arc<ServerState>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

/// Serve the clinical schedule of a script on an ephemeral port.
pub fn serve(script: &ScenarioScript) -> std::io::Result<MockServer> {
    MockServer::start(script.clone(), ServeMode::Ehr)
}

/// Serve the sensor schedule of a script on an ephemeral port.
pub fn sensor_stream(script: &ScenarioScript) -> std::io::Result<MockServer> {
    MockServer::start(script.clone(), ServeMode::Sensor)
}

impl MockServer {
    fn start(script: ScenarioScript, mode: ServeMode) -> std::io::Result<Self> {
        let schedule = match mode {
            ServeMode::Ehr => ehr_schedule(&script),
            ServeMode::Sensor => sensor_schedule(&script),
        };
        let server = tiny_http::Server::http("127.0.0.1:0")
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        let port = match server.server_addr() {
            tiny_http::ListenAddr::IP(addr) => addr.port(),
            _ => unreachable!("bound to an IP listener"),
        };
        let state = Arc::new(ServerState {
            script,
            schedule,
            released: Mutex::new(Vec::new()),
            released_cycles: Mutex::new(0),
            data_requests: AtomicU64::new(0),
            sink: Mutex::new(Vec::new()),
            webhook: Mutex::new(Vec::new()),
            webhook_failing: AtomicBool::new(false),
            served: Mutex::new(Vec::new()),
        });
        let stop = Arc::new(AtomicBool::new(false));

        let loop_state = state.clone();
        let loop_stop = stop.clone();
        let thread = std::thread::spawn(move || {
            while !loop_stop.load(Ordering::SeqCst) {
                match server.recv_timeout(std::time::Duration::from_millis(25)) {
                    Ok(Some(request)) => handle(&loop_state, request),
                    Ok(None) => {}
                    Err(_) => break,
                }
            }
        });

        Ok(Self {
            port,
            mode,
            state,
            stop,
            thread: Some(thread),
        })
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    /// Data endpoint URL (the source endpoint for configs).
    pub fn api_url(&self) -> String {
        match self.mode {
            ServeMode::Ehr => format!("http://127.0.0.1:{}/api/patients", self.port),
            ServeMode::Sensor => format!("http://127.0.0.1:{}/api/sensors", self.port),
        }
    }

    pub fn sink_url(&self) -> String {
        format!("http://127.0.0.1:{}/emr/score", self.port)
    }

    pub fn webhook_url(&self) -> String {
        format!("http://127.0.0.1:{}/alerts", self.port)
    }

    /// Release the next scheduled cycle's documents to pollers.
    /// Returns how many documents were released.
    pub fn release_cycle(&self) -> usize {
        let mut cycles = self.state.released_cycles.lock().unwrap();
        let Some(docs) = self.state.schedule.docs.get(*cycles) else {
            return 0;
        };
        let mut released = self.state.released.lock().unwrap();
        released.extend(docs.iter().cloned());
        *cycles += 1;
        docs.len()
    }

    pub fn release_all(&self) -> usize {
        let mut total = 0;
        loop {
            let n = self.release_cycle();
            if n == 0 {
                break;
            }
            total += n;
        }
        total
    }

    pub fn released_count(&self) -> usize {
        self.state.released.lock().unwrap().len()
    }

    pub fn schedule(&self) -> &Schedule {
        &self.state.schedule
    }

    pub fn sink_posts(&self) -> Vec<RecordedPost> {
        self.state.sink.lock().unwrap().clone()
    }

    pub fn webhook_posts(&self) -> Vec<RecordedPost> {
        self.state.webhook.lock().unwrap().clone()
    }

    pub fn set_webhook_failing(&self, failing: bool) {
        self.state.webhook_failing.store(failing, Ordering::SeqCst);
    }

    /// Bodies served on the data endpoint, in arrival order.
    pub fn served_bodies(&self) -> Vec<String> {
        self.state.served.lock().unwrap().clone()
    }

    pub fn data_request_count(&self) -> u64 {
        self.state.data_requests.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

fn query_param(url: &str, name: &str) -> Option<String> {
    let (_, query) = url.split_once('?')?;
    for pair in query.split('&') {
        let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
        if k == name {
            return Some(v.to_string());
        }
    }
    None
}

fn respond_json(request: tiny_http::Request, status: u16, body: String) {
    let response = tiny_http::Response::from_string(body)
        .with_status_code(status)
        .with_header(
            tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
                .expect("static header"),
        );
    let _ = request.respond(response);
}

fn handle(state: &Arc<ServerState>, mut request: tiny_http::Request) {
    let url = request.url().to_string();
    let path = url.split('?').next().unwrap_or("").to_string();
    let method = request.method().clone();

    match (method, path.as_str()) {
        (tiny_http::Method::Get, "/api/patients") | (tiny_http::Method::Get, "/api/sensors") => {
            handle_data(state, request, &url)
        }
        (tiny_http::Method::Post, "/emr/score") => {
            let mut body = String::new();
            let _ = request.as_reader().read_to_string(&mut body);
            state.sink.lock().unwrap().push(RecordedPost { path, body });
            respond_json(request, 200, "{\"ok\":true}".to_string());
        }
        (tiny_http::Method::Post, "/alerts") => {
            let mut body = String::new();
            let _ = request.as_reader().read_to_string(&mut body);
            if state.webhook_failing.load(Ordering::SeqCst) {
                respond_json(request, 503, "{\"ok\":false}".to_string());
            } else {
                state.webhook.lock().unwrap().push(RecordedPost { path, body });
                respond_json(request, 200, "{\"ok\":true}".to_string());
            }
        }
        _ => respond_json(request, 404, "{\"error\":\"not found\"}".to_string()),
    }
}

fn handle_data(state: &Arc<ServerState>, request: tiny_http::Request, url: &str) {
    // Auth check first; authentication failures do not consume a fault slot.
    if let Some(expected) = &state.script.expected_token {
        let authorized = request
            .headers()
            .iter()
            .find(|h| h.field.equiv("Authorization"))
            .map(|h| h.value.as_str() == format!("Bearer {expected}"))
            .unwrap_or(false);
        if !authorized {
            respond_json(request, 401, "{\"error\":\"unauthorized\"}".to_string());
            return;
        }
    }

    let n = state.data_requests.fetch_add(1, Ordering::SeqCst) + 1;
    let mut malformed_first = false;
    for fault in &state.script.faults {
        match fault {
            Fault::Http500 { request: at } if *at == n => {
                respond_json(request, 500, "{\"error\":\"injected\"}".to_string());
                return;
            }
            Fault::Silent {
                from_request,
                to_request,
            } if (*from_request..=*to_request).contains(&n) => {
                let since = query_param(url, "since").unwrap_or_default();
                let body = envelope(&since, Vec::new());
                state.served.lock().unwrap().push(body.clone());
                respond_json(request, 200, body);
                return;
            }
            Fault::MalformedItem { request: at } if *at == n => malformed_first = true,
            _ => {}
        }
    }

    let since: usize = query_param(url, "since")
        .and_then(|s| if s.is_empty() { None } else { s.parse().ok() })
        .unwrap_or(0);
    let limit: usize = query_param(url, "limit")
        .and_then(|s| s.parse().ok())
        .unwrap_or(usize::MAX);

    let released = state.released.lock().unwrap();
    let end = released.len().min(since.saturating_add(limit));
    let mut items: Vec<Value> = released
        .get(since.min(released.len())..end)
        .unwrap_or(&[])
        .to_vec();
    drop(released);

    if malformed_first {
        if let Some(first) = items.first_mut() {
            let text = serde_json::to_string(first).expect("doc serializes");
            let cut = text.len() * 3 / 5;
            *first = Value::String(format!("{}!!!", &text[..cut]));
        }
    }

    let cursor = if items.is_empty() { since } else { end };
    let body = envelope(&cursor.to_string(), items);
    state.served.lock().unwrap().push(body.clone());
    respond_json(request, 200, body);
}

fn envelope(cursor: &str, items: Vec<Value>) -> String {
    let mut obj = Map::new();
    obj.insert("cursor".into(), Value::String(cursor.to_string()));
    obj.insert("items".into(), Value::Array(items));
    serde_json::to_string(&Value::Object(obj)).expect("envelope serializes")
}
