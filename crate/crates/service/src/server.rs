//! HTTP front end: a ticking world session behind a small JSON API with a
//! server-sent frame stream.

use std::collections::VecDeque;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde_json::{json, Value};
use socnav_core::forecast::Forecaster;
use socnav_core::gesture::{GestureClass, HandLandmarks};
use socnav_core::sim::{load_scenario, DirectiveInput, ScenarioConfig, ScriptEntry, World};
use tokio::sync::broadcast;

pub const PORT_ENV: &str = "SOCNAV_PORT";
pub const DEFAULT_PORT: u16 = 8080;
/// Directives waiting for the next tick; the oldest is dropped when full.
pub const QUEUE_CAPACITY: usize = 16;

/// Port from `SOCNAV_PORT`, else the built-in default.
pub fn default_port() -> u16 {
    std::env::var(PORT_ENV).ok().and_then(|v| v.parse().ok()).unwrap_or(DEFAULT_PORT)
}

pub struct Session {
    world: World,
    scenario_dir: PathBuf,
    script: Vec<ScriptEntry>,
    next_script: usize,
    queue: VecDeque<DirectiveInput>,
    latest: Arc<str>,
}

impl Session {
    /// `scenario_dir` is where `/reset` looks up scenarios by name.
    pub fn new(config: ScenarioConfig, forecaster: Forecaster, scenario_dir: PathBuf, mut script: Vec<ScriptEntry>) -> Self {
        script.sort_by_key(|e| e.tick);
        let world = World::new(config, forecaster);
        let latest = frame_json(&world);
        Self { world, scenario_dir, script, next_script: 0, queue: VecDeque::new(), latest }
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn latest(&self) -> Arc<str> {
        self.latest.clone()
    }

    /// Queues a directive; returns whether an older one was dropped.
    pub fn enqueue(&mut self, d: DirectiveInput) -> bool {
        let mut dropped = false;
        if self.queue.len() >= QUEUE_CAPACITY {
            if let Some(old) = self.queue.pop_front() {
                log::warn!("directive queue full, dropping {old:?}");
                self.world.note_dropped(&old);
                dropped = true;
            }
        }
        self.queue.push_back(d);
        dropped
    }

    /// One world tick; returns the serialized frame.
    pub fn advance(&mut self) -> Arc<str> {
        while self.next_script < self.script.len() && self.script[self.next_script].tick <= self.world.tick() {
            self.world.submit_directive(self.script[self.next_script].directive.clone());
            self.next_script += 1;
        }
        for d in self.queue.drain(..) {
            self.world.submit_directive(d);
        }
        self.world.step();
        self.latest = frame_json(&self.world);
        self.latest.clone()
    }

    fn reset(&mut self, name: &str) -> Result<(), (StatusCode, Value)> {
        let valid = name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') && !name.is_empty();
        let path = self.scenario_dir.join(format!("{name}.json"));
        if !valid || !path.is_file() {
            return Err((
                StatusCode::NOT_FOUND,
                json!({"error": format!("unknown scenario '{name}'"), "available": available_scenarios(&self.scenario_dir)}),
            ));
        }
        let (config, forecaster) =
            load_scenario(&path).map_err(|e| (StatusCode::UNPROCESSABLE_ENTITY, json!({"error": e.to_string()})))?;
        log::info!("reset to scenario {name}");
        self.world = World::new(config, forecaster);
        self.script.clear();
        self.next_script = 0;
        self.queue.clear();
        self.latest = frame_json(&self.world);
        Ok(())
    }
}

fn frame_json(world: &World) -> Arc<str> {
    serde_json::to_string(&world.frame()).expect("frames serialize").into()
}

fn available_scenarios(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "json").then(|| p.file_stem()?.to_str().map(String::from))?
        })
        .collect();
    names.sort();
    names
}

#[derive(Clone)]
pub struct AppState {
    session: Arc<Mutex<Session>>,
    frames: broadcast::Sender<Arc<str>>,
}

impl AppState {
    pub fn new(session: Session) -> Self {
        let (frames, _) = broadcast::channel(64);
        Self { session: Arc::new(Mutex::new(session)), frames }
    }

    pub fn lock(&self) -> MutexGuard<'_, Session> {
        self.session.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Advances the world once and publishes the frame.
    pub fn tick(&self) {
        let frame = self.lock().advance();
        // no subscribers is fine
        let _ = self.frames.send(frame);
    }

    /// Ticks forever at `period`. Finished episodes keep publishing their
    /// final frame so streams stay live.
    pub fn spawn_ticker(&self, period: Duration) -> tokio::task::JoinHandle<()> {
        let state = self.clone();
        tokio::spawn(async move {
            let mut iv = tokio::time::interval(period);
            iv.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
            iv.tick().await;
            loop {
                iv.tick().await;
                state.tick();
            }
        })
    }
}

fn json_response(status: StatusCode, body: Arc<str>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body.to_string()).into_response()
}

async fn get_state(State(s): State<AppState>) -> Response {
    let latest = s.lock().latest();
    json_response(StatusCode::OK, latest)
}

async fn get_health(State(s): State<AppState>) -> Json<Value> {
    let g = s.lock();
    Json(json!({"status": "ok", "tick": g.world.tick(), "episode": g.world.status()}))
}

async fn get_log(State(s): State<AppState>) -> Response {
    let mut body = s.lock().world.log_lines().join("\n");
    body.push('\n');
    (StatusCode::OK, [(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
}

fn bad_request(msg: String) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({"error": msg, "valid_classes": GestureClass::ALL_NAMES}))).into_response()
}

/// Parses `{"class": name}` or `{"landmarks": [[x, y, z]; 21]}`.
pub fn parse_directive(body: &Value) -> Result<DirectiveInput, String> {
    let obj = body.as_object().ok_or("body must be a JSON object")?;
    match (obj.get("class"), obj.get("landmarks")) {
        (Some(c), None) => {
            let name = c.as_str().ok_or("class must be a string")?;
            let class = name.parse::<GestureClass>().map_err(|e| e.to_string())?;
            Ok(DirectiveInput::Class { class })
        }
        (None, Some(l)) => {
            let landmarks: HandLandmarks = serde_json::from_value(l.clone()).map_err(|e| format!("landmarks: {e}"))?;
            Ok(DirectiveInput::Landmarks { landmarks })
        }
        _ => Err("expected exactly one of 'class' or 'landmarks'".into()),
    }
}

async fn post_gesture(State(s): State<AppState>, body: Option<Json<Value>>) -> Response {
    let Some(Json(body)) = body else {
        return bad_request("body must be JSON".into());
    };
    match parse_directive(&body) {
        Ok(d) => {
            let mut g = s.lock();
            let dropped = g.enqueue(d);
            let queued = g.queue.len();
            (StatusCode::ACCEPTED, Json(json!({"queued": queued, "dropped_oldest": dropped}))).into_response()
        }
        Err(msg) => bad_request(msg),
    }
}

async fn post_reset(State(s): State<AppState>, body: Option<Json<Value>>) -> Response {
    let name = body.as_ref().and_then(|Json(b)| b.get("scenario")).and_then(Value::as_str);
    let Some(name) = name else {
        return (StatusCode::BAD_REQUEST, Json(json!({"error": "expected {\"scenario\": name}"}))).into_response();
    };
    let mut g = s.lock();
    match g.reset(name) {
        Ok(()) => json_response(StatusCode::OK, g.latest()),
        Err((code, body)) => (code, Json(body)).into_response(),
    }
}

async fn get_stream(State(s): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = s.frames.subscribe();
    let first = Some(s.lock().latest());
    let stream = futures::stream::unfold((rx, first), |(mut rx, first)| async move {
        if let Some(f) = first {
            return Some((Ok(Event::default().event("frame").data(f.as_ref())), (rx, None)));
        }
        loop {
            match rx.recv().await {
                Ok(f) => return Some((Ok(Event::default().event("frame").data(f.as_ref())), (rx, None))),
                Err(broadcast::error::RecvError::Lagged(n)) => log::debug!("stream consumer skipped {n} frames"),
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/state", get(get_state))
        .route("/stream", get(get_stream))
        .route("/gesture", post(post_gesture))
        .route("/reset", post(post_reset))
        .route("/log", get(get_log))
        .route("/healthz", get(get_health))
        .with_state(state)
}

/// Binds first so a taken port is reported before anything runs.
pub async fn bind(port: u16) -> anyhow::Result<tokio::net::TcpListener> {
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    tokio::net::TcpListener::bind(addr).await.map_err(|e| anyhow::anyhow!("cannot listen on {addr}: {e}"))
}

pub async fn serve(listener: tokio::net::TcpListener, state: AppState, period: Duration) -> anyhow::Result<()> {
    let ticker = state.spawn_ticker(period);
    log::info!("listening on {}", listener.local_addr()?);
    let r = axum::serve(listener, router(state)).with_graceful_shutdown(async {
        let _ = tokio::signal::ctrl_c().await;
    });
    let out = r.await;
    ticker.abort();
    Ok(out?)
}
