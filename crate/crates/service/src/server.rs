//! HTTP and WebSocket transport.

use std::net::SocketAddr;
use std::ops::ControlFlow;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use serde_json::Value;
use steer_core::diffusion::{Denoiser, DiffusionPolicy};
use steer_core::maze::{check_collision, MazeMap};
use steer_core::objectives::Interaction;
use steer_core::steering::{Method, Snapshot};
use steer_core::trajectory::Trajectory;
use tokio::sync::mpsc::UnboundedSender;
use tokio::task::{AbortHandle, JoinHandle};

use crate::error::{Result, ServiceError};
use crate::protocol::{wire_path, ClientMessage, ErrorCode, RequestId, ServerMessage};
use crate::session::{prepare_steer, ServiceConfig, Session, SteerJob};

/// Shared, immutable service state.
pub struct Service {
    pub policy: DiffusionPolicy<f32>,
    pub map: MazeMap,
    pub checkpoint_hash: String,
    pub config: ServiceConfig,
    /// Condition state of a fresh session.
    pub start: [f64; 2],
    sessions: AtomicU64,
}

impl Service {
    pub fn new(
        policy: DiffusionPolicy<f32>,
        map: MazeMap,
        checkpoint_hash: String,
        config: ServiceConfig,
        start: [f64; 2],
    ) -> Result<Self> {
        if policy.bounds() != map.bounds() {
            return Err(ServiceError::Config("policy bounds do not match the maze".into()));
        }
        if !(config.tick_hz.is_finite() && config.tick_hz > 0.0) {
            return Err(ServiceError::Config(format!("tick rate must be positive, got {}", config.tick_hz)));
        }
        config.defaults.validate(policy.schedule().inference_levels().len())?;
        if map.is_wall_at(start) || !map.bounds().contains(start) {
            return Err(ServiceError::Config(format!("start {start:?} is not free space")));
        }
        Ok(Self { policy, map, checkpoint_hash, config, start, sessions: AtomicU64::new(0) })
    }

    fn tick_period(&self) -> Duration {
        Duration::from_secs_f64(1.0 / self.config.tick_hz)
    }
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new().route("/map", get(map)).route("/health", get(health)).route("/ws", get(ws)).with_state(service)
}

pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(service)).await?;
    Ok(())
}

async fn map(State(svc): State<Arc<Service>>) -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], svc.map.to_asset())
}

async fn health(State(svc): State<Arc<Service>>) -> Json<Value> {
    Json(serde_json::json!({
        "status": "ok",
        "build": concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")),
        "checkpoint": svc.checkpoint_hash,
        "map": svc.map.id,
        "horizon": svc.policy.horizon(),
        "tick_hz": svc.config.tick_hz,
    }))
}

async fn ws(State(svc): State<Arc<Service>>, upgrade: WebSocketUpgrade) -> impl IntoResponse {
    upgrade.on_upgrade(move |socket| connection(socket, svc))
}

struct Running {
    cancel: Arc<AtomicBool>,
    handle: JoinHandle<()>,
}

/// State shared between the protocol loop and its background tasks.
struct Shared {
    session: Session,
    execution: Option<AbortHandle>,
    /// Bumped per execution so a superseded walker never touches the session.
    generation: u64,
}

struct Connection {
    svc: Arc<Service>,
    shared: Arc<Mutex<Shared>>,
    tx: UnboundedSender<ServerMessage>,
    active: Option<Running>,
}

async fn connection(socket: WebSocket, svc: Arc<Service>) {
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel::<ServerMessage>();
    let writer = tokio::spawn(async move {
        while let Some(m) = rx.recv().await {
            let text = serde_json::to_string(&m).expect("messages serialize");
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
    });
    let id = svc.sessions.fetch_add(1, Ordering::Relaxed);
    let session = Session::new(id, svc.checkpoint_hash.clone(), svc.start, 0);
    let mut conn = Connection { svc, shared: Arc::new(Mutex::new(Shared { session, execution: None, generation: 0 })), tx, active: None };
    while let Some(Ok(msg)) = stream.next().await {
        match msg {
            Message::Text(text) => conn.on_text(text.as_str()).await,
            Message::Close(_) => break,
            _ => {}
        }
    }
    conn.stop_execution();
    conn.cancel_active().await;
    drop(conn);
    let _ = writer.await;
}

impl Connection {
    fn send(&self, m: ServerMessage) {
        let _ = self.tx.send(m);
    }

    async fn on_text(&mut self, text: &str) {
        let msg = match serde_json::from_str::<ClientMessage>(text) {
            Ok(m) => m,
            Err(e) => {
                let id = serde_json::from_str::<Value>(text).ok().and_then(|v| v.get("id").cloned());
                self.send(ServerMessage::error(id, ErrorCode::BadMessage, e.to_string()));
                return;
            }
        };
        match msg {
            ClientMessage::Steer { id, interaction, config } => self.steer(id, &interaction, config.as_ref(), false).await,
            ClientMessage::Execute { id, index } => self.execute(id, index),
            ClientMessage::NudgeLive { id, prefix } => {
                let patch = serde_json::json!({ "method": Method::Op });
                self.steer(id, &Interaction::Nudge { prefix }, Some(&patch), true).await
            }
            ClientMessage::Reset { id, state, seed } => self.reset(id, state, seed).await,
        }
    }

    fn stop_execution(&self) {
        let mut shared = self.shared.lock().expect("session lock");
        if let Some(h) = shared.execution.take() {
            h.abort();
        }
        shared.generation += 1;
        shared.session.cursor = None;
    }

    /// Signals the in-flight request and waits for it to reach a step
    /// boundary, so its cancellation notice precedes any later frame.
    async fn cancel_active(&mut self) {
        if let Some(run) = self.active.take() {
            run.cancel.store(true, Ordering::Relaxed);
            let _ = run.handle.await;
        }
    }

    async fn steer(&mut self, id: RequestId, interaction: &Interaction, patch: Option<&Value>, execute: bool) {
        self.cancel_active().await;
        if execute {
            self.stop_execution();
        }
        let levels = self.svc.policy.schedule().inference_levels().len();
        let job = {
            let mut shared = self.shared.lock().expect("session lock");
            let horizon = self.svc.policy.horizon();
            let bounds = self.svc.map.bounds();
            prepare_steer(&mut shared.session, interaction, patch, &self.svc.config, &bounds, horizon, levels)
        };
        let job = match job {
            Ok(j) => j,
            Err((code, detail)) => return self.send(ServerMessage::error(id, code, detail)),
        };
        let cancel = Arc::new(AtomicBool::new(false));
        let handle = tokio::spawn(run_steer(
            self.svc.clone(),
            self.shared.clone(),
            self.tx.clone(),
            id,
            job,
            cancel.clone(),
            execute,
        ));
        self.active = Some(Running { cancel, handle });
    }

    fn execute(&mut self, id: RequestId, index: usize) {
        let plan = {
            let shared = self.shared.lock().expect("session lock");
            match &shared.session.batch {
                None => return self.send(ServerMessage::error(id, ErrorCode::NoBatch, "no batch to execute")),
                Some(b) if index >= b.trajectories.len() => {
                    let detail = format!("index {index} out of range for a batch of {}", b.trajectories.len());
                    return self.send(ServerMessage::error(id, ErrorCode::IndexOutOfRange, detail));
                }
                Some(b) => wire_path(&b.trajectories[index]),
            }
        };
        self.stop_execution();
        start_execution(&self.svc, &self.shared, &self.tx, id, plan);
    }

    async fn reset(&mut self, id: RequestId, state: [f64; 2], seed: u64) {
        let svc = self.svc.clone();
        if !state.iter().all(|v| v.is_finite()) || !svc.map.bounds().contains(state) {
            return self.send(ServerMessage::error(id, ErrorCode::InvalidRequest, format!("state {state:?} outside the workspace")));
        }
        self.cancel_active().await;
        self.stop_execution();
        self.shared.lock().expect("session lock").session.reset(state, seed);
        self.send(ServerMessage::Tick { id, state, t: 0, collision: svc.map.is_wall_at(state) });
    }
}

struct Streamer {
    id: RequestId,
    tx: UnboundedSender<ServerMessage>,
    cancel: Arc<AtomicBool>,
}

impl steer_core::steering::Observer<f32> for Streamer {
    fn on_step(&mut self, s: &Snapshot<'_, f32>) -> ControlFlow<()> {
        if self.cancel.load(Ordering::Relaxed) {
            return ControlFlow::Break(());
        }
        let trajectories = s.trajectories.iter().map(wire_path).collect();
        let _ = self.tx.send(ServerMessage::Snapshot { id: self.id.clone(), step: s.step, trajectories });
        ControlFlow::Continue(())
    }
}

async fn run_steer(
    svc: Arc<Service>,
    shared: Arc<Mutex<Shared>>,
    tx: UnboundedSender<ServerMessage>,
    id: RequestId,
    job: SteerJob,
    cancel: Arc<AtomicBool>,
    execute: bool,
) {
    let worker_svc = svc.clone();
    let mut streamer = Streamer { id: id.clone(), tx: tx.clone(), cancel };
    let seed = job.config.seed;
    let result = tokio::task::spawn_blocking(move || job.run(&worker_svc.policy, &worker_svc.map, &mut streamer)).await;
    match result {
        Ok(Ok(batch)) => {
            let _ = tx.send(ServerMessage::batch(id.clone(), &batch, seed));
            let plan = wire_path(&batch.trajectories[batch.executed_index()]);
            shared.lock().expect("session lock").session.batch = Some(batch);
            if execute {
                start_execution(&svc, &shared, &tx, id, plan);
            }
        }
        Ok(Err(steer_core::Error::Cancelled)) => {
            let _ = tx.send(ServerMessage::error(id, ErrorCode::Cancelled, "superseded by a newer request"));
        }
        Ok(Err(e)) => {
            let _ = tx.send(ServerMessage::error(id, ErrorCode::Sampler, e.to_string()));
        }
        Err(e) => {
            let _ = tx.send(ServerMessage::error(id, ErrorCode::Sampler, format!("sampler task failed: {e}")));
        }
    }
}

fn start_execution(
    svc: &Arc<Service>,
    shared: &Arc<Mutex<Shared>>,
    tx: &UnboundedSender<ServerMessage>,
    id: RequestId,
    plan: Vec<[f64; 2]>,
) {
    let mut guard = shared.lock().expect("session lock");
    if let Some(h) = guard.execution.take() {
        h.abort();
    }
    guard.generation += 1;
    let task = tokio::spawn(execute_plan(svc.clone(), shared.clone(), tx.clone(), id, plan, guard.generation));
    guard.execution = Some(task.abort_handle());
}

/// Walks the plan at the tick rate, reporting each state and whether the
/// segment leading to it hits a wall.
async fn execute_plan(
    svc: Arc<Service>,
    shared: Arc<Mutex<Shared>>,
    tx: UnboundedSender<ServerMessage>,
    id: RequestId,
    plan: Vec<[f64; 2]>,
    generation: u64,
) {
    let mut interval = tokio::time::interval(svc.tick_period());
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let bounds = svc.map.bounds();
    for t in 0..plan.len() {
        interval.tick().await;
        let state = plan[t];
        let collision = {
            let mut g = shared.lock().expect("session lock");
            if g.generation != generation {
                return;
            }
            let prev = if t == 0 { g.session.cond } else { plan[t - 1] };
            g.session.cond = state;
            g.session.cursor = Some(crate::session::Cursor { plan: plan.clone(), t });
            let seg = Trajectory { states: vec![bounds.clamp(prev), bounds.clamp(state)] };
            check_collision(&seg, &svc.map)
        };
        if tx.send(ServerMessage::Tick { id: id.clone(), state, t, collision }).is_err() {
            return;
        }
    }
    let mut g = shared.lock().expect("session lock");
    if g.generation == generation {
        g.session.cursor = None;
        g.execution = None;
    }
}
