use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use racon_core::trainer::stream_seed;
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, Notify};
use tokio::task::JoinHandle;
use tokio::time::{interval, MissedTickBehavior};

use crate::error::{ServiceError, ServiceResult};
use crate::session::{ClientMessage, ServerMessage, Session, Shared};

pub const DEFAULT_PORT: u16 = 8090;

/// Reads `RACON_PORT`, falling back to 8090.
pub fn port_from_env() -> ServiceResult<u16> {
    match std::env::var("RACON_PORT") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| ServiceError::Invalid(format!("RACON_PORT must be a port number, got `{v}`"))),
        Err(_) => Ok(DEFAULT_PORT),
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub tick_hz: f64,
    /// Frames buffered per subscriber before the oldest are dropped.
    pub frame_buffer: usize,
    /// Seed for sessions created without one.
    pub seed: u64,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            tick_hz: 30.0,
            frame_buffer: 64,
            seed: 0,
        }
    }
}

/// A serialized frame and its tick, as fanned out to subscribers.
#[derive(Debug)]
struct Outgoing {
    tick: u64,
    text: String,
}

struct SessionHandle {
    mailbox: mpsc::UnboundedSender<ClientMessage>,
    frames: broadcast::Sender<Arc<Outgoing>>,
    subscribed: Arc<Notify>,
    task: JoinHandle<()>,
}

pub struct AppState {
    shared: Arc<Shared>,
    opts: ServeOptions,
    sessions: Mutex<HashMap<u64, SessionHandle>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(shared: Shared, opts: ServeOptions) -> Arc<Self> {
        Arc::new(Self {
            shared: Arc::new(shared),
            opts,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn shared(&self) -> &Arc<Shared> {
        &self.shared
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    /// Creates a session and spawns its tick loop, which waits for the
    /// first subscriber. Must run inside a tokio runtime.
    pub fn create_session(&self, db: Option<&str>, seed: Option<u64>) -> ServiceResult<(u64, String, u64)> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let db = match db {
            Some(d) => d.to_string(),
            None => self.shared.database_names().remove(0),
        };
        let seed = seed.unwrap_or_else(|| stream_seed(self.opts.seed, 0x5E55, id, 0));
        let session = Session::new(id, Arc::clone(&self.shared), &db, seed)?;
        let (mailbox, inbox) = mpsc::unbounded_channel();
        let (frames, _) = broadcast::channel(self.opts.frame_buffer.max(1));
        let subscribed = Arc::new(Notify::new());
        let period = Duration::from_secs_f64(1.0 / self.opts.tick_hz);
        let task = tokio::spawn(tick_loop(session, inbox, frames.clone(), Arc::clone(&subscribed), period));
        self.sessions.lock().unwrap().insert(
            id,
            SessionHandle {
                mailbox,
                frames,
                subscribed,
                task,
            },
        );
        Ok((id, db, seed))
    }

    pub fn delete_session(&self, id: u64) -> ServiceResult<()> {
        let h = self.sessions.lock().unwrap().remove(&id).ok_or(ServiceError::UnknownSession(id))?;
        h.task.abort();
        Ok(())
    }
}

async fn tick_loop(
    mut session: Session,
    mut inbox: mpsc::UnboundedReceiver<ClientMessage>,
    frames: broadcast::Sender<Arc<Outgoing>>,
    subscribed: Arc<Notify>,
    period: Duration,
) {
    subscribed.notified().await;
    let start = Instant::now();
    let mut clock = interval(period);
    clock.set_missed_tick_behavior(MissedTickBehavior::Burst);
    loop {
        clock.tick().await;
        let fired = start.elapsed().as_secs_f64() * 1e3;
        loop {
            match inbox.try_recv() {
                Ok(msg) => {
                    if let Err(e) = session.apply(&msg) {
                        tracing::warn!(session = session.id, "rejected message: {e}");
                    }
                }
                Err(mpsc::error::TryRecvError::Empty) => break,
                Err(mpsc::error::TryRecvError::Disconnected) => return,
            }
        }
        let frame = match session.tick() {
            Ok(mut f) => {
                f.server_ms = Some(fired);
                f
            }
            Err(e) => {
                tracing::error!(session = session.id, "tick failed: {e}");
                if let Err(e) = session.apply(&ClientMessage::Reset) {
                    tracing::error!(session = session.id, "reset failed: {e}");
                    return;
                }
                continue;
            }
        };
        let tick = frame.tick;
        let text = serde_json::to_string(&ServerMessage::Frame(frame)).expect("frame serializes");
        // no subscribers is fine; sending never blocks
        let _ = frames.send(Arc::new(Outgoing { tick, text }));
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/databases", get(list_databases))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", delete(delete_session))
        .route("/v1/sessions/{id}/stream", get(stream))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> ServiceResult<()> {
    let addr: SocketAddr = listener.local_addr()?;
    tracing::info!(%addr, "serving");
    axum::serve(listener, router(state)).await?;
    Ok(())
}

fn error_response(status: StatusCode, e: &ServiceError) -> Response {
    let mut body = json!({ "error": e.to_string() });
    if let ServiceError::UnknownDatabase { available, .. } = e {
        body["available"] = json!(available);
    }
    (status, Json(body)).into_response()
}

async fn list_databases(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let dbs: Vec<_> = app
        .shared
        .env
        .databases()
        .map(|d| {
            let ids = d.clips().iter().map(|c| c.clip_id);
            json!({
                "name": d.name(),
                "clips": d.len(),
                "frames_per_clip": d.frames_per_clip(),
                "endpoints": d.endpoint_count(),
                "id_min": ids.clone().min(),
                "id_max": ids.max(),
            })
        })
        .collect();
    Json(json!({ "databases": dbs }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    db: Option<String>,
    seed: Option<u64>,
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: CreateRequest = if body.iter().all(u8::is_ascii_whitespace) {
        CreateRequest::default()
    } else {
        match serde_json::from_slice(&body) {
            Ok(r) => r,
            Err(e) => return error_response(StatusCode::BAD_REQUEST, &ServiceError::Invalid(e.to_string())),
        }
    };
    match app.create_session(req.db.as_deref(), req.seed) {
        Ok((id, db, seed)) => (
            StatusCode::CREATED,
            Json(json!({ "session_id": id, "db": db, "seed": seed })),
        )
            .into_response(),
        Err(e) => error_response(StatusCode::BAD_REQUEST, &e),
    }
}

async fn delete_session(State(app): State<Arc<AppState>>, Path(id): Path<u64>) -> Response {
    match app.delete_session(id) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => error_response(StatusCode::NOT_FOUND, &e),
    }
}

async fn stream(ws: WebSocketUpgrade, State(app): State<Arc<AppState>>, Path(id): Path<u64>) -> Response {
    let link = {
        let sessions = app.sessions.lock().unwrap();
        sessions
            .get(&id)
            .map(|h| (h.mailbox.clone(), h.frames.subscribe(), Arc::clone(&h.subscribed)))
    };
    match link {
        Some((mailbox, frames, subscribed)) => {
            let shared = Arc::clone(&app.shared);
            ws.on_upgrade(move |socket| client_loop(socket, shared, mailbox, frames, subscribed))
        }
        None => error_response(StatusCode::NOT_FOUND, &ServiceError::UnknownSession(id)),
    }
}

async fn send(socket: &mut WebSocket, msg: &ServerMessage) -> bool {
    let text = serde_json::to_string(msg).expect("message serializes");
    socket.send(Message::Text(text.into())).await.is_ok()
}

async fn client_loop(
    mut socket: WebSocket,
    shared: Arc<Shared>,
    mailbox: mpsc::UnboundedSender<ClientMessage>,
    mut frames: broadcast::Receiver<Arc<Outgoing>>,
    subscribed: Arc<Notify>,
) {
    subscribed.notify_one();
    let mut last: Option<u64> = None;
    loop {
        tokio::select! {
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Text(text))) => {
                    let parsed = serde_json::from_str::<ClientMessage>(&text)
                        .map_err(|e| e.to_string())
                        .and_then(|m| shared.check(&m).map(|_| m).map_err(|e| e.to_string()));
                    match parsed {
                        Ok(m) => {
                            if mailbox.send(m).is_err() {
                                break;
                            }
                        }
                        Err(message) => {
                            if !send(&mut socket, &ServerMessage::Error { message }).await {
                                break;
                            }
                        }
                    }
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
            out = next_outgoing(&mut frames, &mut last) => match out {
                Some(texts) => {
                    for t in texts {
                        if socket.send(Message::Text(t.into())).await.is_err() {
                            return;
                        }
                    }
                }
                None => break,
            },
        }
    }
}

/// Next frame for a subscriber, preceded by a gap marker when frames were
/// dropped since `last`. `None` once the session is gone.
async fn next_outgoing(frames: &mut broadcast::Receiver<Arc<Outgoing>>, last: &mut Option<u64>) -> Option<Vec<String>> {
    loop {
        match frames.recv().await {
            Ok(f) => {
                let mut out = Vec::with_capacity(2);
                if let Some(l) = *last {
                    if f.tick > l + 1 {
                        let gap = ServerMessage::Gap { from: l + 1, to: f.tick - 1 };
                        out.push(serde_json::to_string(&gap).expect("message serializes"));
                    }
                }
                *last = Some(f.tick);
                out.push(f.text.clone());
                return Some(out);
            }
            // reported as a gap with the next delivered frame
            Err(broadcast::error::RecvError::Lagged(_)) => continue,
            Err(broadcast::error::RecvError::Closed) => return None,
        }
    }
}
