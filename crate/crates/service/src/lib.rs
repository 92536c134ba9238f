//! HTTP front end for a running therapy session.
//!
//! A therapist console replays the patient's last episodes, posts corrective
//! force samples, and advances the session one iteration at a time. All
//! session mutations go through a single advance lock; readers always see a
//! complete iteration.

use aan_core::linalg::Point;
use aan_core::policy::{run_iteration, IterationMetrics, TherapySession};
use aan_core::scenario::Scenario;
use aan_core::simdyn::PatientModel;
use aan_core::task::Task;
use aan_core::trajectory::{ForceEvent, ProbTrajectory, TimedTrajectory, ViaPoint};
use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};
use tokio::sync::watch;
use tower_http::cors::{AllowOrigin, CorsLayer};

/// Most samples returned for any trajectory.
pub const DISPLAY_SAMPLES: usize = 500;

#[derive(Debug)]
pub enum ServiceError {
    BadRequest(String),
    Busy,
    Unprocessable(String),
    NotFound(String),
    Internal(String),
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, message) = match self {
            Self::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            Self::Busy => (StatusCode::CONFLICT, "an iteration is already running".to_string()),
            Self::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
            Self::NotFound(m) => (StatusCode::NOT_FOUND, m),
            Self::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (status, Json(serde_json::json!({ "error": message }))).into_response()
    }
}

impl From<aan_core::Error> for ServiceError {
    fn from(e: aan_core::Error) -> Self {
        Self::Internal(e.to_string())
    }
}

struct Shared {
    scenario: Scenario,
    task: Task,
    patient: PatientModel,
    session: RwLock<Arc<TherapySession>>,
    pending: Mutex<Vec<ForceEvent>>,
    advance: tokio::sync::Mutex<()>,
    version: watch::Sender<u64>,
}

/// Cheaply cloneable handle on the served session.
#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

impl AppState {
    /// Validates the scenario and runs the bootstrap iteration.
    pub fn new(scenario: Scenario) -> aan_core::Result<Self> {
        scenario.validate()?;
        let task = scenario.build_task()?;
        let patient = scenario.build_patient(&task);
        let session = TherapySession::bootstrap(&scenario.session_config(), &task, &patient)?;
        let (version, _) = watch::channel(0);
        Ok(Self {
            shared: Arc::new(Shared {
                scenario,
                task,
                patient,
                session: RwLock::new(Arc::new(session)),
                pending: Mutex::new(Vec::new()),
                advance: tokio::sync::Mutex::new(()),
                version,
            }),
        })
    }

    pub fn session(&self) -> Arc<TherapySession> {
        self.shared.session.read().expect("session lock").clone()
    }

    pub fn version(&self) -> u64 {
        *self.shared.version.borrow()
    }

    fn publish(&self, session: TherapySession) {
        *self.shared.session.write().expect("session lock") = Arc::new(session);
        self.shared.version.send_modify(|v| *v += 1);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Band {
    pub times: Vec<f64>,
    pub mean: Vec<Vec<f64>>,
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Polyline {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskView {
    pub name: String,
    pub keypoint_times: Vec<f64>,
    pub desired: Polyline,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationVias {
    pub iteration: usize,
    pub vias: Vec<ViaPoint>,
}

/// Everything the console draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateView {
    pub version: u64,
    pub iteration: usize,
    pub iterations: usize,
    pub done: bool,
    pub duration: f64,
    pub force_threshold: f64,
    pub task: TaskView,
    pub preference: Option<Band>,
    pub reference: Polyline,
    pub actuals: Vec<Polyline>,
    pub vias: Vec<IterationVias>,
    pub metrics: Vec<IterationMetrics>,
    pub pending_events: usize,
}

impl Polyline {
    /// At most [`DISPLAY_SAMPLES`] evenly strided samples, always keeping the last.
    pub fn decimated(t: &TimedTrajectory) -> Self {
        let idx = t.decimation_indices(DISPLAY_SAMPLES);
        Self {
            times: idx.iter().map(|&i| t.time(i)).collect(),
            points: idx.iter().map(|&i| t.points()[i].iter().copied().collect()).collect(),
        }
    }
}

impl Band {
    /// Mean with a ±2σ envelope.
    pub fn two_sigma(p: &ProbTrajectory) -> Self {
        let (lower, upper) = p.band(2.0);
        Self { times: p.times().to_vec(), mean: rows(p.means()), lower: rows(&lower), upper: rows(&upper) }
    }
}

fn polyline(t: &TimedTrajectory) -> Polyline {
    Polyline::decimated(t)
}

fn rows(points: &[Point]) -> Vec<Vec<f64>> {
    points.iter().map(|p| p.iter().copied().collect()).collect()
}

fn state_view(app: &AppState) -> StateView {
    let s = app.session();
    let preference = s.preference.as_ref().map(Band::two_sigma);
    StateView {
        version: app.version(),
        iteration: s.iteration,
        iterations: s.cfg.iterations,
        done: s.done(),
        duration: s.cfg.duration,
        force_threshold: s.cfg.force_threshold,
        task: TaskView {
            name: s.task.name.clone(),
            keypoint_times: s.task.keypoint_times.clone(),
            desired: polyline(&s.task.desired),
        },
        preference,
        reference: polyline(&s.reference),
        actuals: s.episodes.iter().map(|e| polyline(&e.actual)).collect(),
        vias: s
            .skill_records
            .iter()
            .map(|r| IterationVias { iteration: r.iteration, vias: r.vias.clone() })
            .collect(),
        metrics: s.log.iter().map(|r| r.metrics).collect(),
        pending_events: app.shared.pending.lock().expect("pending lock").len(),
    }
}

async fn get_state(State(app): State<AppState>) -> Json<StateView> {
    Json(state_view(&app))
}

#[derive(Debug, Deserialize)]
pub struct ReplayQuery {
    #[serde(default)]
    pub episode: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayView {
    pub episode: usize,
    pub iteration: usize,
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub speeds: Vec<f64>,
}

async fn get_replay(State(app): State<AppState>, Query(q): Query<ReplayQuery>) -> Result<Json<ReplayView>, ServiceError> {
    let s = app.session();
    let episode = s
        .episodes
        .get(q.episode)
        .ok_or_else(|| ServiceError::NotFound(format!("episode {} of {}", q.episode, s.episodes.len())))?;
    let line = polyline(&episode.actual);
    let all_speeds = episode.actual.speeds();
    let speeds = episode.actual.decimation_indices(DISPLAY_SAMPLES).iter().map(|&i| all_speeds[i]).collect();
    Ok(Json(ReplayView { episode: q.episode, iteration: s.iteration, times: line.times, points: line.points, speeds }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceBody {
    pub t: f64,
    pub fx: f64,
    pub fy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForceReply {
    pub magnitude: f64,
    pub clears_threshold: bool,
    pub pending_events: usize,
}

async fn post_force(State(app): State<AppState>, body: Bytes) -> Result<Json<ForceReply>, ServiceError> {
    let f: ForceBody = serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    if !(f.t.is_finite() && f.fx.is_finite() && f.fy.is_finite()) {
        return Err(ServiceError::BadRequest("force sample must be finite".into()));
    }
    let cfg = &app.shared.scenario.session;
    if cfg.dim() != 2 {
        return Err(ServiceError::Unprocessable("planar forces need a two-dimensional task".into()));
    }
    if !(0.0..=cfg.duration).contains(&f.t) {
        return Err(ServiceError::Unprocessable(format!("t = {} s outside [0, {}] s", f.t, cfg.duration)));
    }
    let force = Point::from_vec(vec![f.fx, f.fy]);
    let magnitude = force.norm();
    let mut pending = app.shared.pending.lock().expect("pending lock");
    pending.push(ForceEvent::new(f.t, force));
    Ok(Json(ForceReply { magnitude, clears_threshold: magnitude > cfg.force_threshold, pending_events: pending.len() }))
}

async fn post_advance(State(app): State<AppState>) -> Result<Json<StateView>, ServiceError> {
    let _guard = app.shared.advance.try_lock().map_err(|_| ServiceError::Busy)?;
    let session = app.session();
    if session.done() {
        return Err(ServiceError::Unprocessable(format!("all {} iterations have run", session.cfg.iterations)));
    }
    let mut events = std::mem::take(&mut *app.shared.pending.lock().expect("pending lock"));
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    let patient = app.shared.patient.clone();
    let result = tokio::task::spawn_blocking(move || run_iteration(&session, &events, &patient).map(|s| (s, events)))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?;
    match result {
        Ok((next, _)) => {
            log::info!("iteration {} complete", next.iteration);
            app.publish(next);
            Ok(Json(state_view(&app)))
        }
        Err(e) => Err(ServiceError::Unprocessable(e.to_string())),
    }
}

async fn post_reset(State(app): State<AppState>) -> Result<Json<StateView>, ServiceError> {
    let _guard = app.shared.advance.try_lock().map_err(|_| ServiceError::Busy)?;
    let cfg = app.shared.scenario.session_config();
    let (task, patient) = (app.shared.task.clone(), app.shared.patient.clone());
    let fresh = tokio::task::spawn_blocking(move || TherapySession::bootstrap(&cfg, &task, &patient))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    app.shared.pending.lock().expect("pending lock").clear();
    app.publish(fresh);
    Ok(Json(state_view(&app)))
}

async fn get_log(State(app): State<AppState>) -> Response {
    ([(header::CONTENT_TYPE, "application/x-ndjson")], app.session().log_jsonl()).into_response()
}

async fn get_events(State(app): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let mut rx = app.shared.version.subscribe();
    rx.mark_changed();
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        rx.changed().await.ok()?;
        let v = *rx.borrow_and_update();
        Some((Ok(Event::default().event("version").data(v.to_string())), rx))
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

fn is_local_origin(origin: &HeaderValue) -> bool {
    let Ok(o) = origin.to_str() else { return false };
    let host = o.split("://").nth(1).unwrap_or("");
    let host = host.rsplit_once(':').map_or(host, |(h, port)| if port.chars().all(|c| c.is_ascii_digit()) { h } else { host });
    matches!(host, "localhost" | "127.0.0.1" | "[::1]")
}

pub fn router(app: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::predicate(|origin, _| is_local_origin(origin)))
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/state", get(get_state))
        .route("/replay", get(get_replay))
        .route("/force", post(post_force))
        .route("/advance", post(post_advance))
        .route("/reset", post(post_reset))
        .route("/log", get(get_log))
        .route("/events", get(get_events))
        .layer(cors)
        .with_state(app)
}

/// Serves `scenario` on `addr` until the process is stopped.
pub async fn serve(scenario: Scenario, addr: SocketAddr) -> std::io::Result<()> {
    let app = tokio::task::spawn_blocking(move || AppState::new(scenario))
        .await
        .map_err(std::io::Error::other)?
        .map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving therapy session on http://{}", listener.local_addr()?);
    axum::serve(listener, router(app)).await
}
