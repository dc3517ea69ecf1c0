use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::Json;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::OwnedMutexGuard;

use reflex_core::aae::{run_tool, ToolConfig};
use reflex_core::dpo::{PreferencePair, TrainerConfig};
use reflex_core::store::{now_ms, EventBody, EventLog, PairStore, PreferenceRecord, SessionHeader, Tool2Record};
use reflex_core::types::{ImagePayload, ImageRecord};
use reflex_core::{AspectSchema, AspectVector, SessionMode, SessionState, UserInput};

use crate::error::ApiError;
use crate::render::{self, ApiSession, PreferenceResponse, RefineResponse, RoundView, SessionView};
use crate::session::{build_engine, run_training, toy_world, Inner, Session};
use crate::AppState;

type App = State<Arc<AppState>>;

fn summary(app: &AppState, session: &Session) -> ApiSession {
    let snap = session.snapshot.read().unwrap();
    let state = &snap.state;
    let status = if state.closed {
        "closed"
    } else if session.busy() {
        "busy"
    } else {
        "open"
    };
    let batch = app.cfg.pairs_per_training;
    ApiSession {
        id: state.id.clone(),
        persona: state.persona.clone(),
        schema: state.schema.name.clone(),
        mode: state.mode,
        model_name: session.model_name.clone(),
        round: state.current_round(),
        open_question: state.last_round().map(|r| r.question.clone()),
        status: status.into(),
        pairs: snap.pair_count,
        pairs_until_training: batch - snap.pair_count % batch,
    }
}

/// Takes the session's round slot or reports that one is running.
fn claim(session: &Session) -> Result<OwnedMutexGuard<Inner>, ApiError> {
    session.inner.clone().try_lock_owned().map_err(|_| ApiError::RoundInFlight)
}

/// Runs `work` off the async executor while holding the round slot.
async fn blocking<T: Send + 'static>(
    work: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(work)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

pub async fn schemas(State(app): App) -> Json<Value> {
    let all: Vec<&AspectSchema> = app.cfg.schemas.all().collect();
    Json(json!({ "schemas": all }))
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub schema: Option<String>,
    #[serde(default)]
    pub persona: Option<String>,
    #[serde(default)]
    pub mode: SessionMode,
    #[serde(default)]
    pub seed: Option<u64>,
}

pub async fn create_session(
    State(app): App,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<ApiSession>), ApiError> {
    let name = req.schema.as_deref().unwrap_or(reflex_core::types::DEFAULT_SCHEMA);
    let schema = app
        .cfg
        .schemas
        .get(name)
        .map_err(|_| ApiError::UnknownSchema(name.to_string()))?
        .clone();
    let model_name = match (&req.persona, req.mode) {
        (Some(p), _) => Some(
            app.cfg
                .personas
                .get(p)
                .cloned()
                .ok_or_else(|| ApiError::UnknownPersona(p.clone()))?,
        ),
        (None, SessionMode::Remote) => app.cfg.backend.model_name.clone(),
        (None, SessionMode::Toy) => None,
    };
    let id = loop {
        let id = format!("{:016x}", rand::random::<u64>());
        if !app.has_session(&id) {
            break id;
        }
    };
    let mut state = SessionState::new(id.clone(), schema, req.seed.unwrap_or_else(rand::random));
    state.persona = req.persona.clone();
    state.mode = req.mode;
    let policy = app.initial_policy(&state)?;
    let engine = build_engine(&app, &state, policy.as_ref(), model_name.as_deref())?;
    let log = EventLog::open(app.dirs.session_log(&id), id.clone(), Some(app.blobs.clone()))?;
    let inner = Inner {
        engine,
        log,
        pairs: PairStore::new(app.dirs.pairs(&id)),
        pair_count: 0,
        policy,
        state,
    };
    let session = Arc::new(Session::new(inner, Vec::new(), model_name));
    {
        let mut inner = claim(&session)?;
        let header = SessionHeader::of(&inner.state);
        session.commit(&mut inner, &app, vec![EventBody::SessionCreated(header)], None)?;
    }
    app.insert(session.clone());
    Ok((StatusCode::CREATED, Json(summary(&app, &session))))
}

pub async fn get_session(State(app): App, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let session = app.session(&id)?;
    let rounds = render::rounds(&session.snapshot.read().unwrap().state);
    Ok(Json(SessionView {
        session: summary(&app, &session),
        rounds,
    }))
}

#[derive(Debug, Deserialize)]
pub struct MessageRequest {
    #[serde(default)]
    pub text: Option<String>,
    /// `"Content=parrot, Color=red"` or `{"Content": "parrot", "Color": 1}`.
    #[serde(default)]
    pub assignment: Option<Value>,
}

fn parse_input(schema: &AspectSchema, req: MessageRequest) -> Result<UserInput, ApiError> {
    let bad = |e: reflex_core::types::VectorError| ApiError::BadRequest(e.to_string());
    match (req.text, req.assignment) {
        (Some(text), None) => Ok(UserInput::Text(text)),
        (None, Some(Value::String(s))) => Ok(UserInput::Assignment(
            AspectVector::parse_assignment(schema, &s).map_err(bad)?,
        )),
        (None, Some(Value::Object(map))) => {
            let parts = map
                .iter()
                .map(|(k, v)| match v {
                    Value::String(s) => Ok(format!("{k}={s}")),
                    Value::Number(n) => Ok(format!("{k}={n}")),
                    _ => Err(ApiError::BadRequest(format!("value for `{k}` must be a string or number"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(UserInput::Assignment(
                AspectVector::parse_assignment(schema, &parts.join(", ")).map_err(bad)?,
            ))
        }
        (None, Some(_)) => Err(ApiError::BadRequest("assignment must be a string or an object".into())),
        _ => Err(ApiError::BadRequest("send exactly one of `text` or `assignment`".into())),
    }
}

pub async fn message(
    State(app): App,
    Path(id): Path<String>,
    Json(req): Json<MessageRequest>,
) -> Result<Json<RoundView>, ApiError> {
    let session = app.session(&id)?;
    let mut inner = claim(&session)?;
    let input = parse_input(&inner.state.schema, req)?;
    blocking(move || {
        let outcome = inner.engine.run_round(&inner.state, input)?;
        let view = RoundView::new(&outcome.state.schema, &outcome.record);
        session.commit(&mut inner, &app, outcome.events, Some(outcome.state))?;
        Ok(Json(view))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct PreferenceRequest {
    pub winner_round: u32,
    pub loser_round: u32,
}

pub async fn preference(
    State(app): App,
    Path(id): Path<String>,
    Json(req): Json<PreferenceRequest>,
) -> Result<Json<PreferenceResponse>, ApiError> {
    let session = app.session(&id)?;
    let mut inner = claim(&session)?;
    if req.winner_round == req.loser_round {
        return Err(ApiError::SameRound);
    }
    let trajectory = |round: u32| {
        let record = inner.state.round(round).ok_or(ApiError::RoundNotFound(round))?;
        record
            .image
            .trajectory
            .clone()
            .ok_or(ApiError::MissingTrajectory(round))
    };
    let winner = trajectory(req.winner_round)?;
    let loser = trajectory(req.loser_round)?;
    blocking(move || {
        let pair = PreferencePair {
            winner,
            loser,
            prompt_id: format!("{}:{}", inner.state.id, req.winner_round),
            timestamp: now_ms(),
        };
        inner.pairs.append(&pair)?;
        inner.pair_count += 1;
        let mut events = vec![EventBody::Preference(PreferenceRecord {
            winner_round: req.winner_round,
            loser_round: req.loser_round,
            pair_count: inner.pair_count,
        })];
        let batch = app.cfg.pairs_per_training;
        let mut training = None;
        if inner.pair_count % batch == 0 {
            let trainer = TrainerConfig {
                batch_size: batch,
                ..app.cfg.trainer.clone()
            };
            let (summary, updates) = run_training(&app, &mut inner, &trainer)?;
            events.extend(updates);
            training = Some(summary);
        }
        session.commit(&mut inner, &app, events, None)?;
        Ok(Json(PreferenceResponse {
            pair_count: inner.pair_count,
            pairs_until_training: batch - inner.pair_count % batch,
            training,
        }))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct RefineRequest {
    pub tool: String,
    #[serde(default)]
    pub params: Option<Value>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DpoParams {
    beta: Option<f64>,
    learning_rate: Option<f64>,
    epochs: Option<usize>,
    prompts_per_epoch: Option<usize>,
    batch_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AaeParams {
    threshold: Option<f64>,
    max_iterations: Option<usize>,
}

fn params<T: Default + for<'de> Deserialize<'de>>(raw: Option<Value>) -> Result<T, ApiError> {
    match raw {
        None | Some(Value::Null) => Ok(T::default()),
        Some(v) => serde_json::from_value(v).map_err(|e| ApiError::BadRequest(format!("params: {e}"))),
    }
}

pub async fn refine(
    State(app): App,
    Path(id): Path<String>,
    Json(req): Json<RefineRequest>,
) -> Result<Json<RefineResponse>, ApiError> {
    let session = app.session(&id)?;
    let mut inner = claim(&session)?;
    if inner.state.closed {
        return Err(ApiError::SessionClosed);
    }
    match req.tool.as_str() {
        "dpo" => {
            let p: DpoParams = params(req.params)?;
            if inner.state.mode != SessionMode::Toy {
                return Err(ApiError::ToolUnavailable(
                    "preference training needs toy-mode trajectories".into(),
                ));
            }
            let base = &app.cfg.trainer;
            let trainer = TrainerConfig {
                beta: p.beta.unwrap_or(base.beta),
                learning_rate: p.learning_rate.unwrap_or(base.learning_rate),
                epochs: p.epochs.unwrap_or(base.epochs),
                prompts_per_epoch: p.prompts_per_epoch.unwrap_or(base.prompts_per_epoch),
                batch_size: p.batch_size.unwrap_or(app.cfg.pairs_per_training),
            };
            trainer.validate().map_err(|e| ApiError::BadRequest(e.to_string()))?;
            blocking(move || {
                let (training, events) = run_training(&app, &mut inner, &trainer)?;
                session.commit(&mut inner, &app, events, None)?;
                Ok(Json(RefineResponse::Dpo { training }))
            })
            .await
        }
        "aae" => {
            let p: AaeParams = params(req.params)?;
            if inner.state.mode != SessionMode::Toy {
                return Err(ApiError::ToolUnavailable(
                    "regeneration needs toy-mode prompts".into(),
                ));
            }
            let last = inner
                .state
                .last_round()
                .ok_or_else(|| ApiError::ToolUnavailable("no round to refine yet".into()))?;
            let prompt = last
                .prompt
                .structured
                .clone()
                .filter(|p| p.specified_count() > 0)
                .ok_or_else(|| ApiError::ToolUnavailable("latest prompt pins no aspect".into()))?;
            let (round, seed) = (last.round, last.image.seed);
            let base = ToolConfig::default();
            let cfg = ToolConfig {
                threshold: p.threshold.unwrap_or(base.threshold),
                max_iterations: p.max_iterations.unwrap_or(base.max_iterations),
                ..base
            };
            cfg.validate().map_err(|e| ApiError::BadRequest(e.to_string()))?;
            blocking(move || {
                let world = toy_world(&app, &inner.state);
                let (vector, report) = run_tool(&prompt, seed, &cfg, &world)
                    .map_err(|e| ApiError::Internal(e.to_string()))?;
                let record = ImageRecord {
                    round,
                    payload: ImagePayload::Toy { vector: vector.clone() },
                    seed,
                    trajectory: None,
                };
                let image = app.publish_image(&inner.state.schema, &record)?;
                let event = EventBody::Tool2Invocation(Tool2Record {
                    round,
                    seed,
                    threshold: cfg.threshold,
                    image: vector,
                    report: report.clone(),
                });
                session.commit(&mut inner, &app, vec![event], None)?;
                Ok(Json(RefineResponse::Aae { round, image, report }))
            })
            .await
        }
        other => Err(ApiError::BadRequest(format!("unknown tool `{other}` (expected dpo or aae)"))),
    }
}

#[derive(Debug, Deserialize)]
pub struct EventsQuery {
    #[serde(default)]
    pub since: u64,
    #[serde(default)]
    pub timeout_ms: u64,
}

/// Events after `since`; waits up to `timeout_ms` for the first one.
pub async fn events(
    State(app): App,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
) -> Result<Json<Value>, ApiError> {
    let session = app.session(&id)?;
    let mut rx = session.subscribe();
    let deadline = Instant::now() + Duration::from_millis(q.timeout_ms.min(app.cfg.max_poll_ms));
    loop {
        let events = session.events_since(q.since);
        let now = Instant::now();
        if !events.is_empty() || now >= deadline {
            return Ok(Json(json!({ "events": events, "last_seq": session.last_seq() })));
        }
        if tokio::time::timeout(deadline - now, rx.changed()).await.is_err() {
            return Ok(Json(json!({ "events": [], "last_seq": session.last_seq() })));
        }
    }
}

pub async fn image(State(app): App, Path(hash): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let bytes = app
        .blobs
        .get(&hash)
        .map_err(|_| ApiError::ImageNotFound(hash.clone()))?;
    let media = app
        .media_type(&hash)
        .unwrap_or_else(|| "application/octet-stream".into());
    Ok(([(header::CONTENT_TYPE, media)], bytes))
}
