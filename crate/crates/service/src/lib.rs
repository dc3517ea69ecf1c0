//! HTTP JSON API over reflex sessions.
//!
//! Each session owns an append-only event log; every mutating request
//! appends to it and GET endpoints only read. Rounds on one session are
//! exclusive: a second request while one is running gets `409`.

pub mod error;
pub mod handlers;
pub mod render;
pub mod session;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::routing::{get, post};
use axum::Router;
use tracing::{info, warn};

use reflex_core::backends::BackendConfig;
use reflex_core::dpo::{DiffusionSchedule, PolicyParams, TrainerConfig};
use reflex_core::store::{
    encode_event, load_params, read_events, replay, BlobStore, DataDir, EventLog, PairStore,
};
use reflex_core::types::{ImageRecord, SchemaRegistry};
use reflex_core::{AspectSchema, SessionMode, SessionState};

pub use error::ApiError;
use render::ImageView;
use session::{build_engine, Inner, Policy, Session};

/// Environment variable consulted when no `--listen` flag is given.
pub const ENV_LISTEN: &str = "REFLEX_LISTEN";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

/// Listen address: the flag, else `REFLEX_LISTEN`, else the default.
pub fn listen_addr(flag: Option<&str>) -> String {
    flag.map(str::to_string)
        .or_else(|| std::env::var(ENV_LISTEN).ok().filter(|s| !s.is_empty()))
        .unwrap_or_else(|| DEFAULT_LISTEN.to_string())
}

/// Persona letters mapped to the remote model each one selects.
pub fn default_personas() -> BTreeMap<String, String> {
    [("A", "persona-a"), ("B", "persona-b"), ("C", "persona-c")]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Base settings for remote sessions.
    pub backend: BackendConfig,
    pub personas: BTreeMap<String, String>,
    pub schemas: SchemaRegistry,
    /// Neglect probability of the toy generator.
    pub neglect_prob: f64,
    pub policy_dim: usize,
    pub schedule: DiffusionSchedule,
    /// Training runs each time the pair count reaches a multiple of this.
    pub pairs_per_training: usize,
    pub trainer: TrainerConfig,
    /// Upper bound on a long-poll wait.
    pub max_poll_ms: u64,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            backend: BackendConfig::default(),
            personas: default_personas(),
            schemas: SchemaRegistry::default(),
            neglect_prob: 0.0,
            policy_dim: 2,
            schedule: DiffusionSchedule::standard(),
            pairs_per_training: 40,
            trainer: TrainerConfig::default(),
            max_poll_ms: 25_000,
        }
    }
}

pub struct AppState {
    pub cfg: ServiceConfig,
    pub dirs: DataDir,
    pub blobs: BlobStore,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    media: RwLock<HashMap<String, String>>,
}

impl AppState {
    /// Opens the data directory and restores every logged session.
    pub fn open(cfg: ServiceConfig) -> Result<Arc<Self>, ApiError> {
        let dirs = DataDir::new(&cfg.data_dir);
        let app = Arc::new(Self {
            blobs: BlobStore::new(dirs.blobs()),
            dirs,
            cfg,
            sessions: RwLock::new(HashMap::new()),
            media: RwLock::new(HashMap::new()),
        });
        let dir = app.dirs.root().join("sessions");
        if dir.is_dir() {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| ApiError::Internal(e.to_string()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            paths.sort();
            for path in paths {
                match app.restore(&path) {
                    Ok(session) => {
                        info!(id = %session.id, "restored session");
                        app.insert(session);
                    }
                    Err(e) => warn!(path = %path.display(), error = %e, "skipping session log"),
                }
            }
        }
        Ok(app)
    }

    fn restore(&self, path: &std::path::Path) -> Result<Arc<Session>, ApiError> {
        let events = read_events(path, Some(&self.blobs))?;
        let state = replay(&events)?;
        let feed = events
            .iter()
            .map(|e| encode_event(e, Some(&self.blobs)))
            .collect::<Result<Vec<_>, _>>()?;
        for round in &state.rounds {
            self.publish_image(&state.schema, &round.image)?;
        }
        let model_name = match &state.persona {
            Some(p) if state.mode == SessionMode::Remote => self.cfg.personas.get(p).cloned(),
            _ => None,
        };
        let pairs = PairStore::new(self.dirs.pairs(&state.id));
        let pair_count = pairs.load()?.len();
        let policy = self.initial_policy(&state)?;
        let engine = build_engine(self, &state, policy.as_ref(), model_name.as_deref())?;
        let log = EventLog::open(path, state.id.clone(), Some(self.blobs.clone()))?;
        let inner = Inner {
            state,
            engine,
            log,
            pairs,
            pair_count,
            policy,
        };
        Ok(Arc::new(Session::new(inner, feed, model_name)))
    }

    /// Zero-bias reference plus the last saved policy, for toy sessions.
    fn initial_policy(&self, state: &SessionState) -> Result<Option<Policy>, ApiError> {
        if state.mode != SessionMode::Toy {
            return Ok(None);
        }
        let reference = PolicyParams::zeros(self.cfg.policy_dim, self.cfg.schedule.clone());
        let path = self.dirs.policy(&state.id);
        let theta = if path.exists() { load_params(&path)? } else { reference.clone() };
        Ok(Some(Policy { theta, reference }))
    }

    pub fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::SessionNotFound(id.to_string()))
    }

    fn insert(&self, session: Arc<Session>) {
        self.sessions.write().unwrap().insert(session.id.clone(), session);
    }

    fn has_session(&self, id: &str) -> bool {
        self.sessions.read().unwrap().contains_key(id)
    }

    /// Stores what `/images/{hash}` serves for `image`.
    pub fn publish_image(&self, schema: &AspectSchema, image: &ImageRecord) -> Result<ImageView, ApiError> {
        let view = ImageView::new(schema, image);
        let (media_type, bytes) = ImageView::blob(schema, image);
        let hash = self.blobs.put(&bytes)?;
        debug_assert_eq!(hash, view.hash());
        self.media.write().unwrap().insert(hash, media_type);
        Ok(view)
    }

    pub fn media_type(&self, hash: &str) -> Option<String> {
        self.media.read().unwrap().get(hash).cloned()
    }
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/schema", get(handlers::schemas))
        .route("/sessions", post(handlers::create_session))
        .route("/sessions/{id}", get(handlers::get_session))
        .route("/sessions/{id}/message", post(handlers::message))
        .route("/sessions/{id}/preference", post(handlers::preference))
        .route("/sessions/{id}/refine", post(handlers::refine))
        .route("/sessions/{id}/events", get(handlers::events))
        .route("/images/{hash}", get(handlers::image))
        .with_state(app)
}

/// Serves until the process is stopped.
pub async fn serve(listener: tokio::net::TcpListener, app: Arc<AppState>) -> std::io::Result<()> {
    info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(app)).await
}
