//! One live session: the exclusive round slot, a read snapshot, and the
//! event feed that long-polling clients wait on.

use std::sync::{Arc, RwLock};

use serde_json::Value;
use tokio::sync::{watch, Mutex};

use reflex_core::backends::{Backends, ToyGenerator};
use reflex_core::dpo::{train, PolicyParams, PreferencePair, TrainerConfig};
use reflex_core::store::{encode_event, now_ms, save_params, EventBody, EventLog, PairStore, TrainingUpdate};
use reflex_core::toyworld::ToyWorldConfig;
use reflex_core::{Engine, SessionMode, SessionState};

use crate::error::ApiError;
use crate::render::TrainingSummary;
use crate::AppState;

/// Trained policy and the frozen copy it is measured against.
#[derive(Debug, Clone)]
pub struct Policy {
    pub theta: PolicyParams,
    pub reference: PolicyParams,
}

/// Everything a mutating request needs; held exclusively for its duration.
pub struct Inner {
    pub state: SessionState,
    pub engine: Engine,
    pub log: EventLog,
    pub pairs: PairStore,
    pub pair_count: usize,
    pub policy: Option<Policy>,
}

pub struct Snapshot {
    pub state: SessionState,
    pub pair_count: usize,
}

pub struct Session {
    pub id: String,
    pub model_name: Option<String>,
    pub inner: Arc<Mutex<Inner>>,
    pub snapshot: RwLock<Snapshot>,
    feed: RwLock<Vec<Value>>,
    seq: watch::Sender<u64>,
}

impl Session {
    pub fn new(inner: Inner, feed: Vec<Value>, model_name: Option<String>) -> Self {
        let last = inner.log.last_seq();
        Self {
            id: inner.state.id.clone(),
            model_name,
            snapshot: RwLock::new(Snapshot {
                state: inner.state.clone(),
                pair_count: inner.pair_count,
            }),
            inner: Arc::new(Mutex::new(inner)),
            feed: RwLock::new(feed),
            seq: watch::channel(last).0,
        }
    }

    pub fn busy(&self) -> bool {
        self.inner.try_lock().is_err()
    }

    pub fn last_seq(&self) -> u64 {
        *self.seq.borrow()
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.seq.subscribe()
    }

    /// Logged events with `seq > since`, in order.
    pub fn events_since(&self, since: u64) -> Vec<Value> {
        let feed = self.feed.read().unwrap();
        // seq n sits at index n - 1
        feed.iter().skip(since as usize).cloned().collect()
    }

    /// Appends `bodies` to the log; only then adopts `next` (if any) and
    /// publishes the events and the new snapshot.
    pub fn commit(
        &self,
        inner: &mut Inner,
        app: &AppState,
        bodies: Vec<EventBody>,
        next: Option<SessionState>,
    ) -> Result<(), ApiError> {
        let mut encoded = Vec::with_capacity(bodies.len());
        for body in bodies {
            if let EventBody::Generation(image) = &body {
                app.publish_image(&inner.state.schema, image)?;
            }
            let event = inner.log.record(body, now_ms())?;
            encoded.push(encode_event(&event, Some(&app.blobs))?);
        }
        if let Some(next) = next {
            inner.state = next;
        }
        {
            let mut snap = self.snapshot.write().unwrap();
            snap.state = inner.state.clone();
            snap.pair_count = inner.pair_count;
        }
        self.feed.write().unwrap().extend(encoded);
        self.seq.send_replace(inner.log.last_seq());
        Ok(())
    }
}

pub fn toy_world(app: &AppState, state: &SessionState) -> ToyWorldConfig {
    ToyWorldConfig::new(state.schema.clone()).with_neglect(app.cfg.neglect_prob)
}

/// The engine a session runs with: toy rounds sample trajectories from the
/// current policy; remote rounds talk to the configured endpoints.
pub fn build_engine(
    app: &AppState,
    state: &SessionState,
    policy: Option<&Policy>,
    model_name: Option<&str>,
) -> Result<Engine, ApiError> {
    let backends = match state.mode {
        SessionMode::Toy => {
            let world = toy_world(app, state);
            Backends::toy(match policy {
                Some(p) => ToyGenerator::with_policy(world, p.theta.clone()),
                None => ToyGenerator::new(world),
            })
        }
        SessionMode::Remote => {
            let mut cfg = app.cfg.backend.clone();
            cfg.model_name = model_name.map(str::to_string).or(cfg.model_name);
            cfg.persona = state.persona.clone();
            Backends::remote(&cfg)?
        }
    };
    Ok(Engine::new(backends))
}

/// Trains the session policy on every stored pair and swaps it in.
pub fn run_training(
    app: &AppState,
    inner: &mut Inner,
    trainer: &TrainerConfig,
) -> Result<(TrainingSummary, Vec<EventBody>), ApiError> {
    let policy = inner
        .policy
        .clone()
        .ok_or_else(|| ApiError::ToolUnavailable("preference training needs toy-mode trajectories".into()))?;
    let pairs: Vec<PreferencePair> = inner.pairs.load()?;
    if pairs.is_empty() {
        return Err(ApiError::ToolUnavailable("no preference pairs recorded yet".into()));
    }
    let report = train(&policy.theta, &policy.reference, &pairs, trainer)?;
    let events = report
        .epoch_means()
        .into_iter()
        .enumerate()
        .map(|(epoch, mean_loss)| {
            EventBody::TrainingUpdate(TrainingUpdate {
                epoch,
                steps: trainer.prompts_per_epoch,
                mean_loss,
                pairs: pairs.len(),
            })
        })
        .collect();
    let summary = TrainingSummary {
        epochs: trainer.epochs,
        steps: report.losses.len(),
        pairs: pairs.len(),
        first_loss: report.losses.first().map_or(0.0, |l| l.loss),
        final_loss: report.losses.last().map_or(0.0, |l| l.loss),
        kl_to_reference: report.params.kl_to(&policy.reference)?,
    };
    save_params(&app.dirs.policy(&inner.state.id), &report.params)?;
    let policy = Policy {
        theta: report.params,
        reference: policy.reference,
    };
    inner.engine = build_engine(app, &inner.state, Some(&policy), None)?;
    inner.policy = Some(policy);
    Ok((summary, events))
}
