//! Append-only session logs.
//!
//! A session log is JSON lines, one [`SessionEvent`] per line, with `seq`
//! counting up from 1 without gaps. Folding a log with [`replay`] rebuilds the
//! [`SessionState`] that produced it. Remote image bytes are written once to
//! a content-addressed blob directory and referenced by hash from the log.
//!
//! Layout under a data directory:
//!
//! ```text
//! <data_dir>/sessions/<session_id>.jsonl
//! <data_dir>/blobs/<sha256>
//! <data_dir>/pairs/<session_id>.jsonl
//! <data_dir>/policies/<session_id>.json
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aae::NeglectReport;
use crate::dpo::{PolicyParams, PreferencePair};
use crate::engine::{RoundRecord, SessionMode, SessionState};
use crate::types::{
    AmbiguityLabel, AspectSchema, AspectVector, CaptionSet, DialogueTurn, ImagePayload,
    ImageRecord, PromptRecord, Question, Speaker,
};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("event seq {got} does not follow {last}")]
    SeqGap { last: u64, got: u64 },
    #[error("event seq {0} was already appended")]
    DuplicateSeq(u64),
    #[error("event for session `{got}` appended to log of `{expected}`")]
    WrongSession { expected: String, got: String },
    #[error("corrupt log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("blob {0} not found")]
    MissingBlob(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn corrupt(line: usize, reason: impl Into<String>) -> StoreError {
    StoreError::CorruptLog {
        line,
        reason: reason.into(),
    }
}

/// Payload of `session_created`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub id: String,
    pub schema: AspectSchema,
    pub rng_seed: u64,
    #[serde(default)]
    pub persona: Option<String>,
    #[serde(default)]
    pub mode: SessionMode,
}

impl SessionHeader {
    pub fn of(state: &SessionState) -> Self {
        Self {
            id: state.id.clone(),
            schema: state.schema.clone(),
            rng_seed: state.rng_seed,
            persona: state.persona.clone(),
            mode: state.mode,
        }
    }
}

/// Payload of `preference`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub winner_round: u32,
    pub loser_round: u32,
    pub pair_count: usize,
}

/// Payload of `training_update`: one per training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingUpdate {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub pairs: usize,
}

/// Payload of `tool2_invocation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tool2Record {
    pub round: u32,
    pub seed: u64,
    pub threshold: f64,
    pub image: AspectVector,
    pub report: NeglectReport,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosedInfo {
    #[serde(default)]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    SessionCreated(SessionHeader),
    UserMessage(DialogueTurn),
    Prompt(PromptRecord),
    Generation(ImageRecord),
    Caption(CaptionSet),
    Ambiguity(AmbiguityLabel),
    Question(Question),
    Preference(PreferenceRecord),
    TrainingUpdate(TrainingUpdate),
    #[serde(rename = "tool2_invocation")]
    Tool2Invocation(Tool2Record),
    SessionClosed(ClosedInfo),
}

impl EventBody {
    pub fn type_name(&self) -> &'static str {
        match self {
            EventBody::SessionCreated(_) => "session_created",
            EventBody::UserMessage(_) => "user_message",
            EventBody::Prompt(_) => "prompt",
            EventBody::Generation(_) => "generation",
            EventBody::Caption(_) => "caption",
            EventBody::Ambiguity(_) => "ambiguity",
            EventBody::Question(_) => "question",
            EventBody::Preference(_) => "preference",
            EventBody::TrainingUpdate(_) => "training_update",
            EventBody::Tool2Invocation(_) => "tool2_invocation",
            EventBody::SessionClosed(_) => "session_closed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub session_id: String,
    pub seq: u64,
    pub ts_ms: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Paths for everything persisted under one data directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_log(&self, session_id: &str) -> PathBuf {
        self.root.join("sessions").join(format!("{session_id}.jsonl"))
    }

    pub fn blobs(&self) -> PathBuf {
        self.root.join("blobs")
    }

    pub fn pairs(&self, session_id: &str) -> PathBuf {
        self.root.join("pairs").join(format!("{session_id}.jsonl"))
    }

    pub fn policy(&self, session_id: &str) -> PathBuf {
        self.root.join("policies").join(format!("{session_id}.json"))
    }
}

/// Content-addressed blob storage.
#[derive(Debug, Clone)]
pub struct BlobStore {
    dir: PathBuf,
}

impl BlobStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn hash(bytes: &[u8]) -> String {
        hex::encode(Sha256::digest(bytes))
    }

    pub fn put(&self, bytes: &[u8]) -> Result<String, StoreError> {
        let hash = Self::hash(bytes);
        let path = self.dir.join(&hash);
        if !path.exists() {
            fs::create_dir_all(&self.dir)?;
            let tmp = self.dir.join(format!(".{hash}.tmp"));
            fs::write(&tmp, bytes)?;
            fs::rename(tmp, &path)?;
        }
        Ok(hash)
    }

    pub fn get(&self, hash: &str) -> Result<Vec<u8>, StoreError> {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(StoreError::MissingBlob(hash.to_string()));
        }
        let mut out = Vec::new();
        File::open(self.dir.join(hash))
            .map_err(|e| match e.kind() {
                io::ErrorKind::NotFound => StoreError::MissingBlob(hash.to_string()),
                _ => StoreError::Io(e),
            })?
            .read_to_end(&mut out)?;
        Ok(out)
    }
}

/// Log-side form of an image payload: bytes are replaced by a blob hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LoggedPayload {
    Blob { media_type: String, hash: String },
}

fn externalize(body: &EventBody, blobs: Option<&BlobStore>) -> Result<serde_json::Value, StoreError> {
    let mut value = serde_json::to_value(body)?;
    if let (EventBody::Generation(image), Some(blobs)) = (body, blobs) {
        if let ImagePayload::Bytes { media_type, data } = &image.payload {
            let hash = blobs.put(data)?;
            value["payload"]["payload"] = serde_json::to_value(LoggedPayload::Blob {
                media_type: media_type.clone(),
                hash,
            })?;
        }
    }
    Ok(value)
}

fn internalize(value: &mut serde_json::Value, blobs: Option<&BlobStore>, line: usize) -> Result<(), StoreError> {
    if value.get("type").and_then(|t| t.as_str()) != Some("generation") {
        return Ok(());
    }
    let Some(payload) = value.get_mut("payload").and_then(|p| p.get_mut("payload")) else {
        return Ok(());
    };
    if payload.get("kind").and_then(|k| k.as_str()) != Some("blob") {
        return Ok(());
    }
    let LoggedPayload::Blob { media_type, hash } = serde_json::from_value(payload.clone())
        .map_err(|e| corrupt(line, e.to_string()))?;
    let blobs = blobs.ok_or_else(|| StoreError::MissingBlob(hash.clone()))?;
    let data = blobs.get(&hash)?;
    *payload = serde_json::to_value(ImagePayload::Bytes { media_type, data })?;
    Ok(())
}

/// The JSON object written to the log for `event`. With a blob store, image
/// bytes are stored there and replaced by their hash.
pub fn encode_event(event: &SessionEvent, blobs: Option<&BlobStore>) -> Result<serde_json::Value, StoreError> {
    let mut value = externalize(&event.body, blobs)?;
    let obj = value.as_object_mut().expect("event body is an object");
    obj.insert("session_id".into(), event.session_id.clone().into());
    obj.insert("seq".into(), event.seq.into());
    obj.insert("ts_ms".into(), event.ts_ms.into());
    Ok(value)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum FsyncPolicy {
    /// fsync after every append.
    Always,
    #[default]
    Never,
}

/// Single-writer handle on one session log.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    session_id: String,
    last_seq: u64,
    file: File,
    blobs: Option<BlobStore>,
    fsync: FsyncPolicy,
}

impl EventLog {
    /// Opens (creating if needed) the log, validating any existing contents.
    pub fn open(
        path: impl Into<PathBuf>,
        session_id: impl Into<String>,
        blobs: Option<BlobStore>,
    ) -> Result<Self, StoreError> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let last_seq = if path.exists() {
            read_events(&path, None)?.last().map_or(0, |e| e.seq)
        } else {
            0
        };
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            session_id: session_id.into(),
            last_seq,
            file,
            blobs,
            fsync: FsyncPolicy::default(),
        })
    }

    pub fn with_fsync(mut self, fsync: FsyncPolicy) -> Self {
        self.fsync = fsync;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Appends a fully formed event; `seq` must be exactly `last_seq + 1`.
    pub fn append(&mut self, event: &SessionEvent) -> Result<(), StoreError> {
        if event.session_id != self.session_id {
            return Err(StoreError::WrongSession {
                expected: self.session_id.clone(),
                got: event.session_id.clone(),
            });
        }
        if event.seq <= self.last_seq {
            return Err(StoreError::DuplicateSeq(event.seq));
        }
        if event.seq != self.last_seq + 1 {
            return Err(StoreError::SeqGap {
                last: self.last_seq,
                got: event.seq,
            });
        }
        let value = encode_event(event, self.blobs.as_ref())?;
        let mut line = serde_json::to_string(&value)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        if self.fsync == FsyncPolicy::Always {
            self.file.sync_data()?;
        }
        self.last_seq = event.seq;
        Ok(())
    }

    /// Assigns the next seq and appends.
    pub fn record(&mut self, body: EventBody, ts_ms: u64) -> Result<SessionEvent, StoreError> {
        let event = SessionEvent {
            session_id: self.session_id.clone(),
            seq: self.last_seq + 1,
            ts_ms,
            body,
        };
        self.append(&event)?;
        Ok(event)
    }

    pub fn record_all(
        &mut self,
        bodies: impl IntoIterator<Item = EventBody>,
        ts_ms: u64,
    ) -> Result<Vec<SessionEvent>, StoreError> {
        bodies.into_iter().map(|b| self.record(b, ts_ms)).collect()
    }
}

/// Parses and integrity-checks a log file.
pub fn read_events(path: &Path, blobs: Option<&BlobStore>) -> Result<Vec<SessionEvent>, StoreError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut events: Vec<SessionEvent> = Vec::new();
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_line(&mut buf)? == 0 {
            break;
        }
        line_no += 1;
        if !buf.ends_with('\n') {
            return Err(corrupt(line_no, "truncated line (no newline terminator)"));
        }
        let mut value: serde_json::Value =
            serde_json::from_str(buf.trim_end()).map_err(|e| corrupt(line_no, e.to_string()))?;
        internalize(&mut value, blobs, line_no)?;
        let event: SessionEvent =
            serde_json::from_value(value).map_err(|e| corrupt(line_no, e.to_string()))?;
        let expected = events.last().map_or(1, |e| e.seq + 1);
        if event.seq != expected {
            return Err(corrupt(
                line_no,
                format!("seq {} where {expected} was expected", event.seq),
            ));
        }
        if let Some(first) = events.first() {
            if first.session_id != event.session_id {
                return Err(corrupt(line_no, "session id changes mid-log"));
            }
        }
        events.push(event);
    }
    Ok(events)
}

#[derive(Default)]
struct PendingRound {
    prompt: Option<PromptRecord>,
    image: Option<ImageRecord>,
    captions: Option<CaptionSet>,
    ambiguity: Option<AmbiguityLabel>,
}

/// Folds events into the session state they describe.
pub fn replay(events: &[SessionEvent]) -> Result<SessionState, StoreError> {
    let mut state = SessionState::new(String::new(), AspectSchema::default_schema(), 0);
    let mut pending: Option<PendingRound> = None;
    for (i, event) in events.iter().enumerate() {
        let line = i + 1;
        let bad = |reason: &str| corrupt(line, format!("{} event: {reason}", event.body.type_name()));
        match &event.body {
            EventBody::SessionCreated(h) => {
                if i != 0 {
                    return Err(bad("must be the first event"));
                }
                state = SessionState::new(h.id.clone(), h.schema.clone(), h.rng_seed);
                state.persona = h.persona.clone();
                state.mode = h.mode;
            }
            EventBody::UserMessage(turn) => {
                if pending.is_some() || turn.speaker != Speaker::User {
                    return Err(bad("unexpected user message"));
                }
                state
                    .memory
                    .push(turn.clone())
                    .map_err(|e| bad(&e.to_string()))?;
                pending = Some(PendingRound::default());
            }
            EventBody::Prompt(p) => {
                let round = pending.as_mut().filter(|r| r.prompt.is_none()).ok_or_else(|| bad("out of order"))?;
                round.prompt = Some(p.clone());
            }
            EventBody::Generation(img) => {
                let round = pending
                    .as_mut()
                    .filter(|r| r.prompt.is_some() && r.image.is_none())
                    .ok_or_else(|| bad("out of order"))?;
                round.image = Some(img.clone());
            }
            EventBody::Caption(c) => {
                let round = pending
                    .as_mut()
                    .filter(|r| r.image.is_some() && r.captions.is_none())
                    .ok_or_else(|| bad("out of order"))?;
                round.captions = Some(c.clone());
            }
            EventBody::Ambiguity(a) => {
                let round = pending
                    .as_mut()
                    .filter(|r| r.captions.is_some() && r.ambiguity.is_none())
                    .ok_or_else(|| bad("out of order"))?;
                round.ambiguity = Some(a.clone());
            }
            EventBody::Question(q) => {
                let round = pending.take().ok_or_else(|| bad("out of order"))?;
                let (Some(prompt), Some(image), Some(captions), Some(ambiguity)) =
                    (round.prompt, round.image, round.captions, round.ambiguity)
                else {
                    return Err(bad("round is incomplete"));
                };
                let number = state.current_round() + 1;
                if q.round != number {
                    return Err(bad("round number out of sequence"));
                }
                state
                    .memory
                    .push(DialogueTurn {
                        round: number,
                        speaker: Speaker::Agent,
                        text: q.text.clone(),
                        structured: None,
                    })
                    .map_err(|e| bad(&e.to_string()))?;
                state.rounds.push(RoundRecord {
                    round: number,
                    prompt,
                    image,
                    captions,
                    ambiguity,
                    question: q.clone(),
                });
            }
            EventBody::SessionClosed(_) => state.closed = true,
            EventBody::Preference(_)
            | EventBody::TrainingUpdate(_)
            | EventBody::Tool2Invocation(_) => {}
        }
    }
    if pending.is_some() {
        return Err(corrupt(events.len(), "log ends inside a round"));
    }
    Ok(state)
}

/// Reads and folds a log file.
pub fn replay_file(path: &Path, blobs: Option<&BlobStore>) -> Result<SessionState, StoreError> {
    replay(&read_events(path, blobs)?)
}

/// Append-only JSON-lines file of preference pairs.
#[derive(Debug, Clone)]
pub struct PairStore {
    path: PathBuf,
}

impl PairStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one pair as a single write.
    pub fn append(&self, pair: &PreferencePair) -> Result<(), StoreError> {
        if let Some(parent) = self.path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut line = serde_json::to_string(pair)?;
        line.push('\n');
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        file.write_all(line.as_bytes())?;
        Ok(())
    }

    pub fn load(&self) -> Result<Vec<PreferencePair>, StoreError> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let reader = BufReader::new(File::open(&self.path)?);
        reader
            .lines()
            .enumerate()
            .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
            .map(|(i, l)| {
                serde_json::from_str(&l?).map_err(|e| corrupt(i + 1, e.to_string()))
            })
            .collect()
    }
}

/// Writes trained parameters (biases plus schedule) as JSON.
pub fn save_params(path: &Path, params: &PolicyParams) -> Result<(), StoreError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(params)?)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<PolicyParams, StoreError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
