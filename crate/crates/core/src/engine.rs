//! The external-reflection round.
//!
//! One round stores the user's words, summarizes the dialogue into a prompt,
//! generates an image, captions it per aspect, scores each caption against
//! the prompt to find the aspects the user never pinned down, and asks about
//! one of them. A round is computed against an immutable [`SessionState`] and
//! either yields a complete new state or an error, so a failure at any stage
//! leaves the caller's state untouched.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Backends, Embedder, QuestionWriter};
use crate::rng::SplitRng;
use crate::store::EventBody;
use crate::types::{
    AmbiguityLabel, AspectSchema, AspectVector, CaptionSet, DialogueMemory, DialogueTurn,
    ImageRecord, MemoryError, PromptRecord, Question, QuestionSource, Speaker,
};

/// Aspects considered for a question each round.
pub const CANDIDATE_COUNT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Summarize,
    Generate,
    Caption,
    Ambiguity,
    Question,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Summarize,
        Stage::Generate,
        Stage::Caption,
        Stage::Ambiguity,
        Stage::Question,
    ];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Summarize => "summarize",
            Stage::Generate => "generate",
            Stage::Caption => "caption",
            Stage::Ambiguity => "ambiguity",
            Stage::Question => "question",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("{stage} stage failed: {source}")]
    Backend {
        stage: Stage,
        #[source]
        source: BackendError,
    },
    #[error("session is closed")]
    SessionClosed,
    #[error("user input is empty")]
    EmptyInput,
    #[error("invalid user input: {0}")]
    InvalidInput(String),
    #[error("captions do not cover aspect `{0}`")]
    IncompleteCaptions(String),
    #[error("aborted before {0} stage")]
    Aborted(Stage),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

impl EngineError {
    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            EngineError::Backend { source, .. } => Some(source),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    #[default]
    Toy,
    Remote,
}

/// What the user said this round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserInput {
    Text(String),
    Assignment(AspectVector),
}

impl UserInput {
    fn into_turn(self, schema: &AspectSchema, round: u32) -> Result<DialogueTurn, EngineError> {
        match self {
            UserInput::Text(text) if text.trim().is_empty() => Err(EngineError::EmptyInput),
            UserInput::Text(text) => Ok(DialogueTurn {
                round,
                speaker: Speaker::User,
                text,
                structured: None,
            }),
            UserInput::Assignment(v) => {
                v.check(schema)
                    .map_err(|e| EngineError::InvalidInput(e.to_string()))?;
                if v.specified_count() == 0 {
                    return Err(EngineError::EmptyInput);
                }
                let text = v
                    .slots
                    .iter()
                    .enumerate()
                    .filter_map(|(i, s)| {
                        s.map(|s| format!("{}={}", schema.aspects[i], schema.value_name(i, s)))
                    })
                    .collect::<Vec<_>>()
                    .join(", ");
                Ok(DialogueTurn {
                    round,
                    speaker: Speaker::User,
                    text,
                    structured: Some(v),
                })
            }
        }
    }
}

/// Everything one round produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub prompt: PromptRecord,
    pub image: ImageRecord,
    pub captions: CaptionSet,
    pub ambiguity: AmbiguityLabel,
    pub question: Question,
}

/// One dialogue session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub schema: AspectSchema,
    pub memory: DialogueMemory,
    pub rounds: Vec<RoundRecord>,
    pub rng_seed: u64,
    #[serde(default)]
    pub persona: Option<String>,
    #[serde(default)]
    pub mode: SessionMode,
    #[serde(default)]
    pub closed: bool,
}

impl SessionState {
    pub fn new(id: impl Into<String>, schema: AspectSchema, rng_seed: u64) -> Self {
        Self {
            id: id.into(),
            schema,
            memory: DialogueMemory::default(),
            rounds: Vec::new(),
            rng_seed,
            persona: None,
            mode: SessionMode::Toy,
            closed: false,
        }
    }

    pub fn current_round(&self) -> u32 {
        self.rounds.len() as u32
    }

    pub fn last_round(&self) -> Option<&RoundRecord> {
        self.rounds.last()
    }

    pub fn round(&self, round: u32) -> Option<&RoundRecord> {
        round
            .checked_sub(1)
            .and_then(|i| self.rounds.get(i as usize))
    }

    /// Seed tree for stochastic choices in this session.
    pub fn rng(&self) -> SplitRng {
        SplitRng::new(self.rng_seed)
    }

    pub fn image_seed(&self, round: u32) -> u64 {
        self.rng().split("generate", u64::from(round)).seed()
    }
}

/// Called before each stage; returning an error aborts the round.
pub trait StageHook: Send + Sync {
    fn before(&self, stage: Stage, round: u32) -> Result<(), EngineError>;
}

/// Result of a successful round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub state: SessionState,
    pub record: RoundRecord,
    /// One event per stage, in order, ready to append to the session log.
    pub events: Vec<EventBody>,
}

/// Scores every caption against the prompt and picks one of the lowest three.
pub fn infer_ambiguity(
    captions: &CaptionSet,
    prompt: &PromptRecord,
    schema: &AspectSchema,
    embedder: &dyn Embedder,
    rng: &mut impl Rng,
) -> Result<AmbiguityLabel, BackendError> {
    let mut scored = Vec::with_capacity(schema.len());
    for (i, aspect) in schema.aspects.iter().enumerate() {
        let caption = captions.captions.get(aspect).map(String::as_str).unwrap_or("");
        let score = if prompt.text.trim().is_empty() || caption.trim().is_empty() {
            0.0
        } else {
            embedder.similarity(&prompt.text, caption)?.clamp(0.0, 1.0)
        };
        scored.push((i, score));
    }
    let scores = scored
        .iter()
        .map(|&(i, s)| (schema.aspects[i].clone(), s))
        .collect();
    // stable sort: equal scores keep schema order
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));
    let candidates: Vec<String> = scored
        .iter()
        .take(CANDIDATE_COUNT.min(schema.len()))
        .map(|&(i, _)| schema.aspects[i].clone())
        .collect();
    let chosen = candidates[rng.random_range(0..candidates.len())].clone();
    Ok(AmbiguityLabel {
        round: captions.round,
        scores,
        candidates,
        chosen,
    })
}

/// Builds the follow-up question for the chosen aspect. Never fails: a
/// backend error, or a reply that does not name the aspect, falls back to
/// the schema template.
pub fn make_question(
    label: &AmbiguityLabel,
    captions: &CaptionSet,
    schema: &AspectSchema,
    writer: Option<&dyn QuestionWriter>,
) -> Question {
    let index = schema
        .aspect_index(&label.chosen)
        .expect("chosen aspect comes from the schema");
    let aspect = schema.aspects[index].clone();
    if let Some(writer) = writer {
        match writer.write_question(schema, captions, &aspect) {
            Ok(text)
                if !text.trim().is_empty()
                    && text.to_lowercase().contains(&aspect.to_lowercase()) =>
            {
                return Question {
                    round: label.round,
                    aspect,
                    text: text.trim().to_string(),
                    source: QuestionSource::Backend,
                };
            }
            Ok(_) => tracing::debug!(%aspect, "backend question ignored the aspect"),
            Err(e) => tracing::debug!(%aspect, error = %e, "question backend failed"),
        }
    }
    Question {
        round: label.round,
        aspect,
        text: schema.question_for(index),
        source: QuestionSource::Template,
    }
}

/// Runs rounds of the dialogue loop against a set of backends.
#[derive(Clone)]
pub struct Engine {
    backends: Backends,
    question_source: QuestionSource,
    hook: Option<Arc<dyn StageHook>>,
}

impl Engine {
    pub fn new(backends: Backends) -> Self {
        let question_source = if backends.questioner.is_some() {
            QuestionSource::Backend
        } else {
            QuestionSource::Template
        };
        Self {
            backends,
            question_source,
            hook: None,
        }
    }

    pub fn with_question_source(mut self, source: QuestionSource) -> Self {
        self.question_source = source;
        self
    }

    pub fn with_hook(mut self, hook: Arc<dyn StageHook>) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    fn enter(&self, stage: Stage, round: u32) -> Result<(), EngineError> {
        match &self.hook {
            Some(hook) => hook.before(stage, round),
            None => Ok(()),
        }
    }

    /// Executes one round. `state` is never modified; on success the new
    /// state is returned inside the outcome.
    pub fn run_round(
        &self,
        state: &SessionState,
        input: UserInput,
    ) -> Result<RoundOutcome, EngineError> {
        if state.closed {
            return Err(EngineError::SessionClosed);
        }
        let schema = &state.schema;
        let round = state.current_round() + 1;
        let user_turn = input.into_turn(schema, round)?;
        let mut memory = state.memory.clone();
        memory.push(user_turn.clone())?;

        let fail = |stage| move |source| EngineError::Backend { stage, source };

        self.enter(Stage::Summarize, round)?;
        let prompt = self
            .backends
            .summarizer
            .summarize(schema, &memory, round)
            .map_err(fail(Stage::Summarize))?;

        self.enter(Stage::Generate, round)?;
        let image = self
            .backends
            .generator
            .generate(schema, &prompt, state.image_seed(round))
            .map_err(fail(Stage::Generate))?;

        self.enter(Stage::Caption, round)?;
        let captions = self
            .backends
            .captioner
            .caption(&image, schema)
            .map_err(fail(Stage::Caption))?;
        if let Some(missing) = schema
            .aspects
            .iter()
            .find(|a| !captions.captions.contains_key(*a))
        {
            return Err(EngineError::IncompleteCaptions(missing.clone()));
        }

        self.enter(Stage::Ambiguity, round)?;
        let mut rng = state.rng().split("ambiguity", u64::from(round)).rng();
        let ambiguity = infer_ambiguity(
            &captions,
            &prompt,
            schema,
            self.backends.embedder.as_ref(),
            &mut rng,
        )
        .map_err(fail(Stage::Ambiguity))?;

        self.enter(Stage::Question, round)?;
        let writer = match self.question_source {
            QuestionSource::Backend => self.backends.questioner.as_deref(),
            QuestionSource::Template => None,
        };
        let question = make_question(&ambiguity, &captions, schema, writer);
        memory.push(DialogueTurn {
            round,
            speaker: Speaker::Agent,
            text: question.text.clone(),
            structured: None,
        })?;

        let record = RoundRecord {
            round,
            prompt,
            image,
            captions,
            ambiguity,
            question,
        };
        let events = vec![
            EventBody::UserMessage(user_turn),
            EventBody::Prompt(record.prompt.clone()),
            EventBody::Generation(record.image.clone()),
            EventBody::Caption(record.captions.clone()),
            EventBody::Ambiguity(record.ambiguity.clone()),
            EventBody::Question(record.question.clone()),
        ];
        let mut next = state.clone();
        next.memory = memory;
        next.rounds.push(record.clone());
        Ok(RoundOutcome {
            state: next,
            record,
            events,
        })
    }
}
