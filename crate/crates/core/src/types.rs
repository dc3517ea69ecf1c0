//! Domain types shared by every module, plus the aspect-schema registry.
//!
//! Every type here serializes to a canonical snake_case JSON form. Those
//! encodings are also the wire format of the service and the payload format
//! of the session log, so field names must not drift.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpo::DenoisingTrajectory;

/// Default number of values per aspect.
pub const DEFAULT_VOCAB_SIZE: u32 = 16;

/// Name of the built-in seven-aspect schema.
pub const DEFAULT_SCHEMA: &str = "default";

/// Name of the built-in fashion schema.
pub const FASHION_SCHEMA: &str = "fashion";

const DEFAULT_ASPECTS: [&str; 7] = [
    "Content",
    "Style",
    "Background",
    "Size",
    "Color",
    "Perspective",
    "Other",
];

const FASHION_ASPECTS: [&str; 7] = [
    "Appearance",
    "Function",
    "Material",
    "Style",
    "Details",
    "Occasion",
    "Other",
];

// Display names for the default schema. Names are unique across all aspects
// so that a stacked prompt phrase identifies exactly one (aspect, value).
const DEFAULT_VALUE_NAMES: [[&str; 16]; 7] = [
    [
        "parrot", "cat", "dog", "horse", "castle", "lighthouse", "robot", "astronaut", "dragon",
        "oak tree", "mountain", "car", "ship", "violin", "teapot", "owl",
    ],
    [
        "photorealistic", "watercolor", "oil painting", "pixel art", "anime", "pencil sketch",
        "cubist", "impressionist", "low poly", "art deco", "ukiyo-e", "pop art", "surrealist",
        "charcoal", "vaporwave", "claymation",
    ],
    [
        "forest", "desert", "ocean", "city street", "outer space", "snowfield", "jungle",
        "library", "beach", "meadow", "cave", "rooftop", "studio backdrop", "volcano", "canyon",
        "marketplace",
    ],
    [
        "tiny", "small", "medium-sized", "large", "huge", "giant", "miniature", "life-size",
        "towering", "pocket-sized", "oversized", "compact", "colossal", "petite", "massive",
        "full-frame",
    ],
    [
        "red", "blue", "green", "yellow", "purple", "orange", "pink", "black", "white", "gray",
        "teal", "gold", "silver", "brown", "cyan", "magenta",
    ],
    [
        "front view", "side view", "top-down view", "low angle", "high angle", "bird's-eye view",
        "worm's-eye view", "isometric view", "close-up", "wide shot", "over-the-shoulder",
        "three-quarter view", "fisheye", "panoramic", "macro shot", "profile view",
    ],
    [
        "at night", "at sunset", "in the rain", "in fog", "at dawn", "under snowfall",
        "with lens flare", "in motion", "with reflections", "backlit", "with bokeh",
        "in neon light", "in mist", "with long shadows", "at noon", "in a storm",
    ],
];

fn question_template(aspect: &str) -> String {
    format!("What should the {aspect} of the image be?")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("schema `{0}` has no aspects")]
    EmptyAspects(String),
    #[error("schema `{name}` has {aspects} aspects but {templates} question templates")]
    MissingTemplate {
        name: String,
        aspects: usize,
        templates: usize,
    },
    #[error("schema `{name}` has vocab_size {vocab_size}, need at least 2")]
    VocabTooSmall { name: String, vocab_size: u32 },
    #[error("schema `{name}` value_names does not match aspects x vocab_size")]
    BadValueNames { name: String },
    #[error("unknown schema `{0}`")]
    UnknownSchema(String),
}

/// Ordered caption aspects with a uniform value vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectSchema {
    pub name: String,
    pub aspects: Vec<String>,
    pub vocab_size: u32,
    pub question_templates: Vec<String>,
    /// Optional display names, `value_names[aspect][value]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_names: Option<Vec<Vec<String>>>,
}

impl AspectSchema {
    /// The seven caption aspects used for general image generation.
    pub fn default_schema() -> Self {
        let value_names = DEFAULT_VALUE_NAMES
            .iter()
            .map(|row| row.iter().map(|s| s.to_string()).collect())
            .collect();
        Self {
            name: DEFAULT_SCHEMA.to_string(),
            aspects: DEFAULT_ASPECTS.iter().map(|s| s.to_string()).collect(),
            vocab_size: DEFAULT_VOCAB_SIZE,
            question_templates: DEFAULT_ASPECTS.iter().map(|a| question_template(a)).collect(),
            value_names: Some(value_names),
        }
    }

    /// Aspects used when describing fashion products.
    pub fn fashion_schema() -> Self {
        Self::with_aspects(FASHION_SCHEMA, &FASHION_ASPECTS, DEFAULT_VOCAB_SIZE)
    }

    /// A schema with generated display names and the stock question template.
    pub fn with_aspects(name: &str, aspects: &[&str], vocab_size: u32) -> Self {
        Self {
            name: name.to_string(),
            aspects: aspects.iter().map(|s| s.to_string()).collect(),
            vocab_size,
            question_templates: aspects.iter().map(|a| question_template(a)).collect(),
            value_names: None,
        }
    }

    pub fn len(&self) -> usize {
        self.aspects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aspects.is_empty()
    }

    pub fn aspect_index(&self, aspect: &str) -> Option<usize> {
        self.aspects
            .iter()
            .position(|a| a.eq_ignore_ascii_case(aspect))
    }

    pub fn value_name(&self, aspect: usize, value: u32) -> String {
        if let Some(name) = self
            .value_names
            .as_ref()
            .and_then(|names| names.get(aspect))
            .and_then(|row| row.get(value as usize))
        {
            return name.clone();
        }
        format!("{} {}", self.aspects[aspect].to_lowercase(), value)
    }

    /// Resolves a value given either as a display name or as a numeric id.
    pub fn value_id(&self, aspect: usize, value: &str) -> Option<u32> {
        let value = value.trim();
        if let Ok(id) = value.parse::<u32>() {
            return (id < self.vocab_size).then_some(id);
        }
        (0..self.vocab_size).find(|&id| self.value_name(aspect, id).eq_ignore_ascii_case(value))
    }

    pub fn question_for(&self, aspect: usize) -> String {
        self.question_templates[aspect].clone()
    }
}

/// Checks every [`AspectSchema`] invariant.
pub fn validate_schema(schema: &AspectSchema) -> Result<(), SchemaError> {
    if schema.aspects.is_empty() {
        return Err(SchemaError::EmptyAspects(schema.name.clone()));
    }
    if schema.question_templates.len() != schema.aspects.len() {
        return Err(SchemaError::MissingTemplate {
            name: schema.name.clone(),
            aspects: schema.aspects.len(),
            templates: schema.question_templates.len(),
        });
    }
    if schema.vocab_size < 2 {
        return Err(SchemaError::VocabTooSmall {
            name: schema.name.clone(),
            vocab_size: schema.vocab_size,
        });
    }
    if let Some(names) = &schema.value_names {
        let ok = names.len() == schema.aspects.len()
            && names
                .iter()
                .all(|row| row.len() == schema.vocab_size as usize);
        if !ok {
            return Err(SchemaError::BadValueNames {
                name: schema.name.clone(),
            });
        }
    }
    Ok(())
}

/// Named schemas available to sessions.
#[derive(Debug, Clone)]
pub struct SchemaRegistry {
    schemas: BTreeMap<String, AspectSchema>,
}

impl Default for SchemaRegistry {
    fn default() -> Self {
        let mut registry = Self {
            schemas: BTreeMap::new(),
        };
        registry
            .register(AspectSchema::default_schema())
            .expect("built-in schema is valid");
        registry
            .register(AspectSchema::fashion_schema())
            .expect("built-in schema is valid");
        registry
    }
}

impl SchemaRegistry {
    pub fn register(&mut self, schema: AspectSchema) -> Result<(), SchemaError> {
        validate_schema(&schema)?;
        self.schemas.insert(schema.name.clone(), schema);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&AspectSchema, SchemaError> {
        self.schemas
            .get(name)
            .ok_or_else(|| SchemaError::UnknownSchema(name.to_string()))
    }

    pub fn all(&self) -> impl Iterator<Item = &AspectSchema> {
        self.schemas.values()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VectorError {
    #[error("vector for schema `{found}` used with schema `{expected}`")]
    SchemaMismatch { expected: String, found: String },
    #[error("vector has {found} slots, schema has {expected}")]
    WrongLength { expected: usize, found: usize },
    #[error("slot {slot} holds value {value}, vocab size is {vocab_size}")]
    ValueOutOfRange {
        slot: usize,
        value: u32,
        vocab_size: u32,
    },
    #[error("unknown aspect `{0}`")]
    UnknownAspect(String),
    #[error("unknown value `{value}` for aspect `{aspect}`")]
    UnknownValue { aspect: String, value: String },
}

/// One value slot per schema aspect; `None` is an unspecified slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AspectVector {
    pub schema: String,
    pub slots: Vec<Option<u32>>,
}

impl AspectVector {
    pub fn unspecified(schema: &AspectSchema) -> Self {
        Self {
            schema: schema.name.clone(),
            slots: vec![None; schema.len()],
        }
    }

    pub fn from_values(schema: &AspectSchema, values: &[u32]) -> Self {
        Self {
            schema: schema.name.clone(),
            slots: values.iter().copied().map(Some).collect(),
        }
    }

    pub fn check(&self, schema: &AspectSchema) -> Result<(), VectorError> {
        if self.schema != schema.name {
            return Err(VectorError::SchemaMismatch {
                expected: schema.name.clone(),
                found: self.schema.clone(),
            });
        }
        if self.slots.len() != schema.len() {
            return Err(VectorError::WrongLength {
                expected: schema.len(),
                found: self.slots.len(),
            });
        }
        for (slot, value) in self.slots.iter().enumerate() {
            if let Some(value) = *value {
                if value >= schema.vocab_size {
                    return Err(VectorError::ValueOutOfRange {
                        slot,
                        value,
                        vocab_size: schema.vocab_size,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn is_fully_specified(&self) -> bool {
        self.slots.iter().all(Option::is_some)
    }

    pub fn specified_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn get(&self, slot: usize) -> Option<u32> {
        self.slots.get(slot).copied().flatten()
    }

    pub fn set(&mut self, slot: usize, value: u32) {
        self.slots[slot] = Some(value);
    }

    /// Overwrites every slot specified in `other`.
    pub fn merge_from(&mut self, other: &AspectVector) {
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            if theirs.is_some() {
                *mine = *theirs;
            }
        }
    }

    /// Comma-joined display names of the specified slots, in schema order.
    pub fn stacked_text(&self, schema: &AspectSchema) -> String {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| schema.value_name(i, v)))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Parses `aspect=value` pairs separated by commas or semicolons.
    pub fn parse_assignment(schema: &AspectSchema, text: &str) -> Result<Self, VectorError> {
        let mut out = Self::unspecified(schema);
        for part in text.split([',', ';']) {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (aspect, value) = part
                .split_once('=')
                .ok_or_else(|| VectorError::UnknownAspect(part.to_string()))?;
            let index = schema
                .aspect_index(aspect.trim())
                .ok_or_else(|| VectorError::UnknownAspect(aspect.trim().to_string()))?;
            let id = schema
                .value_id(index, value)
                .ok_or_else(|| VectorError::UnknownValue {
                    aspect: schema.aspects[index].clone(),
                    value: value.trim().to_string(),
                })?;
            out.set(index, id);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub round: u32,
    pub speaker: Speaker,
    pub text: String,
    #[serde(default)]
    pub structured: Option<AspectVector>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemoryError {
    #[error("the first turn of a dialogue must come from the user")]
    AgentFirst,
    #[error("turn for round {turn} after round {last}")]
    RoundWentBack { last: u32, turn: u32 },
}

/// The dialogue history `h`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DialogueMemory {
    pub turns: Vec<DialogueTurn>,
}

impl DialogueMemory {
    pub fn push(&mut self, turn: DialogueTurn) -> Result<(), MemoryError> {
        match self.turns.last() {
            None if turn.speaker != Speaker::User => return Err(MemoryError::AgentFirst),
            Some(last) if turn.round < last.round => {
                return Err(MemoryError::RoundWentBack {
                    last: last.round,
                    turn: turn.round,
                })
            }
            _ => {}
        }
        self.turns.push(turn);
        Ok(())
    }

    pub fn user_turns(&self) -> impl Iterator<Item = &DialogueTurn> {
        self.turns.iter().filter(|t| t.speaker == Speaker::User)
    }
}

/// The summarized prompt `P_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub round: u32,
    pub text: String,
    #[serde(default)]
    pub structured: Option<AspectVector>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImagePayload {
    /// A toy-world image: a fully specified aspect vector.
    Toy { vector: AspectVector },
    /// Encoded image bytes from a remote generator.
    Bytes {
        media_type: String,
        #[serde(with = "base64_bytes")]
        data: Vec<u8>,
    },
}

/// A generated image `I_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub round: u32,
    pub payload: ImagePayload,
    pub seed: u64,
    #[serde(default)]
    pub trajectory: Option<DenoisingTrajectory>,
}

impl ImageRecord {
    pub fn toy_vector(&self) -> Option<&AspectVector> {
        match &self.payload {
            ImagePayload::Toy { vector } => Some(vector),
            ImagePayload::Bytes { .. } => None,
        }
    }
}

/// Per-aspect captions `C_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub round: u32,
    pub captions: BTreeMap<String, String>,
    #[serde(default)]
    pub structured: Option<AspectVector>,
}

impl CaptionSet {
    pub fn covers(&self, schema: &AspectSchema) -> bool {
        self.captions.len() == schema.len()
            && schema.aspects.iter().all(|a| self.captions.contains_key(a))
    }
}

/// The ambiguity label `r_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityLabel {
    pub round: u32,
    pub scores: BTreeMap<String, f64>,
    pub candidates: Vec<String>,
    pub chosen: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionSource {
    Template,
    Backend,
}

/// The follow-up question `q_{t+1}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub round: u32,
    pub aspect: String,
    pub text: String,
    pub source: QuestionSource,
}

impl fmt::Display for Question {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}
