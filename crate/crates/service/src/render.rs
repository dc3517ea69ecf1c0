//! Client-facing views of sessions, rounds and images.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use reflex_core::aae::NeglectReport;
use reflex_core::store::BlobStore;
use reflex_core::types::{AmbiguityLabel, ImagePayload, ImageRecord, Question};
use reflex_core::{AspectSchema, AspectVector, RoundRecord, SessionMode, SessionState};

/// Swatch per value id, cycled for vocabularies larger than 16.
const PALETTE: [&str; 16] = [
    "#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6",
    "#bcf60c", "#fabebe", "#008080", "#e6beff", "#9a6324", "#fffac8", "#800000", "#aaffc3",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSession {
    pub id: String,
    pub persona: Option<String>,
    pub schema: String,
    pub mode: SessionMode,
    pub model_name: Option<String>,
    pub round: u32,
    pub open_question: Option<Question>,
    pub status: String,
    pub pairs: usize,
    pub pairs_until_training: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardCell {
    pub aspect: String,
    pub value: u32,
    pub label: String,
    pub swatch: String,
}

/// What a client draws for a toy image: one cell per aspect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCard {
    pub schema: String,
    pub vector: AspectVector,
    pub cells: Vec<CardCell>,
}

impl ToyCard {
    pub fn new(schema: &AspectSchema, vector: &AspectVector) -> Self {
        let cells = schema
            .aspects
            .iter()
            .enumerate()
            .filter_map(|(i, aspect)| {
                vector.get(i).map(|v| CardCell {
                    aspect: aspect.clone(),
                    value: v,
                    label: schema.value_name(i, v),
                    swatch: PALETTE[v as usize % PALETTE.len()].to_string(),
                })
            })
            .collect();
        Self {
            schema: schema.name.clone(),
            vector: vector.clone(),
            cells,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("card serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageView {
    Toy {
        hash: String,
        url: String,
        card: ToyCard,
    },
    Bytes {
        hash: String,
        url: String,
        media_type: String,
    },
}

impl ImageView {
    /// Media type and bytes stored for this image in the blob store.
    pub fn blob(schema: &AspectSchema, image: &ImageRecord) -> (String, Vec<u8>) {
        match &image.payload {
            ImagePayload::Toy { vector } => ("application/json".into(), ToyCard::new(schema, vector).to_bytes()),
            ImagePayload::Bytes { media_type, data } => (media_type.clone(), data.clone()),
        }
    }

    pub fn new(schema: &AspectSchema, image: &ImageRecord) -> Self {
        let (_, bytes) = Self::blob(schema, image);
        let hash = BlobStore::hash(&bytes);
        let url = format!("/images/{hash}");
        match &image.payload {
            ImagePayload::Toy { vector } => ImageView::Toy {
                hash,
                url,
                card: ToyCard::new(schema, vector),
            },
            ImagePayload::Bytes { media_type, .. } => ImageView::Bytes {
                hash,
                url,
                media_type: media_type.clone(),
            },
        }
    }

    pub fn hash(&self) -> &str {
        match self {
            ImageView::Toy { hash, .. } | ImageView::Bytes { hash, .. } => hash,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundView {
    pub round: u32,
    pub prompt: String,
    pub prompt_structured: Option<AspectVector>,
    pub image: ImageView,
    pub image_seed: u64,
    pub has_trajectory: bool,
    pub captions: BTreeMap<String, String>,
    pub ambiguity: AmbiguityLabel,
    pub question: Question,
}

impl RoundView {
    pub fn new(schema: &AspectSchema, record: &RoundRecord) -> Self {
        Self {
            round: record.round,
            prompt: record.prompt.text.clone(),
            prompt_structured: record.prompt.structured.clone(),
            image: ImageView::new(schema, &record.image),
            image_seed: record.image.seed,
            has_trajectory: record.image.trajectory.is_some(),
            captions: record.captions.captions.clone(),
            ambiguity: record.ambiguity.clone(),
            question: record.question.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub session: ApiSession,
    pub rounds: Vec<RoundView>,
}

pub fn rounds(state: &SessionState) -> Vec<RoundView> {
    state.rounds.iter().map(|r| RoundView::new(&state.schema, r)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceResponse {
    pub pair_count: usize,
    pub pairs_until_training: usize,
    pub training: Option<TrainingSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs: usize,
    pub steps: usize,
    pub pairs: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub kl_to_reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tool", rename_all = "snake_case")]
pub enum RefineResponse {
    Dpo { training: TrainingSummary },
    Aae {
        round: u32,
        image: ImageView,
        report: NeglectReport,
    },
}
