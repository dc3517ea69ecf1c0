use std::collections::BTreeMap;

use super::{BackendError, Captioner, Embedder, ImageGenerator, Summarizer};
use crate::dpo::PolicyParams;
use crate::toyworld::{toy_generate, ToyWorldConfig};
use crate::types::{
    AspectSchema, AspectVector, CaptionSet, DialogueMemory, ImagePayload, ImageRecord,
    PromptRecord,
};

/// Merges structured user turns; later turns overwrite earlier ones.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToySummarizer;

impl Summarizer for ToySummarizer {
    fn summarize(
        &self,
        schema: &AspectSchema,
        memory: &DialogueMemory,
        round: u32,
    ) -> Result<PromptRecord, BackendError> {
        if memory.user_turns().next().is_none() {
            return Err(BackendError::EmptyMemory);
        }
        let mut merged = AspectVector::unspecified(schema);
        for turn in memory.user_turns() {
            if let Some(structured) = &turn.structured {
                structured
                    .check(schema)
                    .map_err(|e| BackendError::InvalidPrompt(e.to_string()))?;
                merged.merge_from(structured);
            }
        }
        Ok(PromptRecord {
            round,
            text: merged.stacked_text(schema),
            structured: Some(merged),
        })
    }
}

/// Samples toy images; also samples a denoising trajectory when a policy is
/// attached, so rounds can later be used as preference pairs.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    pub world: ToyWorldConfig,
    pub policy: Option<PolicyParams>,
}

impl ToyGenerator {
    pub fn new(world: ToyWorldConfig) -> Self {
        Self {
            world,
            policy: None,
        }
    }

    pub fn with_policy(world: ToyWorldConfig, policy: PolicyParams) -> Self {
        Self {
            world,
            policy: Some(policy),
        }
    }
}

impl ImageGenerator for ToyGenerator {
    fn generate(
        &self,
        schema: &AspectSchema,
        prompt: &PromptRecord,
        seed: u64,
    ) -> Result<ImageRecord, BackendError> {
        let structured = prompt
            .structured
            .as_ref()
            .ok_or_else(|| BackendError::InvalidPrompt("toy prompt has no structure".into()))?;
        structured
            .check(schema)
            .map_err(|e| BackendError::InvalidPrompt(e.to_string()))?;
        let vector = toy_generate(structured, seed, &self.world);
        Ok(ImageRecord {
            round: prompt.round,
            payload: ImagePayload::Toy { vector },
            seed,
            trajectory: self.policy.as_ref().map(|p| p.sample(seed)),
        })
    }
}

/// Reads the display name of every slot.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyCaptioner;

impl Captioner for ToyCaptioner {
    fn caption(
        &self,
        image: &ImageRecord,
        schema: &AspectSchema,
    ) -> Result<CaptionSet, BackendError> {
        let vector = image
            .toy_vector()
            .ok_or_else(|| BackendError::InvalidImage("toy captioner needs a toy image".into()))?;
        if vector.check(schema).is_err() || !vector.is_fully_specified() {
            return Err(BackendError::InvalidImage(
                "toy image must be fully specified".into(),
            ));
        }
        let captions: BTreeMap<String, String> = schema
            .aspects
            .iter()
            .enumerate()
            .map(|(i, aspect)| {
                (
                    aspect.clone(),
                    schema.value_name(i, vector.slots[i].expect("fully specified")),
                )
            })
            .collect();
        Ok(CaptionSet {
            round: image.round,
            captions,
            structured: Some(vector.clone()),
        })
    }
}

/// 1 when `b` is one of the comma-separated phrases of `a` (or vice versa).
pub fn phrase_similarity(a: &str, b: &str) -> f64 {
    let phrases = |s: &str| -> Vec<String> {
        s.split(',')
            .map(|p| p.trim().to_lowercase())
            .filter(|p| !p.is_empty())
            .collect()
    };
    let (pa, pb) = (phrases(a), phrases(b));
    if pa.is_empty() || pb.is_empty() {
        return 0.0;
    }
    let contains_all = |big: &[String], small: &[String]| small.iter().all(|p| big.contains(p));
    if contains_all(&pa, &pb) || contains_all(&pb, &pa) {
        1.0
    } else {
        0.0
    }
}

/// Exact phrase matching in place of an embedding model.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyEmbedder;

impl Embedder for ToyEmbedder {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, BackendError> {
        Ok(phrase_similarity(a, b))
    }
}
