//! HTTP clients for hosted chat, image and embedding endpoints.
//!
//! Endpoints, relative to `base_url`:
//!
//! - `POST /chat/completions` `{model, messages: [{role, content}]}` ->
//!   `{choices: [{message: {content}, finish_reason}]}`
//! - `POST /images/generations` `{prompt, seed, size}` ->
//!   `{image_base64, media_type?}`
//! - `POST /embeddings` `{model, input: [a, b]}` -> `{data: [{embedding}, ...]}`

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::debug;

use super::{
    BackendConfig, BackendError, Captioner, ConfigError, Embedder, ImageGenerator,
    QuestionWriter, Summarizer,
};
use crate::types::{
    AspectSchema, CaptionSet, DialogueMemory, ImagePayload, ImageRecord, PromptRecord, Speaker,
};

pub const IMAGE_SIZE: &str = "512x512";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireChatResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireImageResponse {
    image_base64: String,
    #[serde(default)]
    media_type: Option<String>,
}

#[derive(Deserialize)]
struct WireEmbeddings {
    data: Vec<WireEmbedding>,
}

#[derive(Deserialize)]
struct WireEmbedding {
    embedding: Vec<f64>,
}

fn unavailable(e: impl std::fmt::Display) -> BackendError {
    BackendError::Unavailable(e.to_string())
}

/// Shared connection pool plus endpoint settings.
///
/// The pool is built on first use so that a client can be constructed from
/// inside an async runtime and only used from blocking threads.
pub struct RemoteClient {
    http: OnceLock<reqwest::blocking::Client>,
    timeout: Duration,
    base_url: String,
    api_key: Option<String>,
    model: String,
}

impl RemoteClient {
    pub fn new(cfg: &BackendConfig) -> Result<Self, ConfigError> {
        let base_url = cfg
            .base_url
            .clone()
            .ok_or(ConfigError::MissingBaseUrl)?
            .trim_end_matches('/')
            .to_string();
        Ok(Self {
            http: OnceLock::new(),
            timeout: Duration::from_millis(cfg.timeout_ms),
            base_url,
            api_key: cfg.api_key.clone(),
            model: cfg.model_name.clone().unwrap_or_else(|| "default".into()),
        })
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    fn post<T: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &serde_json::Value,
    ) -> Result<T, BackendError> {
        let url = format!("{}{}", self.base_url, path);
        debug!(%url, "remote call");
        let http = match self.http.get() {
            Some(h) => h,
            None => {
                let h = reqwest::blocking::Client::builder()
                    .timeout(self.timeout)
                    .build()
                    .map_err(unavailable)?;
                self.http.get_or_init(|| h)
            }
        };
        let mut req = http.post(&url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(unavailable)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendError::Unavailable(format!("{url} returned {status}")));
        }
        resp.json::<T>().map_err(unavailable)
    }

    pub fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        if request.messages.is_empty() {
            return Err(BackendError::InvalidPrompt("chat request has no messages".into()));
        }
        let mut messages = vec![json!({"role": "system", "content": request.system})];
        messages.extend(
            request
                .messages
                .iter()
                .map(|m| serde_json::to_value(m).expect("message serializes")),
        );
        let body = json!({ "model": self.model, "messages": messages });
        let wire: WireChatResponse = self.post("/chat/completions", &body)?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Unavailable("chat reply has no choices".into()))?;
        Ok(ChatResponse {
            text: choice.message.content.unwrap_or_default(),
            finish_reason: choice.finish_reason,
        })
    }

    pub fn generate_image(&self, prompt: &str, seed: u64) -> Result<(String, Vec<u8>), BackendError> {
        let body = json!({ "prompt": prompt, "seed": seed, "size": IMAGE_SIZE });
        let wire: WireImageResponse = self.post("/images/generations", &body)?;
        let bytes = STANDARD.decode(wire.image_base64).map_err(unavailable)?;
        Ok((wire.media_type.unwrap_or_else(|| "image/png".into()), bytes))
    }

    pub fn embed_pair(&self, a: &str, b: &str) -> Result<(Vec<f64>, Vec<f64>), BackendError> {
        let body = json!({ "model": self.model, "input": [a, b] });
        let wire: WireEmbeddings = self.post("/embeddings", &body)?;
        let mut data = wire.data.into_iter();
        match (data.next(), data.next()) {
            (Some(x), Some(y)) => Ok((x.embedding, y.embedding)),
            _ => Err(BackendError::Unavailable(
                "embedding reply needs two vectors".into(),
            )),
        }
    }
}

/// Cosine similarity clamped into `[0, 1]`.
pub fn clamped_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || a.len() != b.len() {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

pub struct RemoteSummarizer {
    client: Arc<RemoteClient>,
}

impl RemoteSummarizer {
    pub fn new(client: Arc<RemoteClient>) -> Self {
        Self { client }
    }
}

const SUMMARIZER_SYSTEM: &str = "You write prompts for a text-to-image model. \
Combine everything the user has asked for so far into one concise image prompt. \
Later requests override earlier ones. Reply with the prompt only.";

impl Summarizer for RemoteSummarizer {
    fn summarize(
        &self,
        _schema: &AspectSchema,
        memory: &DialogueMemory,
        round: u32,
    ) -> Result<PromptRecord, BackendError> {
        if memory.user_turns().next().is_none() {
            return Err(BackendError::EmptyMemory);
        }
        let messages = memory
            .turns
            .iter()
            .map(|t| match t.speaker {
                Speaker::User => ChatMessage::user(t.text.clone()),
                Speaker::Agent => ChatMessage::assistant(t.text.clone()),
            })
            .collect();
        let reply = self.client.chat(&ChatRequest {
            system: SUMMARIZER_SYSTEM.into(),
            messages,
        })?;
        let text = reply.text.trim().to_string();
        if text.is_empty() {
            return Err(BackendError::Unavailable("summarizer returned empty text".into()));
        }
        Ok(PromptRecord {
            round,
            text,
            structured: None,
        })
    }
}

pub struct RemoteGenerator {
    client: Arc<RemoteClient>,
}

impl RemoteGenerator {
    pub fn new(client: Arc<RemoteClient>) -> Self {
        Self { client }
    }
}

impl ImageGenerator for RemoteGenerator {
    fn generate(
        &self,
        _schema: &AspectSchema,
        prompt: &PromptRecord,
        seed: u64,
    ) -> Result<ImageRecord, BackendError> {
        if prompt.text.trim().is_empty() {
            return Err(BackendError::InvalidPrompt("empty prompt text".into()));
        }
        let (media_type, data) = self.client.generate_image(&prompt.text, seed)?;
        Ok(ImageRecord {
            round: prompt.round,
            payload: ImagePayload::Bytes { media_type, data },
            seed,
            trajectory: None,
        })
    }
}

pub struct RemoteCaptioner {
    client: Arc<RemoteClient>,
}

impl RemoteCaptioner {
    pub fn new(client: Arc<RemoteClient>) -> Self {
        Self { client }
    }

    fn ask(&self, schema: &AspectSchema, data_url: &str, nudge: Option<&str>) -> Result<String, BackendError> {
        let keys = schema.aspects.join(", ");
        let mut messages = vec![ChatMessage::user(format!(
            "Describe this image. Reply with a JSON object whose keys are exactly: {keys}. \
             Each value is a short caption for that aspect.\n{data_url}"
        ))];
        if let Some(nudge) = nudge {
            messages.push(ChatMessage::user(nudge.to_string()));
        }
        Ok(self
            .client
            .chat(&ChatRequest {
                system: "You are an image evaluator.".into(),
                messages,
            })?
            .text)
    }
}

/// Pulls the first JSON object out of a chat reply.
fn parse_caption_object(text: &str) -> BTreeMap<String, String> {
    let (Some(start), Some(end)) = (text.find('{'), text.rfind('}')) else {
        return BTreeMap::new();
    };
    if end < start {
        return BTreeMap::new();
    }
    let Ok(serde_json::Value::Object(map)) = serde_json::from_str(&text[start..=end]) else {
        return BTreeMap::new();
    };
    map.into_iter()
        .filter_map(|(k, v)| match v {
            serde_json::Value::String(s) if !s.trim().is_empty() => Some((k, s)),
            _ => None,
        })
        .collect()
}

fn missing_aspect(schema: &AspectSchema, found: &BTreeMap<String, String>) -> Option<String> {
    schema
        .aspects
        .iter()
        .find(|a| !found.keys().any(|k| k.eq_ignore_ascii_case(a)))
        .cloned()
}

impl Captioner for RemoteCaptioner {
    fn caption(
        &self,
        image: &ImageRecord,
        schema: &AspectSchema,
    ) -> Result<CaptionSet, BackendError> {
        let ImagePayload::Bytes { media_type, data } = &image.payload else {
            return Err(BackendError::InvalidImage(
                "remote captioner needs image bytes".into(),
            ));
        };
        let data_url = format!("data:{media_type};base64,{}", STANDARD.encode(data));
        let mut found = parse_caption_object(&self.ask(schema, &data_url, None)?);
        if let Some(aspect) = missing_aspect(schema, &found) {
            let nudge = format!(
                "Your reply was missing the `{aspect}` key. Reply again with every key present."
            );
            found = parse_caption_object(&self.ask(schema, &data_url, Some(&nudge))?);
            if let Some(aspect) = missing_aspect(schema, &found) {
                return Err(BackendError::MissingAspect(aspect));
            }
        }
        let captions = schema
            .aspects
            .iter()
            .map(|a| {
                let text = found
                    .iter()
                    .find(|(k, _)| k.eq_ignore_ascii_case(a))
                    .map(|(_, v)| v.clone())
                    .expect("checked above");
                (a.clone(), text)
            })
            .collect();
        Ok(CaptionSet {
            round: image.round,
            captions,
            structured: None,
        })
    }
}

pub struct RemoteEmbedder {
    client: Arc<RemoteClient>,
}

impl RemoteEmbedder {
    pub fn new(client: Arc<RemoteClient>) -> Self {
        Self { client }
    }
}

impl Embedder for RemoteEmbedder {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, BackendError> {
        let (x, y) = self.client.embed_pair(a, b)?;
        Ok(clamped_cosine(&x, &y))
    }
}

pub struct RemoteQuestionWriter {
    client: Arc<RemoteClient>,
}

impl RemoteQuestionWriter {
    pub fn new(client: Arc<RemoteClient>) -> Self {
        Self { client }
    }
}

impl QuestionWriter for RemoteQuestionWriter {
    fn write_question(
        &self,
        _schema: &AspectSchema,
        captions: &CaptionSet,
        aspect: &str,
    ) -> Result<String, BackendError> {
        let described = captions
            .captions
            .iter()
            .map(|(k, v)| format!("{k}: {v}"))
            .collect::<Vec<_>>()
            .join("\n");
        let reply = self.client.chat(&ChatRequest {
            system: "You help a user refine an image. Ask one short question.".into(),
            messages: vec![ChatMessage::user(format!(
                "The current image is described as:\n{described}\n\
                 Ask the user what they want for the {aspect} of the image. \
                 Mention the word \"{aspect}\" in the question."
            ))],
        })?;
        Ok(reply.text.trim().to_string())
    }
}
