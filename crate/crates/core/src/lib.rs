//! Reflective human-in-the-loop image generation.
//!
//! - [`engine`] runs the dialogue round: summarize, generate, caption,
//!   infer ambiguity, ask.
//! - [`backends`] holds the model-role contracts with toy and HTTP backends.
//! - [`toyworld`] is the analytic stand-in world used for exact checks.
//! - [`dpo`] trains a denoising policy from preference pairs.
//! - [`aae`] regenerates images whose prompt aspects were neglected.
//! - [`store`] persists sessions as append-only event logs.

pub mod aae;
pub mod backends;
pub mod dpo;
pub mod engine;
pub mod rng;
pub mod store;
pub mod toyworld;
pub mod types;

pub use engine::{Engine, EngineError, RoundRecord, SessionMode, SessionState, Stage, UserInput};
pub use types::{AspectSchema, AspectVector, SchemaRegistry};
