//! An analytic generative world.
//!
//! Images, prompts and user intents are [`AspectVector`]s. The generator
//! copies pinned slots (each neglected with probability `neglect_prob`) and
//! fills the rest uniformly, which makes the expected image-to-target
//! alignment available in closed form.

use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backends, ToyGenerator};
use crate::engine::{Engine, EngineError, SessionState, UserInput};
use crate::rng::{mix_seed, seeded, SplitRng};
use crate::types::{AspectSchema, AspectVector, Question, VectorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ToyError {
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error("schemas differ: `{0}` vs `{1}`")]
    SchemaMismatch(String, String),
    #[error("alignment needs fully specified vectors")]
    NotFullySpecified,
    #[error("pinned count {pinned} outside 0..={aspects}")]
    OutOfRange { pinned: usize, aspects: usize },
    #[error("closed-form alignment assumes neglect_prob = 0, got {0}")]
    NeglectNotSupported(f64),
    #[error("neglect_prob must lie in [0, 1], got {0}")]
    BadNeglectProb(f64),
    #[error("initial aspects must be a non-empty subset of the schema")]
    BadInitialAspects,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorldConfig {
    pub schema: AspectSchema,
    pub neglect_prob: f64,
    pub seed: u64,
}

impl ToyWorldConfig {
    pub fn new(schema: AspectSchema) -> Self {
        Self {
            schema,
            neglect_prob: 0.0,
            seed: 0,
        }
    }

    pub fn with_neglect(mut self, neglect_prob: f64) -> Self {
        self.neglect_prob = neglect_prob;
        self
    }

    pub fn vocab_size(&self) -> u32 {
        self.schema.vocab_size
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        if !(0.0..=1.0).contains(&self.neglect_prob) {
            return Err(ToyError::BadNeglectProb(self.neglect_prob));
        }
        Ok(())
    }
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        Self::new(AspectSchema::default_schema())
    }
}

/// Samples an image for `prompt`. Deterministic in `(prompt, seed)`.
pub fn toy_generate(prompt: &AspectVector, seed: u64, cfg: &ToyWorldConfig) -> AspectVector {
    toy_generate_boosted(prompt, seed, cfg, &[])
}

/// Like [`toy_generate`], but slots listed in `boosted` are never neglected.
pub fn toy_generate_boosted(
    prompt: &AspectVector,
    seed: u64,
    cfg: &ToyWorldConfig,
    boosted: &[usize],
) -> AspectVector {
    let vocab = cfg.vocab_size();
    let slots = prompt
        .slots
        .iter()
        .enumerate()
        .map(|(slot, wanted)| {
            let mut rng = seeded(mix_seed(seed, slot as u64));
            let neglect_draw: f64 = rng.random();
            let value = match *wanted {
                Some(v) if boosted.contains(&slot) || neglect_draw >= cfg.neglect_prob => v,
                // a neglected slot renders as any value other than the asked one
                Some(v) => {
                    let other = rng.random_range(0..vocab - 1);
                    if other >= v {
                        other + 1
                    } else {
                        other
                    }
                }
                None => rng.random_range(0..vocab),
            };
            Some(value)
        })
        .collect();
    AspectVector {
        schema: prompt.schema.clone(),
        slots,
    }
}

/// Fraction of matching slots between two fully specified vectors.
pub fn alignment(a: &AspectVector, b: &AspectVector) -> Result<f64, ToyError> {
    if a.schema != b.schema {
        return Err(ToyError::SchemaMismatch(a.schema.clone(), b.schema.clone()));
    }
    if a.slots.len() != b.slots.len() || a.slots.is_empty() {
        return Err(ToyError::SchemaMismatch(a.schema.clone(), b.schema.clone()));
    }
    if !a.is_fully_specified() || !b.is_fully_specified() {
        return Err(ToyError::NotFullySpecified);
    }
    let matches = a.slots.iter().zip(&b.slots).filter(|(x, y)| x == y).count();
    Ok(matches as f64 / a.slots.len() as f64)
}

/// Expected alignment to the target when `pinned` target aspects are in the
/// prompt and the remaining `A - pinned` are filled uniformly from `V`.
pub fn expected_alignment(pinned: usize, cfg: &ToyWorldConfig) -> Result<f64, ToyError> {
    let aspects = cfg.schema.len();
    if pinned > aspects {
        return Err(ToyError::OutOfRange { pinned, aspects });
    }
    if cfg.neglect_prob != 0.0 {
        return Err(ToyError::NeglectNotSupported(cfg.neglect_prob));
    }
    let free = (aspects - pinned) as f64;
    Ok((pinned as f64 + free / cfg.vocab_size() as f64) / aspects as f64)
}

/// A user with a hidden, fully specified target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedUser {
    pub target: AspectVector,
    pub initial_aspects: Vec<usize>,
    pub reply_prob: f64,
}

impl SimulatedUser {
    pub fn new(target: AspectVector, initial_aspects: Vec<usize>) -> Result<Self, ToyError> {
        if initial_aspects.is_empty()
            || initial_aspects.iter().any(|&a| a >= target.slots.len())
            || !target.is_fully_specified()
        {
            return Err(ToyError::BadInitialAspects);
        }
        Ok(Self {
            target,
            initial_aspects,
            reply_prob: 1.0,
        })
    }

    /// A uniformly random target revealing the first `revealed` aspects.
    pub fn random(schema: &AspectSchema, revealed: usize, seed: u64) -> Result<Self, ToyError> {
        let mut rng = seeded(seed);
        let values: Vec<u32> = (0..schema.len())
            .map(|_| rng.random_range(0..schema.vocab_size))
            .collect();
        Self::new(
            AspectVector::from_values(schema, &values),
            (0..revealed.min(schema.len())).collect(),
        )
    }

    /// The opening request: the initially revealed aspects.
    pub fn opening(&self) -> AspectVector {
        self.reveal(&self.initial_aspects)
    }

    fn reveal(&self, aspects: &[usize]) -> AspectVector {
        let mut out = AspectVector {
            schema: self.target.schema.clone(),
            slots: vec![None; self.target.slots.len()],
        };
        for &a in aspects {
            out.slots[a] = self.target.slots[a];
        }
        out
    }
}

/// Answers the asked aspect from the target, or stays silent.
pub fn user_reply(
    user: &SimulatedUser,
    schema: &AspectSchema,
    question: &Question,
    rng: &mut impl Rng,
) -> Option<AspectVector> {
    let aspect = schema.aspect_index(&question.aspect)?;
    let draw: f64 = rng.random();
    (draw < user.reply_prob).then(|| user.reveal(&[aspect]))
}

/// Free-text turn sent when the simulated user declines to answer.
pub const SILENT_REPLY: &str = "skip";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub world: ToyWorldConfig,
    /// Aspects revealed in the opening message.
    pub revealed: usize,
    pub reply_prob: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            world: ToyWorldConfig::default(),
            revealed: 1,
            reply_prob: 1.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRow {
    pub round: u32,
    pub mean: f64,
    pub delta: f64,
}

/// Per-round mean alignment of the generated image to the hidden target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTable {
    pub dialogues: usize,
    pub rows: Vec<SimulationRow>,
}

impl SimulationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,mean,delta\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.5},{:.5}\n", r.round, r.mean, r.delta));
        }
        out
    }
}

impl fmt::Display for SimulationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>5}  {:>8}  {:>10}", "round", "mean", "delta")?;
        for r in &self.rows {
            if r.round == 1 {
                writeln!(f, "{:>5}  {:>8.5}  {:>10}", r.round, r.mean, "-")?;
            } else {
                writeln!(
                    f,
                    "{:>5}  {:>8.5}  {:>10}",
                    r.round,
                    r.mean,
                    format!("(↑ {:.5})", r.delta)
                )?;
            }
        }
        Ok(())
    }
}

/// Plays one dialogue against `engine`; returns alignment per round and the
/// number of pinned prompt slots per round.
pub fn run_dialogue(
    engine: &Engine,
    user: &SimulatedUser,
    schema: &AspectSchema,
    rounds: u32,
    seed: u64,
) -> Result<(Vec<f64>, Vec<usize>), ToyError> {
    let split = SplitRng::new(seed);
    let mut state = SessionState::new(format!("sim-{seed:016x}"), schema.clone(), split.split("session", 0).seed());
    let mut input = UserInput::Assignment(user.opening());
    let mut scores = Vec::with_capacity(rounds as usize);
    let mut pinned = Vec::with_capacity(rounds as usize);
    for round in 1..=rounds {
        let outcome = engine.run_round(&state, input)?;
        let image = outcome
            .record
            .image
            .toy_vector()
            .expect("toy engine produces toy images");
        scores.push(alignment(image, &user.target)?);
        pinned.push(
            outcome
                .record
                .prompt
                .structured
                .as_ref()
                .map_or(0, AspectVector::specified_count),
        );
        let mut reply_rng = split.split("reply", u64::from(round)).rng();
        input = match user_reply(user, schema, &outcome.record.question, &mut reply_rng) {
            Some(answer) => UserInput::Assignment(answer),
            None => UserInput::Text(SILENT_REPLY.into()),
        };
        state = outcome.state;
    }
    Ok((scores, pinned))
}

/// Runs `n_dialogues` simulated dialogues of `rounds` rounds each.
pub fn run_simulation(
    n_dialogues: usize,
    rounds: u32,
    cfg: &SimulationConfig,
) -> Result<SimulationTable, ToyError> {
    cfg.world.validate()?;
    let schema = &cfg.world.schema;
    let engine = Engine::new(Backends::toy(ToyGenerator::new(cfg.world.clone())));
    let root = SplitRng::new(cfg.seed);
    let per_dialogue: Vec<Vec<f64>> = (0..n_dialogues)
        .into_par_iter()
        .map(|d| {
            let seed = root.split("dialogue", d as u64).seed();
            let mut user = SimulatedUser::random(schema, cfg.revealed, mix_seed(seed, 1))?;
            user.reply_prob = cfg.reply_prob;
            run_dialogue(&engine, &user, schema, rounds, seed).map(|(scores, _)| scores)
        })
        .collect::<Result<_, _>>()?;
    // sequential reduction keeps the means bit-reproducible
    let mut rows = Vec::with_capacity(rounds as usize);
    for r in 0..rounds as usize {
        let mean = per_dialogue.iter().map(|s| s[r]).sum::<f64>() / n_dialogues.max(1) as f64;
        let first = rows.first().map_or(mean, |row: &SimulationRow| row.mean);
        rows.push(SimulationRow {
            round: r as u32 + 1,
            mean,
            delta: mean - first,
        });
    }
    Ok(SimulationTable {
        dialogues: n_dialogues,
        rows,
    })
}
