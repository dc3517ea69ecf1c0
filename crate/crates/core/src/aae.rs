//! Check-and-regenerate for neglected prompt aspects.
//!
//! Score the image against the prompt; while the score is at or below the
//! threshold, find the most neglected aspect, add it to the boosted list and
//! regenerate with every boosted aspect forced. In the toy world "forced"
//! means the aspect cannot be neglected.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Embedder, ToyEmbedder};
use crate::rng::{mix_seed, seeded, SplitRng};
use crate::toyworld::{toy_generate_boosted, ToyWorldConfig};
use crate::types::{AspectSchema, AspectVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AaeError {
    #[error("prompt has no specified aspect")]
    EmptyPrompt,
    #[error("every prompt aspect is realized")]
    NothingNeglected,
    #[error("threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("max_iterations must be at least 1")]
    NoIterations,
    #[error("image and prompt have different shapes")]
    ShapeMismatch,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimBackend {
    #[default]
    Toy,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolConfig {
    pub threshold: f64,
    pub max_iterations: usize,
    #[serde(default)]
    pub sim_backend: SimBackend,
}

impl Default for ToolConfig {
    fn default() -> Self {
        Self {
            threshold: 0.7,
            max_iterations: 5,
            sim_backend: SimBackend::Toy,
        }
    }
}

impl ToolConfig {
    pub fn with_threshold(threshold: f64) -> Self {
        Self {
            threshold,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AaeError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(AaeError::BadThreshold(self.threshold));
        }
        if self.max_iterations == 0 {
            return Err(AaeError::NoIterations);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeglectReport {
    /// Similarity of the returned image.
    pub sim: f64,
    pub initial_sim: f64,
    /// Similarity of the last regeneration, which may be below `sim`.
    pub last_sim: f64,
    pub token_list: Vec<String>,
    pub iterations_used: usize,
    pub invoked: bool,
}

fn check_shapes(image: &AspectVector, prompt: &AspectVector) -> Result<(), AaeError> {
    if image.slots.len() != prompt.slots.len() || image.schema != prompt.schema {
        return Err(AaeError::ShapeMismatch);
    }
    if prompt.specified_count() == 0 {
        return Err(AaeError::EmptyPrompt);
    }
    Ok(())
}

fn aspect_scores(
    image: &AspectVector,
    prompt: &AspectVector,
    schema: &AspectSchema,
    scorer: &dyn Embedder,
) -> Result<Vec<(usize, f64)>, AaeError> {
    check_shapes(image, prompt)?;
    prompt
        .slots
        .iter()
        .enumerate()
        .filter_map(|(i, want)| want.map(|w| (i, w)))
        .map(|(i, want)| {
            let got = image.get(i).map(|v| schema.value_name(i, v)).unwrap_or_default();
            Ok((i, scorer.similarity(&schema.value_name(i, want), &got)?))
        })
        .collect()
}

/// Fraction of prompt-specified slots that the image realizes.
pub fn compute_sim(image: &AspectVector, prompt: &AspectVector) -> Result<f64, AaeError> {
    check_shapes(image, prompt)?;
    let specified: Vec<usize> = (0..prompt.slots.len())
        .filter(|&i| prompt.slots[i].is_some())
        .collect();
    let realized = specified
        .iter()
        .filter(|&&i| image.slots[i] == prompt.slots[i])
        .count();
    Ok(realized as f64 / specified.len() as f64)
}

/// The first prompt-specified aspect (schema order) the image does not realize.
pub fn attribute_neglect(image: &AspectVector, prompt: &AspectVector) -> Result<usize, AaeError> {
    check_shapes(image, prompt)?;
    prompt
        .slots
        .iter()
        .enumerate()
        .find(|(i, want)| want.is_some() && image.slots[*i] != **want)
        .map(|(i, _)| i)
        .ok_or(AaeError::NothingNeglected)
}

/// Similarity and peak aspect through an arbitrary scorer: the mean of the
/// per-aspect scores, and the lowest-scoring aspect (first in schema order on
/// ties). With [`ToyEmbedder`] this agrees with [`compute_sim`] and
/// [`attribute_neglect`].
pub fn score_with(
    image: &AspectVector,
    prompt: &AspectVector,
    schema: &AspectSchema,
    scorer: &dyn Embedder,
) -> Result<(f64, Option<usize>), AaeError> {
    let scores = aspect_scores(image, prompt, schema, scorer)?;
    let sim = scores.iter().map(|(_, s)| s).sum::<f64>() / scores.len() as f64;
    let peak = scores
        .iter()
        .filter(|(_, s)| *s < 1.0)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| *i);
    Ok((sim, peak))
}

/// Seed for regeneration `iteration`; iteration 0 is the plain first draw.
pub fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    if iteration == 0 {
        seed
    } else {
        mix_seed(seed ^ 0xA5A5_A5A5_A5A5_A5A5, iteration as u64)
    }
}

/// Runs the tool with exact toy scoring.
pub fn run_tool(
    prompt: &AspectVector,
    seed: u64,
    cfg: &ToolConfig,
    world: &ToyWorldConfig,
) -> Result<(AspectVector, NeglectReport), AaeError> {
    run_tool_with(prompt, seed, cfg, world, &ToyEmbedder)
}

/// Runs the tool scoring with `scorer`. Returns the best image seen and a
/// report; never fails once the inputs are valid.
pub fn run_tool_with(
    prompt: &AspectVector,
    seed: u64,
    cfg: &ToolConfig,
    world: &ToyWorldConfig,
    scorer: &dyn Embedder,
) -> Result<(AspectVector, NeglectReport), AaeError> {
    cfg.validate()?;
    let schema = &world.schema;
    let mut image = toy_generate_boosted(prompt, iteration_seed(seed, 0), world, &[]);
    let (initial_sim, _) = score_with(&image, prompt, schema, scorer)?;
    let mut best = (image.clone(), initial_sim);
    let mut last_sim = initial_sim;
    let mut boosted: Vec<usize> = Vec::new();
    let mut iterations_used = 0;
    for iteration in 1..=cfg.max_iterations {
        let (sim, peak) = score_with(&image, prompt, schema, scorer)?;
        if sim > cfg.threshold {
            break;
        }
        let Some(peak) = peak.filter(|p| !boosted.contains(p)) else {
            break;
        };
        boosted.push(peak);
        image = toy_generate_boosted(prompt, iteration_seed(seed, iteration), world, &boosted);
        iterations_used = iteration;
        last_sim = score_with(&image, prompt, schema, scorer)?.0;
        if last_sim > best.1 {
            best = (image.clone(), last_sim);
        }
    }
    let report = NeglectReport {
        sim: best.1,
        initial_sim,
        last_sim,
        token_list: boosted.iter().map(|&i| schema.aspects[i].clone()).collect(),
        iterations_used,
        invoked: iterations_used > 0,
    };
    Ok((best.0, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: f64,
    pub frequency: f64,
    pub initial_sim: f64,
    pub final_sim: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub trials: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,frequency,initial_sim,final_sim,delta\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4}\n",
                r.k, r.frequency, r.initial_sim, r.final_sim, r.delta
            ));
        }
        out
    }
}

impl fmt::Display for SweepTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>6}  {:>9}  {:>11}  {:>9}  {:>8}",
            "k", "usage", "initial_sim", "final_sim", "delta"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>6}  {:>8.1}%  {:>11.4}  {:>9.4}  {:>+8.4}",
                r.k,
                100.0 * r.frequency,
                r.initial_sim,
                r.final_sim,
                r.delta
            )?;
        }
        Ok(())
    }
}

/// The prompt used by sweep trial `trial`: the first `specified` aspects set
/// to seeded random values.
pub fn sweep_prompt(schema: &AspectSchema, specified: usize, seed: u64) -> AspectVector {
    use rand::Rng;
    let mut rng = seeded(seed);
    let mut prompt = AspectVector::unspecified(schema);
    for slot in 0..specified.min(schema.len()) {
        prompt.set(slot, rng.random_range(0..schema.vocab_size));
    }
    prompt
}

/// Invocation frequency and similarity gain at each threshold. Every
/// threshold sees the same prompts and seeds.
pub fn threshold_sweep(
    thresholds: &[f64],
    n_trials: usize,
    specified: usize,
    base: &ToolConfig,
    world: &ToyWorldConfig,
    seed: u64,
) -> Result<SweepTable, AaeError> {
    let root = SplitRng::new(seed);
    let rows = thresholds
        .iter()
        .map(|&k| {
            let cfg = ToolConfig {
                threshold: k,
                ..base.clone()
            };
            cfg.validate()?;
            let reports: Vec<NeglectReport> = (0..n_trials)
                .into_par_iter()
                .map(|t| {
                    let trial = root.split("trial", t as u64);
                    let prompt = sweep_prompt(&world.schema, specified, trial.split("prompt", 0).seed());
                    run_tool(&prompt, trial.split("image", 0).seed(), &cfg, world).map(|(_, r)| r)
                })
                .collect::<Result<_, _>>()?;
            let n = n_trials.max(1) as f64;
            let frequency = reports.iter().filter(|r| r.invoked).count() as f64 / n;
            let initial_sim = reports.iter().map(|r| r.initial_sim).sum::<f64>() / n;
            let final_sim = reports.iter().map(|r| r.sim).sum::<f64>() / n;
            Ok(SweepRow {
                k,
                frequency,
                initial_sim,
                final_sim,
                delta: final_sim - initial_sim,
            })
        })
        .collect::<Result<_, AaeError>>()?;
    Ok(SweepTable {
        trials: n_trials,
        rows,
    })
}
