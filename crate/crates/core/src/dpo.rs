//! Preference optimization over a denoising policy.
//!
//! The policy denoises a latent in `T` steps. At step `t` it maps the current
//! latent `x_t` to the next one by sampling
//! `Normal(c_t * x_t + b_t, sigma_t^2 I)`; the per-step biases `b_t` are the
//! trainable parameters. Because the policy is Gaussian in `b_t`, log
//! densities, the loss and its gradient are all available in closed form.
//!
//! The loss treats every step of the preferred trajectory as preferred:
//!
//! ```text
//! z    = beta * [ (L_theta(w) - L_ref(w)) - (L_theta(l) - L_ref(l)) ]
//! loss = -ln sigmoid(z)
//! ```
//!
//! where `L(.)` is the summed per-step log density of a trajectory.

use std::cmp::Ordering;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{mix_seed, seeded, SplitRng};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DpoError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("beta must be positive, got {0}")]
    NonPositiveBeta(f64),
    #[error("no preference pairs to train on")]
    EmptyStore,
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// Per-step noise scales and drift coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub noise_scales: Vec<f64>,
    pub drift: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(noise_scales: Vec<f64>, drift: Vec<f64>) -> Result<Self, DpoError> {
        let schedule = Self {
            noise_scales,
            drift,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    /// A four-step schedule whose noise shrinks as denoising proceeds.
    pub fn standard() -> Self {
        Self {
            noise_scales: vec![1.0, 0.8, 0.6, 0.4],
            drift: vec![0.9, 0.9, 0.9, 0.9],
        }
    }

    pub fn steps(&self) -> usize {
        self.noise_scales.len()
    }

    pub fn validate(&self) -> Result<(), DpoError> {
        if self.noise_scales.is_empty() {
            return Err(DpoError::InvalidSchedule("need at least one step".into()));
        }
        if self.noise_scales.len() != self.drift.len() {
            return Err(DpoError::InvalidSchedule(
                "noise_scales and drift differ in length".into(),
            ));
        }
        if self
            .noise_scales
            .iter()
            .any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(DpoError::InvalidSchedule("noise scales must be positive".into()));
        }
        if self.drift.iter().any(|c| !c.is_finite()) {
            return Err(DpoError::InvalidSchedule("drift must be finite".into()));
        }
        Ok(())
    }
}

/// The trainable per-step biases, shape `(T, dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub dim: usize,
    pub bias: Vec<Vec<f64>>,
    pub schedule: DiffusionSchedule,
}

/// One denoising state: the latent and the step that consumes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoisingState {
    pub step: usize,
    pub latent: Vec<f64>,
}

/// States `s_0..s_{T-1}` and actions `a_0..a_{T-1}`, with `s_{t+1} = a_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoisingTrajectory {
    pub states: Vec<DenoisingState>,
    pub actions: Vec<Vec<f64>>,
}

impl DenoisingTrajectory {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    /// The final denoised latent.
    pub fn output(&self) -> &[f64] {
        self.actions.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn validate(&self, steps: usize, dim: usize) -> Result<(), DpoError> {
        if self.states.len() != steps || self.actions.len() != steps {
            return Err(DpoError::ShapeMismatch(format!(
                "trajectory has {} states / {} actions, policy has {steps} steps",
                self.states.len(),
                self.actions.len()
            )));
        }
        for (t, (s, a)) in self.states.iter().zip(&self.actions).enumerate() {
            if s.step != t || s.latent.len() != dim || a.len() != dim {
                return Err(DpoError::ShapeMismatch(format!(
                    "step {t}: expected latent dim {dim}"
                )));
            }
            if t + 1 < steps && self.states[t + 1].latent != *a {
                return Err(DpoError::ShapeMismatch(format!(
                    "state {} does not continue action {t}",
                    t + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub winner: DenoisingTrajectory,
    pub loser: DenoisingTrajectory,
    pub prompt_id: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub prompts_per_epoch: usize,
    pub batch_size: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            learning_rate: 1e-2,
            epochs: 50,
            prompts_per_epoch: 100,
            batch_size: 40,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), DpoError> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(DpoError::NonPositiveBeta(self.beta));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(DpoError::InvalidConfig("learning_rate must be non-negative".into()));
        }
        if self.epochs == 0 || self.prompts_per_epoch == 0 || self.batch_size == 0 {
            return Err(DpoError::InvalidConfig(
                "epochs, prompts_per_epoch and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-step log densities and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProb {
    pub per_step: Vec<f64>,
    pub total: f64,
}

impl PolicyParams {
    /// Zero biases on the given schedule.
    pub fn zeros(dim: usize, schedule: DiffusionSchedule) -> Self {
        Self {
            dim,
            bias: vec![vec![0.0; dim]; schedule.steps()],
            schedule,
        }
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn validate(&self) -> Result<(), DpoError> {
        self.schedule.validate()?;
        if self.dim == 0
            || self.bias.len() != self.steps()
            || self.bias.iter().any(|b| b.len() != self.dim)
        {
            return Err(DpoError::ShapeMismatch(format!(
                "bias must have shape ({}, {})",
                self.steps(),
                self.dim
            )));
        }
        if self.bias.iter().flatten().any(|x| !x.is_finite()) {
            return Err(DpoError::ShapeMismatch("bias entries must be finite".into()));
        }
        Ok(())
    }

    fn mean(&self, step: usize, latent: &[f64]) -> Vec<f64> {
        let c = self.schedule.drift[step];
        latent
            .iter()
            .zip(&self.bias[step])
            .map(|(x, b)| c * x + b)
            .collect()
    }

    /// Samples a trajectory starting from standard-normal noise.
    pub fn sample(&self, seed: u64) -> DenoisingTrajectory {
        let mut rng = seeded(seed);
        let mut latent: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut states = Vec::with_capacity(self.steps());
        let mut actions = Vec::with_capacity(self.steps());
        for step in 0..self.steps() {
            let sigma = self.schedule.noise_scales[step];
            let action: Vec<f64> = self
                .mean(step, &latent)
                .into_iter()
                .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            states.push(DenoisingState { step, latent });
            latent = action.clone();
            actions.push(action);
        }
        DenoisingTrajectory { states, actions }
    }

    fn check_compatible(&self, other: &PolicyParams) -> Result<(), DpoError> {
        if self.dim != other.dim || self.schedule != other.schedule {
            return Err(DpoError::ShapeMismatch(
                "policy and reference differ in dimension or schedule".into(),
            ));
        }
        Ok(())
    }

    /// Squared-bias KL divergence to `reference`, summed over steps.
    pub fn kl_to(&self, reference: &PolicyParams) -> Result<f64, DpoError> {
        self.check_compatible(reference)?;
        Ok(self
            .bias
            .iter()
            .zip(&reference.bias)
            .zip(&self.schedule.noise_scales)
            .map(|((b, r), sigma)| {
                let d2: f64 = b.iter().zip(r).map(|(x, y)| (x - y).powi(2)).sum();
                d2 / (2.0 * sigma * sigma)
            })
            .sum())
    }
}

/// Gaussian log density of each action under `params`.
pub fn log_prob(params: &PolicyParams, traj: &DenoisingTrajectory) -> Result<LogProb, DpoError> {
    params.validate()?;
    traj.validate(params.steps(), params.dim)?;
    let per_step: Vec<f64> = traj
        .states
        .iter()
        .zip(&traj.actions)
        .map(|(state, action)| {
            let sigma = params.schedule.noise_scales[state.step];
            let var = sigma * sigma;
            let mean = params.mean(state.step, &state.latent);
            let sq: f64 = action.iter().zip(&mean).map(|(a, m)| (a - m).powi(2)).sum();
            -0.5 * params.dim as f64 * (2.0 * PI * var).ln() - sq / (2.0 * var)
        })
        .collect();
    let total = per_step.iter().sum();
    Ok(LogProb { per_step, total })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss for one pair, with its parts for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub loss: f64,
    /// The argument of the sigmoid.
    pub inner: f64,
    /// Per-step `log pi_theta - log pi_ref` on the winner.
    pub winner_ratios: Vec<f64>,
    /// Per-step `log pi_theta - log pi_ref` on the loser.
    pub loser_ratios: Vec<f64>,
}

pub fn d3po_loss_breakdown(
    theta: &PolicyParams,
    reference: &PolicyParams,
    pair: &PreferencePair,
    beta: f64,
) -> Result<LossBreakdown, DpoError> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(DpoError::NonPositiveBeta(beta));
    }
    theta.check_compatible(reference)?;
    let ratios = |traj| -> Result<Vec<f64>, DpoError> {
        let lt = log_prob(theta, traj)?;
        let lr = log_prob(reference, traj)?;
        Ok(lt.per_step.iter().zip(&lr.per_step).map(|(a, b)| a - b).collect())
    };
    let winner_ratios = ratios(&pair.winner)?;
    let loser_ratios = ratios(&pair.loser)?;
    let inner = beta * (winner_ratios.iter().sum::<f64>() - loser_ratios.iter().sum::<f64>());
    Ok(LossBreakdown {
        loss: softplus(-inner),
        inner,
        winner_ratios,
        loser_ratios,
    })
}

/// `-ln sigmoid(beta * (winner log-ratio - loser log-ratio))`.
pub fn d3po_loss(
    theta: &PolicyParams,
    reference: &PolicyParams,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64, DpoError> {
    d3po_loss_breakdown(theta, reference, pair, beta).map(|b| b.loss)
}

/// `d log pi_theta(traj) / d b_t` for every step.
fn score_function(theta: &PolicyParams, traj: &DenoisingTrajectory) -> Vec<Vec<f64>> {
    traj.states
        .iter()
        .zip(&traj.actions)
        .map(|(state, action)| {
            let sigma = theta.schedule.noise_scales[state.step];
            let mean = theta.mean(state.step, &state.latent);
            action
                .iter()
                .zip(&mean)
                .map(|(a, m)| (a - m) / (sigma * sigma))
                .collect()
        })
        .collect()
}

/// Mean loss over a batch and its gradient with respect to every `b_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub loss: f64,
    pub grad: Vec<Vec<f64>>,
}

pub fn d3po_grad(
    theta: &PolicyParams,
    reference: &PolicyParams,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<BatchGradient, DpoError> {
    if pairs.is_empty() {
        return Err(DpoError::EmptyStore);
    }
    let per_pair: Vec<(f64, Vec<Vec<f64>>)> = pairs
        .par_iter()
        .map(|pair| {
            let parts = d3po_loss_breakdown(theta, reference, pair, beta)?;
            // d loss / d inner = -(1 - sigmoid(inner)) = -sigmoid(-inner)
            let weight = -beta * sigmoid(-parts.inner);
            let gw = score_function(theta, &pair.winner);
            let gl = score_function(theta, &pair.loser);
            let grad = gw
                .iter()
                .zip(&gl)
                .map(|(w, l)| w.iter().zip(l).map(|(x, y)| weight * (x - y)).collect())
                .collect();
            Ok((parts.loss, grad))
        })
        .collect::<Result<_, DpoError>>()?;
    let n = pairs.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; theta.dim]; theta.steps()];
    for (l, g) in &per_pair {
        loss += l;
        for (acc, step) in grad.iter_mut().zip(g) {
            for (a, x) in acc.iter_mut().zip(step) {
                *a += x;
            }
        }
    }
    grad.iter_mut().flatten().for_each(|g| *g /= n);
    Ok(BatchGradient {
        loss: loss / n,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub params: PolicyParams,
    pub losses: Vec<StepLoss>,
}

impl TrainReport {
    /// Mean loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.losses.iter().map(|l| l.epoch).max().map_or(0, |e| e + 1);
        (0..epochs)
            .map(|e| {
                let xs: Vec<f64> = self
                    .losses
                    .iter()
                    .filter(|l| l.epoch == e)
                    .map(|l| l.loss)
                    .collect();
                xs.iter().sum::<f64>() / xs.len() as f64
            })
            .collect()
    }
}

/// Plain gradient descent: `epochs` x `prompts_per_epoch` steps, cycling
/// through consecutive batches of `batch_size` pairs. `reference` is never
/// modified.
pub fn train(
    theta0: &PolicyParams,
    reference: &PolicyParams,
    pairs: &[PreferencePair],
    cfg: &TrainerConfig,
) -> Result<TrainReport, DpoError> {
    cfg.validate()?;
    theta0.validate()?;
    theta0.check_compatible(reference)?;
    if pairs.is_empty() {
        return Err(DpoError::EmptyStore);
    }
    let batches: Vec<&[PreferencePair]> = pairs.chunks(cfg.batch_size).collect();
    let mut params = theta0.clone();
    let mut losses = Vec::with_capacity(cfg.epochs * cfg.prompts_per_epoch);
    let mut global = 0usize;
    for epoch in 0..cfg.epochs {
        for step in 0..cfg.prompts_per_epoch {
            let batch = batches[global % batches.len()];
            let g = d3po_grad(&params, reference, batch, cfg.beta)?;
            for (b, dg) in params.bias.iter_mut().zip(&g.grad) {
                for (x, d) in b.iter_mut().zip(dg) {
                    *x -= cfg.learning_rate * d;
                }
            }
            losses.push(StepLoss {
                epoch,
                step,
                loss: g.loss,
            });
            global += 1;
        }
    }
    Ok(TrainReport { params, losses })
}

/// Scores the final latent; higher is preferred. Mean of the coordinates.
pub fn region_score(output: &[f64]) -> f64 {
    if output.is_empty() {
        return 0.0;
    }
    output.iter().sum::<f64>() / output.len() as f64
}

/// Prefers the output that lies further into the `x > 0` region.
pub fn prefer_positive(a: &[f64], b: &[f64]) -> Ordering {
    region_score(a).total_cmp(&region_score(b))
}

/// Fraction of paired draws where `oracle` prefers `theta`'s output over the
/// reference's. Both policies share each draw's seed; ties are settled by a
/// fair coin.
pub fn win_rate(
    theta: &PolicyParams,
    reference: &PolicyParams,
    oracle: &(dyn Fn(&[f64], &[f64]) -> Ordering + Sync),
    n_samples: usize,
    seed: u64,
) -> f64 {
    if n_samples == 0 {
        return 0.0;
    }
    let root = SplitRng::new(seed);
    let wins: f64 = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let s = root.split("draw", i as u64).seed();
            let mine = theta.sample(s);
            let theirs = reference.sample(s);
            match oracle(mine.output(), theirs.output()) {
                Ordering::Greater => 1.0,
                Ordering::Less => 0.0,
                Ordering::Equal => {
                    let coin: bool = root.split("coin", i as u64).rng().random();
                    if coin {
                        1.0
                    } else {
                        0.0
                    }
                }
            }
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    wins / n_samples as f64
}

/// Pairs of reference samples labelled by `oracle` (winner first).
pub fn synthetic_pairs(
    reference: &PolicyParams,
    count: usize,
    seed: u64,
    oracle: &dyn Fn(&[f64], &[f64]) -> Ordering,
) -> Vec<PreferencePair> {
    (0..count)
        .map(|i| {
            let a = reference.sample(mix_seed(seed, 2 * i as u64));
            let b = reference.sample(mix_seed(seed, 2 * i as u64 + 1));
            let (winner, loser) = match oracle(a.output(), b.output()) {
                Ordering::Less => (b, a),
                _ => (a, b),
            };
            PreferencePair {
                winner,
                loser,
                prompt_id: format!("synthetic-{i}"),
                timestamp: i as u64,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(bias: f64) -> PolicyParams {
        PolicyParams {
            dim: 1,
            bias: vec![vec![bias]],
            schedule: DiffusionSchedule::new(vec![1.0], vec![0.0]).unwrap(),
        }
    }

    fn one_step_traj(action: f64) -> DenoisingTrajectory {
        DenoisingTrajectory {
            states: vec![DenoisingState {
                step: 0,
                latent: vec![0.0],
            }],
            actions: vec![vec![action]],
        }
    }

    #[test]
    fn standard_normal_at_mean() {
        let lp = log_prob(&one_step(0.0), &one_step_traj(0.0)).unwrap();
        assert!((lp.total - (-0.5 * (2.0 * PI).ln())).abs() < 1e-12);
        assert!((lp.total + 0.91894).abs() < 1e-5);
    }

    #[test]
    fn translation_invariance() {
        let a = log_prob(&one_step(0.3), &one_step_traj(0.7)).unwrap().total;
        let b = log_prob(&one_step(1.3), &one_step_traj(1.7)).unwrap().total;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn shifted_mean_log_ratio() {
        // (-(a - mu)^2 + a^2) / 2 with a = 0.1, mu = 0.1 -> 0.005
        let shifted = log_prob(&one_step(0.1), &one_step_traj(0.1)).unwrap().total;
        let centred = log_prob(&one_step(0.0), &one_step_traj(0.1)).unwrap().total;
        assert!((shifted - centred - 0.005).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_detected() {
        let mut traj = one_step_traj(0.0);
        traj.actions[0].push(1.0);
        assert!(matches!(
            log_prob(&one_step(0.0), &traj),
            Err(DpoError::ShapeMismatch(_))
        ));
        let two = PolicyParams::zeros(1, DiffusionSchedule::new(vec![1.0, 1.0], vec![0.0, 0.0]).unwrap());
        assert!(log_prob(&two, &one_step_traj(0.0)).is_err());
    }

    #[test]
    fn broken_chain_detected() {
        let params = PolicyParams::zeros(1, DiffusionSchedule::new(vec![1.0, 1.0], vec![0.5, 0.5]).unwrap());
        let mut traj = params.sample(3);
        traj.states[1].latent[0] += 1.0;
        assert!(matches!(log_prob(&params, &traj), Err(DpoError::ShapeMismatch(_))));
    }

    #[test]
    fn loss_worked_example() {
        let pair = PreferencePair {
            winner: one_step_traj(0.1),
            loser: one_step_traj(-0.1),
            prompt_id: "p".into(),
            timestamp: 0,
        };
        let parts = d3po_loss_breakdown(&one_step(0.1), &one_step(0.0), &pair, 1.0).unwrap();
        assert!((parts.inner - 0.02).abs() < 1e-12);
        assert!((parts.loss - (1.0 + (-0.02f64).exp()).ln()).abs() < 1e-12);
        assert!((parts.loss - 0.683197).abs() < 1e-6);
    }

    #[test]
    fn loss_at_reference_is_ln2() {
        let pair = PreferencePair {
            winner: one_step_traj(0.4),
            loser: one_step_traj(-2.0),
            prompt_id: "p".into(),
            timestamp: 0,
        };
        for beta in [0.01, 1.0, 50.0] {
            let l = d3po_loss(&one_step(0.25), &one_step(0.25), &pair, beta).unwrap();
            assert!((l - 2f64.ln()).abs() < 1e-12);
        }
        // beta -> 0 drives the loss to ln 2 for any theta
        let l = d3po_loss(&one_step(3.0), &one_step(0.0), &pair, 1e-12).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn bad_beta_rejected() {
        let pair = PreferencePair {
            winner: one_step_traj(0.0),
            loser: one_step_traj(0.0),
            prompt_id: "p".into(),
            timestamp: 0,
        };
        for beta in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                d3po_loss(&one_step(0.0), &one_step(0.0), &pair, beta),
                Err(DpoError::NonPositiveBeta(_))
            ));
        }
    }

    #[test]
    fn symmetric_pair_has_zero_gradient() {
        let params = PolicyParams::zeros(2, DiffusionSchedule::standard());
        let traj = params.sample(5);
        let pair = PreferencePair {
            winner: traj.clone(),
            loser: traj,
            prompt_id: "p".into(),
            timestamp: 0,
        };
        let g = d3po_grad(&params, &params, &[pair], 1.0).unwrap();
        assert!(g.grad.iter().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let reference = PolicyParams::zeros(2, DiffusionSchedule::standard());
        let pairs = synthetic_pairs(&reference, 8, 1, &prefer_positive);
        let cfg = TrainerConfig {
            learning_rate: 0.0,
            epochs: 3,
            prompts_per_epoch: 2,
            batch_size: 4,
            ..TrainerConfig::default()
        };
        let report = train(&reference, &reference, &pairs, &cfg).unwrap();
        assert_eq!(report.params, reference);
        assert_eq!(report.losses.len(), 6);
        assert!(report.losses.iter().all(|l| (l.loss - 2f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn empty_store_rejected() {
        let reference = PolicyParams::zeros(1, DiffusionSchedule::standard());
        assert_eq!(
            train(&reference, &reference, &[], &TrainerConfig::default()).unwrap_err(),
            DpoError::EmptyStore
        );
    }

    #[test]
    fn kl_is_zero_at_reference() {
        let reference = PolicyParams::zeros(3, DiffusionSchedule::standard());
        assert_eq!(reference.kl_to(&reference).unwrap(), 0.0);
        let mut moved = reference.clone();
        moved.bias[3][0] = 0.4; // sigma = 0.4 -> 0.16 / 0.32
        assert!((moved.kl_to(&reference).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sampled_trajectories_are_consistent() {
        let params = PolicyParams::zeros(3, DiffusionSchedule::standard());
        let t = params.sample(17);
        t.validate(params.steps(), 3).unwrap();
        assert_eq!(t, params.sample(17));
        assert_ne!(t, params.sample(18));
    }
}
