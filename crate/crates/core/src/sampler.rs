//! Categorical relaxation over the options of a layer.
//!
//! Plain softmax over the architecture logits gives the sampling
//! distribution π. The Gumbel-softmax relaxation perturbs `log π` with
//! Gumbel(0, 1) noise and sharpens with a temperature τ. Noise comes from a
//! counter-based ChaCha stream keyed by `(stream, row)`, so any draw can be
//! regenerated independently of evaluation order.

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Linear,
    Exponential,
}

/// How the per-step option weights are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelaxMode {
    /// Gumbel-softmax weights.
    Soft,
    /// One-hot forward value, Gumbel-softmax gradient.
    HardStraightThrough,
    /// Noise-free softmax of the logits.
    PlainSoftmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GumbelConfig {
    pub tau_start: f64,
    pub tau_end: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub mode: RelaxMode,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            tau_start: 5.0,
            tau_end: 0.5,
            schedule: Schedule::Linear,
            seed: 0,
            mode: RelaxMode::Soft,
        }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_end > 0.0 && self.tau_start >= self.tau_end && self.tau_start.is_finite()) {
            return Err(Error::invalid(format!(
                "temperatures must satisfy tau_start >= tau_end > 0, got {} and {}",
                self.tau_start, self.tau_end
            )));
        }
        Ok(())
    }
}

/// Softmax of one logit vector.
pub fn softmax_probs(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|a| (a - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|a| a - lse).collect()
}

/// Gumbel-softmax weights `softmax((log π + g) / τ)`.
///
/// Computed as `softmax((α + g) / τ)`: the normalizer of `log π` is a shared
/// shift that softmax cancels, so zero-probability options need no `log 0`.
pub fn gumbel_probs(logits: &[f64], tau: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if noise.len() != logits.len() {
        return Err(Error::invalid(format!(
            "{} noise values for {} logits",
            noise.len(),
            logits.len()
        )));
    }
    let z: Vec<f64> = logits.iter().zip(noise).map(|(a, g)| (a + g) * (1.0 / tau)).collect();
    Ok(softmax_probs(&z))
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(n: usize, idx: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[idx] = 1.0;
    v
}

/// Gumbel-max draw: one-hot at `argmax(α + g)` plus the chosen index.
pub fn hard_sample(logits: &[f64], noise: &[f64]) -> (Vec<f64>, usize) {
    let perturbed: Vec<f64> = logits.iter().zip(noise).map(|(a, g)| a + g).collect();
    let idx = argmax(&perturbed);
    (one_hot(logits.len(), idx), idx)
}

/// `temperature_at` along the configured schedule; monotone from `tau_start`
/// at step 0 to `tau_end` at `total_steps`.
pub fn temperature_at(step: usize, total_steps: usize, cfg: &GumbelConfig) -> f64 {
    if total_steps == 0 {
        return cfg.tau_start;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    match cfg.schedule {
        Schedule::Linear => cfg.tau_start + (cfg.tau_end - cfg.tau_start) * t,
        Schedule::Exponential => cfg.tau_start * (cfg.tau_end / cfg.tau_start).powf(t),
    }
}

/// Counter-based Gumbel(0, 1) noise source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    seed: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        NoiseStream { seed }
    }

    /// Stream id of one searchable layer at one training step.
    pub fn search_stream(layer: usize, step: usize) -> u64 {
        ((layer as u64) << 40) | (step as u64 & ((1 << 40) - 1))
    }

    /// `n` uniforms in (0, 1) for `(stream, row)`.
    pub fn uniforms(&self, stream: u64, row: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        // each f64 consumes one u64, i.e. two 32-bit words
        rng.set_word_pos(u128::from(row) * n as u128 * 2);
        (0..n).map(|_| rng.sample::<f64, _>(Open01)).collect()
    }

    /// `n` Gumbel(0, 1) draws `-ln(-ln u)` for `(stream, row)`.
    pub fn gumbel(&self, stream: u64, row: u64, n: usize) -> Vec<f64> {
        self.uniforms(stream, row, n)
            .into_iter()
            .map(|u| -(-u.ln()).ln())
            .collect()
    }

    /// `[rows, n]` noise matrix for a whole layer.
    pub fn gumbel_matrix(&self, stream: u64, rows: usize, n: usize) -> Tensor {
        let data = (0..rows)
            .flat_map(|r| self.gumbel(stream, r as u64, n))
            .collect();
        Tensor::new(&[rows, n], data).expect("noise shape")
    }
}

/// Seeded Gumbel-max sample for draw number `draw`.
pub fn hard_sample_seeded(logits: &[f64], seed: u64, draw: u64) -> (Vec<f64>, usize) {
    let g = NoiseStream::new(seed).gumbel(u64::MAX, draw, logits.len());
    hard_sample(logits, &g)
}

/// Taped option weights for a `[rows, options]` logit matrix.
///
/// `noise` is required for the Gumbel modes and ignored by `PlainSoftmax`.
pub fn relaxed_weights(tape: &Tape, alpha: Var, noise: Option<&Tensor>, tau: f64, mode: RelaxMode) -> Result<Var> {
    if mode == RelaxMode::PlainSoftmax {
        return tape.softmax(alpha);
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let noise = noise.ok_or_else(|| Error::invalid("Gumbel relaxation needs a noise tensor"))?;
    let g = tape.constant(noise.clone());
    let perturbed = tape.add(alpha, g)?;
    let soft = tape.softmax(tape.scale(perturbed, 1.0 / tau))?;
    if mode == RelaxMode::Soft {
        return Ok(soft);
    }
    let pv = tape.value(perturbed);
    let n = *pv.shape().last().expect("rank >= 1");
    let hard: Vec<f64> = pv.data().chunks(n).flat_map(|row| one_hot(n, argmax(row))).collect();
    tape.straight_through(soft, Tensor::new(pv.shape(), hard)?)
}
