//! Temperature-scaled decision and accuracy models with their closed forms.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

/// Errors from constructing or evaluating the closed-form models.
#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("logits must be a non-empty list of finite values")]
    InvalidLogits,
    #[error("temperature must be finite and non-negative, got {0}")]
    InvalidTemperature(f64),
    #[error("temperature zero has no softmax distribution; use argmax_limit")]
    TemperatureIsZero,
    #[error("alpha must lie strictly between 0 and 1, got {0}")]
    InvalidAlpha(f64),
    #[error("invalid ability parameters: {0}")]
    InvalidAbility(String),
}

/// A finite, non-empty vector of raw model scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    /// Validates that the vector is non-empty and every entry is finite.
    pub fn new(values: Vec<f64>) -> Result<Self, TheoryError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(TheoryError::InvalidLogits);
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A sampling temperature, finite and non-negative; zero is the argmax limit.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(value: f64) -> Result<Self, TheoryError> {
        if !value.is_finite() || value < 0.0 {
            return Err(TheoryError::InvalidTemperature(value));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }
}

/// Binary keep/change decision model parameterized by a base confidence alpha.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionModel {
    alpha: f64,
}

impl DecisionModel {
    /// Requires 0 < alpha < 1.
    pub fn new(alpha: f64) -> Result<Self, TheoryError> {
        if !alpha.is_finite() || alpha <= 0.0 || alpha >= 1.0 {
            return Err(TheoryError::InvalidAlpha(alpha));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(self) -> f64 {
        self.alpha
    }
}

/// Answer-channel ability: base accuracy, hallucination rate, answer-space size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbilityModel {
    lam: f64,
    h: f64,
    k: u32,
}

impl AbilityModel {
    /// Requires lam in (0, 1], h in [0, 1], k >= 2.
    pub fn new(lam: f64, h: f64, k: u32) -> Result<Self, TheoryError> {
        if !lam.is_finite() || lam <= 0.0 || lam > 1.0 {
            return Err(TheoryError::InvalidAbility(format!(
                "base accuracy must lie in (0, 1], got {lam}"
            )));
        }
        if !h.is_finite() || !(0.0..=1.0).contains(&h) {
            return Err(TheoryError::InvalidAbility(format!(
                "hallucination rate must lie in [0, 1], got {h}"
            )));
        }
        if k < 2 {
            return Err(TheoryError::InvalidAbility(format!(
                "answer-space size must be at least 2, got {k}"
            )));
        }
        Ok(Self { lam, h, k })
    }

    pub fn lam(self) -> f64 {
        self.lam
    }

    pub fn h(self) -> f64 {
        self.h
    }

    pub fn k(self) -> u32 {
        self.k
    }
}

/// Softmax over `logits / t`, computed with max-subtraction for stability.
///
/// Fails with `TemperatureIsZero` at t = 0; `argmax_limit` covers that case.
pub fn scaled_distribution(
    logits: &LogitVector,
    t: Temperature,
) -> Result<Vec<f64>, TheoryError> {
    if t.is_zero() {
        return Err(TheoryError::TemperatureIsZero);
    }
    let max = logits
        .as_slice()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .as_slice()
        .iter()
        .map(|&y| ((y - max) / t.value()).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// The t -> 0 limit of `scaled_distribution`: a one-hot vector on the largest
/// logit, ties broken toward the lowest index.
pub fn argmax_limit(logits: &LogitVector) -> Vec<f64> {
    let slice = logits.as_slice();
    let mut best = 0;
    for (i, &y) in slice.iter().enumerate() {
        if y > slice[best] {
            best = i;
        }
    }
    let mut out = vec![0.0; slice.len()];
    out[best] = 1.0;
    out
}

/// Probability that the decision token keeps its base value at temperature t.
///
/// Equals `alpha^(1/t) / (alpha^(1/t) + (1-alpha)^(1/t))`, evaluated in log
/// space so extreme confidences and tiny temperatures stay finite. At t = 0
/// it returns the limit: 1 above alpha 0.5, 0 below, 0.5 at exactly 0.5.
pub fn decision_prob(model: DecisionModel, t: Temperature) -> f64 {
    let alpha = model.alpha();
    if t.is_zero() {
        return if alpha > 0.5 {
            1.0
        } else if alpha < 0.5 {
            0.0
        } else {
            0.5
        };
    }
    let log_ratio = ((1.0 - alpha).ln() - alpha.ln()) / t.value();
    1.0 / (1.0 + log_ratio.exp())
}

/// Variance of the Bernoulli decision at temperature t: p(1 - p).
pub fn decision_variance(model: DecisionModel, t: Temperature) -> f64 {
    let p = decision_prob(model, t);
    p * (1.0 - p)
}

/// True when the decision variance does not decrease from `t_lo` to `t_hi`,
/// up to a 1e-12 tolerance. Callers pass t_lo <= t_hi.
pub fn variance_is_monotone(model: DecisionModel, t_lo: Temperature, t_hi: Temperature) -> bool {
    decision_variance(model, t_lo) <= decision_variance(model, t_hi) + 1e-12
}

/// Closed-form accuracy of an answer channel that hallucinates: correct
/// answers survive with rate 1 - h, and a hallucinated answer is redrawn
/// uniformly over the other k - 1 options.
pub fn lemma1_accuracy(ability: AbilityModel) -> f64 {
    let lam = ability.lam();
    let h = ability.h();
    let k = ability.k() as f64;
    lam - h * lam + h * (1.0 - lam) / (k - 1.0)
}

/// Seeded Monte Carlo estimate of `lemma1_accuracy`, used as an independent
/// check: draw an initial answer with accuracy lam, then with probability h
/// redraw it uniformly over the other k - 1 answers.
pub fn monte_carlo_lemma1(ability: AbilityModel, trials: u64, seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let k = ability.k() as u64;
    let mut correct = 0u64;
    for _ in 0..trials {
        // Answer 0 is the gold option; 1..k are the distractors.
        let mut answer = if rng.gen::<f64>() < ability.lam() {
            0
        } else {
            1 + rng.gen_range(0..k - 1)
        };
        if rng.gen::<f64>() < ability.h() {
            let shifted = rng.gen_range(1..k);
            answer = (answer + shifted) % k;
        }
        if answer == 0 {
            correct += 1;
        }
    }
    correct as f64 / trials as f64
}
