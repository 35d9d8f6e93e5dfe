//! Categorical policies over a finite action set with exact log-probabilities,
//! score-function gradients and KL divergence to a frozen reference.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("policy needs at least one action")]
    Empty,
    #[error("logits ({logits}) and reference logits ({reference}) differ in length")]
    LengthMismatch { logits: usize, reference: usize },
    #[error("logits must be finite")]
    NonFinite,
    #[error("action {action} out of range for {n_actions} actions")]
    ActionOutOfRange { action: usize, n_actions: usize },
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Log-softmax with max-subtraction.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - log_z).collect()
}

/// KL(p || q) for two normalized probability vectors given as log-probs.
pub fn kl_from_log_probs(log_p: &[f64], log_q: &[f64]) -> f64 {
    let kl: f64 = log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum();
    kl.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalPolicy {
    logits: Vec<f64>,
    ref_logits: Vec<f64>,
}

impl CategoricalPolicy {
    pub fn new(logits: Vec<f64>, ref_logits: Vec<f64>) -> Result<Self, PolicyError> {
        if logits.is_empty() {
            return Err(PolicyError::Empty);
        }
        if logits.len() != ref_logits.len() {
            return Err(PolicyError::LengthMismatch {
                logits: logits.len(),
                reference: ref_logits.len(),
            });
        }
        if logits.iter().chain(&ref_logits).any(|l| !l.is_finite()) {
            return Err(PolicyError::NonFinite);
        }
        Ok(Self { logits, ref_logits })
    }

    /// Uniform policy whose reference is itself.
    pub fn uniform(n_actions: usize) -> Result<Self, PolicyError> {
        Self::new(vec![0.0; n_actions], vec![0.0; n_actions])
    }

    pub fn n_actions(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn ref_logits(&self) -> &[f64] {
        &self.ref_logits
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn ref_probabilities(&self) -> Vec<f64> {
        softmax(&self.ref_logits)
    }

    /// Index of the largest logit, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }

    /// Inverse-CDF draw from softmax(logits) using one uniform variate.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let probs = self.probabilities();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // Rounding left acc slightly below 1; fall back to the last action
        // with nonzero mass.
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    fn check(&self, action: usize) -> Result<(), PolicyError> {
        if action >= self.logits.len() {
            return Err(PolicyError::ActionOutOfRange {
                action,
                n_actions: self.logits.len(),
            });
        }
        Ok(())
    }

    pub fn log_prob(&self, action: usize) -> Result<f64, PolicyError> {
        self.check(action)?;
        Ok(log_softmax(&self.logits)[action])
    }

    /// ∇_logits log π(action) = onehot(action) − softmax(logits).
    pub fn grad_log_prob(&self, action: usize) -> Result<Vec<f64>, PolicyError> {
        self.check(action)?;
        let mut g: Vec<f64> = self.probabilities().into_iter().map(|p| -p).collect();
        g[action] += 1.0;
        Ok(g)
    }

    /// KL(π || π_ref).
    pub fn kl_to_ref(&self) -> f64 {
        kl_from_log_probs(&log_softmax(&self.logits), &log_softmax(&self.ref_logits))
    }

    /// ∇_logits KL(π || π_ref); component j is p_j (ln(p_j/q_j) − KL).
    pub fn grad_kl_to_ref(&self) -> Vec<f64> {
        let lp = log_softmax(&self.logits);
        let lq = log_softmax(&self.ref_logits);
        let kl = kl_from_log_probs(&lp, &lq);
        lp.iter()
            .zip(&lq)
            .map(|(&a, &b)| a.exp() * (a - b - kl))
            .collect()
    }

    /// logits += step · direction.
    pub fn apply_update(&mut self, direction: &[f64], step: f64) {
        debug_assert_eq!(direction.len(), self.logits.len());
        for (l, d) in self.logits.iter_mut().zip(direction) {
            *l += step * d;
        }
    }
}
