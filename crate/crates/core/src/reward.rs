//! Answer equivalence, empirical answer distributions, consensus entropy and
//! the solver/proposer reward functions.
//!
//! Everything here is a pure function of its inputs. The simulator and the
//! remote backend both score rounds through [`score_generations`] /
//! [`score_samples`], so a given set of answer texts always produces the same
//! rewards regardless of where the texts came from.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("answer text is empty after normalization")]
    EmptyAnswer,
    #[error("generation contains no {ANSWER_OPEN} tag")]
    MissingAnswerTag,
    #[error("cannot build a distribution from zero samples")]
    NoSamples,
    #[error("expected {expected} samples, got {actual}")]
    SampleCountMismatch { expected: usize, actual: usize },
    #[error("answer {0:?} is not a member of the distribution")]
    NotInDistribution(String),
    #[error("invalid reward parameter: {0}")]
    InvalidParams(String),
}

/// A single solver generation reduced to its canonical answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSample {
    pub raw_text: String,
    pub canonical: String,
    /// Whitespace-delimited tokens strictly before the opening answer tag.
    pub words_before_answer: usize,
}

impl AnswerSample {
    /// Builds a sample from already-canonical parts. `canonical` must be
    /// non-empty; extraction failures are represented by the absence of a
    /// sample, never by an empty canonical.
    pub fn new(
        raw_text: impl Into<String>,
        canonical: impl Into<String>,
        words_before_answer: usize,
    ) -> Result<Self, RewardError> {
        let canonical = canonical.into();
        if canonical.is_empty() {
            return Err(RewardError::EmptyAnswer);
        }
        Ok(Self {
            raw_text: raw_text.into(),
            canonical,
            words_before_answer,
        })
    }

    /// Parses a raw generation with [`extract_answer`].
    pub fn from_generation(generation: &str) -> Result<Self, RewardError> {
        let (canonical, words) = extract_answer(generation)?;
        Ok(Self {
            raw_text: generation.to_owned(),
            canonical,
            words_before_answer: words,
        })
    }
}

/// Normalizes an answer string so that equivalent answers compare byte-equal.
///
/// Lowercases and strips surrounding whitespace and punctuation. Numeric answers are
/// re-serialized: integers without a decimal point, everything else as the
/// shortest round-trip decimal.
pub fn canonicalize_answer(text: &str) -> Result<String, RewardError> {
    let lowered = text.trim().to_lowercase();
    if lowered.is_empty() {
        return Err(RewardError::EmptyAnswer);
    }
    // Leading sign and decimal point are part of a number, so try the
    // trailing-stripped form before stripping both ends.
    let trailing = lowered.trim_end_matches(is_strippable);
    if let Some(num) = canonical_number(trailing) {
        return Ok(num);
    }
    let stripped = lowered.trim_matches(is_strippable).trim();
    if let Some(num) = canonical_number(stripped) {
        return Ok(num);
    }
    if stripped.is_empty() {
        return Err(RewardError::EmptyAnswer);
    }
    Ok(stripped.to_owned())
}

fn is_strippable(c: char) -> bool {
    c.is_ascii_punctuation() || c.is_whitespace()
}

fn canonical_number(s: &str) -> Option<String> {
    let looks_numeric = s.chars().any(|c| c.is_ascii_digit())
        && s.chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '+' | '-' | '.' | 'e'));
    if !looks_numeric {
        return None;
    }
    let value: f64 = s.parse().ok()?;
    if !value.is_finite() {
        return None;
    }
    // 2^53: beyond this not every integer is representable.
    if value.fract() == 0.0 && value.abs() < 9_007_199_254_740_992.0 {
        Some(format!("{}", value as i64))
    } else {
        Some(format!("{value}"))
    }
}

/// Finds the first `<answer>`…`</answer>` span and returns its canonical
/// content together with the number of words preceding the opening tag.
/// A missing closing tag extends the span to the end of the text.
pub fn extract_answer(generation: &str) -> Result<(String, usize), RewardError> {
    let open = generation
        .find(ANSWER_OPEN)
        .ok_or(RewardError::MissingAnswerTag)?;
    let words_before = generation[..open].split_whitespace().count();
    let rest = &generation[open + ANSWER_OPEN.len()..];
    let span = match rest.find(ANSWER_CLOSE) {
        Some(close) => &rest[..close],
        None => rest,
    };
    Ok((canonicalize_answer(span)?, words_before))
}

/// Empirical distribution over canonical answers for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerDistribution {
    pub n_samples: usize,
    /// Sorted by count descending, then canonical ascending.
    pub classes: Vec<(String, usize)>,
    pub majority: String,
    pub entropy_nats: f64,
}

impl AnswerDistribution {
    pub fn from_samples(samples: &[AnswerSample], n_expected: usize) -> Result<Self, RewardError> {
        if samples.is_empty() {
            return Err(RewardError::NoSamples);
        }
        if samples.len() != n_expected {
            return Err(RewardError::SampleCountMismatch {
                expected: n_expected,
                actual: samples.len(),
            });
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in samples {
            *counts.entry(s.canonical.as_str()).or_default() += 1;
        }
        let mut classes: Vec<(String, usize)> =
            counts.into_iter().map(|(c, n)| (c.to_owned(), n)).collect();
        classes.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let n = samples.len();
        let entropy_nats = entropy_from_counts(classes.iter().map(|(_, c)| *c), n);
        Ok(Self {
            n_samples: n,
            majority: classes[0].0.clone(),
            classes,
            entropy_nats,
        })
    }

    pub fn count_of(&self, canonical: &str) -> Option<usize> {
        self.classes
            .iter()
            .find(|(c, _)| c == canonical)
            .map(|(_, n)| *n)
    }

    /// p(a) = count(a) / N.
    pub fn probability(&self, canonical: &str) -> Option<f64> {
        self.count_of(canonical)
            .map(|c| c as f64 / self.n_samples as f64)
    }

    pub fn majority_count(&self) -> usize {
        self.classes[0].1
    }

    pub fn majority_fraction(&self) -> f64 {
        self.majority_count() as f64 / self.n_samples as f64
    }

    /// Entropy in an arbitrary log base (2.0 for bits).
    pub fn entropy_in_base(&self, base: f64) -> f64 {
        self.entropy_nats / base.ln()
    }
}

/// Shannon entropy in nats of a count vector summing to `n`.
pub fn entropy_from_counts(counts: impl IntoIterator<Item = usize>, n: usize) -> f64 {
    let n = n as f64;
    let h: f64 = counts
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    // Single class sums to -0.0.
    if h > 0.0 {
        h
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverRewardParams {
    /// Softness exponent applied to the agreement probability, in (0, 1].
    pub gamma: f64,
    /// Length-penalty weight.
    pub lambda_len: f64,
    /// Target brevity threshold in words.
    pub tau_words: usize,
    /// Floor the length-penalty factor at zero so rewards stay in [0, 1].
    #[serde(default = "default_true")]
    pub clamp_nonnegative: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SolverRewardParams {
    fn default() -> Self {
        Self {
            gamma: 0.7,
            lambda_len: 0.10,
            tau_words: 6,
            clamp_nonnegative: true,
        }
    }
}

impl SolverRewardParams {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(RewardError::InvalidParams(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.lambda_len >= 0.0) || !self.lambda_len.is_finite() {
            return Err(RewardError::InvalidParams(format!(
                "lambda_len must be a nonnegative real, got {}",
                self.lambda_len
            )));
        }
        if self.tau_words == 0 {
            return Err(RewardError::InvalidParams("tau_words must be >= 1".into()));
        }
        Ok(())
    }

    /// Multiplicative length factor `1 - λ·max(0, (w - τ)/τ)`.
    pub fn length_factor(&self, words_before_answer: usize) -> f64 {
        let tau = self.tau_words as f64;
        let excess = ((words_before_answer as f64 - tau) / tau).max(0.0);
        let factor = 1.0 - self.lambda_len * excess;
        if self.clamp_nonnegative {
            factor.max(0.0)
        } else {
            factor
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposerRewardParams {
    /// Centre of the entropy band, nats.
    pub mu_h: f64,
    /// Width of the entropy band, nats.
    pub sigma_h: f64,
}

impl Default for ProposerRewardParams {
    fn default() -> Self {
        Self {
            mu_h: 0.90,
            sigma_h: 0.35,
        }
    }
}

impl ProposerRewardParams {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.sigma_h > 0.0) || !self.sigma_h.is_finite() {
            return Err(RewardError::InvalidParams(format!(
                "sigma_h must be positive, got {}",
                self.sigma_h
            )));
        }
        if !(self.mu_h >= 0.0) || !self.mu_h.is_finite() {
            return Err(RewardError::InvalidParams(format!(
                "mu_h must be nonnegative, got {}",
                self.mu_h
            )));
        }
        Ok(())
    }

    /// Whether `entropy_nats` lies within one band width of the centre.
    pub fn in_band(&self, entropy_nats: f64) -> bool {
        (entropy_nats - self.mu_h).abs() <= self.sigma_h
    }
}

/// Continuous self-consistency reward `p^γ · length_factor(w)`.
pub fn solver_reward_continuous(
    sample: &AnswerSample,
    dist: &AnswerDistribution,
    params: &SolverRewardParams,
) -> Result<f64, RewardError> {
    let p = dist
        .probability(&sample.canonical)
        .ok_or_else(|| RewardError::NotInDistribution(sample.canonical.clone()))?;
    Ok(p.powf(params.gamma) * params.length_factor(sample.words_before_answer))
}

/// Majority-vote reward: 1 for samples in the majority class, 0 otherwise.
pub fn solver_reward_discrete(
    sample: &AnswerSample,
    dist: &AnswerDistribution,
) -> Result<f64, RewardError> {
    if dist.count_of(&sample.canonical).is_none() {
        return Err(RewardError::NotInDistribution(sample.canonical.clone()));
    }
    Ok(if sample.canonical == dist.majority {
        1.0
    } else {
        0.0
    })
}

/// Gaussian band-pass reward on the consensus entropy.
pub fn proposer_reward(entropy_nats: f64, params: &ProposerRewardParams) -> f64 {
    let d = entropy_nats - params.mu_h;
    (-(d * d) / (2.0 * params.sigma_h * params.sigma_h)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverRewardKind {
    #[default]
    Continuous,
    Discrete,
}

/// Rewards for one propose/solve round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundScore {
    /// `None` when no generation could be parsed.
    pub distribution: Option<AnswerDistribution>,
    /// One reward per input generation, in input order. Unparseable
    /// generations receive 0.
    pub solver_rewards: Vec<f64>,
    pub entropy_nats: f64,
    pub proposer_reward: f64,
    pub majority_fraction: f64,
}

/// Scores a round of already-parsed samples. `None` entries are generations
/// whose answer could not be extracted; they are excluded from the
/// distribution. If every entry is `None`, all solver rewards are 0 and the
/// proposer is scored at `H = ln N` with `N = samples.len()`.
pub fn score_samples(
    samples: &[Option<AnswerSample>],
    kind: SolverRewardKind,
    solver: &SolverRewardParams,
    proposer: &ProposerRewardParams,
) -> RoundScore {
    let parsed: Vec<AnswerSample> = samples.iter().flatten().cloned().collect();
    if parsed.is_empty() {
        let h = (samples.len().max(1) as f64).ln();
        return RoundScore {
            distribution: None,
            solver_rewards: vec![0.0; samples.len()],
            entropy_nats: h,
            proposer_reward: proposer_reward(h, proposer),
            majority_fraction: 0.0,
        };
    }
    let dist = AnswerDistribution::from_samples(&parsed, parsed.len())
        .expect("non-empty sample list with matching length");
    let solver_rewards = samples
        .iter()
        .map(|s| match s {
            Some(s) => match kind {
                SolverRewardKind::Continuous => solver_reward_continuous(s, &dist, solver),
                SolverRewardKind::Discrete => solver_reward_discrete(s, &dist),
            }
            .expect("every parsed sample is a member of its own distribution"),
            None => 0.0,
        })
        .collect();
    RoundScore {
        entropy_nats: dist.entropy_nats,
        proposer_reward: proposer_reward(dist.entropy_nats, proposer),
        majority_fraction: dist.majority_fraction(),
        distribution: Some(dist),
        solver_rewards,
    }
}

/// Parses raw generations and scores them with [`score_samples`].
pub fn score_generations(
    generations: &[String],
    kind: SolverRewardKind,
    solver: &SolverRewardParams,
    proposer: &ProposerRewardParams,
) -> RoundScore {
    let samples: Vec<Option<AnswerSample>> = generations
        .iter()
        .map(|g| AnswerSample::from_generation(g).ok())
        .collect();
    score_samples(&samples, kind, solver, proposer)
}
