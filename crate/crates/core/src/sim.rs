//! Synthetic proposer/solver world.
//!
//! The proposer picks one of `n_bins` difficulty bins. The solver answers a
//! question from bin `b` correctly with probability
//! `logistic(skill - difficulty[b])`; the remaining mass is split evenly over
//! `n_distractors` wrong answers. Consensus entropy over the N answers is then
//! a monotone proxy for difficulty, which is what the proposer reward keys on.
//!
//! Exact expectations are computed by enumerating every composition of the N
//! answers over the answer categories with its multinomial probability.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::{AnswerSample, ProposerRewardParams, SolverRewardParams};

/// Upper bound on enumerated compositions for the exact oracles.
pub const DEFAULT_ENUMERATION_CAP: u128 = 2_000_000;

pub const CORRECT_ANSWER: &str = "correct";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("bin {bin} out of range for {n_bins} bins")]
    BinOutOfRange { bin: usize, n_bins: usize },
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("enumeration needs {needed} compositions, cap is {cap}")]
    EnumerationTooLarge { needed: u128, cap: u128 },
}

/// Distribution of the word count preceding the answer tag in simulated
/// generations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WordCountModel {
    Constant {
        words: usize,
    },
    /// Uniform over `min..=max`.
    Uniform {
        min: usize,
        max: usize,
    },
}

impl Default for WordCountModel {
    fn default() -> Self {
        WordCountModel::Constant { words: 3 }
    }
}

impl WordCountModel {
    fn validate(&self) -> Result<(), SimError> {
        match *self {
            WordCountModel::Uniform { min, max } if min > max => Err(SimError::InvalidWorld(
                format!("word count range {min}..={max} is empty"),
            )),
            _ => Ok(()),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match *self {
            WordCountModel::Constant { words } => words,
            WordCountModel::Uniform { min, max } => rng.random_range(min..=max),
        }
    }

    /// Probability-weighted mean of `f` over word counts.
    fn expect(&self, f: impl Fn(usize) -> f64) -> f64 {
        match *self {
            WordCountModel::Constant { words } => f(words),
            WordCountModel::Uniform { min, max } => {
                (min..=max).map(&f).sum::<f64>() / (max - min + 1) as f64
            }
        }
    }
}

/// World settings as they appear under `[world]` in the trainer config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_bins: usize,
    /// Bins are spaced linearly over `solver_skill ± difficulty_span` unless
    /// `bin_difficulty` is given.
    pub difficulty_span: f64,
    pub bin_difficulty: Option<Vec<f64>>,
    pub n_distractors: usize,
    pub solver_skill: f64,
    pub words_before_answer: WordCountModel,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_bins: 8,
            difficulty_span: 4.0,
            bin_difficulty: None,
            n_distractors: 8,
            solver_skill: 0.0,
            words_before_answer: WordCountModel::default(),
        }
    }
}

impl WorldConfig {
    pub fn build(&self, n_answers: usize) -> Result<SimWorld, SimError> {
        let difficulties = match &self.bin_difficulty {
            Some(d) => {
                if d.len() != self.n_bins {
                    return Err(SimError::InvalidWorld(format!(
                        "bin_difficulty has {} entries but n_bins is {}",
                        d.len(),
                        self.n_bins
                    )));
                }
                d.clone()
            }
            None => linspace(
                self.solver_skill - self.difficulty_span,
                self.solver_skill + self.difficulty_span,
                self.n_bins,
            ),
        };
        SimWorld::new(
            difficulties,
            self.n_distractors,
            self.solver_skill,
            n_answers,
            self.words_before_answer,
        )
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![(lo + hi) / 2.0],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln logistic(z), stable for large |z|.
fn ln_logistic(z: f64) -> f64 {
    -softplus(-z)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimWorld {
    bin_difficulty: Vec<f64>,
    n_distractors: usize,
    /// Live solver skill; the trainer is the only writer.
    pub solver_skill: f64,
    n_answers: usize,
    words_before_answer: WordCountModel,
}

impl SimWorld {
    pub fn new(
        bin_difficulty: Vec<f64>,
        n_distractors: usize,
        solver_skill: f64,
        n_answers: usize,
        words_before_answer: WordCountModel,
    ) -> Result<Self, SimError> {
        if bin_difficulty.is_empty() {
            return Err(SimError::InvalidWorld("n_bins must be positive".into()));
        }
        if bin_difficulty.iter().any(|d| !d.is_finite()) || !solver_skill.is_finite() {
            return Err(SimError::InvalidWorld(
                "difficulties and skill must be finite".into(),
            ));
        }
        if bin_difficulty.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SimError::InvalidWorld(
                "bin difficulties must be strictly increasing".into(),
            ));
        }
        if n_distractors == 0 {
            return Err(SimError::InvalidWorld("n_distractors must be >= 1".into()));
        }
        if n_answers == 0 {
            return Err(SimError::InvalidWorld("n_answers must be >= 1".into()));
        }
        words_before_answer.validate()?;
        Ok(Self {
            bin_difficulty,
            n_distractors,
            solver_skill,
            n_answers,
            words_before_answer,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.bin_difficulty.len()
    }

    pub fn bin_difficulty(&self) -> &[f64] {
        &self.bin_difficulty
    }

    pub fn n_distractors(&self) -> usize {
        self.n_distractors
    }

    /// One correct answer plus the distractors.
    pub fn n_categories(&self) -> usize {
        1 + self.n_distractors
    }

    pub fn n_answers(&self) -> usize {
        self.n_answers
    }

    pub fn words_before_answer(&self) -> WordCountModel {
        self.words_before_answer
    }

    fn check_bin(&self, bin: usize) -> Result<(), SimError> {
        if bin >= self.bin_difficulty.len() {
            return Err(SimError::BinOutOfRange {
                bin,
                n_bins: self.bin_difficulty.len(),
            });
        }
        Ok(())
    }

    fn margin(&self, skill: f64, bin: usize) -> f64 {
        skill - self.bin_difficulty[bin]
    }

    pub fn p_correct(&self, bin: usize) -> Result<f64, SimError> {
        self.p_correct_at(self.solver_skill, bin)
    }

    pub fn p_correct_at(&self, skill: f64, bin: usize) -> Result<f64, SimError> {
        self.check_bin(bin)?;
        Ok(logistic(self.margin(skill, bin)))
    }

    /// `[p_correct, p_d1, …, p_dM]` at the live skill.
    pub fn answer_probabilities(&self, bin: usize) -> Result<Vec<f64>, SimError> {
        self.answer_probabilities_at(self.solver_skill, bin)
    }

    pub fn answer_probabilities_at(&self, skill: f64, bin: usize) -> Result<Vec<f64>, SimError> {
        let pc = self.p_correct_at(skill, bin)?;
        let each = (1.0 - pc) / self.n_distractors as f64;
        let mut v = Vec::with_capacity(self.n_categories());
        v.push(pc);
        v.extend(std::iter::repeat_n(each, self.n_distractors));
        Ok(v)
    }

    pub fn category_label(category: usize) -> String {
        if category == 0 {
            CORRECT_ANSWER.to_owned()
        } else {
            format!("d{category}")
        }
    }

    /// Draws N answers; returns each sample with its category index
    /// (0 = correct).
    pub fn solve_with_categories<R: Rng + ?Sized>(
        &self,
        bin: usize,
        rng: &mut R,
    ) -> Result<Vec<(usize, AnswerSample)>, SimError> {
        let probs = self.answer_probabilities(bin)?;
        let mut out = Vec::with_capacity(self.n_answers);
        for _ in 0..self.n_answers {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut category = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    category = i;
                    break;
                }
            }
            let words = self.words_before_answer.draw(rng);
            let label = Self::category_label(category);
            let mut raw = "step ".repeat(words);
            raw.push_str("<answer>");
            raw.push_str(&label);
            raw.push_str("</answer>");
            let sample = AnswerSample::new(raw, label, words).expect("labels are non-empty");
            out.push((category, sample));
        }
        Ok(out)
    }

    pub fn solve<R: Rng + ?Sized>(
        &self,
        bin: usize,
        rng: &mut R,
    ) -> Result<Vec<AnswerSample>, SimError> {
        Ok(self
            .solve_with_categories(bin, rng)?
            .into_iter()
            .map(|(_, s)| s)
            .collect())
    }

    /// d/d(skill) of ln p(category) at the live skill.
    pub fn grad_log_prob_skill(&self, bin: usize, category: usize) -> Result<f64, SimError> {
        let pc = self.p_correct(bin)?;
        Ok(if category == 0 { 1.0 - pc } else { -pc })
    }

    /// KL between the answer distribution at the live skill and at
    /// `reference_skill`. Distractors share mass evenly in both, so this
    /// reduces to a Bernoulli KL on the correct answer.
    pub fn solver_kl(&self, bin: usize, reference_skill: f64) -> Result<f64, SimError> {
        self.check_bin(bin)?;
        let z = self.margin(self.solver_skill, bin);
        let zr = self.margin(reference_skill, bin);
        let p = logistic(z);
        let kl = p * (ln_logistic(z) - ln_logistic(zr))
            + (1.0 - p) * (ln_logistic(-z) - ln_logistic(-zr));
        Ok(kl.max(0.0))
    }

    /// d/d(skill) of [`SimWorld::solver_kl`]: p(1-p)(z - z_ref).
    pub fn grad_solver_kl(&self, bin: usize, reference_skill: f64) -> Result<f64, SimError> {
        let p = self.p_correct(bin)?;
        Ok(p * (1.0 - p) * (self.solver_skill - reference_skill))
    }
}

/// Stars-and-bars count C(n + parts − 1, parts − 1).
pub fn composition_count(n: usize, parts: usize) -> u128 {
    if parts == 0 {
        return u128::from(n == 0);
    }
    let k = (parts - 1) as u128;
    let total = n as u128 + k;
    let k = k.min(total - k);
    (0..k).fold(1u128, |acc, i| acc * (total - i) / (i + 1))
}

/// Every vector of `parts` nonnegative counts summing to `n`, in
/// lexicographically descending order (`[n, 0, …]` first).
pub fn compositions(n: usize, parts: usize) -> Vec<Vec<usize>> {
    fn rec(remaining: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in (0..=remaining).rev() {
            prefix.push(first);
            rec(remaining - first, parts - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if parts > 0 {
        rec(n, parts, &mut Vec::with_capacity(parts), &mut out);
    }
    out
}

fn multinomial_probability(counts: &[usize], probs: &[f64]) -> f64 {
    let mut coef = 1.0f64;
    let mut placed = 0usize;
    let mut prob = 1.0f64;
    for (&c, &p) in counts.iter().zip(probs) {
        for i in 1..=c {
            placed += 1;
            coef *= placed as f64 / i as f64;
        }
        if c > 0 {
            prob *= p.powi(c as i32);
        }
    }
    coef * prob
}

/// Probability-weighted means over all answer compositions for one bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedRewards {
    /// Mean continuous solver reward per sample.
    pub solver_reward: f64,
    /// Mean majority-vote solver reward per sample.
    pub solver_reward_discrete: f64,
    pub proposer_reward: f64,
    pub entropy_nats: f64,
    /// Probability that the realized entropy lies within one band width of
    /// the band centre.
    pub mid_band_probability: f64,
    /// Expected REINFORCE direction on the solver skill,
    /// E[mean_i r_i · d/ds ln p(y_i)].
    pub skill_gradient: f64,
}

pub fn exact_expected_rewards(
    world: &SimWorld,
    bin: usize,
    solver: &SolverRewardParams,
    proposer: &ProposerRewardParams,
) -> Result<ExpectedRewards, SimError> {
    exact_expected_rewards_capped(world, bin, solver, proposer, DEFAULT_ENUMERATION_CAP)
}

pub fn exact_expected_rewards_capped(
    world: &SimWorld,
    bin: usize,
    solver: &SolverRewardParams,
    proposer: &ProposerRewardParams,
    cap: u128,
) -> Result<ExpectedRewards, SimError> {
    let probs = world.answer_probabilities(bin)?;
    let n = world.n_answers();
    let needed = composition_count(n, probs.len());
    if needed > cap {
        return Err(SimError::EnumerationTooLarge { needed, cap });
    }
    let nf = n as f64;
    let length_factor = world
        .words_before_answer()
        .expect(|w| solver.length_factor(w));
    let pc = probs[0];
    let dlogp: Vec<f64> = (0..probs.len())
        .map(|k| if k == 0 { 1.0 - pc } else { -pc })
        .collect();

    let mut acc = ExpectedRewards {
        solver_reward: 0.0,
        solver_reward_discrete: 0.0,
        proposer_reward: 0.0,
        entropy_nats: 0.0,
        mid_band_probability: 0.0,
        skill_gradient: 0.0,
    };
    for counts in compositions(n, probs.len()) {
        let w = multinomial_probability(&counts, &probs);
        if w == 0.0 {
            continue;
        }
        let mut h = 0.0;
        let mut cont = 0.0;
        let mut grad = 0.0;
        let mut max_count = 0;
        for (k, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let frac = c as f64 / nf;
            h -= frac * frac.ln();
            let r = frac.powf(solver.gamma) * length_factor;
            cont += frac * r;
            grad += frac * r * dlogp[k];
            max_count = max_count.max(c);
        }
        let h = h.max(0.0);
        let dev = h - proposer.mu_h;
        acc.entropy_nats += w * h;
        acc.solver_reward += w * cont;
        acc.solver_reward_discrete += w * (max_count as f64 / nf);
        acc.proposer_reward +=
            w * (-(dev * dev) / (2.0 * proposer.sigma_h * proposer.sigma_h)).exp();
        if dev.abs() <= proposer.sigma_h {
            acc.mid_band_probability += w;
        }
        acc.skill_gradient += w * grad;
    }
    Ok(acc)
}

/// Bin with the largest exact expected proposer reward; lowest index on ties.
pub fn best_bin(world: &SimWorld, proposer: &ProposerRewardParams) -> Result<usize, SimError> {
    let solver = SolverRewardParams::default();
    let mut best = (0, f64::NEG_INFINITY);
    for bin in 0..world.n_bins() {
        let r = exact_expected_rewards(world, bin, &solver, proposer)?.proposer_reward;
        if r > best.1 {
            best = (bin, r);
        }
    }
    Ok(best.0)
}

/// Coarse difficulty label for a realized consensus entropy: below the
/// band is easy, inside is moderate, above is hard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyTier {
    Easy,
    Moderate,
    Hard,
}

impl DifficultyTier {
    pub fn from_entropy(entropy_nats: f64, params: &ProposerRewardParams) -> Self {
        if params.in_band(entropy_nats) {
            DifficultyTier::Moderate
        } else if entropy_nats < params.mu_h {
            DifficultyTier::Easy
        } else {
            DifficultyTier::Hard
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::{entropy_from_counts, AnswerDistribution};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world(difficulty: Vec<f64>, m: usize, skill: f64, n: usize) -> SimWorld {
        SimWorld::new(difficulty, m, skill, n, WordCountModel::default()).unwrap()
    }

    #[test]
    fn answer_probability_examples() {
        let w = world(vec![0.0, 1.0, 10.0], 3, 1.0, 5);
        let p = w.answer_probabilities(1).unwrap();
        assert_eq!(p.len(), 4);
        // skill - difficulty = 1 - 1 = 0.
        assert_eq!(p[0], 0.5);
        assert!(SimWorld::new(vec![0.0, 0.0], 3, 0.0, 5, WordCountModel::default()).is_err());
        assert!(SimWorld::new(vec![1.0, 0.0], 3, 0.0, 5, WordCountModel::default()).is_err());

        let w = world(vec![-9.0], 3, 1.0, 5);
        assert!(w.answer_probabilities(0).unwrap()[0] > 0.9999);

        let w = world(vec![-(3f64.ln())], 3, 0.0, 5);
        let p = w.answer_probabilities(0).unwrap();
        assert_abs_diff_eq!(p[0], 0.75, epsilon = 1e-15);
        for d in &p[1..] {
            assert_abs_diff_eq!(*d, 1.0 / 12.0, epsilon = 1e-15);
        }
        assert!(matches!(
            w.answer_probabilities(1),
            Err(SimError::BinOutOfRange { .. })
        ));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let w = WorldConfig::default().build(5).unwrap();
        for b in 0..w.n_bins() {
            let s: f64 = w.answer_probabilities(b).unwrap().iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn world_validation() {
        assert!(SimWorld::new(vec![], 3, 0.0, 5, Default::default()).is_err());
        assert!(SimWorld::new(vec![1.0, 0.0], 3, 0.0, 5, Default::default()).is_err());
        assert!(SimWorld::new(vec![0.0], 0, 0.0, 5, Default::default()).is_err());
        let bad = WorldConfig {
            bin_difficulty: Some(vec![0.0]),
            ..Default::default()
        };
        assert!(bad.build(5).is_err());
    }

    #[test]
    fn default_world_spans_skill_window() {
        let w = WorldConfig::default().build(5).unwrap();
        assert_eq!(w.n_bins(), 8);
        assert_eq!(w.bin_difficulty()[0], -4.0);
        assert_eq!(w.bin_difficulty()[7], 4.0);
    }

    #[test]
    fn saturated_world_is_unanimous() {
        let w = world(vec![-60.0], 3, 0.0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let s = w.solve(0, &mut rng).unwrap();
            assert!(s.iter().all(|x| x.canonical == CORRECT_ANSWER));
            let d = AnswerDistribution::from_samples(&s, 5).unwrap();
            assert_eq!(d.entropy_nats, 0.0);
        }
    }

    #[test]
    fn solve_is_deterministic_and_raw_text_parses() {
        let w = WorldConfig::default().build(5).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            w.solve(3, &mut rng).unwrap()
        };
        assert_eq!(run(5), run(5));
        for s in run(6) {
            assert_eq!(AnswerSample::from_generation(&s.raw_text).unwrap(), s);
        }
    }

    #[test]
    fn uniform_world_entropy_matches_enumeration() {
        // p_correct = 1/4 with 3 distractors gives a uniform answer law.
        let w = world(vec![3f64.ln()], 3, 0.0, 5);
        let p = w.answer_probabilities(0).unwrap();
        for x in &p {
            assert_abs_diff_eq!(*x, 0.25, epsilon = 1e-15);
        }
        let exact = exact_expected_rewards(&w, 0, &Default::default(), &Default::default())
            .unwrap()
            .entropy_nats;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let trials = 50_000;
        let mean: f64 = (0..trials)
            .map(|_| {
                let s = w.solve(0, &mut rng).unwrap();
                AnswerDistribution::from_samples(&s, 5)
                    .unwrap()
                    .entropy_nats
            })
            .sum::<f64>()
            / trials as f64;
        assert!((mean - exact).abs() / exact < 0.01, "{mean} vs {exact}");
    }

    #[test]
    fn composition_enumeration_counts() {
        assert_eq!(composition_count(5, 4), 56);
        assert_eq!(compositions(5, 4).len(), 56);
        assert_eq!(composition_count(5, 2), 6);
        assert_eq!(
            compositions(5, 2),
            vec![
                vec![5, 0],
                vec![4, 1],
                vec![3, 2],
                vec![2, 3],
                vec![1, 4],
                vec![0, 5]
            ]
        );
        for c in compositions(4, 3) {
            assert_eq!(c.iter().sum::<usize>(), 4);
        }
    }

    #[test]
    fn multinomial_weights_sum_to_one() {
        let probs = [0.1, 0.2, 0.3, 0.4];
        let total: f64 = compositions(5, 4)
            .iter()
            .map(|c| multinomial_probability(c, &probs))
            .sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn expected_rewards_single_outcome() {
        let w = world(vec![-80.0], 3, 0.0, 5);
        let pp = ProposerRewardParams::default();
        let e = exact_expected_rewards(&w, 0, &Default::default(), &pp).unwrap();
        assert_eq!(e.entropy_nats, 0.0);
        assert_eq!(e.solver_reward, 1.0);
        assert_abs_diff_eq!(
            e.proposer_reward,
            (-(0.9f64 * 0.9) / (2.0 * 0.35 * 0.35)).exp(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn expected_entropy_hand_enumeration() {
        // Outcomes {2-0, 1-1, 0-2} with probabilities {1/4, 1/2, 1/4}.
        let w = world(vec![0.0], 1, 0.0, 2);
        let e = exact_expected_rewards(&w, 0, &Default::default(), &Default::default()).unwrap();
        assert_abs_diff_eq!(e.entropy_nats, 0.5 * 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(e.entropy_nats, 0.34657, epsilon = 1e-5);
    }

    #[test]
    fn enumeration_cap_enforced() {
        let w = world(vec![0.0], 40, 0.0, 12);
        let r =
            exact_expected_rewards_capped(&w, 0, &Default::default(), &Default::default(), 1000);
        assert!(matches!(r, Err(SimError::EnumerationTooLarge { .. })));
    }

    #[test]
    fn expected_entropy_rises_toward_uniform() {
        // p_correct from ~1 down to 1/(1+M) in steps.
        let m = 3;
        let target = (m as f64).ln(); // margin giving p_correct = 1/4
        let mut last = -1.0;
        for i in 0..=20 {
            let margin = 12.0 - (12.0 - (-target)) * i as f64 / 20.0;
            let w = world(vec![-margin], m, 0.0, 5);
            let h = exact_expected_rewards(&w, 0, &Default::default(), &Default::default())
                .unwrap()
                .entropy_nats;
            assert!(h >= last - 1e-12, "step {i}: {h} < {last}");
            last = h;
        }
    }

    #[test]
    fn best_bin_is_interior_on_default_grid() {
        let w = WorldConfig::default().build(5).unwrap();
        let b = best_bin(&w, &ProposerRewardParams::default()).unwrap();
        assert!(b > 0 && b < w.n_bins() - 1, "{b}");
    }

    #[test]
    fn best_bin_on_easy_world_is_hardest() {
        let diffs: Vec<f64> = (0..6).map(|i| -20.0 + i as f64 * 2.0).collect();
        let w = world(diffs, 8, 0.0, 5);
        assert_eq!(best_bin(&w, &ProposerRewardParams::default()).unwrap(), 5);
    }

    #[test]
    fn skill_gradients_match_finite_differences() {
        let mut w = world(vec![-1.0, 0.3, 2.0], 4, 0.4, 5);
        let reference = -0.7;
        let h = 1e-6;
        for bin in 0..3 {
            for cat in [0usize, 2] {
                let g = w.grad_log_prob_skill(bin, cat).unwrap();
                let lp = |w: &SimWorld| w.answer_probabilities(bin).unwrap()[cat].ln();
                let s0 = w.solver_skill;
                w.solver_skill = s0 + h;
                let up = lp(&w);
                w.solver_skill = s0 - h;
                let dn = lp(&w);
                w.solver_skill = s0;
                assert!(((up - dn) / (2.0 * h) - g).abs() < 1e-7);
            }
            let g = w.grad_solver_kl(bin, reference).unwrap();
            let s0 = w.solver_skill;
            w.solver_skill = s0 + h;
            let up = w.solver_kl(bin, reference).unwrap();
            w.solver_skill = s0 - h;
            let dn = w.solver_kl(bin, reference).unwrap();
            w.solver_skill = s0;
            assert!(((up - dn) / (2.0 * h) - g).abs() < 1e-7);
        }
    }

    #[test]
    fn solver_kl_matches_categorical_kl() {
        let mut w = world(vec![0.2], 5, 1.3, 5);
        let p = w.answer_probabilities(0).unwrap();
        w.solver_skill = -0.4;
        let q = w.answer_probabilities(0).unwrap();
        w.solver_skill = 1.3;
        let direct: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        assert_abs_diff_eq!(w.solver_kl(0, -0.4).unwrap(), direct, epsilon = 1e-14);
        assert_eq!(w.solver_kl(0, 1.3).unwrap(), 0.0);
    }

    #[test]
    fn rich_get_richer_skill_gradient() {
        // Above chance accuracy, the expected consensus gradient pushes the
        // skill up, for every bin of a wide grid.
        let m = 3;
        let params = SolverRewardParams::default();
        for i in 0..25 {
            let margin = -(m as f64).ln() + 0.05 + i as f64 * 0.4;
            let w = world(vec![-margin], m, 0.0, 5);
            assert!(w.p_correct(0).unwrap() > 1.0 / (1.0 + m as f64));
            let g = exact_expected_rewards(&w, 0, &params, &Default::default())
                .unwrap()
                .skill_gradient;
            assert!(g > 0.0, "margin {margin}: {g}");
        }
    }

    #[test]
    fn oracle_entropy_agrees_with_reward_core() {
        for counts in compositions(5, 4) {
            let samples: Vec<AnswerSample> = counts
                .iter()
                .enumerate()
                .flat_map(|(k, &c)| {
                    std::iter::repeat_n(
                        AnswerSample::new("x", SimWorld::category_label(k), 0).unwrap(),
                        c,
                    )
                })
                .collect();
            let d = AnswerDistribution::from_samples(&samples, 5).unwrap();
            assert_abs_diff_eq!(
                d.entropy_nats,
                entropy_from_counts(counts.iter().copied(), 5),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn difficulty_tiers() {
        let p = ProposerRewardParams::default();
        assert_eq!(DifficultyTier::from_entropy(0.0, &p), DifficultyTier::Easy);
        assert_eq!(
            DifficultyTier::from_entropy(0.9, &p),
            DifficultyTier::Moderate
        );
        assert_eq!(DifficultyTier::from_entropy(1.6, &p), DifficultyTier::Hard);
    }
}
