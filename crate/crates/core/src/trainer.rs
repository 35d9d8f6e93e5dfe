//! The closed proposer/solver loop: REINFORCE with EMA baselines, gradient
//! clipping, adaptive KL penalties and a periodic proposer update.
//!
//! Per step the proposer picks a difficulty bin, the solver answers it N
//! times, and both roles are scored from the resulting answer distribution.
//! The solver (a scalar skill in the simulator) is updated every step; the
//! proposer (a categorical policy over bins) buffers its advantages and is
//! updated every `proposer_period` steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{summarize, RunSummary};
use crate::policy::CategoricalPolicy;
use crate::reward::{
    proposer_reward, solver_reward_continuous, solver_reward_discrete, AnswerDistribution,
    ProposerRewardParams, SolverRewardKind, SolverRewardParams,
};
use crate::sim::{SimError, SimWorld, WorldConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("invalid trainer config: {0}")]
    Invalid(String),
    #[error(transparent)]
    World(#[from] SimError),
    #[error(transparent)]
    Reward(#[from] crate::reward::RewardError),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Exponential moving average of a role's rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaBaseline {
    pub value: f64,
    pub decay: f64,
}

impl EmaBaseline {
    pub fn new(decay: f64) -> Self {
        Self { value: 0.0, decay }
    }

    /// value ← decay·value + (1 − decay)·reward.
    pub fn update(&mut self, reward: f64) {
        self.value = self.decay * self.value + (1.0 - self.decay) * reward;
    }
}

/// Multiplicative KL-penalty controller, kept inside `[beta_min, beta_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlController {
    pub beta: f64,
    pub eta: f64,
    /// Target divergence τ.
    pub target: f64,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl KlController {
    fn with_target(target: f64) -> Self {
        Self {
            beta: 0.05,
            eta: 0.1,
            target,
            beta_min: 1e-4,
            beta_max: 10.0,
        }
    }

    pub fn validate(&self, role: &str) -> Result<(), ConfigError> {
        let all_finite = [
            self.beta,
            self.eta,
            self.target,
            self.beta_min,
            self.beta_max,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return Err(invalid(format!("{role}: controller values must be finite")));
        }
        if !(self.beta_min > 0.0 && self.beta_min < self.beta_max) {
            return Err(invalid(format!(
                "{role}: need 0 < beta_min < beta_max, got [{}, {}]",
                self.beta_min, self.beta_max
            )));
        }
        if !(self.beta_min..=self.beta_max).contains(&self.beta) {
            return Err(invalid(format!(
                "{role}: beta {} outside [{}, {}]",
                self.beta, self.beta_min, self.beta_max
            )));
        }
        if !(self.eta > 0.0) || !(self.target > 0.0) {
            return Err(invalid(format!("{role}: eta and target must be positive")));
        }
        Ok(())
    }

    /// β ← clip(β · exp(η (KL − τ)/τ), β_min, β_max).
    pub fn update(&mut self, observed_kl: f64) {
        let scaled = self.beta * (self.eta * (observed_kl - self.target) / self.target).exp();
        self.beta = scaled.clamp(self.beta_min, self.beta_max);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposerUpdateMode {
    /// Average all buffered advantages of the period.
    #[default]
    Mean,
    /// Use only the most recent buffered step.
    Latest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverUpdateMode {
    /// One clipped step on the mean over the N per-sample terms.
    #[default]
    Mean,
    /// N clipped steps, one per sample.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub n_answers: usize,
    pub proposer_period: usize,
    pub steps: usize,
    pub learning_rate_solver: f64,
    pub learning_rate_proposer: f64,
    pub grad_clip_norm: f64,
    pub baseline_decay: f64,
    pub seed: u64,
    pub solver_reward: SolverRewardKind,
    pub proposer_update: ProposerUpdateMode,
    pub solver_update: SolverUpdateMode,
    pub solver_params: SolverRewardParams,
    pub proposer_params: ProposerRewardParams,
    pub kl_solver: KlController,
    pub kl_proposer: KlController,
    pub world: WorldConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            n_answers: 5,
            proposer_period: 5,
            steps: 6000,
            learning_rate_solver: 1e-2,
            learning_rate_proposer: 1e-1,
            grad_clip_norm: 1.0,
            baseline_decay: 0.9,
            seed: 0,
            solver_reward: SolverRewardKind::Continuous,
            proposer_update: ProposerUpdateMode::Mean,
            solver_update: SolverUpdateMode::Mean,
            solver_params: SolverRewardParams::default(),
            proposer_params: ProposerRewardParams::default(),
            kl_solver: KlController::with_target(0.05),
            kl_proposer: KlController::with_target(0.5),
            world: WorldConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_answers == 0 {
            return Err(invalid("n_answers must be positive"));
        }
        if self.proposer_period == 0 {
            return Err(invalid("proposer_period must be positive"));
        }
        for (name, lr) in [
            ("learning_rate_solver", self.learning_rate_solver),
            ("learning_rate_proposer", self.learning_rate_proposer),
        ] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(invalid(format!(
                    "{name} must be a nonnegative real, got {lr}"
                )));
            }
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(invalid("grad_clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(invalid("baseline_decay must lie in [0, 1)"));
        }
        self.solver_params.validate()?;
        self.proposer_params.validate()?;
        self.kl_solver.validate("kl_solver")?;
        self.kl_proposer.validate("kl_proposer")?;
        self.world.build(self.n_answers)?;
        Ok(())
    }
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    /// 1-based step index.
    pub step: usize,
    /// Proposed bin; null for backend rounds, which have no bins.
    pub difficulty_bin: Option<usize>,
    pub entropy_nats: f64,
    pub solver_rewards: Vec<f64>,
    pub proposer_reward: f64,
    pub solver_kl: f64,
    pub proposer_kl: f64,
    pub beta_solver: f64,
    pub beta_proposer: f64,
    /// Baseline used for this step's solver advantages (before its update).
    pub baseline_solver: f64,
    /// Baseline used for this step's proposer advantage (before its update).
    pub baseline_proposer: f64,
    pub majority_fraction: f64,
    /// Absent for simulator steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<Origin>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Backend,
}

impl StepRecord {
    /// Every per-sample advantage is exactly zero.
    pub fn is_zero_advantage(&self) -> bool {
        self.solver_rewards
            .iter()
            .all(|&r| r - self.baseline_solver == 0.0)
    }
}

/// Scales `g` down so its Euclidean norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_to_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for x in g.iter_mut() {
            *x *= scale;
        }
    }
    norm
}

/// `mean_k(adv_k · ∇ log π(a_k)) − β ∇ KL(π‖π_ref)`, clipped.
fn proposer_direction(
    policy: &CategoricalPolicy,
    terms: &[(usize, f64)],
    beta: f64,
    clip: f64,
) -> Vec<f64> {
    let mut g = vec![0.0; policy.n_actions()];
    for &(action, adv) in terms {
        let score = policy
            .grad_log_prob(action)
            .expect("buffered actions come from this policy");
        for (gi, si) in g.iter_mut().zip(score) {
            *gi += adv * si;
        }
    }
    let n = terms.len().max(1) as f64;
    for (gi, ki) in g.iter_mut().zip(policy.grad_kl_to_ref()) {
        *gi = *gi / n - beta * ki;
    }
    clip_to_norm(&mut g, clip);
    g
}

/// Single REINFORCE ascent step on a categorical policy.
///
/// The advantage uses the baseline value on entry; the baseline and the KL
/// controller are updated after the step, the controller with the KL of the
/// updated policy. Returns the applied (clipped) direction.
pub fn reinforce_step(
    policy: &mut CategoricalPolicy,
    action: usize,
    reward: f64,
    baseline: &mut EmaBaseline,
    controller: &mut KlController,
    learning_rate: f64,
    grad_clip_norm: f64,
) -> Vec<f64> {
    let adv = reward - baseline.value;
    let g = proposer_direction(policy, &[(action, adv)], controller.beta, grad_clip_norm);
    policy.apply_update(&g, learning_rate);
    baseline.update(reward);
    controller.update(policy.kl_to_ref());
    g
}

/// Mutable loop state for both roles.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainerState {
    pub step: usize,
    pub baseline_solver: EmaBaseline,
    pub baseline_proposer: EmaBaseline,
    pub kl_solver: KlController,
    pub kl_proposer: KlController,
    /// (bin, advantage) pairs since the last proposer update.
    pub proposer_buffer: Vec<(usize, f64)>,
    /// Frozen reference for the solver KL.
    pub reference_skill: f64,
}

pub struct Trainer {
    config: TrainerConfig,
    world: SimWorld,
    proposer: CategoricalPolicy,
    state: TrainerState,
    proposer_rng: ChaCha8Rng,
    solver_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainerConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let world = config.world.build(config.n_answers)?;
        Self::with_world(config, world)
    }

    pub fn with_world(config: TrainerConfig, world: SimWorld) -> Result<Self, ConfigError> {
        config.validate()?;
        if world.n_answers() != config.n_answers {
            return Err(invalid(format!(
                "world draws {} answers but n_answers is {}",
                world.n_answers(),
                config.n_answers
            )));
        }
        let proposer = CategoricalPolicy::uniform(world.n_bins()).expect("world has bins");
        let mut proposer_rng = ChaCha8Rng::seed_from_u64(config.seed);
        proposer_rng.set_stream(0);
        let mut solver_rng = ChaCha8Rng::seed_from_u64(config.seed);
        solver_rng.set_stream(1);
        let state = TrainerState {
            step: 0,
            baseline_solver: EmaBaseline::new(config.baseline_decay),
            baseline_proposer: EmaBaseline::new(config.baseline_decay),
            kl_solver: config.kl_solver,
            kl_proposer: config.kl_proposer,
            proposer_buffer: Vec::with_capacity(config.proposer_period),
            reference_skill: world.solver_skill,
        };
        Ok(Self {
            config,
            world,
            proposer,
            state,
            proposer_rng,
            solver_rng,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn world(&self) -> &SimWorld {
        &self.world
    }

    pub fn proposer(&self) -> &CategoricalPolicy {
        &self.proposer
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    /// Runs one propose/solve/score/update iteration.
    pub fn step(&mut self) -> StepRecord {
        let cfg = self.config.clone();
        let bin = self.proposer.sample(&mut self.proposer_rng);
        let answers = self
            .world
            .solve_with_categories(bin, &mut self.solver_rng)
            .expect("bin sampled from the world's own range");
        let samples: Vec<_> = answers.iter().map(|(_, s)| s.clone()).collect();
        let dist = AnswerDistribution::from_samples(&samples, cfg.n_answers)
            .expect("world returns n_answers samples");
        let solver_rewards: Vec<f64> = samples
            .iter()
            .map(|s| match cfg.solver_reward {
                SolverRewardKind::Continuous => {
                    solver_reward_continuous(s, &dist, &cfg.solver_params)
                }
                SolverRewardKind::Discrete => solver_reward_discrete(s, &dist),
            })
            .collect::<Result<_, _>>()
            .expect("samples belong to their own distribution");
        let r_prop = proposer_reward(dist.entropy_nats, &cfg.proposer_params);

        // Solver: scalar skill through the induced answer distribution.
        let baseline_solver = self.state.baseline_solver.value;
        let categories: Vec<usize> = answers.iter().map(|(c, _)| *c).collect();
        self.update_solver(bin, &categories, &solver_rewards, baseline_solver);
        let mean_reward = solver_rewards.iter().sum::<f64>() / solver_rewards.len() as f64;
        self.state.baseline_solver.update(mean_reward);
        let solver_kl = self
            .world
            .solver_kl(bin, self.state.reference_skill)
            .expect("bin in range");

        // Proposer: buffer, update every K steps.
        let baseline_proposer = self.state.baseline_proposer.value;
        self.state
            .proposer_buffer
            .push((bin, r_prop - baseline_proposer));
        self.state.baseline_proposer.update(r_prop);
        self.state.step += 1;
        if self.state.step.is_multiple_of(cfg.proposer_period) {
            let terms: &[(usize, f64)] = match cfg.proposer_update {
                ProposerUpdateMode::Mean => &self.state.proposer_buffer,
                ProposerUpdateMode::Latest => {
                    let n = self.state.proposer_buffer.len();
                    &self.state.proposer_buffer[n - 1..]
                }
            };
            let g = proposer_direction(
                &self.proposer,
                terms,
                self.state.kl_proposer.beta,
                cfg.grad_clip_norm,
            );
            self.proposer.apply_update(&g, cfg.learning_rate_proposer);
            self.state.proposer_buffer.clear();
        }
        let proposer_kl = self.proposer.kl_to_ref();

        self.state.kl_solver.update(solver_kl);
        self.state.kl_proposer.update(proposer_kl);

        StepRecord {
            step: self.state.step,
            difficulty_bin: Some(bin),
            entropy_nats: dist.entropy_nats,
            solver_rewards,
            proposer_reward: r_prop,
            solver_kl,
            proposer_kl,
            beta_solver: self.state.kl_solver.beta,
            beta_proposer: self.state.kl_proposer.beta,
            baseline_solver,
            baseline_proposer,
            majority_fraction: dist.majority_fraction(),
            origin: None,
        }
    }

    fn update_solver(&mut self, bin: usize, categories: &[usize], rewards: &[f64], baseline: f64) {
        let lr = self.config.learning_rate_solver;
        let clip = self.config.grad_clip_norm;
        let beta = self.state.kl_solver.beta;
        let reference = self.state.reference_skill;
        let direction = |world: &SimWorld, terms: &mut dyn Iterator<Item = (usize, f64)>| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for (cat, reward) in terms {
                sum += (reward - baseline) * world.grad_log_prob_skill(bin, cat).expect("bin");
                n += 1;
            }
            let mut g = [
                sum / n.max(1) as f64 - beta * world.grad_solver_kl(bin, reference).expect("bin")
            ];
            clip_to_norm(&mut g, clip);
            g[0]
        };
        match self.config.solver_update {
            SolverUpdateMode::Mean => {
                let mut terms = categories.iter().copied().zip(rewards.iter().copied());
                let g = direction(&self.world, &mut terms);
                self.world.solver_skill += lr * g;
            }
            SolverUpdateMode::Sequential => {
                for (&cat, &reward) in categories.iter().zip(rewards) {
                    let g = direction(&self.world, &mut std::iter::once((cat, reward)));
                    self.world.solver_skill += lr * g;
                }
            }
        }
    }
}

/// Result of a full training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutput {
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
    pub final_solver_skill: f64,
    pub final_proposer_probabilities: Vec<f64>,
    pub final_proposer_logits: Vec<f64>,
}

/// Validates `config`, builds its world and runs `config.steps` iterations.
pub fn run(config: &TrainerConfig) -> Result<RunOutput, ConfigError> {
    config.validate()?;
    let world = config.world.build(config.n_answers)?;
    run_with_world(config, world)
}

pub fn run_with_world(config: &TrainerConfig, world: SimWorld) -> Result<RunOutput, ConfigError> {
    let mut trainer = Trainer::with_world(config.clone(), world)?;
    let records: Vec<StepRecord> = (0..config.steps).map(|_| trainer.step()).collect();
    let summary = summarize(&records, trainer.world.n_bins(), &config.proposer_params);
    Ok(RunOutput {
        records,
        summary,
        final_solver_skill: trainer.world.solver_skill,
        final_proposer_probabilities: trainer.proposer.probabilities(),
        final_proposer_logits: trainer.proposer.logits().to_vec(),
    })
}
