//! Step-log IO, run summaries, reward-landscape tables and run manifests.
//!
//! Summaries are computed from [`StepRecord`]s alone so they can be rebuilt
//! offline from a `steps.jsonl` file.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::{
    proposer_reward, solver_reward_continuous, solver_reward_discrete, AnswerDistribution,
    AnswerSample, ProposerRewardParams, SolverRewardParams,
};
use crate::sim::{
    composition_count, compositions, DifficultyTier, SimError, DEFAULT_ENUMERATION_CAP,
};
use crate::trainer::StepRecord;

/// Window length for the proposer-reward stability statistic.
pub const REWARD_WINDOW: usize = 100;
/// Trailing window for the solver-KL statistic.
pub const TRAILING_KL_WINDOW: usize = 1000;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierCounts {
    pub easy: usize,
    pub moderate: usize,
    pub hard: usize,
}

impl TierCounts {
    fn add(&mut self, tier: DifficultyTier) {
        match tier {
            DifficultyTier::Easy => self.easy += 1,
            DifficultyTier::Moderate => self.moderate += 1,
            DifficultyTier::Hard => self.hard += 1,
        }
    }

    fn total(&self) -> usize {
        self.easy + self.moderate + self.hard
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    /// Steps per decile window.
    pub decile_len: usize,
    pub first_decile_bins: Vec<usize>,
    pub last_decile_bins: Vec<usize>,
    pub first_decile_tiers: TierCounts,
    pub last_decile_tiers: TierCounts,
    pub mid_band_share_first_decile: Option<f64>,
    pub mid_band_share_last_decile: Option<f64>,
    pub mean_solver_reward: Option<f64>,
    pub mean_proposer_reward: Option<f64>,
    pub mean_entropy_nats: Option<f64>,
    pub mean_majority_fraction: Option<f64>,
    /// Fraction of steps whose per-sample advantages are all exactly zero.
    pub zero_advantage_fraction: Option<f64>,
    /// Fraction of individual solver samples that received reward 0.
    pub zero_reward_sample_fraction: Option<f64>,
    /// Variance of the proposer reward averaged over consecutive
    /// [`REWARD_WINDOW`]-step windows.
    pub proposer_reward_window_variance: Option<f64>,
    pub solver_reward_window_variance: Option<f64>,
    pub trailing_mean_solver_kl: Option<f64>,
    pub trailing_mean_proposer_kl: Option<f64>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut n = 0usize;
    let mut s = 0.0;
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Population variance of the means of non-overlapping `window`-length
/// chunks; `None` with fewer than two complete windows.
pub fn window_variance(values: &[f64], window: usize) -> Option<f64> {
    let means: Vec<f64> = values
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect();
    if means.len() < 2 {
        return None;
    }
    let m = means.iter().sum::<f64>() / means.len() as f64;
    Some(means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / means.len() as f64)
}

pub fn summarize(
    records: &[StepRecord],
    n_bins: usize,
    proposer: &ProposerRewardParams,
) -> RunSummary {
    let steps = records.len();
    let decile_len = if steps == 0 { 0 } else { (steps / 10).max(1) };
    let first = &records[..decile_len];
    let last = &records[steps - decile_len..];

    let bins = |rs: &[StepRecord]| {
        let mut h = vec![0usize; n_bins];
        for r in rs {
            if let Some(b) = r.difficulty_bin {
                if b < n_bins {
                    h[b] += 1;
                }
            }
        }
        h
    };
    let tiers = |rs: &[StepRecord]| {
        let mut t = TierCounts::default();
        for r in rs {
            t.add(DifficultyTier::from_entropy(r.entropy_nats, proposer));
        }
        t
    };
    let share = |t: &TierCounts| (t.total() > 0).then(|| t.moderate as f64 / t.total() as f64);

    let first_tiers = tiers(first);
    let last_tiers = tiers(last);
    let n_samples: usize = records.iter().map(|r| r.solver_rewards.len()).sum();
    let zero_samples = records
        .iter()
        .flat_map(|r| &r.solver_rewards)
        .filter(|&&x| x == 0.0)
        .count();
    let mean_step_solver: Vec<f64> = records
        .iter()
        .map(|r| r.solver_rewards.iter().sum::<f64>() / r.solver_rewards.len().max(1) as f64)
        .collect();
    let prop: Vec<f64> = records.iter().map(|r| r.proposer_reward).collect();
    let trailing = &records[steps.saturating_sub(TRAILING_KL_WINDOW)..];

    RunSummary {
        steps,
        decile_len,
        first_decile_bins: bins(first),
        last_decile_bins: bins(last),
        mid_band_share_first_decile: share(&first_tiers),
        mid_band_share_last_decile: share(&last_tiers),
        first_decile_tiers: first_tiers,
        last_decile_tiers: last_tiers,
        mean_solver_reward: (n_samples > 0).then(|| {
            records.iter().flat_map(|r| &r.solver_rewards).sum::<f64>() / n_samples as f64
        }),
        mean_proposer_reward: mean(prop.iter().copied()),
        mean_entropy_nats: mean(records.iter().map(|r| r.entropy_nats)),
        mean_majority_fraction: mean(records.iter().map(|r| r.majority_fraction)),
        zero_advantage_fraction: mean(records.iter().map(|r| {
            if r.is_zero_advantage() {
                1.0
            } else {
                0.0
            }
        })),
        zero_reward_sample_fraction: (n_samples > 0)
            .then(|| zero_samples as f64 / n_samples as f64),
        proposer_reward_window_variance: window_variance(&prop, REWARD_WINDOW),
        solver_reward_window_variance: window_variance(&mean_step_solver, REWARD_WINDOW),
        trailing_mean_solver_kl: mean(trailing.iter().map(|r| r.solver_kl)),
        trailing_mean_proposer_kl: mean(trailing.iter().map(|r| r.proposer_kl)),
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), MetricsError> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, MetricsError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| MetricsError::Parse {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), MetricsError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// One outcome composition of the reward landscape.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapeRow {
    /// Counts per answer category, e.g. `"3-2"`.
    pub composition: String,
    pub entropy_nats: f64,
    pub solver_continuous_mean: f64,
    pub solver_discrete_mean: f64,
    pub proposer_reward: f64,
}

/// Rewards for every composition of `n_answers` samples over `n_categories`
/// answers, with every sample inside the brevity target.
pub fn reward_landscape(
    n_answers: usize,
    n_categories: usize,
    solver: &SolverRewardParams,
    proposer: &ProposerRewardParams,
) -> Result<Vec<LandscapeRow>, MetricsError> {
    let needed = composition_count(n_answers, n_categories);
    if needed > DEFAULT_ENUMERATION_CAP {
        return Err(SimError::EnumerationTooLarge {
            needed,
            cap: DEFAULT_ENUMERATION_CAP,
        }
        .into());
    }
    if n_answers == 0 || n_categories == 0 {
        return Err(
            SimError::InvalidWorld("need at least one answer and one category".into()).into(),
        );
    }
    let mut rows = Vec::with_capacity(needed as usize);
    for counts in compositions(n_answers, n_categories) {
        let samples: Vec<AnswerSample> = counts
            .iter()
            .enumerate()
            .flat_map(|(k, &c)| {
                let label = format!("a{k}");
                std::iter::repeat_n(
                    AnswerSample::new(format!("<answer>{label}</answer>"), label, 0)
                        .expect("non-empty label"),
                    c,
                )
            })
            .collect();
        let dist =
            AnswerDistribution::from_samples(&samples, n_answers).expect("n_answers samples");
        let n = n_answers as f64;
        let cont = samples
            .iter()
            .map(|s| solver_reward_continuous(s, &dist, solver).expect("member"))
            .sum::<f64>()
            / n;
        let disc = samples
            .iter()
            .map(|s| solver_reward_discrete(s, &dist).expect("member"))
            .sum::<f64>()
            / n;
        rows.push(LandscapeRow {
            composition: counts
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join("-"),
            entropy_nats: dist.entropy_nats,
            solver_continuous_mean: cont,
            solver_discrete_mean: disc,
            proposer_reward: proposer_reward(dist.entropy_nats, proposer),
        });
    }
    Ok(rows)
}

pub const LANDSCAPE_HEADER: &str =
    "composition,entropy_nats,solver_continuous_mean,solver_discrete_mean,proposer_reward";

pub fn write_landscape_csv<W: Write>(mut w: W, rows: &[LandscapeRow]) -> io::Result<()> {
    writeln!(w, "{LANDSCAPE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.composition,
            r.entropy_nats,
            r.solver_continuous_mean,
            r.solver_discrete_mean,
            r.proposer_reward
        )?;
    }
    Ok(())
}

/// Metadata written alongside every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest<C> {
    pub command: String,
    pub artifact_version: String,
    pub seed: Option<u64>,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// Parsed configuration after flag overrides.
    pub config: C,
    pub outputs: Vec<String>,
}
