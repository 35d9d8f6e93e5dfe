use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use coevo_core::backend::{
    BackendClient, BackendConfig, ChatTransport, FixtureTransport, HttpTransport,
    RecordingTransport,
};
use coevo_core::config;
use coevo_core::metrics::{
    read_jsonl, reward_landscape, summarize, write_json_pretty, write_jsonl, write_landscape_csv,
    RunManifest, RunSummary,
};
use coevo_core::{
    ProposerRewardParams, RunOutput, SolverRewardKind, SolverRewardParams, StepRecord,
    TrainerConfig,
};

const MANIFEST: &str = "manifest.json";
const STEPS: &str = "steps.jsonl";
const SUMMARY: &str = "summary.json";

#[derive(Parser)]
#[command(
    name = "coevo",
    version,
    about = "Proposer/solver co-evolution simulator and reward tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted config override, e.g. `world.n_bins=6`. Repeatable; last wins.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load<T>(&self) -> Result<T>
    where
        T: serde::de::DeserializeOwned + Serialize + Default,
    {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        let label = self
            .config
            .as_ref()
            .map_or_else(|| "defaults".to_owned(), |p| p.display().to_string());
        config::load(self.config.as_deref(), &overrides)
            .with_context(|| format!("loading config from {label}"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the simulator and write the step log and summary.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Tabulate rewards for every outcome composition of N answers.
    RewardLandscape {
        #[command(flatten)]
        common: Common,
        /// Number of sampled answers (overrides `n_answers`).
        #[arg(long)]
        n_answers: Option<usize>,
        /// Number of distinct answer categories (overrides `n_categories`).
        #[arg(long)]
        categories: Option<usize>,
    },
    /// Paired continuous/discrete runs over a list of seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; defaults to 0..10.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Propose/solve/score rounds against a chat-completions endpoint.
    ScoreBackend {
        #[command(flatten)]
        common: Common,
        /// Image paths or URLs, one round each.
        #[arg(required = true)]
        images: Vec<String>,
        /// Replay recorded exchanges instead of contacting the endpoint.
        #[arg(long, conflicts_with = "record")]
        fixture: Option<PathBuf>,
        /// Record live exchanges into this fixture file.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Recompute summary.json from a run directory's steps.jsonl.
    Reanalyze {
        /// Directory written by `simulate` or `score-backend`.
        run_dir: PathBuf,
        /// Overwrite summary.json instead of only checking it.
        #[arg(long)]
        write: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct LandscapeConfig {
    n_answers: usize,
    n_categories: usize,
    solver_params: SolverRewardParams,
    proposer_params: ProposerRewardParams,
    seed: u64,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            n_answers: 5,
            n_categories: 2,
            solver_params: SolverRewardParams::default(),
            proposer_params: ProposerRewardParams::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ScoreConfig {
    backend: BackendConfig,
    solver_reward: SolverRewardKind,
    solver_params: SolverRewardParams,
    proposer_params: ProposerRewardParams,
    /// Recorded in the manifest only; backend sampling is not seeded.
    seed: u64,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Writes the manifest at start and rewrites it with `finished_at` once
/// `body` succeeds.
fn with_manifest<C: Serialize>(
    out: &Path,
    command: &str,
    seed: Option<u64>,
    config: &C,
    outputs: &[&str],
    body: impl FnOnce() -> Result<()>,
) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = RunManifest {
        command: command.to_owned(),
        artifact_version: env!("CARGO_PKG_VERSION").to_owned(),
        seed,
        started_at: now(),
        finished_at: None,
        config,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let path = out.join(MANIFEST);
    write_json_pretty(&path, &manifest)?;
    body()?;
    manifest.finished_at = Some(now());
    write_json_pretty(&path, &manifest)?;
    Ok(())
}

fn write_run(dir: &Path, config: &TrainerConfig, output: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(STEPS), &output.records)?;
    write_json_pretty(&dir.join(SUMMARY), &output.summary)?;
    write_json_pretty(
        &dir.join("final_state.json"),
        &serde_json::json!({
            "seed": config.seed,
            "final_solver_skill": output.final_solver_skill,
            "final_proposer_probabilities": output.final_proposer_probabilities,
            "final_proposer_logits": output.final_proposer_logits,
        }),
    )?;
    Ok(())
}

fn simulate(common: &Common) -> Result<()> {
    let cfg: TrainerConfig = common.load()?;
    cfg.validate()?;
    let outputs = [MANIFEST, STEPS, SUMMARY, "final_state.json"];
    with_manifest(
        &common.out,
        "simulate",
        Some(cfg.seed),
        &cfg,
        &outputs,
        || {
            let output = coevo_core::run(&cfg)?;
            write_run(&common.out, &cfg, &output)?;
            eprintln!(
                "wrote {} steps to {}",
                output.records.len(),
                common.out.join(STEPS).display()
            );
            Ok(())
        },
    )
}

fn landscape(common: &Common, n_answers: Option<usize>, categories: Option<usize>) -> Result<()> {
    let mut cfg: LandscapeConfig = common.load()?;
    cfg.n_answers = n_answers.unwrap_or(cfg.n_answers);
    cfg.n_categories = categories.unwrap_or(cfg.n_categories);
    cfg.solver_params.validate()?;
    cfg.proposer_params.validate()?;
    let rows = reward_landscape(
        cfg.n_answers,
        cfg.n_categories,
        &cfg.solver_params,
        &cfg.proposer_params,
    )?;
    with_manifest(
        &common.out,
        "reward-landscape",
        None,
        &cfg,
        &[MANIFEST, "landscape.csv"],
        || {
            let path = common.out.join("landscape.csv");
            let file =
                fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            let mut w = std::io::BufWriter::new(file);
            write_landscape_csv(&mut w, &rows)?;
            std::io::Write::flush(&mut w)?;
            eprintln!("wrote {} compositions to {}", rows.len(), path.display());
            Ok(())
        },
    )
}

#[derive(Debug, Serialize)]
struct ArmStats {
    zero_advantage_fraction: Option<f64>,
    zero_reward_sample_fraction: Option<f64>,
    proposer_reward_window_variance: Option<f64>,
    solver_reward_window_variance: Option<f64>,
    mean_solver_reward: Option<f64>,
    mean_proposer_reward: Option<f64>,
    final_solver_skill: f64,
}

impl ArmStats {
    fn new(out: &RunOutput) -> Self {
        let s = &out.summary;
        Self {
            zero_advantage_fraction: s.zero_advantage_fraction,
            zero_reward_sample_fraction: s.zero_reward_sample_fraction,
            proposer_reward_window_variance: s.proposer_reward_window_variance,
            solver_reward_window_variance: s.solver_reward_window_variance,
            mean_solver_reward: s.mean_solver_reward,
            mean_proposer_reward: s.mean_proposer_reward,
            final_solver_skill: out.final_solver_skill,
        }
    }
}

#[derive(Debug, Serialize)]
struct SeedComparison {
    seed: u64,
    continuous: ArmStats,
    discrete: ArmStats,
}

fn mean_of<'a>(xs: impl Iterator<Item = Option<f64>> + 'a) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn arm_mean(
    per_seed: &[SeedComparison],
    pick: impl Fn(&SeedComparison) -> Option<f64>,
) -> Option<f64> {
    mean_of(per_seed.iter().map(pick))
}

fn compare(common: &Common, seeds: &[u64]) -> Result<()> {
    let base: TrainerConfig = common.load()?;
    base.validate()?;
    let seeds: Vec<u64> = if seeds.is_empty() {
        (0..10).collect()
    } else {
        seeds.to_vec()
    };
    let mut unique = seeds.clone();
    unique.sort_unstable();
    unique.dedup();
    ensure!(unique.len() == seeds.len(), "duplicate seeds in --seeds");

    let arm = |kind: SolverRewardKind, seed: u64| TrainerConfig {
        solver_reward: kind,
        seed,
        ..base.clone()
    };
    with_manifest(
        &common.out,
        "compare",
        None,
        &serde_json::json!({"base": &base, "seeds": &seeds}),
        &[MANIFEST, "comparison.json"],
        || {
            let results: Vec<Result<SeedComparison>> = std::thread::scope(|scope| {
                let handles: Vec<_> = seeds
                    .iter()
                    .map(|&seed| {
                        let arm = &arm;
                        scope.spawn(move || -> Result<SeedComparison> {
                            let mut stats = Vec::new();
                            for (kind, name) in [
                                (SolverRewardKind::Continuous, "continuous"),
                                (SolverRewardKind::Discrete, "discrete"),
                            ] {
                                let cfg = arm(kind, seed);
                                let out = coevo_core::run(&cfg)?;
                                write_run(
                                    &common.out.join(name).join(format!("seed-{seed}")),
                                    &cfg,
                                    &out,
                                )?;
                                stats.push(ArmStats::new(&out));
                            }
                            let discrete = stats.pop().expect("two arms");
                            let continuous = stats.pop().expect("two arms");
                            Ok(SeedComparison {
                                seed,
                                continuous,
                                discrete,
                            })
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("compare worker panicked"))
                    .collect()
            });
            let per_seed = results.into_iter().collect::<Result<Vec<_>>>()?;

            let zc = arm_mean(&per_seed, |s| s.continuous.zero_advantage_fraction);
            let zd = arm_mean(&per_seed, |s| s.discrete.zero_advantage_fraction);
            let vc = arm_mean(&per_seed, |s| s.continuous.proposer_reward_window_variance);
            let vd = arm_mean(&per_seed, |s| s.discrete.proposer_reward_window_variance);
            let lower = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a < b);
            let comparison = serde_json::json!({
                "seeds": &seeds,
                "runs": 2 * seeds.len(),
                "mean": {
                    "continuous": {
                        "zero_advantage_fraction": zc,
                        "proposer_reward_window_variance": vc,
                        "zero_reward_sample_fraction": arm_mean(&per_seed, |s| s.continuous.zero_reward_sample_fraction),
                        "final_solver_skill": arm_mean(&per_seed, |s| Some(s.continuous.final_solver_skill)),
                    },
                    "discrete": {
                        "zero_advantage_fraction": zd,
                        "proposer_reward_window_variance": vd,
                        "zero_reward_sample_fraction": arm_mean(&per_seed, |s| s.discrete.zero_reward_sample_fraction),
                        "final_solver_skill": arm_mean(&per_seed, |s| Some(s.discrete.final_solver_skill)),
                    },
                },
                "continuous_zero_advantage_lower": lower(zc, zd),
                "continuous_proposer_variance_lower": lower(vc, vd),
                "seeds_with_lower_continuous_proposer_variance": per_seed
                    .iter()
                    .filter(|s| lower(s.continuous.proposer_reward_window_variance, s.discrete.proposer_reward_window_variance) == Some(true))
                    .count(),
                "per_seed": per_seed,
            });
            write_json_pretty(&common.out.join("comparison.json"), &comparison)?;
            eprintln!("wrote {}", common.out.join("comparison.json").display());
            Ok(())
        },
    )
}

#[derive(Debug, Serialize)]
struct RoundLog<'a> {
    step: usize,
    image: &'a str,
    question: &'a str,
    generations: &'a [String],
    failed_requests: Vec<usize>,
}

fn run_rounds<T: ChatTransport>(
    client: &BackendClient<T>,
    cfg: &ScoreConfig,
    images: &[String],
    out: &Path,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut rounds = Vec::new();
    for (i, image) in images.iter().enumerate() {
        let round = client
            .score_round(
                i + 1,
                image,
                cfg.solver_reward,
                &cfg.solver_params,
                &cfg.proposer_params,
            )
            .with_context(|| format!("round {} ({image})", i + 1))?;
        if round.answers.is_partial() {
            eprintln!(
                "round {}: {} of {} solver requests failed",
                i + 1,
                round.answers.failures.len(),
                cfg.backend.n_answers
            );
        }
        entries.push(round.entry.clone());
        rounds.push(round);
    }
    let logs: Vec<RoundLog> = rounds
        .iter()
        .zip(images)
        .map(|(r, image)| RoundLog {
            step: r.entry.step,
            image,
            question: &r.question,
            generations: &r.answers.generations,
            failed_requests: r.answers.failures.iter().map(|f| f.0).collect(),
        })
        .collect();
    write_jsonl(&out.join(STEPS), &entries)?;
    write_jsonl(&out.join("rounds.jsonl"), &logs)?;
    write_json_pretty(
        &out.join(SUMMARY),
        &summarize(&entries, 0, &cfg.proposer_params),
    )?;
    eprintln!(
        "scored {} rounds into {}",
        entries.len(),
        out.join(STEPS).display()
    );
    Ok(())
}

fn score_backend(
    common: &Common,
    images: &[String],
    fixture: Option<&Path>,
    record: Option<&Path>,
) -> Result<()> {
    let cfg: ScoreConfig = common.load()?;
    cfg.backend.validate()?;
    cfg.solver_params.validate()?;
    cfg.proposer_params.validate()?;
    let outputs = [MANIFEST, STEPS, "rounds.jsonl", SUMMARY];

    if let Some(path) = fixture {
        let transport = FixtureTransport::load(path)?;
        let client = BackendClient::new(cfg.backend.clone(), transport)?;
        return with_manifest(&common.out, "score-backend", None, &cfg, &outputs, || {
            run_rounds(&client, &cfg, images, &common.out)
        });
    }
    let http = HttpTransport::from_config(&cfg.backend)?;
    match record {
        Some(path) => {
            let recorder = RecordingTransport::new(http);
            let client = BackendClient::new(cfg.backend.clone(), &recorder)?;
            let result = with_manifest(&common.out, "score-backend", None, &cfg, &outputs, || {
                run_rounds(&client, &cfg, images, &common.out)
            });
            recorder.fixture().save(path)?;
            result
        }
        None => {
            let client = BackendClient::new(cfg.backend.clone(), http)?;
            with_manifest(&common.out, "score-backend", None, &cfg, &outputs, || {
                run_rounds(&client, &cfg, images, &common.out)
            })
        }
    }
}

fn reanalyze(run_dir: &Path, write: bool) -> Result<()> {
    let manifest_path = run_dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    let manifest: RunManifest<serde_json::Value> = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", manifest_path.display()))?;
    let (n_bins, proposer) = match manifest.command.as_str() {
        "simulate" => {
            let cfg: TrainerConfig = serde_json::from_value(manifest.config)?;
            (cfg.world.n_bins, cfg.proposer_params)
        }
        "score-backend" => {
            let cfg: ScoreConfig = serde_json::from_value(manifest.config)?;
            (0, cfg.proposer_params)
        }
        other => bail!("cannot reanalyze output of `{other}`"),
    };
    let records: Vec<StepRecord> = read_jsonl(&run_dir.join(STEPS))?;
    let summary = summarize(&records, n_bins, &proposer);
    let summary_path = run_dir.join(SUMMARY);
    if write {
        write_json_pretty(&summary_path, &summary)?;
        eprintln!("rewrote {}", summary_path.display());
        return Ok(());
    }
    let stored: RunSummary = serde_json::from_str(
        &fs::read_to_string(&summary_path)
            .with_context(|| format!("reading {}", summary_path.display()))?,
    )?;
    ensure!(
        stored == summary,
        "{} does not match the summary recomputed from {}",
        summary_path.display(),
        STEPS
    );
    println!("summary matches {} ({} steps)", STEPS, records.len());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate { common } => simulate(common),
        Command::RewardLandscape {
            common,
            n_answers,
            categories,
        } => landscape(common, *n_answers, *categories),
        Command::Compare { common, seeds } => compare(common, seeds),
        Command::ScoreBackend {
            common,
            images,
            fixture,
            record,
        } => score_backend(common, images, fixture.as_deref(), record.as_deref()),
        Command::Reanalyze { run_dir, write } => reanalyze(run_dir, *write),
    }
}
