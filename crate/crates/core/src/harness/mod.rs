//! Experiment configuration, run orchestration and persistence.

mod cli;

pub use cli::{run, Cli};

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    eval_seeds, evaluate, train_bc, train_dql, write_metrics, AgentError, BcConfig, DqlConfig, EvalReport, Greedy,
    NoShaping, TrainOutcome,
};
use crate::divergence::{certify_with, CertificationReport, DivergenceError, Kernels, SweepConfig};
use crate::env::{collect_expert, read_dataset, write_dataset, EnvError, ExpertDataset, ExpertPolicy, SceneConfig};
use crate::nn::{Network, NnError};
use crate::ursfo::{default_ramp, expert_pairs, ursfo_train, write_disc_losses, Schedule, ShapingConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("{0} certification violation(s)")]
    Violation(usize),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Agent(AgentError::Argument(_)) => 2,
            HarnessError::Env(EnvError::Config(_)) => 2,
            HarnessError::MissingInput(_) => 3,
            HarnessError::Violation(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertSettings {
    pub episodes: usize,
    pub noise_std: f64,
    pub include_actions: bool,
    /// Dataset read by `bc` and `ursfo` training.
    pub dataset: Option<PathBuf>,
}

impl Default for ExpertSettings {
    fn default() -> Self {
        Self { episodes: 10, noise_std: 0.0, include_actions: true, dataset: None }
    }
}

/// Behavioral cloning grid over demonstrated episodes and training steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcSweep {
    pub episodes: Vec<usize>,
    pub steps: Vec<usize>,
}

impl Default for BcSweep {
    fn default() -> Self {
        Self { episodes: vec![1, 10, 50], steps: vec![100, 1_000, 10_000, 100_000] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub dql: DqlConfig,
    pub bc: BcConfig,
    pub shaping: ShapingConfig,
    pub expert: ExpertSettings,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Overrides the evaluation cadence of both trainers when set.
    pub eval_every: Option<usize>,
    /// Held-out scenes used by `eval`.
    pub eval_scenes: usize,
    pub bc_sweep: Option<BcSweep>,
    pub theory: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            dql: DqlConfig::default(),
            bc: BcConfig::default(),
            shaping: ShapingConfig::default(),
            expert: ExpertSettings::default(),
            seeds: vec![1],
            out_dir: PathBuf::from("runs"),
            eval_every: None,
            eval_scenes: 10,
            bc_sweep: None,
            theory: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(HarnessError::MissingInput(format!("config {} not found", path.display())));
        }
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Fills defaults that depend on other fields and validates the result.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        if let Some(every) = c.eval_every {
            c.dql.eval_every = every;
            c.bc.eval_every = every;
        }
        c.eval_every = Some(c.dql.eval_every);
        c.shaping.lambda2_schedule = match c.shaping.lambda2_schedule {
            Schedule::LinearV1 { ramp_steps: None } => Schedule::LinearV1 { ramp_steps: Some(default_ramp(c.dql.total_steps)) },
            Schedule::LinearV2 { ramp_steps: None } => Schedule::LinearV2 { ramp_steps: Some(default_ramp(c.dql.total_steps)) },
            s => s,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: String| HarnessError::Config(e);
        self.scene.validate().map_err(|e| cfg(e.to_string()))?;
        self.dql.validate().map_err(|e| cfg(e.to_string()))?;
        self.shaping.validate().map_err(|e| cfg(e.to_string()))?;
        if self.bc.eval_every == 0 || !(self.bc.learning_rate > 0.0) {
            return Err(cfg("bc.eval_every and bc.learning_rate must be positive".into()));
        }
        if self.expert.episodes == 0 || !(self.expert.noise_std >= 0.0) {
            return Err(cfg("expert.episodes must be positive and expert.noise_std nonnegative".into()));
        }
        if self.seeds.is_empty() {
            return Err(cfg("at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(cfg("seeds must be distinct".into()));
        }
        if self.eval_scenes == 0 {
            return Err(cfg("eval_scenes must be positive".into()));
        }
        if let Some(s) = &self.bc_sweep {
            if s.episodes.contains(&0) || s.steps.is_empty() || s.episodes.is_empty() {
                return Err(cfg("bc_sweep needs nonempty lists of positive episode counts".into()));
            }
        }
        Ok(())
    }

    fn dataset_path(&self) -> Result<&Path> {
        let path = self
            .expert
            .dataset
            .as_deref()
            .ok_or_else(|| HarnessError::MissingInput("expert.dataset is not set".into()))?;
        if !path.exists() {
            return Err(HarnessError::MissingInput(format!("dataset {} not found", path.display())));
        }
        Ok(path)
    }

    pub fn load_dataset(&self) -> Result<ExpertDataset> {
        let data = read_dataset(self.dataset_path()?)?;
        if data.header.config.height() != self.scene.height() || data.header.config.width() != self.scene.width() {
            return Err(HarnessError::Config("dataset scene size differs from the configured scene".into()));
        }
        Ok(data)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertManifest {
    pub episodes: usize,
    pub states: usize,
    pub pairs: usize,
    pub include_actions: bool,
    pub noise_std: f64,
    pub picks: usize,
    pub successes: usize,
    pub success_percent: f64,
    pub total_reward: f64,
}

/// Writes `dataset.bin`, `manifest.json` and `config.json` under `out`.
pub fn run_collect_expert(cfg: &ExperimentConfig, out: &Path) -> Result<ExpertManifest> {
    let cfg = cfg.resolved()?;
    create_dir(out)?;
    let e = &cfg.expert;
    let (data, tally) = collect_expert(&cfg.scene, e.episodes, e.noise_std, e.include_actions)?;
    write_dataset(&out.join("dataset.bin"), &data)?;
    let manifest = ExpertManifest {
        episodes: data.episodes.len(),
        states: data.n_states(),
        pairs: expert_pairs(&data).len(),
        include_actions: e.include_actions,
        noise_std: e.noise_std,
        picks: tally.picks,
        successes: tally.successes,
        success_percent: 100.0 * tally.successes as f64 / tally.picks.max(1) as f64,
        total_reward: tally.total_reward,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    write_json(&out.join("config.json"), &cfg)?;
    info!("collected {} episodes into {}", manifest.episodes, out.display());
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Bc,
    Dql,
    Ursfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub success_percent: f64,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub algo: Algo,
    pub seeds: Vec<SeedResult>,
    pub final_success_percent: Stat,
    pub final_eval_return: Stat,
}

pub fn summarize(algo: Algo, mut seeds: Vec<SeedResult>) -> TrainSummary {
    seeds.sort_by_key(|r| r.seed);
    let success: Vec<f64> = seeds.iter().map(|r| r.success_percent).collect();
    let returns: Vec<f64> = seeds.iter().map(|r| r.mean_return).collect();
    TrainSummary { algo, final_success_percent: Stat::of(&success), final_eval_return: Stat::of(&returns), seeds }
}

fn first_episodes(data: &ExpertDataset, n: usize) -> ExpertDataset {
    let mut d = data.clone();
    d.episodes.truncate(n);
    d
}

fn train_one(cfg: &ExperimentConfig, algo: Algo, data: Option<&ExpertDataset>, seed: u64, dir: &Path) -> Result<SeedResult> {
    create_dir(dir)?;
    let outcome: TrainOutcome = match algo {
        Algo::Dql => train_dql(&cfg.scene, &cfg.dql, seed, &mut NoShaping)?,
        Algo::Bc => {
            let data = first_episodes(data.expect("bc needs a dataset"), cfg.expert.episodes);
            train_bc(&data, &cfg.scene, &cfg.bc, seed)?
        }
        Algo::Ursfo => {
            let out = ursfo_train(&cfg.scene, data.expect("ursfo needs a dataset"), &cfg.dql, &cfg.shaping, seed)?;
            write_disc_losses(&dir.join("disc.csv"), &out.disc_rows)?;
            out.disc.save(&dir.join("discriminator.bin"))?;
            out.train
        }
    };
    write_metrics(&dir.join("metrics.csv"), &outcome.rows)?;
    outcome.net.save(&dir.join("checkpoint.bin"))?;
    write_json(&dir.join("final_eval.json"), &outcome.final_eval)?;
    info!("{algo:?} seed {seed}: {:.1}% success", outcome.final_eval.success_percent);
    Ok(SeedResult { seed, success_percent: outcome.final_eval.success_percent, mean_return: outcome.final_eval.mean_return })
}

/// Trains `algo` for every configured seed, one job per seed, and writes
/// `seed_<s>/` run directories, `config.json` and `summary.json` under `out`.
pub fn run_train(cfg: &ExperimentConfig, algo: Algo, out: &Path) -> Result<TrainSummary> {
    let cfg = cfg.resolved()?;
    let data = match algo {
        Algo::Dql => None,
        Algo::Bc | Algo::Ursfo => Some(cfg.load_dataset()?),
    };
    if algo == Algo::Bc && !data.as_ref().is_some_and(|d| d.has_actions()) {
        return Err(HarnessError::Config("behavioral cloning needs a dataset with actions".into()));
    }
    create_dir(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let results: Vec<Result<SeedResult>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| train_one(&cfg, algo, data.as_ref(), seed, &out.join(format!("seed_{seed}"))))
        .collect();
    let summary = summarize(algo, results.into_iter().collect::<Result<_>>()?);
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub episodes: usize,
    pub steps: usize,
    pub success_percent: Stat,
}

/// Behavioral cloning over the configured episode and step grid, averaged over seeds.
pub fn run_bc_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SweepCell>> {
    let cfg = cfg.resolved()?;
    let sweep = cfg.bc_sweep.clone().unwrap_or_default();
    let data = cfg.load_dataset()?;
    if !data.has_actions() {
        return Err(HarnessError::Config("behavioral cloning needs a dataset with actions".into()));
    }
    if let Some(&most) = sweep.episodes.iter().max() {
        if most > data.episodes.len() {
            return Err(HarnessError::MissingInput(format!("sweep needs {most} episodes, dataset has {}", data.episodes.len())));
        }
    }
    create_dir(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let mut jobs: Vec<(usize, usize, u64)> = Vec::new();
    for &e in &sweep.episodes {
        for &s in &sweep.steps {
            jobs.extend(cfg.seeds.iter().map(|&seed| (e, s, seed)));
        }
    }
    let results: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(episodes, steps, seed)| {
            let bc = BcConfig { steps, eval_every: steps.max(1), ..cfg.bc.clone() };
            Ok(train_bc(&first_episodes(&data, episodes), &cfg.scene, &bc, seed)?.final_eval.success_percent)
        })
        .collect();
    let results: Vec<f64> = results.into_iter().collect::<Result<_>>()?;
    let cells: Vec<SweepCell> = results
        .chunks(cfg.seeds.len())
        .zip(jobs.chunks(cfg.seeds.len()))
        .map(|(r, j)| SweepCell { episodes: j[0].0, steps: j[0].1, success_percent: Stat::of(r) })
        .collect();
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    w.write_record(["episodes", "steps", "success_percent_mean", "success_percent_std"])?;
    for c in &cells {
        w.write_record([c.episodes.to_string(), c.steps.to_string(), c.success_percent.mean.to_string(), c.success_percent.std.to_string()])?;
    }
    w.flush().map_err(io_err(&out.join("sweep.csv")))?;
    write_json(&out.join("sweep.json"), &cells)?;
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub policy: String,
    pub scene_seeds: Vec<u64>,
    pub report: EvalReport,
}

pub enum EvalTarget<'a> {
    Checkpoint(&'a Path),
    Expert { noise_std: f64 },
}

/// Greedy evaluation on held-out scenes; writes `eval.json` under `out`.
pub fn run_eval(cfg: &ExperimentConfig, target: EvalTarget, scene_seeds: Option<Vec<u64>>, out: &Path) -> Result<EvalOutput> {
    let cfg = cfg.resolved()?;
    let seeds = scene_seeds.unwrap_or_else(|| eval_seeds(cfg.eval_scenes));
    let (policy, report) = match target {
        EvalTarget::Checkpoint(path) => {
            if !path.exists() {
                return Err(HarnessError::MissingInput(format!("checkpoint {} not found", path.display())));
            }
            let net = Network::load(path)?;
            (path.display().to_string(), evaluate(&mut Greedy(&net), &cfg.scene, &seeds)?)
        }
        EvalTarget::Expert { noise_std } => {
            let mut expert = ExpertPolicy::new(noise_std, 0);
            ("expert".to_string(), evaluate(&mut expert, &cfg.scene, &seeds)?)
        }
    };
    create_dir(out)?;
    let output = EvalOutput { policy, scene_seeds: seeds, report };
    write_json(&out.join("eval.json"), &output)?;
    Ok(output)
}

/// Runs the certification sweep and writes `theory.json`; violations are
/// reported as an error after the report is persisted.
pub fn run_verify_theory(cfg: &ExperimentConfig, kernels: &Kernels, out: &Path) -> Result<CertificationReport> {
    let cfg = cfg.resolved()?;
    let report = certify_with(kernels, &cfg.theory)?;
    create_dir(out)?;
    write_json(&out.join("theory.json"), &report)?;
    match report.total_violations() {
        0 => Ok(report),
        n => Err(HarnessError::Violation(n)),
    }
}
