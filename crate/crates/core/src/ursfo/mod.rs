//! Reward shaping from expert observations: an LSGAN discriminator over
//! consecutive state pairs whose score is added to the pick reward of a
//! double DQL learner.

mod lookup;

pub use lookup::{train_lookup_discriminator, LookupFit};

use std::fs::File;
use std::path::Path;
use std::sync::Arc;

use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{train_dql, AgentError, DqlConfig, Result, RewardShaper, TrainOutcome, Transition};
use crate::divergence::LsganLabels;
use crate::env::{ExpertDataset, Observation, SceneConfig};
use crate::nn::{discriminator_layers, Adam, DiscriminatorWidths, Network, Shape};
use crate::seed;

const STREAM_DISC_NET: u64 = 6;
const STREAM_AGENT_PAIRS: u64 = 7;
const STREAM_EXPERT_PAIRS: u64 = 8;

/// Weight of the discriminator term as a function of the training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant { value: f64 },
    /// 0 at step 0 rising to 2 at `ramp_steps`.
    LinearV1 {
        #[serde(default)]
        ramp_steps: Option<usize>,
    },
    /// 2 at step 0 falling to 0 at `ramp_steps`.
    LinearV2 {
        #[serde(default)]
        ramp_steps: Option<usize>,
    },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::LinearV1 { ramp_steps: None }
    }
}

/// Ramp length used when a linear schedule leaves it unset.
pub fn default_ramp(total_steps: usize) -> usize {
    (0.9 * total_steps as f64).round() as usize
}

pub fn schedule_value(schedule: &Schedule, step: usize, total_steps: usize) -> f64 {
    let ramp = |start: f64, end: f64, ramp_steps: Option<usize>| {
        let n = ramp_steps.unwrap_or_else(|| default_ramp(total_steps));
        if n == 0 || step >= n {
            return end;
        }
        start + (end - start) * step as f64 / n as f64
    };
    let v = match *schedule {
        Schedule::Constant { value } => value,
        Schedule::LinearV1 { ramp_steps } => ramp(0.0, 2.0, ramp_steps),
        Schedule::LinearV2 { ramp_steps } => ramp(2.0, 0.0, ramp_steps),
    };
    v.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    /// Squared norm of the discriminator's input gradient at expert pairs.
    #[default]
    Input,
    /// Squared norm of its parameter gradient at expert pairs.
    Params,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapingConfig {
    pub lambda1: f64,
    pub lambda2_schedule: Schedule,
    pub gp_weight: f64,
    pub penalty: PenaltyKind,
    pub lsgan_labels: LsganLabels,
    pub disc_lr: f64,
    pub disc_batch: usize,
    /// Environment steps between discriminator updates.
    pub disc_update_every: usize,
    /// Expert episodes feeding the discriminator.
    pub expert_episodes: usize,
    pub pair_capacity: usize,
    pub disc_widths: DiscriminatorWidths,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2_schedule: Schedule::default(),
            gp_weight: 10.0,
            penalty: PenaltyKind::Input,
            lsgan_labels: LsganLabels::MAIN,
            disc_lr: 1e-4,
            disc_batch: 16,
            disc_update_every: 2,
            expert_episodes: 10,
            pair_capacity: 50_000,
            disc_widths: DiscriminatorWidths::default(),
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AgentError::Argument(m.to_string()));
        let LsganLabels { a, b, c } = self.lsgan_labels;
        if !(b > a) || !c.is_finite() {
            return bad("lsgan labels need b > a");
        }
        if !(self.lambda1 >= 0.0) || !(self.gp_weight >= 0.0) {
            return bad("lambda1 and gp_weight must be nonnegative");
        }
        if let Schedule::Constant { value } = self.lambda2_schedule {
            if !(value >= 0.0) {
                return bad("constant lambda2 must be nonnegative");
            }
        }
        if !(self.disc_lr > 0.0) {
            return bad("disc_lr must be positive");
        }
        if self.disc_batch == 0 || self.disc_update_every == 0 || self.pair_capacity == 0 {
            return bad("disc_batch, disc_update_every and pair_capacity must be positive");
        }
        if self.expert_episodes == 0 {
            return bad("expert_episodes must be positive");
        }
        Ok(())
    }
}

/// Bonus in `[0, 1]` for a discriminator score near `target`.
pub fn shaping_term(d_value: f64, target: f64) -> f64 {
    (1.0 - 0.25 * (d_value - target).powi(2)).max(0.0)
}

/// `lambda1 * base + lambda2 * max(0, 1 - (d - 1)^2 / 4)`.
pub fn shaped_reward(base: f64, d_value: f64, lambda1: f64, lambda2: f64) -> f64 {
    shaped_reward_with(base, d_value, lambda1, lambda2, 1.0)
}

/// [`shaped_reward`] centred on the generator label `target`.
pub fn shaped_reward_with(base: f64, d_value: f64, lambda1: f64, lambda2: f64, target: f64) -> f64 {
    lambda1 * base + lambda2 * shaping_term(d_value, target)
}

pub type Pair = (Arc<Observation>, Arc<Observation>);

/// Consecutive observation pairs of every episode. Actions are never read.
pub fn expert_pairs(data: &ExpertDataset) -> Vec<Pair> {
    let mut pairs = Vec::new();
    for (i, ep) in data.episodes.iter().enumerate() {
        if ep.steps.len() < 2 {
            warn!("expert episode {i} has {} state(s); no pairs taken", ep.steps.len());
            continue;
        }
        let obs: Vec<Arc<Observation>> = ep.steps.iter().map(|s| Arc::new(s.observation.clone())).collect();
        pairs.extend(obs.windows(2).map(|w| (w[0].clone(), w[1].clone())));
    }
    pairs
}

/// Ring of the agent's own `(s, s')` pairs.
#[derive(Debug, Clone)]
pub struct PairBuffer {
    capacity: usize,
    pairs: Vec<Pair>,
    next: usize,
    rng: ChaCha8Rng,
}

impl PairBuffer {
    pub fn new(capacity: usize, rng: ChaCha8Rng) -> Self {
        assert!(capacity > 0, "pair buffer capacity must be positive");
        Self { capacity, pairs: Vec::new(), next: 0, rng }
    }

    pub fn push(&mut self, s: Arc<Observation>, s_next: Arc<Observation>) {
        if self.pairs.len() < self.capacity {
            self.pairs.push((s, s_next));
        } else {
            self.pairs[self.next] = (s, s_next);
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Uniform draw with replacement.
    pub fn sample(&mut self, n: usize) -> Vec<&Pair> {
        if self.pairs.is_empty() {
            return Vec::new();
        }
        let idx: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..self.pairs.len())).collect();
        idx.into_iter().map(|i| &self.pairs[i]).collect()
    }
}

/// Discriminator input: the channels of `s` followed by those of `s'`.
pub fn pair_input(s: &Observation, s_next: &Observation, out: &mut Vec<f64>) {
    s.extend_chw(out);
    s_next.extend_chw(out);
}

fn stack_pairs<'a>(pairs: impl IntoIterator<Item = (&'a Observation, &'a Observation)>) -> Vec<f64> {
    let mut v = Vec::new();
    for (s, n) in pairs {
        pair_input(s, n, &mut v);
    }
    v
}

pub fn discriminator(cfg: &SceneConfig, widths: DiscriminatorWidths, run_seed: u64) -> Result<Network> {
    let shape = Shape::new(2 * Observation::CHANNELS, cfg.height(), cfg.width());
    Ok(Network::new(shape, &discriminator_layers(widths), &mut seed::rng(run_seed, STREAM_DISC_NET))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiscLoss {
    pub expert_term: f64,
    pub agent_term: f64,
    pub penalty_term: f64,
}

/// Loss terms of `disc` on stacked expert and agent pair inputs, without
/// touching its gradients.
pub fn discriminator_losses(disc: &Network, expert: &[f64], agent: &[f64], cfg: &ShapingConfig) -> Result<DiscLoss> {
    let mut probe = disc.clone();
    discriminator_gradient(&mut probe, expert, agent, cfg)
}

/// Replaces the gradients of `disc` with those of the full objective and
/// returns its terms.
pub fn discriminator_gradient(disc: &mut Network, expert: &[f64], agent: &[f64], cfg: &ShapingConfig) -> Result<DiscLoss> {
    if expert.is_empty() || agent.is_empty() {
        return Err(AgentError::Argument("discriminator batches must be nonempty".into()));
    }
    let LsganLabels { a, b, .. } = cfg.lsgan_labels;
    disc.zero_grad();
    let (de, cache_e) = disc.forward(expert)?;
    let ne = de.len() as f64;
    let ge: Vec<f64> = de.iter().map(|d| (d - b) / ne).collect();
    let expert_term = de.iter().map(|d| 0.5 * (d - b).powi(2)).sum::<f64>() / ne;
    disc.backward_params(&cache_e, &ge)?;
    let penalty_term = match cfg.penalty {
        PenaltyKind::Input => disc.input_gradient_penalty(&cache_e, cfg.gp_weight)?,
        PenaltyKind::Params => disc.param_gradient_penalty(expert, cfg.gp_weight)?,
    };
    let (da, cache_a) = disc.forward(agent)?;
    let na = da.len() as f64;
    let ga: Vec<f64> = da.iter().map(|d| (d - a) / na).collect();
    let agent_term = da.iter().map(|d| 0.5 * (d - a).powi(2)).sum::<f64>() / na;
    disc.backward_params(&cache_a, &ga)?;
    Ok(DiscLoss { expert_term, agent_term, penalty_term })
}

/// One optimizer step on `½E_e[(D-b)²] + ½E_a[(D-a)²] + (λ/2)E_e[|∇D|²]`,
/// returning the terms before the step.
pub fn discriminator_update(
    disc: &mut Network,
    adam: &mut Adam,
    expert: &[f64],
    agent: &[f64],
    cfg: &ShapingConfig,
) -> Result<DiscLoss> {
    let loss = discriminator_gradient(disc, expert, agent, cfg)?;
    adam.step(disc)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiscRow {
    pub step: usize,
    pub expert_term: f64,
    pub agent_term: f64,
    pub penalty_term: f64,
}

pub fn write_disc_losses(path: &Path, rows: &[DiscRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(["step", "expert_term", "agent_term", "penalty_term"])?;
    }
    w.flush()?;
    Ok(())
}

/// Reward shaper driving the discriminator alongside a DQL run.
pub struct UrsfoShaper {
    cfg: ShapingConfig,
    total_steps: usize,
    disc: Network,
    adam: Adam,
    expert: Vec<Pair>,
    agent: PairBuffer,
    rng: ChaCha8Rng,
    rows: Vec<DiscRow>,
}

impl UrsfoShaper {
    pub fn new(scene_cfg: &SceneConfig, cfg: &ShapingConfig, expert: Vec<Pair>, total_steps: usize, run_seed: u64) -> Result<Self> {
        cfg.validate()?;
        if expert.is_empty() {
            return Err(AgentError::Argument("no expert pairs".into()));
        }
        let (h, w) = (scene_cfg.height(), scene_cfg.width());
        if expert.iter().any(|(s, n)| (s.height, s.width, n.height, n.width) != (h, w, h, w)) {
            return Err(AgentError::Argument("expert observations do not match the scene size".into()));
        }
        let disc = discriminator(scene_cfg, cfg.disc_widths, run_seed)?;
        let adam = Adam::new(disc.n_params(), cfg.disc_lr);
        let agent = PairBuffer::new(cfg.pair_capacity, seed::rng(run_seed, STREAM_AGENT_PAIRS));
        let rng = seed::rng(run_seed, STREAM_EXPERT_PAIRS);
        Ok(Self { cfg: cfg.clone(), total_steps, disc, adam, expert, agent, rng, rows: Vec::new() })
    }

    pub fn discriminator(&self) -> &Network {
        &self.disc
    }

    pub fn rows(&self) -> &[DiscRow] {
        &self.rows
    }

    pub fn into_parts(self) -> (Network, Vec<DiscRow>) {
        (self.disc, self.rows)
    }

    fn update(&mut self, step: usize) -> Result<()> {
        let n = self.cfg.disc_batch;
        let expert_batch = stack_pairs((0..n).map(|_| {
            let (s, t) = &self.expert[self.rng.random_range(0..self.expert.len())];
            (s.as_ref(), t.as_ref())
        }));
        let agent_batch = stack_pairs(self.agent.sample(n).into_iter().map(|(s, t)| (s.as_ref(), t.as_ref())));
        let l = discriminator_update(&mut self.disc, &mut self.adam, &expert_batch, &agent_batch, &self.cfg)?;
        self.rows.push(DiscRow { step, expert_term: l.expert_term, agent_term: l.agent_term, penalty_term: l.penalty_term });
        Ok(())
    }
}

impl RewardShaper for UrsfoShaper {
    fn observe(&mut self, s: &Arc<Observation>, s_next: &Arc<Observation>) {
        self.agent.push(s.clone(), s_next.clone());
    }

    fn after_step(&mut self, step: usize) -> Result<()> {
        if step % self.cfg.disc_update_every == 0 && self.agent.len() >= self.cfg.disc_batch {
            self.update(step)?;
        }
        Ok(())
    }

    fn rewards(&mut self, batch: &[&Transition], step: usize) -> Result<Vec<f64>> {
        let lambda2 = schedule_value(&self.cfg.lambda2_schedule, step, self.total_steps);
        let l1 = self.cfg.lambda1;
        if lambda2 == 0.0 {
            return Ok(batch.iter().map(|t| l1 * t.r).collect());
        }
        let d = self.disc.predict(&stack_pairs(batch.iter().map(|t| (t.s.as_ref(), t.s_next.as_ref()))))?;
        let c = self.cfg.lsgan_labels.c;
        Ok(batch.iter().zip(&d).map(|(t, &d)| shaped_reward_with(t.r, d, l1, lambda2, c)).collect())
    }

    fn lambda2(&self, step: usize) -> Option<f64> {
        Some(schedule_value(&self.cfg.lambda2_schedule, step, self.total_steps))
    }
}

#[derive(Debug, Clone)]
pub struct UrsfoOutcome {
    pub train: TrainOutcome,
    pub disc: Network,
    pub disc_rows: Vec<DiscRow>,
}

/// Double DQL on shaped rewards with the discriminator trained in the loop.
pub fn ursfo_train(
    scene_cfg: &SceneConfig,
    expert: &ExpertDataset,
    dql: &DqlConfig,
    shaping: &ShapingConfig,
    run_seed: u64,
) -> Result<UrsfoOutcome> {
    let n_steps = scene_cfg.cols * scene_cfg.rows;
    if dql.eval_every % n_steps != 0 {
        warn!("eval_every {} is not a multiple of the {} picks per scene", dql.eval_every, n_steps);
    }
    let mut data = expert.clone();
    if data.episodes.len() > shaping.expert_episodes {
        data.episodes.truncate(shaping.expert_episodes);
    } else if data.episodes.len() < shaping.expert_episodes {
        warn!("dataset holds {} expert episodes, {} requested", data.episodes.len(), shaping.expert_episodes);
    }
    let pairs = expert_pairs(&data);
    let mut shaper = UrsfoShaper::new(scene_cfg, shaping, pairs, dql.total_steps, run_seed)?;
    let train = train_dql(scene_cfg, dql, run_seed, &mut shaper)?;
    let (disc, disc_rows) = shaper.into_parts();
    Ok(UrsfoOutcome { train, disc, disc_rows })
}
