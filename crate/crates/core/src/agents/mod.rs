//! Pixel-grid policies: behavioral cloning, double deep Q-learning and the
//! greedy evaluation protocol.

mod metrics;
mod replay;

pub use metrics::{write_metrics, MetricsRow};
pub use replay::{ReplayBuffer, Transition};

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, ExpertDataset, ExpertPolicy, Observation, Pixel, Scene, SceneConfig};
use crate::nn::{q_network_layers, softmax_cross_entropy, Adam, Network, NnError, QNetWidths, Shape};
use crate::seed;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, AgentError>;

/// Base of the held-out evaluation scene seeds.
pub const EVAL_SEED_BASE: u64 = 0xE7A1_0000_0000;

// stream tags under a run seed
const STREAM_NET: u64 = 1;
const STREAM_ACT: u64 = 2;
const STREAM_REPLAY: u64 = 3;
const STREAM_SCENES: u64 = 4;
const STREAM_BC: u64 = 5;

pub fn eval_seeds(n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| seed::derive(EVAL_SEED_BASE, i)).collect()
}

/// Scene seed of training episode `episode` of a run.
pub fn train_scene_seed(run_seed: u64, episode: u64) -> u64 {
    seed::derive(seed::derive(run_seed, STREAM_SCENES), episode)
}

pub fn obs_input(obs: &Observation) -> Vec<f64> {
    let mut v = Vec::with_capacity(obs.data.len());
    obs.extend_chw(&mut v);
    v
}

pub fn stack_inputs<'a>(obs: impl IntoIterator<Item = &'a Observation>) -> Vec<f64> {
    let mut v = Vec::new();
    for o in obs {
        o.extend_chw(&mut v);
    }
    v
}

/// Pixel-score network sized for `cfg`, initialized from the run seed.
pub fn q_network(cfg: &SceneConfig, widths: QNetWidths, run_seed: u64) -> Result<Network> {
    let shape = Shape::new(Observation::CHANNELS, cfg.height(), cfg.width());
    let net = Network::new(shape, &q_network_layers(widths), &mut seed::rng(run_seed, STREAM_NET))?;
    let out = net.output_shape();
    if (out.height, out.width) != (cfg.height(), cfg.width()) {
        return Err(AgentError::Argument(format!(
            "a {}x{} observation maps to a {}x{} score grid; both sides must be multiples of 4",
            cfg.height(),
            cfg.width(),
            out.height,
            out.width
        )));
    }
    Ok(net)
}

/// Index of the largest value, lowest index among ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_pixel(net: &Network, obs: &Observation) -> Result<Pixel> {
    let scores = net.predict(&obs_input(obs))?;
    Ok(Pixel::from_flat(argmax(&scores), obs.width))
}

/// Epsilon-greedy pick. One uniform draw decides exploration on every call.
pub fn act<R: Rng + ?Sized>(net: &Network, obs: &Observation, epsilon: f64, rng: &mut R) -> Result<Pixel> {
    if rng.random::<f64>() < epsilon {
        let i = rng.random_range(0..obs.pixels());
        return Ok(Pixel::from_flat(i, obs.width));
    }
    greedy_pixel(net, obs)
}

/// Anything that picks a pixel for the current scene.
pub trait PickPolicy {
    fn pick(&mut self, scene: &Scene, obs: &Observation) -> Result<Pixel>;
}

pub struct Greedy<'a>(pub &'a Network);

impl PickPolicy for Greedy<'_> {
    fn pick(&mut self, _scene: &Scene, obs: &Observation) -> Result<Pixel> {
        greedy_pixel(self.0, obs)
    }
}

impl PickPolicy for ExpertPolicy {
    fn pick(&mut self, scene: &Scene, _obs: &Observation) -> Result<Pixel> {
        Ok(self.act(scene)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub parcels: usize,
    pub successes: usize,
    pub success_percent: f64,
    pub mean_return: f64,
}

/// Runs one episode per seed; success is counted over every parcel of every scene.
pub fn evaluate(policy: &mut dyn PickPolicy, cfg: &SceneConfig, seeds: &[u64]) -> Result<EvalReport> {
    let mut successes = 0;
    let mut total_return = 0.0;
    for &s in seeds {
        let (mut scene, mut obs) = Scene::reset(&SceneConfig { seed: s, ..cfg.clone() })?;
        while !scene.is_done() {
            let a = policy.pick(&scene, &obs)?;
            let (next, out) = scene.step(a)?;
            successes += out.success as usize;
            total_return += out.base_reward;
            obs = next;
        }
    }
    let parcels = seeds.len() * cfg.parcels();
    Ok(EvalReport {
        scenes: seeds.len(),
        parcels,
        successes,
        success_percent: if parcels == 0 { 0.0 } else { 100.0 * successes as f64 / parcels as f64 },
        mean_return: if seeds.is_empty() { 0.0 } else { total_return / seeds.len() as f64 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqlConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub update_every: usize,
    pub target_tau: f64,
    pub seed_steps: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Share of `total_steps` over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    pub total_steps: usize,
    pub buffer_capacity: usize,
    pub learning_rate: f64,
    pub eval_every: usize,
    /// Held-out scenes per in-training evaluation row.
    pub eval_scenes: usize,
    pub final_eval_scenes: usize,
    pub q_widths: QNetWidths,
}

impl Default for DqlConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 16,
            update_every: 2,
            target_tau: 2e-2,
            seed_steps: 100,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.4,
            total_steps: 50_000,
            buffer_capacity: 50_000,
            learning_rate: 1e-4,
            eval_every: 126,
            eval_scenes: 3,
            final_eval_scenes: 10,
            q_widths: QNetWidths::default(),
        }
    }
}

impl DqlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AgentError::Argument(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if self.batch_size == 0 || self.update_every == 0 || self.total_steps == 0 || self.buffer_capacity == 0 {
            return bad("batch_size, update_every, total_steps and buffer_capacity must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if !(self.target_tau > 0.0 && self.target_tau <= 1.0) {
            return bad("target_tau must be in (0, 1]");
        }
        for e in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&e) {
                return bad("epsilon bounds must be in [0, 1]");
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay_fraction) {
            return bad("epsilon_decay_fraction must be in [0, 1]");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    pub fn epsilon_at(&self, step: usize) -> f64 {
        let span = self.epsilon_decay_fraction * self.total_steps as f64;
        if span <= 0.0 || step as f64 >= span {
            return self.epsilon_end;
        }
        let frac = step as f64 / span;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// One double-DQL step on `net`: the online network chooses the bootstrap
/// pixel, the target network values it. `rewards` replaces the stored ones.
/// Returns the mean squared TD error before the step.
pub fn dql_update(
    net: &mut Network,
    target: &Network,
    adam: &mut Adam,
    batch: &[&Transition],
    rewards: &[f64],
    gamma: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(AgentError::Argument("empty batch".into()));
    }
    if rewards.len() != batch.len() {
        return Err(AgentError::Argument("one reward per transition is required".into()));
    }
    let n = batch.len();
    let pixels = net.output_shape().len();
    let live: Vec<usize> = (0..n).filter(|&i| !batch[i].done).collect();
    let mut targets = rewards.to_vec();
    if !live.is_empty() {
        let next = stack_inputs(live.iter().map(|&i| batch[i].s_next.as_ref()));
        let online_next = net.predict(&next)?;
        let target_next = target.predict(&next)?;
        for (k, &i) in live.iter().enumerate() {
            let row = k * pixels..(k + 1) * pixels;
            let best = argmax(&online_next[row.clone()]);
            targets[i] += gamma * target_next[row][best];
        }
    }
    let (q, cache) = net.forward(&stack_inputs(batch.iter().map(|t| t.s.as_ref())))?;
    let mut grad = vec![0.0; q.len()];
    let mut loss = 0.0;
    for (i, t) in batch.iter().enumerate() {
        let idx = i * pixels + t.a.flat(t.s.width);
        let err = q[idx] - targets[i];
        loss += err * err / n as f64;
        grad[idx] = 2.0 * err / n as f64;
    }
    net.zero_grad();
    net.backward_params(&cache, &grad)?;
    adam.step(net)?;
    Ok(loss)
}

/// `target <- (1 - tau) * target + tau * online`.
pub fn soft_update(target: &mut Network, online: &Network, tau: f64) -> Result<()> {
    if target.n_params() != online.n_params() {
        return Err(AgentError::Argument("networks differ in size".into()));
    }
    for (t, &o) in target.params_mut().iter_mut().zip(online.params()) {
        *t = (1.0 - tau) * *t + tau * o;
    }
    Ok(())
}

/// Hooks that turn plain DQL into a shaped-reward learner.
pub trait RewardShaper {
    /// Sees every environment transition as it happens.
    fn observe(&mut self, _s: &Arc<Observation>, _s_next: &Arc<Observation>) {}

    /// Runs after environment step `step` (1-based), before any critic update.
    fn after_step(&mut self, _step: usize) -> Result<()> {
        Ok(())
    }

    /// Rewards used for a sampled batch at `step`.
    fn rewards(&mut self, batch: &[&Transition], step: usize) -> Result<Vec<f64>>;

    fn lambda2(&self, _step: usize) -> Option<f64> {
        None
    }
}

/// Stored pick rewards as they are.
pub struct NoShaping;

impl RewardShaper for NoShaping {
    fn rewards(&mut self, batch: &[&Transition], _step: usize) -> Result<Vec<f64>> {
        Ok(batch.iter().map(|t| t.r).collect())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub rows: Vec<MetricsRow>,
    pub final_eval: EvalReport,
}

/// Epsilon-greedy double DQL on fresh scenes, with rewards routed through `shaper`.
pub fn train_dql(
    scene_cfg: &SceneConfig,
    cfg: &DqlConfig,
    run_seed: u64,
    shaper: &mut dyn RewardShaper,
) -> Result<TrainOutcome> {
    scene_cfg.validate()?;
    cfg.validate()?;
    let mut online = q_network(scene_cfg, cfg.q_widths, run_seed)?;
    let mut target = online.clone();
    let mut adam = Adam::new(online.n_params(), cfg.learning_rate);
    let mut replay = ReplayBuffer::new(cfg.buffer_capacity, seed::rng(run_seed, STREAM_REPLAY));
    let mut act_rng = seed::rng(run_seed, STREAM_ACT);
    let row_seeds = eval_seeds(cfg.eval_scenes);
    let mut episode = 0u64;
    let reset = |episode: u64| Scene::reset(&SceneConfig { seed: train_scene_seed(run_seed, episode), ..scene_cfg.clone() });
    let (mut scene, first) = reset(episode)?;
    let mut obs = Arc::new(first);
    let mut rows = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    for step in 0..cfg.total_steps {
        let epsilon = cfg.epsilon_at(step);
        let a = act(&online, &obs, epsilon, &mut act_rng)?;
        let (next, out) = scene.step(a)?;
        let next = Arc::new(next);
        shaper.observe(&obs, &next);
        replay.push(Transition { s: obs.clone(), a, r: out.base_reward, s_next: next.clone(), done: out.done });
        if out.done {
            episode += 1;
            let (fresh, o) = reset(episode)?;
            scene = fresh;
            obs = Arc::new(o);
        } else {
            obs = next;
        }
        let t = step + 1;
        shaper.after_step(t)?;
        if t > cfg.seed_steps && t % cfg.update_every == 0 {
            let batch = replay.sample(cfg.batch_size);
            let rewards = shaper.rewards(&batch, t)?;
            loss_sum += dql_update(&mut online, &target, &mut adam, &batch, &rewards, cfg.gamma)?;
            loss_n += 1;
            soft_update(&mut target, &online, cfg.target_tau)?;
        }
        if t % cfg.eval_every == 0 {
            let report = evaluate(&mut Greedy(&online), scene_cfg, &row_seeds)?;
            rows.push(MetricsRow {
                step: t,
                eval_return: report.mean_return,
                eval_success_percent: report.success_percent,
                loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
                epsilon: Some(epsilon),
                lambda2: shaper.lambda2(t),
            });
            (loss_sum, loss_n) = (0.0, 0);
        }
    }
    let final_eval = evaluate(&mut Greedy(&online), scene_cfg, &eval_seeds(cfg.final_eval_scenes))?;
    Ok(TrainOutcome { net: online, rows, final_eval })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub eval_every: usize,
    pub eval_scenes: usize,
    pub final_eval_scenes: usize,
    pub q_widths: QNetWidths,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            learning_rate: 1e-4,
            eval_every: 1_000,
            eval_scenes: 3,
            final_eval_scenes: 10,
            q_widths: QNetWidths::default(),
        }
    }
}

/// Cross-entropy of the flattened score grid against the demonstrated pixel,
/// one uniformly drawn pair per step. Calls `on_step(step, net)` after each
/// update. Returns the per-step losses.
pub fn bc_train<R: Rng + ?Sized>(
    data: &ExpertDataset,
    net: &mut Network,
    steps: usize,
    learning_rate: f64,
    rng: &mut R,
    mut on_step: impl FnMut(usize, &Network) -> Result<()>,
) -> Result<Vec<f64>> {
    let pairs: Vec<(&Observation, Pixel)> = data.state_action_pairs().collect();
    if pairs.is_empty() {
        return Err(AgentError::Argument("behavioral cloning needs a dataset with actions".into()));
    }
    let inputs: Vec<Vec<f64>> = pairs.iter().map(|(o, _)| obs_input(o)).collect();
    let mut adam = Adam::new(net.n_params(), learning_rate);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let i = rng.random_range(0..pairs.len());
        let (obs, a) = pairs[i];
        let (scores, cache) = net.forward(&inputs[i])?;
        let (loss, grad) = softmax_cross_entropy(&scores, a.flat(obs.width))?;
        net.zero_grad();
        net.backward_params(&cache, &grad)?;
        adam.step(net)?;
        losses.push(loss);
        on_step(step + 1, net)?;
    }
    Ok(losses)
}

/// Behavioral cloning run with periodic greedy evaluation.
pub fn train_bc(data: &ExpertDataset, scene_cfg: &SceneConfig, cfg: &BcConfig, run_seed: u64) -> Result<TrainOutcome> {
    if cfg.eval_every == 0 {
        return Err(AgentError::Argument("eval_every must be positive".into()));
    }
    let mut net = q_network(scene_cfg, cfg.q_widths, run_seed)?;
    let row_seeds = eval_seeds(cfg.eval_scenes);
    let mut rows = Vec::new();
    let mut window = Vec::new();
    let mut rng = seed::rng(run_seed, STREAM_BC);
    let mut last = 0;
    let losses = bc_train(data, &mut net, cfg.steps, cfg.learning_rate, &mut rng, |step, net| {
        if step % cfg.eval_every == 0 {
            let report = evaluate(&mut Greedy(net), scene_cfg, &row_seeds)?;
            rows.push(MetricsRow {
                step,
                eval_return: report.mean_return,
                eval_success_percent: report.success_percent,
                loss: None,
                epsilon: None,
                lambda2: None,
            });
            window.push((last, step));
            last = step;
        }
        Ok(())
    })?;
    for (row, (from, to)) in rows.iter_mut().zip(window) {
        let slice = &losses[from..to];
        row.loss = Some(slice.iter().sum::<f64>() / slice.len() as f64);
    }
    let final_eval = evaluate(&mut Greedy(&net), scene_cfg, &eval_seeds(cfg.final_eval_scenes))?;
    Ok(TrainOutcome { net, rows, final_eval })
}
