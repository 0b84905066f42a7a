use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    DatasetHeader, DatasetStep, EnvError, Episode, ExpertDataset, Pixel, Result, Scene, SceneConfig,
};
use crate::seed;

/// Highest valid parcel (leftmost among equals), aimed at its face center
/// plus rounded isotropic Gaussian noise kept inside the face.
pub fn expert_action<R: Rng + ?Sized>(scene: &Scene, noise_std: f64, rng: &mut R) -> Result<Pixel> {
    let cfg = scene.config();
    let target = scene
        .valid_picks()
        .into_iter()
        .map(|slot| scene.parcel_position(slot))
        .min()
        .ok_or(EnvError::NoValidPick)?;
    let (row, col) = target;
    let center = scene.face_center(row, col);
    if noise_std <= 0.0 {
        return Ok(center);
    }
    let normal = Normal::new(0.0, noise_std).map_err(|e| EnvError::Config(e.to_string()))?;
    let k = cfg.pixels_per_face as i64;
    let jitter = |c: usize, lo: i64, rng: &mut R| {
        let shifted = c as i64 + normal.sample(rng).round() as i64;
        shifted.clamp(lo, lo + k - 1) as usize
    };
    let u = jitter(center.u, col as i64 * k, rng);
    let v = jitter(center.v, row as i64 * k, rng);
    Ok(Pixel::new(u, v))
}

/// The scripted expert with its own noise stream.
#[derive(Debug, Clone)]
pub struct ExpertPolicy {
    pub noise_std: f64,
    rng: ChaCha8Rng,
}

impl ExpertPolicy {
    pub fn new(noise_std: f64, seed: u64) -> Self {
        Self { noise_std, rng: seed::rng(seed, 0xE4_9E47) }
    }

    pub fn act(&mut self, scene: &Scene) -> Result<Pixel> {
        expert_action(scene, self.noise_std, &mut self.rng)
    }
}

/// Pick statistics of a collection run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PickTally {
    pub picks: usize,
    pub successes: usize,
    pub total_reward: f64,
}

/// Rolls the expert for `n_episodes` scenes. Episode `e` uses scene seed
/// `config.seed + e`; the final observation of each episode carries no action.
pub fn collect_expert(
    config: &SceneConfig,
    n_episodes: usize,
    noise_std: f64,
    include_actions: bool,
) -> Result<(ExpertDataset, PickTally)> {
    if n_episodes == 0 {
        return Err(EnvError::Config("n_episodes must be at least 1".into()));
    }
    if !(noise_std >= 0.0) {
        return Err(EnvError::Config("noise_std must be non-negative".into()));
    }
    config.validate()?;
    let mut tally = PickTally::default();
    let mut episodes = Vec::with_capacity(n_episodes);
    for e in 0..n_episodes {
        let scene_cfg = SceneConfig { seed: config.seed.wrapping_add(e as u64), ..config.clone() };
        let (mut scene, mut obs) = Scene::reset(&scene_cfg)?;
        let mut expert = ExpertPolicy::new(noise_std, seed::derive(config.seed, e as u64));
        let mut steps = Vec::new();
        loop {
            if scene.is_done() {
                steps.push(DatasetStep { observation: obs, action: None, terminal: true });
                break;
            }
            let action = expert.act(&scene)?;
            let (next, outcome) = scene.step(action)?;
            tally.picks += 1;
            tally.successes += outcome.success as usize;
            tally.total_reward += outcome.base_reward;
            steps.push(DatasetStep { observation: obs, action: include_actions.then_some(action), terminal: false });
            obs = next;
        }
        episodes.push(Episode { steps });
    }
    let header = DatasetHeader { config: config.clone(), n_episodes, include_actions, seed: config.seed, noise_std };
    Ok((ExpertDataset { header, episodes }, tally))
}
