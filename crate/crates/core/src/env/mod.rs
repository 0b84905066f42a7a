//! Grid-facade analogue of the parcel-wall unloading task.
//!
//! The wall is `rows x cols` parcels seen from the front; each parcel face is
//! `k x k` pixels in the observation. A pick is a pixel. Picking a parcel that
//! is reachable removes it and pays `max(0, 1 - w * accuracy)`; picking one out
//! of order removes it for nothing and either topples or drops every parcel
//! above it in the same column. Toppled parcels are gone for good.

mod dataset;
mod expert;

pub use dataset::{read_dataset, write_dataset, DatasetHeader, DatasetStep, Episode, ExpertDataset};
pub use expert::{collect_expert, expert_action, ExpertPolicy};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("pixel ({u}, {v}) is outside the {width}x{height} observation")]
    OutOfGrid { u: usize, v: usize, width: usize, height: usize },
    #[error("episode is already done")]
    EpisodeDone,
    #[error("no valid pick remains; the episode cannot be recovered")]
    NoValidPick,
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EnvError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PickMode {
    SideOnly,
    SideAndTop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub cols: usize,
    pub rows: usize,
    pub pixels_per_face: usize,
    pub mode: PickMode,
    pub topple_prob: f64,
    pub color_jitter: f64,
    /// Accuracy weight of the pick reward.
    pub w: f64,
    /// Episode length cap; `None` means `cols * rows`.
    pub max_steps: Option<usize>,
    /// How many of the topmost present parcels of a column are side-reachable;
    /// `None` means `ceil(rows / 3)`.
    pub side_window: Option<usize>,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            cols: 6,
            rows: 7,
            pixels_per_face: 4,
            mode: PickMode::SideOnly,
            topple_prob: 0.5,
            color_jitter: 0.2,
            w: 2.0,
            max_steps: None,
            side_window: None,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cols == 0 || self.rows == 0 {
            return Err(EnvError::Config("cols and rows must be positive".into()));
        }
        if self.pixels_per_face < 2 {
            return Err(EnvError::Config("pixels_per_face must be at least 2".into()));
        }
        if self.rows * self.pixels_per_face > u16::MAX as usize || self.cols * self.pixels_per_face > u16::MAX as usize {
            return Err(EnvError::Config("observation does not fit 16-bit pixel coordinates".into()));
        }
        if !(0.0..=1.0).contains(&self.topple_prob) {
            return Err(EnvError::Config("topple_prob must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.color_jitter) {
            return Err(EnvError::Config("color_jitter must be in [0, 1]".into()));
        }
        if !(self.w >= 0.0) {
            return Err(EnvError::Config("w must be non-negative".into()));
        }
        if self.max_steps == Some(0) || self.side_window == Some(0) {
            return Err(EnvError::Config("max_steps and side_window must be positive".into()));
        }
        Ok(())
    }

    pub fn parcels(&self) -> usize {
        self.cols * self.rows
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps.unwrap_or(self.cols * self.rows)
    }

    pub fn side_window(&self) -> usize {
        self.side_window.unwrap_or(self.rows.div_ceil(3))
    }

    pub fn height(&self) -> usize {
        self.rows * self.pixels_per_face
    }

    pub fn width(&self) -> usize {
        self.cols * self.pixels_per_face
    }

    /// Rows at or below this index only accept top picks in `SideAndTop` mode.
    pub fn is_low_row(&self, row: usize) -> bool {
        2 * row >= self.rows
    }
}

/// A pick target, `u` along the width (column pixel), `v` along the height (row pixel).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pixel {
    pub u: usize,
    pub v: usize,
}

impl Pixel {
    pub fn new(u: usize, v: usize) -> Self {
        Self { u, v }
    }

    /// Row-major index into a `width`-wide grid.
    pub fn flat(&self, width: usize) -> usize {
        self.v * width + self.u
    }

    pub fn from_flat(index: usize, width: usize) -> Self {
        Self { u: index % width, v: index / width }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParcelStatus {
    Present,
    Removed,
    Fallen,
}

/// Image-like observation, `height x width x 2`, channel-last row-major.
/// Channel 0 is brightness-weighted occupancy, channel 1 the normalized
/// height of the occupying parcel.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Observation {
    pub const CHANNELS: usize = 2;

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * Self::CHANNELS] }
    }

    #[inline]
    pub fn get(&self, v: usize, u: usize, channel: usize) -> f32 {
        self.data[(v * self.width + u) * Self::CHANNELS + channel]
    }

    #[inline]
    fn set(&mut self, v: usize, u: usize, channel: usize, value: f32) {
        self.data[(v * self.width + u) * Self::CHANNELS + channel] = value;
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Channel-first `f64` copy appended to `out`, the layout the networks consume.
    pub fn extend_chw(&self, out: &mut Vec<f64>) {
        out.reserve(self.data.len());
        for c in 0..Self::CHANNELS {
            out.extend(self.data.iter().skip(c).step_by(Self::CHANNELS).map(|&x| x as f64));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PickOutcome {
    pub success: bool,
    /// Distance from the pick to the face center, in face edges.
    pub accuracy: f64,
    pub base_reward: f64,
    /// `(row, col)` positions of parcels that fell during this step.
    pub toppled: Vec<(usize, usize)>,
    pub done: bool,
}

/// `max(0, 1 - w * accuracy)` for a successful pick, zero otherwise.
pub fn pick_reward(success: bool, accuracy: f64, w: f64) -> f64 {
    if success {
        (1.0 - w * accuracy).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Mutable wall state. Parcels are identified by their starting slot
/// `row * cols + col`; `row_of` tracks where each one currently sits.
#[derive(Debug, Clone)]
pub struct Scene {
    config: SceneConfig,
    status: Vec<ParcelStatus>,
    row_of: Vec<usize>,
    brightness: Vec<f64>,
    step_count: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl Scene {
    /// A full wall with per-parcel brightness drawn from the config seed.
    pub fn reset(config: &SceneConfig) -> Result<(Scene, Observation)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = config.parcels();
        let brightness = (0..n)
            .map(|_| {
                let jitter = if config.color_jitter > 0.0 {
                    rng.random_range(-config.color_jitter..=config.color_jitter)
                } else {
                    0.0
                };
                (0.5 + jitter).clamp(0.0, 1.0)
            })
            .collect();
        let scene = Scene {
            config: config.clone(),
            status: vec![ParcelStatus::Present; n],
            row_of: (0..n).map(|slot| slot / config.cols).collect(),
            brightness,
            step_count: 0,
            done: false,
            rng,
        };
        let obs = scene.render();
        Ok((scene, obs))
    }

    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn present_count(&self) -> usize {
        self.status.iter().filter(|&&s| s == ParcelStatus::Present).count()
    }

    pub fn fallen_count(&self) -> usize {
        self.status.iter().filter(|&&s| s == ParcelStatus::Fallen).count()
    }

    pub fn parcel_status(&self, slot: usize) -> ParcelStatus {
        self.status[slot]
    }

    /// Current `(row, col)` of a parcel slot.
    pub fn parcel_position(&self, slot: usize) -> (usize, usize) {
        (self.row_of[slot], slot % self.config.cols)
    }

    pub fn brightness(&self, slot: usize) -> f64 {
        self.brightness[slot]
    }

    /// Slot of the present parcel at a grid position.
    pub fn present_at(&self, row: usize, col: usize) -> Option<usize> {
        (0..self.config.rows)
            .map(|r| r * self.config.cols + col)
            .find(|&slot| self.status[slot] == ParcelStatus::Present && self.row_of[slot] == row)
    }

    /// Present parcels in a column, topmost first.
    fn column_stack(&self, col: usize) -> Vec<usize> {
        let mut slots: Vec<usize> = (0..self.config.rows)
            .map(|r| r * self.config.cols + col)
            .filter(|&slot| self.status[slot] == ParcelStatus::Present)
            .collect();
        slots.sort_by_key(|&slot| self.row_of[slot]);
        slots
    }

    /// Whether a present parcel can be picked without compromising the wall.
    pub fn is_valid_pick(&self, slot: usize) -> bool {
        if self.status[slot] != ParcelStatus::Present {
            return false;
        }
        let (row, col) = self.parcel_position(slot);
        let rank = self.column_stack(col).iter().position(|&s| s == slot).expect("present parcel is stacked");
        match self.config.mode {
            PickMode::SideAndTop if self.config.is_low_row(row) => rank == 0,
            _ => rank < self.config.side_window(),
        }
    }

    /// Present parcels that are currently valid picks.
    pub fn valid_picks(&self) -> Vec<usize> {
        (0..self.config.parcels()).filter(|&slot| self.is_valid_pick(slot)).collect()
    }

    /// Integer pixel at the center of a grid cell's face.
    pub fn face_center(&self, row: usize, col: usize) -> Pixel {
        let k = self.config.pixels_per_face;
        Pixel::new(col * k + k / 2, row * k + k / 2)
    }

    pub fn step(&mut self, action: Pixel) -> Result<(Observation, PickOutcome)> {
        let (h, w) = (self.config.height(), self.config.width());
        if action.u >= w || action.v >= h {
            return Err(EnvError::OutOfGrid { u: action.u, v: action.v, width: w, height: h });
        }
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        self.step_count += 1;
        let k = self.config.pixels_per_face;
        let (row, col) = (action.v / k, action.u / k);
        let mut outcome = PickOutcome { success: false, accuracy: 0.0, base_reward: 0.0, toppled: Vec::new(), done: false };
        if let Some(slot) = self.present_at(row, col) {
            let center = self.face_center(row, col);
            let du = action.u as f64 - center.u as f64;
            let dv = action.v as f64 - center.v as f64;
            outcome.accuracy = (du * du + dv * dv).sqrt() / k as f64;
            if self.is_valid_pick(slot) {
                outcome.success = true;
                self.status[slot] = ParcelStatus::Removed;
            } else {
                self.status[slot] = ParcelStatus::Removed;
                // everything above the extracted parcel either falls or drops one row,
                // nearest first so the draw order is fixed
                let mut above: Vec<usize> =
                    self.column_stack(col).into_iter().filter(|&s| self.row_of[s] < row).collect();
                above.reverse();
                for s in above {
                    if self.rng.random_bool(self.config.topple_prob) {
                        self.status[s] = ParcelStatus::Fallen;
                        outcome.toppled.push((self.row_of[s], col));
                    } else {
                        self.row_of[s] += 1;
                    }
                }
            }
            outcome.base_reward = pick_reward(outcome.success, outcome.accuracy, self.config.w);
        }
        self.done = self.present_count() == 0 || self.step_count >= self.config.max_steps();
        outcome.done = self.done;
        Ok((self.render(), outcome))
    }

    /// Paints the wall. Present faces carry their brightness and height; each
    /// column's fallen parcels leave a half-brightness checkerboard over the
    /// bottom cell wherever no present face covers it.
    pub fn render(&self) -> Observation {
        let cfg = &self.config;
        let k = cfg.pixels_per_face;
        let mut obs = Observation::zeros(cfg.height(), cfg.width());
        for col in 0..cfg.cols {
            let fallen: Vec<f64> = (0..cfg.rows)
                .map(|r| r * cfg.cols + col)
                .filter(|&slot| self.status[slot] == ParcelStatus::Fallen)
                .map(|slot| self.brightness[slot])
                .collect();
            if fallen.is_empty() {
                continue;
            }
            let level = (0.5 * fallen.iter().sum::<f64>() / fallen.len() as f64) as f32;
            let v0 = (cfg.rows - 1) * k;
            for dv in 0..k {
                for du in 0..k {
                    if (dv + du) % 2 == 0 {
                        obs.set(v0 + dv, col * k + du, 0, level);
                    }
                }
            }
        }
        for slot in 0..cfg.parcels() {
            if self.status[slot] != ParcelStatus::Present {
                continue;
            }
            let (row, col) = self.parcel_position(slot);
            let shade = self.brightness[slot] as f32;
            let height = ((cfg.rows - row) as f64 / cfg.rows as f64) as f32;
            for dv in 0..k {
                for du in 0..k {
                    obs.set(row * k + dv, col * k + du, 0, shade);
                    obs.set(row * k + dv, col * k + du, 1, height);
                }
            }
        }
        obs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SceneConfig {
        SceneConfig { seed: 3, ..Default::default() }
    }

    #[test]
    fn reset_builds_full_wall() {
        let (scene, obs) = Scene::reset(&cfg()).unwrap();
        assert_eq!(scene.present_count(), 42);
        assert_eq!((obs.height, obs.width), (28, 24));
        assert_eq!(obs.data.len(), 28 * 24 * 2);
        let nonzero = (0..28).flat_map(|v| (0..24).map(move |u| (v, u))).filter(|&(v, u)| obs.get(v, u, 0) != 0.0).count();
        assert_eq!(nonzero, 42 * 16);
        assert_eq!(scene.render(), obs);
    }

    #[test]
    fn zero_jitter_gives_uniform_brightness() {
        let (scene, _) = Scene::reset(&SceneConfig { color_jitter: 0.0, ..cfg() }).unwrap();
        assert!((0..42).all(|s| scene.brightness(s) == 0.5));
    }

    #[test]
    fn reset_is_deterministic() {
        let (_, a) = Scene::reset(&cfg()).unwrap();
        let (_, b) = Scene::reset(&cfg()).unwrap();
        assert_eq!(a.data, b.data);
        let (_, c) = Scene::reset(&SceneConfig { seed: 4, ..cfg() }).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn centered_valid_pick_pays_one() {
        let (mut scene, _) = Scene::reset(&cfg()).unwrap();
        let (_, out) = scene.step(scene.face_center(0, 2)).unwrap();
        assert!(out.success);
        assert_eq!(out.accuracy, 0.0);
        assert_eq!(out.base_reward, 1.0);
        assert_eq!(scene.present_count(), 41);
    }

    #[test]
    fn half_edge_offset_pays_zero() {
        let (mut scene, _) = Scene::reset(&cfg()).unwrap();
        let c = scene.face_center(0, 1);
        let (_, out) = scene.step(Pixel::new(c.u - 2, c.v)).unwrap();
        assert!(out.success);
        assert_eq!(out.accuracy, 0.5);
        assert_eq!(out.base_reward, 0.0);
    }

    #[test]
    fn out_of_order_pick_topples_everything_above() {
        let (mut scene, _) = Scene::reset(&SceneConfig { topple_prob: 1.0, ..cfg() }).unwrap();
        let (obs, out) = scene.step(scene.face_center(3, 0)).unwrap();
        assert!(!out.success);
        assert_eq!(out.base_reward, 0.0);
        assert_eq!(out.toppled.len(), 3);
        assert_eq!(scene.fallen_count(), 3);
        assert_eq!(scene.present_count(), 38);
        // rows 0..=3 of column 0 are now empty; the bottom cell still shows its own face
        for v in 0..16 {
            for u in 0..4 {
                assert_eq!(obs.get(v, u, 0), 0.0);
            }
        }
    }

    #[test]
    fn out_of_order_pick_without_topple_drops_the_stack() {
        let (mut scene, _) = Scene::reset(&SceneConfig { topple_prob: 0.0, ..cfg() }).unwrap();
        let (_, out) = scene.step(scene.face_center(4, 1)).unwrap();
        assert!(!out.success && out.toppled.is_empty());
        assert_eq!(scene.parcel_position(1), (1, 1));
        assert_eq!(scene.parcel_position(3 * 6 + 1), (4, 1));
        assert!(scene.present_at(0, 1).is_none());
    }

    #[test]
    fn empty_cell_pick_is_a_no_op() {
        let (mut scene, _) = Scene::reset(&cfg()).unwrap();
        let target = scene.face_center(0, 0);
        scene.step(target).unwrap();
        let before = scene.render();
        let (obs, out) = scene.step(target).unwrap();
        assert!(!out.success);
        assert_eq!(out.base_reward, 0.0);
        assert_eq!(obs, before);
        assert_eq!(scene.step_count(), 2);
    }

    #[test]
    fn step_errors() {
        let (mut scene, _) = Scene::reset(&SceneConfig { max_steps: Some(1), ..cfg() }).unwrap();
        assert!(matches!(scene.step(Pixel::new(24, 0)), Err(EnvError::OutOfGrid { .. })));
        let (_, out) = scene.step(Pixel::new(0, 0)).unwrap();
        assert!(out.done);
        assert!(matches!(scene.step(Pixel::new(0, 0)), Err(EnvError::EpisodeDone)));
    }

    #[test]
    fn empty_scene_renders_black() {
        let (mut scene, _) = Scene::reset(&SceneConfig { mode: PickMode::SideOnly, ..cfg() }).unwrap();
        for row in 0..7 {
            for col in 0..6 {
                scene.step(scene.face_center(row, col)).unwrap();
            }
        }
        assert!(scene.is_done());
        let obs = scene.render();
        assert!(obs.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn side_and_top_restricts_low_rows() {
        let c = SceneConfig { mode: PickMode::SideAndTop, side_window: Some(7), ..cfg() };
        let (mut scene, _) = Scene::reset(&c).unwrap();
        // row 3 is above the threshold, row 4 below it
        assert!(scene.is_valid_pick(3 * 6));
        assert!(!scene.is_valid_pick(4 * 6));
        for row in 0..4 {
            scene.step(scene.face_center(row, 0)).unwrap();
        }
        assert!(scene.is_valid_pick(4 * 6));
        assert!(!scene.is_valid_pick(5 * 6));
    }

    #[test]
    fn config_validation() {
        assert!(SceneConfig { pixels_per_face: 1, ..cfg() }.validate().is_err());
        assert!(SceneConfig { topple_prob: 1.5, ..cfg() }.validate().is_err());
        assert!(SceneConfig { w: -1.0, ..cfg() }.validate().is_err());
        assert!(serde_json::from_str::<SceneConfig>(r#"{"cols": 3, "bogus": 1}"#).is_err());
        let parsed: SceneConfig = serde_json::from_str(r#"{"cols": 3}"#).unwrap();
        assert_eq!(parsed.rows, 7);
    }
}
