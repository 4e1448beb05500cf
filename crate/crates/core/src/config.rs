//! Every tunable constant of the pipeline in one serializable tree.
//!
//! Missing keys take their defaults, unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::camera::{ActionSpace, CameraModel, DEFAULT_PHIS, DEFAULT_THETAS};
use crate::cloud::Vec3;
use crate::datagen::SceneSpec;
use crate::error::{Error, Result};
use crate::inpaint::InpainterKind;
use crate::metrics::{DEFAULT_EDGES, DEFAULT_RADII};
use crate::volume::{MorphologicalCompleter, OccupancyParams};
use crate::voxel::GridGeometry;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub camera: CameraModel,
    pub actions: ActionConfig,
    pub render: RenderConfig,
    pub volume: VolumeConfig,
    pub episode: EpisodeConfig,
    pub learner: LearnerConfig,
    pub scene: SceneSpec,
    pub data: DataConfig,
    pub metrics: MetricsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionConfig {
    pub radius_m: f64,
    pub theta_deg: Vec<f64>,
    pub phi_deg: Vec<f64>,
}

impl Default for ActionConfig {
    fn default() -> Self {
        Self {
            radius_m: 3.0,
            theta_deg: DEFAULT_THETAS.to_vec(),
            phi_deg: DEFAULT_PHIS.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Half-width of the square splat, pixels.
    pub splat_radius: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            splat_radius: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompleterKind {
    Identity,
    Morphological,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeConfig {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: [f64; 3],
    pub temperature: f64,
    pub completer: CompleterKind,
    pub occupancy: OccupancyParams,
    pub morphology: MorphologicalCompleter,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self {
            dims: [60, 36, 60],
            voxel_size: 0.08,
            origin: [-2.4, -0.22, -2.4],
            temperature: 1.0,
            completer: CompleterKind::Morphological,
            occupancy: OccupancyParams::default(),
            morphology: MorphologicalCompleter::default(),
        }
    }
}

impl VolumeConfig {
    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::new(self.voxel_size, Vec3::from(self.origin), self.dims)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Episodes end once `Area^h(P_i) / Area^h(P_0)` drops below this.
    pub termination_ratio: f64,
    pub max_steps: usize,
    /// Forbid re-choosing a view (ablation; off by default).
    pub mask_visited: bool,
    pub inpainter: InpainterKind,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 1.0,
            gamma: 0.1,
            termination_ratio: 0.07,
            max_steps: 20,
            mask_visited: false,
            inpainter: InpainterKind::VolumeGuided,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub discount: f64,
    pub workers: usize,
    pub episodes: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub grad_clip: f64,
    pub q_lr: f64,
    pub q_discount: f64,
    pub target_refresh: usize,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Environment steps over which ε anneals linearly.
    pub epsilon_steps: usize,
    pub train_scenes: usize,
    pub train_first_seed: u64,
    pub inpainter: InpainterKind,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            discount: 0.9,
            workers: 3,
            episodes: 100,
            actor_lr: 1e-2,
            critic_lr: 1e-2,
            grad_clip: 10.0,
            q_lr: 1e-2,
            q_discount: 0.9,
            target_refresh: 50,
            replay_capacity: 10_000,
            batch_size: 32,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_steps: 1500,
            train_scenes: 20,
            train_first_seed: 100,
            inpainter: InpainterKind::Oracle,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scenes: usize,
    pub first_seed: u64,
    pub depth_noise_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 10,
            first_seed: 0,
            depth_noise_sigma: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub radii: Vec<f64>,
    pub edges: Vec<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            radii: DEFAULT_RADII.to_vec(),
            edges: DEFAULT_EDGES.to_vec(),
        }
    }
}

fn check(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(what()))
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.action_space()?;
        self.volume.geometry().map_err(|e| Error::Config(e.to_string()))?;
        self.scene.validate()?;
        let v = &self.volume;
        check(v.temperature > 0.0 && v.temperature.is_finite(), || "volume.temperature must be positive".into())?;
        let o = &v.occupancy;
        check((0.0..=1.0).contains(&o.occupied_v) && (0.0..=1.0).contains(&o.free_v), || {
            "volume.occupancy values must lie in [0, 1]".into()
        })?;
        let e = &self.episode;
        for (name, w) in [("alpha", e.alpha), ("beta", e.beta), ("gamma", e.gamma)] {
            check(w.is_finite() && w >= 0.0, || format!("episode.{name} must be a non-negative number"))?;
        }
        check(e.termination_ratio > 0.0 && e.termination_ratio < 1.0, || {
            "episode.termination_ratio must lie in (0, 1)".into()
        })?;
        check(e.max_steps >= 1, || "episode.max_steps must be at least 1".into())?;
        let l = &self.learner;
        check((0.0..1.0).contains(&l.discount), || "learner.discount must lie in [0, 1)".into())?;
        check((0.0..1.0).contains(&l.q_discount), || "learner.q_discount must lie in [0, 1)".into())?;
        check(l.workers >= 1, || "learner.workers must be at least 1".into())?;
        for (name, lr) in [("actor_lr", l.actor_lr), ("critic_lr", l.critic_lr), ("q_lr", l.q_lr)] {
            check(lr > 0.0 && lr.is_finite(), || format!("learner.{name} must be positive"))?;
        }
        check(l.grad_clip > 0.0, || "learner.grad_clip must be positive".into())?;
        check(l.batch_size >= 1 && l.replay_capacity >= l.batch_size, || {
            "learner.replay_capacity must be at least batch_size >= 1".into()
        })?;
        check(l.target_refresh >= 1, || "learner.target_refresh must be at least 1".into())?;
        check(
            (0.0..=1.0).contains(&l.epsilon_start) && (0.0..=1.0).contains(&l.epsilon_end),
            || "learner epsilons must lie in [0, 1]".into(),
        )?;
        check(l.train_scenes >= 1, || "learner.train_scenes must be at least 1".into())?;
        check(self.data.depth_noise_sigma >= 0.0, || "data.depth_noise_sigma must be non-negative".into())?;
        check(self.render.splat_radius <= 8, || "render.splat_radius above 8 is not supported".into())?;
        check(
            self.metrics.radii.iter().all(|&r| r > 0.0) && self.metrics.edges.iter().all(|&e| e > 0.0),
            || "metric radii and edges must be positive".into(),
        )?;
        Ok(())
    }

    pub fn action_space(&self) -> Result<ActionSpace> {
        let a = &self.actions;
        ActionSpace::with_angles(a.radius_m, self.scene.room().center(), &a.theta_deg, &a.phi_deg)
            .map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.action_space().unwrap().len(), 20);
        assert_eq!(cfg.volume.geometry().unwrap(), crate::volume::default_geometry());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: Config = serde_json::from_str(r#"{"episode": {"alpha": 0.5}, "camera": {"far_m": 5.0}}"#).unwrap();
        assert_eq!(cfg.episode.alpha, 0.5);
        assert_eq!(cfg.episode.beta, 1.0);
        assert_eq!(cfg.camera.far, 5.0);
        assert_eq!(cfg.camera.width, 640);
    }

    #[test]
    fn unknown_keys_and_bad_labels_rejected() {
        assert!(serde_json::from_str::<Config>(r#"{"episode": {"alpah": 0.5}}"#).is_err());
        let mut cfg = Config::default();
        cfg.scene.furniture_labels = vec![5, 12];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.scene.furniture_labels = vec![0];
        assert!(cfg.validate().is_err());
    }
}
