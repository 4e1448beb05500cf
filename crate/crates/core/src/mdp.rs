//! The progressive-completion environment.
//!
//! The state is the accumulated cloud `P_i`. A step renders `P_i` under the
//! chosen action view, inpaints the holes Ω of that view, back-projects the
//! filled pixels and appends them to the cloud.
//!
//! `Area^h(P)` counts hole pixels over all action views. The hole region of
//! every view is the projection of `bounds(P_0)` and stays fixed for the
//! whole episode, so adding points can only shrink the area. Per-view
//! z-buffers are kept between steps and only new points are splatted.
//! Hole pixels an inpainter leaves empty (no surface within the depth
//! range) leave the region of that view for good.
//!
//! Points outside the input frustum still cover pixels, but the completion
//! and `r_pcacc` only look at the part inside it, where the ground truth
//! lives.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{ActionSpace, CameraModel, Pose, Viewpoint};
use crate::cloud::{LabeledPointCloud, Vec3};
use crate::config::{CompleterKind, Config, EpisodeConfig};
use crate::datagen::{
    add_depth_noise, episode_ground_truth, frustum_crop, generate_scene_with_layout, input_viewpoint, synth_input_view, SceneLayout,
    SceneSpec,
};
use crate::error::{Error, Result};
use crate::inpaint::{
    inpaint_view, DiffusionInpainter, Guidance, InpaintRequest, InpainterKind, Inpainter, OracleInpainter,
    VolumeGuidedInpainter,
};
use crate::label::UNKNOWN_CODE;
use crate::render::{backproject_pose, hole_region_mask, ViewMaps, ZBuffer};
use crate::spatial::KdTree;
use crate::volume::{build_occupancy, project_pixels, MorphologicalCompleter, OccupancyParams, OccupancyVolume, VolumeCompleter};
use crate::voxel::GridGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Inference,
}

/// Everything an environment needs besides the scene itself.
#[derive(Clone, Debug)]
pub struct EnvSettings {
    pub camera: CameraModel,
    pub actions: ActionSpace,
    pub splat_radius: usize,
    pub geometry: GridGeometry,
    pub occupancy: OccupancyParams,
    pub completer: Option<MorphologicalCompleter>,
    pub temperature: f64,
    pub episode: EpisodeConfig,
}

impl EnvSettings {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            camera: cfg.camera,
            actions: cfg.action_space()?,
            splat_radius: cfg.render.splat_radius,
            geometry: cfg.volume.geometry()?,
            occupancy: cfg.volume.occupancy,
            completer: match cfg.volume.completer {
                CompleterKind::Identity => None,
                CompleterKind::Morphological => Some(cfg.volume.morphology),
            },
            temperature: cfg.volume.temperature,
            episode: cfg.episode.clone(),
        })
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    /// Occupancy of `cloud` followed by the configured completer.
    pub fn completed_volume(&self, cloud: &LabeledPointCloud) -> Result<OccupancyVolume> {
        let vol = build_occupancy(cloud, &self.geometry, &self.occupancy)?;
        Ok(match &self.completer {
            Some(c) => c.complete(&vol),
            None => vol,
        })
    }
}

/// Ground truth for one scene: the completion target and the analytic
/// layout from which per-view ground-truth maps are rendered.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub cloud: LabeledPointCloud,
    pub layout: SceneLayout,
    tree: KdTree,
}

impl GroundTruth {
    pub fn new(cloud: LabeledPointCloud, layout: SceneLayout) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::InvalidInput("empty ground truth".into()));
        }
        let tree = KdTree::from_positions(cloud.positions());
        Ok(Self { cloud, layout, tree })
    }

    pub fn tree(&self) -> &KdTree {
        &self.tree
    }

    /// Ground-truth maps of `view`; no pixel is marked as a hole.
    pub fn maps(&self, view: &Viewpoint, camera: &CameraModel) -> ViewMaps {
        self.layout.render(view, camera)
    }
}

/// Posed single-view maps that start an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeInput {
    pub maps: ViewMaps,
    pub view: Viewpoint,
}

/// A generated scene with its input view and ground truth.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub spec: SceneSpec,
    pub input: EpisodeInput,
    pub gt: Arc<GroundTruth>,
}

impl Scenario {
    pub fn generate(spec: &SceneSpec, cfg: &Config) -> Result<Self> {
        let (layout, scene) = generate_scene_with_layout(spec)?;
        let camera = &cfg.camera;
        let view = input_viewpoint(&spec.room(), cfg.actions.radius_m);
        let mut maps = synth_input_view(&scene, &view, camera, cfg.render.splat_radius)?;
        if cfg.data.depth_noise_sigma > 0.0 {
            maps.depth = add_depth_noise(&maps.depth, cfg.data.depth_noise_sigma, spec.seed, camera.near, camera.far)?;
        }
        let actions = cfg.action_space()?;
        let gt_cloud = episode_ground_truth(&layout, &scene, &view, &actions, camera);
        Ok(Self {
            spec: spec.clone(),
            input: EpisodeInput { maps, view },
            gt: Arc::new(GroundTruth::new(gt_cloud, layout)?),
        })
    }

    /// `n` scenarios from consecutive seeds starting at `first_seed`. Seeds
    /// whose furniture cannot be placed are skipped; at most `4 n` seeds are
    /// tried.
    pub fn suite(cfg: &Config, first_seed: u64, n: usize) -> Result<Vec<Self>> {
        let mut out = Vec::with_capacity(n);
        for seed in (first_seed..).take(4 * n) {
            if out.len() == n {
                break;
            }
            match Self::generate(&cfg.scene.with_seed(seed), cfg) {
                Ok(s) => out.push(s),
                Err(Error::Generation(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        if out.len() < n {
            return Err(Error::Generation(format!("only {} of {n} scenes from seed {first_seed} could be generated", out.len())));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acc: f64,
    pub r_pcacc: f64,
    pub r_hole: f64,
    pub r_total: f64,
    pub terminal_bonus: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl From<&EpisodeConfig> for RewardWeights {
    fn from(e: &EpisodeConfig) -> Self {
        Self {
            alpha: e.alpha,
            beta: e.beta,
            gamma: e.gamma,
        }
    }
}

/// Mean hole error over Ω, negated. Depth errors are divided by `far`,
/// color errors are averaged over the three channels and labels contribute
/// a 0/1 mismatch. Pixels left empty count as depth 0, black and unknown.
pub fn reward_acc(pred: &ViewMaps, gt: &ViewMaps, omega: &[bool], far: f64) -> Result<f64> {
    if !pred.same_geometry(gt) || omega.len() != pred.len() {
        return Err(Error::GeometryMismatch("reward maps differ in size".into()));
    }
    let mut n = 0usize;
    let (mut ed, mut ec, mut es) = (0.0, 0.0, 0.0);
    for q in (0..omega.len()).filter(|&q| omega[q]) {
        n += 1;
        let empty = |m: &ViewMaps| m.hole[q] || m.depth[q] <= 0.0;
        let (dp, cp, sp) = if empty(pred) {
            (0.0, [0.0; 3], UNKNOWN_CODE)
        } else {
            (pred.depth[q] as f64, pred.color[q], pred.seg[q])
        };
        let (dg, cg, sg) = if empty(gt) {
            (0.0, [0.0; 3], UNKNOWN_CODE)
        } else {
            (gt.depth[q] as f64, gt.color[q], gt.seg[q])
        };
        ed += ((dp - dg).abs() / far).min(1.0);
        ec += (0..3).map(|c| (cp[c] - cg[c]).abs() as f64).sum::<f64>() / 3.0;
        es += f64::from(u8::from(sp != sg));
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(-(ed + ec + es) / (3.0 * n as f64))
}

/// Share of the original hole area filled by this step, shifted by -1.
pub fn reward_hole(area_prev: usize, area_now: usize, area0: usize) -> Result<f64> {
    if area0 == 0 {
        return Err(Error::UndefinedMetric("hole reward with zero initial area"));
    }
    if area_now > area_prev {
        return Err(Error::InvalidInput(format!("hole area grew from {area_prev} to {area_now}")));
    }
    Ok((area_prev - area_now) as f64 / area0 as f64 - 1.0)
}

/// Fraction of new points labeled like their nearest ground-truth point;
/// 1 when there are no new points.
pub fn reward_pcacc(new_points: &LabeledPointCloud, gt: &GroundTruth) -> f64 {
    if new_points.is_empty() {
        return 1.0;
    }
    let queries: Vec<Vec3> = new_points.positions().copied().collect();
    let nn = gt.tree.nearest_all(&queries);
    let hits = new_points
        .iter()
        .zip(&nn)
        .filter(|(p, (k, _))| p.label == gt.cloud.points()[*k].label)
        .count();
    hits as f64 / new_points.len() as f64
}

pub fn reward_total(w: &RewardWeights, r_acc: f64, r_pcacc: f64, r_hole: f64) -> f64 {
    w.alpha * r_acc + w.beta * (r_pcacc - 1.0) + w.gamma * r_hole
}

/// One line of an episode trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub action: usize,
    pub omega: usize,
    pub r_acc: Option<f64>,
    pub r_pcacc: Option<f64>,
    pub r_hole: Option<f64>,
    pub r_total: Option<f64>,
    pub area_now: usize,
}

impl TraceRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace records serialize")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub step: usize,
    pub action: usize,
    /// |Ω| of the rendered view.
    pub omega: usize,
    pub new_points: usize,
    pub unfillable: usize,
    pub area_prev: usize,
    pub area_now: usize,
    pub rewards: Option<RewardBreakdown>,
    pub terminal: bool,
    pub done: bool,
}

impl StepOutcome {
    pub fn rewards(&self) -> Result<&RewardBreakdown> {
        self.rewards.as_ref().ok_or(Error::InferenceMode)
    }

    pub fn trace(&self) -> TraceRecord {
        let r = self.rewards.as_ref();
        TraceRecord {
            step: self.step,
            action: self.action,
            omega: self.omega,
            r_acc: r.map(|r| r.r_acc),
            r_pcacc: r.map(|r| r.r_pcacc),
            r_hole: r.map(|r| r.r_hole),
            r_total: r.map(|r| r.r_total),
            area_now: self.area_now,
        }
    }
}

#[derive(Clone, Debug)]
struct ViewState {
    pose: Pose,
    region: Vec<bool>,
    zb: ZBuffer,
    holes: usize,
}

impl ViewState {
    fn hole_pixels(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.region.len()).filter(|&q| self.region[q] && !self.zb.is_covered(q))
    }
}

/// One episode. Single-threaded from the caller's point of view; many can
/// run side by side.
#[derive(Clone, Debug)]
pub struct Environment {
    settings: Arc<EnvSettings>,
    gt: Option<Arc<GroundTruth>>,
    mode: Mode,
    inpainter: InpainterKind,
    input_view: Viewpoint,
    cloud: LabeledPointCloud,
    step: usize,
    visited: Vec<bool>,
    views: Vec<ViewState>,
    holes0: Vec<usize>,
    area0: usize,
    area: usize,
    done: bool,
    terminal: bool,
    volume: Option<Arc<OccupancyVolume>>,
}

impl Environment {
    /// Back-projects every non-empty input pixel into `P_0` and measures
    /// the initial hole area.
    pub fn reset(
        settings: Arc<EnvSettings>,
        input: &EpisodeInput,
        gt: Option<Arc<GroundTruth>>,
        mode: Mode,
        inpainter: InpainterKind,
    ) -> Result<Self> {
        if gt.is_none() {
            if mode == Mode::Train {
                return Err(Error::Config("training mode requires ground truth".into()));
            }
            if inpainter == InpainterKind::Oracle {
                return Err(Error::Config("the oracle inpainter requires ground truth".into()));
            }
        }
        let camera = &settings.camera;
        let maps = &input.maps;
        if maps.width != camera.width || maps.height != camera.height {
            return Err(Error::GeometryMismatch("input maps do not match the camera".into()));
        }
        let mask: Vec<bool> = (0..maps.len()).map(|q| maps.depth[q] > 0.0).collect();
        let cloud = backproject_pose(maps, &mask, &input.view.pose(), camera).cloud;
        if cloud.is_empty() {
            return Err(Error::InvalidInput("input maps hold no points".into()));
        }
        let region = cloud.bounds();
        let r = settings.splat_radius;
        let views: Vec<ViewState> = settings
            .actions
            .views()
            .par_iter()
            .map(|v| {
                let pose = v.pose();
                let region = hole_region_mask(region.as_ref(), &pose, camera);
                let mut zb = ZBuffer::new(camera);
                zb.splat(camera, &pose, r, cloud.points(), 0, |_| {});
                let mut vs = ViewState { pose, region, zb, holes: 0 };
                vs.holes = vs.hole_pixels().count();
                vs
            })
            .collect();
        let holes0: Vec<usize> = views.iter().map(|v| v.holes).collect();
        let area0 = holes0.iter().sum();
        Ok(Self {
            visited: vec![false; settings.num_actions()],
            settings,
            gt,
            mode,
            inpainter,
            input_view: input.view,
            cloud,
            step: 0,
            views,
            holes0,
            area0,
            area: area0,
            done: area0 == 0,
            terminal: area0 == 0,
            volume: None,
        })
    }

    pub fn settings(&self) -> &EnvSettings {
        &self.settings
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn cloud(&self) -> &LabeledPointCloud {
        &self.cloud
    }

    /// The part of the cloud inside the input view frustum, which is the
    /// domain of the ground truth. Points outside it still cover pixels
    /// when views are rendered.
    pub fn completion(&self) -> LabeledPointCloud {
        frustum_crop(&self.cloud, &self.input_view, &self.settings.camera)
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn visited(&self) -> &[bool] {
        &self.visited
    }

    pub fn area0(&self) -> usize {
        self.area0
    }

    pub fn area(&self) -> usize {
        self.area
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    /// Current hole-pixel count of every action view.
    pub fn hole_counts(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.holes).collect()
    }

    /// Hole-pixel count of every action view at reset.
    pub fn initial_hole_counts(&self) -> &[usize] {
        &self.holes0
    }

    /// Hole pixels of the view of `action` (one-based).
    pub fn hole_pixels(&self, action: usize) -> Result<Vec<usize>> {
        self.settings.actions.view(action)?;
        Ok(self.views[action - 1].hole_pixels().collect())
    }

    pub fn pose(&self, action: usize) -> Result<Pose> {
        Ok(self.settings.actions.view(action)?.pose())
    }

    /// Completed occupancy volume of the current cloud, cached until the
    /// cloud changes.
    pub fn completed_volume(&mut self) -> Result<Arc<OccupancyVolume>> {
        if let Some(v) = &self.volume {
            return Ok(v.clone());
        }
        let v = Arc::new(self.settings.completed_volume(&self.cloud)?);
        self.volume = Some(v.clone());
        Ok(v)
    }

    /// Current rendering of the view of `action`, holes marked.
    pub fn render(&self, action: usize) -> Result<ViewMaps> {
        self.settings.actions.view(action)?;
        let vs = &self.views[action - 1];
        Ok(vs.zb.to_maps(self.cloud.points(), &vs.region))
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::InvalidInput("episode already finished".into()));
        }
        let view = *self.settings.actions.view(action)?;
        if self.settings.episode.mask_visited && self.visited[action - 1] {
            return Err(Error::InvalidInput(format!("action {action} already visited")));
        }
        let settings = self.settings.clone();
        let camera = &settings.camera;
        let pose = self.views[action - 1].pose;
        let maps = self.render(action)?;
        let omega: Vec<usize> = (0..maps.len()).filter(|&q| maps.hole[q]).collect();

        let guidance = if self.inpainter.needs_guidance() && !omega.is_empty() {
            let vol = self.completed_volume()?;
            let values = project_pixels(&vol, &pose, camera, settings.temperature, &omega)?;
            Some(Guidance::at_pixels(maps.width, maps.height, &omega, values))
        } else {
            None
        };
        let gt_maps = match (&self.gt, self.inpainter, self.mode) {
            (Some(gt), InpainterKind::Oracle, _) | (Some(gt), _, Mode::Train) => {
                Some(gt.maps(&view, camera))
            }
            _ => None,
        };
        let inpainter: Box<dyn Inpainter> = match self.inpainter {
            InpainterKind::Oracle => Box::new(OracleInpainter::new(gt_maps.clone().expect("checked at reset"))),
            InpainterKind::Diffusion => Box::new(DiffusionInpainter),
            InpainterKind::VolumeGuided => Box::new(VolumeGuidedInpainter::default()),
        };
        let request = InpaintRequest {
            maps: &maps,
            guidance: guidance.as_ref(),
            near: camera.near,
            far: camera.far,
        };
        // Ω pixels the inpainter leaves empty have no surface within the
        // depth range; they stop counting as holes of this view.
        let (filled_maps, new_cloud, unfillable, empty) = match inpaint_view(&request, inpainter.as_ref()) {
            Ok(out) => {
                let bp = backproject_pose(&out.maps, &out.filled, &pose, camera);
                let empty: Vec<usize> = omega.iter().copied().filter(|&q| !out.filled[q]).collect();
                (out.maps, bp.cloud, out.unfillable + bp.skipped, empty)
            }
            Err(Error::Unfillable) => (maps.clone(), LabeledPointCloud::new(), omega.len(), Vec::new()),
            Err(e) => return Err(e),
        };

        let first = self.cloud.len();
        let r = settings.splat_radius;
        self.views.par_iter_mut().for_each(|vs| {
            let ViewState { pose, region, zb, holes } = vs;
            zb.splat(camera, pose, r, new_cloud.points(), first, |q| {
                if region[q] {
                    *holes -= 1;
                }
            });
        });
        let vs = &mut self.views[action - 1];
        for q in empty {
            if vs.region[q] && !vs.zb.is_covered(q) {
                vs.region[q] = false;
                vs.holes -= 1;
            }
        }
        self.cloud.append(&new_cloud);
        if !new_cloud.is_empty() {
            self.volume = None;
        }
        let area_prev = self.area;
        let area_now: usize = self.views.iter().map(|v| v.holes).sum();
        assert!(area_now <= area_prev, "hole area grew from {area_prev} to {area_now}");
        self.area = area_now;
        self.visited[action - 1] = true;
        self.step += 1;
        self.terminal = (area_now as f64) < settings.episode.termination_ratio * self.area0 as f64;
        self.done = self.terminal || self.step >= settings.episode.max_steps;

        let rewards = match (self.mode, &self.gt, &gt_maps) {
            (Mode::Train, Some(gt), Some(gt_maps)) => {
                let mut omega_mask = vec![false; maps.len()];
                for &q in &omega {
                    omega_mask[q] = true;
                }
                let r_acc = reward_acc(&filled_maps, gt_maps, &omega_mask, camera.far)?;
                let r_hole = reward_hole(area_prev, area_now, self.area0)?;
                let r_pcacc = reward_pcacc(&frustum_crop(&new_cloud, &self.input_view, camera), gt);
                let weights = RewardWeights::from(&settings.episode);
                let (r_total, bonus) = if self.terminal {
                    (1.0, 1)
                } else {
                    (reward_total(&weights, r_acc, r_pcacc, r_hole), 0)
                };
                Some(RewardBreakdown {
                    r_acc,
                    r_pcacc,
                    r_hole,
                    r_total,
                    terminal_bonus: bonus,
                })
            }
            _ => None,
        };
        Ok(StepOutcome {
            step: self.step,
            action,
            omega: omega.len(),
            new_points: new_cloud.len(),
            unfillable,
            area_prev,
            area_now,
            rewards,
            terminal: self.terminal,
            done: self.done,
        })
    }
}
