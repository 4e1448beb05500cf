//! Synthetic rooms with labeled furniture boxes, and the single-view inputs
//! derived from them.
//!
//! A room is an axis-aligned box with its floor at `y = min.y`. The floor,
//! ceiling and three walls are sampled; the `+z` side, where the input
//! camera stands, is left open. Walls and ceiling sit `wall_inset` inside
//! the box. Furniture boxes stand on the floor in the back part of the
//! room; their bottoms and the floor underneath are not sampled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{ActionSpace, CameraModel, Pose, Viewpoint};
use crate::cloud::{Aabb, LabeledPointCloud, Point, Rgb, Vec3};
use crate::error::{Error, Result};
use crate::label::SemanticLabel;
use crate::render::{pixel_hit, render_views, ViewMaps};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    /// Inclusive range of furniture box counts.
    pub furniture: [usize; 2],
    /// Surface samples per square meter.
    pub density: f64,
    pub wall_inset: f64,
    pub window: bool,
    /// Label codes furniture boxes are drawn from.
    pub furniture_labels: Vec<u8>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            room_min: [-2.4, 0.0, -2.4],
            room_max: [2.4, 2.44, 2.4],
            furniture: [3, 6],
            density: 2500.0,
            wall_inset: 0.02,
            window: true,
            furniture_labels: FURNITURE_LABELS.iter().map(|l| l.code()).collect(),
        }
    }
}

impl SceneSpec {
    pub fn room(&self) -> Aabb {
        Aabb::new(Vec3::from(self.room_min), Vec3::from(self.room_max))
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let room = self.room();
        let size = room.size();
        if !(0..3).all(|i| size[i] > 4.0 * self.wall_inset && size[i].is_finite()) {
            return Err(Error::param("room", format!("degenerate room box {:?}..{:?}", self.room_min, self.room_max)));
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(Error::param("density", format!("must be positive, got {}", self.density)));
        }
        if !(self.wall_inset >= 0.0) {
            return Err(Error::param("wall_inset", "must be non-negative"));
        }
        if self.furniture[1] > 0 && self.furniture_labels.is_empty() {
            return Err(Error::Config("furniture_labels is empty".into()));
        }
        for &code in &self.furniture_labels {
            if SemanticLabel::new(code).map_or(true, |l| l.is_empty()) {
                return Err(Error::Config(format!("furniture label {code} not in 1..=11")));
            }
        }
        if self.furniture[0] > self.furniture[1] {
            return Err(Error::param("furniture", format!("empty range {:?}", self.furniture)));
        }
        Ok(())
    }
}

/// Specs for `n` scenes with consecutive seeds starting at `first_seed`.
pub fn scene_suite(base: &SceneSpec, first_seed: u64, n: usize) -> Vec<SceneSpec> {
    (0..n as u64).map(|i| base.with_seed(first_seed + i)).collect()
}

/// The ten evaluation scenes.
pub fn standard_suite(base: &SceneSpec) -> Vec<SceneSpec> {
    scene_suite(base, 0, 10)
}

/// Scenes disjoint from the standard suite and from training seeds.
pub fn held_out_suite(base: &SceneSpec) -> Vec<SceneSpec> {
    scene_suite(base, 1000, 20)
}

fn rgb(r: u8, g: u8, b: u8) -> Rgb {
    [r as f32 / 255.0, g as f32 / 255.0, b as f32 / 255.0]
}

pub fn palette(label: SemanticLabel) -> Rgb {
    match label.code() {
        1 => rgb(240, 240, 235),
        2 => rgb(150, 111, 51),
        3 => rgb(200, 200, 190),
        4 => rgb(150, 200, 240),
        5 => rgb(180, 60, 50),
        6 => rgb(90, 120, 180),
        7 => rgb(60, 140, 90),
        8 => rgb(120, 80, 40),
        9 => rgb(30, 30, 35),
        10 => rgb(210, 170, 90),
        11 => rgb(230, 120, 200),
        _ => rgb(0, 0, 0),
    }
}

/// Width, height and depth ranges per furniture label.
fn size_range(label: SemanticLabel) -> [[f64; 2]; 3] {
    match label.code() {
        5 => [[0.45, 0.6], [0.8, 1.0], [0.45, 0.6]],
        6 => [[1.4, 1.8], [0.45, 0.6], [1.9, 2.1]],
        7 => [[1.6, 2.2], [0.7, 0.9], [0.8, 1.0]],
        8 => [[0.8, 1.4], [0.7, 0.8], [0.6, 0.9]],
        9 => [[0.8, 1.2], [0.5, 0.7], [0.15, 0.3]],
        10 => [[0.6, 1.2], [1.0, 2.0], [0.4, 0.6]],
        _ => [[0.25, 0.45], [0.25, 0.5], [0.25, 0.45]],
    }
}

const FURNITURE_LABELS: [SemanticLabel; 7] = [
    SemanticLabel::CHAIR,
    SemanticLabel::BED,
    SemanticLabel::SOFA,
    SemanticLabel::TABLE,
    SemanticLabel::TVS,
    SemanticLabel::FURNITURE,
    SemanticLabel::OBJECTS,
];

/// A rectangular region `[a0, a1] x [b0, b1]` of a surface's parameter
/// square that is relabeled, or removed when `label` is `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cutout {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub label: Option<SemanticLabel>,
}

/// A labeled rectangle `origin + a * u + b * v`, `a, b` in `[0, 1]`, with
/// `u` orthogonal to `v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub origin: Vec3,
    pub u: Vec3,
    pub v: Vec3,
    pub label: SemanticLabel,
    pub cutouts: Vec<Cutout>,
}

impl Surface {
    fn new(origin: Vec3, u: Vec3, v: Vec3, label: SemanticLabel) -> Self {
        Self {
            origin,
            u,
            v,
            label,
            cutouts: Vec::new(),
        }
    }

    /// Label at parameters `(a, b)`; `None` where the surface is cut away.
    pub fn label_at(&self, a: f64, b: f64) -> Option<SemanticLabel> {
        for c in &self.cutouts {
            let inside = match c.label {
                // Removed regions are open so their borders stay solid.
                None => a > c.a[0] && a < c.a[1] && b > c.b[0] && b < c.b[1],
                Some(_) => a >= c.a[0] && a <= c.a[1] && b >= c.b[0] && b <= c.b[1],
            };
            if inside {
                return c.label;
            }
        }
        Some(self.label)
    }

    /// Ray parameter and label of the intersection with `o + t d`, `t > 0`.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, SemanticLabel)> {
        let n = self.u.cross(&self.v);
        let denom = n.dot(d);
        if denom.abs() < 1e-15 {
            return None;
        }
        let t = n.dot(&(self.origin - o)) / denom;
        if !(t > 0.0) {
            return None;
        }
        let rel = o + d * t - self.origin;
        let a = rel.dot(&self.u) / self.u.norm_squared();
        let b = rel.dot(&self.v) / self.v.norm_squared();
        if !((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)) {
            return None;
        }
        self.label_at(a, b).map(|l| (t, l))
    }

    /// One jittered sample per cell of a grid with spacing close to
    /// `1 / sqrt(density)`; cut-away samples are dropped.
    fn sample(&self, density: f64, rng: &mut ChaCha8Rng, mut emit: impl FnMut(Vec3, SemanticLabel)) {
        let spacing = density.sqrt().recip();
        let nu = ((self.u.norm() / spacing).round() as usize).max(1);
        let nv = ((self.v.norm() / spacing).round() as usize).max(1);
        for j in 0..nv {
            for i in 0..nu {
                let fa = (i as f64 + rng.random::<f64>()) / nu as f64;
                let fb = (j as f64 + rng.random::<f64>()) / nv as f64;
                if let Some(label) = self.label_at(fa, fb) {
                    emit(self.origin + self.u * fa + self.v * fb, label);
                }
            }
        }
    }
}

/// The analytic geometry of a generated room.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub room: Aabb,
    pub furniture: Vec<(Aabb, SemanticLabel)>,
    pub surfaces: Vec<Surface>,
}

impl SceneLayout {
    /// Nearest surface hit by the ray `o + t d`, `t > 0`.
    pub fn raycast(&self, o: &Vec3, d: &Vec3) -> Option<(f64, SemanticLabel)> {
        self.surfaces
            .iter()
            .filter_map(|s| s.intersect(o, d))
            .min_by(|x, y| x.0.total_cmp(&y.0))
    }

    /// Exact maps of the layout under `view`: each pixel shows the surface
    /// its center ray hits first, if that lies in the depth range. No pixel
    /// is marked as a hole.
    pub fn render(&self, view: &Viewpoint, camera: &CameraModel) -> ViewMaps {
        use rayon::prelude::*;
        let pose = view.pose();
        let rows: Vec<Vec<(f32, SemanticLabel)>> = (0..camera.height)
            .into_par_iter()
            .map(|j| {
                (0..camera.width)
                    .map(|i| {
                        let (u, v) = camera.pixel_center(i, j);
                        // A camera-space direction with unit z makes t the depth.
                        let c = Vec3::new((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0);
                        let d = pose.rotation.transpose() * c;
                        match self.raycast(&pose.position, &d) {
                            Some((t, l)) if camera.in_depth_range(t) => (t as f32, l),
                            _ => (0.0, SemanticLabel::EMPTY),
                        }
                    })
                    .collect()
            })
            .collect();
        let mut maps = ViewMaps::empty(camera.width, camera.height);
        for (q, (z, l)) in rows.into_iter().flatten().enumerate() {
            if z > 0.0 {
                maps.depth[q] = z;
                maps.seg[q] = l.code();
                maps.color[q] = palette(l);
            }
        }
        maps
    }

    /// Whether `p` lies in the view's frustum and no surface is hit more
    /// than `tol` meters before it.
    pub fn visible(&self, p: &Vec3, pose: &Pose, camera: &CameraModel, tol: f64) -> bool {
        if pixel_hit(camera, pose, p).is_none() {
            return false;
        }
        let d = p - pose.position;
        let dist = d.norm();
        let dir = d / dist;
        self.surfaces
            .iter()
            .filter_map(|s| s.intersect(&pose.position, &dir))
            .all(|(t, _)| t >= dist - tol)
    }
}

fn furniture_region(room: &Aabb, inset: f64) -> ([f64; 2], [f64; 2]) {
    let m = 0.2 + inset;
    // Keep the front 1.6 m clear for the input camera's near field.
    ([room.min.x + m, room.max.x - m], [room.min.z + m, room.max.z - 1.6])
}

/// Lays out a room described by `spec`. Deterministic per seed.
pub fn scene_layout(spec: &SceneSpec) -> Result<SceneLayout> {
    layout_with_rng(spec).map(|(layout, _)| layout)
}

fn layout_with_rng(spec: &SceneSpec) -> Result<(SceneLayout, ChaCha8Rng)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let room = spec.room();
    let e = spec.wall_inset;
    let (x0, x1) = (room.min.x + e, room.max.x - e);
    let (z0, z1) = (room.min.z + e, room.max.z - e);
    let (y0, y1) = (room.min.y, room.max.y - e);

    let count = rng.random_range(spec.furniture[0]..=spec.furniture[1]);
    let (fx, fz) = furniture_region(&room, e);
    let mut boxes: Vec<(Aabb, SemanticLabel)> = Vec::with_capacity(count);
    for _ in 0..count {
        let code = spec.furniture_labels[rng.random_range(0..spec.furniture_labels.len())];
        let label = SemanticLabel::new(code)?;
        let r = size_range(label);
        let mut size = Vec3::new(
            rng.random_range(r[0][0]..r[0][1]),
            rng.random_range(r[1][0]..r[1][1]).min(y1 - y0 - 0.1),
            rng.random_range(r[2][0]..r[2][1]),
        );
        if rng.random::<bool>() {
            size = Vec3::new(size.z, size.y, size.x);
        }
        let mut placed = false;
        for _ in 0..200 {
            if size.x >= fx[1] - fx[0] || size.z >= fz[1] - fz[0] {
                break;
            }
            let min = Vec3::new(
                rng.random_range(fx[0]..fx[1] - size.x),
                y0,
                rng.random_range(fz[0]..fz[1] - size.z),
            );
            let cand = Aabb::from_min_size(min, size);
            let clear = boxes.iter().all(|(b, _)| {
                cand.min.x > b.max.x + 0.1
                    || cand.max.x < b.min.x - 0.1
                    || cand.min.z > b.max.z + 0.1
                    || cand.max.z < b.min.z - 0.1
            });
            if clear {
                boxes.push((cand, label));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place {} box {} of {count} after 200 attempts",
                label.name(),
                boxes.len() + 1
            )));
        }
    }

    let window = spec.window.then(|| {
        let c = rng.random_range(x0 + 0.8..x1 - 0.8);
        (c - 0.6, c + 0.6, y0 + 0.9, (y0 + 1.9).min(y1 - 0.1))
    });

    let (w, h, depth) = (x1 - x0, y1 - y0, z1 - z0);
    let mut floor = Surface::new(Vec3::new(x0, y0, z0), Vec3::new(w, 0.0, 0.0), Vec3::new(0.0, 0.0, depth), SemanticLabel::FLOOR);
    // Nothing is sampled under furniture.
    floor.cutouts = boxes
        .iter()
        .map(|(b, _)| Cutout {
            a: [(b.min.x - x0) / w, (b.max.x - x0) / w],
            b: [(b.min.z - z0) / depth, (b.max.z - z0) / depth],
            label: None,
        })
        .collect();
    let ceiling = Surface::new(Vec3::new(x0, y1, z0), Vec3::new(w, 0.0, 0.0), Vec3::new(0.0, 0.0, depth), SemanticLabel::CEILING);
    let mut back = Surface::new(Vec3::new(x0, y0, z0), Vec3::new(w, 0.0, 0.0), Vec3::new(0.0, h, 0.0), SemanticLabel::WALL);
    if let Some((a, b, lo, hi)) = window {
        back.cutouts.push(Cutout {
            a: [(a - x0) / w, (b - x0) / w],
            b: [(lo - y0) / h, (hi - y0) / h],
            label: Some(SemanticLabel::WINDOW),
        });
    }
    let mut surfaces = vec![floor, ceiling, back];
    for x in [x0, x1] {
        surfaces.push(Surface::new(
            Vec3::new(x, y0, z0),
            Vec3::new(0.0, 0.0, depth),
            Vec3::new(0.0, h, 0.0),
            SemanticLabel::WALL,
        ));
    }
    for (b, label) in &boxes {
        let s = b.size();
        let faces = [
            (Vec3::new(b.min.x, b.max.y, b.min.z), Vec3::new(s.x, 0.0, 0.0), Vec3::new(0.0, 0.0, s.z)),
            (b.min, Vec3::new(s.x, 0.0, 0.0), Vec3::new(0.0, s.y, 0.0)),
            (Vec3::new(b.min.x, b.min.y, b.max.z), Vec3::new(s.x, 0.0, 0.0), Vec3::new(0.0, s.y, 0.0)),
            (b.min, Vec3::new(0.0, 0.0, s.z), Vec3::new(0.0, s.y, 0.0)),
            (Vec3::new(b.max.x, b.min.y, b.min.z), Vec3::new(0.0, 0.0, s.z), Vec3::new(0.0, s.y, 0.0)),
        ];
        for (origin, u, v) in faces {
            surfaces.push(Surface::new(origin, u, v, *label));
        }
    }
    Ok((
        SceneLayout {
            room,
            furniture: boxes,
            surfaces,
        },
        rng,
    ))
}

/// Samples a room described by `spec`. Deterministic per seed.
pub fn generate_scene(spec: &SceneSpec) -> Result<LabeledPointCloud> {
    let (layout, mut rng) = layout_with_rng(spec)?;
    Ok(sample_layout(&layout, spec.density, &mut rng))
}

/// Generates the layout and its sampled cloud together.
pub fn generate_scene_with_layout(spec: &SceneSpec) -> Result<(SceneLayout, LabeledPointCloud)> {
    let (layout, mut rng) = layout_with_rng(spec)?;
    let cloud = sample_layout(&layout, spec.density, &mut rng);
    Ok((layout, cloud))
}

fn sample_layout(layout: &SceneLayout, density: f64, rng: &mut ChaCha8Rng) -> LabeledPointCloud {
    let mut cloud = LabeledPointCloud::new();
    for s in &layout.surfaces {
        s.sample(density, rng, |p, label| {
            cloud.push(Point {
                position: p,
                color: palette(label),
                label,
            })
        });
    }
    cloud
}

/// The input camera: on the equator of the view sphere, facing `-z`.
pub fn input_viewpoint(room: &Aabb, radius: f64) -> Viewpoint {
    Viewpoint::new(90.0, 0.0, radius, room.center())
}

/// Points with depth in `[near, far]` whose projection lies on the image.
pub fn frustum_crop(scene: &LabeledPointCloud, view: &Viewpoint, camera: &CameraModel) -> LabeledPointCloud {
    let pose = view.pose();
    scene.filtered(|_, p| pixel_hit(camera, &pose, &p.position).is_some())
}

/// Renders the scene from `view`; the resulting maps are an episode input.
pub fn synth_input_view(scene: &LabeledPointCloud, view: &Viewpoint, camera: &CameraModel, splat_radius: usize) -> Result<ViewMaps> {
    if scene.is_empty() {
        return Err(Error::InvalidInput("empty scene".into()));
    }
    let maps = render_views(scene, view, camera, splat_radius);
    if maps.filled_count() == 0 {
        return Err(Error::InvalidInput("scene is not visible from the input view".into()));
    }
    Ok(maps)
}

/// Adds zero-mean Gaussian noise to every non-empty depth, clamping to
/// `[near, far]`.
pub fn add_depth_noise(depth: &[f32], sigma: f64, seed: u64, near: f64, far: f64) -> Result<Vec<f32>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::param("sigma", format!("must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(depth.to_vec());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::param("sigma", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(depth
        .iter()
        .map(|&d| {
            if d > 0.0 {
                (d as f64 + normal.sample(&mut rng)).clamp(near, far) as f32
            } else {
                d
            }
        })
        .collect())
}

/// Marks the points of `scene` that some view in `views` sees unoccluded
/// within `tol` meters.
pub fn observable_mask(
    layout: &SceneLayout,
    scene: &LabeledPointCloud,
    views: &[Viewpoint],
    camera: &CameraModel,
    tol: f64,
) -> Vec<bool> {
    use rayon::prelude::*;
    let poses: Vec<Pose> = views.iter().map(|v| v.pose()).collect();
    scene
        .points()
        .par_iter()
        .map(|p| poses.iter().any(|pose| layout.visible(&p.position, pose, camera, tol)))
        .collect()
}

/// Distance by which a point may sit behind the first surface along its
/// ray and still count as seen.
pub const VISIBILITY_TOL: f64 = 1e-3;

/// Completion target for an episode started from `input`: the points of
/// the input frustum that the input view or some action view can see.
pub fn episode_ground_truth(
    layout: &SceneLayout,
    scene: &LabeledPointCloud,
    input: &Viewpoint,
    actions: &ActionSpace,
    camera: &CameraModel,
) -> LabeledPointCloud {
    let mut views = vec![*input];
    views.extend_from_slice(actions.views());
    let cropped = frustum_crop(scene, input, camera);
    let seen = observable_mask(layout, &cropped, &views, camera, VISIBILITY_TOL);
    cropped.filtered(|i, _| seen[i])
}
