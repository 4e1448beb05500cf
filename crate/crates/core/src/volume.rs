//! Occupancy volumes and their differentiable projection into views.
//!
//! Each voxel `k` carries `V_k`, the probability that it is empty, and eleven
//! class scores `s_k`. A pixel ray visits voxels `l_1..l_N` front to back at
//! depths `d_1 < .. < d_N` and sees
//!
//! ```text
//! P_k  = (1 - V_k) * prod_{j<k} V_j
//! D(x) = sum_k P_k d_k
//! S(x) = sum_k P_k softmax(s_k / T)
//! ```
//!
//! Depths are measured along the camera's forward axis so `D` is comparable
//! with rendered depth maps; `d_k` is the midpoint of the ray's segment inside
//! voxel `k`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, Pose, Viewpoint};
use crate::cloud::{LabeledPointCloud, Vec3};
use crate::error::{Error, Result};
use crate::label::{SemanticLabel, NUM_CLASSES};
use crate::spatial::KdTree;
use crate::voxel::{voxelize_points, GridGeometry};

pub type Scores = [f64; NUM_CLASSES];

const DUMP_MAGIC: &[u8; 4] = b"OCCV";
const DUMP_VERSION: u32 = 1;

/// 60 x 36 x 60 voxels of 0.08 m around the default room box, centered
/// vertically on it.
pub fn default_geometry() -> GridGeometry {
    GridGeometry::new(0.08, Vec3::new(-2.4, -0.22, -2.4), [60, 36, 60]).expect("valid constants")
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyVolume {
    geometry: GridGeometry,
    v: Vec<f64>,
    s: Vec<Scores>,
}

impl OccupancyVolume {
    /// Volume with every voxel set to emptiness `v` and zero scores.
    pub fn filled(geometry: GridGeometry, v: f64) -> Self {
        let n = geometry.cell_count();
        Self {
            geometry,
            v: vec![v; n],
            s: vec![[0.0; NUM_CLASSES]; n],
        }
    }

    pub fn from_parts(geometry: GridGeometry, v: Vec<f64>, s: Vec<Scores>) -> Result<Self> {
        let n = geometry.cell_count();
        if v.len() != n || s.len() != n {
            return Err(Error::GeometryMismatch(format!(
                "volume of {n} voxels given {} V and {} score entries",
                v.len(),
                s.len()
            )));
        }
        if let Some(k) = v.iter().position(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::OutOfRange(format!("voxel {k}: V = {} not in [0, 1]", v[k])));
        }
        if s.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("class scores"));
        }
        Ok(Self { geometry, v, s })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn s(&self) -> &[Scores] {
        &self.s
    }

    pub fn v_mut(&mut self) -> &mut [f64] {
        &mut self.v
    }

    pub fn s_mut(&mut self) -> &mut [Scores] {
        &mut self.s
    }

    pub fn is_occupied(&self, k: usize) -> bool {
        self.v[k] < 0.5
    }

    pub fn occupied_count(&self) -> usize {
        self.v.iter().filter(|&&x| x < 0.5).count()
    }

    /// Highest-scoring class of voxel `k`, lowest index on ties; `None` when
    /// all scores are zero.
    pub fn label(&self, k: usize) -> Option<SemanticLabel> {
        argmax_label(&self.s[k])
    }

    /// Per-voxel `softmax(s_k / temperature)`.
    pub fn softmax_table(&self, temperature: f64) -> Vec<Scores> {
        self.s.par_iter().map(|s| softmax(s, temperature)).collect()
    }

    /// Writes the binary dump: magic `OCCV`, version, dims (3 x u32), voxel
    /// size and origin (4 x f32), then per voxel `V` and the eleven scores
    /// as f32, all little-endian, x fastest.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(36 + self.len() * 48);
        buf.extend_from_slice(DUMP_MAGIC);
        buf.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        for d in self.geometry.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.geometry.edge as f32).to_le_bytes());
        for c in self.geometry.origin.iter() {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        for (v, s) in self.v.iter().zip(&self.s) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
            for x in s {
                buf.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut at = 0usize;
        let mut take4 = |what: &str| -> Result<[u8; 4]> {
            let chunk = bytes
                .get(at..at + 4)
                .ok_or_else(|| Error::Parse {
                    offset: at,
                    message: format!("truncated volume dump reading {what}"),
                })?
                .try_into()
                .expect("four bytes");
            at += 4;
            Ok(chunk)
        };
        if &take4("magic")? != DUMP_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "not a volume dump".into(),
            });
        }
        let version = u32::from_le_bytes(take4("version")?);
        if version != DUMP_VERSION {
            return Err(Error::Parse {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = u32::from_le_bytes(take4("dims")?) as usize;
        }
        let edge = f32::from_le_bytes(take4("voxel size")?) as f64;
        let mut origin = Vec3::zeros();
        for i in 0..3 {
            origin[i] = f32::from_le_bytes(take4("origin")?) as f64;
        }
        let geometry = GridGeometry::new(edge, origin, dims)?;
        let n = geometry.cell_count();
        let mut v = Vec::with_capacity(n);
        let mut s = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(f32::from_le_bytes(take4("V")?) as f64);
            let mut sc = [0.0; NUM_CLASSES];
            for x in &mut sc {
                *x = f32::from_le_bytes(take4("scores")?) as f64;
            }
            s.push(sc);
        }
        Self::from_parts(geometry, v, s)
    }
}

pub fn argmax_label(s: &Scores) -> Option<SemanticLabel> {
    if s.iter().all(|&x| x == 0.0) {
        return None;
    }
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if s[c] > s[best] {
            best = c;
        }
    }
    SemanticLabel::from_class_index(best)
}

pub fn softmax(s: &Scores, temperature: f64) -> Scores {
    let m = s.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / temperature;
    let mut out = s.map(|x| (x / temperature - m).exp());
    let z: f64 = out.iter().sum();
    for x in &mut out {
        *x /= z;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OccupancyParams {
    pub occupied_v: f64,
    pub free_v: f64,
    pub score_margin: f64,
}

impl Default for OccupancyParams {
    fn default() -> Self {
        Self {
            occupied_v: 0.05,
            free_v: 0.95,
            score_margin: 1.0,
        }
    }
}

/// Voxels holding at least one point become occupied with a one-hot score
/// for their cell label; all others are free with zero scores.
pub fn build_occupancy(cloud: &LabeledPointCloud, geometry: &GridGeometry, params: &OccupancyParams) -> Result<OccupancyVolume> {
    let grid = voxelize_points(cloud, geometry)?;
    let mut vol = OccupancyVolume::filled(*geometry, params.free_v);
    for (k, cell) in grid.occupied_cells() {
        vol.v[*k] = params.occupied_v;
        if let Some(c) = cell.label.class_index() {
            vol.s[*k][c] = params.score_margin;
        }
    }
    Ok(vol)
}

/// Completes an occupancy volume; stands in for a learned completer.
pub trait VolumeCompleter: Send + Sync {
    /// Returns a volume of the same geometry in which every input-occupied
    /// voxel has `V` no larger than before.
    fn complete(&self, vol: &OccupancyVolume) -> OccupancyVolume;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityCompleter;

impl VolumeCompleter for IdentityCompleter {
    fn complete(&self, vol: &OccupancyVolume) -> OccupancyVolume {
        vol.clone()
    }
}

/// Rule-based completion of room structure.
///
/// 1. Boundary walls are found: the outermost x- and z-layers holding wall
///    or window voxels, kept when those voxels fill at least 30% of their
///    bounding rectangle within the layer. The room footprint spans the
///    found walls, or the grid edge on sides without one.
/// 2. The most populated floor layer is filled across the footprint;
///    likewise the ceiling layer.
/// 3. Each boundary wall is filled across the footprint, between the floor
///    and ceiling layers when both exist.
/// 4. A morphological closing with a cubic element of the given radius.
///
/// Voxels added by steps 2 and 3 take the scores of an input voxel of the
/// plane's label; those added by the closing take the scores of the nearest
/// input-occupied voxel. The output is binary: occupied voxels get `V = 0`,
/// free ones `V = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MorphologicalCompleter {
    pub closing_radius: usize,
    pub fill_planes: bool,
    pub extend_walls: bool,
}

impl Default for MorphologicalCompleter {
    fn default() -> Self {
        Self {
            closing_radius: 1,
            fill_planes: true,
            extend_walls: true,
        }
    }
}

impl VolumeCompleter for MorphologicalCompleter {
    fn complete(&self, vol: &OccupancyVolume) -> OccupancyVolume {
        let g = vol.geometry;
        let [nx, ny, _] = g.dims;
        let input: Vec<bool> = (0..vol.len()).map(|k| vol.is_occupied(k)).collect();
        let labels: Vec<Option<SemanticLabel>> = (0..vol.len()).map(|k| vol.label(k)).collect();
        let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
        let has = |k: usize, l: SemanticLabel| input[k] && labels[k] == Some(l);
        let is_wall = |k: usize| has(k, SemanticLabel::WALL) || has(k, SemanticLabel::WINDOW);
        let scores_of = |l: SemanticLabel| (0..vol.len()).find(|&k| has(k, l)).map(|k| vol.s[k]);

        let dominant_layer = |l: SemanticLabel| -> Option<usize> {
            let mut counts = vec![0usize; ny];
            for k in 0..vol.len() {
                if has(k, l) {
                    counts[g.unlinear(k)[1]] += 1;
                }
            }
            let best = (0..ny).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))?;
            (counts[best] > 0).then_some(best)
        };
        let floor = dominant_layer(SemanticLabel::FLOOR);
        let ceiling = dominant_layer(SemanticLabel::CEILING);

        // Boundary walls along x (axis 0) and z (axis 2): (low, high) layers.
        let walls = [0usize, 2].map(|axis| {
            let n = g.dims[axis];
            let other = 2 - axis;
            let planar = |layer: usize| -> bool {
                let (mut count, mut lo, mut hi) = (0usize, [usize::MAX; 2], [0usize; 2]);
                for k in (0..vol.len()).filter(|&k| is_wall(k)) {
                    let c = g.unlinear(k);
                    if c[axis] == layer {
                        count += 1;
                        for (d, v) in [c[1], c[other]].into_iter().enumerate() {
                            lo[d] = lo[d].min(v);
                            hi[d] = hi[d].max(v);
                        }
                    }
                }
                count > 0 && count as f64 >= 0.3 * ((hi[0] - lo[0] + 1) * (hi[1] - lo[1] + 1)) as f64
            };
            let layers: Vec<usize> = {
                let mut present = vec![false; n];
                for k in (0..vol.len()).filter(|&k| is_wall(k)) {
                    present[g.unlinear(k)[axis]] = true;
                }
                (0..n).filter(|&i| present[i]).collect()
            };
            let low = layers.first().copied().filter(|&l| planar(l));
            let high = layers.last().copied().filter(|&l| planar(l));
            (low, if high == low { None } else { high })
        });
        let span = |axis: usize| {
            let (lo, hi) = walls[if axis == 0 { 0 } else { 1 }];
            (lo.unwrap_or(0), hi.unwrap_or(g.dims[axis] - 1))
        };
        let (x0, x1) = span(0);
        let (z0, z1) = span(2);

        let mut occ = input.clone();
        let mut planted: Vec<Option<Scores>> = vec![None; vol.len()];
        let mut plant = |k: usize, s: &Option<Scores>| {
            if !occ[k] {
                occ[k] = true;
                planted[k] = *s;
            }
        };
        if self.fill_planes {
            for (layer, label) in [(floor, SemanticLabel::FLOOR), (ceiling, SemanticLabel::CEILING)] {
                let Some(y) = layer else { continue };
                let s = scores_of(label);
                for z in z0..=z1 {
                    for x in x0..=x1 {
                        plant(idx(x, y, z), &s);
                    }
                }
            }
        }
        if self.extend_walls {
            let s = scores_of(SemanticLabel::WALL).or_else(|| scores_of(SemanticLabel::WINDOW));
            let (y0, y1) = match (floor, ceiling) {
                (Some(f), Some(c)) if f + 1 < c => (f + 1, c - 1),
                _ => {
                    let ys: Vec<usize> = (0..vol.len()).filter(|&k| is_wall(k)).map(|k| g.unlinear(k)[1]).collect();
                    (ys.iter().copied().min().unwrap_or(0), ys.iter().copied().max().unwrap_or(0))
                }
            };
            for x in [walls[0].0, walls[0].1].into_iter().flatten() {
                for z in z0..=z1 {
                    for y in y0..=y1 {
                        plant(idx(x, y, z), &s);
                    }
                }
            }
            for z in [walls[1].0, walls[1].1].into_iter().flatten() {
                for x in x0..=x1 {
                    for y in y0..=y1 {
                        plant(idx(x, y, z), &s);
                    }
                }
            }
        }

        if self.closing_radius > 0 {
            let dilated = morph(&occ, g.dims, self.closing_radius, true);
            occ = morph(&dilated, g.dims, self.closing_radius, false);
        }

        let sources: Vec<usize> = (0..vol.len()).filter(|&k| input[k]).collect();
        let tree = KdTree::new(sources.iter().map(|&k| cell_coords(&g, k)).collect());
        let mut out = vol.clone();
        for k in 0..vol.len() {
            out.v[k] = if occ[k] { 0.0 } else { 1.0 };
            if occ[k] && !input[k] {
                if let Some(s) = planted[k] {
                    out.s[k] = s;
                } else if let Some((j, _)) = tree.nearest(&cell_coords(&g, k)) {
                    out.s[k] = vol.s[sources[j]];
                }
            }
        }
        out
    }
}

fn cell_coords(g: &GridGeometry, k: usize) -> Vec3 {
    let [x, y, z] = g.unlinear(k);
    Vec3::new(x as f64, y as f64, z as f64)
}

/// Cubic dilation (`dilate`) or erosion; neighbors outside the grid are
/// ignored.
fn morph(occ: &[bool], dims: [usize; 3], r: usize, dilate: bool) -> Vec<bool> {
    // Separable: a cube is the product of three 1D windows.
    let mut cur = occ.to_vec();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let mut next = cur.clone();
        for k in 0..cur.len() {
            let c = (k / strides[axis]) % dims[axis];
            let lo = c.saturating_sub(r);
            let hi = (c + r).min(dims[axis] - 1);
            let base = k - c * strides[axis];
            let mut acc = !dilate;
            for t in lo..=hi {
                let val = cur[base + t * strides[axis]];
                if dilate {
                    acc |= val;
                } else {
                    acc &= val;
                }
            }
            next[k] = acc;
        }
        cur = next;
    }
    cur
}

/// A ray parameterized by depth: points are `origin + t * dir` where `dir`
/// has unit component along the camera's forward axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_min: f64,
    pub t_max: f64,
}

impl Ray {
    /// Ray through the center of pixel `(i, j)`, clipped to the depth range.
    pub fn through_pixel(camera: &CameraModel, pose: &Pose, i: usize, j: usize) -> Self {
        let (u, v) = camera.pixel_center(i, j);
        let c = Vec3::new((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0);
        Self {
            origin: pose.position,
            dir: pose.rotation.transpose() * c,
            t_min: camera.near,
            t_max: camera.far,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySample {
    pub voxel: usize,
    pub d: f64,
}

/// Voxels crossed by `ray` in front-to-back order (Amanatides-Woo stepping).
/// Segments shorter than 1e-12 are dropped, so depths strictly increase.
pub fn traverse(g: &GridGeometry, ray: &Ray, out: &mut Vec<RaySample>) {
    out.clear();
    let ext = g.extent();
    let (mut t0, mut t1) = (ray.t_min, ray.t_max);
    for a in 0..3 {
        let d = ray.dir[a];
        let o = ray.origin[a];
        if d == 0.0 {
            if o < ext.min[a] || o >= ext.max[a] {
                return;
            }
        } else {
            let ta = (ext.min[a] - o) / d;
            let tb = (ext.max[a] - o) / d;
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if !(t0 < t1) {
        return;
    }
    let tm = 0.5 * (t0 + t1);
    let mut cell = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        // Locate the entry cell from a point slightly inside the segment to
        // avoid landing on the wrong side of a face.
        let p = ray.origin[a] + ray.dir[a] * t0.max(tm.min(t0 + 1e-9));
        let c = ((p - g.origin[a]) / g.edge).floor() as i64;
        cell[a] = c.clamp(0, g.dims[a] as i64 - 1);
        let d = ray.dir[a];
        if d > 0.0 {
            step[a] = 1;
            let bound = g.origin[a] + (cell[a] + 1) as f64 * g.edge;
            t_next[a] = (bound - ray.origin[a]) / d;
            t_delta[a] = g.edge / d;
        } else if d < 0.0 {
            step[a] = -1;
            let bound = g.origin[a] + cell[a] as f64 * g.edge;
            t_next[a] = (bound - ray.origin[a]) / d;
            t_delta[a] = -g.edge / d;
        }
    }
    let mut t = t0;
    loop {
        let a = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
            0
        } else if t_next[1] <= t_next[2] {
            1
        } else {
            2
        };
        let end = t_next[a].min(t1);
        if end - t > 1e-12 {
            let k = cell[0] as usize + g.dims[0] * (cell[1] as usize + g.dims[1] * cell[2] as usize);
            out.push(RaySample {
                voxel: k,
                d: 0.5 * (t + end),
            });
        }
        if t_next[a] >= t1 {
            break;
        }
        t = t.max(t_next[a]);
        cell[a] += step[a];
        if cell[a] < 0 || cell[a] >= g.dims[a] as i64 {
            break;
        }
        t_next[a] += t_delta[a];
    }
}

/// `(D, S, prod V)` along one traversal.
pub fn ray_forward(v: &[f64], u: &[Scores], samples: &[RaySample]) -> (f64, Scores, f64) {
    let mut trans = 1.0;
    let mut depth = 0.0;
    let mut seg = [0.0; NUM_CLASSES];
    for smp in samples {
        let vk = v[smp.voxel];
        let p = (1.0 - vk) * trans;
        if p != 0.0 {
            depth += p * smp.d;
            let uk = &u[smp.voxel];
            for c in 0..NUM_CLASSES {
                seg[c] += p * uk[c];
            }
        }
        trans *= vk;
        if trans == 0.0 {
            break;
        }
    }
    (depth, seg, trans)
}

/// Dense per-voxel adjoints.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeGradient {
    pub dv: Vec<f64>,
    pub ds: Vec<Scores>,
}

impl VolumeGradient {
    pub fn zeros(n: usize) -> Self {
        Self {
            dv: vec![0.0; n],
            ds: vec![[0.0; NUM_CLASSES]; n],
        }
    }

    fn add(&mut self, other: &VolumeGradient) {
        for (a, b) in self.dv.iter_mut().zip(&other.dv) {
            *a += b;
        }
        for (a, b) in self.ds.iter_mut().zip(&other.ds) {
            for c in 0..NUM_CLASSES {
                a[c] += b[c];
            }
        }
    }
}

/// Accumulates the adjoints of `g_d * D + g_s . S` for one ray.
///
/// With `A_N = 0` and `A_m = (1 - V_{m+1}) d_{m+1} + V_{m+1} A_{m+1}` (the
/// depth seen behind voxel `m`, given light reaches it),
/// `dD/dV_m = T_m (A_m - d_m)` where `T_m = prod_{j<m} V_j`; the same
/// recursion over `u_k = softmax(s_k / T)` gives `dS/dV_m`. Scores enter
/// only through `u_m`: `dL/ds_m = P_m / T * (u_m * g - u_m (u_m . g))`.
#[allow(clippy::too_many_arguments)]
pub fn ray_backward(
    v: &[f64],
    u: &[Scores],
    temperature: f64,
    samples: &[RaySample],
    g_d: f64,
    g_s: &Scores,
    trans: &mut Vec<f64>,
    grad: &mut VolumeGradient,
) {
    trans.clear();
    let mut t = 1.0;
    for smp in samples {
        trans.push(t);
        t *= v[smp.voxel];
    }
    let mut a = 0.0;
    let mut b = [0.0; NUM_CLASSES];
    for (m, smp) in samples.iter().enumerate().rev() {
        let k = smp.voxel;
        let (vm, tm, um) = (v[k], trans[m], &u[k]);
        let mut dv = g_d * tm * (a - smp.d);
        let mut ug = 0.0;
        for c in 0..NUM_CLASSES {
            dv += g_s[c] * tm * (b[c] - um[c]);
            ug += um[c] * g_s[c];
        }
        grad.dv[k] += dv;
        let p = (1.0 - vm) * tm;
        if p != 0.0 {
            for c in 0..NUM_CLASSES {
                grad.ds[k][c] += p / temperature * um[c] * (g_s[c] - ug);
            }
        }
        a = (1.0 - vm) * smp.d + vm * a;
        for c in 0..NUM_CLASSES {
            b[c] = (1.0 - vm) * um[c] + vm * b[c];
        }
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::param("temperature", format!("must be positive, got {temperature}")))
    }
}

/// Expected depth and soft segmentation per pixel. Rays that miss the grid
/// yield `D = 0` and a zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedMaps {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub seg: Vec<Scores>,
}

impl ProjectedMaps {
    pub fn mass(&self, q: usize) -> f64 {
        self.seg[q].iter().sum()
    }
}

pub fn project_volume(vol: &OccupancyVolume, view: &Viewpoint, camera: &CameraModel, temperature: f64) -> Result<ProjectedMaps> {
    let all: Vec<usize> = (0..camera.pixel_count()).collect();
    let values = project_pixels(vol, &view.pose(), camera, temperature, &all)?;
    let (depth, seg) = values.into_iter().unzip();
    Ok(ProjectedMaps {
        width: camera.width,
        height: camera.height,
        depth,
        seg,
    })
}

/// Projection restricted to the listed pixel indices.
pub fn project_pixels(
    vol: &OccupancyVolume,
    pose: &Pose,
    camera: &CameraModel,
    temperature: f64,
    pixels: &[usize],
) -> Result<Vec<(f64, Scores)>> {
    check_temperature(temperature)?;
    if pixels.is_empty() {
        return Ok(Vec::new());
    }
    let u = vol.softmax_table(temperature);
    let g = vol.geometry;
    Ok(pixels
        .par_chunks(1024)
        .flat_map_iter(|chunk| {
            let mut samples = Vec::new();
            chunk
                .iter()
                .map(|&q| {
                    let ray = Ray::through_pixel(camera, pose, q % camera.width, q / camera.width);
                    traverse(&g, &ray, &mut samples);
                    let (d, s, _) = ray_forward(&vol.v, &u, &samples);
                    (d, s)
                })
                .collect::<Vec<_>>()
        })
        .collect())
}

/// Expected depth `D` alone at the listed pixel indices.
pub fn project_depth(vol: &OccupancyVolume, pose: &Pose, camera: &CameraModel, pixels: &[usize]) -> Vec<f64> {
    let g = vol.geometry;
    pixels
        .par_chunks(1024)
        .flat_map_iter(|chunk| {
            let mut samples = Vec::new();
            chunk
                .iter()
                .map(|&q| {
                    let ray = Ray::through_pixel(camera, pose, q % camera.width, q / camera.width);
                    traverse(&g, &ray, &mut samples);
                    let (mut trans, mut depth) = (1.0, 0.0);
                    for smp in &samples {
                        let vk = vol.v[smp.voxel];
                        depth += (1.0 - vk) * trans * smp.d;
                        trans *= vk;
                        if trans == 0.0 {
                            break;
                        }
                    }
                    depth
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Adjoints of `sum_x (g_d(x) D(x) + g_s(x) . S(x))` over all pixels of a
/// view. Pixel rows are split into a fixed number of bands whose partial
/// sums are reduced in order, so results do not depend on scheduling.
pub fn projection_gradients(
    vol: &OccupancyVolume,
    view: &Viewpoint,
    camera: &CameraModel,
    temperature: f64,
    upstream_depth: &[f64],
    upstream_seg: &[Scores],
) -> Result<VolumeGradient> {
    check_temperature(temperature)?;
    let n = camera.pixel_count();
    if upstream_depth.len() != n || upstream_seg.len() != n {
        return Err(Error::GeometryMismatch("upstream adjoints do not match the image".into()));
    }
    const BANDS: usize = 4;
    let pose = view.pose();
    let u = vol.softmax_table(temperature);
    let g = vol.geometry;
    let rows_per_band = camera.height.div_ceil(BANDS);
    let partials: Vec<VolumeGradient> = (0..BANDS)
        .into_par_iter()
        .map(|band| {
            let mut grad = VolumeGradient::zeros(vol.len());
            let mut samples = Vec::new();
            let mut trans = Vec::new();
            let rows = band * rows_per_band..((band + 1) * rows_per_band).min(camera.height);
            for j in rows {
                for i in 0..camera.width {
                    let q = j * camera.width + i;
                    let (gd, gs) = (upstream_depth[q], &upstream_seg[q]);
                    if gd == 0.0 && gs.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    traverse(&g, &Ray::through_pixel(camera, &pose, i, j), &mut samples);
                    ray_backward(&vol.v, &u, temperature, &samples, gd, gs, &mut trans, &mut grad);
                }
            }
            grad
        })
        .collect();
    let mut total = VolumeGradient::zeros(vol.len());
    for p in &partials {
        total.add(p);
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub trials: usize,
    pub rays: usize,
    pub dim: usize,
    pub step: f64,
    pub temperature: f64,
    /// Scales every analytic adjoint by `1 + corrupt`; a negative control.
    pub corrupt: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 50,
            rays: 10,
            dim: 8,
            step: 1e-4,
            temperature: 1.0,
            corrupt: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub per_trial: Vec<f64>,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a floor on the denominator for vanishing gradients.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic projection adjoints against central differences on
/// random cubic volumes crossed by random rays.
pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    check_temperature(opts.temperature)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = opts.dim;
    let geometry = GridGeometry::new(1.0 / n as f64, Vec3::zeros(), [n, n, n])?;
    let mut per_trial = Vec::with_capacity(opts.trials);
    let mut checked = 0;
    for _ in 0..opts.trials {
        let v: Vec<f64> = (0..geometry.cell_count()).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: Vec<Scores> = (0..geometry.cell_count())
            .map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0)))
            .collect();
        let mut vol = OccupancyVolume::from_parts(geometry, v, s)?;
        let rays: Vec<(Ray, f64, Scores)> = (0..opts.rays)
            .map(|_| {
                let origin = Vec3::new(rng.random_range(-0.5..1.5), rng.random_range(-0.5..1.5), -1.0);
                let target = Vec3::new(rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
                let dir = target - origin;
                let ray = Ray {
                    origin,
                    dir: dir / dir.z,
                    t_min: 0.0,
                    t_max: 10.0,
                };
                let gd = rng.random_range(-1.0..1.0);
                let gs: Scores = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                (ray, gd, gs)
            })
            .collect();
        let traversals: Vec<Vec<RaySample>> = rays
            .iter()
            .map(|(ray, _, _)| {
                let mut out = Vec::new();
                traverse(&geometry, ray, &mut out);
                out
            })
            .collect();
        let loss = |v: &[f64], u: &[Scores]| -> f64 {
            let mut total = 0.0;
            for ((_, gd, gs), smp) in rays.iter().zip(&traversals) {
                let (d, s, _) = ray_forward(v, u, smp);
                total += gd * d + gs.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>();
            }
            total
        };
        let mut u = vol.softmax_table(opts.temperature);
        let mut grad = VolumeGradient::zeros(vol.len());
        let mut trans = Vec::new();
        for ((_, gd, gs), smp) in rays.iter().zip(&traversals) {
            ray_backward(&vol.v, &u, opts.temperature, smp, *gd, gs, &mut trans, &mut grad);
        }
        let scale = 1.0 + opts.corrupt;
        let mut touched: Vec<usize> = traversals.iter().flatten().map(|s| s.voxel).collect();
        touched.sort_unstable();
        touched.dedup();
        let h = opts.step;
        let mut worst = 0.0f64;
        for &k in &touched {
            let orig = vol.v[k];
            vol.v[k] = orig + h;
            let plus = loss(&vol.v, &u);
            vol.v[k] = orig - h;
            let minus = loss(&vol.v, &u);
            vol.v[k] = orig;
            worst = worst.max(rel_err(scale * grad.dv[k], (plus - minus) / (2.0 * h)));
            // Only the softmax row of voxel k depends on s[k].
            let row = u[k];
            for c in 0..NUM_CLASSES {
                let orig = vol.s[k][c];
                vol.s[k][c] = orig + h;
                u[k] = softmax(&vol.s[k], opts.temperature);
                let plus = loss(&vol.v, &u);
                vol.s[k][c] = orig - h;
                u[k] = softmax(&vol.s[k], opts.temperature);
                let minus = loss(&vol.v, &u);
                vol.s[k][c] = orig;
                worst = worst.max(rel_err(scale * grad.ds[k][c], (plus - minus) / (2.0 * h)));
            }
            u[k] = row;
            checked += 1 + NUM_CLASSES;
        }
        per_trial.push(worst);
    }
    let max_rel_err = per_trial.iter().copied().fold(0.0, f64::max);
    Ok(GradcheckReport {
        per_trial,
        max_rel_err,
        checked,
    })
}
