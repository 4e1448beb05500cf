//! Z-buffered point splatting, hole masks and back-projection.
//!
//! Every point whose depth lies in `[near, far]` and whose projection falls on
//! the image writes a `(2r+1) x (2r+1)` square of pixels centered on its
//! pixel. Per pixel the smallest depth wins; equal depths keep the earlier
//! point. A pixel is a hole when nothing covers it and its center lies inside
//! the projection of the hole region (by default the cloud's bounding box,
//! clipped to the near and far planes).

use std::path::Path;

use rayon::prelude::*;

use crate::camera::{unproject, ActionSpace, CameraModel, Pose, Viewpoint};
use crate::cloud::{Aabb, LabeledPointCloud, Point, Rgb, Vec3};
use crate::error::{Error, Result};
use crate::label::{SemanticLabel, UNKNOWN_CODE};

pub const DEFAULT_SPLAT_RADIUS: usize = 1;

/// Depth, color and segmentation maps of one view plus its hole mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewMaps {
    pub width: usize,
    pub height: usize,
    /// Meters, `0.0` where empty.
    pub depth: Vec<f32>,
    pub color: Vec<Rgb>,
    /// Label codes, [`UNKNOWN_CODE`] where empty.
    pub seg: Vec<u8>,
    pub hole: Vec<bool>,
}

impl ViewMaps {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            depth: vec![0.0; n],
            color: vec![[0.0; 3]; n],
            seg: vec![UNKNOWN_CODE; n],
            hole: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn same_geometry(&self, other: &ViewMaps) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn is_filled(&self, idx: usize) -> bool {
        self.depth[idx] > 0.0
    }

    pub fn hole_count(&self) -> usize {
        self.hole.iter().filter(|&&h| h).count()
    }

    pub fn filled_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    /// Mask of all non-empty pixels.
    pub fn filled_mask(&self) -> Vec<bool> {
        self.depth.iter().map(|&d| d > 0.0).collect()
    }

    /// Checks the map invariants against a camera's depth range.
    pub fn check_invariants(&self, camera: &CameraModel) -> Result<()> {
        for i in 0..self.len() {
            let d = self.depth[i];
            if d != 0.0 && !(d as f64 >= camera.near - 1e-6 && d as f64 <= camera.far + 1e-6) {
                return Err(Error::OutOfRange(format!("pixel {i}: depth {d}")));
            }
            if self.hole[i] && (d != 0.0 || self.seg[i] != UNKNOWN_CODE) {
                return Err(Error::InvalidInput(format!("pixel {i}: hole pixel carries data")));
            }
            if d != 0.0 && !(1..=11).contains(&self.seg[i]) {
                return Err(Error::InvalidInput(format!("pixel {i}: filled pixel has label {}", self.seg[i])));
            }
        }
        Ok(())
    }

    /// Depth as a 16-bit grayscale PNG in millimeters.
    pub fn save_depth_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let data: Vec<u16> = self
            .depth
            .iter()
            .map(|&d| (d as f64 * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16)
            .collect();
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(self.width as u32, self.height as u32, data)
            .expect("buffer matches dimensions");
        img.save(path.as_ref())?;
        Ok(())
    }

    /// Segmentation as an 8-bit grayscale PNG of label codes.
    pub fn save_seg_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.seg.clone())
            .expect("buffer matches dimensions");
        img.save(path.as_ref())?;
        Ok(())
    }

    pub fn save_color_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let data: Vec<u8> = self
            .color
            .iter()
            .flat_map(|c| c.map(crate::io::color_to_u8))
            .collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, data)
            .expect("buffer matches dimensions");
        img.save(path.as_ref())?;
        Ok(())
    }

    /// Reads maps written by the three `save_*_png` methods. Depth returns
    /// at millimeter resolution; the hole mask is empty.
    pub fn load_pngs(depth: impl AsRef<Path>, color: impl AsRef<Path>, seg: impl AsRef<Path>) -> Result<Self> {
        let d = image::open(depth.as_ref())?.into_luma16();
        let c = image::open(color.as_ref())?.into_rgb8();
        let s = image::open(seg.as_ref())?.into_luma8();
        let (w, h) = d.dimensions();
        if c.dimensions() != (w, h) || s.dimensions() != (w, h) {
            return Err(Error::GeometryMismatch("map images differ in size".into()));
        }
        let mut maps = ViewMaps::empty(w as usize, h as usize);
        for (i, px) in d.pixels().enumerate() {
            maps.depth[i] = px.0[0] as f32 / 1000.0;
        }
        for (i, px) in c.pixels().enumerate() {
            maps.color[i] = px.0.map(|b| b as f32 / 255.0);
        }
        for (i, px) in s.pixels().enumerate() {
            let code = px.0[0];
            if code != UNKNOWN_CODE && SemanticLabel::new(code).is_err() {
                return Err(Error::InvalidInput(format!("segmentation pixel {i} has code {code}")));
            }
            maps.seg[i] = code;
        }
        Ok(maps)
    }
}

/// Per-pixel nearest depth and the index of the point that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ZBuffer {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
    pub index: Vec<u32>,
}

pub const NO_POINT: u32 = u32::MAX;

impl ZBuffer {
    pub fn new(camera: &CameraModel) -> Self {
        let n = camera.pixel_count();
        Self {
            width: camera.width,
            height: camera.height,
            depth: vec![f32::INFINITY; n],
            index: vec![NO_POINT; n],
        }
    }

    pub fn is_covered(&self, idx: usize) -> bool {
        self.index[idx] != NO_POINT
    }

    /// Splats `points`, numbering them from `first_index`. `on_cover` fires
    /// once for every pixel that goes from empty to covered.
    pub fn splat(
        &mut self,
        camera: &CameraModel,
        pose: &Pose,
        radius: usize,
        points: &[Point],
        first_index: usize,
        mut on_cover: impl FnMut(usize),
    ) {
        for (k, p) in points.iter().enumerate() {
            if p.label.is_empty() {
                continue;
            }
            if let Some((pi, pj, z)) = pixel_hit(camera, pose, &p.position) {
                self.write_square(pi, pj, radius, z as f32, (first_index + k) as u32, &mut on_cover);
            }
        }
    }

    fn write_square(&mut self, pi: usize, pj: usize, radius: usize, zf: f32, idx: u32, on_cover: &mut impl FnMut(usize)) {
        let (i0, i1) = (pi.saturating_sub(radius), (pi + radius).min(self.width - 1));
        let (j0, j1) = (pj.saturating_sub(radius), (pj + radius).min(self.height - 1));
        for j in j0..=j1 {
            let row = j * self.width;
            for i in i0..=i1 {
                let q = row + i;
                if zf < self.depth[q] {
                    if self.index[q] == NO_POINT {
                        on_cover(q);
                    }
                    self.depth[q] = zf;
                    self.index[q] = idx;
                }
            }
        }
    }

    /// Materializes maps; `region` marks pixels where an empty pixel counts
    /// as a hole.
    pub fn to_maps(&self, points: &[Point], region: &[bool]) -> ViewMaps {
        let mut maps = ViewMaps::empty(self.width, self.height);
        for q in 0..self.depth.len() {
            let idx = self.index[q];
            if idx == NO_POINT {
                maps.hole[q] = region[q];
            } else {
                let p = &points[idx as usize];
                maps.depth[q] = self.depth[q];
                maps.color[q] = p.color;
                maps.seg[q] = p.label.code();
            }
        }
        maps
    }
}

/// Pixel and depth of a point if it lies in the depth range and on the image.
#[inline]
pub fn pixel_hit(camera: &CameraModel, pose: &Pose, p: &Vec3) -> Option<(usize, usize, f64)> {
    let c = pose.rotation * (p - pose.position);
    let z = c.z;
    if !(z >= camera.near && z <= camera.far) {
        return None;
    }
    let u = camera.fx * c.x / z + camera.cx;
    let v = camera.fy * c.y / z + camera.cy;
    camera.pixel_of(u, v).map(|(i, j)| (i, j, z))
}

/// Pixels whose centers fall inside the projection of `region` clipped to
/// the depth range. An absent or degenerate region marks nothing.
pub fn hole_region_mask(region: Option<&Aabb>, pose: &Pose, camera: &CameraModel) -> Vec<bool> {
    let mut mask = vec![false; camera.pixel_count()];
    let Some(region) = region else {
        return mask;
    };
    let hull = projected_hull(region, pose, camera);
    if hull.len() < 3 {
        return mask;
    }
    for j in 0..camera.height {
        let y = j as f64 + 0.5;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for k in 0..hull.len() {
            let (a, b) = (hull[k], hull[(k + 1) % hull.len()]);
            let (ymin, ymax) = (a.1.min(b.1), a.1.max(b.1));
            if y < ymin || y > ymax {
                continue;
            }
            if a.1 == b.1 {
                lo = lo.min(a.0.min(b.0));
                hi = hi.max(a.0.max(b.0));
            } else {
                let t = (y - a.1) / (b.1 - a.1);
                let x = a.0 + t * (b.0 - a.0);
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        if lo > hi {
            continue;
        }
        let start = (lo - 0.5).ceil().max(0.0);
        let end = (hi - 0.5).floor().min(camera.width as f64 - 1.0);
        if start > end {
            continue;
        }
        let row = j * camera.width;
        for i in start as usize..=end as usize {
            mask[row + i] = true;
        }
    }
    mask
}

/// Convex hull (counter-clockwise in image coordinates) of the region's
/// projection after clipping to `near <= z <= far`.
fn projected_hull(region: &Aabb, pose: &Pose, camera: &CameraModel) -> Vec<(f64, f64)> {
    let corners = region.corners().map(|c| pose.to_camera(&c));
    let inside = |c: &Vec3| c.z >= camera.near && c.z <= camera.far;
    let mut verts: Vec<Vec3> = corners.iter().filter(|c| inside(c)).copied().collect();
    for (a, b) in Aabb::EDGES {
        let (ca, cb) = (corners[a], corners[b]);
        for plane in [camera.near, camera.far] {
            if (ca.z - plane) * (cb.z - plane) < 0.0 {
                let t = (plane - ca.z) / (cb.z - ca.z);
                let p = ca + t * (cb - ca);
                let p = Vec3::new(p.x, p.y, plane);
                if inside(&p) {
                    verts.push(p);
                }
            }
        }
    }
    let pts: Vec<(f64, f64)> = verts
        .iter()
        .map(|c| (camera.fx * c.x / c.z + camera.cx, camera.fy * c.y / c.z + camera.cy))
        .collect();
    convex_hull(pts)
}

/// Andrew's monotone chain; drops collinear points.
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Renders `cloud` under `view` using the cloud's bounds as hole region.
pub fn render_views(cloud: &LabeledPointCloud, view: &Viewpoint, camera: &CameraModel, splat_radius: usize) -> ViewMaps {
    render_with_region(cloud, cloud.bounds().as_ref(), view, camera, splat_radius)
}

pub fn render_with_region(
    cloud: &LabeledPointCloud,
    region: Option<&Aabb>,
    view: &Viewpoint,
    camera: &CameraModel,
    splat_radius: usize,
) -> ViewMaps {
    let pose = view.pose();
    let mut zb = ZBuffer::new(camera);
    zb.splat(camera, &pose, splat_radius, cloud.points(), 0, |_| {});
    let mask = hole_region_mask(region, &pose, camera);
    zb.to_maps(cloud.points(), &mask)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BackProjection {
    pub cloud: LabeledPointCloud,
    /// Masked pixels rejected for out-of-range depth or an unknown label.
    pub skipped: usize,
}

/// Turns every masked pixel with a valid depth and label into a point at its
/// pixel center, in row-major order.
pub fn backproject(maps: &ViewMaps, mask: &[bool], view: &Viewpoint, camera: &CameraModel) -> BackProjection {
    backproject_pose(maps, mask, &view.pose(), camera)
}

pub fn backproject_pose(maps: &ViewMaps, mask: &[bool], pose: &Pose, camera: &CameraModel) -> BackProjection {
    let mut out = BackProjection::default();
    let tol = 1e-6;
    for q in 0..maps.len() {
        if !mask[q] {
            continue;
        }
        let z = maps.depth[q] as f64;
        let label = SemanticLabel::new(maps.seg[q]).ok().filter(|l| !l.is_empty());
        match label {
            Some(label) if z >= camera.near - tol && z <= camera.far + tol => {
                let z = z.clamp(camera.near, camera.far);
                let (u, v) = camera.pixel_center(q % maps.width, q / maps.width);
                out.cloud.push(Point {
                    position: unproject(camera, pose, u, v, z),
                    color: maps.color[q],
                    label,
                });
            }
            _ => out.skipped += 1,
        }
    }
    out
}

/// Per-view hole-pixel counts of `cloud` with an explicit hole region.
pub fn hole_counts(
    cloud: &LabeledPointCloud,
    region: Option<&Aabb>,
    actions: &ActionSpace,
    camera: &CameraModel,
    splat_radius: usize,
) -> Vec<usize> {
    actions
        .views()
        .par_iter()
        .map(|view| {
            let pose = view.pose();
            let mask = hole_region_mask(region, &pose, camera);
            let mut covered = vec![false; camera.pixel_count()];
            for p in cloud.points() {
                if p.label.is_empty() {
                    continue;
                }
                if let Some((pi, pj, _)) = pixel_hit(camera, &pose, &p.position) {
                    let (i0, i1) = (pi.saturating_sub(splat_radius), (pi + splat_radius).min(camera.width - 1));
                    let (j0, j1) = (pj.saturating_sub(splat_radius), (pj + splat_radius).min(camera.height - 1));
                    for j in j0..=j1 {
                        covered[j * camera.width + i0..=j * camera.width + i1].fill(true);
                    }
                }
            }
            mask.iter().zip(&covered).filter(|(m, c)| **m && !**c).count()
        })
        .collect()
}

/// Total hole area over all action views, using the cloud's own bounds.
pub fn hole_area(cloud: &LabeledPointCloud, actions: &ActionSpace, camera: &CameraModel, splat_radius: usize) -> usize {
    hole_counts(cloud, cloud.bounds().as_ref(), actions, camera, splat_radius)
        .iter()
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_view() -> Viewpoint {
        Viewpoint::new(90.0, 0.0, 3.0, Vec3::zeros())
    }

    fn pt(p: Vec3, label: SemanticLabel, c: f32) -> Point {
        Point::new(p, [c; 3], label).unwrap()
    }

    #[test]
    fn single_point_on_axis() {
        let cam = CameraModel::default();
        let cloud = LabeledPointCloud::from_points(vec![pt(Vec3::zeros(), SemanticLabel::CHAIR, 0.2)]);
        let maps = render_views(&cloud, &axis_view(), &cam, 0);
        assert_eq!(maps.filled_count(), 1);
        let q = 239 * 640 + 319;
        assert_eq!(maps.depth[q], 3.0);
        assert_eq!(maps.seg[q], SemanticLabel::CHAIR.code());
        assert_eq!(maps.hole_count(), 0);
        maps.check_invariants(&cam).unwrap();
    }

    #[test]
    fn nearer_point_wins() {
        let cam = CameraModel::default();
        let view = axis_view();
        // Both on the optical axis: depths 3 and 2.
        let far_pt = pt(Vec3::zeros(), SemanticLabel::WALL, 0.1);
        let near_pt = pt(Vec3::new(0.0, 0.0, 1.0), SemanticLabel::TABLE, 0.9);
        for pts in [vec![far_pt, near_pt], vec![near_pt, far_pt]] {
            let maps = render_views(&LabeledPointCloud::from_points(pts), &view, &cam, 1);
            let q = 239 * 640 + 319;
            assert_eq!(maps.depth[q], 2.0);
            assert_eq!(maps.seg[q], SemanticLabel::TABLE.code());
            assert_eq!(maps.color[q], [0.9; 3]);
        }
    }

    #[test]
    fn equal_depth_keeps_lower_index() {
        let cam = CameraModel::default();
        let a = pt(Vec3::zeros(), SemanticLabel::SOFA, 0.3);
        let b = pt(Vec3::zeros(), SemanticLabel::BED, 0.6);
        let maps = render_views(&LabeledPointCloud::from_points(vec![a, b]), &axis_view(), &cam, 1);
        assert_eq!(maps.seg[239 * 640 + 319], SemanticLabel::SOFA.code());
    }

    #[test]
    fn clipping_planes() {
        let cam = CameraModel::default();
        let view = axis_view();
        // Depth 7 m is beyond the far plane; depth 0.05 m is before near.
        let cloud = LabeledPointCloud::from_points(vec![
            pt(Vec3::new(0.0, 0.0, -4.0), SemanticLabel::WALL, 0.5),
            pt(Vec3::new(0.0, 0.0, 2.95), SemanticLabel::WALL, 0.5),
        ]);
        assert_eq!(render_views(&cloud, &view, &cam, 1).filled_count(), 0);
    }

    #[test]
    fn backproject_examples() {
        let cam = CameraModel::default();
        let view = axis_view();
        let maps = ViewMaps::empty(640, 480);
        assert!(backproject(&maps, &vec![false; maps.len()], &view, &cam).cloud.is_empty());

        let mut maps = ViewMaps::empty(640, 480);
        let q = 239 * 640 + 319;
        maps.depth[q] = 3.0;
        maps.seg[q] = SemanticLabel::FLOOR.code();
        let mut mask = vec![false; maps.len()];
        mask[q] = true;
        mask[q + 1] = true; // empty pixel: skipped
        let bp = backproject(&maps, &mask, &view, &cam);
        assert_eq!(bp.cloud.len(), 1);
        assert_eq!(bp.skipped, 1);
        assert!((bp.cloud.points()[0].position - view.center).norm() < 1e-12);
    }

    #[test]
    fn hull_of_box_in_front_covers_its_projection() {
        let cam = CameraModel::default();
        let view = axis_view();
        let region = Aabb::new(Vec3::new(-0.5, -0.5, -0.5), Vec3::new(0.5, 0.5, 0.5));
        let mask = hole_region_mask(Some(&region), &view.pose(), &cam);
        let center = 239 * 640 + 319;
        assert!(mask[center]);
        assert!(!mask[0]);
        // Nearest face at depth 2.5: half-width 0.5 m spans 0.5/2.5*fx ~ 103.8 px.
        let row = 239 * 640;
        let width = (0..640).filter(|&i| mask[row + i]).count();
        let expected = 2.0 * 0.5 / 2.5 * cam.fx;
        assert!((width as f64 - expected).abs() <= 2.0, "{width} vs {expected}");
    }

    #[test]
    fn hull_clips_region_behind_camera() {
        let cam = CameraModel::default();
        let view = axis_view();
        // A box enclosing the camera: clipped hull covers the whole image.
        let region = Aabb::new(Vec3::new(-5.0, -5.0, -2.0), Vec3::new(5.0, 5.0, 5.0));
        let mask = hole_region_mask(Some(&region), &view.pose(), &cam);
        assert!(mask.iter().all(|&m| m));
        // Entirely behind the camera: nothing.
        let behind = Aabb::new(Vec3::new(-1.0, -1.0, 3.5), Vec3::new(1.0, 1.0, 4.0));
        assert!(hole_region_mask(Some(&behind), &view.pose(), &cam).iter().all(|&m| !m));
    }

    #[test]
    fn empty_cloud_has_no_holes() {
        let cam = CameraModel::default();
        let actions = ActionSpace::generate(3.0, Vec3::zeros()).unwrap();
        assert_eq!(hole_area(&LabeledPointCloud::new(), &actions, &cam, 1), 0);
    }

    #[test]
    fn hole_counts_match_full_render() {
        let cam = CameraModel::default();
        let actions = ActionSpace::generate(3.0, Vec3::zeros()).unwrap();
        let cloud: LabeledPointCloud = (0..400)
            .map(|k| {
                let (a, b) = ((k % 20) as f64 * 0.05 - 0.5, (k / 20) as f64 * 0.05 - 0.5);
                pt(Vec3::new(a, b, 0.3 * a * b), SemanticLabel::WALL, 0.5)
            })
            .collect();
        let counts = hole_counts(&cloud, cloud.bounds().as_ref(), &actions, &cam, 1);
        for (view, &n) in actions.views().iter().zip(&counts) {
            assert_eq!(render_views(&cloud, view, &cam, 1).hole_count(), n);
        }
        assert!(counts.iter().sum::<usize>() > 0);
    }
}
