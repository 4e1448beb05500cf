//! Voxelization with majority labels and the nearest-to-corner tie rule.
//!
//! A cell `g` with minimum corner `p_g` takes the label carried by most of
//! its points. When several labels share the maximal count, the cell takes
//! the label of the point (among those tied labels) nearest to `p_g`; equal
//! distances fall back to the lowest point index.

use serde::{Deserialize, Serialize};

use crate::cloud::{Aabb, LabeledPointCloud, Point, Vec3};
use crate::error::{Error, Result};
use crate::label::{SemanticLabel, NUM_CLASSES};

/// A regular grid of cubic cells with half-open extents
/// `[origin + k*edge, origin + (k+1)*edge)` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub edge: f64,
    pub origin: Vec3,
    pub dims: [usize; 3],
}

impl GridGeometry {
    pub fn new(edge: f64, origin: Vec3, dims: [usize; 3]) -> Result<Self> {
        if !(edge > 0.0 && edge.is_finite()) {
            return Err(Error::param("edge", format!("must be positive, got {edge}")));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::param("dims", format!("all must be >= 1, got {dims:?}")));
        }
        if !origin.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("grid origin"));
        }
        Ok(Self { edge, origin, dims })
    }

    /// Smallest grid with the given edge covering `region`, anchored at its
    /// minimum corner.
    pub fn covering(region: &Aabb, edge: f64) -> Result<Self> {
        let size = region.size();
        let dims = [0, 1, 2].map(|i| ((size[i] / edge).ceil() as usize).max(1));
        Self::new(edge, region.min, dims)
    }

    pub fn cell_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn extent(&self) -> Aabb {
        Aabb::from_min_size(
            self.origin,
            Vec3::new(
                self.dims[0] as f64 * self.edge,
                self.dims[1] as f64 * self.edge,
                self.dims[2] as f64 * self.edge,
            ),
        )
    }

    /// Integer cell coordinates of `p`, `None` outside the grid.
    pub fn cell_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for i in 0..3 {
            let k = ((p[i] - self.origin[i]) / self.edge).floor();
            if !(k >= 0.0 && k < self.dims[i] as f64) {
                return None;
            }
            out[i] = k as usize;
        }
        Some(out)
    }

    pub fn linear(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    pub fn unlinear(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let yz = idx / self.dims[0];
        [x, yz % self.dims[1], yz / self.dims[1]]
    }

    /// Minimum-coordinate vertex of a cell.
    pub fn cell_min_corner(&self, c: [usize; 3]) -> Vec3 {
        Vec3::new(
            self.origin.x + c[0] as f64 * self.edge,
            self.origin.y + c[1] as f64 * self.edge,
            self.origin.z + c[2] as f64 * self.edge,
        )
    }

    pub fn cell_center(&self, c: [usize; 3]) -> Vec3 {
        self.cell_min_corner(c) + Vec3::repeat(0.5 * self.edge)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelCell {
    pub label: SemanticLabel,
    pub count: u32,
}

/// Sparse labeled occupancy: only occupied cells are stored, sorted by
/// linear index.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVoxelGrid {
    geometry: GridGeometry,
    cells: Vec<(usize, VoxelCell)>,
    out_of_bounds: usize,
}

impl LabeledVoxelGrid {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn edge(&self) -> f64 {
        self.geometry.edge
    }

    /// Occupied cells as `(linear index, cell)` in increasing index order.
    pub fn occupied_cells(&self) -> &[(usize, VoxelCell)] {
        &self.cells
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.len()
    }

    /// Number of input points that fell outside the grid.
    pub fn out_of_bounds(&self) -> usize {
        self.out_of_bounds
    }

    pub fn get(&self, c: [usize; 3]) -> Option<VoxelCell> {
        let idx = self.geometry.linear(c);
        self.cells
            .binary_search_by_key(&idx, |(k, _)| *k)
            .ok()
            .map(|i| self.cells[i].1)
    }

    pub fn is_occupied(&self, c: [usize; 3]) -> bool {
        self.get(c).is_some()
    }

    pub fn label(&self, c: [usize; 3]) -> SemanticLabel {
        self.get(c).map_or(SemanticLabel::EMPTY, |cell| cell.label)
    }

    pub fn total_count(&self) -> usize {
        self.cells.iter().map(|(_, c)| c.count as usize).sum()
    }
}

/// Picks the label of a group of points falling in one cell.
///
/// `members` must be non-empty and in increasing point-index order.
pub fn cell_label(points: &[Point], members: &[usize], corner: &Vec3) -> SemanticLabel {
    let mut counts = [0u32; NUM_CLASSES + 1];
    for &i in members {
        counts[points[i].label.code() as usize] += 1;
    }
    let best = *counts.iter().max().expect("non-empty counts");
    let tied: Vec<usize> = (0..counts.len()).filter(|&l| counts[l] == best).collect();
    if tied.len() == 1 {
        return SemanticLabel::new(tied[0] as u8).expect("valid code");
    }
    let mut winner: Option<(f64, usize)> = None;
    for &i in members {
        let p = &points[i];
        if counts[p.label.code() as usize] != best {
            continue;
        }
        let d = (p.position - corner).norm();
        // Strict comparison keeps the lowest index on equal distance.
        if winner.is_none_or(|(wd, _)| d < wd) {
            winner = Some((d, i));
        }
    }
    points[winner.expect("tied label has members").1].label
}

fn check_finite(cloud: &LabeledPointCloud) -> Result<()> {
    for (i, p) in cloud.iter().enumerate() {
        if !p.position.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "point {i} has non-finite coordinates"
            )));
        }
    }
    Ok(())
}

/// Groups point indices by cell; returns `(linear cell, members)` sorted by
/// cell, members in index order, plus the out-of-grid count.
fn group_by_cell(
    cloud: &LabeledPointCloud,
    geometry: &GridGeometry,
) -> (Vec<(usize, Vec<usize>)>, usize) {
    let mut keyed: Vec<(usize, usize)> = Vec::with_capacity(cloud.len());
    let mut outside = 0;
    for (i, p) in cloud.iter().enumerate() {
        match geometry.cell_of(&p.position) {
            Some(c) => keyed.push((geometry.linear(c), i)),
            None => outside += 1,
        }
    }
    keyed.sort_unstable();
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (key, i) in keyed {
        match groups.last_mut() {
            Some((k, members)) if *k == key => members.push(i),
            _ => groups.push((key, vec![i])),
        }
    }
    (groups, outside)
}

/// Voxelizes a labeled cloud onto the given grid.
pub fn voxelize_points(
    cloud: &LabeledPointCloud,
    geometry: &GridGeometry,
) -> Result<LabeledVoxelGrid> {
    check_finite(cloud)?;
    let (groups, out_of_bounds) = group_by_cell(cloud, geometry);
    let points = cloud.points();
    let cells = groups
        .into_iter()
        .map(|(key, members)| {
            let corner = geometry.cell_min_corner(geometry.unlinear(key));
            let label = cell_label(points, &members, &corner);
            (
                key,
                VoxelCell {
                    label,
                    count: members.len() as u32,
                },
            )
        })
        .collect();
    Ok(LabeledVoxelGrid {
        geometry: *geometry,
        cells,
        out_of_bounds,
    })
}

/// Convenience wrapper building the geometry first.
pub fn voxelize(
    cloud: &LabeledPointCloud,
    edge: f64,
    origin: Vec3,
    dims: [usize; 3],
) -> Result<LabeledVoxelGrid> {
    voxelize_points(cloud, &GridGeometry::new(edge, origin, dims)?)
}

/// Replaces the points of every occupied cell by their centroid with the mean
/// color and the cell label.
///
/// Cells live on the lattice anchored at the world origin. Output order
/// follows the cell ordering (x fastest).
pub fn voxel_downsample(cloud: &LabeledPointCloud, edge: f64) -> Result<LabeledPointCloud> {
    voxel_downsample_on(cloud, edge, &Vec3::zeros())
}

/// [`voxel_downsample`] on the lattice anchored at `origin`, with cells
/// computed exactly as [`GridGeometry::cell_of`] does.
pub fn voxel_downsample_on(cloud: &LabeledPointCloud, edge: f64, origin: &Vec3) -> Result<LabeledPointCloud> {
    if !(edge > 0.0 && edge.is_finite()) {
        return Err(Error::param("edge", format!("must be positive, got {edge}")));
    }
    check_finite(cloud)?;
    let points = cloud.points();
    let cell = |p: &Vec3| -> [i64; 3] { [0, 1, 2].map(|i| ((p[i] - origin[i]) / edge).floor() as i64) };
    let mut keyed: Vec<([i64; 3], usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = cell(&p.position);
            ([c[2], c[1], c[0]], i)
        })
        .collect();
    keyed.sort_unstable();

    let mut out = LabeledPointCloud::with_capacity(keyed.len());
    let mut start = 0;
    while start < keyed.len() {
        let key = keyed[start].0;
        let mut end = start;
        while end < keyed.len() && keyed[end].0 == key {
            end += 1;
        }
        let members: Vec<usize> = keyed[start..end].iter().map(|&(_, i)| i).collect();
        let corner = Vec3::new(
            origin.x + key[2] as f64 * edge,
            origin.y + key[1] as f64 * edge,
            origin.z + key[0] as f64 * edge,
        );
        let n = members.len() as f64;
        let mut centroid = Vec3::zeros();
        let mut color = [0f64; 3];
        for &i in &members {
            centroid += points[i].position;
            for (acc, c) in color.iter_mut().zip(points[i].color) {
                *acc += c as f64;
            }
        }
        centroid /= n;
        let member_cell = [key[2], key[1], key[0]];
        if cell(&centroid) != member_cell {
            // Rounding pushed the mean across a cell face; use the member
            // nearest to it instead.
            centroid = members
                .iter()
                .map(|&i| points[i].position)
                .min_by(|a, b| {
                    (a - centroid)
                        .norm_squared()
                        .total_cmp(&(b - centroid).norm_squared())
                })
                .expect("non-empty group");
        }
        out.push(Point {
            position: centroid,
            color: color.map(|c| (c / n) as f32),
            label: cell_label(points, &members, &corner),
        });
        start = end;
    }
    Ok(out)
}
