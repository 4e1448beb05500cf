//! Completion quality: Chamfer distance, completeness/accuracy at radius r,
//! and voxel IoU.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cloud::{Aabb, LabeledPointCloud, Vec3};
use crate::error::{Error, Result};
use crate::label::{SemanticLabel, NUM_CLASSES};
use crate::spatial::KdTree;
use crate::voxel::{voxelize_points, GridGeometry, LabeledVoxelGrid};

pub const DEFAULT_RADII: [f64; 5] = [0.02, 0.04, 0.06, 0.08, 0.10];
pub const DEFAULT_EDGES: [f64; 5] = [0.08, 0.06, 0.04, 0.02, 0.01];

/// Squared distance from each query to its nearest point in `target`.
pub fn nearest_sq_dists(queries: &LabeledPointCloud, target: &KdTree) -> Vec<f64> {
    let q: Vec<Vec3> = queries.positions().copied().collect();
    target.nearest_all(&q).into_iter().map(|(_, d2)| d2).collect()
}

fn tree(cloud: &LabeledPointCloud) -> KdTree {
    KdTree::from_positions(cloud.positions())
}

/// Mean squared nearest-neighbor distance from `p` to `gt` plus the same
/// from `gt` to `p`.
pub fn chamfer(p: &LabeledPointCloud, gt: &LabeledPointCloud) -> Result<f64> {
    if p.is_empty() || gt.is_empty() {
        return Err(Error::UndefinedMetric("chamfer distance of an empty cloud"));
    }
    Ok(chamfer_from(&nearest_sq_dists(p, &tree(gt)), &nearest_sq_dists(gt, &tree(p))))
}

fn chamfer_from(p_to_gt: &[f64], gt_to_p: &[f64]) -> f64 {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    mean(p_to_gt) + mean(gt_to_p)
}

fn fraction_within(d2: &[f64], r: f64) -> f64 {
    d2.iter().filter(|&&d| d.sqrt() < r).count() as f64 / d2.len() as f64
}

fn check_radius(r: f64) -> Result<()> {
    if r > 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(Error::param("r", format!("must be positive, got {r}")))
    }
}

/// Fraction of ground-truth points closer than `r` to the prediction.
/// An empty prediction completes nothing.
pub fn completeness(p: &LabeledPointCloud, gt: &LabeledPointCloud, r: f64) -> Result<f64> {
    check_radius(r)?;
    if gt.is_empty() {
        return Err(Error::UndefinedMetric("completeness against an empty ground truth"));
    }
    if p.is_empty() {
        return Ok(0.0);
    }
    Ok(fraction_within(&nearest_sq_dists(gt, &tree(p)), r))
}

/// Fraction of predicted points closer than `r` to the ground truth.
pub fn accuracy(p: &LabeledPointCloud, gt: &LabeledPointCloud, r: f64) -> Result<f64> {
    check_radius(r)?;
    if p.is_empty() || gt.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty cloud"));
    }
    Ok(fraction_within(&nearest_sq_dists(p, &tree(gt)), r))
}

/// Evaluation grid for edge `e`: the scene box padded by `e / 2` on every
/// side.
pub fn eval_geometry(scene_box: &Aabb, e: f64) -> Result<GridGeometry> {
    if !(e > 0.0 && e.is_finite()) {
        return Err(Error::param("e", format!("must be positive, got {e}")));
    }
    let half = Vec3::repeat(e / 2.0);
    GridGeometry::covering(&Aabb::new(scene_box.min - half, scene_box.max + half), e)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelIou {
    pub edge: f64,
    pub completion: f64,
    /// Indexed by class (`0` is ceiling); `None` where the class occupies no
    /// cell in either cloud.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the classes that are present.
    pub mean: f64,
}

/// Completion IoU over occupied cells and per-class IoU over cell labels on
/// a shared grid.
pub fn voxel_iou(p: &LabeledPointCloud, gt: &LabeledPointCloud, geometry: &GridGeometry) -> Result<VoxelIou> {
    let a = voxelize_points(p, geometry)?;
    let b = voxelize_points(gt, geometry)?;
    Ok(iou_of_grids(&a, &b))
}

pub fn iou_of_grids(pred: &LabeledVoxelGrid, gt: &LabeledVoxelGrid) -> VoxelIou {
    let (pa, gb) = (pred.occupied_cells(), gt.occupied_cells());
    let (mut i, mut j) = (0, 0);
    let (mut inter, mut union) = (0usize, 0usize);
    let mut tp = [0usize; NUM_CLASSES];
    let mut fp = [0usize; NUM_CLASSES];
    let mut fn_ = [0usize; NUM_CLASSES];
    let class = |l: SemanticLabel| l.class_index();
    // Both cell lists are sorted by linear index.
    while i < pa.len() || j < gb.len() {
        let ka = pa.get(i).map_or(usize::MAX, |c| c.0);
        let kb = gb.get(j).map_or(usize::MAX, |c| c.0);
        union += 1;
        if ka == kb {
            inter += 1;
            let (la, lb) = (pa[i].1.label, gb[j].1.label);
            if la == lb {
                if let Some(c) = class(la) {
                    tp[c] += 1;
                }
            } else {
                if let Some(c) = class(la) {
                    fp[c] += 1;
                }
                if let Some(c) = class(lb) {
                    fn_[c] += 1;
                }
            }
            i += 1;
            j += 1;
        } else if ka < kb {
            if let Some(c) = class(pa[i].1.label) {
                fp[c] += 1;
            }
            i += 1;
        } else {
            if let Some(c) = class(gb[j].1.label) {
                fn_[c] += 1;
            }
            j += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..NUM_CLASSES)
        .map(|c| {
            let denom = tp[c] + fp[c] + fn_[c];
            (denom > 0).then(|| tp[c] as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    VoxelIou {
        edge: pred.edge(),
        completion: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        mean: if present.is_empty() {
            1.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        },
        per_class,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cd: f64,
    /// `(r, C_r)` pairs.
    pub completeness: Vec<(f64, f64)>,
    /// `(r, A_r)` pairs.
    pub accuracy: Vec<(f64, f64)>,
    pub iou: Vec<VoxelIou>,
}

/// All metrics of `p` against `gt`, with IoU grids spanning `scene_box`.
pub fn evaluate(
    p: &LabeledPointCloud,
    gt: &LabeledPointCloud,
    scene_box: &Aabb,
    radii: &[f64],
    edges: &[f64],
) -> Result<MetricsReport> {
    if p.is_empty() || gt.is_empty() {
        return Err(Error::UndefinedMetric("evaluation of an empty cloud"));
    }
    for &r in radii {
        check_radius(r)?;
    }
    let p_to_gt = nearest_sq_dists(p, &tree(gt));
    let gt_to_p = nearest_sq_dists(gt, &tree(p));
    let iou = edges
        .iter()
        .map(|&e| voxel_iou(p, gt, &eval_geometry(scene_box, e)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        cd: chamfer_from(&p_to_gt, &gt_to_p),
        completeness: radii.iter().map(|&r| (r, fraction_within(&gt_to_p, r))).collect(),
        accuracy: radii.iter().map(|&r| (r, fraction_within(&p_to_gt, r))).collect(),
        iou,
    })
}

impl MetricsReport {
    pub fn completeness_at(&self, r: f64) -> Option<f64> {
        self.completeness.iter().find(|(x, _)| (x - r).abs() < 1e-12).map(|p| p.1)
    }

    /// One `key=value` line per metric.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "cd={:.9}", self.cd);
        for (r, c) in &self.completeness {
            let _ = writeln!(out, "c_{r:.2}={c:.6}");
        }
        for (r, a) in &self.accuracy {
            let _ = writeln!(out, "a_{r:.2}={a:.6}");
        }
        for iou in &self.iou {
            let e = iou.edge;
            let _ = writeln!(out, "iou_e{e:.2}_completion={:.6}", iou.completion);
            for (c, v) in iou.per_class.iter().enumerate() {
                let name = SemanticLabel::from_class_index(c).expect("class index").name();
                match v {
                    Some(v) => {
                        let _ = writeln!(out, "iou_e{e:.2}_{name}={v:.6}");
                    }
                    None => {
                        let _ = writeln!(out, "iou_e{e:.2}_{name}=absent");
                    }
                }
            }
            let _ = writeln!(out, "iou_e{e:.2}_mean={:.6}", iou.mean);
        }
        out
    }
}
