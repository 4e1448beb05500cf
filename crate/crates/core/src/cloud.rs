//! Colored, semantically labeled point clouds.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::SemanticLabel;

pub type Vec3 = Vector3<f64>;

/// RGB color with components in `[0, 1]`.
pub type Rgb = [f32; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub position: Vec3,
    pub color: Rgb,
    pub label: SemanticLabel,
}

impl Point {
    /// Builds a point, clamping the color into `[0, 1]` and rejecting
    /// non-finite coordinates.
    pub fn new(position: Vec3, color: Rgb, label: SemanticLabel) -> Result<Self> {
        if !position.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("point position"));
        }
        Ok(Self {
            position,
            color: clamp_color(color),
            label,
        })
    }
}

pub fn clamp_color(c: Rgb) -> Rgb {
    c.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
}

/// Axis-aligned box, meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn from_point(p: Vec3) -> Self {
        Self { min: p, max: p }
    }

    /// Box of the given size whose minimum corner is `min`.
    pub fn from_min_size(min: Vec3, size: Vec3) -> Self {
        Self {
            min,
            max: min + size,
        }
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn size(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn translated(&self, offset: &Vec3) -> Aabb {
        Aabb {
            min: self.min + offset,
            max: self.max + offset,
        }
    }

    /// The eight corners, bit `i` of the index selecting max on axis `i`.
    pub fn corners(&self) -> [Vec3; 8] {
        std::array::from_fn(|k| {
            Vec3::new(
                if k & 1 == 0 { self.min.x } else { self.max.x },
                if k & 2 == 0 { self.min.y } else { self.max.y },
                if k & 4 == 0 { self.min.z } else { self.max.z },
            )
        })
    }

    /// Corner index pairs forming the twelve edges.
    pub const EDGES: [(usize, usize); 12] = [
        (0, 1),
        (2, 3),
        (4, 5),
        (6, 7),
        (0, 2),
        (1, 3),
        (4, 6),
        (5, 7),
        (0, 4),
        (1, 5),
        (2, 6),
        (3, 7),
    ];
}

/// An ordered point sequence together with its bounding box.
///
/// The bounds are maintained on every insertion so they always contain every
/// point; an empty cloud has no bounds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledPointCloud {
    points: Vec<Point>,
    bounds: Option<Aabb>,
}

impl LabeledPointCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            points: Vec::with_capacity(n),
            bounds: None,
        }
    }

    pub fn from_points(points: Vec<Point>) -> Self {
        let mut cloud = Self::with_capacity(points.len());
        cloud.extend(points);
        cloud
    }

    pub fn push(&mut self, point: Point) {
        match &mut self.bounds {
            Some(b) => b.grow(&point.position),
            None => self.bounds = Some(Aabb::from_point(point.position)),
        }
        self.points.push(point);
    }

    pub fn extend<I: IntoIterator<Item = Point>>(&mut self, points: I) {
        for p in points {
            self.push(p);
        }
    }

    /// Appends all points of `other`, keeping their order.
    pub fn append(&mut self, other: &LabeledPointCloud) {
        self.points.reserve(other.len());
        self.extend(other.points.iter().copied());
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn bounds(&self) -> Option<Aabb> {
        self.bounds
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }

    pub fn positions(&self) -> impl Iterator<Item = &Vec3> + '_ {
        self.points.iter().map(|p| &p.position)
    }

    /// Keeps the points for which `keep` returns true, preserving order.
    pub fn filtered(&self, mut keep: impl FnMut(usize, &Point) -> bool) -> LabeledPointCloud {
        LabeledPointCloud::from_points(
            self.points
                .iter()
                .enumerate()
                .filter(|(i, p)| keep(*i, p))
                .map(|(_, p)| *p)
                .collect(),
        )
    }

    pub fn translated(&self, offset: &Vec3) -> LabeledPointCloud {
        LabeledPointCloud::from_points(
            self.points
                .iter()
                .map(|p| Point {
                    position: p.position + offset,
                    ..*p
                })
                .collect(),
        )
    }
}

impl FromIterator<Point> for LabeledPointCloud {
    fn from_iter<T: IntoIterator<Item = Point>>(iter: T) -> Self {
        let mut cloud = LabeledPointCloud::new();
        cloud.extend(iter);
        cloud
    }
}

impl<'a> IntoIterator for &'a LabeledPointCloud {
    type Item = &'a Point;
    type IntoIter = std::slice::Iter<'a, Point>;

    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}
