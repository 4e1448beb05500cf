//! Static kd-tree for exact nearest-neighbor queries.

use rayon::prelude::*;

use crate::cloud::Vec3;

const LEAF: usize = 8;

/// Balanced kd-tree over a fixed point set. Queries return the nearest
/// point by Euclidean distance; among equidistant points the lowest input
/// index wins.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// Input indices, permuted into tree order.
    order: Vec<u32>,
    /// Split axis of the node stored at each position of `order`.
    axis: Vec<u8>,
}

impl KdTree {
    pub fn new(points: Vec<Vec3>) -> Self {
        let n = points.len();
        assert!(n < u32::MAX as usize, "too many points for the index");
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut axis = vec![0u8; n];
        build(&points, &mut order, &mut axis);
        Self { points, order, axis }
    }

    pub fn from_positions<'a>(positions: impl IntoIterator<Item = &'a Vec3>) -> Self {
        Self::new(positions.into_iter().copied().collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &Vec3 {
        &self.points[i]
    }

    /// Index of the nearest point and its squared distance.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (u32::MAX, f64::INFINITY);
        self.search(q, 0, self.order.len(), &mut best);
        Some((best.0 as usize, best.1))
    }

    /// Nearest neighbors of many queries, computed in parallel.
    pub fn nearest_all(&self, queries: &[Vec3]) -> Vec<(usize, f64)> {
        queries
            .par_iter()
            .map(|q| self.nearest(q).expect("non-empty tree"))
            .collect()
    }

    fn consider(&self, q: &Vec3, idx: u32, best: &mut (u32, f64)) {
        let d2 = (self.points[idx as usize] - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
    }

    fn search(&self, q: &Vec3, lo: usize, hi: usize, best: &mut (u32, f64)) {
        if hi - lo <= LEAF {
            for &idx in &self.order[lo..hi] {
                self.consider(q, idx, best);
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let ax = self.axis[mid] as usize;
        self.consider(q, idx, best);
        let diff = q[ax] - self.points[idx as usize][ax];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        if diff * diff <= best.1 {
            self.search(q, far.0, far.1, best);
        }
    }
}

fn build(points: &[Vec3], order: &mut [u32], axis: &mut [u8]) {
    let n = order.len();
    if n <= LEAF {
        return;
    }
    let mut lo = points[order[0] as usize];
    let mut hi = lo;
    for &i in order.iter() {
        let p = &points[i as usize];
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let spread = hi - lo;
    let ax = if spread.x >= spread.y && spread.x >= spread.z {
        0
    } else if spread.y >= spread.z {
        1
    } else {
        2
    };
    let mid = n / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a as usize][ax].total_cmp(&points[b as usize][ax]));
    axis[mid] = ax as u8;
    let (left, rest) = order.split_at_mut(mid);
    let (al, arest) = axis.split_at_mut(mid);
    build(points, left, al);
    build(points, &mut rest[1..], &mut arest[1..]);
}

/// Exhaustive nearest neighbor with the same tie rule as [`KdTree`].
pub fn brute_nearest(points: &[Vec3], q: &Vec3) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - q).norm_squared();
        if best.is_none_or(|(_, b)| d2 < b) {
            best = Some((i, d2));
        }
    }
    best
}
