//! Hole filling for one view, in three stages: segmentation, then depth,
//! then color.
//!
//! The segmentation stage sees `(S, I, D, S^c, Ω)`, the depth stage
//! `(D, I, D^c, Ŝ, Ω)` and the color stage `(I, D^c, Ŝ, Ω)`, where `D^c` and
//! `S^c` are the projected occupancy volume. Implementations only decide
//! values inside Ω; everything outside is carried over from the input.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::cloud::Rgb;
use crate::error::{Error, Result};
use crate::label::{SemanticLabel, NUM_CLASSES, UNKNOWN_CODE};
use crate::render::ViewMaps;
use crate::volume::{ProjectedMaps, Scores};

pub const DIFFUSION_TOL: f64 = 1e-4;
pub const DIFFUSION_MAX_ITERS: usize = 500;

/// Projected volume for one view. Only pixels inside Ω need be set.
#[derive(Clone, Debug, PartialEq)]
pub struct Guidance {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub seg: Vec<Scores>,
}

impl Guidance {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            seg: vec![[0.0; NUM_CLASSES]; width * height],
        }
    }

    /// Guidance holding `values` at `pixels` and nothing elsewhere.
    pub fn at_pixels(width: usize, height: usize, pixels: &[usize], values: Vec<(f64, Scores)>) -> Self {
        let mut g = Self::empty(width, height);
        for (&q, (d, s)) in pixels.iter().zip(values) {
            g.depth[q] = d;
            g.seg[q] = s;
        }
        g
    }

    pub fn mass(&self, q: usize) -> f64 {
        self.seg[q].iter().sum()
    }
}

impl From<ProjectedMaps> for Guidance {
    fn from(p: ProjectedMaps) -> Self {
        Self {
            width: p.width,
            height: p.height,
            depth: p.depth,
            seg: p.seg,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct InpaintRequest<'a> {
    pub maps: &'a ViewMaps,
    pub guidance: Option<&'a Guidance>,
    pub near: f64,
    pub far: f64,
}

impl InpaintRequest<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.maps.width * self.maps.height;
        let lens = [self.maps.depth.len(), self.maps.color.len(), self.maps.seg.len(), self.maps.hole.len()];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::GeometryMismatch("map channels differ in size".into()));
        }
        if let Some(g) = self.guidance {
            if g.width != self.maps.width || g.height != self.maps.height || g.depth.len() != n || g.seg.len() != n {
                return Err(Error::GeometryMismatch("guidance does not match the view".into()));
            }
        }
        Ok(())
    }

    /// Pixels outside Ω carrying data.
    pub fn known(&self) -> Vec<bool> {
        (0..self.maps.len())
            .map(|q| !self.maps.hole[q] && self.maps.depth[q] > 0.0 && self.maps.seg[q] != UNKNOWN_CODE)
            .collect()
    }
}

pub struct SegStage<'a> {
    pub seg: &'a [u8],
    pub color: &'a [Rgb],
    pub depth: &'a [f32],
    pub guide_seg: Option<&'a [Scores]>,
    pub hole: &'a [bool],
    pub width: usize,
    pub height: usize,
}

pub struct DepthStage<'a> {
    pub depth: &'a [f32],
    pub color: &'a [Rgb],
    pub guide_depth: Option<&'a [f64]>,
    pub seg_hat: &'a [u8],
    pub hole: &'a [bool],
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

pub struct ColorStage<'a> {
    pub color: &'a [Rgb],
    pub guide_depth: Option<&'a [f64]>,
    pub seg_hat: &'a [u8],
    pub hole: &'a [bool],
    pub width: usize,
    pub height: usize,
}

/// A three-stage view inpainter. Each stage returns a full-size channel;
/// only entries inside Ω are read. A pixel left at depth `0` or label
/// [`UNKNOWN_CODE`] counts as unfillable.
pub trait Inpainter: Send + Sync {
    fn name(&self) -> &'static str;

    fn needs_guidance(&self) -> bool {
        false
    }

    fn fill_seg(&self, input: &SegStage<'_>) -> Result<Vec<u8>>;
    fn fill_depth(&self, input: &DepthStage<'_>) -> Result<Vec<f32>>;
    fn fill_color(&self, input: &ColorStage<'_>) -> Result<Vec<Rgb>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintedMaps {
    /// Input maps with Ω filled; pixels that could not be filled stay holes.
    pub maps: ViewMaps,
    pub filled: Vec<bool>,
    pub unfillable: usize,
}

impl InpaintedMaps {
    pub fn filled_count(&self) -> usize {
        self.filled.iter().filter(|&&f| f).count()
    }
}

/// Runs the three stages in order and assembles the result.
pub fn inpaint_view(req: &InpaintRequest<'_>, inpainter: &dyn Inpainter) -> Result<InpaintedMaps> {
    req.validate()?;
    let m = req.maps;
    let mut out = InpaintedMaps {
        maps: m.clone(),
        filled: vec![false; m.len()],
        unfillable: 0,
    };
    if !m.hole.iter().any(|&h| h) {
        return Ok(out);
    }
    if inpainter.needs_guidance() && req.guidance.is_none() {
        return Err(Error::InvalidInput(format!("{} inpainter requires guidance", inpainter.name())));
    }
    let seg_hat = inpainter.fill_seg(&SegStage {
        seg: &m.seg,
        color: &m.color,
        depth: &m.depth,
        guide_seg: req.guidance.map(|g| g.seg.as_slice()),
        hole: &m.hole,
        width: m.width,
        height: m.height,
    })?;
    // Later stages see Ŝ, which equals S outside Ω.
    let mut seg_full = m.seg.clone();
    for q in 0..m.len() {
        if m.hole[q] {
            seg_full[q] = seg_hat[q];
        }
    }
    let depth_hat = inpainter.fill_depth(&DepthStage {
        depth: &m.depth,
        color: &m.color,
        guide_depth: req.guidance.map(|g| g.depth.as_slice()),
        seg_hat: &seg_full,
        hole: &m.hole,
        width: m.width,
        height: m.height,
        near: req.near,
        far: req.far,
    })?;
    let color_hat = inpainter.fill_color(&ColorStage {
        color: &m.color,
        guide_depth: req.guidance.map(|g| g.depth.as_slice()),
        seg_hat: &seg_full,
        hole: &m.hole,
        width: m.width,
        height: m.height,
    })?;
    let tol = 1e-6;
    for q in 0..m.len() {
        if !m.hole[q] {
            continue;
        }
        let (d, s) = (depth_hat[q], seg_hat[q]);
        let ok = SemanticLabel::new(s).is_ok_and(|l| !l.is_empty())
            && d as f64 >= req.near - tol
            && d as f64 <= req.far + tol;
        if ok {
            out.maps.depth[q] = d;
            out.maps.seg[q] = s;
            out.maps.color[q] = crate::cloud::clamp_color(color_hat[q]);
            out.maps.hole[q] = false;
            out.filled[q] = true;
        } else {
            out.unfillable += 1;
        }
    }
    Ok(out)
}

/// Copies ground-truth maps of the same view into Ω.
#[derive(Clone, Debug)]
pub struct OracleInpainter {
    pub gt: ViewMaps,
}

impl OracleInpainter {
    pub fn new(gt: ViewMaps) -> Self {
        Self { gt }
    }

    fn check(&self, width: usize, height: usize) -> Result<()> {
        if self.gt.width != width || self.gt.height != height {
            return Err(Error::GeometryMismatch(format!(
                "ground truth is {}x{}, view is {width}x{height}",
                self.gt.width, self.gt.height
            )));
        }
        Ok(())
    }
}

impl Inpainter for OracleInpainter {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn fill_seg(&self, input: &SegStage<'_>) -> Result<Vec<u8>> {
        self.check(input.width, input.height)?;
        Ok(self.gt.seg.clone())
    }

    fn fill_depth(&self, input: &DepthStage<'_>) -> Result<Vec<f32>> {
        self.check(input.width, input.height)?;
        Ok(self.gt.depth.clone())
    }

    fn fill_color(&self, input: &ColorStage<'_>) -> Result<Vec<Rgb>> {
        self.check(input.width, input.height)?;
        Ok(self.gt.color.clone())
    }
}

/// Harmonic fill of depth and color; labels spread from the nearest known
/// pixel.
#[derive(Clone, Copy, Debug, Default)]
pub struct DiffusionInpainter;

impl Inpainter for DiffusionInpainter {
    fn name(&self) -> &'static str {
        "diffusion"
    }

    fn fill_seg(&self, input: &SegStage<'_>) -> Result<Vec<u8>> {
        let known = known_from(input.hole, |q| input.depth[q] > 0.0 && input.seg[q] != UNKNOWN_CODE);
        nearest_known_labels(input.width, input.height, input.hole, &known, input.seg)
    }

    fn fill_depth(&self, input: &DepthStage<'_>) -> Result<Vec<f32>> {
        let known = known_from(input.hole, |q| input.depth[q] > 0.0);
        diffuse_depth(input, input.hole, &known, input.depth)
    }

    fn fill_color(&self, input: &ColorStage<'_>) -> Result<Vec<Rgb>> {
        let known = known_from(input.hole, |q| input.seg_hat[q] != UNKNOWN_CODE);
        diffuse_color(input.width, input.height, input.hole, &known, input.color)
    }
}

/// Uses the projected volume where it carries enough mass, falling back to
/// the diffusion rules elsewhere.
///
/// Labels come from `argmax S^c` where `sum S^c > 0.5`, depth from `D^c`
/// at the same pixels, and colors from the mean color of known pixels with
/// the same label.
#[derive(Clone, Copy, Debug)]
pub struct VolumeGuidedInpainter {
    pub min_mass: f64,
}

impl Default for VolumeGuidedInpainter {
    fn default() -> Self {
        Self { min_mass: 0.5 }
    }
}

impl Inpainter for VolumeGuidedInpainter {
    fn name(&self) -> &'static str {
        "volume-guided"
    }

    fn needs_guidance(&self) -> bool {
        true
    }

    fn fill_seg(&self, input: &SegStage<'_>) -> Result<Vec<u8>> {
        let guide = input.guide_seg.ok_or_else(|| Error::InvalidInput("missing segmentation guidance".into()))?;
        let known = known_from(input.hole, |q| input.depth[q] > 0.0 && input.seg[q] != UNKNOWN_CODE);
        let mut out = nearest_known_labels(input.width, input.height, input.hole, &known, input.seg)?;
        for q in 0..out.len() {
            if input.hole[q] && guide[q].iter().sum::<f64>() > self.min_mass {
                if let Some(l) = crate::volume::argmax_label(&guide[q]) {
                    out[q] = l.code();
                }
            }
        }
        Ok(out)
    }

    fn fill_depth(&self, input: &DepthStage<'_>) -> Result<Vec<f32>> {
        let guide = input.guide_depth.ok_or_else(|| Error::InvalidInput("missing depth guidance".into()))?;
        // This stage does not see S^c; a guide depth inside the depth range
        // is taken as valid.
        let mut depth = input.depth.to_vec();
        let mut rest = input.hole.to_vec();
        let mut known = known_from(input.hole, |q| input.depth[q] > 0.0);
        for q in 0..depth.len() {
            let d = guide[q];
            if input.hole[q] && d >= input.near && d <= input.far {
                depth[q] = d as f32;
                rest[q] = false;
                known[q] = true;
            }
        }
        if !rest.iter().any(|&r| r) {
            return Ok(depth);
        }
        let filled = diffuse_depth(input, &rest, &known, &depth)?;
        for q in 0..depth.len() {
            if rest[q] {
                depth[q] = filled[q];
            }
        }
        Ok(depth)
    }

    fn fill_color(&self, input: &ColorStage<'_>) -> Result<Vec<Rgb>> {
        let known = known_from(input.hole, |q| input.seg_hat[q] != UNKNOWN_CODE);
        let mut sums = [[0f64; 4]; 256];
        for q in 0..known.len() {
            if known[q] {
                let acc = &mut sums[input.seg_hat[q] as usize];
                for c in 0..3 {
                    acc[c] += input.color[q][c] as f64;
                }
                acc[3] += 1.0;
            }
        }
        let mut out = input.color.to_vec();
        let mut rest = vec![false; out.len()];
        for q in 0..out.len() {
            if !input.hole[q] {
                continue;
            }
            let acc = sums[input.seg_hat[q] as usize];
            if input.seg_hat[q] != UNKNOWN_CODE && acc[3] > 0.0 {
                out[q] = [0, 1, 2].map(|c| (acc[c] / acc[3]) as f32);
            } else {
                rest[q] = true;
            }
        }
        if rest.iter().any(|&r| r) {
            let filled = diffuse_color(input.width, input.height, &rest, &known, input.color)?;
            for q in 0..out.len() {
                if rest[q] {
                    out[q] = filled[q];
                }
            }
        }
        Ok(out)
    }
}

/// Selects an inpainter by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InpainterKind {
    Oracle,
    Diffusion,
    VolumeGuided,
}

impl InpainterKind {
    pub fn name(self) -> &'static str {
        match self {
            InpainterKind::Oracle => "oracle",
            InpainterKind::Diffusion => "diffusion",
            InpainterKind::VolumeGuided => "volume-guided",
        }
    }

    pub fn needs_guidance(self) -> bool {
        self == InpainterKind::VolumeGuided
    }
}

impl std::str::FromStr for InpainterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(InpainterKind::Oracle),
            "diffusion" => Ok(InpainterKind::Diffusion),
            "volume-guided" => Ok(InpainterKind::VolumeGuided),
            other => Err(Error::Config(format!("unknown inpainter `{other}`"))),
        }
    }
}

fn known_from(hole: &[bool], has_data: impl Fn(usize) -> bool) -> Vec<bool> {
    (0..hole.len()).map(|q| !hole[q] && has_data(q)).collect()
}

fn neighbors(q: usize, width: usize, height: usize) -> impl Iterator<Item = usize> {
    let (i, j) = (q % width, q / width);
    [
        (i > 0).then(|| q - 1),
        (i + 1 < width).then(|| q + 1),
        (j > 0).then(|| q - width),
        (j + 1 < height).then(|| q + width),
    ]
    .into_iter()
    .flatten()
}

/// For every hole pixel, the known pixel reached first by a breadth-first
/// search through hole pixels seeded with all known pixels in index order.
/// Unreachable pixels map to `None`.
fn nearest_known(width: usize, height: usize, hole: &[bool], known: &[bool]) -> Result<Vec<Option<u32>>> {
    let mut src: Vec<Option<u32>> = vec![None; hole.len()];
    let mut queue = VecDeque::new();
    for q in 0..hole.len() {
        if known[q] {
            src[q] = Some(q as u32);
            queue.push_back(q);
        }
    }
    if queue.is_empty() && hole.iter().any(|&h| h) {
        return Err(Error::Unfillable);
    }
    while let Some(q) = queue.pop_front() {
        for nb in neighbors(q, width, height) {
            if hole[nb] && src[nb].is_none() {
                src[nb] = src[q];
                queue.push_back(nb);
            }
        }
    }
    Ok(src)
}

fn nearest_known_labels(width: usize, height: usize, hole: &[bool], known: &[bool], seg: &[u8]) -> Result<Vec<u8>> {
    let src = nearest_known(width, height, hole, known)?;
    Ok((0..seg.len())
        .map(|q| {
            if hole[q] {
                src[q].map_or(UNKNOWN_CODE, |s| seg[s as usize])
            } else {
                seg[q]
            }
        })
        .collect())
}

fn diffuse_depth(input: &DepthStage<'_>, hole: &[bool], known: &[bool], depth: &[f32]) -> Result<Vec<f32>> {
    let values: Vec<[f64; 1]> = depth.iter().map(|&d| [d as f64]).collect();
    let filled = diffuse(input.width, input.height, hole, known, &values)?;
    Ok((0..depth.len())
        .map(|q| match (hole[q], filled[q]) {
            (true, Some([d])) => d as f32,
            (true, None) => 0.0,
            (false, _) => depth[q],
        })
        .collect())
}

fn diffuse_color(width: usize, height: usize, hole: &[bool], known: &[bool], color: &[Rgb]) -> Result<Vec<Rgb>> {
    let values: Vec<[f64; 3]> = color.iter().map(|c| c.map(|x| x as f64)).collect();
    let filled = diffuse(width, height, hole, known, &values)?;
    Ok((0..color.len())
        .map(|q| match (hole[q], filled[q]) {
            (true, Some(c)) => c.map(|x| x as f32),
            (true, None) => [0.0; 3],
            (false, _) => color[q],
        })
        .collect())
}

/// Jacobi iteration of the discrete Laplace equation over `hole` with the
/// known pixels as fixed boundary values. Pixels that are neither hole nor
/// known take no part. Starts from the nearest known value and stops once
/// no value moves by more than [`DIFFUSION_TOL`] or after
/// [`DIFFUSION_MAX_ITERS`] sweeps. Hole components without a known
/// neighbor are returned as `None`.
pub fn diffuse<const C: usize>(
    width: usize,
    height: usize,
    hole: &[bool],
    known: &[bool],
    values: &[[f64; C]],
) -> Result<Vec<Option<[f64; C]>>> {
    let src = nearest_known(width, height, hole, known)?;
    let cells: Vec<usize> = (0..hole.len()).filter(|&q| hole[q] && src[q].is_some()).collect();
    let mut slot = vec![u32::MAX; hole.len()];
    for (k, &q) in cells.iter().enumerate() {
        slot[q] = k as u32;
    }
    // Each unknown cell: a fixed boundary sum, a neighbor count and the
    // unknown neighbors.
    let mut fixed = vec![[0.0; C]; cells.len()];
    let mut count = vec![0.0; cells.len()];
    let mut links: Vec<[u32; 4]> = vec![[u32::MAX; 4]; cells.len()];
    for (k, &q) in cells.iter().enumerate() {
        let mut n = 0;
        for nb in neighbors(q, width, height) {
            if known[nb] {
                for c in 0..C {
                    fixed[k][c] += values[nb][c];
                }
                count[k] += 1.0;
            } else if slot[nb] != u32::MAX {
                links[k][n] = slot[nb];
                n += 1;
                count[k] += 1.0;
            }
        }
    }
    let mut cur: Vec<[f64; C]> = cells.iter().map(|&q| values[src[q].unwrap() as usize]).collect();
    let mut next = cur.clone();
    for _ in 0..DIFFUSION_MAX_ITERS {
        let mut delta = 0.0f64;
        for k in 0..cells.len() {
            let mut acc = fixed[k];
            for &l in links[k].iter().take_while(|&&l| l != u32::MAX) {
                for c in 0..C {
                    acc[c] += cur[l as usize][c];
                }
            }
            for c in 0..C {
                let v = acc[c] / count[k];
                delta = delta.max((v - cur[k][c]).abs());
                next[k][c] = v;
            }
        }
        std::mem::swap(&mut cur, &mut next);
        if delta < DIFFUSION_TOL {
            break;
        }
    }
    let mut out = vec![None; hole.len()];
    for (k, &q) in cells.iter().enumerate() {
        out[q] = Some(cur[k]);
    }
    Ok(out)
}

/// Mean absolute per-pixel depth error and label accuracy inside `mask`.
pub fn fill_quality(filled: &ViewMaps, gt: &ViewMaps, mask: &[bool]) -> Option<(f64, f64)> {
    let mut n = 0usize;
    let mut l1 = 0.0;
    let mut hits = 0usize;
    for q in 0..mask.len() {
        if mask[q] {
            n += 1;
            l1 += (filled.depth[q] as f64 - gt.depth[q] as f64).abs();
            hits += (filled.seg[q] == gt.seg[q]) as usize;
        }
    }
    (n > 0).then(|| (l1 / n as f64, hits as f64 / n as f64))
}
