//! Pinhole camera, scene-centric viewpoints and the 20-view action space.
//!
//! Pixel `(i, j)` covers `[i, i+1) x [j, j+1)` in continuous image
//! coordinates, so its center sits at `(i + 0.5, j + 0.5)`. Camera space is
//! x right, y down, z forward; depth means camera-space z.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::cloud::Vec3;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(rename = "near_m")]
    pub near: f64,
    #[serde(rename = "far_m")]
    pub far: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            fx: 518.857,
            fy: 518.857,
            cx: 319.5,
            cy: 239.5,
            width: 640,
            height: 480,
            near: 0.1,
            far: 6.0,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::param("fx/fy", "focal lengths must be positive"));
        }
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::param("near/far", format!("need 0 < near < far, got {} / {}", self.near, self.far)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::param("width/height", "image must be non-empty"));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn in_depth_range(&self, z: f64) -> bool {
        z >= self.near && z <= self.far
    }

    /// Pixel containing the continuous image point `(u, v)`.
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (i, j) = (u.floor(), v.floor());
        (i >= 0.0 && j >= 0.0 && i < self.width as f64 && j < self.height as f64)
            .then(|| (i as usize, j as usize))
    }

    pub fn pixel_center(&self, i: usize, j: usize) -> (f64, f64) {
        (i as f64 + 0.5, j as f64 + 0.5)
    }
}

/// A camera placed on a sphere around `center`, looking at it with +y up.
///
/// `theta` is the polar angle from +y and `phi` the azimuth, both in degrees:
/// `position = center + radius * (sin θ sin φ, cos θ, sin θ cos φ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub theta_deg: f64,
    pub phi_deg: f64,
    pub radius: f64,
    pub center: Vec3,
    /// One-based action index when drawn from an [`ActionSpace`].
    pub index: Option<usize>,
}

impl Viewpoint {
    pub fn new(theta_deg: f64, phi_deg: f64, radius: f64, center: Vec3) -> Self {
        Self {
            theta_deg,
            phi_deg,
            radius,
            center,
            index: None,
        }
    }

    pub fn offset(&self) -> Vec3 {
        let (t, p) = (self.theta_deg.to_radians(), self.phi_deg.to_radians());
        self.radius * Vec3::new(t.sin() * p.sin(), t.cos(), t.sin() * p.cos())
    }

    pub fn position(&self) -> Vec3 {
        self.center + self.offset()
    }

    pub fn pose(&self) -> Pose {
        Pose::look_at(self.position(), self.center, Vec3::y())
    }
}

/// Rigid camera pose: rows of `rotation` are the camera right, down and
/// forward axes in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub rotation: Matrix3<f64>,
}

impl Pose {
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        Self {
            position: eye,
            rotation: Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]),
        }
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }

    pub fn right(&self) -> Vec3 {
        self.rotation.row(0).transpose()
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * (p - self.position)
    }

    pub fn to_world(&self, c: &Vec3) -> Vec3 {
        self.rotation.transpose() * c + self.position
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Visible { u: f64, v: f64, z: f64 },
    BehindCamera,
}

pub fn project(camera: &CameraModel, pose: &Pose, p: &Vec3) -> Projection {
    let c = pose.to_camera(p);
    if !(c.z > 0.0) {
        return Projection::BehindCamera;
    }
    Projection::Visible {
        u: camera.fx * c.x / c.z + camera.cx,
        v: camera.fy * c.y / c.z + camera.cy,
        z: c.z,
    }
}

pub fn world_to_pixel(camera: &CameraModel, view: &Viewpoint, p: &Vec3) -> Projection {
    project(camera, &view.pose(), p)
}

pub fn unproject(camera: &CameraModel, pose: &Pose, u: f64, v: f64, z: f64) -> Vec3 {
    let c = Vec3::new((u - camera.cx) / camera.fx * z, (v - camera.cy) / camera.fy * z, z);
    pose.to_world(&c)
}

/// Inverse pinhole: the world point at depth `z` seen at image point `(u, v)`.
pub fn pixel_to_world(camera: &CameraModel, view: &Viewpoint, u: f64, v: f64, z: f64) -> Result<Vec3> {
    if !camera.in_depth_range(z) {
        return Err(Error::OutOfRange(format!(
            "depth {z} outside [{}, {}]",
            camera.near, camera.far
        )));
    }
    Ok(unproject(camera, &view.pose(), u, v, z))
}

/// The discrete set of candidate next views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    views: Vec<Viewpoint>,
}

pub const DEFAULT_THETAS: [f64; 2] = [90.0, 70.0];
pub const DEFAULT_PHIS: [f64; 10] = [-50.0, -40.0, -30.0, -20.0, -10.0, 10.0, 20.0, 30.0, 40.0, 50.0];

impl ActionSpace {
    /// Two rings (θ = 90° first, then 70°) of ten azimuths each, ordered by
    /// increasing φ within a ring.
    pub fn generate(radius: f64, center: Vec3) -> Result<Self> {
        Self::with_angles(radius, center, &DEFAULT_THETAS, &DEFAULT_PHIS)
    }

    pub fn with_angles(radius: f64, center: Vec3, thetas: &[f64], phis: &[f64]) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::param("radius", format!("must be positive, got {radius}")));
        }
        if thetas.is_empty() || phis.is_empty() {
            return Err(Error::param("theta/phi", "angle lists must be non-empty"));
        }
        if thetas.iter().any(|t| t.rem_euclid(180.0) == 0.0) {
            return Err(Error::param("theta", "views on the y axis have no upright orientation"));
        }
        let mut views = Vec::with_capacity(thetas.len() * phis.len());
        for &theta in thetas {
            for &phi in phis {
                let mut v = Viewpoint::new(theta, phi, radius, center);
                v.index = Some(views.len() + 1);
                views.push(v);
            }
        }
        Ok(Self { views })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn views(&self) -> &[Viewpoint] {
        &self.views
    }

    /// View for a one-based action index.
    pub fn view(&self, action: usize) -> Result<&Viewpoint> {
        action
            .checked_sub(1)
            .and_then(|i| self.views.get(i))
            .ok_or_else(|| Error::OutOfRange(format!("action {action} not in 1..={}", self.views.len())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn action_space_anchors() {
        let space = ActionSpace::generate(3.0, Vec3::zeros()).unwrap();
        assert_eq!(space.len(), 20);
        let c1 = space.view(1).unwrap();
        assert_eq!((c1.theta_deg, c1.phi_deg), (90.0, -50.0));
        assert!(close(c1.position(), Vec3::new(-2.2981, 0.0, 1.9284), 1e-4));
        let c2 = space.view(2).unwrap();
        assert_eq!((c2.theta_deg, c2.phi_deg), (90.0, -40.0));
        let c20 = space.view(20).unwrap();
        assert_eq!((c20.theta_deg, c20.phi_deg), (70.0, 50.0));
        assert!(close(c20.position(), Vec3::new(2.1595, 1.0261, 1.8120), 1e-4));
        assert_eq!(space.views().iter().filter(|v| v.theta_deg == 90.0).count(), 10);
        assert_eq!(space.views().iter().filter(|v| v.theta_deg == 70.0).count(), 10);
        assert!(space.view(0).is_err() && space.view(21).is_err());
        assert!(ActionSpace::generate(0.0, Vec3::zeros()).is_err());
        assert!(ActionSpace::generate(-1.0, Vec3::zeros()).is_err());
    }

    #[test]
    fn views_sit_on_sphere_and_look_at_center() {
        let center = Vec3::new(0.3, 1.22, -0.4);
        let space = ActionSpace::generate(3.0, center).unwrap();
        for v in space.views() {
            let pose = v.pose();
            let to_center = center - v.position();
            assert!(((v.position() - center).norm() - 3.0).abs() < 1e-9);
            assert!((pose.forward().dot(&to_center) - to_center.norm()).abs() < 1e-9);
            // Upright: camera right axis is horizontal, down axis points down.
            assert!(pose.right().y.abs() < 1e-12);
            assert!(pose.rotation.row(1)[1] < 0.0);
        }
    }

    #[test]
    fn projection_examples() {
        let cam = CameraModel::default();
        let view = Viewpoint::new(90.0, 0.0, 3.0, Vec3::zeros());
        match world_to_pixel(&cam, &view, &view.center) {
            Projection::Visible { u, v, z } => {
                assert!((u - cam.cx).abs() < 1e-9 && (v - cam.cy).abs() < 1e-9);
                assert!((z - 3.0).abs() < 1e-12);
            }
            p => panic!("{p:?}"),
        }
        assert_eq!(world_to_pixel(&cam, &view, &view.position()), Projection::BehindCamera);
        let right = view.pose().right();
        match world_to_pixel(&cam, &view, &(view.center + 0.1 * right)) {
            Projection::Visible { u, .. } => assert!((u - (cam.cx + 17.295)).abs() < 1e-3),
            p => panic!("{p:?}"),
        }
        let back = pixel_to_world(&cam, &view, cam.cx, cam.cy, 3.0).unwrap();
        assert!(close(back, view.center, 1e-12));
        assert!(pixel_to_world(&cam, &view, 10.0, 10.0, 0.0).is_err());
        assert!(pixel_to_world(&cam, &view, 10.0, 10.0, 6.5).is_err());
    }

    #[test]
    fn pixel_round_trip_property() {
        let cam = CameraModel::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let space = ActionSpace::generate(3.0, Vec3::new(0.0, 1.22, 0.0)).unwrap();
        let mut worst = 0f64;
        for k in 0..1000 {
            let view = &space.views()[k % 20];
            let u = rng.random_range(0.0..640.0);
            let v = rng.random_range(0.0..480.0);
            let z = rng.random_range(cam.near..=cam.far);
            let p = pixel_to_world(&cam, view, u, v, z).unwrap();
            match world_to_pixel(&cam, view, &p) {
                Projection::Visible { u: u2, v: v2, z: z2 } => {
                    worst = worst
                        .max((u2 - u).abs() / u.abs().max(1.0))
                        .max((v2 - v).abs() / v.abs().max(1.0))
                        .max((z2 - z).abs() / z);
                }
                p => panic!("{p:?}"),
            }
        }
        assert!(worst < 1e-6, "max relative error {worst}");
    }
}
