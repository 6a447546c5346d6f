//! Pinhole cameras, the 5-DOF yaw/pitch pose parameterization, trajectory
//! interpolation and the perturbations used to explore around a trajectory.
//!
//! Convention: poses are camera-to-world, the camera looks down its local +Z
//! and image +Y points down (OpenCV style). Yaw rotates about world +Y, pitch
//! about the camera's local +X, roll is always zero.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pitch must stay strictly inside `(-PITCH_LIMIT, PITCH_LIMIT)`.
pub const PITCH_LIMIT: f64 = FRAC_PI_2 - 1e-4;

/// Roll residual above which a pose is rejected by [`params_from_pose`].
pub const ROLL_TOLERANCE: f64 = 1e-6;

/// Default near plane in world units.
pub const DEFAULT_NEAR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let intr = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Square image with the principal point at the center and the given
    /// horizontal field of view.
    pub fn from_fov(width: u32, height: u32, fov_x: f64) -> Result<Self> {
        let fx = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::new(
            fx,
            fx,
            0.5 * (width as f64 - 1.0),
            0.5 * (height as f64 - 1.0),
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::domain(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::domain("image size must be at least 1x1"));
        }
        Ok(())
    }
}

/// Rigid camera placement, camera-to-world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: UnitQuaternion<f64>,
    pub center: Vector3<f64>,
}

impl Default for CameraPose {
    fn default() -> Self {
        CameraPose::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose {
            rotation: UnitQuaternion::identity(),
            center: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, center: Vector3<f64>) -> Self {
        CameraPose { rotation, center }
    }

    /// Camera-to-world rotation matrix.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse_transform_vector(&(x - self.center))
    }

    /// Camera right (+X) axis in world coordinates.
    pub fn right(&self) -> Vector3<f64> {
        self.rotation * Vector3::x()
    }

    /// Camera up axis in world coordinates (image up, i.e. local -Y).
    pub fn up(&self) -> Vector3<f64> {
        self.rotation * -Vector3::y()
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.rotation * Vector3::z()
    }

    /// Row-major 3x4 camera-to-world matrix.
    pub fn c2w(&self) -> [f64; 12] {
        let r = self.rotation_matrix();
        let c = self.center;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            c.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            c.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            c.z,
        ]
    }

    /// Builds a pose from a row-major 3x4 camera-to-world matrix. The
    /// rotation block is projected onto SO(3) and the quaternion normalized.
    pub fn from_c2w(m: &[f64; 12]) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Malformed("non-finite camera matrix".into()));
        }
        let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let det = r.determinant();
        if !(det > 0.5 && det < 1.5) {
            return Err(Error::Malformed(format!(
                "camera rotation block is not a rotation (det = {det})"
            )));
        }
        let rot = Rotation3::from_matrix_eps(&r, 1e-12, 100, Rotation3::identity());
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = UnitQuaternion::new_normalize(q.into_inner());
        Ok(CameraPose {
            rotation: q,
            center: Vector3::new(m[3], m[7], m[11]),
        })
    }

    /// Roll-free pose at `eye` looking at `target`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Result<Self> {
        let f = target - eye;
        let norm = f.norm();
        if !(norm > 0.0) {
            return Err(Error::domain("look_at target coincides with eye"));
        }
        let f = f / norm;
        let pitch = (-f.y).clamp(-1.0, 1.0).asin();
        let yaw = f.x.atan2(f.z);
        let pitch = pitch.clamp(-PITCH_LIMIT + 1e-9, PITCH_LIMIT - 1e-9);
        pose_from_params(&PoseParams5::new(eye, yaw, pitch))
    }
}

/// 5-DOF search parameterization: translation plus yaw and pitch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseParams5 {
    pub t: Vector3<f64>,
    pub yaw: f64,
    pub pitch: f64,
}

impl PoseParams5 {
    pub fn new(t: Vector3<f64>, yaw: f64, pitch: f64) -> Self {
        PoseParams5 { t, yaw, pitch }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.t.x, self.t.y, self.t.z, self.yaw, self.pitch]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        PoseParams5::new(Vector3::new(a[0], a[1], a[2]), a[3], a[4])
    }

    pub fn pitch_in_bounds(&self) -> bool {
        self.pitch > -PITCH_LIMIT && self.pitch < PITCH_LIMIT
    }

    /// Pulls pitch back inside the open interval.
    pub fn clamp_pitch(&mut self) {
        let lim = PITCH_LIMIT - 1e-9;
        self.pitch = self.pitch.clamp(-lim, lim);
    }
}

fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Camera-to-world rotation `R_yaw * R_pitch` together with its partials
/// with respect to yaw and pitch.
pub fn yaw_pitch_rotation(yaw: f64, pitch: f64) -> (Matrix3<f64>, Matrix3<f64>, Matrix3<f64>) {
    let ry = rot_y(yaw);
    let rx = rot_x(pitch);
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let dry = Matrix3::new(-sy, 0.0, cy, 0.0, 0.0, 0.0, -cy, 0.0, -sy);
    let drx = Matrix3::new(0.0, 0.0, 0.0, 0.0, -sp, -cp, 0.0, cp, -sp);
    (ry * rx, dry * rx, ry * drx)
}

pub fn pose_from_params(p: &PoseParams5) -> Result<CameraPose> {
    if !p.pitch_in_bounds() || !p.yaw.is_finite() {
        return Err(Error::domain(format!(
            "pitch {} outside (-{PITCH_LIMIT}, {PITCH_LIMIT})",
            p.pitch
        )));
    }
    let q = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), p.yaw)
        * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), p.pitch);
    Ok(CameraPose {
        rotation: q,
        center: p.t,
    })
}

/// Inverse of [`pose_from_params`]. Fails when the pose carries roll.
pub fn params_from_pose(pose: &CameraPose) -> Result<PoseParams5> {
    let r = pose.rotation_matrix();
    // R = Ry(yaw) Rx(pitch) Rz(roll)
    let yaw = r[(0, 2)].atan2(r[(2, 2)]);
    let pitch = (-r[(1, 2)]).atan2(r[(0, 2)].hypot(r[(2, 2)]));
    let roll = r[(1, 0)].atan2(r[(1, 1)]);
    if roll.abs() > ROLL_TOLERANCE {
        return Err(Error::Decomposition { roll });
    }
    let p = PoseParams5::new(pose.center, yaw, pitch);
    if !p.pitch_in_bounds() {
        return Err(Error::domain(format!(
            "pose pitch {pitch} outside the searchable range"
        )));
    }
    Ok(p)
}

/// Roll-free parameters sharing the pose's center and viewing direction;
/// pitch is clamped into the searchable range.
pub fn level_params(pose: &CameraPose) -> PoseParams5 {
    let f = pose.forward();
    let mut p = PoseParams5::new(pose.center, f.x.atan2(f.z), (-f.y).clamp(-1.0, 1.0).asin());
    p.clamp_pitch();
    p
}

/// Projected pixel position and camera depth, or `None` when the point lies
/// at or behind the near plane.
pub fn project_point(
    x: &Vector3<f64>,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    near: f64,
) -> Option<(f64, f64, f64)> {
    let xc = pose.world_to_camera(x);
    if xc.z <= near {
        return None;
    }
    let u = intr.fx * xc.x / xc.z + intr.cx;
    let v = intr.fy * xc.y / xc.z + intr.cy;
    Some((u, v, xc.z))
}

/// Shortest-arc spherical interpolation. Returns the endpoints exactly at
/// `s = 0` and `s = 1`.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, s: f64) -> UnitQuaternion<f64> {
    if s == 0.0 {
        return *a;
    }
    if s == 1.0 {
        return *b;
    }
    let qa = a.into_inner();
    let mut qb = b.into_inner();
    let mut dot = qa.coords.dot(&qb.coords);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let dot = dot.min(1.0);
    let theta = dot.acos();
    if theta < 1e-12 {
        let q = qa.lerp(&qb, s);
        return UnitQuaternion::new_normalize(q);
    }
    let sin_t = theta.sin();
    let wa = ((1.0 - s) * theta).sin() / sin_t;
    let wb = (s * theta).sin() / sin_t;
    UnitQuaternion::new_normalize(Quaternion::from(qa.coords * wa + qb.coords * wb))
}

/// Samples `samples_per_segment` poses per segment at `k / S`, then appends
/// the final input pose once.
pub fn interpolate_trajectory(
    poses: &[CameraPose],
    samples_per_segment: usize,
) -> Result<Vec<CameraPose>> {
    if poses.len() < 2 {
        return Err(Error::domain(format!(
            "trajectory needs at least 2 poses, got {}",
            poses.len()
        )));
    }
    if samples_per_segment == 0 {
        return Err(Error::domain("samples per segment must be at least 1"));
    }
    let mut out = Vec::with_capacity((poses.len() - 1) * samples_per_segment + 1);
    for pair in poses.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        for k in 0..samples_per_segment {
            if k == 0 {
                out.push(*a);
                continue;
            }
            let s = k as f64 / samples_per_segment as f64;
            out.push(CameraPose {
                rotation: slerp(&a.rotation, &b.rotation, s),
                center: a.center.lerp(&b.center, s),
            });
        }
    }
    out.push(*poses.last().unwrap());
    Ok(out)
}

/// Magnitudes of the local exploration around a trajectory sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSpec {
    /// Radius of the in-plane (camera right/up) shift, world units.
    pub shift_radius: f64,
    /// Bound on the yaw and pitch jitter, radians.
    pub jitter: f64,
}

impl PerturbSpec {
    pub const DEFAULT_JITTER_DEG: f64 = 5.0;
    pub const DEFAULT_SHIFT_FRACTION: f64 = 0.05;

    pub fn new(shift_radius: f64, jitter: f64) -> Result<Self> {
        let spec = PerturbSpec {
            shift_radius,
            jitter,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Shift radius as 5% of `scene_diagonal`, jitter 5 degrees.
    pub fn scene_default(scene_diagonal: f64) -> Self {
        PerturbSpec {
            shift_radius: Self::DEFAULT_SHIFT_FRACTION * scene_diagonal,
            jitter: Self::DEFAULT_JITTER_DEG.to_radians(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shift_radius >= 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::domain(format!(
                "perturbation magnitudes must be non-negative (r={}, theta={})",
                self.shift_radius, self.jitter
            )));
        }
        Ok(())
    }
}

/// Shifts the center uniformly within a disc in the camera's right/up plane
/// and jitters yaw (about world +Y) and pitch (about the local +X axis).
pub fn perturb_pose<R: Rng + ?Sized>(base: &CameraPose, spec: &PerturbSpec, rng: &mut R) -> CameraPose {
    let radius = spec.shift_radius * rng.random::<f64>().sqrt();
    let angle = std::f64::consts::TAU * rng.random::<f64>();
    let d_yaw = spec.jitter * (2.0 * rng.random::<f64>() - 1.0);
    let d_pitch = spec.jitter * (2.0 * rng.random::<f64>() - 1.0);
    if radius == 0.0 && d_yaw == 0.0 && d_pitch == 0.0 {
        return *base;
    }
    let shift = base.right() * (radius * angle.cos()) + base.up() * (radius * angle.sin());
    let yaw = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), d_yaw);
    let pitch = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), d_pitch);
    CameraPose {
        rotation: UnitQuaternion::new_normalize((yaw * base.rotation * pitch).into_inner()),
        center: base.center + shift,
    }
}

/// Geodesic angle between two rotations, in `[0, pi]`.
pub fn rotation_angle(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let dot = a.coords.dot(&b.coords).abs().min(1.0);
    2.0 * dot.acos()
}

/// `|c_a - c_b| + lambda_rot * angle(R_a, R_b)`.
pub fn pose_distance(a: &CameraPose, b: &CameraPose, lambda_rot: f64) -> f64 {
    (a.center - b.center).norm() + lambda_rot * rotation_angle(&a.rotation, &b.rotation)
}

/// An intrinsics + pose pair, one entry of a camera file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    c2w: Vec<f64>,
}

pub fn parse_cameras(text: &str) -> Result<Vec<Camera>> {
    let records: Vec<CameraRecord> =
        serde_json::from_str(text).map_err(|e| Error::Malformed(format!("camera file: {e}")))?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let c2w: [f64; 12] = r.c2w.as_slice().try_into().map_err(|_| {
                Error::Malformed(format!(
                    "camera {i}: c2w must have 12 entries, got {}",
                    r.c2w.len()
                ))
            })?;
            let intrinsics = CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
                .map_err(|e| Error::Malformed(format!("camera {i}: {e}")))?;
            let pose = CameraPose::from_c2w(&c2w)
                .map_err(|e| Error::Malformed(format!("camera {i}: {e}")))?;
            Ok(Camera { intrinsics, pose })
        })
        .collect()
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cameras(&text)
}

pub fn cameras_to_json(cameras: &[Camera]) -> String {
    let records: Vec<CameraRecord> = cameras
        .iter()
        .map(|c| CameraRecord {
            fx: c.intrinsics.fx,
            fy: c.intrinsics.fy,
            cx: c.intrinsics.cx,
            cy: c.intrinsics.cy,
            width: c.intrinsics.width,
            height: c.intrinsics.height,
            c2w: c.pose.c2w().to_vec(),
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("camera records serialize")
}

pub fn save_cameras(cameras: &[Camera], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, cameras_to_json(cameras)).map_err(|e| Error::io(path, e))
}
