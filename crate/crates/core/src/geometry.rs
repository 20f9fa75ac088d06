//! Pinhole camera model, dense per-pixel grids, SE(3) poses and trajectory
//! compounding.
//!
//! Camera frame convention: x right, y down, z forward. Pixel centers sit at
//! integer coordinates, so pixel `(u, v)` is column `u`, row `v`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Depth floor in meters. Depths below it are rejected.
pub const D_MIN: f64 = 1e-3;

/// Tolerance on `RᵀR - I` and `det R - 1` accepted by [`Pose::new`].
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Drift beyond which composed rotations are projected back onto SO(3).
pub const REORTHONORMALIZE_DRIFT: f64 = 1e-12;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fu: f64,
    pub fv: f64,
    pub cu: f64,
    pub cv: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fu: f64, fv: f64, cu: f64, cv: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
            fu,
            fv,
            cu,
            cv,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fu.is_finite() && self.fu > 0.0 && self.fv.is_finite() && self.fv > 0.0) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got fu={} fv={}",
                self.fu, self.fv
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be non-zero"));
        }
        if !(self.cu >= 0.0 && self.cu < self.width as f64) {
            return Err(Error::invalid(format!(
                "principal point cu={} outside [0, {})",
                self.cu, self.width
            )));
        }
        if !(self.cv >= 0.0 && self.cv < self.height as f64) {
            return Err(Error::invalid(format!(
                "principal point cv={} outside [0, {})",
                self.cv, self.height
            )));
        }
        Ok(())
    }

    /// Unit-depth viewing ray through pixel `(u, v)`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cu) / self.fu, (v - self.cv) / self.fv, 1.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub(crate) fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        check_same_dims((self.width, self.height), (width, height))
    }
}

pub(crate) fn check_same_dims(expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            expected_width: expected.0,
            expected_height: expected.1,
            width: got.0,
            height: got.1,
        });
    }
    Ok(())
}

/// Intensity image with values in `[0, 1]`, row-major with interleaved
/// channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        if let Some(bad) = data.iter().find(|x| !(x.is_finite() && (0.0..=1.0).contains(*x))) {
            return Err(Error::invalid(format!("image intensity {bad} outside [0, 1]")));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize, c: usize) -> f64 {
        self.data[(v * self.width + u) * self.channels + c]
    }
}

/// Dense depth map in meters, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "depth buffer has {} values, expected {}",
                data.len(),
                width * height
            )));
        }
        if let Some(&bad) = data.iter().find(|d| !(d.is_finite() && **d >= D_MIN)) {
            return Err(Error::NonPositiveDepth(bad));
        }
        Ok(DepthMap {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self::new(width, height, data)
    }

    pub fn filled(width: usize, height: usize, depth: f64) -> Result<Self> {
        Self::new(width, height, vec![depth; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    /// Multiplies every depth by `k > 0`.
    pub fn scaled(&self, k: f64) -> Result<Self> {
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::invalid(format!("depth scale must be positive, got {k}")));
        }
        Self::new(self.width, self.height, self.data.iter().map(|d| d * k).collect())
    }
}

/// Per-pixel camera-frame points, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    width: usize,
    height: usize,
    points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(width: usize, height: usize, points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.len() != width * height {
            return Err(Error::invalid(format!(
                "point buffer has {} points, expected {}",
                points.len(),
                width * height
            )));
        }
        Ok(PointCloud {
            width,
            height,
            points,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Vector3<f64> {
        self.points[v * self.width + u]
    }
}

/// Lifts every pixel to a camera-frame point: `p = D(u,v) * [(u-cu)/fu, (v-cv)/fv, 1]`.
pub fn backproject(depth: &DepthMap, k: &Intrinsics) -> Result<PointCloud> {
    k.check_dims(depth.width, depth.height)?;
    let mut points = Vec::with_capacity(depth.data.len());
    for v in 0..depth.height {
        for u in 0..depth.width {
            points.push(k.ray(u as f64, v as f64) * depth.get(u, v));
        }
    }
    PointCloud::new(depth.width, depth.height, points)
}

/// A projected point: continuous pixel coordinates plus z-depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

pub fn project(point: &Vector3<f64>, k: &Intrinsics) -> Result<Projection> {
    let z = point.z;
    if !(z > 0.0) {
        return Err(Error::NonPositiveDepth(z));
    }
    Ok(Projection {
        u: k.fu * point.x / z + k.cu,
        v: k.fv * point.y / z + k.cv,
        depth: z,
    })
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Largest deviation of `R` from SO(3): max of `|RᵀR - I|` entries and `|det R - 1|`.
pub fn rotation_drift(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    let ortho = gram.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    ortho.max((r.determinant() - 1.0).abs())
}

/// Nearest rotation in the Frobenius sense.
pub fn nearest_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut correction = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        correction[(2, 2)] = -1.0;
    }
    u * correction * v_t
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|x| x.is_finite()) {
            return Err(Error::invalid("pose contains non-finite values"));
        }
        let drift = rotation_drift(&rotation);
        if drift > ROTATION_TOLERANCE {
            return Err(Error::invalid(format!("rotation is not orthonormal (drift {drift:.3e})")));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    /// Accepts rotations within `tolerance` of SO(3), projecting them onto it
    /// when the drift exceeds [`REORTHONORMALIZE_DRIFT`]. Used for poses parsed
    /// from text files with limited precision.
    pub fn from_approximate(rotation: Matrix3<f64>, translation: Vector3<f64>, tolerance: f64) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|x| x.is_finite()) {
            return Err(Error::invalid("pose contains non-finite values"));
        }
        let drift = rotation_drift(&rotation);
        if drift > tolerance {
            return Err(Error::invalid(format!("rotation is not orthonormal (drift {drift:.3e})")));
        }
        let rotation = if drift > REORTHONORMALIZE_DRIFT {
            nearest_rotation(&rotation)
        } else {
            rotation
        };
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length),
    /// followed by `translation`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Result<Self> {
        let norm = axis.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::invalid("rotation axis must be non-zero"));
        }
        let rotation = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis / norm), angle);
        Pose::new(*rotation.matrix(), translation)
    }

    /// Rotation about the camera's vertical (y) axis.
    pub fn yaw(angle: f64, translation: Vector3<f64>) -> Self {
        Self::from_axis_angle(Vector3::y(), angle, translation).expect("unit axis")
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn with_translation(&self, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: self.rotation,
            translation,
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rotation = self.rotation * other.rotation;
        if rotation_drift(&rotation) > REORTHONORMALIZE_DRIFT {
            rotation = nearest_rotation(&rotation);
        }
        Pose {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r_t = self.rotation.transpose();
        Pose {
            rotation: r_t,
            translation: -(r_t * self.translation),
        }
    }

    /// Rotation angle in radians (the magnitude of the matrix logarithm).
    /// The cosine comes from the trace, clamped to `[-1, 1]`; the sine from
    /// the skew-symmetric part, which keeps small angles accurate where
    /// `acos` alone loses half the significant digits.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let c = (0.5 * (r.trace() - 1.0)).clamp(-1.0, 1.0);
        let axis = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        (0.5 * axis.norm()).atan2(c)
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }
}

/// Global world-from-camera poses, one per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::invalid("trajectory must contain at least one pose"));
        }
        Ok(Trajectory { poses })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Relative poses `inverse(T[k]) ∘ T[k+1]`.
    pub fn relative_poses(&self) -> Vec<Pose> {
        self.poses.windows(2).map(|w| w[0].inverse().compose(&w[1])).collect()
    }

    /// Pre-composes every pose with `offset`.
    pub fn left_multiplied(&self, offset: &Pose) -> Trajectory {
        Trajectory {
            poses: self.poses.iter().map(|p| offset.compose(p)).collect(),
        }
    }

    /// Cumulative arc length of the camera centers.
    pub fn cumulative_distances(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.poses.len());
        out.push(0.0);
        for w in self.poses.windows(2) {
            let last = *out.last().expect("non-empty");
            out.push(last + (w[1].translation - w[0].translation).norm());
        }
        out
    }
}

/// Compounds relative poses from the identity:
/// `T[0] = I`, `T[k] = T[k-1] ∘ relative[k-1]`.
pub fn accumulate_trajectory(relative_poses: &[Pose]) -> Result<Trajectory> {
    if relative_poses.is_empty() {
        return Err(Error::invalid("cannot accumulate an empty pose sequence"));
    }
    let mut poses = Vec::with_capacity(relative_poses.len() + 1);
    poses.push(Pose::identity());
    for rel in relative_poses {
        let next = poses.last().expect("non-empty").compose(rel);
        poses.push(next);
    }
    Trajectory::new(poses)
}
