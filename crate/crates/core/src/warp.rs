//! Inverse warping of a source frame into a target frame.
//!
//! Each target pixel is backprojected with the target depth, moved into the
//! source camera by `pose_ts` (target-to-source), projected, and bilinearly
//! sampled. Reprojections outside the source image are invalid rather than
//! clamped. The `*_with_jacobian` variants additionally return derivatives of
//! every sampled value with respect to the target depth and the pose
//! translation, which the loss module chains into its gradients.

use nalgebra::{Matrix3, Vector3};

use crate::error::Result;
use crate::geometry::{check_same_dims, DepthMap, Image, Intrinsics, Pose};

/// Slack for reprojections that land on the image border up to rounding.
const BORDER_EPS: f64 = 1e-9;

/// Per-pixel validity of a warp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidMask {
    width: usize,
    height: usize,
    flags: Vec<bool>,
}

impl ValidMask {
    pub fn new(width: usize, height: usize, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != width * height {
            return Err(crate::Error::invalid(format!(
                "mask buffer has {} flags, expected {}",
                flags.len(),
                width * height
            )));
        }
        Ok(ValidMask { width, height, flags })
    }

    pub fn all(width: usize, height: usize) -> Self {
        ValidMask {
            width,
            height,
            flags: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.flags[v * self.width + u]
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Pixel-wise AND.
    pub fn and(&self, other: &ValidMask) -> Result<ValidMask> {
        check_same_dims((self.width, self.height), (other.width, other.height))?;
        Ok(ValidMask {
            width: self.width,
            height: self.height,
            flags: self.flags.iter().zip(&other.flags).map(|(a, b)| *a && *b).collect(),
        })
    }
}

/// Bilinear footprint of a continuous sample location.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Bilinear {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

impl Bilinear {
    /// `None` when `(x, y)` is outside `[0, w-1] x [0, h-1]`.
    pub(crate) fn new(x: f64, y: f64, width: usize, height: usize) -> Option<Self> {
        let (wmax, hmax) = ((width - 1) as f64, (height - 1) as f64);
        if !(x >= -BORDER_EPS && x <= wmax + BORDER_EPS && y >= -BORDER_EPS && y <= hmax + BORDER_EPS) {
            return None;
        }
        let x = x.clamp(0.0, wmax);
        let y = y.clamp(0.0, hmax);
        let x0 = (x.floor() as usize).min(width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(height.saturating_sub(2));
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        Some(Bilinear {
            x0,
            y0,
            x1,
            y1,
            fx: x - x0 as f64,
            fy: y - y0 as f64,
        })
    }

    /// The four taps as `(row-major index, weight)`.
    pub(crate) fn taps(&self, width: usize) -> [(usize, f64); 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (self.y0 * width + self.x0, (1.0 - fx) * (1.0 - fy)),
            (self.y0 * width + self.x1, fx * (1.0 - fy)),
            (self.y1 * width + self.x0, (1.0 - fx) * fy),
            (self.y1 * width + self.x1, fx * fy),
        ]
    }

    /// Sampled value and its derivative w.r.t. `(x, y)`.
    pub(crate) fn sample(&self, f: impl Fn(usize, usize) -> f64) -> (f64, f64, f64) {
        let (a, b) = (f(self.x0, self.y0), f(self.x1, self.y0));
        let (c, d) = (f(self.x0, self.y1), f(self.x1, self.y1));
        let (fx, fy) = (self.fx, self.fy);
        let value = (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d);
        let dx = (1.0 - fy) * (b - a) + fy * (d - c);
        let dy = (1.0 - fx) * (c - a) + fx * (d - b);
        (value, dx, dy)
    }
}

/// One target pixel moved into the source camera.
#[derive(Debug, Clone, Copy)]
struct Reprojected {
    /// Point in the source camera frame.
    q: Vector3<f64>,
    /// Derivative of `q` w.r.t. the target depth (`R · ray`).
    dq_ddepth: Vector3<f64>,
    footprint: Bilinear,
    /// Rows of `d(u_s, v_s) / dq`.
    du_dq: Vector3<f64>,
    dv_dq: Vector3<f64>,
}

fn reproject_all(target_depth: &DepthMap, pose_ts: &Pose, k: &Intrinsics) -> Vec<Option<Reprojected>> {
    let rotation: &Matrix3<f64> = pose_ts.rotation();
    let mut out = Vec::with_capacity(k.pixel_count());
    for v in 0..k.height {
        for u in 0..k.width {
            let dq_ddepth = rotation * k.ray(u as f64, v as f64);
            let q = dq_ddepth * target_depth.get(u, v) + pose_ts.translation();
            if !(q.z > 0.0) {
                out.push(None);
                continue;
            }
            let inv_z = 1.0 / q.z;
            let us = k.fu * q.x * inv_z + k.cu;
            let vs = k.fv * q.y * inv_z + k.cv;
            let entry = Bilinear::new(us, vs, k.width, k.height).map(|footprint| Reprojected {
                q,
                dq_ddepth,
                footprint,
                du_dq: Vector3::new(k.fu * inv_z, 0.0, -k.fu * q.x * inv_z * inv_z),
                dv_dq: Vector3::new(0.0, k.fv * inv_z, -k.fv * q.y * inv_z * inv_z),
            });
            out.push(entry);
        }
    }
    out
}

/// Derivatives of every warped image value (pixel-major, channel-minor).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageWarpJacobian {
    /// d value / d target depth at the same pixel.
    pub d_depth: Vec<f64>,
    /// d value / d pose translation.
    pub d_translation: Vec<Vector3<f64>>,
}

/// Reconstructs the target view from `source` using the target depth and the
/// target-to-source pose. Invalid pixels carry value 0.
pub fn warp_image(source: &Image, target_depth: &DepthMap, pose_ts: &Pose, k: &Intrinsics) -> Result<(Image, ValidMask)> {
    let (image, valid, _) = warp_image_with_jacobian(source, target_depth, pose_ts, k)?;
    Ok((image, valid))
}

pub fn warp_image_with_jacobian(
    source: &Image,
    target_depth: &DepthMap,
    pose_ts: &Pose,
    k: &Intrinsics,
) -> Result<(Image, ValidMask, ImageWarpJacobian)> {
    k.check_dims(source.width(), source.height())?;
    k.check_dims(target_depth.width(), target_depth.height())?;
    let channels = source.channels();
    let n = k.pixel_count();
    let mut values = vec![0.0; n * channels];
    let mut flags = vec![false; n];
    let mut d_depth = vec![0.0; n * channels];
    let mut d_translation = vec![Vector3::zeros(); n * channels];

    for (i, rep) in reproject_all(target_depth, pose_ts, k).into_iter().enumerate() {
        let Some(rep) = rep else { continue };
        flags[i] = true;
        for c in 0..channels {
            let (value, dx, dy) = rep.footprint.sample(|u, v| source.get(u, v, c));
            let dq = rep.du_dq * dx + rep.dv_dq * dy;
            let j = i * channels + c;
            // Bilinear weights are convex, so the sample stays in [0, 1] up to rounding.
            values[j] = value.clamp(0.0, 1.0);
            d_depth[j] = dq.dot(&rep.dq_ddepth);
            d_translation[j] = dq;
        }
    }
    Ok((
        Image::new(k.width, k.height, channels, values)?,
        ValidMask::new(k.width, k.height, flags)?,
        ImageWarpJacobian {
            d_depth,
            d_translation,
        },
    ))
}

/// Depths compared by the depth-consistency loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthWarp {
    /// Source depth bilinearly sampled at each target pixel's reprojection.
    pub sampled: DepthMap,
    /// z-depth of each target point expressed in the source camera.
    pub projected: DepthMap,
    pub valid: ValidMask,
}

/// Derivatives of [`DepthWarp`] values, per target pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthWarpJacobian {
    pub sampled_d_target: Vec<f64>,
    pub sampled_d_translation: Vec<Vector3<f64>>,
    /// Bilinear taps into the source depth map; zero weights for invalid pixels.
    pub sampled_source_taps: Vec<[(usize, f64); 4]>,
    pub projected_d_target: Vec<f64>,
}

/// Samples the source depth at the target pixels' reprojections and records
/// the reprojected z. Invalid pixels carry the target depth in both maps.
pub fn warp_depth(source_depth: &DepthMap, target_depth: &DepthMap, pose_ts: &Pose, k: &Intrinsics) -> Result<DepthWarp> {
    warp_depth_with_jacobian(source_depth, target_depth, pose_ts, k).map(|(w, _)| w)
}

pub fn warp_depth_with_jacobian(
    source_depth: &DepthMap,
    target_depth: &DepthMap,
    pose_ts: &Pose,
    k: &Intrinsics,
) -> Result<(DepthWarp, DepthWarpJacobian)> {
    k.check_dims(source_depth.width(), source_depth.height())?;
    k.check_dims(target_depth.width(), target_depth.height())?;
    let n = k.pixel_count();
    let mut sampled = target_depth.data().to_vec();
    let mut projected = target_depth.data().to_vec();
    let mut flags = vec![false; n];
    let mut jac = DepthWarpJacobian {
        sampled_d_target: vec![0.0; n],
        sampled_d_translation: vec![Vector3::zeros(); n],
        sampled_source_taps: vec![[(0, 0.0); 4]; n],
        projected_d_target: vec![0.0; n],
    };

    for (i, rep) in reproject_all(target_depth, pose_ts, k).into_iter().enumerate() {
        let Some(rep) = rep else { continue };
        if rep.q.z < crate::geometry::D_MIN {
            continue;
        }
        let (value, dx, dy) = rep.footprint.sample(|u, v| source_depth.get(u, v));
        let dq = rep.du_dq * dx + rep.dv_dq * dy;
        flags[i] = true;
        sampled[i] = value;
        projected[i] = rep.q.z;
        jac.sampled_d_target[i] = dq.dot(&rep.dq_ddepth);
        jac.sampled_d_translation[i] = dq;
        jac.sampled_source_taps[i] = rep.footprint.taps(k.width);
        jac.projected_d_target[i] = rep.dq_ddepth.z;
    }
    Ok((
        DepthWarp {
            sampled: DepthMap::new(k.width, k.height, sampled)?,
            projected: DepthMap::new(k.width, k.height, projected)?,
            valid: ValidMask::new(k.width, k.height, flags)?,
        },
        jac,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(60.0, 60.0, 23.5, 15.5, 48, 32).unwrap()
    }

    fn texture(x: f64, y: f64) -> f64 {
        0.5 + 0.2 * (0.15 * x + 0.3).sin() + 0.15 * (0.21 * y - 0.1 * x).cos()
    }

    fn textured(k: &Intrinsics, f: impl Fn(f64, f64) -> f64) -> Image {
        let mut data = Vec::new();
        for v in 0..k.height {
            for u in 0..k.width {
                data.push(f(u as f64, v as f64));
            }
        }
        Image::new(k.width, k.height, 1, data).unwrap()
    }

    #[test]
    fn identity_warp_reproduces_source() {
        let k = k();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let source = textured(&k, texture);
        let depth = DepthMap::from_fn(k.width, k.height, |_, _| rng.random_range(1.0..20.0)).unwrap();
        let (out, valid) = warp_image(&source, &depth, &Pose::identity(), &k).unwrap();
        assert_eq!(valid.count(), k.pixel_count());
        for (a, b) in out.data().iter().zip(source.data()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn lateral_translation_shifts_planar_scene() {
        let k = k();
        let d = 6.0;
        let tx = 0.31;
        // Shift in pixels: fu * tx / d = 3.1.
        let shift = k.fu * tx / d;
        let source = textured(&k, texture);
        let depth = DepthMap::filled(k.width, k.height, d).unwrap();
        let pose = Pose::from_translation(Vector3::new(tx, 0.0, 0.0));
        let (out, valid) = warp_image(&source, &depth, &pose, &k).unwrap();
        for v in 2..k.height - 2 {
            for u in 2..k.width - 6 {
                assert!(valid.get(u, v));
                let expected = texture(u as f64 + shift, v as f64);
                assert!((out.get(u, v, 0) - expected).abs() < 1e-3);
            }
            for u in k.width - 3..k.width {
                assert!(!valid.get(u, v));
                assert_eq!(out.get(u, v, 0), 0.0);
            }
        }
    }

    #[test]
    fn identity_depth_warp() {
        let k = k();
        let depth = DepthMap::from_fn(k.width, k.height, |u, v| 2.0 + 0.1 * u as f64 + 0.05 * v as f64).unwrap();
        let w = warp_depth(&depth, &depth, &Pose::identity(), &k).unwrap();
        assert_eq!(w.valid.count(), k.pixel_count());
        for i in 0..k.pixel_count() {
            assert!((w.sampled.data()[i] - depth.data()[i]).abs() < 1e-12);
            assert_eq!(w.projected.data()[i], depth.data()[i]);
        }
    }

    #[test]
    fn forward_motion_toward_plane() {
        let k = k();
        let (d, tz) = (10.0, 1.5);
        let target = DepthMap::filled(k.width, k.height, d).unwrap();
        let source = DepthMap::filled(k.width, k.height, d - tz).unwrap();
        // The camera moved forward, so target points are closer in the source frame.
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, -tz));
        let w = warp_depth(&source, &target, &pose, &k).unwrap();
        assert!(w.valid.count() > 0);
        for i in 0..k.pixel_count() {
            if w.valid.flags()[i] {
                assert!((w.sampled.data()[i] - (d - tz)).abs() < 1e-6);
                assert!((w.projected.data()[i] - (d - tz)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn non_overlapping_views_are_invalid() {
        let k = k();
        let depth = DepthMap::filled(k.width, k.height, 5.0).unwrap();
        let pose = Pose::from_translation(Vector3::new(50.0, 0.0, 0.0));
        let w = warp_depth(&depth, &depth, &pose, &k).unwrap();
        assert_eq!(w.valid.count(), 0);
        let behind = Pose::from_translation(Vector3::new(0.0, 0.0, -20.0));
        let source = textured(&k, texture);
        let (_, valid) = warp_image(&source, &depth, &behind, &k).unwrap();
        assert_eq!(valid.count(), 0);
    }

    #[test]
    fn forward_then_inverse_warp_round_trips() {
        let k = k();
        let d = 8.0;
        let source = textured(&k, texture);
        let depth = DepthMap::filled(k.width, k.height, d).unwrap();
        let pose = Pose::from_translation(Vector3::new(0.25, -0.1, 0.0));
        let (once, _) = warp_image(&source, &depth, &pose, &k).unwrap();
        let (back, valid) = warp_image(&once, &depth, &pose.inverse(), &k).unwrap();
        for v in 4..k.height - 4 {
            for u in 4..k.width - 4 {
                assert!(valid.get(u, v));
                assert!((back.get(u, v, 0) - source.get(u, v, 0)).abs() <= 1e-2);
            }
        }
    }

    #[test]
    fn valid_count_shrinks_with_lateral_motion() {
        let k = k();
        let depth = DepthMap::filled(k.width, k.height, 5.0).unwrap();
        let source = textured(&k, texture);
        let mut last = usize::MAX;
        for step in 0..30 {
            let pose = Pose::from_translation(Vector3::new(0.037 * step as f64, 0.0, 0.0));
            let (_, valid) = warp_image(&source, &depth, &pose, &k).unwrap();
            assert!(valid.count() <= last);
            last = valid.count();
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let k = Intrinsics::new(40.0, 40.0, 11.5, 7.5, 24, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let source = textured(&k, |x, y| 0.5 + 0.3 * (0.4 * x).sin() * (0.3 * y + 0.2).cos());
        let depth = DepthMap::from_fn(k.width, k.height, |_, _| rng.random_range(4.0..8.0)).unwrap();
        let pose = Pose::yaw(0.02, Vector3::new(0.13, 0.02, -0.2));
        let (_, valid, jac) = warp_image_with_jacobian(&source, &depth, &pose, &k).unwrap();
        let h = 1e-6;
        for i in (0..k.pixel_count()).step_by(7) {
            if !valid.flags()[i] {
                continue;
            }
            let mut plus = depth.data().to_vec();
            plus[i] += h;
            let mut minus = depth.data().to_vec();
            minus[i] -= h;
            let (ip, _) = warp_image(&source, &DepthMap::new(k.width, k.height, plus).unwrap(), &pose, &k).unwrap();
            let (im, _) = warp_image(&source, &DepthMap::new(k.width, k.height, minus).unwrap(), &pose, &k).unwrap();
            let fd = (ip.data()[i] - im.data()[i]) / (2.0 * h);
            assert!((fd - jac.d_depth[i]).abs() <= 1e-4 * fd.abs().max(jac.d_depth[i].abs()) + 1e-7, "pixel {i}");
            for axis in 0..3 {
                let mut tp = *pose.translation();
                tp[axis] += h;
                let mut tm = *pose.translation();
                tm[axis] -= h;
                let (ip, _) = warp_image(&source, &depth, &pose.with_translation(tp), &k).unwrap();
                let (im, _) = warp_image(&source, &depth, &pose.with_translation(tm), &k).unwrap();
                let fd = (ip.data()[i] - im.data()[i]) / (2.0 * h);
                let an = jac.d_translation[i][axis];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + 1e-7);
            }
        }
    }
}
