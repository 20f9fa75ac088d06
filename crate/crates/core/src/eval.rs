//! Depth metrics, rescaling strategies, scale traces, and odometry segment
//! errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{accumulate_trajectory, backproject, check_same_dims, DepthMap, Intrinsics, Pose, Trajectory, D_MIN};
use crate::plane::{camera_height_median, camera_height_weighted, fit_plane_weighted, lower_median, scale_factor, WeightMask};
use crate::warp::ValidMask;

pub const DEFAULT_DEPTH_CAP: f64 = 80.0;
pub const DEFAULT_SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];
/// Weight above which a pixel counts as ground for median heights and IoU.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub const CSV_COLUMNS: [&'static str; 7] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    /// Unweighted mean of per-frame metrics.
    pub fn mean(items: &[DepthMetrics]) -> Option<DepthMetrics> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let mut acc = [0.0; 7];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v / n;
            }
        }
        Some(DepthMetrics {
            abs_rel: acc[0],
            sq_rel: acc[1],
            rmse: acc[2],
            rmse_log: acc[3],
            delta1: acc[4],
            delta2: acc[5],
            delta3: acc[6],
        })
    }
}

/// Standard depth metrics over valid pixels whose ground truth lies in
/// `[D_MIN, cap]`; predictions are clamped to the same range.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, valid: &ValidMask, cap: f64) -> Result<DepthMetrics> {
    check_same_dims((gt.width(), gt.height()), (pred.width(), pred.height()))?;
    check_same_dims((gt.width(), gt.height()), (valid.width(), valid.height()))?;
    if !(cap > D_MIN) {
        return Err(Error::invalid(format!("depth cap must exceed {D_MIN}, got {cap}")));
    }
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut within = [0usize; 3];
    let mut n = 0usize;
    for ((&p, &g), &ok) in pred.data().iter().zip(gt.data()).zip(valid.flags()) {
        if !ok || g < D_MIN || g > cap {
            continue;
        }
        let p = p.clamp(D_MIN, cap);
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        let log_diff = p.ln() - g.ln();
        sq_log += log_diff * log_diff;
        let ratio = (p / g).max(g / p);
        for (i, count) in within.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(i as i32 + 1) {
                *count += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        delta1: within[0] as f64 / nf,
        delta2: within[1] as f64 / nf,
        delta3: within[2] as f64 / nf,
    })
}

fn valid_values(d: &DepthMap, valid: &ValidMask) -> Vec<f64> {
    d.data()
        .iter()
        .zip(valid.flags())
        .filter(|(_, &ok)| ok)
        .map(|(x, _)| *x)
        .collect()
}

/// Ground-truth median scaling: `s = median(gt) / median(pred)` over valid
/// pixels (lower median).
pub fn median_rescale(pred: &DepthMap, gt: &DepthMap, valid: &ValidMask) -> Result<(DepthMap, f64)> {
    check_same_dims((gt.width(), gt.height()), (pred.width(), pred.height()))?;
    check_same_dims((gt.width(), gt.height()), (valid.width(), valid.height()))?;
    let mg = lower_median(&mut valid_values(gt, valid)).ok_or(Error::NoValidPixels)?;
    let mp = lower_median(&mut valid_values(pred, valid)).ok_or(Error::NoValidPixels)?;
    let s = mg / mp;
    Ok((pred.scaled(s)?, s))
}

/// Camera-height estimator used for rescaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeightMode {
    /// Weighted mean offset under the fitted normal.
    #[default]
    WeightedLs,
    /// Median offset over pixels with weight ≥ [`MASK_THRESHOLD`].
    Median,
}

impl std::str::FromStr for HeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted-ls" => Ok(HeightMode::WeightedLs),
            "median" => Ok(HeightMode::Median),
            other => Err(Error::invalid(format!("unknown height mode '{other}' (weighted-ls|median)"))),
        }
    }
}

/// Estimated camera height of a depth map under a ground mask.
pub fn estimate_camera_height(pred: &DepthMap, mask: &WeightMask, k: &Intrinsics, mode: HeightMode) -> Result<f64> {
    let points = backproject(pred, k)?;
    let plane = fit_plane_weighted(&points, mask)?;
    match mode {
        HeightMode::WeightedLs => camera_height_weighted(&points, mask, &plane),
        HeightMode::Median => camera_height_median(&points, mask, &plane, MASK_THRESHOLD),
    }
}

/// Known-camera-height scaling: `s = h_gt / ĥ`.
pub fn height_rescale(
    pred: &DepthMap,
    mask: &WeightMask,
    k: &Intrinsics,
    h_gt: f64,
    mode: HeightMode,
) -> Result<(DepthMap, f64)> {
    let h_est = estimate_camera_height(pred, mask, k, mode)?;
    let s = scale_factor(h_gt, h_est)?.scale_factor;
    Ok((pred.scaled(s)?, s))
}

/// Multiplies each relative translation by its frame's scale factor, then
/// compounds from the identity.
pub fn rescale_trajectory_online(relative_poses: &[Pose], scales: &[f64]) -> Result<Trajectory> {
    if relative_poses.len() != scales.len() {
        return Err(Error::LengthMismatch {
            left: relative_poses.len(),
            right: scales.len(),
        });
    }
    if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::invalid(format!("scale factors must be positive, got {s}")));
    }
    let scaled: Vec<Pose> = relative_poses
        .iter()
        .zip(scales)
        .map(|(p, s)| p.with_translation(p.translation() * *s))
        .collect();
    accumulate_trajectory(&scaled)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthErrors {
    pub length: f64,
    /// Percent.
    pub translation: f64,
    /// Degrees per 100 m.
    pub rotation: f64,
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentErrors {
    /// Only lengths with at least one segment.
    pub per_length: Vec<LengthErrors>,
    /// Mean over every (start, length) pair, percent.
    pub translation: f64,
    /// Mean over every (start, length) pair, degrees per 100 m.
    pub rotation: f64,
    pub segments: usize,
}

impl SegmentErrors {
    pub fn lengths(&self) -> Vec<f64> {
        self.per_length.iter().map(|l| l.length).collect()
    }
}

fn check_lengths(lengths: &[f64]) -> Result<()> {
    if lengths.is_empty() {
        return Err(Error::invalid("at least one segment length is required"));
    }
    for &l in lengths {
        if !DEFAULT_SEGMENT_LENGTHS.contains(&l) {
            return Err(Error::invalid(format!("segment length {l} is not one of 100, 200, ..., 800")));
        }
    }
    Ok(())
}

/// Odometry segment errors: for every start frame and length `L`, the end
/// frame is the first whose ground-truth arc length from the start reaches
/// `L`; the error pose is `inverse(gt_rel) ∘ est_rel`.
pub fn segment_errors(est: &Trajectory, gt: &Trajectory, lengths: &[f64]) -> Result<SegmentErrors> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: est.len(),
            right: gt.len(),
        });
    }
    if gt.len() < 2 {
        return Err(Error::invalid("segment errors need at least two frames"));
    }
    check_lengths(lengths)?;
    let dist = gt.cumulative_distances();
    let path_length = *dist.last().expect("non-empty");
    let (e, g) = (est.poses(), gt.poses());

    let mut per_length = Vec::new();
    let (mut t_sum, mut r_sum, mut count) = (0.0, 0.0, 0usize);
    for &length in lengths {
        let (mut t_len, mut r_len, mut n_len) = (0.0, 0.0, 0usize);
        for start in 0..g.len() {
            let Some(end) = (start + 1..g.len()).find(|&j| dist[j] - dist[start] >= length) else {
                break;
            };
            let gt_rel = g[start].inverse().compose(&g[end]);
            let est_rel = e[start].inverse().compose(&e[end]);
            let err = gt_rel.inverse().compose(&est_rel);
            t_len += err.translation().norm() / length * 100.0;
            r_len += err.rotation_angle().to_degrees() / length * 100.0;
            n_len += 1;
        }
        if n_len > 0 {
            per_length.push(LengthErrors {
                length,
                translation: t_len / n_len as f64,
                rotation: r_len / n_len as f64,
                segments: n_len,
            });
            t_sum += t_len;
            r_sum += r_len;
            count += n_len;
        }
    }
    if count == 0 {
        return Err(Error::TrajectoryTooShort { path_length });
    }
    Ok(SegmentErrors {
        per_length,
        translation: t_sum / count as f64,
        rotation: r_sum / count as f64,
        segments: count,
    })
}

/// Per-frame scale factors with a summary over the frames that succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleTrace {
    /// `None` where the plane fit failed.
    pub per_frame: Vec<Option<f64>>,
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
}

impl ScaleTrace {
    pub fn from_values(per_frame: Vec<Option<f64>>) -> Self {
        let present: Vec<f64> = per_frame.iter().flatten().copied().collect();
        if present.is_empty() {
            return ScaleTrace {
                per_frame,
                mean: None,
                std: None,
            };
        }
        let n = present.len() as f64;
        let mean = present.iter().sum::<f64>() / n;
        let var = present.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        ScaleTrace {
            per_frame,
            mean: Some(mean),
            std: Some(var.sqrt()),
        }
    }
}

pub fn scale_trace(
    depths: &[DepthMap],
    masks: &[WeightMask],
    k: &Intrinsics,
    h_gt: f64,
    mode: HeightMode,
) -> Result<ScaleTrace> {
    if depths.len() != masks.len() {
        return Err(Error::LengthMismatch {
            left: depths.len(),
            right: masks.len(),
        });
    }
    let per_frame = depths
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(i, (d, m))| match height_rescale(d, m, k, h_gt, mode) {
            Ok((_, s)) => Some(s),
            Err(e) => {
                log::warn!("frame {i}: no scale factor ({e})");
                None
            }
        })
        .collect();
    Ok(ScaleTrace::from_values(per_frame))
}

/// Intersection over union of the pixels with weight ≥ [`MASK_THRESHOLD`].
pub fn mask_iou(a: &WeightMask, b: &WeightMask) -> Result<f64> {
    check_same_dims((a.width(), a.height()), (b.width(), b.height()))?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.weights().iter().zip(b.weights()) {
        let (x, y) = (*x >= MASK_THRESHOLD, *y >= MASK_THRESHOLD);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn straight(frames: usize, step: f64) -> Trajectory {
        let rel = vec![Pose::from_translation(Vector3::new(0.0, 0.0, step)); frames - 1];
        accumulate_trajectory(&rel).unwrap()
    }

    #[test]
    fn identical_depths() {
        let gt = DepthMap::from_fn(8, 6, |u, v| 2.0 + u as f64 + 0.5 * v as f64).unwrap();
        let m = depth_metrics(&gt, &gt, &ValidMask::all(8, 6), DEFAULT_DEPTH_CAP).unwrap();
        assert_eq!(m.abs_rel, 0.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn doubled_depths() {
        let gt = DepthMap::filled(8, 6, 5.0).unwrap();
        let pred = DepthMap::filled(8, 6, 10.0).unwrap();
        let m = depth_metrics(&pred, &gt, &ValidMask::all(8, 6), DEFAULT_DEPTH_CAP).unwrap();
        assert!((m.abs_rel - 1.0).abs() < 1e-12);
        assert!((m.sq_rel - 5.0).abs() < 1e-12);
        assert!((m.rmse - 5.0).abs() < 1e-12);
        assert!((m.rmse_log - 2f64.ln()).abs() < 1e-12);
        assert_eq!((m.delta1, m.delta2, m.delta3), (0.0, 0.0, 0.0));
        let none = ValidMask::new(8, 6, vec![false; 48]).unwrap();
        assert!(matches!(depth_metrics(&pred, &gt, &none, 80.0), Err(Error::NoValidPixels)));
    }

    #[test]
    fn metrics_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let gt: Vec<f64> = (0..35).map(|_| rng.random_range(0.5..90.0)).collect();
            let pred: Vec<f64> = (0..35).map(|_| rng.random_range(0.5..90.0)).collect();
            let flags: Vec<bool> = (0..35).map(|_| rng.random_bool(0.8)).collect();
            let got = depth_metrics(
                &DepthMap::new(7, 5, pred.clone()).unwrap(),
                &DepthMap::new(7, 5, gt.clone()).unwrap(),
                &ValidMask::new(7, 5, flags.clone()).unwrap(),
                80.0,
            )
            .unwrap();

            let mut rows = vec![];
            for i in 0..35 {
                if flags[i] && gt[i] <= 80.0 {
                    rows.push((pred[i].min(80.0), gt[i]));
                }
            }
            let n = rows.len() as f64;
            let abs_rel: f64 = rows.iter().map(|(p, g)| (p - g).abs() / g).sum::<f64>() / n;
            let sq_rel: f64 = rows.iter().map(|(p, g)| (p - g).powi(2) / g).sum::<f64>() / n;
            let rmse = (rows.iter().map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n).sqrt();
            let rmse_log = (rows.iter().map(|(p, g)| (p.ln() - g.ln()).powi(2)).sum::<f64>() / n).sqrt();
            let delta =
                |t: f64| rows.iter().filter(|(p, g)| f64::max(p / g, g / p) < t).count() as f64 / n;
            let expected = [abs_rel, sq_rel, rmse, rmse_log, delta(1.25), delta(1.5625), delta(1.953125)];
            for (a, b) in got.values().iter().zip(expected) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
            assert!(got.delta1 <= got.delta2 && got.delta2 <= got.delta3);
        }
    }

    #[test]
    fn median_rescaling() {
        let gt = DepthMap::from_fn(6, 4, |u, v| 3.0 + u as f64 * 0.7 + v as f64).unwrap();
        let valid = ValidMask::all(6, 4);
        let (scaled, s) = median_rescale(&gt.scaled(2.0).unwrap(), &gt, &valid).unwrap();
        assert_eq!(s, 0.5);
        let m = depth_metrics(&scaled, &gt, &valid, 80.0).unwrap();
        assert!(m.abs_rel < 1e-15 && m.rmse < 1e-14);
        assert_eq!(median_rescale(&gt, &gt, &valid).unwrap().1, 1.0);
    }

    #[test]
    fn median_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1usize, 2, 7, 10, 31] {
            let pred: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..10.0)).collect();
            let gt: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..10.0)).collect();
            let (_, s) = median_rescale(
                &DepthMap::new(n, 1, pred.clone()).unwrap(),
                &DepthMap::new(n, 1, gt.clone()).unwrap(),
                &ValidMask::all(n, 1),
            )
            .unwrap();
            let med = |mut v: Vec<f64>| {
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                v[(v.len() - 1) / 2]
            };
            assert_eq!(s, med(gt) / med(pred));
        }
    }

    #[test]
    fn height_rescale_rejects_empty_mask() {
        let d = DepthMap::filled(8, 8, 4.0).unwrap();
        let k = Intrinsics::new(8.0, 8.0, 3.5, 3.5, 8, 8).unwrap();
        let err = height_rescale(&d, &WeightMask::filled(8, 8, 0.0).unwrap(), &k, 1.7, HeightMode::WeightedLs);
        assert!(matches!(err, Err(Error::InsufficientWeight { .. })));
    }

    #[test]
    fn online_rescaling() {
        let rel = vec![Pose::from_translation(Vector3::new(0.0, 0.0, 1.0)); 10];
        let base = accumulate_trajectory(&rel).unwrap();
        assert_eq!(rescale_trajectory_online(&rel, &[1.0; 10]).unwrap(), base);
        let doubled = rescale_trajectory_online(&rel, &[2.0; 10]).unwrap();
        assert!((doubled.poses()[10].translation().z - 20.0).abs() < 1e-12);
        assert!(matches!(
            rescale_trajectory_online(&rel, &[1.0; 9]),
            Err(Error::LengthMismatch { left: 10, right: 9 })
        ));
    }

    #[test]
    fn segment_errors_of_identical_trajectories() {
        let gt = straight(250, 1.0);
        let e = segment_errors(&gt, &gt, &DEFAULT_SEGMENT_LENGTHS).unwrap();
        assert_eq!(e.translation, 0.0);
        assert_eq!(e.rotation, 0.0);
        assert_eq!(e.lengths(), vec![100.0, 200.0]);
    }

    #[test]
    fn doubled_speed_gives_hundred_percent() {
        let gt = straight(301, 1.0);
        let est = straight(301, 2.0);
        let e = segment_errors(&est, &gt, &[100.0, 200.0]).unwrap();
        // Brute-force oracle: every start with an end at arc length L.
        let mut pairs = 0;
        for l in [100usize, 200] {
            pairs += 301 - l;
        }
        assert_eq!(e.segments, pairs);
        for l in &e.per_length {
            assert!((l.translation - 100.0).abs() < 1e-9);
        }
        assert!((e.translation - 100.0).abs() < 1e-9);
    }

    #[test]
    fn constant_yaw_rate() {
        let gt = straight(201, 1.0);
        let rel = vec![Pose::yaw(0.1f64.to_radians(), Vector3::new(0.0, 0.0, 1.0)); 200];
        let est = accumulate_trajectory(&rel).unwrap();
        let e = segment_errors(&est, &gt, &[100.0]).unwrap();
        assert!((e.rotation - 10.0).abs() < 1e-9, "{}", e.rotation);
    }

    #[test]
    fn short_trajectories_are_rejected() {
        let gt = straight(50, 1.0);
        assert!(matches!(
            segment_errors(&gt, &gt, &[100.0]),
            Err(Error::TrajectoryTooShort { .. })
        ));
        assert!(segment_errors(&gt, &gt, &[50.0]).is_err());
        assert!(matches!(
            segment_errors(&straight(10, 1.0), &gt, &[100.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn scale_trace_summary() {
        let t = ScaleTrace::from_values(vec![Some(1.0), None, Some(3.0)]);
        assert_eq!(t.mean, Some(2.0));
        assert_eq!(t.std, Some(1.0));
        assert_eq!(ScaleTrace::from_values(vec![None]).mean, None);
    }

    #[test]
    fn iou() {
        let a = WeightMask::new(4, 1, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let b = WeightMask::new(4, 1, vec![1.0, 0.6, 0.7, 0.1]).unwrap();
        assert!((mask_iou(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    fn wobbly(seed: u64, frames: usize) -> (Trajectory, Trajectory) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gt = vec![];
        let mut est = vec![];
        for _ in 0..frames - 1 {
            let yaw = rng.random_range(-0.02..0.02);
            let step = Vector3::new(rng.random_range(-0.2..0.2), 0.0, rng.random_range(1.5..2.5));
            gt.push(Pose::yaw(yaw, step));
            let noise = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.05..0.05), rng.random_range(-0.1..0.1));
            est.push(Pose::yaw(yaw + rng.random_range(-0.005..0.005), step + noise));
        }
        (accumulate_trajectory(&est).unwrap(), accumulate_trajectory(&gt).unwrap())
    }

    #[test]
    fn matches_brute_force_oracle() {
        let (est, gt) = wobbly(5, 160);
        let got = segment_errors(&est, &gt, &[100.0, 200.0]).unwrap();
        // Oracle from 4x4 homogeneous matrices and explicit distance sums.
        let mat = |p: &Pose| {
            let mut m = nalgebra::Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(p.rotation());
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(p.translation());
            m
        };
        let (g, e) = (gt.poses(), est.poses());
        let (mut t, mut r, mut n) = (0.0, 0.0, 0);
        for l in [100.0, 200.0] {
            for s in 0..g.len() {
                let mut acc = 0.0;
                let mut end = None;
                for j in s + 1..g.len() {
                    acc += (g[j].translation() - g[j - 1].translation()).norm();
                    if acc >= l {
                        end = Some(j);
                        break;
                    }
                }
                let Some(j) = end else { continue };
                let gr = mat(&g[s]).try_inverse().unwrap() * mat(&g[j]);
                let er = mat(&e[s]).try_inverse().unwrap() * mat(&e[j]);
                let d = gr.try_inverse().unwrap() * er;
                t += d.fixed_view::<3, 1>(0, 3).norm() / l * 100.0;
                let c = ((d[(0, 0)] + d[(1, 1)] + d[(2, 2)] - 1.0) / 2.0).clamp(-1.0, 1.0);
                let skew = d.fixed_view::<3, 3>(0, 0) - d.fixed_view::<3, 3>(0, 0).transpose();
                let s = 0.5 * skew.norm() / std::f64::consts::SQRT_2;
                r += s.atan2(c).to_degrees() / l * 100.0;
                n += 1;
            }
        }
        assert_eq!(got.segments, n);
        assert!((got.translation - t / n as f64).abs() <= 1e-9);
        assert!((got.rotation - r / n as f64).abs() <= 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn left_invariance(seed in 0u64..1000, yaw in -3.0f64..3.0, tx in -50.0f64..50.0, tz in -50.0f64..50.0) {
            let (est, gt) = wobbly(seed, 80);
            let offset = Pose::from_axis_angle(Vector3::new(0.3, 1.0, -0.2), yaw, Vector3::new(tx, 1.0, tz)).unwrap();
            let a = segment_errors(&est, &gt, &[100.0]).unwrap();
            let b = segment_errors(&est.left_multiplied(&offset), &gt.left_multiplied(&offset), &[100.0]).unwrap();
            prop_assert!((a.translation - b.translation).abs() <= 1e-9);
            prop_assert!((a.rotation - b.rotation).abs() <= 1e-9);
        }

        #[test]
        fn self_error_is_zero(seed in 0u64..1000) {
            let (est, _) = wobbly(seed, 70);
            let e = segment_errors(&est, &est, &[100.0]).unwrap();
            prop_assert!(e.translation <= 1e-9 && e.rotation <= 1e-6);
        }

        #[test]
        fn median_then_metrics_is_exact(c in 0.1f64..10.0) {
            let gt = DepthMap::from_fn(5, 4, |u, v| 2.0 + u as f64 + 0.3 * v as f64).unwrap();
            let valid = ValidMask::all(5, 4);
            let (scaled, _) = median_rescale(&gt.scaled(c).unwrap(), &gt, &valid).unwrap();
            let m = depth_metrics(&scaled, &gt, &valid, 80.0).unwrap();
            prop_assert!(m.abs_rel <= 1e-12 && m.rmse <= 1e-12);
        }
    }
}
