//! Ground-plane fitting, camera-height and scale-factor estimation, and
//! iteratively reweighted ground segmentation.
//!
//! The plane is parameterized as `pᵀn = 1` and solved by weighted least
//! squares, `n = (Σ w p pᵀ)⁻¹ Σ w p`. The unit normal is `n / ‖n‖`, oriented
//! so that the camera sits above the ground (positive offsets).

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{backproject, check_same_dims, DepthMap, Intrinsics, PointCloud};
use crate::losses::LossResult;

/// Largest accepted condition number of the 3x3 normal-equations matrix.
pub const COND_MAX: f64 = 1e8;

/// Smallest accepted total inlier weight, in pixel-weights.
pub const W_MIN_TOTAL: f64 = 10.0;

/// Per-pixel ground-membership weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMask {
    width: usize,
    height: usize,
    weights: Vec<f64>,
}

impl WeightMask {
    pub fn new(width: usize, height: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != width * height {
            return Err(Error::invalid(format!(
                "weight buffer has {} values, expected {}",
                weights.len(),
                width * height
            )));
        }
        if let Some(bad) = weights.iter().find(|w| !(w.is_finite() && (0.0..=1.0).contains(*w))) {
            return Err(Error::invalid(format!("weight {bad} outside [0, 1]")));
        }
        Ok(WeightMask {
            width,
            height,
            weights,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut weights = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                weights.push(f(u, v));
            }
        }
        Self::new(width, height, weights)
    }

    pub fn filled(width: usize, height: usize, weight: f64) -> Result<Self> {
        Self::new(width, height, vec![weight; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.weights[v * self.width + u]
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Multiplies all weights by `c`; the result must stay within `[0, 1]`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.width, self.height, self.weights.iter().map(|w| w * c).collect())
    }
}

/// Unit ground normal and camera height above the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneFit {
    pub normal: Vector3<f64>,
    pub height: f64,
    pub condition_number: f64,
    pub inlier_weight_sum: f64,
}

impl PlaneFit {
    /// Signed offset of a point along the normal, `pᵀn̄`.
    #[inline]
    pub fn offset(&self, p: &Vector3<f64>) -> f64 {
        p.dot(&self.normal)
    }
}

/// Weighted least-squares plane fit.
pub fn fit_plane_weighted(points: &PointCloud, weights: &WeightMask) -> Result<PlaneFit> {
    check_same_dims((points.width(), points.height()), (weights.width, weights.height))?;

    let mut a = Matrix3::<f64>::zeros();
    let mut b = Vector3::<f64>::zeros();
    let mut total = 0.0;
    for (p, &w) in points.points().iter().zip(&weights.weights) {
        if w == 0.0 {
            continue;
        }
        a += w * p * p.transpose();
        b += w * p;
        total += w;
    }
    if !(total >= W_MIN_TOTAL) {
        return Err(Error::InsufficientWeight {
            total,
            required: W_MIN_TOTAL,
        });
    }

    let eigen = SymmetricEigen::new(a);
    let lo = eigen.eigenvalues.min();
    let hi = eigen.eigenvalues.max();
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= COND_MAX) {
        return Err(Error::DegeneratePlane { condition });
    }
    let n = a
        .cholesky()
        .map(|c| c.solve(&b))
        .ok_or(Error::DegeneratePlane { condition })?;
    let norm = n.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::DegeneratePlane { condition });
    }
    let mut normal = n / norm;

    let mut height = weighted_mean_offset(points, weights, &normal, total);
    if height < 0.0 {
        normal = -normal;
        height = -height;
    }
    if !(height > 0.0) {
        return Err(Error::DegeneratePlane { condition });
    }
    Ok(PlaneFit {
        normal,
        height,
        condition_number: condition,
        inlier_weight_sum: total,
    })
}

fn weighted_mean_offset(points: &PointCloud, weights: &WeightMask, normal: &Vector3<f64>, total: f64) -> f64 {
    let sum: f64 = points
        .points()
        .iter()
        .zip(&weights.weights)
        .map(|(p, w)| w * p.dot(normal))
        .sum();
    sum / total
}

/// Weighted mean of per-pixel offsets `pᵀn̄`.
pub fn camera_height_weighted(points: &PointCloud, weights: &WeightMask, plane: &PlaneFit) -> Result<f64> {
    check_same_dims((points.width(), points.height()), (weights.width, weights.height))?;
    let total = weights.total();
    if !(total > 0.0) {
        return Err(Error::InsufficientWeight { total, required: 0.0 });
    }
    Ok(weighted_mean_offset(points, weights, &plane.normal, total))
}

/// Lower median of offsets over pixels whose weight is at least `threshold`.
pub fn camera_height_median(
    points: &PointCloud,
    mask: &WeightMask,
    plane: &PlaneFit,
    threshold: f64,
) -> Result<f64> {
    check_same_dims((points.width(), points.height()), (mask.width, mask.height))?;
    let mut offsets: Vec<f64> = points
        .points()
        .iter()
        .zip(&mask.weights)
        .filter(|(_, &w)| w >= threshold)
        .map(|(p, _)| plane.offset(p))
        .collect();
    lower_median(&mut offsets).ok_or(Error::NoValidPixels)
}

/// Lower median (`sorted[(n - 1) / 2]`); `None` when empty.
pub fn lower_median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mid = (values.len() - 1) / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    Some(*m)
}

/// Known vs estimated camera height and their ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleEstimate {
    pub estimated_height: f64,
    pub known_height: f64,
    pub scale_factor: f64,
}

pub fn scale_factor(h_gt: f64, h_est: f64) -> Result<ScaleEstimate> {
    for (name, h) in [("known", h_gt), ("estimated", h_est)] {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::invalid(format!("{name} camera height must be positive, got {h}")));
        }
    }
    Ok(ScaleEstimate {
        estimated_height: h_est,
        known_height: h_gt,
        scale_factor: h_gt / h_est,
    })
}

/// Weights of the plane-consistency objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneLossWeights {
    pub lambda_plane: f64,
    pub lambda_reg: f64,
    pub w_floor: f64,
}

/// Per-pixel plane-consistency loss summed over the image:
/// `λ_plane ŵ |h - pᵀn̄| - λ_reg log ŵ`, with `ŵ` floored at `w_floor` inside
/// the logarithm.
pub fn plane_consistency_loss(
    points: &PointCloud,
    weights: &WeightMask,
    plane_height: f64,
    normal: &Vector3<f64>,
    params: &PlaneLossWeights,
) -> Result<f64> {
    check_same_dims((points.width(), points.height()), (weights.width, weights.height))?;
    Ok(points
        .points()
        .iter()
        .zip(&weights.weights)
        .map(|(p, &w)| {
            params.lambda_plane * w * (plane_height - p.dot(normal)).abs()
                - params.lambda_reg * w.max(params.w_floor).ln()
        })
        .sum())
}

/// [`plane_consistency_loss`] with gradients w.r.t. the weights and the
/// depths that generated `points` (plane height and normal held fixed).
pub fn plane_consistency_loss_grad(
    depth: &DepthMap,
    k: &Intrinsics,
    weights: &WeightMask,
    plane_height: f64,
    normal: &Vector3<f64>,
    params: &PlaneLossWeights,
) -> Result<LossResult> {
    let points = backproject(depth, k)?;
    let value = plane_consistency_loss(&points, weights, plane_height, normal, params)?;
    let mut grad_weights = Vec::with_capacity(weights.weights.len());
    let mut grad_depth = Vec::with_capacity(weights.weights.len());
    for (i, (p, &w)) in points.points().iter().zip(&weights.weights).enumerate() {
        let (u, v) = (i % k.width, i / k.width);
        let residual = plane_height - p.dot(normal);
        let log_grad = if w >= params.w_floor { params.lambda_reg / w } else { 0.0 };
        grad_weights.push(params.lambda_plane * residual.abs() - log_grad);
        grad_depth.push(-params.lambda_plane * w * sign(residual) * k.ray(u as f64, v as f64).dot(normal));
    }
    Ok(LossResult {
        value,
        grad_depth: Some(grad_depth),
        grad_weights: Some(grad_weights),
        ..LossResult::default()
    })
}

#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Minimizer over `[w_floor, 1]` of `λ_plane w r - λ_reg ln w` for a fixed
/// absolute residual `r`.
pub fn optimal_weight(residual: f64, params: &PlaneLossWeights) -> f64 {
    let r = residual.abs();
    if params.lambda_plane * r <= params.lambda_reg {
        1.0
    } else {
        (params.lambda_reg / (params.lambda_plane * r)).clamp(params.w_floor, 1.0)
    }
}

/// Pixel rectangle assumed to contain only ground when segmentation starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitRegion {
    /// Fraction of rows, counted from the bottom of the image.
    pub bottom_rows: f64,
    /// Fraction of columns, centered horizontally.
    pub center_cols: f64,
}

impl Default for InitRegion {
    fn default() -> Self {
        InitRegion {
            bottom_rows: 0.3,
            center_cols: 0.6,
        }
    }
}

impl InitRegion {
    pub fn contains(&self, u: usize, v: usize, width: usize, height: usize) -> bool {
        let rows = (self.bottom_rows * height as f64).round() as usize;
        let cols = (self.center_cols * width as f64).round() as usize;
        let col_start = (width - cols.min(width)) / 2;
        v >= height - rows.min(height) && u >= col_start && u < col_start + cols
    }

    pub fn mask(&self, width: usize, height: usize, outside: f64) -> Result<WeightMask> {
        WeightMask::from_fn(width, height, |u, v| if self.contains(u, v, width, height) { 1.0 } else { outside })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrlsConfig {
    pub lambda_plane: f64,
    pub lambda_reg: f64,
    pub w_floor: f64,
    pub max_iters: usize,
    /// Convergence threshold on the largest per-pixel weight change.
    pub tolerance: f64,
    pub init_region: InitRegion,
}

impl Default for IrlsConfig {
    fn default() -> Self {
        IrlsConfig {
            lambda_plane: 1.0,
            lambda_reg: 0.1,
            w_floor: 1e-3,
            max_iters: 50,
            tolerance: 1e-4,
            init_region: InitRegion::default(),
        }
    }
}

impl IrlsConfig {
    pub fn loss_weights(&self) -> PlaneLossWeights {
        PlaneLossWeights {
            lambda_plane: self.lambda_plane,
            lambda_reg: self.lambda_reg,
            w_floor: self.w_floor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_plane > 0.0
            && self.lambda_reg > 0.0
            && self.w_floor > 0.0
            && self.w_floor <= 1.0
            && self.max_iters > 0
            && self.tolerance > 0.0
            && (0.0..=1.0).contains(&self.init_region.bottom_rows)
            && (0.0..=1.0).contains(&self.init_region.center_cols);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid IRLS configuration {self:?}")))
        }
    }
}

/// Result of [`segment_ground_irls`].
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub mask: WeightMask,
    pub plane: PlaneFit,
    pub iterations: usize,
    pub converged: bool,
    /// Summed plane-consistency loss: the initial state, then one entry per
    /// iteration.
    pub loss_history: Vec<f64>,
    /// Iterations whose refit was rejected for raising the loss.
    pub rejected_refits: usize,
}

/// Ground segmentation by alternating minimization of the plane-consistency
/// loss: closed-form per-pixel weights given the plane, then a weighted
/// least-squares refit given the weights. A refit that would raise the loss
/// is discarded, so the loss never increases.
pub fn segment_ground_irls(depth: &DepthMap, k: &Intrinsics, config: &IrlsConfig) -> Result<Segmentation> {
    config.validate()?;
    let points = backproject(depth, k)?;
    let params = config.loss_weights();
    let loss = |w: &WeightMask, plane: &PlaneFit| -> Result<f64> {
        plane_consistency_loss(&points, w, plane.height, &plane.normal, &params)
    };

    // The first plane comes from the init region alone: even floor-weighted
    // far points pull an algebraic `pᵀn = 1` fit toward the backdrop.
    let mut plane = fit_plane_weighted(&points, &config.init_region.mask(k.width, k.height, 0.0)?)?;
    let mut weights = config.init_region.mask(k.width, k.height, config.w_floor)?;
    let mut history = vec![loss(&weights, &plane)?];
    let mut rejected = 0;

    for iteration in 1..=config.max_iters {
        let updated: Vec<f64> = points
            .points()
            .iter()
            .map(|p| optimal_weight(plane.height - plane.offset(p), &params))
            .collect();
        let change = updated
            .iter()
            .zip(&weights.weights)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        weights = WeightMask::new(k.width, k.height, updated)?;

        let current = loss(&weights, &plane)?;
        let mut accepted = current;
        let candidate = fit_plane_weighted(&points, &weights)?;
        let refit = loss(&weights, &candidate)?;
        if refit <= current {
            plane = candidate;
            accepted = refit;
        } else {
            rejected += 1;
        }
        history.push(accepted);
        log::trace!("irls iteration {iteration}: loss {accepted:.6} max weight change {change:.3e}");

        if change < config.tolerance {
            return Ok(Segmentation {
                mask: weights,
                plane,
                iterations: iteration,
                converged: true,
                loss_history: history,
                rejected_refits: rejected,
            });
        }
    }
    Err(Error::NonConvergence {
        last: Box::new(Segmentation {
            mask: weights,
            plane,
            iterations: config.max_iters,
            converged: false,
            loss_history: history,
            rejected_refits: rejected,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: Vec<Vector3<f64>>) -> PointCloud {
        let n = points.len();
        PointCloud::new(n, 1, points).unwrap()
    }

    fn planar_grid(h: f64) -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                pts.push(Vector3::new(i as f64 - 2.5, h, 4.0 + j as f64));
            }
        }
        pts
    }

    #[test]
    fn axis_aligned_plane() {
        let pts = cloud(planar_grid(1.5));
        let w = WeightMask::filled(36, 1, 1.0).unwrap();
        let fit = fit_plane_weighted(&pts, &w).unwrap();
        assert!((fit.normal - Vector3::y()).norm() < 1e-12);
        assert!((fit.height - 1.5).abs() < 1e-12);
        assert!((fit.normal.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_outlier_is_ignored() {
        let mut pts = planar_grid(1.5);
        pts.push(Vector3::new(0.0, 5.0, 1.0));
        let mut weights = vec![1.0; 36];
        weights.push(0.0);
        let fit = fit_plane_weighted(&cloud(pts), &WeightMask::new(37, 1, weights).unwrap()).unwrap();
        let base = fit_plane_weighted(&cloud(planar_grid(1.5)), &WeightMask::filled(36, 1, 1.0).unwrap()).unwrap();
        assert_eq!(fit.normal, base.normal);
        assert_eq!(fit.height, base.height);
    }

    #[test]
    fn colinear_points_are_degenerate() {
        let pts: Vec<_> = (0..20).map(|i| Vector3::new(0.0, 1.0, i as f64 + 1.0)).collect();
        let err = fit_plane_weighted(&cloud(pts), &WeightMask::filled(20, 1, 1.0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::DegeneratePlane { .. }), "{err:?}");
    }

    #[test]
    fn plane_through_camera_is_degenerate() {
        let pts: Vec<_> = (0..25).map(|i| Vector3::new((i % 5) as f64, 0.0, (i / 5) as f64 + 1.0)).collect();
        let err = fit_plane_weighted(&cloud(pts), &WeightMask::filled(25, 1, 1.0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::DegeneratePlane { .. }));
    }

    #[test]
    fn insufficient_weight() {
        let pts = cloud(planar_grid(1.5));
        let err = fit_plane_weighted(&pts, &WeightMask::filled(36, 1, 0.2).unwrap()).unwrap_err();
        assert!(matches!(err, Error::InsufficientWeight { .. }));
    }

    #[test]
    fn normal_points_toward_ground() {
        // Plane above the camera (negative y) still reports a positive height.
        let pts = cloud(planar_grid(-2.0));
        let fit = fit_plane_weighted(&pts, &WeightMask::filled(36, 1, 1.0).unwrap()).unwrap();
        assert!((fit.normal + Vector3::y()).norm() < 1e-12);
        assert!((fit.height - 2.0).abs() < 1e-12);
    }

    #[test]
    fn camera_height_examples() {
        let pts = cloud(planar_grid(1.5));
        let fit = fit_plane_weighted(&pts, &WeightMask::filled(36, 1, 1.0).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = WeightMask::from_fn(36, 1, |_, _| rng.random_range(0.1..1.0)).unwrap();
        assert!((camera_height_weighted(&pts, &w, &fit).unwrap() - 1.5).abs() < 1e-12);

        let two = cloud(vec![Vector3::new(0.0, 1.0, 3.0), Vector3::new(0.0, 2.0, 3.0)]);
        let w = WeightMask::new(2, 1, vec![0.25, 0.75]).unwrap();
        let plane = PlaneFit {
            normal: Vector3::y(),
            height: 1.0,
            condition_number: 1.0,
            inlier_weight_sum: 1.0,
        };
        // Weights 1:3 give (1 + 3·2) / 4.
        assert!((camera_height_weighted(&two, &w, &plane).unwrap() - 1.75).abs() < 1e-15);
        let zero = WeightMask::filled(2, 1, 0.0).unwrap();
        assert!(camera_height_weighted(&two, &zero, &plane).is_err());
    }

    #[test]
    fn median_height_examples() {
        let plane = PlaneFit {
            normal: Vector3::y(),
            height: 1.0,
            condition_number: 1.0,
            inlier_weight_sum: 1.0,
        };
        let pts = cloud(vec![
            Vector3::new(0.0, 1.0, 1.0),
            Vector3::new(0.0, 100.0, 1.0),
            Vector3::new(0.0, 2.0, 1.0),
        ]);
        let all = WeightMask::filled(3, 1, 1.0).unwrap();
        assert_eq!(camera_height_median(&pts, &all, &plane, 0.5).unwrap(), 2.0);
        let one = WeightMask::new(3, 1, vec![0.0, 0.9, 0.1]).unwrap();
        assert_eq!(camera_height_median(&pts, &one, &plane, 0.5).unwrap(), 100.0);
        let none = WeightMask::filled(3, 1, 0.2).unwrap();
        assert!(matches!(camera_height_median(&pts, &none, &plane, 0.5), Err(Error::NoValidPixels)));
    }

    #[test]
    fn median_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 1..40 {
            let mut values: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut sorted = values.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(lower_median(&mut values), Some(sorted[(n - 1) / 2]));
        }
    }

    #[test]
    fn scale_factor_examples() {
        assert!((scale_factor(1.70, 0.85).unwrap().scale_factor - 2.0).abs() < 1e-15);
        assert_eq!(scale_factor(1.3, 1.3).unwrap().scale_factor, 1.0);
        assert!(scale_factor(1.7, 0.0).is_err());
        assert!(scale_factor(-1.0, 1.0).is_err());
    }

    #[test]
    fn plane_loss_examples() {
        let params = PlaneLossWeights {
            lambda_plane: 1.0,
            lambda_reg: 0.1,
            w_floor: 1e-3,
        };
        let pts = cloud(planar_grid(1.5));
        let w = WeightMask::filled(36, 1, 1.0).unwrap();
        assert_eq!(plane_consistency_loss(&pts, &w, 1.5, &Vector3::y(), &params).unwrap(), 0.0);

        let one = cloud(vec![Vector3::new(0.0, 1.6, 2.0)]);
        let w = WeightMask::new(1, 1, vec![0.5]).unwrap();
        let value = plane_consistency_loss(&one, &w, 1.5, &Vector3::y(), &params).unwrap();
        assert!((value - (0.05 - 0.1 * 0.5f64.ln())).abs() < 1e-12);
        assert!((value - 0.11931).abs() < 1e-5);
    }

    #[test]
    fn optimal_weight_matches_numeric_minimization() {
        let params = PlaneLossWeights {
            lambda_plane: 1.0,
            lambda_reg: 0.1,
            w_floor: 1e-3,
        };
        let objective = |w: f64, r: f64| params.lambda_plane * w * r - params.lambda_reg * w.ln();
        for &r in &[0.0, 0.01, 0.05, 0.1, 0.2, 0.7, 3.0, 50.0, 500.0] {
            // Golden-section search on [w_floor, 1]; the objective is convex in w.
            let (mut lo, mut hi) = (params.w_floor, 1.0);
            let g = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..200 {
                let a = hi - g * (hi - lo);
                let b = lo + g * (hi - lo);
                if objective(a, r) < objective(b, r) {
                    hi = b;
                } else {
                    lo = a;
                }
            }
            let numeric = 0.5 * (lo + hi);
            assert!((optimal_weight(r, &params) - numeric).abs() < 1e-6, "r={r}");
        }
    }

    #[test]
    fn init_region_geometry() {
        let region = InitRegion::default();
        let mask = region.mask(10, 10, 0.0).unwrap();
        // bottom 3 rows, columns 2..8
        assert_eq!(mask.total(), 18.0);
        assert_eq!(mask.get(2, 7), 1.0);
        assert_eq!(mask.get(1, 9), 0.0);
        assert_eq!(mask.get(8, 9), 0.0);
        assert_eq!(mask.get(5, 6), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tilted_plane(normal: Vector3<f64>, h: f64, seed: u64) -> (PointCloud, WeightMask) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = normal.normalize();
            let a = normal.cross(&Vector3::z()).normalize();
            let b = normal.cross(&a);
            let pts: Vec<_> = (0..60)
                .map(|_| normal * h + a * rng.random_range(-6.0..6.0) + b * rng.random_range(-6.0..6.0))
                .collect();
            let w = WeightMask::from_fn(60, 1, |_, _| rng.random_range(0.3..1.0)).unwrap();
            (cloud(pts), w)
        }

        proptest! {
            #[test]
            fn weight_scale_invariance(c in 0.3f64..1.0, seed in 0u64..1000, tilt in -0.3f64..0.3) {
                let (pts, w) = tilted_plane(Vector3::new(tilt, 1.0, 0.2), 1.7, seed);
                let a = fit_plane_weighted(&pts, &w).unwrap();
                let b = fit_plane_weighted(&pts, &w.scaled(c).unwrap()).unwrap();
                prop_assert!((a.normal - b.normal).norm() < 1e-9);
                prop_assert!((a.height - b.height).abs() < 1e-9);
            }

            #[test]
            fn yaw_about_normal_keeps_height(angle in -3.1f64..3.1, seed in 0u64..1000) {
                let normal = Vector3::new(0.1, 1.0, -0.05).normalize();
                let (pts, w) = tilted_plane(normal, 1.4, seed);
                let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(normal), angle);
                let turned = cloud(pts.points().iter().map(|p| rot * p).collect());
                let a = fit_plane_weighted(&pts, &w).unwrap();
                let b = fit_plane_weighted(&turned, &w).unwrap();
                prop_assert!((a.height - b.height).abs() < 1e-9);
            }

            #[test]
            fn noiseless_residuals_vanish(seed in 0u64..1000, h in 0.5f64..3.0) {
                let (pts, _) = tilted_plane(Vector3::new(0.2, 1.0, 0.1), h, seed);
                let w = WeightMask::filled(60, 1, 1.0).unwrap();
                let fit = fit_plane_weighted(&pts, &w).unwrap();
                for p in pts.points() {
                    prop_assert!((fit.height - fit.offset(p)).abs() <= 1e-9);
                }
            }

            #[test]
            fn scale_factor_of_equal_heights_is_one(h in 1e-3f64..1e3) {
                prop_assert_eq!(scale_factor(h, h).unwrap().scale_factor, 1.0);
            }
        }
    }
}
