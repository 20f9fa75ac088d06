//! Self-supervised loss terms with analytic gradients.
//!
//! Every loss returns a [`LossResult`]: the scalar value plus the gradients
//! with respect to the inputs that a depth or egomotion predictor would
//! produce. Per-pixel terms are reduced by the arithmetic mean over valid
//! pixels. Subgradients of `|x|` use `sign(0) = 0`.
//!
//! The scaling losses treat their targets (`s_t · D̂` and `s_t · t̂`) as
//! constants: gradients never flow through the scale factor.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{backproject, check_same_dims, DepthMap, Image, Intrinsics, Pose};
use crate::plane::{fit_plane_weighted, sign, WeightMask};
use crate::warp::{warp_depth_with_jacobian, warp_image_with_jacobian, ValidMask};

/// SSIM stabilizers for intensities in `[0, 1]`.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Loss balancing weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// SSIM vs L1 balance in the photometric term.
    pub alpha: f64,
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub lambda_dc: f64,
    pub lambda_pc: f64,
    pub lambda_ds: f64,
    pub lambda_ts: f64,
    pub lambda_plane: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.85,
            lambda_p: 1.0,
            lambda_s: 0.05,
            lambda_dc: 0.15,
            lambda_pc: 0.1,
            lambda_ds: 0.05,
            lambda_ts: 0.05,
            lambda_plane: 1.0,
            lambda_reg: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        let lambdas = [
            ("lambda_p", self.lambda_p),
            ("lambda_s", self.lambda_s),
            ("lambda_dc", self.lambda_dc),
            ("lambda_pc", self.lambda_pc),
            ("lambda_ds", self.lambda_ds),
            ("lambda_ts", self.lambda_ts),
            ("lambda_plane", self.lambda_plane),
            ("lambda_reg", self.lambda_reg),
        ];
        for (name, value) in lambdas {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {value}")));
            }
        }
        Ok(())
    }
}

/// Loss value and the gradients an evaluation provides. Per-pixel gradients
/// are row-major; image gradients are pixel-major, channel-minor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// W.r.t. the (target) depth map.
    pub grad_depth: Option<Vec<f64>>,
    /// W.r.t. the source depth map of a frame pair.
    pub grad_source_depth: Option<Vec<f64>>,
    /// W.r.t. the transformed depth argument of [`depth_consistency_loss`].
    pub grad_transformed_depth: Option<Vec<f64>>,
    /// W.r.t. the (forward) translation.
    pub grad_translation: Option<Vector3<f64>>,
    /// W.r.t. the backward translation of [`pose_consistency_loss`].
    pub grad_backward_translation: Option<Vector3<f64>>,
    /// W.r.t. the reconstructed image.
    pub grad_image: Option<Vec<f64>>,
    /// W.r.t. segmentation weights.
    pub grad_weights: Option<Vec<f64>>,
}

fn check_mask(valid: &ValidMask, width: usize, height: usize) -> Result<()> {
    check_same_dims((width, height), (valid.width(), valid.height()))
}

/// Window statistics for one SSIM evaluation.
struct SsimWindow {
    ssim: f64,
    n1: f64,
    n2: f64,
    d1: f64,
    d2: f64,
    mu_x: f64,
    mu_y: f64,
    m: f64,
}

fn ssim_window(x: &[f64], y: &[f64]) -> SsimWindow {
    let m = x.len() as f64;
    let mu_x = x.iter().sum::<f64>() / m;
    let mu_y = y.iter().sum::<f64>() / m;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    let mut cov = 0.0;
    for (a, b) in x.iter().zip(y) {
        var_x += (a - mu_x) * (a - mu_x);
        var_y += (b - mu_y) * (b - mu_y);
        cov += (a - mu_x) * (b - mu_y);
    }
    var_x /= m;
    var_y /= m;
    cov /= m;
    let n1 = 2.0 * mu_x * mu_y + SSIM_C1;
    let n2 = 2.0 * cov + SSIM_C2;
    let d1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1;
    let d2 = var_x + var_y + SSIM_C2;
    SsimWindow {
        ssim: n1 * n2 / (d1 * d2),
        n1,
        n2,
        d1,
        d2,
        mu_x,
        mu_y,
        m,
    }
}

/// Valid in-bounds pixels of the 3x3 window centered at `(u, v)`.
fn window_pixels(valid: &ValidMask, u: usize, v: usize, out: &mut Vec<usize>) {
    out.clear();
    let (w, h) = (valid.width(), valid.height());
    for dv in -1i64..=1 {
        for du in -1i64..=1 {
            let (uu, vv) = (u as i64 + du, v as i64 + dv);
            if uu < 0 || vv < 0 || uu >= w as i64 || vv >= h as i64 {
                continue;
            }
            let (uu, vv) = (uu as usize, vv as usize);
            if valid.get(uu, vv) {
                out.push(vv * w + uu);
            }
        }
    }
}

/// `(1 - α) L1 + α (1 - SSIM) / 2`, averaged over valid pixels and channels.
///
/// SSIM uses a 3x3 uniform window restricted to valid in-bounds neighbors.
/// The gradient is w.r.t. the reconstructed image.
pub fn photometric_loss(target: &Image, reconstructed: &Image, valid: &ValidMask, alpha: f64) -> Result<LossResult> {
    check_same_dims((target.width(), target.height()), (reconstructed.width(), reconstructed.height()))?;
    check_mask(valid, target.width(), target.height())?;
    if target.channels() != reconstructed.channels() {
        return Err(Error::invalid("photometric loss needs matching channel counts"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let n_valid = valid.count();
    if n_valid == 0 {
        return Err(Error::NoValidPixels);
    }
    let channels = target.channels();
    let width = target.width();
    let norm = 1.0 / (n_valid as f64 * channels as f64);
    let (x_all, y_all) = (target.data(), reconstructed.data());

    let mut value = 0.0;
    let mut grad = vec![0.0; y_all.len()];
    let mut window = Vec::with_capacity(9);
    let mut xs = Vec::with_capacity(9);
    let mut ys = Vec::with_capacity(9);

    for v in 0..target.height() {
        for u in 0..width {
            if !valid.get(u, v) {
                continue;
            }
            let i = v * width + u;
            window_pixels(valid, u, v, &mut window);
            for c in 0..channels {
                let j = i * channels + c;
                let diff = y_all[j] - x_all[j];
                value += (1.0 - alpha) * diff.abs() * norm;
                grad[j] += (1.0 - alpha) * sign(diff) * norm;

                if alpha == 0.0 {
                    continue;
                }
                xs.clear();
                ys.clear();
                for &p in &window {
                    xs.push(x_all[p * channels + c]);
                    ys.push(y_all[p * channels + c]);
                }
                let s = ssim_window(&xs, &ys);
                value += alpha * 0.5 * (1.0 - s.ssim) * norm;
                // d SSIM / d y_p for every pixel in the window.
                let scale = -alpha * 0.5 * norm / (s.d1 * s.d2);
                for (idx, &p) in window.iter().enumerate() {
                    let d_mu = 1.0 / s.m;
                    let d_var = 2.0 * (ys[idx] - s.mu_y) / s.m;
                    let d_cov = (xs[idx] - s.mu_x) / s.m;
                    let d_n1 = 2.0 * s.mu_x * d_mu;
                    let d_n2 = 2.0 * d_cov;
                    let d_d1 = 2.0 * s.mu_y * d_mu;
                    let d_d2 = d_var;
                    let d_num = d_n1 * s.n2 + s.n1 * d_n2;
                    let d_den = d_d1 * s.d2 + s.d1 * d_d2;
                    let d_ssim_times_den = d_num - s.ssim * d_den;
                    grad[p * channels + c] += scale * d_ssim_times_den;
                }
            }
        }
    }
    Ok(LossResult {
        value,
        grad_image: Some(grad),
        ..LossResult::default()
    })
}

/// Mean absolute intensity difference between two pixels over channels.
fn intensity_step(image: &Image, a: usize, b: usize) -> f64 {
    let c = image.channels();
    let d = image.data();
    (0..c).map(|k| (d[a * c + k] - d[b * c + k]).abs()).sum::<f64>() / c as f64
}

/// Edge-aware inverse-depth smoothness, summed over all horizontal and
/// vertical forward differences: `Σ |∂(1/D)| exp(-|∂I|)`.
pub fn smoothness_loss(depth: &DepthMap, image: &Image) -> Result<LossResult> {
    check_same_dims((depth.width(), depth.height()), (image.width(), image.height()))?;
    let (w, h) = (depth.width(), depth.height());
    let d = depth.data();
    let mut value = 0.0;
    let mut grad = vec![0.0; d.len()];
    let mut edge = |a: usize, b: usize, value: &mut f64| {
        let weight = (-intensity_step(image, a, b)).exp();
        let diff = 1.0 / d[b] - 1.0 / d[a];
        *value += diff.abs() * weight;
        let s = sign(diff) * weight;
        grad[b] -= s / (d[b] * d[b]);
        grad[a] += s / (d[a] * d[a]);
    };
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if u + 1 < w {
                edge(i, i + 1, &mut value);
            }
            if v + 1 < h {
                edge(i, i + w, &mut value);
            }
        }
    }
    Ok(LossResult {
        value,
        grad_depth: Some(grad),
        ..LossResult::default()
    })
}

/// Mean over valid pixels of `|D'_s - D_t| / (D'_s + D_t)`.
pub fn depth_consistency_loss(d_transformed: &DepthMap, d_target: &DepthMap, valid: &ValidMask) -> Result<LossResult> {
    check_same_dims(
        (d_target.width(), d_target.height()),
        (d_transformed.width(), d_transformed.height()),
    )?;
    check_mask(valid, d_target.width(), d_target.height())?;
    let n_valid = valid.count();
    if n_valid == 0 {
        return Err(Error::NoValidPixels);
    }
    let inv_n = 1.0 / n_valid as f64;
    let (a_all, b_all) = (d_transformed.data(), d_target.data());
    let mut value = 0.0;
    let mut grad_a = vec![0.0; a_all.len()];
    let mut grad_b = vec![0.0; a_all.len()];
    for (i, &ok) in valid.flags().iter().enumerate() {
        if !ok {
            continue;
        }
        let (a, b) = (a_all[i], b_all[i]);
        let sum = a + b;
        let diff = a - b;
        value += diff.abs() / sum * inv_n;
        let common = diff.abs() / (sum * sum);
        grad_a[i] = (sign(diff) / sum - common) * inv_n;
        grad_b[i] = (-sign(diff) / sum - common) * inv_n;
    }
    Ok(LossResult {
        value,
        grad_depth: Some(grad_b),
        grad_transformed_depth: Some(grad_a),
        ..LossResult::default()
    })
}

/// `| ‖t_forward‖ - ‖t_backward‖ |`.
pub fn pose_consistency_loss(t_forward: &Vector3<f64>, t_backward: &Vector3<f64>) -> Result<LossResult> {
    if !t_forward.iter().chain(t_backward.iter()).all(|x| x.is_finite()) {
        return Err(Error::invalid("translations must be finite"));
    }
    let (nf, nb) = (t_forward.norm(), t_backward.norm());
    let s = sign(nf - nb);
    let unit = |t: &Vector3<f64>, n: f64| if n > 0.0 { t / n } else { Vector3::zeros() };
    Ok(LossResult {
        value: (nf - nb).abs(),
        grad_translation: Some(unit(t_forward, nf) * s),
        grad_backward_translation: Some(-unit(t_backward, nb) * s),
        ..LossResult::default()
    })
}

/// Everything a frame pair contributes to the base loss.
#[derive(Debug, Clone, Copy)]
pub struct FramePair<'a> {
    pub target_image: &'a Image,
    pub source_image: &'a Image,
    pub target_depth: &'a DepthMap,
    pub source_depth: &'a DepthMap,
    /// Target-to-source pose; its translation is the forward translation.
    pub pose_ts: &'a Pose,
    /// Translation predicted for the reverse direction.
    pub backward_translation: &'a Vector3<f64>,
    pub intrinsics: &'a Intrinsics,
}

/// Per-term values entering a weighted loss, each before its λ.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub photometric: f64,
    /// Smoothness sum divided by the pixel count.
    pub smoothness: f64,
    pub depth_consistency: f64,
    pub pose_consistency: f64,
    pub depth_scaling: f64,
    pub translation_scaling: f64,
}

/// A combined loss with its term breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLoss {
    pub result: LossResult,
    pub components: LossComponents,
}

/// `λ_P L_P + λ_S L_S + λ_DC L_DC + λ_PC L_PC` with gradients w.r.t. both
/// depth maps and the forward translation. Smoothness enters as its
/// per-pixel mean.
pub fn base_loss(pair: &FramePair<'_>, weights: &LossWeights) -> Result<WeightedLoss> {
    weights.validate()?;
    let k = pair.intrinsics;
    let n = k.pixel_count();
    let channels = pair.source_image.channels();
    let mut grad_target = vec![0.0; n];
    let mut grad_source = vec![0.0; n];
    let mut grad_t = Vector3::zeros();

    let (recon, valid, jac_img) =
        warp_image_with_jacobian(pair.source_image, pair.target_depth, pair.pose_ts, k)?;
    let photo = photometric_loss(pair.target_image, &recon, &valid, weights.alpha)?;
    let g_img = photo.grad_image.as_ref().expect("photometric gradient");
    for i in 0..n {
        for c in 0..channels {
            let j = i * channels + c;
            grad_target[i] += weights.lambda_p * g_img[j] * jac_img.d_depth[j];
            grad_t += weights.lambda_p * g_img[j] * jac_img.d_translation[j];
        }
    }

    let smooth = smoothness_loss(pair.target_depth, pair.target_image)?;
    let inv_n = 1.0 / n as f64;
    for (g, s) in grad_target.iter_mut().zip(smooth.grad_depth.as_ref().expect("smoothness gradient")) {
        *g += weights.lambda_s * s * inv_n;
    }

    let (dw, jac_d) = warp_depth_with_jacobian(pair.source_depth, pair.target_depth, pair.pose_ts, k)?;
    let dc = depth_consistency_loss(&dw.sampled, &dw.projected, &dw.valid)?;
    let g_sampled = dc.grad_transformed_depth.as_ref().expect("dc gradient");
    let g_projected = dc.grad_depth.as_ref().expect("dc gradient");
    for i in 0..n {
        if !dw.valid.flags()[i] {
            continue;
        }
        let (ga, gb) = (weights.lambda_dc * g_sampled[i], weights.lambda_dc * g_projected[i]);
        grad_target[i] += ga * jac_d.sampled_d_target[i] + gb * jac_d.projected_d_target[i];
        grad_t += ga * jac_d.sampled_d_translation[i];
        grad_t.z += gb;
        for (idx, w) in jac_d.sampled_source_taps[i] {
            grad_source[idx] += ga * w;
        }
    }

    let pc = pose_consistency_loss(pair.pose_ts.translation(), pair.backward_translation)?;
    grad_t += weights.lambda_pc * pc.grad_translation.expect("pc gradient");

    let components = LossComponents {
        photometric: photo.value,
        smoothness: smooth.value * inv_n,
        depth_consistency: dc.value,
        pose_consistency: pc.value,
        ..LossComponents::default()
    };
    let value = weights.lambda_p * components.photometric
        + weights.lambda_s * components.smoothness
        + weights.lambda_dc * components.depth_consistency
        + weights.lambda_pc * components.pose_consistency;
    Ok(WeightedLoss {
        result: LossResult {
            value,
            grad_depth: Some(grad_target),
            grad_source_depth: Some(grad_source),
            grad_translation: Some(grad_t),
            ..LossResult::default()
        },
        components,
    })
}

fn check_scale(s_t: f64) -> Result<()> {
    if !(s_t.is_finite() && s_t > 0.0) {
        return Err(Error::invalid(format!("scale factor must be positive, got {s_t}")));
    }
    Ok(())
}

/// `|ĥ - h_gt|`; the gradient is w.r.t. `ĥ` and stored as a one-element
/// `grad_depth`-free result (see [`camera_height_loss_through_fit`] for the
/// depth gradient).
pub fn camera_height_loss(h_est: f64, h_gt: f64) -> Result<LossResult> {
    for h in [h_est, h_gt] {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::invalid(format!("camera heights must be positive, got {h}")));
        }
    }
    Ok(LossResult {
        value: (h_est - h_gt).abs(),
        ..LossResult::default()
    })
}

/// Camera-height loss with its gradient w.r.t. every depth, differentiated
/// through the weighted least-squares plane fit and the weighted height.
/// Nothing is detached here, which is what lets ground depths "sink" when
/// this loss is minimized on its own.
pub fn camera_height_loss_through_fit(
    depth: &DepthMap,
    weights: &WeightMask,
    k: &Intrinsics,
    h_gt: f64,
) -> Result<LossResult> {
    let points = backproject(depth, k)?;
    let plane = fit_plane_weighted(&points, weights)?;
    let h_est = plane.height;
    let loss = camera_height_loss(h_est, h_gt)?;

    let mut a = Matrix3::<f64>::zeros();
    let mut b = Vector3::<f64>::zeros();
    for (p, &w) in points.points().iter().zip(weights.weights()) {
        a += w * p * p.transpose();
        b += w * p;
    }
    let total = plane.inlier_weight_sum;
    let a_inv = a.try_inverse().ok_or(Error::DegeneratePlane {
        condition: plane.condition_number,
    })?;
    let n = a_inv * b;
    let n_norm = n.norm();
    let orientation = sign(plane.normal.dot(&n));
    let normal = plane.normal;
    // d n̄ = orientation (I - n̄ n̄ᵀ) / ‖n‖ · d n
    let projector = (Matrix3::identity() - normal * normal.transpose()) * (orientation / n_norm);
    let g = projector.transpose() * b;
    let v = a_inv * g;

    let outer = sign(h_est - h_gt);
    let grad: Vec<f64> = points
        .points()
        .iter()
        .zip(weights.weights())
        .enumerate()
        .map(|(i, (p, &w))| {
            if w == 0.0 {
                return 0.0;
            }
            let r = k.ray((i % k.width) as f64, (i / k.width) as f64);
            let dn = r * (1.0 - p.dot(&n)) - p * r.dot(&n);
            outer * w * (r.dot(&normal) + v.dot(&dn)) / total
        })
        .collect();
    Ok(LossResult {
        value: loss.value,
        grad_depth: Some(grad),
        ..LossResult::default()
    })
}

/// Mean over pixels of `|D̂ - D^DS| / D^DS` with the detached target
/// `D^DS = s_t D̂`.
pub fn depth_scaling_loss(depth: &DepthMap, s_t: f64) -> Result<LossResult> {
    check_scale(s_t)?;
    let d = depth.data();
    let inv_n = 1.0 / d.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(d.len());
    for &di in d {
        let target = s_t * di;
        let diff = di - target;
        value += diff.abs() / target * inv_n;
        grad.push(sign(diff) / target * inv_n);
    }
    Ok(LossResult {
        value,
        grad_depth: Some(grad),
        ..LossResult::default()
    })
}

/// `Σ_i |t_i - t^TS_i|` with the detached target `t^TS = s_t t`.
pub fn translation_scaling_loss(t: &Vector3<f64>, s_t: f64) -> Result<LossResult> {
    check_scale(s_t)?;
    let target = t * s_t;
    let diff = t - target;
    Ok(LossResult {
        value: diff.abs().sum(),
        grad_translation: Some(diff.map(sign)),
        ..LossResult::default()
    })
}

/// Base loss plus `λ_DS L_DS + λ_TS L_TS`, with `s_t` held constant.
pub fn total_loss(pair: &FramePair<'_>, s_t: f64, weights: &LossWeights) -> Result<WeightedLoss> {
    let WeightedLoss {
        mut result,
        mut components,
    } = base_loss(pair, weights)?;
    let ds = depth_scaling_loss(pair.target_depth, s_t)?;
    let ts = translation_scaling_loss(pair.pose_ts.translation(), s_t)?;
    components.depth_scaling = ds.value;
    components.translation_scaling = ts.value;
    result.value += weights.lambda_ds * ds.value + weights.lambda_ts * ts.value;
    if let Some(g) = result.grad_depth.as_mut() {
        for (gi, di) in g.iter_mut().zip(ds.grad_depth.as_ref().expect("ds gradient")) {
            *gi += weights.lambda_ds * di;
        }
    }
    if let Some(g) = result.grad_translation.as_mut() {
        *g += weights.lambda_ts * ts.grad_translation.expect("ts gradient");
    }
    Ok(WeightedLoss { result, components })
}
