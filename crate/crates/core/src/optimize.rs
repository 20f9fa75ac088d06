//! Toy gradient-descent harness: a per-pixel log-depth field and a
//! translation vector stand in for the depth and egomotion networks, and are
//! trained with the full loss on one synthetic frame pair.
//!
//! Per-pixel parameters use a step of `lr · N · ∂L/∂θ`, with `N` the pixel
//! count: every loss is a per-pixel mean, so the raw per-pixel gradient is
//! `O(1/N)` and the `N` factor makes the learning rate resolution
//! independent (it is plain gradient descent on the pixel-summed objective).

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{estimate_camera_height, HeightMode, MASK_THRESHOLD};
use crate::geometry::{DepthMap, Image, Intrinsics, Pose, D_MIN};
use crate::losses::{camera_height_loss_through_fit, total_loss, FramePair, LossComponents, LossWeights};
use crate::plane::{segment_ground_irls, IrlsConfig, WeightMask};
use crate::synth::SyntheticSequence;

pub const DEFAULT_LR_THETA: f64 = 0.05;
pub const DEFAULT_LR_TRANSLATION: f64 = 0.008;
pub const DEFAULT_STEPS: usize = 500;
/// Records averaged by [`ConvergenceTrace::terminal_scale_error`].
pub const TERMINAL_WINDOW: usize = 50;

/// Trainable state. Target and source depths are `exp(θ) ⊙ D_ref` with the
/// same θ grid; the rotation stays at its reference value.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub theta: Vec<f64>,
    /// Target-to-source translation.
    pub translation: Vector3<f64>,
    pub lr_theta: f64,
    pub lr_translation: f64,
}

impl ToyModel {
    /// A model whose depths and translation are the scene's divided by
    /// `initial_scale`, i.e. whose scale factor starts at `initial_scale`.
    pub fn misscaled(problem: &ToyProblem, initial_scale: f64) -> Result<Self> {
        if !(initial_scale.is_finite() && initial_scale > 0.0) {
            return Err(Error::invalid(format!("initial scale must be positive, got {initial_scale}")));
        }
        Ok(ToyModel {
            theta: vec![-initial_scale.ln(); problem.intrinsics.pixel_count()],
            translation: problem.reference_pose.translation() / initial_scale,
            lr_theta: DEFAULT_LR_THETA,
            lr_translation: DEFAULT_LR_TRANSLATION,
        })
    }

    pub fn with_learning_rates(mut self, lr_theta: f64, lr_translation: f64) -> Self {
        self.lr_theta = lr_theta;
        self.lr_translation = lr_translation;
        self
    }

    fn depth(&self, reference: &DepthMap) -> Result<DepthMap> {
        let data: Vec<f64> = self.theta.iter().zip(reference.data()).map(|(t, d)| t.exp() * d).collect();
        DepthMap::new(reference.width(), reference.height(), data)
    }
}

/// One frame pair of a synthetic sequence, with reference depths.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyProblem {
    pub target_image: Image,
    pub source_image: Image,
    pub target_reference: DepthMap,
    pub source_reference: DepthMap,
    pub ground_mask: WeightMask,
    /// True target-to-source pose; only its rotation is used by the model.
    pub reference_pose: Pose,
    pub intrinsics: Intrinsics,
    pub camera_height: f64,
}

impl ToyProblem {
    /// Uses frame 1 as the target and frame 0 as the source.
    pub fn from_sequence(seq: &SyntheticSequence) -> Result<Self> {
        if seq.frames.len() < 2 {
            return Err(Error::invalid("the toy problem needs at least two frames"));
        }
        let (source, target) = (&seq.frames[0], &seq.frames[1]);
        Ok(ToyProblem {
            target_image: target.image.clone(),
            source_image: source.image.clone(),
            target_reference: target.depth.clone(),
            source_reference: source.depth.clone(),
            ground_mask: target.ground_mask.clone(),
            reference_pose: source.pose.inverse().compose(&target.pose),
            intrinsics: seq.spec.intrinsics,
            camera_height: seq.spec.camera_height,
        })
    }
}

/// Where each step's ground mask comes from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    #[default]
    GroundTruth,
    Irls(IrlsConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub scale_factor: f64,
    pub loss: f64,
    pub components: LossComponents,
    /// `‖t‖ / ‖t_ref‖`.
    pub translation_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub records: Vec<TraceRecord>,
}

impl ConvergenceTrace {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// `|s − 1|` after the last update.
    pub fn final_scale_error(&self) -> Option<f64> {
        self.last().map(|r| (r.scale_factor - 1.0).abs())
    }

    /// Mean `|s − 1|` over the last [`TERMINAL_WINDOW`] records. Plain
    /// descent on sign-valued gradients never settles exactly, so a single
    /// record carries step-to-step jitter that a short window averages out.
    pub fn terminal_scale_error(&self) -> Option<f64> {
        let n = self.records.len().min(TERMINAL_WINDOW);
        if n == 0 {
            return None;
        }
        let tail = &self.records[self.records.len() - n..];
        Some(tail.iter().map(|r| (r.scale_factor - 1.0).abs()).sum::<f64>() / n as f64)
    }
}

/// One evaluated step: the loss and the update it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct StepEvaluation {
    pub record: TraceRecord,
    /// `∂L/∂θ` per pixel, chained through both depth maps.
    pub grad_theta: Vec<f64>,
    pub grad_translation: Vector3<f64>,
}

fn per_step_mask(problem: &ToyProblem, depth: &DepthMap, source: &MaskSource) -> Result<WeightMask> {
    match source {
        MaskSource::GroundTruth => Ok(problem.ground_mask.clone()),
        MaskSource::Irls(config) => match segment_ground_irls(depth, &problem.intrinsics, config) {
            Ok(seg) => Ok(seg.mask),
            Err(Error::NonConvergence { last }) => Ok(last.mask),
            Err(e) => Err(e),
        },
    }
}

/// Evaluates the total loss of `model` at `step` without updating it.
pub fn evaluate_step(
    problem: &ToyProblem,
    model: &ToyModel,
    weights: &LossWeights,
    masks: &MaskSource,
    step: usize,
) -> Result<StepEvaluation> {
    let target_depth = model.depth(&problem.target_reference)?;
    let source_depth = model.depth(&problem.source_reference)?;
    let mask = per_step_mask(problem, &target_depth, masks)?;
    // The scale factor is a constant within the step.
    let h_est = estimate_camera_height(&target_depth, &mask, &problem.intrinsics, HeightMode::WeightedLs)?;
    let s_t = problem.camera_height / h_est;

    let pose_ts = problem.reference_pose.with_translation(model.translation);
    let backward = *pose_ts.inverse().translation();
    let pair = FramePair {
        target_image: &problem.target_image,
        source_image: &problem.source_image,
        target_depth: &target_depth,
        source_depth: &source_depth,
        pose_ts: &pose_ts,
        backward_translation: &backward,
        intrinsics: &problem.intrinsics,
    };
    let loss = total_loss(&pair, s_t, weights)?;
    let gd = loss.result.grad_depth.as_ref().expect("total loss reports grad_depth");
    let gs = loss.result.grad_source_depth.as_ref().expect("total loss reports grad_source_depth");
    let grad_theta = (0..gd.len())
        .map(|i| gd[i] * target_depth.data()[i] + gs[i] * source_depth.data()[i])
        .collect();
    let reference_norm = problem.reference_pose.translation().norm();
    Ok(StepEvaluation {
        record: TraceRecord {
            step,
            scale_factor: s_t,
            loss: loss.result.value,
            components: loss.components,
            translation_ratio: model.translation.norm() / reference_norm,
        },
        grad_theta,
        grad_translation: loss.result.grad_translation.expect("total loss reports grad_translation"),
    })
}

fn check_finite(model: &ToyModel, problem: &ToyProblem, step: usize) -> Result<()> {
    let depth_ok = model
        .theta
        .iter()
        .zip(problem.target_reference.data().iter().zip(problem.source_reference.data()))
        .all(|(t, (a, b))| t.is_finite() && t.exp() * a >= D_MIN && t.exp() * b >= D_MIN);
    if !depth_ok || !model.translation.iter().all(|x| x.is_finite()) {
        return Err(Error::Divergence { step });
    }
    Ok(())
}

/// Plain gradient descent for `steps` steps. Record `i` holds the state
/// before update `i`; the final record is the state after the last update.
pub fn demo_converge(
    problem: &ToyProblem,
    model: ToyModel,
    weights: &LossWeights,
    masks: &MaskSource,
    steps: usize,
) -> Result<ConvergenceTrace> {
    if steps == 0 {
        return Err(Error::invalid("at least one step is required"));
    }
    weights.validate()?;
    let mut model = model;
    let n = model.theta.len() as f64;
    let mut records = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        check_finite(&model, problem, step)?;
        let eval = evaluate_step(problem, &model, weights, masks, step)?;
        if !eval.record.loss.is_finite() || !eval.record.scale_factor.is_finite() {
            return Err(Error::Divergence { step });
        }
        records.push(eval.record);
        if step == steps {
            break;
        }
        for (t, g) in model.theta.iter_mut().zip(&eval.grad_theta) {
            *t -= model.lr_theta * n * g;
        }
        model.translation -= model.lr_translation * eval.grad_translation;
    }
    log::debug!("toy run finished: final record {:?}", records.last());
    Ok(ConvergenceTrace { records })
}

/// Which scale-recovery terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    None,
    TsOnly,
    DsOnly,
    TsDs,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::None, Variant::TsOnly, Variant::DsOnly, Variant::TsDs];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::TsOnly => "ts-only",
            Variant::DsOnly => "ds-only",
            Variant::TsDs => "ts+ds",
        }
    }

    /// `weights` with the inactive scaling terms zeroed.
    pub fn apply(&self, weights: &LossWeights) -> LossWeights {
        let (ds, ts) = match self {
            Variant::None => (false, false),
            Variant::TsOnly => (false, true),
            Variant::DsOnly => (true, false),
            Variant::TsDs => (true, true),
        };
        LossWeights {
            lambda_ds: if ds { weights.lambda_ds } else { 0.0 },
            lambda_ts: if ts { weights.lambda_ts } else { 0.0 },
            ..*weights
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant '{s}' (none|ts-only|ds-only|ts+ds)")))
    }
}

pub fn ablation_run(
    problem: &ToyProblem,
    model: ToyModel,
    variant: Variant,
    weights: &LossWeights,
    masks: &MaskSource,
    steps: usize,
) -> Result<ConvergenceTrace> {
    demo_converge(problem, model, &variant.apply(weights), masks, steps)
}

/// Runs `variants` concurrently from the same initial model.
pub fn ablation_suite(
    problem: &ToyProblem,
    model: &ToyModel,
    variants: &[Variant],
    weights: &LossWeights,
    masks: &MaskSource,
    steps: usize,
) -> Result<Vec<(Variant, ConvergenceTrace)>> {
    variants
        .par_iter()
        .map(|&v| ablation_run(problem, model.clone(), v, weights, masks, steps).map(|t| (v, t)))
        .collect()
}

/// Outcome of descending the camera-height loss with gradients flowing
/// through the plane fit into every depth. Reductions are positive when the
/// mean depth shrank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkReport {
    pub initial_height: f64,
    pub final_height: f64,
    pub ground_depth_before: f64,
    pub ground_depth_after: f64,
    pub obstacle_depth_before: f64,
    pub obstacle_depth_after: f64,
}

impl SinkReport {
    pub fn ground_reduction(&self) -> f64 {
        self.ground_depth_before - self.ground_depth_after
    }

    pub fn obstacle_reduction(&self) -> f64 {
        self.obstacle_depth_before - self.obstacle_depth_after
    }
}

fn masked_mean(d: &DepthMap, labels: &WeightMask) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, w) in d.data().iter().zip(labels.weights()) {
        if *w >= MASK_THRESHOLD {
            sum += x;
            n += 1;
        }
    }
    sum / n as f64
}

/// Minimizes `|ĥ − h_gt|` alone by gradient descent on the depths, with the
/// soft `weights` held fixed and nothing detached. Ground and
/// obstacle means are taken over the pixels of `ground` and `obstacle` at or
/// above [`MASK_THRESHOLD`]. The step is `lr · Σw · ∂L/∂D`.
pub fn camera_height_sink(
    depth: &DepthMap,
    weights: &WeightMask,
    ground: &WeightMask,
    obstacle: &WeightMask,
    k: &Intrinsics,
    h_gt: f64,
    lr: f64,
    steps: usize,
) -> Result<SinkReport> {
    let total = weights.total();
    let mut current = depth.clone();
    let initial_height = estimate_camera_height(depth, weights, k, HeightMode::WeightedLs)?;
    for step in 0..steps {
        let r = camera_height_loss_through_fit(&current, weights, k, h_gt)?;
        let g = r.grad_depth.expect("through-fit loss reports grad_depth");
        let data: Vec<f64> = current.data().iter().zip(&g).map(|(d, gi)| d - lr * total * gi).collect();
        if data.iter().any(|d| !(d.is_finite() && *d >= D_MIN)) {
            return Err(Error::Divergence { step });
        }
        current = DepthMap::new(k.width, k.height, data)?;
    }
    let final_height = estimate_camera_height(&current, weights, k, HeightMode::WeightedLs)?;
    Ok(SinkReport {
        initial_height,
        final_height,
        ground_depth_before: masked_mean(depth, ground),
        ground_depth_after: masked_mean(&current, ground),
        obstacle_depth_before: masked_mean(depth, obstacle),
        obstacle_depth_after: masked_mean(&current, obstacle),
    })
}
