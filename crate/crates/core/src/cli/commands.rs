use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{MaskChoice, RunConfig};
use super::dataset::{self, load_depths, load_masks, resolve_intrinsics, MASK_DIR, POSES_FILE};
use super::io::{cell, read_poses, write_mask, write_poses, CsvTable};
use super::{CliError, Command};
use crate::eval::{
    depth_metrics, height_rescale, mask_iou, median_rescale, rescale_trajectory_online, segment_errors, DepthMetrics,
    HeightMode, ScaleTrace, SegmentErrors,
};
use crate::geometry::{backproject, DepthMap, Intrinsics, Trajectory};
use crate::optimize::{ablation_suite, ConvergenceTrace, MaskSource, ToyModel, ToyProblem, Variant};
use crate::plane::{
    camera_height_median, camera_height_weighted, fit_plane_weighted, scale_factor, segment_ground_irls, PlaneFit,
    Segmentation, WeightMask,
};
use crate::synth::{render_sequence, rescale_sequence};
use crate::warp::ValidMask;
use crate::Error;

pub const PLANES_CSV: &str = "planes.csv";
pub const SCALE_CSV: &str = "scale.csv";
pub const SEGMENTATION_CSV: &str = "segmentation.csv";
pub const RESCALED_POSES: &str = "poses_rescaled.txt";
pub const SEGMENT_ERRORS_CSV: &str = "segment_errors.csv";
pub const DEPTH_METRICS_CSV: &str = "depth_metrics.csv";
pub const TRACE_CSV: &str = "trace.csv";
pub const ABLATION_CSV: &str = "ablation.csv";

pub const PLANE_COLUMNS: [&str; 8] = [
    "frame",
    "normal_x",
    "normal_y",
    "normal_z",
    "camera_height",
    "scale_factor",
    "condition_number",
    "scale_std",
];
pub const SEGMENTATION_COLUMNS: [&str; 12] = [
    "frame",
    "iterations",
    "converged",
    "rejected_refits",
    "initial_loss",
    "final_loss",
    "normal_x",
    "normal_y",
    "normal_z",
    "plane_height",
    "ground_fraction",
    "iou",
];
pub const SEGMENT_ERROR_COLUMNS: [&str; 5] = ["stage", "length", "translation_error_pct", "rotation_error_deg_per_100m", "segments"];
pub const TRACE_COLUMNS: [&str; 10] = [
    "step",
    "scale_factor",
    "translation_ratio",
    "loss",
    "photometric",
    "smoothness",
    "depth_consistency",
    "pose_consistency",
    "depth_scaling",
    "translation_scaling",
];
pub const ABLATION_COLUMNS: [&str; 5] = [
    "variant",
    "initial_scale",
    "final_scale_factor",
    "final_scale_error",
    "terminal_scale_error",
];

pub struct Context {
    pub config: RunConfig,
    pub output: PathBuf,
    pub mode: Option<String>,
}

impl Context {
    fn out(&self, name: &str) -> PathBuf {
        self.output.join(name)
    }

    fn height_mode(&self) -> Result<HeightMode, CliError> {
        match &self.mode {
            None => Ok(HeightMode::default()),
            Some(m) => m.parse().map_err(|e: Error| CliError::Config(e.to_string())),
        }
    }

    fn intrinsics(&self) -> Result<Intrinsics, CliError> {
        resolve_intrinsics(self.config.intrinsics, self.config.dataset.as_deref())
    }

    /// Predictions when configured, else the dataset's own depth maps.
    fn depth_dir(&self) -> Result<&Path, CliError> {
        match &self.config.predictions {
            Some(p) => Ok(p),
            None => self.config.dataset(),
        }
    }
}

pub fn dispatch(command: Command, ctx: &Context) -> Result<(), CliError> {
    match command {
        Command::SynthGen => synth_gen(ctx),
        Command::FitPlane => plane_table(ctx, PLANES_CSV),
        Command::EstimateScale => plane_table(ctx, SCALE_CSV),
        Command::SegmentGround => segment_ground(ctx),
        Command::RescaleOdometry => rescale_odometry(ctx),
        Command::EvalDepth => eval_depth(ctx),
        Command::EvalOdometry => eval_odometry(ctx),
        Command::DemoConverge => demo_converge(ctx),
        Command::Ablate => ablate(ctx),
    }
}

fn synth_gen(ctx: &Context) -> Result<(), CliError> {
    let spec = ctx.config.scene();
    let truth = render_sequence(&spec)?;
    let prediction = rescale_sequence(&truth, ctx.config.misscale)?;
    dataset::write_dataset(&ctx.output, &truth, &prediction)?;
    println!("wrote {} frames to {}", truth.frames.len(), ctx.output.display());
    Ok(())
}

/// Ground mask per frame, from the dataset or from IRLS on the depth itself.
fn ground_masks(ctx: &Context, names: &[String], depths: &[DepthMap], k: &Intrinsics) -> Result<Vec<WeightMask>, CliError> {
    match ctx.config.ground_masks {
        MaskChoice::GroundTruth => load_masks(ctx.config.dataset()?, names),
        MaskChoice::Irls => depths
            .par_iter()
            .zip(names)
            .map(|(d, name)| hard_mask(&segment(d, k, &ctx.config, name)?.mask))
            .collect(),
    }
}

/// Thresholds soft IRLS weights into a 0/1 ground mask. Refitting on the soft
/// weights would let the many floor-weighted far pixels bias the plane.
fn hard_mask(soft: &WeightMask) -> Result<WeightMask, CliError> {
    let weights = soft.weights().iter().map(|w| if *w >= crate::eval::MASK_THRESHOLD { 1.0 } else { 0.0 }).collect();
    Ok(WeightMask::new(soft.width(), soft.height(), weights)?)
}

/// IRLS segmentation, keeping the last iterate when it stops short.
fn segment(depth: &DepthMap, k: &Intrinsics, config: &RunConfig, name: &str) -> Result<Segmentation, CliError> {
    match segment_ground_irls(depth, k, &config.irls) {
        Ok(s) => Ok(s),
        Err(Error::NonConvergence { last }) => {
            log::warn!("frame {name}: segmentation stopped after {} iterations", last.iterations);
            Ok(*last)
        }
        Err(e) => Err(e.into()),
    }
}

struct FramePlane {
    plane: PlaneFit,
    height: f64,
    scale: f64,
}

fn frame_plane(depth: &DepthMap, mask: &WeightMask, k: &Intrinsics, mode: HeightMode, h_gt: f64) -> crate::Result<FramePlane> {
    let points = backproject(depth, k)?;
    let plane = fit_plane_weighted(&points, mask)?;
    let height = match mode {
        HeightMode::WeightedLs => camera_height_weighted(&points, mask, &plane)?,
        HeightMode::Median => camera_height_median(&points, mask, &plane, crate::eval::MASK_THRESHOLD)?,
    };
    let scale = scale_factor(h_gt, height)?.scale_factor;
    Ok(FramePlane { plane, height, scale })
}

/// Per-frame scale factors; frames whose fit fails are logged and skipped.
fn frame_planes(ctx: &Context) -> Result<(Vec<String>, Vec<Option<FramePlane>>), CliError> {
    let k = ctx.intrinsics()?;
    let mode = ctx.height_mode()?;
    let (names, depths): (Vec<String>, Vec<DepthMap>) = load_depths(ctx.depth_dir()?)?.into_iter().unzip();
    let masks = ground_masks(ctx, &names, &depths, &k)?;
    let planes: Vec<Option<FramePlane>> = depths
        .par_iter()
        .zip(&masks)
        .zip(&names)
        .map(|((d, m), name)| match frame_plane(d, m, &k, mode, ctx.config.camera_height) {
            Ok(p) => Some(p),
            Err(e) => {
                log::warn!("frame {name}: skipped ({e})");
                None
            }
        })
        .collect();
    if planes.iter().all(Option::is_none) {
        return Err(CliError::AllFramesFailed(planes.len()));
    }
    Ok((names, planes))
}

fn plane_table(ctx: &Context, file: &str) -> Result<(), CliError> {
    let (names, planes) = frame_planes(ctx)?;
    let mut table = CsvTable::new(&PLANE_COLUMNS)?;
    let mut heights = Vec::new();
    for (name, p) in names.iter().zip(&planes) {
        let Some(p) = p else { continue };
        let n = &p.plane.normal;
        table.row([
            name.clone(),
            format!("{}", n.x),
            format!("{}", n.y),
            format!("{}", n.z),
            format!("{}", p.height),
            format!("{}", p.scale),
            format!("{}", p.plane.condition_number),
            String::new(),
        ])?;
        heights.push(p.height);
    }
    let trace = ScaleTrace::from_values(planes.iter().map(|p| p.as_ref().map(|p| p.scale)).collect());
    let mean_height = heights.iter().sum::<f64>() / heights.len() as f64;
    table.row([
        "summary".to_string(),
        String::new(),
        String::new(),
        String::new(),
        format!("{mean_height}"),
        cell(trace.mean),
        String::new(),
        cell(trace.std),
    ])?;
    table.finish(&ctx.out(file))?;
    println!(
        "{} of {} frames: mean scale {} std {}",
        heights.len(),
        planes.len(),
        cell(trace.mean),
        cell(trace.std)
    );
    Ok(())
}

fn segment_ground(ctx: &Context) -> Result<(), CliError> {
    let k = ctx.intrinsics()?;
    let (names, depths): (Vec<String>, Vec<DepthMap>) = load_depths(ctx.depth_dir()?)?.into_iter().unzip();
    let reference = match &ctx.config.dataset {
        Some(dir) if dir.join(MASK_DIR).is_dir() => Some(load_masks(dir, &names)?),
        _ => None,
    };
    let results: Vec<Segmentation> = depths
        .par_iter()
        .zip(&names)
        .map(|(d, name)| segment(d, &k, &ctx.config, name))
        .collect::<Result<_, _>>()?;
    let mut table = CsvTable::new(&SEGMENTATION_COLUMNS)?;
    for (i, (name, s)) in names.iter().zip(&results).enumerate() {
        write_mask(&ctx.output.join(MASK_DIR).join(format!("{name}.pgm")), &s.mask)?;
        let iou = match &reference {
            Some(masks) => Some(mask_iou(&s.mask, &masks[i])?),
            None => None,
        };
        let ground = s.mask.weights().iter().filter(|w| **w >= crate::eval::MASK_THRESHOLD).count();
        let n = &s.plane.normal;
        table.row([
            name.clone(),
            s.iterations.to_string(),
            s.converged.to_string(),
            s.rejected_refits.to_string(),
            cell(s.loss_history.first().copied()),
            cell(s.loss_history.last().copied()),
            format!("{}", n.x),
            format!("{}", n.y),
            format!("{}", n.z),
            format!("{}", s.plane.height),
            format!("{}", ground as f64 / k.pixel_count() as f64),
            cell(iou),
        ])?;
    }
    table.finish(&ctx.out(SEGMENTATION_CSV))?;
    println!("segmented {} frames", results.len());
    Ok(())
}

fn error_rows(table: &mut CsvTable, stage: &str, errors: &SegmentErrors) -> Result<(), CliError> {
    for l in &errors.per_length {
        table.row([
            stage.to_string(),
            format!("{}", l.length),
            format!("{}", l.translation),
            format!("{}", l.rotation),
            l.segments.to_string(),
        ])?;
    }
    table.row([
        stage.to_string(),
        "all".to_string(),
        format!("{}", errors.translation),
        format!("{}", errors.rotation),
        errors.segments.to_string(),
    ])
}

fn load_estimate_and_truth(ctx: &Context) -> Result<(Trajectory, Trajectory), CliError> {
    let est = read_poses(&ctx.config.estimated_poses()?)?;
    let gt = read_poses(&ctx.config.dataset()?.join(POSES_FILE))?;
    if est.len() != gt.len() {
        return Err(CliError::FrameCount {
            what: "estimated vs ground-truth poses".into(),
            left: est.len(),
            right: gt.len(),
        });
    }
    Ok((est, gt))
}

/// Scale of each relative pose `k → k+1`, taken from frame `k+1`. Frames
/// without a scale reuse the most recent one (the first available one at the
/// start of the sequence).
fn motion_scales(per_frame: &[Option<f64>]) -> Vec<f64> {
    let first = per_frame.iter().flatten().copied().next().unwrap_or(1.0);
    let mut last = first;
    per_frame[1..]
        .iter()
        .map(|s| {
            if let Some(s) = s {
                last = *s;
            }
            last
        })
        .collect()
}

fn rescale_odometry(ctx: &Context) -> Result<(), CliError> {
    let (est, gt) = load_estimate_and_truth(ctx)?;
    let (_, planes) = frame_planes(ctx)?;
    if planes.len() != est.len() {
        return Err(CliError::FrameCount {
            what: "depth maps vs estimated poses".into(),
            left: planes.len(),
            right: est.len(),
        });
    }
    let per_frame: Vec<Option<f64>> = planes.iter().map(|p| p.as_ref().map(|p| p.scale)).collect();
    let rescaled =
        rescale_trajectory_online(&est.relative_poses(), &motion_scales(&per_frame))?.left_multiplied(&est.poses()[0]);
    write_poses(&ctx.out(RESCALED_POSES), &rescaled)?;

    let lengths = &ctx.config.segment_lengths;
    let before = segment_errors(&est, &gt, lengths)?;
    let after = segment_errors(&rescaled, &gt, lengths)?;
    let mut table = CsvTable::new(&SEGMENT_ERROR_COLUMNS)?;
    error_rows(&mut table, "before", &before)?;
    error_rows(&mut table, "after", &after)?;
    table.finish(&ctx.out(SEGMENT_ERRORS_CSV))?;
    println!(
        "translation error {:.3}% before, {:.3}% after rescaling",
        before.translation, after.translation
    );
    Ok(())
}

fn eval_odometry(ctx: &Context) -> Result<(), CliError> {
    let (est, gt) = load_estimate_and_truth(ctx)?;
    let errors = segment_errors(&est, &gt, &ctx.config.segment_lengths)?;
    let mut table = CsvTable::new(&SEGMENT_ERROR_COLUMNS)?;
    error_rows(&mut table, "estimate", &errors)?;
    table.finish(&ctx.out(SEGMENT_ERRORS_CSV))?;
    println!(
        "translation error {:.3}%, rotation error {:.4} deg/100m over {} segments",
        errors.translation, errors.rotation, errors.segments
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DepthScaling {
    None,
    GtMedian,
    CamHeight,
}

fn eval_depth(ctx: &Context) -> Result<(), CliError> {
    let scaling = match ctx.mode.as_deref() {
        None | Some("none") => DepthScaling::None,
        Some("gt-median") => DepthScaling::GtMedian,
        Some("cam-height") => DepthScaling::CamHeight,
        Some(other) => return Err(CliError::Config(format!("unknown depth scaling '{other}' (none|gt-median|cam-height)"))),
    };
    let gt_dir = ctx.config.dataset()?;
    let (names, preds): (Vec<String>, Vec<DepthMap>) = load_depths(ctx.config.predictions()?)?.into_iter().unzip();
    let gt_names: Vec<String> = dataset::list_frames(&gt_dir.join(dataset::DEPTH_DIR), "pfm")?;
    if let Some(missing) = names.iter().chain(&gt_names).find(|n| !(names.contains(n) && gt_names.contains(n))) {
        return Err(CliError::Other(format!("frame {missing} lacks a prediction/ground-truth pair")));
    }
    let gts: Vec<DepthMap> = load_depths(gt_dir)?.into_iter().map(|(_, d)| d).collect();
    let masks = match scaling {
        DepthScaling::CamHeight => Some(ground_masks(ctx, &names, &preds, &ctx.intrinsics()?)?),
        _ => None,
    };
    let k = match scaling {
        DepthScaling::CamHeight => Some(ctx.intrinsics()?),
        _ => None,
    };
    let cap = ctx.config.depth_cap;
    let rows: Vec<(f64, DepthMetrics)> = (0..names.len())
        .into_par_iter()
        .map(|i| {
            let (pred, gt) = (&preds[i], &gts[i]);
            let valid = ValidMask::all(gt.width(), gt.height());
            let (scaled, s) = match scaling {
                DepthScaling::None => (pred.clone(), 1.0),
                DepthScaling::GtMedian => median_rescale(pred, gt, &valid)?,
                DepthScaling::CamHeight => height_rescale(
                    pred,
                    &masks.as_ref().expect("masks loaded")[i],
                    k.as_ref().expect("intrinsics loaded"),
                    ctx.config.camera_height,
                    HeightMode::WeightedLs,
                )?,
            };
            Ok((s, depth_metrics(&scaled, gt, &valid, cap)?))
        })
        .collect::<Result<_, crate::Error>>()?;

    let mut header = vec!["frame", "scale_factor"];
    header.extend(DepthMetrics::CSV_COLUMNS);
    let mut table = CsvTable::new(&header)?;
    for (name, (s, m)) in names.iter().zip(&rows) {
        let mut fields = vec![name.clone(), format!("{s}")];
        fields.extend(m.values().iter().map(|v| format!("{v}")));
        table.row(fields)?;
    }
    let metrics: Vec<DepthMetrics> = rows.iter().map(|(_, m)| *m).collect();
    let mean = DepthMetrics::mean(&metrics).expect("at least one frame");
    let mean_scale = rows.iter().map(|(s, _)| s).sum::<f64>() / rows.len() as f64;
    let mut fields = vec!["mean".to_string(), format!("{mean_scale}")];
    fields.extend(mean.values().iter().map(|v| format!("{v}")));
    table.row(fields)?;
    table.finish(&ctx.out(DEPTH_METRICS_CSV))?;
    println!("abs_rel {:.5} delta1 {:.4} over {} frames", mean.abs_rel, mean.delta1, rows.len());
    Ok(())
}

fn toy_setup(ctx: &Context) -> Result<(ToyProblem, ToyModel, MaskSource), CliError> {
    let mut problem = ToyProblem::from_sequence(&render_sequence(&ctx.config.scene())?)?;
    // The known height the losses compare against, independent of the
    // rendered geometry.
    problem.camera_height = ctx.config.camera_height;
    let d = &ctx.config.demo;
    let model = ToyModel::misscaled(&problem, d.initial_scale)?.with_learning_rates(d.lr_theta, d.lr_translation);
    let masks = match d.masks {
        MaskChoice::GroundTruth => MaskSource::GroundTruth,
        MaskChoice::Irls => MaskSource::Irls(ctx.config.irls),
    };
    Ok((problem, model, masks))
}

fn write_trace(path: &Path, trace: &ConvergenceTrace) -> Result<(), CliError> {
    let mut table = CsvTable::new(&TRACE_COLUMNS)?;
    for r in &trace.records {
        let c = &r.components;
        table.row([
            r.step.to_string(),
            format!("{}", r.scale_factor),
            format!("{}", r.translation_ratio),
            format!("{}", r.loss),
            format!("{}", c.photometric),
            format!("{}", c.smoothness),
            format!("{}", c.depth_consistency),
            format!("{}", c.pose_consistency),
            format!("{}", c.depth_scaling),
            format!("{}", c.translation_scaling),
        ])?;
    }
    table.finish(path)
}

pub fn trace_file(variant: Variant) -> String {
    format!("trace_{}.csv", variant.name())
}

fn demo_converge(ctx: &Context) -> Result<(), CliError> {
    let variant: Variant = match &ctx.mode {
        None => Variant::TsDs,
        Some(m) => m.parse().map_err(|e: Error| CliError::Config(e.to_string()))?,
    };
    let (problem, model, masks) = toy_setup(ctx)?;
    let runs = ablation_suite(&problem, &model, &[variant], &ctx.config.loss_weights, &masks, ctx.config.demo.steps)?;
    let trace = &runs[0].1;
    write_trace(&ctx.out(TRACE_CSV), trace)?;
    let last = trace.last().expect("at least one record");
    println!(
        "variant {}: s {:.5} after {} steps (|s - 1| = {:.5}, window mean {:.5})",
        variant.name(),
        last.scale_factor,
        last.step,
        (last.scale_factor - 1.0).abs(),
        trace.terminal_scale_error().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn ablate(ctx: &Context) -> Result<(), CliError> {
    let (problem, model, masks) = toy_setup(ctx)?;
    let runs = ablation_suite(&problem, &model, &Variant::ALL, &ctx.config.loss_weights, &masks, ctx.config.demo.steps)?;
    let mut table = CsvTable::new(&ABLATION_COLUMNS)?;
    for (variant, trace) in &runs {
        write_trace(&ctx.out(&trace_file(*variant)), trace)?;
        let last = trace.last().expect("at least one record");
        table.row([
            variant.name().to_string(),
            format!("{}", ctx.config.demo.initial_scale),
            format!("{}", last.scale_factor),
            cell(trace.final_scale_error()),
            cell(trace.terminal_scale_error()),
        ])?;
        println!(
            "{:>8}: final s {:.5}, window-mean |s - 1| {:.5}",
            variant.name(),
            last.scale_factor,
            trace.terminal_scale_error().unwrap_or(f64::NAN)
        );
    }
    table.finish(&ctx.out(ABLATION_CSV))?;
    Ok(())
}
