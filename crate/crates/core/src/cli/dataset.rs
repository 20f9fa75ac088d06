//! On-disk sequence layout:
//!
//! ```text
//! DIR/
//!   scene.json            scene description and prediction misscale
//!   poses.txt             ground-truth world-from-camera poses
//!   image/000000.pfm      rendered intensities
//!   depth/000000.pfm      ground-truth depth
//!   mask/000000.pgm       ground-truth ground mask
//!   prediction/
//!     depth/000000.pfm    depth × misscale
//!     poses.txt           poses with translations × misscale
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{read_depth, read_image, read_mask, read_poses, write_atomic, write_depth, write_image, write_mask, write_poses};
use super::CliError;
use crate::geometry::{DepthMap, Intrinsics};
use crate::plane::WeightMask;
use crate::synth::{SceneSpec, SyntheticFrame, SyntheticSequence};

pub const SCENE_FILE: &str = "scene.json";
pub const POSES_FILE: &str = "poses.txt";
pub const IMAGE_DIR: &str = "image";
pub const DEPTH_DIR: &str = "depth";
pub const MASK_DIR: &str = "mask";
pub const PREDICTION_DIR: &str = "prediction";

/// Contents of `scene.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub scene: SceneSpec,
    pub misscale: f64,
}

pub fn frame_name(index: usize) -> String {
    format!("{index:06}")
}

/// Sorted stems of the `NNNNNN.<ext>` files in `dir`.
pub fn list_frames(dir: &Path, ext: &str) -> Result<Vec<String>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if stem.len() == 6 && stem.bytes().all(|b| b.is_ascii_digit()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

fn frame_path(dir: &Path, sub: &str, name: &str, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("{name}.{ext}"))
}

/// Writes the ground-truth sequence and its misscaled prediction copy.
pub fn write_dataset(dir: &Path, truth: &SyntheticSequence, prediction: &SyntheticSequence) -> Result<(), CliError> {
    if truth.frames.len() != prediction.frames.len() {
        return Err(CliError::Other(format!(
            "prediction has {} frames, truth has {}",
            prediction.frames.len(),
            truth.frames.len()
        )));
    }
    let record = SceneRecord {
        scene: truth.spec.clone(),
        misscale: prediction.applied_scale / truth.applied_scale,
    };
    let json = serde_json::to_string_pretty(&record).map_err(|e| CliError::Other(e.to_string()))?;
    write_atomic(&dir.join(SCENE_FILE), format!("{json}\n").as_bytes())?;
    write_poses(&dir.join(POSES_FILE), &truth.trajectory())?;
    let pred_dir = dir.join(PREDICTION_DIR);
    write_poses(&pred_dir.join(POSES_FILE), &prediction.trajectory())?;
    truth
        .frames
        .par_iter()
        .zip(&prediction.frames)
        .enumerate()
        .try_for_each(|(i, (f, p))| {
            let name = frame_name(i);
            write_image(&frame_path(dir, IMAGE_DIR, &name, "pfm"), &f.image)?;
            write_depth(&frame_path(dir, DEPTH_DIR, &name, "pfm"), &f.depth)?;
            write_mask(&frame_path(dir, MASK_DIR, &name, "pgm"), &f.ground_mask)?;
            write_depth(&frame_path(&pred_dir, DEPTH_DIR, &name, "pfm"), &p.depth)
        })
}

pub fn read_scene(dir: &Path) -> Result<SceneRecord, CliError> {
    let path = dir.join(SCENE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(&path, e.to_string()))
}

/// Reads back the ground-truth sequence written by [`write_dataset`].
pub fn load_sequence(dir: &Path) -> Result<SyntheticSequence, CliError> {
    let record = read_scene(dir)?;
    let trajectory = read_poses(&dir.join(POSES_FILE))?;
    let names = list_frames(&dir.join(DEPTH_DIR), "pfm")?;
    if names.len() != trajectory.len() {
        return Err(CliError::FrameCount {
            what: "depth maps vs poses".into(),
            left: names.len(),
            right: trajectory.len(),
        });
    }
    let frames = names
        .par_iter()
        .zip(trajectory.poses())
        .map(|(name, pose)| {
            Ok(SyntheticFrame {
                image: read_image(&frame_path(dir, IMAGE_DIR, name, "pfm"))?,
                depth: read_depth(&frame_path(dir, DEPTH_DIR, name, "pfm"))?,
                ground_mask: read_mask(&frame_path(dir, MASK_DIR, name, "pgm"))?,
                pose: *pose,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(SyntheticSequence {
        spec: record.scene,
        frames,
        applied_scale: 1.0,
    })
}

/// Every depth map under `<dir>/depth`, in frame order.
pub fn load_depths(dir: &Path) -> Result<Vec<(String, DepthMap)>, CliError> {
    let depth_dir = dir.join(DEPTH_DIR);
    let names = list_frames(&depth_dir, "pfm")?;
    if names.is_empty() {
        return Err(CliError::EmptyDataset(depth_dir));
    }
    names
        .into_par_iter()
        .map(|name| {
            let d = read_depth(&frame_path(dir, DEPTH_DIR, &name, "pfm"))?;
            Ok((name, d))
        })
        .collect()
}

/// The ground-truth mask for each named frame.
pub fn load_masks(dir: &Path, names: &[String]) -> Result<Vec<WeightMask>, CliError> {
    names
        .par_iter()
        .map(|name| read_mask(&frame_path(dir, MASK_DIR, name, "pgm")))
        .collect()
}

/// Intrinsics from the config, else from the dataset's `scene.json`.
pub fn resolve_intrinsics(configured: Option<Intrinsics>, dataset: Option<&Path>) -> Result<Intrinsics, CliError> {
    if let Some(k) = configured {
        return Ok(k);
    }
    match dataset {
        Some(dir) if dir.join(SCENE_FILE).exists() => Ok(read_scene(dir)?.scene.intrinsics),
        _ => Err(CliError::Config(
            "no intrinsics: set `intrinsics` in the config or point `dataset` at a directory with scene.json".into(),
        )),
    }
}
