use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::eval::{DEFAULT_DEPTH_CAP, DEFAULT_SEGMENT_LENGTHS};
use crate::geometry::Intrinsics;
use crate::losses::LossWeights;
use crate::optimize::{DEFAULT_LR_THETA, DEFAULT_LR_TRANSLATION, DEFAULT_STEPS};
use crate::plane::IrlsConfig;
use crate::synth::SceneSpec;

/// Known camera height of the reference platform, meters.
pub const DEFAULT_CAMERA_HEIGHT: f64 = 1.70;

/// Where ground masks come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskChoice {
    /// The dataset's `mask/` files, or the rendered mask for toy runs.
    #[default]
    GroundTruth,
    /// IRLS segmentation of the depth map being evaluated.
    Irls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    /// Scale factor of the initial model; depths start at `1/s₀` of the truth.
    pub initial_scale: f64,
    pub steps: usize,
    pub lr_theta: f64,
    pub lr_translation: f64,
    pub masks: MaskChoice,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            initial_scale: 2.0,
            steps: DEFAULT_STEPS,
            lr_theta: DEFAULT_LR_THETA,
            lr_translation: DEFAULT_LR_TRANSLATION,
            masks: MaskChoice::GroundTruth,
        }
    }
}

/// Everything a subcommand needs besides its flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Falls back to the intrinsics recorded in the dataset's `scene.json`.
    pub intrinsics: Option<Intrinsics>,
    /// Known camera height `h_gt`, meters.
    pub camera_height: f64,
    pub loss_weights: LossWeights,
    pub irls: IrlsConfig,
    /// Ground-truth dataset directory.
    pub dataset: Option<PathBuf>,
    /// Directory holding predicted `depth/` maps and optionally `poses.txt`.
    pub predictions: Option<PathBuf>,
    /// Estimated pose file; defaults to `<predictions>/poses.txt`.
    pub estimated_poses: Option<PathBuf>,
    pub depth_cap: f64,
    pub segment_lengths: Vec<f64>,
    /// Overrides `scene.texture_seed`.
    pub seed: Option<u64>,
    pub scene: SceneSpec,
    /// Factor applied to the depths and translations written under
    /// `prediction/` by `synth-gen`.
    pub misscale: f64,
    pub ground_masks: MaskChoice,
    pub demo: DemoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            intrinsics: None,
            camera_height: DEFAULT_CAMERA_HEIGHT,
            loss_weights: LossWeights::default(),
            irls: IrlsConfig::default(),
            dataset: None,
            predictions: None,
            estimated_poses: None,
            depth_cap: DEFAULT_DEPTH_CAP,
            segment_lengths: DEFAULT_SEGMENT_LENGTHS.to_vec(),
            seed: None,
            scene: SceneSpec::default(),
            misscale: 1.0,
            ground_masks: MaskChoice::GroundTruth,
            demo: DemoConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a JSON config, resolving relative paths against its directory
    /// and checking that they exist.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.dataset, &mut config.predictions, &mut config.estimated_poses]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.exists() {
                return Err(CliError::Config(format!("{}: path {} does not exist", path.display(), p.display())));
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if !(self.camera_height.is_finite() && self.camera_height > 0.0) {
            return bad(format!("camera_height must be positive, got {}", self.camera_height));
        }
        if !(self.depth_cap.is_finite() && self.depth_cap > 0.0) {
            return bad(format!("depth_cap must be positive, got {}", self.depth_cap));
        }
        if !(self.misscale.is_finite() && self.misscale > 0.0) {
            return bad(format!("misscale must be positive, got {}", self.misscale));
        }
        if self.segment_lengths.is_empty() || self.segment_lengths.iter().any(|l| !DEFAULT_SEGMENT_LENGTHS.contains(l)) {
            return bad(format!("segment_lengths must be drawn from {DEFAULT_SEGMENT_LENGTHS:?}"));
        }
        let d = &self.demo;
        if !(d.initial_scale.is_finite() && d.initial_scale > 0.0) || d.steps == 0 || !(d.lr_theta > 0.0 && d.lr_translation > 0.0) {
            return bad(format!("invalid demo settings {d:?}"));
        }
        if let Some(k) = &self.intrinsics {
            k.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        self.loss_weights.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.irls.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.scene().validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// The scene with the seed override applied.
    pub fn scene(&self) -> SceneSpec {
        let mut scene = self.scene.clone();
        if let Some(seed) = self.seed {
            scene.texture_seed = seed;
        }
        scene
    }

    pub fn dataset(&self) -> Result<&Path, CliError> {
        self.dataset
            .as_deref()
            .ok_or_else(|| CliError::Config("this subcommand needs `dataset` in the config".into()))
    }

    pub fn predictions(&self) -> Result<&Path, CliError> {
        self.predictions
            .as_deref()
            .ok_or_else(|| CliError::Config("this subcommand needs `predictions` in the config".into()))
    }

    pub fn estimated_poses(&self) -> Result<PathBuf, CliError> {
        match (&self.estimated_poses, &self.predictions) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join("poses.txt")),
            (None, None) => Err(CliError::Config("set `estimated_poses` or `predictions` in the config".into())),
        }
    }
}
