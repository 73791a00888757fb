//! Run configuration with dotted-path overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::PipelineError;
use crate::gauss_init::InitConfig;
use crate::loop_graph::LoopConfig;
use crate::map_opt::OptimConfig;
use crate::voxel_pca::VoxelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Single thread, fixed interleaving; reports are byte-identical across
    /// runs with the same seed.
    Deterministic,
    /// Producer, optimizer and loop worker on separate threads.
    Streaming,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Built-in image-gradient stand-in for a learned attribute model.
    Stub,
    /// Maps read from a directory of exported predictions.
    Dir,
    /// No model predictions; every point uses the geometric branches.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Optimizer steps granted per ingested frame.
    pub steps_per_frame: usize,
    /// Total optimizer steps; defaults to `steps_per_frame` times the frame
    /// count. Steps not taken during the stream run after it ends.
    pub step_budget: Option<usize>,
    /// Every frame with `index % holdout_every == holdout_every / 2` is held
    /// out for evaluation. Zero disables hold-out.
    pub holdout_every: usize,
    pub seed: u64,
    pub provider: ProviderKind,
    pub provider_dir: Option<String>,
    /// Drop all geometric priors and model predictions so every Gaussian
    /// comes from the isotropic fallback.
    pub heuristic_only: bool,
    pub queue_depth: usize,
    /// Pace frames at the dataset rate in streaming mode.
    pub realtime: bool,
    /// Overrides the extent measured from the odometry.
    pub scene_extent: Option<f64>,
    /// Process only the first frames of the dataset.
    pub max_frames: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Deterministic,
            steps_per_frame: 10,
            step_budget: None,
            holdout_every: 8,
            seed: 0,
            provider: ProviderKind::Stub,
            provider_dir: None,
            heuristic_only: false,
            queue_depth: 4,
            realtime: false,
            scene_extent: None,
            max_frames: None,
        }
    }
}

impl PipelineConfig {
    pub fn is_holdout(&self, k: usize) -> bool {
        self.holdout_every > 0 && k % self.holdout_every == self.holdout_every / 2
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub voxel: VoxelConfig,
    pub init: InitConfig,
    pub optim: OptimConfig,
    pub loop_closure: LoopConfig,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Applies `key=value` overrides, where `key` is a dotted path such as
    /// `optim.lr.mean` and `value` is parsed as JSON, falling back to a
    /// plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, PipelineError> {
        apply_overrides(self, overrides)
    }
}

/// Round-trips `value` through JSON with dotted-path `key=value` overrides
/// applied.
pub fn apply_overrides<T, S>(value: &T, overrides: &[S]) -> Result<T, PipelineError>
where
    T: Serialize + DeserializeOwned,
    S: AsRef<str>,
{
    let mut v = serde_json::to_value(value)?;
    for o in overrides {
        let o = o.as_ref();
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("override `{o}` is not key=value")))?;
        set_path(&mut v, key.trim(), parse_value(raw.trim()))?;
    }
    serde_json::from_value(v).map_err(|e| PipelineError::Config(format!("invalid override: {e}")))
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets a dotted path inside a JSON object. Every segment but the last must
/// name an existing object; the last must name an existing field.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), PipelineError> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| PipelineError::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| PipelineError::Config(format!("unknown key `{}`", parts[..=i].join("."))))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(PipelineError::Config("empty override key".into()))
}
