//! End-to-end runner: synthetic datasets, the producer/optimizer/loop-worker
//! stream, and evaluation of trajectories and held-out views.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod run;
pub mod synth;

use thiserror::Error;

pub use config::{apply_overrides, Mode, PipelineConfig, ProviderKind, RunConfig};
pub use dataset::{Dataset, DatasetMeta, RawFrame};
pub use eval::{evaluate_views, EvalSummary, ViewScore};
pub use run::{run_pipeline, LoopAttempt, RunOutput, RunReport, Timing};
pub use synth::{synth_generate, SynthConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{module} failed at frame {frame}: {message}")]
    Module {
        module: &'static str,
        frame: usize,
        message: String,
    },
    #[error("image: {0}")]
    Image(#[from] crate::image::ImageError),
    #[error("geometry: {0}")]
    Geom(#[from] crate::geom::GeomError),
    #[error("ply: {0}")]
    Ply(#[from] crate::ply::PlyError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::map_opt::checkpoint::CheckpointError),
    #[error("render: {0}")]
    Render(#[from] crate::splat_render::RenderError),
}

impl PipelineError {
    pub(crate) fn module(module: &'static str, frame: usize, err: impl std::fmt::Display) -> Self {
        Self::Module {
            module,
            frame,
            message: err.to_string(),
        }
    }
}
