//! Image metrics on held-out views.

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::PipelineError;
use crate::gaussian::Gaussian;
use crate::geom::Pose;
use crate::splat_render::{psnr, render, ssim, RenderConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub views: Vec<ViewScore>,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
}

/// Renders the map at each `(frame, pose)` and scores the full image
/// against the dataset's colour image for that frame.
pub fn evaluate_views(
    gaussians: &[Gaussian],
    dataset: &Dataset,
    frames: &[(usize, Pose)],
    render_cfg: &RenderConfig,
) -> Result<EvalSummary, PipelineError> {
    let cam = dataset.camera();
    let mut views = Vec::with_capacity(frames.len());
    for (k, pose) in frames {
        let reference = dataset.load_rgb(*k)?;
        let out = render(gaussians, cam, pose, render_cfg).map_err(|e| PipelineError::module("eval", *k, e))?;
        views.push(ViewScore {
            frame: *k,
            psnr: psnr(&out.color, &reference),
            ssim: ssim(&out.color, &reference),
        });
    }
    let n = views.len().max(1) as f64;
    Ok(EvalSummary {
        psnr_mean: views.iter().map(|v| v.psnr).sum::<f64>() / n,
        ssim_mean: views.iter().map(|v| v.ssim).sum::<f64>() / n,
        views,
    })
}
