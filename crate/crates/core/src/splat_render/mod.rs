//! Per-pixel CPU reference splatting renderer.
//!
//! Gaussians are projected with the EWA approximation, sorted front to back
//! and alpha-composited into color, depth and accumulated opacity. The
//! contributor list of every pixel is kept so that [`backward`] can replay
//! the compositing in reverse.

mod backward;
pub mod gradcheck;
mod loss;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{sh_basis, Gaussian};
use crate::geom::{Camera, Pose};
use crate::image::{GrayImage, Image, RgbImage};

pub use backward::{backward, loss_and_grad, GaussianGrad, GradBundle};
pub use loss::{
    interior_mask, loss_image_grads, losses, masked_ssim, psnr, ssim, LossTerms, LossWeights, SSIM_C1, SSIM_C2,
    SSIM_RADIUS, SSIM_SIGMA,
};

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("projected covariance of Gaussian {0} is singular")]
    SingularCov2d(usize),
    #[error("supervision mask is empty")]
    EmptyMask,
    #[error("image dimensions do not match the camera")]
    SizeMismatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Added to both diagonal entries of every projected covariance, px².
    pub dilation: f64,
    pub alpha_max: f64,
    /// Compositing stops once transmittance drops below this.
    pub min_transmittance: f64,
    pub z_near: f64,
    /// The projection Jacobian is evaluated at the mean clamped to the image
    /// widened by this fraction of its size on every side.
    pub guard_band: f64,
    /// Mahalanobis radius beyond which a Gaussian does not touch a pixel.
    /// `f64::INFINITY` disables the cut.
    pub cull_sigma: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            dilation: 0.3,
            alpha_max: 0.999,
            min_transmittance: 1e-4,
            z_near: 0.2,
            guard_band: 0.15,
            cull_sigma: 3.0,
        }
    }
}

impl RenderConfig {
    /// Same guards with no footprint truncation.
    pub fn untruncated() -> Self {
        Self {
            cull_sigma: f64::INFINITY,
            ..Self::default()
        }
    }
}

/// A Gaussian after projection into one view, with the intermediates the
/// backward pass reuses.
#[derive(Clone, Debug)]
pub struct Projected {
    pub index: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub p_cam: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    /// Channels whose color was clipped to `[0, 1]`.
    pub color_clipped: [bool; 3],
    /// Inclusive pixel ranges `[x0, x1] × [y0, y1]`.
    pub bbox: [usize; 4],
    pub(crate) jacobian: Matrix2x3<f64>,
    /// Camera-frame x and y at which the Jacobian was evaluated.
    pub(crate) jac_xy: Vector2<f64>,
    pub(crate) jac_clamped: [bool; 2],
    pub(crate) cov3d: Matrix3<f64>,
    pub(crate) view_dir: Vector3<f64>,
    pub(crate) view_dist: f64,
}

/// EWA projection of one Gaussian. `Ok(None)` means culled (behind the near
/// plane or footprint entirely off-image).
pub fn project_gaussian(
    g: &Gaussian,
    index: usize,
    cam: &Camera,
    view: &Pose,
    cfg: &RenderConfig,
) -> Result<Option<Projected>, RenderError> {
    let world_to_cam = view.rotation_matrix().transpose();
    let p = world_to_cam * (g.mean - view.translation);
    if p.z <= cfg.z_near {
        return Ok(None);
    }
    let (x, y, z) = (p.x, p.y, p.z);
    let (w, h) = (cam.width as f64, cam.height as f64);
    let clamp = |v: f64, c: f64, f: f64, size: f64| {
        let lo = (-cfg.guard_band * size - c) / f;
        let hi = ((1.0 + cfg.guard_band) * size - c) / f;
        let r = v / z;
        if r < lo {
            (lo * z, true)
        } else if r > hi {
            (hi * z, true)
        } else {
            (v, false)
        }
    };
    let (jx, cx_clamped) = clamp(x, cam.cx, cam.fx, w);
    let (jy, cy_clamped) = clamp(y, cam.cy, cam.fy, h);
    let jacobian = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * jx / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * jy / (z * z),
    );
    let cov3d = g.covariance();
    let t = jacobian * world_to_cam;
    let cov2d = t * cov3d * t.transpose() + Matrix2::identity() * cfg.dilation;
    let cov2d = (cov2d + cov2d.transpose()) * 0.5;
    let det = cov2d.determinant();
    if !(det.is_finite() && det > 0.0) {
        return Err(RenderError::SingularCov2d(index));
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let mean2d = Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);

    let rx = cfg.cull_sigma * cov2d[(0, 0)].sqrt();
    let ry = cfg.cull_sigma * cov2d[(1, 1)].sqrt();
    let x0 = (mean2d.x - rx).ceil().max(0.0);
    let x1 = (mean2d.x + rx).floor().min(w - 1.0);
    let y0 = (mean2d.y - ry).ceil().max(0.0);
    let y1 = (mean2d.y + ry).floor().min(h - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return Ok(None);
    }

    let offset = g.mean - view.translation;
    let view_dist = offset.norm();
    let view_dir = offset / view_dist;
    let mut basis = [0.0; 16];
    sh_basis(g.sh_degree(), &view_dir, &mut basis, None);
    let mut raw = Vector3::repeat(0.5);
    for (k, c) in g.sh.iter().enumerate() {
        raw += c * basis[k];
    }
    let color_clipped = [0, 1, 2].map(|c| !(0.0..=1.0).contains(&raw[c]));
    let color = raw.map(|v| v.clamp(0.0, 1.0));

    Ok(Some(Projected {
        index,
        mean2d,
        cov2d,
        conic,
        depth: z,
        p_cam: p,
        opacity: g.opacity(),
        color,
        color_clipped,
        bbox: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
        jacobian,
        jac_xy: Vector2::new(jx, jy),
        jac_clamped: [cx_clamped, cy_clamped],
        cov3d,
        view_dir,
        view_dist,
    }))
}

/// Gaussian falloff exponent `-½ dᵀ Σ⁻¹ d` at a pixel center.
#[inline]
pub(crate) fn power_at(pr: &Projected, px: f64, py: f64) -> (f64, Vector2<f64>) {
    let d = Vector2::new(px - pr.mean2d.x, py - pr.mean2d.y);
    let c = &pr.conic;
    let power = -0.5 * (c[(0, 0)] * d.x * d.x + 2.0 * c[(0, 1)] * d.x * d.y + c[(1, 1)] * d.y * d.y);
    (power, d)
}

/// Front-to-back compositing of `(alpha, color, depth)` samples, already
/// sorted by depth. Returns color, depth and final transmittance, and the
/// number of samples used before termination.
pub fn composite(
    samples: &[(f64, Vector3<f64>, f64)],
    min_transmittance: f64,
) -> (Vector3<f64>, f64, f64, usize) {
    let mut t = 1.0;
    let mut color = Vector3::zeros();
    let mut depth = 0.0;
    for (k, &(alpha, c, z)) in samples.iter().enumerate() {
        color += c * (alpha * t);
        depth += z * alpha * t;
        t *= 1.0 - alpha;
        if t < min_transmittance {
            return (color, depth, t, k + 1);
        }
    }
    (color, depth, t, samples.len())
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: RgbImage,
    pub depth: GrayImage,
    pub acc_alpha: GrayImage,
    /// Projections of the non-culled Gaussians, sorted front to back.
    pub projected: Vec<Projected>,
    /// CSR lists of positions into `projected`, per pixel, in compositing order.
    pub contrib_offsets: Vec<usize>,
    pub contrib: Vec<u32>,
}

impl RenderOutput {
    pub fn contributors(&self, pixel: usize) -> &[u32] {
        &self.contrib[self.contrib_offsets[pixel]..self.contrib_offsets[pixel + 1]]
    }

    /// Indices (into the rendered Gaussian slice) of every Gaussian that
    /// touched at least one pixel.
    pub fn visible(&self) -> Vec<usize> {
        let mut seen = vec![false; self.projected.len()];
        for &c in &self.contrib {
            seen[c as usize] = true;
        }
        seen.iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(k, _)| self.projected[k].index)
            .collect()
    }
}

/// Pixel → candidate list binning (positions into `projected`, sorted by depth).
fn bin(projected: &[Projected], width: usize, height: usize) -> Vec<Vec<u32>> {
    let mut bins = vec![Vec::new(); width * height];
    for (k, pr) in projected.iter().enumerate() {
        let [x0, x1, y0, y1] = pr.bbox;
        for y in y0..=y1 {
            for x in x0..=x1 {
                bins[y * width + x].push(k as u32);
            }
        }
    }
    bins
}

pub(crate) fn project_all(
    gaussians: &[Gaussian],
    cam: &Camera,
    view: &Pose,
    cfg: &RenderConfig,
) -> Result<Vec<Projected>, RenderError> {
    let projected: Result<Vec<Option<Projected>>, RenderError> = gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| project_gaussian(g, i, cam, view, cfg))
        .collect();
    let mut projected: Vec<Projected> = projected?.into_iter().flatten().collect();
    projected.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    Ok(projected)
}

pub fn render(gaussians: &[Gaussian], cam: &Camera, view: &Pose, cfg: &RenderConfig) -> Result<RenderOutput, RenderError> {
    let (w, h) = (cam.width, cam.height);
    let projected = project_all(gaussians, cam, view, cfg)?;
    let bins = bin(&projected, w, h);
    let cull_power = -0.5 * cfg.cull_sigma * cfg.cull_sigma;

    struct PixelOut {
        color: [f64; 3],
        depth: f64,
        acc: f64,
        used: Vec<u32>,
    }
    let pixels: Vec<PixelOut> = bins
        .par_iter()
        .enumerate()
        .map(|(i, cands)| {
            let (px, py) = ((i % w) as f64, (i / w) as f64);
            let mut t = 1.0;
            let mut color = Vector3::zeros();
            let mut depth = 0.0;
            let mut used = Vec::new();
            for &k in cands {
                let pr = &projected[k as usize];
                let (power, _) = power_at(pr, px, py);
                if power < cull_power {
                    continue;
                }
                let alpha = (pr.opacity * power.exp()).min(cfg.alpha_max);
                used.push(k);
                color += pr.color * (alpha * t);
                depth += pr.depth * alpha * t;
                t *= 1.0 - alpha;
                if t < cfg.min_transmittance {
                    break;
                }
            }
            PixelOut {
                color: [color.x, color.y, color.z],
                depth,
                acc: 1.0 - t,
                used,
            }
        })
        .collect();

    let mut contrib_offsets = Vec::with_capacity(w * h + 1);
    contrib_offsets.push(0);
    let mut contrib = Vec::new();
    for p in &pixels {
        contrib.extend_from_slice(&p.used);
        contrib_offsets.push(contrib.len());
    }
    Ok(RenderOutput {
        color: Image {
            width: w,
            height: h,
            data: pixels.iter().map(|p| p.color).collect(),
        },
        depth: Image {
            width: w,
            height: h,
            data: pixels.iter().map(|p| p.depth).collect(),
        },
        acc_alpha: Image {
            width: w,
            height: h,
            data: pixels.iter().map(|p| p.acc).collect(),
        },
        projected,
        contrib_offsets,
        contrib,
    })
}
