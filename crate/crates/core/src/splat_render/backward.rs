//! Analytic gradients of the masked loss with respect to every Gaussian
//! parameter.
//!
//! The image-space pass replays each pixel's contributor list back to front
//! and accumulates per-Gaussian gradients of the 2-D footprint. The second
//! pass chains those through the EWA projection, the covariance
//! factorization and the SH color model.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use super::{loss_image_grads, power_at, render, LossTerms, LossWeights, RenderConfig, RenderError, RenderOutput};
use crate::gaussian::{sh_basis, Gaussian};
use crate::geom::{Camera, Pose};
use crate::image::{GrayImage, Mask, RgbImage};

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// With respect to the `(w, x, y, z)` components of the quaternion,
    /// normalization included.
    pub rotation: Vector4<f64>,
    pub opacity_logit: f64,
    pub sh: Vec<Vector3<f64>>,
}

impl GaussianGrad {
    pub fn zeros(sh_len: usize) -> Self {
        Self {
            mean: Vector3::zeros(),
            log_scale: Vector3::zeros(),
            rotation: Vector4::zeros(),
            opacity_logit: 0.0,
            sh: vec![Vector3::zeros(); sh_len],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.mean == Vector3::zeros()
            && self.log_scale == Vector3::zeros()
            && self.rotation == Vector4::zeros()
            && self.opacity_logit == 0.0
            && self.sh.iter().all(|c| *c == Vector3::zeros())
    }

    pub fn add_assign(&mut self, other: &GaussianGrad) {
        self.mean += other.mean;
        self.log_scale += other.log_scale;
        self.rotation += other.rotation;
        self.opacity_logit += other.opacity_logit;
        for (a, b) in self.sh.iter_mut().zip(&other.sh) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = self.mean.amax().max(self.log_scale.amax()).max(self.rotation.amax());
        m = m.max(self.opacity_logit.abs());
        self.sh.iter().fold(m, |acc, c| acc.max(c.amax()))
    }
}

/// One entry per input Gaussian, in input order.
pub type GradBundle = Vec<GaussianGrad>;

/// Image-space gradient accumulators for one projected Gaussian:
/// mean2d (2), conic as a full symmetric matrix (3), opacity, color (3), depth.
const ACC: usize = 10;
const ROWS_PER_CHUNK: usize = 8;

fn image_space_pass(
    out: &RenderOutput,
    cfg: &RenderConfig,
    g_color: &[[f64; 3]],
    g_depth: &[f64],
) -> Vec<[f64; ACC]> {
    let (w, h) = (out.color.width, out.color.height);
    let n_proj = out.projected.len();
    let row_starts: Vec<usize> = (0..h).step_by(ROWS_PER_CHUNK).collect();
    let partials: Vec<Vec<[f64; ACC]>> = row_starts
        .par_iter()
        .map(|&y0| {
            let mut acc = vec![[0.0; ACC]; n_proj];
            let mut alphas = Vec::new();
            for y in y0..(y0 + ROWS_PER_CHUNK).min(h) {
                for x in 0..w {
                    let i = y * w + x;
                    let gc = Vector3::from(g_color[i]);
                    let gd = g_depth[i];
                    if gc == Vector3::zeros() && gd == 0.0 {
                        continue;
                    }
                    let list = out.contributors(i);
                    alphas.clear();
                    let mut t = 1.0;
                    for &k in list {
                        let pr = &out.projected[k as usize];
                        let (power, d) = power_at(pr, x as f64, y as f64);
                        let raw = pr.opacity * power.exp();
                        alphas.push((raw.min(cfg.alpha_max), raw >= cfg.alpha_max, power.exp(), d, t));
                        t *= 1.0 - raw.min(cfg.alpha_max);
                    }
                    let mut suffix_c = Vector3::zeros();
                    let mut suffix_d = 0.0;
                    for (pos, &k) in list.iter().enumerate().rev() {
                        let pr = &out.projected[k as usize];
                        let (alpha, clamped, gauss, d, t) = alphas[pos];
                        let weight = alpha * t;
                        let a = &mut acc[k as usize];
                        a[6] += gc.x * weight;
                        a[7] += gc.y * weight;
                        a[8] += gc.z * weight;
                        a[9] += gd * weight;
                        let dl_dalpha = gc.dot(&(pr.color * t - suffix_c / (1.0 - alpha)))
                            + gd * (pr.depth * t - suffix_d / (1.0 - alpha));
                        suffix_c += pr.color * weight;
                        suffix_d += pr.depth * weight;
                        if clamped {
                            continue;
                        }
                        a[5] += dl_dalpha * gauss;
                        let dl_dpower = dl_dalpha * alpha;
                        let c = &pr.conic;
                        a[0] += dl_dpower * (c[(0, 0)] * d.x + c[(0, 1)] * d.y);
                        a[1] += dl_dpower * (c[(1, 0)] * d.x + c[(1, 1)] * d.y);
                        a[2] += dl_dpower * (-0.5 * d.x * d.x);
                        a[3] += dl_dpower * (-0.5 * d.x * d.y);
                        a[4] += dl_dpower * (-0.5 * d.y * d.y);
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![[0.0; ACC]; n_proj];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            for j in 0..ACC {
                t[j] += p[j];
            }
        }
    }
    total
}

/// `∂L/∂R` for `R(q/|q|)` pulled back to the quaternion components.
fn rotation_grad(q: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let raw = Vector4::new(
        2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]),
        2.0 * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]),
        2.0 * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]),
        2.0 * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]),
    );
    let norm = q.norm();
    let qh = q / norm;
    (raw - qh * qh.dot(&raw)) / norm
}

fn gaussian_pass(g: &Gaussian, acc: &[f64; ACC], pr: &super::Projected, cam: &Camera, world_to_cam: &Matrix3<f64>) -> GaussianGrad {
    let mut grad = GaussianGrad::zeros(g.sh.len());
    let g_mean2d = Vector2::new(acc[0], acc[1]);
    let g_conic = Matrix2::new(acc[2], acc[3], acc[3], acc[4]);
    let g_opacity = acc[5];
    let g_color = Vector3::new(acc[6], acc[7], acc[8]);
    let g_z = acc[9];

    let o = pr.opacity;
    grad.opacity_logit = g_opacity * o * (1.0 - o);

    // color → SH coefficients and viewing direction
    let g_color = Vector3::from([0, 1, 2].map(|c| if pr.color_clipped[c] { 0.0 } else { g_color[c] }));
    let degree = g.sh_degree();
    let mut basis = [0.0; 16];
    let mut dbasis = [Vector3::zeros(); 16];
    sh_basis(degree, &pr.view_dir, &mut basis, Some(&mut dbasis));
    let mut g_dir = Vector3::zeros();
    for (k, coeff) in g.sh.iter().enumerate() {
        grad.sh[k] = g_color * basis[k];
        g_dir += dbasis[k] * g_color.dot(coeff);
    }
    let d = pr.view_dir;
    let mut g_mean = (g_dir - d * d.dot(&g_dir)) / pr.view_dist;

    // conic → 2-D covariance → 3-D covariance and Jacobian
    let g_cov2d = -pr.conic * g_conic * pr.conic;
    let t = pr.jacobian * world_to_cam;
    let g_sigma = t.transpose() * g_cov2d * t;
    let g_t = 2.0 * g_cov2d * t * pr.cov3d;
    let g_j = g_t * world_to_cam.transpose();

    let (x, y, z) = (pr.p_cam.x, pr.p_cam.y, pr.p_cam.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut g_pc = Vector3::new(
        g_mean2d.x * fx / z,
        g_mean2d.y * fy / z,
        -g_mean2d.x * fx * x / z2 - g_mean2d.y * fy * y / z2 + g_z,
    );
    let (jx, jy) = (pr.jac_xy.x, pr.jac_xy.y);
    // A clamped coordinate is a fixed multiple of z.
    let (djx_dx, djx_dz) = if pr.jac_clamped[0] { (0.0, jx / z) } else { (1.0, 0.0) };
    let (djy_dy, djy_dz) = if pr.jac_clamped[1] { (0.0, jy / z) } else { (1.0, 0.0) };
    g_pc.x += g_j[(0, 2)] * (-fx * djx_dx / z2);
    g_pc.y += g_j[(1, 2)] * (-fy * djy_dy / z2);
    g_pc.z += g_j[(0, 0)] * (-fx / z2)
        + g_j[(0, 2)] * (2.0 * fx * jx / z3 - fx * djx_dz / z2)
        + g_j[(1, 1)] * (-fy / z2)
        + g_j[(1, 2)] * (2.0 * fy * jy / z3 - fy * djy_dz / z2);
    g_mean += world_to_cam.transpose() * g_pc;
    grad.mean = g_mean;

    // Σ = M Mᵀ with M = R diag(s)
    let g_sigma = (g_sigma + g_sigma.transpose()) * 0.5;
    let r = g.rotation.to_rotation_matrix().into_inner();
    let s = g.scale();
    let m = r * Matrix3::from_diagonal(&s);
    let g_m = 2.0 * g_sigma * m;
    let mut g_r = Matrix3::zeros();
    for k in 0..3 {
        grad.log_scale[k] = (0..3).map(|i| g_m[(i, k)] * r[(i, k)] * s[k]).sum();
        for i in 0..3 {
            g_r[(i, k)] = g_m[(i, k)] * s[k];
        }
    }
    let q = g.rotation.quaternion();
    grad.rotation = rotation_grad(&Vector4::new(q.w, q.i, q.j, q.k), &g_r);
    grad
}

/// Gradients of the masked loss for a rendered view. Frozen and
/// non-contributing Gaussians receive zeros.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    gaussians: &[Gaussian],
    cam: &Camera,
    view: &Pose,
    out: &RenderOutput,
    gt_rgb: &RgbImage,
    gt_depth: &GrayImage,
    mask: &Mask,
    w: &LossWeights,
    cfg: &RenderConfig,
) -> Result<(LossTerms, GradBundle), RenderError> {
    let (terms, g_color, g_depth) = loss_image_grads(out, gt_rgb, gt_depth, mask, w)?;
    let acc = image_space_pass(out, cfg, &g_color, &g_depth);
    let world_to_cam = view.rotation_matrix().transpose();
    let mut grads: GradBundle = gaussians.iter().map(|g| GaussianGrad::zeros(g.sh.len())).collect();
    let computed: Vec<(usize, GaussianGrad)> = out
        .projected
        .par_iter()
        .zip(acc.par_iter())
        .filter(|(pr, a)| !gaussians[pr.index].frozen && a.iter().any(|&v| v != 0.0))
        .map(|(pr, a)| (pr.index, gaussian_pass(&gaussians[pr.index], a, pr, cam, &world_to_cam)))
        .collect();
    for (i, g) in computed {
        grads[i] = g;
    }
    Ok((terms, grads))
}

/// Render, evaluate the masked loss and differentiate it in one call.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad(
    gaussians: &[Gaussian],
    cam: &Camera,
    view: &Pose,
    gt_rgb: &RgbImage,
    gt_depth: &GrayImage,
    mask: &Mask,
    w: &LossWeights,
    cfg: &RenderConfig,
) -> Result<(RenderOutput, LossTerms, GradBundle), RenderError> {
    let out = render(gaussians, cam, view, cfg)?;
    let (terms, grads) = backward(gaussians, cam, view, &out, gt_rgb, gt_depth, mask, w, cfg)?;
    Ok((out, terms, grads))
}
