//! Central finite-difference comparison of [`backward`] against the forward
//! renderer and loss, parameter by parameter.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{loss_and_grad, losses, render, LossWeights, RenderConfig};
use crate::gaussian::Gaussian;
use crate::geom::{Camera, Pose};
use crate::image::{GrayImage, Image, Mask, RgbImage};

/// A small randomized scene with its own supervision.
pub struct GradScene {
    pub gaussians: Vec<Gaussian>,
    pub camera: Camera,
    pub view: Pose,
    pub gt_rgb: RgbImage,
    pub gt_depth: GrayImage,
    pub mask: Mask,
}

impl GradScene {
    /// `n` Gaussians in front of a `size`×`size` camera with a random view
    /// pose and a random supervision mask. Opacities stay below 0.8 so
    /// compositing never terminates early, and SH colors stay inside
    /// `[0, 1]`. Every target differs from the render by at least 0.05, so a
    /// small perturbation never flips the sign of an L1 residual.
    pub fn random(seed: u64, n: usize, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = size as f64 * 1.1;
        let c = (size as f64 - 1.0) / 2.0;
        let camera = Camera::new(f, f, c, c, size, size);
        let view = Pose::new(
            UnitQuaternion::from_euler_angles(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-3.0..3.0),
            ),
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        );
        let gaussians: Vec<Gaussian> = (0..n)
            .map(|_| {
                let local = Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(1.5..3.0),
                );
                let mut g = Gaussian::isotropic(
                    view.transform_point(&local),
                    0.15,
                    rng.random_range(0.1..0.8),
                    Vector3::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
                    1,
                );
                g.log_scale += Vector3::new(
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                );
                g.rotation = UnitQuaternion::from_euler_angles(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-3.0..3.0),
                );
                for c in g.sh.iter_mut().skip(1) {
                    *c = Vector3::new(
                        rng.random_range(-0.1..0.1),
                        rng.random_range(-0.1..0.1),
                        rng.random_range(-0.1..0.1),
                    );
                }
                g
            })
            .collect();
        Self::supervise(gaussians, camera, view, &mut rng)
    }

    /// Builds targets offset from the render of `gaussians` as described
    /// for [`GradScene::random`].
    pub fn supervise(gaussians: Vec<Gaussian>, camera: Camera, view: Pose, rng: &mut impl Rng) -> Self {
        let size = camera.width;
        let rendered = render(&gaussians, &camera, &view, &RenderConfig::untruncated()).expect("scene renders");
        let mut away = |v: f64| {
            let off = rng.random_range(0.05..0.45);
            if v > 0.5 {
                v - off
            } else {
                v + off
            }
        };
        let gt_rgb = Image {
            width: camera.width,
            height: camera.height,
            data: rendered.color.data.iter().map(|c| [away(c[0]), away(c[1]), away(c[2])]).collect(),
        };
        let gt_depth = Image {
            width: camera.width,
            height: camera.height,
            data: rendered
                .depth
                .data
                .iter()
                .map(|&d| {
                    if rng.random_bool(0.9) {
                        d + rng.random_range(0.05..1.0) * if rng.random_bool(0.5) && d > 1.0 { -1.0 } else { 1.0 }
                    } else {
                        0.0
                    }
                })
                .collect(),
        };
        let mask = Image::from_fn(size, camera.height, |_, _| rng.random_bool(0.8));
        Self {
            gaussians,
            camera,
            view,
            gt_rgb,
            gt_depth,
            mask,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub gaussian: usize,
    pub parameter: String,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub mismatches: Vec<GradMismatch>,
}

/// Scalar views onto every optimizable parameter of a Gaussian.
fn parameter_names(g: &Gaussian) -> Vec<String> {
    let mut names = Vec::new();
    for k in 0..3 {
        names.push(format!("mean[{k}]"));
    }
    for k in 0..3 {
        names.push(format!("log_scale[{k}]"));
    }
    for k in ["w", "x", "y", "z"] {
        names.push(format!("rotation.{k}"));
    }
    names.push("opacity_logit".into());
    for k in 0..g.sh.len() {
        for c in 0..3 {
            names.push(format!("sh[{k}][{c}]"));
        }
    }
    names
}

fn perturb(g: &mut Gaussian, p: usize, delta: f64) {
    match p {
        0..=2 => g.mean[p] += delta,
        3..=5 => g.log_scale[p - 3] += delta,
        6..=9 => {
            let q = g.rotation.quaternion();
            let mut wxyz = [q.w, q.i, q.j, q.k];
            wxyz[p - 6] += delta;
            g.rotation = UnitQuaternion::from_quaternion(Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]));
        }
        10 => g.opacity_logit += delta,
        _ => {
            let k = p - 11;
            g.sh[k / 3][k % 3] += delta;
        }
    }
}

fn analytic(grad: &super::GaussianGrad, p: usize) -> f64 {
    match p {
        0..=2 => grad.mean[p],
        3..=5 => grad.log_scale[p - 3],
        6..=9 => grad.rotation[p - 6],
        10 => grad.opacity_logit,
        _ => {
            let k = p - 11;
            grad.sh[k / 3][k % 3]
        }
    }
}

/// Compares every parameter gradient with a central difference of step
/// `eps`. A parameter passes when the relative error is below `rel_tol`, or
/// when both values are within `abs_tol` of zero.
pub fn check_gradients(
    scene: &GradScene,
    weights: &LossWeights,
    cfg: &RenderConfig,
    eps: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> GradReport {
    let (_, _, grads) = loss_and_grad(
        &scene.gaussians,
        &scene.camera,
        &scene.view,
        &scene.gt_rgb,
        &scene.gt_depth,
        &scene.mask,
        weights,
        cfg,
    )
    .expect("scene renders");
    let loss = |gs: &[Gaussian]| {
        let out = render(gs, &scene.camera, &scene.view, cfg).expect("scene renders");
        losses(&out, &scene.gt_rgb, &scene.gt_depth, &scene.mask, weights)
            .expect("mask non-empty")
            .total
    };
    let mut report = GradReport::default();
    for (gi, g) in scene.gaussians.iter().enumerate() {
        for (p, name) in parameter_names(g).into_iter().enumerate() {
            let mut plus = scene.gaussians.clone();
            let mut minus = scene.gaussians.clone();
            perturb(&mut plus[gi], p, eps);
            perturb(&mut minus[gi], p, -eps);
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let a = analytic(&grads[gi], p);
            report.checked += 1;
            let diff = (a - numeric).abs();
            if a.abs() < abs_tol && numeric.abs() < abs_tol {
                continue;
            }
            let rel = diff / a.abs().max(numeric.abs());
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= rel_tol && diff >= abs_tol {
                report.mismatches.push(GradMismatch {
                    gaussian: gi,
                    parameter: name,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report
}
