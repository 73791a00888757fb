//! Gaussian-to-Gaussian GICP on planar-regularized covariances.

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CovarianceSource, LoopConfig, LoopError};
use crate::gaussian::Gaussian;
use crate::geom::{skew, Pose};
use crate::spatial::SpatialHash;

/// Replaces the spectrum of a symmetric PSD matrix by `{1, 1, 1e-3}` while
/// keeping its eigenvectors. Eigenvectors are ordered by descending
/// eigenvalue and each is sign-fixed so its first non-negligible component
/// is positive.
pub fn regularize_covariance(cov: &Matrix3<f64>) -> Matrix3<f64> {
    let u = sorted_eigenvectors(cov);
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 1e-3)) * u.transpose()
}

/// Orthonormal eigenbasis with columns in descending eigenvalue order.
pub fn sorted_eigenvectors(cov: &Matrix3<f64>) -> Matrix3<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut u = Matrix3::zeros();
    for (k, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        if let Some(lead) = col.iter().find(|c| c.abs() > 1e-12) {
            if *lead < 0.0 {
                col = -col;
            }
        }
        u.set_column(k, &col);
    }
    u
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GicpIteration {
    pub cost_before: f64,
    pub cost_after: f64,
    pub correspondences: usize,
    pub damping: f64,
    pub step_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GicpResult {
    /// Maps source coordinates onto the target.
    pub transform: Pose,
    /// Mean Mahalanobis distance over the final correspondences.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub correspondences: usize,
    pub history: Vec<GicpIteration>,
}

struct Cloud {
    means: Vec<Vector3<f64>>,
    covs: Vec<Matrix3<f64>>,
}

impl Cloud {
    fn from(gs: &[Gaussian], cfg: &LoopConfig) -> Self {
        let means: Vec<Vector3<f64>> = gs.iter().map(|g| g.mean).collect();
        let covs = match cfg.covariance {
            CovarianceSource::Gaussian => gs.par_iter().map(|g| regularize_covariance(&g.covariance())).collect(),
            CovarianceSource::Neighborhood => {
                let scatter = neighborhood_covariances(&means, cfg.neighborhood_radius);
                gs.par_iter()
                    .zip(scatter)
                    .map(|(g, c)| regularize_covariance(&c.unwrap_or_else(|| g.covariance())))
                    .collect()
            }
        };
        Self { means, covs }
    }
}

/// Sample covariance of the points within `radius` of each point, or `None`
/// where fewer than five points fall inside.
pub fn neighborhood_covariances(points: &[Vector3<f64>], radius: f64) -> Vec<Option<Matrix3<f64>>> {
    let index = SpatialHash::build(radius, points.iter().copied());
    points
        .par_iter()
        .map(|p| {
            let near = index.within(p, radius);
            if near.len() < 5 {
                return None;
            }
            let n = near.len() as f64;
            let mean = near.iter().map(|&k| points[k]).sum::<Vector3<f64>>() / n;
            let cov = near
                .iter()
                .map(|&k| {
                    let d = points[k] - mean;
                    d * d.transpose()
                })
                .sum::<Matrix3<f64>>()
                / n;
            Some(cov)
        })
        .collect()
}

/// Pairs `(src, tar)` under `transform`, nearest target mean within `d_corr`.
fn correspondences(src: &Cloud, index: &SpatialHash, transform: &Pose, d_corr: f64) -> Vec<(usize, usize)> {
    src.means
        .par_iter()
        .enumerate()
        .filter_map(|(m, mu)| index.nearest(&transform.transform_point(mu), d_corr).map(|(n, _)| (m, n)))
        .collect()
}

fn info(src: &Cloud, tar: &Cloud, m: usize, n: usize, rot: &Matrix3<f64>) -> Matrix3<f64> {
    let cov = tar.covs[n] + rot * src.covs[m] * rot.transpose();
    cov.try_inverse().expect("regularized covariances are positive definite")
}

fn cost(src: &Cloud, tar: &Cloud, pairs: &[(usize, usize)], t: &Pose) -> f64 {
    let rot = t.rotation_matrix();
    pairs
        .iter()
        .map(|&(m, n)| {
            let r = tar.means[n] - t.transform_point(&src.means[m]);
            (r.transpose() * info(src, tar, m, n, &rot) * r)[0]
        })
        .sum()
}

fn mean_mahalanobis(src: &Cloud, tar: &Cloud, pairs: &[(usize, usize)], t: &Pose) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let rot = t.rotation_matrix();
    pairs
        .iter()
        .map(|&(m, n)| {
            let r = tar.means[n] - t.transform_point(&src.means[m]);
            (r.transpose() * info(src, tar, m, n, &rot) * r)[0].max(0.0).sqrt()
        })
        .sum::<f64>()
        / pairs.len() as f64
}

/// Registers `src` onto `tar` starting from `init`. Each iteration
/// re-associates by nearest mean and takes one damped Gauss-Newton step on
/// a left perturbation of the transform, retrying with heavier damping
/// until the objective does not increase.
pub fn gaussian_gicp(src: &[Gaussian], tar: &[Gaussian], init: &Pose, cfg: &LoopConfig) -> Result<GicpResult, LoopError> {
    let src_c = Cloud::from(src, cfg);
    let tar_c = Cloud::from(tar, cfg);
    let index = SpatialHash::build(cfg.corr_distance / 4.0, tar_c.means.iter().copied());
    let mut t = *init;
    let mut lambda = 1e-6;
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let pairs = correspondences(&src_c, &index, &t, cfg.corr_distance);
        if pairs.is_empty() {
            return Err(LoopError::NoCorrespondences);
        }
        let rot = t.rotation_matrix();
        let mut h = Matrix6::<f64>::zeros();
        let mut b = Vector6::<f64>::zeros();
        for &(m, n) in &pairs {
            let q = t.transform_point(&src_c.means[m]);
            let r = tar_c.means[n] - q;
            let omega = info(&src_c, &tar_c, m, n, &rot);
            let mut jac = nalgebra::Matrix3x6::<f64>::zeros();
            jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&q));
            jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
            h += jac.transpose() * omega * jac;
            b += jac.transpose() * omega * r;
        }
        let cost_before = cost(&src_c, &tar_c, &pairs, &t);
        let scale = (h.trace() / 6.0).max(1e-12);
        let mut accepted = None;
        for _ in 0..20 {
            let damped = h + Matrix6::identity() * (lambda * scale);
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = -chol.solve(&b);
            let cand = Pose::exp(&delta).compose(&t);
            let cost_after = cost(&src_c, &tar_c, &pairs, &cand);
            if cost_after <= cost_before {
                accepted = Some((cand, delta.norm(), cost_after));
                lambda = (lambda * 0.1).max(1e-12);
                break;
            }
            lambda *= 10.0;
        }
        let (cand, step_norm, cost_after) = accepted.unwrap_or((t, 0.0, cost_before));
        history.push(GicpIteration {
            cost_before,
            cost_after,
            correspondences: pairs.len(),
            damping: lambda,
            step_norm,
        });
        t = cand;
        if step_norm < cfg.step_tolerance {
            converged = true;
            break;
        }
    }
    let pairs = correspondences(&src_c, &index, &t, cfg.corr_distance);
    if pairs.is_empty() {
        return Err(LoopError::NoCorrespondences);
    }
    let result = GicpResult {
        transform: t,
        residual: mean_mahalanobis(&src_c, &tar_c, &pairs, &t),
        iterations: history.len(),
        converged,
        correspondences: pairs.len(),
        history,
    };
    if !converged {
        return Err(LoopError::NotConverged(Box::new(result)));
    }
    Ok(result)
}

/// A registration is trusted when it converged with a small residual over
/// enough correspondences.
pub fn accept_loop(result: &GicpResult, max_residual: f64, min_correspondences: usize) -> bool {
    result.converged && result.residual < max_residual && result.correspondences >= min_correspondences
}
