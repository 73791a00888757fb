//! Hash-indexed voxel map with per-voxel PCA, planar/linear classification and
//! first-order propagation of point noise into the voxel descriptor
//! `g = [v_k; μ]`.

use std::collections::HashMap;

use nalgebra::{Matrix3, Matrix6, Matrix6x3, SymmetricEigen, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::quat_from_matrix;

#[derive(Debug, Error, PartialEq)]
pub enum VoxelError {
    #[error("voxel has {got} points, need at least {min}")]
    TooFewPoints { got: usize, min: usize },
    #[error("eigenvalue gap {gap:e} too small for a stable eigenvector")]
    DegenerateSpectrum { gap: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoxelConfig {
    pub voxel_size: f64,
    /// `τ_p`, m².
    pub plane_threshold: f64,
    /// `τ_l`, ratio `λ_max / λ_min`.
    pub line_ratio: f64,
    /// `τ_trace` on the direction block of the descriptor covariance.
    pub trace_threshold: f64,
    pub min_points: usize,
    /// Floor applied to eigenvalues before taking logarithms.
    pub eigen_floor: f64,
    /// Extra guard so that a perfect line (`λ_min ≈ λ_mid ≈ 0`) is not
    /// labelled planar.
    pub require_mid_above_tau_p: bool,
    /// Points beyond this count are not added to a voxel.
    pub max_points_per_voxel: usize,
}

impl Default for VoxelConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.5,
            plane_threshold: 0.0025,
            line_ratio: 25.0,
            trace_threshold: 1e-3,
            min_points: 10,
            eigen_floor: 1e-8,
            require_mid_above_tau_p: false,
            max_points_per_voxel: 200,
        }
    }
}

/// A colored world-frame point with its positional covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldPoint {
    pub position: Vector3<f64>,
    pub color: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

impl WorldPoint {
    pub fn new(position: Vector3<f64>, color: Vector3<f64>, sigma: f64) -> Self {
        Self {
            position,
            color,
            covariance: Matrix3::identity() * (sigma * sigma),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VoxelClass {
    Planar,
    Linear,
    Unreliable,
}

/// Which eigenvector enters the descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Min = 0,
    Mid = 1,
    Max = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelStats {
    pub mean: Vector3<f64>,
    /// Ascending: `[λ_min, λ_mid, λ_max]`.
    pub eigenvalues: Vector3<f64>,
    /// Columns `[v_min, v_mid, v_max]`, orthonormal with det +1.
    pub eigenvectors: Matrix3<f64>,
    pub count: usize,
    pub class: VoxelClass,
    pub descriptor_cov: Matrix6<f64>,
    pub reliable: bool,
}

impl VoxelStats {
    pub fn eigenvector(&self, axis: Axis) -> Vector3<f64> {
        self.eigenvectors.column(axis as usize).into_owned()
    }

    /// Covariance matrix reconstructed from the eigen-decomposition.
    pub fn covariance(&self) -> Matrix3<f64> {
        self.eigenvectors * Matrix3::from_diagonal(&self.eigenvalues) * self.eigenvectors.transpose()
    }
}

/// Orientation/scale prior handed to Gaussian initialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeomPrior {
    pub rotation: UnitQuaternion<f64>,
    /// `½ log λ` for (max, mid, min).
    pub log_scale: Vector3<f64>,
    pub reliable: bool,
}

impl GeomPrior {
    pub fn unreliable() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            log_scale: Vector3::zeros(),
            reliable: false,
        }
    }
}

pub type VoxelKey = [i64; 3];

pub fn voxel_index(p: &Vector3<f64>, voxel_size: f64) -> VoxelKey {
    debug_assert!(voxel_size > 0.0);
    [
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    ]
}

/// Sorted eigen-decomposition of a symmetric 3×3 matrix, ascending, with the
/// eigenvector basis forced to det +1 by negating `v_min`.
pub fn sorted_eigen(c: &Matrix3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let eig = SymmetricEigen::new(*c);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = Vector3::new(
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    let mut vecs = Matrix3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    if vecs.determinant() < 0.0 {
        let c0 = -vecs.column(0);
        vecs.set_column(0, &c0);
    }
    (vals, vecs)
}

fn stats_from_moments(mean: Vector3<f64>, cov: Matrix3<f64>, count: usize) -> VoxelStats {
    let (eigenvalues, eigenvectors) = sorted_eigen(&cov);
    VoxelStats {
        mean,
        eigenvalues,
        eigenvectors,
        count,
        class: VoxelClass::Unreliable,
        descriptor_cov: Matrix6::zeros(),
        reliable: false,
    }
}

/// Mean, population covariance `(1/N) Σ (p-μ)(p-μ)ᵀ` and its sorted
/// eigen-decomposition. Classification is left unset.
pub fn fit_voxel(points: &[WorldPoint], min_points: usize) -> Result<VoxelStats, VoxelError> {
    let n = points.len();
    if n < min_points.max(1) {
        return Err(VoxelError::TooFewPoints {
            got: n,
            min: min_points.max(1),
        });
    }
    let inv_n = 1.0 / n as f64;
    let mean = points.iter().map(|p| p.position).sum::<Vector3<f64>>() * inv_n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.position - mean;
        cov += d * d.transpose();
    }
    cov *= inv_n;
    Ok(stats_from_moments(mean, cov, n))
}

pub fn classify(stats: &VoxelStats, cfg: &VoxelConfig) -> VoxelClass {
    let [l_min, l_mid, l_max] = [stats.eigenvalues[0], stats.eigenvalues[1], stats.eigenvalues[2]];
    let mid_ok = !cfg.require_mid_above_tau_p || l_mid >= cfg.plane_threshold;
    if l_min < cfg.plane_threshold && mid_ok {
        VoxelClass::Planar
    } else if l_max / l_min.max(1e-12) > cfg.line_ratio {
        VoxelClass::Linear
    } else {
        VoxelClass::Unreliable
    }
}

/// Descriptor axis used for a class: `v_min` for planes, `v_max` for lines.
pub fn class_axis(class: VoxelClass) -> Option<Axis> {
    match class {
        VoxelClass::Planar => Some(Axis::Min),
        VoxelClass::Linear => Some(Axis::Max),
        VoxelClass::Unreliable => None,
    }
}

/// Propagates each point's covariance through the eigenvector/mean
/// Jacobian: `Σ_g = Σ_i J_i Σ_i Jᵢᵀ`, `J_i = [V F_i; I/N]`.
pub fn descriptor_covariance(
    points: &[WorldPoint],
    stats: &VoxelStats,
    axis: Axis,
) -> Result<Matrix6<f64>, VoxelError> {
    let n = points.len() as f64;
    let k = axis as usize;
    let vk = stats.eigenvectors.column(k).into_owned();
    let mut others = Vec::with_capacity(2);
    for m in 0..3 {
        if m == k {
            continue;
        }
        let gap = stats.eigenvalues[k] - stats.eigenvalues[m];
        if gap.abs() < 1e-10 {
            return Err(VoxelError::DegenerateSpectrum { gap });
        }
        others.push((stats.eigenvectors.column(m).into_owned(), gap));
    }

    let mut sigma_g = Matrix6::zeros();
    for p in points {
        let d = p.position - stats.mean;
        // V F_i = Σ_m v_m f_m, f_m = dᵀ (v_m v_kᵀ + v_k v_mᵀ) / (N (λ_k - λ_m))
        let mut vf = Matrix3::zeros();
        for (vm, gap) in &others {
            let f_m = (vk.transpose() * d.dot(vm) + vm.transpose() * d.dot(&vk)) / (n * gap);
            vf += vm * f_m;
        }
        let mut j = Matrix6x3::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&vf);
        j.fixed_view_mut::<3, 3>(3, 0).copy_from(&(Matrix3::identity() / n));
        sigma_g += j * p.covariance * j.transpose();
    }
    Ok((sigma_g + sigma_g.transpose()) * 0.5)
}

/// Reliable iff the trace of the direction block is strictly below the
/// threshold.
pub fn reliability(sigma_g: &Matrix6<f64>, trace_threshold: f64) -> bool {
    sigma_g.fixed_view::<3, 3>(0, 0).trace() < trace_threshold
}

/// Rotation with columns `(v_max, v_mid, v_min)` and half-log eigenvalues
/// in the same order.
pub fn geom_prior(stats: &VoxelStats, eigen_floor: f64) -> GeomPrior {
    let v = &stats.eigenvectors;
    let mut r = Matrix3::zeros();
    r.set_column(0, &v.column(2));
    r.set_column(1, &v.column(1));
    r.set_column(2, &v.column(0));
    if r.determinant() < 0.0 {
        let c = -r.column(2);
        r.set_column(2, &c);
    }
    let half_log = |l: f64| 0.5 * l.max(eigen_floor).ln();
    GeomPrior {
        rotation: quat_from_matrix(&r),
        log_scale: Vector3::new(
            half_log(stats.eigenvalues[2]),
            half_log(stats.eigenvalues[1]),
            half_log(stats.eigenvalues[0]),
        ),
        reliable: stats.reliable,
    }
}

/// Fits, classifies and scores a voxel from its points in one go.
pub fn analyze_voxel(points: &[WorldPoint], cfg: &VoxelConfig) -> Result<VoxelStats, VoxelError> {
    let mut stats = fit_voxel(points, cfg.min_points)?;
    stats.class = classify(&stats, cfg);
    if let Some(axis) = class_axis(stats.class) {
        match descriptor_covariance(points, &stats, axis) {
            Ok(cov) => {
                stats.reliable = reliability(&cov, cfg.trace_threshold);
                stats.descriptor_cov = cov;
            }
            Err(VoxelError::DegenerateSpectrum { .. }) => {
                stats.class = VoxelClass::Unreliable;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(stats)
}

#[derive(Clone, Debug, Default)]
struct VoxelCell {
    points: Vec<WorldPoint>,
    sum: Vector3<f64>,
    sum_outer: Matrix3<f64>,
    prior: Option<GeomPrior>,
}

/// Flat hash grid of voxels. Priors are cached per voxel and invalidated on
/// insertion.
#[derive(Clone, Debug, Default)]
pub struct VoxelMap {
    cfg: VoxelConfig,
    cells: HashMap<VoxelKey, VoxelCell>,
}

impl VoxelMap {
    pub fn new(cfg: VoxelConfig) -> Self {
        Self {
            cfg,
            cells: HashMap::new(),
        }
    }

    pub fn config(&self) -> &VoxelConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn clear(&mut self) {
        self.cells.clear();
    }

    pub fn insert(&mut self, p: WorldPoint) {
        let key = voxel_index(&p.position, self.cfg.voxel_size);
        let cell = self.cells.entry(key).or_default();
        if cell.points.len() >= self.cfg.max_points_per_voxel {
            return;
        }
        cell.sum += p.position;
        cell.sum_outer += p.position * p.position.transpose();
        cell.points.push(p);
        cell.prior = None;
    }

    pub fn extend<'a>(&mut self, points: impl IntoIterator<Item = &'a WorldPoint>) {
        for p in points {
            self.insert(*p);
        }
    }

    pub fn points(&self, key: &VoxelKey) -> &[WorldPoint] {
        self.cells.get(key).map(|c| c.points.as_slice()).unwrap_or(&[])
    }

    /// Stats from the running first/second moments, without revisiting points.
    pub fn incremental_stats(&self, key: &VoxelKey) -> Option<VoxelStats> {
        let cell = self.cells.get(key)?;
        let n = cell.points.len();
        if n == 0 {
            return None;
        }
        let inv_n = 1.0 / n as f64;
        let mean = cell.sum * inv_n;
        let cov = cell.sum_outer * inv_n - mean * mean.transpose();
        Some(stats_from_moments(mean, (cov + cov.transpose()) * 0.5, n))
    }

    pub fn analyze(&self, key: &VoxelKey) -> Result<VoxelStats, VoxelError> {
        analyze_voxel(self.points(key), &self.cfg)
    }

    /// Prior of the voxel containing `p`; unreliable when the voxel is too
    /// sparse or its geometry is not planar/linear.
    pub fn prior_at(&mut self, p: &Vector3<f64>) -> GeomPrior {
        let key = voxel_index(p, self.cfg.voxel_size);
        if let Some(prior) = self.cells.get(&key).and_then(|c| c.prior) {
            return prior;
        }
        let prior = match self.analyze(&key) {
            Ok(stats) if stats.class != VoxelClass::Unreliable => {
                geom_prior(&stats, self.cfg.eigen_floor)
            }
            _ => GeomPrior::unreliable(),
        };
        if let Some(cell) = self.cells.get_mut(&key) {
            cell.prior = Some(prior);
        }
        prior
    }

    pub fn annotate(&mut self, points: &[WorldPoint]) -> Vec<GeomPrior> {
        points.iter().map(|p| self.prior_at(&p.position)).collect()
    }
}
