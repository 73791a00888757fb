//! The 3D Gaussian primitive and its real spherical-harmonics color model.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of SH coefficients per channel for a band limit.
pub const fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub fn sh_degree_for(count: usize) -> usize {
    match count {
        1 => 0,
        4 => 1,
        9 => 2,
        16 => 3,
        n => panic!("{n} is not a valid SH coefficient count"),
    }
}

/// DC coefficient reproducing `color` when all higher bands are zero.
pub fn color_to_dc(color: &Vector3<f64>) -> Vector3<f64> {
    color.map(|c| (c - 0.5) / SH_C0)
}

pub fn dc_to_color(dc: &Vector3<f64>) -> Vector3<f64> {
    dc.map(|c| c * SH_C0 + 0.5)
}

/// Evaluates the SH basis at a unit direction; optionally also the Jacobian
/// of each basis function with respect to the (unnormalized) direction
/// components, treating them as independent.
pub fn sh_basis(degree: usize, d: &Vector3<f64>, basis: &mut [f64], grad: Option<&mut [Vector3<f64>]>) {
    let (x, y, z) = (d.x, d.y, d.z);
    let n = sh_coeff_count(degree);
    debug_assert!(basis.len() >= n);
    basis[0] = SH_C0;
    if degree >= 1 {
        basis[1] = -SH_C1 * y;
        basis[2] = SH_C1 * z;
        basis[3] = -SH_C1 * x;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    if degree >= 2 {
        basis[4] = SH_C2[0] * x * y;
        basis[5] = SH_C2[1] * y * z;
        basis[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        basis[7] = SH_C2[3] * x * z;
        basis[8] = SH_C2[4] * (xx - yy);
    }
    if degree >= 3 {
        basis[9] = SH_C3[0] * y * (3.0 * xx - yy);
        basis[10] = SH_C3[1] * x * y * z;
        basis[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
        basis[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        basis[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
        basis[14] = SH_C3[5] * z * (xx - yy);
        basis[15] = SH_C3[6] * x * (xx - 3.0 * yy);
    }
    let Some(g) = grad else { return };
    g[0] = Vector3::zeros();
    if degree >= 1 {
        g[1] = Vector3::new(0.0, -SH_C1, 0.0);
        g[2] = Vector3::new(0.0, 0.0, SH_C1);
        g[3] = Vector3::new(-SH_C1, 0.0, 0.0);
    }
    if degree >= 2 {
        g[4] = Vector3::new(y, x, 0.0) * SH_C2[0];
        g[5] = Vector3::new(0.0, z, y) * SH_C2[1];
        g[6] = Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z) * SH_C2[2];
        g[7] = Vector3::new(z, 0.0, x) * SH_C2[3];
        g[8] = Vector3::new(2.0 * x, -2.0 * y, 0.0) * SH_C2[4];
    }
    if degree >= 3 {
        g[9] = Vector3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0) * SH_C3[0];
        g[10] = Vector3::new(y * z, x * z, x * y) * SH_C3[1];
        g[11] = Vector3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z) * SH_C3[2];
        g[12] = Vector3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy) * SH_C3[3];
        g[13] = Vector3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z) * SH_C3[4];
        g[14] = Vector3::new(2.0 * x * z, -2.0 * y * z, xx - yy) * SH_C3[5];
        g[15] = Vector3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0) * SH_C3[6];
    }
}

/// Which branch of the cascaded initializer produced a Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitSource {
    Model,
    Pca,
    Heuristic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub opacity_logit: f64,
    /// `sh[0]` is the DC term; one RGB triple per coefficient.
    pub sh: Vec<Vector3<f64>>,
    pub segment_id: u32,
    pub frozen: bool,
    pub source: InitSource,
    /// Stable identity assigned when the Gaussian enters a map.
    pub id: u64,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Gaussian {
    /// Isotropic Gaussian with identity rotation and a flat color.
    pub fn isotropic(mean: Vector3<f64>, scale: f64, opacity: f64, color: Vector3<f64>, sh_degree: usize) -> Self {
        let mut sh = vec![Vector3::zeros(); sh_coeff_count(sh_degree)];
        sh[0] = color_to_dc(&color);
        Self {
            mean,
            log_scale: Vector3::repeat(scale.ln()),
            rotation: UnitQuaternion::identity(),
            opacity_logit: logit(opacity),
            sh,
            segment_id: 0,
            frozen: false,
            source: InitSource::Heuristic,
            id: 0,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn sh_degree(&self) -> usize {
        sh_degree_for(self.sh.len())
    }

    /// `R diag(s²) Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let s2 = self.log_scale.map(|s| (2.0 * s).exp());
        r * Matrix3::from_diagonal(&s2) * r.transpose()
    }

    /// Color seen from `camera_center`, clamped to `[0, 1]`.
    pub fn color_from(&self, camera_center: &Vector3<f64>) -> Vector3<f64> {
        let dir = (self.mean - camera_center).normalize();
        let mut basis = [0.0; 16];
        sh_basis(self.sh_degree(), &dir, &mut basis, None);
        let mut c = Vector3::repeat(0.5);
        for (k, coeff) in self.sh.iter().enumerate() {
            c += coeff * basis[k];
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn parameter_count(&self) -> usize {
        3 + 3 + 4 + 1 + 3 * self.sh.len()
    }
}
