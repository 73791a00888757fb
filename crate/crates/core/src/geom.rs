//! Rigid-body algebra, the pinhole camera and trajectory alignment.
//!
//! Quaternions are Hamilton, stored `(w, x, y, z)`, right-handed. Twists are
//! ordered `[rotation; translation]`.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Mul;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this rotation angle the closed-form SE(3) coefficients switch to
/// their Taylor expansions.
const SMALL_ANGLE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("point has non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),
    #[error("trajectory length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("trajectory parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Skew-symmetric matrix of `v`, so that `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Builds a unit quaternion from raw `(w, x, y, z)` components, renormalizing.
pub fn quat_wxyz(w: f64, x: f64, y: f64, z: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
}

/// Returns `[w, x, y, z]`.
pub fn quat_to_array(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

fn renormalized(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

/// SO(3) exponential of a rotation vector.
pub fn so3_exp(omega: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let (real, imag) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0)
    } else {
        ((0.5 * theta).cos(), (0.5 * theta).sin() / theta)
    };
    UnitQuaternion::from_quaternion(Quaternion::from_parts(real, omega * imag))
}

/// SO(3) logarithm, returning a rotation vector with norm in `[0, π]`.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let (mut w, mut v) = (q.w, q.vector().into_owned());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let vn = v.norm();
    if vn < 1e-10 {
        // atan2(|v|, w) ≈ |v|/w for tiny |v|
        return v * (2.0 / w);
    }
    let theta = 2.0 * vn.atan2(w);
    v * (theta / vn)
}

/// Rigid transform in SE(3).
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.translation;
        let q = &self.rotation;
        write!(
            f,
            "Pose(t=[{:.6}, {:.6}, {:.6}], q=[{:.6}, {:.6}, {:.6}, {:.6}])",
            t.x, t.y, t.z, q.w, q.i, q.j, q.k
        )
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: renormalized(rotation),
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn from_rotation(r: UnitQuaternion<f64>) -> Self {
        Self::new(r, Vector3::zeros())
    }

    /// Pose from a rotation matrix (assumed orthonormal, det +1) and translation.
    pub fn from_matrix(r: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        Self::new(quat_from_matrix(r), t)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: renormalized(self.rotation * other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose {
            rotation: renormalized(r_inv),
            translation: -(r_inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    /// Exponential map of a twist `[ω; v]`.
    pub fn exp(twist: &Vector6<f64>) -> Pose {
        let omega = Vector3::new(twist[0], twist[1], twist[2]);
        let v = Vector3::new(twist[3], twist[4], twist[5]);
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let (a, b) = if theta < SMALL_ANGLE {
            (
                0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
                1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
            )
        } else {
            let half_sin = (0.5 * theta).sin();
            (
                2.0 * half_sin * half_sin / theta2,
                (theta - theta.sin()) / (theta2 * theta),
            )
        };
        let w = skew(&omega);
        let jac = Matrix3::identity() + w * a + w * w * b;
        Pose {
            rotation: so3_exp(&omega),
            translation: jac * v,
        }
    }

    /// Logarithm map, inverse of [`Pose::exp`] for rotation angles below π.
    pub fn log(&self) -> Vector6<f64> {
        let omega = so3_log(&self.rotation);
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        // c = (1 - (θ/2) cot(θ/2)) / θ²; the difference cancels badly for
        // small θ, so the series takes over earlier than in `exp`.
        let c = if theta < 1e-2 {
            1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
                + theta2 * theta2 * theta2 / 1_209_600.0
        } else {
            let half = 0.5 * theta;
            (1.0 - half / half.tan()) / theta2
        };
        let w = skew(&omega);
        let jac_inv = Matrix3::identity() - w * 0.5 + w * w * c;
        let v = jac_inv * self.translation;
        Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z)
    }

    /// Geodesic rotation distance to `other` in radians.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        rotation_angle(&(self.rotation.inverse() * other.rotation))
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Geodesic angle of a rotation on SO(3), in `[0, π]`.
pub fn rotation_angle(q: &UnitQuaternion<f64>) -> f64 {
    2.0 * q.vector().norm().atan2(q.w.abs())
}

/// Quaternion of an orthonormal matrix with determinant +1.
pub fn quat_from_matrix(r: &Matrix3<f64>) -> UnitQuaternion<f64> {
    // Shepperd's method: pick the largest diagonal term for stability.
    let trace = r.trace();
    let (w, x, y, z);
    if trace > r[(0, 0)] && trace > r[(1, 1)] && trace > r[(2, 2)] {
        let s = (1.0 + trace).sqrt() * 2.0;
        w = 0.25 * s;
        x = (r[(2, 1)] - r[(1, 2)]) / s;
        y = (r[(0, 2)] - r[(2, 0)]) / s;
        z = (r[(1, 0)] - r[(0, 1)]) / s;
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        w = (r[(2, 1)] - r[(1, 2)]) / s;
        x = 0.25 * s;
        y = (r[(0, 1)] + r[(1, 0)]) / s;
        z = (r[(0, 2)] + r[(2, 0)]) / s;
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        w = (r[(0, 2)] - r[(2, 0)]) / s;
        x = (r[(0, 1)] + r[(1, 0)]) / s;
        y = 0.25 * s;
        z = (r[(1, 2)] + r[(2, 1)]) / s;
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        w = (r[(1, 0)] - r[(0, 1)]) / s;
        x = (r[(0, 2)] + r[(2, 0)]) / s;
        y = (r[(1, 2)] + r[(2, 1)]) / s;
        z = 0.25 * s;
    }
    quat_wxyz(w, x, y, z)
}

/// Pinhole camera without distortion. Pixel centers sit at integer
/// coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub in_image: bool,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(width >= 1 && height >= 1, "image must be non-empty");
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Camera with the given horizontal field of view (radians), square
    /// pixels and the principal point at the image center.
    pub fn with_hfov(width: usize, height: usize, hfov: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * hfov).tan();
        Self::new(
            f,
            f,
            (width as f64 - 1.0) * 0.5,
            (height as f64 - 1.0) * 0.5,
            width,
            height,
        )
    }

    pub fn project(&self, p_cam: &Vector3<f64>) -> Result<Projection, GeomError> {
        if p_cam.z <= 0.0 {
            return Err(GeomError::NonPositiveDepth(p_cam.z));
        }
        let u = self.fx * p_cam.x / p_cam.z + self.cx;
        let v = self.fy * p_cam.y / p_cam.z + self.cy;
        Ok(Projection {
            pixel: Vector2::new(u, v),
            depth: p_cam.z,
            in_image: self.contains(u, v),
        })
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }

    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Direction (not normalized) of the ray through `pixel`, camera frame,
    /// with unit z.
    pub fn ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        self.unproject(pixel, 1.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Result of [`umeyama_align`].
#[derive(Clone, Copy, Debug)]
pub struct Alignment {
    /// Maps estimated positions onto ground truth.
    pub transform: Pose,
    pub ate_rmse: f64,
}

/// Rigid (no scale) least-squares alignment of estimated positions onto
/// ground truth, and the RMSE of the residual translation errors.
pub fn umeyama_align(est: &[Pose], gt: &[Pose]) -> Result<Alignment, GeomError> {
    if est.len() != gt.len() {
        return Err(GeomError::LengthMismatch(est.len(), gt.len()));
    }
    let n = est.len();
    if n < 3 {
        return Err(GeomError::DegenerateTrajectory(format!(
            "need at least 3 poses, got {n}"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mu_e = est.iter().map(|p| p.translation).sum::<Vector3<f64>>() * inv_n;
    let mu_g = gt.iter().map(|p| p.translation).sum::<Vector3<f64>>() * inv_n;
    let mut cross = Matrix3::zeros();
    for (e, g) in est.iter().zip(gt) {
        cross += (g.translation - mu_g) * (e.translation - mu_e).transpose();
    }
    cross *= inv_n;

    let svd = cross.svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= f64::EPSILON || sv[1] <= 1e-9 * sv[0] {
        return Err(GeomError::DegenerateTrajectory(
            "positions are collinear or coincident".into(),
        ));
    }
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let d = (u * v_t).determinant().signum();
    let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = u * s * v_t;
    let t = mu_g - r * mu_e;
    let transform = Pose::from_matrix(&r, t);

    let sq: f64 = est
        .iter()
        .zip(gt)
        .map(|(e, g)| (r * e.translation + t - g.translation).norm_squared())
        .sum();
    Ok(Alignment {
        transform,
        ate_rmse: (sq * inv_n).sqrt(),
    })
}

/// One row of a trajectory file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StampedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

/// Writes `timestamp tx ty tz qw qx qy qz`, one pose per line.
pub fn write_trajectory(path: &Path, poses: &[StampedPose]) -> Result<(), GeomError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for sp in poses {
        let t = &sp.pose.translation;
        let q = &sp.pose.rotation;
        writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            sp.timestamp, t.x, t.y, t.z, q.w, q.i, q.j, q.k
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<StampedPose>, GeomError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut poses = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| GeomError::Parse {
                line: i + 1,
                msg: format!("{e}"),
            })?;
        if vals.len() != 8 {
            return Err(GeomError::Parse {
                line: i + 1,
                msg: format!("expected 8 columns, got {}", vals.len()),
            });
        }
        // Stored quaternions are already unit; avoid renormalizing so that
        // files round-trip bit-exactly.
        let q = UnitQuaternion::new_unchecked(Quaternion::new(vals[4], vals[5], vals[6], vals[7]));
        poses.push(StampedPose {
            timestamp: vals[0],
            pose: Pose {
                rotation: q,
                translation: Vector3::new(vals[1], vals[2], vals[3]),
            },
        });
    }
    Ok(poses)
}
