//! Synthetic front end: a ray-traced arena of textured boxes seen from a
//! camera following a closed waypoint loop, with drifting odometry and
//! sparse colored range points.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{frame_path, write_points, DatasetMeta, FrameFile};
use super::PipelineError;
use crate::geom::{write_trajectory, Camera, Pose, StampedPose};
use crate::image::{write_pfm, write_png, GrayImage, Image, RgbImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    /// Footprint centre on the floor, metres.
    pub center: [f64; 2],
    /// Extent along x, y and z, metres.
    pub size: [f64; 3],
    pub texture_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Side of the square arena centred on the origin, metres.
    pub arena_size: f64,
    pub wall_height: f64,
    pub boxes: Vec<BoxSpec>,
    pub texture_seed: u64,
    /// Only the floor plane, no walls or boxes.
    pub floor_only: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            arena_size: 20.0,
            wall_height: 3.0,
            boxes: vec![
                BoxSpec {
                    center: [-1.5, -1.0],
                    size: [2.0, 1.5, 1.6],
                    texture_seed: 11,
                },
                BoxSpec {
                    center: [2.0, 1.5],
                    size: [1.2, 2.4, 2.2],
                    texture_seed: 12,
                },
                BoxSpec {
                    center: [-2.0, 2.5],
                    size: [1.0, 1.0, 1.0],
                    texture_seed: 13,
                },
                BoxSpec {
                    center: [1.8, -2.4],
                    size: [1.6, 0.8, 1.2],
                    texture_seed: 14,
                },
            ],
            texture_seed: 7,
            floor_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    /// Closed polygon in the floor plane, metres.
    pub waypoints: Vec<[f64; 2]>,
    pub height: f64,
    /// Downward tilt of the optical axis, radians.
    pub pitch: f64,
    /// Metres per second.
    pub speed: f64,
    /// Frames per second.
    pub rate: f64,
    /// Number of times the loop is driven, may be fractional.
    pub laps: f64,
    /// Distance over which the heading is smoothed at corners, metres.
    pub heading_lookahead: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            waypoints: vec![[-5.5, -5.5], [5.5, -5.5], [5.5, 5.5], [-5.5, 5.5]],
            height: 1.2,
            pitch: 0.2,
            speed: 0.8,
            rate: 10.0,
            laps: 1.3,
            heading_lookahead: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Standard deviation of the range noise on depth and points, metres.
    pub range_sigma: f64,
    /// Per-frame random-walk step of the odometry translation, metres.
    pub drift_translation: f64,
    /// Per-frame random-walk step of the odometry rotation, radians.
    pub drift_rotation: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            range_sigma: 0.01,
            drift_translation: 0.02,
            drift_rotation: 0.0005,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub noise: NoiseSpec,
    pub camera: Camera,
    pub points_per_frame: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            trajectory: TrajectorySpec::default(),
            noise: NoiseSpec::default(),
            camera: Camera::with_hfov(128, 128, 90f64.to_radians()),
            points_per_frame: 2000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let t = &self.trajectory;
        let n = &self.noise;
        let checks = [
            (self.scene.arena_size > 0.0 && self.scene.wall_height > 0.0, "scene dimensions must be positive"),
            (
                self.scene.boxes.iter().all(|b| b.size.iter().all(|&s| s > 0.0)),
                "box sizes must be positive",
            ),
            (t.speed > 0.0 && t.rate > 0.0 && t.laps > 0.0, "speed, rate and laps must be positive"),
            (t.waypoints.len() >= 2, "trajectory needs at least two waypoints"),
            (
                n.range_sigma >= 0.0 && n.drift_translation >= 0.0 && n.drift_rotation >= 0.0,
                "noise levels must be non-negative",
            ),
            (self.points_per_frame > 0, "points_per_frame must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(PipelineError::Config(msg.into()));
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        let t = &self.trajectory;
        let length = polygon_length(&t.waypoints) * t.laps;
        (length / t.speed * t.rate).floor() as usize + 1
    }
}

fn polygon_length(w: &[[f64; 2]]) -> f64 {
    (0..w.len())
        .map(|i| {
            let a = w[i];
            let b = w[(i + 1) % w.len()];
            ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
        })
        .sum()
}

/// Point at arc length `s` along the closed polygon.
fn polygon_point(w: &[[f64; 2]], s: f64) -> Vector2<f64> {
    let total = polygon_length(w);
    let mut s = s.rem_euclid(total);
    for i in 0..w.len() {
        let a = Vector2::from(w[i]);
        let b = Vector2::from(w[(i + 1) % w.len()]);
        let len = (b - a).norm();
        if s <= len || i + 1 == w.len() {
            return a + (b - a) * (s / len).min(1.0);
        }
        s -= len;
    }
    unreachable!("polygon has at least two vertices")
}

/// World-from-camera pose for a camera at `pos` heading along `yaw` in the
/// floor plane, tilted down by `pitch`. Camera axes: x right, y down,
/// z forward.
pub fn camera_pose(pos: Vector3<f64>, yaw: f64, pitch: f64) -> Pose {
    let fwd = Vector3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), -pitch.sin());
    let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
    let down = fwd.cross(&right);
    let r = Matrix3::from_columns(&[right, down, fwd]);
    Pose::from_matrix(&r, pos)
}

/// Ground-truth poses sampled at the frame rate.
pub fn ground_truth(cfg: &SynthConfig) -> Vec<StampedPose> {
    let t = &cfg.trajectory;
    (0..cfg.frame_count())
        .map(|k| {
            let time = k as f64 / t.rate;
            let s = time * t.speed;
            let p = polygon_point(&t.waypoints, s);
            let ahead = polygon_point(&t.waypoints, s + t.heading_lookahead);
            let behind = polygon_point(&t.waypoints, s - t.heading_lookahead);
            let dir = ahead - behind;
            StampedPose {
                timestamp: time,
                pose: camera_pose(Vector3::new(p.x, p.y, t.height), dir.y.atan2(dir.x), t.pitch),
            }
        })
        .collect()
}

/// Odometry whose increments carry a per-frame random perturbation, so the
/// error performs a random walk along the trajectory.
pub fn odometry(gt: &[StampedPose], noise: &NoiseSpec, seed: u64) -> Vec<StampedPose> {
    if noise.drift_translation == 0.0 && noise.drift_rotation == 0.0 {
        return gt.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0D0_0D0);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(gt.len());
    let mut est = gt[0].pose;
    out.push(gt[0]);
    for k in 1..gt.len() {
        let step = gt[k - 1].pose.inverse().compose(&gt[k].pose);
        let xi = Vector6::from_fn(|i, _| {
            let s = if i < 3 { noise.drift_rotation } else { noise.drift_translation };
            s * unit.sample(&mut rng)
        });
        est = est.compose(&step).compose(&Pose::exp(&xi));
        out.push(StampedPose {
            timestamp: gt[k].timestamp,
            pose: est,
        });
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    t: f64,
    normal: Vector3<f64>,
    /// Texture coordinates in metres on the hit surface.
    uv: Vector2<f64>,
    surface: u64,
}

/// Ray-traceable scene: the floor, four arena walls and axis-aligned boxes.
pub struct Scene {
    spec: SceneSpec,
    light: Vector3<f64>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn lattice(seed: u64, i: i64, j: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((i as u64).wrapping_mul(0x1F1F_1F1F) ^ (j as u64).wrapping_mul(0x7A7A_7A7A_0000_0001)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated lattice noise in `[0, 1)`.
fn value_noise(seed: u64, p: Vector2<f64>) -> f64 {
    let (fx, fy) = (p.x.floor(), p.y.floor());
    let (tx, ty) = (p.x - fx, p.y - fy);
    let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
    let (i, j) = (fx as i64, fy as i64);
    let a = lattice(seed, i, j) * (1.0 - sx) + lattice(seed, i + 1, j) * sx;
    let b = lattice(seed, i, j + 1) * (1.0 - sx) + lattice(seed, i + 1, j + 1) * sx;
    a * (1.0 - sy) + b * sy
}

impl Scene {
    pub fn new(spec: SceneSpec) -> Self {
        Self {
            spec,
            light: Vector3::new(0.4, 0.3, 0.86).normalize(),
        }
    }

    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |h: Hit| {
            if h.t > 1e-9 && best.is_none_or(|b| h.t < b.t) {
                best = Some(h);
            }
        };
        let half = 0.5 * self.spec.arena_size;
        if d.z != 0.0 {
            let t = -o.z / d.z;
            let p = o + d * t;
            if p.x.abs() <= half && p.y.abs() <= half {
                consider(Hit {
                    t,
                    normal: Vector3::z(),
                    uv: Vector2::new(p.x, p.y),
                    surface: 0,
                });
            }
        }
        if self.spec.floor_only {
            return best;
        }
        for axis in 0..2 {
            for (k, side) in [-1.0f64, 1.0].iter().enumerate() {
                if d[axis] == 0.0 {
                    continue;
                }
                let t = (side * half - o[axis]) / d[axis];
                let p = o + d * t;
                let other = 1 - axis;
                if p[other].abs() <= half && p.z >= 0.0 && p.z <= self.spec.wall_height {
                    let mut n = Vector3::zeros();
                    n[axis] = -side;
                    consider(Hit {
                        t,
                        normal: n,
                        uv: Vector2::new(p[other], p.z),
                        surface: 1 + 2 * axis as u64 + k as u64,
                    });
                }
            }
        }
        for (bi, b) in self.spec.boxes.iter().enumerate() {
            let lo = Vector3::new(b.center[0] - 0.5 * b.size[0], b.center[1] - 0.5 * b.size[1], 0.0);
            let hi = Vector3::new(b.center[0] + 0.5 * b.size[0], b.center[1] + 0.5 * b.size[1], b.size[2]);
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut near_axis = 0;
            let mut miss = false;
            for a in 0..3 {
                if d[a] == 0.0 {
                    if o[a] < lo[a] || o[a] > hi[a] {
                        miss = true;
                    }
                    continue;
                }
                let (t0, t1) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
                let (t0, t1) = (t0.min(t1), t0.max(t1));
                if t0 > t_near {
                    t_near = t0;
                    near_axis = a;
                }
                t_far = t_far.min(t1);
            }
            if miss || t_near > t_far || t_near <= 0.0 {
                continue;
            }
            let p = o + d * t_near;
            let mut n = Vector3::zeros();
            n[near_axis] = -d[near_axis].signum();
            let uv = match near_axis {
                0 => Vector2::new(p.y, p.z),
                1 => Vector2::new(p.x, p.z),
                _ => Vector2::new(p.x, p.y),
            };
            consider(Hit {
                t: t_near,
                normal: n,
                uv,
                surface: 10 + 6 * bi as u64 + 2 * near_axis as u64 + u64::from(n[near_axis] > 0.0),
            });
        }
        best
    }

    fn surface_seed(&self, surface: u64) -> u64 {
        let base = if surface >= 10 {
            self.spec.boxes[((surface - 10) / 6) as usize].texture_seed
        } else {
            self.spec.texture_seed
        };
        splitmix(base.wrapping_mul(1000).wrapping_add(surface))
    }

    /// Procedural albedo: a per-surface base colour modulated by tiles and
    /// two octaves of value noise.
    fn albedo(&self, surface: u64, uv: Vector2<f64>) -> Vector3<f64> {
        let seed = self.surface_seed(surface);
        let base = Vector3::new(
            0.25 + 0.6 * lattice(seed, 1, 0),
            0.25 + 0.6 * lattice(seed, 2, 0),
            0.25 + 0.6 * lattice(seed, 3, 0),
        );
        let tile = if ((uv.x / 0.5).floor() + (uv.y / 0.5).floor()) as i64 % 2 == 0 { 1.1 } else { 0.9 };
        let coarse = value_noise(seed ^ 1, uv / 0.25) - 0.5;
        let fine = value_noise(seed ^ 2, uv / 0.07) - 0.5;
        let accent = Vector3::new(lattice(seed, 4, 0), lattice(seed, 5, 0), lattice(seed, 6, 0)) - Vector3::repeat(0.5);
        (base * tile + Vector3::repeat(0.35 * coarse + 0.18 * fine) + accent * (0.4 * coarse)).map(|c| c.clamp(0.0, 1.0))
    }

    /// Colour and depth along the camera ray through `pixel`; depth 0 and a
    /// sky colour when nothing is hit.
    pub fn trace(&self, camera: &Camera, pose: &Pose, pixel: &Vector2<f64>) -> (Vector3<f64>, f64) {
        let ray_cam = camera.ray(pixel);
        let dir = pose.rotation * ray_cam;
        match self.intersect(&pose.translation, &dir) {
            Some(h) => {
                let shade = 0.45 + 0.55 * h.normal.dot(&self.light).max(0.0);
                (self.albedo(h.surface, h.uv) * shade, h.t)
            }
            None => (Vector3::new(0.62, 0.74, 0.88), 0.0),
        }
    }

    pub fn render(&self, camera: &Camera, pose: &Pose) -> (RgbImage, GrayImage) {
        let mut rgb = Image::filled(camera.width, camera.height, [0.0; 3]);
        let mut depth = Image::filled(camera.width, camera.height, 0.0);
        for y in 0..camera.height {
            for x in 0..camera.width {
                let (c, d) = self.trace(camera, pose, &Vector2::new(x as f64, y as f64));
                *rgb.get_mut(x, y) = [c.x, c.y, c.z];
                *depth.get_mut(x, y) = d;
            }
        }
        (rgb, depth)
    }
}

/// One synthesized frame before it is written out.
pub struct SynthFrame {
    pub rgb: RgbImage,
    pub depth: GrayImage,
    pub points: Vec<FrameFile>,
}

/// Renders frame `k` at its ground-truth pose, adds range noise, and draws
/// the sparse point sample in the camera frame.
pub fn synth_frame(cfg: &SynthConfig, scene: &Scene, pose: &Pose, k: usize) -> SynthFrame {
    let (rgb, clean) = scene.render(&cfg.camera, pose);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ (k as u64).wrapping_mul(0x51_7CC1_B727_220A)));
    let sigma = cfg.noise.range_sigma;
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let depth = Image {
        width: clean.width,
        height: clean.height,
        data: clean
            .data
            .iter()
            .map(|&d| if d > 0.0 && sigma > 0.0 { (d + noise.sample(&mut rng)).max(1e-3) } else { d })
            .collect(),
    };
    let n_pix = cfg.camera.pixel_count();
    let take = cfg.points_per_frame.min(n_pix);
    let picks = rand::seq::index::sample(&mut rng, n_pix, take).into_vec();
    let mut picks = picks;
    picks.sort_unstable();
    let points = picks
        .into_iter()
        .filter(|&i| depth.data[i] > 0.0)
        .map(|i| {
            let (x, y) = (i % cfg.camera.width, i / cfg.camera.width);
            let p = cfg.camera.unproject(&Vector2::new(x as f64, y as f64), depth.data[i]);
            let c = rgb.data[i];
            FrameFile {
                position: p,
                color: [quantize(c[0]), quantize(c[1]), quantize(c[2])],
                sigma,
            }
        })
        .collect();
    let _ = rng.random::<u32>();
    SynthFrame { rgb, depth, points }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a complete dataset directory.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<DatasetMeta, PipelineError> {
    cfg.validate()?;
    fs::create_dir_all(out.join("frames"))?;
    let gt = ground_truth(cfg);
    let odom = odometry(&gt, &cfg.noise, cfg.seed);
    write_trajectory(&out.join("poses_gt.tsv"), &gt)?;
    write_trajectory(&out.join("poses_odom.tsv"), &odom)?;
    let scene = Scene::new(cfg.scene.clone());
    (0..gt.len()).into_par_iter().try_for_each(|k| -> Result<(), PipelineError> {
        let f = synth_frame(cfg, &scene, &gt[k].pose, k);
        write_png(&frame_path(out, k, "rgb.png"), &f.rgb)?;
        write_pfm(&frame_path(out, k, "depth.pfm"), &f.depth)?;
        write_points(out, k, &f.points)?;
        Ok(())
    })?;
    let meta = DatasetMeta {
        camera: cfg.camera,
        rate: cfg.trajectory.rate,
        frame_count: gt.len(),
        range_sigma: cfg.noise.range_sigma,
        points_frame: "camera".into(),
        synth: Some(cfg.clone()),
    };
    fs::write(out.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}
