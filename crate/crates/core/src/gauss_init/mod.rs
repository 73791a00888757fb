//! Keyframe/loopframe bookkeeping and the three-branch Gaussian initializer.
//!
//! Each point accumulated between two loopframes becomes one Gaussian. Its
//! attributes come from the attribute maps when the point wins its pixel and
//! the prediction is valid, otherwise from the voxel-PCA prior when that is
//! reliable, otherwise from an isotropic depth-to-focal heuristic.

pub mod provider;

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{color_to_dc, logit, sh_coeff_count, Gaussian, InitSource};
use crate::geom::{Camera, Pose};
use crate::image::{GrayImage, RgbImage};
use crate::voxel_pca::{GeomPrior, WorldPoint};

pub use provider::{AttributeMaps, AttributeProvider, DirProvider, NoProvider, StubProvider};

#[derive(Debug, Error)]
pub enum InitError {
    #[error("segment has no keyframes")]
    EmptySegment,
    #[error("image dimensions differ")]
    DimensionMismatch,
    #[error("attribute maps: {0}")]
    MapsFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorPoint {
    pub point: WorldPoint,
    pub prior: GeomPrior,
}

/// One synchronized front-end sample.
#[derive(Clone, Debug)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    /// World-from-camera.
    pub pose: Pose,
    pub rgb: RgbImage,
    /// Metres, 0 where invalid.
    pub depth: GrayImage,
    pub points: Vec<PriorPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FocalChoice {
    Fx,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub keyframe_gap: usize,
    /// Metres.
    pub loop_translation: f64,
    /// Degrees.
    pub loop_rotation_deg: f64,
    pub focal: FocalChoice,
    /// Opacity given to Gaussians from the geometric branches.
    pub opacity: f64,
    pub beta_min: f64,
    pub sh_degree: usize,
    /// Local contrast below which the stub provider marks a pixel invalid.
    pub contrast_threshold: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            keyframe_gap: 5,
            loop_translation: 2.0,
            loop_rotation_deg: 15.0,
            focal: FocalChoice::Fx,
            opacity: 0.1,
            beta_min: 0.2,
            sh_degree: 1,
            contrast_threshold: 0.04,
        }
    }
}

impl InitConfig {
    pub fn focal_length(&self, cam: &Camera) -> f64 {
        match self.focal {
            FocalChoice::Fx => cam.fx,
            FocalChoice::Mean => 0.5 * (cam.fx + cam.fy),
        }
    }
}

pub fn select_keyframe(index: usize, gap: usize) -> bool {
    assert!(gap >= 1, "keyframe gap must be at least 1");
    index.is_multiple_of(gap)
}

pub fn select_loopframe(pose: &Pose, last_loopframe: &Pose, max_translation: f64, max_rotation: f64) -> bool {
    pose.distance_to(last_loopframe) > max_translation || pose.angle_to(last_loopframe) > max_rotation
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum View {
    Prev,
    Cur,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewHit {
    pub view: View,
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

fn hit_in(cam: &Camera, pose: &Pose, p: &Vector3<f64>, view: View) -> Option<ViewHit> {
    let proj = cam.project(&pose.inverse_transform_point(p)).ok()?;
    proj.in_image.then_some(ViewHit {
        view,
        pixel: proj.pixel,
        depth: proj.depth,
    })
}

/// The loopframe view in which `p` is visible and closer; `Cur` wins ties.
pub fn pick_view(p: &Vector3<f64>, cam: &Camera, prev: &Pose, cur: &Pose) -> Option<ViewHit> {
    match (hit_in(cam, prev, p, View::Prev), hit_in(cam, cur, p, View::Cur)) {
        (Some(a), Some(b)) => Some(if a.depth < b.depth { a } else { b }),
        (a, b) => b.or(a),
    }
}

fn pixel_cell(cam: &Camera, pixel: &Vector2<f64>) -> (usize, usize) {
    let u = pixel.x.round().clamp(0.0, (cam.width - 1) as f64) as usize;
    let v = pixel.y.round().clamp(0.0, (cam.height - 1) as f64) as usize;
    (u, v)
}

/// Flags, per input, whether it is the nearest point in its rounded pixel of
/// its chosen view. Equal depths keep the lower index.
pub fn resolve_pixel_conflicts(hits: &[Option<ViewHit>], cam: &Camera) -> Vec<bool> {
    let mut best: HashMap<(View, usize, usize), usize> = HashMap::new();
    for (i, hit) in hits.iter().enumerate() {
        let Some(h) = hit else { continue };
        let (u, v) = pixel_cell(cam, &h.pixel);
        best.entry((h.view, u, v))
            .and_modify(|j| {
                let other = hits[*j].expect("stored index has a hit");
                if h.depth < other.depth {
                    *j = i;
                }
            })
            .or_insert(i);
    }
    let mut keep = vec![false; hits.len()];
    for i in best.into_values() {
        keep[i] = true;
    }
    keep
}

/// Attributes sampled from the maps, already in the world frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelAttrs {
    pub rotation: UnitQuaternion<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub sh: Vec<Vector3<f64>>,
}

/// Bilinearly samples the maps at a sub-pixel position, using only valid
/// neighbours with renormalized weights. Returns `None` when no valid
/// neighbour carries weight.
pub fn sample_model_attrs(
    maps: &AttributeMaps,
    pixel: &Vector2<f64>,
    cam_rotation: &UnitQuaternion<f64>,
    depth: f64,
    focal: f64,
    sh_degree: usize,
) -> Option<ModelAttrs> {
    let (x0, y0) = (pixel.x.floor(), pixel.y.floor());
    let (fx, fy) = (pixel.x - x0, pixel.y - y0);
    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
    for (dx, dy, w) in [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        let (x, y) = (x0 as i64 + dx, y0 as i64 + dy);
        if w <= 0.0 || x < 0 || y < 0 || x >= maps.width as i64 || y >= maps.height as i64 {
            continue;
        }
        let idx = y as usize * maps.width + x as usize;
        if maps.valid[idx] {
            taps.push((idx, w));
        }
    }
    let total: f64 = taps.iter().map(|t| t.1).sum();
    if taps.is_empty() || total <= 0.0 {
        return None;
    }

    let to_vec = |q: [f32; 4]| nalgebra::Vector4::new(q[0] as f64, q[1] as f64, q[2] as f64, q[3] as f64);
    let anchor = taps
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|t| to_vec(maps.rotation[t.0]))
        .expect("non-empty");
    let mut q = nalgebra::Vector4::zeros();
    let mut shape = Vector3::zeros();
    let mut opacity = 0.0;
    let stride = maps.sh_coeffs * 3;
    let mut sh_flat = vec![0.0; stride];
    for &(idx, w) in &taps {
        let w = w / total;
        let mut qi = to_vec(maps.rotation[idx]);
        if qi.dot(&anchor) < 0.0 {
            qi = -qi;
        }
        q += qi * w;
        let a = maps.scale_shape[idx];
        shape += Vector3::new(a[0] as f64, a[1] as f64, a[2] as f64) * w;
        opacity += maps.opacity_logit[idx] as f64 * w;
        for (acc, v) in sh_flat.iter_mut().zip(maps.pixel_sh(idx)) {
            *acc += *v as f64 * w;
        }
    }
    let q_cam = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    let geo_mean = (shape.x * shape.y * shape.z).cbrt();
    let scale = depth / focal;
    let log_scale = shape.map(|a| (scale * a / geo_mean).ln());

    let mut sh = vec![Vector3::zeros(); sh_coeff_count(sh_degree)];
    for (k, coeff) in sh.iter_mut().enumerate().take(maps.sh_coeffs) {
        *coeff = Vector3::new(sh_flat[3 * k], sh_flat[3 * k + 1], sh_flat[3 * k + 2]);
    }
    Some(ModelAttrs {
        rotation: cam_rotation * q_cam,
        log_scale,
        opacity_logit: opacity,
        sh,
    })
}

pub fn compute_beta(n_pca_only: usize, n_total: usize, beta_min: f64) -> f64 {
    assert!(n_total >= 1 && n_pca_only <= n_total);
    (n_pca_only as f64 / n_total as f64).clamp(beta_min, 1.0)
}

/// Builds one Gaussian from the first applicable branch.
pub fn cascade_init(
    point: &PriorPoint,
    model: Option<&ModelAttrs>,
    beta: f64,
    depth: f64,
    focal: f64,
    cfg: &InitConfig,
) -> Gaussian {
    let mut sh = vec![Vector3::zeros(); sh_coeff_count(cfg.sh_degree)];
    let (rotation, log_scale, opacity_logit, source) = match model {
        Some(m) => {
            sh.clone_from(&m.sh);
            (m.rotation, m.log_scale, m.opacity_logit, InitSource::Model)
        }
        None if point.prior.reliable => (
            point.prior.rotation,
            point.prior.log_scale.add_scalar(beta.ln()),
            logit(cfg.opacity),
            InitSource::Pca,
        ),
        None => (
            UnitQuaternion::identity(),
            Vector3::repeat((depth / focal).ln()),
            logit(cfg.opacity),
            InitSource::Heuristic,
        ),
    };
    sh[0] = color_to_dc(&point.point.color);
    Gaussian {
        mean: point.point.position,
        log_scale,
        rotation,
        opacity_logit,
        sh,
        segment_id: 0,
        frozen: false,
        source,
        id: 0,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub model: usize,
    pub pca: usize,
    pub heuristic: usize,
}

impl SourceCounts {
    pub fn total(&self) -> usize {
        self.model + self.pca + self.heuristic
    }

    pub fn add(&mut self, source: InitSource) {
        match source {
            InitSource::Model => self.model += 1,
            InitSource::Pca => self.pca += 1,
            InitSource::Heuristic => self.heuristic += 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Segment {
    pub id: u32,
    pub loopframe_index: usize,
    pub gaussians: Vec<Gaussian>,
    pub anchor_pose: Pose,
    pub correction: Pose,
    pub counts: SourceCounts,
    pub beta: f64,
    /// Frame indices of the keyframes aggregated into this segment.
    pub keyframes: Vec<usize>,
}

/// Turns the keyframes accumulated since `prev_lf` into a segment anchored
/// at `cur_lf`. `maps` holds the attribute maps of `(prev_lf, cur_lf)`.
pub fn close_segment(
    id: u32,
    keyframes: &[&Frame],
    prev_lf: &Frame,
    cur_lf: &Frame,
    maps: Option<&(AttributeMaps, AttributeMaps)>,
    cam: &Camera,
    cfg: &InitConfig,
) -> Result<Segment, InitError> {
    if keyframes.is_empty() {
        return Err(InitError::EmptySegment);
    }
    let points: Vec<&PriorPoint> = keyframes.iter().flat_map(|k| k.points.iter()).collect();
    let focal = cfg.focal_length(cam);
    let hits: Vec<Option<ViewHit>> = points
        .iter()
        .map(|p| pick_view(&p.point.position, cam, &prev_lf.pose, &cur_lf.pose))
        .collect();
    let winners = resolve_pixel_conflicts(&hits, cam);

    let model: Vec<Option<ModelAttrs>> = hits
        .iter()
        .zip(&winners)
        .map(|(hit, &won)| {
            let (h, (prev_maps, cur_maps)) = (hit.as_ref()?, maps?);
            if !won {
                return None;
            }
            let (m, pose) = match h.view {
                View::Prev => (prev_maps, &prev_lf.pose),
                View::Cur => (cur_maps, &cur_lf.pose),
            };
            sample_model_attrs(m, &h.pixel, &pose.rotation, h.depth, focal, cfg.sh_degree)
        })
        .collect();

    let pca_only = points
        .iter()
        .zip(&model)
        .filter(|(p, m)| m.is_none() && p.prior.reliable)
        .count();
    let beta = if points.is_empty() {
        1.0
    } else {
        compute_beta(pca_only, points.len(), cfg.beta_min)
    };

    let mut counts = SourceCounts::default();
    let gaussians = points
        .iter()
        .zip(hits.iter().zip(&model))
        .map(|(p, (hit, m))| {
            let depth = match hit {
                Some(h) => h.depth,
                None => (p.point.position - cur_lf.pose.translation).norm().max(1e-6),
            };
            let mut g = cascade_init(p, m.as_ref(), beta, depth, focal, cfg);
            g.segment_id = id;
            counts.add(g.source);
            g
        })
        .collect();

    Ok(Segment {
        id,
        loopframe_index: cur_lf.index,
        gaussians,
        anchor_pose: cur_lf.pose,
        correction: Pose::identity(),
        counts,
        beta,
        keyframes: keyframes.iter().map(|k| k.index).collect(),
    })
}

/// What the initializer made of one incoming frame.
#[derive(Default)]
pub struct InitOutput {
    pub keyframe: Option<Arc<Frame>>,
    pub segment: Option<Segment>,
}

/// Streaming state of the init worker: decides keyframes and loopframes and
/// closes segments as loopframes arrive.
pub struct Initializer {
    pub cfg: InitConfig,
    pub camera: Camera,
    provider: Box<dyn AttributeProvider>,
    pending: Vec<Arc<Frame>>,
    last_loopframe: Option<Arc<Frame>>,
    last_keyframe: Option<Arc<Frame>>,
    next_segment: u32,
}

impl Initializer {
    pub fn new(cfg: InitConfig, camera: Camera, provider: Box<dyn AttributeProvider>) -> Self {
        Self {
            cfg,
            camera,
            provider,
            pending: Vec::new(),
            last_loopframe: None,
            last_keyframe: None,
            next_segment: 0,
        }
    }

    pub fn segments_closed(&self) -> u32 {
        self.next_segment
    }

    pub fn push(&mut self, frame: Frame) -> Result<InitOutput, InitError> {
        let is_loopframe = match &self.last_loopframe {
            None => true,
            Some(lf) => select_loopframe(
                &frame.pose,
                &lf.pose,
                self.cfg.loop_translation,
                self.cfg.loop_rotation_deg.to_radians(),
            ),
        };
        if !is_loopframe && !select_keyframe(frame.index, self.cfg.keyframe_gap) {
            return Ok(InitOutput::default());
        }
        let frame = Arc::new(frame);
        self.pending.push(frame.clone());
        self.last_keyframe = Some(frame.clone());
        let segment = if is_loopframe { Some(self.close(frame.clone())?) } else { None };
        Ok(InitOutput {
            keyframe: Some(frame),
            segment,
        })
    }

    /// Closes the trailing segment at the last keyframe, if any keyframes
    /// are pending.
    pub fn finish(&mut self) -> Result<Option<Segment>, InitError> {
        if self.pending.is_empty() {
            return Ok(None);
        }
        let last = self.last_keyframe.clone().expect("pending implies a keyframe");
        self.close(last).map(Some)
    }

    fn close(&mut self, cur: Arc<Frame>) -> Result<Segment, InitError> {
        let prev = self.last_loopframe.clone().unwrap_or_else(|| cur.clone());
        let maps = self.provider.predict((prev.index, &prev.rgb), (cur.index, &cur.rgb))?;
        let keyframes: Vec<&Frame> = self.pending.iter().map(|f| f.as_ref()).collect();
        let seg = close_segment(
            self.next_segment,
            &keyframes,
            &prev,
            &cur,
            maps.as_ref(),
            &self.camera,
            &self.cfg,
        )?;
        self.next_segment += 1;
        self.pending.clear();
        self.last_loopframe = Some(cur);
        Ok(seg)
    }
}
