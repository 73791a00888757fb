//! The global Gaussian map and its optimizer: duplicate-aware insertion,
//! recent/history view sampling, segment freezing, sparse Adam updates and
//! bounded opacity pruning.

pub mod checkpoint;

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::UnitQuaternion;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gauss_init::{Segment, SourceCounts};
use crate::gaussian::Gaussian;
use crate::geom::{Camera, Pose};
use crate::image::{GrayImage, RgbImage};
use crate::spatial::SpatialHash;
use crate::splat_render::{
    backward, interior_mask, render, GaussianGrad, LossTerms, LossWeights, RenderConfig, RenderError,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub mean: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            mean: 1.6e-4,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            sh: 2.5e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub dedup_radius: f64,
    pub recent_window: usize,
    pub recent_ratio: f64,
    pub active_segments: usize,
    pub prune_opacity: f64,
    pub prune_max_ratio: f64,
    pub prune_every: usize,
    pub views_per_step: usize,
    pub scene_extent: f64,
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub mask_alpha: f64,
    pub erode_radius: usize,
    pub weights: LossWeights,
    pub render: RenderConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            dedup_radius: 0.05,
            recent_window: 10,
            recent_ratio: 0.7,
            active_segments: 3,
            prune_opacity: 0.05,
            prune_max_ratio: 0.1,
            prune_every: 50,
            views_per_step: 1,
            scene_extent: 1.0,
            lr: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-15,
            mask_alpha: 0.5,
            erode_radius: 2,
            weights: LossWeights::default(),
            render: RenderConfig::default(),
        }
    }
}

/// A committed keyframe used as supervision.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub frame_index: usize,
    pub segment_id: u32,
    /// World-from-camera, corrected along with its segment.
    pub pose: Pose,
    pub rgb: Arc<RgbImage>,
    pub depth: Arc<GrayImage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentMeta {
    pub id: u32,
    pub loopframe_index: usize,
    pub anchor_pose: Pose,
    pub correction: Pose,
    pub keyframes: Vec<usize>,
    pub counts: SourceCounts,
    pub inserted: usize,
}

/// All Gaussians, stored contiguously and ordered by segment.
#[derive(Clone, Debug, Default)]
pub struct GlobalMap {
    pub segments: Vec<SegmentMeta>,
    pub gaussians: Vec<Gaussian>,
    pub views: Vec<TrainView>,
    index: Option<SpatialHash>,
    index_cell: f64,
    next_id: u64,
}

impl GlobalMap {
    pub fn new(dedup_radius: f64) -> Self {
        Self {
            index_cell: dedup_radius,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    fn index(&mut self) -> &mut SpatialHash {
        let cell = self.index_cell;
        let gs = &self.gaussians;
        self.index
            .get_or_insert_with(|| SpatialHash::build(cell, gs.iter().map(|g| g.mean)))
    }

    /// Drops the spatial index; it is rebuilt on next use.
    pub fn invalidate_index(&mut self) {
        self.index = None;
    }

    pub fn segment(&self, id: u32) -> Option<&SegmentMeta> {
        self.segments.iter().find(|s| s.id == id)
    }

    /// Positions in `gaussians` belonging to segment `id`.
    pub fn segment_range(&self, id: u32) -> std::ops::Range<usize> {
        let lo = self.gaussians.partition_point(|g| g.segment_id < id);
        let hi = self.gaussians.partition_point(|g| g.segment_id <= id);
        lo..hi
    }

    /// Appends the segment's Gaussians that have no existing map Gaussian
    /// within `dedup_radius`. Returns the number inserted.
    pub fn insert_segment(&mut self, seg: &Segment, dedup_radius: f64) -> usize {
        if let Some(last) = self.segments.last() {
            assert!(seg.id > last.id, "segment ids must increase");
        }
        let keep: Vec<bool> = {
            let index = self.index();
            seg.gaussians
                .iter()
                .map(|g| !index.any_within(&g.mean, dedup_radius))
                .collect()
        };
        let mut inserted = 0;
        for (g, k) in seg.gaussians.iter().zip(keep) {
            if !k {
                continue;
            }
            let mut g = g.clone();
            g.segment_id = seg.id;
            g.id = self.next_id;
            self.next_id += 1;
            self.index().insert(g.mean);
            self.gaussians.push(g);
            inserted += 1;
        }
        self.segments.push(SegmentMeta {
            id: seg.id,
            loopframe_index: seg.loopframe_index,
            anchor_pose: seg.anchor_pose,
            correction: seg.correction,
            keyframes: seg.keyframes.clone(),
            counts: seg.counts,
            inserted,
        });
        inserted
    }

    pub fn add_view(&mut self, view: TrainView) {
        self.views.push(view);
    }

    /// Freezes every Gaussian outside the `k` most recent segments.
    pub fn apply_freeze_policy(&mut self, k: usize) {
        assert!(k >= 1);
        let cutoff = if self.segments.len() > k {
            Some(self.segments[self.segments.len() - k].id)
        } else {
            None
        };
        for g in &mut self.gaussians {
            g.frozen = cutoff.is_some_and(|c| g.segment_id < c);
        }
    }

    /// Removes up to `⌊max_ratio · unfrozen⌋` unfrozen Gaussians whose
    /// opacity is below `threshold`, lowest opacity first, ties by position.
    pub fn prune(&mut self, threshold: f64, max_ratio: f64, state: &mut AdamState) -> usize {
        let unfrozen = self.gaussians.iter().filter(|g| !g.frozen).count();
        let budget = (max_ratio * unfrozen as f64).floor() as usize;
        let mut cands: Vec<(f64, usize)> = self
            .gaussians
            .iter()
            .enumerate()
            .filter(|(_, g)| !g.frozen && g.opacity() < threshold)
            .map(|(i, g)| (g.opacity(), i))
            .collect();
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cands.truncate(budget);
        if cands.is_empty() {
            return 0;
        }
        let mut drop = vec![false; self.gaussians.len()];
        for &(_, i) in &cands {
            drop[i] = true;
            state.moments.remove(&self.gaussians[i].id);
        }
        let mut k = 0;
        self.gaussians.retain(|_| {
            k += 1;
            !drop[k - 1]
        });
        self.invalidate_index();
        cands.len()
    }

    /// Applies a rigid correction to every Gaussian and view of one segment.
    pub fn correct_segment(&mut self, id: u32, delta: &Pose) {
        let range = self.segment_range(id);
        for g in &mut self.gaussians[range] {
            g.mean = delta.transform_point(&g.mean);
            g.rotation = delta.rotation * g.rotation;
        }
        for v in self.views.iter_mut().filter(|v| v.segment_id == id) {
            v.pose = delta.compose(&v.pose);
        }
        if let Some(s) = self.segments.iter_mut().find(|s| s.id == id) {
            s.correction = delta.compose(&s.correction);
        }
        self.invalidate_index();
    }
}

/// Draws `count` view indices: from the last `recent` views with
/// probability `ratio`, otherwise from the older ones.
pub fn sample_views(n_views: usize, recent: usize, ratio: f64, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(n_views >= 1, "no committed views");
    let recent = recent.clamp(1, n_views);
    let history = n_views - recent;
    (0..count)
        .map(|_| {
            let from_recent = history == 0 || rng.random::<f64>() < ratio;
            if from_recent {
                history + rng.random_range(0..recent)
            } else {
                rng.random_range(0..history)
            }
        })
        .collect()
}

const PARAMS_FIXED: usize = 11;

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u32,
}

/// First and second moment estimates, keyed by Gaussian id and allocated
/// on first update.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    moments: HashMap<u64, Moments>,
    pub steps: u64,
}

impl AdamState {
    pub fn allocated(&self) -> usize {
        self.moments.len()
    }

    pub fn has(&self, id: u64) -> bool {
        self.moments.contains_key(&id)
    }
}

fn flatten_grad(g: &GaussianGrad) -> Vec<f64> {
    let mut v = Vec::with_capacity(PARAMS_FIXED + 3 * g.sh.len());
    v.extend_from_slice(g.mean.as_slice());
    v.extend_from_slice(g.log_scale.as_slice());
    v.extend_from_slice(g.rotation.as_slice());
    v.push(g.opacity_logit);
    for c in &g.sh {
        v.extend_from_slice(c.as_slice());
    }
    v
}

fn lr_for(p: usize, cfg: &OptimConfig) -> f64 {
    match p {
        0..=2 => cfg.lr.mean * cfg.scene_extent,
        3..=5 => cfg.lr.log_scale,
        6..=9 => cfg.lr.rotation,
        10 => cfg.lr.opacity,
        _ => cfg.lr.sh,
    }
}

fn adam_update(g: &mut Gaussian, grad: &GaussianGrad, state: &mut AdamState, cfg: &OptimConfig) {
    let flat = flatten_grad(grad);
    let mom = state.moments.entry(g.id).or_insert_with(|| Moments {
        m: vec![0.0; flat.len()],
        v: vec![0.0; flat.len()],
        step: 0,
    });
    mom.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(mom.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(mom.step as i32);
    let q = g.rotation.quaternion();
    let mut quat = [q.w, q.i, q.j, q.k];
    for (p, &gp) in flat.iter().enumerate() {
        mom.m[p] = cfg.beta1 * mom.m[p] + (1.0 - cfg.beta1) * gp;
        mom.v[p] = cfg.beta2 * mom.v[p] + (1.0 - cfg.beta2) * gp * gp;
        let step = lr_for(p, cfg) * (mom.m[p] / bc1) / ((mom.v[p] / bc2).sqrt() + cfg.adam_eps);
        match p {
            0..=2 => g.mean[p] -= step,
            3..=5 => g.log_scale[p - 3] -= step,
            6..=9 => quat[p - 6] -= step,
            10 => g.opacity_logit -= step,
            _ => {
                let k = p - PARAMS_FIXED;
                g.sh[k / 3][k % 3] -= step;
            }
        }
    }
    g.rotation = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(quat[0], quat[1], quat[2], quat[3]));
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Mean over the supervised views of the batch.
    pub loss: LossTerms,
    pub views_used: usize,
    pub supervised_pixels: usize,
    pub updated: usize,
}

/// One optimization step over a batch of view indices.
pub fn optimize_step(
    map: &mut GlobalMap,
    batch: &[usize],
    camera: &Camera,
    cfg: &OptimConfig,
    state: &mut AdamState,
) -> Result<StepRecord, RenderError> {
    let mut record = StepRecord::default();
    let mut accum: Vec<Option<GaussianGrad>> = vec![None; map.gaussians.len()];
    for &vi in batch {
        let view = &map.views[vi];
        let out = render(&map.gaussians, camera, &view.pose, &cfg.render)?;
        let mask = interior_mask(&out.acc_alpha, cfg.mask_alpha, cfg.erode_radius);
        if mask.count() == 0 {
            continue;
        }
        let (terms, grads) = backward(
            &map.gaussians,
            camera,
            &view.pose,
            &out,
            &view.rgb,
            &view.depth,
            &mask,
            &cfg.weights,
            &cfg.render,
        )?;
        record.views_used += 1;
        record.supervised_pixels += mask.count();
        record.loss.total += terms.total;
        record.loss.rgb += terms.rgb;
        record.loss.ssim += terms.ssim;
        record.loss.depth += terms.depth;
        for (slot, g) in accum.iter_mut().zip(grads) {
            if g.is_zero() {
                continue;
            }
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => *slot = Some(g),
            }
        }
    }
    if record.views_used > 0 {
        let n = record.views_used as f64;
        record.loss.total /= n;
        record.loss.rgb /= n;
        record.loss.ssim /= n;
        record.loss.depth /= n;
    }
    for (g, grad) in map.gaussians.iter_mut().zip(&accum) {
        if let Some(grad) = grad {
            if !g.frozen {
                adam_update(g, grad, state, cfg);
                record.updated += 1;
            }
        }
    }
    if record.updated > 0 {
        map.invalidate_index();
    }
    state.steps += 1;
    Ok(record)
}
