//! The stream: a producer turning frames into segments, an optimizer owning
//! the global map, and a loop worker owning the pose graph.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, RecvTimeoutError, TryRecvError, TrySendError};
use nalgebra::{Matrix6, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Mode, ProviderKind, RunConfig};
use super::dataset::{points_to_world, Dataset};
use super::eval::{evaluate_views, EvalSummary};
use super::PipelineError;
use crate::gauss_init::{
    AttributeProvider, DirProvider, Frame, Initializer, NoProvider, PriorPoint, Segment, SourceCounts, StubProvider,
};
use crate::gaussian::Gaussian;
use crate::geom::{quat_to_array, umeyama_align, write_trajectory, Camera, GeomError, Pose, StampedPose};
use crate::loop_graph::{
    accept_loop, extract_target_set, find_candidates, gaussian_gicp, loop_measurement, neighbor_keyframes,
    propagate_correction, EdgeKind, LoopConfig, PoseGraph, SolverConfig,
};
use crate::map_opt::checkpoint::write_checkpoint;
use crate::map_opt::{optimize_step, sample_views, AdamState, GlobalMap, OptimConfig, StepRecord, TrainView};
use crate::splat_render::LossTerms;
use crate::voxel_pca::{GeomPrior, VoxelMap};

/// A closed segment with the keyframe views it was built from.
pub struct SegmentMsg {
    pub segment: Segment,
    pub views: Vec<TrainView>,
    /// Drift version the producer used for this segment's loopframe.
    pub drift_version: usize,
}

/// What the loop worker learns about a freshly inserted segment.
pub struct LoopMsg {
    pub segment_id: u32,
    pub loopframe_index: usize,
    /// Anchor pose as placed in the map.
    pub anchor: Pose,
    /// Drift version of the map when the message was sent.
    pub version: usize,
    pub snapshot: Option<Arc<MapSnapshot>>,
}

pub struct MapSnapshot {
    pub gaussians: Vec<Gaussian>,
    /// Frame index and pose of every training view, in insertion order.
    pub views: Vec<(usize, Pose)>,
}

/// A pose-graph solution to apply to the map.
pub struct Correction {
    pub old: Vec<Pose>,
    pub new: Vec<Pose>,
    /// Motion of the newest node; applied to segments the graph has not
    /// seen yet and to the producer's drift estimate.
    pub drift_delta: Pose,
}

fn provider_for(cfg: &RunConfig) -> Result<Box<dyn AttributeProvider>, PipelineError> {
    if cfg.pipeline.heuristic_only {
        return Ok(Box::new(NoProvider));
    }
    Ok(match cfg.pipeline.provider {
        ProviderKind::Stub => Box::new(StubProvider {
            contrast_threshold: cfg.init.contrast_threshold,
            sh_degree: cfg.init.sh_degree,
        }),
        ProviderKind::Dir => Box::new(DirProvider {
            root: cfg
                .pipeline
                .provider_dir
                .as_ref()
                .ok_or_else(|| PipelineError::Config("provider dir requires pipeline.provider_dir".into()))?
                .into(),
        }),
        ProviderKind::None => Box::new(NoProvider),
    })
}

/// Frame bookkeeping shared by the producer and the final report.
#[derive(Clone, Debug, Default)]
pub struct FrameLedger {
    /// Segment that owns each processed frame.
    pub segment: Vec<Option<u32>>,
    /// Drift version each segment was built under.
    pub segment_version: Vec<usize>,
    pub held_out: Vec<usize>,
}

pub(crate) struct Producer {
    dataset: Arc<Dataset>,
    voxel: VoxelMap,
    init: Initializer,
    holdout_every: usize,
    heuristic_only: bool,
    pending_views: Vec<TrainView>,
    pending_frames: Vec<usize>,
    pub ledger: FrameLedger,
    pub busy: Duration,
}

impl Producer {
    pub fn new(dataset: Arc<Dataset>, cfg: &RunConfig) -> Result<Self, PipelineError> {
        let n = dataset.len();
        let camera = *dataset.camera();
        Ok(Self {
            voxel: VoxelMap::new(cfg.voxel.clone()),
            init: Initializer::new(cfg.init.clone(), camera, provider_for(cfg)?),
            dataset,
            holdout_every: cfg.pipeline.holdout_every,
            heuristic_only: cfg.pipeline.heuristic_only,
            pending_views: Vec::new(),
            pending_frames: Vec::new(),
            ledger: FrameLedger {
                segment: vec![None; n],
                ..Default::default()
            },
            busy: Duration::ZERO,
        })
    }

    fn is_holdout(&self, k: usize) -> bool {
        self.holdout_every > 0 && k % self.holdout_every == self.holdout_every / 2
    }

    fn close(&mut self, segment: Segment, version: usize) -> SegmentMsg {
        let id = segment.id;
        for k in self.pending_frames.drain(..) {
            self.ledger.segment[k] = Some(id);
        }
        self.ledger.segment_version.push(version);
        let mut views = std::mem::take(&mut self.pending_views);
        for v in &mut views {
            v.segment_id = id;
        }
        SegmentMsg {
            segment,
            views,
            drift_version: version,
        }
    }

    /// Ingests frame `k` with the odometry corrected by `drift`.
    pub fn process(&mut self, k: usize, drift: &Pose, version: usize) -> Result<Option<SegmentMsg>, PipelineError> {
        let t0 = Instant::now();
        self.pending_frames.push(k);
        if self.is_holdout(k) {
            self.ledger.held_out.push(k);
            self.busy += t0.elapsed();
            return Ok(None);
        }
        let pose = drift.compose(&self.dataset.odometry[k].pose);
        let raw = self.dataset.load_frame(k)?;
        let world = points_to_world(&raw.points, &pose);
        self.voxel.extend(&world);
        let priors = if self.heuristic_only {
            vec![GeomPrior::unreliable(); world.len()]
        } else {
            self.voxel.annotate(&world)
        };
        let frame = Frame {
            index: k,
            timestamp: raw.timestamp,
            pose,
            rgb: raw.rgb,
            depth: raw.depth,
            points: world
                .into_iter()
                .zip(priors)
                .map(|(point, prior)| PriorPoint { point, prior })
                .collect(),
        };
        let out = self
            .init
            .push(frame)
            .map_err(|e| PipelineError::module("gauss_init", k, e))?;
        if let Some(kf) = &out.keyframe {
            self.pending_views.push(TrainView {
                frame_index: k,
                segment_id: 0,
                pose: kf.pose,
                rgb: Arc::new(kf.rgb.clone()),
                depth: Arc::new(kf.depth.clone()),
            });
        }
        let msg = out.segment.map(|s| self.close(s, version));
        self.busy += t0.elapsed();
        Ok(msg)
    }

    /// Closes the trailing segment once the stream ends.
    pub fn finish(&mut self, version: usize) -> Result<Option<SegmentMsg>, PipelineError> {
        let t0 = Instant::now();
        let last = self.dataset.len().saturating_sub(1);
        let seg = self
            .init
            .finish()
            .map_err(|e| PipelineError::module("gauss_init", last, e))?;
        let msg = match seg {
            Some(s) => Some(self.close(s, version)),
            None => {
                if let Some(id) = self.init.segments_closed().checked_sub(1) {
                    for k in self.pending_frames.drain(..) {
                        self.ledger.segment[k] = Some(id);
                    }
                }
                None
            }
        };
        self.busy += t0.elapsed();
        Ok(msg)
    }
}

pub(crate) struct Optimizer {
    pub map: GlobalMap,
    cfg: OptimConfig,
    camera: Camera,
    adam: AdamState,
    rng: ChaCha8Rng,
    snapshots: bool,
    pub steps: usize,
    /// Accumulated drift correction, one entry per version.
    pub drift: Vec<Pose>,
    pub sampled_frames: BTreeSet<usize>,
    pub last_step: Option<StepRecord>,
    pub pruned: usize,
    pub busy: Duration,
}

impl Optimizer {
    pub fn new(cfg: &RunConfig, camera: Camera, scene_extent: f64) -> Self {
        let mut optim = cfg.optim.clone();
        optim.scene_extent = scene_extent;
        Self {
            map: GlobalMap::new(optim.dedup_radius),
            cfg: optim,
            camera,
            adam: AdamState::default(),
            rng: ChaCha8Rng::seed_from_u64(cfg.pipeline.seed),
            snapshots: cfg.loop_closure.enabled,
            steps: 0,
            drift: vec![Pose::identity()],
            sampled_frames: BTreeSet::new(),
            last_step: None,
            pruned: 0,
            busy: Duration::ZERO,
        }
    }

    pub fn version(&self) -> usize {
        self.drift.len() - 1
    }

    pub fn current_drift(&self) -> Pose {
        *self.drift.last().expect("drift history starts with identity")
    }

    pub fn insert(&mut self, msg: SegmentMsg) -> LoopMsg {
        let t0 = Instant::now();
        let SegmentMsg {
            mut segment,
            mut views,
            drift_version,
        } = msg;
        if drift_version < self.version() {
            let adj = self.current_drift().compose(&self.drift[drift_version].inverse());
            for g in &mut segment.gaussians {
                g.mean = adj.transform_point(&g.mean);
                g.rotation = adj.rotation * g.rotation;
            }
            for v in &mut views {
                v.pose = adj.compose(&v.pose);
            }
            segment.correction = adj;
        }
        let id = segment.id;
        self.map.insert_segment(&segment, self.cfg.dedup_radius);
        for v in views {
            self.map.add_view(v);
        }
        self.map.apply_freeze_policy(self.cfg.active_segments);
        let meta = self.map.segment(id).expect("segment just inserted");
        let anchor = meta.correction.compose(&meta.anchor_pose);
        let snapshot = self.snapshots.then(|| {
            Arc::new(MapSnapshot {
                gaussians: self.map.gaussians.clone(),
                views: self.map.views.iter().map(|v| (v.frame_index, v.pose)).collect(),
            })
        });
        self.busy += t0.elapsed();
        LoopMsg {
            segment_id: id,
            loopframe_index: segment.loopframe_index,
            anchor,
            version: self.version(),
            snapshot,
        }
    }

    pub fn apply(&mut self, c: Correction) {
        let t0 = Instant::now();
        propagate_correction(&mut self.map, &c.old, &c.new);
        let late: Vec<u32> = self
            .map
            .segments
            .iter()
            .map(|s| s.id)
            .filter(|&id| id as usize >= c.old.len())
            .collect();
        for id in late {
            self.map.correct_segment(id, &c.drift_delta);
        }
        let next = c.drift_delta.compose(&self.current_drift());
        self.drift.push(next);
        self.busy += t0.elapsed();
    }

    pub fn step(&mut self, frame: usize) -> Result<(), PipelineError> {
        let t0 = Instant::now();
        self.steps += 1;
        if !self.map.views.is_empty() {
            let batch = sample_views(
                self.map.views.len(),
                self.cfg.recent_window,
                self.cfg.recent_ratio,
                self.cfg.views_per_step,
                &mut self.rng,
            );
            for &b in &batch {
                self.sampled_frames.insert(self.map.views[b].frame_index);
            }
            let rec = optimize_step(&mut self.map, &batch, &self.camera, &self.cfg, &mut self.adam)
                .map_err(|e| PipelineError::module("map_opt", frame, e))?;
            self.last_step = Some(rec);
        }
        if self.cfg.prune_every > 0 && self.steps.is_multiple_of(self.cfg.prune_every) {
            self.pruned += self
                .map
                .prune(self.cfg.prune_opacity, self.cfg.prune_max_ratio, &mut self.adam);
        }
        self.busy += t0.elapsed();
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopAttempt {
    pub current_segment: usize,
    pub historical_segment: usize,
    pub current_frame: usize,
    pub historical_frame: usize,
    pub source_size: usize,
    pub target_size: usize,
    pub accepted: bool,
    /// Registration outcome or the reason it was not attempted.
    pub outcome: String,
    pub residual: Option<f64>,
    pub correspondences: Option<usize>,
    pub iterations: Option<usize>,
    /// Registration `tx ty tz qw qx qy qz`.
    pub transform: Option<[f64; 7]>,
    /// Relative-pose measurement added to the graph, `tx ty tz qw qx qy qz`.
    pub measurement: Option<[f64; 7]>,
    pub graph_cost_before: Option<f64>,
    pub graph_cost_after: Option<f64>,
}

pub fn pose_array(p: &Pose) -> [f64; 7] {
    let q = quat_to_array(&p.rotation);
    [p.translation.x, p.translation.y, p.translation.z, q[0], q[1], q[2], q[3]]
}

pub fn pose_from_array(a: &[f64; 7]) -> Pose {
    Pose::new(
        crate::geom::quat_wxyz(a[3], a[4], a[5], a[6]),
        Vector3::new(a[0], a[1], a[2]),
    )
}

pub(crate) struct LoopWorker {
    cfg: LoopConfig,
    camera: Camera,
    pub graph: PoseGraph,
    version: usize,
    deltas: Vec<Pose>,
    pub loopframes: Vec<usize>,
    pub attempts: Vec<LoopAttempt>,
    pub busy: Duration,
}

impl LoopWorker {
    pub fn new(cfg: LoopConfig, camera: Camera) -> Self {
        Self {
            cfg,
            camera,
            graph: PoseGraph::default(),
            version: 0,
            deltas: Vec::new(),
            loopframes: Vec::new(),
            attempts: Vec::new(),
            busy: Duration::ZERO,
        }
    }

    pub fn handle(&mut self, msg: LoopMsg) -> Result<Option<Correction>, PipelineError> {
        let t0 = Instant::now();
        let out = self.handle_inner(msg);
        self.busy += t0.elapsed();
        out
    }

    fn handle_inner(&mut self, msg: LoopMsg) -> Result<Option<Correction>, PipelineError> {
        let mut anchor = msg.anchor;
        for d in &self.deltas[msg.version.min(self.deltas.len())..] {
            anchor = d.compose(&anchor);
        }
        let i = self.graph.nodes.len();
        if msg.segment_id as usize != i {
            return Err(PipelineError::module(
                "loop_graph",
                msg.loopframe_index,
                format!("segment {} arrived while expecting {i}", msg.segment_id),
            ));
        }
        self.graph.nodes.push(anchor);
        if i > 0 {
            let z = self.graph.nodes[i - 1].inverse().compose(&anchor);
            self.graph.add_edge(
                i - 1,
                i,
                z,
                Matrix6::identity() * self.cfg.odometry_information,
                EdgeKind::Odometry,
            );
        }
        self.loopframes.push(msg.loopframe_index);
        let Some(snap) = msg.snapshot else {
            return Ok(None);
        };
        if !self.cfg.enabled || msg.version != self.version {
            return Ok(None);
        }
        let mut candidates = find_candidates(&self.graph.nodes, i, self.cfg.search_radius, self.cfg.min_gap);
        if self.cfg.max_candidates > 0 {
            candidates.truncate(self.cfg.max_candidates);
        }
        let src: Vec<Gaussian> = snap
            .gaussians
            .iter()
            .filter(|g| g.segment_id as usize == i)
            .cloned()
            .collect();
        let view_frames: Vec<usize> = snap.views.iter().map(|v| v.0).collect();
        let excluded: Vec<u32> = ((i + 1).saturating_sub(self.cfg.min_gap)..=i).map(|s| s as u32).collect();
        for cand in candidates {
            let j = cand.historical;
            let mut attempt = LoopAttempt {
                current_segment: i,
                historical_segment: j,
                current_frame: self.loopframes[i],
                historical_frame: self.loopframes[j],
                source_size: src.len(),
                target_size: 0,
                accepted: false,
                outcome: String::new(),
                residual: None,
                correspondences: None,
                iterations: None,
                transform: None,
                measurement: None,
                graph_cost_before: None,
                graph_cost_after: None,
            };
            let views: Vec<Pose> =
                neighbor_keyframes(&view_frames, self.loopframes[j], self.cfg.neighbor_keyframes)
                    .into_iter()
                    .map(|p| snap.views[p].1)
                    .collect();
            let tar: Vec<Gaussian> = match extract_target_set(
                &snap.gaussians,
                &views,
                &self.camera,
                self.cfg.max_target_distance,
                &excluded,
            ) {
                Ok(idx) => idx.into_iter().map(|t| snap.gaussians[t].clone()).collect(),
                Err(e) => {
                    attempt.outcome = e.to_string();
                    self.attempts.push(attempt);
                    continue;
                }
            };
            attempt.target_size = tar.len();
            if src.len() < self.cfg.min_correspondences || tar.len() < self.cfg.min_correspondences {
                attempt.outcome = "too few Gaussians to register".into();
                self.attempts.push(attempt);
                continue;
            }
            let result = match gaussian_gicp(&src, &tar, &Pose::identity(), &self.cfg) {
                Ok(r) => r,
                Err(e) => {
                    attempt.outcome = e.to_string();
                    self.attempts.push(attempt);
                    continue;
                }
            };
            attempt.residual = Some(result.residual);
            attempt.correspondences = Some(result.correspondences);
            attempt.iterations = Some(result.iterations);
            attempt.transform = Some(pose_array(&result.transform));
            let overlap = result.correspondences as f64 / src.len() as f64;
            if !accept_loop(&result, self.cfg.max_residual, self.cfg.min_correspondences) {
                attempt.outcome = "rejected".into();
                self.attempts.push(attempt);
                continue;
            }
            if overlap < self.cfg.min_overlap {
                attempt.outcome = format!("overlap {overlap:.2} below {}", self.cfg.min_overlap);
                self.attempts.push(attempt);
                continue;
            }
            let z = loop_measurement(&self.graph.nodes[j], &self.graph.nodes[i], &result.transform);
            let mut graph = self.graph.clone();
            graph.add_edge(
                j,
                i,
                z,
                Matrix6::identity() * self.cfg.loop_information,
                EdgeKind::Loop,
            );
            let solved = match graph.optimize(&SolverConfig::default()) {
                Ok(s) => s,
                Err(e) => {
                    attempt.outcome = format!("pose graph: {e}");
                    self.attempts.push(attempt);
                    continue;
                }
            };
            attempt.accepted = true;
            attempt.outcome = "accepted".into();
            attempt.measurement = Some(pose_array(&z));
            attempt.graph_cost_before = Some(solved.initial_cost);
            attempt.graph_cost_after = Some(solved.final_cost);
            self.attempts.push(attempt);
            let old = std::mem::replace(&mut graph.nodes, solved.poses);
            let drift_delta = graph.nodes[i].compose(&old[i].inverse());
            self.graph = graph;
            self.version += 1;
            self.deltas.push(drift_delta);
            return Ok(Some(Correction {
                new: self.graph.nodes.clone(),
                old,
                drift_delta,
            }));
        }
        Ok(None)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub frames: usize,
    pub held_out_frames: Vec<usize>,
    pub segments: usize,
    pub keyframes: usize,
    pub gaussians: usize,
    pub init_counts: SourceCounts,
    pub steps: usize,
    pub pruned: usize,
    pub final_loss: Option<LossTerms>,
    pub scene_extent: f64,
    pub loop_attempts: Vec<LoopAttempt>,
    pub loops_accepted: usize,
    /// Rotation error of each accepted loop measurement against ground
    /// truth, degrees.
    pub loop_rotation_errors_deg: Vec<f64>,
    /// Translation error of each accepted loop measurement against ground
    /// truth, metres.
    pub loop_translation_errors: Vec<f64>,
    pub ate_odometry: f64,
    pub ate: f64,
    /// `umeyama`, or `first_pose` when the positions are too degenerate
    /// for a unique rigid fit.
    pub ate_alignment: String,
    /// Training views sampled at least once.
    pub sampled_frames: usize,
    /// Whether any held-out frame was ever used for training.
    pub holdout_leak: bool,
    pub eval: Option<EvalSummary>,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
    pub stream_seconds: f64,
    /// Wall time over stream duration; below one is faster than real time.
    pub realtime_factor: f64,
    /// Optimizer busy time over stream duration.
    pub optimizer_realtime_factor: f64,
    pub producer_seconds: f64,
    pub optimizer_seconds: f64,
    pub loop_seconds: f64,
    pub eval_seconds: f64,
    pub steps_per_second: f64,
    pub peak_rss_kib: Option<u64>,
}

pub struct RunOutput {
    pub report: RunReport,
    pub timing: Timing,
    pub map: GlobalMap,
    pub graph: PoseGraph,
    /// Estimated pose of every processed frame after all corrections.
    pub trajectory: Vec<StampedPose>,
    pub sampled_frames: BTreeSet<usize>,
}

/// Peak resident set size of this process in KiB, where the platform
/// reports it.
pub fn peak_rss_kib() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find(|l| l.starts_with("VmHWM:"))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()
}

/// Radius of the odometry positions around their centroid, padded by 10 %.
pub fn scene_extent(poses: &[StampedPose]) -> f64 {
    if poses.is_empty() {
        return 1.0;
    }
    let c = poses.iter().map(|p| p.pose.translation).sum::<Vector3<f64>>() / poses.len() as f64;
    let r = poses
        .iter()
        .map(|p| (p.pose.translation - c).norm())
        .fold(0.0, f64::max);
    (1.1 * r).max(1e-3)
}

/// ATE RMSE after rigid alignment. Falls back to anchoring the first
/// estimated pose on the first ground-truth pose when the positions are
/// collinear or too few.
pub fn trajectory_error(est: &[Pose], gt: &[Pose]) -> Result<(f64, &'static str), PipelineError> {
    match umeyama_align(est, gt) {
        Ok(a) => Ok((a.ate_rmse, "umeyama")),
        Err(GeomError::DegenerateTrajectory(_)) if !est.is_empty() && est.len() == gt.len() => {
            let anchor = gt[0].compose(&est[0].inverse());
            let sq: f64 = est
                .iter()
                .zip(gt)
                .map(|(e, g)| (anchor.transform_point(&e.translation) - g.translation).norm_squared())
                .sum();
            Ok(((sq / est.len() as f64).sqrt(), "first_pose"))
        }
        Err(e) => Err(e.into()),
    }
}

struct Stages {
    producer: Producer,
    optimizer: Optimizer,
    loops: LoopWorker,
}

fn run_deterministic(mut s: Stages, n: usize, steps_per_frame: usize, budget: usize) -> Result<Stages, PipelineError> {
    let handle = |s: &mut Stages, msg: SegmentMsg| -> Result<(), PipelineError> {
        let lm = s.optimizer.insert(msg);
        if let Some(c) = s.loops.handle(lm)? {
            s.optimizer.apply(c);
        }
        Ok(())
    };
    for k in 0..n {
        let (drift, version) = (s.optimizer.current_drift(), s.optimizer.version());
        if let Some(msg) = s.producer.process(k, &drift, version)? {
            handle(&mut s, msg)?;
        }
        let target = budget.min(steps_per_frame * (k + 1));
        while s.optimizer.steps < target {
            s.optimizer.step(k)?;
        }
    }
    if let Some(msg) = s.producer.finish(s.optimizer.version())? {
        handle(&mut s, msg)?;
    }
    while s.optimizer.steps < budget {
        s.optimizer.step(n.saturating_sub(1))?;
    }
    Ok(s)
}

fn run_streaming(
    s: Stages,
    n: usize,
    cfg: &RunConfig,
    rate: f64,
    budget: usize,
) -> Result<Stages, PipelineError> {
    let Stages {
        mut producer,
        mut optimizer,
        mut loops,
    } = s;
    let depth = cfg.pipeline.queue_depth.max(1);
    let (seg_tx, seg_rx) = bounded::<SegmentMsg>(depth);
    let (loop_tx, loop_rx) = bounded::<LoopMsg>(depth);
    let (cor_tx, cor_rx) = bounded::<Correction>(depth);
    let drift = Mutex::new((Pose::identity(), 0usize));
    let ingested = AtomicUsize::new(0);
    let realtime = cfg.pipeline.realtime;
    let per_frame = cfg.pipeline.steps_per_frame;

    let (drift, ingested) = (&drift, &ingested);
    std::thread::scope(|scope| -> Result<Stages, PipelineError> {
        let producer_handle = scope.spawn(move || -> Result<Producer, PipelineError> {
            let start = Instant::now();
            for k in 0..n {
                if realtime {
                    let due = Duration::from_secs_f64(k as f64 / rate);
                    if let Some(wait) = due.checked_sub(start.elapsed()) {
                        std::thread::sleep(wait);
                    }
                }
                let (d, v) = *drift.lock().expect("drift lock");
                let msg = producer.process(k, &d, v)?;
                ingested.store(k + 1, Ordering::Release);
                if let Some(m) = msg {
                    if seg_tx.send(m).is_err() {
                        return Ok(producer);
                    }
                }
            }
            let v = drift.lock().expect("drift lock").1;
            if let Some(m) = producer.finish(v)? {
                let _ = seg_tx.send(m);
            }
            drop(seg_tx);
            Ok(producer)
        });
        let loop_handle = scope.spawn(move || -> Result<LoopWorker, PipelineError> {
            for msg in loop_rx {
                if let Some(c) = loops.handle(msg)? {
                    if cor_tx.send(c).is_err() {
                        break;
                    }
                }
            }
            Ok(loops)
        });

        let apply = |opt: &mut Optimizer, c: Correction| {
            opt.apply(c);
            *drift.lock().expect("drift lock") = (opt.current_drift(), opt.version());
        };
        let mut producer_done = false;
        let mut loop_alive = true;
        let mut result: Result<(), PipelineError> = Ok(());
        'main: loop {
            while let Ok(c) = cor_rx.try_recv() {
                apply(&mut optimizer, c);
            }
            match seg_rx.try_recv() {
                Ok(msg) => {
                    let mut pending = Some(optimizer.insert(msg));
                    while loop_alive {
                        let Some(lm) = pending.take() else { break };
                        match loop_tx.try_send(lm) {
                            Ok(()) => {}
                            Err(TrySendError::Full(back)) => {
                                pending = Some(back);
                                match cor_rx.recv_timeout(Duration::from_micros(200)) {
                                    Ok(c) => apply(&mut optimizer, c),
                                    Err(RecvTimeoutError::Timeout) => {}
                                    Err(RecvTimeoutError::Disconnected) => loop_alive = false,
                                }
                            }
                            Err(TrySendError::Disconnected(_)) => loop_alive = false,
                        }
                    }
                    continue;
                }
                Err(TryRecvError::Empty) => {}
                Err(TryRecvError::Disconnected) => producer_done = true,
            }
            let allowed = if producer_done {
                budget
            } else {
                budget.min(per_frame * ingested.load(Ordering::Acquire))
            };
            if optimizer.steps < allowed {
                let frame = ingested.load(Ordering::Acquire).saturating_sub(1);
                if let Err(e) = optimizer.step(frame) {
                    result = Err(e);
                    break 'main;
                }
                continue;
            }
            if producer_done {
                break;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
        drop(seg_rx);
        drop(loop_tx);
        for c in cor_rx.iter() {
            apply(&mut optimizer, c);
        }
        let producer = producer_handle.join().expect("producer thread panicked")?;
        let loops = loop_handle.join().expect("loop thread panicked")?;
        result?;
        Ok(Stages {
            producer,
            optimizer,
            loops,
        })
    })
}

/// Runs the whole stream over `dataset` and evaluates the result.
pub fn run_pipeline(dataset: &Dataset, cfg: &RunConfig) -> Result<RunOutput, PipelineError> {
    let wall = Instant::now();
    let dataset = Arc::new(dataset.clone());
    let n = cfg.pipeline.max_frames.map_or(dataset.len(), |m| m.min(dataset.len()));
    if n == 0 {
        return Err(PipelineError::Dataset("no frames to process".into()));
    }
    let camera = *dataset.camera();
    let extent = cfg
        .pipeline
        .scene_extent
        .unwrap_or_else(|| scene_extent(&dataset.odometry[..n]));
    let budget = cfg.pipeline.step_budget.unwrap_or(cfg.pipeline.steps_per_frame * n);
    let stages = Stages {
        producer: Producer::new(dataset.clone(), cfg)?,
        optimizer: Optimizer::new(cfg, camera, extent),
        loops: LoopWorker::new(cfg.loop_closure.clone(), camera),
    };
    let s = match cfg.pipeline.mode {
        Mode::Deterministic => run_deterministic(stages, n, cfg.pipeline.steps_per_frame, budget)?,
        Mode::Streaming => run_streaming(stages, n, cfg, dataset.meta.rate, budget)?,
    };
    let stream_wall = wall.elapsed();

    let ledger = &s.producer.ledger;
    let map = s.optimizer.map;
    let mut trajectory = Vec::with_capacity(n);
    for k in 0..n {
        let seg = ledger.segment[k].ok_or_else(|| PipelineError::module("pipeline", k, "frame has no segment"))?;
        let meta = map
            .segment(seg)
            .ok_or_else(|| PipelineError::module("pipeline", k, format!("segment {seg} missing from the map")))?;
        let drift = s.optimizer.drift[ledger.segment_version[seg as usize]];
        trajectory.push(StampedPose {
            timestamp: dataset.odometry[k].timestamp,
            pose: meta.correction.compose(&drift).compose(&dataset.odometry[k].pose),
        });
    }
    let gt: Vec<Pose> = dataset.ground_truth[..n].iter().map(|p| p.pose).collect();
    let est: Vec<Pose> = trajectory.iter().map(|p| p.pose).collect();
    let odom: Vec<Pose> = dataset.odometry[..n].iter().map(|p| p.pose).collect();
    let (ate, ate_alignment) = trajectory_error(&est, &gt)?;
    let (ate_odometry, _) = trajectory_error(&odom, &gt)?;

    let mut rot_err = Vec::new();
    let mut trans_err = Vec::new();
    for a in s.loops.attempts.iter().filter(|a| a.accepted) {
        let z = pose_from_array(a.measurement.as_ref().expect("accepted loops carry a measurement"));
        let truth = gt[a.historical_frame].inverse().compose(&gt[a.current_frame]);
        let err = truth.inverse().compose(&z);
        rot_err.push(crate::geom::rotation_angle(&err.rotation).to_degrees());
        trans_err.push(err.translation.norm());
    }

    let eval_start = Instant::now();
    let test: Vec<(usize, Pose)> = ledger.held_out.iter().map(|&k| (k, trajectory[k].pose)).collect();
    let eval = if test.is_empty() {
        None
    } else {
        Some(evaluate_views(&map.gaussians, &dataset, &test, &cfg.optim.render)?)
    };
    let eval_time = eval_start.elapsed();

    let held: BTreeSet<usize> = ledger.held_out.iter().copied().collect();
    let mut init_counts = SourceCounts::default();
    for seg in &map.segments {
        init_counts.model += seg.counts.model;
        init_counts.pca += seg.counts.pca;
        init_counts.heuristic += seg.counts.heuristic;
    }
    let report = RunReport {
        frames: n,
        held_out_frames: ledger.held_out.clone(),
        segments: map.segments.len(),
        keyframes: map.views.len(),
        gaussians: map.gaussians.len(),
        init_counts,
        steps: s.optimizer.steps,
        pruned: s.optimizer.pruned,
        final_loss: s.optimizer.last_step.map(|r| r.loss),
        scene_extent: extent,
        loops_accepted: s.loops.attempts.iter().filter(|a| a.accepted).count(),
        loop_attempts: s.loops.attempts.clone(),
        loop_rotation_errors_deg: rot_err,
        loop_translation_errors: trans_err,
        ate_odometry,
        ate,
        ate_alignment: ate_alignment.into(),
        sampled_frames: s.optimizer.sampled_frames.len(),
        holdout_leak: s.optimizer.sampled_frames.iter().any(|k| held.contains(k)),
        eval,
        config: cfg.clone(),
    };
    let duration = n as f64 / dataset.meta.rate;
    let opt_secs = s.optimizer.busy.as_secs_f64();
    let timing = Timing {
        wall_seconds: stream_wall.as_secs_f64(),
        stream_seconds: duration,
        realtime_factor: stream_wall.as_secs_f64() / duration,
        optimizer_realtime_factor: opt_secs / duration,
        producer_seconds: s.producer.busy.as_secs_f64(),
        optimizer_seconds: opt_secs,
        loop_seconds: s.loops.busy.as_secs_f64(),
        eval_seconds: eval_time.as_secs_f64(),
        steps_per_second: if opt_secs > 0.0 { s.optimizer.steps as f64 / opt_secs } else { 0.0 },
        peak_rss_kib: peak_rss_kib(),
    };
    Ok(RunOutput {
        report,
        timing,
        map,
        graph: s.loops.graph,
        trajectory,
        sampled_frames: s.optimizer.sampled_frames,
    })
}

impl RunOutput {
    /// Writes `report.json`, `timing.json`, `trajectory.tsv`,
    /// `pose_graph.txt`, `sampled_frames.txt` and the `map.ply` checkpoint.
    pub fn write(&self, dir: &Path, camera: &Camera) -> Result<(), PipelineError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&self.report)?)?;
        fs::write(dir.join("timing.json"), serde_json::to_vec_pretty(&self.timing)?)?;
        write_trajectory(&dir.join("trajectory.tsv"), &self.trajectory)?;
        self.graph
            .write(&dir.join("pose_graph.txt"))
            .map_err(|e| PipelineError::module("loop_graph", self.report.frames, e))?;
        let sampled: String = self.sampled_frames.iter().map(|k| format!("{k}\n")).collect();
        fs::write(dir.join("sampled_frames.txt"), sampled)?;
        let config = serde_json::json!({ "run": self.report.config, "camera": camera });
        write_checkpoint(
            &dir.join("map.ply"),
            &self.map.gaussians,
            &self.map.segments,
            self.report.config.init.sh_degree,
            config,
        )?;
        Ok(())
    }
}
