//! Loop closure over loopframes: metric candidate gating, frustum-based
//! target extraction, Gaussian GICP, pose-graph correction and its
//! propagation into the map.

pub mod gicp;
pub mod pose_graph;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gicp::{accept_loop, gaussian_gicp, neighborhood_covariances, regularize_covariance, GicpIteration, GicpResult};
pub use pose_graph::{Edge, EdgeKind, PoseGraph, SolveReport, SolverConfig};

use crate::gaussian::Gaussian;
use crate::geom::{Camera, Pose};
use crate::map_opt::GlobalMap;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("no Gaussian falls inside the target views")]
    EmptyTarget,
    #[error("no source Gaussian has a target neighbour within the correspondence distance")]
    NoCorrespondences,
    #[error("registration did not converge after {} iterations", .0.iterations)]
    NotConverged(Box<GicpResult>),
    #[error("pose graph is under-constrained")]
    SingularSystem,
    #[error("cannot parse pose-graph line `{0}`")]
    Parse(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which covariance is regularized for registration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSource {
    /// Each Gaussian's own shape covariance.
    Gaussian,
    /// Scatter of the Gaussian means within `neighborhood_radius` of each
    /// Gaussian in the same set, falling back to the Gaussian's own shape
    /// when fewer than five means are found.
    Neighborhood,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub enabled: bool,
    pub search_radius: f64,
    pub min_gap: usize,
    pub max_target_distance: f64,
    pub neighbor_keyframes: usize,
    pub corr_distance: f64,
    pub min_correspondences: usize,
    pub step_tolerance: f64,
    pub max_iters: usize,
    pub max_residual: f64,
    pub odometry_information: f64,
    pub loop_information: f64,
    pub covariance: CovarianceSource,
    pub neighborhood_radius: f64,
    /// Candidates registered per loopframe, nearest first; zero tries all.
    pub max_candidates: usize,
    /// Fraction of source Gaussians that must find a correspondence for a
    /// loop to be accepted.
    pub min_overlap: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            search_radius: 10.0,
            min_gap: 20,
            max_target_distance: 30.0,
            neighbor_keyframes: 5,
            corr_distance: 1.0,
            min_correspondences: 50,
            step_tolerance: 1e-6,
            max_iters: 50,
            max_residual: 0.5,
            odometry_information: 1.0,
            loop_information: 10.0,
            covariance: CovarianceSource::Gaussian,
            neighborhood_radius: 0.3,
            max_candidates: 3,
            min_overlap: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopCandidate {
    pub current: usize,
    pub historical: usize,
    /// Refinement applied on top of the current corrected poses.
    pub initial_guess: Pose,
}

/// Historical loopframes within `radius` of loopframe `current` and at
/// least `min_gap` loopframes older, nearest first.
pub fn find_candidates(loopframes: &[Pose], current: usize, radius: f64, min_gap: usize) -> Vec<LoopCandidate> {
    let here = loopframes[current].translation;
    let mut found: Vec<(f64, usize)> = (0..current)
        .filter(|&j| current - j >= min_gap)
        .map(|j| ((loopframes[j].translation - here).norm(), j))
        .filter(|&(d, _)| d < radius)
        .collect();
    found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    found
        .into_iter()
        .map(|(_, j)| LoopCandidate {
            current,
            historical: j,
            initial_guess: Pose::identity(),
        })
        .collect()
}

/// Positions of the `k` keyframes centred on the one nearest `frame`.
pub fn neighbor_keyframes(keyframe_frames: &[usize], frame: usize, k: usize) -> Vec<usize> {
    if keyframe_frames.is_empty() || k == 0 {
        return Vec::new();
    }
    let centre = (0..keyframe_frames.len())
        .min_by_key(|&p| (keyframe_frames[p].abs_diff(frame), p))
        .expect("non-empty");
    let k = k.min(keyframe_frames.len());
    let start = centre.saturating_sub(k / 2).min(keyframe_frames.len() - k);
    (start..start + k).collect()
}

/// Whether `mean` projects into `view`'s image in front of the camera and
/// lies closer than `max_distance` to its centre.
pub fn seen_by(mean: &nalgebra::Vector3<f64>, view: &Pose, camera: &Camera, max_distance: f64) -> bool {
    if (mean - view.translation).norm() >= max_distance {
        return false;
    }
    camera
        .project(&view.inverse_transform_point(mean))
        .is_ok_and(|p| p.in_image)
}

/// Indices of Gaussians seen by at least one of `views` and not belonging
/// to an excluded segment.
pub fn extract_target_set(
    gaussians: &[Gaussian],
    views: &[Pose],
    camera: &Camera,
    max_distance: f64,
    excluded_segments: &[u32],
) -> Result<Vec<usize>, LoopError> {
    let out: Vec<usize> = gaussians
        .iter()
        .enumerate()
        .filter(|(_, g)| !excluded_segments.contains(&g.segment_id))
        .filter(|(_, g)| views.iter().any(|v| seen_by(&g.mean, v, camera, max_distance)))
        .map(|(i, _)| i)
        .collect();
    if out.is_empty() {
        return Err(LoopError::EmptyTarget);
    }
    Ok(out)
}

/// Moves every segment, with its Gaussians and views, by
/// `new[i] · old[i]⁻¹` where segment id `i` is anchored at node `i`.
/// Segments whose node did not move are left untouched.
pub fn propagate_correction(map: &mut GlobalMap, old: &[Pose], new: &[Pose]) {
    assert_eq!(old.len(), new.len(), "node count changed");
    let ids: Vec<u32> = map.segments.iter().map(|s| s.id).collect();
    for id in ids {
        let i = id as usize;
        if i >= old.len() || old[i] == new[i] {
            continue;
        }
        let delta = new[i].compose(&old[i].inverse());
        map.correct_segment(id, &delta);
    }
    map.invalidate_index();
}

/// Relative-pose measurement `X_hist⁻¹ · T · X_cur` implied by a
/// registration `T` of the current loopframe's Gaussians onto the
/// historical ones.
pub fn loop_measurement(historical: &Pose, current: &Pose, registration: &Pose) -> Pose {
    historical.inverse().compose(registration).compose(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss_init::{Segment, SourceCounts};
    use crate::map_opt::TrainView;
    use crate::image::Image;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn candidate_gating() {
        let line: Vec<Pose> = (0..40).map(|i| Pose::from_translation(Vector3::new(i as f64 * 2.0, 0.0, 0.0))).collect();
        assert!(find_candidates(&line, 39, 10.0, 20).is_empty());

        let square: Vec<Pose> = (0..40)
            .map(|i| {
                let s = i as f64 / 40.0 * 4.0;
                let (x, y) = match s as usize {
                    0 => (s * 20.0, 0.0),
                    1 => (20.0, (s - 1.0) * 20.0),
                    2 => (20.0 - (s - 2.0) * 20.0, 20.0),
                    _ => (0.0, 20.0 - (s - 3.0) * 20.0),
                };
                Pose::from_translation(Vector3::new(x, y, 0.0))
            })
            .chain(std::iter::once(Pose::from_translation(Vector3::new(0.5, 0.0, 0.0))))
            .collect();
        let c = find_candidates(&square, 40, 10.0, 20);
        assert_eq!(c[0].historical, 0);
        assert_eq!(c[0].initial_guess, Pose::identity());
        assert!(c.iter().all(|c| 40 - c.historical >= 20));

        let close = vec![Pose::identity(), Pose::from_translation(Vector3::new(0.1, 0.0, 0.0))];
        assert!(find_candidates(&close, 1, 10.0, 20).is_empty());
    }

    #[test]
    fn neighbor_window() {
        let kf = [0, 5, 10, 15, 20, 25, 30];
        assert_eq!(neighbor_keyframes(&kf, 15, 5), vec![1, 2, 3, 4, 5]);
        assert_eq!(neighbor_keyframes(&kf, 0, 5), vec![0, 1, 2, 3, 4]);
        assert_eq!(neighbor_keyframes(&kf, 29, 5), vec![2, 3, 4, 5, 6]);
        assert_eq!(neighbor_keyframes(&kf[..2], 7, 5), vec![0, 1]);
    }

    fn camera() -> Camera {
        Camera::with_hfov(64, 48, 1.2)
    }

    #[test]
    fn target_set_rules() {
        let cam = camera();
        let views = [Pose::identity()];
        let g = |z: f64| Gaussian::isotropic(Vector3::new(0.0, 0.0, z), 0.1, 0.5, Vector3::repeat(0.5), 0);
        assert!(matches!(extract_target_set(&[g(-2.0)], &views, &cam, 30.0, &[]), Err(LoopError::EmptyTarget)));
        assert!(matches!(extract_target_set(&[g(31.0)], &views, &cam, 30.0, &[]), Err(LoopError::EmptyTarget)));
        assert_eq!(extract_target_set(&[g(29.0)], &views, &cam, 30.0, &[]).unwrap(), vec![0]);
        let mut own = g(5.0);
        own.segment_id = 4;
        assert_eq!(extract_target_set(&[own.clone(), g(5.0)], &views, &cam, 30.0, &[4]).unwrap(), vec![1]);
    }

    #[test]
    fn target_set_matches_direct_predicate() {
        let cam = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let gs: Vec<Gaussian> = (0..1000)
            .map(|_| {
                let mut g = Gaussian::isotropic(
                    Vector3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-3.0..3.0)),
                    0.1,
                    0.5,
                    Vector3::repeat(0.5),
                    0,
                );
                g.segment_id = rng.random_range(0..6);
                g
            })
            .collect();
        let views: Vec<Pose> = (0..5)
            .map(|k| {
                Pose::new(
                    UnitQuaternion::from_euler_angles(-std::f64::consts::FRAC_PI_2, 0.0, 0.4 * k as f64),
                    Vector3::new(k as f64 - 2.0, -8.0, 0.0),
                )
            })
            .collect();
        let got = extract_target_set(&gs, &views, &cam, 15.0, &[2]).unwrap();
        let mut expected = Vec::new();
        for (n, g) in gs.iter().enumerate() {
            if g.segment_id == 2 {
                continue;
            }
            let mut hit = false;
            for v in &views {
                let r = v.rotation_matrix();
                let pc = r.transpose() * (g.mean - v.translation);
                let u = cam.fx * pc.x / pc.z + cam.cx;
                let w = cam.fy * pc.y / pc.z + cam.cy;
                let inside = pc.z > 0.0 && (0.0..64.0).contains(&u) && (0.0..48.0).contains(&w);
                let dist = ((g.mean - v.translation).norm_squared()).sqrt();
                if inside && dist < 15.0 {
                    hit = true;
                }
            }
            if hit {
                expected.push(n);
            }
        }
        assert!(expected.len() > 20 && expected.len() < 1000);
        assert_eq!(got, expected);
    }

    fn seg(id: u32, means: &[Vector3<f64>]) -> Segment {
        Segment {
            id,
            loopframe_index: id as usize,
            gaussians: means.iter().map(|m| Gaussian::isotropic(*m, 0.05, 0.5, Vector3::repeat(0.5), 0)).collect(),
            anchor_pose: Pose::identity(),
            correction: Pose::identity(),
            counts: SourceCounts::default(),
            beta: 1.0,
            keyframes: vec![],
        }
    }

    fn two_segment_map() -> GlobalMap {
        let mut map = GlobalMap::new(0.05);
        map.insert_segment(&seg(0, &[Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 1.0)]), 0.05);
        map.insert_segment(&seg(1, &[Vector3::new(5.0, 0.0, 1.0)]), 0.05);
        map.gaussians[2].rotation = UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3);
        for s in 0..2 {
            map.add_view(TrainView {
                frame_index: s,
                segment_id: s as u32,
                pose: Pose::from_translation(Vector3::new(s as f64, 0.0, 0.0)),
                rgb: Arc::new(Image::filled(1, 1, [0.0; 3])),
                depth: Arc::new(Image::filled(1, 1, 0.0)),
            });
        }
        map
    }

    #[test]
    fn identity_correction_is_bitwise_noop() {
        let mut map = two_segment_map();
        let before = map.gaussians.clone();
        let poses = vec![Pose::identity(), Pose::from_translation(Vector3::new(3.0, 0.1, 0.0))];
        propagate_correction(&mut map, &poses, &poses.clone());
        assert_eq!(map.gaussians, before);
    }

    #[test]
    fn translation_correction_shifts_one_segment() {
        let mut map = two_segment_map();
        let before = map.gaussians.clone();
        let old = vec![Pose::identity(), Pose::from_translation(Vector3::new(3.0, 0.0, 0.0))];
        let t = Vector3::new(0.25, -0.5, 0.125);
        let new = vec![old[0], Pose::from_translation(old[1].translation + t)];
        propagate_correction(&mut map, &old, &new);
        assert_eq!(&map.gaussians[..2], &before[..2]);
        assert_eq!(map.gaussians[2].mean, before[2].mean + t);
        assert_eq!(map.gaussians[2].rotation, before[2].rotation);
        assert_eq!(map.views[1].pose.translation, Vector3::new(1.0, 0.0, 0.0) + t);
        assert_eq!(map.views[0].pose, Pose::from_translation(Vector3::new(0.0, 0.0, 0.0)));
        let corr = map.segment(1).unwrap().correction;
        assert!((corr.translation - t).norm() < 1e-15);
    }

    #[test]
    fn stored_corrections_reproduce_current_means() {
        let mut map = two_segment_map();
        let created = map.gaussians.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut nodes = vec![Pose::identity(), Pose::from_translation(Vector3::new(3.0, 0.0, 0.0))];
        for _ in 0..4 {
            let next: Vec<Pose> = nodes
                .iter()
                .map(|p| {
                    Pose::new(
                        UnitQuaternion::from_euler_angles(rng.random_range(-0.1..0.1), 0.0, rng.random_range(-0.2..0.2)),
                        Vector3::new(rng.random_range(-0.5..0.5), 0.0, 0.0),
                    )
                    .compose(p)
                })
                .collect();
            propagate_correction(&mut map, &nodes, &next);
            nodes = next;
        }
        for (g, c) in map.gaussians.iter().zip(&created) {
            let corr = map.segment(g.segment_id).unwrap().correction;
            assert!((corr.transform_point(&c.mean) - g.mean).norm() < 1e-9);
        }
    }
}
