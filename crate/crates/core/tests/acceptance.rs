//! Acceptance criteria A1 to A9. Runs as a plain binary so that the
//! pass/fail lines are always printed. Set `SPLATSLAM_ACCEPTANCE=A1,A4` to
//! run a subset and `SPLATSLAM_ACCEPTANCE_STRICT=1` to exit non-zero when
//! any criterion fails.

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Matrix6, UnitQuaternion, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use splatslam::gauss_init::{
    cascade_init, close_segment, compute_beta, pick_view, resolve_pixel_conflicts, sample_model_attrs,
    select_keyframe, select_loopframe, AttributeMaps, Frame, InitConfig, PriorPoint, Segment, SourceCounts,
    StubProvider, View, ViewHit,
};
use splatslam::gaussian::{color_to_dc, logit, Gaussian, InitSource};
use splatslam::geom::{so3_exp, umeyama_align, Camera, GeomError, Pose};
use splatslam::image::{GrayImage, Image, RgbImage};
use splatslam::loop_graph::{
    accept_loop, extract_target_set, find_candidates, gaussian_gicp, propagate_correction, regularize_covariance,
    EdgeKind, GicpResult, LoopConfig, LoopError, PoseGraph, SolverConfig,
};
use splatslam::map_opt::{optimize_step, sample_views, AdamState, GlobalMap, OptimConfig, TrainView};
use splatslam::pipeline::{run_pipeline, synth_generate, Dataset, RunConfig, RunOutput, SynthConfig};
use splatslam::splat_render::gradcheck::{check_gradients, GradScene};
use splatslam::splat_render::{
    composite, interior_mask, loss_and_grad, losses, project_gaussian, psnr, render, ssim, LossWeights, RenderConfig,
};
use splatslam::voxel_pca::{
    classify, descriptor_covariance, fit_voxel, geom_prior, reliability, voxel_index, Axis, GeomPrior, VoxelClass,
    VoxelConfig, VoxelStats, WorldPoint,
};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

/// Collects named boolean checks and reports the failures.
#[derive(Default)]
struct Checks {
    total: usize,
    failed: Vec<String>,
}

impl Checks {
    fn check(&mut self, name: &str, ok: bool) {
        self.total += 1;
        if !ok {
            self.failed.push(name.to_string());
        }
    }

    fn outcome(self, extra: &str) -> Outcome {
        let passed = self.failed.is_empty();
        let mut detail = format!("{}/{} checks", self.total - self.failed.len(), self.total);
        if !extra.is_empty() {
            detail.push_str(&format!(", {extra}"));
        }
        if !passed {
            detail.push_str(&format!(", failed: {}", self.failed.join("; ")));
        }
        Outcome::new(passed, detail)
    }
}

fn within_time(start: Instant, limit: Duration) -> (bool, String) {
    let t = start.elapsed();
    (t < limit, format!("{:.1}s of {}s", t.as_secs_f64(), limit.as_secs()))
}

fn wp(x: f64, y: f64, z: f64) -> WorldPoint {
    WorldPoint::new(Vector3::new(x, y, z), Vector3::repeat(0.5), 0.0)
}

fn yaw(a: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_euler_angles(0.0, 0.0, a)
}

// ---------------------------------------------------------------- A1

/// Eigenvalues of a symmetric 3×3 by bisection on the characteristic
/// polynomial between Gershgorin bounds.
fn char_poly_eigenvalues(c: &Matrix3<f64>) -> Option<[f64; 3]> {
    let p = |l: f64| (c - Matrix3::identity() * l).determinant();
    let r = (0..3)
        .map(|i| (0..3).map(|j| c[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let (lo, hi) = (-r - 1e-9, r + 1e-9);
    let steps = 20_000;
    let mut roots = Vec::new();
    let (mut prev_l, mut prev_v) = (lo, p(lo));
    for s in 1..=steps {
        let l = lo + (hi - lo) * s as f64 / steps as f64;
        let v = p(l);
        if prev_v.signum() != v.signum() && v != 0.0 {
            let (mut a, mut b) = (prev_l, l);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if p(m).signum() == p(a).signum() {
                    a = m;
                } else {
                    b = m;
                }
            }
            roots.push(0.5 * (a + b));
        }
        prev_l = l;
        prev_v = v;
    }
    (roots.len() == 3).then(|| [roots[0], roots[1], roots[2]])
}

fn pca_oracle(c: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut ok = true;
    for _ in 0..50 {
        let n = rng.random_range(10..=20);
        let pts: Vec<WorldPoint> = (0..n)
            .map(|_| wp(rng.random_range(0.0..0.5), rng.random_range(0.0..0.3), rng.random_range(0.0..0.1)))
            .collect();
        let s = fit_voxel(&pts, 10).unwrap();
        let cov = s.covariance();
        let Some(oracle) = char_poly_eigenvalues(&cov) else {
            ok = false;
            continue;
        };
        for i in 0..3 {
            let v = s.eigenvectors.column(i);
            ok &= (s.eigenvalues[i] - oracle[i]).abs() < 1e-8;
            ok &= (cov * v - v * s.eigenvalues[i]).amax() < 1e-9;
        }
        ok &= (s.eigenvectors.determinant() - 1.0).abs() < 1e-9;
    }
    c.check("PCA matches characteristic-polynomial oracle", ok);
}

fn descriptor_monte_carlo(c: &mut Checks) -> String {
    let sigma = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clean: Vec<WorldPoint> = (0..50)
        .map(|_| {
            WorldPoint::new(
                Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0),
                Vector3::repeat(0.5),
                sigma,
            )
        })
        .collect();
    let nominal = fit_voxel(&clean, 10).unwrap();
    let predicted = descriptor_covariance(&clean, &nominal, Axis::Min).unwrap();
    let predicted = predicted.fixed_view::<3, 3>(0, 0).trace();
    let v0 = nominal.eigenvector(Axis::Min);
    let noise = Normal::new(0.0, sigma).unwrap();
    let trials = 10_000;
    let samples: Vec<Vector3<f64>> = (0..trials)
        .map(|_| {
            let noisy: Vec<WorldPoint> = clean
                .iter()
                .map(|p| WorldPoint {
                    position: p.position + Vector3::from_fn(|_, _| noise.sample(&mut rng)),
                    ..*p
                })
                .collect();
            let v = fit_voxel(&noisy, 1).unwrap().eigenvector(Axis::Min);
            if v.dot(&v0) < 0.0 {
                -v
            } else {
                v
            }
        })
        .collect();
    let mean = samples.iter().sum::<Vector3<f64>>() / trials as f64;
    let empirical = samples.iter().map(|v| (v - mean).norm_squared()).sum::<f64>() / (trials - 1) as f64;
    let rel = (predicted - empirical).abs() / empirical;
    c.check("descriptor covariance within 20% of Monte Carlo", rel < 0.2);
    format!("Monte-Carlo relative error {rel:.3}")
}

fn stats_with(eigenvalues: [f64; 3]) -> VoxelStats {
    VoxelStats {
        mean: Vector3::zeros(),
        eigenvalues: Vector3::from(eigenvalues),
        eigenvectors: Matrix3::identity(),
        count: 10,
        class: VoxelClass::Unreliable,
        descriptor_cov: Matrix6::zeros(),
        reliable: true,
    }
}

fn trivial_geom(c: &mut Checks) {
    c.check("exp(0) is identity", Pose::exp(&Vector6::zeros()) == Pose::identity());
    let quarter = Pose::exp(&Vector6::new(0.0, 0.0, std::f64::consts::FRAC_PI_2, 0.0, 0.0, 0.0));
    c.check(
        "quarter turn about z",
        quarter.rotation.angle_to(&yaw(std::f64::consts::FRAC_PI_2)) < 1e-12 && quarter.translation.norm() < 1e-12,
    );
    let cam = Camera::new(400.0, 400.0, 320.0, 240.0, 640, 480);
    let p = cam.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
    c.check("optical axis projects to the principal point", p.pixel == Vector2::new(320.0, 240.0) && p.depth == 1.0);
    let p = cam.project(&Vector3::new(1.0, 0.0, 2.0)).unwrap();
    c.check("pinhole u = 520", (p.pixel.x - 520.0).abs() < 1e-12);
    c.check(
        "behind camera is NonPositiveDepth",
        matches!(cam.project(&Vector3::new(0.0, 0.0, -1.0)), Err(GeomError::NonPositiveDepth(_))),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt: Vec<Pose> = (0..30)
        .map(|_| Pose::exp(&Vector6::from_fn(|_, _| rng.random_range(-2.0..2.0))))
        .collect();
    c.check("identical trajectories have zero ATE", umeyama_align(&gt, &gt).unwrap().ate_rmse < 1e-12);
    let g = Pose::exp(&Vector6::new(0.3, -0.7, 1.2, 4.0, -1.0, 2.5));
    let moved: Vec<Pose> = gt.iter().map(|p| g.compose(p)).collect();
    c.check("rigidly moved trajectory has zero ATE", umeyama_align(&moved, &gt).unwrap().ate_rmse < 1e-9);
}

fn trivial_voxel(c: &mut Checks) {
    c.check("floor of 0.49", voxel_index(&Vector3::new(0.49, 0.0, 0.0), 0.5) == [0, 0, 0]);
    c.check("floor of -0.01", voxel_index(&Vector3::new(-0.01, 0.0, 0.0), 0.5) == [-1, 0, 0]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let plane: Vec<WorldPoint> = (0..30).map(|_| wp(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0)).collect();
    let s = fit_voxel(&plane, 10).unwrap();
    c.check(
        "plane z=0 has zero smallest eigenvalue along z",
        s.eigenvalues[0].abs() < 1e-12 && (s.eigenvector(Axis::Min).z.abs() - 1.0).abs() < 1e-12,
    );
    let line: Vec<WorldPoint> = (0..30).map(|_| wp(rng.random_range(-1.0..1.0), 0.0, 0.0)).collect();
    let s = fit_voxel(&line, 10).unwrap();
    c.check(
        "x-axis line has two zero eigenvalues and x major axis",
        s.eigenvalues[0].abs() < 1e-12
            && s.eigenvalues[1].abs() < 1e-12
            && (s.eigenvector(Axis::Max).x.abs() - 1.0).abs() < 1e-12,
    );

    let cfg = VoxelConfig {
        plane_threshold: 1e-4,
        line_ratio: 25.0,
        ..Default::default()
    };
    c.check("flat disk is planar", classify(&stats_with([1e-6, 0.1, 0.1]), &cfg) == VoxelClass::Planar);
    c.check("rod is linear", classify(&stats_with([4e-4, 5e-4, 0.5]), &cfg) == VoxelClass::Linear);
    c.check("isotropic blob is unreliable", classify(&stats_with([0.01, 0.01, 0.01]), &cfg) == VoxelClass::Unreliable);

    let pts: Vec<WorldPoint> = (0..20)
        .map(|_| wp(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.05..0.05)))
        .collect();
    let s = fit_voxel(&pts, 10).unwrap();
    let zero = descriptor_covariance(&pts, &s, Axis::Min).unwrap();
    c.check("noiseless points give zero descriptor covariance", zero == Matrix6::zeros());
    let sigma = 0.03;
    let noisy: Vec<WorldPoint> = pts
        .iter()
        .map(|p| WorldPoint::new(p.position, p.color, sigma))
        .collect();
    let cov = descriptor_covariance(&noisy, &s, Axis::Min).unwrap();
    let block = cov.fixed_view::<3, 3>(3, 3).into_owned();
    c.check(
        "mean block is sigma^2/N",
        (block - Matrix3::identity() * (sigma * sigma / 20.0)).amax() < 1e-15,
    );
    c.check("zero descriptor covariance is reliable", reliability(&Matrix6::zeros(), 1e-3));
    let mut boundary = Matrix6::zeros();
    boundary[(0, 0)] = 5e-4;
    boundary[(1, 1)] = 5e-4;
    c.check("trace equal to threshold is unreliable", !reliability(&boundary, 1e-3));
    let prior = geom_prior(&stats_with([0.01, 0.04, 0.09]), 1e-8);
    c.check(
        "prior scales are square roots of eigenvalues",
        (prior.log_scale.map(f64::exp) - Vector3::new(0.3, 0.2, 0.1)).amax() < 1e-12,
    );
    let prior = geom_prior(&stats_with([0.0, 0.04, 0.09]), 1e-8);
    c.check("floored smallest eigenvalue", (prior.log_scale.z - 0.5 * 1e-8f64.ln()).abs() < 1e-15);
}

fn prior_point(p: Vector3<f64>, reliable: bool) -> PriorPoint {
    PriorPoint {
        point: WorldPoint::new(p, Vector3::repeat(0.5), 0.01),
        prior: GeomPrior {
            rotation: so3_exp(&Vector3::new(0.1, 0.2, 0.3)),
            log_scale: Vector3::new(-1.0, -2.0, -5.0),
            reliable,
        },
    }
}

fn unit_maps(w: usize, h: usize) -> AttributeMaps {
    let mut m = AttributeMaps::invalid(w, h, 4);
    m.valid.iter_mut().for_each(|v| *v = true);
    m.scale_shape.iter_mut().for_each(|s| *s = [1.0; 3]);
    m
}

fn flat_frame(index: usize, points: Vec<PriorPoint>, w: usize, h: usize) -> Frame {
    Frame {
        index,
        timestamp: index as f64 * 0.1,
        pose: Pose::identity(),
        rgb: Image::filled(w, h, [0.5; 3]),
        depth: Image::filled(w, h, 0.0),
        points,
    }
}

fn trivial_init(c: &mut Checks) {
    c.check("keyframe at index 0", select_keyframe(0, 5));
    c.check("no keyframe at index 7", !select_keyframe(7, 5));
    c.check("gap 1 selects every frame", (0..50).all(|i| select_keyframe(i, 1)));
    let (tau_t, tau_r) = (2.0, 15f64.to_radians());
    let a = Pose::identity();
    c.check("identical poses are no loopframe", !select_loopframe(&a, &a, tau_t, tau_r));
    c.check(
        "3 m move is a loopframe",
        select_loopframe(&Pose::from_translation(Vector3::new(3.0, 0.0, 0.0)), &a, tau_t, tau_r),
    );
    c.check(
        "20 degree yaw is a loopframe",
        select_loopframe(&Pose::from_rotation(yaw(20f64.to_radians())), &a, tau_t, tau_r),
    );

    let stub = StubProvider::default();
    let flat = stub.maps_for(&Image::filled(16, 16, [0.3, 0.6, 0.2]));
    c.check("constant image has no valid pixel", flat.valid.iter().all(|v| !v));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let textured: RgbImage = Image::from_fn(16, 16, |_, _| [rng.random(), rng.random(), rng.random()]);
    let maps = stub.maps_for(&textured);
    let unit = maps.valid.iter().zip(&maps.rotation).filter(|(v, _)| **v).all(|(_, q)| {
        let n = q.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        (n - 1.0).abs() < 1e-6
    });
    c.check("valid stub pixels carry unit quaternions", unit && maps.valid_count() > 0);

    let cam = Camera::new(100.0, 100.0, 31.5, 31.5, 64, 64);
    let cur = Pose::identity();
    let away = Pose::from_rotation(so3_exp(&Vector3::new(0.0, std::f64::consts::PI, 0.0)));
    c.check(
        "point visible only in cur",
        pick_view(&Vector3::new(0.0, 0.0, 3.0), &cam, &away, &cur).map(|h| h.view) == Some(View::Cur),
    );
    let prev = Pose::from_translation(Vector3::new(0.0, 0.0, -5.0));
    let hit = pick_view(&Vector3::new(0.0, 0.0, 4.0), &cam, &prev, &cur);
    c.check("closer view wins", hit.map(|h| (h.view, h.depth)) == Some((View::Cur, 4.0)));
    c.check(
        "behind both cameras",
        pick_view(&Vector3::new(0.0, 0.0, -9.0), &cam, &prev, &cur).is_none(),
    );
    let h = |u: f64, d: f64| {
        Some(ViewHit {
            view: View::Cur,
            pixel: Vector2::new(u, 5.0),
            depth: d,
        })
    };
    c.check("nearer point keeps the pixel", resolve_pixel_conflicts(&[h(5.0, 3.0), h(5.0, 2.0)], &cam) == vec![false, true]);
    c.check("distinct pixels both survive", resolve_pixel_conflicts(&[h(5.0, 3.0), h(9.0, 2.0)], &cam) == vec![true, true]);
    c.check("equal depth keeps lower index", resolve_pixel_conflicts(&[h(5.0, 2.0), h(5.0, 2.0)], &cam) == vec![true, false]);

    let m = sample_model_attrs(&unit_maps(4, 4), &Vector2::new(1.5, 1.5), &UnitQuaternion::identity(), 10.0, 500.0, 1);
    c.check(
        "unit shape at d=10 f=500 gives log 0.02",
        m.is_some_and(|m| (0..3).all(|k| (m.log_scale[k] - 0.02f64.ln()).abs() < 1e-12)),
    );
    c.check(
        "all neighbours invalid gives none",
        sample_model_attrs(&AttributeMaps::invalid(4, 4, 4), &Vector2::new(1.5, 1.5), &UnitQuaternion::identity(), 1.0, 1.0, 1)
            .is_none(),
    );
    c.check("beta of all-PCA is 1", compute_beta(7, 7, 0.2) == 1.0);
    c.check("beta clamps to the minimum", compute_beta(0, 100, 0.2) == 0.2);
    c.check("beta 30/100", (compute_beta(30, 100, 0.2) - 0.3).abs() < 1e-15);

    let icfg = InitConfig::default();
    let p = prior_point(Vector3::new(1.0, 2.0, 3.0), true);
    let g = cascade_init(&p, None, 1.0, 5.0, 500.0, &icfg);
    c.check("beta 1 keeps PCA scale exactly", g.source == InitSource::Pca && g.log_scale == p.prior.log_scale);
    let g = cascade_init(&prior_point(Vector3::zeros(), false), None, 1.0, 5.0, 500.0, &icfg);
    c.check(
        "heuristic fallback is 1 cm at d=5 f=500",
        g.source == InitSource::Heuristic && g.scale().iter().all(|s| (s - 0.01).abs() < 1e-15),
    );
    c.check("mid grey has zero DC", color_to_dc(&Vector3::repeat(0.5)) == Vector3::zeros());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let kfs: Vec<Frame> = (0..3)
        .map(|k| {
            let pts = (0..100)
                .map(|_| {
                    let pix = Vector2::new(rng.random_range(0.0..63.0), rng.random_range(0.0..63.0));
                    prior_point(cam.unproject(&pix, rng.random_range(2.0..6.0)), false)
                })
                .collect();
            flat_frame(k * 5, pts, 64, 64)
        })
        .collect();
    let refs: Vec<&Frame> = kfs.iter().collect();
    let seg = close_segment(4, &refs, &kfs[0], &kfs[2], None, &cam, &icfg).unwrap();
    c.check("three keyframes of 100 points give at most 300 Gaussians", seg.gaussians.len() <= 300);
    let pts: Vec<PriorPoint> = (0..300)
        .map(|i| prior_point(cam.unproject(&Vector2::new((i % 60) as f64, (i / 60) as f64 * 3.0), 3.0), true))
        .collect();
    let f = flat_frame(0, pts, 64, 64);
    let maps = (unit_maps(64, 64), unit_maps(64, 64));
    let seg = close_segment(0, &[&f], &f, &f, Some(&maps), &cam, &icfg).unwrap();
    c.check(
        "all model-valid counts (300,0,0)",
        seg.counts
            == SourceCounts {
                model: 300,
                pca: 0,
                heuristic: 0,
            },
    );
}

fn render_scene(seed: u64) -> (Vec<Gaussian>, Camera, Pose) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = Camera::new(18.0, 18.0, 7.5, 7.5, 16, 16);
    let view = Pose::new(UnitQuaternion::from_euler_angles(0.1, -0.1, 0.3), Vector3::new(0.1, -0.1, -0.2));
    let gs = (0..5)
        .map(|_| {
            let local = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(1.5..3.0));
            let mut g = Gaussian::isotropic(
                view.transform_point(&local),
                0.15,
                rng.random_range(0.1..0.8),
                Vector3::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
                1,
            );
            g.rotation = UnitQuaternion::from_euler_angles(rng.random(), rng.random(), rng.random());
            g
        })
        .collect();
    (gs, cam, view)
}

fn trivial_render(c: &mut Checks) {
    let cam = Camera::new(50.0, 50.0, 15.5, 15.5, 32, 32);
    let cfg = RenderConfig::default();
    let behind = Gaussian::isotropic(Vector3::new(0.0, 0.0, -1.0), 0.05, 0.5, Vector3::repeat(0.5), 0);
    c.check(
        "negative depth is culled",
        matches!(project_gaussian(&behind, 0, &cam, &Pose::identity(), &cfg), Ok(None)),
    );
    let (_, d, t, n) = composite(&[(1.0, Vector3::repeat(1.0), 3.0)], 1e-4);
    c.check("one opaque term gives D = z and full alpha", d == 3.0 && 1.0 - t == 1.0 && n == 1);
    let empty = render(&[], &cam, &Pose::identity(), &cfg).unwrap();
    c.check(
        "empty scene is black and transparent",
        empty.acc_alpha.data.iter().all(|&a| a == 0.0) && empty.color.data.iter().all(|p| *p == [0.0; 3]),
    );

    let full = Image::filled(20, 12, 1.0);
    let mut band = true;
    for r in 0..4 {
        let m = interior_mask(&full, 0.5, r);
        for y in 0..12 {
            for x in 0..20 {
                band &= *m.get(x, y) == (x >= r && y >= r && x + r < 20 && y + r < 12);
            }
        }
    }
    c.check("full support erodes a border band", band);
    let mut lone = Image::filled(9, 9, 0.0);
    *lone.get_mut(4, 4) = 1.0;
    c.check("single pixel vanishes at r=1", interior_mask(&lone, 0.5, 1).count() == 0);

    let (gs, scam, view) = render_scene(4);
    let out = render(&gs, &scam, &view, &cfg).unwrap();
    let mask = Image::filled(16, 16, true);
    let w = LossWeights::default();
    let l = losses(&out, &out.color, &out.depth, &mask, &w).unwrap();
    c.check("perfect reconstruction has zero loss", l.rgb.abs() < 1e-9 && l.depth.abs() < 1e-9 && l.ssim.abs() < 1e-9);
    let mut shifted = render(&[], &scam, &view, &cfg).unwrap();
    shifted.color = Image::filled(16, 16, [0.4, 0.6, 0.8]);
    let zero_depth: GrayImage = Image::filled(16, 16, 0.0);
    let l = losses(&shifted, &Image::filled(16, 16, [0.3, 0.5, 0.7]), &zero_depth, &mask, &w).unwrap();
    c.check("constant 0.1 offset has L1 0.1", (l.rgb - 0.1).abs() < 1e-12);
    let (_, _, grads) = loss_and_grad(&gs, &scam, &view, &out.color, &out.depth, &mask, &w, &cfg).unwrap();
    c.check("perfect fit has zero gradients", grads.iter().all(|g| g.max_abs() < 1e-9));
    let mut frozen = gs.clone();
    frozen[0].frozen = true;
    let gt = Image::filled(16, 16, [0.9, 0.1, 0.3]);
    let gd = Image::filled(16, 16, 2.0);
    let (_, _, grads) = loss_and_grad(&frozen, &scam, &view, &gt, &gd, &mask, &w, &cfg).unwrap();
    c.check("frozen Gaussian has zero gradient", grads[0].is_zero());

    let a = Image::filled(8, 8, [0.2, 0.4, 0.6]);
    c.check("identical images give PSNR 99 and SSIM 1", psnr(&a, &a) == 99.0 && (ssim(&a, &a) - 1.0).abs() < 1e-12);
    let b = Image::filled(8, 8, [0.3, 0.5, 0.7]);
    c.check("0.1 offset gives PSNR 20", (psnr(&a, &b) - 20.0).abs() < 1e-9);
}

fn segment(id: u32, means: &[Vector3<f64>]) -> Segment {
    Segment {
        id,
        loopframe_index: id as usize * 10,
        gaussians: means
            .iter()
            .map(|m| Gaussian::isotropic(*m, 0.05, 0.5, Vector3::repeat(0.5), 1))
            .collect(),
        anchor_pose: Pose::identity(),
        correction: Pose::identity(),
        counts: SourceCounts {
            model: 0,
            pca: 0,
            heuristic: means.len(),
        },
        beta: 1.0,
        keyframes: vec![],
    }
}

fn target_view(gs: &[Gaussian], cam: &Camera, pose: Pose) -> TrainView {
    let out = render(gs, cam, &pose, &RenderConfig::default()).unwrap();
    TrainView {
        frame_index: 0,
        segment_id: 0,
        pose,
        rgb: Arc::new(out.color),
        depth: Arc::new(out.depth),
    }
}

fn trivial_map(c: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cloud: Vec<Vector3<f64>> = (0..200)
        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)))
        .collect();
    let mut map = GlobalMap::new(0.05);
    c.check("empty map accepts all", map.insert_segment(&segment(0, &cloud), 0.05) == 200);
    c.check("identical segment adds nothing", map.insert_segment(&segment(1, &cloud), 0.05) == 0);

    c.check("no history draws recent", sample_views(6, 10, 0.3, 100, &mut rng).iter().all(|&v| v < 6));
    c.check("ratio 1 draws recent", sample_views(30, 10, 1.0, 1000, &mut rng).iter().all(|&v| v >= 20));

    let mut map = GlobalMap::new(0.05);
    for s in 0..2 {
        map.insert_segment(&segment(s, &[Vector3::new(s as f64, 0.0, 0.0)]), 0.05);
    }
    map.apply_freeze_policy(3);
    c.check("two segments with K=3 stay active", map.gaussians.iter().all(|g| !g.frozen));
    for s in 2..5 {
        map.insert_segment(&segment(s, &[Vector3::new(s as f64, 0.0, 0.0)]), 0.05);
    }
    map.apply_freeze_policy(2);
    let frozen: Vec<bool> = map.gaussians.iter().map(|g| g.frozen).collect();
    c.check("five segments with K=2 freeze the first three", frozen == vec![true, true, true, false, false]);
    map.correct_segment(4, &Pose::from_translation(Vector3::new(0.0, 1.0, 0.0)));
    c.check("correction leaves freezing alone", map.gaussians.iter().map(|g| g.frozen).collect::<Vec<_>>() == frozen);

    let cam = Camera::new(20.0, 20.0, 7.5, 7.5, 16, 16);
    let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.3, 0.9, Vector3::new(0.3, 0.6, 0.2), 1);
    let mut map = GlobalMap::new(0.05);
    map.insert_segment(&segment(0, &[]), 0.05);
    map.gaussians.push(g.clone());
    map.add_view(target_view(&map.gaussians, &cam, Pose::identity()));
    let before = map.gaussians.clone();
    let mut state = AdamState::default();
    let rec = optimize_step(&mut map, &[0], &cam, &OptimConfig::default(), &mut state).unwrap();
    c.check("zero gradient keeps parameters bitwise", rec.updated == 0 && map.gaussians == before);

    let mut map = GlobalMap::new(0.05);
    map.insert_segment(&segment(0, &[]), 0.05);
    map.add_view(target_view(std::slice::from_ref(&g), &cam, Pose::identity()));
    let mut moved = g;
    moved.mean.x += 0.05;
    moved.frozen = true;
    map.gaussians.push(moved);
    let before = map.gaussians.clone();
    let rec = optimize_step(&mut map, &[0], &cam, &OptimConfig::default(), &mut state).unwrap();
    c.check("frozen map is untouched but reports loss", rec.loss.total > 0.0 && map.gaussians == before);

    let means: Vec<Vector3<f64>> = (0..100).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
    let mut map = GlobalMap::new(0.05);
    map.insert_segment(&segment(0, &means), 0.05);
    c.check("opaque map prunes nothing", map.prune(0.05, 0.1, &mut state) == 0);
    for (i, g) in map.gaussians.iter_mut().enumerate() {
        g.opacity_logit = logit(0.001 + 0.0001 * ((i * 37) % 100) as f64);
    }
    let mut order: Vec<(f64, u64)> = map.gaussians.iter().map(|g| (g.opacity(), g.id)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let lowest: Vec<u64> = order[..10].iter().map(|o| o.1).collect();
    let removed = map.prune(0.05, 0.1, &mut state);
    c.check(
        "ratio 0.1 removes the ten lowest",
        removed == 10 && map.gaussians.iter().all(|g| !lowest.contains(&g.id)),
    );
    let mut map = GlobalMap::new(0.05);
    map.insert_segment(&segment(0, &means[..20]), 0.05);
    map.gaussians.iter_mut().for_each(|g| g.opacity_logit = logit(0.01));
    c.check("ties prune lower index first", map.prune(0.05, 0.1, &mut state) == 2 && map.gaussians[0].id == 2);
}

pub fn wall_fixture(seed: u64) -> Vec<Gaussian> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(500);
    let flat = |mean: Vector3<f64>, normal_axis: usize| {
        let mut g = Gaussian::isotropic(mean, 0.05, 0.8, Vector3::repeat(0.5), 0);
        g.log_scale[normal_axis] = 0.005f64.ln();
        g
    };
    for _ in 0..200 {
        out.push(flat(Vector3::new(rng.random_range(0.0..4.0), 0.0, rng.random_range(0.0..2.5)), 1));
    }
    for _ in 0..200 {
        out.push(flat(Vector3::new(0.0, rng.random_range(0.0..4.0), rng.random_range(0.0..2.5)), 0));
    }
    for _ in 0..100 {
        out.push(flat(Vector3::new(rng.random_range(0.2..4.0), rng.random_range(0.2..4.0), 0.0), 2));
    }
    out
}

fn transformed(gs: &[Gaussian], t: &Pose) -> Vec<Gaussian> {
    gs.iter()
        .map(|g| {
            let mut h = g.clone();
            h.mean = t.transform_point(&g.mean);
            h.rotation = t.rotation * g.rotation;
            h
        })
        .collect()
}

fn trivial_loop(c: &mut Checks) {
    let line: Vec<Pose> = (0..40).map(|i| Pose::from_translation(Vector3::new(i as f64 * 2.0, 0.0, 0.0))).collect();
    c.check("straight line has no loop candidate", find_candidates(&line, 39, 10.0, 20).is_empty());
    let mut square: Vec<Pose> = (0..40)
        .map(|i| {
            let s = i as f64 / 10.0;
            let (x, y) = match s as usize {
                0 => (s * 20.0, 0.0),
                1 => (20.0, (s - 1.0) * 20.0),
                2 => (20.0 - (s - 2.0) * 20.0, 20.0),
                _ => (0.0, 20.0 - (s - 3.0) * 20.0),
            };
            Pose::from_translation(Vector3::new(x, y, 0.0))
        })
        .collect();
    square.push(Pose::from_translation(Vector3::new(0.5, 0.0, 0.0)));
    c.check(
        "closing a square finds the start",
        find_candidates(&square, 40, 10.0, 20).first().map(|c| c.historical) == Some(0),
    );
    let close = [Pose::identity(), Pose::from_translation(Vector3::new(0.1, 0.0, 0.0))];
    c.check("adjacent loopframe is gated by min_gap", find_candidates(&close, 1, 10.0, 20).is_empty());

    let cam = Camera::with_hfov(64, 48, 1.2);
    let views = [Pose::identity()];
    let at = |z: f64| Gaussian::isotropic(Vector3::new(0.0, 0.0, z), 0.1, 0.5, Vector3::repeat(0.5), 0);
    c.check(
        "behind the camera is excluded",
        matches!(extract_target_set(&[at(-2.0)], &views, &cam, 30.0, &[]), Err(LoopError::EmptyTarget)),
    );
    c.check(
        "beyond max distance is excluded",
        matches!(extract_target_set(&[at(31.0)], &views, &cam, 30.0, &[]), Err(LoopError::EmptyTarget)),
    );
    c.check(
        "inside max distance is included",
        extract_target_set(&[at(29.0)], &views, &cam, 30.0, &[]).ok() == Some(vec![0]),
    );

    let r = regularize_covariance(&Matrix3::identity());
    let mut ev: Vec<f64> = r.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    c.check(
        "identity regularizes to {1e-3, 1, 1}",
        (ev[0] - 1e-3).abs() < 1e-9 && (ev[1] - 1.0).abs() < 1e-9 && (ev[2] - 1.0).abs() < 1e-9,
    );

    let walls = wall_fixture(1);
    let lc = LoopConfig::default();
    let res = gaussian_gicp(&walls, &walls, &Pose::identity(), &lc);
    c.check(
        "self-registration is identity",
        res.is_ok_and(|r| r.converged && r.iterations <= 2 && r.residual < 1e-9 && r.transform.log().norm() < 1e-12),
    );
    let far = transformed(&walls, &Pose::from_translation(Vector3::new(50.0, 0.0, 0.0)));
    c.check(
        "disjoint rooms have no correspondences",
        matches!(gaussian_gicp(&far, &walls, &Pose::identity(), &lc), Err(LoopError::NoCorrespondences)),
    );
    let base = GicpResult {
        transform: Pose::identity(),
        residual: 0.1,
        iterations: 3,
        converged: true,
        correspondences: 200,
        history: vec![],
    };
    c.check("converged low residual is accepted", accept_loop(&base, 0.5, 50));
    c.check(
        "unconverged is rejected",
        !accept_loop(
            &GicpResult {
                converged: false,
                residual: 0.01,
                ..base.clone()
            },
            0.5,
            50,
        ),
    );
    c.check(
        "too few correspondences is rejected",
        !accept_loop(
            &GicpResult {
                correspondences: 3,
                ..base
            },
            0.5,
            50,
        ),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut nodes = vec![Pose::identity()];
    for _ in 0..5 {
        let step = Pose::exp(&Vector6::from_fn(|_, _| rng.random_range(-0.3..0.3)));
        nodes.push(nodes.last().unwrap().compose(&step));
    }
    let chain = PoseGraph::chain(nodes.clone(), Matrix6::identity());
    c.check(
        "consistent odometry chain equals dead reckoning",
        chain.optimize(&SolverConfig::default()).is_ok_and(|r| r.poses == nodes),
    );

    let mut map = GlobalMap::new(0.05);
    map.insert_segment(&segment(0, &[Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 1.0)]), 0.05);
    map.insert_segment(&segment(1, &[Vector3::new(5.0, 0.0, 1.0)]), 0.05);
    map.gaussians[2].rotation = UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3);
    let before = map.gaussians.clone();
    let poses = vec![Pose::identity(), Pose::from_translation(Vector3::new(3.0, 0.1, 0.0))];
    propagate_correction(&mut map, &poses, &poses);
    c.check("identity correction leaves the map bitwise", map.gaussians == before);
    let t = Vector3::new(0.25, -0.5, 0.125);
    let moved = vec![poses[0], Pose::from_translation(poses[1].translation + t)];
    propagate_correction(&mut map, &poses, &moved);
    c.check(
        "translation correction shifts one segment",
        map.gaussians[..2] == before[..2]
            && map.gaussians[2].mean == before[2].mean + t
            && map.gaussians[2].rotation == before[2].rotation,
    );
}

fn trivial_pipeline(c: &mut Checks) {
    use splatslam::pipeline::synth::{NoiseSpec, TrajectorySpec};
    let base = SynthConfig {
        camera: Camera::with_hfov(24, 16, 90f64.to_radians()),
        points_per_frame: 100,
        trajectory: TrajectorySpec {
            laps: 0.02,
            ..Default::default()
        },
        ..Default::default()
    };
    let zero = SynthConfig {
        noise: NoiseSpec {
            range_sigma: 0.0,
            drift_translation: 0.0,
            drift_rotation: 0.0,
        },
        ..base.clone()
    };
    let dir = tempfile::tempdir().unwrap();
    synth_generate(&zero, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    c.check("zero drift odometry equals ground truth", ds.odometry == ds.ground_truth);

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth_generate(&base, a.path()).unwrap();
    synth_generate(&base, b.path()).unwrap();
    c.check("same seed gives identical datasets", tree_equal(a.path(), b.path()));
}

fn tree_equal(a: &Path, b: &Path) -> bool {
    let mut files = Vec::new();
    let mut stack = vec![a.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    !files.is_empty()
        && files.iter().all(|p| {
            let rel = p.strip_prefix(a).unwrap();
            std::fs::read(p).ok() == std::fs::read(b.join(rel)).ok()
        })
}

fn a1() -> Outcome {
    let start = Instant::now();
    let mut c = Checks::default();
    pca_oracle(&mut c);
    let mc = descriptor_monte_carlo(&mut c);
    trivial_geom(&mut c);
    trivial_voxel(&mut c);
    trivial_init(&mut c);
    trivial_render(&mut c);
    trivial_map(&mut c);
    trivial_loop(&mut c);
    trivial_pipeline(&mut c);
    let (ok, t) = within_time(start, Duration::from_secs(60));
    c.check("runtime under 1 min", ok);
    c.outcome(&format!("{mc}, {t}"))
}

// ---------------------------------------------------------------- A2

fn a2() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut bad = Vec::new();
    for seed in 0..20 {
        let scene = GradScene::random(seed, 5, 16);
        let r = check_gradients(&scene, &LossWeights::default(), &RenderConfig::untruncated(), 1e-4, 1e-3, 1e-6);
        checked += r.checked;
        worst = worst.max(r.max_rel_error);
        for m in r.mismatches {
            bad.push(format!(
                "seed {seed} gaussian {} {}: {:.3e} vs {:.3e}",
                m.gaussian, m.parameter, m.analytic, m.numeric
            ));
        }
    }
    let (in_time, t) = within_time(start, Duration::from_secs(120));
    let mut detail = format!("{checked} parameters, max relative error {worst:.2e}, {} mismatches, {t}", bad.len());
    if !bad.is_empty() {
        detail.push_str(&format!(", first: {}", bad[0]));
    }
    Outcome::new(bad.is_empty() && in_time && checked > 0, detail)
}

// ---------------------------------------------------------------- shared dataset

/// The default synthetic looped dataset, generated once per process.
fn looped_dataset() -> &'static Dataset {
    static DATA: OnceLock<(tempfile::TempDir, Dataset)> = OnceLock::new();
    &DATA
        .get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            synth_generate(&SynthConfig::default(), dir.path()).unwrap();
            let ds = Dataset::open(dir.path()).unwrap();
            (dir, ds)
        })
        .1
}

fn run_with(ds: &Dataset, overrides: &[&str]) -> RunOutput {
    let cfg = RunConfig::default().with_overrides(overrides).unwrap();
    run_pipeline(ds, &cfg).unwrap()
}

// ---------------------------------------------------------------- A3

fn a3() -> Outcome {
    let start = Instant::now();
    let ds = looped_dataset();
    let drift = ds.meta.synth.as_ref().map_or(f64::NAN, |s| s.noise.drift_translation);
    let loop_cfg = ["loop_closure.covariance=neighborhood", "loop_closure.min_overlap=0.5"];
    let on_overrides: Vec<&str> = ["pipeline.steps_per_frame=1"].into_iter().chain(loop_cfg).collect();
    let on = run_with(ds, &on_overrides);
    let off = run_with(ds, &["pipeline.step_budget=0", "loop_closure.enabled=false"]);
    let (ron, roff) = (&on.report, &off.report);
    let ratio = ron.ate / roff.ate;
    let within: Vec<bool> = ron
        .loop_rotation_errors_deg
        .iter()
        .zip(&ron.loop_translation_errors)
        .map(|(r, t)| *r <= 2.0 && *t <= 0.1)
        .collect();
    let rot = ron.loop_rotation_errors_deg.iter().copied().fold(0.0, f64::max);
    let trans = ron.loop_translation_errors.iter().copied().fold(0.0, f64::max);
    let loops_ok = ron.loops_accepted > 0 && within.iter().all(|&w| w);
    let (in_time, t) = within_time(start, Duration::from_secs(600));
    Outcome::new(
        (drift - 0.02).abs() < 1e-12 && (roff.ate - ron.ate_odometry).abs() < 1e-9 && ratio < 0.5 && loops_ok && in_time,
        format!(
            "ATE on {:.3} m, off {:.3} m, ratio {ratio:.3} (need < 0.5); {} loops accepted, {} within 2 deg / 0.1 m of ground truth, worst {rot:.2} deg / {trans:.3} m; {t}",
            ron.ate,
            roff.ate,
            ron.loops_accepted,
            within.iter().filter(|&&w| w).count()
        ),
    )
}

// ---------------------------------------------------------------- A4

fn a4() -> Outcome {
    let start = Instant::now();
    let tar = wall_fixture(2);
    let truth = Pose::new(yaw(5f64.to_radians()), Vector3::new(0.3, 0.0, 0.0));
    let src = transformed(&tar, &truth.inverse());
    let res = gaussian_gicp(&src, &tar, &Pose::identity(), &LoopConfig::default());
    let (in_time, t) = within_time(start, Duration::from_secs(10));
    match res {
        Ok(r) => {
            let (da, dt) = (r.transform.angle_to(&truth), r.transform.distance_to(&truth));
            Outcome::new(
                tar.len() == 500 && da < 1e-3 && dt < 1e-3 && in_time,
                format!("rotation error {da:.2e} rad, translation error {dt:.2e} m, {} iterations, {t}", r.iterations),
            )
        }
        Err(e) => Outcome::new(false, format!("registration failed: {e}")),
    }
}

// ---------------------------------------------------------------- A5

fn a5() -> Outcome {
    let start = Instant::now();
    let ds = looped_dataset();
    let common = ["pipeline.max_frames=200", "pipeline.step_budget=2000", "loop_closure.enabled=false"];
    let psnr_of = |extra: &[&str]| {
        let overrides: Vec<&str> = common.iter().chain(extra).copied().collect();
        let out = run_with(ds, &overrides);
        assert!(!out.report.holdout_leak);
        out.report.eval.map_or(f64::NAN, |e| e.psnr_mean)
    };
    let cascade = psnr_of(&[]);
    let heuristic = psnr_of(&["pipeline.heuristic_only=true"]);
    let before = psnr_of(&["pipeline.step_budget=0"]);
    let (in_time, t) = within_time(start, Duration::from_secs(900));
    Outcome::new(
        cascade >= heuristic + 0.5 && cascade >= before + 3.0 && in_time,
        format!(
            "held-out PSNR cascade {cascade:.2} dB, heuristic-only {heuristic:.2} dB (margin {:+.2}), before optimization {before:.2} dB (gain {:+.2}); {t}",
            cascade - heuristic,
            cascade - before
        ),
    )
}

// ---------------------------------------------------------------- A6

fn a6() -> Outcome {
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut monotone = true;
    for _ in 0..200 {
        let density = rng.random_range(0.3..1.0);
        let acc: GrayImage = Image::from_fn(24, 20, |_, _| {
            if rng.random_bool(density) {
                rng.random_range(0.5..1.0)
            } else {
                rng.random_range(0.0..0.6)
            }
        });
        let counts: Vec<usize> = (0..=4).rev().map(|r| interior_mask(&acc, 0.5, r).count()).collect();
        monotone &= counts.windows(2).all(|w| w[1] >= w[0]);
        let inner = interior_mask(&acc, 0.5, 4);
        let outer = interior_mask(&acc, 0.5, 0);
        monotone &= inner.data.iter().zip(&outer.data).all(|(&i, &o)| !i || o);
    }
    c.check("shrinking the radius from 4 to 0 never loses pixels", monotone);

    let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.5, 0.9, Vector3::new(0.3, 0.6, 0.2), 1);
    let cam = Camera::new(20.0, 20.0, 7.5, 7.5, 16, 16);
    let out = render(std::slice::from_ref(&g), &cam, &Pose::identity(), &RenderConfig::default()).unwrap();
    let mask = interior_mask(&out.acc_alpha, 0.5, 2);
    let gt: RgbImage = Image::from_fn(16, 16, |x, y| [0.1 * (x % 5) as f64, 0.05 * (y % 7) as f64, 0.3]);
    let gd: GrayImage = Image::from_fn(16, 16, |x, _| 1.0 + 0.1 * x as f64);
    let w = LossWeights::default();
    let base = losses(&out, &gt, &gd, &mask, &w).unwrap();
    let mut gt2 = gt.clone();
    let mut gd2 = gd.clone();
    for (i, m) in mask.data.iter().enumerate() {
        if !m {
            gt2.data[i] = [1.0, 0.0, 1.0];
            gd2.data[i] = 9.0;
        }
    }
    let altered = losses(&out, &gt2, &gd2, &mask, &w).unwrap();
    c.check(
        "pixels outside the interior mask do not change the loss",
        mask.count() > 0 && mask.count() < 256 && base == altered,
    );

    let mut counts = Vec::new();
    for r in (0..=4).rev() {
        let mut map = GlobalMap::new(0.05);
        map.insert_segment(&segment(0, &[]), 0.05);
        map.add_view(target_view(std::slice::from_ref(&g), &cam, Pose::identity()));
        let mut start = g.clone();
        start.mean.x += 0.1;
        map.gaussians.push(start);
        let ocfg = OptimConfig {
            erode_radius: r,
            ..Default::default()
        };
        let rec = optimize_step(&mut map, &[0], &cam, &ocfg, &mut AdamState::default()).unwrap();
        counts.push(rec.supervised_pixels);
    }
    c.check("optimizer supervised pixels grow as the radius shrinks", counts.windows(2).all(|w| w[1] >= w[0]));
    c.outcome(&format!("supervised pixels for radius 4..0: {counts:?}"))
}

// ---------------------------------------------------------------- A7

fn a7() -> Outcome {
    let start = Instant::now();
    let ds = looped_dataset();
    let streaming = run_with(ds, &["pipeline.mode=streaming", "pipeline.max_frames=200"]);
    let t = &streaming.timing;
    let rtf_ok = t.realtime_factor.is_finite() && t.realtime_factor > 0.0 && streaming.report.frames == 200;
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str| -> PathBuf {
        let out = run_with(ds, &["pipeline.max_frames=60", "pipeline.steps_per_frame=3"]);
        let p = dir.path().join(name);
        out.write(&p, ds.camera()).unwrap();
        p.join("report.json")
    };
    let (a, b) = (write("a"), write("b"));
    let identical = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    let (_, took) = within_time(start, Duration::from_secs(3600));
    Outcome::new(
        rtf_ok && identical,
        format!(
            "streaming real-time factor {:.2} ({:.1} s wall for {:.1} s of stream, optimizer factor {:.2}); deterministic reports identical: {identical}; {took}",
            t.realtime_factor, t.wall_seconds, t.stream_seconds, t.optimizer_realtime_factor
        ),
    )
}

// ---------------------------------------------------------------- A8

fn a8() -> Outcome {
    let gt: Vec<Pose> = (0..4)
        .map(|k| {
            let corner = [(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)][k];
            Pose::new(yaw(k as f64 * std::f64::consts::FRAC_PI_2), Vector3::new(corner.0, corner.1, 0.0))
        })
        .collect();
    let mut g = PoseGraph::new(vec![Pose::identity(); 4]);
    for i in 0..3 {
        g.add_edge(i, i + 1, gt[i].inverse().compose(&gt[i + 1]), Matrix6::identity(), EdgeKind::Odometry);
    }
    g.add_edge(3, 0, gt[3].inverse().compose(&gt[0]), Matrix6::identity() * 10.0, EdgeKind::Loop);
    g.nodes[0] = gt[0];
    for i in 0..3 {
        let z = g.edges[i].measurement;
        let corrupted = Pose::new(yaw(2f64.to_radians()) * z.rotation, z.translation);
        g.nodes[i + 1] = g.nodes[i].compose(&corrupted);
    }
    let initial = g.nodes.iter().zip(&gt).map(|(p, t)| p.distance_to(t)).fold(0.0, f64::max);
    match g.optimize(&SolverConfig::default()) {
        Ok(rep) => {
            let err = rep
                .poses
                .iter()
                .zip(&gt)
                .map(|(p, t)| p.distance_to(t).max(p.angle_to(t)))
                .fold(0.0, f64::max);
            let monotone = rep.costs.windows(2).all(|w| w[1] <= w[0]);
            Outcome::new(
                err < 1e-6 && monotone && initial > 0.05,
                format!(
                    "initial error {initial:.3} m, final error {err:.2e}, cost {:.3e} -> {:.3e} over {} accepted steps, monotone: {monotone}",
                    rep.initial_cost,
                    rep.final_cost,
                    rep.costs.len().saturating_sub(1)
                ),
            )
        }
        Err(e) => Outcome::new(false, format!("solver failed: {e}")),
    }
}

// ---------------------------------------------------------------- A9

fn a9() -> Outcome {
    let cam = Camera::with_hfov(64, 48, 1.2);
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
    let (d_max, excluded) = (15.0, 2u32);
    let got = extract_target_set(&gs, &views, &cam, d_max, &[excluded]).unwrap_or_default();
    let expected: Vec<usize> = gs
        .iter()
        .enumerate()
        .filter(|(_, g)| g.segment_id != excluded)
        .filter(|(_, g)| {
            views.iter().any(|v| {
                let pc = v.rotation_matrix().transpose() * (g.mean - v.translation);
                let u = cam.fx * pc.x / pc.z + cam.cx;
                let w = cam.fy * pc.y / pc.z + cam.cy;
                let inside = pc.z > 0.0 && (0.0..64.0).contains(&u) && (0.0..48.0).contains(&w);
                inside && (g.mean - v.translation).norm() < d_max
            })
        })
        .map(|(i, _)| i)
        .collect();
    Outcome::new(
        got == expected && !expected.is_empty(),
        format!("{} of 1000 Gaussians selected, oracle {}", got.len(), expected.len()),
    )
}

fn main() {
    let filter: Option<Vec<String>> = std::env::var("SPLATSLAM_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').map(|t| t.trim().to_uppercase()).collect());
    let criteria: [(&str, &str, fn() -> Outcome); 9] = [
        ("A1", "numerical core", a1),
        ("A2", "gradient correctness", a2),
        ("A3", "loop closure efficacy", a3),
        ("A4", "GICP recovery", a4),
        ("A5", "cascaded initialization improves rendering", a5),
        ("A6", "masked loss", a6),
        ("A7", "real-time factor and determinism", a7),
        ("A8", "pose-graph solver", a8),
        ("A9", "target-set extraction", a9),
    ];
    let mut failures = 0;
    for (id, title, run) in criteria {
        if filter.as_ref().is_some_and(|f| !f.iter().any(|x| x == id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        if !outcome.passed {
            failures += 1;
        }
        println!(
            "{id} {} {title} ({:.1}s): {}",
            if outcome.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            outcome.detail
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        if std::env::var_os("SPLATSLAM_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
