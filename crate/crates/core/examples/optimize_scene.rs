//! Fits a perturbed copy of a small scene to three rendered target views
//! with the sparse Adam optimizer.

use std::sync::Arc;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatslam::gauss_init::{Segment, SourceCounts};
use splatslam::gaussian::Gaussian;
use splatslam::geom::{Camera, Pose};
use splatslam::map_opt::{optimize_step, AdamState, GlobalMap, OptimConfig, TrainView};
use splatslam::splat_render::{psnr, render, RenderConfig};

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cam = Camera::with_hfov(48, 48, 70f64.to_radians());
    let truth: Vec<Gaussian> = (0..40)
        .map(|_| {
            let mean = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(3.0..4.0));
            let color = Vector3::new(rng.random(), rng.random(), rng.random());
            Gaussian::isotropic(mean, 0.2, 0.9, color, 1)
        })
        .collect();
    let poses: Vec<Pose> = [-0.3, 0.0, 0.3]
        .iter()
        .map(|&x| Pose::new(UnitQuaternion::from_euler_angles(0.0, -0.1 * x, 0.0), Vector3::new(x, 0.0, 0.0)))
        .collect();

    let start: Vec<Gaussian> = truth
        .iter()
        .map(|g| {
            let mut h = Gaussian::isotropic(g.mean, 0.15, 0.5, Vector3::repeat(0.5), 1);
            h.mean += Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05));
            h
        })
        .collect();
    let mut map = GlobalMap::new(1e-3);
    map.insert_segment(
        &Segment {
            id: 0,
            loopframe_index: 0,
            gaussians: start,
            anchor_pose: Pose::identity(),
            correction: Pose::identity(),
            counts: SourceCounts::default(),
            beta: 1.0,
            keyframes: vec![0, 1, 2],
        },
        1e-3,
    );
    let mut targets = Vec::new();
    for (k, pose) in poses.iter().enumerate() {
        let out = render(&truth, &cam, pose, &RenderConfig::default())?;
        targets.push(out.color.clone());
        map.add_view(TrainView {
            frame_index: k,
            segment_id: 0,
            pose: *pose,
            rgb: Arc::new(out.color),
            depth: Arc::new(out.depth),
        });
    }

    let cfg = OptimConfig::default();
    let mut state = AdamState::default();
    let score = |map: &GlobalMap| -> anyhow::Result<f64> {
        let mut total = 0.0;
        for (pose, target) in poses.iter().zip(&targets) {
            total += psnr(&render(&map.gaussians, &cam, pose, &cfg.render)?.color, target);
        }
        Ok(total / poses.len() as f64)
    };
    println!("step    0: mean psnr {:.2} dB", score(&map)?);
    for step in 1..=300 {
        let rec = optimize_step(&mut map, &[step % 3], &cam, &cfg, &mut state)?;
        if step % 100 == 0 {
            println!("step {step:>4}: loss {:.4}, mean psnr {:.2} dB", rec.loss.total, score(&map)?);
        }
    }
    Ok(())
}
