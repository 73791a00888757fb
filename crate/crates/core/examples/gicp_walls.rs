//! Registers a corner of two walls and a floor against a displaced copy.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatslam::gaussian::Gaussian;
use splatslam::geom::Pose;
use splatslam::loop_graph::{accept_loop, gaussian_gicp, LoopConfig};

fn walls(seed: u64) -> Vec<Gaussian> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = |mean: Vector3<f64>, normal_axis: usize| {
        let mut g = Gaussian::isotropic(mean, 0.05, 0.8, Vector3::repeat(0.5), 0);
        g.log_scale[normal_axis] = 0.005f64.ln();
        g
    };
    let mut out = Vec::new();
    for _ in 0..200 {
        out.push(flat(Vector3::new(rng.random_range(0.0..4.0), 0.0, rng.random_range(0.0..2.5)), 1));
        out.push(flat(Vector3::new(0.0, rng.random_range(0.0..4.0), rng.random_range(0.0..2.5)), 0));
    }
    for _ in 0..100 {
        out.push(flat(Vector3::new(rng.random_range(0.2..4.0), rng.random_range(0.2..4.0), 0.0), 2));
    }
    out
}

fn main() -> anyhow::Result<()> {
    let target = walls(2);
    let truth = Pose::new(UnitQuaternion::from_euler_angles(0.0, 0.0, 5f64.to_radians()), Vector3::new(0.3, 0.0, 0.0));
    let inv = truth.inverse();
    let source: Vec<Gaussian> = target
        .iter()
        .map(|g| {
            let mut h = g.clone();
            h.mean = inv.transform_point(&g.mean);
            h.rotation = inv.rotation * g.rotation;
            h
        })
        .collect();
    let cfg = LoopConfig::default();
    let result = gaussian_gicp(&source, &target, &Pose::identity(), &cfg)?;
    println!(
        "{} iterations, residual {:.2e}, {} correspondences, accepted {}",
        result.iterations,
        result.residual,
        result.correspondences,
        accept_loop(&result, cfg.max_residual, cfg.min_correspondences)
    );
    println!(
        "rotation error {:.2e} rad, translation error {:.2e} m",
        result.transform.angle_to(&truth),
        result.transform.distance_to(&truth)
    );
    Ok(())
}
