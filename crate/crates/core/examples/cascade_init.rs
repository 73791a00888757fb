//! Builds one segment from a textured wall, with and without model
//! attribute maps, and reports which branch produced each Gaussian.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatslam::gauss_init::{close_segment, Frame, InitConfig, PriorPoint, StubProvider};
use splatslam::geom::{Camera, Pose};
use splatslam::image::Image;
use splatslam::voxel_pca::{VoxelConfig, VoxelMap, WorldPoint};

fn main() -> anyhow::Result<()> {
    let cam = Camera::with_hfov(64, 48, 90f64.to_radians());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rgb = Image::from_fn(64, 48, |x, y| {
        let v = if (x / 8 + y / 8) % 2 == 0 { 0.8 } else { 0.2 };
        [v, 0.5 * v, 1.0 - v]
    });

    let mut points = Vec::new();
    for _ in 0..600 {
        let pix = Vector2::new(rng.random_range(0.0..63.0), rng.random_range(0.0..47.0));
        let depth = if pix.x < 32.0 { 3.0 } else { 3.0 + rng.random_range(-0.4..0.4) };
        let c = rgb.get(pix.x as usize, pix.y as usize);
        points.push(WorldPoint::new(cam.unproject(&pix, depth), Vector3::new(c[0], c[1], c[2]), 0.005));
    }
    let mut voxels = VoxelMap::new(VoxelConfig::default());
    voxels.extend(&points);
    let priors = voxels.annotate(&points);
    let frame = Frame {
        index: 0,
        timestamp: 0.0,
        pose: Pose::identity(),
        rgb: rgb.clone(),
        depth: Image::filled(64, 48, 3.0),
        points: points.iter().zip(priors).map(|(p, prior)| PriorPoint { point: *p, prior }).collect(),
    };

    let cfg = InitConfig::default();
    let stub = StubProvider::default();
    let maps = (stub.maps_for(&rgb), stub.maps_for(&rgb));
    for (label, m) in [("geometry only", None), ("with stub maps", Some(&maps))] {
        let seg = close_segment(0, &[&frame], &frame, &frame, m, &cam, &cfg)?;
        println!(
            "{label:>14}: {} Gaussians, model {} pca {} heuristic {}, beta {:.3}",
            seg.gaussians.len(),
            seg.counts.model,
            seg.counts.pca,
            seg.counts.heuristic,
            seg.beta
        );
    }
    Ok(())
}
