//! Voxel PCA on a noisy plane, a noisy line and an isotropic blob.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use splatslam::voxel_pca::{analyze_voxel, geom_prior, VoxelConfig, WorldPoint};

type Sampler = Box<dyn Fn(&mut ChaCha8Rng) -> Vector3<f64>>;

fn main() {
    let cfg = VoxelConfig {
        require_mid_above_tau_p: true,
        ..Default::default()
    };
    let sigma = 0.005;
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let jitter = |rng: &mut ChaCha8Rng| Vector3::from_fn(|_, _| noise.sample(rng));

    let shapes: [(&str, Sampler); 3] = [
        ("plane", Box::new(|r| Vector3::new(r.random_range(0.0..0.45), r.random_range(0.0..0.45), 0.2))),
        ("line", Box::new(|r| Vector3::new(r.random_range(0.0..0.45), 0.2, 0.2))),
        (
            "blob",
            Box::new(|r| Vector3::new(r.random_range(0.0..0.45), r.random_range(0.0..0.45), r.random_range(0.0..0.45))),
        ),
    ];

    for (name, sample) in &shapes {
        let points: Vec<WorldPoint> = (0..150)
            .map(|_| {
                let p = sample(&mut rng) + jitter(&mut rng);
                WorldPoint::new(p, Vector3::repeat(0.5), sigma)
            })
            .collect();
        match analyze_voxel(&points, &cfg) {
            Ok(stats) => {
                let prior = geom_prior(&stats, cfg.eigen_floor);
                println!(
                    "{name:>5}: class {:?}, reliable {}, eigenvalues [{:.2e} {:.2e} {:.2e}], prior scales [{:.3} {:.3} {:.3}] m",
                    stats.class,
                    stats.reliable,
                    stats.eigenvalues[0],
                    stats.eigenvalues[1],
                    stats.eigenvalues[2],
                    prior.log_scale.x.exp(),
                    prior.log_scale.y.exp(),
                    prior.log_scale.z.exp(),
                );
            }
            Err(e) => println!("{name:>5}: {e}"),
        }
    }
}
