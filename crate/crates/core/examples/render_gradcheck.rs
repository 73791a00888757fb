//! Renders a small random scene to PNG/PFM and checks the analytic
//! gradients of the training loss against central differences.

use splatslam::image::{write_pfm, write_png};
use splatslam::splat_render::gradcheck::{check_gradients, GradScene};
use splatslam::splat_render::{render, LossWeights, RenderConfig};

fn main() -> anyhow::Result<()> {
    let scene = GradScene::random(0, 8, 48);
    let out = render(&scene.gaussians, &scene.camera, &scene.view, &RenderConfig::default())?;
    let dir = std::env::temp_dir().join("splatslam_render_gradcheck");
    std::fs::create_dir_all(&dir)?;
    write_png(&dir.join("rgb.png"), &out.color)?;
    write_pfm(&dir.join("depth.pfm"), &out.depth)?;
    write_pfm(&dir.join("alpha.pfm"), &out.acc_alpha)?;
    println!("rendered {} Gaussians into {}", scene.gaussians.len(), dir.display());

    for seed in 0..5 {
        let small = GradScene::random(seed, 5, 16);
        let report = check_gradients(&small, &LossWeights::default(), &RenderConfig::untruncated(), 1e-4, 1e-3, 1e-6);
        println!(
            "seed {seed}: {} parameters, max relative error {:.2e}, {} mismatches",
            report.checked,
            report.max_rel_error,
            report.mismatches.len()
        );
    }
    Ok(())
}
