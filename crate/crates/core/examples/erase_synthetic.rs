//! Removes the sphere from the synthetic scene and reports how close the
//! inpainted background gets to the ground truth.
//!
//! cargo run --release --example erase_synthetic -- [steps]

use std::time::Instant;

use ram3d::field::FieldConfig;
use ram3d::guidance::OracleProvider;
use ram3d::metrics::{region_mse, region_psnr};
use ram3d::objectives::ConvFeatureExtractor;
use ram3d::synthetic::SyntheticConfig;
use ram3d::train::{RunOptions, Supervision, TrainConfig, Trainer};

fn main() -> ram3d::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let synthetic = SyntheticConfig::default();
    let scene = synthetic.build()?;
    let provider = OracleProvider::new(scene.erase_targets(), 1)?;
    let extractor = ConvFeatureExtractor::new(7);
    let depth = scene.depth_oracle();
    let supervision = Supervision {
        provider: &provider,
        extractor: &extractor,
        depth: &depth,
    };
    let config = TrainConfig {
        steps,
        ..TrainConfig::desk()
    };
    let field = synthetic.field_config(FieldConfig { mlp_hidden: 32, ..FieldConfig::desk() });
    let mut trainer = Trainer::erase(&scene.dataset, supervision, field, config)?;

    let start = Instant::now();
    let mut progress = |r: &ram3d::train::StepRecord| {
        if r.step % 50 == 0 {
            println!(
                "step {:5}  total {:.5}  distill {:.5}  recon {:.6}  depth {:.3}  ({:.1}s)",
                r.step,
                r.total,
                r.distill,
                r.recon,
                r.depth,
                start.elapsed().as_secs_f64()
            );
        }
    };
    let out = trainer.run(RunOptions {
        progress: Some(&mut progress),
        ..RunOptions::default()
    })?;
    println!("trained {steps} steps in {:.1}s", start.elapsed().as_secs_f64());
    for (i, view) in out.views.iter().enumerate() {
        let regions = &scene.dataset.frames[i].regions;
        println!(
            "view {i}: mask PSNR {:.2} dB, halo MSE {:.2e}",
            region_psnr(&view.image, &scene.backgrounds[i], &regions.mask)?,
            region_mse(&view.image, &scene.backgrounds[i], &regions.halo)?
        );
    }
    Ok(())
}
