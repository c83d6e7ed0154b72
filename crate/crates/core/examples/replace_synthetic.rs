//! Puts the sphere back into the clean background as a separate foreground
//! field and measures how well its alpha is confined to the true silhouette.
//!
//! cargo run --release --example replace_synthetic -- [steps] [swap_interval]
//!
//! A swap interval of 0 turns background augmentation off.

use std::time::Instant;

use ram3d::field::FieldConfig;
use ram3d::guidance::OracleProvider;
use ram3d::metrics::region_psnr;
use ram3d::objectives::{ConvFeatureExtractor, LuminanceDepth};
use ram3d::synthetic::SyntheticConfig;
use ram3d::train::{RunOptions, Supervision, TrainConfig, Trainer};

fn main() -> ram3d::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(600);
    let interval: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);

    let synthetic = SyntheticConfig::default();
    let scene = synthetic.build()?;
    let provider = OracleProvider::new(scene.replace_targets(), 1)?;
    let extractor = ConvFeatureExtractor::new(7);
    let supervision = Supervision {
        provider: &provider,
        extractor: &extractor,
        depth: &LuminanceDepth,
    };
    let config = TrainConfig {
        steps,
        background_augmentation: interval > 0,
        bg_swap_interval: interval.max(1),
        ..TrainConfig::desk()
    };
    let field = synthetic.field_config(FieldConfig { mlp_hidden: 32, ..FieldConfig::desk() });
    let mut trainer = Trainer::replace(&scene.dataset, supervision, field, config, "a red ball", &scene.backgrounds)?;

    let start = Instant::now();
    let out = trainer.run(RunOptions::default())?;
    println!("trained {steps} steps in {:.1}s", start.elapsed().as_secs_f64());

    for (i, view) in out.views.iter().enumerate() {
        let frame = &scene.dataset.frames[i];
        let w = frame.image.width;
        let outside = frame.regions.mask.difference(&scene.silhouettes[i]);
        let outside_alpha =
            outside.pixels().iter().map(|&(r, c)| view.alpha[r * w + c]).sum::<f64>() / outside.count().max(1) as f64;
        println!(
            "view {i}: mask PSNR {:.2} dB, alpha outside silhouette {:.4}",
            region_psnr(&view.image, &scene.composite(i), &frame.regions.mask)?,
            outside_alpha
        );
    }
    Ok(())
}
