//! Adds an object without erasing anything first: the input frames serve as
//! the Replace backgrounds, so the new field composites over the original.
//!
//! cargo run --release --example object_addition -- [steps]

use ram3d::field::FieldConfig;
use ram3d::guidance::{OracleProvider, OracleTarget};
use ram3d::metrics::region_psnr;
use ram3d::objectives::{ConvFeatureExtractor, LuminanceDepth};
use ram3d::scene::ImageFrame;
use ram3d::synthetic::SyntheticConfig;
use ram3d::train::{RunOptions, Supervision, TrainConfig, Trainer};

fn main() -> ram3d::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let synthetic = SyntheticConfig::default();
    let scene = synthetic.build()?;
    let inputs: Vec<ImageFrame> = scene.dataset.frames.iter().map(|f| f.image.clone()).collect();

    // Target: a green tint over the masked region of each input.
    let targets: Vec<OracleTarget> = inputs
        .iter()
        .map(|img| {
            let mut t = img.clone();
            for px in t.data.chunks_mut(3) {
                px[0] *= 0.4;
                px[1] = 0.4 + 0.6 * px[1];
                px[2] *= 0.4;
            }
            OracleTarget::opaque(t)
        })
        .collect();
    let provider = OracleProvider::new(targets.clone(), 1)?;
    let extractor = ConvFeatureExtractor::new(7);
    let supervision = Supervision { provider: &provider, extractor: &extractor, depth: &LuminanceDepth };
    let config = TrainConfig { steps, ..TrainConfig::desk() };
    let field = synthetic.field_config(FieldConfig { mlp_hidden: 32, ..FieldConfig::desk() });
    let mut trainer = Trainer::replace(&scene.dataset, supervision, field, config, "a green glass orb", &inputs)?;
    let out = trainer.run(RunOptions::default())?;

    for (i, view) in out.views.iter().enumerate() {
        let frame = &scene.dataset.frames[i];
        let mut expected = frame.image.clone();
        for (r, c) in frame.regions.mask.pixels() {
            expected.set_pixel(r, c, targets[i].color.pixel(r, c));
        }
        println!(
            "view {i}: mask PSNR vs tinted target {:.2} dB",
            region_psnr(&view.image, &expected, &frame.regions.mask)?
        );
    }
    Ok(())
}
