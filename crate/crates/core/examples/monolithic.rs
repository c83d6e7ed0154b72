//! Single-field baseline: one field covers mask and halo and is guided
//! directly towards the edited composite.
//!
//! cargo run --release --example monolithic -- [steps]

use ram3d::field::FieldConfig;
use ram3d::guidance::OracleProvider;
use ram3d::metrics::{region_mse, region_psnr};
use ram3d::objectives::{ConvFeatureExtractor, LuminanceDepth};
use ram3d::synthetic::SyntheticConfig;
use ram3d::train::{RunOptions, Supervision, TrainConfig, Trainer};

fn main() -> ram3d::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let synthetic = SyntheticConfig::default();
    let scene = synthetic.build()?;
    let provider = OracleProvider::new(scene.replace_targets(), 1)?;
    let extractor = ConvFeatureExtractor::new(7);
    let supervision = Supervision { provider: &provider, extractor: &extractor, depth: &LuminanceDepth };
    let config = TrainConfig { steps, ..TrainConfig::desk() };
    let field = synthetic.field_config(FieldConfig { mlp_hidden: 32, ..FieldConfig::desk() });
    let mut trainer = Trainer::monolithic(&scene.dataset, supervision, field, config, "a red ball")?;
    let out = trainer.run(RunOptions::default())?;

    for (i, view) in out.views.iter().enumerate() {
        let regions = &scene.dataset.frames[i].regions;
        let truth = scene.composite(i);
        println!(
            "view {i}: mask PSNR {:.2} dB, halo MSE {:.2e}",
            region_psnr(&view.image, &truth, &regions.mask)?,
            region_mse(&view.image, &truth, &regions.halo)?
        );
    }
    Ok(())
}
