//! Guidance from another process. With `--serve` this program answers
//! provider requests on stdin/stdout using the synthetic oracle; without it,
//! it spawns itself in serve mode and trains a short Erase run through the pipe.
//!
//! cargo run --release --example external_provider -- [steps]

use ram3d::field::FieldConfig;
use ram3d::guidance::external::{serve, ChildTransport, ExternalProvider};
use ram3d::guidance::OracleProvider;
use ram3d::metrics::region_psnr;
use ram3d::objectives::ConvFeatureExtractor;
use ram3d::synthetic::SyntheticConfig;
use ram3d::train::{RunOptions, Supervision, TrainConfig, Trainer};

fn main() -> ram3d::Result<()> {
    let arg = std::env::args().nth(1);
    let synthetic = SyntheticConfig::default();
    let scene = synthetic.build()?;

    if arg.as_deref() == Some("--serve") {
        let oracle = OracleProvider::new(scene.erase_targets(), 1)?;
        return serve(&oracle, &mut std::io::stdin().lock(), &mut std::io::stdout().lock());
    }

    let steps: usize = arg.and_then(|s| s.parse().ok()).unwrap_or(100);
    let exe = std::env::current_exe().map_err(|e| ram3d::Error::io("current_exe", e))?;
    let transport = ChildTransport::spawn(&exe, &["--serve".to_string()])?;
    let provider = ExternalProvider::connect("oracle-subprocess", Box::new(transport))?;

    let extractor = ConvFeatureExtractor::new(7);
    let depth = scene.depth_oracle();
    let supervision = Supervision { provider: &provider, extractor: &extractor, depth: &depth };
    let config = TrainConfig { steps, ..TrainConfig::desk() };
    let field = synthetic.field_config(FieldConfig { mlp_hidden: 32, ..FieldConfig::desk() });
    let mut trainer = Trainer::erase(&scene.dataset, supervision, field, config)?;
    let out = trainer.run(RunOptions::default())?;
    for (i, view) in out.views.iter().enumerate() {
        let mask = &scene.dataset.frames[i].regions.mask;
        println!("view {i}: mask PSNR {:.2} dB", region_psnr(&view.image, &scene.backgrounds[i], mask)?);
    }
    Ok(())
}
