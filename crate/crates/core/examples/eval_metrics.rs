//! Scores an edit with the built-in projection embedding: the synthetic
//! input frames against the same frames with the sphere removed.
//!
//! cargo run --release --example eval_metrics

use ram3d::metrics::{prompt_sensitivity_report, EditCase, ProjectionEmbedding};
use ram3d::synthetic::SyntheticConfig;

fn main() -> ram3d::Result<()> {
    let scene = SyntheticConfig::default().build()?;
    let originals = scene.dataset.frames.iter().map(|f| f.image.clone()).collect();
    let case = EditCase {
        scene: "synthetic".into(),
        originals,
        edits: scene.backgrounds.clone(),
        src_prompt: "a ball on a textured floor".into(),
        phrasings: vec![
            "a textured floor".into(),
            "an empty textured floor".into(),
            "a floor with nothing on it".into(),
        ],
    };
    let embed = ProjectionEmbedding::new(64, 8, 0);
    let report = prompt_sensitivity_report(&[case], &embed)?;
    print!("{}", report.format_table());
    print!("{}", report.to_csv()?);
    Ok(())
}
