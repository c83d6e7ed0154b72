//! Writes the synthetic scene to disk in the dataset layout, loads it back
//! with a different halo width and prints the region and crop geometry.
//!
//! cargo run --release --example dataset_io -- [dir]

use std::path::PathBuf;

use ram3d::scene::{compute_crop, load_dataset, CropMode, DatasetConfig};
use ram3d::synthetic::SyntheticConfig;

fn main() -> ram3d::Result<()> {
    let root: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "synthetic_scene".into()).into();
    let scene = SyntheticConfig::default().build()?;
    scene.save(&root)?;
    println!("wrote {} frames to {}", scene.dataset.len(), root.display());

    let config = DatasetConfig {
        root: root.clone(),
        dilation_radius: 1,
        halo_width: 5,
        guidance_resolution: 64,
    };
    let dataset = load_dataset(&root, &config)?;
    for frame in &dataset.frames {
        let r = &frame.regions;
        let (w, h) = (frame.image.width, frame.image.height);
        let crop = compute_crop(r, w, h, CropMode::MaskAdaptive, config.guidance_resolution)?;
        println!(
            "{}: mask {} px, halo {} px, exterior {} px, crop {}px at ({}, {})",
            frame.name,
            r.mask.count(),
            r.halo.count(),
            r.exterior().count(),
            crop.side,
            crop.x0,
            crop.y0
        );
    }
    Ok(())
}
