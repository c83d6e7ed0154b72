//! Renders an analytic medium and a freshly initialized field through one
//! camera of the synthetic scene and writes the result as PNGs.
//!
//! cargo run --release --example volume_render -- [out_dir]

use std::path::PathBuf;

use ram3d::field::{Field, FieldConfig, FieldOutput};
use ram3d::render::{generate_rays, render_ray, stratified_samples, volume_render, Medium, SamplingConfig};
use ram3d::scene::{write_image, ImageFrame};
use ram3d::synthetic::SyntheticConfig;

/// Fog whose density grows towards the ground plane.
struct Fog;

impl Medium for Fog {
    fn query(&self, p: [f64; 3]) -> FieldOutput {
        let density = 0.6 * (-(p[2] + 1.0).max(0.0)).exp();
        FieldOutput { color: [0.7, 0.75, 0.8], density }
    }
}

fn main() -> ram3d::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "render_out".into()).into();
    let synthetic = SyntheticConfig { size: 48, views: 1, ..SyntheticConfig::default() };
    let camera = synthetic.camera(0);
    let (w, h) = (camera.width, camera.height);
    let pixels: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
    let rays = generate_rays(&camera, &pixels);

    let mut fog = ImageFrame::new(w, h);
    for (&(r, c), ray) in pixels.iter().zip(&rays) {
        let samples = stratified_samples(ray, 64, 0, false);
        fog.set_pixel(r, c, volume_render(&Fog, ray, &samples)?.rgb);
    }

    let field = Field::new(synthetic.field_config(FieldConfig::desk()))?;
    let params = field.init_params(1);
    let sampling = SamplingConfig { coarse_samples: 32, fine_samples: 32, jitter: false };
    let mut noise = ImageFrame::new(w, h);
    let mut alpha_sum = 0.0;
    for (&(r, c), ray) in pixels.iter().zip(&rays) {
        let (_, render) = render_ray(&field, &params, ray, &sampling, 0)?;
        noise.set_pixel(r, c, render.rgb);
        alpha_sum += render.alpha;
    }

    std::fs::create_dir_all(&out).map_err(|e| ram3d::Error::io(&out, e))?;
    write_image(&out.join("fog.png"), &fog)?;
    write_image(&out.join("untrained_field.png"), &noise)?;
    println!("mean alpha of the untrained field {:.3}", alpha_sum / pixels.len() as f64);
    println!("wrote {}", out.display());
    Ok(())
}
