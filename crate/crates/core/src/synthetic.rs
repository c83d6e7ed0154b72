//! Analytic test scene: a shaded sphere floating in front of a smoothly
//! textured plane, seen by a handful of forward-facing cameras.
//!
//! Everything a real pipeline would need a pretrained network for is known in
//! closed form here: the clean background behind the object, the object's own
//! color and coverage, and background depth. That makes it a ground truth for
//! the reference providers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::guidance::OracleTarget;
use crate::objectives::OracleDepth;
use crate::scene::{
    compute_halo, dilate_mask, quantize, save_dataset, write_gray_png, write_rgb_png, Camera, ImageFrame,
    MaskFrame, SceneDataset, SceneFrame,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub size: usize,
    pub views: usize,
    pub focal: f64,
    pub sphere_center: [f64; 3],
    pub sphere_radius: f64,
    pub sphere_albedo: [f64; 3],
    /// z of the background plane.
    pub plane_z: f64,
    /// Spatial frequency multiplier of the plane texture.
    pub texture_frequency: f64,
    /// Camera orbit radius and total yaw sweep in radians.
    pub orbit_radius: f64,
    pub yaw_span: f64,
    pub near: f64,
    pub far: f64,
    /// Subsamples per pixel side.
    pub supersample: usize,
    pub dilation_radius: usize,
    pub halo_width: usize,
    pub guidance_resolution: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            size: 64,
            views: 6,
            focal: 48.0,
            sphere_center: [0.0, 0.0, 0.0],
            sphere_radius: 0.35,
            sphere_albedo: [0.9, 0.25, 0.2],
            plane_z: -1.0,
            texture_frequency: 1.0,
            orbit_radius: 3.0,
            yaw_span: 0.6,
            near: 2.0,
            far: 6.0,
            supersample: 4,
            dilation_radius: 2,
            halo_width: 3,
            guidance_resolution: 64,
        }
    }
}

impl SyntheticConfig {
    /// Field bounds that enclose the sphere and the visible part of the plane.
    pub fn field_config(&self, base: FieldConfig) -> FieldConfig {
        FieldConfig {
            bounds_min: [-1.6, -1.6, self.plane_z - 0.3],
            bounds_max: [1.6, 1.6, self.sphere_center[2] + self.sphere_radius + 0.5],
            ..base
        }
    }
}

/// A rendered synthetic scene together with its ground truth layers.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub config: SyntheticConfig,
    /// Input frames (8-bit quantized), dilated masks and halos.
    pub dataset: SceneDataset,
    /// The scene with the sphere removed.
    pub backgrounds: Vec<ImageFrame>,
    /// Sphere color averaged over the covered subsamples; 0 where uncovered.
    pub object_color: Vec<ImageFrame>,
    /// Fraction of each pixel covered by the sphere.
    pub coverage: Vec<Vec<f64>>,
    /// Pixels touched by the sphere at all.
    pub silhouettes: Vec<MaskFrame>,
    /// Ray distance to the background plane through each pixel centre.
    pub background_depth: Vec<Vec<f64>>,
}

const LIGHT: [f64; 3] = [0.4, 0.6, 0.7];

/// Background plane texture, low frequency so a small field can fit it.
pub fn plane_color(x: f64, y: f64) -> [f64; 3] {
    [
        0.45 + 0.2 * (1.7 * x + 0.3).sin() * (1.1 * y).cos(),
        0.55 + 0.15 * (1.3 * y - 0.5).cos(),
        0.4 + 0.2 * (0.9 * x + 1.2 * y).sin(),
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

struct Hit {
    t: f64,
    color: [f64; 3],
}

impl SyntheticConfig {
    pub fn camera(&self, view: usize) -> Camera {
        let phi = if self.views > 1 {
            -self.yaw_span / 2.0 + self.yaw_span * view as f64 / (self.views - 1) as f64
        } else {
            0.0
        };
        let eye = [
            self.orbit_radius * phi.sin(),
            0.3 * (3.0 * phi).cos() - 0.1,
            self.orbit_radius * phi.cos(),
        ];
        Camera::look_at(
            eye,
            [0.0, 0.0, -0.3],
            [0.0, 1.0, 0.0],
            self.size,
            self.size,
            self.focal,
            self.near,
            self.far,
        )
    }

    fn sphere_hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<Hit> {
        let c = self.sphere_center;
        let oc = [o[0] - c[0], o[1] - c[1], o[2] - c[2]];
        let b = dot(oc, d);
        let disc = b * b - (dot(oc, oc) - self.sphere_radius * self.sphere_radius);
        if disc < 0.0 {
            return None;
        }
        let t = -b - disc.sqrt();
        if t <= 0.0 {
            return None;
        }
        let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
        let n = [
            (p[0] - c[0]) / self.sphere_radius,
            (p[1] - c[1]) / self.sphere_radius,
            (p[2] - c[2]) / self.sphere_radius,
        ];
        let l = crate::scene::normalize(LIGHT);
        let shade = 0.35 + 0.65 * dot(n, l).max(0.0);
        let a = self.sphere_albedo;
        Some(Hit {
            t,
            color: [a[0] * shade, a[1] * shade, a[2] * shade],
        })
    }

    fn plane_hit(&self, o: [f64; 3], d: [f64; 3]) -> Hit {
        let t = (self.plane_z - o[2]) / d[2];
        let x = o[0] + t * d[0];
        let y = o[1] + t * d[1];
        Hit {
            t,
            color: plane_color(x * self.texture_frequency, y * self.texture_frequency),
        }
    }

    fn ray(&self, camera: &Camera, x: f64, y: f64) -> ([f64; 3], [f64; 3]) {
        let r = camera.rotation();
        let dc = [(x - camera.cx) / camera.fx, -(y - camera.cy) / camera.fy, -1.0];
        let d = [
            r[0][0] * dc[0] + r[0][1] * dc[1] + r[0][2] * dc[2],
            r[1][0] * dc[0] + r[1][1] * dc[1] + r[1][2] * dc[2],
            r[2][0] * dc[0] + r[2][1] * dc[1] + r[2][2] * dc[2],
        ];
        (camera.position(), crate::scene::normalize(d))
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.views == 0 || self.supersample == 0 {
            return Err(Error::Config("synthetic scene needs size, views and supersample > 0".into()));
        }
        if !(self.sphere_radius > 0.0) || self.sphere_center[2] - self.sphere_radius <= self.plane_z {
            return Err(Error::Config("sphere must float in front of the plane".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<SyntheticScene> {
        self.validate()?;
        let n = self.size;
        let ss = self.supersample;
        let mut frames = Vec::with_capacity(self.views);
        let mut backgrounds = Vec::with_capacity(self.views);
        let mut object_color = Vec::with_capacity(self.views);
        let mut coverage = Vec::with_capacity(self.views);
        let mut silhouettes = Vec::with_capacity(self.views);
        let mut background_depth = Vec::with_capacity(self.views);
        for view in 0..self.views {
            let camera = self.camera(view);
            let mut input = ImageFrame::new(n, n);
            let mut bg = ImageFrame::new(n, n);
            let mut obj = ImageFrame::new(n, n);
            let mut cov = vec![0.0; n * n];
            let mut depth = vec![0.0; n * n];
            for row in 0..n {
                for col in 0..n {
                    let mut bg_sum = [0.0; 3];
                    let mut obj_sum = [0.0; 3];
                    let mut hits = 0usize;
                    for sy in 0..ss {
                        for sx in 0..ss {
                            let x = col as f64 + (sx as f64 + 0.5) / ss as f64;
                            let y = row as f64 + (sy as f64 + 0.5) / ss as f64;
                            let (o, d) = self.ray(&camera, x, y);
                            let p = self.plane_hit(o, d);
                            for k in 0..3 {
                                bg_sum[k] += p.color[k];
                            }
                            if let Some(h) = self.sphere_hit(o, d) {
                                hits += 1;
                                for k in 0..3 {
                                    obj_sum[k] += h.color[k];
                                }
                            }
                        }
                    }
                    let total = (ss * ss) as f64;
                    let c = hits as f64 / total;
                    let bg_px = bg_sum.map(|v| v / total);
                    let obj_px = if hits > 0 {
                        obj_sum.map(|v| v / hits as f64)
                    } else {
                        [0.0; 3]
                    };
                    let mixed = [0, 1, 2].map(|k| c * obj_px[k] + (1.0 - c) * bg_px[k]);
                    input.set_pixel(row, col, mixed.map(|v| quantize(v) as f64 / 255.0));
                    bg.set_pixel(row, col, bg_px);
                    obj.set_pixel(row, col, obj_px);
                    cov[row * n + col] = c;
                    let (o, d) = self.ray(&camera, col as f64 + 0.5, row as f64 + 0.5);
                    depth[row * n + col] = self.plane_hit(o, d).t;
                }
            }
            let silhouette = MaskFrame::from_fn(n, n, |r, c| cov[r * n + c] > 0.0);
            let mask = dilate_mask(&silhouette, self.dilation_radius);
            let regions = compute_halo(&mask, self.halo_width);
            frames.push(SceneFrame {
                name: format!("frame_{view:03}.png"),
                image: input,
                camera,
                regions,
            });
            backgrounds.push(bg);
            object_color.push(obj);
            coverage.push(cov);
            silhouettes.push(silhouette);
            background_depth.push(depth);
        }
        let dataset = SceneDataset::new("synthetic-sphere", frames, self.guidance_resolution)?;
        Ok(SyntheticScene {
            config: self.clone(),
            dataset,
            backgrounds,
            object_color,
            coverage,
            silhouettes,
            background_depth,
        })
    }
}

impl SyntheticScene {
    /// Per-view targets for the Erase stage: the clean background.
    pub fn erase_targets(&self) -> Vec<OracleTarget> {
        self.backgrounds.iter().cloned().map(OracleTarget::opaque).collect()
    }

    /// Per-view targets for the Replace stage: the sphere layer with its coverage.
    pub fn replace_targets(&self) -> Vec<OracleTarget> {
        self.object_color
            .iter()
            .zip(&self.coverage)
            .map(|(color, cov)| OracleTarget {
                color: color.clone(),
                coverage: Some(cov.clone()),
            })
            .collect()
    }

    pub fn depth_oracle(&self) -> OracleDepth {
        OracleDepth {
            maps: self.background_depth.clone(),
        }
    }

    /// The sphere layer composited over the clean background, unquantized.
    pub fn composite(&self, view: usize) -> ImageFrame {
        let mut out = self.backgrounds[view].clone();
        let cov = &self.coverage[view];
        for (i, px) in out.data.chunks_exact_mut(3).enumerate() {
            let a = cov[i];
            for k in 0..3 {
                px[k] = a * self.object_color[view].data[i * 3 + k] + (1.0 - a) * px[k];
            }
        }
        out
    }

    /// Writes the dataset plus an `oracle/` directory holding the ground truth
    /// layers, in the format `OracleData::load` reads.
    pub fn save(&self, root: &Path) -> Result<()> {
        save_dataset(&self.dataset, root)?;
        OracleData {
            backgrounds: self.backgrounds.clone(),
            object_color: self.object_color.clone(),
            coverage: self.coverage.clone(),
            background_depth: self.background_depth.clone(),
        }
        .save(&root.join(ORACLE_DIR), &self.dataset)
    }
}

pub const ORACLE_DIR: &str = "oracle";

/// Ground truth layers stored next to a dataset on disk.
#[derive(Debug, Clone)]
pub struct OracleData {
    pub backgrounds: Vec<ImageFrame>,
    pub object_color: Vec<ImageFrame>,
    pub coverage: Vec<Vec<f64>>,
    pub background_depth: Vec<Vec<f64>>,
}

impl OracleData {
    pub fn save(&self, dir: &Path, dataset: &SceneDataset) -> Result<()> {
        for sub in ["background", "object", "coverage"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for (i, frame) in dataset.frames.iter().enumerate() {
            let (w, h) = (frame.image.width, frame.image.height);
            write_rgb_png(&dir.join("background").join(&frame.name), w, h, self.backgrounds[i].to_rgb8())?;
            write_rgb_png(&dir.join("object").join(&frame.name), w, h, self.object_color[i].to_rgb8())?;
            let cov: Vec<u8> = self.coverage[i].iter().map(|&c| quantize(c)).collect();
            write_gray_png(&dir.join("coverage").join(&frame.name), w, h, cov)?;
        }
        let path = dir.join("depth.json");
        let json = serde_json::to_vec(&self.background_depth).map_err(|e| Error::Parse {
            path: path.clone(),
            message: e.to_string(),
        })?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, dataset: &SceneDataset) -> Result<Self> {
        let mut data = OracleData {
            backgrounds: Vec::new(),
            object_color: Vec::new(),
            coverage: Vec::new(),
            background_depth: Vec::new(),
        };
        for frame in &dataset.frames {
            data.backgrounds
                .push(crate::scene::read_rgb_png(&dir.join("background").join(&frame.name))?);
            data.object_color
                .push(crate::scene::read_rgb_png(&dir.join("object").join(&frame.name))?);
            let (w, h, gray) = crate::scene::read_gray_png(&dir.join("coverage").join(&frame.name))?;
            if (w, h) != (frame.image.width, frame.image.height) {
                return Err(Error::Shape(format!("coverage for {} has the wrong size", frame.name)));
            }
            data.coverage.push(gray.iter().map(|&g| g as f64 / 255.0).collect());
        }
        let path = dir.join("depth.json");
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        data.background_depth = serde_json::from_slice(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if data.background_depth.len() != dataset.len() {
            return Err(Error::CountMismatch {
                what: "oracle depth maps".into(),
                expected: dataset.len(),
                found: data.background_depth.len(),
            });
        }
        Ok(data)
    }

    pub fn erase_targets(&self) -> Vec<OracleTarget> {
        self.backgrounds.iter().cloned().map(OracleTarget::opaque).collect()
    }

    pub fn replace_targets(&self) -> Vec<OracleTarget> {
        self.object_color
            .iter()
            .zip(&self.coverage)
            .map(|(color, cov)| OracleTarget {
                color: color.clone(),
                coverage: Some(cov.clone()),
            })
            .collect()
    }

    pub fn depth_oracle(&self) -> OracleDepth {
        OracleDepth {
            maps: self.background_depth.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SyntheticConfig {
        SyntheticConfig {
            size: 24,
            views: 3,
            focal: 24.0,
            supersample: 2,
            guidance_resolution: 24,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn sphere_is_visible_and_masked() {
        let scene = tiny().build().unwrap();
        for (i, frame) in scene.dataset.frames.iter().enumerate() {
            frame.camera.validate().unwrap();
            let sil = &scene.silhouettes[i];
            assert!(sil.count() > 4, "view {i} sees {} sphere pixels", sil.count());
            assert!(sil.is_subset_of(&frame.regions.mask));
            // centre of the image looks at the sphere
            assert!(sil.get(12, 12));
            assert!(!sil.get(0, 0));
        }
    }

    #[test]
    fn input_is_coverage_mix_of_layers() {
        let scene = tiny().build().unwrap();
        let n = 24;
        for i in 0..3 {
            for p in 0..n * n {
                let c = scene.coverage[i][p];
                for k in 0..3 {
                    let want = c * scene.object_color[i].data[p * 3 + k]
                        + (1.0 - c) * scene.backgrounds[i].data[p * 3 + k];
                    assert!((scene.dataset.frames[i].image.data[p * 3 + k] - want).abs() <= 0.5 / 255.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn plane_depth_matches_geometry() {
        let cfg = tiny();
        let scene = cfg.build().unwrap();
        let cam = &scene.dataset.frames[1].camera;
        // the middle camera sits at yaw 0, height 0.2, looking roughly down -z
        let pos = cam.position();
        let centre_depth = scene.background_depth[1][12 * 24 + 12];
        assert!(centre_depth > pos[2] - cfg.plane_z - 1e-9);
        assert!(centre_depth < (pos[2] - cfg.plane_z) * 1.05);
    }

    #[test]
    fn oracle_data_roundtrip() {
        let scene = tiny().build().unwrap();
        let dir = tempfile::tempdir().unwrap();
        scene.save(dir.path()).unwrap();
        let loaded = OracleData::load(&dir.path().join(ORACLE_DIR), &scene.dataset).unwrap();
        assert_eq!(loaded.background_depth, scene.background_depth);
        for (a, b) in loaded.backgrounds.iter().zip(&scene.backgrounds) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }
}
