//! Finite-difference gradient checks shared by the gradient and acceptance targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ram3d::field::{Field, FieldConfig, FieldCotangent, FieldParams};
use ram3d::guidance::{distill_loss, DistillInput, DistillLossConfig, OracleProvider, Reduction};
use ram3d::objectives::{depth_loss, perceptual_loss, recon_loss, ConvFeatureExtractor};
use ram3d::render::{volume_render, volume_render_backward, NeuralMedium, PixelCotangent, Ray, SampleKind, SampleSet};
use ram3d::scene::{CropSpec, ImageFrame, MaskFrame};

pub const REL_TOL: f64 = 1e-3;
pub const CASES: usize = 50;

/// Relative error with an absolute floor so exact zeros compare cleanly.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub struct Report {
    pub cases: usize,
    pub coords: usize,
    pub worst: f64,
}

impl Report {
    fn new() -> Self {
        Self { cases: 0, coords: 0, worst: 0.0 }
    }

    fn add(&mut self, analytic: f64, numeric: f64) {
        self.coords += 1;
        self.worst = self.worst.max(rel_err(analytic, numeric));
    }

    pub fn ok(&self) -> bool {
        self.cases >= CASES && self.worst <= REL_TOL
    }

    pub fn summary(&self) -> String {
        format!("{} cases, {} coordinates, worst rel err {:.2e}", self.cases, self.coords, self.worst)
    }
}

fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn small_field() -> Field {
    Field::new(FieldConfig {
        levels: 4,
        features_per_level: 2,
        table_size_log2: 10,
        base_resolution: 2,
        level_scale: 2.0,
        mlp_hidden: 16,
        mlp_layers: 3,
        bounds_min: [-1.0; 3],
        bounds_max: [1.0; 3],
    })
    .unwrap()
}

/// Parameters with hash features large enough to matter.
pub fn random_params(field: &Field, rng: &mut ChaCha8Rng) -> FieldParams {
    let mut params = field.init_params(rng.gen());
    for v in &mut params.values[field.layout().hash_range()] {
        *v = rng.gen_range(-0.5..0.5);
    }
    for v in &mut params.values[field.layout().mlp_range()] {
        *v *= 0.8;
    }
    params
}

/// Coordinates to probe: some visited hash entries, some MLP weights.
fn probe_indices(field: &Field, p: [f64; 3], params: &FieldParams, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let visited = field.visited_entries(p, params);
    let fpl = field.config().features_per_level;
    let mut idx: Vec<usize> = (0..4)
        .map(|_| visited[rng.gen_range(0..visited.len())] + rng.gen_range(0..fpl))
        .collect();
    let mlp = field.layout().mlp_range();
    idx.extend((0..4).map(|_| rng.gen_range(mlp.clone())));
    idx
}

fn random_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.gen_range(-0.9..0.9))
}

pub fn check_field(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = small_field();
    let mut report = Report::new();
    for _ in 0..CASES {
        let params = random_params(&field, &mut rng);
        let p = random_point(&mut rng);
        let cot = FieldCotangent {
            color: [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0)),
            density: rng.gen_range(-1.0..1.0),
        };
        let loss = |params: &FieldParams| {
            let o = field.forward(p, params).unwrap();
            cot.density * o.density + (0..3).map(|k| cot.color[k] * o.color[k]).sum::<f64>()
        };
        let mut grads = field.zero_params();
        field.backward(p, &params, &cot, &mut grads).unwrap();
        for i in probe_indices(&field, p, &params, &mut rng) {
            let numeric = central(
                |x| {
                    let mut q = params.clone();
                    q.values[i] = x;
                    loss(&q)
                },
                params.values[i],
                1e-6,
            );
            report.add(grads.values[i], numeric);
        }
        report.cases += 1;
    }
    report
}

pub fn check_volume_render(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = small_field();
    let mut report = Report::new();
    for _ in 0..CASES {
        let params = random_params(&field, &mut rng);
        let origin = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 2.0];
        let d: [f64; 3] = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), -1.0];
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let ray = Ray {
            origin,
            direction: d.map(|c| c / norm),
            t_near: 1.0,
            t_far: 3.0,
        };
        let n = rng.gen_range(4..24);
        let mut t: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..3.0)).collect();
        t.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let samples = SampleSet { t_values: t, kind: SampleKind::Merged };
        let cot = PixelCotangent {
            rgb: [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0)),
            alpha: rng.gen_range(-1.0..1.0),
            depth: rng.gen_range(-1.0..1.0),
        };
        let loss = |params: &FieldParams| {
            let r = volume_render(&NeuralMedium { field: &field, params }, &ray, &samples).unwrap();
            (0..3).map(|k| cot.rgb[k] * r.rgb[k]).sum::<f64>() + cot.alpha * r.alpha + cot.depth * r.depth
        };
        let mut grads = field.zero_params();
        volume_render_backward(&field, &params, &ray, &samples, &cot, &mut grads).unwrap();
        let mid = ray.at(samples.t_values[n / 2]);
        for i in probe_indices(&field, mid, &params, &mut rng) {
            let numeric = central(
                |x| {
                    let mut q = params.clone();
                    q.values[i] = x;
                    loss(&q)
                },
                params.values[i],
                1e-6,
            );
            report.add(grads.values[i], numeric);
        }
        report.cases += 1;
    }
    report
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageFrame {
    ImageFrame::from_data(w, h, (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> MaskFrame {
    let bits: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(p)).collect();
    let mut m = MaskFrame::from_fn(w, h, |r, c| bits[r * w + c]);
    if m.count() < 2 {
        m.set(0, 0, true);
        m.set(h - 1, w - 1, true);
    }
    m
}

fn probe_pixels(rng: &mut ChaCha8Rng, len: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.gen_range(0..len)).collect()
}

fn check_image_loss(
    report: &mut Report,
    rng: &mut ChaCha8Rng,
    x: &ImageFrame,
    gradient: &[f64],
    loss: impl Fn(&ImageFrame) -> f64,
) {
    for i in probe_pixels(rng, x.data.len(), 8) {
        let numeric = central(
            |v| {
                let mut y = x.clone();
                y.data[i] = v;
                loss(&y)
            },
            x.data[i],
            1e-5,
        );
        report.add(gradient[i], numeric);
    }
}

pub fn check_distill(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::new();
    for case in 0..CASES {
        let factor = [1, 2, 4][case % 3];
        let target = random_image(&mut rng, 8, 8);
        let provider = OracleProvider::single(target, factor).unwrap();
        let x = random_image(&mut rng, 8, 8);
        let condition = random_image(&mut rng, 8, 8);
        let mask = random_mask(&mut rng, 8, 8, 0.4);
        let crop = CropSpec { x0: 0, y0: 0, side: 8, resample_to: 8 };
        let config = DistillLossConfig {
            reduction: if case % 2 == 0 { Reduction::Mean } else { Reduction::Sum },
            ..DistillLossConfig::default()
        };
        let t = rng.gen_range(0.2..0.98);
        let noise_seed = rng.gen();
        let prompt = if case % 4 == 0 { "" } else { "a red ball" };
        let run = |x: &ImageFrame| {
            distill_loss(
                &provider,
                &DistillInput { image: x, prompt, mask: &mask, condition: &condition, view: 0, crop, t, noise_seed },
                &config,
            )
            .unwrap()
        };
        let out = run(&x);
        check_image_loss(&mut report, &mut rng, &x, &out.gradient, |y| run(y).loss);
        report.cases += 1;
    }
    report
}

pub fn check_recon(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::new();
    for _ in 0..CASES {
        let x = random_image(&mut rng, 8, 8);
        let input = random_image(&mut rng, 8, 8);
        let halo = random_mask(&mut rng, 8, 8, 0.5);
        let g = recon_loss(&x, &input, &halo).unwrap().gradient;
        check_image_loss(&mut report, &mut rng, &x, &g, |y| recon_loss(y, &input, &halo).unwrap().value);
        report.cases += 1;
    }
    report
}

pub fn check_perceptual(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extractor = ConvFeatureExtractor::new(7);
    let mut report = Report::new();
    for _ in 0..CASES {
        let x = random_image(&mut rng, 16, 16);
        let input = random_image(&mut rng, 16, 16);
        let halo = random_mask(&mut rng, 16, 16, 0.5);
        let g = perceptual_loss(&x, &input, &halo, &extractor).unwrap().gradient;
        check_image_loss(&mut report, &mut rng, &x, &g, |y| {
            perceptual_loss(y, &input, &halo, &extractor).unwrap().value
        });
        report.cases += 1;
    }
    report
}

pub fn check_depth(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::new();
    for _ in 0..CASES {
        let n = 64;
        let rendered: Vec<f64> = (0..n).map(|_| rng.gen_range(2.0..5.0)).collect();
        let estimated: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let region = random_mask(&mut rng, 8, 8, 0.6);
        let g = depth_loss(&rendered, &estimated, &region).unwrap().gradient;
        for i in probe_pixels(&mut rng, n, 8) {
            let numeric = central(
                |v| {
                    let mut r = rendered.clone();
                    r[i] = v;
                    depth_loss(&r, &estimated, &region).unwrap().value
                },
                rendered[i],
                1e-5,
            );
            report.add(g[i], numeric);
        }
        report.cases += 1;
    }
    report
}
