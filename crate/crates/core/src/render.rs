//! Ray generation, coarse-to-fine sampling and discretized volume rendering.
//!
//! For samples `t_0 < ... < t_{n-1}` with `delta_i = t_{i+1} - t_i` (the last
//! interval runs to `t_far`):
//!
//! ```text
//! a_i = 1 - exp(-sigma_i * delta_i)
//! T_i = prod_{j<i} (1 - a_j)
//! w_i = T_i * a_i
//! rgb = sum w_i c_i,  alpha = sum w_i,  depth = sum w_i t_i / max(alpha, 1e-8)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, FieldCotangent, FieldOutput, FieldParams, FieldTape};
use crate::parallel::{derive_seed, pool, CHUNK_RAYS};
use crate::scene::{normalize, Camera, ImageFrame, RegionSelect, SceneDataset};

/// Floor added to coarse weights before building the sampling CDF.
pub const WEIGHT_FLOOR: f64 = 1e-5;
/// Floor on accumulated alpha in the expected-depth estimator.
pub const DEPTH_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Coarse,
    Fine,
    Merged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub t_values: Vec<f64>,
    pub kind: SampleKind,
}

/// Anything that can be queried for color and density along a ray.
pub trait Medium {
    fn query(&self, p: [f64; 3]) -> FieldOutput;
}

/// A neural field paired with its parameters.
pub struct NeuralMedium<'a> {
    pub field: &'a Field,
    pub params: &'a FieldParams,
}

impl Medium for NeuralMedium<'_> {
    fn query(&self, p: [f64; 3]) -> FieldOutput {
        let mut tape = self.field.new_tape();
        self.field.forward_with_tape(p, self.params, &mut tape)
    }
}

/// Pinhole back-projection through pixel centres.
pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)]) -> Vec<Ray> {
    let r = camera.rotation();
    let origin = camera.position();
    pixels
        .iter()
        .map(|&(row, col)| {
            let x = (col as f64 + 0.5 - camera.cx) / camera.fx;
            let y = -(row as f64 + 0.5 - camera.cy) / camera.fy;
            let d_cam = [x, y, -1.0];
            let d = [
                r[0][0] * d_cam[0] + r[0][1] * d_cam[1] + r[0][2] * d_cam[2],
                r[1][0] * d_cam[0] + r[1][1] * d_cam[1] + r[1][2] * d_cam[2],
                r[2][0] * d_cam[0] + r[2][1] * d_cam[1] + r[2][2] * d_cam[2],
            ];
            Ray {
                origin,
                direction: normalize(d),
                t_near: camera.near,
                t_far: camera.far,
            }
        })
        .collect()
}

/// One draw per equal sub-interval of `[t_near, t_far]`. Without jitter the
/// draws sit at the bin midpoints.
pub fn stratified_samples(ray: &Ray, n: usize, seed: u64, jitter: bool) -> SampleSet {
    assert!(n >= 1, "need at least one sample");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = (ray.t_far - ray.t_near) / n as f64;
    let t_values = (0..n)
        .map(|i| {
            let u: f64 = if jitter { rng.gen() } else { 0.5 };
            ray.t_near + (i as f64 + u) * width
        })
        .collect();
    SampleSet {
        t_values,
        kind: SampleKind::Coarse,
    }
}

/// Inverse-CDF draws over the coarse bins `[t_i, t_{i+1})` (last bin ends at
/// `t_far`), merged and sorted with the coarse samples.
pub fn importance_samples(ray: &Ray, coarse: &SampleSet, weights: &[f64], n: usize, seed: u64) -> SampleSet {
    assert_eq!(coarse.t_values.len(), weights.len(), "one weight per coarse sample");
    let fine = draw_fine(ray, &coarse.t_values, weights, n, seed);
    let mut t_values = Vec::with_capacity(coarse.t_values.len() + n);
    t_values.extend_from_slice(&coarse.t_values);
    t_values.extend(fine);
    t_values.sort_by(|a, b| a.partial_cmp(b).expect("finite sample positions"));
    SampleSet {
        t_values,
        kind: SampleKind::Merged,
    }
}

fn draw_fine(ray: &Ray, t: &[f64], weights: &[f64], n: usize, seed: u64) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let bins = t.len();
    let mut cdf = Vec::with_capacity(bins + 1);
    cdf.push(0.0);
    let mut acc = 0.0f64;
    for &w in weights {
        acc += w.max(0.0) + WEIGHT_FLOOR;
        cdf.push(acc);
    }
    for c in &mut cdf {
        *c /= acc;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|j| {
            // Stratified uniforms keep the draws spread over the CDF.
            let u = ((j as f64 + rng.gen::<f64>()) / n as f64).min(1.0 - f64::EPSILON);
            let bin = cdf.partition_point(|&c| c <= u).clamp(1, bins) - 1;
            let start = t[bin];
            let end = if bin + 1 < bins { t[bin + 1] } else { ray.t_far };
            let mass = cdf[bin + 1] - cdf[bin];
            let frac = if mass > 0.0 { ((u - cdf[bin]) / mass).clamp(0.0, 1.0) } else { 0.5 };
            start + frac * (end - start)
        })
        .collect()
}

/// Result of compositing one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayRender {
    pub rgb: [f64; 3],
    pub alpha: f64,
    pub depth: f64,
    pub weights: Vec<f64>,
}

/// Cotangent of one rendered pixel.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PixelCotangent {
    pub rgb: [f64; 3],
    pub alpha: f64,
    pub depth: f64,
}

impl PixelCotangent {
    pub fn is_zero(&self) -> bool {
        self.rgb == [0.0; 3] && self.alpha == 0.0 && self.depth == 0.0
    }
}

fn intervals(t: &[f64], t_far: f64) -> impl Iterator<Item = f64> + '_ {
    (0..t.len()).map(move |i| {
        let next = if i + 1 < t.len() { t[i + 1] } else { t_far };
        (next - t[i]).max(0.0)
    })
}

/// Composites per-sample densities and colors along one ray.
pub fn composite(t: &[f64], t_far: f64, samples: &[FieldOutput]) -> RayRender {
    assert_eq!(t.len(), samples.len());
    let mut weights = Vec::with_capacity(t.len());
    let mut rgb = [0.0; 3];
    let mut alpha = 0.0f64;
    let mut weighted_t = 0.0f64;
    let mut optical = 0.0f64;
    for ((s, delta), &ti) in samples.iter().zip(intervals(t, t_far)).zip(t) {
        let transmittance = (-optical).exp();
        let tau = s.density * delta;
        let w = transmittance * -(-tau).exp_m1();
        optical += tau;
        for k in 0..3 {
            rgb[k] += w * s.color[k];
        }
        alpha += w;
        weighted_t += w * ti;
        weights.push(w);
    }
    RayRender {
        rgb,
        alpha,
        depth: weighted_t / alpha.max(DEPTH_EPS),
        weights,
    }
}

/// Gradient of `<cotangent, composite(...)>` with respect to each sample's
/// density and color.
pub fn composite_backward(
    t: &[f64],
    t_far: f64,
    samples: &[FieldOutput],
    render: &RayRender,
    cotangent: &PixelCotangent,
) -> Vec<FieldCotangent> {
    let n = t.len();
    let weighted_t: f64 = render.weights.iter().zip(t).map(|(w, ti)| w * ti).sum();
    let (g_weighted_t, g_alpha) = if render.alpha > DEPTH_EPS {
        (
            cotangent.depth / render.alpha,
            cotangent.alpha - cotangent.depth * weighted_t / (render.alpha * render.alpha),
        )
    } else {
        (cotangent.depth / DEPTH_EPS, cotangent.alpha)
    };
    // Loss restricted to the weights: L = sum_i w_i v_i.
    let values: Vec<f64> = (0..n)
        .map(|i| {
            let c = &samples[i].color;
            cotangent.rgb[0] * c[0] + cotangent.rgb[1] * c[1] + cotangent.rgb[2] * c[2] + g_alpha + g_weighted_t * t[i]
        })
        .collect();
    let deltas: Vec<f64> = intervals(t, t_far).collect();
    let mut optical_through = Vec::with_capacity(n);
    let mut acc = 0.0f64;
    for (s, d) in samples.iter().zip(&deltas) {
        acc += s.density * d;
        optical_through.push(acc);
    }
    let mut out = vec![FieldCotangent::default(); n];
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        let w = render.weights[i];
        // T_{i+1} = exp(-sum_{j<=i} sigma_j delta_j)
        let transmittance_next = (-optical_through[i]).exp();
        out[i] = FieldCotangent {
            color: [w * cotangent.rgb[0], w * cotangent.rgb[1], w * cotangent.rgb[2]],
            density: deltas[i] * (transmittance_next * values[i] - suffix),
        };
        suffix += w * values[i];
    }
    out
}

/// Renders a ray through any medium at the given samples.
pub fn volume_render(medium: &impl Medium, ray: &Ray, samples: &SampleSet) -> Result<RayRender> {
    if samples.t_values.is_empty() {
        return Err(Error::InvalidArgument("volume_render needs at least one sample".into()));
    }
    let outputs: Vec<FieldOutput> = samples.t_values.iter().map(|&t| medium.query(ray.at(t))).collect();
    check_outputs(&outputs)?;
    Ok(composite(&samples.t_values, ray.t_far, &outputs))
}

fn check_outputs(outputs: &[FieldOutput]) -> Result<()> {
    if outputs
        .iter()
        .any(|o| !o.density.is_finite() || o.color.iter().any(|c| !c.is_finite()))
    {
        return Err(Error::numerical(None, "non-finite field output during rendering"));
    }
    Ok(())
}

/// Sample counts and jitter for coarse-to-fine rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub jitter: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            coarse_samples: 128,
            fine_samples: 128,
            jitter: true,
        }
    }
}

/// Scratch space reused across the samples of one ray.
struct RayScratch {
    tapes: Vec<FieldTape>,
    outputs: Vec<FieldOutput>,
}

impl RayScratch {
    fn new() -> Self {
        Self {
            tapes: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn evaluate(&mut self, field: &Field, params: &FieldParams, ray: &Ray, t: &[f64]) -> Result<()> {
        while self.tapes.len() < t.len() {
            self.tapes.push(field.new_tape());
        }
        self.outputs.clear();
        for (tape, &ti) in self.tapes.iter_mut().zip(t) {
            self.outputs.push(field.forward_with_tape(ray.at(ti), params, tape));
        }
        check_outputs(&self.outputs)
    }
}

/// Coarse pass, importance resampling, and the final render at the merged samples.
pub fn render_ray(
    field: &Field,
    params: &FieldParams,
    ray: &Ray,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<(SampleSet, RayRender)> {
    let mut scratch = RayScratch::new();
    render_ray_with(field, params, ray, sampling, seed, &mut scratch)
}

fn render_ray_with(
    field: &Field,
    params: &FieldParams,
    ray: &Ray,
    sampling: &SamplingConfig,
    seed: u64,
    scratch: &mut RayScratch,
) -> Result<(SampleSet, RayRender)> {
    let coarse = stratified_samples(ray, sampling.coarse_samples.max(1), derive_seed(&[seed, 0]), sampling.jitter);
    let samples = if sampling.fine_samples > 0 {
        scratch.evaluate(field, params, ray, &coarse.t_values)?;
        let coarse_render = composite(&coarse.t_values, ray.t_far, &scratch.outputs);
        importance_samples(ray, &coarse, &coarse_render.weights, sampling.fine_samples, derive_seed(&[seed, 1]))
    } else {
        coarse
    };
    scratch.evaluate(field, params, ray, &samples.t_values)?;
    let render = composite(&samples.t_values, ray.t_far, &scratch.outputs);
    Ok((samples, render))
}

/// Accumulates the field gradient of `<cotangent, render>` for one ray at fixed samples.
pub fn volume_render_backward(
    field: &Field,
    params: &FieldParams,
    ray: &Ray,
    samples: &SampleSet,
    cotangent: &PixelCotangent,
    grads: &mut FieldParams,
) -> Result<()> {
    let mut scratch = RayScratch::new();
    backward_with(field, params, ray, &samples.t_values, cotangent, grads, &mut scratch)
}

fn backward_with(
    field: &Field,
    params: &FieldParams,
    ray: &Ray,
    t: &[f64],
    cotangent: &PixelCotangent,
    grads: &mut FieldParams,
    scratch: &mut RayScratch,
) -> Result<()> {
    if cotangent.is_zero() {
        return Ok(());
    }
    scratch.evaluate(field, params, ray, t)?;
    let render = composite(t, ray.t_far, &scratch.outputs);
    let sample_cotangents = composite_backward(t, ray.t_far, &scratch.outputs, &render, cotangent);
    for (tape, cot) in scratch.tapes.iter_mut().zip(&sample_cotangents) {
        field.backward_with_tape(params, tape, cot, grads);
    }
    Ok(())
}

/// What happens to pixels outside the rendered region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExteriorFill {
    /// Copy the input image (background inpainting).
    Input,
    /// Zero color and zero alpha (foreground layer).
    Zero,
}

#[derive(Debug, Clone)]
pub struct RenderedRay {
    pub pixel: (usize, usize),
    pub ray: Ray,
    pub samples: SampleSet,
}

/// Bubble render of one view: only rays through the selected region are traced.
#[derive(Debug, Clone)]
pub struct BubbleRender {
    pub image: ImageFrame,
    /// Per-pixel accumulated opacity, row-major; zero outside the region.
    pub alpha: Vec<f64>,
    /// Per-pixel expected depth, row-major; zero outside the region.
    pub depth: Vec<f64>,
    pub rays: Vec<RenderedRay>,
}

impl BubbleRender {
    pub fn rendered_pixels(&self) -> usize {
        self.rays.len()
    }
}

/// Renders the selected region of `frame_index`. Per-ray sampling seeds are
/// derived from `step_seed` and the pixel index.
pub fn render_bubble(
    frame_index: usize,
    dataset: &SceneDataset,
    region: RegionSelect,
    fill: ExteriorFill,
    field: &Field,
    params: &FieldParams,
    sampling: &SamplingConfig,
    step_seed: u64,
) -> Result<BubbleRender> {
    let frame = dataset.frames.get(frame_index).ok_or_else(|| {
        Error::InvalidArgument(format!("frame index {frame_index} out of range ({} frames)", dataset.len()))
    })?;
    let (w, h) = (frame.image.width, frame.image.height);
    let pixels = frame.regions.select(region).pixels();
    let rays = generate_rays(&frame.camera, &pixels);

    let results: Vec<Result<Vec<(SampleSet, RayRender)>>> = pool().install(|| {
        pixels
            .par_chunks(CHUNK_RAYS)
            .zip(rays.par_chunks(CHUNK_RAYS))
            .map(|(px_chunk, ray_chunk)| {
                let mut scratch = RayScratch::new();
                px_chunk
                    .iter()
                    .zip(ray_chunk)
                    .map(|(&(row, col), ray)| {
                        let seed = derive_seed(&[step_seed, (row * w + col) as u64]);
                        render_ray_with(field, params, ray, sampling, seed, &mut scratch)
                    })
                    .collect()
            })
            .collect()
    });

    let mut image = match fill {
        ExteriorFill::Input => frame.image.clone(),
        ExteriorFill::Zero => ImageFrame::new(w, h),
    };
    let mut alpha = vec![0.0; w * h];
    let mut depth = vec![0.0; w * h];
    let mut records = Vec::with_capacity(pixels.len());
    let mut idx = 0;
    for chunk in results {
        for (samples, render) in chunk? {
            let (row, col) = pixels[idx];
            image.set_pixel(row, col, render.rgb);
            alpha[row * w + col] = render.alpha;
            depth[row * w + col] = render.depth;
            records.push(RenderedRay {
                pixel: (row, col),
                ray: rays[idx],
                samples,
            });
            idx += 1;
        }
    }
    Ok(BubbleRender {
        image,
        alpha,
        depth,
        rays: records,
    })
}

/// Per-pixel cotangents of a bubble render, row-major, full-frame sized.
#[derive(Debug, Clone)]
pub struct BubbleCotangent {
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
}

impl BubbleCotangent {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            rgb: vec![0.0; width * height * 3],
            alpha: vec![0.0; width * height],
            depth: vec![0.0; width * height],
        }
    }

    fn pixel(&self, index: usize) -> PixelCotangent {
        PixelCotangent {
            rgb: [self.rgb[index * 3], self.rgb[index * 3 + 1], self.rgb[index * 3 + 2]],
            alpha: self.alpha[index],
            depth: self.depth[index],
        }
    }
}

/// Backpropagates pixel cotangents of a bubble render into `grads`.
/// Chunk partial gradients are summed in pixel order.
pub fn render_backward(
    bubble: &BubbleRender,
    cotangent: &BubbleCotangent,
    field: &Field,
    params: &FieldParams,
    grads: &mut FieldParams,
) -> Result<()> {
    let width = bubble.image.width;
    let partials: Vec<Result<Option<FieldParams>>> = pool().install(|| {
        bubble
            .rays
            .par_chunks(CHUNK_RAYS)
            .map(|chunk| {
                let mut scratch = RayScratch::new();
                let mut local: Option<FieldParams> = None;
                for record in chunk {
                    let (row, col) = record.pixel;
                    let cot = cotangent.pixel(row * width + col);
                    if cot.is_zero() {
                        continue;
                    }
                    let buffer = local.get_or_insert_with(|| field.zero_params());
                    backward_with(field, params, &record.ray, &record.samples.t_values, &cot, buffer, &mut scratch)?;
                }
                Ok(local)
            })
            .collect()
    });
    for partial in partials {
        if let Some(local) = partial? {
            grads.add_assign(&local);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant {
        density: f64,
        color: [f64; 3],
    }

    impl Medium for Constant {
        fn query(&self, _p: [f64; 3]) -> FieldOutput {
            FieldOutput {
                color: self.color,
                density: self.density,
            }
        }
    }

    fn axis_ray(t_near: f64, t_far: f64) -> Ray {
        Ray {
            origin: [0.0; 3],
            direction: [0.0, 0.0, -1.0],
            t_near,
            t_far,
        }
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let cam = Camera::look_at([0.0, 0.0, 5.0], [0.0; 3], [0.0, 1.0, 0.0], 4, 4, 10.0, 1.0, 9.0);
        let rays = generate_rays(&cam, &[(1, 1), (2, 2)]);
        // pixel centre (2.5, 2.5) vs principal point (2, 2): average of the two diagonal pixels
        let mean: Vec<f64> = (0..3).map(|k| (rays[0].direction[k] + rays[1].direction[k]) / 2.0).collect();
        assert!(mean[0].abs() < 1e-12 && mean[1].abs() < 1e-12);
        assert!(mean[2] < 0.0);
        let cam = Camera {
            cx: 2.5,
            cy: 2.5,
            ..cam
        };
        let ray = generate_rays(&cam, &[(2, 2)])[0];
        assert!((ray.direction[2] + 1.0).abs() < 1e-15);
        assert_eq!((ray.t_near, ray.t_far), (1.0, 9.0));
    }

    #[test]
    fn adjacent_pixels_differ_by_inverse_focal() {
        let fx = 50.0;
        let cam = Camera {
            cx: 16.0,
            cy: 15.5,
            ..Camera::look_at([0.0, 0.0, 5.0], [0.0; 3], [0.0, 1.0, 0.0], 32, 32, fx, 1.0, 9.0)
        };
        let rays = generate_rays(&cam, &[(15, 15), (15, 16)]);
        let dot: f64 = (0..3).map(|k| rays[0].direction[k] * rays[1].direction[k]).sum();
        let angle = dot.clamp(-1.0, 1.0).acos();
        // explicit trig: atan(0.5/fx) + atan(0.5/fx)
        let expected = 2.0 * (0.5 / fx).atan();
        assert!((angle - expected).abs() < 1e-9);
        assert!((angle - 1.0 / fx).abs() < 1e-4);
        for r in rays {
            let n: f64 = r.direction.iter().map(|d| d * d).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stratified_without_jitter_gives_bin_midpoints() {
        let ray = axis_ray(2.0, 6.0);
        assert_eq!(stratified_samples(&ray, 4, 0, false).t_values, vec![2.5, 3.5, 4.5, 5.5]);
        let one = stratified_samples(&ray, 1, 9, true);
        assert!(one.t_values[0] >= 2.0 && one.t_values[0] <= 6.0);
        let many = stratified_samples(&ray, 64, 3, true);
        assert!(many.t_values.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn importance_concentrates_in_heavy_bin() {
        let ray = axis_ray(0.0, 8.0);
        let coarse = stratified_samples(&ray, 8, 0, false);
        let mut weights = vec![0.0; 8];
        weights[5] = 1.0;
        let merged = importance_samples(&ray, &coarse, &weights, 32, 11);
        assert_eq!(merged.t_values.len(), 40);
        assert!(merged.t_values.windows(2).all(|p| p[0] <= p[1]));
        let fine = draw_fine(&ray, &coarse.t_values, &weights, 32, 11);
        assert!(fine.iter().all(|&t| (5.5..6.5).contains(&t)), "{fine:?}");
    }

    #[test]
    fn empty_space_renders_black() {
        let ray = axis_ray(1.0, 3.0);
        let samples = stratified_samples(&ray, 16, 4, true);
        let out = volume_render(
            &Constant {
                density: 0.0,
                color: [0.3, 0.6, 0.9],
            },
            &ray,
            &samples,
        )
        .unwrap();
        assert_eq!(out.rgb, [0.0; 3]);
        assert_eq!(out.alpha, 0.0);
    }

    #[test]
    fn weights_sum_to_alpha_and_transmittance_decreases() {
        let t = vec![0.1, 0.4, 0.45, 1.0, 1.7];
        let samples: Vec<FieldOutput> = [0.5, 3.0, 0.0, 10.0, 0.2]
            .iter()
            .map(|&d| FieldOutput {
                color: [0.2, 0.4, 0.6],
                density: d,
            })
            .collect();
        let out = composite(&t, 2.0, &samples);
        let sum: f64 = out.weights.iter().sum();
        assert!((sum - out.alpha).abs() < 1e-15);
        assert!(out.alpha <= 1.0 && out.alpha >= 0.0);
        let mut transmittance = 1.0;
        for (w, s) in out.weights.iter().zip(&samples) {
            let next = transmittance - w;
            assert!(next <= transmittance + 1e-15);
            transmittance = next;
            let _ = s;
        }
    }

    #[test]
    fn zero_density_sample_is_transparent() {
        let t = vec![0.1, 0.5, 1.2];
        let mk = |d: f64| FieldOutput {
            color: [d.min(1.0), 0.5, 0.1],
            density: d,
        };
        let base = composite(&t, 2.0, &[mk(0.7), mk(2.0), mk(0.3)]);
        let t2 = vec![0.1, 0.5, 0.8, 1.2];
        let with_gap = composite(&t2, 2.0, &[mk(0.7), mk(2.0), mk(2.0), mk(0.3)]);
        // Splitting an interval with an identical sample changes nothing; a
        // zero-density sample inserted into a zero-density interval neither.
        assert!((base.alpha - with_gap.alpha).abs() < 1e-12);
        let t3 = vec![0.1, 0.5, 1.2, 1.5];
        let a = composite(&t3[..3], 1.5, &[mk(0.7), mk(2.0), mk(0.0)]);
        let b = composite(&t3, 1.5, &[mk(0.7), mk(2.0), mk(0.0), mk(0.0)]);
        for k in 0..3 {
            assert!((a.rgb[k] - b.rgb[k]).abs() < 1e-6);
        }
        assert!((a.alpha - b.alpha).abs() < 1e-6);
    }

    #[test]
    fn opaque_slab_depth() {
        struct Slab;
        impl Medium for Slab {
            fn query(&self, p: [f64; 3]) -> FieldOutput {
                let t = -p[2];
                FieldOutput {
                    color: [1.0; 3],
                    density: if t >= 3.0 { 1e4 } else { 0.0 },
                }
            }
        }
        let ray = axis_ray(1.0, 5.0);
        let samples = stratified_samples(&ray, 64, 0, false);
        let out = volume_render(&Slab, &ray, &samples).unwrap();
        let bin = 4.0 / 64.0;
        assert!((out.depth - 3.0).abs() <= bin, "depth {}", out.depth);
    }

    #[test]
    fn zero_cotangent_gives_zero_field_gradient() {
        let field = Field::new(crate::field::FieldConfig {
            levels: 2,
            table_size_log2: 6,
            base_resolution: 2,
            mlp_hidden: 8,
            ..crate::field::FieldConfig::default()
        })
        .unwrap();
        let params = field.init_params(0);
        let mut grads = field.zero_params();
        let ray = axis_ray(0.1, 1.5);
        let samples = stratified_samples(&ray, 4, 0, true);
        volume_render_backward(&field, &params, &ray, &samples, &PixelCotangent::default(), &mut grads).unwrap();
        assert!(grads.values.iter().all(|&g| g == 0.0));
    }
}
