//! Score-distillation guidance.
//!
//! A [`GuidanceProvider`] wraps a latent codec and a mask-conditioned noise
//! predictor. [`distill_loss`] encodes a rendered view, perturbs it, asks the
//! provider for a (guided) noise estimate, forms the one-step latent estimate
//! and returns the latent + pixel reconstruction loss together with its
//! gradient, treating the estimates as constants.

use std::f64::consts::FRAC_PI_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{CropSpec, ImageFrame, MaskFrame};

pub mod external;

/// Latent tensor, channel-major (`C x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Latent {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn same_shape(&self, other: &Latent) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    fn check_shape(&self, other: &Latent) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "latent shapes differ: {}x{}x{} vs {}x{}x{}",
                self.channels, self.height, self.width, other.channels, other.height, other.width
            )))
        }
    }

    /// Standard-normal latent of the given shape, reproducible from `seed`.
    pub fn gaussian(channels: usize, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * height * width)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            channels,
            height,
            width,
            data,
        }
    }
}

/// Everything a noise predictor is conditioned on for one request.
#[derive(Debug, Clone, Copy)]
pub struct NoiseRequest<'a> {
    pub noisy_latent: &'a Latent,
    pub t: f64,
    /// Empty for unconditional predictions.
    pub prompt: &'a str,
    /// Inpainting mask at provider resolution.
    pub mask: &'a MaskFrame,
    /// Conditioning image at provider resolution; the provider blanks the
    /// masked region itself if its model expects a masked image.
    pub image: &'a ImageFrame,
    /// Training view the request belongs to, and the crop that produced it.
    pub view: usize,
    pub crop: CropSpec,
}

/// Frozen latent diffusion model interface.
pub trait GuidanceProvider: Send + Sync {
    fn id(&self) -> &str;
    fn latent_downsample_factor(&self) -> usize;
    fn latent_channels(&self) -> usize;
    fn latent_encode(&self, image: &ImageFrame) -> Result<Latent>;
    fn latent_decode(&self, latent: &Latent) -> Result<ImageFrame>;
    /// Vector-Jacobian product of the encoder at `image`: returns `J^T cotangent`
    /// as an interleaved RGB buffer.
    fn encode_vjp(&self, image: &ImageFrame, cotangent: &Latent) -> Result<Vec<f64>>;
    fn predict_noise(&self, request: &NoiseRequest<'_>) -> Result<Latent>;
}

/// Variance-preserving cosine schedule with a square-root annealed timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            t_min: 0.2,
            t_max: 0.98,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max < 1.0) {
            return Err(Error::Config(format!(
                "noise schedule needs 0 < t_min < t_max < 1 (got {} .. {})",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn alpha(t: f64) -> f64 {
        (FRAC_PI_2 * t).cos()
    }

    #[inline]
    pub fn sigma(t: f64) -> f64 {
        (FRAC_PI_2 * t).sin()
    }
}

/// `t = t_max - (t_max - t_min) * sqrt(step / total)`.
pub fn schedule_t(step: usize, total: usize, schedule: &NoiseSchedule) -> f64 {
    let step = step.min(total);
    if step == 0 || total == 0 {
        return schedule.t_max;
    }
    if step == total {
        return schedule.t_min;
    }
    let frac = (step as f64 / total as f64).sqrt();
    schedule.t_max - (schedule.t_max - schedule.t_min) * frac
}

/// `z_t = alpha(t) z + sigma(t) noise`.
pub fn add_noise(z: &Latent, t: f64, noise: &Latent) -> Result<Latent> {
    z.check_shape(noise)?;
    let (a, s) = (NoiseSchedule::alpha(t), NoiseSchedule::sigma(t));
    Ok(Latent {
        data: z.data.iter().zip(&noise.data).map(|(x, n)| a * x + s * n).collect(),
        ..z.clone()
    })
}

/// Classifier-free guidance: `uncond + scale * (cond - uncond)`.
pub fn cfg_combine(eps_cond: &Latent, eps_uncond: &Latent, scale: f64) -> Result<Latent> {
    eps_cond.check_shape(eps_uncond)?;
    Ok(Latent {
        data: eps_cond
            .data
            .iter()
            .zip(&eps_uncond.data)
            .map(|(c, u)| u + scale * (c - u))
            .collect(),
        ..eps_cond.clone()
    })
}

/// Deterministic one-step estimate `(z_t - sigma(t) eps) / alpha(t)`.
pub fn estimate_latent(z_t: &Latent, t: f64, eps_hat: &Latent) -> Result<Latent> {
    z_t.check_shape(eps_hat)?;
    let a = NoiseSchedule::alpha(t);
    if t >= 1.0 || a.abs() < 1e-12 {
        return Err(Error::DegenerateTimestep(t));
    }
    let s = NoiseSchedule::sigma(t);
    Ok(Latent {
        data: z_t.data.iter().zip(&eps_hat.data).map(|(z, e)| (z - s * e) / a).collect(),
        ..z_t.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepWeighting {
    /// w(t) = 1
    Constant,
    /// w(t) = sigma(t)^2
    NoiseVariance,
}

impl TimestepWeighting {
    pub fn weight(self, t: f64) -> f64 {
        match self {
            TimestepWeighting::Constant => 1.0,
            TimestepWeighting::NoiseVariance => NoiseSchedule::sigma(t).powi(2),
        }
    }
}

/// How squared norms are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillLossConfig {
    pub lambda_rgb: f64,
    pub cfg_scale: f64,
    pub weighting: TimestepWeighting,
    pub reduction: Reduction,
}

impl Default for DistillLossConfig {
    fn default() -> Self {
        Self {
            lambda_rgb: 0.1,
            cfg_scale: 7.5,
            weighting: TimestepWeighting::Constant,
            reduction: Reduction::Sum,
        }
    }
}

/// Inputs of one distillation evaluation, all at provider resolution.
#[derive(Debug, Clone, Copy)]
pub struct DistillInput<'a> {
    pub image: &'a ImageFrame,
    pub prompt: &'a str,
    pub mask: &'a MaskFrame,
    pub condition: &'a ImageFrame,
    pub view: usize,
    pub crop: CropSpec,
    pub t: f64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone)]
pub struct DistillOutput {
    pub loss: f64,
    pub latent_loss: f64,
    pub rgb_loss: f64,
    /// dL/dx, interleaved RGB at provider resolution.
    pub gradient: Vec<f64>,
    pub z_hat: Latent,
    pub x_hat: ImageFrame,
}

/// `w(t) [ |z - z_hat|^2 + lambda_rgb |x - x_hat|^2 ]` with `z_hat`, `x_hat` held constant.
pub fn distill_loss(
    provider: &dyn GuidanceProvider,
    input: &DistillInput<'_>,
    config: &DistillLossConfig,
) -> Result<DistillOutput> {
    let x = input.image;
    if input.mask.width != x.width || input.mask.height != x.height || !input.condition.same_shape(x) {
        return Err(Error::Shape("distillation inputs must share the provider resolution".into()));
    }
    let z = provider.latent_encode(x)?;
    let noise = Latent::gaussian(z.channels, z.height, z.width, input.noise_seed);
    let z_t = add_noise(&z, input.t, &noise)?;
    let request = NoiseRequest {
        noisy_latent: &z_t,
        t: input.t,
        prompt: input.prompt,
        mask: input.mask,
        image: input.condition,
        view: input.view,
        crop: input.crop,
    };
    let eps_cond = provider.predict_noise(&request)?;
    let eps = if input.prompt.is_empty() {
        eps_cond
    } else {
        let eps_uncond = provider.predict_noise(&NoiseRequest { prompt: "", ..request })?;
        cfg_combine(&eps_cond, &eps_uncond, config.cfg_scale)?
    };
    if !eps.same_shape(&z) || eps.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Guidance(format!("{}: invalid noise prediction", provider.id())));
    }
    let z_hat = estimate_latent(&z_t, input.t, &eps)?;
    let x_hat = provider.latent_decode(&z_hat)?;
    if !x_hat.same_shape(x) {
        return Err(Error::Guidance(format!("{}: decoded image has the wrong shape", provider.id())));
    }

    let w = config.weighting.weight(input.t);
    let (latent_norm, pixel_norm) = match config.reduction {
        Reduction::Sum => (1.0, 1.0),
        Reduction::Mean => (1.0 / z.data.len() as f64, 1.0 / x.data.len() as f64),
    };
    let latent_residual = Latent {
        data: z.data.iter().zip(&z_hat.data).map(|(a, b)| a - b).collect(),
        ..z.clone()
    };
    let latent_loss = latent_norm * latent_residual.data.iter().map(|r| r * r).sum::<f64>();
    let rgb_loss = pixel_norm * x.data.iter().zip(&x_hat.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>();

    let scaled = Latent {
        data: latent_residual.data.iter().map(|r| 2.0 * w * latent_norm * r).collect(),
        ..latent_residual
    };
    let mut gradient = provider.encode_vjp(x, &scaled)?;
    for ((g, a), b) in gradient.iter_mut().zip(&x.data).zip(&x_hat.data) {
        *g += 2.0 * w * config.lambda_rgb * pixel_norm * (a - b);
    }
    Ok(DistillOutput {
        loss: w * (latent_loss + config.lambda_rgb * rgb_loss),
        latent_loss,
        rgb_loss,
        gradient,
        z_hat,
        x_hat,
    })
}

/// Box-average encoder and nearest-neighbour decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxCodec {
    pub factor: usize,
}

impl BoxCodec {
    pub fn encode(&self, image: &ImageFrame) -> Result<Latent> {
        let f = self.factor;
        if f == 0 || image.width % f != 0 || image.height % f != 0 {
            return Err(Error::Shape(format!(
                "codec factor {f} does not divide {}x{}",
                image.width, image.height
            )));
        }
        let (h, w) = (image.height / f, image.width / f);
        let mut latent = Latent::zeros(3, h, w);
        let norm = 1.0 / (f * f) as f64;
        for row in 0..image.height {
            for col in 0..image.width {
                let p = image.pixel(row, col);
                for c in 0..3 {
                    latent.data[(c * h + row / f) * w + col / f] += norm * p[c];
                }
            }
        }
        Ok(latent)
    }

    pub fn decode(&self, latent: &Latent) -> Result<ImageFrame> {
        if latent.channels != 3 {
            return Err(Error::Shape("box codec latents have 3 channels".into()));
        }
        let f = self.factor;
        let (h, w) = (latent.height, latent.width);
        let mut image = ImageFrame::new(w * f, h * f);
        for row in 0..h * f {
            for col in 0..w * f {
                let rgb = [0, 1, 2].map(|c| latent.data[(c * h + row / f) * w + col / f]);
                image.set_pixel(row, col, rgb);
            }
        }
        Ok(image)
    }

    /// Exact adjoint of [`BoxCodec::encode`].
    pub fn encode_adjoint(&self, cotangent: &Latent) -> Vec<f64> {
        let f = self.factor;
        let (h, w) = (cotangent.height, cotangent.width);
        let norm = 1.0 / (f * f) as f64;
        let mut out = vec![0.0; h * f * w * f * 3];
        for row in 0..h * f {
            for col in 0..w * f {
                for c in 0..3 {
                    out[(row * w * f + col) * 3 + c] = norm * cotangent.data[(c * h + row / f) * w + col / f];
                }
            }
        }
        out
    }
}

/// What the oracle wants to see inside the mask of one view: `color` blended
/// over the conditioning image with per-pixel `coverage` (1 everywhere when absent).
#[derive(Debug, Clone)]
pub struct OracleTarget {
    pub color: ImageFrame,
    pub coverage: Option<Vec<f64>>,
}

impl OracleTarget {
    pub fn opaque(color: ImageFrame) -> Self {
        Self { color, coverage: None }
    }
}

/// Deterministic stand-in for a frozen inpainting LDM.
///
/// Its noise prediction is exactly the noise that maps `z_t` back onto the
/// encoding of the target composited into the masked region of the
/// conditioning image, so the one-step estimate recovers that latent at any
/// timestep. Conditional and unconditional predictions coincide.
#[derive(Debug, Clone)]
pub struct OracleProvider {
    codec: BoxCodec,
    targets: Vec<OracleTarget>,
}

impl OracleProvider {
    /// One target per training view (frame resolution).
    pub fn new(targets: Vec<OracleTarget>, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidArgument("oracle codec factor must be >= 1".into()));
        }
        if targets.is_empty() {
            return Err(Error::InvalidArgument("oracle provider needs at least one target".into()));
        }
        for t in &targets {
            if let Some(cov) = &t.coverage {
                if cov.len() != t.color.width * t.color.height {
                    return Err(Error::Shape("oracle coverage does not match its color image".into()));
                }
            }
        }
        Ok(Self {
            codec: BoxCodec { factor },
            targets,
        })
    }

    /// The same target for every view.
    pub fn single(target: ImageFrame, factor: usize) -> Result<Self> {
        Self::new(vec![OracleTarget::opaque(target)], factor)
    }

    fn target_for(&self, view: usize) -> &OracleTarget {
        &self.targets[if self.targets.len() == 1 { 0 } else { view.min(self.targets.len() - 1) }]
    }

    /// Target image the oracle steers towards for a request, at provider resolution.
    pub fn composite_target(&self, mask: &MaskFrame, condition: &ImageFrame, view: usize, crop: CropSpec) -> Result<ImageFrame> {
        let target = self.target_for(view);
        let (color, coverage) = if target.color.same_shape(condition) && crop.is_identity_for(condition.width, condition.height) {
            (target.color.clone(), target.coverage.clone())
        } else if crop.x0 + crop.side <= target.color.width && crop.y0 + crop.side <= target.color.height && crop.resample_to == condition.width {
            let color = crop.extract(&target.color);
            let coverage = target.coverage.as_ref().map(|cov| {
                let as_image = ImageFrame::from_data(
                    target.color.width,
                    target.color.height,
                    cov.iter().flat_map(|&a| [a, a, a]).collect(),
                )
                .expect("coverage shape checked at construction");
                crop.extract(&as_image).data.chunks(3).map(|p| p[0]).collect()
            });
            (color, coverage)
        } else {
            return Err(Error::Guidance("oracle target does not cover the requested crop".into()));
        };
        let mut out = condition.clone();
        for (row, col) in mask.pixels() {
            let a = coverage.as_ref().map_or(1.0, |c| c[row * condition.width + col]);
            let fg = color.pixel(row, col);
            let bg = condition.pixel(row, col);
            out.set_pixel(row, col, [0, 1, 2].map(|k| a * fg[k] + (1.0 - a) * bg[k]));
        }
        Ok(out)
    }
}

impl GuidanceProvider for OracleProvider {
    fn id(&self) -> &str {
        "oracle"
    }

    fn latent_downsample_factor(&self) -> usize {
        self.codec.factor
    }

    fn latent_channels(&self) -> usize {
        3
    }

    fn latent_encode(&self, image: &ImageFrame) -> Result<Latent> {
        self.codec.encode(image)
    }

    fn latent_decode(&self, latent: &Latent) -> Result<ImageFrame> {
        self.codec.decode(latent)
    }

    fn encode_vjp(&self, _image: &ImageFrame, cotangent: &Latent) -> Result<Vec<f64>> {
        Ok(self.codec.encode_adjoint(cotangent))
    }

    fn predict_noise(&self, request: &NoiseRequest<'_>) -> Result<Latent> {
        let target = self.composite_target(request.mask, request.image, request.view, request.crop)?;
        let z_target = self.codec.encode(&target)?;
        request.noisy_latent.check_shape(&z_target)?;
        let (a, s) = (NoiseSchedule::alpha(request.t), NoiseSchedule::sigma(request.t));
        let data = if s.abs() < 1e-12 {
            vec![0.0; z_target.data.len()]
        } else {
            request
                .noisy_latent
                .data
                .iter()
                .zip(&z_target.data)
                .map(|(zt, zs)| (zt - a * zs) / s)
                .collect()
        };
        Ok(Latent { data, ..z_target })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize, phase: f64) -> ImageFrame {
        ImageFrame::from_data(
            w,
            h,
            (0..w * h * 3)
                .map(|i| 0.5 + 0.4 * ((i as f64) * 0.37 + phase).sin())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn schedule_endpoints_and_quarter() {
        let s = NoiseSchedule::default();
        assert_eq!(schedule_t(0, 100, &s), 0.98);
        assert_eq!(schedule_t(100, 100, &s), 0.2);
        assert!((schedule_t(25, 100, &s) - 0.59).abs() < 1e-12);
        let ts: Vec<f64> = (0..=100).map(|k| schedule_t(k, 100, &s)).collect();
        assert!(ts.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn add_noise_limits() {
        let z = Latent::gaussian(3, 2, 2, 1);
        let n = Latent::gaussian(3, 2, 2, 2);
        let near_zero = add_noise(&z, 0.0, &n).unwrap();
        assert_eq!(near_zero, z);
        let near_one = add_noise(&z, 1.0, &n).unwrap();
        for (a, b) in near_one.data.iter().zip(&n.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cfg_identities() {
        let c = Latent::gaussian(3, 2, 2, 5);
        let u = Latent::gaussian(3, 2, 2, 6);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        let one = cfg_combine(&c, &u, 1.0).unwrap();
        for (a, b) in one.data.iter().zip(&c.data) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(cfg_combine(&c, &c, 30.0).unwrap(), c);
    }

    #[test]
    fn estimate_inverts_noise() {
        let z = Latent::gaussian(4, 3, 3, 10);
        let n = Latent::gaussian(4, 3, 3, 11);
        for &t in &[0.2, 0.5, 0.98] {
            let zt = add_noise(&z, t, &n).unwrap();
            let back = estimate_latent(&zt, t, &n).unwrap();
            for (a, b) in back.data.iter().zip(&z.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let zero = Latent::zeros(4, 3, 3);
        let almost = estimate_latent(&z, 1e-9, &zero).unwrap();
        for (a, b) in almost.data.iter().zip(&z.data) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(estimate_latent(&z, 1.0, &n), Err(Error::DegenerateTimestep(_))));
    }

    #[test]
    fn box_codec_roundtrip_of_constant_and_identity() {
        let c = ImageFrame::filled(8, 8, [0.2, 0.4, 0.9]);
        let codec = BoxCodec { factor: 4 };
        let back = codec.decode(&codec.encode(&c).unwrap()).unwrap();
        for (a, b) in back.data.iter().zip(&c.data) {
            assert!((a - b).abs() < 1e-15);
        }
        let img = ramp(6, 4, 0.3);
        let id = BoxCodec { factor: 1 };
        assert_eq!(id.decode(&id.encode(&img).unwrap()).unwrap(), img);
        assert!(BoxCodec { factor: 3 }.encode(&ramp(8, 8, 0.0)).is_err());
    }

    #[test]
    fn box_codec_adjoint_dot_product() {
        let codec = BoxCodec { factor: 2 };
        let img = ramp(8, 6, 1.0);
        let cot = Latent::gaussian(3, 3, 4, 9);
        let lhs: f64 = codec.encode(&img).unwrap().data.iter().zip(&cot.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = codec.encode_adjoint(&cot).iter().zip(&img.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn oracle_fixed_point_has_zero_loss() {
        let target = ramp(8, 8, 0.7);
        let provider = OracleProvider::single(target.clone(), 1).unwrap();
        let mask = MaskFrame::from_fn(8, 8, |r, c| (2..6).contains(&r) && (2..6).contains(&c));
        let crop = CropSpec {
            x0: 0,
            y0: 0,
            side: 8,
            resample_to: 8,
        };
        let out = distill_loss(
            &provider,
            &DistillInput {
                image: &target,
                prompt: "",
                mask: &mask,
                condition: &target,
                view: 0,
                crop,
                t: 0.6,
                noise_seed: 3,
            },
            &DistillLossConfig::default(),
        )
        .unwrap();
        assert!(out.loss < 1e-24, "loss {}", out.loss);
        assert!(out.gradient.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn default_rgb_weight() {
        assert_eq!(DistillLossConfig::default().lambda_rgb, 0.1);
    }
}
