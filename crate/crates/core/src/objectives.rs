//! Halo reconstruction, perceptual and depth-correlation losses, and the
//! weighted stage totals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{ImageFrame, MaskFrame};

/// A loss value and its gradient with respect to the first argument,
/// interleaved RGB (or per pixel for depth).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub gradient: Vec<f64>,
}

fn check_same(a: &ImageFrame, b: &ImageFrame, mask: &MaskFrame) -> Result<()> {
    if !a.same_shape(b) || a.width != mask.width || a.height != mask.height {
        return Err(Error::Shape("loss inputs differ in shape".into()));
    }
    Ok(())
}

/// Mean squared error over the halo pixels (and channels) only.
pub fn recon_loss(x_bg: &ImageFrame, input: &ImageFrame, halo: &MaskFrame) -> Result<LossGrad> {
    check_same(x_bg, input, halo)?;
    let mut gradient = vec![0.0; x_bg.data.len()];
    let count = halo.count() * 3;
    if count == 0 {
        return Ok(LossGrad { value: 0.0, gradient });
    }
    let norm = 1.0 / count as f64;
    let mut value = 0.0;
    for (i, _) in halo.bits.iter().enumerate().filter(|(_, &b)| b) {
        for k in 0..3 {
            let d = x_bg.data[i * 3 + k] - input.data[i * 3 + k];
            value += norm * d * d;
            gradient[i * 3 + k] = 2.0 * norm * d;
        }
    }
    Ok(LossGrad { value, gradient })
}

/// Feature map with its shape (`channels x height x width`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Frozen image feature network used by the perceptual loss.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, image: &ImageFrame) -> Result<FeatureMap>;
    /// `J^T cotangent` at `image`, interleaved RGB.
    fn features_vjp(&self, image: &ImageFrame, cotangent: &[f64]) -> Result<Vec<f64>>;
}

/// One 3x3, stride-2, zero-padded convolution.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][ky][kx]`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub const CONV_KERNEL: usize = 3;
pub const CONV_STRIDE: usize = 2;

impl ConvLayer {
    pub fn output_size(&self, size: usize) -> usize {
        (size + 2 - CONV_KERNEL) / CONV_STRIDE + 1
    }

    #[inline]
    fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_channels + i) * CONV_KERNEL + ky) * CONV_KERNEL + kx]
    }

    /// Input is channel-major `C x H x W`.
    pub fn forward(&self, input: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let (oh, ow) = (self.output_size(h), self.output_size(w));
        let mut out = vec![0.0; self.out_channels * oh * ow];
        for o in 0..self.out_channels {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = self.bias[o];
                    for i in 0..self.in_channels {
                        for ky in 0..CONV_KERNEL {
                            let sy = (y * CONV_STRIDE + ky) as isize - 1;
                            if sy < 0 || sy as usize >= h {
                                continue;
                            }
                            for kx in 0..CONV_KERNEL {
                                let sx = (x * CONV_STRIDE + kx) as isize - 1;
                                if sx < 0 || sx as usize >= w {
                                    continue;
                                }
                                acc += self.weight(o, i, ky, kx) * input[(i * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(o * oh + y) * ow + x] = acc;
                }
            }
        }
        (out, oh, ow)
    }

    /// Transposed convolution: the adjoint of the linear part of [`ConvLayer::forward`].
    pub fn adjoint(&self, cotangent: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = (self.output_size(h), self.output_size(w));
        let mut out = vec![0.0; self.in_channels * h * w];
        for o in 0..self.out_channels {
            for y in 0..oh {
                for x in 0..ow {
                    let g = cotangent[(o * oh + y) * ow + x];
                    if g == 0.0 {
                        continue;
                    }
                    for i in 0..self.in_channels {
                        for ky in 0..CONV_KERNEL {
                            let sy = (y * CONV_STRIDE + ky) as isize - 1;
                            if sy < 0 || sy as usize >= h {
                                continue;
                            }
                            for kx in 0..CONV_KERNEL {
                                let sx = (x * CONV_STRIDE + kx) as isize - 1;
                                if sx < 0 || sx as usize >= w {
                                    continue;
                                }
                                out[(i * h + sy as usize) * w + sx as usize] += g * self.weight(o, i, ky, kx);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Reference perceptual network: three fixed-seed random stride-2
/// convolutions, each followed by `tanh`.
#[derive(Debug, Clone)]
pub struct ConvFeatureExtractor {
    pub layers: Vec<ConvLayer>,
}

impl ConvFeatureExtractor {
    pub fn new(seed: u64) -> Self {
        Self::with_channels(seed, &[3, 8, 8, 8])
    }

    pub fn with_channels(seed: u64, channels: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = channels
            .windows(2)
            .map(|pair| {
                let (cin, cout) = (pair[0], pair[1]);
                let bound = (3.0 / (cin * CONV_KERNEL * CONV_KERNEL) as f64).sqrt();
                ConvLayer {
                    in_channels: cin,
                    out_channels: cout,
                    weights: (0..cout * cin * CONV_KERNEL * CONV_KERNEL)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect(),
                    bias: (0..cout).map(|_| rng.gen_range(-0.1..0.1)).collect(),
                }
            })
            .collect();
        Self { layers }
    }

    fn to_planar(image: &ImageFrame) -> Vec<f64> {
        let n = image.width * image.height;
        let mut out = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                out[c * n + p] = image.data[p * 3 + c];
            }
        }
        out
    }

    /// Forward pass keeping every activation (input included).
    fn activations(&self, image: &ImageFrame) -> Vec<(Vec<f64>, usize, usize)> {
        let mut acts = vec![(Self::to_planar(image), image.height, image.width)];
        for layer in &self.layers {
            let (input, h, w) = acts.last().expect("input activation");
            let (mut out, oh, ow) = layer.forward(input, *h, *w);
            out.iter_mut().for_each(|v| *v = v.tanh());
            acts.push((out, oh, ow));
        }
        acts
    }
}

impl FeatureExtractor for ConvFeatureExtractor {
    fn features(&self, image: &ImageFrame) -> Result<FeatureMap> {
        let (data, height, width) = self.activations(image).pop().expect("at least the input");
        Ok(FeatureMap {
            channels: self.layers.last().map_or(3, |l| l.out_channels),
            height,
            width,
            data,
        })
    }

    fn features_vjp(&self, image: &ImageFrame, cotangent: &[f64]) -> Result<Vec<f64>> {
        let acts = self.activations(image);
        if cotangent.len() != acts.last().expect("output").0.len() {
            return Err(Error::Feature("cotangent does not match the feature map".into()));
        }
        let mut grad = cotangent.to_vec();
        for (j, layer) in self.layers.iter().enumerate().rev() {
            let out = &acts[j + 1].0;
            for (g, y) in grad.iter_mut().zip(out) {
                *g *= 1.0 - y * y;
            }
            let (_, h, w) = acts[j];
            grad = layer.adjoint(&grad, h, w);
        }
        let n = image.width * image.height;
        let mut out = vec![0.0; n * 3];
        for p in 0..n {
            for c in 0..3 {
                out[p * 3 + c] = grad[c * n + p];
            }
        }
        Ok(out)
    }
}

fn apply_mask(image: &ImageFrame, mask: &MaskFrame) -> ImageFrame {
    let mut out = image.clone();
    for (i, &b) in mask.bits.iter().enumerate() {
        if !b {
            out.data[i * 3..i * 3 + 3].copy_from_slice(&[0.0; 3]);
        }
    }
    out
}

/// Feature-space MSE between the halo-masked render and the halo-masked input.
pub fn perceptual_loss(
    x_bg: &ImageFrame,
    input: &ImageFrame,
    halo: &MaskFrame,
    extractor: &dyn FeatureExtractor,
) -> Result<LossGrad> {
    check_same(x_bg, input, halo)?;
    let masked = apply_mask(x_bg, halo);
    let f_render = extractor.features(&masked)?;
    let f_input = extractor.features(&apply_mask(input, halo))?;
    if f_render.data.len() != f_input.data.len() || f_render.data.is_empty() {
        return Err(Error::Feature("feature maps differ in size".into()));
    }
    let norm = 1.0 / f_render.data.len() as f64;
    let mut value = 0.0;
    let cot: Vec<f64> = f_render
        .data
        .iter()
        .zip(&f_input.data)
        .map(|(a, b)| {
            value += norm * (a - b) * (a - b);
            2.0 * norm * (a - b)
        })
        .collect();
    let mut gradient = extractor.features_vjp(&masked, &cot)?;
    for (i, &b) in halo.bits.iter().enumerate() {
        if !b {
            gradient[i * 3..i * 3 + 3].copy_from_slice(&[0.0; 3]);
        }
    }
    Ok(LossGrad { value, gradient })
}

/// Monocular depth network interface. The scale and offset of its output are arbitrary.
pub trait DepthEstimator: Send + Sync {
    fn estimate(&self, image: &ImageFrame, view: usize) -> Result<Vec<f64>>;
}

/// Known per-view depth maps, for synthetic scenes.
#[derive(Debug, Clone)]
pub struct OracleDepth {
    pub maps: Vec<Vec<f64>>,
}

impl DepthEstimator for OracleDepth {
    fn estimate(&self, image: &ImageFrame, view: usize) -> Result<Vec<f64>> {
        let map = self
            .maps
            .get(view)
            .ok_or_else(|| Error::Feature(format!("no depth map for view {view}")))?;
        if map.len() != image.width * image.height {
            return Err(Error::Shape("depth map does not match the image".into()));
        }
        Ok(map.clone())
    }
}

/// Darker is farther: `1 - luminance`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LuminanceDepth;

impl DepthEstimator for LuminanceDepth {
    fn estimate(&self, image: &ImageFrame, _view: usize) -> Result<Vec<f64>> {
        Ok(image
            .data
            .chunks_exact(3)
            .map(|p| 1.0 - (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]))
            .collect())
    }
}

pub const PEARSON_EPS: f64 = 1e-8;

/// Depth loss value, gradient with respect to the rendered depth, and whether
/// either side was constant (in which case the loss is 0).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthLoss {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub degenerate: bool,
}

/// Negative Pearson correlation between rendered and estimated depth over `region`.
pub fn depth_loss(rendered: &[f64], estimated: &[f64], region: &MaskFrame) -> Result<DepthLoss> {
    if rendered.len() != region.bits.len() || estimated.len() != region.bits.len() {
        return Err(Error::Shape("depth maps do not match the region".into()));
    }
    let idx: Vec<usize> = (0..region.bits.len()).filter(|&i| region.bits[i]).collect();
    if idx.len() < 2 {
        return Err(Error::InvalidArgument("depth loss needs at least two pixels".into()));
    }
    let n = idx.len() as f64;
    let mean = |v: &[f64]| idx.iter().map(|&i| v[i]).sum::<f64>() / n;
    let (mr, me) = (mean(rendered), mean(estimated));
    let mut cov = 0.0;
    let mut var_r = 0.0;
    let mut var_e = 0.0;
    for &i in &idx {
        let (dr, de) = (rendered[i] - mr, estimated[i] - me);
        cov += dr * de / n;
        var_r += dr * dr / n;
        var_e += de * de / n;
    }
    let mut gradient = vec![0.0; rendered.len()];
    let (sr, se) = (var_r.sqrt(), var_e.sqrt());
    // Relative test: a map whose spread is at rounding level is constant.
    let flat = |s: f64, m: f64| s <= 1e-12 * m.abs().max(1.0);
    if flat(sr, mr) || flat(se, me) {
        return Ok(DepthLoss {
            value: 0.0,
            gradient,
            degenerate: true,
        });
    }
    let (a, b) = (sr + PEARSON_EPS, se + PEARSON_EPS);
    let rho = cov / (a * b);
    for &i in &idx {
        let (dr, de) = (rendered[i] - mr, estimated[i] - me);
        let drho = de / (n * a * b) - cov / (a * a * b) * dr / (n * sr);
        gradient[i] = -drho;
    }
    Ok(DepthLoss {
        value: -rho,
        gradient,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_recon: f64,
    pub lambda_vgg: f64,
    pub lambda_depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_recon: 3.0,
            lambda_vgg: 0.03,
            lambda_depth: 3.0,
        }
    }
}

/// Individual loss terms of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub distill: f64,
    pub recon: f64,
    pub vgg: f64,
    pub depth: f64,
}

impl LossParts {
    pub fn new(distill: f64, recon: f64, vgg: f64, depth: f64) -> Self {
        Self {
            distill,
            recon,
            vgg,
            depth,
        }
    }
}

pub fn erase_total(parts: &LossParts, weights: &LossWeights) -> f64 {
    parts.distill + weights.lambda_recon * parts.recon + weights.lambda_vgg * parts.vgg + weights.lambda_depth * parts.depth
}

/// Only the distillation term counts during Replace.
pub fn replace_total(parts: &LossParts) -> f64 {
    erase_total(
        parts,
        &LossWeights {
            lambda_recon: 0.0,
            lambda_vgg: 0.0,
            lambda_depth: 0.0,
        },
    )
}
