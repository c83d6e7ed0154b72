//! Stage optimizers: Erase (background inpainting), Replace (foreground
//! generation composited over the inpainted background) and the single-field
//! monolithic variant.

use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, TrainState};
use crate::error::{Error, Result};
use crate::field::{Field, FieldConfig, FieldParams};
use crate::guidance::{
    distill_loss, schedule_t, DistillInput, DistillLossConfig, GuidanceProvider, NoiseSchedule, Reduction,
    TimestepWeighting,
};
use crate::objectives::{
    depth_loss, erase_total, perceptual_loss, recon_loss, replace_total, DepthEstimator, FeatureExtractor,
    LossParts, LossWeights,
};
use crate::parallel::derive_seed;
use crate::render::{render_backward, render_bubble, BubbleCotangent, BubbleRender, ExteriorFill, SamplingConfig};
use crate::scene::{compute_crop, CropMode, CropSpec, ImageFrame, RegionSelect, SceneDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A contiguous slice of the parameter vector sharing one learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub range: Range<usize>,
    pub lr: f64,
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One update. Fails without touching anything if a gradient is not finite.
    pub fn step(&mut self, params: &mut FieldParams, grads: &FieldParams, groups: &[ParamGroup]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape("optimizer state does not match the parameters".into()));
        }
        if let Some(i) = grads.values.iter().position(|g| !g.is_finite()) {
            return Err(Error::numerical(None, format!("non-finite gradient at parameter {i}")));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for group in groups {
            for i in group.range.clone() {
                let g = grads.values[i];
                self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                let m_hat = self.m[i] / c1;
                let v_hat = self.v[i] / c2;
                params.values[i] -= group.lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Hash tables learn this many times faster than the MLP.
    pub hash_lr_multiplier: f64,
    pub cfg_scale_erase: f64,
    pub cfg_scale_replace: f64,
    pub background_augmentation: bool,
    /// Every this many steps the Replace background becomes a random constant color.
    pub bg_swap_interval: usize,
    pub sampling: SamplingConfig,
    pub seed: u64,
    pub weights: LossWeights,
    pub schedule: NoiseSchedule,
    pub lambda_rgb: f64,
    pub weighting: TimestepWeighting,
    pub reduction: Reduction,
    pub adam: AdamConfig,
    pub crop_mode: CropMode,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            learning_rate: 1e-3,
            hash_lr_multiplier: 10.0,
            cfg_scale_erase: 7.5,
            cfg_scale_replace: 30.0,
            background_augmentation: true,
            bg_swap_interval: 3,
            sampling: SamplingConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
            schedule: NoiseSchedule::default(),
            lambda_rgb: 0.1,
            weighting: TimestepWeighting::Constant,
            reduction: Reduction::Sum,
            adam: AdamConfig::default(),
            crop_mode: CropMode::CenterHeight,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Small frames, 2000 steps, 32 + 32 samples per ray.
    pub fn desk() -> Self {
        Self {
            steps: 2000,
            sampling: SamplingConfig {
                coarse_samples: 32,
                fine_samples: 32,
                jitter: true,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.hash_lr_multiplier > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.background_augmentation && self.bg_swap_interval == 0 {
            return Err(Error::Config("bg_swap_interval must be at least 1".into()));
        }
        if self.sampling.coarse_samples == 0 {
            return Err(Error::Config("at least one coarse sample per ray is required".into()));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(Error::Config("adam needs 0 <= beta < 1 and eps > 0".into()));
        }
        let w = self.weights;
        if [w.lambda_recon, w.lambda_vgg, w.lambda_depth, self.lambda_rgb]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        self.schedule.validate()
    }

    fn distill_config(&self, cfg_scale: f64) -> DistillLossConfig {
        DistillLossConfig {
            lambda_rgb: self.lambda_rgb,
            cfg_scale,
            weighting: self.weighting,
            reduction: self.reduction,
        }
    }

    fn swaps_background(&self, step: usize) -> bool {
        self.background_augmentation && step % self.bg_swap_interval == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Erase,
    Replace,
    Monolithic,
}

impl StageKind {
    fn tag(self) -> u64 {
        match self {
            StageKind::Erase => 0xE5A5E,
            StageKind::Replace => 0x5E91ACE,
            StageKind::Monolithic => 0x3040,
        }
    }
}

/// Pretrained-model stand-ins used by the stages.
#[derive(Clone, Copy)]
pub struct Supervision<'a> {
    pub provider: &'a dyn GuidanceProvider,
    pub extractor: &'a dyn FeatureExtractor,
    pub depth: &'a dyn DepthEstimator,
}

/// Loss terms of one step, as stored in the history CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(rename = "l_hifa")]
    pub distill: f64,
    #[serde(rename = "l_recon")]
    pub recon: f64,
    #[serde(rename = "l_vgg")]
    pub vgg: f64,
    #[serde(rename = "l_depth")]
    pub depth: f64,
    pub total: f64,
}

/// Everything computed during one step before the optimizer update.
#[derive(Debug, Clone)]
pub struct StepDetail {
    pub record: StepRecord,
    pub view: usize,
    pub t: f64,
    pub swapped_background: bool,
    pub bubble: BubbleRender,
    pub cotangent: BubbleCotangent,
    pub gradient: FieldParams,
}

/// Rendering of one view by a trained stage.
#[derive(Debug, Clone)]
pub struct ViewRender {
    /// Full frame: the edited image for Erase and Monolithic, the composite
    /// over the supplied background for Replace.
    pub image: ImageFrame,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub kind: StageKind,
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord>,
    pub views: Vec<ViewRender>,
}

impl StageOutput {
    pub fn images(&self) -> Vec<ImageFrame> {
        self.views.iter().map(|v| v.image.clone()).collect()
    }
}

pub fn write_history_csv(history: &[StepRecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in history {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<StepRecord>, _>>()
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

/// Where and how often `Trainer::run` writes checkpoints, and an optional
/// early stop (for resumable runs split across invocations).
#[derive(Default)]
pub struct RunOptions<'a> {
    pub checkpoint_path: Option<PathBuf>,
    pub stop_after: Option<usize>,
    pub progress: Option<&'a mut dyn FnMut(&StepRecord)>,
}

/// One field being optimized for one stage.
pub struct Trainer<'a> {
    kind: StageKind,
    dataset: &'a SceneDataset,
    supervision: Supervision<'a>,
    config: TrainConfig,
    prompt: String,
    backgrounds: Option<&'a [ImageFrame]>,
    field: Field,
    params: FieldParams,
    adam: Adam,
    step: usize,
    crops: Vec<CropSpec>,
}

impl<'a> Trainer<'a> {
    fn new(
        kind: StageKind,
        dataset: &'a SceneDataset,
        supervision: Supervision<'a>,
        field_config: FieldConfig,
        config: TrainConfig,
        prompt: &str,
        backgrounds: Option<&'a [ImageFrame]>,
    ) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        if let Some(bgs) = backgrounds {
            if bgs.len() != dataset.len() {
                return Err(Error::CountMismatch {
                    what: "background frames".into(),
                    expected: dataset.len(),
                    found: bgs.len(),
                });
            }
            for (bg, frame) in bgs.iter().zip(&dataset.frames) {
                if !bg.same_shape(&frame.image) {
                    return Err(Error::Shape(format!("background for {} has the wrong size", frame.name)));
                }
            }
        }
        let region_for_crop = |f: &crate::scene::SceneFrame| match kind {
            StageKind::Replace => crate::scene::RegionSet {
                mask: f.regions.mask.clone(),
                halo: crate::scene::MaskFrame::empty(f.regions.mask.width, f.regions.mask.height),
            },
            _ => f.regions.clone(),
        };
        let crops = dataset
            .frames
            .iter()
            .map(|f| {
                compute_crop(
                    &region_for_crop(f),
                    f.image.width,
                    f.image.height,
                    config.crop_mode,
                    dataset.guidance_resolution,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let field = Field::new(field_config)?;
        let params = field.init_params(derive_seed(&[config.seed, kind.tag(), 0x1417]));
        let adam = Adam::new(params.len(), config.adam);
        Ok(Self {
            kind,
            dataset,
            supervision,
            config,
            prompt: prompt.to_string(),
            backgrounds,
            field,
            params,
            adam,
            step: 0,
            crops,
        })
    }

    /// Background inpainting with an empty prompt.
    pub fn erase(
        dataset: &'a SceneDataset,
        supervision: Supervision<'a>,
        field_config: FieldConfig,
        config: TrainConfig,
    ) -> Result<Self> {
        Self::new(StageKind::Erase, dataset, supervision, field_config, config, "", None)
    }

    /// Foreground generation over the given (inpainted) backgrounds.
    pub fn replace(
        dataset: &'a SceneDataset,
        supervision: Supervision<'a>,
        field_config: FieldConfig,
        config: TrainConfig,
        prompt: &str,
        backgrounds: &'a [ImageFrame],
    ) -> Result<Self> {
        Self::new(StageKind::Replace, dataset, supervision, field_config, config, prompt, Some(backgrounds))
    }

    /// One field over mask and halo, guided by the target prompt.
    pub fn monolithic(
        dataset: &'a SceneDataset,
        supervision: Supervision<'a>,
        field_config: FieldConfig,
        config: TrainConfig,
        prompt: &str,
    ) -> Result<Self> {
        Self::new(StageKind::Monolithic, dataset, supervision, field_config, config, prompt, None)
    }

    pub fn kind(&self) -> StageKind {
        self.kind
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn params(&self) -> &FieldParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Identifies everything that influences the optimization trajectory.
    pub fn config_hash(&self) -> u64 {
        #[derive(Serialize)]
        struct Key<'k> {
            kind: StageKind,
            prompt: &'k str,
            field: &'k FieldConfig,
            train: TrainConfig,
            provider: &'k str,
        }
        let key = Key {
            kind: self.kind,
            prompt: &self.prompt,
            field: self.field.config(),
            // extending a run with more steps is allowed
            train: TrainConfig {
                checkpoint_every: 0,
                steps: 0,
                ..self.config.clone()
            },
            provider: self.supervision.provider.id(),
        };
        let json = serde_json::to_vec(&key).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            field: self.field.config().clone(),
            params: self.params.clone(),
            train: Some(TrainState {
                step: self.step as u64,
                config_hash: self.config_hash(),
                adam_t: self.adam.t,
                first_moment: self.adam.m.clone(),
                second_moment: self.adam.v.clone(),
            }),
        }
    }

    /// Continues from a checkpoint written by a run with the same configuration.
    pub fn resume(&mut self, checkpoint: Checkpoint) -> Result<()> {
        let state = checkpoint
            .train
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state to resume from".into()))?;
        let current = self.config_hash();
        if &checkpoint.field != self.field.config() || state.config_hash != current {
            return Err(Error::ConfigMismatch {
                stored: state.config_hash,
                current,
            });
        }
        self.field.check_params(&checkpoint.params)?;
        self.params = checkpoint.params;
        self.adam.t = state.adam_t;
        self.adam.m = state.first_moment;
        self.adam.v = state.second_moment;
        self.step = state.step as usize;
        Ok(())
    }

    /// Replaces the parameters (for rendering a stored field).
    pub fn load_params(&mut self, params: FieldParams) -> Result<()> {
        self.field.check_params(&params)?;
        self.params = params;
        Ok(())
    }

    fn seed(&self, step: usize, purpose: u64) -> u64 {
        derive_seed(&[self.config.seed, self.kind.tag(), step as u64, purpose])
    }

    fn view_for(&self, step: usize) -> usize {
        (self.seed(step, 0) % self.dataset.len() as u64) as usize
    }

    fn param_groups(&self) -> [ParamGroup; 2] {
        let layout = self.field.layout();
        [
            ParamGroup {
                range: layout.hash_range(),
                lr: self.config.learning_rate * self.config.hash_lr_multiplier,
            },
            ParamGroup {
                range: layout.mlp_range(),
                lr: self.config.learning_rate,
            },
        ]
    }

    /// The background the foreground is composited over at `step`.
    pub fn background_at(&self, step: usize, view: usize) -> Option<ImageFrame> {
        let bgs = self.backgrounds?;
        let frame = &bgs[view];
        if self.config.swaps_background(step) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed(step, 3));
            let rgb = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            Some(ImageFrame::filled(frame.width, frame.height, rgb))
        } else {
            Some(frame.clone())
        }
    }

    /// Losses, pixel cotangents and parameter gradient of the current step,
    /// without updating anything.
    pub fn compute_step(&self) -> Result<StepDetail> {
        let step = self.step;
        let view = self.view_for(step);
        let frame = &self.dataset.frames[view];
        let (w, h) = (frame.image.width, frame.image.height);
        let crop = self.crops[view];
        let t = schedule_t(step, self.config.steps, &self.config.schedule);
        let render_seed = self.seed(step, 1);
        let noise_seed = self.seed(step, 2);
        let provider = self.supervision.provider;
        let mask_crop = crop.extract_mask(&frame.regions.mask);

        let (record, bubble, cotangent, swapped) = match self.kind {
            StageKind::Erase | StageKind::Monolithic => {
                let bubble = render_bubble(
                    view,
                    self.dataset,
                    RegionSelect::MaskAndHalo,
                    ExteriorFill::Input,
                    &self.field,
                    &self.params,
                    &self.config.sampling,
                    render_seed,
                )?;
                let x_crop = crop.extract(&bubble.image);
                let cond_crop = crop.extract(&frame.image);
                let cfg_scale = if self.kind == StageKind::Erase {
                    self.config.cfg_scale_erase
                } else {
                    self.config.cfg_scale_replace
                };
                let distill = distill_loss(
                    provider,
                    &DistillInput {
                        image: &x_crop,
                        prompt: &self.prompt,
                        mask: &mask_crop,
                        condition: &cond_crop,
                        view,
                        crop,
                        t,
                        noise_seed,
                    },
                    &self.config.distill_config(cfg_scale),
                )?;
                let mut g_rgb = crop.extract_adjoint(&distill.gradient, w, h);
                let weights = self.config.weights;
                let halo = &frame.regions.halo;
                let mut parts = LossParts::new(distill.loss, 0.0, 0.0, 0.0);
                if !halo.is_empty() {
                    let recon = recon_loss(&bubble.image, &frame.image, halo)?;
                    let vgg = perceptual_loss(&bubble.image, &frame.image, halo, self.supervision.extractor)?;
                    axpy(&mut g_rgb, weights.lambda_recon, &recon.gradient);
                    axpy(&mut g_rgb, weights.lambda_vgg, &vgg.gradient);
                    parts.recon = recon.value;
                    parts.vgg = vgg.value;
                }
                let mut g_depth = vec![0.0; w * h];
                if self.kind == StageKind::Erase && weights.lambda_depth > 0.0 {
                    let x_hat_frame = crop.paste(&distill.x_hat, &bubble.image);
                    let estimate = self.supervision.depth.estimate(&x_hat_frame, view)?;
                    let depth = depth_loss(&bubble.depth, &estimate, &frame.regions.bubble())?;
                    axpy(&mut g_depth, weights.lambda_depth, &depth.gradient);
                    parts.depth = depth.value;
                }
                let total = erase_total(&parts, &weights);
                let cot = BubbleCotangent {
                    rgb: g_rgb,
                    alpha: vec![0.0; w * h],
                    depth: g_depth,
                };
                (record(step, &parts, total), bubble, cot, false)
            }
            StageKind::Replace => {
                let bubble = render_bubble(
                    view,
                    self.dataset,
                    RegionSelect::Mask,
                    ExteriorFill::Zero,
                    &self.field,
                    &self.params,
                    &self.config.sampling,
                    render_seed,
                )?;
                let background = self.background_at(step, view).expect("replace has backgrounds");
                let composite = composite_over(&bubble, &background);
                let x_crop = crop.extract(&composite);
                let cond_crop = crop.extract(&background);
                let distill = distill_loss(
                    provider,
                    &DistillInput {
                        image: &x_crop,
                        prompt: &self.prompt,
                        mask: &mask_crop,
                        condition: &cond_crop,
                        view,
                        crop,
                        t,
                        noise_seed,
                    },
                    &self.config.distill_config(self.config.cfg_scale_replace),
                )?;
                let g = crop.extract_adjoint(&distill.gradient, w, h);
                let mut cot = BubbleCotangent::zeros(w, h);
                for (row, col) in frame.regions.mask.pixels() {
                    let p = row * w + col;
                    let a = bubble.alpha[p];
                    let fg = bubble.image.pixel(row, col);
                    let bg = background.pixel(row, col);
                    for k in 0..3 {
                        cot.rgb[p * 3 + k] = g[p * 3 + k] * a;
                        cot.alpha[p] += g[p * 3 + k] * (fg[k] - bg[k]);
                    }
                }
                let parts = LossParts::new(distill.loss, 0.0, 0.0, 0.0);
                let swapped = self.config.swaps_background(step);
                (record(step, &parts, replace_total(&parts)), bubble, cot, swapped)
            }
        };
        if !record.total.is_finite() {
            return Err(Error::numerical(
                Some(step),
                format!(
                    "loss is not finite (distill {}, recon {}, vgg {}, depth {})",
                    record.distill, record.recon, record.vgg, record.depth
                ),
            ));
        }
        let mut gradient = self.field.zero_params();
        render_backward(&bubble, &cotangent, &self.field, &self.params, &mut gradient)?;
        Ok(StepDetail {
            record,
            view,
            t,
            swapped_background: swapped,
            bubble,
            cotangent,
            gradient,
        })
    }

    /// Applies a gradient computed by `compute_step` and advances the step counter.
    pub fn apply(&mut self, detail: &StepDetail) -> Result<()> {
        let groups = self.param_groups();
        self.adam
            .step(&mut self.params, &detail.gradient, &groups)
            .map_err(|e| e.at_step(self.step))?;
        if !self.params.all_finite() {
            return Err(Error::numerical(Some(self.step), "parameters became non-finite"));
        }
        self.step += 1;
        Ok(())
    }

    pub fn train_step(&mut self) -> Result<StepRecord> {
        let detail = self.compute_step().map_err(|e| e.at_step(self.step))?;
        self.apply(&detail)?;
        Ok(detail.record)
    }

    /// Trains up to `config.steps`, then renders every view.
    pub fn run(&mut self, mut options: RunOptions<'_>) -> Result<StageOutput> {
        let mut history = Vec::new();
        let end = options
            .stop_after
            .map_or(self.config.steps, |s| s.min(self.config.steps));
        while self.step < end {
            let record = self.train_step()?;
            if let Some(cb) = options.progress.as_mut() {
                cb(&record);
            }
            history.push(record);
            let every = self.config.checkpoint_every;
            if let Some(path) = &options.checkpoint_path {
                if every > 0 && self.step % every == 0 {
                    self.checkpoint().save(path)?;
                }
            }
        }
        if let Some(path) = &options.checkpoint_path {
            self.checkpoint().save(path)?;
        }
        Ok(StageOutput {
            kind: self.kind,
            checkpoint: self.checkpoint(),
            history,
            views: self.render_views()?,
        })
    }

    /// Deterministic renders of every view (no jitter).
    pub fn render_views(&self) -> Result<Vec<ViewRender>> {
        let sampling = SamplingConfig {
            jitter: false,
            ..self.config.sampling
        };
        let seed = derive_seed(&[self.config.seed, self.kind.tag(), u64::MAX]);
        (0..self.dataset.len())
            .map(|view| {
                let (region, fill) = match self.kind {
                    StageKind::Replace => (RegionSelect::Mask, ExteriorFill::Zero),
                    _ => (RegionSelect::MaskAndHalo, ExteriorFill::Input),
                };
                let bubble =
                    render_bubble(view, self.dataset, region, fill, &self.field, &self.params, &sampling, seed)?;
                let image = match self.backgrounds {
                    Some(bgs) => composite_over(&bubble, &bgs[view]),
                    None => bubble.image.clone(),
                };
                Ok(ViewRender {
                    image,
                    alpha: bubble.alpha,
                    depth: bubble.depth,
                })
            })
            .collect()
    }
}

fn record(step: usize, parts: &LossParts, total: f64) -> StepRecord {
    StepRecord {
        step,
        distill: parts.distill,
        recon: parts.recon,
        vgg: parts.vgg,
        depth: parts.depth,
        total,
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    if a == 0.0 {
        return;
    }
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `A * x_fg + (1 - A) * x_bg` at rendered pixels, `x_bg` elsewhere.
pub fn composite_over(foreground: &BubbleRender, background: &ImageFrame) -> ImageFrame {
    let mut out = background.clone();
    let w = background.width;
    for ray in &foreground.rays {
        let (row, col) = ray.pixel;
        let a = foreground.alpha[row * w + col];
        let fg = foreground.image.pixel(row, col);
        let bg = background.pixel(row, col);
        out.set_pixel(row, col, [0, 1, 2].map(|k| a * fg[k] + (1.0 - a) * bg[k]));
    }
    out
}

/// Writes a one-line-per-step progress log.
pub fn log_progress(out: &mut dyn Write, kind: StageKind, total_steps: usize, record: &StepRecord) {
    let _ = writeln!(
        out,
        "{kind:?} {}/{total_steps} total={:.6} distill={:.6} recon={:.6} vgg={:.6} depth={:.4}",
        record.step + 1,
        record.total,
        record.distill,
        record.recon,
        record.vgg,
        record.depth
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = FieldParams { values: vec![1.0, -2.0, 0.5] };
        let grads = FieldParams { values: vec![0.3, -7.0, 0.0] };
        let mut adam = Adam::new(3, AdamConfig::default());
        let groups = [
            ParamGroup { range: 0..1, lr: 0.1 },
            ParamGroup { range: 1..3, lr: 0.01 },
        ];
        adam.step(&mut params, &grads, &groups).unwrap();
        // bias-corrected first step: m_hat / sqrt(v_hat) = sign(g)
        assert!((params.values[0] - 0.9).abs() < 1e-6);
        assert!((params.values[1] - -1.99).abs() < 1e-6);
        assert_eq!(params.values[2], 0.5);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let mut params = FieldParams { values: vec![1.0, 2.0] };
        let grads = FieldParams { values: vec![0.1, f64::NAN] };
        let mut adam = Adam::new(2, AdamConfig::default());
        let err = adam
            .step(&mut params, &grads, &[ParamGroup { range: 0..2, lr: 0.1 }])
            .unwrap_err();
        assert!(matches!(err, Error::Numerical { .. }));
        assert_eq!(params.values, vec![1.0, 2.0]);
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn defaults_match_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 1e-3);
        assert_eq!(c.hash_lr_multiplier, 10.0);
        assert_eq!((c.cfg_scale_erase, c.cfg_scale_replace), (7.5, 30.0));
        assert_eq!(c.bg_swap_interval, 3);
        assert_eq!((c.sampling.coarse_samples, c.sampling.fine_samples), (128, 128));
        assert_eq!(c.steps, 20_000);
        assert_eq!(c.lambda_rgb, 0.1);
        let d = TrainConfig::desk();
        assert_eq!((d.steps, d.sampling.coarse_samples, d.sampling.fine_samples), (2000, 32, 32));
    }

    #[test]
    fn swap_schedule() {
        let c = TrainConfig::default();
        let swaps: Vec<usize> = (0..10).filter(|&s| c.swaps_background(s)).collect();
        assert_eq!(swaps, vec![0, 3, 6, 9]);
        let off = TrainConfig {
            background_augmentation: false,
            ..c
        };
        assert!((0..10).all(|s| !off.swaps_background(s)));
    }

    #[test]
    fn history_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let h = vec![
            StepRecord { step: 0, distill: 0.5, recon: 0.1, vgg: 0.2, depth: -0.9, total: 0.1 },
            StepRecord { step: 1, distill: 0.25, recon: 0.0, vgg: 0.0, depth: 0.0, total: 0.25 },
        ];
        write_history_csv(&h, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,l_hifa,l_recon,l_vgg,l_depth,total\n"));
        assert_eq!(read_history_csv(&path).unwrap(), h);
    }
}
