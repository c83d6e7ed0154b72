//! Command line front end. `ram3d <command> --help` lists the flags.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::{DepthSource, ProviderSpec, RunConfig};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::guidance::external::{ChildTransport, ExternalProvider};
use crate::guidance::{GuidanceProvider, OracleProvider, OracleTarget};
use crate::metrics::{
    direction_consistency, direction_similarity, prompt_sensitivity_report, EditCase, EvalReport,
    ProjectionEmbedding, ReportRow,
};
use crate::objectives::{ConvFeatureExtractor, DepthEstimator, LuminanceDepth};
use crate::render::{render_bubble, ExteriorFill, SamplingConfig};
use crate::scene::{
    export_edited_dataset, load_dataset, read_rgb_png, write_gray_png, write_image, Camera, ImageFrame, MaskFrame,
    RegionSelect, RegionSet, SceneDataset, SceneFrame,
};
use crate::synthetic::{OracleData, ORACLE_DIR};
use crate::train::{log_progress, write_history_csv, RunOptions, StageKind, StageOutput, Supervision, Trainer};

#[derive(Debug, Parser)]
#[command(name = "ram3d", version, about = "Erase and replace objects in multiview scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the number of training steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Guidance provider: "oracle" or "external:<program> [args]".
    #[arg(long)]
    pub provider: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the stage's checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RenderRegion {
    /// Mask and halo, exterior copied from the input.
    Bubble,
    /// Mask only, black exterior.
    Mask,
    /// Every pixel.
    Full,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Inpaint the masked region (writes out/erase/).
    Erase(Common),
    /// Generate a new object inside the mask over the erased background (writes out/replace/).
    Replace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: String,
        /// Directory of background frames; the input images give object addition.
        #[arg(long)]
        background: Option<PathBuf>,
    },
    /// Single field over mask and halo (writes out/monolithic/).
    Monolithic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: String,
    },
    /// Embedding-direction metrics between original and edited frames.
    Eval {
        #[arg(long)]
        orig: PathBuf,
        #[arg(long)]
        edit: PathBuf,
        #[arg(long)]
        src: String,
        /// Target prompt; repeat to compare phrasings.
        #[arg(long, required = true)]
        tgt: Vec<String>,
        /// Embedding model (only the built-in "projection" model ships).
        #[arg(long, default_value = "projection")]
        provider: String,
        #[arg(long, default_value = "scene")]
        scene: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Report CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a stored field from a training camera (index) or a camera JSON file.
    Render {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        camera: String,
        #[arg(long, value_enum, default_value = "bubble")]
        region: RenderRegion,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write edited frames back into the input dataset layout.
    Export {
        #[arg(long)]
        config: PathBuf,
        /// Directory of edited frames named like the dataset images.
        #[arg(long)]
        edits: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args`, runs the command, reports failures on stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let category = e.category();
            eprintln!("error [{}]: {e}", category.as_str());
            category.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Erase(common) => cmd_stage(StageKind::Erase, &common, "", None),
        Command::Replace {
            common,
            prompt,
            background,
        } => cmd_stage(StageKind::Replace, &common, &prompt, background.as_deref()),
        Command::Monolithic { common, prompt } => cmd_stage(StageKind::Monolithic, &common, &prompt, None),
        Command::Eval {
            orig,
            edit,
            src,
            tgt,
            provider,
            scene,
            config,
            seed,
            out,
        } => cmd_eval(&orig, &edit, &src, &tgt, &provider, &scene, config.as_deref(), seed, out),
        Command::Render {
            config,
            checkpoint,
            camera,
            region,
            seed,
            out,
        } => cmd_render(&config, &checkpoint, &camera, region, seed, &out),
        Command::Export { config, edits, out } => {
            let config = RunConfig::load(&config)?;
            let dataset = load_dataset(&config.dataset.root, &config.dataset)?;
            let frames = read_frames_like(&dataset, &edits)?;
            export_edited_dataset(&dataset, &frames, &out)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    if let Some(steps) = common.steps {
        config.train.steps = steps;
    }
    if let Some(p) = &common.provider {
        config.guidance.provider = p.clone();
    }
    if let Some(out) = &common.out {
        config.out = out.clone();
    }
    config.validate()?;
    Ok(config)
}

/// Reads `<dir>/<frame name>` for every frame of the dataset.
pub fn read_frames_like(dataset: &SceneDataset, dir: &Path) -> Result<Vec<ImageFrame>> {
    dataset
        .frames
        .iter()
        .map(|f| {
            let img = read_rgb_png(&dir.join(&f.name))?;
            if !img.same_shape(&f.image) {
                return Err(Error::Shape(format!("{} does not match the input frame size", f.name)));
            }
            Ok(img)
        })
        .collect()
}

fn oracle_data(config: &RunConfig, dataset: &SceneDataset) -> Result<Option<OracleData>> {
    let dir = config.dataset.root.join(ORACLE_DIR);
    if dir.is_dir() {
        OracleData::load(&dir, dataset).map(Some)
    } else {
        Ok(None)
    }
}

fn build_provider(
    config: &RunConfig,
    kind: StageKind,
    oracle: Option<&OracleData>,
) -> Result<Box<dyn GuidanceProvider>> {
    match ProviderSpec::parse(&config.guidance.provider)? {
        ProviderSpec::Oracle => {
            let data = oracle.ok_or_else(|| {
                Error::Config(format!(
                    "the oracle provider needs ground truth in {}",
                    config.dataset.root.join(ORACLE_DIR).display()
                ))
            })?;
            let targets: Vec<OracleTarget> = match kind {
                StageKind::Erase => data.erase_targets(),
                _ => data.replace_targets(),
            };
            Ok(Box::new(OracleProvider::new(targets, config.guidance.latent_factor)?))
        }
        ProviderSpec::External { program, args } => {
            let transport = ChildTransport::spawn(&program, &args)?;
            Ok(Box::new(ExternalProvider::connect(
                program.display().to_string(),
                Box::new(transport),
            )?))
        }
    }
}

fn build_depth(config: &RunConfig, oracle: Option<&OracleData>) -> Result<Box<dyn DepthEstimator>> {
    match (config.objectives.depth, oracle) {
        (DepthSource::Oracle, None) => Err(Error::Config("depth = \"oracle\" needs an oracle directory".into())),
        (DepthSource::Oracle | DepthSource::Auto, Some(data)) => Ok(Box::new(data.depth_oracle())),
        _ => Ok(Box::new(LuminanceDepth)),
    }
}

fn stage_dir(config: &RunConfig, kind: StageKind) -> PathBuf {
    config.out.join(match kind {
        StageKind::Erase => "erase",
        StageKind::Replace => "replace",
        StageKind::Monolithic => "monolithic",
    })
}

fn cmd_stage(kind: StageKind, common: &Common, prompt: &str, background: Option<&Path>) -> Result<()> {
    let config = load_config(common)?;
    let dataset = load_dataset(&config.dataset.root, &config.dataset)?;
    let backgrounds = if kind == StageKind::Replace {
        let dir = match background {
            Some(dir) => dir.to_path_buf(),
            None => {
                let erased = stage_dir(&config, StageKind::Erase).join("dataset").join("images");
                if !erased.is_dir() {
                    return Err(Error::Config(
                        "replace needs erase outputs or --background <dir>".into(),
                    ));
                }
                erased
            }
        };
        Some(read_frames_like(&dataset, &dir)?)
    } else {
        None
    };
    let oracle = oracle_data(&config, &dataset)?;
    let provider = build_provider(&config, kind, oracle.as_ref())?;
    let depth = build_depth(&config, oracle.as_ref())?;
    let extractor = ConvFeatureExtractor::new(config.objectives.perceptual_seed);
    let supervision = Supervision {
        provider: provider.as_ref(),
        extractor: &extractor,
        depth: depth.as_ref(),
    };
    let mut trainer = match kind {
        StageKind::Erase => Trainer::erase(&dataset, supervision, config.field.clone(), config.train.clone())?,
        StageKind::Replace => Trainer::replace(
            &dataset,
            supervision,
            config.field.clone(),
            config.train.clone(),
            prompt,
            backgrounds.as_deref().expect("replace backgrounds"),
        )?,
        StageKind::Monolithic => {
            Trainer::monolithic(&dataset, supervision, config.field.clone(), config.train.clone(), prompt)?
        }
    };
    let dir = stage_dir(&config, kind);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let ckpt_path = dir.join("checkpoint.bin");
    if common.resume {
        trainer.resume(Checkpoint::load(&ckpt_path)?)?;
        eprintln!("resuming from step {}", trainer.step());
    }
    let steps = config.train.steps;
    let every = (steps / 20).max(1);
    let mut stderr = std::io::stderr();
    let mut progress = |r: &crate::train::StepRecord| {
        if (r.step + 1) % every == 0 || r.step + 1 == steps {
            log_progress(&mut stderr, kind, steps, r);
        }
    };
    let output = trainer.run(RunOptions {
        checkpoint_path: Some(ckpt_path),
        stop_after: None,
        progress: Some(&mut progress),
    })?;
    write_stage_outputs(&dataset, &output, &dir)
}

fn write_stage_outputs(dataset: &SceneDataset, output: &StageOutput, dir: &Path) -> Result<()> {
    write_history_csv(&output.history, &dir.join("loss.csv"))?;
    export_edited_dataset(dataset, &output.images(), &dir.join("dataset"))?;
    if output.kind == StageKind::Replace {
        let alpha_dir = dir.join("alpha");
        fs::create_dir_all(&alpha_dir).map_err(|e| Error::io(&alpha_dir, e))?;
        for (frame, view) in dataset.frames.iter().zip(&output.views) {
            let gray = view.alpha.iter().map(|&a| crate::scene::quantize(a)).collect();
            write_gray_png(&alpha_dir.join(&frame.name), frame.image.width, frame.image.height, gray)?;
        }
    }
    let mut out = std::io::stdout();
    let _ = writeln!(out, "wrote {}", dir.display());
    Ok(())
}

fn list_frames(dir: &Path) -> Result<Vec<ImageFrame>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    names.sort();
    names.iter().map(|p| read_rgb_png(p)).collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    orig: &Path,
    edit: &Path,
    src: &str,
    tgt: &[String],
    provider: &str,
    scene: &str,
    config: Option<&Path>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let config = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if provider != "projection" {
        return Err(Error::Config(format!("unknown embedding provider {provider:?}")));
    }
    let m = &config.metrics;
    let embed = ProjectionEmbedding::new(m.dim, m.grid, seed.unwrap_or(m.seed));
    let originals = list_frames(orig)?;
    let edits = list_frames(edit)?;
    if originals.len() != edits.len() {
        return Err(Error::CountMismatch {
            what: "edited frames".into(),
            expected: originals.len(),
            found: edits.len(),
        });
    }
    let report = if tgt.len() >= 2 {
        prompt_sensitivity_report(
            &[EditCase {
                scene: scene.to_string(),
                originals,
                edits,
                src_prompt: src.to_string(),
                phrasings: tgt.to_vec(),
            }],
            &embed,
        )?
    } else {
        let consistency = direction_consistency(&originals, &edits, &embed)?;
        EvalReport {
            provider: "projection".into(),
            rows: vec![ReportRow {
                scene: scene.to_string(),
                prompt_src: src.to_string(),
                prompt_tgt: tgt[0].clone(),
                dir_similarity: direction_similarity(&originals, &edits, src, &tgt[0], &embed)?,
                dir_consistency: consistency,
            }],
        }
    };
    let path = out.unwrap_or_else(|| config.out.join("eval.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    report.write_csv(&path)?;
    print!("{}", report.format_table());
    Ok(())
}

fn cmd_render(
    config: &Path,
    checkpoint: &Path,
    camera: &str,
    region: RenderRegion,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let config = RunConfig::load(config)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let field = Field::new(ckpt.field.clone())?;
    field.check_params(&ckpt.params)?;

    let (dataset, view) = match camera.parse::<usize>() {
        Ok(index) => {
            let dataset = load_dataset(&config.dataset.root, &config.dataset)?;
            if index >= dataset.len() {
                return Err(Error::InvalidArgument(format!(
                    "camera index {index} out of range ({} views)",
                    dataset.len()
                )));
            }
            (dataset, index)
        }
        Err(_) => {
            let path = Path::new(camera);
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let cam: Camera = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            cam.validate()?;
            let (w, h) = (cam.width, cam.height);
            let frame = SceneFrame {
                name: "camera.png".into(),
                image: ImageFrame::new(w, h),
                camera: cam,
                regions: RegionSet::new(MaskFrame::full(w, h), MaskFrame::empty(w, h))?,
            };
            (SceneDataset::new("camera", vec![frame], config.dataset.guidance_resolution)?, 0)
        }
    };
    let mut dataset = dataset;
    let (select, fill) = match region {
        RenderRegion::Bubble => (RegionSelect::MaskAndHalo, ExteriorFill::Input),
        RenderRegion::Mask => (RegionSelect::Mask, ExteriorFill::Zero),
        RenderRegion::Full => {
            let f = &mut dataset.frames[view];
            let (w, h) = (f.image.width, f.image.height);
            f.regions = RegionSet::new(MaskFrame::full(w, h), MaskFrame::empty(w, h))?;
            (RegionSelect::Mask, ExteriorFill::Zero)
        }
    };
    let sampling = SamplingConfig {
        jitter: false,
        ..config.train.sampling
    };
    let seed = seed.unwrap_or(config.train.seed);
    let bubble = render_bubble(view, &dataset, select, fill, &field, &ckpt.params, &sampling, seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (w, h) = (bubble.image.width, bubble.image.height);
    write_image(&out.join("rgb.png"), &bubble.image)?;
    let alpha = bubble.alpha.iter().map(|&a| crate::scene::quantize(a)).collect();
    write_gray_png(&out.join("alpha.png"), w, h, alpha)?;
    let far = dataset.frames[view].camera.far;
    let depth = bubble.depth.iter().map(|&d| crate::scene::quantize(d / far)).collect();
    write_gray_png(&out.join("depth.png"), w, h, depth)?;
    println!("wrote {}", out.display());
    Ok(())
}
