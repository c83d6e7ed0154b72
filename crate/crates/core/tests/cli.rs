use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ram3d::scene::{load_dataset, read_rgb_png, write_image, DatasetConfig, ImageFrame};
use ram3d::synthetic::SyntheticConfig;

fn ram3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ram3d")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }
}

const TRAIN: &str = r#"
[field]
levels = 4
table_size_log2 = 10
base_resolution = 4
level_scale = 1.5
mlp_hidden = 8
bounds_min = [-1.6, -1.6, -1.3]
bounds_max = [1.6, 1.6, 0.85]

[train]
steps = 3
sampling = { coarse_samples = 8, fine_samples = 8, jitter = true }
"#;

/// Tiny synthetic scene on disk plus a config pointing at it.
fn workspace(extra: &str) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let scene = SyntheticConfig {
        size: 16,
        views: 2,
        focal: 16.0,
        supersample: 2,
        guidance_resolution: 16,
        ..SyntheticConfig::default()
    }
    .build()
    .unwrap();
    scene.save(&root.join("data")).unwrap();
    let config = format!(
        "out = \"out\"\n\n[dataset]\nroot = \"data\"\ndilation_radius = 0\nhalo_width = 3\nguidance_resolution = 16\n{TRAIN}{extra}"
    );
    fs::write(root.join("run.toml"), config).unwrap();
    Workspace { _dir: dir, root }
}

fn dataset_config(ws: &Workspace) -> DatasetConfig {
    DatasetConfig {
        root: ws.path("data"),
        dilation_radius: 0,
        halo_width: 3,
        guidance_resolution: 16,
    }
}

fn pngs(dir: &Path) -> usize {
    fs::read_dir(dir)
        .map(|d| d.filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count())
        .unwrap_or(0)
}

#[test]
fn erase_then_replace_then_render() {
    let ws = workspace("");
    let config = ws.s("run.toml");
    let out = ws.s("out");

    let erase = ram3d(&["erase", "--config", &config, "--out", &out]);
    assert_eq!(code(&erase), 0, "{}", stderr(&erase));
    for f in ["out/erase/checkpoint.bin", "out/erase/loss.csv", "out/erase/dataset/cameras.json"] {
        assert!(ws.path(f).exists(), "{f} missing");
    }
    assert_eq!(pngs(&ws.path("out/erase/dataset/images")), 2);
    let csv = fs::read_to_string(ws.path("out/erase/loss.csv")).unwrap();
    assert!(csv.starts_with("step,l_hifa,l_recon,l_vgg,l_depth,total"));
    assert_eq!(csv.lines().count(), 4);

    // Exterior pixels of the exported frames are the inputs, bit for bit.
    let dataset = load_dataset(&ws.path("data"), &dataset_config(&ws)).unwrap();
    for frame in &dataset.frames {
        let edited = read_rgb_png(&ws.path("out/erase/dataset/images").join(&frame.name)).unwrap();
        for (row, col) in frame.regions.exterior().pixels() {
            assert_eq!(edited.pixel(row, col), frame.image.pixel(row, col));
        }
    }

    // Replace picks up the erased frames as backgrounds.
    let replace = ram3d(&["replace", "--config", &config, "--out", &out, "--prompt", "a red ball"]);
    assert_eq!(code(&replace), 0, "{}", stderr(&replace));
    assert_eq!(pngs(&ws.path("out/replace/alpha")), 2);

    let render_dir = ws.s("render");
    let ckpt = ws.s("out/replace/checkpoint.bin");
    let render = ram3d(&["render", "--config", &config, "--checkpoint", &ckpt, "--camera", "1", "--out", &render_dir]);
    assert_eq!(code(&render), 0, "{}", stderr(&render));
    for f in ["rgb.png", "alpha.png", "depth.png"] {
        assert!(ws.path("render").join(f).exists());
    }

    let far = ram3d(&["render", "--config", &config, "--checkpoint", &ckpt, "--camera", "7", "--out", &render_dir]);
    assert_eq!(code(&far), 2);
    assert!(stderr(&far).contains("out of range"));
}

#[test]
fn resume_continues_from_checkpoint() {
    let ws = workspace("");
    let config = ws.s("run.toml");
    let out = ws.s("out");
    let first = ram3d(&["erase", "--config", &config, "--out", &out, "--steps", "2"]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let second = ram3d(&["erase", "--config", &config, "--out", &out, "--steps", "3", "--resume"]);
    assert_eq!(code(&second), 0, "{}", stderr(&second));
    // 2 steps ran before, only step 2 runs now
    let csv = fs::read_to_string(ws.path("out/erase/loss.csv")).unwrap();
    let steps: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["2"]);
}

#[test]
fn monolithic_runs() {
    let ws = workspace("");
    let run = ram3d(&["monolithic", "--config", &ws.s("run.toml"), "--out", &ws.s("out"), "--prompt", "a vase"]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    assert!(ws.path("out/monolithic/checkpoint.bin").exists());
}

#[test]
fn missing_dataset_is_a_data_error() {
    let ws = workspace("");
    fs::remove_dir_all(ws.path("data")).unwrap();
    let run = ram3d(&["erase", "--config", &ws.s("run.toml")]);
    assert_eq!(code(&run), 2);
    assert!(stderr(&run).contains("[data]"), "{}", stderr(&run));
}

#[test]
fn missing_config_and_unknown_keys_are_config_errors() {
    let ws = workspace("");
    let run = ram3d(&["erase", "--config", &ws.s("nope.toml")]);
    assert_eq!(code(&run), 2);
    assert!(stderr(&run).contains("[config]"));

    fs::write(ws.path("bad.toml"), "[train]\nstepz = 3\n").unwrap();
    let run = ram3d(&["erase", "--config", &ws.s("bad.toml")]);
    assert_eq!(code(&run), 2);
}

#[test]
fn replace_without_backgrounds_fails() {
    let ws = workspace("");
    let run = ram3d(&["replace", "--config", &ws.s("run.toml"), "--out", &ws.s("out"), "--prompt", "x"]);
    assert_eq!(code(&run), 2);
    assert!(stderr(&run).contains("background"));
}

#[test]
fn diverging_run_exits_with_numeric_error() {
    let ws = workspace("");
    let toml = fs::read_to_string(ws.path("run.toml")).unwrap();
    fs::write(ws.path("run.toml"), toml.replace("steps = 3", "steps = 30\nlearning_rate = 1e300")).unwrap();
    let run = ram3d(&["erase", "--config", &ws.s("run.toml"), "--out", &ws.s("out")]);
    assert_eq!(code(&run), 3, "{}", stderr(&run));
    let err = stderr(&run);
    assert!(err.contains("[numeric]") && err.contains("at step "), "{err}");
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let ws = workspace("");
    fs::write(ws.path("bad.bin"), b"NOTACHECKPOINT").unwrap();
    let run = ram3d(&[
        "render",
        "--config",
        &ws.s("run.toml"),
        "--checkpoint",
        &ws.s("bad.bin"),
        "--camera",
        "0",
        "--out",
        &ws.s("render"),
    ]);
    assert_eq!(code(&run), 2);
    assert!(stderr(&run).contains("checkpoint"));
}

fn write_frames(dir: &Path, frames: &[ImageFrame]) {
    fs::create_dir_all(dir).unwrap();
    for (i, f) in frames.iter().enumerate() {
        write_image(&dir.join(format!("{i:03}.png")), f).unwrap();
    }
}

#[test]
fn eval_needs_two_frames_and_writes_csv() {
    let ws = workspace("");
    let a = ImageFrame::filled(8, 8, [0.2, 0.3, 0.4]);
    let b = ImageFrame::filled(8, 8, [0.8, 0.1, 0.1]);
    write_frames(&ws.path("orig1"), &[a.clone()]);
    write_frames(&ws.path("edit1"), &[b.clone()]);
    let one = ram3d(&["eval", "--orig", &ws.s("orig1"), "--edit", &ws.s("edit1"), "--src", "a", "--tgt", "b"]);
    assert_eq!(code(&one), 2);

    write_frames(&ws.path("orig"), &[a.clone(), ImageFrame::filled(8, 8, [0.3, 0.3, 0.4])]);
    write_frames(&ws.path("edit"), &[b.clone(), ImageFrame::filled(8, 8, [0.9, 0.1, 0.2])]);
    let csv = ws.s("eval.csv");
    let run = ram3d(&[
        "eval", "--orig", &ws.s("orig"), "--edit", &ws.s("edit"), "--src", "a room", "--tgt", "a red room", "--tgt",
        "a crimson room", "--out", &csv,
    ]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3);

    write_frames(&ws.path("edit3"), &[b.clone(), b.clone(), b]);
    let run = ram3d(&["eval", "--orig", &ws.s("orig"), "--edit", &ws.s("edit3"), "--src", "a", "--tgt", "b"]);
    assert_eq!(code(&run), 2);
}

#[test]
fn export_copies_exterior_exactly() {
    let ws = workspace("");
    let dataset = load_dataset(&ws.path("data"), &dataset_config(&ws)).unwrap();
    let edits: Vec<ImageFrame> = dataset.frames.iter().map(|f| ImageFrame::filled(f.image.width, f.image.height, [1.0, 0.0, 1.0])).collect();
    fs::create_dir_all(ws.path("edits")).unwrap();
    for (f, e) in dataset.frames.iter().zip(&edits) {
        write_image(&ws.path("edits").join(&f.name), e).unwrap();
    }
    let run = ram3d(&["export", "--config", &ws.s("run.toml"), "--edits", &ws.s("edits"), "--out", &ws.s("export")]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    for frame in &dataset.frames {
        let got = read_rgb_png(&ws.path("export/images").join(&frame.name)).unwrap();
        for row in 0..frame.image.height {
            for col in 0..frame.image.width {
                let want = if frame.regions.bubble().get(row, col) { [1.0, 0.0, 1.0] } else { frame.image.pixel(row, col) };
                assert_eq!(got.pixel(row, col), want);
            }
        }
    }
}
