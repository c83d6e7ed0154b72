//! Multiview scene data: cameras, images, inpainting masks and halo regions.
//!
//! A dataset directory looks like
//!
//! ```text
//! <root>/images/000.png   8-bit RGB
//! <root>/masks/000.png    8-bit gray, > 127 means "inside the mask"
//! <root>/cameras.json     {"convention": "opengl", "frames": [...]}
//! ```
//!
//! Frames are aligned by sorted file name. Masks are binarized, dilated and
//! wrapped in a [`RegionSet`] together with their halo ring at load time.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gray values strictly above this are inside the mask.
pub const MASK_THRESHOLD: u8 = 127;

pub const CAMERA_CONVENTION: &str = "opengl";

/// Pinhole camera with an OpenGL-style (right, up, backward) camera-to-world pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// 3x4 row-major rigid transform.
    pub cam_to_world: [f64; 12],
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Shape("camera has zero-sized image".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidArgument(format!(
                "ray bounds must satisfy 0 < near < far (near={}, far={})",
                self.near, self.far
            )));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot - expected).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(
                        "camera rotation block is not orthonormal".into(),
                    ));
                }
            }
        }
        if self.cam_to_world.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite camera pose".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let m = &self.cam_to_world;
        [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]]
    }

    pub fn position(&self) -> [f64; 3] {
        let m = &self.cam_to_world;
        [m[3], m[7], m[11]]
    }

    /// Builds a camera at `eye` looking at `target` with the given world up vector.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        width: usize,
        height: usize,
        focal: f64,
        near: f64,
        far: f64,
    ) -> Self {
        let back = normalize(sub(eye, target));
        let right = normalize(cross(up, back));
        let true_up = cross(back, right);
        let cam_to_world = [
            right[0], true_up[0], back[0], eye[0], //
            right[1], true_up[1], back[1], eye[1], //
            right[2], true_up[2], back[2], eye[2],
        ];
        Camera {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            cam_to_world,
            near,
            far,
        }
    }
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// RGB image, row-major, channels interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageFrame {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &ImageFrame) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn is_valid(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Quantizes to 8-bit per channel.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_data(
            width,
            height,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Boolean per-pixel mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskFrame {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl MaskFrame {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                bits.push(f(row, col));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    /// Binarizes 8-bit gray values at [`MASK_THRESHOLD`].
    pub fn from_gray8(width: usize, height: usize, gray: &[u8]) -> Result<Self> {
        if gray.len() != width * height {
            return Err(Error::Shape("mask buffer size mismatch".into()));
        }
        Ok(Self {
            width,
            height,
            bits: gray.iter().map(|&g| g > MASK_THRESHOLD).collect(),
        })
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn union(&self, other: &MaskFrame) -> MaskFrame {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &MaskFrame) -> MaskFrame {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &MaskFrame) -> MaskFrame {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn complement(&self) -> MaskFrame {
        MaskFrame {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &MaskFrame) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    fn zip_with(&self, other: &MaskFrame, f: impl Fn(bool, bool) -> bool) -> MaskFrame {
        assert_eq!(
            (self.width, self.height),
            (other.width, other.height),
            "mask shapes differ"
        );
        MaskFrame {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Selected pixel coordinates in row-major order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    /// Half-open bounding box `(x_min, y_min, x_max, y_max)` of the selected pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for (row, col) in self.pixels() {
            bbox = Some(match bbox {
                None => (col, row, col + 1, row + 1),
                Some((x0, y0, x1, y1)) => (x0.min(col), y0.min(row), x1.max(col + 1), y1.max(row + 1)),
            });
        }
        bbox
    }
}

/// Inpainting mask plus its halo ring. Everything else is exterior.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSet {
    pub mask: MaskFrame,
    pub halo: MaskFrame,
}

/// Which pixels a bubble render covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSelect {
    Mask,
    MaskAndHalo,
}

impl RegionSet {
    pub fn new(mask: MaskFrame, halo: MaskFrame) -> Result<Self> {
        let regions = Self { mask, halo };
        regions.check_partition()?;
        Ok(regions)
    }

    pub fn bubble(&self) -> MaskFrame {
        self.mask.union(&self.halo)
    }

    pub fn exterior(&self) -> MaskFrame {
        self.bubble().complement()
    }

    pub fn select(&self, which: RegionSelect) -> MaskFrame {
        match which {
            RegionSelect::Mask => self.mask.clone(),
            RegionSelect::MaskAndHalo => self.bubble(),
        }
    }

    pub fn check_partition(&self) -> Result<()> {
        if (self.mask.width, self.mask.height) != (self.halo.width, self.halo.height) {
            return Err(Error::Shape("mask and halo shapes differ".into()));
        }
        if !self.mask.intersection(&self.halo).is_empty() {
            return Err(Error::Shape("mask and halo overlap".into()));
        }
        Ok(())
    }
}

/// Morphological dilation with a `(2r+1) x (2r+1)` square, clipped at the borders.
pub fn dilate_mask(mask: &MaskFrame, radius: usize) -> MaskFrame {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width, mask.height);
    // Separable: a square element is a horizontal pass followed by a vertical one.
    let mut horizontal = MaskFrame::empty(w, h);
    for row in 0..h {
        let line = &mask.bits[row * w..(row + 1) * w];
        let mut prefix = vec![0usize; w + 1];
        for (i, &b) in line.iter().enumerate() {
            prefix[i + 1] = prefix[i] + b as usize;
        }
        for col in 0..w {
            let lo = col.saturating_sub(radius);
            let hi = (col + radius + 1).min(w);
            horizontal.bits[row * w + col] = prefix[hi] > prefix[lo];
        }
    }
    let mut out = MaskFrame::empty(w, h);
    let mut prefix = vec![0usize; h + 1];
    for col in 0..w {
        for row in 0..h {
            prefix[row + 1] = prefix[row] + horizontal.bits[row * w + col] as usize;
        }
        for row in 0..h {
            let lo = row.saturating_sub(radius);
            let hi = (row + radius + 1).min(h);
            out.bits[row * w + col] = prefix[hi] > prefix[lo];
        }
    }
    out
}

/// Halo ring of the given width around `mask`.
pub fn compute_halo(mask: &MaskFrame, width: usize) -> RegionSet {
    let halo = dilate_mask(mask, width).difference(mask);
    RegionSet {
        mask: mask.clone(),
        halo,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Square of side `min(h, w)` centred horizontally.
    CenterHeight,
    /// Square of side `min(h, w)` anchored at the left edge.
    LeftMost,
    /// Mask bounding box, doubled about its centre, squared up and clamped.
    MaskAdaptive,
}

/// Square crop of a frame, resampled to `resample_to` pixels per side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
    pub resample_to: usize,
}

pub fn compute_crop(
    region: &RegionSet,
    frame_w: usize,
    frame_h: usize,
    mode: CropMode,
    resample_to: usize,
) -> Result<CropSpec> {
    let max_side = frame_w.min(frame_h);
    if max_side == 0 || resample_to == 0 {
        return Err(Error::Shape("crop of an empty frame".into()));
    }
    let spec = match mode {
        CropMode::CenterHeight => CropSpec {
            x0: (frame_w - max_side) / 2,
            y0: (frame_h - max_side) / 2,
            side: max_side,
            resample_to,
        },
        CropMode::LeftMost => CropSpec {
            x0: 0,
            y0: (frame_h - max_side) / 2,
            side: max_side,
            resample_to,
        },
        CropMode::MaskAdaptive => {
            let (bx0, by0, bx1, by1) = region
                .mask
                .bounding_box()
                .ok_or_else(|| Error::EmptyMask("mask-adaptive crop needs a mask".into()))?;
            let (bw, bh) = (bx1 - bx0, by1 - by0);
            let side = (2 * bw.max(bh)).min(max_side);
            let center_x = (bx0 + bx1) as f64 / 2.0;
            let center_y = (by0 + by1) as f64 / 2.0;
            let place = |center: f64, extent: usize| -> usize {
                let start = (center - side as f64 / 2.0).round();
                start.clamp(0.0, (extent - side) as f64) as usize
            };
            CropSpec {
                x0: place(center_x, frame_w),
                y0: place(center_y, frame_h),
                side,
                resample_to,
            }
        }
    };
    Ok(spec)
}

/// Bilinear tap positions and weights along one axis of a resample.
fn resample_taps(dst: usize, src: usize) -> Vec<[(usize, f64); 2]> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|j| {
            let pos = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let f = pos - i0 as f64;
            [(i0, 1.0 - f), (i1, f)]
        })
        .collect()
}

impl CropSpec {
    pub fn is_identity_for(&self, width: usize, height: usize) -> bool {
        self.x0 == 0
            && self.y0 == 0
            && self.side == width
            && self.side == height
            && self.side == self.resample_to
    }

    fn check(&self, width: usize, height: usize) {
        assert!(
            self.side > 0 && self.x0 + self.side <= width && self.y0 + self.side <= height,
            "crop {self:?} outside {width}x{height} frame"
        );
    }

    /// Crops and bilinearly resamples an image to `resample_to x resample_to`.
    pub fn extract(&self, image: &ImageFrame) -> ImageFrame {
        self.check(image.width, image.height);
        let n = self.resample_to;
        let taps = resample_taps(n, self.side);
        let mut out = ImageFrame::new(n, n);
        for (r, ty) in taps.iter().enumerate() {
            for (c, tx) in taps.iter().enumerate() {
                let mut rgb = [0.0; 3];
                for &(sy, wy) in ty {
                    for &(sx, wx) in tx {
                        let p = image.pixel(self.y0 + sy, self.x0 + sx);
                        for k in 0..3 {
                            rgb[k] += wy * wx * p[k];
                        }
                    }
                }
                out.set_pixel(r, c, rgb);
            }
        }
        out
    }

    /// Adjoint of [`CropSpec::extract`]: maps a cotangent on the crop back onto the frame.
    pub fn extract_adjoint(&self, cotangent: &[f64], width: usize, height: usize) -> Vec<f64> {
        self.check(width, height);
        let n = self.resample_to;
        assert_eq!(cotangent.len(), n * n * 3);
        let taps = resample_taps(n, self.side);
        let mut out = vec![0.0; width * height * 3];
        for (r, ty) in taps.iter().enumerate() {
            for (c, tx) in taps.iter().enumerate() {
                let g = &cotangent[(r * n + c) * 3..(r * n + c) * 3 + 3];
                for &(sy, wy) in ty {
                    for &(sx, wx) in tx {
                        let o = ((self.y0 + sy) * width + self.x0 + sx) * 3;
                        for k in 0..3 {
                            out[o + k] += wy * wx * g[k];
                        }
                    }
                }
            }
        }
        out
    }

    /// Nearest-neighbour crop of a mask.
    pub fn extract_mask(&self, mask: &MaskFrame) -> MaskFrame {
        self.check(mask.width, mask.height);
        let n = self.resample_to;
        let pick = |j: usize| ((j as f64 + 0.5) * self.side as f64 / n as f64).floor() as usize;
        MaskFrame::from_fn(n, n, |r, c| {
            mask.get(self.y0 + pick(r).min(self.side - 1), self.x0 + pick(c).min(self.side - 1))
        })
    }

    /// Resamples a crop-space image back into frame space, overwriting the crop window of `base`.
    pub fn paste(&self, crop: &ImageFrame, base: &ImageFrame) -> ImageFrame {
        self.check(base.width, base.height);
        let taps = resample_taps(self.side, crop.width);
        let mut out = base.clone();
        for (r, ty) in taps.iter().enumerate() {
            for (c, tx) in taps.iter().enumerate() {
                let mut rgb = [0.0; 3];
                for &(sy, wy) in ty {
                    for &(sx, wx) in tx {
                        let p = crop.pixel(sy, sx);
                        for k in 0..3 {
                            rgb[k] += wy * wx * p[k];
                        }
                    }
                }
                out.set_pixel(self.y0 + r, self.x0 + c, rgb);
            }
        }
        out
    }
}

/// One aligned view of the scene.
#[derive(Debug, Clone)]
pub struct SceneFrame {
    pub name: String,
    pub image: ImageFrame,
    pub camera: Camera,
    pub regions: RegionSet,
}

#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub scene_name: String,
    pub frames: Vec<SceneFrame>,
    pub guidance_resolution: usize,
}

impl SceneDataset {
    pub fn new(scene_name: impl Into<String>, frames: Vec<SceneFrame>, guidance_resolution: usize) -> Result<Self> {
        let dataset = Self {
            scene_name: scene_name.into(),
            frames,
            guidance_resolution,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::CountMismatch {
                what: "dataset frames".into(),
                expected: 1,
                found: 0,
            });
        }
        for frame in &self.frames {
            frame.camera.validate()?;
            let (w, h) = (frame.camera.width, frame.camera.height);
            let shapes = [
                (frame.image.width, frame.image.height),
                (frame.regions.mask.width, frame.regions.mask.height),
                (frame.regions.halo.width, frame.regions.halo.height),
            ];
            if shapes.iter().any(|&s| s != (w, h)) {
                return Err(Error::Shape(format!(
                    "frame {} does not match its {}x{} camera",
                    frame.name, w, h
                )));
            }
            frame.regions.check_partition()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Dataset directory.
    pub root: PathBuf,
    /// Extra dilation applied to input masks, in pixels.
    pub dilation_radius: usize,
    /// Halo ring width, in pixels.
    pub halo_width: usize,
    /// Side of the square image handed to the guidance provider.
    pub guidance_resolution: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            dilation_radius: 8,
            halo_width: 16,
            guidance_resolution: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CamerasFile {
    convention: String,
    frames: Vec<CameraRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    file: String,
    #[serde(flatten)]
    camera: Camera,
}

fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

pub fn read_rgb_png(path: &Path) -> Result<ImageFrame> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    ImageFrame::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
}

pub fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb8: Vec<u8>) -> Result<()> {
    let img = image::RgbImage::from_raw(width as u32, height as u32, rgb8)
        .ok_or_else(|| Error::Shape("rgb buffer size mismatch".into()))?;
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, gray8: Vec<u8>) -> Result<()> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, gray8)
        .ok_or_else(|| Error::Shape("gray buffer size mismatch".into()))?;
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_image(path: &Path, image: &ImageFrame) -> Result<()> {
    write_rgb_png(path, image.width, image.height, image.to_rgb8())
}

/// Loads a dataset directory. Masks are binarized, dilated by
/// `config.dilation_radius`, and surrounded by a halo of `config.halo_width`.
pub fn load_dataset(root: &Path, config: &DatasetConfig) -> Result<SceneDataset> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    let cameras_path = root.join("cameras.json");
    for dir in [&images_dir, &masks_dir] {
        if !dir.is_dir() {
            return Err(Error::io(
                dir.as_path(),
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing dataset directory"),
            ));
        }
    }
    let image_names = list_pngs(&images_dir)?;
    let mask_names = list_pngs(&masks_dir)?;

    let text = fs::read_to_string(&cameras_path).map_err(|e| Error::io(&cameras_path, e))?;
    let cameras: CamerasFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: cameras_path.clone(),
        message: e.to_string(),
    })?;
    if cameras.convention != CAMERA_CONVENTION {
        return Err(Error::Parse {
            path: cameras_path,
            message: format!("unsupported camera convention {:?}", cameras.convention),
        });
    }

    for (what, found) in [("mask files", mask_names.len()), ("camera records", cameras.frames.len())] {
        if found != image_names.len() {
            return Err(Error::CountMismatch {
                what: what.into(),
                expected: image_names.len(),
                found,
            });
        }
    }
    let records: BTreeMap<&str, &CameraRecord> =
        cameras.frames.iter().map(|r| (r.file.as_str(), r)).collect();

    let mut frames = Vec::with_capacity(image_names.len());
    for (name, mask_name) in image_names.iter().zip(&mask_names) {
        if name != mask_name {
            return Err(Error::CountMismatch {
                what: format!("mask for image {name}"),
                expected: 1,
                found: 0,
            });
        }
        let record = records.get(name.as_str()).ok_or_else(|| Error::CountMismatch {
            what: format!("camera record for image {name}"),
            expected: 1,
            found: 0,
        })?;
        let camera = record.camera.clone();
        camera.validate().map_err(|e| Error::Parse {
            path: root.join("cameras.json"),
            message: format!("{name}: {e}"),
        })?;

        let image = read_rgb_png(&images_dir.join(name))?;
        let (mw, mh, gray) = read_gray_png(&masks_dir.join(name))?;
        if (image.width, image.height) != (camera.width, camera.height) || (mw, mh) != (camera.width, camera.height) {
            return Err(Error::Shape(format!(
                "{name}: image {}x{}, mask {}x{}, camera {}x{}",
                image.width, image.height, mw, mh, camera.width, camera.height
            )));
        }
        let mask = dilate_mask(&MaskFrame::from_gray8(mw, mh, &gray)?, config.dilation_radius);
        let regions = compute_halo(&mask, config.halo_width);
        frames.push(SceneFrame {
            name: name.clone(),
            image,
            camera,
            regions,
        });
    }

    let scene_name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into());
    SceneDataset::new(scene_name, frames, config.guidance_resolution)
}

/// Writes a dataset in the input layout. Masks are written as stored (already dilated).
pub fn save_dataset(dataset: &SceneDataset, out: &Path) -> Result<()> {
    let images: Vec<ImageFrame> = dataset.frames.iter().map(|f| f.image.clone()).collect();
    write_layout(dataset, &images, out)
}

fn write_layout(dataset: &SceneDataset, images: &[ImageFrame], out: &Path) -> Result<()> {
    let images_dir = out.join("images");
    let masks_dir = out.join("masks");
    for dir in [&images_dir, &masks_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.as_path(), e))?;
    }
    let mut records = Vec::with_capacity(dataset.len());
    for (frame, image) in dataset.frames.iter().zip(images) {
        write_image(&images_dir.join(&frame.name), image)?;
        let mask = &frame.regions.mask;
        write_gray_png(&masks_dir.join(&frame.name), mask.width, mask.height, mask.to_gray8())?;
        records.push(CameraRecord {
            file: frame.name.clone(),
            camera: frame.camera.clone(),
        });
    }
    let cameras = CamerasFile {
        convention: CAMERA_CONVENTION.into(),
        frames: records,
    };
    let path = out.join("cameras.json");
    let text = serde_json::to_string_pretty(&cameras).expect("camera records serialize");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes the edited multiview dataset: exterior pixels are taken from the
/// input images byte for byte, mask and halo pixels from `edits`.
pub fn export_edited_dataset(dataset: &SceneDataset, edits: &[ImageFrame], out: &Path) -> Result<()> {
    if edits.len() != dataset.len() {
        return Err(Error::CountMismatch {
            what: "edited frames".into(),
            expected: dataset.len(),
            found: edits.len(),
        });
    }
    let mut merged = Vec::with_capacity(edits.len());
    for (frame, edit) in dataset.frames.iter().zip(edits) {
        if !edit.same_shape(&frame.image) {
            return Err(Error::Shape(format!("edit for {} has the wrong shape", frame.name)));
        }
        let bubble = frame.regions.bubble();
        let mut image = frame.image.clone();
        for (row, col) in bubble.pixels() {
            image.set_pixel(row, col, edit.pixel(row, col));
        }
        merged.push(image);
    }
    write_layout(dataset, &merged, out)
}
