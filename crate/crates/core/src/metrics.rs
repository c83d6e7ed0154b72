//! Edit-quality metrics over an abstract image/text embedding model, and
//! region-restricted image error measures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::derive_seed;
use crate::scene::{ImageFrame, MaskFrame};

/// Directions shorter than this count as "no change".
pub const ZERO_DIRECTION: f64 = 1e-8;
const UNIT_TOLERANCE: f64 = 1e-6;

/// A joint image/text embedding model. Outputs are unit vectors of length `dim()`.
pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_image(&self, image: &ImageFrame) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

fn checked(provider: &dyn EmbeddingProvider, v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    if v.len() != provider.dim() {
        return Err(Error::Embedding(format!(
            "{}: {what} embedding has {} entries, expected {}",
            provider.id(),
            v.len(),
            provider.dim()
        )));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::Embedding(format!(
            "{}: {what} embedding is not unit length (norm {norm})",
            provider.id()
        )));
    }
    Ok(v)
}

fn image_embedding(provider: &dyn EmbeddingProvider, image: &ImageFrame) -> Result<Vec<f64>> {
    let v = provider.embed_image(image)?;
    checked(provider, v, "image")
}

fn text_embedding(provider: &dyn EmbeddingProvider, text: &str) -> Result<Vec<f64>> {
    let v = provider.embed_text(text)?;
    checked(provider, v, "text")
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Cosine similarity; 0 when either vector is (numerically) zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na2 = a.iter().map(|x| x * x).sum::<f64>();
    let nb2 = b.iter().map(|x| x * x).sum::<f64>();
    if na2.sqrt() < ZERO_DIRECTION || nb2.sqrt() < ZERO_DIRECTION {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    // one square root keeps parallel integer-valued directions exactly at +-1
    (dot / (na2 * nb2).sqrt()).clamp(-1.0, 1.0)
}

fn edit_directions(
    originals: &[ImageFrame],
    edits: &[ImageFrame],
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<Vec<f64>>> {
    if originals.len() != edits.len() {
        return Err(Error::CountMismatch {
            what: "edited frames".into(),
            expected: originals.len(),
            found: edits.len(),
        });
    }
    originals
        .iter()
        .zip(edits)
        .map(|(o, e)| Ok(diff(&image_embedding(provider, e)?, &image_embedding(provider, o)?)))
        .collect()
}

/// Mean over frames of the cosine between each frame's image edit direction
/// and the text edit direction `tgt - src`.
pub fn direction_similarity(
    originals: &[ImageFrame],
    edits: &[ImageFrame],
    src_prompt: &str,
    tgt_prompt: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<f64> {
    if originals.is_empty() {
        return Err(Error::InvalidArgument("direction similarity needs at least one frame".into()));
    }
    let dirs = edit_directions(originals, edits, provider)?;
    let text_dir = diff(&text_embedding(provider, tgt_prompt)?, &text_embedding(provider, src_prompt)?);
    Ok(dirs.iter().map(|d| cosine(d, &text_dir)).sum::<f64>() / dirs.len() as f64)
}

/// Mean cosine between edit directions of consecutive frames.
pub fn direction_consistency(
    originals: &[ImageFrame],
    edits: &[ImageFrame],
    provider: &dyn EmbeddingProvider,
) -> Result<f64> {
    if originals.len() < 2 {
        return Err(Error::InvalidArgument("direction consistency needs at least two frames".into()));
    }
    let dirs = edit_directions(originals, edits, provider)?;
    Ok(dirs.windows(2).map(|p| cosine(&p[0], &p[1])).sum::<f64>() / (dirs.len() - 1) as f64)
}

/// One edited scene with several phrasings of the same target prompt.
#[derive(Debug, Clone)]
pub struct EditCase {
    pub scene: String,
    pub originals: Vec<ImageFrame>,
    pub edits: Vec<ImageFrame>,
    pub src_prompt: String,
    pub phrasings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scene: String,
    pub prompt_src: String,
    pub prompt_tgt: String,
    pub dir_similarity: f64,
    pub dir_consistency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub provider: String,
    pub rows: Vec<ReportRow>,
}

/// Scores every phrasing of every case. Consistency does not depend on the
/// prompt, so it repeats across a case's rows.
pub fn prompt_sensitivity_report(cases: &[EditCase], provider: &dyn EmbeddingProvider) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for case in cases {
        if case.phrasings.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "scene {} needs at least two prompt phrasings",
                case.scene
            )));
        }
        let consistency = direction_consistency(&case.originals, &case.edits, provider)?;
        for tgt in &case.phrasings {
            rows.push(ReportRow {
                scene: case.scene.clone(),
                prompt_src: case.src_prompt.clone(),
                prompt_tgt: tgt.clone(),
                dir_similarity: direction_similarity(&case.originals, &case.edits, &case.src_prompt, tgt, provider)?,
                dir_consistency: consistency,
            });
        }
    }
    Ok(EvalReport {
        provider: provider.id().to_string(),
        rows,
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str, provider: impl Into<String>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<ReportRow>, _>>()
            .map_err(|e| Error::Parse {
                path: "<report>".into(),
                message: e.to_string(),
            })?;
        Ok(Self {
            provider: provider.into(),
            rows,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, provider: impl Into<String>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, provider)
    }

    /// Fixed-width table, one row per (scene, phrasing).
    pub fn format_table(&self) -> String {
        let sw = self.rows.iter().map(|r| r.scene.len()).max().unwrap_or(0).max(5);
        let pw = self.rows.iter().map(|r| r.prompt_tgt.len()).max().unwrap_or(0).max(6);
        let mut out = String::new();
        let _ = writeln!(out, "embedding model: {}", self.provider);
        let _ = writeln!(out, "{:<sw$}  {:<pw$}  {:>10}  {:>11}", "scene", "prompt", "direction", "consistency");
        let _ = writeln!(out, "{}", "-".repeat(sw + pw + 27));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<sw$}  {:<pw$}  {:>10.4}  {:>11.4}",
                r.scene, r.prompt_tgt, r.dir_similarity, r.dir_consistency
            );
        }
        out
    }
}

/// Embeddings looked up from fixed tables, for constructed test cases.
/// Images are matched by exact pixel equality.
#[derive(Debug, Clone, Default)]
pub struct TableEmbedding {
    pub dim: usize,
    pub texts: BTreeMap<String, Vec<f64>>,
    pub images: Vec<(ImageFrame, Vec<f64>)>,
}

impl TableEmbedding {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn with_text(mut self, text: &str, v: Vec<f64>) -> Self {
        self.texts.insert(text.to_string(), v);
        self
    }

    pub fn with_image(mut self, image: ImageFrame, v: Vec<f64>) -> Self {
        self.images.push((image, v));
        self
    }
}

impl EmbeddingProvider for TableEmbedding {
    fn id(&self) -> &str {
        "table"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: &ImageFrame) -> Result<Vec<f64>> {
        self.images
            .iter()
            .find(|(img, _)| img == image)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::Embedding("image not in the embedding table".into()))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.texts
            .get(text)
            .cloned()
            .ok_or_else(|| Error::Embedding(format!("text {text:?} not in the embedding table")))
    }
}

/// Training-free stand-in for a joint embedding model: images are pooled to
/// a coarse color grid and randomly projected, texts are bags of hashed words.
/// Deterministic, but the two spaces are not aligned, so absolute similarity
/// values carry no meaning.
#[derive(Debug, Clone)]
pub struct ProjectionEmbedding {
    dim: usize,
    grid: usize,
    projection: Vec<f64>,
}

impl ProjectionEmbedding {
    pub fn new(dim: usize, grid: usize, seed: u64) -> Self {
        let inputs = grid * grid * 3;
        let projection = (0..dim * inputs)
            .map(|i| {
                let u = derive_seed(&[seed, i as u64]) as f64 / u64::MAX as f64;
                2.0 * u - 1.0
            })
            .collect();
        Self { dim, grid, projection }
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    } else if let Some(first) = v.first_mut() {
        *first = 1.0;
    }
    v
}

impl EmbeddingProvider for ProjectionEmbedding {
    fn id(&self) -> &str {
        "projection"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: &ImageFrame) -> Result<Vec<f64>> {
        let g = self.grid;
        if image.width < g || image.height < g {
            return Err(Error::Embedding(format!("image smaller than the {g}x{g} pooling grid")));
        }
        let mut pooled = vec![0.0; g * g * 3];
        let mut counts = vec![0usize; g * g];
        for row in 0..image.height {
            for col in 0..image.width {
                let cell = (row * g / image.height) * g + col * g / image.width;
                counts[cell] += 1;
                let p = image.pixel(row, col);
                for k in 0..3 {
                    pooled[cell * 3 + k] += p[k];
                }
            }
        }
        for (cell, &c) in counts.iter().enumerate() {
            for k in 0..3 {
                pooled[cell * 3 + k] = pooled[cell * 3 + k] / c as f64 - 0.5;
            }
        }
        let n = pooled.len();
        let out = (0..self.dim)
            .map(|d| self.projection[d * n..(d + 1) * n].iter().zip(&pooled).map(|(a, b)| a * b).sum())
            .collect();
        Ok(normalized(out))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        for word in text.split_whitespace() {
            let word = word.to_lowercase();
            let h = word.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
            v[(h % self.dim as u64) as usize] += if (h >> 63) == 0 { 1.0 } else { -1.0 };
        }
        Ok(normalized(v))
    }
}

/// Mean squared error over the pixels of `region` (all channels).
pub fn region_mse(a: &ImageFrame, b: &ImageFrame, region: &MaskFrame) -> Result<f64> {
    if !a.same_shape(b) || region.width != a.width || region.height != a.height {
        return Err(Error::Shape("region_mse needs matching shapes".into()));
    }
    let pixels = region.pixels();
    if pixels.is_empty() {
        return Err(Error::EmptyMask("region_mse over an empty region".into()));
    }
    let sum: f64 = pixels
        .iter()
        .map(|&(r, c)| {
            let (p, q) = (a.pixel(r, c), b.pixel(r, c));
            (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>()
        })
        .sum();
    Ok(sum / (pixels.len() * 3) as f64)
}

/// Peak signal-to-noise ratio for unit-range images.
pub fn psnr(mse: f64) -> f64 {
    -10.0 * mse.log10()
}

pub fn region_psnr(a: &ImageFrame, b: &ImageFrame, region: &MaskFrame) -> Result<f64> {
    Ok(psnr(region_mse(a, b, region)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f64) -> ImageFrame {
        ImageFrame::filled(2, 2, [v, v, v])
    }

    fn provider() -> TableEmbedding {
        TableEmbedding::new(3)
            .with_text("a cat", vec![1.0, 0.0, 0.0])
            .with_text("a dog", vec![0.0, 1.0, 0.0])
            .with_text("a hound", vec![1.0, 0.0, 0.0])
            .with_image(img(0.0), vec![1.0, 0.0, 0.0])
            .with_image(img(0.5), vec![0.0, 1.0, 0.0])
            .with_image(img(1.0), vec![0.0, 0.0, 1.0])
    }

    #[test]
    fn similarity_fixtures() {
        let p = provider();
        let orig = vec![img(0.0), img(0.0)];
        let edit = vec![img(0.5), img(0.5)];
        assert_eq!(direction_similarity(&orig, &orig, "a cat", "a dog", &p).unwrap(), 0.0);
        assert_eq!(direction_similarity(&orig, &edit, "a cat", "a dog", &p).unwrap(), 1.0);
        assert_eq!(direction_similarity(&orig, &edit, "a dog", "a cat", &p).unwrap(), -1.0);
        // synonyms embed identically, so the text direction vanishes
        assert_eq!(direction_similarity(&orig, &edit, "a cat", "a hound", &p).unwrap(), 0.0);
    }

    #[test]
    fn consistency_fixtures() {
        let p = provider();
        let orig = vec![img(0.5); 4];
        let same = vec![img(1.0); 4];
        assert_eq!(direction_consistency(&orig, &same, &p).unwrap(), 1.0);
        let orig = vec![img(0.5), img(1.0), img(0.5), img(1.0)];
        let flip = vec![img(1.0), img(0.5), img(1.0), img(0.5)];
        assert_eq!(direction_consistency(&orig, &flip, &p).unwrap(), -1.0);
        assert!(direction_consistency(&orig[..1], &flip[..1], &p).is_err());
    }

    #[test]
    fn rejects_non_unit_embeddings() {
        let p = TableEmbedding::new(2)
            .with_text("x", vec![2.0, 0.0])
            .with_text("y", vec![0.0, 1.0])
            .with_image(img(0.0), vec![1.0, 0.0]);
        let err = direction_similarity(&[img(0.0)], &[img(0.0)], "x", "y", &p).unwrap_err();
        assert!(matches!(err, Error::Embedding(_)));
    }

    #[test]
    fn projection_embedding_is_unit_and_deterministic() {
        let p = ProjectionEmbedding::new(16, 4, 3);
        let frame = ImageFrame::filled(8, 8, [0.3, 0.6, 0.1]);
        let a = p.embed_image(&frame).unwrap();
        assert_eq!(a, p.embed_image(&frame).unwrap());
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        let t = p.embed_text("A red chair").unwrap();
        assert_eq!(t, p.embed_text("a red  chair").unwrap());
    }

    #[test]
    fn psnr_of_known_error() {
        let a = img(0.5);
        let b = img(0.6);
        let full = MaskFrame::full(2, 2);
        assert!((region_mse(&a, &b, &full).unwrap() - 0.01).abs() < 1e-15);
        assert!((region_psnr(&a, &b, &full).unwrap() - 20.0).abs() < 1e-9);
        assert!(matches!(region_mse(&a, &b, &MaskFrame::empty(2, 2)), Err(Error::EmptyMask(_))));
    }
}
