//! Sliding-window scoring aggregated into per-pixel probability heatmaps.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::cooccur::{feature_tensor, PairSubset};
use crate::error::{Error, Result};
use crate::imagecore::{patch_windows, save_png, PatchSpec, PixelImage};
use crate::model::{Head, MiniXception};
use crate::persist::write_atomic;

pub const SIDECAR_MAGIC: &[u8; 4] = b"CFHM";
pub const SIDECAR_VERSION: u32 = 1;

/// Patches scored per forward call.
const SCORE_CHUNK: usize = 32;

/// Anything that maps image patches to probabilities in `[0, 1]`.
pub trait PatchScorer: Sync {
    fn score(&self, patches: &[PixelImage]) -> Result<Vec<f64>>;
}

/// Sigmoid output of a detection network.
pub struct DetectorScorer<'a> {
    model: &'a MiniXception<f32>,
    subset: PairSubset,
}

impl<'a> DetectorScorer<'a> {
    pub fn new(model: &'a MiniXception<f32>, subset: PairSubset) -> Result<Self> {
        if model.config().head != Head::Detection {
            return Err(Error::InvalidArgument(
                "localization needs a detection checkpoint, got an attribution head".into(),
            ));
        }
        Ok(Self { model, subset })
    }
}

impl PatchScorer for DetectorScorer<'_> {
    fn score(&self, patches: &[PixelImage]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(SCORE_CHUNK) {
            let feats: Vec<_> = chunk.par_iter().map(|p| feature_tensor(p, &self.subset)).collect();
            let refs: Vec<_> = feats.iter().collect();
            let logits = self.model.forward(&refs)?;
            out.extend(self.model.probabilities(&logits).into_iter().map(|p| p[0]));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major mean patch score per pixel.
    pub scores: Vec<f32>,
    /// Row-major number of windows containing each pixel.
    pub coverage: Vec<u32>,
    pub patch: PatchSpec,
}

impl Heatmap {
    pub fn score(&self, row: usize, col: usize) -> f32 {
        self.scores[row * self.width + col]
    }

    /// Mean score over the columns in `cols` (all rows).
    pub fn column_mean(&self, cols: std::ops::Range<usize>) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for r in 0..self.height {
            for c in cols.clone() {
                sum += self.score(r, c) as f64;
                n += 1;
            }
        }
        sum / n.max(1) as f64
    }
}

/// Per-pixel window counts; depends only on geometry.
pub fn coverage(height: usize, width: usize, patch: PatchSpec) -> Vec<u32> {
    let mut cov = vec![0u32; height * width];
    for (r0, c0, h, w) in patch_windows(height, width, patch) {
        for r in r0..r0 + h {
            cov[r * width + c0..r * width + c0 + w].iter_mut().for_each(|v| *v += 1);
        }
    }
    cov
}

/// Mean of the scores of every window containing each pixel.
pub fn aggregate(
    height: usize,
    width: usize,
    windows: &[(usize, usize, usize, usize)],
    scores: &[f64],
    patch: PatchSpec,
) -> Result<Heatmap> {
    if windows.len() != scores.len() {
        return Err(Error::Shape(format!("{} windows but {} scores", windows.len(), scores.len())));
    }
    let mut sum = vec![0.0f64; height * width];
    let mut cov = vec![0u32; height * width];
    for (&(r0, c0, h, w), &s) in windows.iter().zip(scores) {
        if r0 + h > height || c0 + w > width {
            return Err(Error::Shape(format!("window ({r0},{c0},{h},{w}) exceeds {height}x{width}")));
        }
        for r in r0..r0 + h {
            let row = r * width;
            for c in c0..c0 + w {
                sum[row + c] += s;
                cov[row + c] += 1;
            }
        }
    }
    let scores = sum
        .iter()
        .zip(&cov)
        .map(|(&s, &n)| if n == 0 { 0.0 } else { (s / n as f64) as f32 })
        .collect();
    Ok(Heatmap {
        height,
        width,
        scores,
        coverage: cov,
        patch,
    })
}

pub fn heatmap(img: &PixelImage, scorer: &dyn PatchScorer, patch: PatchSpec) -> Result<Heatmap> {
    let windows = patch_windows(img.height(), img.width(), patch);
    let crops = windows
        .iter()
        .map(|&(r, c, h, w)| img.crop(r, c, h, w))
        .collect::<Result<Vec<_>>>()?;
    let scores = scorer.score(&crops)?;
    if scores.len() != crops.len() || scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scorer returned a wrong number of scores or non-finite values".into()));
    }
    aggregate(img.height(), img.width(), &windows, &scores, patch)
}

/// Blue at 0, white at 0.5, red at 1; inputs are clamped to `[0, 1]`.
pub fn ramp(score: f32) -> [u8; 3] {
    let t = score.clamp(0.0, 1.0);
    if t <= 0.5 {
        let v = (2.0 * t * 255.0).round() as u8;
        [v, v, 255]
    } else {
        let v = ((2.0 - 2.0 * t) * 255.0).round() as u8;
        [255, v, v]
    }
}

pub fn sidecar_path(png_path: &Path) -> PathBuf {
    png_path.with_extension("cfhm")
}

/// Writes the colour PNG and the raw-score sidecar next to it; returns the sidecar path.
pub fn render(hm: &Heatmap, out_path: impl AsRef<Path>) -> Result<PathBuf> {
    let out_path = out_path.as_ref();
    let data = hm.scores.iter().flat_map(|&s| ramp(s)).collect();
    save_png(&PixelImage::new(hm.width, hm.height, 3, data)?, out_path)?;
    let side = sidecar_path(out_path);
    write_sidecar(&side, hm)?;
    Ok(side)
}

pub fn write_sidecar(path: impl AsRef<Path>, hm: &Heatmap) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 4 * hm.scores.len());
    bytes.extend_from_slice(SIDECAR_MAGIC);
    bytes.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(hm.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(hm.width as u32).to_le_bytes());
    for s in &hm.scores {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    write_atomic(path.as_ref(), &bytes)
}

/// Returns `(height, width, scores)`.
pub fn read_sidecar(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != SIDECAR_MAGIC {
        return Err(Error::format("magic", "not a heatmap sidecar"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != SIDECAR_VERSION {
        return Err(Error::format("header", format!("sidecar version {} is not supported", word(4))));
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    if bytes.len() != 16 + 4 * h * w {
        return Err(Error::format("blobs", format!("expected {} score bytes, found {}", 4 * h * w, bytes.len() - 16)));
    }
    let scores = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((h, w, scores))
}
