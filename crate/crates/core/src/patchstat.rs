//! Per-patch standard deviation statistics for image corpora.
//!
//! Multi-channel images are reduced to luminance by averaging channels.
//! With normalization on, each image is standardized to zero mean and unit
//! variance before patch statistics are taken. Pixels beyond the last full
//! patch row/column are cropped.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::numkernel::{Rng, Tensor};
use crate::vit::image_dims;

pub const DEFAULT_BINS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchStatConfig {
    pub patch_size: usize,
    pub bins: usize,
    /// Summary reports the fraction of patch stds below this value.
    pub threshold: f64,
    pub normalize: bool,
    pub sample_n: usize,
    pub seed: u64,
}

impl Default for PatchStatConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            bins: DEFAULT_BINS,
            threshold: 0.1,
            normalize: true,
            sample_n: 1000,
            seed: 0,
        }
    }
}

fn luminance(image: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (h, w, c) = image_dims(image)?;
    let px = image
        .data()
        .chunks(c)
        .map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / c as f64)
        .collect();
    Ok((h, w, px))
}

/// Population std of every full patch, row-major patch order.
pub fn interpatch_std(image: &Tensor, patch_size: usize, normalize: bool) -> Result<Vec<f64>> {
    let (h, w, mut px) = luminance(image)?;
    if patch_size == 0 || h < patch_size || w < patch_size {
        return Err(Error::Geometry(format!(
            "{h}x{w} image is smaller than one {patch_size}px patch"
        )));
    }
    if normalize {
        let n = px.len() as f64;
        let mean = px.iter().sum::<f64>() / n;
        let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        px.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    let (rows, cols) = (h / patch_size, w / patch_size);
    let mut out = Vec::with_capacity(rows * cols);
    let count = (patch_size * patch_size) as f64;
    for r in 0..rows {
        for c in 0..cols {
            let pixels = (0..patch_size).flat_map(|dy| {
                let start = (r * patch_size + dy) * w + c * patch_size;
                px[start..start + patch_size].iter().copied()
            });
            let (s, s2) = pixels.fold((0.0, 0.0), |(s, s2), v| (s + v, s2 + v * v));
            let mean = s / count;
            out.push((s2 / count - mean * mean).max(0.0).sqrt());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub densities: Vec<f64>,
}

impl Histogram {
    /// Rows of `(bin_left, bin_right, density)`.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.edges
            .windows(2)
            .zip(&self.densities)
            .map(|(e, &d)| (e[0], e[1], d))
    }

    pub fn mode(&self) -> f64 {
        let i = (0..self.densities.len())
            .max_by(|&a, &b| {
                self.densities[a]
                    .total_cmp(&self.densities[b])
                    .then(b.cmp(&a))
            })
            .unwrap_or(0);
        (self.edges[i] + self.edges[i + 1]) / 2.0
    }
}

/// Normalized density over `bins` equal-width bins spanning the sample range.
/// A zero-width range is widened to one unit around the value.
pub fn density_histogram(samples: &[f64], bins: usize) -> Result<Histogram> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("histogram samples".into()));
    }
    if bins == 0 {
        return Err(Error::Usage("histogram needs at least one bin".into()));
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &s in samples {
        let i = (((s - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let total = samples.len() as f64 * width;
    Ok(Histogram {
        edges: (0..=bins).map(|i| lo + i as f64 * width).collect(),
        densities: counts.iter().map(|&c| c as f64 / total).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub threshold: f64,
    pub fraction_below: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchStatReport {
    /// One vector of patch stds per image.
    pub samples: Vec<Vec<f64>>,
    pub histogram: Histogram,
    pub summary: Summary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl PatchStatReport {
    pub fn from_images(images: &[Tensor], config: &PatchStatConfig) -> Result<Self> {
        let samples = images
            .iter()
            .map(|im| interpatch_std(im, config.patch_size, config.normalize))
            .collect::<Result<Vec<_>>>()?;
        let mut flat: Vec<f64> = samples.iter().flatten().copied().collect();
        let histogram = density_histogram(&flat, config.bins)?;
        flat.sort_by(f64::total_cmp);
        let n = flat.len();
        let median = if n % 2 == 1 {
            flat[n / 2]
        } else {
            (flat[n / 2 - 1] + flat[n / 2]) / 2.0
        };
        let summary = Summary {
            mean: flat.iter().sum::<f64>() / n as f64,
            median,
            threshold: config.threshold,
            fraction_below: flat.iter().filter(|&&v| v < config.threshold).count() as f64
                / n as f64,
        };
        Ok(Self {
            samples,
            histogram,
            summary,
            note: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusComparison {
    pub a: PatchStatReport,
    pub b: PatchStatReport,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_b / mean_a` (infinite when `mean_a` is zero).
    pub ratio: f64,
}

impl CorpusComparison {
    pub fn new(a: PatchStatReport, b: PatchStatReport) -> Self {
        let (mean_a, mean_b) = (a.summary.mean, b.summary.mean);
        let ratio = if mean_a > 0.0 {
            mean_b / mean_a
        } else {
            f64::INFINITY
        };
        Self {
            a,
            b,
            mean_a,
            mean_b,
            ratio,
        }
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| {
            matches!(
                e.to_ascii_lowercase().as_str(),
                "png" | "ppm" | "pgm" | "pnm"
            )
        })
        .unwrap_or(false)
}

/// Sorted list of PNG/PNM files under `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(
                path,
                e.into_io_error()
                    .unwrap_or_else(|| std::io::Error::other("directory loop")),
            )
        })?;
        if entry.file_type().is_file() && is_image_file(entry.path()) {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

/// Loads an image as `[H, W, C]` floats in `[0, 1]`; grayscale stays one channel.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        Tensor::new(vec![h, w, 3], img.to_rgb32f().into_raw())
    } else {
        Tensor::new(vec![h, w, 1], img.to_luma32f().into_raw())
    }
}

/// Writes a `[H, W, 1|3]` image in `[0, 1]` as PNG.
pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let (h, w, c) = image_dims(image)?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::Geometry(format!("cannot save {c}-channel image"))),
    };
    image::save_buffer(path, &bytes, w as u32, h as u32, color).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Seeded sample of at most `sample_n` images from a corpus directory.
fn sample_corpus(
    dir: &Path,
    config: &PatchStatConfig,
    rng: &mut Rng,
) -> Result<(Vec<Tensor>, Option<String>)> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no PNG/PNM images under {}",
            dir.display()
        )));
    }
    let (chosen, note) = if config.sample_n >= files.len() {
        let note = (config.sample_n > files.len()).then(|| {
            format!(
                "requested {} images, corpus has {}; using all",
                config.sample_n,
                files.len()
            )
        });
        ((0..files.len()).collect(), note)
    } else {
        let mut idx = rng.choose_indices(files.len(), config.sample_n);
        idx.sort_unstable();
        (idx, None)
    };
    let images = chosen
        .iter()
        .map(|&i| load_image(&files[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok((images, note))
}

/// Patch statistics for one image directory. `label` picks the sampling
/// stream under `config.seed`.
pub fn analyze_corpus(
    dir: &Path,
    config: &PatchStatConfig,
    label: &str,
) -> Result<PatchStatReport> {
    let (images, note) = sample_corpus(dir, config, &mut Rng::new(config.seed).fork(label))?;
    let mut report = PatchStatReport::from_images(&images, config)?;
    report.note = note;
    Ok(report)
}

/// Patch statistics for two image directories, with seeded sampling.
pub fn compare_corpora(a: &Path, b: &Path, config: &PatchStatConfig) -> Result<CorpusComparison> {
    Ok(CorpusComparison::new(
        analyze_corpus(a, config, "corpus-a")?,
        analyze_corpus(b, config, "corpus-b")?,
    ))
}

/// In-memory variant of [`compare_corpora`].
pub fn compare_images(
    a: &[Tensor],
    b: &[Tensor],
    config: &PatchStatConfig,
) -> Result<CorpusComparison> {
    Ok(CorpusComparison::new(
        PatchStatReport::from_images(a, config)?,
        PatchStatReport::from_images(b, config)?,
    ))
}
