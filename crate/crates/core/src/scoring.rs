//! Memory bank of fused normal features and nearest-neighbor anomaly scoring.

use std::io::Write;
use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{io_err, read_json, write_json, DataError, Label};
use crate::features::{FeatureSet, Modality};
use crate::grid::PatchGrid;
use crate::tensor::{read_tensor, write_tensor, Tensor, TensorError};

pub const DEFAULT_SIGMA: f64 = 4.0;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("patch counts differ: {0} vs {1}")]
    PatchCount(usize, usize),
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("feature dim {found} does not match memory bank dim {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("sample {0} is labelled {1:?}; the memory bank takes normal samples only")]
    NotNormal(String, Label),
    #[error("coreset ratio must lie in (0, 1], got {0}")]
    Ratio(f64),
    #[error("bank {path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Which modality blocks make up a patch descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Fused,
    ImageOnly,
    DepthOnly,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Fused, FusionMode::ImageOnly, FusionMode::DepthOnly];

    pub fn tag(self) -> &'static str {
        match self {
            FusionMode::Fused => "fused",
            FusionMode::ImageOnly => "2d",
            FusionMode::DepthOnly => "3d",
        }
    }
}

/// Row-wise concatenation, image block first.
pub fn fuse(f2d: &Array2<f64>, f3d: &Array2<f64>) -> Result<Array2<f64>, ScoringError> {
    if f2d.nrows() != f3d.nrows() {
        return Err(ScoringError::PatchCount(f2d.nrows(), f3d.nrows()));
    }
    Ok(concatenate(Axis(1), &[f2d.view(), f3d.view()]).expect("row counts checked"))
}

/// Patch descriptors of one view under `mode`.
pub fn descriptors(features: &FeatureSet, view: usize, mode: FusionMode) -> Result<Array2<f64>, ScoringError> {
    match mode {
        FusionMode::Fused => fuse(features.get(view, Modality::Image), features.get(view, Modality::Depth)),
        FusionMode::ImageOnly => Ok(features.get(view, Modality::Image).clone()),
        FusionMode::DepthOnly => Ok(features.get(view, Modality::Depth).clone()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sample: String,
    /// 1-based view index.
    pub view: usize,
    /// 1-based patch index.
    pub patch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub mode: FusionMode,
    pub entries: Array2<f64>,
    pub provenance: Vec<Provenance>,
    /// Rows of the full bank kept by coreset selection, in selection order.
    pub coreset: Option<Vec<usize>>,
}

pub struct BankSource<'a> {
    pub sample_id: &'a str,
    pub label: Label,
    pub refined: &'a FeatureSet,
}

/// Greedy farthest-point selection of `keep` rows, starting from row 0.
/// Ties go to the lowest index.
pub fn farthest_point_coreset(entries: &Array2<f64>, keep: usize) -> Vec<usize> {
    let m = entries.nrows();
    let keep = keep.min(m);
    if keep == 0 {
        return Vec::new();
    }
    let mut chosen = vec![0];
    let mut nearest: Vec<f64> = (0..m)
        .map(|r| squared_distance(entries.row(r), entries.row(0)))
        .collect();
    while chosen.len() < keep {
        let mut best = 0;
        for (r, &d) in nearest.iter().enumerate() {
            if d > nearest[best] {
                best = r;
            }
        }
        chosen.push(best);
        let row = entries.row(best);
        nearest
            .par_iter_mut()
            .enumerate()
            .for_each(|(r, d)| *d = d.min(squared_distance(entries.row(r), row)));
    }
    chosen
}

fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    match (a.as_slice(), b.as_slice()) {
        (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        _ => a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum(),
    }
}

pub fn build_bank(sources: &[BankSource<'_>], mode: FusionMode, coreset_ratio: f64) -> Result<MemoryBank, ScoringError> {
    if !(coreset_ratio > 0.0 && coreset_ratio <= 1.0) {
        return Err(ScoringError::Ratio(coreset_ratio));
    }
    let mut blocks = Vec::new();
    let mut provenance = Vec::new();
    for src in sources {
        if src.label != Label::Normal {
            return Err(ScoringError::NotNormal(src.sample_id.to_string(), src.label));
        }
        for view in 0..src.refined.n_views() {
            let rows = descriptors(src.refined, view, mode)?;
            provenance.extend((0..rows.nrows()).map(|p| Provenance {
                sample: src.sample_id.to_string(),
                view: view + 1,
                patch: p + 1,
            }));
            blocks.push(rows);
        }
    }
    if blocks.is_empty() {
        return Err(ScoringError::EmptyBank);
    }
    let dim = blocks[0].ncols();
    if let Some(bad) = blocks.iter().find(|b| b.ncols() != dim) {
        return Err(ScoringError::DimMismatch {
            expected: dim,
            found: bad.ncols(),
        });
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let entries = concatenate(Axis(0), &views).expect("dims checked");
    if coreset_ratio >= 1.0 {
        return Ok(MemoryBank {
            mode,
            entries,
            provenance,
            coreset: None,
        });
    }
    let keep = (coreset_ratio * entries.nrows() as f64).ceil() as usize;
    let idx = farthest_point_coreset(&entries, keep);
    let kept = entries.select(Axis(0), &idx);
    let provenance = idx.iter().map(|&i| provenance[i].clone()).collect();
    Ok(MemoryBank {
        mode,
        entries: kept,
        provenance,
        coreset: Some(idx),
    })
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    mode: FusionMode,
    rows: usize,
    dim: usize,
    provenance: Vec<Provenance>,
    coreset: Option<Vec<usize>>,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    /// Writes `bank.ft32` and `bank.json`. Entries are stored as f32.
    pub fn save(&self, dir: &Path) -> Result<(), ScoringError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_tensor(dir.join("bank.ft32"), &Tensor::from_array2_f64(&self.entries))?;
        let header = BankHeader {
            mode: self.mode,
            rows: self.len(),
            dim: self.dim(),
            provenance: self.provenance.clone(),
            coreset: self.coreset.clone(),
        };
        write_json(&dir.join("bank.json"), &header)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ScoringError> {
        let header: BankHeader = read_json(&dir.join("bank.json"))?;
        let path = dir.join("bank.ft32");
        let entries = read_tensor(&path)?
            .to_array2_f64()
            .ok_or_else(|| ScoringError::Format {
                path: path.display().to_string(),
                reason: "expected a 2-D tensor".into(),
            })?;
        if entries.dim() != (header.rows, header.dim) || header.provenance.len() != header.rows {
            return Err(ScoringError::Format {
                path: path.display().to_string(),
                reason: format!(
                    "header says {}×{} with {} provenance rows, tensor is {:?}",
                    header.rows,
                    header.dim,
                    header.provenance.len(),
                    entries.dim()
                ),
            });
        }
        Ok(Self {
            mode: header.mode,
            entries,
            provenance: header.provenance,
            coreset: header.coreset,
        })
    }

    /// Exhaustive nearest-neighbor L2 distance of every query row.
    pub fn nearest_distances(&self, queries: &Array2<f64>) -> Result<Vec<f64>, ScoringError> {
        if self.is_empty() {
            return Err(ScoringError::EmptyBank);
        }
        if queries.ncols() != self.dim() {
            return Err(ScoringError::DimMismatch {
                expected: self.dim(),
                found: queries.ncols(),
            });
        }
        Ok((0..queries.nrows())
            .into_par_iter()
            .map(|r| {
                let q = queries.row(r);
                self.entries
                    .axis_iter(Axis(0))
                    .map(|e| squared_distance(q, e))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect())
    }
}

/// Upsamples a `rows×cols` patch-score grid to `height×width` pixels.
/// Patch values sit at patch-area centers; pixels outside the span of the
/// centers take the nearest edge value.
pub fn upsample_bilinear(grid_scores: &Array2<f64>, patch_px: usize, height: usize, width: usize) -> Array2<f64> {
    let (rows, cols) = grid_scores.dim();
    let px = patch_px as f64;
    let axis = |pixel: usize, n: usize| -> (usize, usize, f64) {
        let pos = ((pixel as f64 + 0.5) / px - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, pos - lo as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| axis(x, cols)).collect();
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (r0, r1, fy) = axis(y, rows);
        let (c0, c1, fx) = xs[x];
        let top = grid_scores[[r0, c0]] * (1.0 - fx) + grid_scores[[r0, c1]] * fx;
        let bottom = grid_scores[[r1, c0]] * (1.0 - fx) + grid_scores[[r1, c1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).round() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Half-sample symmetric index into `0..n`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur, kernel truncated at 4σ, mirrored borders.
pub fn gaussian_blur(map: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return map.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (h, w) = map.dim();
    let pass = |src: &Array2<f64>, horizontal: bool| {
        Array2::from_shape_fn((h, w), |(y, x)| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, weight)| {
                    let off = k as i64 - radius;
                    let v = if horizontal {
                        src[[y, reflect(x as i64 + off, w)]]
                    } else {
                        src[[reflect(y as i64 + off, h), x]]
                    };
                    weight * v
                })
                .sum()
        })
    };
    pass(&pass(map, true), false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub sigma: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self { sigma: DEFAULT_SIGMA }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewAnomaly {
    pub view_index: usize,
    pub patch_scores: Vec<f64>,
    pub map: Array2<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    pub sample_id: String,
    pub label: Label,
    pub views: Vec<ViewAnomaly>,
    pub score: f64,
}

/// Scores every patch of a refined sample against the bank and renders
/// per-view `height×width` anomaly maps.
pub fn score_sample(
    sample_id: &str,
    label: Label,
    refined: &FeatureSet,
    bank: &MemoryBank,
    height: usize,
    width: usize,
    config: &ScoringConfig,
) -> Result<AnomalyResult, ScoringError> {
    let grid: PatchGrid = refined.grid;
    let views = (0..refined.n_views())
        .map(|view| {
            let patch_scores = bank.nearest_distances(&descriptors(refined, view, bank.mode)?)?;
            let grid_scores = Array2::from_shape_vec((grid.rows, grid.cols), patch_scores.clone())
                .expect("one score per patch");
            let map = gaussian_blur(&upsample_bilinear(&grid_scores, grid.patch_px, height, width), config.sigma);
            let score = map.iter().copied().fold(0.0, f64::max);
            Ok(ViewAnomaly {
                view_index: view + 1,
                patch_scores,
                map,
                score,
            })
        })
        .collect::<Result<Vec<_>, ScoringError>>()?;
    let score = views.iter().map(|v| v.score).fold(0.0, f64::max);
    Ok(AnomalyResult {
        sample_id: sample_id.to_string(),
        label,
        views,
        score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub sample_id: String,
    pub label: Label,
    pub score: f64,
    pub view_scores: Vec<f64>,
}

impl AnomalyResult {
    pub fn summary(&self) -> SampleScores {
        SampleScores {
            sample_id: self.sample_id.clone(),
            label: self.label,
            score: self.score,
            view_scores: self.views.iter().map(|v| v.score).collect(),
        }
    }

    /// Writes `view_KK_map.ft32` per view, `scores.json`, and optionally
    /// `view_KK_map.pgm` heatmaps into `dir`.
    pub fn save(&self, dir: &Path, heatmaps: bool) -> Result<(), ScoringError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        for v in &self.views {
            let stem = format!("view_{:02}_map", v.view_index);
            write_tensor(dir.join(format!("{stem}.ft32")), &Tensor::from_array2_f64(&v.map))?;
            if heatmaps {
                write_pgm(&dir.join(format!("{stem}.pgm")), &v.map)?;
            }
        }
        write_json(&dir.join("scores.json"), &self.summary())?;
        Ok(())
    }
}

/// 8-bit binary PGM, min-max scaled per map.
pub fn write_pgm(path: &Path, map: &Array2<f64>) -> Result<(), ScoringError> {
    let (h, w) = map.dim();
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.iter().map(|&v| ((v - lo) / span * 255.0).round() as u8));
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    Ok(())
}

/// Cropped view of a map restricted to the patch grid area.
pub fn grid_area(map: &Array2<f64>, grid: &PatchGrid) -> Array2<f64> {
    map.slice(s![..grid.rows * grid.patch_px, ..grid.cols * grid.patch_px]).to_owned()
}
