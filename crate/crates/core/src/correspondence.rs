//! Geometric patch correspondences between neighboring views and the
//! feature-consistency penalty evaluated on them.
//!
//! View and patch indices are 0-based in memory. The on-disk cache uses the
//! 1-based convention of the dataset layout.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{self, Vec3};
use crate::dataset::{read_json, write_json, DataError, ViewSet};
use crate::features::{FeatureSet, Modality};
use crate::grid::PatchGrid;
use crate::tensor::{read_tensor, write_tensor, Tensor, TensorError};

pub const DEFAULT_NEIGHBORS: usize = 2;
pub const DEFAULT_DEPTH_TOL: f64 = 0.02;
/// Smallest |cos| between the estimated surface normal and the direction to
/// the target camera for a correspondence to be kept.
pub const DEFAULT_MIN_VIEW_COS: f64 = 0.15;

#[derive(Debug, Error)]
pub enum CorrespondenceError {
    #[error("neighbor count must be at least 1")]
    ZeroNeighbors,
    #[error("sample {0} has views with different image sizes")]
    ImageSize(String),
    #[error("patch grid {rows}×{cols}×{px}px does not fit a {height}×{width} image")]
    GridTooLarge {
        rows: usize,
        cols: usize,
        px: usize,
        height: usize,
        width: usize,
    },
    #[error("cache {path}: {reason}")]
    Cache { path: String, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Ordered neighbors `i-N..i-1, i+1..i+N` of view `i` among `n_views`.
/// Cyclic mode wraps around the ring; otherwise out-of-range indices are
/// dropped. Duplicates and `i` itself are removed.
pub fn neighbor_set(i: usize, n_views: usize, n: usize, cyclic: bool) -> Vec<usize> {
    let mut out = Vec::with_capacity(2 * n);
    let offsets = (1..=n).rev().map(|o| -(o as i64)).chain((1..=n).map(|o| o as i64));
    for off in offsets {
        let j = i as i64 + off;
        let j = if cyclic {
            j.rem_euclid(n_views as i64)
        } else if (0..n_views as i64).contains(&j) {
            j
        } else {
            continue;
        };
        let j = j as usize;
        if j != i && !out.contains(&j) {
            out.push(j);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionCounts {
    pub no_depth: usize,
    pub out_of_bounds: usize,
    pub occluded: usize,
    #[serde(default)]
    pub grazing: usize,
}

impl RejectionCounts {
    fn add(&mut self, other: &Self) {
        self.no_depth += other.no_depth;
        self.out_of_bounds += other.out_of_bounds;
        self.occluded += other.occluded;
        self.grazing += other.grazing;
    }
}

/// Why a patch of the source view has no partner in the target view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    NoDepth,
    OutOfBounds,
    Occluded,
    /// The target camera sees the surface nearly edge-on, or the source depth
    /// map cannot support a normal estimate. Depth maps cannot resolve
    /// visibility along silhouette rims.
    Grazing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPair {
    pub source: usize,
    pub target: usize,
    pub pairs: Vec<(usize, usize)>,
    pub rejected: RejectionCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub n_views: usize,
    pub grid: PatchGrid,
    /// `[i]` holds one entry per `j` in the neighbor set of `i`, in order.
    pub views: Vec<Vec<ViewPair>>,
}

impl CorrespondenceSet {
    pub fn total_pairs(&self) -> usize {
        self.views.iter().flatten().map(|vp| vp.pairs.len()).sum()
    }

    pub fn rejections(&self) -> RejectionCounts {
        let mut acc = RejectionCounts::default();
        for vp in self.views.iter().flatten() {
            acc.add(&vp.rejected);
        }
        acc
    }

    pub fn pair(&self, i: usize, j: usize) -> Option<&ViewPair> {
        self.views.get(i)?.iter().find(|vp| vp.target == j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceConfig {
    pub neighbors: usize,
    pub depth_tol: f64,
    pub cyclic: bool,
    pub min_view_cos: f64,
}

impl Default for CorrespondenceConfig {
    fn default() -> Self {
        Self {
            neighbors: DEFAULT_NEIGHBORS,
            depth_tol: DEFAULT_DEPTH_TOL,
            cyclic: true,
            min_view_cos: DEFAULT_MIN_VIEW_COS,
        }
    }
}

/// Surface normal at integer pixel `(u, v)` from the unprojected 4-neighborhood.
/// Falls back to one-sided differences at depth edges.
fn estimate_normal(obs: &crate::dataset::ViewObservation, u: usize, v: usize) -> Option<Vec3> {
    let (h, w) = obs.depth.dim();
    let point = |x: usize, y: usize| -> Option<Vec3> {
        let z = obs.depth[[y, x]] as f64;
        (z > 0.0).then(|| obs.camera.unproject(x as f64 + 0.5, y as f64 + 0.5, z))
    };
    let centre = point(u, v)?;
    let tangent = |prev: Option<Vec3>, next: Option<Vec3>| match (prev, next) {
        (Some(a), Some(b)) => Some(camera::sub(b, a)),
        (None, Some(b)) => Some(camera::sub(b, centre)),
        (Some(a), None) => Some(camera::sub(centre, a)),
        (None, None) => None,
    };
    let tu = tangent(
        u.checked_sub(1).and_then(|x| point(x, v)),
        (u + 1 < w).then(|| point(u + 1, v)).flatten(),
    )?;
    let tv = tangent(
        v.checked_sub(1).and_then(|y| point(u, y)),
        (v + 1 < h).then(|| point(u, v + 1)).flatten(),
    )?;
    let n = camera::cross(tu, tv);
    (camera::norm(n) > 0.0).then(|| camera::normalize(n))
}

/// Maps the center of patch `p` in view `i` into view `j`.
pub fn match_patch(
    viewset: &ViewSet,
    grid: &PatchGrid,
    i: usize,
    j: usize,
    p: usize,
    config: &CorrespondenceConfig,
) -> Result<usize, Rejection> {
    let src = &viewset.views[i];
    let dst = &viewset.views[j];
    let (pu, pv) = grid.center_pixel(p);
    let z = src.depth[[pv, pu]] as f64;
    if z <= 0.0 {
        return Err(Rejection::NoDepth);
    }
    let (u, v) = grid.center(p);
    let world = src.camera.unproject(u, v, z);
    let (u2, v2, z2) = dst.camera.project(world).ok_or(Rejection::OutOfBounds)?;
    let (h, w) = dst.depth.dim();
    if !(u2 >= 0.0 && v2 >= 0.0 && u2 < w as f64 && v2 < h as f64) {
        return Err(Rejection::OutOfBounds);
    }
    let q = grid.patch_of_pixel(u2, v2).ok_or(Rejection::OutOfBounds)?;
    if config.min_view_cos > 0.0 {
        let normal = estimate_normal(src, pu, pv).ok_or(Rejection::Grazing)?;
        let to_cam = camera::normalize(camera::sub(dst.camera.center(), world));
        if camera::dot(normal, to_cam).abs() < config.min_view_cos {
            return Err(Rejection::Grazing);
        }
    }
    let observed = dst.depth[[v2.floor() as usize, u2.floor() as usize]] as f64;
    if (z2 - observed).abs() > config.depth_tol * z2 {
        return Err(Rejection::Occluded);
    }
    Ok(q)
}

fn check_grid(viewset: &ViewSet, grid: &PatchGrid) -> Result<(), CorrespondenceError> {
    let (h, w) = (viewset.height(), viewset.width());
    if viewset.views.iter().any(|v| v.depth.dim() != (h, w)) {
        return Err(CorrespondenceError::ImageSize(viewset.sample_id.clone()));
    }
    if grid.rows * grid.patch_px > h || grid.cols * grid.patch_px > w {
        return Err(CorrespondenceError::GridTooLarge {
            rows: grid.rows,
            cols: grid.cols,
            px: grid.patch_px,
            height: h,
            width: w,
        });
    }
    Ok(())
}

pub fn compute_correspondences(
    viewset: &ViewSet,
    grid: &PatchGrid,
    config: &CorrespondenceConfig,
) -> Result<CorrespondenceSet, CorrespondenceError> {
    if config.neighbors == 0 {
        return Err(CorrespondenceError::ZeroNeighbors);
    }
    check_grid(viewset, grid)?;
    let n_views = viewset.len();
    let jobs: Vec<(usize, usize)> = (0..n_views)
        .flat_map(|i| {
            neighbor_set(i, n_views, config.neighbors, config.cyclic)
                .into_iter()
                .map(move |j| (i, j))
        })
        .collect();
    let done: Vec<ViewPair> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let mut vp = ViewPair {
                source: i,
                target: j,
                pairs: Vec::new(),
                rejected: RejectionCounts::default(),
            };
            for p in 0..grid.len() {
                match match_patch(viewset, grid, i, j, p, config) {
                    Ok(q) => vp.pairs.push((p, q)),
                    Err(Rejection::NoDepth) => vp.rejected.no_depth += 1,
                    Err(Rejection::OutOfBounds) => vp.rejected.out_of_bounds += 1,
                    Err(Rejection::Occluded) => vp.rejected.occluded += 1,
                    Err(Rejection::Grazing) => vp.rejected.grazing += 1,
                }
            }
            vp
        })
        .collect();
    let mut views: Vec<Vec<ViewPair>> = vec![Vec::new(); n_views];
    for vp in done {
        views[vp.source].push(vp);
    }
    Ok(CorrespondenceSet {
        n_views,
        grid: *grid,
        views,
    })
}

/// Weight of a single pair term in the overall loss: one over the number of
/// views, non-empty neighbors, modalities and pairs.
fn pair_weights(corr: &CorrespondenceSet) -> Vec<Vec<f64>> {
    corr.views
        .iter()
        .map(|list| {
            let non_empty = list.iter().filter(|vp| !vp.pairs.is_empty()).count();
            list.iter()
                .map(|vp| {
                    if vp.pairs.is_empty() {
                        0.0
                    } else {
                        1.0 / (corr.n_views * non_empty * Modality::ALL.len() * vp.pairs.len()) as f64
                    }
                })
                .collect()
        })
        .collect()
}

fn row_distance(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean L2 distance between refined features at corresponding patches.
pub fn mvga_loss(refined: &FeatureSet, corr: &CorrespondenceSet) -> f64 {
    let weights = pair_weights(corr);
    let mut total = 0.0;
    for (list, ws) in corr.views.iter().zip(&weights) {
        for (vp, &w) in list.iter().zip(ws) {
            for m in Modality::ALL {
                let (a, b) = (refined.get(vp.source, m), refined.get(vp.target, m));
                let sum: f64 = vp.pairs.iter().map(|&(p, q)| row_distance(a.row(p), b.row(q))).sum();
                total += w * sum;
            }
        }
    }
    total
}

/// Loss and its gradient w.r.t. every refined row, scaled by `scale`.
/// Coincident rows contribute a zero subgradient.
pub fn mvga_forward_backward(refined: &FeatureSet, corr: &CorrespondenceSet, scale: f64) -> (f64, FeatureSet) {
    let weights = pair_weights(corr);
    let mut grads: Vec<[Array2<f64>; 2]> = refined
        .maps
        .iter()
        .map(|pair| [Array2::zeros(pair[0].dim()), Array2::zeros(pair[1].dim())])
        .collect();
    let mut total = 0.0;
    for (list, ws) in corr.views.iter().zip(&weights) {
        for (vp, &w) in list.iter().zip(ws) {
            for m in Modality::ALL {
                let mi = m.index();
                let (a, b) = (refined.get(vp.source, m), refined.get(vp.target, m));
                for &(p, q) in &vp.pairs {
                    let diff = &a.row(p) - &b.row(q);
                    let dist = diff.dot(&diff).sqrt();
                    total += w * dist;
                    if dist > 0.0 {
                        let g = diff * (scale * w / dist);
                        grads[vp.source][mi].row_mut(p).scaled_add(1.0, &g);
                        grads[vp.target][mi].row_mut(q).scaled_add(-1.0, &g);
                    }
                }
            }
        }
    }
    (total, FeatureSet::new(refined.grid, grads))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheHeader {
    n_views: usize,
    grid: PatchGrid,
    config: CorrespondenceConfig,
    /// `(source, target)` in 1-based view indices, in storage order.
    view_pairs: Vec<(usize, usize)>,
    rejected: Vec<RejectionCounts>,
    total_rejected: RejectionCounts,
}

/// Writes `correspondences.ft32` (rows of 1-based `i, j, p, q`) and
/// `correspondences.json` into `dir`.
pub fn save_cache(
    dir: &Path,
    corr: &CorrespondenceSet,
    config: &CorrespondenceConfig,
) -> Result<(), CorrespondenceError> {
    std::fs::create_dir_all(dir).map_err(crate::dataset::io_err(dir))?;
    let mut data = Vec::with_capacity(corr.total_pairs() * 4);
    let mut view_pairs = Vec::new();
    let mut rejected = Vec::new();
    for vp in corr.views.iter().flatten() {
        view_pairs.push((vp.source + 1, vp.target + 1));
        rejected.push(vp.rejected);
        for &(p, q) in &vp.pairs {
            data.extend([vp.source + 1, vp.target + 1, p + 1, q + 1].map(|x| x as f32));
        }
    }
    let n = data.len() / 4;
    write_tensor(dir.join("correspondences.ft32"), &Tensor::new(vec![n, 4], data)?)?;
    let header = CacheHeader {
        n_views: corr.n_views,
        grid: corr.grid,
        config: *config,
        view_pairs,
        rejected,
        total_rejected: corr.rejections(),
    };
    write_json(&dir.join("correspondences.json"), &header)?;
    Ok(())
}

/// Reads a cache written by [`save_cache`]. Returns `None` when the cache
/// was built with a different configuration or grid.
pub fn load_cache(
    dir: &Path,
    grid: &PatchGrid,
    config: &CorrespondenceConfig,
) -> Result<Option<CorrespondenceSet>, CorrespondenceError> {
    let json = dir.join("correspondences.json");
    if !json.exists() {
        return Ok(None);
    }
    let header: CacheHeader = read_json(&json)?;
    if header.grid != *grid || header.config != *config {
        return Ok(None);
    }
    let path = dir.join("correspondences.ft32");
    let bad = |reason: String| CorrespondenceError::Cache {
        path: path.display().to_string(),
        reason,
    };
    let t = read_tensor(&path)?;
    if t.shape().len() != 2 || t.shape()[1] != 4 {
        return Err(bad(format!("expected n×4 rows, found shape {:?}", t.shape())));
    }
    if header.view_pairs.len() != header.rejected.len() {
        return Err(bad("header lists differ in length".into()));
    }
    let mut views: Vec<Vec<ViewPair>> = vec![Vec::new(); header.n_views];
    let mut slot = std::collections::HashMap::new();
    for (&(i, j), rej) in header.view_pairs.iter().zip(&header.rejected) {
        if i == 0 || i > header.n_views || j == 0 || j > header.n_views {
            return Err(bad(format!("view pair ({i}, {j}) out of range")));
        }
        slot.insert((i - 1, j - 1), (i - 1, views[i - 1].len()));
        views[i - 1].push(ViewPair {
            source: i - 1,
            target: j - 1,
            pairs: Vec::new(),
            rejected: *rej,
        });
    }
    for row in t.data().chunks_exact(4) {
        let idx: [usize; 4] = std::array::from_fn(|k| row[k] as usize);
        if row.iter().any(|&x| x < 1.0 || x.fract() != 0.0) || idx[2] > grid.len() || idx[3] > grid.len() {
            return Err(bad(format!("invalid row {row:?}")));
        }
        let (vi, pos) = *slot
            .get(&(idx[0] - 1, idx[1] - 1))
            .ok_or_else(|| bad(format!("row {row:?} refers to an unlisted view pair")))?;
        views[vi][pos].pairs.push((idx[2] - 1, idx[3] - 1));
    }
    Ok(Some(CorrespondenceSet {
        n_views: header.n_views,
        grid: *grid,
        views,
    }))
}
