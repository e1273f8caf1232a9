//! Selective cross-view feature refinement.
//!
//! Each patch feature of view `i` attends over a small candidate set drawn
//! from the adjacent views `i±1`: for every adjacent view the `k` patches with
//! the highest modality-aware similarity (a blend of same-modality and
//! cross-modality cosine similarity). Selection is parameter-free, so the
//! candidate set is fixed for a given sample and only the attention
//! projections are trained.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{io_err, read_json, write_json, DataError};
use crate::features::{FeatureSet, Modality};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const DEFAULT_ALPHA: f64 = 0.8;
pub const DEFAULT_K: usize = 8;
/// Standard deviation of the noise added to the identity at initialization.
pub const INIT_NOISE_STD: f64 = 0.01;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("refinement needs at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("projection for {modality:?} is {found}×{found}, features have dim {expected}")]
    DimMismatch {
        modality: Modality,
        expected: usize,
        found: usize,
    },
    #[error("shared projections need equal modality dims ({d_2d} vs {d_3d})")]
    SharedDims { d_2d: usize, d_3d: usize },
    #[error("bad params file: {0}")]
    Format(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<crate::tensor::TensorError> for RefineError {
    fn from(e: crate::tensor::TensorError) -> Self {
        RefineError::Data(e.into())
    }
}

/// Query/key/value projections for one modality, each `d×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityProjection {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

impl ModalityProjection {
    pub fn identity(d: usize) -> Self {
        Self {
            wq: Array2::eye(d),
            wk: Array2::eye(d),
            wv: Array2::eye(d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn matrices(&self) -> [&Array2<f64>; 3] {
        [&self.wq, &self.wk, &self.wv]
    }

    pub fn matrices_mut(&mut self) -> [&mut Array2<f64>; 3] {
        [&mut self.wq, &mut self.wk, &mut self.wv]
    }
}

/// The trainable state: one projection triple per modality, or a single
/// triple shared by both.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    shared: bool,
    blocks: Vec<ModalityProjection>,
}

const ROLES: [&str; 3] = ["wq", "wk", "wv"];

#[derive(Serialize, Deserialize)]
struct ParamsManifest {
    shared: bool,
    d_2d: usize,
    d_3d: usize,
    files: Vec<String>,
}

impl ProjectionParams {
    pub fn identity(d_2d: usize, d_3d: usize, shared: bool) -> Result<Self, RefineError> {
        if shared && d_2d != d_3d {
            return Err(RefineError::SharedDims { d_2d, d_3d });
        }
        let blocks = if shared {
            vec![ModalityProjection::identity(d_2d)]
        } else {
            vec![
                ModalityProjection::identity(d_2d),
                ModalityProjection::identity(d_3d),
            ]
        };
        Ok(Self { shared, blocks })
    }

    /// Identity plus `N(0, INIT_NOISE_STD²)` entries.
    pub fn init(d_2d: usize, d_3d: usize, shared: bool, seed: u64) -> Result<Self, RefineError> {
        let mut p = Self::identity(d_2d, d_3d, shared)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, INIT_NOISE_STD).expect("valid std");
        for block in &mut p.blocks {
            for w in block.matrices_mut() {
                w.mapv_inplace(|v| v + noise.sample(&mut rng));
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shared: self.shared,
            blocks: self
                .blocks
                .iter()
                .map(|b| ModalityProjection::zeros(b.dim()))
                .collect(),
        }
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    pub fn get(&self, m: Modality) -> &ModalityProjection {
        &self.blocks[if self.shared { 0 } else { m.index() }]
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut ModalityProjection {
        let idx = if self.shared { 0 } else { m.index() };
        &mut self.blocks[idx]
    }

    pub fn blocks(&self) -> &[ModalityProjection] {
        &self.blocks
    }

    /// All matrices in a fixed order (block-major, then q, k, v).
    pub fn matrices(&self) -> Vec<&Array2<f64>> {
        self.blocks.iter().flat_map(|b| b.matrices()).collect()
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.blocks.iter_mut().flat_map(|b| b.matrices_mut()).collect()
    }

    pub fn dim(&self, m: Modality) -> usize {
        self.get(m).dim()
    }

    pub fn check_dims(&self, features: &FeatureSet) -> Result<(), RefineError> {
        for m in Modality::ALL {
            let (expected, found) = (features.dim(m), self.dim(m));
            if expected != found {
                return Err(RefineError::DimMismatch {
                    modality: m,
                    expected,
                    found,
                });
            }
        }
        Ok(())
    }

    fn file_names(&self) -> Vec<String> {
        let tags: Vec<&str> = if self.shared {
            vec!["shared"]
        } else {
            vec!["2d", "3d"]
        };
        tags.iter()
            .flat_map(|t| ROLES.iter().map(move |r| format!("{r}_{t}.ft32")))
            .collect()
    }

    /// Writes one FT32 file per matrix plus `params.json`.
    pub fn save(&self, dir: &Path) -> Result<(), RefineError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let files = self.file_names();
        for (name, w) in files.iter().zip(self.matrices()) {
            write_tensor(dir.join(name), &Tensor::from_array2_f64(w))?;
        }
        let manifest = ParamsManifest {
            shared: self.shared,
            d_2d: self.dim(Modality::Image),
            d_3d: self.dim(Modality::Depth),
            files,
        };
        Ok(write_json(&dir.join("params.json"), &manifest)?)
    }

    pub fn load(dir: &Path) -> Result<Self, RefineError> {
        let manifest: ParamsManifest = read_json(&dir.join("params.json"))?;
        let mut p = Self::identity(manifest.d_2d, manifest.d_3d, manifest.shared)?;
        let expected = p.file_names();
        if manifest.files != expected {
            return Err(RefineError::Format(format!(
                "expected files {expected:?}, manifest lists {:?}",
                manifest.files
            )));
        }
        for (name, w) in expected.iter().zip(p.matrices_mut()) {
            let t = read_tensor(dir.join(name))?;
            let a = t
                .to_array2_f64()
                .filter(|a| a.dim() == w.dim())
                .ok_or_else(|| RefineError::Format(format!("{name}: shape {:?}", t.shape())))?;
            *w = a;
        }
        Ok(p)
    }
}

/// Views adjacent to `view` (0-based) in the capture sequence: `view-1`, then
/// `view+1`. Cyclic rings wrap around; duplicates and `view` itself are dropped.
pub fn adjacent_views(view: usize, n_views: usize, cyclic: bool) -> Vec<usize> {
    let mut out = Vec::with_capacity(2);
    for offset in [-1i64, 1] {
        let j = view as i64 + offset;
        let j = if cyclic {
            j.rem_euclid(n_views as i64)
        } else if (0..n_views as i64).contains(&j) {
            j
        } else {
            continue;
        };
        let j = j as usize;
        if j != view && !out.contains(&j) {
            out.push(j);
        }
    }
    out
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// `alpha·cos(same modality) + (1-alpha)·cos(complementary modality)`.
pub fn modality_aware_similarity(
    query: ArrayView1<'_, f64>,
    candidate: ArrayView1<'_, f64>,
    query_other: ArrayView1<'_, f64>,
    candidate_other: ArrayView1<'_, f64>,
    alpha: f64,
) -> f64 {
    alpha * cosine(query, candidate) + (1.0 - alpha) * cosine(query_other, candidate_other)
}

/// Indices of the `k` largest scores, descending, ties to the lower index.
pub fn top_k(scores: ArrayView1<'_, f64>, k: usize) -> Vec<usize> {
    let order = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_by(order);
    idx
}

fn l2_normalized_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Candidate `(view, patch)` pairs (0-based) for every query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    /// `lists[modality][view][patch]`
    lists: [Vec<Vec<Vec<(usize, usize)>>>; 2],
}

impl CandidateSet {
    pub fn get(&self, m: Modality, view: usize, patch: usize) -> &[(usize, usize)] {
        &self.lists[m.index()][view][patch]
    }

    pub fn n_views(&self) -> usize {
        self.lists[0].len()
    }

    /// Builds a set from explicit lists (`lists[modality][view][patch]`).
    pub fn from_lists(lists: [Vec<Vec<Vec<(usize, usize)>>>; 2]) -> Self {
        Self { lists }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub alpha: f64,
    pub k: usize,
    pub cyclic: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            k: DEFAULT_K,
            cyclic: true,
        }
    }
}

/// Top-k modality-aware candidates over adjacent views for every query.
pub fn select_candidates(
    features: &FeatureSet,
    config: &SelectionConfig,
) -> Result<CandidateSet, RefineError> {
    let n_views = features.n_views();
    if n_views < 2 {
        return Err(RefineError::TooFewViews(n_views));
    }
    if config.k == 0 {
        return Err(RefineError::ZeroK);
    }
    let p = features.n_patches();
    let k = if config.k > p {
        log::warn!("k={} exceeds the {} patches per view; clamped", config.k, p);
        p
    } else {
        config.k
    };
    let normalized: Vec<[Array2<f64>; 2]> = features
        .maps
        .iter()
        .map(|pair| [l2_normalized_rows(&pair[0]), l2_normalized_rows(&pair[1])])
        .collect();
    let alpha = config.alpha;
    let build = |m: Modality| -> Vec<Vec<Vec<(usize, usize)>>> {
        (0..n_views)
            .into_par_iter()
            .map(|i| {
                let mut per_patch = vec![Vec::with_capacity(2 * k); p];
                for j in adjacent_views(i, n_views, config.cyclic) {
                    let same = normalized[i][m.index()].dot(&normalized[j][m.index()].t());
                    let other = normalized[i][m.other().index()]
                        .dot(&normalized[j][m.other().index()].t());
                    let sim = same * alpha + other * (1.0 - alpha);
                    for (q_idx, row) in sim.axis_iter(Axis(0)).enumerate() {
                        per_patch[q_idx].extend(top_k(row, k).into_iter().map(|q| (j, q)));
                    }
                }
                per_patch
            })
            .collect()
    };
    Ok(CandidateSet {
        lists: [build(Modality::Image), build(Modality::Depth)],
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    /// Adds the unrefined query feature to the attention output.
    pub residual: bool,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Projected queries, keys and values of every view for one modality.
struct Projected {
    q: Vec<Array2<f64>>,
    k: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

fn project(features: &FeatureSet, m: Modality, w: &ModalityProjection) -> Projected {
    let f = |mat: &Array2<f64>| -> Vec<Array2<f64>> {
        features
            .maps
            .iter()
            .map(|pair| pair[m.index()].dot(&mat.t()))
            .collect()
    };
    Projected {
        q: f(&w.wq),
        k: f(&w.wk),
        v: f(&w.wv),
    }
}

fn logits_for(proj: &Projected, view: usize, patch: usize, cands: &[(usize, usize)], scale: f64) -> Vec<f64> {
    let q = proj.q[view].row(patch);
    cands
        .iter()
        .map(|&(j, c)| q.dot(&proj.k[j].row(c)) * scale)
        .collect()
}

/// Attention weights of one query over its candidates.
pub fn attention_weights(
    features: &FeatureSet,
    candidates: &CandidateSet,
    params: &ProjectionParams,
    m: Modality,
    view: usize,
    patch: usize,
) -> Vec<f64> {
    let w = params.get(m);
    let d = features.dim(m);
    let f = features.get(view, m).row(patch);
    let q = w.wq.dot(&f);
    let logits: Vec<f64> = candidates
        .get(m, view, patch)
        .iter()
        .map(|&(j, c)| q.dot(&w.wk.dot(&features.get(j, m).row(c))) / (d as f64).sqrt())
        .collect();
    softmax(&logits)
}

fn refine_view(
    features: &FeatureSet,
    candidates: &CandidateSet,
    proj: &Projected,
    m: Modality,
    view: usize,
    options: RefineOptions,
) -> Array2<f64> {
    let p = features.n_patches();
    let d = features.dim(m);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Array2::zeros((p, d));
    let mut degenerate = 0usize;
    for patch in 0..p {
        let cands = candidates.get(m, view, patch);
        let mut row = out.row_mut(patch);
        if cands.is_empty() {
            degenerate += 1;
            row.assign(&proj.v[view].row(patch));
        } else {
            let a = softmax(&logits_for(proj, view, patch, cands, scale));
            for (&(j, c), w) in cands.iter().zip(a) {
                row.scaled_add(w, &proj.v[j].row(c));
            }
        }
        if options.residual {
            row += &features.get(view, m).row(patch);
        }
    }
    if degenerate > 0 {
        log::warn!(
            "view {}: {degenerate} queries without candidates fell back to the value projection",
            view + 1
        );
    }
    out
}

/// Attention-weighted aggregation of candidate values for every query.
pub fn refine(
    features: &FeatureSet,
    candidates: &CandidateSet,
    params: &ProjectionParams,
    options: RefineOptions,
) -> Result<FeatureSet, RefineError> {
    params.check_dims(features)?;
    let projected = Modality::ALL.map(|m| project(features, m, params.get(m)));
    let maps: Vec<[Array2<f64>; 2]> = (0..features.n_views())
        .into_par_iter()
        .map(|view| {
            Modality::ALL.map(|m| {
                refine_view(features, candidates, &projected[m.index()], m, view, options)
            })
        })
        .collect();
    Ok(FeatureSet::new(features.grid, maps))
}

/// Gradient of a scalar loss w.r.t. all projection matrices, given the loss
/// gradient w.r.t. every refined feature. Candidates are held fixed.
pub fn refine_backward(
    features: &FeatureSet,
    candidates: &CandidateSet,
    params: &ProjectionParams,
    grad_refined: &FeatureSet,
) -> ProjectionParams {
    let n_views = features.n_views();
    let p = features.n_patches();
    let mut grads = params.zeros_like();
    for m in Modality::ALL {
        let proj = project(features, m, params.get(m));
        let d = features.dim(m);
        let scale = 1.0 / (d as f64).sqrt();
        // Per-view partial gradients of Q, K, V, reduced in view order below.
        let partials: Vec<ModalityProjection> = (0..n_views)
            .into_par_iter()
            .map(|view| {
                let mut dq = Array2::<f64>::zeros((p, d));
                let mut dk = vec![None::<Array2<f64>>; n_views];
                let mut dv = vec![None::<Array2<f64>>; n_views];
                let g_view = grad_refined.get(view, m);
                for patch in 0..p {
                    let g = g_view.row(patch);
                    let cands = candidates.get(m, view, patch);
                    if cands.is_empty() {
                        dv[view]
                            .get_or_insert_with(|| Array2::zeros((p, d)))
                            .row_mut(patch)
                            .scaled_add(1.0, &g);
                        continue;
                    }
                    let a = softmax(&logits_for(&proj, view, patch, cands, scale));
                    let gv: Vec<f64> = cands.iter().map(|&(j, c)| g.dot(&proj.v[j].row(c))).collect();
                    let mean_gv: f64 = a.iter().zip(&gv).map(|(w, x)| w * x).sum();
                    let q_row = proj.q[view].row(patch);
                    for (idx, &(j, c)) in cands.iter().enumerate() {
                        let dlogit = a[idx] * (gv[idx] - mean_gv) * scale;
                        dq.row_mut(patch).scaled_add(dlogit, &proj.k[j].row(c));
                        dk[j]
                            .get_or_insert_with(|| Array2::zeros((p, d)))
                            .row_mut(c)
                            .scaled_add(dlogit, &q_row);
                        dv[j]
                            .get_or_insert_with(|| Array2::zeros((p, d)))
                            .row_mut(c)
                            .scaled_add(a[idx], &g);
                    }
                }
                let mut out = ModalityProjection::zeros(d);
                out.wq = dq.t().dot(features.get(view, m));
                for j in 0..n_views {
                    if let Some(dkj) = &dk[j] {
                        out.wk += &dkj.t().dot(features.get(j, m));
                    }
                    if let Some(dvj) = &dv[j] {
                        out.wv += &dvj.t().dot(features.get(j, m));
                    }
                }
                out
            })
            .collect();
        let target = grads.get_mut(m);
        for part in partials {
            target.wq += &part.wq;
            target.wk += &part.wk;
            target.wv += &part.wv;
        }
    }
    grads
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::grid::PatchGrid;
    use ndarray::{arr1, Array1};
    use rand::Rng;

    pub(crate) fn random_features(n_views: usize, rows: usize, cols: usize, d: usize, seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = PatchGrid::new(rows, cols, 4);
        let maps = (0..n_views)
            .map(|_| {
                [0, 1].map(|_| Array2::from_shape_simple_fn((grid.len(), d), || rng.random_range(-1.0..1.0)))
            })
            .collect();
        FeatureSet::new(grid, maps)
    }

    #[test]
    fn similarity_examples() {
        let a = arr1(&[1.0, 2.0]);
        let b = arr1(&[0.5, -0.3]);
        let s = modality_aware_similarity(a.view(), a.view(), b.view(), b.view(), 0.8);
        assert!((s - 1.0).abs() < 1e-12);
        let x = arr1(&[1.0, 0.0]);
        let y = arr1(&[0.0, 1.0]);
        assert_eq!(modality_aware_similarity(x.view(), y.view(), x.view(), y.view(), 0.8), 0.0);
        let s = modality_aware_similarity(x.view(), x.view(), x.view(), y.view(), 0.8);
        assert!((s - 0.8).abs() < 1e-12);
        let z = Array1::zeros(2);
        assert_eq!(cosine(z.view(), x.view()), 0.0);
    }

    #[test]
    fn top_k_rules() {
        assert_eq!(top_k(arr1(&[0.2, 0.9, 0.5]).view(), 1), vec![1]);
        assert_eq!(top_k(arr1(&[0.5, 0.5]).view(), 1), vec![0]);
        assert_eq!(top_k(arr1(&[0.1, 0.3, 0.3, 0.2]).view(), 3), vec![1, 2, 3]);
    }

    proptest::proptest! {
        #[test]
        fn top_k_matches_full_sort(vals in proptest::collection::vec(0u8..4, 1..40), k in 0usize..45) {
            let scores = Array1::from_iter(vals.iter().map(|&v| v as f64));
            let mut all: Vec<usize> = (0..vals.len()).collect();
            all.sort_by(|&a, &b| vals[b].cmp(&vals[a]).then(a.cmp(&b)));
            all.truncate(k);
            proptest::prop_assert_eq!(top_k(scores.view(), k), all);
        }
    }

    #[test]
    fn adjacency() {
        assert_eq!(adjacent_views(0, 12, true), vec![11, 1]);
        assert_eq!(adjacent_views(0, 12, false), vec![1]);
        assert_eq!(adjacent_views(11, 12, false), vec![10]);
        assert_eq!(adjacent_views(0, 2, true), vec![1]);
        assert_eq!(adjacent_views(1, 3, true), vec![0, 2]);
    }

    #[test]
    fn two_adjacent_views_give_2k() {
        let f = random_features(4, 4, 4, 3, 1);
        let c = select_candidates(&f, &SelectionConfig { alpha: 0.8, k: 8, cyclic: true }).unwrap();
        for m in Modality::ALL {
            for v in 0..4 {
                for p in 0..16 {
                    let list = c.get(m, v, p);
                    assert_eq!(list.len(), 16);
                    let adj = adjacent_views(v, 4, true);
                    assert!(list.iter().all(|(j, q)| adj.contains(j) && *q < 16));
                }
            }
        }
    }

    #[test]
    fn selection_matches_pairwise_scores() {
        let f = random_features(3, 2, 3, 4, 9);
        let cfg = SelectionConfig { alpha: 0.8, k: 2, cyclic: true };
        let c = select_candidates(&f, &cfg).unwrap();
        for m in Modality::ALL {
            for i in 0..3 {
                for p in 0..6 {
                    let mut expected = vec![];
                    for j in adjacent_views(i, 3, true) {
                        let scores = Array1::from_iter((0..6).map(|q| {
                            modality_aware_similarity(
                                f.get(i, m).row(p),
                                f.get(j, m).row(q),
                                f.get(i, m.other()).row(p),
                                f.get(j, m.other()).row(q),
                                0.8,
                            )
                        }));
                        expected.extend(top_k(scores.view(), 2).into_iter().map(|q| (j, q)));
                    }
                    assert_eq!(c.get(m, i, p), expected.as_slice());
                }
            }
        }
    }

    #[test]
    fn k_clamped_to_patch_count() {
        let f = random_features(3, 2, 2, 3, 2);
        let c = select_candidates(&f, &SelectionConfig { alpha: 0.8, k: 50, cyclic: true }).unwrap();
        assert_eq!(c.get(Modality::Image, 0, 0).len(), 8);
        assert!(matches!(
            select_candidates(&random_features(1, 2, 2, 3, 0), &SelectionConfig::default()),
            Err(RefineError::TooFewViews(1))
        ));
    }

    #[test]
    fn single_candidate_weight_is_one() {
        let f = random_features(2, 1, 2, 3, 4);
        let c = select_candidates(&f, &SelectionConfig { alpha: 0.8, k: 1, cyclic: true }).unwrap();
        let params = ProjectionParams::init(3, 3, false, 5).unwrap();
        let refined = refine(&f, &c, &params, RefineOptions::default()).unwrap();
        for m in Modality::ALL {
            for v in 0..2 {
                for p in 0..2 {
                    assert_eq!(attention_weights(&f, &c, &params, m, v, p), vec![1.0]);
                    let (j, q) = c.get(m, v, p)[0];
                    let expect = params.get(m).wv.dot(&f.get(j, m).row(q));
                    let diff = (&refined.get(v, m).row(p) - &expect).mapv(f64::abs);
                    assert!(diff.iter().all(|&x| x < 1e-12));
                }
            }
        }
    }

    #[test]
    fn equal_logits_split_evenly() {
        assert_eq!(softmax(&[0.3, 0.3]), vec![0.5, 0.5]);
        let w = softmax(&[1000.0, 0.0, -1000.0]);
        assert!((w[0] - 1.0).abs() < 1e-12 && w.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn empty_candidates_fall_back_to_value_projection() {
        let f = random_features(2, 1, 2, 3, 6);
        let empty = vec![vec![vec![]; 2]; 2];
        let c = CandidateSet::from_lists([empty.clone(), empty]);
        let params = ProjectionParams::init(3, 3, false, 1).unwrap();
        let r = refine(&f, &c, &params, RefineOptions::default()).unwrap();
        let expect = f.get(1, Modality::Depth).dot(&params.get(Modality::Depth).wv.t());
        assert_eq!(r.get(1, Modality::Depth), &expect);
    }

    #[test]
    fn residual_option_adds_query() {
        let f = random_features(3, 2, 2, 3, 7);
        let c = select_candidates(&f, &SelectionConfig { alpha: 0.8, k: 2, cyclic: true }).unwrap();
        let params = ProjectionParams::init(3, 3, false, 1).unwrap();
        let plain = refine(&f, &c, &params, RefineOptions::default()).unwrap();
        let res = refine(&f, &c, &params, RefineOptions { residual: true }).unwrap();
        let diff = (res.get(2, Modality::Image) - plain.get(2, Modality::Image)) - f.get(2, Modality::Image);
        assert!(diff.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn params_save_load() {
        let dir = tempfile::tempdir().unwrap();
        for shared in [false, true] {
            let p = ProjectionParams::init(4, 4, shared, 3).unwrap();
            let sub = dir.path().join(format!("p{shared}"));
            p.save(&sub).unwrap();
            let back = ProjectionParams::load(&sub).unwrap();
            assert_eq!(back.is_shared(), shared);
            for (a, b) in p.matrices().into_iter().zip(back.matrices()) {
                assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-6));
            }
        }
        assert!(ProjectionParams::identity(3, 4, true).is_err());
    }

    #[test]
    fn init_is_near_identity() {
        let p = ProjectionParams::init(16, 16, false, 0).unwrap();
        assert_eq!(p.matrices().len(), 6);
        for w in p.matrices() {
            let dev = (w - &Array2::<f64>::eye(16)).mapv(f64::abs);
            assert!(dev.iter().all(|&x| x < 0.06));
        }
    }

    /// Refinement evaluated one query at a time with explicit loops.
    fn refine_direct(f: &FeatureSet, c: &CandidateSet, params: &ProjectionParams) -> FeatureSet {
        let maps = (0..f.n_views())
            .map(|view| {
                Modality::ALL.map(|m| {
                    let w = params.get(m);
                    let d = f.dim(m);
                    let mut out = Array2::zeros((f.n_patches(), d));
                    for patch in 0..f.n_patches() {
                        let x = f.get(view, m).row(patch);
                        let mut q = vec![0.0; d];
                        for r in 0..d {
                            for k in 0..d {
                                q[r] += w.wq[[r, k]] * x[k];
                            }
                        }
                        let cands = c.get(m, view, patch);
                        let mut logits = Vec::new();
                        let mut values = Vec::new();
                        for &(j, cp) in cands {
                            let y = f.get(j, m).row(cp);
                            let mut dot = 0.0;
                            let mut v = vec![0.0; d];
                            for r in 0..d {
                                let mut kr = 0.0;
                                for k in 0..d {
                                    kr += w.wk[[r, k]] * y[k];
                                    v[r] += w.wv[[r, k]] * y[k];
                                }
                                dot += q[r] * kr;
                            }
                            logits.push(dot / (d as f64).sqrt());
                            values.push(v);
                        }
                        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
                        for (l, v) in logits.iter().zip(&values) {
                            for r in 0..d {
                                out[[patch, r]] += l.exp() / denom * v[r];
                            }
                        }
                    }
                    out
                })
            })
            .collect();
        FeatureSet::new(f.grid, maps)
    }

    #[test]
    fn matches_direct_evaluation() {
        for seed in 0..10 {
            let f = random_features(4, 2, 3, 5, 300 + seed);
            let c = select_candidates(&f, &SelectionConfig { alpha: 0.8, k: 3, cyclic: seed % 2 == 0 }).unwrap();
            let params = ProjectionParams::init(5, 5, seed % 3 == 0, seed).unwrap();
            let fast = refine(&f, &c, &params, RefineOptions::default()).unwrap();
            let slow = refine_direct(&f, &c, &params);
            for (a, b) in fast.maps.iter().zip(&slow.maps) {
                for m in 0..2 {
                    assert!(a[m].iter().zip(b[m].iter()).all(|(x, y)| (x - y).abs() < 1e-12));
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Loss = Σ G ⊙ refined, with a fixed random G.
        for (seed, shared) in [(0u64, false), (1, true), (2, false)] {
            let f = random_features(3, 2, 2, 3, 400 + seed);
            let c = select_candidates(&f, &SelectionConfig { alpha: 0.8, k: 2, cyclic: true }).unwrap();
            let mut params = ProjectionParams::init(3, 3, shared, seed).unwrap();
            for w in params.matrices_mut() {
                *w *= 1.7;
            }
            let g = random_features(3, 2, 2, 3, 500 + seed);
            let loss = |p: &ProjectionParams| -> f64 {
                let r = refine(&f, &c, p, RefineOptions::default()).unwrap();
                r.maps
                    .iter()
                    .zip(&g.maps)
                    .map(|(a, b)| (&a[0] * &b[0]).sum() + (&a[1] * &b[1]).sum())
                    .sum()
            };
            let analytic = refine_backward(&f, &c, &params, &g);
            let h = 1e-5;
            for (mi, an) in analytic.matrices().into_iter().enumerate() {
                for idx in 0..an.len() {
                    let (r, col) = (idx / 3, idx % 3);
                    let mut plus = params.clone();
                    plus.matrices_mut()[mi][[r, col]] += h;
                    let mut minus = params.clone();
                    minus.matrices_mut()[mi][[r, col]] -= h;
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let a = an[[r, col]];
                    assert!((fd - a).abs() <= 1e-6 * fd.abs().max(1.0), "matrix {mi} ({r},{col}): {a} vs {fd}");
                }
            }
        }
    }
}
