//! Per-view, per-modality patch features.
//!
//! The toy extractor is a frozen random projection of raw patch pixels plus
//! low-order statistics, squashed by `tanh`. The precomputed extractor loads
//! `P×d` FT32 files exported from an external backbone:
//!
//! ```text
//! <root>/features_meta.json                 {d_2d, d_3d, rows, cols, patch_px, backbone, layer}
//! <root>/<sample_id>/view_<kk>_2d.ft32
//! <root>/<sample_id>/view_<kk>_3d.ft32
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{io_err, read_json, write_json, DataError, ViewObservation, ViewSet};
use crate::grid::PatchGrid;
use crate::tensor::{read_tensor, write_tensor, Tensor};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid extractor spec: {0}")]
    Spec(String),
    #[error("image {height}×{width} holds fewer than 2×2 patches of {patch_px} px")]
    GridTooSmall {
        height: usize,
        width: usize,
        patch_px: usize,
    },
    #[error("{path}: expected {expected:?} features, found shape {found:?}")]
    Shape {
        path: PathBuf,
        expected: [usize; 2],
        found: Vec<usize>,
    },
    #[error("precomputed grid {found:?} does not match image grid {expected:?}")]
    GridMismatch {
        expected: PatchGrid,
        found: PatchGrid,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<crate::tensor::TensorError> for FeatureError {
    fn from(e: crate::tensor::TensorError) -> Self {
        FeatureError::Data(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "2d")]
    Image,
    #[serde(rename = "3d")]
    Depth,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Image, Modality::Depth];

    pub fn index(self) -> usize {
        match self {
            Modality::Image => 0,
            Modality::Depth => 1,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::Image => Modality::Depth,
            Modality::Depth => Modality::Image,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Image => "2d",
            Modality::Depth => "3d",
        }
    }
}

/// One `(view, modality)` feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub view_index: usize,
    pub modality: Modality,
    pub grid: PatchGrid,
    /// `P×d` rows in patch order.
    pub features: Array2<f64>,
    pub refined: bool,
}

/// All feature maps of one sample: `maps[view][modality.index()]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub grid: PatchGrid,
    pub maps: Vec<[Array2<f64>; 2]>,
}

impl FeatureSet {
    pub fn new(grid: PatchGrid, maps: Vec<[Array2<f64>; 2]>) -> Self {
        debug_assert!(maps
            .iter()
            .all(|m| m[0].nrows() == grid.len() && m[1].nrows() == grid.len()));
        Self { grid, maps }
    }

    pub fn n_views(&self) -> usize {
        self.maps.len()
    }

    pub fn n_patches(&self) -> usize {
        self.grid.len()
    }

    pub fn dim(&self, m: Modality) -> usize {
        self.maps[0][m.index()].ncols()
    }

    pub fn get(&self, view: usize, m: Modality) -> &Array2<f64> {
        &self.maps[view][m.index()]
    }

    pub fn feature_map(&self, view: usize, m: Modality, refined: bool) -> FeatureMap {
        FeatureMap {
            view_index: view + 1,
            modality: m,
            grid: self.grid,
            features: self.get(view, m).clone(),
            refined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExtractorKind {
    Toy { seed: u64 },
    Precomputed { root: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    #[serde(flatten)]
    pub kind: ExtractorKind,
    pub d_2d: usize,
    pub d_3d: usize,
    pub patch_px: usize,
}

impl ExtractorSpec {
    pub fn toy(dim: usize, patch_px: usize, seed: u64) -> Self {
        Self {
            kind: ExtractorKind::Toy { seed },
            d_2d: dim,
            d_3d: dim,
            patch_px,
        }
    }

    pub fn dim(&self, m: Modality) -> usize {
        match m {
            Modality::Image => self.d_2d,
            Modality::Depth => self.d_3d,
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.d_2d < 2 || self.d_3d < 2 {
            return Err(FeatureError::Spec(format!(
                "feature dims must be at least 2 (d_2d={}, d_3d={})",
                self.d_2d, self.d_3d
            )));
        }
        if self.patch_px < 2 {
            return Err(FeatureError::Spec(format!(
                "patch_px must be at least 2, got {}",
                self.patch_px
            )));
        }
        Ok(())
    }

    pub fn grid_for(&self, height: usize, width: usize) -> Result<PatchGrid, FeatureError> {
        let grid = PatchGrid::for_image(height, width, self.patch_px);
        if grid.rows < 2 || grid.cols < 2 {
            return Err(FeatureError::GridTooSmall {
                height,
                width,
                patch_px: self.patch_px,
            });
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesMeta {
    pub d_2d: usize,
    pub d_3d: usize,
    pub rows: usize,
    pub cols: usize,
    pub patch_px: usize,
    pub backbone: String,
    #[serde(default)]
    pub layer: Option<String>,
}

/// Single-channel plane fed to the toy extractor for one modality.
fn modality_plane(obs: &ViewObservation, modality: Modality) -> Array2<f64> {
    match modality {
        Modality::Image => obs
            .image
            .mean_axis(Axis(2))
            .expect("at least one channel")
            .mapv(|v| v as f64),
        Modality::Depth => {
            let valid = obs.depth.iter().copied().filter(|&d| d > 0.0);
            let (lo, hi) = valid.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), d| {
                (lo.min(d), hi.max(d))
            });
            let span = (hi - lo) as f64;
            obs.depth.mapv(|d| {
                if d > 0.0 && span > 0.0 {
                    (d - lo) as f64 / span
                } else if d > 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
        }
    }
}

/// Raw pixels followed by mean, standard deviation and gradient energy.
fn patch_descriptor(plane: ArrayView2<'_, f64>, grid: &PatchGrid, p: usize) -> Vec<f64> {
    let (r, c) = grid.cell(p);
    let s = grid.patch_px;
    let patch = plane.slice(ndarray::s![r * s..(r + 1) * s, c * s..(c + 1) * s]);
    let n = (s * s) as f64;
    let mut out: Vec<f64> = patch.iter().copied().collect();
    let mean = out.iter().sum::<f64>() / n;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut energy = 0.0;
    for y in 0..s {
        for x in 0..s {
            if x + 1 < s {
                energy += (patch[[y, x + 1]] - patch[[y, x]]).powi(2);
            }
            if y + 1 < s {
                energy += (patch[[y + 1, x]] - patch[[y, x]]).powi(2);
            }
        }
    }
    out.extend([mean, var.sqrt(), energy / (2.0 * s as f64 * (s as f64 - 1.0))]);
    out
}

const TOY_GAIN: f64 = 2.0;

fn toy_projection(seed: u64, modality: Modality, out_dim: usize, in_dim: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xA5A5_0000 + modality.index() as u64));
    let scale = TOY_GAIN / (in_dim as f64).sqrt();
    Array2::from_shape_simple_fn((out_dim, in_dim), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    })
}

fn toy_extract(
    seed: u64,
    dim: usize,
    grid: &PatchGrid,
    obs: &ViewObservation,
    modality: Modality,
) -> Array2<f64> {
    let plane = modality_plane(obs, modality);
    let in_dim = grid.patch_px * grid.patch_px + 3;
    let proj = toy_projection(seed, modality, dim, in_dim);
    let mut out = Array2::zeros((grid.len(), dim));
    for p in 0..grid.len() {
        let x = ndarray::Array1::from(patch_descriptor(plane.view(), grid, p));
        let y = proj.dot(&x).mapv(f64::tanh);
        out.row_mut(p).assign(&y);
    }
    out
}

pub fn precomputed_path(root: &Path, sample_id: &str, view_index: usize, m: Modality) -> PathBuf {
    root.join(sample_id)
        .join(format!("view_{view_index:02}_{}.ft32", m.tag()))
}

pub fn read_features_meta(root: &Path) -> Result<FeaturesMeta, FeatureError> {
    Ok(read_json(&root.join("features_meta.json"))?)
}

/// Extracts one `(view, modality)` map. `sample_id` locates precomputed files.
pub fn extract(
    spec: &ExtractorSpec,
    sample_id: &str,
    obs: &ViewObservation,
    modality: Modality,
) -> Result<FeatureMap, FeatureError> {
    spec.validate()?;
    let grid = spec.grid_for(obs.height(), obs.width())?;
    let dim = spec.dim(modality);
    let features = match &spec.kind {
        ExtractorKind::Toy { seed } => toy_extract(*seed, dim, &grid, obs, modality),
        ExtractorKind::Precomputed { root } => {
            let meta = read_features_meta(root)?;
            let found = PatchGrid::new(meta.rows, meta.cols, grid.patch_px);
            if (meta.rows, meta.cols) != (grid.rows, grid.cols) {
                return Err(FeatureError::GridMismatch {
                    expected: grid,
                    found,
                });
            }
            let path = precomputed_path(root, sample_id, obs.view_index, modality);
            let t = read_tensor(&path)?;
            match t.to_array2_f64() {
                Some(a) if a.dim() == (grid.len(), dim) => a,
                _ => {
                    return Err(FeatureError::Shape {
                        path,
                        expected: [grid.len(), dim],
                        found: t.shape().to_vec(),
                    })
                }
            }
        }
    };
    Ok(FeatureMap {
        view_index: obs.view_index,
        modality,
        grid,
        features,
        refined: false,
    })
}

/// Extracts both modalities for every view of a sample, in parallel over views.
pub fn extract_sample(spec: &ExtractorSpec, vs: &ViewSet) -> Result<FeatureSet, FeatureError> {
    spec.validate()?;
    let grid = spec.grid_for(vs.height(), vs.width())?;
    let maps = vs
        .views
        .par_iter()
        .map(|obs| {
            let a = extract(spec, &vs.sample_id, obs, Modality::Image)?.features;
            let b = extract(spec, &vs.sample_id, obs, Modality::Depth)?.features;
            Ok([a, b])
        })
        .collect::<Result<Vec<_>, FeatureError>>()?;
    Ok(FeatureSet::new(grid, maps))
}

/// Writes a sample's features in the precomputed layout.
pub fn write_precomputed(root: &Path, sample_id: &str, fs_: &FeatureSet) -> Result<(), FeatureError> {
    let dir = root.join(sample_id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for (v, pair) in fs_.maps.iter().enumerate() {
        for m in Modality::ALL {
            let path = precomputed_path(root, sample_id, v + 1, m);
            write_tensor(&path, &Tensor::from_array2_f64(&pair[m.index()]))?;
        }
    }
    Ok(())
}

pub fn write_features_meta(root: &Path, meta: &FeaturesMeta) -> Result<(), FeatureError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    Ok(write_json(&root.join("features_meta.json"), meta)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::tiny_view;
    use ndarray::Array3;

    fn obs(h: usize, w: usize) -> ViewObservation {
        let mut o = tiny_view(1, h, w);
        o.image = Array3::from_shape_fn((h, w, 1), |(y, x, _)| ((x * 7 + y * 13) % 17) as f32 / 17.0);
        o.depth = Array2::from_shape_fn((h, w), |(y, x)| 1.0 + ((x + 2 * y) % 5) as f32 * 0.1);
        o
    }

    #[test]
    fn zero_image_gives_identical_rows() {
        let mut o = obs(16, 16);
        o.image.fill(0.0);
        let spec = ExtractorSpec::toy(8, 4, 3);
        let fm = extract(&spec, "s", &o, Modality::Image).unwrap();
        let first = fm.features.row(0).to_owned();
        assert!(fm.features.rows().into_iter().all(|r| r == first));
    }

    #[test]
    fn deterministic() {
        let o = obs(16, 16);
        let spec = ExtractorSpec::toy(8, 4, 3);
        for m in Modality::ALL {
            assert_eq!(extract(&spec, "s", &o, m).unwrap(), extract(&spec, "s", &o, m).unwrap());
        }
    }

    #[test]
    fn locality_of_image_patches() {
        let o = obs(16, 16);
        let spec = ExtractorSpec::toy(8, 4, 3);
        let before = extract(&spec, "s", &o, Modality::Image).unwrap().features;
        let mut o2 = o.clone();
        // pixels inside patch (row 1, col 2) only
        for y in 4..8 {
            for x in 8..12 {
                o2.image[[y, x, 0]] = 0.9;
            }
        }
        let after = extract(&spec, "s", &o2, Modality::Image).unwrap().features;
        let changed = spec.grid_for(16, 16).unwrap().patch_of_pixel(9.0, 5.0).unwrap();
        for p in 0..16 {
            if p == changed {
                assert_ne!(before.row(p), after.row(p));
            } else {
                assert_eq!(before.row(p), after.row(p));
            }
        }
    }

    #[test]
    fn rows_bounded() {
        let o = obs(24, 16);
        let spec = ExtractorSpec::toy(6, 4, 11);
        for m in Modality::ALL {
            let f = extract(&spec, "s", &o, m).unwrap().features;
            assert_eq!(f.dim(), (24, 6));
            assert!(f.iter().all(|v| v.is_finite() && v.abs() < 1.0));
        }
    }

    #[test]
    fn grid_too_small() {
        let o = obs(6, 16);
        let spec = ExtractorSpec::toy(4, 4, 0);
        assert!(matches!(
            extract(&spec, "s", &o, Modality::Image),
            Err(FeatureError::GridTooSmall { .. })
        ));
    }

    #[test]
    fn precomputed_roundtrip_and_shape_errors() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let o = obs(16, 16);
        let toy = ExtractorSpec::toy(5, 4, 1);
        let grid = toy.grid_for(16, 16).unwrap();
        let a = extract(&toy, "s", &o, Modality::Image).unwrap().features;
        let b = extract(&toy, "s", &o, Modality::Depth).unwrap().features;
        let set = FeatureSet::new(grid, vec![[a, b]]);
        write_precomputed(root, "s", &set).unwrap();
        write_features_meta(
            root,
            &FeaturesMeta {
                d_2d: 5,
                d_3d: 5,
                rows: 4,
                cols: 4,
                patch_px: 4,
                backbone: "toy".into(),
                layer: None,
            },
        )
        .unwrap();
        let spec = ExtractorSpec {
            kind: ExtractorKind::Precomputed { root: root.to_path_buf() },
            d_2d: 5,
            d_3d: 5,
            patch_px: 4,
        };
        let fm = extract(&spec, "s", &o, Modality::Image).unwrap();
        let diff = (&fm.features - set.get(0, Modality::Image)).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-6));

        // wrong row count for the grid
        write_tensor(
            precomputed_path(root, "s", 1, Modality::Depth),
            &Tensor::zeros(vec![15, 5]),
        )
        .unwrap();
        assert!(matches!(
            extract(&spec, "s", &o, Modality::Depth),
            Err(FeatureError::Shape { .. })
        ));
        // missing file
        assert!(extract(&spec, "other", &o, Modality::Depth).is_err());
    }
}
