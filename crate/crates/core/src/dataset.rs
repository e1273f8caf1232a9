//! Multi-view samples and their directory layout.
//!
//! ```text
//! <sample_id>/meta.json                 {"sample_id", "label", "n_views"}
//! <sample_id>/view_<kk>/image.ft32      H×W×C intensities in [0,1]
//! <sample_id>/view_<kk>/depth.ft32      H×W camera depth, 0 = no return
//! <sample_id>/view_<kk>/camera.json     fx, fy, cx, cy, rotation[9], translation[3]
//! <sample_id>/view_<kk>/mask.ft32       optional H×W {0,1}
//! ```
//! View directories are numbered from 1 and zero-padded to two digits.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraModel;
use crate::tensor::{read_tensor, write_tensor, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{dir}: missing view {index:02}")]
    MissingView { dir: PathBuf, index: usize },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{context}: dimension mismatch, expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid sample: {0}")]
    Invalid(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewObservation {
    /// 1-based position in the capture sequence.
    pub view_index: usize,
    /// H×W×C intensities.
    pub image: Array3<f32>,
    /// H×W camera-frame depth; 0 marks pixels without a return.
    pub depth: Array2<f32>,
    pub camera: CameraModel,
    pub gt_mask: Option<Array2<f32>>,
}

impl ViewObservation {
    pub fn height(&self) -> usize {
        self.depth.nrows()
    }

    pub fn width(&self) -> usize {
        self.depth.ncols()
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (h, w) = self.depth.dim();
        let ish = self.image.shape();
        if ish[0] != h || ish[1] != w {
            return Err(DataError::DimensionMismatch {
                context: format!("view {} image vs depth", self.view_index),
                expected: vec![h, w],
                found: vec![ish[0], ish[1]],
            });
        }
        if self.depth.iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(DataError::Invalid(format!(
                "view {} has negative or non-finite depth",
                self.view_index
            )));
        }
        if let Some(mask) = &self.gt_mask {
            if mask.dim() != (h, w) {
                return Err(DataError::DimensionMismatch {
                    context: format!("view {} mask vs depth", self.view_index),
                    expected: vec![h, w],
                    found: mask.shape().to_vec(),
                });
            }
            if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
                return Err(DataError::Invalid(format!(
                    "view {} mask is not binary",
                    self.view_index
                )));
            }
        }
        Ok(())
    }

    pub fn has_defect_pixels(&self) -> bool {
        self.gt_mask
            .as_ref()
            .is_some_and(|m| m.iter().any(|&v| v > 0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub sample_id: String,
    pub views: Vec<ViewObservation>,
    pub label: Label,
}

impl ViewSet {
    pub fn new(sample_id: String, views: Vec<ViewObservation>, label: Label) -> Result<Self, DataError> {
        let vs = Self {
            sample_id,
            views,
            label,
        };
        vs.validate()?;
        Ok(vs)
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn height(&self) -> usize {
        self.views[0].height()
    }

    pub fn width(&self) -> usize {
        self.views[0].width()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let Some(first) = self.views.first() else {
            return Err(DataError::Invalid(format!("{} has no views", self.sample_id)));
        };
        let dims = [first.height(), first.width(), first.channels()];
        for (k, view) in self.views.iter().enumerate() {
            if view.view_index != k + 1 {
                return Err(DataError::Invalid(format!(
                    "{}: view indices must be 1..I in order, found {} at position {}",
                    self.sample_id,
                    view.view_index,
                    k + 1
                )));
            }
            view.validate()?;
            let d = [view.height(), view.width(), view.channels()];
            if d != dims {
                return Err(DataError::DimensionMismatch {
                    context: format!("{} view {}", self.sample_id, view.view_index),
                    expected: dims.to_vec(),
                    found: d.to_vec(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: String,
    pub label: Label,
    pub n_views: usize,
}

pub fn view_dir_name(index: usize) -> String {
    format!("view_{index:02}")
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_viewset(dir: impl AsRef<Path>) -> Result<ViewSet, DataError> {
    let dir = dir.as_ref();
    let meta: SampleMeta = read_json(&dir.join("meta.json"))?;
    let mut views = Vec::with_capacity(meta.n_views);
    for index in 1..=meta.n_views {
        let vdir = dir.join(view_dir_name(index));
        if !vdir.is_dir() {
            return Err(DataError::MissingView {
                dir: dir.to_path_buf(),
                index,
            });
        }
        let image_t = read_tensor(vdir.join("image.ft32"))?;
        let image = match image_t.shape() {
            [_, _, _] => image_t.to_array3(),
            [h, w] => Array3::from_shape_vec((*h, *w, 1), image_t.data().to_vec()).ok(),
            _ => None,
        }
        .ok_or_else(|| DataError::DimensionMismatch {
            context: format!("{} image rank", vdir.display()),
            expected: vec![3],
            found: vec![image_t.shape().len()],
        })?;
        let depth_t = read_tensor(vdir.join("depth.ft32"))?;
        let depth = depth_t.to_array2().ok_or_else(|| DataError::DimensionMismatch {
            context: format!("{} depth rank", vdir.display()),
            expected: vec![2],
            found: vec![depth_t.shape().len()],
        })?;
        let camera: CameraModel = read_json(&vdir.join("camera.json"))?;
        let mask_path = vdir.join("mask.ft32");
        let gt_mask = if mask_path.exists() {
            let t = read_tensor(&mask_path)?;
            Some(t.to_array2().ok_or_else(|| DataError::DimensionMismatch {
                context: format!("{} mask rank", vdir.display()),
                expected: vec![2],
                found: vec![t.shape().len()],
            })?)
        } else {
            None
        };
        views.push(ViewObservation {
            view_index: index,
            image,
            depth,
            camera,
            gt_mask,
        });
    }
    ViewSet::new(meta.sample_id, views, meta.label)
}

pub fn save_viewset(dir: impl AsRef<Path>, vs: &ViewSet) -> Result<(), DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(
        &dir.join("meta.json"),
        &SampleMeta {
            sample_id: vs.sample_id.clone(),
            label: vs.label,
            n_views: vs.len(),
        },
    )?;
    for view in &vs.views {
        let vdir = dir.join(view_dir_name(view.view_index));
        fs::create_dir_all(&vdir).map_err(io_err(&vdir))?;
        write_tensor(vdir.join("image.ft32"), &Tensor::from_array3(&view.image))?;
        write_tensor(vdir.join("depth.ft32"), &Tensor::from_array2(&view.depth))?;
        write_json(&vdir.join("camera.json"), &view.camera)?;
        if let Some(mask) = &view.gt_mask {
            write_tensor(vdir.join("mask.ft32"), &Tensor::from_array2(mask))?;
        }
    }
    Ok(())
}

/// Loads every sample directory (one containing `meta.json`) under `dir`,
/// ordered by directory name.
pub fn load_split(dir: impl AsRef<Path>) -> Result<Vec<ViewSet>, DataError> {
    let dir = dir.as_ref();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    entries.sort();
    entries.iter().map(load_viewset).collect()
}
