//! Multimodal multi-view anomaly detection.
//!
//! Patch features from every view and modality are refined by attending over
//! the top-k most similar patches of adjacent views, trained with a
//! cross-modal contrastive objective plus a geometric consistency penalty at
//! calibrated cross-view correspondences, and scored against a memory bank
//! of normal features by nearest-neighbor distance.

pub mod camera;
pub mod contrastive;
pub mod correspondence;
pub mod dataset;
pub mod features;
pub mod grid;
pub mod metrics;
pub mod pipeline;
pub mod refine;
pub mod scoring;
pub mod synth;
pub mod tensor;
pub mod training;

pub use camera::CameraModel;
pub use dataset::{load_split, load_viewset, save_viewset, Label, ViewObservation, ViewSet};
pub use grid::PatchGrid;
pub use tensor::{read_tensor, write_tensor, Tensor};
