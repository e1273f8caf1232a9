//! Shared fixtures for the benchmarks.

use mvalign_core::features::{extract_sample, ExtractorSpec, FeatureSet};
use mvalign_core::synth::{render_viewset, SceneSpec};
use mvalign_core::{Label, ViewSet};

/// A rendered sphere ring with toy features.
pub struct Fixture {
    pub viewset: ViewSet,
    pub features: FeatureSet,
}

pub fn sphere_fixture(views: usize, resolution: usize, dim: usize, patch_px: usize) -> Fixture {
    let scene = SceneSpec::sphere(views, resolution);
    let viewset = render_viewset(&scene, None, "bench", Label::Normal).expect("valid scene");
    let features = extract_sample(&ExtractorSpec::toy(dim, patch_px, 0), &viewset).expect("valid extractor");
    Fixture { viewset, features }
}
