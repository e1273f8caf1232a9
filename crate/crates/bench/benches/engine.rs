use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use mvalign_bench::sphere_fixture;
use mvalign_core::contrastive::{sspa_loss, ContrastiveConfig};
use mvalign_core::correspondence::{compute_correspondences, CorrespondenceConfig};
use mvalign_core::refine::{refine, select_candidates, ProjectionParams, RefineOptions, SelectionConfig};
use mvalign_core::scoring::{build_bank, score_sample, BankSource, FusionMode, ScoringConfig};
use mvalign_core::training::{grad_params, TrainConfig, TrainSample};

fn refinement(c: &mut Criterion) {
    let fx = sphere_fixture(12, 128, 32, 8);
    let params = ProjectionParams::init(32, 32, false, 0).unwrap();
    let selection = SelectionConfig::default();
    c.bench_function("select_candidates 12x256 d32", |b| {
        b.iter(|| select_candidates(black_box(&fx.features), &selection).unwrap())
    });
    let cands = select_candidates(&fx.features, &selection).unwrap();
    c.bench_function("refine 12x256 d32 k8", |b| {
        b.iter(|| refine(black_box(&fx.features), &cands, &params, RefineOptions::default()).unwrap())
    });
}

fn losses(c: &mut Criterion) {
    let fx = sphere_fixture(12, 128, 32, 8);
    c.bench_function("sspa_loss 12x256 d32", |b| {
        b.iter(|| sspa_loss(black_box(&fx.features), &ContrastiveConfig::default()).unwrap())
    });
    let config = TrainConfig::default();
    let sample = TrainSample::prepare(&fx.viewset, fx.features.clone(), &config).unwrap();
    let params = ProjectionParams::init(32, 32, false, 0).unwrap();
    c.bench_function("grad_params 12x256 d32", |b| {
        b.iter(|| grad_params(black_box(&sample), &params, &config).unwrap())
    });
}

fn correspondences(c: &mut Criterion) {
    let fx = sphere_fixture(12, 128, 32, 8);
    let config = CorrespondenceConfig::default();
    c.bench_function("compute_correspondences 12 views 128px N2", |b| {
        b.iter(|| compute_correspondences(black_box(&fx.viewset), &fx.features.grid, &config).unwrap())
    });
}

fn scoring(c: &mut Criterion) {
    let train = sphere_fixture(12, 128, 32, 8);
    let test = sphere_fixture(12, 128, 32, 8);
    let source = BankSource {
        sample_id: "train",
        label: train.viewset.label,
        refined: &train.features,
    };
    let bank = build_bank(&[source], FusionMode::Fused, 1.0).unwrap();
    let config = ScoringConfig::default();
    c.bench_function("score_sample 12 views vs 3072-entry bank", |b| {
        b.iter(|| {
            score_sample("t", test.viewset.label, black_box(&test.features), &bank, 128, 128, &config).unwrap()
        })
    });
    c.bench_function("coreset 10% of 3072", |b| {
        b.iter(|| {
            let source = BankSource {
                sample_id: "train",
                label: train.viewset.label,
                refined: &train.features,
            };
            build_bank(&[source], FusionMode::Fused, 0.1).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = refinement, losses, correspondences, scoring
}
criterion_main!(benches);
