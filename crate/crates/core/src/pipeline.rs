//! End-to-end experiment runs: extraction, training, memory bank, scoring,
//! evaluation and ablation sweeps, plus the on-disk run-directory layout.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correspondence::CorrespondenceError;
use crate::dataset::{io_err, load_split, read_json, write_json, DataError, Label, ViewSet};
use crate::features::{
    extract_sample, write_features_meta, write_precomputed, ExtractorSpec, FeatureError, FeatureSet, FeaturesMeta,
};
use crate::metrics::{
    self, area_to_limit, auroc, pixel_auroc, pixel_pro_curve, point_auroc, point_pro_curve, project_scores_to_points,
    CategoryMetrics, EvalReport, LimitValue, MetricError,
};
use crate::refine::{refine, select_candidates, ProjectionParams, RefineError};
use crate::scoring::{build_bank, score_sample, AnomalyResult, BankSource, FusionMode, ScoringConfig, ScoringError};
use crate::synth::{read_manifest_entries, SynthError};
use crate::tensor::{read_tensor, TensorError};
use crate::training::{train, total_loss, LossTerms, TrainConfig, TrainError, TrainSample, TrainState};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("no {0} samples found")]
    Empty(&'static str),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Correspondence(#[from] CorrespondenceError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl PipelineError {
    /// Numerical failures (divergence, non-finite values) as opposed to bad
    /// inputs or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(self, PipelineError::Train(TrainError::NonFinite { .. }))
            || matches!(self, PipelineError::Tensor(TensorError::NonFinite { .. }))
    }

    pub fn is_config(&self) -> bool {
        matches!(
            self,
            PipelineError::Config(_)
                | PipelineError::Train(TrainError::Config(_))
                | PipelineError::Scoring(ScoringError::Ratio(_))
                | PipelineError::Feature(FeatureError::Spec(_))
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreOptions {
    pub sigma: f64,
    pub coreset_ratio: f64,
    /// Descriptor layouts to score; the first one is the headline result.
    pub modes: Vec<FusionMode>,
    pub heatmaps: bool,
    /// Score with identity projections instead of trained ones.
    pub identity_params: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            sigma: crate::scoring::DEFAULT_SIGMA,
            coreset_ratio: 1.0,
            modes: vec![FusionMode::Fused],
            heatmaps: false,
            identity_params: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub limits: Vec<f64>,
    pub voxel_size: f64,
    pub point_metrics: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            limits: metrics::DEFAULT_LIMITS.to_vec(),
            voxel_size: metrics::DEFAULT_VOXEL_SIZE,
            point_metrics: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory holding `train/` and `test/` splits.
    pub dataset: PathBuf,
    pub extractor: ExtractorSpec,
    pub train: TrainConfig,
    pub scoring: ScoreOptions,
    pub eval: EvalOptions,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            extractor: ExtractorSpec::toy(16, 8, 0),
            train: TrainConfig::default(),
            scoring: ScoreOptions::default(),
            eval: EvalOptions::default(),
            output: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.extractor.validate()?;
        self.train.validate()?;
        if self.extractor.d_2d != self.extractor.d_3d && self.train.lambda_sspa > 0.0 {
            return Err(PipelineError::Config(format!(
                "contrastive alignment needs equal modality dims, got d_2d={} d_3d={}",
                self.extractor.d_2d, self.extractor.d_3d
            )));
        }
        if self.scoring.modes.is_empty() {
            return Err(PipelineError::Config("at least one scoring mode is required".into()));
        }
        if !(self.scoring.coreset_ratio > 0.0 && self.scoring.coreset_ratio <= 1.0) {
            return Err(PipelineError::Config("coreset_ratio must lie in (0, 1]".into()));
        }
        if !(self.scoring.sigma >= 0.0) {
            return Err(PipelineError::Config("sigma must be non-negative".into()));
        }
        if let Some(l) = self.eval.limits.iter().find(|l| !(**l > 0.0 && **l <= 1.0)) {
            return Err(PipelineError::Config(format!("integration limit {l} outside (0, 1]")));
        }
        if !(self.eval.voxel_size > 0.0) {
            return Err(PipelineError::Config("voxel_size must be positive".into()));
        }
        Ok(())
    }
}

/// A loaded sample with its extracted (unrefined) features.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub viewset: ViewSet,
    pub features: FeatureSet,
}

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Vec<Prepared>,
    pub test: Vec<Prepared>,
    /// Defect kind per anomalous test sample, when the dataset lists it.
    pub categories: BTreeMap<String, String>,
}

pub fn load_data(dataset: &Path, extractor: &ExtractorSpec) -> Result<LoadedData, PipelineError> {
    let prepare = |sets: Vec<ViewSet>| -> Result<Vec<Prepared>, PipelineError> {
        sets.into_iter()
            .map(|viewset| {
                let features = extract_sample(extractor, &viewset)?;
                Ok(Prepared { viewset, features })
            })
            .collect()
    };
    let train = prepare(load_split(dataset.join("train"))?)?;
    let test = prepare(load_split(dataset.join("test"))?)?;
    if train.is_empty() {
        return Err(PipelineError::Empty("training"));
    }
    let categories = read_categories(dataset)?;
    Ok(LoadedData { train, test, categories })
}

/// Defect kind per anomalous sample, from the dataset manifest when present.
pub fn read_categories(dataset: &Path) -> Result<BTreeMap<String, String>, PipelineError> {
    if !dataset.join("dataset.json").exists() {
        return Ok(BTreeMap::new());
    }
    Ok(read_manifest_entries(dataset)?
        .into_iter()
        .filter_map(|e| {
            let kind = e.defect?.kind;
            let tag = serde_json::to_value(kind).ok()?.as_str()?.to_string();
            Some((e.sample_id, tag))
        })
        .collect())
}

/// Extracts features for every sample of both splits and writes them in the
/// precomputed layout under `root`. Returns the number of samples written.
pub fn export_features(dataset: &Path, extractor: &ExtractorSpec, root: &Path) -> Result<usize, PipelineError> {
    extractor.validate()?;
    let mut grid = None;
    let mut n = 0;
    for split in ["train", "test"] {
        for viewset in load_split(dataset.join(split))? {
            let features = extract_sample(extractor, &viewset)?;
            match grid {
                None => grid = Some(features.grid),
                Some(g) if g != features.grid => {
                    return Err(PipelineError::Config(format!(
                        "sample {} has a {}x{} grid, expected {}x{}",
                        viewset.sample_id, features.grid.rows, features.grid.cols, g.rows, g.cols
                    )))
                }
                Some(_) => {}
            }
            write_precomputed(root, &viewset.sample_id, &features)?;
            n += 1;
        }
    }
    let grid = grid.ok_or(PipelineError::Empty("dataset"))?;
    let backbone = match &extractor.kind {
        crate::features::ExtractorKind::Toy { seed } => format!("toy(seed={seed})"),
        crate::features::ExtractorKind::Precomputed { root } => format!("copy of {}", root.display()),
    };
    write_features_meta(
        root,
        &FeaturesMeta {
            d_2d: extractor.d_2d,
            d_3d: extractor.d_3d,
            rows: grid.rows,
            cols: grid.cols,
            patch_px: grid.patch_px,
            backbone,
            layer: None,
        },
    )?;
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub steps: usize,
    /// Mean geometric alignment loss over training samples before training.
    pub mvga_initial: f64,
    pub mvga_final: f64,
    pub total_initial: f64,
    pub total_final: f64,
}

fn mean_losses(samples: &[TrainSample], params: &ProjectionParams, config: &TrainConfig) -> Result<(f64, f64), PipelineError> {
    let mut mvga = 0.0;
    let mut total = 0.0;
    for s in samples {
        let l = total_loss(s, params, config)?;
        mvga += l.l_mvga;
        total += l.total;
    }
    let n = samples.len() as f64;
    Ok((mvga / n, total / n))
}

pub fn train_params(
    data: &[Prepared],
    config: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<(TrainState, TrainingSummary), PipelineError> {
    let samples = data
        .iter()
        .map(|p| TrainSample::prepare(&p.viewset, p.features.clone(), config))
        .collect::<Result<Vec<_>, _>>()?;
    let initial = crate::training::initial_params(
        samples[0].features.dim(crate::features::Modality::Image),
        samples[0].features.dim(crate::features::Modality::Depth),
        config,
    )?;
    let (mvga_initial, total_initial) = mean_losses(&samples, &initial, config)?;
    if config.lambda_sspa == 0.0 && config.lambda_mvga == 0.0 {
        log::warn!("both loss weights are zero; parameters will not change");
    }
    let state = train(&samples, config, log)?;
    let (mvga_final, total_final) = mean_losses(&samples, &state.params, config)?;
    let summary = TrainingSummary {
        steps: state.step,
        mvga_initial,
        mvga_final,
        total_initial,
        total_final,
    };
    Ok((state, summary))
}

/// Candidate selection and attention refinement of one sample.
pub fn refine_sample(features: &FeatureSet, params: &ProjectionParams, config: &TrainConfig) -> Result<FeatureSet, PipelineError> {
    let candidates = select_candidates(features, &config.selection())?;
    Ok(refine(features, &candidates, params, config.refine_options())?)
}

pub fn identity_params(features: &FeatureSet, config: &TrainConfig) -> Result<ProjectionParams, PipelineError> {
    Ok(ProjectionParams::identity(
        features.dim(crate::features::Modality::Image),
        features.dim(crate::features::Modality::Depth),
        config.shared_params,
    )?)
}

/// Builds the memory bank from the training split and scores the test split.
pub fn score_all(
    data: &LoadedData,
    params: &ProjectionParams,
    config: &ExperimentConfig,
    mode: FusionMode,
) -> Result<(crate::scoring::MemoryBank, Vec<AnomalyResult>), PipelineError> {
    let train_refined = data
        .train
        .iter()
        .map(|p| refine_sample(&p.features, params, &config.train))
        .collect::<Result<Vec<_>, _>>()?;
    let sources: Vec<BankSource<'_>> = data
        .train
        .iter()
        .zip(&train_refined)
        .map(|(p, r)| BankSource {
            sample_id: &p.viewset.sample_id,
            label: p.viewset.label,
            refined: r,
        })
        .collect();
    let bank = build_bank(&sources, mode, config.scoring.coreset_ratio)?;
    let scoring = ScoringConfig {
        sigma: config.scoring.sigma,
    };
    let results = data
        .test
        .iter()
        .map(|p| {
            let refined = refine_sample(&p.features, params, &config.train)?;
            Ok(score_sample(
                &p.viewset.sample_id,
                p.viewset.label,
                &refined,
                &bank,
                p.viewset.height(),
                p.viewset.width(),
                &scoring,
            )?)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok((bank, results))
}

/// Per-view anomaly maps of one scored sample, as plain views.
fn map_views(r: &AnomalyResult) -> Vec<ArrayView2<'_, f64>> {
    r.views.iter().map(|v| v.map.view()).collect()
}

pub fn evaluate(
    results: &[AnomalyResult],
    test: &[ViewSet],
    categories: &BTreeMap<String, String>,
    options: &EvalOptions,
) -> Result<EvalReport, PipelineError> {
    if results.is_empty() {
        return Err(PipelineError::Empty("test"));
    }
    let by_id: BTreeMap<&str, &ViewSet> = test.iter().map(|v| (v.sample_id.as_str(), v)).collect();
    let labelled: Vec<(&AnomalyResult, &ViewSet)> = results
        .iter()
        .filter(|r| r.label != Label::Unknown)
        .map(|r| {
            by_id
                .get(r.sample_id.as_str())
                .map(|v| (r, *v))
                .ok_or_else(|| PipelineError::Config(format!("no test sample {}", r.sample_id)))
        })
        .collect::<Result<_, _>>()?;
    let scores: Vec<f64> = labelled.iter().map(|(r, _)| r.score).collect();
    let labels: Vec<bool> = labelled.iter().map(|(r, _)| r.label == Label::Anomalous).collect();
    let i_auroc = auroc(&scores, &labels)?;

    let masks_available = labelled
        .iter()
        .all(|(_, v)| v.views.iter().all(|o| o.gt_mask.is_some()));
    let mut maps = Vec::new();
    let mut masks = Vec::new();
    if masks_available {
        for (r, v) in &labelled {
            maps.extend(map_views(r));
            masks.extend(v.views.iter().map(|o| o.gt_mask.as_ref().expect("checked").view()));
        }
    }
    let any_defect = masks.iter().any(|m| m.iter().any(|&x| x != 0.0));
    let n_pixels = maps.iter().map(|m| m.len()).sum();
    let (p_auroc, aupro) = if any_defect {
        let curve = pixel_pro_curve(&maps, &masks)?;
        let aupro = options
            .limits
            .iter()
            .map(|&limit| Ok(LimitValue { limit, value: area_to_limit(&curve, limit)? }))
            .collect::<Result<Vec<_>, MetricError>>()?;
        (Some(pixel_auroc(&maps, &masks)?), aupro)
    } else {
        (None, Vec::new())
    };

    let (pv_auroc, pv_aupro, n_points) = if any_defect && options.point_metrics {
        let clouds = labelled
            .iter()
            .map(|(r, v)| project_scores_to_points(v, &map_views(r), options.voxel_size))
            .collect::<Result<Vec<_>, _>>()?;
        let n_points = clouds.iter().map(|c| c.points.len()).sum();
        let curve = point_pro_curve(&clouds)?;
        let values = options
            .limits
            .iter()
            .map(|&limit| Ok(LimitValue { limit, value: area_to_limit(&curve, limit)? }))
            .collect::<Result<Vec<_>, MetricError>>()?;
        (Some(point_auroc(&clouds)?), values, n_points)
    } else {
        (None, Vec::new(), 0)
    };

    let mut per_category = BTreeMap::new();
    let kinds: std::collections::BTreeSet<&String> = categories.values().collect();
    for kind in kinds {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for (r, _) in &labelled {
            let in_kind = categories.get(&r.sample_id) == Some(kind);
            if r.label == Label::Normal || in_kind {
                s.push(r.score);
                l.push(in_kind);
            }
        }
        let n_anomalous = l.iter().filter(|&&b| b).count();
        per_category.insert(
            kind.clone(),
            CategoryMetrics {
                n_normal: l.len() - n_anomalous,
                n_anomalous,
                i_auroc: auroc(&s, &l).ok(),
            },
        );
    }

    Ok(EvalReport {
        i_auroc,
        p_auroc,
        aupro,
        pv_aupro,
        pv_auroc,
        voxel_size: options.voxel_size,
        voxel_connectivity: 6,
        n_samples: labelled.len(),
        n_pixels,
        n_points,
        per_category,
    })
}

/// Everything produced by one in-memory experiment run.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub params: ProjectionParams,
    pub training: Option<TrainingSummary>,
    pub history: Vec<crate::training::StepLog>,
    /// Keyed by scoring mode tag, in the order of `config.scoring.modes`.
    pub results: Vec<(FusionMode, crate::scoring::MemoryBank, Vec<AnomalyResult>)>,
    pub reports: BTreeMap<String, EvalReport>,
}

impl ExperimentOutcome {
    pub fn report(&self, mode: FusionMode) -> Option<&EvalReport> {
        self.reports.get(mode.tag())
    }
}

pub fn run_experiment(config: &ExperimentConfig, data: &LoadedData) -> Result<ExperimentOutcome, PipelineError> {
    config.validate()?;
    if config.scoring.identity_params {
        let params = identity_params(&data.train[0].features, &config.train)?;
        return score_and_evaluate(config, data, params, None, Vec::new());
    }
    let (state, summary) = train_params(&data.train, &config.train, None)?;
    score_and_evaluate(config, data, state.params, Some(summary), state.history)
}

/// Scores and evaluates the test split with fixed parameters.
pub fn score_and_evaluate(
    config: &ExperimentConfig,
    data: &LoadedData,
    params: ProjectionParams,
    training: Option<TrainingSummary>,
    history: Vec<crate::training::StepLog>,
) -> Result<ExperimentOutcome, PipelineError> {
    let mut results = Vec::new();
    let mut reports = BTreeMap::new();
    let test_sets: Vec<ViewSet> = data.test.iter().map(|p| p.viewset.clone()).collect();
    for &mode in &config.scoring.modes {
        let (bank, scored) = score_all(data, &params, config, mode)?;
        let report = evaluate(&scored, &test_sets, &data.categories, &config.eval)?;
        reports.insert(mode.tag().to_string(), report);
        results.push((mode, bank, scored));
    }
    Ok(ExperimentOutcome {
        params,
        training,
        history,
        results,
        reports,
    })
}

/// Full run that also writes every artifact into `dir`: config snapshot,
/// parameters, training log, banks, scores, reports and PRO curves.
pub fn run_and_write(config: &ExperimentConfig, data: &LoadedData, dir: &Path) -> Result<ExperimentOutcome, PipelineError> {
    config.validate()?;
    write_snapshot(dir, CONFIG_FILE, config)?;
    let outcome = if config.scoring.identity_params {
        let params = identity_params(&data.train[0].features, &config.train)?;
        score_and_evaluate(config, data, params, None, Vec::new())?
    } else {
        let (state, summary) = write_training(dir, data, &config.train)?;
        score_and_evaluate(config, data, state.params, Some(summary), state.history)?
    };
    write_scores(dir, &outcome.results, config.scoring.heatmaps)?;
    write_reports(dir, &outcome.reports)?;
    let scored: Vec<(FusionMode, &[AnomalyResult])> =
        outcome.results.iter().map(|(m, _, r)| (*m, r.as_slice())).collect();
    let test_sets: Vec<ViewSet> = data.test.iter().map(|p| p.viewset.clone()).collect();
    write_curves(dir, &scored, &test_sets)?;
    Ok(outcome)
}

// Run directory layout.

pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_DIR: &str = "params";
pub const TRAIN_LOG: &str = "log.jsonl";
pub const TRAIN_SUMMARY: &str = "train_summary.json";
pub const EVAL_FILE: &str = "eval.json";

/// Refuses to reuse a non-empty path unless `force` is set.
pub fn guard_output(path: &Path, force: bool) -> Result<(), PipelineError> {
    let occupied = match std::fs::read_dir(path) {
        Ok(mut entries) => entries.next().is_some(),
        Err(_) => path.exists(),
    };
    if occupied && !force {
        return Err(PipelineError::Exists(path.to_path_buf()));
    }
    Ok(())
}

pub fn write_snapshot<T: Serialize>(dir: &Path, name: &str, config: &T) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join(name), config)?;
    Ok(())
}

pub fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    Ok(read_json(path)?)
}

/// Trains and writes `params/`, the JSONL log and a summary into `dir`.
pub fn write_training(
    dir: &Path,
    data: &LoadedData,
    config: &TrainConfig,
) -> Result<(TrainState, TrainingSummary), PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let log_path = dir.join(TRAIN_LOG);
    let file = File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log = BufWriter::new(file);
    let (state, summary) = train_params(&data.train, config, Some(&mut log))?;
    log.flush().map_err(io_err(&log_path))?;
    state.params.save(&dir.join(PARAMS_DIR))?;
    write_json(&dir.join(TRAIN_SUMMARY), &summary)?;
    Ok((state, summary))
}

fn mode_dir(dir: &Path, mode: FusionMode) -> PathBuf {
    dir.join(format!("scores_{}", mode.tag()))
}

/// Writes banks and per-sample results for every scored mode.
pub fn write_scores(dir: &Path, outcome_results: &[(FusionMode, crate::scoring::MemoryBank, Vec<AnomalyResult>)], heatmaps: bool) -> Result<(), PipelineError> {
    for (mode, bank, results) in outcome_results {
        let base = mode_dir(dir, *mode);
        bank.save(&base.join("bank"))?;
        for r in results {
            r.save(&base.join(&r.sample_id), heatmaps)?;
        }
        let summary: Vec<_> = results.iter().map(|r| r.summary()).collect();
        write_json(&base.join("scores.json"), &summary)?;
    }
    Ok(())
}

/// Reads per-sample results written by [`write_scores`]. Patch scores are
/// not stored and come back empty.
pub fn read_scores(dir: &Path, mode: FusionMode) -> Result<Vec<AnomalyResult>, PipelineError> {
    let base = mode_dir(dir, mode);
    let summary: Vec<crate::scoring::SampleScores> = read_json(&base.join("scores.json"))?;
    summary
        .into_iter()
        .map(|s| {
            let views = s
                .view_scores
                .iter()
                .enumerate()
                .map(|(k, &score)| {
                    let path = base.join(&s.sample_id).join(format!("view_{:02}_map.ft32", k + 1));
                    let map = read_tensor(&path)?.to_array2_f64().ok_or_else(|| {
                        PipelineError::Config(format!("{} is not a 2-D map", path.display()))
                    })?;
                    Ok(crate::scoring::ViewAnomaly {
                        view_index: k + 1,
                        patch_scores: Vec::new(),
                        map,
                        score,
                    })
                })
                .collect::<Result<Vec<_>, PipelineError>>()?;
            Ok(AnomalyResult {
                sample_id: s.sample_id,
                label: s.label,
                views,
                score: s.score,
            })
        })
        .collect()
}

pub fn write_reports(dir: &Path, reports: &BTreeMap<String, EvalReport>) -> Result<(), PipelineError> {
    write_json(&dir.join(EVAL_FILE), reports)?;
    Ok(())
}

/// Writes `curve_<mode>.csv` pixel PRO curves next to the reports.
pub fn write_curves(dir: &Path, results: &[(FusionMode, &[AnomalyResult])], test: &[ViewSet]) -> Result<(), PipelineError> {
    let by_id: BTreeMap<&str, &ViewSet> = test.iter().map(|v| (v.sample_id.as_str(), v)).collect();
    for (mode, scored) in results {
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for r in scored.iter() {
            let Some(v) = by_id.get(r.sample_id.as_str()) else { continue };
            for (a, o) in r.views.iter().zip(&v.views) {
                if let Some(m) = &o.gt_mask {
                    maps.push(a.map.view());
                    masks.push(m.view());
                }
            }
        }
        if let Ok(curve) = pixel_pro_curve(&maps, &masks) {
            metrics::write_curve_csv(&dir.join(format!("curve_{}.csv", mode.tag())), &curve)?;
        }
    }
    Ok(())
}

// Ablation sweeps.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    K,
    N,
    Losses,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "k" => Ok(SweepAxis::K),
            "n" => Ok(SweepAxis::N),
            "losses" | "loss" => Ok(SweepAxis::Losses),
            other => Err(format!("unknown sweep axis {other:?}; expected k, n or losses")),
        }
    }
}

pub const SWEEP_K: [usize; 5] = [2, 4, 6, 8, 10];
pub const SWEEP_N: [usize; 4] = [1, 2, 3, 4];
pub const SWEEP_LOSSES: [(&str, LossTerms); 4] = [
    ("sspa_baseline", LossTerms { view: false, diff: false }),
    ("+view", LossTerms { view: true, diff: false }),
    ("+diff", LossTerms { view: false, diff: true }),
    ("+view+diff", LossTerms { view: true, diff: true }),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub k: usize,
    pub neighbors: usize,
    pub use_view: bool,
    pub use_diff: bool,
    pub i_auroc: f64,
    pub p_auroc: Option<f64>,
    pub aupro: Vec<LimitValue>,
    #[serde(rename = "pV-AUPRO")]
    pub pv_aupro: Vec<LimitValue>,
    pub mvga_initial: Option<f64>,
    pub mvga_final: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

pub fn sweep_configs(base: &ExperimentConfig, axis: SweepAxis) -> Vec<(String, ExperimentConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c.train);
        c
    };
    match axis {
        SweepAxis::K => SWEEP_K
            .iter()
            .map(|&k| (format!("k={k}"), with(&|t| t.k = k)))
            .collect(),
        SweepAxis::N => SWEEP_N
            .iter()
            .map(|&n| (format!("N={n}"), with(&|t| t.neighbors = n)))
            .collect(),
        SweepAxis::Losses => SWEEP_LOSSES
            .iter()
            .map(|(name, terms)| (name.to_string(), with(&|t| t.terms = *terms)))
            .collect(),
    }
}

pub fn run_sweep(base: &ExperimentConfig, data: &LoadedData, axis: SweepAxis) -> Result<SweepTable, PipelineError> {
    let mut rows = Vec::new();
    for (setting, cfg) in sweep_configs(base, axis) {
        log::info!("sweep {setting}");
        let outcome = run_experiment(&cfg, data)?;
        let mode = cfg.scoring.modes[0];
        let report = outcome.report(mode).expect("first mode is scored");
        rows.push(SweepRow {
            setting,
            k: cfg.train.k,
            neighbors: cfg.train.neighbors,
            use_view: cfg.train.terms.view,
            use_diff: cfg.train.terms.diff,
            i_auroc: report.i_auroc,
            p_auroc: report.p_auroc,
            aupro: report.aupro.clone(),
            pv_aupro: report.pv_aupro.clone(),
            mvga_initial: outcome.training.as_ref().map(|t| t.mvga_initial),
            mvga_final: outcome.training.as_ref().map(|t| t.mvga_final),
        });
    }
    Ok(SweepTable { axis, rows })
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let limits: Vec<f64> = self.rows.first().map(|r| r.aupro.iter().map(|l| l.limit).collect()).unwrap_or_default();
        let mut header = vec![
            "setting".to_string(),
            "k".into(),
            "neighbors".into(),
            "use_view".into(),
            "use_diff".into(),
            "i_auroc".into(),
            "p_auroc".into(),
        ];
        header.extend(limits.iter().map(|l| format!("aupro@{l}")));
        header.extend(limits.iter().map(|l| format!("pV-AUPRO@{l}")));
        let mut out = header.join(",") + "\n";
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let mut cells = vec![
                r.setting.clone(),
                r.k.to_string(),
                r.neighbors.to_string(),
                r.use_view.to_string(),
                r.use_diff.to_string(),
                r.i_auroc.to_string(),
                opt(r.p_auroc),
            ];
            let lookup = |vals: &[LimitValue], l: f64| opt(vals.iter().find(|v| v.limit == l).map(|v| v.value));
            cells.extend(limits.iter().map(|&l| lookup(&r.aupro, l)));
            cells.extend(limits.iter().map(|&l| lookup(&r.pv_aupro, l)));
            out += &(cells.join(",") + "\n");
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let stem = match self.axis {
            SweepAxis::K => "sweep_k",
            SweepAxis::N => "sweep_n",
            SweepAxis::Losses => "sweep_losses",
        };
        write_json(&dir.join(format!("{stem}.json")), self)?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(io_err(&csv))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, DatasetPlan, DefectPlan, SceneSpec};

    fn tiny_dataset(dir: &Path) {
        let scene = SceneSpec::sphere(4, 32);
        let plan = DatasetPlan {
            n_train: 1,
            n_test_normal: 2,
            n_anomalous: 2,
        };
        generate_dataset(&scene, &plan, &DefectPlan::default(), dir, 3).unwrap();
    }

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            dataset: dir.to_path_buf(),
            extractor: ExtractorSpec::toy(4, 8, 1),
            train: TrainConfig {
                steps: 3,
                k: 2,
                neighbors: 1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn sweep_row_sets() {
        let base = ExperimentConfig::default();
        let ks: Vec<usize> = sweep_configs(&base, SweepAxis::K).iter().map(|(_, c)| c.train.k).collect();
        assert_eq!(ks, vec![2, 4, 6, 8, 10]);
        let ns: Vec<usize> = sweep_configs(&base, SweepAxis::N).iter().map(|(_, c)| c.train.neighbors).collect();
        assert_eq!(ns, vec![1, 2, 3, 4]);
        let losses: Vec<(bool, bool)> = sweep_configs(&base, SweepAxis::Losses)
            .iter()
            .map(|(_, c)| (c.train.terms.view, c.train.terms.diff))
            .collect();
        assert_eq!(losses, vec![(false, false), (true, false), (false, true), (true, true)]);
        assert_eq!("N".parse::<SweepAxis>().unwrap(), SweepAxis::N);
        assert!("depth".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn end_to_end_small_run() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let mut cfg = tiny_config(dir.path());
        cfg.scoring.modes = FusionMode::ALL.to_vec();
        let data = load_data(&cfg.dataset, &cfg.extractor).unwrap();
        assert_eq!((data.train.len(), data.test.len()), (1, 4));
        assert_eq!(data.categories.len(), 2);
        let out = run_experiment(&cfg, &data).unwrap();
        assert_eq!(out.reports.len(), 3);
        let r = out.report(FusionMode::Fused).unwrap();
        assert!((0.0..=1.0).contains(&r.i_auroc));
        assert_eq!(r.aupro.len(), 2);
        assert_eq!(r.pv_aupro.len(), 2);
        assert_eq!(r.n_samples, 4);

        let run = dir.path().join("run");
        write_scores(&run, &out.results, true).unwrap();
        let back = read_scores(&run, FusionMode::Fused).unwrap();
        assert_eq!(back.len(), 4);
        let test: Vec<ViewSet> = data.test.iter().map(|p| p.viewset.clone()).collect();
        let again = evaluate(&back, &test, &data.categories, &cfg.eval).unwrap();
        assert_eq!(again.i_auroc, r.i_auroc);
    }

    #[test]
    fn perfect_scores_give_unit_auroc() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let cfg = tiny_config(dir.path());
        let data = load_data(&cfg.dataset, &cfg.extractor).unwrap();
        let test: Vec<ViewSet> = data.test.iter().map(|p| p.viewset.clone()).collect();
        // oracle: maps equal to the ground-truth masks
        let results: Vec<AnomalyResult> = test
            .iter()
            .map(|v| {
                let views: Vec<_> = v
                    .views
                    .iter()
                    .map(|o| {
                        let map = o.gt_mask.as_ref().unwrap().mapv(f64::from);
                        let score = map.iter().copied().fold(0.0, f64::max);
                        crate::scoring::ViewAnomaly {
                            view_index: o.view_index,
                            patch_scores: vec![],
                            map,
                            score,
                        }
                    })
                    .collect();
                let score = views.iter().map(|x| x.score).fold(0.0, f64::max);
                AnomalyResult {
                    sample_id: v.sample_id.clone(),
                    label: v.label,
                    views,
                    score,
                }
            })
            .collect();
        let r = evaluate(&results, &test, &data.categories, &cfg.eval).unwrap();
        assert_eq!(r.i_auroc, 1.0);
        assert_eq!(r.p_auroc, Some(1.0));
        assert!(r.aupro.iter().all(|v| (v.value - 1.0).abs() < 1e-12), "{:?}", r.aupro);
    }

    #[test]
    fn exported_features_load_back() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let toy = ExtractorSpec::toy(4, 8, 1);
        let root = dir.path().join("feats");
        assert_eq!(export_features(dir.path(), &toy, &root).unwrap(), 5);
        let pre = ExtractorSpec {
            kind: crate::features::ExtractorKind::Precomputed { root: root.clone() },
            ..toy.clone()
        };
        let a = load_data(dir.path(), &toy).unwrap();
        let b = load_data(dir.path(), &pre).unwrap();
        for (x, y) in a.test.iter().zip(&b.test) {
            for (mx, my) in x.features.maps.iter().zip(&y.features.maps) {
                for m in 0..2 {
                    // stored as f32
                    assert_eq!(mx[m].mapv(|v| v as f32 as f64), my[m]);
                }
            }
        }
    }

    #[test]
    fn guard_refuses_non_empty_dirs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(guard_output(dir.path(), false).is_ok());
        std::fs::write(dir.path().join("x"), b"1").unwrap();
        assert!(matches!(guard_output(dir.path(), false), Err(PipelineError::Exists(_))));
        assert!(guard_output(dir.path(), true).is_ok());
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"train": {"k": 4}}"#).unwrap();
        assert_eq!(partial.train.k, 4);
        assert_eq!(partial.train.neighbors, 2);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"trian": {}}"#).is_err());
        let mut bad = cfg.clone();
        bad.extractor.d_3d = 8;
        assert!(matches!(bad.validate(), Err(PipelineError::Config(_))));
    }
}
