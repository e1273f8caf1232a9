//! Optimization of the projection matrices on normal samples.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contrastive::{sspa_forward_backward, AlignError, AlignmentLossReport, ContrastiveConfig, TermWeights};
use crate::correspondence::{
    compute_correspondences, mvga_forward_backward, mvga_loss, CorrespondenceConfig, CorrespondenceError,
    CorrespondenceSet,
};
use crate::dataset::ViewSet;
use crate::features::{FeatureSet, Modality};
use crate::refine::{
    refine, refine_backward, select_candidates, CandidateSet, ProjectionParams, RefineError, RefineOptions,
    SelectionConfig,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training samples")]
    NoSamples,
    #[error("loss became non-finite at step {step} (sample {sample})")]
    NonFinite { step: usize, sample: String },
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Correspondence(#[from] CorrespondenceError),
    #[error("writing training log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Gd,
}

/// Which semantic alignment terms enter the objective. The geometric term
/// is governed by its weight alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub view: bool,
    pub diff: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self { view: true, diff: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub k: usize,
    pub neighbors: usize,
    pub lambda_sspa: f64,
    pub lambda_mvga: f64,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub terms: LossTerms,
    pub shared_params: bool,
    pub residual: bool,
    pub normalize_rows: bool,
    pub cyclic: bool,
    pub depth_tol: f64,
    pub min_view_cos: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let corr = CorrespondenceConfig::default();
        Self {
            alpha: crate::refine::DEFAULT_ALPHA,
            k: crate::refine::DEFAULT_K,
            neighbors: corr.neighbors,
            lambda_sspa: 1.0,
            lambda_mvga: 2.0,
            steps: 200,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            terms: LossTerms::default(),
            shared_params: false,
            residual: false,
            normalize_rows: true,
            cyclic: true,
            depth_tol: corr.depth_tol,
            min_view_cos: corr.min_view_cos,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if !(self.lambda_sspa >= 0.0 && self.lambda_mvga >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.neighbors == 0 {
            return bad("neighbor count must be at least 1");
        }
        if !(self.depth_tol > 0.0) {
            return bad("depth tolerance must be positive");
        }
        if !(0.0..1.0).contains(&self.min_view_cos) {
            return bad("min_view_cos must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            alpha: self.alpha,
            k: self.k,
            cyclic: self.cyclic,
        }
    }

    pub fn correspondence(&self) -> CorrespondenceConfig {
        CorrespondenceConfig {
            neighbors: self.neighbors,
            depth_tol: self.depth_tol,
            cyclic: self.cyclic,
            min_view_cos: self.min_view_cos,
        }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            normalize_rows: self.normalize_rows,
        }
    }

    pub fn refine_options(&self) -> RefineOptions {
        RefineOptions { residual: self.residual }
    }

    fn term_weights(&self) -> TermWeights {
        TermWeights {
            view: if self.terms.view { self.lambda_sspa } else { 0.0 },
            diff: if self.terms.diff { self.lambda_sspa } else { 0.0 },
        }
    }
}

/// A training sample with its parameter-free structures computed once.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub sample_id: String,
    pub features: FeatureSet,
    pub candidates: CandidateSet,
    pub correspondences: CorrespondenceSet,
}

impl TrainSample {
    pub fn prepare(viewset: &ViewSet, features: FeatureSet, config: &TrainConfig) -> Result<Self, TrainError> {
        let candidates = select_candidates(&features, &config.selection())?;
        let correspondences = compute_correspondences(viewset, &features.grid, &config.correspondence())?;
        Ok(Self {
            sample_id: viewset.sample_id.clone(),
            features,
            candidates,
            correspondences,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub alignment: AlignmentLossReport,
    pub l_mvga: f64,
    /// Weighted objective over the enabled terms.
    pub total: f64,
}

fn compose(config: &TrainConfig, alignment: AlignmentLossReport, l_mvga: f64) -> LossBreakdown {
    let w = config.term_weights();
    let total = w.view * alignment.l_view + w.diff * alignment.l_diff.unwrap_or(0.0) + config.lambda_mvga * l_mvga;
    LossBreakdown {
        alignment,
        l_mvga,
        total,
    }
}

pub fn total_loss(
    sample: &TrainSample,
    params: &ProjectionParams,
    config: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    let refined = refine(&sample.features, &sample.candidates, params, config.refine_options())?;
    let (alignment, _) = sspa_forward_backward(&refined, &config.contrastive(), None)?;
    let l_mvga = mvga_loss(&refined, &sample.correspondences);
    Ok(compose(config, alignment, l_mvga))
}

/// Loss and its exact gradient w.r.t. every projection matrix, with
/// candidates and correspondences held fixed.
pub fn grad_params(
    sample: &TrainSample,
    params: &ProjectionParams,
    config: &TrainConfig,
) -> Result<(LossBreakdown, ProjectionParams), TrainError> {
    let refined = refine(&sample.features, &sample.candidates, params, config.refine_options())?;
    let (alignment, sspa_grad) = sspa_forward_backward(&refined, &config.contrastive(), Some(config.term_weights()))?;
    let (l_mvga, mvga_grad) = mvga_forward_backward(&refined, &sample.correspondences, config.lambda_mvga);
    let mut grad = sspa_grad.expect("gradient requested");
    for (g, h) in grad.maps.iter_mut().zip(&mvga_grad.maps) {
        for m in Modality::ALL {
            g[m.index()] += &h[m.index()];
        }
    }
    let dparams = refine_backward(&sample.features, &sample.candidates, params, &grad);
    Ok((compose(config, alignment, l_mvga), dparams))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub sample: String,
    pub l_view: f64,
    pub l_diff: Option<f64>,
    pub l_sspa: f64,
    pub l_mvga: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ProjectionParams,
    pub step: usize,
    first_moment: Vec<Array2<f64>>,
    second_moment: Vec<Array2<f64>>,
    pub history: Vec<StepLog>,
}

impl TrainState {
    pub fn new(params: ProjectionParams) -> Self {
        let zeros: Vec<Array2<f64>> = params.matrices().into_iter().map(|w| Array2::zeros(w.dim())).collect();
        Self {
            params,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            history: Vec::new(),
        }
    }

    fn apply(&mut self, grad: &ProjectionParams, config: &TrainConfig) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let t = self.step as i32;
        let lr = config.lr;
        let bias1 = 1.0 - BETA1.powi(t);
        let bias2 = 1.0 - BETA2.powi(t);
        for (idx, (w, g)) in self.params.matrices_mut().into_iter().zip(grad.matrices()).enumerate() {
            match config.optimizer {
                OptimizerKind::Gd => w.scaled_add(-lr, g),
                OptimizerKind::Adam => {
                    let m = &mut self.first_moment[idx];
                    let v = &mut self.second_moment[idx];
                    ndarray::Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        *w -= lr * (*m / bias1) / ((*v / bias2).sqrt() + EPS);
                    });
                }
            }
        }
    }
}

/// Initial projection matrices for the given feature dims.
pub fn initial_params(d_2d: usize, d_3d: usize, config: &TrainConfig) -> Result<ProjectionParams, TrainError> {
    Ok(ProjectionParams::init(d_2d, d_3d, config.shared_params, config.seed)?)
}

/// Runs `config.steps` updates, visiting samples in order and cycling.
/// Every step is written to `log` as one JSON line when given.
pub fn train(
    samples: &[TrainSample],
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainState, TrainError> {
    config.validate()?;
    let first = samples.first().ok_or(TrainError::NoSamples)?;
    let params = initial_params(
        first.features.dim(Modality::Image),
        first.features.dim(Modality::Depth),
        config,
    )?;
    let mut state = TrainState::new(params);
    for step in 0..config.steps {
        let sample = &samples[step % samples.len()];
        let (loss, grad) = grad_params(sample, &state.params, config)?;
        let grad_finite = grad.matrices().iter().all(|g| g.iter().all(|x| x.is_finite()));
        if !loss.total.is_finite() || !grad_finite {
            return Err(TrainError::NonFinite {
                step: step + 1,
                sample: sample.sample_id.clone(),
            });
        }
        let entry = StepLog {
            step: step + 1,
            sample: sample.sample_id.clone(),
            l_view: loss.alignment.l_view,
            l_diff: loss.alignment.l_diff,
            l_sspa: loss.alignment.l_sspa,
            l_mvga: loss.l_mvga,
            total: loss.total,
        };
        if let Some(out) = log.as_deref_mut() {
            serde_json::to_writer(&mut *out, &entry).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        log::debug!("step {} total {:.6} mvga {:.6}", entry.step, entry.total, entry.l_mvga);
        state.history.push(entry);
        state.apply(&grad, config);
    }
    Ok(state)
}
