//! Cross-validated pipeline shared by the CLI and the end-to-end tests:
//! extract patches, split scans into folds, train one model per fold,
//! score the held-out candidates and evaluate the pooled predictions.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{self, EvaluationReport, FrocCurve, GroundTruthNodule, TriageReport};
use crate::model::{Model, ModelConfig};
use crate::patching::PatchRecord;
use crate::synthetic::{self, SyntheticSpec};
use crate::training::{assemble_training_set, make_folds, train, FoldPlan, PatchIndex, RunManifest, TrainConfig};
use crate::volume_io::{Candidate, Volume};

/// A candidate that could not be turned into a patch record.
#[derive(Debug, Clone, PartialEq)]
pub struct Skipped {
    pub candidate: Candidate,
    pub reason: String,
}

/// Extracts one record per candidate, in candidate order. Candidates whose
/// series is absent or whose crop is degenerate are reported, not fatal.
pub fn extract_records(volumes: &[Volume], candidates: &[Candidate]) -> (Vec<PatchRecord>, Vec<Skipped>) {
    let by_id: BTreeMap<&str, &Volume> = volumes.iter().map(|v| (v.series_id(), v)).collect();
    let mut records = Vec::with_capacity(candidates.len());
    let mut skipped = Vec::new();
    for c in candidates {
        let Some(v) = by_id.get(c.series_id.as_str()) else {
            skipped.push(Skipped {
                candidate: c.clone(),
                reason: format!("series `{}` not found", c.series_id),
            });
            continue;
        };
        match PatchRecord::extract(v, c) {
            Ok(r) => records.push(r),
            Err(e) => skipped.push(Skipped {
                candidate: c.clone(),
                reason: e.to_string(),
            }),
        }
    }
    (records, skipped)
}

/// Scores `records` and returns their candidates with `p(nodule)` attached.
pub fn predict(model: &Model<f32>, records: &[&PatchRecord]) -> Result<Vec<Candidate>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(64) {
        let batch: Vec<_> = chunk.iter().map(|r| r.triple.clone()).collect();
        let probs = model.forward(&batch)?;
        for (r, p) in chunk.iter().zip(probs) {
            out.push(r.triple.candidate.clone().with_probability(p[1].clamp(0.0, 1.0))?);
        }
    }
    Ok(out)
}

/// Seeds used for one fold: model initialisation and sample order.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add(fold as u64)
}

/// Trains a fresh model on the training scans of `fold`.
pub fn train_fold(
    plan: &FoldPlan,
    fold: usize,
    candidates: &[Candidate],
    records: &[PatchRecord],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(Model<f32>, RunManifest)> {
    let split = plan
        .folds
        .get(fold)
        .ok_or_else(|| Error::InvalidArgument(format!("fold {fold} out of range 0..{}", plan.k())))?;
    let index = PatchIndex::new(records);
    let stream = assemble_training_set(split, candidates, &index)?;
    let cfg = TrainConfig {
        seed: fold_seed(train_cfg.seed, fold),
        ..train_cfg.clone()
    };
    let mut model = Model::<f32>::build_initialized(model_cfg.clone(), cfg.seed)?;
    let start = Instant::now();
    let report = train(&mut model, &stream, records, &cfg)?;
    let manifest = RunManifest {
        model: model.config().clone(),
        train: cfg,
        fold: Some(fold),
        samples_per_epoch: report.samples_per_epoch,
        epoch_losses: report.epoch_losses,
        learning_rates: report.learning_rates,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((model, manifest))
}

/// Held-out records of `fold`, in record order.
pub fn test_records<'a>(plan: &FoldPlan, fold: usize, records: &'a [PatchRecord]) -> Vec<&'a PatchRecord> {
    let test = &plan.folds[fold].test;
    records.iter().filter(|r| test.contains(&r.triple.candidate.series_id)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: usize,
    pub bootstrap: usize,
    pub threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synthetic: SyntheticSpec::default(),
            model: ModelConfig::small(crate::model::Variant::Mgi),
            train: desk_train_config(),
            folds: crate::training::DEFAULT_FOLDS,
            bootstrap: evaluation::DEFAULT_BOOTSTRAP,
            threshold: evaluation::DEFAULT_THRESHOLD,
        }
    }
}

/// Short schedule for the desk-scale synthetic data.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        base_lr: 0.005,
        lr_decay_per_epoch: 0.025,
        epochs: 3,
        batch_size: 16,
        momentum: 0.9,
        dropout: 0.5,
        ..TrainConfig::default()
    }
}

pub struct ExperimentOutcome {
    pub predictions: Vec<Candidate>,
    pub ground_truth: Vec<GroundTruthNodule>,
    pub report: EvaluationReport,
    pub curve: FrocCurve,
    pub triage: TriageReport,
    pub manifests: Vec<RunManifest>,
    pub num_parameters: usize,
}

/// Generates the synthetic dataset and runs the full cross-validation.
pub fn run_synthetic(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let data = synthetic::generate(&cfg.synthetic)?;
    let (records, skipped) = extract_records(&data.volumes, &data.candidates);
    if !skipped.is_empty() {
        return Err(Error::InvalidArgument(format!("{} synthetic candidates could not be extracted", skipped.len())));
    }
    let series: Vec<String> = data.volumes.iter().map(|v| v.series_id().to_string()).collect();
    let plan = make_folds(&series, cfg.folds, cfg.train.seed)?;
    plan.check_no_leakage(&data.candidates)?;

    let mut predictions = Vec::with_capacity(records.len());
    let mut manifests = Vec::with_capacity(plan.k());
    let mut num_parameters = 0;
    for fold in 0..plan.k() {
        let (model, manifest) = train_fold(&plan, fold, &data.candidates, &records, &cfg.model, &cfg.train)?;
        num_parameters = model.count_parameters();
        info!(
            "fold {fold}: final loss {:.5} in {:.1}s",
            manifest.epoch_losses.last().copied().unwrap_or(f64::NAN),
            manifest.wall_time_s
        );
        predictions.extend(predict(&model, &test_records(&plan, fold, &records))?);
        manifests.push(manifest);
    }
    if data.ground_truth.is_empty() {
        warn!("synthetic dataset has no nodules");
    }
    let (report, curve, triage) = evaluation::evaluate(
        &predictions,
        &data.ground_truth,
        series.len(),
        cfg.bootstrap,
        cfg.train.seed,
        cfg.threshold,
    )?;
    Ok(ExperimentOutcome {
        predictions,
        ground_truth: data.ground_truth,
        report,
        curve,
        triage,
        manifests,
        num_parameters,
    })
}
