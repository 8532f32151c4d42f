//! Offline experiments on a train/test split: model comparison, GNB fit
//! level comparison and the anomaly-rate sweep.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use tracing::info;

use crate::datagen::LabeledDataset;
use crate::error::Result;
use crate::eval::{anomaly_rate_sweep, cv_threshold_evaluate, spearman, EvalReport, ThresholdPolicy};
use crate::features::FeatureSchema;
use crate::forest::{IsolationForestModel, Matrix, RandomForestModel};
use crate::gnb::{GnbConfig, GnbModel};
use crate::record::Level;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub folds: usize,
    pub seed: u64,
    pub policy: ThresholdPolicy,
    /// Undersampling and fold draws averaged at each point of the rate sweep.
    pub sweep_repeats: usize,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            folds: 5,
            seed: 7,
            policy: ThresholdPolicy::F1,
            sweep_repeats: 10,
            train: TrainConfig::default(),
        }
    }
}

/// Test-set scores of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelScores {
    pub model: String,
    pub scores: Vec<f64>,
    pub fit_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub model: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc_pr: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub fold_thresholds: Vec<f64>,
    pub fit_seconds: f64,
}

impl ModelResult {
    fn from_report(model: &str, r: &EvalReport, fit_seconds: f64) -> Self {
        ModelResult {
            model: model.to_string(),
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            auc_pr: r.auc_pr,
            tp: r.confusion.tp,
            fp: r.confusion.fp,
            fn_: r.confusion.fn_,
            fold_thresholds: r.fold_thresholds.clone(),
            fit_seconds,
        }
    }
}

/// Fits GNB, isolation forest and random forest on `train` and scores
/// `test` with each.
pub fn score_models(train: &LabeledDataset, test: &LabeledDataset, config: &TrainConfig) -> Result<Vec<ModelScores>> {
    let schema = FeatureSchema::fit(&config.schema, &train.records)?;
    let mut out = Vec::new();

    let t = Instant::now();
    let gnb = GnbModel::fit(&train.records, &schema, &config.gnb)?;
    let fit_seconds = t.elapsed().as_secs_f64();
    out.push(ModelScores {
        model: "gaussian_nb".into(),
        scores: test.records.iter().map(|r| gnb.score(r).total).collect(),
        fit_seconds,
    });

    let train_m = Matrix::from_records(&schema, &train.records);
    let test_m = Matrix::from_records(&schema, &test.records);
    if let Some(c) = &config.iforest {
        let t = Instant::now();
        let model = IsolationForestModel::fit(&train_m, c)?;
        let fit_seconds = t.elapsed().as_secs_f64();
        out.push(ModelScores {
            model: "isolation_forest".into(),
            scores: model.score_matrix(&test_m),
            fit_seconds,
        });
    }
    if let Some(c) = &config.rf {
        let t = Instant::now();
        let model = RandomForestModel::fit(&train_m, &train.labels, c)?.model;
        let fit_seconds = t.elapsed().as_secs_f64();
        out.push(ModelScores {
            model: "random_forest".into(),
            scores: model.probability_matrix(&test_m),
            fit_seconds,
        });
    }
    Ok(out)
}

/// Cross-validated thresholding of each model's test scores.
pub fn compare_models(scores: &[ModelScores], labels: &[bool], config: &ExperimentConfig) -> Result<Vec<ModelResult>> {
    scores
        .iter()
        .map(|s| {
            let report = cv_threshold_evaluate(&s.scores, labels, config.folds, config.policy, config.seed)?;
            info!(model = %s.model, f1 = report.f1, "evaluated");
            Ok(ModelResult::from_report(&s.model, &report, s.fit_seconds))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelResult {
    pub level: Level,
    pub nodes: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc_pr: f64,
}

/// GNB fitted at every hierarchy level, each evaluated like
/// [`compare_models`].
pub fn hierarchy_levels(
    train: &LabeledDataset,
    test: &LabeledDataset,
    config: &ExperimentConfig,
) -> Result<Vec<LevelResult>> {
    let schema = FeatureSchema::fit(&config.train.schema, &train.records)?;
    Level::ALL
        .iter()
        .rev()
        .map(|&level| {
            let gnb = GnbModel::fit(
                &train.records,
                &schema,
                &GnbConfig {
                    fit_level: level,
                    ..config.train.gnb.clone()
                },
            )?;
            let scores: Vec<f64> = test.records.iter().map(|r| gnb.score(r).total).collect();
            let r = cv_threshold_evaluate(&scores, &test.labels, config.folds, config.policy, config.seed)?;
            Ok(LevelResult {
                level,
                nodes: gnb.node_count(),
                precision: r.precision,
                recall: r.recall,
                f1: r.f1,
                auc_pr: r.auc_pr,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub rate: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc_pr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub model: String,
    /// Rank correlation of F1 with rate across the sweep.
    pub spearman: f64,
}

pub fn rate_sweep(
    scores: &[ModelScores],
    labels: &[bool],
    rates: &[f64],
    config: &ExperimentConfig,
) -> Result<(Vec<SweepRow>, Vec<SweepSummary>)> {
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for s in scores {
        let points = anomaly_rate_sweep(
            &s.scores,
            labels,
            rates,
            config.folds,
            config.policy,
            config.seed,
            config.sweep_repeats,
        )?;
        let f1: Vec<f64> = points.iter().map(|p| p.f1).collect();
        summary.push(SweepSummary {
            model: s.model.clone(),
            spearman: spearman(rates, &f1),
        });
        rows.extend(points.into_iter().map(|p| SweepRow {
            model: s.model.clone(),
            rate: p.rate,
            n_pos: p.n_pos,
            n_neg: p.n_neg,
            precision: p.precision,
            recall: p.recall,
            f1: p.f1,
            auc_pr: p.auc_pr,
        }));
    }
    Ok((rows, summary))
}
