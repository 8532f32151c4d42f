//! Fits a full [`ModelBundle`] from a labeled training set.

use std::path::Path;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::bundle::{ModelBundle, Thresholds, BUNDLE_FORMAT_VERSION};
use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::eval::{select_threshold, ThresholdPolicy};
use crate::features::{FeatureSchema, SchemaConfig};
use crate::forest::{IsolationForestConfig, IsolationForestModel, Matrix, RandomForestConfig, RandomForestModel};
use crate::gnb::{GnbConfig, GnbModel};
use crate::impact::TierBounds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub schema: SchemaConfig,
    pub gnb: GnbConfig,
    /// GNB threshold maximizes F-beta with this beta on the training set.
    pub gnb_beta: f64,
    /// Quantile of training scores used as the GNB threshold when the
    /// training set has no positives.
    pub gnb_fallback_quantile: f64,
    pub iforest: Option<IsolationForestConfig>,
    pub rf: Option<RandomForestConfig>,
    /// Forest threshold maximizes out-of-bag recall at this precision.
    pub rf_min_precision: f64,
    pub tier_bounds: TierBounds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schema: SchemaConfig::default(),
            gnb: GnbConfig::default(),
            gnb_beta: 0.1,
            gnb_fallback_quantile: 0.999,
            iforest: Some(IsolationForestConfig::default()),
            rf: Some(RandomForestConfig::default()),
            rf_min_precision: 0.8,
            tier_bounds: TierBounds::default(),
        }
    }
}

impl TrainConfig {
    /// Reads JSON, or TOML when the extension is `.toml`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        } else {
            Ok(serde_json::from_str(&text)?)
        }
    }
}

/// Smallest positive threshold; the explanation threshold needs `epsilon > 0`.
fn positive(t: f64) -> f64 {
    if t > 0.0 {
        t
    } else {
        f64::MIN_POSITIVE
    }
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let idx = ((v.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
    v[idx]
}

pub fn train_bundle(data: &LabeledDataset, config: &TrainConfig) -> Result<ModelBundle> {
    if data.is_empty() {
        return Err(Error::Fit("empty training set".into()));
    }
    let has_pos = data.labels.iter().any(|&l| l);
    let schema = FeatureSchema::fit(&config.schema, &data.records)?;
    let mut gnb = GnbModel::fit(&data.records, &schema, &config.gnb)?;
    let gnb_scores: Vec<f64> = data.records.iter().map(|r| gnb.score(r).total).collect();
    let epsilon = if has_pos {
        select_threshold(
            &gnb_scores,
            &data.labels,
            ThresholdPolicy::MaxFBeta { beta: config.gnb_beta },
        )?
        .threshold
    } else {
        quantile(&gnb_scores, config.gnb_fallback_quantile)
    };
    gnb.set_threshold(positive(epsilon))?;
    info!(epsilon = gnb.epsilon, nodes = gnb.node_count(), "fitted gnb");

    let needs_matrix = config.iforest.is_some() || (config.rf.is_some() && has_pos);
    let matrix = needs_matrix.then(|| Matrix::from_records(&schema, &data.records));

    let mut iforest_threshold = None;
    let iforest = match (&config.iforest, &matrix) {
        (Some(c), Some(m)) => {
            let model = IsolationForestModel::fit(m, c)?;
            if has_pos {
                let scores = model.score_matrix(m);
                iforest_threshold = Some(select_threshold(&scores, &data.labels, ThresholdPolicy::F1)?.threshold);
            }
            info!(trees = model.trees.len(), "fitted isolation forest");
            Some(model)
        }
        _ => None,
    };

    let rf = match (&config.rf, &matrix) {
        (Some(c), Some(m)) if has_pos => {
            let fit = RandomForestModel::fit(m, &data.labels, c)?;
            let (s, l): (Vec<f64>, Vec<bool>) = fit
                .oob_probability
                .iter()
                .zip(&data.labels)
                .filter(|(p, _)| !p.is_nan())
                .map(|(&p, &l)| (p, l))
                .unzip();
            let mut model = fit.model;
            if l.iter().any(|&x| x) {
                let policy = ThresholdPolicy::MaxRecallAtMinPrecision {
                    min_precision: config.rf_min_precision,
                };
                let choice = select_threshold(&s, &l, policy)?;
                // never below a single vote: a threshold at -inf flags everything
                model.threshold = choice.threshold.max(0.0);
            }
            info!(threshold = model.threshold, "fitted random forest");
            Some(model)
        }
        _ => None,
    };

    Ok(ModelBundle {
        format_version: BUNDLE_FORMAT_VERSION,
        version: String::new(),
        created_at: Utc::now(),
        thresholds: Thresholds {
            gnb_epsilon: gnb.epsilon,
            gnb_epsilon_s: gnb.epsilon_s,
            gnb_beta: config.gnb_beta,
            iforest: iforest_threshold,
            rf: rf.as_ref().map(|m| m.threshold),
            rf_min_precision: config.rf_min_precision,
        },
        schema,
        gnb,
        iforest,
        rf,
        tier_bounds: config.tier_bounds.clone(),
    })
}
