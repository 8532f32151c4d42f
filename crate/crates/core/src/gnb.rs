//! Hierarchical Gaussian Naive Bayes over the baseline log-ratio features.
//!
//! One `(mu, sigma)` table is fitted per hierarchy node at the chosen level.
//! Nodes with too few rows are not given their own table; at scoring time
//! they resolve to the nearest ancestor that has one, and ultimately to the
//! global table fitted over every training row.
//!
//! The anomaly score is the sum of squared z-scores over the non-missing
//! features.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::explain_threshold;
use crate::features::FeatureSchema;
use crate::record::{Hierarchy, ItemRecord, Level, PriceField};

pub const MIN_SIGMA: f64 = 0.01;
pub const MIN_SAMPLES: usize = 9;

/// A hierarchy node; `level: None` is the global root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeRef {
    pub level: Option<Level>,
    pub id: u32,
}

impl NodeRef {
    pub const GLOBAL: NodeRef = NodeRef { level: None, id: 0 };

    pub fn is_global(&self) -> bool {
        self.level.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnbNodeParams {
    pub node: NodeRef,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnbConfig {
    pub fit_level: Level,
    pub min_samples: usize,
    pub min_sigma: f64,
}

impl Default for GnbConfig {
    fn default() -> Self {
        GnbConfig {
            fit_level: Level::Department,
            min_samples: MIN_SAMPLES,
            min_sigma: MIN_SIGMA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnbModel {
    pub fit_level: Level,
    pub min_samples: usize,
    pub min_sigma: f64,
    /// Numerators of the log-ratio features; the denominator is always cost.
    pub numerators: Vec<PriceField>,
    pub feature_names: Vec<String>,
    pub c1: f64,
    pub c2: f64,
    /// Fitted tables for `fit_level` and every coarser level. Only nodes with
    /// at least `min_samples` rows appear.
    pub levels: BTreeMap<Level, BTreeMap<u32, GnbNodeParams>>,
    pub global: GnbNodeParams,
    /// Anomaly threshold; scores strictly above it are anomalies.
    pub epsilon: f64,
    /// Per-feature explanation threshold.
    pub epsilon_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub total: f64,
    pub per_feature: Vec<Option<f64>>,
    pub used_node: NodeRef,
    pub all_missing: bool,
}

/// Mean and population standard deviation of `values`, or `None` if empty.
fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

struct Row {
    hierarchy: Hierarchy,
    features: Vec<Option<f64>>,
}

impl GnbModel {
    /// Fits per-node parameter tables over the baseline log features of
    /// `training`.
    pub fn fit<'a>(
        training: impl IntoIterator<Item = &'a ItemRecord>,
        schema: &FeatureSchema,
        config: &GnbConfig,
    ) -> Result<Self> {
        let rows: Vec<Row> = training
            .into_iter()
            .map(|r| Row {
                hierarchy: r.hierarchy,
                features: schema.baseline_log_features(r),
            })
            .collect();
        if rows.is_empty() {
            return Err(Error::Fit("empty training set".into()));
        }
        if !rows.iter().any(|r| r.features.iter().any(Option::is_some)) {
            return Err(Error::Fit(
                "no baseline log features computable (cost missing on every row?)".into(),
            ));
        }
        if config.min_sigma.is_nan() || config.min_sigma <= 0.0 {
            return Err(Error::Config("min_sigma must be > 0".into()));
        }
        let n_features = schema.baseline_log.len();
        let all: Vec<usize> = (0..rows.len()).collect();
        let global = fit_node(&rows, &all, n_features, NodeRef::GLOBAL, None, config);

        // Coarsest level first so every node's parent is already fitted.
        let mut chain = vec![config.fit_level];
        while let Some(p) = chain.last().unwrap().parent() {
            chain.push(p);
        }
        let mut levels: BTreeMap<Level, BTreeMap<u32, GnbNodeParams>> = BTreeMap::new();
        for &level in chain.iter().rev() {
            let mut groups: HashMap<u32, Vec<usize>> = HashMap::new();
            for (i, r) in rows.iter().enumerate() {
                groups.entry(r.hierarchy.id_at(level)).or_default().push(i);
            }
            let mut ids: Vec<u32> = groups.keys().copied().collect();
            ids.sort_unstable();
            let mut table = BTreeMap::new();
            for id in ids {
                let idx = &groups[&id];
                if idx.len() < config.min_samples {
                    continue;
                }
                let first = &rows[idx[0]].hierarchy;
                let parent = resolve_in(&levels, &global, first, level.parent());
                let node = NodeRef { level: Some(level), id };
                table.insert(id, fit_node(&rows, idx, n_features, node, Some(parent), config));
            }
            levels.insert(level, table);
        }

        Ok(GnbModel {
            fit_level: config.fit_level,
            min_samples: config.min_samples,
            min_sigma: config.min_sigma,
            numerators: schema.baseline_log.iter().map(|l| l.numerator).collect(),
            feature_names: schema.issue_names(),
            c1: schema.c1,
            c2: schema.c2,
            levels,
            global,
            epsilon: f64::INFINITY,
            epsilon_s: f64::INFINITY,
        })
    }

    /// Sets `epsilon` and derives `epsilon_s = epsilon / 4`.
    pub fn set_threshold(&mut self, epsilon: f64) -> Result<()> {
        self.epsilon_s = explain_threshold(epsilon)?;
        self.epsilon = epsilon;
        Ok(())
    }

    /// The fit-level table.
    pub fn params(&self) -> &BTreeMap<u32, GnbNodeParams> {
        &self.levels[&self.fit_level]
    }

    pub fn node_count(&self) -> usize {
        self.params().len()
    }

    /// Exact fit-level node, then each coarser ancestor, then global.
    pub fn resolve(&self, hierarchy: &Hierarchy) -> &GnbNodeParams {
        resolve_in(&self.levels, &self.global, hierarchy, Some(self.fit_level))
    }

    /// Baseline log features of `record`, computed the same way as the schema.
    pub fn features(&self, record: &ItemRecord) -> Vec<Option<f64>> {
        self.numerators
            .iter()
            .map(|f| {
                crate::features::log_transform(f.get(record), record.cost, self.c1, self.c2)
                    .ok()
                    .flatten()
            })
            .collect()
    }

    pub fn score(&self, record: &ItemRecord) -> ScoreBreakdown {
        let features = self.features(record);
        self.score_features(&record.hierarchy, &features)
    }

    pub fn score_features(&self, hierarchy: &Hierarchy, features: &[Option<f64>]) -> ScoreBreakdown {
        let params = self.resolve(hierarchy);
        let mut total = 0.0;
        let mut any = false;
        let per_feature = features
            .iter()
            .zip(params.mu.iter().zip(&params.sigma))
            .map(|(value, (mu, sigma))| {
                value.map(|v| {
                    let z = (v - mu) / sigma;
                    let sq = z * z;
                    total += sq;
                    any = true;
                    sq
                })
            })
            .collect();
        ScoreBreakdown {
            total,
            per_feature,
            used_node: params.node,
            all_missing: !any,
        }
    }

    /// `(score > epsilon, score)`.
    pub fn predict(&self, record: &ItemRecord) -> (bool, f64) {
        let s = self.score(record).total;
        (s > self.epsilon, s)
    }

    /// Log density under the independent Gaussian model, summed over the
    /// non-missing features. Zero when every feature is missing.
    pub fn log_density(&self, record: &ItemRecord) -> f64 {
        let features = self.features(record);
        let params = self.resolve(&record.hierarchy);
        let mut lp = 0.0;
        for (x, (mu, sigma)) in features.iter().zip(params.mu.iter().zip(&params.sigma)) {
            if let Some(x) = x {
                let z = (x - mu) / sigma;
                lp += -0.5 * z * z - 0.5 * (2.0 * PI * sigma * sigma).ln();
            }
        }
        lp
    }
}

fn resolve_in<'a>(
    levels: &'a BTreeMap<Level, BTreeMap<u32, GnbNodeParams>>,
    global: &'a GnbNodeParams,
    hierarchy: &Hierarchy,
    start: Option<Level>,
) -> &'a GnbNodeParams {
    let mut level = start;
    while let Some(l) = level {
        if let Some(p) = levels.get(&l).and_then(|t| t.get(&hierarchy.id_at(l))) {
            return p;
        }
        level = l.parent();
    }
    global
}

fn fit_node(
    rows: &[Row],
    idx: &[usize],
    n_features: usize,
    node: NodeRef,
    parent: Option<&GnbNodeParams>,
    config: &GnbConfig,
) -> GnbNodeParams {
    let mut mu = Vec::with_capacity(n_features);
    let mut sigma = Vec::with_capacity(n_features);
    let mut values = Vec::with_capacity(idx.len());
    for j in 0..n_features {
        values.clear();
        values.extend(idx.iter().filter_map(|&i| rows[i].features[j]));
        // A feature too sparse in this node borrows the parent's estimate.
        let estimate = match parent {
            Some(p) if values.len() < config.min_samples => Some((p.mu[j], p.sigma[j])),
            _ => mean_std(&values),
        };
        let (m, s) = estimate.unwrap_or((0.0, 1.0));
        mu.push(m);
        sigma.push(s.max(config.min_sigma));
    }
    GnbNodeParams {
        node,
        mu,
        sigma,
        n_samples: idx.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SchemaConfig;

    fn h(div: u32, sup: u32, dep: u32, cat: u32, sub: u32) -> Hierarchy {
        Hierarchy {
            division: div,
            super_department: sup,
            department: dep,
            category: cat,
            subcategory: sub,
        }
    }

    fn item(id: usize, hier: Hierarchy, price: f64, cost: f64) -> ItemRecord {
        let mut r = ItemRecord::new(format!("i{id}"), hier);
        r.price = Some(price);
        r.cost = Some(cost);
        r
    }

    fn schema() -> FeatureSchema {
        FeatureSchema::fit(
            &SchemaConfig {
                c1: 0.0,
                ..SchemaConfig::default()
            },
            [],
        )
        .unwrap()
    }

    #[test]
    fn thin_node_uses_parent_level_fit() {
        let mut rows = Vec::new();
        // department 10: 8 rows, department 11: 20 rows, same super-department
        for i in 0..8 {
            rows.push(item(i, h(1, 5, 10, 100, 1000), 2.0 + i as f64 * 0.01, 1.0));
        }
        for i in 0..20 {
            rows.push(item(100 + i, h(1, 5, 11, 110, 1100), 3.0 + i as f64 * 0.02, 1.0));
        }
        let model = GnbModel::fit(&rows, &schema(), &GnbConfig::default()).unwrap();
        assert!(!model.params().contains_key(&10));
        assert!(model.params().contains_key(&11));
        let used = model.resolve(&h(1, 5, 10, 100, 1000));
        assert_eq!(
            used.node,
            NodeRef {
                level: Some(Level::SuperDepartment),
                id: 5
            }
        );
        assert_eq!(used.n_samples, 28);
        assert!(used.n_samples >= MIN_SAMPLES);
    }

    #[test]
    fn constant_feature_is_clipped_to_sigma_floor() {
        let e3 = 3.0f64.exp();
        let rows: Vec<_> = (0..12).map(|i| item(i, h(1, 2, 3, 4, 5), e3, 1.0)).collect();
        let model = GnbModel::fit(&rows, &schema(), &GnbConfig::default()).unwrap();
        let p = &model.params()[&3];
        assert!((p.mu[0] - 3.0).abs() < 1e-12);
        assert_eq!(p.sigma[0], MIN_SIGMA);
    }

    #[test]
    fn nine_samples_is_enough() {
        let rows: Vec<_> = (0..9).map(|i| item(i, h(1, 2, 3, 4, 5), 2.0 + i as f64, 1.0)).collect();
        let model = GnbModel::fit(&rows, &schema(), &GnbConfig::default()).unwrap();
        assert!(model.params().contains_key(&3));
        assert_eq!(model.resolve(&h(1, 2, 3, 4, 5)).node.level, Some(Level::Department));
    }

    #[test]
    fn unseen_department_falls_back_through_chain() {
        let rows: Vec<_> = (0..30)
            .map(|i| item(i, h(1, 2, 3, 4, 5), 2.0 + i as f64, 1.0))
            .collect();
        let model = GnbModel::fit(&rows, &schema(), &GnbConfig::default()).unwrap();
        // unseen department under known super-department
        assert_eq!(
            model.resolve(&h(1, 2, 99, 4, 5)).node.level,
            Some(Level::SuperDepartment)
        );
        // entirely unseen path
        assert!(model.resolve(&h(7, 8, 9, 10, 11)).node.is_global());
    }

    #[test]
    fn per_department_tables() {
        let mut rows = Vec::new();
        for d in 0..4u32 {
            for i in 0..15 {
                rows.push(item(i, h(1, 2, d, d * 10, d * 100), 2.0 + i as f64, 1.0));
            }
        }
        let model = GnbModel::fit(&rows, &schema(), &GnbConfig::default()).unwrap();
        assert_eq!(model.node_count(), 4);
        assert_eq!(model.global.n_samples, 60);
    }

    #[test]
    fn fit_errors() {
        let empty: Vec<ItemRecord> = vec![];
        assert!(GnbModel::fit(&empty, &schema(), &GnbConfig::default()).is_err());
        let mut r = item(0, h(1, 2, 3, 4, 5), 1.0, 1.0);
        r.cost = None;
        assert!(GnbModel::fit([&r], &schema(), &GnbConfig::default()).is_err());
    }

    fn manual_model(mu: Vec<f64>, sigma: Vec<f64>) -> GnbModel {
        let mut model =
            GnbModel::fit(&[item(0, h(1, 2, 3, 4, 5), 2.0, 1.0)], &schema(), &GnbConfig::default()).unwrap();
        model.levels.values_mut().for_each(BTreeMap::clear);
        model.global.mu = mu;
        model.global.sigma = sigma;
        model
    }

    #[test]
    fn hand_score_example() {
        let model = manual_model(vec![0.0, 0.0, 0.0, 0.0, 0.0], vec![1.0, 2.0, 1.0, 1.0, 1.0]);
        let b = model.score_features(&h(1, 2, 3, 4, 5), &[Some(2.0), Some(2.0), None, None, None]);
        assert_eq!(b.per_feature, vec![Some(4.0), Some(1.0), None, None, None]);
        assert_eq!(b.total, 5.0);
        assert!(!b.all_missing);
    }

    #[test]
    fn zero_score_at_means_and_strict_threshold() {
        let mut model = manual_model(vec![0.0; 5], vec![1.0; 5]);
        let mut r = item(0, h(1, 2, 3, 4, 5), 1.0, 1.0);
        r.competitor_price = Some(1.0);
        assert_eq!(model.score(&r).total, 0.0);

        model.set_threshold(1.0).unwrap();
        // log(e) over cost 1 with c1 = 0 gives exactly 1.0 on one feature
        let mut at = item(0, h(1, 2, 3, 4, 5), std::f64::consts::E, 1.0);
        at.competitor_price = None;
        let s = model.score(&at).total;
        model.set_threshold(s).unwrap();
        assert!(!model.predict(&at).0);
        model.set_threshold(s - 1e-9).unwrap();
        assert!(model.predict(&at).0);
        assert_eq!(model.epsilon_s, model.epsilon / 4.0);
    }

    #[test]
    fn all_missing_scores_zero_and_is_not_anomalous() {
        let mut model = manual_model(vec![0.0; 5], vec![1.0; 5]);
        model.set_threshold(0.5).unwrap();
        let mut r = item(0, h(1, 2, 3, 4, 5), 1.0, 1.0);
        r.cost = None;
        let b = model.score(&r);
        assert!(b.all_missing);
        assert_eq!(b.total, 0.0);
        assert_eq!(model.predict(&r), (false, 0.0));
        assert_eq!(model.log_density(&r), 0.0);
    }

    #[test]
    fn density_single_feature_at_mean() {
        let model = manual_model(vec![0.0; 5], vec![1.0; 5]);
        let mut r = item(0, h(1, 2, 3, 4, 5), 1.0, 1.0);
        r.cost = Some(1.0);
        let lp = model.log_density(&r);
        assert!((lp - (-0.918_938_533_204_672_7)).abs() < 1e-12);
    }
}
