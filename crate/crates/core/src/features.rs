//! Feature schema and feature-vector construction.
//!
//! A [`FeatureSchema`] is an ordered list of feature descriptors. Each slot
//! knows where its value comes from (a raw field, a difference, a margin, a
//! log-ratio, a one-hot level, ...) and which feature sets it belongs to.
//! Missing inputs propagate: a derived slot is masked whenever any of its
//! sources is missing or its transform is undefined.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{BinaryField, CategoricalField, ItemRecord, Level, OtherField, PriceField, TimeSeriesField};

pub const SCHEMA_FORMAT_VERSION: u32 = 1;

/// Named feature sets a slot can belong to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureSet {
    /// Raw price-based features.
    P,
    /// Baseline price features, a subset of `P`.
    A,
    /// Log-ratios of baseline features over cost.
    #[serde(rename = "A_L")]
    AL,
    /// Time series features.
    T,
    /// Differences and margins against cost and price.
    #[serde(rename = "P_T")]
    PT,
    /// All log-based transformed features.
    #[serde(rename = "P_L")]
    PL,
    H,
    B,
    C,
    O,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Raw { field: PriceField },
    TimeSeries { field: TimeSeriesField },
    Difference { num: PriceField, den: PriceField },
    Margin { num: PriceField, den: PriceField },
    LogRatio { num: PriceField, den: PriceField },
    Hierarchy { level: Level },
    Binary { field: BinaryField },
    OneHot { field: CategoricalField, code: u8 },
    Other { field: OtherField },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub name: String,
    pub transform: Transform,
    pub sets: Vec<FeatureSet>,
}

impl FeatureDescriptor {
    pub fn in_set(&self, set: FeatureSet) -> bool {
        self.sets.contains(&set)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaConfig {
    /// Additive offset inside the log-ratio; must be > 0 unless every input
    /// is strictly positive.
    pub c1: f64,
    /// Additive shift applied after the log.
    pub c2: f64,
    /// Offset added to the margin denominator.
    pub margin_offset: f64,
    /// Raw price fields, in slot order. Must start with price and cost.
    pub raw_prices: Vec<PriceField>,
    /// Baseline features; a subset of `raw_prices` containing price and cost.
    pub baseline: Vec<PriceField>,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        SchemaConfig {
            c1: 1.0,
            c2: 0.0,
            margin_offset: 0.0,
            raw_prices: PriceField::ALL.to_vec(),
            baseline: vec![
                PriceField::Price,
                PriceField::Cost,
                PriceField::CompetitorPrice,
                PriceField::StorePrice,
                PriceField::MarketplacePrice,
                PriceField::ListPrice,
            ],
        }
    }
}

/// A baseline log feature: slot index plus the numerator's display name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogFeature {
    pub slot: usize,
    pub numerator: PriceField,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub format_version: u32,
    pub c1: f64,
    pub c2: f64,
    pub margin_offset: f64,
    pub features: Vec<FeatureDescriptor>,
    /// Fitted one-hot levels per categorical field, sorted ascending.
    pub categorical_levels: BTreeMap<CategoricalFieldKey, Vec<u8>>,
    /// The baseline set, in order.
    pub baseline: Vec<PriceField>,
    /// Baseline log features over cost, in order; `name` is the issue name.
    pub baseline_log: Vec<LogFeature>,
    /// Declared slot count per feature set.
    pub counts: BTreeMap<FeatureSet, usize>,
}

/// `CategoricalField` as a map key that serializes to a plain string.
pub type CategoricalFieldKey = String;

/// Dense, missing-aware feature vector aligned with a schema.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    /// Masked entries hold `NaN`.
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        if self.missing[i] {
            None
        } else {
            Some(self.values[i])
        }
    }

    pub fn masked_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }
}

/// `log((num + c1) / (den + c1)) + c2`, missing when either input is.
pub fn log_transform(num: Option<f64>, den: Option<f64>, c1: f64, c2: f64) -> Result<Option<f64>> {
    let (Some(num), Some(den)) = (num, den) else {
        return Ok(None);
    };
    let a = num + c1;
    let b = den + c1;
    if b <= 0.0 || a <= 0.0 {
        return Err(Error::Domain(format!(
            "log-ratio undefined for ({num} + {c1}) / ({den} + {c1})"
        )));
    }
    let v = (a / b).ln() + c2;
    if v.is_finite() {
        Ok(Some(v))
    } else {
        Err(Error::Domain(format!("non-finite log-ratio for {num}/{den}")))
    }
}

fn difference(num: Option<f64>, den: Option<f64>) -> Option<f64> {
    Some(num? - den?)
}

fn margin(num: Option<f64>, den: Option<f64>, offset: f64) -> Option<f64> {
    let (num, den) = (num?, den?);
    let d = den + offset;
    if d == 0.0 {
        return None;
    }
    let v = (num - den) / d;
    v.is_finite().then_some(v)
}

impl FeatureSchema {
    /// Builds the schema and fits the categorical level maps on `records`.
    pub fn fit<'a>(config: &SchemaConfig, records: impl IntoIterator<Item = &'a ItemRecord>) -> Result<Self> {
        let mut levels: BTreeMap<CategoricalFieldKey, Vec<u8>> = CategoricalField::ALL
            .iter()
            .map(|f| (f.key().to_string(), Vec::new()))
            .collect();
        let mut seen = vec![[false; 256]; CategoricalField::ALL.len()];
        for r in records {
            for (k, f) in CategoricalField::ALL.iter().enumerate() {
                seen[k][f.get(r) as usize] = true;
            }
        }
        for (k, f) in CategoricalField::ALL.iter().enumerate() {
            let codes = (0..=255u8).filter(|&c| seen[k][c as usize]).collect();
            levels.insert(f.key().to_string(), codes);
        }
        Self::with_levels(config, levels)
    }

    /// Builds the schema with explicit categorical levels.
    pub fn with_levels(
        config: &SchemaConfig,
        categorical_levels: BTreeMap<CategoricalFieldKey, Vec<u8>>,
    ) -> Result<Self> {
        use FeatureSet::*;

        let raw = &config.raw_prices;
        if raw.first() != Some(&PriceField::Price) || raw.get(1) != Some(&PriceField::Cost) {
            return Err(Error::Config("raw price fields must start with price, cost".into()));
        }
        if !config.baseline.contains(&PriceField::Price) || !config.baseline.contains(&PriceField::Cost) {
            return Err(Error::Config("baseline must contain price and cost".into()));
        }
        if let Some(f) = config.baseline.iter().find(|f| !raw.contains(f)) {
            return Err(Error::Config(format!("baseline field {} is not a raw price", f.key())));
        }
        if !config.c1.is_finite() || config.c1 < 0.0 || !config.c2.is_finite() {
            return Err(Error::Config("c1 must be finite and >= 0, c2 finite".into()));
        }

        let mut features = Vec::new();
        let mut push = |name: String, transform: Transform, sets: Vec<FeatureSet>| {
            features.push(FeatureDescriptor { name, transform, sets });
            features.len() - 1
        };

        for &f in raw {
            let mut sets = vec![P];
            if config.baseline.contains(&f) {
                sets.push(A);
            }
            push(f.key().to_string(), Transform::Raw { field: f }, sets);
        }
        for &f in TimeSeriesField::ALL {
            push(f.key().to_string(), Transform::TimeSeries { field: f }, vec![T]);
        }

        let cost = PriceField::Cost;
        let price = PriceField::Price;
        for &den in &[cost, price] {
            for &num in raw.iter().filter(|&&f| f != cost && f != den) {
                push(
                    format!("diff_{}_{}", num.key(), den.key()),
                    Transform::Difference { num, den },
                    vec![PT, PL],
                );
                push(
                    format!("margin_{}_{}", num.key(), den.key()),
                    Transform::Margin { num, den },
                    vec![PT, PL],
                );
            }
        }

        let mut baseline_log = Vec::new();
        for &num in config.baseline.iter().filter(|&&f| f != cost) {
            let slot = push(
                format!("log_{}_{}", num.key(), cost.key()),
                Transform::LogRatio { num, den: cost },
                vec![AL, PL],
            );
            baseline_log.push(LogFeature {
                slot,
                numerator: num,
                name: num.label().to_string(),
            });
        }
        for &num in config.baseline.iter().filter(|&&f| f != cost && f != price) {
            push(
                format!("log_{}_{}", num.key(), price.key()),
                Transform::LogRatio { num, den: price },
                vec![PL],
            );
        }

        for level in Level::ALL.iter().rev() {
            push(
                format!("h_{}", level.as_str()),
                Transform::Hierarchy { level: *level },
                vec![H],
            );
        }
        for &f in BinaryField::ALL {
            push(f.key().to_string(), Transform::Binary { field: f }, vec![B]);
        }
        for &f in CategoricalField::ALL {
            let codes = categorical_levels.get(f.key()).cloned().unwrap_or_default();
            for code in codes {
                push(
                    format!("{}={code}", f.key()),
                    Transform::OneHot { field: f, code },
                    vec![C],
                );
            }
        }
        for &f in OtherField::ALL {
            push(f.key().to_string(), Transform::Other { field: f }, vec![O]);
        }

        let mut counts = BTreeMap::new();
        for d in &features {
            for s in &d.sets {
                *counts.entry(*s).or_insert(0) += 1;
            }
        }

        let schema = FeatureSchema {
            format_version: SCHEMA_FORMAT_VERSION,
            c1: config.c1,
            c2: config.c2,
            margin_offset: config.margin_offset,
            features,
            categorical_levels,
            baseline: config.baseline.clone(),
            baseline_log,
            counts,
        };
        schema.check_invariants()?;
        Ok(schema)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn count(&self, set: FeatureSet) -> usize {
        self.counts.get(&set).copied().unwrap_or(0)
    }

    /// Issue names `L[i]`, aligned with [`Self::baseline_log_features`].
    pub fn issue_names(&self) -> Vec<String> {
        self.baseline_log.iter().map(|l| l.name.clone()).collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        use FeatureSet::*;
        let slots_in = |s: FeatureSet| -> Vec<usize> {
            self.features
                .iter()
                .enumerate()
                .filter(|(_, d)| d.in_set(s))
                .map(|(i, _)| i)
                .collect()
        };
        let p = slots_in(P);
        if !slots_in(A).iter().all(|i| p.contains(i)) {
            return Err(Error::Config("A must be a subset of P".into()));
        }
        let pl = slots_in(PL);
        if !slots_in(PT).iter().all(|i| pl.contains(i)) {
            return Err(Error::Config("P_T must be a subset of P_L".into()));
        }
        let al = slots_in(AL);
        if al.len() + 1 != slots_in(A).len() {
            return Err(Error::Config("|A_L| must equal |A| - 1".into()));
        }
        for i in &al {
            match self.features[*i].transform {
                Transform::LogRatio {
                    den: PriceField::Cost, ..
                } => {}
                _ => return Err(Error::Config("A_L features must divide by cost".into())),
            }
            if !self.baseline_log.iter().any(|l| l.slot == *i) {
                return Err(Error::Config(format!("no issue name for A_L slot {i}")));
            }
        }
        for (set, &n) in &self.counts {
            if slots_in(*set).len() != n {
                return Err(Error::Config(format!("declared count for {set:?} is stale")));
            }
        }
        Ok(())
    }

    fn slot_value(&self, t: &Transform, r: &ItemRecord) -> Option<f64> {
        match *t {
            Transform::Raw { field } => field.get(r),
            Transform::TimeSeries { field } => field.get(r),
            Transform::Difference { num, den } => difference(num.get(r), den.get(r)),
            Transform::Margin { num, den } => margin(num.get(r), den.get(r), self.margin_offset),
            Transform::LogRatio { num, den } => log_transform(num.get(r), den.get(r), self.c1, self.c2).ok().flatten(),
            Transform::Hierarchy { level } => Some(r.hierarchy.id_at(level) as f64),
            Transform::Binary { field } => Some(if field.get(r) { 1.0 } else { 0.0 }),
            Transform::OneHot { field, code } => Some(if field.get(r) == code { 1.0 } else { 0.0 }),
            Transform::Other { field } => field.get(r),
        }
    }

    /// The full vector used by the tree models, in schema order.
    pub fn build_feature_vector(&self, r: &ItemRecord) -> FeatureVector {
        let n = self.features.len();
        let mut values = Vec::with_capacity(n);
        let mut missing = Vec::with_capacity(n);
        for d in &self.features {
            match self.slot_value(&d.transform, r) {
                Some(v) => {
                    values.push(v);
                    missing.push(false);
                }
                None => {
                    values.push(f64::NAN);
                    missing.push(true);
                }
            }
        }
        FeatureVector { values, missing }
    }

    /// Only the price-transformed (difference and margin) slots, as
    /// `(slot index, value)` pairs.
    pub fn price_transforms(&self, r: &ItemRecord) -> Vec<(usize, Option<f64>)> {
        self.features
            .iter()
            .enumerate()
            .filter(|(_, d)| d.in_set(FeatureSet::PT))
            .map(|(i, d)| (i, self.slot_value(&d.transform, r)))
            .collect()
    }

    /// The baseline log-ratio features over cost, aligned with
    /// [`Self::issue_names`].
    pub fn baseline_log_features(&self, r: &ItemRecord) -> Vec<Option<f64>> {
        let cost = r.cost;
        self.baseline_log
            .iter()
            .map(|l| log_transform(l.numerator.get(r), cost, self.c1, self.c2).ok().flatten())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let schema: FeatureSchema = serde_json::from_str(s)?;
        if schema.format_version != SCHEMA_FORMAT_VERSION {
            return Err(Error::Bundle(format!(
                "unsupported schema format version {}",
                schema.format_version
            )));
        }
        schema.check_invariants()?;
        Ok(schema)
    }
}
