//! Seeded synthetic retail catalog with labeled anomaly injection.
//!
//! Normal items are drawn coherently: cost follows from price through a
//! markup with division, super-department, department, category and
//! subcategory effects, and reference prices sit near the regular price.
//! A few legitimate but unusual populations (clearance, bundles priced
//! against single-unit competitors, digital goods with tiny cost, marketplace
//! items without cost, subcategories with atypical markup) give the catalog
//! heavy tails that a flag-aware model can learn and a pure density model
//! cannot.
//!
//! Every record draws from its own ChaCha stream keyed by its index, so the
//! output does not depend on how generation is partitioned.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::normals_for_rate;
use crate::record::{write_jsonl, Hierarchy, ItemRecord, Level};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    DecimalShiftCost,
    DecimalShiftPrice,
    PriceCostSwap,
    StaleCompetitor,
    UnitError,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 5] = [
        AnomalyKind::DecimalShiftCost,
        AnomalyKind::DecimalShiftPrice,
        AnomalyKind::PriceCostSwap,
        AnomalyKind::StaleCompetitor,
        AnomalyKind::UnitError,
    ];

    /// Whether the kind can be applied to `r` without falling back.
    pub fn applies_to(self, r: &ItemRecord) -> bool {
        match self {
            AnomalyKind::DecimalShiftCost => r.cost.is_some(),
            AnomalyKind::DecimalShiftPrice => r.price.is_some(),
            AnomalyKind::PriceCostSwap => matches!((r.price, r.cost), (Some(p), Some(c)) if p != c),
            AnomalyKind::StaleCompetitor => {
                r.competitor_price.is_some() || r.competitor_price_2.is_some() || r.competitor_price_3.is_some()
            }
            AnomalyKind::UnitError => r.price.is_some() && r.unit_count > 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::DecimalShiftCost => "decimal_shift_cost",
            AnomalyKind::DecimalShiftPrice => "decimal_shift_price",
            AnomalyKind::PriceCostSwap => "price_cost_swap",
            AnomalyKind::StaleCompetitor => "stale_competitor",
            AnomalyKind::UnitError => "unit_error",
        }
    }
}

impl std::str::FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AnomalyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown anomaly kind {s:?}")))
    }
}

/// Children per parent at each level below division.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyShape {
    pub divisions: u32,
    pub super_departments: u32,
    pub departments: u32,
    pub categories: u32,
    pub subcategories: u32,
}

impl Default for HierarchyShape {
    fn default() -> Self {
        HierarchyShape {
            divisions: 4,
            super_departments: 2,
            departments: 3,
            categories: 4,
            subcategories: 4,
        }
    }
}

impl HierarchyShape {
    pub fn n_subcategories(&self) -> u32 {
        self.divisions * self.super_departments * self.departments * self.categories * self.subcategories
    }

    /// Path of the `index`-th subcategory. Ids are unique within a level and
    /// start at 1.
    pub fn path(&self, index: u32) -> Hierarchy {
        let sub = index + 1;
        let cat = index / self.subcategories + 1;
        let dept = (cat - 1) / self.categories + 1;
        let sdept = (dept - 1) / self.departments + 1;
        let div = (sdept - 1) / self.super_departments + 1;
        Hierarchy {
            division: div,
            super_department: sdept,
            department: dept,
            category: cat,
            subcategory: sub,
        }
    }
}

/// Magnitudes of injected errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionConfig {
    /// A decimal shift multiplies or divides by one of these, chosen
    /// uniformly.
    pub decimal_factors: Vec<f64>,
    /// Range of the factor applied to a stale competitor price.
    pub stale_factor: [f64; 2],
}

impl Default for InjectionConfig {
    fn default() -> Self {
        InjectionConfig {
            decimal_factors: vec![10.0],
            stale_factor: [3.0, 20.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CatalogConfig {
    pub seed: u64,
    pub n_normal: usize,
    pub n_anomalies: usize,
    pub shape: HierarchyShape,

    /// Median regular price over the catalog.
    pub price_median: f64,
    /// Log-scale spread of subcategory median prices.
    pub subcategory_price_spread: f64,
    /// Log-scale spread of item prices within a subcategory.
    pub item_price_spread: f64,

    /// Mean log markup, `ln(regular price / cost)`.
    pub markup: f64,
    /// Standard deviation of the markup effect added at each level, from
    /// division down to subcategory.
    pub markup_level_sd: [f64; 5],
    /// Fraction of subcategories with an atypical markup.
    pub outlier_subcategory_rate: f64,
    /// Standard deviation of an item's markup around its subcategory.
    pub item_markup_sd: f64,
    /// Bounds on `price / cost` for every normal item.
    pub margin_envelope: [f64; 2],

    /// Log-scale noise of reference prices around the regular price.
    pub reference_noise: f64,
    pub promo_rate: f64,
    pub promo_discount: [f64; 2],
    pub clearance_rate: f64,
    /// Clearance prices as a fraction of cost.
    pub clearance_price_to_cost: [f64; 2],
    pub multipack_rate: f64,
    /// Multipacks whose competitor and marketplace references are per unit.
    pub bundle_rate: f64,
    /// Items sold by third parties, without cost or store price.
    pub marketplace_rate: f64,
    /// Digital goods; cost as a fraction of price.
    pub digital_rate: f64,
    pub digital_cost_fraction: [f64; 2],

    pub inventory_median: f64,
    pub inventory_spread: f64,
    pub inventory_missing_rate: f64,

    /// Kinds to inject, drawn uniformly.
    pub kinds: Vec<AnomalyKind>,
    pub injection: InjectionConfig,
    /// Fraction of normal items corrupted without a label.
    pub contamination_rate: f64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        CatalogConfig {
            seed: 42,
            n_normal: 200_000,
            n_anomalies: 200,
            shape: HierarchyShape::default(),
            price_median: 25.0,
            subcategory_price_spread: 0.35,
            item_price_spread: 0.2,
            markup: 0.35,
            markup_level_sd: [0.4, 0.32, 0.32, 0.12, 0.08],
            outlier_subcategory_rate: 0.05,
            item_markup_sd: 0.25,
            margin_envelope: [0.3, 60.0],
            reference_noise: 0.03,
            promo_rate: 0.03,
            promo_discount: [0.05, 0.3],
            clearance_rate: 0.0005,
            clearance_price_to_cost: [0.4, 0.95],
            multipack_rate: 0.15,
            bundle_rate: 0.02,
            marketplace_rate: 0.02,
            digital_rate: 0.0,
            digital_cost_fraction: [0.08, 0.12],
            inventory_median: 25.0,
            inventory_spread: 1.2,
            inventory_missing_rate: 0.03,
            kinds: AnomalyKind::ALL.to_vec(),
            injection: InjectionConfig::default(),
            contamination_rate: 0.0,
        }
    }
}

impl CatalogConfig {
    /// Reads JSON, or TOML when the extension is `.toml`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: CatalogConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.shape;
        if [
            s.divisions,
            s.super_departments,
            s.departments,
            s.categories,
            s.subcategories,
        ]
        .contains(&0)
        {
            return Err(Error::Config("every hierarchy level needs at least one node".into()));
        }
        if s.n_subcategories() > 1_000_000 {
            return Err(Error::Config("hierarchy too large".into()));
        }
        if self.n_normal == 0 {
            return Err(Error::Config("n_normal must be positive".into()));
        }
        let rate = self.n_anomalies as f64 / (self.n_normal + self.n_anomalies) as f64;
        if rate >= 0.5 {
            return Err(Error::Config(format!("anomaly rate {rate} must be below 0.5")));
        }
        if self.n_anomalies > 0 && self.kinds.is_empty() {
            return Err(Error::Config("no anomaly kinds enabled".into()));
        }
        let [lo, hi] = self.margin_envelope;
        if !(lo > 0.0 && lo < 1.0 && hi > 1.0) {
            return Err(Error::Config("margin_envelope must satisfy 0 < lo < 1 < hi".into()));
        }
        for (name, r) in [
            ("promo_rate", self.promo_rate),
            ("clearance_rate", self.clearance_rate),
            ("multipack_rate", self.multipack_rate),
            ("bundle_rate", self.bundle_rate),
            ("marketplace_rate", self.marketplace_rate),
            ("digital_rate", self.digital_rate),
            ("outlier_subcategory_rate", self.outlier_subcategory_rate),
            ("inventory_missing_rate", self.inventory_missing_rate),
            ("contamination_rate", self.contamination_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        for (name, [a, b]) in [
            ("promo_discount", self.promo_discount),
            ("clearance_price_to_cost", self.clearance_price_to_cost),
            ("digital_cost_fraction", self.digital_cost_fraction),
        ] {
            if !(a > 0.0 && a < b && b <= 1.0) {
                return Err(Error::Config(format!("{name} must satisfy 0 < lo < hi <= 1")));
            }
        }
        let inj = &self.injection;
        if inj.decimal_factors.is_empty() || inj.decimal_factors.iter().any(|&f| !(f > 1.0 && f.is_finite())) {
            return Err(Error::Config("decimal_factors must be non-empty and each > 1".into()));
        }
        let [a, b] = inj.stale_factor;
        if !(a > 1.0 && a <= b && b.is_finite()) {
            return Err(Error::Config("stale_factor must satisfy 1 < lo <= hi".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledDataset {
    pub records: Vec<ItemRecord>,
    pub labels: Vec<bool>,
    /// Applied kind for each positive.
    pub kinds: Vec<Option<AnomalyKind>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    item_id: String,
    label: u8,
    kind: Option<AnomalyKind>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            kinds: idx.iter().map(|&i| self.kinds[i]).collect(),
        }
    }

    /// Writes `items.jsonl` and `labels.csv` (item_id, label, kind) to `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join("items.jsonl"), &self.records)?;
        self.write_labels(&dir.join("labels.csv"))
    }

    pub fn write_labels(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for ((r, &l), k) in self.records.iter().zip(&self.labels).zip(&self.kinds) {
            w.serialize(LabelRow {
                item_id: r.item_id.clone(),
                label: l as u8,
                kind: *k,
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a directory written by [`LabeledDataset::write`]. Every record
    /// must have a label row with the same item id, in the same order.
    pub fn read(dir: &Path) -> Result<Self> {
        let out = crate::record::read_jsonl(&dir.join("items.jsonl"))?;
        if let Some(m) = out.malformed.first() {
            return Err(Error::Record(format!("items.jsonl line {}: {}", m.line, m.reason)));
        }
        let path = dir.join("labels.csv");
        let mut rdr = csv::Reader::from_path(&path)?;
        let rows: Vec<LabelRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        if rows.len() != out.records.len() {
            return Err(Error::Record(format!(
                "{} records but {} label rows",
                out.records.len(),
                rows.len()
            )));
        }
        for (r, l) in out.records.iter().zip(&rows) {
            if r.item_id != l.item_id {
                return Err(Error::Record(format!(
                    "label row {} does not match record {}",
                    l.item_id, r.item_id
                )));
            }
        }
        Ok(LabeledDataset {
            labels: rows.iter().map(|r| r.label == 1).collect(),
            kinds: rows.iter().map(|r| r.kind).collect(),
            records: out.records,
        })
    }
}

/// Per-subcategory generation parameters.
#[derive(Clone, Debug)]
struct SubcategoryParams {
    hierarchy: Hierarchy,
    log_price: f64,
    markup: f64,
}

fn stream_rng(seed: u64, salt: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(stream);
    rng
}

const SALT_ITEMS: u64 = 0;
const SALT_NODES: u64 = 0x6e6f_6465;
const SALT_INJECT: u64 = 0x696e_6a65;

fn node_effects(config: &CatalogConfig) -> Vec<SubcategoryParams> {
    let shape = &config.shape;
    let levels = [
        Level::Division,
        Level::SuperDepartment,
        Level::Department,
        Level::Category,
        Level::Subcategory,
    ];
    let effect = |level_idx: usize, id: u32| -> f64 {
        let mut rng = stream_rng(config.seed, SALT_NODES, ((level_idx as u64) << 32) | id as u64);
        let sd = config.markup_level_sd[level_idx];
        if sd > 0.0 {
            Normal::new(0.0, sd).unwrap().sample(&mut rng)
        } else {
            0.0
        }
    };
    (0..shape.n_subcategories())
        .map(|s| {
            let h = shape.path(s);
            let mut markup = config.markup;
            for (i, level) in levels.iter().enumerate() {
                markup += effect(i, h.id_at(*level));
            }
            let mut rng = stream_rng(config.seed, SALT_NODES, (9 << 32) | s as u64);
            if rng.random_bool(config.outlier_subcategory_rate) {
                markup += if rng.random_bool(0.7) {
                    rng.random_range(0.5..1.0)
                } else {
                    -rng.random_range(0.2..0.28)
                };
            }
            let log_price = config.price_median.ln()
                + Normal::new(0.0, config.subcategory_price_spread.max(1e-12))
                    .unwrap()
                    .sample(&mut rng);
            SubcategoryParams {
                hierarchy: h,
                log_price,
                markup,
            }
        })
        .collect()
}

fn cents(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn near(rng: &mut ChaCha8Rng, base: f64, noise: f64) -> f64 {
    let n = Normal::new(0.0, noise.max(1e-12)).unwrap().sample(rng);
    cents(base * n.exp()).max(0.01)
}

fn normal_item(config: &CatalogConfig, subcats: &[SubcategoryParams], index: usize) -> ItemRecord {
    let mut rng = stream_rng(config.seed, SALT_ITEMS, index as u64);
    let sub = &subcats[rng.random_range(0..subcats.len())];
    let mut r = ItemRecord::new(format!("item-{index:07}"), sub.hierarchy);
    let [env_lo, env_hi] = config.margin_envelope;

    let regular = cents(
        (sub.log_price
            + Normal::new(0.0, config.item_price_spread.max(1e-12))
                .unwrap()
                .sample(&mut rng))
        .exp(),
    )
    .max(0.5);
    let markup = sub.markup
        + Normal::new(0.0, config.item_markup_sd.max(1e-12))
            .unwrap()
            .sample(&mut rng);

    r.is_digital = rng.random_bool(config.digital_rate);
    let mut cost = if r.is_digital {
        regular * rng.random_range(config.digital_cost_fraction[0]..config.digital_cost_fraction[1])
    } else {
        regular / markup.exp()
    };
    cost = cents(cost.clamp(regular / env_hi, regular / env_lo)).max(0.01);

    // digital goods are never packed or cleared out
    r.unit_count = if !r.is_digital && rng.random_bool(config.multipack_rate) {
        rng.random_range(2..=12)
    } else {
        1
    };
    r.is_bundle = r.unit_count > 1 && rng.random_bool((config.bundle_rate / config.multipack_rate.max(1e-12)).min(1.0));

    let mut price = regular;
    r.is_clearance = !r.is_digital && rng.random_bool(config.clearance_rate);
    if r.is_clearance {
        let [a, b] = config.clearance_price_to_cost;
        price = cost * rng.random_range(a..b);
    } else if rng.random_bool(config.promo_rate) {
        r.is_promo = true;
        r.promotion_type = rng.random_range(1..=4);
        price = regular * (1.0 - rng.random_range(config.promo_discount[0]..config.promo_discount[1]));
    }
    price = cents(price.clamp(cost * env_lo, cost * env_hi)).max(0.01);
    r.price = Some(price);
    r.cost = Some(cost);

    let noise = config.reference_noise;
    // bundles are priced against single-unit listings
    let per_unit = if r.is_bundle { r.unit_count as f64 } else { 1.0 };
    r.competitor_price = rng.random_bool(0.85).then(|| near(&mut rng, regular / per_unit, noise));
    r.competitor_price_2 = rng
        .random_bool(0.75)
        .then(|| near(&mut rng, regular / per_unit, noise * 1.5));
    r.competitor_price_3 = rng.random_bool(0.6).then(|| near(&mut rng, regular, noise * 2.0));
    r.store_price = rng.random_bool(0.7).then(|| near(&mut rng, regular, noise * 0.5));
    r.marketplace_price = rng
        .random_bool(0.65)
        .then(|| near(&mut rng, regular * 1.02 / per_unit, noise * 1.5));
    let list = regular * rng.random_range(1.0..1.25);
    r.list_price = rng.random_bool(0.8).then(|| cents(list));
    r.msrp = rng.random_bool(0.7).then(|| cents(list * rng.random_range(1.0..1.1)));
    r.is_map_restricted = rng.random_bool(0.2);
    r.map_price = r
        .is_map_restricted
        .then(|| cents(regular * rng.random_range(0.85..0.95)));
    r.previous_price = rng.random_bool(0.9).then(|| near(&mut rng, regular, noise * 0.5));
    r.base_price = rng.random_bool(0.9).then_some(regular);

    let hist = near(&mut rng, regular, 0.04);
    r.avg_hist_price = Some(hist);
    r.hist_price_std = Some(cents(regular * rng.random_range(0.0..0.08)));
    r.pct_price_swing = Some((price - hist) / hist);

    r.is_marketplace = rng.random_bool(config.marketplace_rate);
    if r.is_marketplace {
        r.cost = None;
        r.store_price = None;
        r.fulfillment_type = 2;
    } else {
        r.fulfillment_type = rng.random_range(0..2);
    }
    r.pricing_algo_type = rng.random_range(0..4);

    r.inventory = (!rng.random_bool(config.inventory_missing_rate)).then(|| {
        LogNormal::new(config.inventory_median.ln(), config.inventory_spread.max(1e-12))
            .unwrap()
            .sample(&mut rng)
            .round() as u64
    });
    r.avg_rating = rng
        .random_bool(0.8)
        .then(|| (rng.random_range(2.5..5.0f64) * 10.0).round() / 10.0);
    r
}

fn refresh_swing(r: &mut ItemRecord) {
    if let (Some(p), Some(h)) = (r.price, r.avg_hist_price) {
        if h > 0.0 {
            r.pct_price_swing = Some((p - h) / h);
        }
    }
}

fn decimal_shift(rng: &mut ChaCha8Rng, factors: &[f64], x: f64) -> f64 {
    let f = *factors.choose(rng).unwrap_or(&10.0);
    if rng.random_bool(0.5) {
        x * f
    } else {
        (x / f).max(0.001)
    }
}

/// Applies `kind` to `record`, returning the kind actually applied. Kinds
/// that do not apply fall back to `DecimalShiftCost`, and that falls back to
/// `DecimalShiftPrice` when cost is missing.
pub fn inject_anomaly(
    record: &mut ItemRecord,
    kind: AnomalyKind,
    config: &InjectionConfig,
    rng: &mut ChaCha8Rng,
) -> AnomalyKind {
    let applied = match kind {
        AnomalyKind::PriceCostSwap => match (record.price, record.cost) {
            (Some(p), Some(c)) if p != c => {
                record.price = Some(c);
                record.cost = Some(p);
                kind
            }
            _ => AnomalyKind::DecimalShiftCost,
        },
        AnomalyKind::StaleCompetitor => {
            let present: Vec<u8> = [
                record.competitor_price.is_some(),
                record.competitor_price_2.is_some(),
                record.competitor_price_3.is_some(),
            ]
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .map(|(i, _)| i as u8)
            .collect();
            match present.choose(rng) {
                Some(&i) => {
                    let [lo, hi] = config.stale_factor;
                    let factor = rng.random_range(lo..=hi);
                    let slot = match i {
                        0 => &mut record.competitor_price,
                        1 => &mut record.competitor_price_2,
                        _ => &mut record.competitor_price_3,
                    };
                    *slot = slot.map(|v| v * factor);
                    kind
                }
                None => AnomalyKind::DecimalShiftCost,
            }
        }
        AnomalyKind::UnitError => match record.price {
            Some(p) if record.unit_count > 1 => {
                record.price = Some(p / record.unit_count as f64);
                kind
            }
            _ => AnomalyKind::DecimalShiftCost,
        },
        other => other,
    };
    let applied = match applied {
        AnomalyKind::DecimalShiftCost if record.cost.is_none() => AnomalyKind::DecimalShiftPrice,
        k => k,
    };
    match applied {
        AnomalyKind::DecimalShiftCost => {
            record.cost = record.cost.map(|c| decimal_shift(rng, &config.decimal_factors, c))
        }
        AnomalyKind::DecimalShiftPrice => {
            record.price = record.price.map(|p| decimal_shift(rng, &config.decimal_factors, p))
        }
        _ => {}
    }
    refresh_swing(record);
    applied
}

/// Generates `n_normal + n_anomalies` records. Positives are normal draws
/// corrupted after the fact: each seeded position draws a kind, which lands
/// on the first unlabeled record from there on that it applies to, so the
/// applied kinds follow `kinds` rather than the fallback chain.
pub fn generate_catalog(config: &CatalogConfig) -> Result<LabeledDataset> {
    config.validate()?;
    let subcats = node_effects(config);
    let n = config.n_normal + config.n_anomalies;
    let mut records: Vec<ItemRecord> = (0..n)
        .into_par_iter()
        .map(|i| normal_item(config, &subcats, i))
        .collect();

    let mut rng = stream_rng(config.seed, SALT_INJECT, u64::MAX);
    let mut positions = rand::seq::index::sample(&mut rng, n, config.n_anomalies).into_vec();
    positions.sort_unstable();
    let mut labels = vec![false; n];
    let mut kinds = vec![None; n];
    for &p in &positions {
        let mut rng = stream_rng(config.seed, SALT_INJECT, p as u64);
        let kind = *config.kinds.choose(&mut rng).expect("kinds validated non-empty");
        let free = |j: &usize| !labels[*j];
        let i = (p..n)
            .chain(0..p)
            .filter(free)
            .find(|&j| kind.applies_to(&records[j]))
            .or_else(|| (p..n).chain(0..p).find(free))
            .expect("fewer positives than records");
        kinds[i] = Some(inject_anomaly(&mut records[i], kind, &config.injection, &mut rng));
        labels[i] = true;
    }
    if config.contamination_rate > 0.0 {
        for (i, r) in records.iter_mut().enumerate() {
            if labels[i] {
                continue;
            }
            let mut rng = stream_rng(config.seed, SALT_INJECT ^ 0xc0, i as u64);
            if rng.random_bool(config.contamination_rate) {
                let kind = *config.kinds.choose(&mut rng).unwrap_or(&AnomalyKind::DecimalShiftCost);
                inject_anomaly(r, kind, &config.injection, &mut rng);
            }
        }
    }
    Ok(LabeledDataset { records, labels, kinds })
}

/// Splits positives evenly (the odd one goes to train) and gives the test
/// side exactly enough normals for `test_rate`; the remaining normals train.
pub fn train_test_split(data: &LabeledDataset, test_rate: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(test_rate > 0.0 && test_rate < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_rate must be in (0, 1), got {test_rate}"
        )));
    }
    let mut pos: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i]).collect();
    let mut neg: Vec<usize> = (0..data.len()).filter(|&i| !data.labels[i]).collect();
    if pos.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 positives to split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let n_test_pos = pos.len() / 2;
    let n_test_neg = normals_for_rate(n_test_pos, test_rate);
    if n_test_neg > neg.len() {
        return Err(Error::InvalidArgument(format!(
            "test rate {test_rate} needs {n_test_neg} normals, only {} available",
            neg.len()
        )));
    }
    let mut test: Vec<usize> = pos[..n_test_pos].iter().chain(&neg[..n_test_neg]).copied().collect();
    let mut train: Vec<usize> = pos[n_test_pos..].iter().chain(&neg[n_test_neg..]).copied().collect();
    test.sort_unstable();
    train.sort_unstable();
    Ok((data.subset(&train), data.subset(&test)))
}
