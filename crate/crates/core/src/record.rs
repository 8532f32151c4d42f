//! Item records: the raw pricing snapshot for one item, plus the product
//! hierarchy it lives in and line-delimited JSON / CSV readers and writers.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// Product hierarchy levels, finest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Subcategory,
    Category,
    Department,
    SuperDepartment,
    Division,
}

impl Level {
    pub const ALL: [Level; 5] = [
        Level::Subcategory,
        Level::Category,
        Level::Department,
        Level::SuperDepartment,
        Level::Division,
    ];

    /// The next coarser level, `None` above division.
    pub fn parent(self) -> Option<Level> {
        match self {
            Level::Subcategory => Some(Level::Category),
            Level::Category => Some(Level::Department),
            Level::Department => Some(Level::SuperDepartment),
            Level::SuperDepartment => Some(Level::Division),
            Level::Division => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Subcategory => "subcategory",
            Level::Category => "category",
            Level::Department => "department",
            Level::SuperDepartment => "super_department",
            Level::Division => "division",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "subcategory" | "subcat" => Ok(Level::Subcategory),
            "category" | "cat" => Ok(Level::Category),
            "department" | "dep" | "dept" => Ok(Level::Department),
            "super_department" | "superdep" => Ok(Level::SuperDepartment),
            "division" | "div" => Ok(Level::Division),
            other => Err(Error::InvalidArgument(format!("unknown hierarchy level `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Hierarchy {
    pub division: u32,
    pub super_department: u32,
    pub department: u32,
    pub category: u32,
    pub subcategory: u32,
}

impl Hierarchy {
    pub fn id_at(&self, level: Level) -> u32 {
        match level {
            Level::Subcategory => self.subcategory,
            Level::Category => self.category,
            Level::Department => self.department,
            Level::SuperDepartment => self.super_department,
            Level::Division => self.division,
        }
    }
}

/// One item's pricing snapshot. Currency fields are `None` when missing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ItemRecord {
    pub item_id: String,
    pub hierarchy: Hierarchy,

    pub price: Option<f64>,
    pub cost: Option<f64>,
    pub competitor_price: Option<f64>,
    pub store_price: Option<f64>,
    pub marketplace_price: Option<f64>,
    pub list_price: Option<f64>,
    pub competitor_price_2: Option<f64>,
    pub competitor_price_3: Option<f64>,
    pub msrp: Option<f64>,
    pub map_price: Option<f64>,
    pub previous_price: Option<f64>,
    pub base_price: Option<f64>,

    pub avg_hist_price: Option<f64>,
    pub hist_price_std: Option<f64>,
    pub pct_price_swing: Option<f64>,

    pub is_promo: bool,
    pub is_bundle: bool,
    pub is_clearance: bool,
    pub is_marketplace: bool,
    pub is_digital: bool,
    pub is_map_restricted: bool,

    pub promotion_type: u8,
    pub pricing_algo_type: u8,
    pub fulfillment_type: u8,

    pub inventory: Option<u64>,
    pub avg_rating: Option<f64>,
    #[serde(default = "one")]
    pub unit_count: u32,
}

fn one() -> u32 {
    1
}

impl ItemRecord {
    pub fn new(item_id: impl Into<String>, hierarchy: Hierarchy) -> Self {
        ItemRecord {
            item_id: item_id.into(),
            hierarchy,
            unit_count: 1,
            ..Default::default()
        }
    }

    /// Checks the field-level invariants. Hierarchy paths are checked
    /// separately against a [`HierarchyTree`].
    pub fn validate(&self) -> Result<()> {
        if self.item_id.is_empty() {
            return Err(Error::Record("empty item_id".into()));
        }
        for field in PriceField::ALL {
            if let Some(v) = field.get(self) {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Record(format!(
                        "{}: {} must be finite and >= 0, got {v}",
                        self.item_id,
                        field.key()
                    )));
                }
            }
        }
        for field in TimeSeriesField::ALL {
            if let Some(v) = field.get(self) {
                if !v.is_finite() {
                    return Err(Error::Record(format!(
                        "{}: {} must be finite",
                        self.item_id,
                        field.key()
                    )));
                }
            }
        }
        if let Some(r) = self.avg_rating {
            if !(0.0..=5.0).contains(&r) {
                return Err(Error::Record(format!(
                    "{}: avg_rating {r} outside [0, 5]",
                    self.item_id
                )));
            }
        }
        if self.unit_count == 0 {
            return Err(Error::Record(format!("{}: unit_count must be >= 1", self.item_id)));
        }
        Ok(())
    }
}

macro_rules! field_enum {
    ($(#[$meta:meta])* $name:ident : $ty:ty { $($variant:ident => $field:ident, $label:literal;)+ }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant,)+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant,)+];

            /// Field name as it appears in serialized records.
            pub fn key(self) -> &'static str {
                match self {
                    $($name::$variant => stringify!($field),)+
                }
            }

            /// Display name used in explanations and reports.
            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label,)+
                }
            }

            pub fn get(self, r: &ItemRecord) -> $ty {
                match self {
                    $($name::$variant => r.$field,)+
                }
            }

            pub fn set(self, r: &mut ItemRecord, value: $ty) {
                match self {
                    $($name::$variant => r.$field = value,)+
                }
            }
        }
    };
}

field_enum! {
    /// Raw price-based fields.
    PriceField: Option<f64> {
        Price => price, "Price";
        Cost => cost, "Cost";
        CompetitorPrice => competitor_price, "CompetitorPrice";
        StorePrice => store_price, "StorePrice";
        MarketplacePrice => marketplace_price, "MarketplacePrice";
        ListPrice => list_price, "ListPrice";
        CompetitorPrice2 => competitor_price_2, "CompetitorPrice2";
        CompetitorPrice3 => competitor_price_3, "CompetitorPrice3";
        Msrp => msrp, "Msrp";
        MapPrice => map_price, "MapPrice";
        PreviousPrice => previous_price, "PreviousPrice";
        BasePrice => base_price, "BasePrice";
    }
}

field_enum! {
    TimeSeriesField: Option<f64> {
        AvgHistPrice => avg_hist_price, "AvgHistPrice";
        HistPriceStd => hist_price_std, "HistPriceStd";
        PctPriceSwing => pct_price_swing, "PctPriceSwing";
    }
}

field_enum! {
    BinaryField: bool {
        IsPromo => is_promo, "IsPromo";
        IsBundle => is_bundle, "IsBundle";
        IsClearance => is_clearance, "IsClearance";
        IsMarketplace => is_marketplace, "IsMarketplace";
        IsDigital => is_digital, "IsDigital";
        IsMapRestricted => is_map_restricted, "IsMapRestricted";
    }
}

field_enum! {
    CategoricalField: u8 {
        PromotionType => promotion_type, "PromotionType";
        PricingAlgoType => pricing_algo_type, "PricingAlgoType";
        FulfillmentType => fulfillment_type, "FulfillmentType";
    }
}

/// Other numeric fields, read as `f64`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OtherField {
    Inventory,
    AvgRating,
    UnitCount,
}

impl OtherField {
    pub const ALL: &'static [OtherField] = &[OtherField::Inventory, OtherField::AvgRating, OtherField::UnitCount];

    pub fn key(self) -> &'static str {
        match self {
            OtherField::Inventory => "inventory",
            OtherField::AvgRating => "avg_rating",
            OtherField::UnitCount => "unit_count",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            OtherField::Inventory => "Inventory",
            OtherField::AvgRating => "AvgRating",
            OtherField::UnitCount => "UnitCount",
        }
    }

    pub fn get(self, r: &ItemRecord) -> Option<f64> {
        match self {
            OtherField::Inventory => r.inventory.map(|v| v as f64),
            OtherField::AvgRating => r.avg_rating,
            OtherField::UnitCount => Some(r.unit_count as f64),
        }
    }
}

/// Parent links observed for every hierarchy node, used to check that a
/// record's path is consistent (a child always maps to the same parent).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct HierarchyTree {
    parents: HashMap<Level, HashMap<u32, u32>>,
}

impl HierarchyTree {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a ItemRecord>) -> Result<Self> {
        let mut tree = HierarchyTree::default();
        for r in records {
            tree.insert(&r.hierarchy)?;
        }
        Ok(tree)
    }

    pub fn insert(&mut self, h: &Hierarchy) -> Result<()> {
        for level in Level::ALL {
            let Some(parent) = level.parent() else { break };
            let child_id = h.id_at(level);
            let parent_id = h.id_at(parent);
            let entry = self.parents.entry(level).or_default();
            match entry.get(&child_id) {
                Some(&p) if p != parent_id => {
                    return Err(Error::Record(format!(
                        "{level} {child_id} has parent {p} but record claims {parent_id}"
                    )))
                }
                Some(_) => {}
                None => {
                    entry.insert(child_id, parent_id);
                }
            }
        }
        Ok(())
    }

    /// Ok when every link of `h` that this tree knows about agrees with it.
    pub fn validate(&self, h: &Hierarchy) -> Result<()> {
        for level in Level::ALL {
            let Some(parent) = level.parent() else { break };
            if let Some(&p) = self.parents.get(&level).and_then(|m| m.get(&h.id_at(level))) {
                if p != h.id_at(parent) {
                    return Err(Error::Record(format!(
                        "{level} {} belongs to {parent} {p}, not {}",
                        h.id_at(level),
                        h.id_at(parent)
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn node_count(&self, level: Level) -> usize {
        match level.parent() {
            Some(_) => self.parents.get(&level).map_or(0, HashMap::len),
            None => {
                let mut ids: Vec<u32> = self
                    .parents
                    .get(&Level::SuperDepartment)
                    .map(|m| m.values().copied().collect())
                    .unwrap_or_default();
                ids.sort_unstable();
                ids.dedup();
                ids.len()
            }
        }
    }
}

// ---------------------------------------------------------------------------
// IO
// ---------------------------------------------------------------------------

/// A line (1-based) that failed to parse, with the reason.
#[derive(Clone, Debug)]
pub struct Malformed {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct ReadOutcome {
    pub records: Vec<ItemRecord>,
    pub malformed: Vec<Malformed>,
}

impl ReadOutcome {
    pub fn total_rows(&self) -> usize {
        self.records.len() + self.malformed.len()
    }
}

/// Reads records from `.jsonl`/`.json`/`.ndjson` or `.csv`, choosing the
/// format by extension. Rows that fail to parse or validate are collected
/// in [`ReadOutcome::malformed`] rather than aborting the read.
pub fn read_records(path: &Path) -> Result<ReadOutcome> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_csv(path),
        _ => read_jsonl(path),
    }
}

pub fn read_jsonl(path: &Path) -> Result<ReadOutcome> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = ReadOutcome::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_json_record(&line) {
            Ok(r) => out.records.push(r),
            Err(e) => out.malformed.push(Malformed {
                line: idx + 1,
                reason: e.to_string(),
            }),
        }
    }
    Ok(out)
}

pub fn parse_json_record(s: &str) -> Result<ItemRecord> {
    let r: ItemRecord = serde_json::from_str(s)?;
    r.validate()?;
    Ok(r)
}

pub fn write_jsonl<'a>(path: &Path, records: impl IntoIterator<Item = &'a ItemRecord>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Flat CSV row; hierarchy ids are spread into their own columns.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct CsvRow {
    item_id: String,
    division: u32,
    super_department: u32,
    department: u32,
    category: u32,
    subcategory: u32,
    price: Option<f64>,
    cost: Option<f64>,
    competitor_price: Option<f64>,
    store_price: Option<f64>,
    marketplace_price: Option<f64>,
    list_price: Option<f64>,
    competitor_price_2: Option<f64>,
    competitor_price_3: Option<f64>,
    msrp: Option<f64>,
    map_price: Option<f64>,
    previous_price: Option<f64>,
    base_price: Option<f64>,
    avg_hist_price: Option<f64>,
    hist_price_std: Option<f64>,
    pct_price_swing: Option<f64>,
    #[serde(deserialize_with = "flexible_bool")]
    is_promo: bool,
    #[serde(deserialize_with = "flexible_bool")]
    is_bundle: bool,
    #[serde(deserialize_with = "flexible_bool")]
    is_clearance: bool,
    #[serde(deserialize_with = "flexible_bool")]
    is_marketplace: bool,
    #[serde(deserialize_with = "flexible_bool")]
    is_digital: bool,
    #[serde(deserialize_with = "flexible_bool")]
    is_map_restricted: bool,
    promotion_type: u8,
    pricing_algo_type: u8,
    fulfillment_type: u8,
    inventory: Option<u64>,
    avg_rating: Option<f64>,
    unit_count: Option<u32>,
}

fn flexible_bool<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    let s = String::deserialize(d)?;
    match s.trim().to_ascii_lowercase().as_str() {
        "" | "0" | "false" | "f" | "no" => Ok(false),
        "1" | "true" | "t" | "yes" => Ok(true),
        other => Err(serde::de::Error::custom(format!("not a boolean: `{other}`"))),
    }
}

impl From<CsvRow> for ItemRecord {
    fn from(c: CsvRow) -> Self {
        ItemRecord {
            item_id: c.item_id,
            hierarchy: Hierarchy {
                division: c.division,
                super_department: c.super_department,
                department: c.department,
                category: c.category,
                subcategory: c.subcategory,
            },
            price: c.price,
            cost: c.cost,
            competitor_price: c.competitor_price,
            store_price: c.store_price,
            marketplace_price: c.marketplace_price,
            list_price: c.list_price,
            competitor_price_2: c.competitor_price_2,
            competitor_price_3: c.competitor_price_3,
            msrp: c.msrp,
            map_price: c.map_price,
            previous_price: c.previous_price,
            base_price: c.base_price,
            avg_hist_price: c.avg_hist_price,
            hist_price_std: c.hist_price_std,
            pct_price_swing: c.pct_price_swing,
            is_promo: c.is_promo,
            is_bundle: c.is_bundle,
            is_clearance: c.is_clearance,
            is_marketplace: c.is_marketplace,
            is_digital: c.is_digital,
            is_map_restricted: c.is_map_restricted,
            promotion_type: c.promotion_type,
            pricing_algo_type: c.pricing_algo_type,
            fulfillment_type: c.fulfillment_type,
            inventory: c.inventory,
            avg_rating: c.avg_rating,
            unit_count: c.unit_count.unwrap_or(1),
        }
    }
}

impl From<&ItemRecord> for CsvRow {
    fn from(r: &ItemRecord) -> Self {
        let h = r.hierarchy;
        CsvRow {
            item_id: r.item_id.clone(),
            division: h.division,
            super_department: h.super_department,
            department: h.department,
            category: h.category,
            subcategory: h.subcategory,
            price: r.price,
            cost: r.cost,
            competitor_price: r.competitor_price,
            store_price: r.store_price,
            marketplace_price: r.marketplace_price,
            list_price: r.list_price,
            competitor_price_2: r.competitor_price_2,
            competitor_price_3: r.competitor_price_3,
            msrp: r.msrp,
            map_price: r.map_price,
            previous_price: r.previous_price,
            base_price: r.base_price,
            avg_hist_price: r.avg_hist_price,
            hist_price_std: r.hist_price_std,
            pct_price_swing: r.pct_price_swing,
            is_promo: r.is_promo,
            is_bundle: r.is_bundle,
            is_clearance: r.is_clearance,
            is_marketplace: r.is_marketplace,
            is_digital: r.is_digital,
            is_map_restricted: r.is_map_restricted,
            promotion_type: r.promotion_type,
            pricing_algo_type: r.pricing_algo_type,
            fulfillment_type: r.fulfillment_type,
            inventory: r.inventory,
            avg_rating: r.avg_rating,
            unit_count: Some(r.unit_count),
        }
    }
}

pub fn read_csv(path: &Path) -> Result<ReadOutcome> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Record(format!("{other:?}")),
        })?;
    let mut out = ReadOutcome::default();
    for (idx, row) in reader.deserialize::<CsvRow>().enumerate() {
        // header is line 1
        let line = idx + 2;
        let parsed = row
            .map_err(Error::from)
            .map(ItemRecord::from)
            .and_then(|r| r.validate().map(|_| r));
        match parsed {
            Ok(r) => out.records.push(r),
            Err(e) => out.malformed.push(Malformed {
                line,
                reason: e.to_string(),
            }),
        }
    }
    Ok(out)
}

pub fn write_csv<'a>(path: &Path, records: impl IntoIterator<Item = &'a ItemRecord>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(CsvRow::from(r))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec() -> ItemRecord {
        let mut r = ItemRecord::new(
            "sku-1",
            Hierarchy {
                division: 1,
                super_department: 10,
                department: 100,
                category: 1000,
                subcategory: 10000,
            },
        );
        r.price = Some(12.0);
        r.cost = Some(10.0);
        r.inventory = Some(4);
        r.is_promo = true;
        r
    }

    #[test]
    fn json_missing_fields_default_to_none() {
        let r: ItemRecord = serde_json::from_str(r#"{"item_id":"a","price":3.5,"cost":null}"#).unwrap();
        assert_eq!(r.price, Some(3.5));
        assert_eq!(r.cost, None);
        assert_eq!(r.competitor_price, None);
        assert!(!r.is_promo);
    }

    #[test]
    fn validate_rejects_negative_currency() {
        let mut r = rec();
        r.cost = Some(-1.0);
        assert!(r.validate().is_err());
        r.cost = Some(f64::INFINITY);
        assert!(r.validate().is_err());
    }

    #[test]
    fn validate_rejects_zero_unit_count_and_bad_rating() {
        let mut r = rec();
        r.unit_count = 0;
        assert!(r.validate().is_err());
        let mut r = rec();
        r.avg_rating = Some(5.5);
        assert!(r.validate().is_err());
    }

    #[test]
    fn hierarchy_tree_detects_inconsistent_parent() {
        let a = rec();
        let mut tree = HierarchyTree::from_records([&a]).unwrap();
        let mut b = a.clone();
        b.hierarchy.department = 101;
        assert!(tree.validate(&b.hierarchy).is_err());
        assert!(tree.insert(&b.hierarchy).is_err());
        assert!(tree.validate(&a.hierarchy).is_ok());
        assert_eq!(tree.node_count(Level::Division), 1);
        assert_eq!(tree.node_count(Level::Subcategory), 1);
    }

    #[test]
    fn csv_round_trip_with_empty_as_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.csv");
        let a = rec();
        write_csv(&path, [&a]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().starts_with("item_id,division"));
        let back = read_csv(&path).unwrap();
        assert!(back.malformed.is_empty());
        assert_eq!(back.records, vec![a]);
    }

    #[test]
    fn malformed_lines_are_collected_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        std::fs::write(
            &path,
            "{\"item_id\":\"a\",\"price\":1}\nnot json\n{\"item_id\":\"b\",\"cost\":-3}\n",
        )
        .unwrap();
        let out = read_jsonl(&path).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.malformed.len(), 2);
        assert_eq!(out.malformed[0].line, 2);
        assert_eq!(out.total_rows(), 3);
    }

    #[test]
    fn level_parsing_and_chain() {
        assert_eq!("department".parse::<Level>().unwrap(), Level::Department);
        assert_eq!("super-department".parse::<Level>().unwrap(), Level::SuperDepartment);
        assert!("aisle".parse::<Level>().is_err());
        let mut chain = vec![Level::Subcategory];
        while let Some(p) = chain.last().unwrap().parent() {
            chain.push(p);
        }
        assert_eq!(chain, Level::ALL.to_vec());
    }
}
