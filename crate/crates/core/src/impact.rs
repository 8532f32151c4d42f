//! Business-impact estimates, priority tiers, and the combined GNB + random
//! forest ranking used for batch alerting.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::error::{Error, Result};
use crate::explain::suspected_issues;
use crate::record::{ItemRecord, PriceField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpactResult {
    /// Exposure from an incorrectly low price.
    pub profit_loss: f64,
    /// Exposure from an incorrectly high price.
    pub foregone_revenue: f64,
    pub business_impact: f64,
    pub priority_tier: u8,
    /// Price was missing, so `profit_loss` could not be estimated.
    pub price_missing: bool,
}

/// Strictly ascending, finite currency bounds. Tier 0 is the highest
/// priority: an impact at or above the top bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TierBounds(Vec<f64>);

impl TierBounds {
    pub fn new(bounds: Vec<f64>) -> Result<Self> {
        if bounds.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config("tier bounds must be finite".into()));
        }
        if bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "tier bounds must be strictly ascending: {bounds:?}"
            )));
        }
        Ok(TierBounds(bounds))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn tier(&self, impact: f64) -> u8 {
        assign_priority(impact, self)
    }
}

impl Default for TierBounds {
    fn default() -> Self {
        TierBounds(vec![100.0, 1_000.0, 10_000.0])
    }
}

impl TryFrom<Vec<f64>> for TierBounds {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        TierBounds::new(v)
    }
}

impl From<TierBounds> for Vec<f64> {
    fn from(t: TierBounds) -> Self {
        t.0
    }
}

/// Number of bounds strictly above `impact`: 0 at or above the top bound,
/// `bounds.len()` below the bottom one.
pub fn assign_priority(impact: f64, bounds: &TierBounds) -> u8 {
    bounds.0.iter().filter(|&&b| b > impact).count() as u8
}

/// Impact over the baseline fields `baseline` (which include price).
/// Missing inventory counts as zero.
pub fn business_impact(record: &ItemRecord, baseline: &[PriceField], bounds: &TierBounds) -> ImpactResult {
    let inventory = record.inventory.unwrap_or(0) as f64;
    let present = || baseline.iter().filter_map(|f| f.get(record));
    let (profit_loss, price_missing) = match record.price {
        Some(p) => {
            let worst = baseline
                .iter()
                .filter(|&&f| f != PriceField::Price)
                .filter_map(|f| f.get(record))
                .map(|x| x - p)
                .fold(0.0f64, f64::max);
            (worst * inventory, false)
        }
        None => (0.0, true),
    };
    let foregone_revenue = present().reduce(f64::min).map_or(0.0, |m| m * inventory);
    let business_impact = profit_loss.max(foregone_revenue);
    ImpactResult {
        profit_loss,
        foregone_revenue,
        business_impact,
        priority_tier: assign_priority(business_impact, bounds),
        price_missing,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedAlertRow {
    pub item_id: String,
    pub is_anomaly: bool,
    pub is_anomaly_gnb: bool,
    pub is_anomaly_rf: bool,
    pub score_gnb: f64,
    pub score_rf: f64,
    pub priority_tier: u8,
    pub business_impact: f64,
    pub profit_loss: f64,
    pub foregone_revenue: f64,
    pub suspected_issues: Vec<String>,
    /// Per-feature GNB scores, aligned with the bundle's issue names.
    pub feature_scores: Vec<Option<f64>>,
    pub record: ItemRecord,
}

/// The fields the ranking order looks at.
#[derive(Clone, Copy, Debug)]
pub struct RankKey<'a> {
    pub is_anomaly_rf: bool,
    pub is_anomaly_gnb: bool,
    pub priority_tier: u8,
    pub business_impact: f64,
    pub score_gnb: f64,
    pub score_rf: f64,
    pub item_id: &'a str,
}

/// Both-model flags first, then forest-only, then GNB-only; within a group
/// by tier, impact and scores, finally by item id ascending. Floats compare
/// with `total_cmp`, so this is a total order.
impl Ord for RankKey<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .is_anomaly_rf
            .cmp(&self.is_anomaly_rf)
            .then(other.is_anomaly_gnb.cmp(&self.is_anomaly_gnb))
            .then(self.priority_tier.cmp(&other.priority_tier))
            .then(other.business_impact.total_cmp(&self.business_impact))
            .then(other.score_gnb.total_cmp(&self.score_gnb))
            .then(other.score_rf.total_cmp(&self.score_rf))
            .then_with(|| self.item_id.cmp(other.item_id))
    }
}

impl PartialOrd for RankKey<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for RankKey<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for RankKey<'_> {}

impl RankedAlertRow {
    pub fn key(&self) -> RankKey<'_> {
        RankKey {
            is_anomaly_rf: self.is_anomaly_rf,
            is_anomaly_gnb: self.is_anomaly_gnb,
            priority_tier: self.priority_tier,
            business_impact: self.business_impact,
            score_gnb: self.score_gnb,
            score_rf: self.score_rf,
            item_id: &self.item_id,
        }
    }
}

/// Scores one record with both models of `bundle`. Without a forest the
/// forest flag is false and its score 0.
pub fn score_row(bundle: &ModelBundle, record: &ItemRecord) -> RankedAlertRow {
    let breakdown = bundle.gnb.score(record);
    let is_anomaly_gnb = breakdown.total > bundle.gnb.epsilon;
    let (is_anomaly_rf, score_rf) = match &bundle.rf {
        Some(rf) => {
            let v = bundle.schema.build_feature_vector(record);
            let row: Vec<f64> = v
                .values
                .iter()
                .zip(&v.missing)
                .map(|(&x, &m)| if m { f64::NAN } else { x })
                .collect();
            rf.predict(&row)
        }
        None => (false, 0.0),
    };
    let is_anomaly = is_anomaly_gnb || is_anomaly_rf;
    let issues = if is_anomaly {
        suspected_issues(&breakdown.per_feature, &bundle.gnb.feature_names, bundle.gnb.epsilon_s).issues
    } else {
        Vec::new()
    };
    let impact = business_impact(record, &bundle.schema.baseline, &bundle.tier_bounds);
    RankedAlertRow {
        item_id: record.item_id.clone(),
        is_anomaly,
        is_anomaly_gnb,
        is_anomaly_rf,
        score_gnb: breakdown.total,
        score_rf,
        priority_tier: impact.priority_tier,
        business_impact: impact.business_impact,
        profit_loss: impact.profit_loss,
        foregone_revenue: impact.foregone_revenue,
        suspected_issues: issues,
        feature_scores: breakdown.per_feature,
        record: record.clone(),
    }
}

/// Scores every record and sorts into the ranking order.
pub fn combined_predict(records: &[ItemRecord], bundle: &ModelBundle) -> Vec<RankedAlertRow> {
    let mut rows: Vec<RankedAlertRow> = records.par_iter().map(|r| score_row(bundle, r)).collect();
    rows.par_sort_by(|a, b| a.key().cmp(&b.key()));
    rows
}

/// The first `capacity` anomalous rows of a ranked list.
pub fn cap_alerts(ranked: &[RankedAlertRow], capacity: usize) -> Vec<RankedAlertRow> {
    ranked.iter().filter(|r| r.is_anomaly).take(capacity).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::Hierarchy;
    use proptest::prelude::*;

    fn baseline() -> Vec<PriceField> {
        vec![
            PriceField::Price,
            PriceField::Cost,
            PriceField::CompetitorPrice,
            PriceField::StorePrice,
            PriceField::MarketplacePrice,
            PriceField::ListPrice,
        ]
    }

    fn item(price: Option<f64>, cost: Option<f64>, inventory: Option<u64>) -> ItemRecord {
        let mut r = ItemRecord::new("x", Hierarchy::default());
        r.price = price;
        r.cost = cost;
        r.inventory = inventory;
        r
    }

    #[test]
    fn underpriced_item() {
        let r = business_impact(
            &item(Some(10.0), Some(50.0), Some(3)),
            &baseline(),
            &TierBounds::default(),
        );
        assert_eq!(
            (r.profit_loss, r.foregone_revenue, r.business_impact),
            (120.0, 30.0, 120.0)
        );
        assert_eq!(r.priority_tier, 2);
    }

    #[test]
    fn overpriced_item_clamps_loss() {
        let r = business_impact(
            &item(Some(100.0), Some(5.0), Some(2)),
            &baseline(),
            &TierBounds::default(),
        );
        assert_eq!(
            (r.profit_loss, r.foregone_revenue, r.business_impact),
            (0.0, 10.0, 10.0)
        );
    }

    #[test]
    fn zero_or_missing_inventory() {
        for inv in [Some(0), None] {
            let r = business_impact(&item(Some(10.0), Some(50.0), inv), &baseline(), &TierBounds::default());
            assert_eq!(r.business_impact, 0.0);
        }
    }

    #[test]
    fn missing_price_is_flagged() {
        let r = business_impact(&item(None, Some(50.0), Some(1)), &baseline(), &TierBounds::default());
        assert!(r.price_missing);
        assert_eq!((r.profit_loss, r.foregone_revenue), (0.0, 50.0));
    }

    #[test]
    fn tiers() {
        let b = TierBounds::new(vec![100.0, 1000.0]).unwrap();
        assert_eq!(assign_priority(5000.0, &b), 0);
        assert_eq!(assign_priority(1000.0, &b), 0);
        assert_eq!(assign_priority(500.0, &b), 1);
        assert_eq!(assign_priority(50.0, &b), 2);
        assert_eq!(assign_priority(50.0, &TierBounds::new(vec![]).unwrap()), 0);
        assert!(TierBounds::new(vec![10.0, 10.0]).is_err());
        assert!(TierBounds::new(vec![f64::NAN]).is_err());
        assert!(serde_json::from_str::<TierBounds>("[5, 1]").is_err());
    }

    fn row(id: &str, rf: bool, g: bool, tier: u8, impact: f64) -> RankedAlertRow {
        RankedAlertRow {
            item_id: id.into(),
            is_anomaly: rf || g,
            is_anomaly_gnb: g,
            is_anomaly_rf: rf,
            score_gnb: 1.0,
            score_rf: 0.5,
            priority_tier: tier,
            business_impact: impact,
            profit_loss: 0.0,
            foregone_revenue: impact,
            suspected_issues: vec![],
            feature_scores: vec![],
            record: ItemRecord::new(id, Hierarchy::default()),
        }
    }

    fn sorted(mut rows: Vec<RankedAlertRow>) -> Vec<String> {
        rows.sort_by(|a, b| a.key().cmp(&b.key()));
        rows.into_iter().map(|r| r.item_id).collect()
    }

    #[test]
    fn both_then_forest_then_gnb() {
        let rows = vec![
            row("g", false, true, 0, 9e9),
            row("none", false, false, 0, 9e9),
            row("rf", true, false, 3, 1.0),
            row("both", true, true, 3, 1.0),
        ];
        assert_eq!(sorted(rows), ["both", "rf", "g", "none"]);
    }

    #[test]
    fn tier_then_impact_then_id() {
        let rows = vec![
            row("c", true, true, 1, 500.0),
            row("b", true, true, 0, 50.0),
            row("a", true, true, 1, 900.0),
            row("d", true, true, 1, 900.0),
        ];
        assert_eq!(sorted(rows), ["b", "a", "d", "c"]);
    }

    #[test]
    fn capping() {
        let mut rows: Vec<RankedAlertRow> = (0..25)
            .map(|i| row(&format!("{i:02}"), true, true, 0, i as f64))
            .collect();
        rows.push(row("quiet", false, false, 0, 0.0));
        rows.sort_by(|a, b| a.key().cmp(&b.key()));
        assert!(cap_alerts(&rows, 0).is_empty());
        assert_eq!(cap_alerts(&rows, 100).len(), 25);
        let top: Vec<String> = cap_alerts(&rows, 10).into_iter().map(|r| r.item_id).collect();
        assert_eq!(top[0], "24");
        assert_eq!(top.len(), 10);
    }

    fn arb_row() -> impl Strategy<Value = RankedAlertRow> {
        (any::<bool>(), any::<bool>(), 0u8..4, 0u32..5, 0u8..3, 0u8..3, 0u16..50).prop_map(
            |(rf, g, tier, impact, sg, srf, id)| {
                let mut r = row(&format!("i{id}"), rf, g, tier, impact as f64 * 10.0);
                r.score_gnb = sg as f64;
                r.score_rf = srf as f64 / 2.0;
                r
            },
        )
    }

    proptest! {
        #[test]
        fn sort_is_permutation_invariant(mut rows in prop::collection::vec(arb_row(), 0..40), seed in any::<u64>()) {
            let a = sorted(rows.clone());
            use rand::{seq::SliceRandom, SeedableRng};
            rows.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(a, sorted(rows));
        }

        #[test]
        fn rank_key_is_a_total_order(a in arb_row(), b in arb_row(), c in arb_row()) {
            let (ka, kb, kc) = (a.key(), b.key(), c.key());
            prop_assert_eq!(ka.cmp(&kb), kb.cmp(&ka).reverse());
            if ka.cmp(&kb) != Ordering::Greater && kb.cmp(&kc) != Ordering::Greater {
                prop_assert!(ka.cmp(&kc) != Ordering::Greater);
            }
        }

        #[test]
        fn cap_is_prefix(rows in prop::collection::vec(arb_row(), 0..40), c1 in 0usize..30, extra in 0usize..30) {
            let mut rows = rows;
            rows.sort_by(|a, b| a.key().cmp(&b.key()));
            let small = cap_alerts(&rows, c1);
            let big = cap_alerts(&rows, c1 + extra);
            prop_assert_eq!(&big[..small.len()], &small[..]);
        }

        #[test]
        fn impact_scales_with_currency(price in 0.0f64..500.0, cost in 0.0f64..500.0, comp in prop::option::of(0.0f64..500.0), k in 0.1f64..100.0, inv in 0u64..50) {
            let mut r = item(Some(price), Some(cost), Some(inv));
            r.competitor_price = comp;
            let mut scaled = r.clone();
            scaled.price = Some(price * k);
            scaled.cost = Some(cost * k);
            scaled.competitor_price = comp.map(|c| c * k);
            let bounds = TierBounds::default();
            let a = business_impact(&r, &baseline(), &bounds).business_impact;
            let b = business_impact(&scaled, &baseline(), &bounds).business_impact;
            prop_assert!((b - k * a).abs() <= 1e-9 * (1.0 + b.abs()));
        }

        #[test]
        fn higher_impact_never_worse_tier(x in 0.0f64..20_000.0, dx in 0.0f64..20_000.0) {
            let b = TierBounds::default();
            prop_assert!(assign_priority(x + dx, &b) <= assign_priority(x, &b));
        }
    }
}
