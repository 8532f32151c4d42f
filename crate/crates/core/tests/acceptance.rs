//! The primary acceptance criteria. Runs without the libtest harness so the
//! `criterion N: PASS|FAIL` line of every check shows up in plain
//! `cargo test` output. Criteria run one at a time, in order, so the timing
//! checks are not disturbed by their neighbours; any failure makes the
//! target exit nonzero. Name fragments on the command line select criteria.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use chrono::{DateTime, TimeDelta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pricesentry::alerts::{AlertStore, Resolution, ResolveRequest, ReviewStats, Source};
use pricesentry::bundle::BundleStore;
use pricesentry::datagen::{generate_catalog, train_test_split, CatalogConfig, LabeledDataset};
use pricesentry::eval::{log_spaced_rates, select_threshold, ThresholdPolicy};
use pricesentry::experiments::{
    compare_models, hierarchy_levels, rate_sweep, score_models, ExperimentConfig, ModelScores,
};
use pricesentry::explain::suspected_issues;
use pricesentry::features::{FeatureSchema, SchemaConfig};
use pricesentry::gnb::{GnbConfig, GnbModel, GnbNodeParams};
use pricesentry::impact::score_row;
use pricesentry::record::{Hierarchy, ItemRecord, Level};
use pricesentry::serving::{stream_row, stream_score, ManualClock, TtlCache};

const CRITERIA: [(&str, fn()); 10] = [
    ("criterion_01_gnb_oracle", criterion_01_gnb_oracle),
    ("criterion_02_explainer", criterion_02_explainer),
    ("criterion_03_threshold_brute_force", criterion_03_threshold_brute_force),
    ("criterion_04_model_ordering", criterion_04_model_ordering),
    ("criterion_05_rate_sweep", criterion_05_rate_sweep),
    ("criterion_06_hierarchy_levels", criterion_06_hierarchy_levels),
    ("criterion_07_streaming_latency", criterion_07_streaming_latency),
    ("criterion_08_ttl_reload", criterion_08_ttl_reload),
    ("criterion_09_review_precision", criterion_09_review_precision),
    (
        "criterion_10_sigma_floor_and_min_samples",
        criterion_10_sigma_floor_and_min_samples,
    ),
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let (mut passed, mut failed) = (0, Vec::new());
    for (name, run) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match catch_unwind(AssertUnwindSafe(run)) {
            Ok(()) => passed += 1,
            Err(_) => failed.push(name),
        }
    }
    println!("acceptance: {passed} passed, {} failed {failed:?}", failed.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn report(n: u32, name: &str, pass: bool, detail: String) {
    println!("criterion {n}: {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

// ---------------------------------------------------------------------------
// 1. GNB scores against an independent sum of squared z-scores
// ---------------------------------------------------------------------------

const NUMERATORS: [&str; 5] = [
    "price",
    "competitor_price",
    "store_price",
    "marketplace_price",
    "list_price",
];

fn field(r: &ItemRecord, name: &str) -> Option<f64> {
    match name {
        "price" => r.price,
        "competitor_price" => r.competitor_price,
        "store_price" => r.store_price,
        "marketplace_price" => r.marketplace_price,
        "list_price" => r.list_price,
        _ => unreachable!(),
    }
}

/// Fit-level node, then its ancestors, then the global table.
fn oracle_params<'a>(m: &'a GnbModel, h: &Hierarchy) -> &'a GnbNodeParams {
    let mut level = Some(m.fit_level);
    while let Some(l) = level {
        if let Some(p) = m.levels.get(&l).and_then(|t| t.get(&h.id_at(l))) {
            return p;
        }
        level = l.parent();
    }
    &m.global
}

fn criterion_01_gnb_oracle() {
    let start = Instant::now();
    let data = common::small_catalog(101);
    let schema = FeatureSchema::fit(&SchemaConfig::default(), &data.records).unwrap();
    let model = GnbModel::fit(&data.records, &schema, &GnbConfig::default()).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_total, mut worst_density, mut fallback) = (0.0f64, 0.0f64, 0);
    for i in 0..1000 {
        let mut r = data.records[rng.random_range(0..data.len())].clone();
        r.item_id = format!("rand-{i}");
        if rng.random_bool(0.05) {
            r.hierarchy.department = 90_000 + i;
            fallback += 1;
        }
        let cost = rng.random_range(0.5..500.0);
        r.cost = rng.random_bool(0.97).then_some(cost);
        for name in NUMERATORS {
            let v = rng.random_bool(0.8).then(|| cost * rng.random_range(0.05..20.0f64));
            match name {
                "price" => r.price = v,
                "competitor_price" => r.competitor_price = v,
                "store_price" => r.store_price = v,
                "marketplace_price" => r.marketplace_price = v,
                _ => r.list_price = v,
            }
        }

        let p = oracle_params(&model, &r.hierarchy);
        let (mut sum_sq, mut log_var) = (0.0, 0.0);
        for (k, name) in NUMERATORS.iter().enumerate() {
            if let (Some(x), Some(c)) = (field(&r, name), r.cost) {
                let v = ((x + 1.0) / (c + 1.0)).ln();
                let z = (v - p.mu[k]) / p.sigma[k];
                sum_sq += z * z;
                log_var += (2.0 * std::f64::consts::PI * p.sigma[k] * p.sigma[k]).ln();
            }
        }
        let got = model.score(&r).total;
        let rel = if sum_sq == 0.0 {
            got.abs()
        } else {
            ((got - sum_sq) / sum_sq).abs()
        };
        worst_total = worst_total.max(rel);
        // sum of squares = -2 log density - sum log(2 pi sigma^2)
        let identity = -2.0 * model.log_density(&r) - log_var;
        let rel = if sum_sq == 0.0 {
            identity.abs()
        } else {
            ((identity - sum_sq) / sum_sq).abs()
        };
        worst_density = worst_density.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "GNB oracle equivalence",
        worst_total <= 1e-9 && worst_density <= 1e-9 && secs < 5.0 && fallback > 0,
        format!("max rel err total {worst_total:.2e}, density identity {worst_density:.2e}, {fallback} unseen departments, {secs:.2}s (tol 1e-9, < 5s)"),
    );
}

// ---------------------------------------------------------------------------
// 2. Explainer worked example and branch traces
// ---------------------------------------------------------------------------

fn criterion_02_explainer() {
    // a department where price sits about 30% over cost and competitors
    // match the price
    let h = Hierarchy {
        division: 1,
        super_department: 1,
        department: 1,
        category: 1,
        subcategory: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let training: Vec<ItemRecord> = (0..200)
        .map(|i| {
            let mut r = ItemRecord::new(format!("t{i}"), h);
            let cost: f64 = rng.random_range(50.0..300.0);
            let price = cost * (0.26 + rng.random_range(-0.1..0.1f64)).exp();
            r.cost = Some(cost);
            r.price = Some(price);
            r.competitor_price = Some(price * rng.random_range(-0.05..0.05f64).exp());
            r
        })
        .collect();
    let schema = FeatureSchema::fit(&SchemaConfig::default(), &training).unwrap();
    let mut model = GnbModel::fit(&training, &schema, &GnbConfig::default()).unwrap();
    model.set_threshold(100.0).unwrap();

    // price in line with cost, competitor price two orders of magnitude off,
    // every other reference missing
    let mut r = ItemRecord::new("example", h);
    r.cost = Some(100.0);
    r.price = Some(130.0);
    r.competitor_price = Some(10_000.0);
    let b = model.score(&r);
    let worked = suspected_issues(&b.per_feature, &model.feature_names, model.epsilon_s).issues;
    let worked_ok = b.total > model.epsilon && worked == ["CompetitorPrice", "Cost", "Price"];

    let names: Vec<String> = model.feature_names.clone();
    let s = |v: [f64; 5]| suspected_issues(&v.map(Some), &names, 1.0).issues;
    // nothing over the threshold
    let none = s([0.1, 0.2, 0.3, 0.4, 0.5]);
    // two over: cost is blamed along with every feature that stayed low
    let two_high = s([5.0, 0.1, 7.0, 0.2, 0.3]);
    // one over with plenty of evidence: that numerator alone
    let one_high = s([0.1, 9.0, 0.2, 0.3, 0.4]);
    let traces_ok = names
        == [
            "Price",
            "CompetitorPrice",
            "StorePrice",
            "MarketplacePrice",
            "ListPrice",
        ]
        && none.is_empty()
        && two_high == ["Cost", "CompetitorPrice", "MarketplacePrice", "ListPrice"]
        && one_high == ["CompetitorPrice"];
    report(
        2,
        "explainer",
        worked_ok && traces_ok,
        format!("worked example {worked:?}; traces {none:?} / {two_high:?} / {one_high:?}"),
    );
}

// ---------------------------------------------------------------------------
// 3. Threshold selection against brute force
// ---------------------------------------------------------------------------

/// Every distinct score gap's midpoint plus both infinities, each scored by
/// a full pass over the data; the best objective wins and ties go to the
/// highest threshold.
fn brute_force(scores: &[f64], labels: &[bool], policy: ThresholdPolicy) -> (f64, f64) {
    let mut distinct = scores.to_vec();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    let mut cands = vec![f64::INFINITY];
    cands.extend(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    cands.push(f64::NEG_INFINITY);

    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut best: Option<(f64, f64)> = None;
    let mut best_precision: Option<(f64, f64)> = None;
    for &t in &cands {
        let (mut tp, mut fp) = (0.0, 0.0);
        for (&s, &l) in scores.iter().zip(labels) {
            if s > t {
                if l {
                    tp += 1.0
                } else {
                    fp += 1.0
                }
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = tp / n_pos;
        let objective = match policy {
            ThresholdPolicy::MaxFBeta { .. } => {
                if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                }
            }
            ThresholdPolicy::MaxRecallAtMinPrecision { min_precision } => {
                if precision < min_precision {
                    if best_precision.is_none_or(|(_, o)| precision > o) {
                        best_precision = Some((t, precision));
                    }
                    continue;
                }
                recall
            }
        };
        if best.is_none_or(|(_, o)| objective > o) {
            best = Some((t, objective));
        }
    }
    best.or(best_precision).unwrap()
}

fn criterion_03_threshold_brute_force() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // dyadic scores so every midpoint is exact, with plenty of ties
    let labels: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.05)).collect();
    let scores: Vec<f64> = labels
        .iter()
        .map(|&l| {
            let base = if l { 3_000 } else { 0 };
            (base + rng.random_range(0..6_000)) as f64 / 1024.0
        })
        .collect();
    let mut detail = Vec::new();
    let mut pass = true;
    for policy in [
        ThresholdPolicy::F1,
        ThresholdPolicy::MaxRecallAtMinPrecision { min_precision: 0.8 },
    ] {
        let got = select_threshold(&scores, &labels, policy).unwrap();
        let (t, o) = brute_force(&scores, &labels, policy);
        pass &= got.threshold == t && got.objective == o;
        detail.push(format!(
            "{policy:?}: lib ({}, {}) brute ({t}, {o})",
            got.threshold, got.objective
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 10.0;
    report(
        3,
        "threshold selection",
        pass,
        format!("{}; {secs:.2}s", detail.join("; ")),
    );
}

// ---------------------------------------------------------------------------
// 4-6. Offline experiments on the desk-scale synthetic catalog
// ---------------------------------------------------------------------------

/// Desk-scale catalog. The isolation forest's 5% subsample needs a large
/// training set to be competitive, hence a million rows.
fn experiment_catalog() -> CatalogConfig {
    CatalogConfig {
        seed: 2024,
        n_normal: 1_000_000,
        n_anomalies: 200,
        ..CatalogConfig::default()
    }
}

struct Experiment {
    train: LabeledDataset,
    test: LabeledDataset,
    scores: Vec<ModelScores>,
    config: ExperimentConfig,
    seconds: f64,
}

fn experiment() -> &'static Experiment {
    static CELL: OnceLock<Experiment> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let data = generate_catalog(&experiment_catalog()).unwrap();
        let (train, test) = train_test_split(&data, 0.001, 0).unwrap();
        drop(data);
        let config = ExperimentConfig::default();
        let scores = score_models(&train, &test, &config.train).unwrap();
        Experiment {
            train,
            test,
            scores,
            config,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

fn criterion_04_model_ordering() {
    let e = experiment();
    let start = Instant::now();
    let results = compare_models(&e.scores, &e.test.labels, &e.config).unwrap();
    let f1: BTreeMap<&str, f64> = results.iter().map(|r| (r.model.as_str(), r.f1)).collect();
    let (gnb, iso, rf) = (f1["gaussian_nb"], f1["isolation_forest"], f1["random_forest"]);
    let secs = e.seconds + start.elapsed().as_secs_f64();
    report(
        4,
        "model ordering",
        rf > iso && iso > gnb && rf >= 0.8 && gnb <= 0.6 && secs < 600.0,
        format!(
            "F1 random_forest {rf:.4} > isolation_forest {iso:.4} > gaussian_nb {gnb:.4} (need rf >= 0.8, gnb <= 0.6); {} test rows, {} positives, {secs:.0}s",
            e.test.len(),
            e.test.n_positive()
        ),
    );
}

fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for k in i..=j {
                r[idx[k]] = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn criterion_05_rate_sweep() {
    let e = experiment();
    let rates = log_spaced_rates(0.001, 0.25, 10);
    let (rows, summary) = rate_sweep(&e.scores, &e.test.labels, &rates, &e.config).unwrap();
    let mut pass = rates.len() == 10;
    let mut detail = Vec::new();
    for s in &summary {
        let f1: Vec<f64> = rows.iter().filter(|r| r.model == s.model).map(|r| r.f1).collect();
        let oracle = spearman_oracle(&rates, &f1);
        pass &= s.spearman >= 0.8 && (s.spearman - oracle).abs() < 1e-12;
        let curve: Vec<String> = f1.iter().map(|v| format!("{v:.3}")).collect();
        detail.push(format!("{} rho {:.3} (F1 {})", s.model, s.spearman, curve.join(" ")));
    }
    report(
        5,
        "anomaly-rate sweep",
        pass,
        format!("{} (need rho >= 0.8)", detail.join("; ")),
    );
}

fn criterion_06_hierarchy_levels() {
    let e = experiment();
    let levels = hierarchy_levels(&e.train, &e.test, &e.config).unwrap();
    let f1 = |l: Level| levels.iter().find(|r| r.level == l).unwrap().f1;
    let complete = levels.len() == 5 && levels.iter().all(|l| l.f1.is_finite() && l.auc_pr.is_finite());
    let div = f1(Level::Division);
    let pass = complete && f1(Level::Category) >= div && f1(Level::Department) >= div;
    let detail = levels
        .iter()
        .map(|l| {
            format!(
                "{} F1 {:.3} AUC {:.3} ({} nodes)",
                l.level.as_str(),
                l.f1,
                l.auc_pr,
                l.nodes
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    report(
        6,
        "hierarchy levels",
        pass,
        format!("{detail} (need category, department >= division)"),
    );
}

// ---------------------------------------------------------------------------
// 7. Streaming latency
// ---------------------------------------------------------------------------

fn criterion_07_streaming_latency() {
    let (data, bundle) = common::gnb_bundle(107);
    let records: Vec<&ItemRecord> = data.records.iter().step_by(2).take(10_000).collect();
    for r in records.iter().take(500) {
        std::hint::black_box(stream_score(&bundle, r));
    }
    let mut times: Vec<f64> = records
        .iter()
        .map(|r| {
            let t = Instant::now();
            std::hint::black_box(stream_score(&bundle, r));
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let p50 = times[times.len() / 2];
    let p99 = times[times.len() * 99 / 100];
    report(
        7,
        "streaming latency",
        times.len() == 10_000 && p99 < 1.0,
        format!(
            "p50 {p50:.4} ms, p99 {p99:.4} ms over {} calls (need p99 < 1 ms)",
            times.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. TTL reload and batch/stream agreement
// ---------------------------------------------------------------------------

fn criterion_08_ttl_reload() {
    let (data, bundle) = common::gnb_bundle(108);
    let dir = tempfile::tempdir().unwrap();
    let store = BundleStore::new(dir.path());
    let t0 = DateTime::from_timestamp(1_750_000_000, 0).unwrap();
    let clock = Arc::new(ManualClock::new(t0));

    let first = store.publish(&mut bundle.clone()).unwrap();
    let cache = TtlCache::new(store.clone(), TimeDelta::seconds(7200), clock.clone());
    clock.set(t0 + TimeDelta::seconds(100));
    let second = store.publish(&mut bundle.clone()).unwrap();

    let at = |secs: f64| {
        clock.set(t0 + TimeDelta::microseconds((secs * 1e6) as i64));
        cache.get().unwrap().version.clone()
    };
    let served = [
        (100.0, at(100.0)),
        (7199.999, at(7199.999)),
        (7200.0, at(7200.0)),
        (7300.0, at(7300.0)),
    ];
    let ttl_ok = served[0].1 == first && served[1].1 == first && served[2].1 == second && served[3].1 == second;

    let mut identical = 0;
    for r in &data.records {
        let b = score_row(&bundle, r);
        let s = stream_row(&bundle, r);
        if b.score_gnb.to_bits() == s.score_gnb.to_bits() && b.is_anomaly_gnb == s.is_anomaly_gnb {
            identical += 1;
        }
    }
    report(
        8,
        "TTL reload",
        ttl_ok && identical == data.len(),
        format!(
            "served {served:?} ({first} then {second}); batch == stream on {identical}/{} records",
            data.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Review precision arithmetic
// ---------------------------------------------------------------------------

fn store_precision(reviewed: usize, false_positives: usize) -> ReviewStats {
    let dir = tempfile::tempdir().unwrap();
    let store = AlertStore::open(dir.path()).unwrap();
    let (_, bundle) = common::gnb_bundle(109);
    let data = common::small_catalog(109);
    let rows: Vec<_> = data
        .records
        .iter()
        .take(reviewed + 10)
        .map(|r| score_row(&bundle, r))
        .collect();
    let ids = store.ingest(&rows, Source::Batch, "acceptance").unwrap();
    for (i, id) in ids.iter().take(reviewed).enumerate() {
        let resolution = if i < false_positives {
            Resolution::FalsePositive
        } else {
            Resolution::TruePositive
        };
        store
            .resolve(
                id,
                ResolveRequest {
                    resolution: Some(resolution),
                    ..ResolveRequest::default()
                },
            )
            .unwrap();
    }
    let stats = store.review_stats(None);
    assert_eq!(stats, store.recompute_stats());
    stats
}

fn criterion_09_review_precision() {
    let original = store_precision(1625, 756);
    let adjusted = store_precision(1625, 386);
    let none = ReviewStats::from_counts(10, 0, 0);
    let pass = original.precision_display.as_deref() == Some("53.5%")
        && adjusted.precision_display.as_deref() == Some("76.2%")
        && original.precision == Some(0.535)
        && adjusted.precision == Some(0.762)
        && none.precision.is_none();
    report(
        9,
        "review precision",
        pass,
        format!(
            "(1625, 756) -> {:?}; (1625, 386) -> {:?}; nothing reviewed -> {:?}",
            original.precision_display, adjusted.precision_display, none.precision
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Sigma floor and the minimum-sample rule
// ---------------------------------------------------------------------------

fn criterion_10_sigma_floor_and_min_samples() {
    let node = |sub: u32| Hierarchy {
        division: 1,
        super_department: 1,
        department: 1,
        category: 1,
        subcategory: sub,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut rows = Vec::new();
    // subcategory 1: eight rows, too few for its own fit
    for i in 0..8 {
        let mut r = ItemRecord::new(format!("a{i}"), node(1));
        r.cost = Some(rng.random_range(5.0..10.0));
        r.price = Some(r.cost.unwrap() * rng.random_range(1.1..1.6));
        rows.push(r);
    }
    // subcategory 2: nine rows with a constant price/cost ratio
    for i in 0..9 {
        let mut r = ItemRecord::new(format!("b{i}"), node(2));
        r.cost = Some(9.0);
        r.price = Some(19.0);
        rows.push(r);
    }
    let schema = FeatureSchema::fit(&SchemaConfig::default(), &rows).unwrap();
    let model = GnbModel::fit(
        &rows,
        &schema,
        &GnbConfig {
            fit_level: Level::Subcategory,
            ..GnbConfig::default()
        },
    )
    .unwrap();
    let thin = model.resolve(&node(1));
    let full = model.resolve(&node(2));
    let category = &model.levels[&Level::Category][&1];
    let escalates = thin.node == category.node && thin.mu == category.mu;
    let own = full.node.level == Some(Level::Subcategory) && full.n_samples == 9;
    let floor = full.sigma[0] == 0.01 && (full.mu[0] - 2.0f64.ln()).abs() < 1e-12;
    report(
        10,
        "sigma floor and 9-sample rule",
        escalates && own && floor,
        format!(
            "8-row node uses {:?}; 9-row node uses {:?} with mu {:.6} sigma {}",
            thin.node, full.node, full.mu[0], full.sigma[0]
        ),
    );
}
