//! Daily batch scoring: every catalog row through both models, ranked and
//! capped to the review capacity.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use chrono::Utc;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::alerts::{AlertStore, Source};
use crate::bundle::{BundleStore, ModelBundle};
use crate::error::{Error, Result};
use crate::impact::{cap_alerts, combined_predict, RankedAlertRow};
use crate::record::read_records;

/// More malformed rows than this share of the input fails the run.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

/// Upper edges of the GNB score histogram buckets; the last bucket is open.
pub const HISTOGRAM_EDGES: [f64; 7] = [1.0, 10.0, 100.0, 1e3, 1e4, 1e5, 1e6];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBucket {
    pub lo: f64,
    /// `None` for the open top bucket.
    pub hi: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub model_version: String,
    pub total_rows: usize,
    pub scored: usize,
    pub malformed: usize,
    pub anomalies: usize,
    pub anomalies_gnb: usize,
    pub anomalies_rf: usize,
    pub capacity: usize,
    pub alerts_written: usize,
    /// Alerts per priority tier, tier 0 first.
    pub alerts_by_tier: Vec<usize>,
    pub score_histogram: Vec<HistogramBucket>,
}

impl BatchSummary {
    pub fn malformed_fraction(&self) -> f64 {
        if self.total_rows == 0 {
            0.0
        } else {
            self.malformed as f64 / self.total_rows as f64
        }
    }
}

pub fn score_histogram(scores: impl IntoIterator<Item = f64>) -> Vec<HistogramBucket> {
    let mut buckets: Vec<HistogramBucket> = std::iter::once(0.0)
        .chain(HISTOGRAM_EDGES)
        .zip(HISTOGRAM_EDGES.iter().map(|&e| Some(e)).chain([None]))
        .map(|(lo, hi)| HistogramBucket { lo, hi, count: 0 })
        .collect();
    for s in scores {
        let idx = HISTOGRAM_EDGES
            .iter()
            .position(|&e| s < e)
            .unwrap_or(HISTOGRAM_EDGES.len());
        buckets[idx].count += 1;
    }
    buckets
}

pub struct BatchOutput {
    pub alerts: Vec<RankedAlertRow>,
    pub summary: BatchSummary,
}

/// Scores `input` with `bundle` and keeps the top `capacity` alerts.
pub fn batch_score(input: &Path, bundle: &ModelBundle, capacity: usize) -> Result<BatchOutput> {
    let read = read_records(input)?;
    for m in read.malformed.iter().take(10) {
        warn!(line = m.line, reason = %m.reason, "skipping malformed row");
    }
    let ranked = combined_predict(&read.records, bundle);
    let alerts = cap_alerts(&ranked, capacity);
    let mut alerts_by_tier = vec![0; bundle.tier_bounds.as_slice().len() + 1];
    for a in &alerts {
        alerts_by_tier[a.priority_tier as usize] += 1;
    }
    let summary = BatchSummary {
        model_version: bundle.version.clone(),
        total_rows: read.total_rows(),
        scored: ranked.len(),
        malformed: read.malformed.len(),
        anomalies: ranked.iter().filter(|r| r.is_anomaly).count(),
        anomalies_gnb: ranked.iter().filter(|r| r.is_anomaly_gnb).count(),
        anomalies_rf: ranked.iter().filter(|r| r.is_anomaly_rf).count(),
        capacity,
        alerts_written: alerts.len(),
        alerts_by_tier,
        score_histogram: score_histogram(ranked.iter().map(|r| r.score_gnb)),
    };
    Ok(BatchOutput { alerts, summary })
}

pub fn write_alert_rows(path: &Path, rows: &[RankedAlertRow]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_alert_rows(path: &Path) -> Result<Vec<RankedAlertRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// `<output>.summary.json` next to the alert file.
pub fn summary_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".summary.json");
    output.with_file_name(name)
}

/// The `batch-score` command. Exits with failure when more than 1% of the
/// input rows are malformed; the alert file is written either way.
pub fn run_cli(
    input: &Path,
    bundle_dir: &Path,
    capacity: usize,
    output: &Path,
    store_dir: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let bundle = BundleStore::new(bundle_dir)
        .load_latest()
        .with_context(|| format!("loading bundle from {}", bundle_dir.display()))?;
    let out = batch_score(input, &bundle, capacity)?;
    write_alert_rows(output, &out.alerts)?;
    let summary_file = summary_path(output);
    std::fs::write(&summary_file, serde_json::to_string_pretty(&out.summary)?)
        .with_context(|| format!("writing {}", summary_file.display()))?;
    println!("{}", serde_json::to_string_pretty(&out.summary)?);

    if let Some(dir) = store_dir {
        let batch_id = format!("batch:{}", Utc::now().format("%Y-%m-%d"));
        let created = AlertStore::open(dir)?.ingest(&out.alerts, Source::Batch, &batch_id)?;
        info!(created = created.len(), %batch_id, "ingested alerts");
    }

    let frac = out.summary.malformed_fraction();
    if frac > MAX_MALFORMED_FRACTION {
        eprintln!(
            "error: {} of {} rows malformed ({:.2}%), above the {:.0}% limit",
            out.summary.malformed,
            out.summary.total_rows,
            frac * 100.0,
            MAX_MALFORMED_FRACTION * 100.0
        );
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
