//! Versioned model bundles and the on-disk bundle store.
//!
//! Layout: `<root>/bundles/<version>/bundle.bin` plus `<root>/bundles/LATEST`,
//! a one-line file naming the newest published version. Publishing writes
//! the bundle first, then replaces `LATEST` by rename, so a reader never sees
//! a pointer to a half-written bundle.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSchema;
use crate::forest::{IsolationForestModel, RandomForestModel};
use crate::gnb::GnbModel;
use crate::impact::TierBounds;

pub const BUNDLE_FORMAT_VERSION: u32 = 1;
const BUNDLE_FILE: &str = "bundle.bin";
const LATEST_FILE: &str = "LATEST";

/// Decision thresholds chosen at training time, and the policies that chose
/// them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub gnb_epsilon: f64,
    pub gnb_epsilon_s: f64,
    /// Beta of the F-beta objective used to pick `gnb_epsilon`.
    pub gnb_beta: f64,
    pub iforest: Option<f64>,
    pub rf: Option<f64>,
    /// Minimum precision constraint used to pick the forest threshold.
    pub rf_min_precision: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub format_version: u32,
    pub version: String,
    pub created_at: DateTime<Utc>,
    pub schema: FeatureSchema,
    pub gnb: GnbModel,
    pub iforest: Option<IsolationForestModel>,
    pub rf: Option<RandomForestModel>,
    pub thresholds: Thresholds,
    pub tier_bounds: TierBounds,
}

/// Serialized form. The schema travels as its own JSON document.
#[derive(Serialize, Deserialize)]
struct Wire {
    format_version: u32,
    version: String,
    created_at: DateTime<Utc>,
    schema_json: String,
    gnb: GnbModel,
    iforest: Option<IsolationForestModel>,
    rf: Option<RandomForestModel>,
    thresholds: Thresholds,
    tier_bounds: TierBounds,
}

/// What `GET /v1/model` and `ps_bundle_version` report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleInfo {
    pub version: String,
    pub format_version: u32,
    pub created_at: DateTime<Utc>,
    pub n_features: usize,
    pub gnb_fit_level: String,
    pub gnb_nodes: usize,
    pub has_iforest: bool,
    pub has_rf: bool,
    pub thresholds: Thresholds,
    pub tier_bounds: Vec<f64>,
}

impl ModelBundle {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let wire = Wire {
            format_version: self.format_version,
            version: self.version.clone(),
            created_at: self.created_at,
            schema_json: self.schema.to_json()?,
            gnb: self.gnb.clone(),
            iforest: self.iforest.clone(),
            rf: self.rf.clone(),
            thresholds: self.thresholds.clone(),
            tier_bounds: self.tier_bounds.clone(),
        };
        Ok(bincode::serialize(&wire)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let format: u32 = bincode::deserialize(bytes)?;
        if format != BUNDLE_FORMAT_VERSION {
            return Err(Error::Bundle(format!(
                "unsupported bundle format {format}, expected {BUNDLE_FORMAT_VERSION}"
            )));
        }
        let w: Wire = bincode::deserialize(bytes)?;
        Ok(ModelBundle {
            format_version: w.format_version,
            version: w.version,
            created_at: w.created_at,
            schema: FeatureSchema::from_json(&w.schema_json)?,
            gnb: w.gnb,
            iforest: w.iforest,
            rf: w.rf,
            thresholds: w.thresholds,
            tier_bounds: w.tier_bounds,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn info(&self) -> BundleInfo {
        BundleInfo {
            version: self.version.clone(),
            format_version: self.format_version,
            created_at: self.created_at,
            n_features: self.schema.len(),
            gnb_fit_level: self.gnb.fit_level.to_string(),
            gnb_nodes: self.gnb.node_count(),
            has_iforest: self.iforest.is_some(),
            has_rf: self.rf.is_some(),
            thresholds: self.thresholds.clone(),
            tier_bounds: self.tier_bounds.as_slice().to_vec(),
        }
    }
}

/// Versions are `v` followed by six digits, assigned in publication order.
fn parse_version(name: &str) -> Option<u64> {
    let digits = name.strip_prefix('v')?;
    if digits.len() < 6 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

#[derive(Clone, Debug)]
pub struct BundleStore {
    root: PathBuf,
}

impl BundleStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        BundleStore { root: root.into() }
    }

    pub fn bundles_dir(&self) -> PathBuf {
        self.root.join("bundles")
    }

    pub fn bundle_path(&self, version: &str) -> PathBuf {
        self.bundles_dir().join(version).join(BUNDLE_FILE)
    }

    /// Published versions in ascending order.
    pub fn versions(&self) -> Result<Vec<String>> {
        let dir = self.bundles_dir();
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(vec![]),
            Err(e) => return Err(Error::io(&dir, e)),
        };
        let mut found: Vec<(u64, String)> = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(n) = parse_version(&name) {
                found.push((n, name));
            }
        }
        found.sort();
        Ok(found.into_iter().map(|(_, v)| v).collect())
    }

    pub fn next_version(&self) -> Result<String> {
        let last = self.versions()?.last().and_then(|v| parse_version(v)).unwrap_or(0);
        Ok(format!("v{:06}", last + 1))
    }

    /// Assigns the next version to `bundle`, writes it, then moves `LATEST`.
    pub fn publish(&self, bundle: &mut ModelBundle) -> Result<String> {
        let version = self.next_version()?;
        bundle.version = version.clone();
        let dir = self.bundles_dir().join(&version);
        if dir.exists() {
            return Err(Error::Conflict(format!("bundle {version} already exists")));
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(BUNDLE_FILE);
        let tmp = dir.join("bundle.bin.tmp");
        bundle.save(&tmp)?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;

        let latest = self.bundles_dir().join(LATEST_FILE);
        let latest_tmp = self.bundles_dir().join("LATEST.tmp");
        fs::write(&latest_tmp, format!("{version}\n")).map_err(|e| Error::io(&latest_tmp, e))?;
        fs::rename(&latest_tmp, &latest).map_err(|e| Error::io(&latest, e))?;
        Ok(version)
    }

    pub fn latest_version(&self) -> Result<String> {
        let path = self.bundles_dir().join(LATEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("no published bundle in {}", self.root.display())),
            _ => Error::io(&path, e),
        })?;
        let version = text.trim().to_string();
        if parse_version(&version).is_none() {
            return Err(Error::Bundle(format!("LATEST names invalid version {version:?}")));
        }
        Ok(version)
    }

    pub fn load(&self, version: &str) -> Result<ModelBundle> {
        let bundle = ModelBundle::load(&self.bundle_path(version))?;
        if bundle.version != version {
            return Err(Error::Bundle(format!(
                "directory {version} holds bundle {}",
                bundle.version
            )));
        }
        Ok(bundle)
    }

    pub fn load_latest(&self) -> Result<ModelBundle> {
        self.load(&self.latest_version()?)
    }
}
