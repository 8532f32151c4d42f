#![allow(dead_code)]

use pricesentry::bundle::ModelBundle;
use pricesentry::datagen::{generate_catalog, CatalogConfig, LabeledDataset};
use pricesentry::train::{train_bundle, TrainConfig};

pub fn small_catalog(seed: u64) -> LabeledDataset {
    generate_catalog(&CatalogConfig {
        seed,
        n_normal: 20_000,
        n_anomalies: 100,
        ..CatalogConfig::default()
    })
    .unwrap()
}

/// A bundle fitted on a small catalog, with both forests.
pub fn small_bundle(seed: u64) -> (LabeledDataset, ModelBundle) {
    let data = small_catalog(seed);
    let bundle = train_bundle(&data, &TrainConfig::default()).unwrap();
    (data, bundle)
}

/// The same, GNB only; fast enough to fit several per test.
pub fn gnb_bundle(seed: u64) -> (LabeledDataset, ModelBundle) {
    let data = small_catalog(seed);
    let cfg = TrainConfig {
        iforest: None,
        rf: None,
        ..TrainConfig::default()
    };
    let bundle = train_bundle(&data, &cfg).unwrap();
    (data, bundle)
}
