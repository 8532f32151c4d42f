//! Tree ensembles over the full feature vector: an unsupervised isolation
//! forest and a supervised random forest.
//!
//! Both consume a dense row-major [`Matrix`] in which masked entries are
//! `NaN`. At a split, a row whose feature is missing follows the child that
//! received more training rows.

mod iforest;
mod rf;

pub use iforest::{average_path_length, IsolationForestConfig, IsolationForestModel};
pub use rf::{RandomForestConfig, RandomForestFit, RandomForestModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSchema, FeatureVector};
use crate::record::ItemRecord;

/// Dense row-major matrix; `NaN` marks a missing entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    n_rows: usize,
    n_cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(n_rows: usize, n_cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_rows * n_cols {
            return Err(Error::InvalidArgument(format!(
                "matrix data has {} values, expected {n_rows} x {n_cols}",
                values.len()
            )));
        }
        Ok(Matrix { n_rows, n_cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Ok(Matrix {
            n_rows: rows.len(),
            n_cols,
            values: rows.concat(),
        })
    }

    pub fn from_vectors(vectors: &[FeatureVector]) -> Result<Self> {
        let n_cols = vectors.first().map_or(0, FeatureVector::len);
        let mut values = Vec::with_capacity(vectors.len() * n_cols);
        for v in vectors {
            if v.len() != n_cols {
                return Err(Error::InvalidArgument("feature vectors differ in length".into()));
            }
            values.extend(
                v.values
                    .iter()
                    .zip(&v.missing)
                    .map(|(&x, &m)| if m { f64::NAN } else { x }),
            );
        }
        Ok(Matrix {
            n_rows: vectors.len(),
            n_cols,
            values,
        })
    }

    /// Builds the tree-model matrix for `records` under `schema`.
    pub fn from_records(schema: &FeatureSchema, records: &[ItemRecord]) -> Self {
        use rayon::prelude::*;
        let n_cols = schema.len();
        let rows: Vec<Vec<f64>> = records
            .par_iter()
            .map(|r| schema.build_feature_vector(r).values)
            .collect();
        let mut values = Vec::with_capacity(records.len() * n_cols);
        for r in rows {
            values.extend(r);
        }
        Matrix {
            n_rows: records.len(),
            n_cols,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_cols + col]
    }

    /// Columns with at least one non-missing value.
    pub(crate) fn observed_columns(&self) -> Vec<usize> {
        (0..self.n_cols)
            .filter(|&c| (0..self.n_rows).any(|r| !self.get(r, c).is_nan()))
            .collect()
    }
}

const LEAF: u32 = u32::MAX;

/// Flattened binary tree node. Leaves have `feature == u32::MAX`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub feature: u32,
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    pub missing_left: bool,
    /// Isolation trees: training rows reaching this node. Random forest
    /// leaves: 1 when the leaf votes anomaly, else 0.
    pub value: u32,
    /// Random forest leaves: class-weighted anomaly fraction.
    pub weight: f64,
}

impl Node {
    fn leaf(value: u32, weight: f64) -> Self {
        Node {
            feature: LEAF,
            threshold: 0.0,
            left: 0,
            right: 0,
            missing_left: false,
            value,
            weight,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.feature == LEAF
    }
}

/// A tree stored as a node array; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Index of the leaf reached by `row` and its depth.
    pub fn leaf(&self, row: &[f64]) -> (usize, usize) {
        let mut idx = 0usize;
        let mut depth = 0usize;
        loop {
            let n = &self.nodes[idx];
            if n.is_leaf() {
                return (idx, depth);
            }
            let x = row[n.feature as usize];
            let go_left = if x.is_nan() { n.missing_left } else { x <= n.threshold };
            idx = if go_left { n.left } else { n.right } as usize;
            depth += 1;
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            let n = &t.nodes[i];
            if n.is_leaf() {
                0
            } else {
                1 + walk(t, n.left as usize).max(walk(t, n.right as usize))
            }
        }
        walk(self, 0)
    }
}
