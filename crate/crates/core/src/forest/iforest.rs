use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Matrix, Node, Tree};
use crate::error::{Error, Result};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IsolationForestConfig {
    pub n_trees: usize,
    /// Fraction of training rows drawn (without replacement) per tree.
    pub subsample_fraction: f64,
    /// Fraction of observed columns available to each tree.
    pub feature_fraction: f64,
    pub seed: u64,
}

impl Default for IsolationForestConfig {
    fn default() -> Self {
        IsolationForestConfig {
            n_trees: 100,
            subsample_fraction: 0.05,
            feature_fraction: 0.10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsolationForestModel {
    pub config: IsolationForestConfig,
    pub n_features: usize,
    pub subsample_size: usize,
    pub trees: Vec<Tree>,
}

/// Average path length of an unsuccessful binary-search-tree lookup over
/// `n` points; normalizes isolation depths.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * ((n - 1.0).ln() + EULER_GAMMA) - 2.0 * (n - 1.0) / n
        }
    }
}

impl IsolationForestModel {
    pub fn fit(data: &Matrix, config: &IsolationForestConfig) -> Result<Self> {
        if data.n_rows() < 2 {
            return Err(Error::Fit("isolation forest needs at least 2 rows".into()));
        }
        if config.n_trees == 0 {
            return Err(Error::Config("n_trees must be >= 1".into()));
        }
        for (name, v) in [
            ("subsample_fraction", config.subsample_fraction),
            ("feature_fraction", config.feature_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        let observed = data.observed_columns();
        if observed.is_empty() {
            return Err(Error::Fit("every feature column is fully masked".into()));
        }
        let subsample_size =
            ((config.subsample_fraction * data.n_rows() as f64).round() as usize).clamp(1, data.n_rows());
        let n_tree_features =
            ((config.feature_fraction * observed.len() as f64).round() as usize).clamp(1, observed.len());
        let max_depth = (subsample_size as f64).log2().ceil() as usize;

        let trees = (0..config.n_trees)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(i as u64));
                let rows: Vec<usize> = rand::seq::index::sample(&mut rng, data.n_rows(), subsample_size).into_vec();
                let mut features = observed.clone();
                features.shuffle(&mut rng);
                features.truncate(n_tree_features);
                features.sort_unstable();
                build_tree(data, rows, &features, max_depth, &mut rng)
            })
            .collect();

        Ok(IsolationForestModel {
            config: config.clone(),
            n_features: data.n_cols(),
            subsample_size,
            trees,
        })
    }

    /// Mean isolation depth of `row`, including the leaf-size correction.
    pub fn mean_path_length(&self, row: &[f64]) -> f64 {
        let total: f64 = self
            .trees
            .iter()
            .map(|t| {
                let (leaf, depth) = t.leaf(row);
                depth as f64 + average_path_length(t.nodes[leaf].value as usize)
            })
            .sum();
        total / self.trees.len() as f64
    }

    /// `2^(-E[h(x)] / c(n))`, in (0, 1); higher is more anomalous. With a
    /// single-row subsample every tree is a lone leaf and all scores are 0.5.
    pub fn score(&self, row: &[f64]) -> f64 {
        let c = average_path_length(self.subsample_size);
        if c == 0.0 {
            return 0.5;
        }
        2f64.powf(-self.mean_path_length(row) / c)
    }

    pub fn score_matrix(&self, data: &Matrix) -> Vec<f64> {
        (0..data.n_rows())
            .into_par_iter()
            .map(|i| self.score(data.row(i)))
            .collect()
    }
}

fn build_tree(data: &Matrix, rows: Vec<usize>, features: &[usize], max_depth: usize, rng: &mut ChaCha8Rng) -> Tree {
    let mut nodes: Vec<Node> = Vec::new();
    // (node index, rows, depth)
    let mut stack = vec![(0usize, rows, 0usize)];
    nodes.push(Node::leaf(0, 0.0));
    let mut order = features.to_vec();
    while let Some((idx, rows, depth)) = stack.pop() {
        nodes[idx] = Node::leaf(rows.len() as u32, 0.0);
        if depth >= max_depth || rows.len() <= 1 {
            continue;
        }
        order.shuffle(rng);
        let mut split = None;
        for &f in &order {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &r in &rows {
                let x = data.get(r, f);
                if !x.is_nan() {
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
            }
            if lo < hi {
                split = Some((f, rng.random_range(lo..hi)));
                break;
            }
        }
        let Some((f, threshold)) = split else { continue };

        let mut left = Vec::new();
        let mut right = Vec::new();
        let mut missing = Vec::new();
        for &r in &rows {
            let x = data.get(r, f);
            if x.is_nan() {
                missing.push(r);
            } else if x <= threshold {
                left.push(r);
            } else {
                right.push(r);
            }
        }
        let missing_left = left.len() >= right.len();
        if missing_left {
            left.extend(missing);
        } else {
            right.extend(missing);
        }
        let l = nodes.len();
        nodes.push(Node::leaf(0, 0.0));
        nodes.push(Node::leaf(0, 0.0));
        nodes[idx] = Node {
            feature: f as u32,
            threshold,
            left: l as u32,
            right: (l + 1) as u32,
            missing_left,
            value: rows.len() as u32,
            weight: 0.0,
        };
        stack.push((l, left, depth + 1));
        stack.push((l + 1, right, depth + 1));
    }
    Tree { nodes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn cluster_with_outlier() -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..500)
            .map(|_| vec![normal.sample(&mut rng), normal.sample(&mut rng)])
            .collect();
        rows.push(vec![12.0, -12.0]);
        Matrix::from_rows(&rows).unwrap()
    }

    fn toy_config() -> IsolationForestConfig {
        IsolationForestConfig {
            n_trees: 100,
            subsample_fraction: 0.5,
            feature_fraction: 1.0,
            seed: 3,
        }
    }

    #[test]
    fn c_n_values() {
        assert_eq!(average_path_length(1), 0.0);
        assert_eq!(average_path_length(2), 1.0);
        // 2 * (ln 255 + gamma) - 2 * 255 / 256
        let expected = 2.0 * ((255.0f64).ln() + EULER_GAMMA) - 2.0 * 255.0 / 256.0;
        assert!((average_path_length(256) - expected).abs() < 1e-12);
    }

    #[test]
    fn far_outlier_scores_highest() {
        let data = cluster_with_outlier();
        let model = IsolationForestModel::fit(&data, &toy_config()).unwrap();
        let scores = model.score_matrix(&data);
        let outlier = scores[500];
        assert!(scores[..500].iter().all(|&s| s < outlier));
        // centre of the cluster is less anomalous than the outlier
        assert!(model.score(&[0.0, 0.0]) < outlier);
        assert!(scores.iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn seeded_determinism() {
        let data = cluster_with_outlier();
        let a = IsolationForestModel::fit(&data, &toy_config()).unwrap();
        let b = IsolationForestModel::fit(&data, &toy_config()).unwrap();
        assert_eq!(a, b);
        let sa: Vec<u64> = a.score_matrix(&data).iter().map(|s| s.to_bits()).collect();
        let sb: Vec<u64> = b.score_matrix(&data).iter().map(|s| s.to_bits()).collect();
        assert_eq!(sa, sb);
    }

    #[test]
    fn subsample_size_and_depth_bound() {
        let rows: Vec<Vec<f64>> = (0..10_000).map(|i| vec![i as f64, (i % 17) as f64]).collect();
        let data = Matrix::from_rows(&rows).unwrap();
        let model = IsolationForestModel::fit(
            &data,
            &IsolationForestConfig {
                n_trees: 5,
                feature_fraction: 1.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(model.subsample_size, 500);
        for t in &model.trees {
            assert_eq!(t.nodes[0].value, 500);
            assert!(t.depth() <= 9);
        }
    }

    #[test]
    fn single_row_subsample_gives_equal_scores() {
        let data = cluster_with_outlier();
        let model = IsolationForestModel::fit(
            &data,
            &IsolationForestConfig {
                n_trees: 10,
                subsample_fraction: 1e-6,
                feature_fraction: 1.0,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(model.subsample_size, 1);
        let scores = model.score_matrix(&data);
        assert!(scores.iter().all(|&s| s == scores[0]));
    }

    #[test]
    fn masked_column_is_never_split_on() {
        let rows: Vec<Vec<f64>> = (0..200).map(|i| vec![f64::NAN, i as f64]).collect();
        let data = Matrix::from_rows(&rows).unwrap();
        let model = IsolationForestModel::fit(
            &data,
            &IsolationForestConfig {
                n_trees: 10,
                subsample_fraction: 1.0,
                feature_fraction: 0.5,
                seed: 9,
            },
        )
        .unwrap();
        for t in &model.trees {
            assert!(t.nodes.iter().filter(|n| !n.is_leaf()).all(|n| n.feature == 1));
        }
    }

    #[test]
    fn fit_errors() {
        let one = Matrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(IsolationForestModel::fit(&one, &toy_config()).is_err());
        let data = cluster_with_outlier();
        let bad = IsolationForestConfig {
            subsample_fraction: 0.0,
            ..toy_config()
        };
        assert!(IsolationForestModel::fit(&data, &bad).is_err());
    }
}
