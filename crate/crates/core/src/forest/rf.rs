use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Matrix, Node, Tree};
use crate::error::{Error, Result};

const MISSING: u8 = u8::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    /// Features tried per split; `None` means `round(sqrt(d))`.
    pub max_features: Option<usize>,
    /// Candidate split points per feature (quantile bins), at most 254.
    pub max_bins: usize,
    /// Weight classes by inverse frequency.
    pub balanced: bool,
    pub seed: u64,
}

impl Default for RandomForestConfig {
    fn default() -> Self {
        RandomForestConfig {
            n_trees: 100,
            max_depth: 20,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_features: None,
            max_bins: 64,
            balanced: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForestModel {
    pub config: RandomForestConfig,
    pub n_features: usize,
    pub class_weights: [f64; 2],
    pub trees: Vec<Tree>,
    /// Probabilities strictly above this are anomalies.
    pub threshold: f64,
}

/// A fitted forest plus out-of-bag anomaly probabilities for every training
/// row (`NaN` for rows that landed in every bootstrap sample).
#[derive(Clone, Debug)]
pub struct RandomForestFit {
    pub model: RandomForestModel,
    pub oob_probability: Vec<f64>,
}

/// Per-column split thresholds; a value `v` falls in bin
/// `#{t in thresholds : t < v}`.
struct Binned {
    n_rows: usize,
    codes: Vec<u8>,
    thresholds: Vec<Vec<f64>>,
}

impl Binned {
    fn code(&self, row: usize, col: usize) -> u8 {
        self.codes[col * self.n_rows + row]
    }
}

fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = 0.5 * (lo + hi);
    if m >= hi || !m.is_finite() {
        lo
    } else {
        m
    }
}

const TAIL_QUANTILES: [f64; 5] = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2];

fn bin_columns(data: &Matrix, max_bins: usize) -> Binned {
    let n = data.n_rows();
    let cols: Vec<(Vec<f64>, Vec<u8>)> = (0..data.n_cols())
        .into_par_iter()
        .map(|c| {
            let mut values: Vec<f64> = (0..n).map(|r| data.get(r, c)).filter(|x| !x.is_nan()).collect();
            values.sort_unstable_by(f64::total_cmp);
            let mut distinct = values.clone();
            distinct.dedup();
            let thresholds: Vec<f64> = if distinct.len() <= max_bins {
                distinct.windows(2).map(|w| midpoint(w[0], w[1])).collect()
            } else {
                // even quantiles, plus finer cuts in both tails where rare
                // outliers would otherwise share a bin with many normals
                let m = values.len();
                let body = max_bins.saturating_sub(2 * TAIL_QUANTILES.len()).max(2);
                let mut ranks: Vec<usize> = (1..body).map(|j| j * m / body).collect();
                for q in TAIL_QUANTILES {
                    let k = (q * m as f64) as usize;
                    ranks.push(k.max(1));
                    ranks.push(m.saturating_sub(k.max(1)));
                }
                ranks.sort_unstable();
                ranks.dedup();
                let mut cuts: Vec<f64> = ranks
                    .into_iter()
                    .filter(|&k| k > 0 && k < m)
                    .map(|k| values[k - 1])
                    .collect();
                cuts.dedup();
                cuts.into_iter()
                    .filter_map(|cut| {
                        let next = distinct.partition_point(|&d| d <= cut);
                        distinct.get(next).map(|&hi| midpoint(cut, hi))
                    })
                    .collect()
            };
            let codes = (0..n)
                .map(|r| {
                    let x = data.get(r, c);
                    if x.is_nan() {
                        MISSING
                    } else {
                        thresholds.partition_point(|&t| t < x) as u8
                    }
                })
                .collect();
            (thresholds, codes)
        })
        .collect();
    let mut codes = Vec::with_capacity(n * data.n_cols());
    let mut thresholds = Vec::with_capacity(data.n_cols());
    for (t, c) in cols {
        thresholds.push(t);
        codes.extend(c);
    }
    Binned {
        n_rows: n,
        codes,
        thresholds,
    }
}

impl RandomForestModel {
    pub fn fit(data: &Matrix, labels: &[bool], config: &RandomForestConfig) -> Result<RandomForestFit> {
        if labels.len() != data.n_rows() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} rows",
                labels.len(),
                data.n_rows()
            )));
        }
        let n_pos = labels.iter().filter(|&&l| l).count();
        let n = labels.len();
        if n_pos == 0 || n_pos == n {
            return Err(Error::Fit("random forest needs both classes present".into()));
        }
        if config.n_trees == 0 || config.max_depth == 0 {
            return Err(Error::Config("n_trees and max_depth must be >= 1".into()));
        }
        if !(2..=254).contains(&config.max_bins) {
            return Err(Error::Config("max_bins must be in [2, 254]".into()));
        }
        let class_weights = if config.balanced {
            [n as f64 / (2.0 * (n - n_pos) as f64), n as f64 / (2.0 * n_pos as f64)]
        } else {
            [1.0, 1.0]
        };

        let binned = bin_columns(data, config.max_bins);
        let usable: Vec<usize> = (0..data.n_cols())
            .filter(|&c| !binned.thresholds[c].is_empty())
            .collect();
        let mtry = config
            .max_features
            .unwrap_or_else(|| (data.n_cols() as f64).sqrt().round() as usize)
            .clamp(1, usable.len().max(1));

        let builder = TreeBuilder {
            binned: &binned,
            labels,
            class_weights,
            usable: &usable,
            mtry,
            config,
        };
        let grown: Vec<(Tree, Vec<u32>)> = (0..config.n_trees)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(i as u64));
                let mut counts = vec![0u32; n];
                for _ in 0..n {
                    counts[rng.random_range(0..n)] += 1;
                }
                let tree = builder.grow(&counts, &mut rng);
                let oob: Vec<u32> = (0..n as u32).filter(|&r| counts[r as usize] == 0).collect();
                (tree, oob)
            })
            .collect();

        let mut votes = vec![0u32; n];
        let mut seen = vec![0u32; n];
        let mut trees = Vec::with_capacity(grown.len());
        for (tree, oob) in grown {
            for r in oob {
                let (leaf, _) = tree.leaf(data.row(r as usize));
                votes[r as usize] += tree.nodes[leaf].value;
                seen[r as usize] += 1;
            }
            trees.push(tree);
        }
        let oob_probability = votes
            .iter()
            .zip(&seen)
            .map(|(&v, &s)| if s == 0 { f64::NAN } else { v as f64 / s as f64 })
            .collect();

        Ok(RandomForestFit {
            model: RandomForestModel {
                config: config.clone(),
                n_features: data.n_cols(),
                class_weights,
                trees,
                threshold: 0.5,
            },
            oob_probability,
        })
    }

    /// Fraction of trees whose leaf votes anomaly.
    pub fn probability(&self, row: &[f64]) -> f64 {
        let votes: u32 = self
            .trees
            .iter()
            .map(|t| {
                let (leaf, _) = t.leaf(row);
                t.nodes[leaf].value
            })
            .sum();
        votes as f64 / self.trees.len() as f64
    }

    /// `(probability > threshold, probability)`.
    pub fn predict(&self, row: &[f64]) -> (bool, f64) {
        let p = self.probability(row);
        (p > self.threshold, p)
    }

    pub fn probability_matrix(&self, data: &Matrix) -> Vec<f64> {
        (0..data.n_rows())
            .into_par_iter()
            .map(|i| self.probability(data.row(i)))
            .collect()
    }
}

struct TreeBuilder<'a> {
    binned: &'a Binned,
    labels: &'a [bool],
    class_weights: [f64; 2],
    usable: &'a [usize],
    mtry: usize,
    config: &'a RandomForestConfig,
}

struct Split {
    feature: usize,
    bin: usize,
    missing_left: bool,
    score: f64,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    w: [f64; 2],
    n: usize,
}

impl Acc {
    fn add(&mut self, label: bool, weight: f64) {
        self.w[label as usize] += weight;
        self.n += 1;
    }

    fn merge(&self, o: &Acc) -> Acc {
        Acc {
            w: [self.w[0] + o.w[0], self.w[1] + o.w[1]],
            n: self.n + o.n,
        }
    }

    fn total(&self) -> f64 {
        self.w[0] + self.w[1]
    }

    /// Sum of squared class weights over total; larger is purer.
    fn purity(&self) -> f64 {
        let t = self.total();
        if t == 0.0 {
            0.0
        } else {
            (self.w[0] * self.w[0] + self.w[1] * self.w[1]) / t
        }
    }
}

impl TreeBuilder<'_> {
    fn grow(&self, counts: &[u32], rng: &mut ChaCha8Rng) -> Tree {
        let weights: Vec<f64> = counts
            .iter()
            .zip(self.labels)
            .map(|(&c, &l)| c as f64 * self.class_weights[l as usize])
            .collect();
        let rows: Vec<u32> = (0..counts.len() as u32).filter(|&r| counts[r as usize] > 0).collect();

        let mut nodes = vec![Node::leaf(0, 0.0)];
        let mut stack = vec![(0usize, rows, 0usize)];
        let mut order = self.usable.to_vec();
        let max_bins = self.config.max_bins + 1;
        let mut hist = vec![Acc::default(); max_bins];

        while let Some((idx, rows, depth)) = stack.pop() {
            let mut acc = Acc::default();
            for &r in &rows {
                acc.add(self.labels[r as usize], weights[r as usize]);
            }
            let p1 = if acc.total() > 0.0 { acc.w[1] / acc.total() } else { 0.0 };
            nodes[idx] = Node::leaf((acc.w[1] > acc.w[0]) as u32, p1);
            if acc.w[0] == 0.0
                || acc.w[1] == 0.0
                || depth >= self.config.max_depth
                || rows.len() < self.config.min_samples_split
            {
                continue;
            }

            order.shuffle(rng);
            let parent_purity = acc.purity();
            let mut best: Option<Split> = None;
            let mut tried = 0;
            for &f in &order {
                if tried >= self.mtry {
                    break;
                }
                let nb = self.binned.thresholds[f].len() + 1;
                hist[..nb].iter_mut().for_each(|h| *h = Acc::default());
                let mut missing = Acc::default();
                for &r in &rows {
                    let r = r as usize;
                    let code = self.binned.code(r, f);
                    if code == MISSING {
                        missing.add(self.labels[r], weights[r]);
                    } else {
                        hist[code as usize].add(self.labels[r], weights[r]);
                    }
                }
                let occupied = hist[..nb].iter().filter(|h| h.n > 0).count();
                if occupied < 2 {
                    continue;
                }
                tried += 1;

                let present = hist[..nb].iter().fold(Acc::default(), |a, h| a.merge(h));
                let mut left = Acc::default();
                for (bin, h) in hist[..nb - 1].iter().enumerate() {
                    left = left.merge(h);
                    let right = Acc {
                        w: [present.w[0] - left.w[0], present.w[1] - left.w[1]],
                        n: present.n - left.n,
                    };
                    if left.n == 0 || right.n == 0 {
                        continue;
                    }
                    let missing_left = left.n >= right.n;
                    let (l, r) = if missing_left {
                        (left.merge(&missing), right)
                    } else {
                        (left, right.merge(&missing))
                    };
                    if l.n < self.config.min_samples_leaf || r.n < self.config.min_samples_leaf {
                        continue;
                    }
                    let score = l.purity() + r.purity();
                    if best.as_ref().is_none_or(|b| score > b.score) {
                        best = Some(Split {
                            feature: f,
                            bin,
                            missing_left,
                            score,
                        });
                    }
                }
            }

            let Some(split) = best else { continue };
            if split.score <= parent_purity * (1.0 + 1e-12) {
                continue;
            }
            let (mut left_rows, mut right_rows) = (Vec::new(), Vec::new());
            for &r in &rows {
                let code = self.binned.code(r as usize, split.feature);
                let go_left = if code == MISSING {
                    split.missing_left
                } else {
                    code as usize <= split.bin
                };
                if go_left {
                    left_rows.push(r);
                } else {
                    right_rows.push(r);
                }
            }
            let l = nodes.len();
            nodes.push(Node::leaf(0, 0.0));
            nodes.push(Node::leaf(0, 0.0));
            nodes[idx] = Node {
                feature: split.feature as u32,
                threshold: self.binned.thresholds[split.feature][split.bin],
                left: l as u32,
                right: (l + 1) as u32,
                missing_left: split.missing_left,
                value: 0,
                weight: 0.0,
            };
            stack.push((l, left_rows, depth + 1));
            stack.push((l + 1, right_rows, depth + 1));
        }
        Tree { nodes }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable() -> (Matrix, Vec<bool>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..300 {
            let x = (i % 30) as f64;
            let y = (i / 30) as f64;
            rows.push(vec![x, y, (i % 7) as f64]);
            labels.push(x + y > 25.0);
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    fn cfg() -> RandomForestConfig {
        RandomForestConfig {
            n_trees: 30,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn separable_training_accuracy_is_one() {
        let (data, labels) = separable();
        let fit = RandomForestModel::fit(&data, &labels, &cfg()).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            assert_eq!(fit.model.predict(data.row(i)).0, l, "row {i}");
        }
    }

    #[test]
    fn seeded_determinism() {
        let (data, labels) = separable();
        let a = RandomForestModel::fit(&data, &labels, &cfg()).unwrap();
        let b = RandomForestModel::fit(&data, &labels, &cfg()).unwrap();
        assert_eq!(a.model, b.model);
        let pa: Vec<u64> = a.model.probability_matrix(&data).iter().map(|p| p.to_bits()).collect();
        let pb: Vec<u64> = b.model.probability_matrix(&data).iter().map(|p| p.to_bits()).collect();
        assert_eq!(pa, pb);
    }

    #[test]
    fn depth_one_gives_stumps() {
        let (data, labels) = separable();
        let fit = RandomForestModel::fit(&data, &labels, &RandomForestConfig { max_depth: 1, ..cfg() }).unwrap();
        assert!(fit.model.trees.iter().all(|t| t.depth() <= 1));
        assert!(fit.model.trees.iter().any(|t| t.depth() == 1));
    }

    #[test]
    fn probability_bounds_and_strict_threshold() {
        let (data, labels) = separable();
        let mut model = RandomForestModel::fit(&data, &labels, &cfg()).unwrap().model;
        let far = [29.0, 9.0, 0.0];
        assert_eq!(model.probability(&far), 1.0);
        model.threshold = 1.0;
        assert_eq!(model.predict(&far), (false, 1.0));
        for i in 0..data.n_rows() {
            let p = model.probability(data.row(i));
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn missing_values_are_routed_not_dropped() {
        let (data, labels) = separable();
        let model = RandomForestModel::fit(&data, &labels, &cfg()).unwrap().model;
        let p = model.probability(&[f64::NAN, f64::NAN, f64::NAN]);
        assert!((0.0..=1.0).contains(&p));

        // training data with missing entries also fits
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|i| vec![if i % 5 == 0 { f64::NAN } else { i as f64 }, (i % 3) as f64])
            .collect();
        let labels: Vec<bool> = (0..200).map(|i| i >= 150).collect();
        let fit = RandomForestModel::fit(&Matrix::from_rows(&rows).unwrap(), &labels, &cfg()).unwrap();
        assert_eq!(fit.oob_probability.len(), 200);
    }

    #[test]
    fn oob_probabilities_separate_classes() {
        let (data, labels) = separable();
        let fit = RandomForestModel::fit(&data, &labels, &cfg()).unwrap();
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (p, l) in fit.oob_probability.iter().zip(&labels) {
            if p.is_nan() {
                continue;
            }
            if *l {
                pos.push(*p)
            } else {
                neg.push(*p)
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&pos) > 0.8 && mean(&neg) < 0.2);
    }

    #[test]
    fn single_class_is_an_error() {
        let (data, _) = separable();
        let labels = vec![false; data.n_rows()];
        assert!(RandomForestModel::fit(&data, &labels, &cfg()).is_err());
    }

    #[test]
    fn tree_order_does_not_change_probability() {
        let (data, labels) = separable();
        let model = RandomForestModel::fit(&data, &labels, &cfg()).unwrap().model;
        let mut reversed = model.clone();
        reversed.trees.reverse();
        for i in 0..data.n_rows() {
            assert_eq!(model.probability(data.row(i)), reversed.probability(data.row(i)));
        }
    }
}
