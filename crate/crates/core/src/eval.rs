//! Metrics, threshold selection, cross-validated thresholding, PR curves and
//! anomaly-rate sweeps.
//!
//! Every decision rule in this module predicts "anomaly" when
//! `score > threshold`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(1 + b^2) p r / (b^2 p + r)`, or 0 when the denominator is 0.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            c.add(s > threshold, l);
        }
        c
    }

    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    /// `tp / (tp + fp)`; 0 when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `tp / (tp + fn)`; 0 when there are no positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f_beta(&self, beta: f64) -> f64 {
        f_beta(self.precision(), self.recall(), beta)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    MaxFBeta { beta: f64 },
    MaxRecallAtMinPrecision { min_precision: f64 },
}

impl ThresholdPolicy {
    pub const F1: ThresholdPolicy = ThresholdPolicy::MaxFBeta { beta: 1.0 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdPolicy::MaxFBeta { beta } if !(beta > 0.0 && beta.is_finite()) => {
                Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")))
            }
            ThresholdPolicy::MaxRecallAtMinPrecision { min_precision }
                if !(min_precision > 0.0 && min_precision <= 1.0) =>
            {
                Err(Error::InvalidArgument(format!(
                    "min_precision must be in (0, 1], got {min_precision}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// The beta reported alongside this policy's results (1 for the
    /// precision-constrained policy).
    pub fn beta(&self) -> f64 {
        match *self {
            ThresholdPolicy::MaxFBeta { beta } => beta,
            ThresholdPolicy::MaxRecallAtMinPrecision { .. } => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    /// F-beta for `MaxFBeta`; recall (or precision on fallback) otherwise.
    pub objective: f64,
    pub precision: f64,
    pub recall: f64,
    /// False when no threshold reached the minimum precision and the
    /// highest-precision threshold was returned instead.
    pub constraint_met: bool,
}

/// A value `t` with `lo <= t < hi`, as close to the midpoint as floats allow.
pub fn split_point(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m >= hi || !m.is_finite() {
        lo
    } else {
        m
    }
}

/// Candidate thresholds from highest to lowest with the confusion each one
/// produces: `+inf`, every split point between consecutive distinct scores,
/// and `-inf`.
pub fn threshold_candidates(scores: &[f64], labels: &[bool]) -> Vec<(f64, Confusion)> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut out = Vec::new();
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        tn: n_neg,
        fn_: n_pos,
    };
    out.push((f64::INFINITY, c));
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                c.tp += 1;
                c.fn_ -= 1;
            } else {
                c.fp += 1;
                c.tn -= 1;
            }
            i += 1;
        }
        let t = match order.get(i) {
            Some(&next) => split_point(scores[next], s),
            None => f64::NEG_INFINITY,
        };
        out.push((t, c));
    }
    out
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    if !labels.iter().any(|&l| l) {
        return Err(Error::InvalidArgument("no positive labels".into()));
    }
    Ok(())
}

/// Sweeps every candidate threshold and returns the best under `policy`.
/// Candidates are visited from high to low and only a strictly better
/// objective replaces the incumbent, so ties go to the higher threshold.
pub fn select_threshold(scores: &[f64], labels: &[bool], policy: ThresholdPolicy) -> Result<ThresholdChoice> {
    check_inputs(scores, labels)?;
    policy.validate()?;
    let candidates = threshold_candidates(scores, labels);
    Ok(choose(&candidates, policy))
}

fn choose(candidates: &[(f64, Confusion)], policy: ThresholdPolicy) -> ThresholdChoice {
    let choice = |t: f64, c: &Confusion, objective: f64, met: bool| ThresholdChoice {
        threshold: t,
        objective,
        precision: c.precision(),
        recall: c.recall(),
        constraint_met: met,
    };
    match policy {
        ThresholdPolicy::MaxFBeta { beta } => {
            let mut best: Option<ThresholdChoice> = None;
            for (t, c) in candidates {
                let f = c.f_beta(beta);
                if best.is_none_or(|b| f > b.objective) {
                    best = Some(choice(*t, c, f, true));
                }
            }
            best.expect("candidates always include +inf")
        }
        ThresholdPolicy::MaxRecallAtMinPrecision { min_precision } => {
            let mut best: Option<ThresholdChoice> = None;
            for (t, c) in candidates {
                if c.precision() >= min_precision && best.is_none_or(|b| c.recall() > b.objective) {
                    best = Some(choice(*t, c, c.recall(), true));
                }
            }
            best.unwrap_or_else(|| {
                let mut fallback: Option<ThresholdChoice> = None;
                for (t, c) in candidates {
                    if fallback.is_none_or(|b| c.precision() > b.objective) {
                        fallback = Some(choice(*t, c, c.precision(), false));
                    }
                }
                fallback.expect("candidates always include +inf")
            })
        }
    }
}

/// Fold index per sample. Positives and negatives are shuffled separately
/// and dealt round-robin, so every fold gets `floor` or `ceil` of each class.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} positives cannot fill {k} folds",
            pos.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut fold = vec![0; labels.len()];
    for class in [&pos, &neg] {
        for (j, &i) in class.iter().enumerate() {
            fold[i] = j % k;
        }
    }
    Ok(fold)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// One point per distinct score (predicting `score >= threshold`),
    /// ascending in recall.
    pub points: Vec<PrPoint>,
    /// Step-wise area: sum of `(r_k - r_{k-1}) * p_k`.
    pub auc: f64,
}

pub fn pr_curve_auc(scores: &[f64], labels: &[bool]) -> Result<PrCurve> {
    check_inputs(scores, labels)?;
    let candidates = threshold_candidates(scores, labels);
    let mut order: Vec<f64> = scores.to_vec();
    order.sort_unstable_by(|a, b| b.total_cmp(a));
    order.dedup();
    let mut points = Vec::with_capacity(order.len());
    let mut auc = 0.0;
    let mut prev_recall = 0.0;
    // candidates[k + 1] is the confusion after admitting the k-th distinct score
    for (s, (_, c)) in order.iter().zip(&candidates[1..]) {
        let (r, p) = (c.recall(), c.precision());
        auc += (r - prev_recall) * p;
        prev_recall = r;
        points.push(PrPoint {
            threshold: *s,
            recall: r,
            precision: p,
        });
    }
    Ok(PrCurve { points, auc })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: ThresholdPolicy,
    pub folds: usize,
    pub precision: f64,
    pub recall: f64,
    pub beta: f64,
    pub f_beta: f64,
    pub f1: f64,
    pub auc_pr: f64,
    pub fold_thresholds: Vec<f64>,
    pub confusion: Confusion,
    pub pr_points: Vec<PrPoint>,
}

/// Each fold is predicted with the threshold selected on the other folds;
/// metrics are computed on the pooled predictions.
pub fn cv_threshold_evaluate(
    scores: &[f64],
    labels: &[bool],
    k: usize,
    policy: ThresholdPolicy,
    seed: u64,
) -> Result<EvalReport> {
    check_inputs(scores, labels)?;
    policy.validate()?;
    let fold = stratified_folds(labels, k, seed)?;
    let mut confusion = Confusion::default();
    let mut fold_thresholds = Vec::with_capacity(k);
    for f in 0..k {
        let (mut train_s, mut train_l) = (Vec::new(), Vec::new());
        for i in 0..scores.len() {
            if fold[i] != f {
                train_s.push(scores[i]);
                train_l.push(labels[i]);
            }
        }
        let t = select_threshold(&train_s, &train_l, policy)?.threshold;
        fold_thresholds.push(t);
        for i in (0..scores.len()).filter(|&i| fold[i] == f) {
            confusion.add(scores[i] > t, labels[i]);
        }
    }
    let curve = pr_curve_auc(scores, labels)?;
    Ok(EvalReport {
        policy,
        folds: k,
        precision: confusion.precision(),
        recall: confusion.recall(),
        beta: policy.beta(),
        f_beta: confusion.f_beta(policy.beta()),
        f1: confusion.f_beta(1.0),
        auc_pr: curve.auc,
        fold_thresholds,
        confusion,
        pr_points: curve.points,
    })
}

/// `n` rates spaced evenly in log space over `[lo, hi]`.
pub fn log_spaced_rates(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| {
                    if i == 0 {
                        lo
                    } else if i == n - 1 {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

/// Normals kept so that `n_pos` positives make up `rate` of the subset.
pub fn normals_for_rate(n_pos: usize, rate: f64) -> usize {
    (n_pos as f64 * (1.0 - rate) / rate).round() as usize
}

/// Indices of all positives plus a prefix of one seeded permutation of the
/// negatives, sized for `rate`. Subsets for higher rates are nested inside
/// those for lower rates under the same seed.
pub fn undersample_for_rate(labels: &[bool], rate: f64, seed: u64) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidArgument(format!("rate must be in (0, 1), got {rate}")));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let want = normals_for_rate(pos.len(), rate);
    if want > neg.len() {
        let min_rate = pos.len() as f64 / labels.len() as f64;
        return Err(Error::InvalidArgument(format!(
            "rate {rate} needs {want} normals but the pool has {}; lowest attainable rate is {min_rate:.6}",
            neg.len()
        )));
    }
    neg.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = pos;
    out.extend_from_slice(&neg[..want]);
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub rate: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc_pr: f64,
}

/// Cross-validated metrics at each anomaly rate after undersampling
/// normals, averaged over `repeats` draws of the undersample and folds
/// (seeds `seed`, `seed + 1`, ...).
pub fn anomaly_rate_sweep(
    scores: &[f64],
    labels: &[bool],
    rates: &[f64],
    k: usize,
    policy: ThresholdPolicy,
    seed: u64,
    repeats: usize,
) -> Result<Vec<RatePoint>> {
    check_inputs(scores, labels)?;
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be >= 1".into()));
    }
    rates
        .iter()
        .map(|&rate| {
            let mut point = RatePoint {
                rate,
                n_pos: 0,
                n_neg: 0,
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
                auc_pr: 0.0,
            };
            for j in 0..repeats as u64 {
                let seed = seed.wrapping_add(j);
                let idx = undersample_for_rate(labels, rate, seed)?;
                let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
                let report = cv_threshold_evaluate(&s, &l, k, policy, seed)?;
                point.n_pos = l.iter().filter(|&&x| x).count();
                point.n_neg = l.len() - point.n_pos;
                point.precision += report.precision;
                point.recall += report.recall;
                point.f1 += report.f1;
                point.auc_pr += report.auc_pr;
            }
            let r = repeats as f64;
            point.precision /= r;
            point.recall /= r;
            point.f1 /= r;
            point.auc_pr /= r;
            Ok(point)
        })
        .collect()
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `NaN` if either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
