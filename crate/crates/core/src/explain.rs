//! Rule-based suspected-issue inference from per-feature GNB scores.
//!
//! Every baseline log feature has cost in its denominator, so several large
//! per-feature scores point at cost itself, while a single large score points
//! at that feature's numerator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COST: &str = "Cost";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuspectedIssues {
    pub issues: Vec<String>,
    pub epsilon_s: f64,
}

/// Production explanation threshold: a quarter of the anomaly threshold.
pub fn explain_threshold(epsilon: f64) -> Result<f64> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "anomaly threshold must be > 0, got {epsilon}"
        )));
    }
    Ok(epsilon / 4.0)
}

/// `scores[i]` is the per-feature score (missing as `None`) and `names[i]`
/// the issue name of its numerator.
pub fn suspected_issues(scores: &[Option<f64>], names: &[String], epsilon_s: f64) -> SuspectedIssues {
    debug_assert_eq!(scores.len(), names.len());
    let mut issues: Vec<String> = Vec::new();
    let mut num_not_null = 0usize;
    for (score, name) in scores.iter().zip(names) {
        match score {
            Some(s) if *s >= epsilon_s => issues.push(name.clone()),
            Some(_) => num_not_null += 1,
            None => {}
        }
    }
    if num_not_null <= 2 {
        issues.push(COST.to_string());
    } else if issues.len() > 1 {
        issues = vec![COST.to_string()];
    }
    if issues.iter().any(|s| s == COST) {
        for (score, name) in scores.iter().zip(names) {
            if matches!(score, Some(s) if *s < epsilon_s) {
                issues.push(name.clone());
            }
        }
    }
    SuspectedIssues { issues, epsilon_s }
}
