//! Paired significance tests and k-fold aggregation.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

pub const ALPHA: f64 = 0.05;

/// Largest number of non-zero differences for which the Wilcoxon p-value
/// is computed exactly.
pub const WILCOXON_EXACT_MAX: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    /// `±inf` (serialized as `null`) when the differences are constant
    /// and non-zero.
    pub statistic: f64,
    pub p_value: f64,
    pub significant: bool,
    pub n_pairs: usize,
}

impl StatTestResult {
    fn new(statistic: f64, p_value: f64, n_pairs: usize) -> Self {
        let p_value = p_value.clamp(0.0, 1.0);
        StatTestResult {
            statistic,
            p_value,
            significant: p_value < ALPHA,
            n_pairs,
        }
    }
}

fn differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// Student t on the paired differences `a − b`, two-sided, `n − 1` df.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<StatTestResult> {
    let d = differences(a, b)?;
    let n = d.len();
    if n < 2 {
        return Err(Error::TestUndefined("paired t-test needs at least 2 pairs".into()));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            StatTestResult::new(0.0, 1.0, n)
        } else {
            StatTestResult::new(mean.signum() * f64::INFINITY, 0.0, n)
        });
    }
    let t = mean * (n as f64).sqrt() / sd;
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Config(e.to_string()))?;
    Ok(StatTestResult::new(t, 2.0 * dist.sf(t.abs()), n))
}

/// Average ranks of `values` (1-based), ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Signed-rank test. Zero differences are dropped, tied magnitudes get
/// average ranks, the statistic is `min(W⁺, W⁻)`. Up to
/// [`WILCOXON_EXACT_MAX`] pairs the two-sided p-value is the exact share of
/// the `2^m` sign assignments whose statistic is at most the observed one;
/// beyond that a normal approximation with tie and continuity corrections.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<StatTestResult> {
    let d: Vec<f64> = differences(a, b)?.into_iter().filter(|&x| x != 0.0).collect();
    let m = d.len();
    if m == 0 {
        return Err(Error::TestUndefined("all paired differences are zero".into()));
    }
    let ranks = average_ranks(&d.iter().map(|x| x.abs()).collect::<Vec<_>>());
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let total = (m * (m + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);

    let p = if m <= WILCOXON_EXACT_MAX {
        exact_wilcoxon_p(&ranks, w)
    } else {
        let mean = total / 2.0;
        let ties: f64 = tie_sizes(&ranks).map(|t| t * t * t - t).sum();
        let var = (m * (m + 1) * (2 * m + 1)) as f64 / 24.0 - ties / 48.0;
        let z = (w - mean + 0.5) / var.sqrt();
        2.0 * Normal::new(0.0, 1.0).expect("unit normal").cdf(z)
    };
    Ok(StatTestResult::new(w, p, m))
}

fn tie_sizes(ranks: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut sizes = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        sizes.push(j as f64);
        i += j;
    }
    sizes.into_iter()
}

/// Counts sign assignments by their doubled `W⁺` (ranks are multiples of
/// one half). By symmetry of the null distribution
/// `P(min(W⁺, W⁻) ≤ w) = min(1, 2·P(W⁺ ≤ w))`.
fn exact_wilcoxon_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let limit = (2.0 * w).round() as usize;
    let at_most: u64 = counts[..=limit].iter().sum();
    let assignments = 2f64.powi(ranks.len() as i32);
    (2.0 * at_most as f64 / assignments).min(1.0)
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Precision,
    Recall,
    F1,
    DetectionRate,
    FalseAlarmRate,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Accuracy,
        Metric::Precision,
        Metric::Recall,
        Metric::F1,
        Metric::DetectionRate,
        Metric::FalseAlarmRate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
            Metric::DetectionRate => "detection_rate",
            Metric::FalseAlarmRate => "false_alarm_rate",
        }
    }

    /// Accuracy is over all classes; the rest are for the positive class.
    pub fn of(self, r: &MetricsReport) -> f64 {
        match self {
            Metric::Accuracy => r.multiclass_accuracy,
            Metric::Precision => r.positive.precision,
            Metric::Recall => r.positive.recall,
            Metric::F1 => r.positive.f1,
            Metric::DetectionRate => r.positive.detection_rate,
            Metric::FalseAlarmRate => r.positive.false_alarm_rate,
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation (n − 1).
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanSd { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub metric: Metric,
    #[serde(flatten)]
    pub value: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<MetricsReport>,
    pub summary: Vec<SummaryEntry>,
}

impl CrossValReport {
    pub fn fold_values(&self, metric: Metric) -> Vec<f64> {
        self.folds.iter().map(|r| metric.of(r)).collect()
    }
}

/// Produces test-set predictions from `(fold, train, test)`.
pub type Pipeline<'a> = dyn Fn(usize, &Dataset, &Dataset) -> Result<Vec<usize>> + Sync + 'a;

/// Stratified k-fold evaluation. Folds run in parallel; reports keep fold
/// order.
pub fn crossval_report(d: &Dataset, pipeline: &Pipeline<'_>, k: usize, seed: u64) -> Result<CrossValReport> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let splits = d.kfold_split(k, seed)?;
    let names = d.schema.class_names();
    let folds = splits
        .par_iter()
        .enumerate()
        .map(|(i, (train, test))| {
            let pred = pipeline(i, train, test)?;
            MetricsReport::from_predictions(&test.labels(), &pred, &names, d.schema.positive_class)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = Metric::ALL
        .into_iter()
        .map(|metric| SummaryEntry {
            metric,
            value: MeanSd::of(&folds.iter().map(|r| metric.of(r)).collect::<Vec<_>>()),
        })
        .collect();
    Ok(CrossValReport { k, seed, folds, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: Metric,
    pub t_test: StatTestResult,
    /// `None` when every fold difference is zero.
    pub wilcoxon: Option<StatTestResult>,
}

/// Both tests on the per-fold values of `metric`. Reports must come from
/// the same folds.
pub fn compare_methods(a: &CrossValReport, b: &CrossValReport, metric: Metric) -> Result<Comparison> {
    if a.k != b.k || a.seed != b.seed {
        return Err(Error::Config("cross-validation reports use different folds".into()));
    }
    let (va, vb) = (a.fold_values(metric), b.fold_values(metric));
    let wilcoxon = match wilcoxon_signed_rank(&va, &vb) {
        Ok(r) => Some(r),
        Err(Error::TestUndefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Comparison {
        metric,
        t_test: paired_t_test(&va, &vb)?,
        wilcoxon,
    })
}
