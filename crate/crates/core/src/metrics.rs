//! Confusion-matrix metrics.
//!
//! Recall is `TP / (TP + FN)` and the detection rate is the same quantity.
//! A ratio with a zero denominator evaluates to 0 and is marked undefined.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// One-vs-rest counts for `positive_class`.
pub fn confusion(y_true: &[usize], y_pred: &[usize], positive_class: usize) -> Result<ConfusionCounts> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Shape("no predictions to score".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t == positive_class, p == positive_class) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// A ratio plus whether its denominator was non-zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub defined: bool,
}

fn ratio(num: u64, den: u64) -> Score {
    if den == 0 {
        Score { value: 0.0, defined: false }
    } else {
        Score {
            value: num as f64 / den as f64,
            defined: true,
        }
    }
}

pub fn precision(c: &ConfusionCounts) -> Score {
    ratio(c.tp, c.tp + c.fp)
}

pub fn recall(c: &ConfusionCounts) -> Score {
    ratio(c.tp, c.tp + c.fn_)
}

/// `2PR / (P + R)`; undefined when either input is, or both are zero.
pub fn f1(c: &ConfusionCounts) -> Score {
    f1_from(precision(c), recall(c))
}

pub fn f1_from(p: Score, r: Score) -> Score {
    let sum = p.value + r.value;
    if !p.defined || !r.defined || sum == 0.0 {
        return Score { value: 0.0, defined: false };
    }
    Score {
        value: 2.0 * p.value * r.value / sum,
        defined: true,
    }
}

pub fn accuracy(c: &ConfusionCounts) -> Score {
    ratio(c.tp + c.tn, c.total())
}

pub fn detection_rate(c: &ConfusionCounts) -> Score {
    recall(c)
}

pub fn false_alarm_rate(c: &ConfusionCounts) -> Score {
    ratio(c.fp, c.fp + c.tn)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    /// True instances of this class.
    pub support: u64,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub detection_rate: f64,
    pub false_alarm_rate: f64,
    /// Names of metrics whose denominator was zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

impl ClassMetrics {
    pub fn from_counts(class: usize, name: impl Into<String>, counts: ConfusionCounts) -> Self {
        let scores = [
            ("precision", precision(&counts)),
            ("recall", recall(&counts)),
            ("f1", f1(&counts)),
            ("accuracy", accuracy(&counts)),
            ("detection_rate", detection_rate(&counts)),
            ("false_alarm_rate", false_alarm_rate(&counts)),
        ];
        let undefined = scores
            .iter()
            .filter(|(_, s)| !s.defined)
            .map(|(n, _)| n.to_string())
            .collect();
        ClassMetrics {
            class,
            name: name.into(),
            support: counts.tp + counts.fn_,
            counts,
            precision: scores[0].1.value,
            recall: scores[1].1.value,
            f1: scores[2].1.value,
            accuracy: scores[3].1.value,
            detection_rate: scores[4].1.value,
            false_alarm_rate: scores[5].1.value,
            undefined,
        }
    }

    fn values(&self) -> [f64; 6] {
        [
            self.precision,
            self.recall,
            self.f1,
            self.accuracy,
            self.detection_rate,
            self.false_alarm_rate,
        ]
    }
}

/// Unweighted mean of the per-class metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub detection_rate: f64,
    pub false_alarm_rate: f64,
}

impl MacroAverage {
    fn of(classes: &[ClassMetrics]) -> Self {
        let n = classes.len() as f64;
        let mut sums = [0.0; 6];
        for c in classes {
            for (s, v) in sums.iter_mut().zip(c.values()) {
                *s += v;
            }
        }
        MacroAverage {
            precision: sums[0] / n,
            recall: sums[1] / n,
            f1: sums[2] / n,
            accuracy: sums[3] / n,
            detection_rate: sums[4] / n,
            false_alarm_rate: sums[5] / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_instances: u64,
    /// Overall fraction of exactly correct labels.
    pub multiclass_accuracy: f64,
    /// Metrics for the schema's positive class against everything else.
    pub positive: ClassMetrics,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: MacroAverage,
}

impl MetricsReport {
    /// `class_names[i]` names class `i`; its length fixes the class count.
    pub fn from_predictions(y_true: &[usize], y_pred: &[usize], class_names: &[String], positive_class: usize) -> Result<Self> {
        if positive_class >= class_names.len() {
            return Err(Error::Config(format!("positive class {positive_class} out of range")));
        }
        if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&l| l >= class_names.len()) {
            return Err(Error::Shape(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        let per_class = class_names
            .iter()
            .enumerate()
            .map(|(k, name)| Ok(ClassMetrics::from_counts(k, name.clone(), confusion(y_true, y_pred, k)?)))
            .collect::<Result<Vec<_>>>()?;
        let correct = y_true.iter().zip(y_pred).filter(|(t, p)| t == p).count();
        Ok(MetricsReport {
            n_instances: y_true.len() as u64,
            multiclass_accuracy: correct as f64 / y_true.len() as f64,
            positive: per_class[positive_class].clone(),
            macro_avg: MacroAverage::of(&per_class),
            per_class,
        })
    }

    /// One row per class plus a `macro` row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "class",
            "support",
            "precision",
            "recall",
            "f1",
            "accuracy",
            "detection_rate",
            "false_alarm_rate",
        ])?;
        for c in &self.per_class {
            let mut row = vec![c.name.clone(), c.support.to_string()];
            row.extend(c.values().iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        let m = &self.macro_avg;
        let mut row = vec!["macro".to_string(), self.n_instances.to_string()];
        row.extend(
            [m.precision, m.recall, m.f1, m.accuracy, m.detection_rate, m.false_alarm_rate]
                .iter()
                .map(|v| v.to_string()),
        );
        w.write_record(&row)?;
        w.flush().map_err(|e| Error::io("<metrics>", e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_small_example() {
        let c = confusion(&[1, 0, 1, 1], &[1, 0, 0, 1], 1).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, tn: 1, fp: 0, fn_: 1 });
        assert_eq!(precision(&c).value, 1.0);
        assert_eq!(recall(&c).value, 2.0 / 3.0);
        assert!((f1(&c).value - 0.8).abs() < 1e-15);
        assert_eq!(accuracy(&c).value, 0.75);
        assert_eq!(detection_rate(&c).value, 2.0 / 3.0);
        assert_eq!(false_alarm_rate(&c).value, 0.0);
    }

    #[test]
    fn perfect_prediction_has_no_errors() {
        let y = [0, 1, 2, 1, 0];
        let c = confusion(&y, &y, 1).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
    }

    #[test]
    fn zero_denominator_flagged() {
        let c = ConfusionCounts { tp: 0, tn: 5, fp: 0, fn_: 0 };
        assert_eq!(precision(&c), Score { value: 0.0, defined: false });
        assert!(!f1(&c).defined);
        let m = ClassMetrics::from_counts(1, "attack", c);
        assert_eq!(m.undefined, vec!["precision", "recall", "f1", "detection_rate"]);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(confusion(&[1, 0], &[1], 1).is_err());
    }

    #[test]
    fn report_csv_shape() {
        let names = vec!["normal".to_string(), "dos".to_string(), "probe".to_string()];
        let r = MetricsReport::from_predictions(&[0, 1, 2, 2], &[0, 1, 1, 2], &names, 1).unwrap();
        assert_eq!(r.positive.name, "dos");
        assert_eq!(r.multiclass_accuracy, 0.75);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().last().unwrap().starts_with("macro,4,"));
    }
}
