use serde::{Deserialize, Serialize};

use crate::graph::Task;

pub fn rmse(pred: &[f64], y: &[f64]) -> f64 {
    assert_eq!(pred.len(), y.len());
    let n = pred.len() as f64;
    (pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n).sqrt()
}

/// Area under the ROC curve from average ranks (ties share their mean rank).
/// `None` when only one class is present.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count() as f64 * avg;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of probabilities on the right side of 0.5 (0.5 counts as positive).
pub fn accuracy(probs: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(probs.len(), labels.len());
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| (p >= 0.5) == (l == 1.0))
        .count();
    hits as f64 / probs.len() as f64
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Evaluation results; absent fields do not apply to the task or are undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub rmse: Option<f64>,
    pub auroc: Option<f64>,
    pub accuracy: Option<f64>,
}

impl Metrics {
    pub fn compute(task: Task, scores: &[f64], y: &[f64]) -> Metrics {
        match task {
            Task::Regression => Metrics {
                n: y.len(),
                rmse: Some(rmse(scores, y)),
                auroc: None,
                accuracy: None,
            },
            Task::Classification => Metrics {
                n: y.len(),
                rmse: None,
                auroc: auroc(scores, y),
                accuracy: Some(accuracy(scores, y)),
            },
        }
    }

    /// The model-selection metric: RMSE for regression, AUROC for
    /// classification (accuracy when AUROC is undefined).
    pub fn primary(&self) -> f64 {
        self.rmse.or(self.auroc).or(self.accuracy).unwrap_or(f64::NAN)
    }

    pub fn primary_name(task: Task) -> &'static str {
        match task {
            Task::Regression => "rmse",
            Task::Classification => "auroc",
        }
    }

    /// Whether `self` beats `other` on the selection metric.
    pub fn better_than(&self, other: &Metrics, task: Task) -> bool {
        let (a, b) = (self.primary(), other.primary());
        match task {
            Task::Regression => a < b,
            Task::Classification => a > b,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0., 0., 1., 1.]), Some(0.75));
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0., 0., 1., 1.]), Some(1.0));
        assert_eq!(auroc(&[0.3; 6], &[0., 1., 0., 1., 1., 0.]), Some(0.5));
        assert_eq!(auroc(&[0.3, 0.4], &[1., 1.]), None);
    }

    #[test]
    fn accuracy_and_rmse() {
        assert_eq!(accuracy(&[0.9, 0.1, 0.5], &[1., 0., 1.]), 1.0);
        assert_eq!(accuracy(&[0.9, 0.6], &[1., 0.]), 0.5);
        assert!((rmse(&[1.0, 3.0], &[0.0, 3.0]) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn single_class_still_has_accuracy() {
        let m = Metrics::compute(Task::Classification, &[0.7, 0.2], &[1.0, 1.0]);
        assert_eq!(m.auroc, None);
        assert_eq!(m.accuracy, Some(0.5));
    }

    #[test]
    fn population_statistics() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_std(&[4.0; 5]).1, 0.0);
    }
}
