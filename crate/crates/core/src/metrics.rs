//! Classification metrics: loss, top-1, top-5 and class-weighted F1.

/// Summary of one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub weighted_f1: f64,
    pub images_per_second: f64,
}

/// Running confusion matrix and loss over labelled predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricAccumulator {
    classes: usize,
    /// confusion[true * classes + predicted]
    confusion: Vec<u64>,
    top5_hits: u64,
    loss_sum: f64,
    count: u64,
}

/// Rank of `label` when classes are ordered by descending score, ties
/// broken by lower index (so rank 0 is the arg-max).
fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < label))
        .count()
}

fn log_softmax_at(scores: &[f64], label: usize) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = scores.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    scores[label] - lse
}

impl MetricAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            confusion: vec![0; classes * classes],
            top5_hits: 0,
            loss_sum: 0.0,
            count: 0,
        }
    }

    /// Adds one sample's logits; the loss term is its cross-entropy.
    pub fn add(&mut self, logits: &[f64], label: usize) {
        debug_assert_eq!(logits.len(), self.classes);
        let rank = rank_of(logits, label);
        let predicted = (0..self.classes)
            .find(|&c| rank_of(logits, c) == 0)
            .unwrap_or(0);
        self.confusion[label * self.classes + predicted] += 1;
        if rank < 5 {
            self.top5_hits += 1;
        }
        self.loss_sum -= log_softmax_at(logits, label);
        self.count += 1;
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            *a += b;
        }
        self.top5_hits += other.top5_hits;
        self.loss_sum += other.loss_sum;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn confusion(&self) -> &[u64] {
        &self.confusion
    }

    pub fn finish(&self, seconds: f64) -> Metrics {
        let n = self.count.max(1) as f64;
        let correct: u64 = (0..self.classes).map(|c| self.confusion[c * self.classes + c]).sum();
        Metrics {
            loss: self.loss_sum / n,
            top1: correct as f64 / n,
            top5: self.top5_hits as f64 / n,
            weighted_f1: weighted_f1(&self.confusion, self.classes),
            images_per_second: if seconds > 0.0 { self.count as f64 / seconds } else { 0.0 },
        }
    }
}

/// Per-class F1 = 2TP / (2TP + FP + FN), 0 when the class never occurs
/// in either labels or predictions.
pub fn per_class_f1(confusion: &[u64], classes: usize) -> Vec<f64> {
    (0..classes)
        .map(|c| {
            let tp = confusion[c * classes + c];
            let actual: u64 = (0..classes).map(|p| confusion[c * classes + p]).sum();
            let predicted: u64 = (0..classes).map(|t| confusion[t * classes + c]).sum();
            let denom = actual + predicted;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .collect()
}

/// Σ_c (n_c / N) · F1_c with n_c the number of samples labelled c.
pub fn weighted_f1(confusion: &[u64], classes: usize) -> f64 {
    let total: u64 = confusion.iter().sum();
    if total == 0 {
        return 0.0;
    }
    per_class_f1(confusion, classes)
        .iter()
        .enumerate()
        .map(|(c, f1)| {
            let n_c: u64 = (0..classes).map(|p| confusion[c * classes + p]).sum();
            n_c as f64 / total as f64 * f1
        })
        .sum()
}
