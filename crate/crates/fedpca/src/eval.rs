//! Evaluation metrics and fairness summaries.
//!
//! Accuracy and AUC are computed per test distribution (common and rare) and
//! folded into worst-case / average / spread summaries, so a method that
//! sacrifices the minority distribution is visible even when its average
//! looks fine.
//!
//! AUC is the Mann–Whitney statistic (ties count 1/2), computed from average
//! ranks. The rank form equals the brute-force all-pairs count *exactly*:
//! every intermediate is a half-integer, which f64 represents without
//! rounding at these sample sizes. Multi-class AUC is the macro average of
//! one-vs-rest AUCs over the classes that have both positive and negative
//! examples.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::nn::{forward, predict, MlpParams};
use serde::Serialize;

/// Classification accuracy of the model on a labeled set.
pub fn accuracy(params: &MlpParams, features: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    if features.rows() == 0 {
        return Err(Error::InsufficientData("accuracy of an empty set".into()));
    }
    if labels.len() != features.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            features.rows()
        )));
    }
    let (predicted, _) = predict(params, features)?;
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Macro one-vs-rest AUC over the classes that have both positives and
/// negatives. `scores` holds one row per sample and one column per class.
/// Errors if no class is evaluable.
pub fn auc(scores: &DenseMatrix, labels: &[usize], num_classes: usize) -> Result<f64> {
    if scores.cols() != num_classes {
        return Err(Error::Shape(format!(
            "scores have {} columns for {num_classes} classes",
            scores.cols()
        )));
    }
    if labels.len() != scores.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} score rows",
            labels.len(),
            scores.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for class in 0..num_classes {
        let column: Vec<f64> = (0..scores.rows()).map(|i| scores.get(i, class)).collect();
        let positives: Vec<bool> = labels.iter().map(|&y| y == class).collect();
        if let Some(value) = one_vs_rest_auc(&column, &positives) {
            total += value;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::InsufficientData(
            "auc needs at least one class with both positives and negatives".into(),
        ));
    }
    Ok(total / counted as f64)
}

/// Rank-based Mann–Whitney AUC for one class; `None` when the class lacks
/// positives or negatives.
fn one_vs_rest_auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let n = scores.len();
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores are finite"));

    // Average 1-based ranks over tie groups; every rank is a half-integer.
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }

    let rank_sum: f64 = ranks
        .iter()
        .zip(positives)
        .filter(|(_, &p)| p)
        .map(|(r, _)| *r)
        .sum();
    let numerator = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(numerator / (n_pos as f64 * n_neg as f64))
}

/// Model AUC on a labeled set: softmax probabilities as scores.
pub fn model_auc(params: &MlpParams, features: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    let trace = forward(params, features)?;
    auc(&trace.probs, labels, params.num_classes())
}

/// Accuracy and AUC on both test distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistributionMetrics {
    pub common_acc: f64,
    pub rare_acc: f64,
    pub common_auc: f64,
    pub rare_auc: f64,
}

/// Fairness-aware summary across the two distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricSummary {
    pub worst_acc: f64,
    pub avg_acc: f64,
    /// Population standard deviation of accuracy across distributions.
    pub std_acc: f64,
    pub worst_auc: f64,
    pub avg_auc: f64,
    pub std_auc: f64,
}

/// Folds per-distribution metrics into worst / average / spread. With two
/// distributions the population standard deviation is `|a − b| / 2`.
pub fn summarize(metrics: &DistributionMetrics) -> MetricSummary {
    let fold = |a: f64, b: f64| {
        let avg = (a + b) / 2.0;
        let std = (((a - avg).powi(2) + (b - avg).powi(2)) / 2.0).sqrt();
        (a.min(b), avg, std)
    };
    let (worst_acc, avg_acc, std_acc) = fold(metrics.common_acc, metrics.rare_acc);
    let (worst_auc, avg_auc, std_auc) = fold(metrics.common_auc, metrics.rare_auc);
    MetricSummary { worst_acc, avg_acc, std_acc, worst_auc, avg_auc, std_auc }
}

/// Evaluates the model on both test distributions of a scenario.
pub fn evaluate_model(
    params: &MlpParams,
    test: &crate::data::TestSets,
) -> Result<DistributionMetrics> {
    Ok(DistributionMetrics {
        common_acc: accuracy(params, &test.common_features, &test.common_labels)?,
        rare_acc: accuracy(params, &test.rare_features, &test.rare_labels)?,
        common_auc: model_auc(params, &test.common_features, &test.common_labels)?,
        rare_auc: model_auc(params, &test.rare_features, &test.rare_labels)?,
    })
}

/// Mean over rounds of `w_rare · (1 − w_mislabeled)`: the share of weight on
/// truly rare clients times the share kept away from truly mislabeled ones.
/// Higher is better; always in [0, 1] for simplex weight vectors.
pub fn weight_diagnostic(
    round_weights: &[Vec<f64>],
    rare_clients: &[usize],
    mislabeled_clients: &[usize],
) -> Result<f64> {
    if round_weights.is_empty() {
        return Err(Error::InsufficientData("weight diagnostic over zero rounds".into()));
    }
    let mut total = 0.0;
    for weights in round_weights {
        let w_rare: f64 = rare_clients.iter().map(|&k| weights[k]).sum();
        let w_mis: f64 = mislabeled_clients.iter().map(|&k| weights[k]).sum();
        total += w_rare * (1.0 - w_mis);
    }
    Ok(total / round_weights.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    #[test]
    fn binary_auc_matches_hand_value() {
        // Positive class-1 scores {0.9, 0.4}, negatives {0.5, 0.1}: 3 of 4
        // pairs ordered correctly → 0.75.
        let scores = DenseMatrix::from_rows(&[
            vec![0.1, 0.9],
            vec![0.6, 0.4],
            vec![0.5, 0.5],
            vec![0.9, 0.1],
        ])
        .unwrap();
        let labels = vec![1, 1, 0, 0];
        assert_eq!(auc(&scores, &labels, 2).unwrap(), 0.75);
    }

    #[test]
    fn all_equal_scores_give_half() {
        let scores = DenseMatrix::from_rows(&vec![vec![0.5, 0.5]; 6]).unwrap();
        let labels = vec![0, 1, 0, 1, 0, 1];
        assert_eq!(auc(&scores, &labels, 2).unwrap(), 0.5);
    }

    /// All-pairs oracle: P(score_pos > score_neg) + ½·P(tie), macro-averaged
    /// the same way as the implementation.
    fn brute_force_auc(scores: &DenseMatrix, labels: &[usize], num_classes: usize) -> Option<f64> {
        let mut total = 0.0;
        let mut counted = 0usize;
        for class in 0..num_classes {
            let pos: Vec<f64> = labels
                .iter()
                .enumerate()
                .filter(|(_, &y)| y == class)
                .map(|(i, _)| scores.get(i, class))
                .collect();
            let neg: Vec<f64> = labels
                .iter()
                .enumerate()
                .filter(|(_, &y)| y != class)
                .map(|(i, _)| scores.get(i, class))
                .collect();
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            let mut wins = 0.0;
            for &p in &pos {
                for &n in &neg {
                    if p > n {
                        wins += 1.0;
                    } else if p == n {
                        wins += 0.5;
                    }
                }
            }
            total += wins / (pos.len() * neg.len()) as f64;
            counted += 1;
        }
        (counted > 0).then(|| total / counted as f64)
    }

    #[test]
    fn rank_auc_equals_brute_force_exactly() {
        let mut rng = rng_from_seed(40);
        for case in 0..20 {
            let n = 5 + case * 7 % 60;
            let c = 2 + case % 3;
            // Coarse grid scores force plenty of ties.
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..c).map(|_| rng.random_range(0..5) as f64 / 4.0).collect())
                .collect();
            let scores = DenseMatrix::from_rows(&rows).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let oracle = brute_force_auc(&scores, &labels, c);
            let fast = auc(&scores, &labels, c).ok();
            assert_eq!(fast, oracle, "case {case} diverged");
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms() {
        let mut rng = rng_from_seed(41);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let scores = DenseMatrix::from_rows(&rows).unwrap();
        let base = auc(&scores, &labels, 3).unwrap();
        let transformed = DenseMatrix::from_rows(
            &rows
                .iter()
                .map(|r| r.iter().map(|&v| (3.0 * v).tanh() + 2.0).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let after = auc(&transformed, &labels, 3).unwrap();
        assert!((base - after).abs() < 1e-12);
    }

    #[test]
    fn classes_without_both_sides_are_skipped() {
        let mut rng = rng_from_seed(42);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let scores3 = DenseMatrix::from_rows(&rows).unwrap();
        let labels: Vec<usize> = (0..12).map(|i| i % 2).collect(); // class 2 absent
        let scores2 = DenseMatrix::from_rows(
            &rows.iter().map(|r| r[..2].to_vec()).collect::<Vec<_>>(),
        )
        .unwrap();
        let with_empty_class = auc(&scores3, &labels, 3).unwrap();
        let without = auc(&scores2, &labels, 2).unwrap();
        assert_eq!(with_empty_class, without);
    }

    #[test]
    fn single_class_labels_error() {
        let scores = DenseMatrix::from_rows(&vec![vec![0.4, 0.6]; 4]).unwrap();
        assert!(auc(&scores, &[1, 1, 1, 1], 2).is_err());
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        // Identity-like network: logits = relu(x), so the larger coordinate
        // wins and row [2, 0] predicts class 0.
        let w1 = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let w2 = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let params =
            MlpParams::from_parts(w1, vec![0.0; 2], w2, vec![0.0; 2]).unwrap();
        let features = DenseMatrix::from_rows(&[
            vec![2.0, 0.0],
            vec![0.0, 3.0],
            vec![1.0, 0.5],
            vec![0.5, 1.0],
        ])
        .unwrap();
        let labels = vec![0, 1, 1, 1]; // third row is misclassified
        assert_eq!(accuracy(&params, &features, &labels).unwrap(), 0.75);
        assert!(accuracy(&params, &DenseMatrix::zeros(0, 2), &[]).is_err());
    }

    #[test]
    fn summarize_uses_min_mean_and_half_gap() {
        let metrics = DistributionMetrics {
            common_acc: 0.9,
            rare_acc: 0.7,
            common_auc: 0.95,
            rare_auc: 0.85,
        };
        let s = summarize(&metrics);
        assert_eq!(s.worst_acc, 0.7);
        assert!((s.avg_acc - 0.8).abs() < 1e-12);
        assert!((s.std_acc - 0.1).abs() < 1e-12);
        assert_eq!(s.worst_auc, 0.85);
        assert!((s.std_auc - 0.05).abs() < 1e-12);
    }

    #[test]
    fn weight_diagnostic_matches_hand_value() {
        let rounds = vec![vec![0.5, 0.3, 0.2], vec![0.6, 0.2, 0.2]];
        // w_rare = 0.2 both rounds; w_mis = 0.5 then 0.6.
        let d = weight_diagnostic(&rounds, &[2], &[0]).unwrap();
        assert!((d - (0.2 * 0.5 + 0.2 * 0.4) / 2.0).abs() < 1e-12);
        assert!(weight_diagnostic(&[], &[2], &[0]).is_err());
    }

    #[test]
    fn weight_diagnostic_stays_in_unit_interval() {
        let mut rng = rng_from_seed(43);
        for _ in 0..50 {
            let mut w: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let total: f64 = w.iter().sum();
            for v in &mut w {
                *v /= total;
            }
            let d = weight_diagnostic(&[w], &[0, 1], &[1, 2]).unwrap();
            assert!((0.0..=1.0).contains(&d));
        }
    }
}
