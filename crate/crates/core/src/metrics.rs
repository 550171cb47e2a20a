//! Classification metrics.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Macro-averaged one-vs-rest ROC AUC with midrank tie handling.
///
/// Classes with no positive or no negative samples are skipped; if every
/// class is degenerate the AUC is undefined.
pub fn compute_auc(scores: &Matrix, labels: &Matrix) -> Result<f64> {
    if scores.rows() != labels.rows() || scores.cols() != labels.cols() {
        return Err(Error::Shape("scores/labels shape mismatch".into()));
    }
    let n = scores.rows();
    if n < 2 {
        return Err(Error::UndefinedMetric("need at least two samples".into()));
    }
    let classes = scores.cols();
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..classes {
        let positives = (0..n).filter(|&r| labels.get(r, c) == 1.0).count();
        let negatives = n - positives;
        if positives == 0 || negatives == 0 {
            continue;
        }
        total += binary_auc_midrank(scores, labels, c);
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::UndefinedMetric("all samples share one class".into()));
    }
    Ok(total / counted as f64)
}

/// Rank-sum (Mann-Whitney) AUC for one class column, ties at midrank.
fn binary_auc_midrank(scores: &Matrix, labels: &Matrix, class: usize) -> f64 {
    let n = scores.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores
            .get(a, class)
            .partial_cmp(&scores.get(b, class))
            .unwrap()
            .then(a.cmp(&b))
    });
    // Midranks over tied score groups (1-based ranks).
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores.get(order[j + 1], class) == scores.get(order[i], class) {
            j += 1;
        }
        let mid = (i + 1 + j + 1) as f64 / 2.0;
        for &sample in &order[i..=j] {
            ranks[sample] = mid;
        }
        i = j + 1;
    }
    let mut pos_rank_sum = 0.0;
    let mut positives = 0usize;
    for r in 0..n {
        if labels.get(r, class) == 1.0 {
            pos_rank_sum += ranks[r];
            positives += 1;
        }
    }
    let negatives = n - positives;
    let p = positives as f64;
    (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64)
}

/// Fraction of rows whose argmax score hits the one-hot label.
pub fn accuracy(scores: &Matrix, labels: &Matrix) -> f64 {
    let n = scores.rows();
    let mut correct = 0usize;
    for r in 0..n {
        let pred = scores
            .row(r)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if labels.get(r, pred) == 1.0 {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn one_hot(labels: &[usize], classes: usize) -> Matrix {
        let mut y = Matrix::zeros(labels.len(), classes);
        for (r, &l) in labels.iter().enumerate() {
            y.set(r, l, 1.0);
        }
        y
    }

    /// O(N^2) pair-count oracle: concordant pairs plus half the ties.
    fn pair_count_auc(scores: &[f64], is_pos: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if !is_pos[i] {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if is_pos[j] {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
        num / pairs
    }

    #[test]
    fn perfect_separation_scores_one() {
        let scores = Matrix::from_rows(&[&[0.9, 0.1], &[0.8, 0.2], &[0.1, 0.9], &[0.2, 0.8]])
            .unwrap();
        let labels = one_hot(&[0, 0, 1, 1], 2);
        assert_eq!(compute_auc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn constant_scores_give_half() {
        let scores = Matrix::from_vec(4, 2, vec![0.5; 8]).unwrap();
        let labels = one_hot(&[0, 1, 0, 1], 2);
        assert_eq!(compute_auc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        let scores = Matrix::from_vec(3, 2, vec![0.5; 6]).unwrap();
        let labels = one_hot(&[1, 1, 1], 2);
        assert!(matches!(
            compute_auc(&scores, &labels),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn matches_pair_count_oracle_two_class() {
        let mut rng = Rng::new(31);
        // Six samples with a deliberate tie.
        let raw = [0.1, 0.4, 0.4, 0.8, 0.3, 0.9];
        let labels_idx = [0usize, 1, 0, 1, 0, 1];
        let mut scores = Matrix::zeros(6, 2);
        for r in 0..6 {
            scores.set(r, 1, raw[r]);
            scores.set(r, 0, 1.0 - raw[r]);
        }
        let labels = one_hot(&labels_idx, 2);
        let got = compute_auc(&scores, &labels).unwrap();

        let pos1: Vec<bool> = labels_idx.iter().map(|&l| l == 1).collect();
        let auc1 = pair_count_auc(&raw, &pos1);
        let neg_scores: Vec<f64> = raw.iter().map(|v| 1.0 - v).collect();
        let pos0: Vec<bool> = labels_idx.iter().map(|&l| l == 0).collect();
        let auc0 = pair_count_auc(&neg_scores, &pos0);
        let expected = (auc0 + auc1) / 2.0;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");

        // And on random multiclass data.
        let mut scores = Matrix::zeros(24, 3);
        for v in scores.data_mut() {
            *v = rng.uniform();
        }
        let idx: Vec<usize> = (0..24).map(|i| i % 3).collect();
        let labels = one_hot(&idx, 3);
        let got = compute_auc(&scores, &labels).unwrap();
        let mut expected = 0.0;
        for c in 0..3 {
            let col: Vec<f64> = (0..24).map(|r| scores.get(r, c)).collect();
            let pos: Vec<bool> = idx.iter().map(|&l| l == c).collect();
            expected += pair_count_auc(&col, &pos);
        }
        expected /= 3.0;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let scores = Matrix::from_rows(&[&[0.9, 0.1], &[0.3, 0.7], &[0.6, 0.4]]).unwrap();
        let labels = one_hot(&[0, 1, 1], 2);
        let acc = accuracy(&scores, &labels);
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }
}
