//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim("metric", &[a], &[b]));
    }
    Ok(())
}

/// Rows are true classes, columns predictions.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    check_len(preds.len(), labels.len())?;
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(Error::Param(format!("class index out of range for {num_classes} classes")));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

pub fn per_class_recall(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    let m = confusion_matrix(preds, labels, num_classes)?;
    m.iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                return Err(Error::Param(format!("class {c} has no samples")));
            }
            Ok(row[c] as f64 / total as f64)
        })
        .collect()
}

/// Mean of per-class recall. Every class in `0..num_classes` must occur.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    let r = per_class_recall(preds, labels, num_classes)?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half (Mann-Whitney U over midranks).
pub fn auroc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_len(scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::Param("auroc needs binary labels".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Param("auroc needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the midrank keeps the arithmetic in integers.
    let mut rank2_sum_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank2_sum_pos += rank2;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    // 2U = 2·R_pos − p(p+1)
    let u2 = rank2_sum_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub balanced_accuracy: f64,
    pub auroc: Option<f64>,
    pub per_class_recall: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
}

impl MetricReport {
    /// `probs` holds per-sample class probabilities.
    pub fn compute(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Self> {
        check_len(probs.len(), labels.len())?;
        let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let auroc = if num_classes == 2 {
            let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
            Some(auroc(&scores, labels)?)
        } else {
            None
        };
        Ok(MetricReport {
            balanced_accuracy: balanced_accuracy(&preds, labels, num_classes)?,
            auroc,
            per_class_recall: per_class_recall(&preds, labels, num_classes)?,
            confusion: confusion_matrix(&preds, labels, num_classes)?,
        })
    }

    /// AUROC for binary tasks, balanced accuracy otherwise.
    pub fn monitored(&self) -> f64 {
        self.auroc.unwrap_or(self.balanced_accuracy)
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy (nats) of the empirical distribution of `assignments`
/// over `k` bins.
pub fn utilization_entropy(assignments: &[usize], k: usize) -> f64 {
    let mut counts = vec![0usize; k];
    for &a in assignments {
        counts[a] += 1;
    }
    let n = assignments.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[1, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap(), 0.5);
        assert_eq!(balanced_accuracy(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap(), 0.75);
        assert!(balanced_accuracy(&[0, 0], &[0, 0], 2).is_err());
        assert!(balanced_accuracy(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auroc(&[0.1, 0.2], &[0, 2]).is_err());
    }

    #[test]
    fn report_and_entropy() {
        let probs = vec![vec![0.9, 0.1], vec![0.4, 0.6], vec![0.3, 0.7], vec![0.2, 0.8]];
        let r = MetricReport::compute(&probs, &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.balanced_accuracy, 0.75);
        assert_eq!(r.auroc, Some(1.0));
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
        assert_eq!(r.monitored(), 1.0);
        assert_eq!(utilization_entropy(&[0, 0, 0], 3), 0.0);
        assert!((utilization_entropy(&[0, 1], 2) - 2f64.ln()).abs() < 1e-15);
    }
}
