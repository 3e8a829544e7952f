//! Confusion-matrix segmentation scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[i * n + j]` = pixels of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Contract("confusion matrix must be square".into()));
        }
        Ok(Self {
            n_classes: n,
            counts: rows.iter().flatten().cloned().collect(),
        })
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    /// Accumulate one labelled map.
    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape("segmentation_scores", &[pred.len()], &[truth.len()]));
        }
        let n = self.n_classes;
        for (&p, &t) in pred.iter().zip(truth) {
            for l in [p, t] {
                if l as usize >= n {
                    return Err(Error::Index {
                        what: "class label",
                        index: l as usize,
                        extent: n,
                    });
                }
            }
            self.counts[t as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(Error::shape("merge", &[self.n_classes], &[other.n_classes]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn truth_total(&self, i: usize) -> u64 {
        (0..self.n_classes).map(|j| self.get(i, j)).sum()
    }

    pub fn pred_total(&self, j: usize) -> u64 {
        (0..self.n_classes).map(|i| self.get(i, j)).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pixel_acc: f64,
    pub class_acc: f64,
    pub mean_iou: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

impl MetricReport {
    /// Scores from counts; classes with no ground-truth pixels are left out
    /// of the class means.
    pub fn from_confusion(cm: ConfusionMatrix) -> Self {
        let n = cm.n_classes;
        let total: u64 = cm.counts.iter().sum();
        let correct: u64 = (0..n).map(|i| cm.get(i, i)).sum();
        let mut acc_sum = 0.0;
        let mut iou_sum = 0.0;
        let mut present = 0usize;
        let mut per_class_iou = Vec::with_capacity(n);
        for i in 0..n {
            let t = cm.truth_total(i);
            if t == 0 {
                per_class_iou.push(None);
                continue;
            }
            let nii = cm.get(i, i) as f64;
            let iou = nii / (t + cm.pred_total(i) - cm.get(i, i)) as f64;
            acc_sum += nii / t as f64;
            iou_sum += iou;
            present += 1;
            per_class_iou.push(Some(iou));
        }
        let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
        Self {
            pixel_acc: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            class_acc: ratio(acc_sum, present),
            mean_iou: ratio(iou_sum, present),
            per_class_iou,
            confusion: cm,
        }
    }

    pub fn csv_header(class_names: &[&str]) -> String {
        let mut cols = vec!["pixel_acc".to_string(), "class_acc".into(), "mean_iou".into()];
        cols.extend(class_names.iter().map(|c| format!("iou_{c}")));
        cols.join(",")
    }

    /// One CSV row matching [`MetricReport::csv_header`]; absent classes are
    /// empty fields.
    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            format!("{}", self.pixel_acc),
            format!("{}", self.class_acc),
            format!("{}", self.mean_iou),
        ];
        cols.extend(self.per_class_iou.iter().map(|v| v.map(|x| format!("{x}")).unwrap_or_default()));
        cols.join(",")
    }
}

/// Score predicted label maps against the truth.
pub fn segmentation_scores(pred: &[u8], truth: &[u8], n_classes: usize) -> Result<MetricReport> {
    let mut cm = ConfusionMatrix::new(n_classes);
    cm.add(pred, truth)?;
    Ok(MetricReport::from_confusion(cm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_all_wrong() {
        let t = [0u8, 1, 0, 1];
        let r = segmentation_scores(&t, &t, 2).unwrap();
        assert_eq!((r.pixel_acc, r.class_acc, r.mean_iou), (1.0, 1.0, 1.0));
        let r = segmentation_scores(&[1, 0, 1, 0], &t, 2).unwrap();
        assert_eq!((r.pixel_acc, r.class_acc, r.mean_iou), (0.0, 0.0, 0.0));
    }

    #[test]
    fn absent_class_is_excluded() {
        let r = segmentation_scores(&[0, 2, 0], &[0, 0, 0], 3).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(2.0 / 3.0), None, None]);
        assert_eq!(r.class_acc, 2.0 / 3.0);
        assert!(r.csv_row().ends_with(",,"));
    }

    #[test]
    fn bad_inputs_rejected() {
        assert!(matches!(segmentation_scores(&[0], &[0, 1], 2), Err(Error::Shape { .. })));
        assert!(matches!(segmentation_scores(&[2], &[0], 2), Err(Error::Index { .. })));
    }
}
