use std::ops::AddAssign;

use crate::error::{Error, Result};
use crate::labels::{LabelMask, IGNORE};

/// `counts[t][p]` = pixels with truth `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::dim("ConfusionMatrix", classes * classes, counts.len()));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/truth pair; ignored truth pixels are skipped.
    pub fn update(&mut self, pred: &LabelMask, truth: &LabelMask) -> Result<()> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(Error::dim(
                "confusion_update",
                format!("{}x{}", truth.height(), truth.width()),
                format!("{}x{}", pred.height(), pred.width()),
            ));
        }
        truth.check_range(self.classes)?;
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t == IGNORE {
                continue;
            }
            if p as usize >= self.classes {
                return Err(Error::Range {
                    what: "predicted label",
                    detail: format!("{p} with {} classes", self.classes),
                });
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Per-class IoU `tp / (tp + fp + fn)`; `None` where the denominator is 0.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.classes).filter(|&p| p != c).map(|p| self.get(c, p)).sum();
                let fp: u64 = (0..self.classes).filter(|&t| t != c).map(|t| self.get(t, c)).sum();
                let den = tp + fp + fn_;
                (den > 0).then(|| tp as f64 / den as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in truth or prediction.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::UndefinedMean("miou"));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixacc(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::UndefinedMean("pixacc"));
        }
        let trace: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        Ok(trace as f64 / total as f64)
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        assert_eq!(self.classes, rhs.classes, "merging confusion matrices of different size");
        for (a, b) in self.counts.iter_mut().zip(&rhs.counts) {
            *a += b;
        }
    }
}
