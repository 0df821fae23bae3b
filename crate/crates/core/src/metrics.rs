//! Confusion-matrix accumulation and IoU / mIoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_INDEX};

/// `counts[t * nc + p]` = pixels with ground truth `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    nc: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(nc: usize) -> Self {
        ConfusionMatrix { nc, counts: vec![0; nc * nc] }
    }

    pub fn num_classes(&self) -> usize {
        self.nc
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.nc + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add per-pixel counts; pixels whose truth is the ignore index are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.dims() != truth.dims() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dims(),
                truth.dims()
            )));
        }
        truth.validate(self.nc)?;
        pred.validate(self.nc)?;
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t == IGNORE_INDEX {
                continue;
            }
            if p == IGNORE_INDEX {
                return Err(Error::Label("prediction contains the ignore index".into()));
            }
            self.counts[t as usize * self.nc + p as usize] += 1;
        }
        Ok(())
    }

    /// Elementwise sum, for combining partial matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.nc != self.nc {
            return Err(Error::Shape(format!("confusion matrices for {} vs {} classes", self.nc, other.nc)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Per-class IoU `diag / (row + col - diag)`; classes with an empty union
    /// are reported as `None` and left out of the mean.
    pub fn miou(&self) -> Result<MiouReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::UndefinedMetric("confusion matrix is empty".into()));
        }
        let nc = self.nc;
        let mut per_class = Vec::with_capacity(nc);
        let mut diag_sum = 0u64;
        for c in 0..nc {
            let diag = self.get(c, c);
            let row: u64 = (0..nc).map(|p| self.get(c, p)).sum();
            let col: u64 = (0..nc).map(|t| self.get(t, c)).sum();
            let union = row + col - diag;
            diag_sum += diag;
            per_class.push((union > 0).then(|| diag as f64 / union as f64));
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(MiouReport { per_class_iou: per_class, miou, pixel_accuracy: diag_sum as f64 / total as f64 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
}
