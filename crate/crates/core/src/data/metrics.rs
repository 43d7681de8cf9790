//! Confusion-matrix IoU metrics.

use crate::error::{Error, Result};

/// Row = ground truth, column = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(
                "iou_metrics",
                "pixels",
                truth.len(),
                pred.len(),
            ));
        }
        let c = self.num_classes;
        if let Some(&v) = pred.iter().chain(truth).find(|&&v| v as usize >= c) {
            return Err(Error::invalid(
                "iou_metrics",
                format!("class id {v} out of range for {c} classes"),
            ));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `TP / (TP + FP + FN)` per class; `None` for classes absent from both
    /// prediction and truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..c).map(|p| self.get(k, p)).sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|t| self.get(t, k)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean over the classes with a defined IoU.
    pub fn miou(&self) -> f64 {
        let v: Vec<f64> = self.iou().into_iter().flatten().collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

/// Per-class IoU and mIoU of one prediction.
pub fn iou_metrics(
    pred: &[u8],
    truth: &[u8],
    num_classes: usize,
) -> Result<(Vec<Option<f64>>, f64)> {
    let mut m = ConfusionMatrix::new(num_classes);
    m.add(pred, truth)?;
    Ok((m.iou(), m.miou()))
}
