//! Intersection-over-union scoring with dataset-level accumulation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::SegmentationMask;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("prediction is {pred:?} but ground truth is {gt:?} (image {image})")]
    DimensionMismatch { image: usize, pred: (usize, usize), gt: (usize, usize) },
    #[error("no image pairs to evaluate")]
    Empty,
}

fn check_dims(image: usize, pred: &SegmentationMask, gt: &SegmentationMask) -> Result<(), EvalError> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(EvalError::DimensionMismatch {
            image,
            pred: (pred.height(), pred.width()),
            gt: (gt.height(), gt.width()),
        });
    }
    Ok(())
}

/// IoU of one class, or `None` when the class appears in neither mask.
pub fn compute_iou(pred: &SegmentationMask, gt: &SegmentationMask, class_id: u32) -> Result<Option<f64>, EvalError> {
    check_dims(0, pred, gt)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (p, g) = (p == class_id, g == class_id);
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

/// Pixel counts keyed by `(ground truth, prediction)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: BTreeMap<(u32, u32), u64>,
}

impl ConfusionMatrix {
    pub fn add(&mut self, pred: &SegmentationMask, gt: &SegmentationMask) {
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            *self.counts.entry((g, p)).or_default() += 1;
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (&k, &v) in &other.counts {
            *self.counts.entry(k).or_default() += v;
        }
    }

    pub fn get(&self, gt: u32, pred: u32) -> u64 {
        self.counts.get(&(gt, pred)).copied().unwrap_or(0)
    }

    /// `(intersection, union)` pixel counts for one class.
    pub fn class_counts(&self, class_id: u32) -> (u64, u64) {
        let inter = self.get(class_id, class_id);
        let (mut gt_total, mut pred_total) = (0u64, 0u64);
        for (&(g, p), &n) in &self.counts {
            if g == class_id {
                gt_total += n;
            }
            if p == class_id {
                pred_total += n;
            }
        }
        (inter, gt_total + pred_total - inter)
    }

    pub fn entries(&self) -> impl Iterator<Item = ((u32, u32), u64)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionEntry {
    pub gt: u32,
    pub pred: u32,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_iou: BTreeMap<u32, f64>,
    pub miou: f64,
    pub confusion: Vec<ConfusionEntry>,
    pub images_evaluated: usize,
}

/// Dataset-level IoU per listed class (intersections and unions summed over
/// all images), averaged over the classes that occur in any prediction or
/// ground truth.
pub fn compute_miou(pairs: &[(SegmentationMask, SegmentationMask)], classes: &[u32]) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut confusion = ConfusionMatrix::default();
    for (image, (pred, gt)) in pairs.iter().enumerate() {
        check_dims(image, pred, gt)?;
        confusion.add(pred, gt);
    }
    let mut per_class_iou = BTreeMap::new();
    for class_id in classes.iter().copied().collect::<BTreeSet<_>>() {
        let (inter, union) = confusion.class_counts(class_id);
        if union > 0 {
            per_class_iou.insert(class_id, inter as f64 / union as f64);
        }
    }
    let miou = if per_class_iou.is_empty() {
        0.0
    } else {
        per_class_iou.values().sum::<f64>() / per_class_iou.len() as f64
    };
    Ok(EvalReport {
        per_class_iou,
        miou,
        confusion: confusion.entries().map(|((gt, pred), count)| ConfusionEntry { gt, pred, count }).collect(),
        images_evaluated: pairs.len(),
    })
}
