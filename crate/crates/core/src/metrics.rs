//! Dice (F1) and IoU over multi-class masks.
//!
//! A class absent from both prediction and ground truth scores 1.0, and the
//! averaged scores skip class 0 (background) unless per-class output is
//! requested.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::mask;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionCounts {
    pub fn zeros(classes: usize) -> Self {
        Self {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    /// Pools another image's counts into these.
    pub fn add(&mut self, other: &ConfusionCounts) {
        for c in 0..self.classes().min(other.classes()) {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
    }
}

/// Counts from two label maps of equal length.
pub fn confusion_labels(pred: &[u8], gt: &[u8], classes: usize) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return shape_err(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len()));
    }
    let mut out = ConfusionCounts::zeros(classes);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= classes || g >= classes {
            return Err(crate::Error::Invalid(format!("label {} outside {classes} classes", p.max(g))));
        }
        if p == g {
            out.tp[p] += 1;
        } else {
            out.fp[p] += 1;
            out.fn_[g] += 1;
        }
    }
    Ok(out)
}

/// Counts per batch item from one-hot `[B, K, H, W]` masks.
pub fn confusion(pred: &Tensor, gt: &Tensor) -> Result<Vec<ConfusionCounts>> {
    if pred.dims() != gt.dims() {
        return shape_err(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims()));
    }
    mask::check_one_hot(pred)?;
    mask::check_one_hot(gt)?;
    let classes = pred.dims4()?.1;
    let p = mask::argmax_labels(pred)?;
    let g = mask::argmax_labels(gt)?;
    p.iter().zip(&g).map(|(p, g)| confusion_labels(p, g, classes)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    MeanForeground,
    PerClass,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn dice_per_class(c: &ConfusionCounts) -> Vec<f64> {
    (0..c.classes())
        .map(|k| ratio(2 * c.tp[k], 2 * c.tp[k] + c.fp[k] + c.fn_[k]))
        .collect()
}

pub fn iou_per_class(c: &ConfusionCounts) -> Vec<f64> {
    (0..c.classes())
        .map(|k| ratio(c.tp[k], c.tp[k] + c.fp[k] + c.fn_[k]))
        .collect()
}

fn foreground_mean(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return v.first().copied().unwrap_or(1.0);
    }
    v[1..].iter().sum::<f64>() / (v.len() - 1) as f64
}

/// Dice scores: one value for `MeanForeground`, one per class otherwise.
pub fn dice(c: &ConfusionCounts, averaging: Averaging) -> Vec<f64> {
    let per = dice_per_class(c);
    match averaging {
        Averaging::PerClass => per,
        Averaging::MeanForeground => vec![foreground_mean(&per)],
    }
}

pub fn miou(c: &ConfusionCounts, averaging: Averaging) -> Vec<f64> {
    let per = iou_per_class(c);
    match averaging {
        Averaging::PerClass => per,
        Averaging::MeanForeground => vec![foreground_mean(&per)],
    }
}

pub fn mean_foreground_dice(c: &ConfusionCounts) -> f64 {
    foreground_mean(&dice_per_class(c))
}

pub fn mean_foreground_iou(c: &ConfusionCounts) -> f64 {
    foreground_mean(&iou_per_class(c))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Mean of per-image scores.
    PerImage,
    /// Scores of the summed counts.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: usize,
    pub dice_per_class: Vec<f64>,
    pub iou_per_class: Vec<f64>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub median_dice: f64,
}

/// Dataset-level scores from per-image counts.
pub fn aggregate(counts: &[ConfusionCounts], how: Aggregation) -> MetricReport {
    let classes = counts.first().map_or(0, |c| c.classes());
    let per_image_dice: Vec<f64> = counts.iter().map(mean_foreground_dice).collect();
    let median_dice = median(&per_image_dice);
    match how {
        Aggregation::Pooled => {
            let mut total = ConfusionCounts::zeros(classes);
            for c in counts {
                total.add(c);
            }
            MetricReport {
                images: counts.len(),
                dice_per_class: dice_per_class(&total),
                iou_per_class: iou_per_class(&total),
                mean_dice: mean_foreground_dice(&total),
                mean_iou: mean_foreground_iou(&total),
                median_dice,
            }
        }
        Aggregation::PerImage => {
            let n = counts.len().max(1) as f64;
            let mut dpc = vec![0.0; classes];
            let mut ipc = vec![0.0; classes];
            for c in counts {
                for (acc, v) in dpc.iter_mut().zip(dice_per_class(c)) {
                    *acc += v / n;
                }
                for (acc, v) in ipc.iter_mut().zip(iou_per_class(c)) {
                    *acc += v / n;
                }
            }
            MetricReport {
                images: counts.len(),
                dice_per_class: dpc,
                iou_per_class: ipc,
                mean_dice: per_image_dice.iter().sum::<f64>() / n,
                mean_iou: counts.iter().map(mean_foreground_iou).sum::<f64>() / n,
                median_dice,
            }
        }
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}
