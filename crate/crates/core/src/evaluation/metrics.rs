use std::collections::BTreeMap;
use std::ops::{Add, AddAssign};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Pixel confusion counts for one binary foreground/background problem.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: ArrayView2<'_, u8>, truth: ArrayView2<'_, u8>) -> Result<Self> {
        if pred.dim() != truth.dim() {
            return Err(invalid(format!("prediction {:?} vs truth {:?}", pred.dim(), truth.dim())));
        }
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(truth.iter()) {
            match (p != 0, t != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Foreground IoU, `None` when the union is empty.
    pub fn iou(&self) -> Option<f64> {
        let union = self.tp + self.fp + self.fn_;
        (union > 0).then(|| self.tp as f64 / union as f64)
    }

    /// Background IoU, `None` when the union is empty.
    pub fn background_iou(&self) -> Option<f64> {
        let union = self.tn + self.fp + self.fn_;
        (union > 0).then(|| self.tn as f64 / union as f64)
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanIou {
    pub value: f64,
    pub per_class: BTreeMap<u32, f64>,
    /// Classes whose IoU was undefined (empty union).
    pub excluded: Vec<u32>,
}

/// Mean over classes of pooled `TP / (TP + FP + FN)`. Classes with an
/// empty union are excluded with a warning; if none remain it is an error.
pub fn miou(counts: &BTreeMap<u32, ConfusionCounts>) -> Result<MeanIou> {
    let mut per_class = BTreeMap::new();
    let mut excluded = Vec::new();
    for (&class, c) in counts {
        match c.iou() {
            Some(v) => {
                per_class.insert(class, v);
            }
            None => excluded.push(class),
        }
    }
    if !excluded.is_empty() {
        log::warn!("mIoU: {} class(es) excluded for an empty union: {excluded:?}", excluded.len());
    }
    if per_class.is_empty() {
        return Err(invalid("mIoU undefined: no class has a non-empty union"));
    }
    let value = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(MeanIou { value, per_class, excluded })
}

/// Mean of merged-foreground IoU and background IoU; an undefined side is
/// dropped with a warning.
pub fn fb_iou(counts: &ConfusionCounts) -> Result<f64> {
    match (counts.iou(), counts.background_iou()) {
        (Some(f), Some(b)) => Ok((f + b) / 2.0),
        (Some(v), None) | (None, Some(v)) => {
            log::warn!("FB-IoU: one side has an empty union and is excluded");
            Ok(v)
        }
        (None, None) => Err(invalid("FB-IoU undefined: no pixels evaluated")),
    }
}

/// `FP / (FP + TN)`, `None` when the truth has no background pixels.
pub fn fpr(counts: &ConfusionCounts) -> Option<f64> {
    let neg = counts.fp + counts.tn;
    (neg > 0).then(|| counts.fp as f64 / neg as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FprMode {
    /// Ratio of counts summed over episodes.
    #[default]
    Pooled,
    /// Mean of per-episode ratios, skipping undefined episodes.
    PerEpisode,
}

pub fn fpr_with_mode(episodes: &[ConfusionCounts], mode: FprMode) -> Option<f64> {
    match mode {
        FprMode::Pooled => fpr(&episodes.iter().copied().sum()),
        FprMode::PerEpisode => {
            let vals: Vec<f64> = episodes.iter().filter_map(fpr).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}
