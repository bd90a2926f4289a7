use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::evaluate::FoldEval;
use super::metrics::{fb_iou, fpr_with_mode, miou, FprMode};
use crate::error::Result;

/// Evaluation protocol shared by all folds of a report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalSettings {
    pub episodes_per_fold: usize,
    pub k: usize,
    pub fpr_mode: FprMode,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { episodes_per_fold: 200, k: 1, fpr_mode: FprMode::Pooled }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_id: usize,
    pub status: FoldStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub test_classes: Vec<u32>,
    pub per_class_iou: BTreeMap<u32, f64>,
    pub excluded_classes: Vec<u32>,
    pub miou: Option<f64>,
    pub fb_iou: Option<f64>,
    pub fpr: Option<f64>,
    pub episodes: usize,
}

impl FoldReport {
    pub fn from_eval(fold_id: usize, test_classes: Vec<u32>, eval: &FoldEval, mode: FprMode) -> Self {
        let per = eval.per_class();
        let (per_class_iou, excluded_classes, m) = match miou(&per) {
            Ok(r) => (r.per_class, r.excluded, Some(r.value)),
            Err(_) => (BTreeMap::new(), per.keys().copied().collect(), None),
        };
        Self {
            fold_id,
            status: FoldStatus::Ok,
            error: None,
            test_classes,
            per_class_iou,
            excluded_classes,
            miou: m,
            fb_iou: fb_iou(&eval.pooled()).ok(),
            fpr: fpr_with_mode(&eval.episode_counts(), mode),
            episodes: eval.episodes.len(),
        }
    }

    pub fn failed(fold_id: usize, test_classes: Vec<u32>, error: String) -> Self {
        Self {
            fold_id,
            status: FoldStatus::Failed,
            error: Some(error),
            test_classes,
            per_class_iou: BTreeMap::new(),
            excluded_classes: Vec::new(),
            miou: None,
            fb_iou: None,
            fpr: None,
            episodes: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub config_hash: String,
    pub settings: EvalSettings,
    pub folds: Vec<FoldReport>,
    /// Means over folds that completed; `None` if none did.
    pub mean_miou: Option<f64>,
    pub mean_fb_iou: Option<f64>,
    pub mean_fpr: Option<f64>,
    /// True when at least one fold failed.
    pub partial: bool,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Short hex digest of arbitrary configuration text.
pub fn text_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl EvalReport {
    pub fn new(seed: u64, config_hash: String, settings: EvalSettings, folds: Vec<FoldReport>) -> Self {
        let ok = || folds.iter().filter(|f| f.status == FoldStatus::Ok);
        Self {
            seed,
            config_hash,
            settings,
            mean_miou: mean(ok().map(|f| f.miou)),
            mean_fb_iou: mean(ok().map(|f| f.fb_iou)),
            mean_fpr: mean(ok().map(|f| f.fpr)),
            partial: folds.iter().any(|f| f.status == FoldStatus::Failed),
            folds,
        }
    }

    /// One row per metric, one column per fold, then `Mean`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for f in &self.folds {
            let _ = write!(out, ",fold-{}", f.fold_id);
        }
        out.push_str(",Mean\n");
        type Row<'a> = (&'a str, fn(&FoldReport) -> Option<f64>, Option<f64>);
        let rows: [Row<'_>; 3] = [
            ("miou", |f| f.miou, self.mean_miou),
            ("fb_iou", |f| f.fb_iou, self.mean_fb_iou),
            ("fpr", |f| f.fpr, self.mean_fpr),
        ];
        for (name, get, m) in rows {
            out.push_str(name);
            for f in &self.folds {
                let _ = write!(out, ",{}", fmt_opt(get(f)));
            }
            let _ = writeln!(out, ",{}", fmt_opt(m));
        }
        out.push_str("status");
        for f in &self.folds {
            out.push_str(if f.status == FoldStatus::Ok { ",ok" } else { ",failed" });
        }
        out.push_str(if self.partial { ",partial\n" } else { ",ok\n" });
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
