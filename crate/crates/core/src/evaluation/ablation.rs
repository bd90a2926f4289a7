//! Ablation grids over latent-class count, loss weights, background source
//! and prototype source.
//!
//! Grid spec syntax: `axis=v1,v2,...` with axes separated by `;`, e.g.
//! `n_latent=0,8,16` or `alpha_beta=0:0,1:0.5;bg_source=query,support`.
//! Points are the cartesian product in the order written.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::Experiment;
use super::report::EvalReport;
use crate::error::{QsrError, Result};
use crate::scalar::Scalar;
use crate::training::{BackgroundSource, PrototypeSource, TrainConfig};

pub const VALID_AXES: [&str; 4] = ["n_latent", "alpha_beta", "bg_source", "proto_source"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AxisValue {
    NLatent(usize),
    AlphaBeta(f64, f64),
    BgSource(BackgroundSource),
    ProtoSource(PrototypeSource),
}

impl AxisValue {
    pub fn axis(&self) -> &'static str {
        match self {
            Self::NLatent(_) => "n_latent",
            Self::AlphaBeta(..) => "alpha_beta",
            Self::BgSource(_) => "bg_source",
            Self::ProtoSource(_) => "proto_source",
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::NLatent(n) => n.to_string(),
            Self::AlphaBeta(a, b) => format!("{a}:{b}"),
            Self::BgSource(s) => s.to_string(),
            Self::ProtoSource(s) => s.to_string(),
        }
    }

    /// Applies the value; the mask prototype source drops the class-weight
    /// losses (β = 0).
    pub fn apply(&self, cfg: &mut TrainConfig) {
        match *self {
            Self::NLatent(n) => cfg.n_latent = n,
            Self::AlphaBeta(a, b) => {
                cfg.alpha = a;
                cfg.beta = b;
            }
            Self::BgSource(s) => cfg.bg_source = s,
            Self::ProtoSource(s) => {
                cfg.proto_source = s;
                if s == PrototypeSource::Mask {
                    cfg.beta = 0.0;
                }
            }
        }
    }
}

fn axis_error(key: &str, message: String) -> QsrError {
    QsrError::Config { key: key.to_string(), message }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub axes: Vec<Vec<AxisValue>>,
}

impl AblationGrid {
    pub fn parse(spec: &str) -> Result<Self> {
        let mut axes: Vec<Vec<AxisValue>> = Vec::new();
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, values) = part
                .split_once('=')
                .ok_or_else(|| axis_error(part, format!("expected `axis=v1,v2`; valid axes: {}", VALID_AXES.join(", "))))?;
            let key = key.trim();
            if !VALID_AXES.contains(&key) {
                return Err(axis_error(key, format!("unknown ablation axis; valid axes: {}", VALID_AXES.join(", "))));
            }
            if axes.iter().any(|a| a[0].axis() == key) {
                return Err(axis_error(key, "axis given twice".into()));
            }
            let parsed = values
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(|v| parse_value(key, v))
                .collect::<Result<Vec<_>>>()?;
            if parsed.is_empty() {
                return Err(axis_error(key, "axis has no values".into()));
            }
            axes.push(parsed);
        }
        if axes.is_empty() {
            return Err(axis_error("grid-spec", format!("empty grid; valid axes: {}", VALID_AXES.join(", "))));
        }
        Ok(Self { axes })
    }

    pub fn axis_names(&self) -> Vec<&'static str> {
        self.axes.iter().map(|a| a[0].axis()).collect()
    }

    /// Cartesian product, first axis slowest.
    pub fn points(&self) -> Vec<Vec<AxisValue>> {
        let mut points = vec![Vec::new()];
        for axis in &self.axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(v.clone());
                        q
                    })
                })
                .collect();
        }
        points
    }
}

fn parse_value(key: &str, v: &str) -> Result<AxisValue> {
    let err = |m: String| axis_error(key, m);
    match key {
        "n_latent" => v.parse().map(AxisValue::NLatent).map_err(|e| err(format!("`{v}`: {e}"))),
        "alpha_beta" => {
            let (a, b) = v.split_once(':').ok_or_else(|| err(format!("`{v}`: expected alpha:beta")))?;
            let a: f64 = a.trim().parse().map_err(|e| err(format!("`{v}`: {e}")))?;
            let b: f64 = b.trim().parse().map_err(|e| err(format!("`{v}`: {e}")))?;
            if !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
                return Err(err(format!("`{v}`: weights must be finite and >= 0")));
            }
            Ok(AxisValue::AlphaBeta(a, b))
        }
        "bg_source" => v.parse().map(AxisValue::BgSource).map_err(err),
        "proto_source" => v.parse().map(AxisValue::ProtoSource).map_err(err),
        _ => Err(err(format!("unknown ablation axis; valid axes: {}", VALID_AXES.join(", ")))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub point: Vec<AxisValue>,
    /// One report per seed, in seed order.
    pub reports: Vec<EvalReport>,
    pub mean_miou: Option<f64>,
    pub mean_fb_iou: Option<f64>,
    pub mean_fpr: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axes: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn seed_mean(reports: &[EvalReport], get: fn(&EvalReport) -> Option<f64>) -> Option<f64> {
    let v: Option<Vec<f64>> = reports.iter().map(get).collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl AblationTable {
    pub fn n_folds(&self) -> usize {
        self.rows.iter().flat_map(|r| r.reports.first()).map(|r| r.folds.len()).max().unwrap_or(0)
    }

    /// Axis columns, then seed-averaged metrics and per-fold mIoU.
    pub fn to_csv(&self) -> String {
        let n = self.n_folds();
        let mut out = self.axes.join(",");
        out.push_str(",seeds,mean_miou,mean_fb_iou,mean_fpr");
        for f in 0..n {
            let _ = write!(out, ",fold{f}_miou");
        }
        out.push_str(",status\n");
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        for row in &self.rows {
            let labels: Vec<String> = row.point.iter().map(AxisValue::label).collect();
            let _ = write!(
                out,
                "{},{},{},{},{}",
                labels.join(","),
                seeds.join(" "),
                fmt(row.mean_miou),
                fmt(row.mean_fb_iou),
                fmt(row.mean_fpr)
            );
            for f in 0..n {
                let vals: Option<Vec<f64>> = row.reports.iter().map(|r| r.folds.get(f).and_then(|x| x.miou)).collect();
                let m = vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64);
                let _ = write!(out, ",{}", fmt(m));
            }
            let status = match (&row.error, row.reports.iter().any(|r| r.partial)) {
                (Some(_), _) => "failed",
                (None, true) => "partial",
                (None, false) => "ok",
            };
            let _ = writeln!(out, ",{status}");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn row(&self, point: &[AxisValue]) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.point == point)
    }
}

impl<T: Scalar> Experiment<'_, T> {
    /// Cross-validates every grid point for every seed. Failures are
    /// isolated to their row.
    pub fn ablation(&self, base: &TrainConfig, grid: &AblationGrid, seeds: &[u64]) -> Result<AblationTable> {
        if seeds.is_empty() {
            return Err(axis_error("seeds", "at least one seed is required".into()));
        }
        let mut rows = Vec::new();
        for point in grid.points() {
            let mut reports = Vec::with_capacity(seeds.len());
            let mut error = None;
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.seed = seed;
                point.iter().for_each(|v| v.apply(&mut cfg));
                match self.cross_validate(&cfg) {
                    Ok(r) => reports.push(r),
                    Err(e) => {
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
            rows.push(AblationRow {
                mean_miou: seed_mean(&reports, |r| r.mean_miou),
                mean_fb_iou: seed_mean(&reports, |r| r.mean_fb_iou),
                mean_fpr: seed_mean(&reports, |r| r.mean_fpr),
                point,
                reports,
                error,
            });
        }
        Ok(AblationTable {
            axes: grid.axis_names().into_iter().map(String::from).collect(),
            seeds: seeds.to_vec(),
            rows,
        })
    }
}
