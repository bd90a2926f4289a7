//! Metrics, fold evaluation, cross-validation, ablation grids and
//! latent-class visualization.

mod ablation;
mod evaluate;
mod experiment;
mod metrics;
mod report;
mod viz;

pub use ablation::{AblationGrid, AblationRow, AblationTable, AxisValue, VALID_AXES};
pub use evaluate::{decode_prototype, evaluate_episodes, sample_eval_episodes, EpisodeResult, FoldEval};
pub use experiment::{cross_validate, eval_seed, Experiment};
pub use metrics::{fb_iou, fpr, fpr_with_mode, miou, ConfusionCounts, FprMode, MeanIou};
pub use report::{text_hash, EvalReport, EvalSettings, FoldReport, FoldStatus};
pub use viz::{latent_visualization, LatentMask, LatentVisualization};

use crate::data_synth::{Dataset, FoldSplit};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::training::TrainConfig;

/// Runs `grid` over `seeds` with a fresh experiment cache.
pub fn ablation_run<T: Scalar>(
    base: &TrainConfig,
    grid: &AblationGrid,
    dataset: &Dataset,
    folds: &[FoldSplit],
    settings: EvalSettings,
    seeds: &[u64],
) -> Result<AblationTable> {
    Experiment::<T>::new(dataset, folds, settings)?.ablation(base, grid, seeds)
}
