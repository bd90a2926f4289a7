//! Cross-validation and ablation orchestration with run caching.
//!
//! Pretrained trunks are cached per (seed, fold, pretraining and
//! architecture settings) and finished fold reports per full config, so
//! grids that share points or pretraining do the work once.

use std::collections::HashMap;
use std::sync::Mutex;

use super::evaluate::{evaluate_episodes, sample_eval_episodes};
use super::report::{text_hash, EvalReport, EvalSettings, FoldReport};
use crate::data_synth::{Dataset, FoldSplit};
use crate::error::{invalid, Result};
use crate::model::FssModel;
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::training::{prepare_model, train_from, PretrainReport, TrainConfig};

/// Seed of the evaluation episode stream for a fold.
pub fn eval_seed(seed: u64, fold_id: usize) -> u64 {
    derive_seed(seed, &format!("eval/fold{fold_id}"))
}

fn pretrain_key(cfg: &TrainConfig, fold_id: usize) -> String {
    format!(
        "{}|{}|{}|{}|{}|{}|{}|{}|{:?}|{}|{}|{}|{}|{:?}|{fold_id}",
        cfg.seed,
        cfg.two_phase,
        cfg.pretrain_epochs,
        cfg.pretrain_lr,
        cfg.pretrain_batch,
        cfg.momentum,
        cfg.weight_decay,
        cfg.poly_power,
        cfg.stage_channels,
        cfg.d,
        cfg.fusion_mode,
        cfg.decoder_hidden,
        cfg.cosine_channel,
        cfg.frozen_stages,
    )
}

type Prepared<T> = (FssModel<T>, Option<PretrainReport>);

pub struct Experiment<'a, T> {
    pub dataset: &'a Dataset,
    pub folds: &'a [FoldSplit],
    pub settings: EvalSettings,
    prepared: Mutex<HashMap<String, Prepared<T>>>,
    finished: Mutex<HashMap<String, FoldReport>>,
}

impl<'a, T: Scalar> Experiment<'a, T> {
    pub fn new(dataset: &'a Dataset, folds: &'a [FoldSplit], settings: EvalSettings) -> Result<Self> {
        if settings.episodes_per_fold == 0 {
            return Err(invalid("episodes_per_fold must be positive"));
        }
        if folds.is_empty() {
            return Err(invalid("no folds to cross-validate"));
        }
        Ok(Self { dataset, folds, settings, prepared: Mutex::default(), finished: Mutex::default() })
    }

    fn prepared(&self, cfg: &TrainConfig, fold: &FoldSplit) -> Result<Prepared<T>> {
        let key = pretrain_key(cfg, fold.fold_id);
        if let Some(p) = self.prepared.lock().expect("cache lock").get(&key) {
            return Ok(p.clone());
        }
        let p = prepare_model::<T>(cfg, fold, self.dataset)?;
        self.prepared.lock().expect("cache lock").insert(key, p.clone());
        Ok(p)
    }

    fn run_fold(&self, cfg: &TrainConfig, fold: &FoldSplit) -> Result<FoldReport> {
        let (model, report) = self.prepared(cfg, fold)?;
        let outcome = train_from(model, report, cfg, fold, self.dataset)?;
        if let Some((step, term)) = outcome.diverged {
            return Err(crate::error::QsrError::Diverged { step, term });
        }
        let episodes = sample_eval_episodes(
            self.dataset,
            &fold.test_classes,
            self.settings.episodes_per_fold,
            self.settings.k,
            eval_seed(cfg.seed, fold.fold_id),
        )?;
        let eval = evaluate_episodes(&outcome.model, self.dataset, &episodes, false)?;
        Ok(FoldReport::from_eval(fold.fold_id, fold.test_classes.iter().copied().collect(), &eval, self.settings.fpr_mode))
    }

    /// Trains on each fold's training classes and evaluates on its test
    /// classes. A failing fold is recorded and the report marked partial.
    pub fn cross_validate(&self, cfg: &TrainConfig) -> Result<EvalReport> {
        cfg.validate()?;
        let kv = cfg.to_kv_string();
        let mut reports = Vec::with_capacity(self.folds.len());
        for fold in self.folds {
            let key = format!("{kv}|{}|{:?}", fold.fold_id, self.settings);
            let cached = self.finished.lock().expect("cache lock").get(&key).cloned();
            let report = match cached {
                Some(r) => r,
                None => {
                    let started = std::time::Instant::now();
                    let r = match self.run_fold(cfg, fold) {
                        Ok(r) => r,
                        Err(e) => {
                            log::warn!("fold {} failed: {e}", fold.fold_id);
                            FoldReport::failed(fold.fold_id, fold.test_classes.iter().copied().collect(), e.to_string())
                        }
                    };
                    log::info!(
                        "fold {} seed {} done in {:.1}s: mIoU {:?} FPR {:?}",
                        fold.fold_id,
                        cfg.seed,
                        started.elapsed().as_secs_f64(),
                        r.miou,
                        r.fpr
                    );
                    self.finished.lock().expect("cache lock").insert(key, r.clone());
                    r
                }
            };
            reports.push(report);
        }
        Ok(EvalReport::new(cfg.seed, text_hash(&kv), self.settings, reports))
    }
}

/// One-off cross-validation without caching across calls.
pub fn cross_validate<T: Scalar>(
    cfg: &TrainConfig,
    dataset: &Dataset,
    folds: &[FoldSplit],
    settings: EvalSettings,
) -> Result<EvalReport> {
    Experiment::<T>::new(dataset, folds, settings)?.cross_validate(cfg)
}
