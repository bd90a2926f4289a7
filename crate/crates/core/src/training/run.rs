use std::io::Write;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::data_synth::{Dataset, EpisodeSampler, FoldSplit};
use crate::error::{invalid, QsrError, Result};
use crate::model::FssModel;
use crate::nn::Parameterized;
use crate::qsr::{init_class_weights, ClassWeights};
use crate::rng::derive_seed;
use crate::scalar::Scalar;

use super::config::TrainConfig;
use super::objective::{total_loss, EpisodeBatchItem, EpisodeStep, FeatureCache, LossBreakdown, LossParts, Objective};
use super::optim::{poly_lr, Sgd};
use super::pretrain::{pretrain_trunk, PretrainReport};

pub const TRAINING_CHECKPOINT: &str = "training.ckpt";
pub const INFERENCE_CHECKPOINT: &str = "inference.ckpt";
pub const LOSS_LOG: &str = "loss.csv";
pub const CONFIG_COPY: &str = "config.txt";

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: FssModel<T>,
    pub weights: ClassWeights<T>,
    pub known_class_ids: Vec<u32>,
    pub fold_id: usize,
    pub log: Vec<LossBreakdown>,
    pub pretrain: Option<PretrainReport>,
    /// Set when training stopped early on a non-finite loss; the model
    /// holds the parameters from before the failing step.
    pub diverged: Option<(usize, String)>,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn training_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model, Some((&self.weights, &self.known_class_ids)));
        let meta = &mut ckpt.header.metadata;
        meta.insert("fold_id".into(), self.fold_id.into());
        meta.insert("seed".into(), cfg.seed.into());
        meta.insert("train_config".into(), cfg.to_kv_string().into());
        ckpt
    }

    pub fn inference_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ckpt = self.training_checkpoint(cfg).to_inference();
        ckpt.header.metadata.remove("train_config");
        ckpt
    }
}

/// Fresh model for `cfg`, with the trunk pretrained on the fold's
/// training classes in two-phase mode, and `frozen_stages` applied.
pub fn prepare_model<T: Scalar>(
    cfg: &TrainConfig,
    fold: &FoldSplit,
    dataset: &Dataset,
) -> Result<(FssModel<T>, Option<PretrainReport>)> {
    cfg.validate()?;
    let size = dataset.image_size().ok_or_else(|| invalid("dataset is empty"))?;
    let mut model = FssModel::<T>::new(cfg.model_config(size), derive_seed(cfg.seed, "model"))?;
    let report = if cfg.two_phase {
        Some(pretrain_trunk(&mut model.encoder, dataset, &fold.train_classes, cfg, derive_seed(cfg.seed, "pretrain"))?)
    } else {
        None
    };
    model.encoder.set_frozen_stages(&cfg.frozen_stages)?;
    Ok((model, report))
}

fn mean_parts<T: Scalar>(parts: &[LossParts<T>]) -> LossParts<T> {
    let n = T::lit(parts.len() as f64);
    let mut m = LossParts::<T>::default();
    for p in parts {
        m.base_f += p.base_f;
        m.base_b += p.base_b;
        m.known += p.known;
        m.latent += p.latent;
    }
    LossParts { base_f: m.base_f / n, base_b: m.base_b / n, known: m.known / n, latent: m.latent / n }
}

fn grads_finite<T: Scalar>(p: &dyn Parameterized<T>) -> bool {
    let mut ok = true;
    p.visit("", &mut |_, q| ok &= q.frozen || q.grad.iter().all(|v| v.is_finite()));
    ok
}

/// Episodic training of a prepared model.
pub fn train_from<T: Scalar>(
    mut model: FssModel<T>,
    pretrain: Option<PretrainReport>,
    cfg: &TrainConfig,
    fold: &FoldSplit,
    dataset: &Dataset,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let known_class_ids: Vec<u32> = fold.train_classes.iter().copied().collect();
    let mut weights =
        init_class_weights::<T>(known_class_ids.len(), cfg.n_latent, cfg.d, derive_seed(cfg.seed, "class_weights"))?;
    let mut indices: Vec<usize> = known_class_ids.iter().flat_map(|&c| dataset.indices_of_class(c)).collect();
    indices.sort_unstable();
    let cache = FeatureCache::build(&model.encoder, dataset, &indices)?;
    let mut sampler = EpisodeSampler::new(dataset, &fold.train_classes, cfg.k, derive_seed(cfg.seed, "train/episodes"))?;
    let grid = model.config.grid();
    let objective = Objective::from_config(cfg);
    let steps = cfg.total_steps();
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut w_opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let scale = T::lit(1.0 / cfg.batch_size as f64);
    let mut log = Vec::with_capacity(steps);
    let mut diverged = None;

    'steps: for step in 0..steps {
        let lr = poly_lr(cfg.base_lr, step, steps, cfg.poly_power)?;
        model.zero_grad();
        weights.zero_grad();
        let mut parts = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let episode = sampler.next_episode();
            let item = EpisodeBatchItem::new(&episode, &cache, &known_class_ids, grid)?;
            match EpisodeStep::run(&mut model, &weights, &objective, &item, scale) {
                Ok((p, d_wc)) => {
                    if let Some(g) = d_wc {
                        weights.grad_mut().scaled_add(T::one(), &g);
                    }
                    parts.push(p);
                }
                Err(QsrError::NonFinite { term }) => {
                    diverged = Some((step, term));
                    break 'steps;
                }
                Err(e) => return Err(e),
            }
        }
        let mean = mean_parts(&parts);
        let total = match total_loss(&mean, cfg.alpha, cfg.beta) {
            Ok(t) => t,
            Err(QsrError::NonFinite { term }) => {
                diverged = Some((step, term));
                break;
            }
            Err(e) => return Err(e),
        };
        if !grads_finite(&model) || !grads_finite(&weights) {
            diverged = Some((step, "gradient".to_string()));
            break;
        }
        log.push(LossBreakdown {
            step,
            total: total.to_f64_lossy(),
            base_f: mean.base_f.to_f64_lossy(),
            base_b: mean.base_b.to_f64_lossy(),
            known: mean.known.to_f64_lossy(),
            latent: mean.latent.to_f64_lossy(),
            lr,
        });
        opt.step(&mut model, "", lr);
        if cfg.qsr_enabled() {
            w_opt.step(&mut weights, "", lr * cfg.wc_lr_mult);
        }
    }
    model.zero_grad();
    weights.zero_grad();
    if let Some((step, term)) = &diverged {
        log::warn!("fold {}: training diverged at step {step} ({term})", fold.fold_id);
    }
    Ok(TrainOutcome { model, weights, known_class_ids, fold_id: fold.fold_id, log, pretrain, diverged })
}

pub fn write_loss_csv(path: &Path, log: &[LossBreakdown]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", LossBreakdown::CSV_HEADER)?;
    for row in log {
        writeln!(f, "{}", row.csv_row())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossBreakdown>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LossBreakdown::CSV_HEADER) {
        return Err(invalid(format!("{} has an unexpected header", path.display())));
    }
    lines
        .map(|line| {
            let v: Vec<&str> = line.split(',').collect();
            let f = |i: usize| -> Result<f64> {
                v.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| invalid(format!("bad loss row `{line}`")))
            };
            Ok(LossBreakdown {
                step: f(0)? as usize,
                total: f(1)?,
                base_f: f(2)?,
                base_b: f(3)?,
                known: f(4)?,
                latent: f(5)?,
                lr: f(6)?,
            })
        })
        .collect()
}

/// Prepares, trains and (when `out` is given) writes the training and
/// inference checkpoints, the loss log and a copy of the config. On
/// divergence the last good parameters are written before the error is
/// returned.
pub fn train_run<T: Scalar>(cfg: &TrainConfig, fold: &FoldSplit, dataset: &Dataset, out: Option<&Path>) -> Result<TrainOutcome<T>> {
    let (model, report) = prepare_model::<T>(cfg, fold, dataset)?;
    let outcome = train_from(model, report, cfg, fold, dataset)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        outcome.training_checkpoint(cfg).write(&dir.join(TRAINING_CHECKPOINT))?;
        outcome.inference_checkpoint(cfg).write(&dir.join(INFERENCE_CHECKPOINT))?;
        write_loss_csv(&dir.join(LOSS_LOG), &outcome.log)?;
        std::fs::write(dir.join(CONFIG_COPY), cfg.to_kv_string())?;
    }
    if let Some((step, term)) = &outcome.diverged {
        return Err(QsrError::Diverged { step: *step, term: term.clone() });
    }
    Ok(outcome)
}
