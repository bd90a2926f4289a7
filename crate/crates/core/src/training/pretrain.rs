//! Trunk pretraining: dense per-cell classification over the known classes
//! (plus background) with a throwaway 1×1 head on the late stage. Pixels of
//! any other class count as background, so held-out classes never
//! contribute a label.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::optim::{poly_lr, Sgd};
use crate::data_synth::Dataset;
use crate::encoder::Encoder;
use crate::error::{QsrError, Result};
use crate::nn::{Conv2d, Parameterized};
use crate::rng::derive_seed;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Mean loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub images: usize,
}

/// Majority label per grid cell after mapping raw labels to
/// `1 + position in known_ids` (0 for background and unknown classes).
pub fn cell_labels(mask: ArrayView2<'_, u8>, known_ids: &[u32], grid: (usize, usize)) -> Array2<usize> {
    let (h, w) = mask.dim();
    let (gh, gw) = grid;
    let n = known_ids.len() + 1;
    let mut counts = Array3::<usize>::zeros((gh, gw, n));
    for ((i, j), &v) in mask.indexed_iter() {
        let label = match v {
            0 => 0,
            l => known_ids.iter().position(|&c| c + 1 == u32::from(l)).map_or(0, |p| p + 1),
        };
        counts[[(i * gh / h).min(gh - 1), (j * gw / w).min(gw - 1), label]] += 1;
    }
    Array2::from_shape_fn(grid, |(i, j)| {
        let mut best = 0;
        for c in 1..n {
            if counts[[i, j, c]] > counts[[i, j, best]] {
                best = c;
            }
        }
        best
    })
}

/// Mean softmax cross-entropy over cells plus its logit gradient.
fn cell_cross_entropy<T: Scalar>(logits: &Array3<T>, labels: &Array2<usize>) -> (T, Array3<T>) {
    let (c, h, w) = logits.dim();
    let scale = T::lit(1.0 / (h * w) as f64);
    let mut grad = Array3::<T>::zeros((c, h, w));
    let mut total = T::zero();
    for ((i, j), &t) in labels.indexed_iter() {
        let col = logits.slice(ndarray::s![.., i, j]);
        let m = col.fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = col.iter().map(|&z| (z - m).exp()).sum::<T>().ln() + m;
        total += lse - col[t];
        for ci in 0..c {
            let p = (col[ci] - lse).exp();
            grad[[ci, i, j]] = (p - if ci == t { T::one() } else { T::zero() }) * scale;
        }
    }
    (total * scale, grad)
}

/// Trains every trunk stage on images whose foreground class is in
/// `train_classes`. The fusion layer is left untouched.
pub fn pretrain_trunk<T: Scalar>(
    encoder: &mut Encoder<T>,
    dataset: &Dataset,
    train_classes: &BTreeSet<u32>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    let known: Vec<u32> = train_classes.iter().copied().collect();
    let mut indices: Vec<usize> = known.iter().flat_map(|&c| dataset.indices_of_class(c)).collect();
    indices.sort_unstable();
    if indices.is_empty() || cfg.pretrain_epochs == 0 {
        return Ok(PretrainReport { epoch_losses: Vec::new(), images: indices.len() });
    }
    let saved = encoder.config.frozen_stages.clone();
    encoder.set_frozen_stages(&BTreeSet::new())?;
    let mut head_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pretrain/head"));
    let mut head = Conv2d::<T>::new(encoder.late_channels(), known.len() + 1, 1, 1, 0, 1, &mut head_rng);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pretrain/order"));
    let grid = {
        let (h, w) = dataset.image_size().expect("non-empty dataset");
        let s = encoder.config.spatial_scale();
        (h / s, w / s)
    };
    let labels: Vec<Array2<usize>> =
        indices.iter().map(|&i| cell_labels(dataset.pairs[i].mask.view(), &known, grid)).collect();
    let batch = cfg.pretrain_batch;
    let steps_per_epoch = indices.len().div_ceil(batch);
    let max_steps = steps_per_epoch * cfg.pretrain_epochs;
    let mut enc_opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut head_opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..indices.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.pretrain_epochs);
    let mut step = 0;
    for _ in 0..cfg.pretrain_epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        for chunk in order.chunks(batch) {
            encoder.zero_grad();
            head.zero_grad();
            let scale = T::lit(1.0 / chunk.len() as f64);
            for &o in chunk {
                let img = dataset.pairs[indices[o]].image.mapv(|v| T::lit(f64::from(v)));
                let (mid, late, cache) = encoder.trunk_forward(img.view())?;
                let (logits, hc) = head.forward(late.data.view())?;
                let (loss, grad) = cell_cross_entropy(&logits, &labels[o]);
                if !loss.is_finite() {
                    return Err(QsrError::NonFinite { term: "pretraining loss".into() });
                }
                sum += loss.to_f64_lossy();
                let d_late = head.backward(&hc, (grad * scale).view(), true).expect("dx requested");
                encoder.trunk_backward(&cache, &Array3::zeros(mid.data.raw_dim()), &d_late);
            }
            let lr = poly_lr(cfg.pretrain_lr, step, max_steps, cfg.poly_power)?;
            enc_opt.step(encoder, "encoder", lr);
            head_opt.step(&mut head, "head", lr);
            step += 1;
        }
        epoch_losses.push(sum / indices.len() as f64);
    }
    encoder.zero_grad();
    encoder.set_frozen_stages(&saved)?;
    log::debug!("pretraining losses per epoch: {epoch_losses:?}");
    Ok(PretrainReport { epoch_losses, images: indices.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cell_labels_map_unknown_to_background() {
        let mask = array![[1u8, 1, 3, 3], [1, 0, 3, 3], [0, 0, 2, 2], [0, 0, 2, 0]];
        let labels = cell_labels(mask.view(), &[0, 1], (2, 2));
        assert_eq!(labels, array![[1, 0], [0, 2]]);
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let logits = Array3::from_shape_fn((3, 2, 2), |(c, i, j)| (c + 2 * i + j) as f64 * 0.3);
        let labels = array![[0, 1], [2, 0]];
        let (loss, grad) = cell_cross_entropy(&logits, &labels);
        assert!(loss > 0.0);
        for i in 0..2 {
            for j in 0..2 {
                assert!(grad.slice(ndarray::s![.., i, j]).sum().abs() < 1e-12);
            }
        }
    }
}
