//! The episodic objective `L = L_f + α·L_b + β·(L_known + L_latent)` and
//! its backward pass.
//!
//! [`head_forward`] / [`head_backward`] operate on prototypes and query
//! features and are what the gradient checks exercise. [`EpisodeStep`]
//! wraps them with the fusion layer and any trainable trunk stages.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{BackgroundSource, PrototypeSource, TrainConfig};
use crate::data_synth::{feature_mask, Dataset, Episode};
use crate::decoder::{complement, pixel_cross_entropy, DecodeCache, Decoder};
use crate::encoder::{Branch, Encoder, FeatureMap, FusionCache, TrunkCache};
use crate::error::{invalid, QsrError, Result};
use crate::model::FssModel;
use crate::prototypes::{masked_mean, masked_mean_backward, spatial_mean, spatial_mean_backward, Prototype, PrototypeKind};
use crate::qsr::{
    known_class_loss_grad, latent_class_loss_grad, qsr_background, qsr_background_backward, BackgroundScore, ClassWeights,
};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts<T> {
    pub base_f: T,
    pub base_b: T,
    pub known: T,
    pub latent: T,
}

/// `base_f + α·base_b + β·(known + latent)`; a non-finite part is an error
/// naming that part.
pub fn total_loss<T: Scalar>(parts: &LossParts<T>, alpha: f64, beta: f64) -> Result<T> {
    for (name, v) in [("base_f", parts.base_f), ("base_b", parts.base_b), ("known", parts.known), ("latent", parts.latent)] {
        if !v.is_finite() {
            return Err(QsrError::NonFinite { term: name.to_string() });
        }
    }
    Ok(parts.base_f + T::lit(alpha) * parts.base_b + T::lit(beta) * (parts.known + parts.latent))
}

/// One logged optimizer step; losses are batch means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub total: f64,
    pub base_f: f64,
    pub base_b: f64,
    pub known: f64,
    pub latent: f64,
    pub lr: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,total,base_f,base_b,known,latent,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.total, self.base_f, self.base_b, self.known, self.latent, self.lr
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub alpha: f64,
    pub beta: f64,
    pub bg_source: BackgroundSource,
    pub proto_source: PrototypeSource,
    pub detach_query: bool,
}

impl Objective {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            alpha: cfg.alpha,
            beta: cfg.beta,
            bg_source: cfg.bg_source,
            proto_source: cfg.proto_source,
            detach_query: cfg.detach_query,
        }
    }

    pub fn baseline() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            bg_source: BackgroundSource::Query,
            proto_source: PrototypeSource::Qsr,
            detach_query: false,
        }
    }
}

/// Input for the background branch of the head.
#[derive(Clone, Debug)]
pub enum BackgroundInput<T> {
    /// No background prediction (α = 0).
    Skip,
    /// Query prototype to reconstruct from via the class weights.
    Reconstruct(Array1<T>),
    /// Ground-truth background mask at feature resolution.
    Mask(Array2<u8>),
}

#[derive(Clone, Debug)]
enum BgCache<T> {
    Qsr { s_b: BackgroundScore<T>, p_q: Array1<T>, w_c: Array2<T> },
    Mask { mask: Array2<u8> },
}

#[derive(Clone, Debug)]
pub struct HeadCache<T> {
    dec_f: DecodeCache<T>,
    grad_f: Array3<T>,
    bg: Option<(BgCache<T>, DecodeCache<T>, Array3<T>)>,
    known: Option<(Array1<T>, Array2<T>)>,
    latent: Option<Array2<T>>,
    n_known: usize,
    wc_dim: (usize, usize),
    feature_dims: (usize, usize, usize),
    alpha: T,
    beta: T,
    detach: bool,
}

/// Gradients with respect to the head's inputs. `d_wc` covers all rows
/// of the class weights.
#[derive(Clone, Debug)]
pub struct HeadGrads<T> {
    pub d_pf: Array1<T>,
    pub d_pq: Option<Array1<T>>,
    pub d_fq: Array3<T>,
    pub d_wc: Option<Array2<T>>,
}

#[allow(clippy::too_many_arguments)]
/// Losses for one episode given its foreground prototype, query features
/// and binary query mask at image resolution.
pub fn head_forward<T: Scalar>(
    decoder: &Decoder<T>,
    weights: &ClassWeights<T>,
    objective: &Objective,
    p_f: ArrayView1<'_, T>,
    background: &BackgroundInput<T>,
    f_q: &FeatureMap<T>,
    c_f: usize,
    query_mask: ArrayView2<'_, u8>,
) -> Result<(LossParts<T>, HeadCache<T>)> {
    let pf = Prototype::new(p_f.to_owned(), PrototypeKind::Foreground);
    let (logits_f, dec_f) = decoder.forward(&pf, f_q, None)?;
    let (base_f, grad_f) = pixel_cross_entropy(&logits_f, query_mask)?;
    let mut parts = LossParts { base_f, ..LossParts::default() };

    let bg_proto = match background {
        BackgroundInput::Skip => None,
        BackgroundInput::Reconstruct(p_q) => {
            let (s_b, p_b) = qsr_background(p_q.view(), c_f, weights)?;
            Some((BgCache::Qsr { s_b, p_q: p_q.clone(), w_c: weights.all().to_owned() }, p_b))
        }
        BackgroundInput::Mask(mask) => {
            if mask.iter().any(|&v| v == 1) {
                let v = masked_mean(f_q.data.view(), mask.view())?;
                Some((BgCache::Mask { mask: mask.clone() }, Prototype::new(v, PrototypeKind::Background)))
            } else {
                None
            }
        }
    };
    let bg = match bg_proto {
        Some((kind, p_b)) => {
            let (logits_b, dec_b) = decoder.forward(&p_b, f_q, None)?;
            let (base_b, grad_b) = pixel_cross_entropy(&logits_b, complement(query_mask).view())?;
            parts.base_b = base_b;
            Some((kind, dec_b, grad_b))
        }
        None => None,
    };

    let (known, latent) = if objective.beta > 0.0 {
        let (lk, dp, dwk) = known_class_loss_grad(p_f, c_f, weights.known())?;
        let (ll, dwl) = latent_class_loss_grad(weights.all());
        parts.known = lk;
        parts.latent = ll;
        (Some((dp, dwk)), Some(dwl))
    } else {
        (None, None)
    };

    let cache = HeadCache {
        dec_f,
        grad_f,
        bg,
        known,
        latent,
        n_known: weights.n_known,
        wc_dim: weights.all().dim(),
        feature_dims: f_q.data.dim(),
        alpha: T::lit(objective.alpha),
        beta: T::lit(objective.beta),
        detach: objective.detach_query,
    };
    Ok((parts, cache))
}

/// Gradient of `scale · L` with respect to the head inputs; decoder
/// parameter gradients are accumulated in place.
pub fn head_backward<T: Scalar>(decoder: &mut Decoder<T>, cache: &HeadCache<T>, scale: T) -> Result<HeadGrads<T>> {
    let (mut d_pf, mut d_fq) = decoder.backward(&cache.dec_f, &(&cache.grad_f * scale));
    let mut d_pq = None;
    let mut d_wc: Option<Array2<T>> = None;
    if let Some((kind, dec_b, grad_b)) = &cache.bg {
        let (d_pb, d_fq_b) = decoder.backward(dec_b, &(grad_b * (scale * cache.alpha)));
        d_fq += &d_fq_b;
        match kind {
            BgCache::Qsr { s_b, p_q, w_c } => {
                let (dw, dq) = qsr_background_backward(d_pb.view(), s_b, p_q.view(), w_c.view());
                d_wc = Some(dw);
                if !cache.detach {
                    d_pq = Some(dq);
                }
            }
            BgCache::Mask { mask } => {
                if !cache.detach {
                    d_fq += &masked_mean_backward(d_pb.view(), mask.view(), cache.feature_dims)?;
                }
            }
        }
    }
    let b = scale * cache.beta;
    if let Some((dp, dwk)) = &cache.known {
        d_pf.scaled_add(b, dp);
        let rows = d_wc.get_or_insert_with(|| Array2::zeros(cache.wc_dim));
        rows.slice_mut(ndarray::s![..cache.n_known, ..]).scaled_add(b, dwk);
    }
    if let Some(dl) = &cache.latent {
        let rows = d_wc.get_or_insert_with(|| Array2::zeros(cache.wc_dim));
        rows.scaled_add(b, dl);
    }
    Ok(HeadGrads { d_pf, d_pq, d_fq, d_wc })
}

type TrunkOutput<T> = (FeatureMap<T>, FeatureMap<T>, Option<TrunkCache<T>>);

/// What a cached image contributes to the trunk: either the output of the
/// frozen stage prefix, or (when the whole trunk is frozen) the mid and
/// late maps themselves.
#[derive(Clone, Debug)]
pub enum TrunkInput<T> {
    Prefix { start: usize, x: Array3<T> },
    Stages { mid: FeatureMap<T>, late: FeatureMap<T> },
}

impl<T: Scalar> TrunkInput<T> {
    pub fn compute(encoder: &Encoder<T>, image: ndarray::ArrayView3<'_, T>) -> Result<Self> {
        let n = encoder.frozen_prefix_len();
        if n >= 4 {
            let (mid, late) = encoder.extract_stage_features(image)?;
            Ok(Self::Stages { mid, late })
        } else {
            Ok(Self::Prefix { start: n, x: encoder.trunk_prefix(image, n)? })
        }
    }

    fn run(&self, encoder: &Encoder<T>) -> Result<TrunkOutput<T>> {
        match self {
            Self::Prefix { start, x } => {
                let (m, l, c) = encoder.trunk_forward_from(*start, x.clone())?;
                Ok((m, l, Some(c)))
            }
            Self::Stages { mid, late } => Ok((mid.clone(), late.clone(), None)),
        }
    }
}

/// Per-image trunk inputs, computed once for a fixed frozen prefix.
#[derive(Clone, Debug)]
pub struct FeatureCache<T> {
    entries: Vec<Option<TrunkInput<T>>>,
}

impl<T: Scalar> FeatureCache<T> {
    pub fn build(encoder: &Encoder<T>, dataset: &Dataset, indices: &[usize]) -> Result<Self> {
        let computed = indices
            .par_iter()
            .map(|&i| {
                let img = dataset.pairs[i].image.mapv(|v| T::lit(f64::from(v)));
                Ok((i, TrunkInput::compute(encoder, img.view())?))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut entries = vec![None; dataset.len()];
        for (i, t) in computed {
            entries[i] = Some(t);
        }
        Ok(Self { entries })
    }

    pub fn get(&self, index: usize) -> Result<&TrunkInput<T>> {
        self.entries
            .get(index)
            .and_then(Option::as_ref)
            .ok_or_else(|| invalid(format!("image {index} is not in the feature cache")))
    }
}

/// One episode as tensors ready for the objective.
#[derive(Clone, Debug)]
pub struct EpisodeBatchItem<'a, T> {
    pub supports: Vec<(&'a TrunkInput<T>, Array2<u8>)>,
    pub query: &'a TrunkInput<T>,
    pub query_mask: Array2<u8>,
    pub c_f: usize,
}

impl<'a, T: Scalar> EpisodeBatchItem<'a, T> {
    /// `known_ids` is the sorted list of known classes; the episode class
    /// must be one of them.
    pub fn new(episode: &Episode, cache: &'a FeatureCache<T>, known_ids: &[u32], grid: (usize, usize)) -> Result<Self> {
        let c_f = known_ids
            .iter()
            .position(|&c| c == episode.class_id)
            .ok_or_else(|| invalid(format!("episode class {} is not a known class", episode.class_id)))?;
        let supports = episode
            .support
            .iter()
            .map(|s| Ok((cache.get(s.index)?, feature_mask(s.mask.view(), grid)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { supports, query: cache.get(episode.query.index)?, query_mask: episode.query.mask.clone(), c_f })
    }
}

struct BranchForward<T> {
    trunk: Option<TrunkCache<T>>,
    fusion: FusionCache<T>,
    features: FeatureMap<T>,
}

fn branch_forward<T: Scalar>(encoder: &Encoder<T>, input: &TrunkInput<T>, branch: Branch) -> Result<BranchForward<T>> {
    let (mid, late, trunk) = input.run(encoder)?;
    let (features, fusion) = encoder.fuse_forward(&mid, &late, branch)?;
    Ok(BranchForward { trunk, fusion, features })
}

fn branch_backward<T: Scalar>(encoder: &mut Encoder<T>, fwd: &BranchForward<T>, grad: &Array3<T>, branch: Branch) {
    let need = fwd.trunk.is_some() && !encoder.trunk_frozen();
    if let Some((d_mid, d_late)) = encoder.fuse_backward(&fwd.fusion, grad, branch, need) {
        if let Some(tc) = &fwd.trunk {
            encoder.trunk_backward(tc, &d_mid, &d_late);
        }
    }
}

/// Forward + backward of one episode, accumulating `scale`-weighted
/// gradients into the model and the returned class-weight gradient.
pub struct EpisodeStep;

impl EpisodeStep {
    pub fn run<T: Scalar>(
        model: &mut FssModel<T>,
        weights: &ClassWeights<T>,
        objective: &Objective,
        item: &EpisodeBatchItem<'_, T>,
        scale: T,
    ) -> Result<(LossParts<T>, Option<Array2<T>>)> {
        let sup = item
            .supports
            .iter()
            .map(|(input, _)| branch_forward(&model.encoder, input, Branch::Support))
            .collect::<Result<Vec<_>>>()?;
        let q = branch_forward(&model.encoder, item.query, Branch::Query)?;
        let k = T::lit(sup.len() as f64);
        let mut p_f = Array1::<T>::zeros(q.features.channels());
        for (fwd, (_, mask)) in sup.iter().zip(&item.supports) {
            p_f += &masked_mean(fwd.features.data.view(), mask.view())?;
        }
        p_f /= k;

        let qsr_active = objective.alpha > 0.0;
        let background = if !qsr_active {
            BackgroundInput::Skip
        } else {
            match objective.proto_source {
                PrototypeSource::Mask => {
                    let grid_mask = feature_mask(item.query_mask.view(), q.features.grid())?;
                    BackgroundInput::Mask(complement(grid_mask.view()))
                }
                PrototypeSource::Qsr => match objective.bg_source {
                    BackgroundSource::Query => BackgroundInput::Reconstruct(spatial_mean(q.features.data.view())?),
                    BackgroundSource::Support => {
                        let mut acc = Array1::<T>::zeros(p_f.len());
                        for fwd in &sup {
                            acc += &spatial_mean(fwd.features.data.view())?;
                        }
                        BackgroundInput::Reconstruct(acc / k)
                    }
                },
            }
        };
        let (parts, cache) = head_forward(
            &model.decoder,
            weights,
            objective,
            p_f.view(),
            &background,
            &q.features,
            item.c_f,
            item.query_mask.view(),
        )?;
        total_loss(&parts, objective.alpha, objective.beta)?;
        let grads = head_backward(&mut model.decoder, &cache, scale)?;

        let mut d_fq = grads.d_fq;
        let mut d_fs: Vec<Array3<T>> = sup
            .iter()
            .zip(&item.supports)
            .map(|(fwd, (_, mask))| masked_mean_backward((&grads.d_pf / k).view(), mask.view(), fwd.features.data.dim()))
            .collect::<Result<_>>()?;
        if let Some(d_pq) = &grads.d_pq {
            match objective.bg_source {
                BackgroundSource::Query => d_fq += &spatial_mean_backward(d_pq.view(), q.features.data.dim()),
                BackgroundSource::Support => {
                    let share = d_pq / k;
                    for (g, fwd) in d_fs.iter_mut().zip(&sup) {
                        *g += &spatial_mean_backward(share.view(), fwd.features.data.dim());
                    }
                }
            }
        }
        branch_backward(&mut model.encoder, &q, &d_fq, Branch::Query);
        for (fwd, g) in sup.iter().zip(&d_fs) {
            branch_backward(&mut model.encoder, fwd, g, Branch::Support);
        }
        Ok((parts, grads.d_wc))
    }
}
