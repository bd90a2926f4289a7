use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use super::metrics::ConfusionCounts;
use crate::data_synth::{feature_mask, Dataset, Episode, EpisodeSampler};
use crate::encoder::{Branch, FeatureMap, FusionMode};
use crate::error::{invalid, Result};
use crate::model::FssModel;
use crate::prototypes::{fuse_support_prototypes, masked_average_pool};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub class_id: u32,
    pub support: Vec<usize>,
    pub query: usize,
    pub counts: ConfusionCounts,
    pub prediction: Option<Array2<u8>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldEval {
    pub episodes: Vec<EpisodeResult>,
}

impl FoldEval {
    pub fn per_class(&self) -> BTreeMap<u32, ConfusionCounts> {
        let mut out = BTreeMap::<u32, ConfusionCounts>::new();
        for e in &self.episodes {
            *out.entry(e.class_id).or_default() += e.counts;
        }
        out
    }

    pub fn pooled(&self) -> ConfusionCounts {
        self.episodes.iter().map(|e| e.counts).sum()
    }

    pub fn episode_counts(&self) -> Vec<ConfusionCounts> {
        self.episodes.iter().map(|e| e.counts).collect()
    }
}

/// The seeded list of evaluation episodes over `classes`.
pub fn sample_eval_episodes(
    dataset: &Dataset,
    classes: &BTreeSet<u32>,
    count: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    if count == 0 {
        return Err(invalid("number of evaluation episodes must be positive"));
    }
    let mut sampler = EpisodeSampler::new(dataset, classes, k, seed)?;
    Ok((0..count).map(|_| sampler.next_episode()).collect())
}

/// Runs the test-time path (foreground prototype only) on each episode.
/// Image features are computed once per image and branch.
pub fn evaluate_episodes<T: Scalar>(
    model: &FssModel<T>,
    dataset: &Dataset,
    episodes: &[Episode],
    keep_predictions: bool,
) -> Result<FoldEval> {
    let shared = model.config.encoder.fusion_mode == FusionMode::Shared3x3;
    let mut wanted: BTreeSet<(usize, Branch)> = BTreeSet::new();
    for e in episodes {
        let sb = if shared { Branch::Query } else { Branch::Support };
        wanted.extend(e.support.iter().map(|s| (s.index, sb)));
        wanted.insert((e.query.index, Branch::Query));
    }
    let wanted: Vec<_> = wanted.into_iter().collect();
    let features: HashMap<(usize, Branch), FeatureMap<T>> = wanted
        .par_iter()
        .map(|&(i, b)| {
            let img = dataset.pairs[i].image.mapv(|v| T::lit(f64::from(v)));
            Ok(((i, b), model.encoder.encode(img.view(), b)?))
        })
        .collect::<Result<_>>()?;
    let sb = if shared { Branch::Query } else { Branch::Support };
    let results = episodes
        .par_iter()
        .map(|e| {
            let protos = e
                .support
                .iter()
                .map(|s| {
                    let f = &features[&(s.index, sb)];
                    masked_average_pool(f, feature_mask(s.mask.view(), f.grid())?.view())
                })
                .collect::<Result<Vec<_>>>()?;
            let p_f = fuse_support_prototypes(&protos)?;
            let logits = model.decoder.decode(&p_f, &features[&(e.query.index, Branch::Query)])?;
            let pred = logits.predicted_mask();
            let counts = ConfusionCounts::from_masks(pred.view(), e.query.mask.view())?;
            Ok(EpisodeResult {
                class_id: e.class_id,
                support: e.support.iter().map(|s| s.index).collect(),
                query: e.query.index,
                counts,
                prediction: keep_predictions.then_some(pred),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldEval { episodes: results })
}

/// Decodes an arbitrary prototype against a query image; used by the
/// visualization tools.
pub fn decode_prototype<T: Scalar>(model: &FssModel<T>, prototype: &Array1<T>, query: &FeatureMap<T>) -> Result<Array2<u8>> {
    let p = crate::prototypes::Prototype::new(prototype.clone(), crate::prototypes::PrototypeKind::Background);
    Ok(model.decoder.decode(&p, query)?.predicted_mask())
}
