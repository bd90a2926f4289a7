use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;
use crate::error::{invalid, QsrError, Result};

/// A dataset image referenced by an episode, with its mask binarized to the
/// episode class.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeItem {
    pub index: usize,
    pub mask: Array2<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub class_id: u32,
    pub k: usize,
    pub support: Vec<EpisodeItem>,
    pub query: EpisodeItem,
}

impl Episode {
    pub fn image_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.support.iter().map(|s| s.index).chain(std::iter::once(self.query.index))
    }
}

/// `1` where the label mask carries `class_id`, else `0`.
pub fn binarize(mask: ArrayView2<'_, u8>, class_id: u32) -> Array2<u8> {
    let label = super::label_of(class_id);
    mask.mapv(|v| u8::from(v == label))
}

/// Nearest-neighbour reduction sampling each target cell's center.
pub fn downsample_mask(mask: ArrayView2<'_, u8>, target: (usize, usize)) -> Result<Array2<u8>> {
    let (sh, sw) = mask.dim();
    let (th, tw) = target;
    if th == 0 || tw == 0 || th > sh || tw > sw {
        return Err(invalid(format!("cannot downsample {sh}x{sw} mask to {th}x{tw}")));
    }
    Ok(Array2::from_shape_fn((th, tw), |(i, j)| {
        let si = ((2 * i + 1) * sh) / (2 * th);
        let sj = ((2 * j + 1) * sw) / (2 * tw);
        u8::from(mask[[si, sj]] != 0)
    }))
}

/// [`downsample_mask`], except that a non-empty source never yields an
/// empty result: objects missed by every sampled center fall back to the
/// cells with the largest foreground fraction.
pub fn feature_mask(mask: ArrayView2<'_, u8>, target: (usize, usize)) -> Result<Array2<u8>> {
    let out = downsample_mask(mask, target)?;
    if out.iter().any(|&v| v == 1) || mask.iter().all(|&v| v == 0) {
        return Ok(out);
    }
    let (sh, sw) = mask.dim();
    let (th, tw) = target;
    let mut counts = Array2::<usize>::zeros(target);
    for ((i, j), &v) in mask.indexed_iter() {
        if v != 0 {
            counts[[(i * th / sh).min(th - 1), (j * tw / sw).min(tw - 1)]] += 1;
        }
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    Ok(counts.mapv(|c| u8::from(c == best && c > 0)))
}

/// Seeded episode stream: uniform class, then `k + 1` distinct images of
/// that class without replacement. One sampler per worker; derive each
/// worker's seed with [`crate::rng::worker_seed`].
pub struct EpisodeSampler<'a> {
    dataset: &'a Dataset,
    classes: Vec<u32>,
    by_class: BTreeMap<u32, Vec<usize>>,
    k: usize,
    rng: ChaCha8Rng,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(dataset: &'a Dataset, classes: &BTreeSet<u32>, k: usize, rng_seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        if classes.is_empty() {
            return Err(invalid("episode class set is empty"));
        }
        let mut by_class = BTreeMap::new();
        for &c in classes {
            let idx = dataset.indices_of_class(c);
            if idx.len() < k + 1 {
                return Err(QsrError::Sampling(format!(
                    "class {c} has {} images, need at least {}",
                    idx.len(),
                    k + 1
                )));
            }
            by_class.insert(c, idx);
        }
        Ok(Self {
            dataset,
            classes: classes.iter().copied().collect(),
            by_class,
            k,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        })
    }

    pub fn next_episode(&mut self) -> Episode {
        let class_id = self.classes[self.rng.random_range(0..self.classes.len())];
        let pool = &self.by_class[&class_id];
        let picks = sample(&mut self.rng, pool.len(), self.k + 1);
        let item = |i: usize| {
            let index = pool[i];
            EpisodeItem { index, mask: binarize(self.dataset.pairs[index].mask.view(), class_id) }
        };
        let mut items: Vec<EpisodeItem> = picks.iter().map(item).collect();
        let query = items.pop().expect("k + 1 >= 2 picks");
        Episode { class_id, k: self.k, support: items, query }
    }
}

impl Iterator for EpisodeSampler<'_> {
    type Item = Episode;

    fn next(&mut self) -> Option<Episode> {
        Some(self.next_episode())
    }
}

pub fn sample_episode(pool: &Dataset, classes: &BTreeSet<u32>, k: usize, rng_seed: u64) -> Result<Episode> {
    Ok(EpisodeSampler::new(pool, classes, k, rng_seed)?.next_episode())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{generate_dataset, ClassCatalog, SceneParams};

    fn small_dataset() -> Dataset {
        generate_dataset(&ClassCatalog::new(4).unwrap(), 7, 11, &SceneParams::default()).unwrap()
    }

    #[test]
    fn one_and_five_shot() {
        let ds = small_dataset();
        let classes: BTreeSet<u32> = (0..4).collect();
        for k in [1, 5] {
            let ep = sample_episode(&ds, &classes, k, 3).unwrap();
            assert_eq!(ep.support.len(), k);
            let ids: BTreeSet<usize> = ep.image_indices().collect();
            assert_eq!(ids.len(), k + 1);
            for item in ep.support.iter().chain(std::iter::once(&ep.query)) {
                assert!(item.mask.iter().any(|&v| v == 1));
                assert!(item.mask.iter().all(|&v| v <= 1));
                assert_eq!(ds.pairs[item.index].class_id, ep.class_id);
            }
        }
    }

    #[test]
    fn binarized_count_matches_raw_labels() {
        let ds = small_dataset();
        let ep = sample_episode(&ds, &(0..4).collect(), 1, 9).unwrap();
        let raw = &ds.pairs[ep.query.index].mask;
        let want = raw.iter().filter(|&&v| v == crate::data_synth::label_of(ep.class_id)).count();
        assert_eq!(ep.query.mask.iter().filter(|&&v| v == 1).count(), want);
    }

    #[test]
    fn insufficient_images_is_sampling_error() {
        let ds = small_dataset();
        assert!(matches!(sample_episode(&ds, &(0..4).collect(), 7, 1), Err(QsrError::Sampling(_))));
        assert!(sample_episode(&ds, &(0..4).collect(), 0, 1).is_err());
    }

    #[test]
    fn sampler_stream_is_seeded() {
        let ds = small_dataset();
        let classes: BTreeSet<u32> = (0..4).collect();
        let a: Vec<Episode> = EpisodeSampler::new(&ds, &classes, 1, 5).unwrap().take(20).collect();
        let b: Vec<Episode> = EpisodeSampler::new(&ds, &classes, 1, 5).unwrap().take(20).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn downsample_constants_and_errors() {
        let ones = Array2::<u8>::ones((32, 32));
        assert_eq!(downsample_mask(ones.view(), (8, 8)).unwrap(), Array2::<u8>::ones((8, 8)));
        let zeros = Array2::<u8>::zeros((32, 32));
        assert_eq!(downsample_mask(zeros.view(), (8, 8)).unwrap(), Array2::<u8>::zeros((8, 8)));
        assert!(downsample_mask(zeros.view(), (64, 8)).is_err());
    }
}
