use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use super::evaluate::decode_prototype;
use crate::data_synth::{save_mask_png, Dataset, Episode};
use crate::error::{invalid, Result};
use crate::model::FssModel;
use crate::prototypes::{global_average_pool, Prototype};
use crate::qsr::{background_scores, reconstruct_background, BackgroundScore, ClassWeights};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentMask<T> {
    /// Index among the latent classes (row `n_known + latent_idx` of W_c).
    pub latent_idx: usize,
    pub score: T,
    pub prototype: Array1<T>,
    pub mask: Array2<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentVisualization<T> {
    pub latent: Vec<LatentMask<T>>,
    pub background: Array2<u8>,
    pub scores: Array1<T>,
}

/// Decodes the `top_n` highest-scoring latent classes of the query (each
/// from a one-hot score vector) and the full reconstructed background.
pub fn latent_visualization<T: Scalar>(
    model: &FssModel<T>,
    weights: &ClassWeights<T>,
    known_ids: &[u32],
    dataset: &Dataset,
    episode: &Episode,
    top_n: usize,
) -> Result<LatentVisualization<T>> {
    if weights.n_latent == 0 {
        return Err(invalid("latent visualization needs a model trained with n_latent > 0"));
    }
    if top_n == 0 || top_n > weights.n_latent {
        return Err(invalid(format!("top_n must be in 1..={}, got {top_n}", weights.n_latent)));
    }
    let c_f = known_ids
        .iter()
        .position(|&c| c == episode.class_id)
        .ok_or_else(|| invalid(format!("episode class {} is not a known class of this model", episode.class_id)))?;
    let image = dataset.pairs[episode.query.index].image.mapv(|v| T::lit(f64::from(v)));
    let f_q = model.query_features(image.view())?;
    let p_q = global_average_pool(&f_q)?;
    let w_c = weights.all();
    let s_b = background_scores(p_q.vector.view(), c_f, w_c, weights.n_known)?;
    let full: Prototype<T> = reconstruct_background(&s_b, w_c)?;
    let background = decode_prototype(model, &full.vector, &f_q)?;

    let nk = weights.n_known;
    let mut order: Vec<usize> = (0..weights.n_latent).collect();
    order.sort_by(|&a, &b| s_b.scores[nk + b].partial_cmp(&s_b.scores[nk + a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let latent = order
        .into_iter()
        .take(top_n)
        .map(|j| {
            let mut one_hot = Array1::<T>::zeros(weights.rows());
            one_hot[nk + j] = T::one();
            let proto = reconstruct_background(&BackgroundScore { scores: one_hot, foreground_index: c_f }, w_c)?;
            Ok(LatentMask {
                latent_idx: j,
                score: s_b.scores[nk + j],
                mask: decode_prototype(model, &proto.vector, &f_q)?,
                prototype: proto.vector,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentVisualization { latent, background, scores: s_b.scores })
}

impl<T: Scalar> LatentVisualization<T> {
    /// Writes `{episode}_{latent_idx}.png` per latent class and
    /// `{episode}_background.png`, as 0/255 masks.
    pub fn write_pngs(&self, dir: &Path, episode: usize) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::with_capacity(self.latent.len() + 1);
        for l in &self.latent {
            let p = dir.join(format!("{episode}_{}.png", l.latent_idx));
            save_mask_png(&p, &l.mask.mapv(|v| v * 255))?;
            paths.push(p);
        }
        let p = dir.join(format!("{episode}_background.png"));
        save_mask_png(&p, &self.background.mapv(|v| v * 255))?;
        paths.push(p);
        Ok(paths)
    }
}
