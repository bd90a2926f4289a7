//! Prototype decoder: tiles a prototype over the query grid, concatenates
//! it with the query features, runs two convolutions and upsamples the
//! two-channel result to image resolution. One parameter set serves both
//! foreground and background prototypes.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::error::{invalid, QsrError, Result};
use crate::nn::{join, relu, relu_backward, Bilinear, Conv2d, ConvCache, Param, Parameterized};
use crate::prototypes::Prototype;
use crate::scalar::Scalar;

const COS_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d: usize,
    pub hidden: usize,
    /// Adds a prototype–feature cosine similarity channel.
    pub cosine_channel: bool,
    /// Reserves one extra input channel for a prior mask.
    pub prior_channel: bool,
    pub grid: (usize, usize),
    pub image: (usize, usize),
}

impl DecoderConfig {
    pub fn input_channels(&self) -> usize {
        2 * self.d + usize::from(self.cosine_channel) + usize::from(self.prior_channel)
    }
}

/// Channel 0 scores "not target", channel 1 scores "target".
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits<T> {
    pub logits: Array3<T>,
}

impl<T: Scalar> MaskLogits<T> {
    /// Channel argmax; ties go to channel 0.
    pub fn predicted_mask(&self) -> Array2<u8> {
        let z0 = self.logits.index_axis(Axis(0), 0);
        let z1 = self.logits.index_axis(Axis(0), 1);
        ndarray::Zip::from(&z0).and(&z1).map_collect(|&a, &b| u8::from(b > a))
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.logits.dim();
        (h, w)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub config: DecoderConfig,
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    upsample: Bilinear<T>,
}

/// Saved activations from [`Decoder::forward`].
#[derive(Clone, Debug)]
pub struct DecodeCache<T> {
    prototype: Array1<T>,
    features: Array3<T>,
    cosine: Option<Array2<T>>,
    conv1: ConvCache<T>,
    hidden: Array3<T>,
    conv2: ConvCache<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(config: DecoderConfig, rng_seed: u64) -> Result<Self> {
        if config.d == 0 || config.hidden == 0 {
            return Err(invalid("decoder channel counts must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let conv1 = Conv2d::new(config.input_channels(), config.hidden, 3, 1, 1, 1, &mut rng);
        let conv2 = Conv2d::new(config.hidden, 2, 3, 1, 1, 1, &mut rng);
        let upsample = Bilinear::new(config.grid, config.image);
        Ok(Self { config, conv1, conv2, upsample })
    }

    fn cosine_map(p: ArrayView1<'_, T>, f: &Array3<T>) -> Array2<T> {
        let (_, h, w) = f.dim();
        let pn = p.dot(&p).sqrt();
        Array2::from_shape_fn((h, w), |(i, j)| {
            let col = f.slice(s![.., i, j]);
            let denom = (pn * col.dot(&col).sqrt()).max(T::lit(COS_EPS));
            p.dot(&col) / denom
        })
    }

    pub fn forward(
        &self,
        prototype: &Prototype<T>,
        features: &FeatureMap<T>,
        prior: Option<ArrayView2<'_, T>>,
    ) -> Result<(MaskLogits<T>, DecodeCache<T>)> {
        let d = self.config.d;
        if prototype.dim() != d || features.channels() != d {
            return Err(invalid(format!(
                "decoder expects d={d}, got prototype {} and features {}",
                prototype.dim(),
                features.channels()
            )));
        }
        if features.grid() != self.config.grid {
            return Err(invalid(format!("feature grid {:?} vs decoder grid {:?}", features.grid(), self.config.grid)));
        }
        if prior.is_some() && !self.config.prior_channel {
            return Err(invalid("prior mask given but decoder has no prior channel"));
        }
        let (h, w) = features.grid();
        let mut input = Array3::<T>::zeros((self.config.input_channels(), h, w));
        for (c, &v) in prototype.vector.iter().enumerate() {
            input.slice_mut(s![c, .., ..]).fill(v);
        }
        input.slice_mut(s![d..2 * d, .., ..]).assign(&features.data);
        let mut next = 2 * d;
        let cosine = if self.config.cosine_channel {
            let cos = Self::cosine_map(prototype.vector.view(), &features.data);
            input.slice_mut(s![next, .., ..]).assign(&cos);
            next += 1;
            Some(cos)
        } else {
            None
        };
        if let Some(p) = prior {
            if p.dim() != (h, w) {
                return Err(invalid("prior mask does not match feature grid"));
            }
            input.slice_mut(s![next, .., ..]).assign(&p);
        }
        let (mut hidden, conv1) = self.conv1.forward(input.view())?;
        relu(&mut hidden);
        let (coarse, conv2) = self.conv2.forward(hidden.view())?;
        let logits = self.upsample.forward(coarse.view());
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(QsrError::NonFinite { term: "decoder logits".into() });
        }
        let cache = DecodeCache {
            prototype: prototype.vector.clone(),
            features: features.data.clone(),
            cosine,
            conv1,
            hidden,
            conv2,
        };
        Ok((MaskLogits { logits }, cache))
    }

    pub fn decode(&self, prototype: &Prototype<T>, features: &FeatureMap<T>) -> Result<MaskLogits<T>> {
        Ok(self.forward(prototype, features, None)?.0)
    }

    /// Accumulates parameter gradients and returns `(∂L/∂prototype, ∂L/∂features)`.
    pub fn backward(&mut self, cache: &DecodeCache<T>, d_logits: &Array3<T>) -> (Array1<T>, Array3<T>) {
        let d = self.config.d;
        let d_coarse = self.upsample.backward(d_logits.view());
        let mut d_hidden = self.conv2.backward(&cache.conv2, d_coarse.view(), true).expect("dx requested");
        relu_backward(&cache.hidden, &mut d_hidden);
        let d_input = self.conv1.backward(&cache.conv1, d_hidden.view(), true).expect("dx requested");
        let mut d_proto = d_input.slice(s![..d, .., ..]).sum_axis(Axis(2)).sum_axis(Axis(1));
        let mut d_feat = d_input.slice(s![d..2 * d, .., ..]).to_owned();
        if let Some(cos) = &cache.cosine {
            let g = d_input.index_axis(Axis(0), 2 * d);
            let p = cache.prototype.view();
            let pn = p.dot(&p).sqrt();
            let eps = T::lit(COS_EPS);
            for ((i, j), &gij) in g.indexed_iter() {
                let f = cache.features.slice(s![.., i, j]);
                let fnorm = f.dot(&f).sqrt();
                let n = pn * fnorm;
                let c = cos[[i, j]];
                if n >= eps {
                    d_proto.scaled_add(gij / n, &f);
                    d_proto.scaled_add(-gij * c / (pn * pn), &p);
                    let mut df = d_feat.slice_mut(s![.., i, j]);
                    df.scaled_add(gij / n, &p);
                    df.scaled_add(-gij * c / (fnorm * fnorm), &f);
                } else {
                    d_proto.scaled_add(gij / eps, &f);
                    d_feat.slice_mut(s![.., i, j]).scaled_add(gij / eps, &p);
                }
            }
        }
        (d_proto, d_feat)
    }
}

impl<T: Scalar> Parameterized<T> for Decoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

fn check_target(logits: &MaskLogits<impl Scalar>, target: ArrayView2<'_, u8>) -> Result<()> {
    let (c, h, w) = logits.logits.dim();
    if c != 2 || target.dim() != (h, w) {
        return Err(invalid(format!("logits {:?} vs mask {:?}", logits.logits.dim(), target.dim())));
    }
    if target.iter().any(|&v| v > 1) {
        return Err(invalid("target mask must be binary"));
    }
    Ok(())
}

/// Mean per-pixel two-class cross-entropy and its logit gradient.
pub fn pixel_cross_entropy<T: Scalar>(logits: &MaskLogits<T>, target: ArrayView2<'_, u8>) -> Result<(T, Array3<T>)> {
    check_target(logits, target)?;
    let (_, h, w) = logits.logits.dim();
    let scale = T::lit(1.0 / (h * w) as f64);
    let mut grad = Array3::<T>::zeros((2, h, w));
    let mut total = T::zero();
    for ((i, j), &t) in target.indexed_iter() {
        let (z0, z1) = (logits.logits[[0, i, j]], logits.logits[[1, i, j]]);
        let m = z0.max(z1);
        let lse = ((z0 - m).exp() + (z1 - m).exp()).ln() + m;
        let zt = if t == 1 { z1 } else { z0 };
        total += lse - zt;
        let p1 = (z1 - lse).exp();
        let p0 = (z0 - lse).exp();
        grad[[0, i, j]] = (p0 - if t == 0 { T::one() } else { T::zero() }) * scale;
        grad[[1, i, j]] = (p1 - if t == 1 { T::one() } else { T::zero() }) * scale;
    }
    Ok((total * scale, grad))
}

/// Foreground prediction against the query mask.
pub fn foreground_loss<T: Scalar>(logits: &MaskLogits<T>, query_mask: ArrayView2<'_, u8>) -> Result<T> {
    Ok(pixel_cross_entropy(logits, query_mask)?.0)
}

pub fn complement(mask: ArrayView2<'_, u8>) -> Array2<u8> {
    mask.mapv(|v| 1 - v.min(1))
}

/// Background prediction against the complement of the query mask.
pub fn background_loss<T: Scalar>(logits: &MaskLogits<T>, query_mask: ArrayView2<'_, u8>) -> Result<T> {
    check_target(logits, query_mask)?;
    foreground_loss(logits, complement(query_mask).view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::PrototypeKind;

    fn cfg(cos: bool) -> DecoderConfig {
        DecoderConfig { d: 4, hidden: 5, cosine_channel: cos, prior_channel: false, grid: (4, 4), image: (16, 16) }
    }

    #[test]
    fn output_matches_image_size_and_is_finite_on_zeros() {
        for cos in [false, true] {
            let dec = Decoder::<f64>::new(cfg(cos), 1).unwrap();
            let p = Prototype::new(Array1::zeros(4), PrototypeKind::Foreground);
            let f = FeatureMap { data: Array3::zeros((4, 4, 4)), spatial_scale: 4 };
            let out = dec.decode(&p, &f).unwrap();
            assert_eq!(out.hw(), (16, 16));
            assert!(out.logits.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let dec = Decoder::<f64>::new(cfg(false), 1).unwrap();
        let p = Prototype::new(Array1::zeros(3), PrototypeKind::Foreground);
        let f = FeatureMap { data: Array3::zeros((4, 4, 4)), spatial_scale: 4 };
        assert!(dec.decode(&p, &f).is_err());
        let prior = Array2::<f64>::zeros((4, 4));
        let p4 = Prototype::new(Array1::zeros(4), PrototypeKind::Foreground);
        assert!(dec.forward(&p4, &f, Some(prior.view())).is_err());
    }

    #[test]
    fn saturated_and_uniform_losses() {
        let mask = Array2::from_shape_fn((4, 4), |(i, j)| ((i + j) % 2) as u8);
        let saturated = MaskLogits {
            logits: Array3::from_shape_fn((2, 4, 4), |(c, i, j)| if c == mask[[i, j]] as usize { 20.0 } else { 0.0 }),
        };
        assert!(foreground_loss(&saturated, mask.view()).unwrap() < 1e-8);
        assert!(background_loss(&saturated, complement(mask.view()).view()).unwrap() < 1e-8);
        let zeros = MaskLogits { logits: Array3::<f64>::zeros((2, 4, 4)) };
        assert!((foreground_loss(&zeros, mask.view()).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(foreground_loss(&zeros, Array2::zeros((3, 4)).view()).is_err());
    }

    #[test]
    fn predicted_mask_is_argmax() {
        let logits = MaskLogits { logits: Array3::from_shape_vec((2, 1, 3), vec![1.0, 0.0, 2.0, 0.0, 1.0, 2.0]).unwrap() };
        assert_eq!(logits.predicted_mask(), ndarray::array![[0u8, 1, 0]]);
    }
}
