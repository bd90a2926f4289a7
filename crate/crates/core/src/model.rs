//! The inference-time network: encoder plus prototype decoder.

use ndarray::ArrayView3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_synth::feature_mask;
use crate::decoder::{Decoder, DecoderConfig, MaskLogits};
use crate::encoder::{Branch, Encoder, EncoderConfig, FeatureMap};
use crate::error::{invalid, Result};
use crate::nn::{join, Param, Parameterized};
use crate::prototypes::{fuse_support_prototypes, masked_average_pool, Prototype};
use crate::rng::derive_seed;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder_hidden: usize,
    pub cosine_channel: bool,
    pub prior_channel: bool,
    pub image_size: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder_hidden: 64,
            cosine_channel: false,
            prior_channel: false,
            image_size: (64, 64),
        }
    }
}

impl ModelConfig {
    pub fn d(&self) -> usize {
        self.encoder.d
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.encoder.spatial_scale();
        (self.image_size.0 / s, self.image_size.1 / s)
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            d: self.d(),
            hidden: self.decoder_hidden,
            cosine_channel: self.cosine_channel,
            prior_channel: self.prior_channel,
            grid: self.grid(),
            image: self.image_size,
        }
    }

    /// Hash over architecture fields only; freezing does not change it.
    pub fn config_hash(&self) -> String {
        let arch = serde_json::json!({
            "stage_channels": self.encoder.stage_channels,
            "d": self.encoder.d,
            "fusion_mode": self.encoder.fusion_mode,
            "decoder_hidden": self.decoder_hidden,
            "cosine_channel": self.cosine_channel,
            "prior_channel": self.prior_channel,
            "image_size": self.image_size,
        });
        let digest = Sha256::digest(arch.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug)]
pub struct FssModel<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> FssModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (h, w) = config.image_size;
        let s = config.encoder.spatial_scale();
        if h % s != 0 || w % s != 0 {
            return Err(invalid(format!("image size {h}x{w} must be divisible by {s}")));
        }
        let encoder = Encoder::new(config.encoder.clone(), derive_seed(seed, "encoder"))?;
        let decoder = Decoder::new(config.decoder_config(), derive_seed(seed, "decoder"))?;
        Ok(Self { config, encoder, decoder })
    }

    /// Foreground prototype averaged over `k` supports.
    pub fn support_prototype(&self, supports: &[(ArrayView3<'_, T>, ndarray::ArrayView2<'_, u8>)]) -> Result<Prototype<T>> {
        let protos = supports
            .iter()
            .map(|(img, mask)| {
                let f = self.encoder.encode(*img, Branch::Support)?;
                let m = feature_mask(*mask, f.grid())?;
                masked_average_pool(&f, m.view())
            })
            .collect::<Result<Vec<_>>>()?;
        fuse_support_prototypes(&protos)
    }

    pub fn query_features(&self, query: ArrayView3<'_, T>) -> Result<FeatureMap<T>> {
        self.encoder.encode(query, Branch::Query)
    }

    /// Test-time path: only the foreground prototype is decoded.
    pub fn predict(
        &self,
        supports: &[(ArrayView3<'_, T>, ndarray::ArrayView2<'_, u8>)],
        query: ArrayView3<'_, T>,
    ) -> Result<MaskLogits<T>> {
        let p_f = self.support_prototype(supports)?;
        let f_q = self.query_features(query)?;
        self.decoder.decode(&p_f, &f_q)
    }
}

impl<T: Scalar> Parameterized<T> for FssModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}
