//! Shared convolutional trunk and the mid/late feature fusion layer.
//!
//! The trunk has four stages with strides 2, 2, 2 and 1; the last stage is
//! dilated so the mid (stage 3) and late (stage 4) maps share a grid. The
//! two maps are concatenated and fused into `d` channels, either by one
//! 3×3 convolution shared by both branches or by two independent 1×1
//! convolutions (one per branch).

use std::collections::BTreeSet;

use ndarray::{concatenate, s, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, QsrError, Result};
use crate::nn::{join, relu, relu_backward, Conv2d, ConvCache, Param, Parameterized};
use crate::scalar::Scalar;

pub const STAGE_NAMES: [&str; 4] = ["stage1", "stage2", "stage3", "stage4"];
pub const FUSION_NAME: &str = "fusion";

/// `d × h × w` activations plus the image-to-grid ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Array3<T>,
    pub spatial_scale: usize,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(QsrError::NonFinite { term: what.to_string() })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Shared3x3,
    Independent1x1,
}

impl std::str::FromStr for FusionMode {
    type Err = QsrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared-3x3" => Ok(Self::Shared3x3),
            "independent-1x1" => Ok(Self::Independent1x1),
            other => Err(invalid(format!("unknown fusion mode `{other}` (shared-3x3 | independent-1x1)"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Shared3x3 => "shared-3x3",
            Self::Independent1x1 => "independent-1x1",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Branch {
    Support,
    Query,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stage_channels: [usize; 4],
    pub d: usize,
    pub fusion_mode: FusionMode,
    pub frozen_stages: BTreeSet<String>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64, 64],
            d: 64,
            fusion_mode: FusionMode::Shared3x3,
            frozen_stages: BTreeSet::new(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.stage_channels.contains(&0) {
            return Err(invalid("encoder channel counts must be positive"));
        }
        for name in &self.frozen_stages {
            if !STAGE_NAMES.contains(&name.as_str()) && name != FUSION_NAME {
                return Err(invalid(format!("unknown stage `{name}` in frozen_stages")));
            }
        }
        Ok(())
    }

    /// Total stride of the trunk.
    pub fn spatial_scale(&self) -> usize {
        8
    }
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum Fusion<T> {
    Shared(Conv2d<T>),
    Independent { support: Conv2d<T>, query: Conv2d<T> },
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    stages: Vec<Conv2d<T>>,
    fusion: Fusion<T>,
}

/// Saved trunk activations for backprop through unfrozen stages.
#[derive(Clone, Debug)]
pub struct TrunkCache<T> {
    start: usize,
    convs: Vec<ConvCache<T>>,
    outputs: Vec<Array3<T>>,
}

#[derive(Clone, Debug)]
pub struct FusionCache<T> {
    conv: ConvCache<T>,
    output: Array3<T>,
    mid_channels: usize,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: EncoderConfig, rng_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let [c1, c2, c3, c4] = config.stage_channels;
        let mut stages = vec![
            Conv2d::new(3, c1, 3, 2, 1, 1, &mut rng),
            Conv2d::new(c1, c2, 3, 2, 1, 1, &mut rng),
            Conv2d::new(c2, c3, 3, 2, 1, 1, &mut rng),
            Conv2d::new(c3, c4, 3, 1, 2, 2, &mut rng),
        ];
        let fusion = match config.fusion_mode {
            FusionMode::Shared3x3 => Fusion::Shared(Conv2d::new(c3 + c4, config.d, 3, 1, 1, 1, &mut rng)),
            FusionMode::Independent1x1 => Fusion::Independent {
                support: Conv2d::new(c3 + c4, config.d, 1, 1, 0, 1, &mut rng),
                query: Conv2d::new(c3 + c4, config.d, 1, 1, 0, 1, &mut rng),
            },
        };
        for (stage, name) in stages.iter_mut().zip(STAGE_NAMES) {
            stage.set_frozen(config.frozen_stages.contains(name));
        }
        let mut enc = Self { config, stages, fusion };
        let freeze_fusion = enc.config.frozen_stages.contains(FUSION_NAME);
        enc.fusion_convs_mut().into_iter().for_each(|c| c.set_frozen(freeze_fusion));
        Ok(enc)
    }

    fn fusion_convs_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        match &mut self.fusion {
            Fusion::Shared(c) => vec![c],
            Fusion::Independent { support, query } => vec![support, query],
        }
    }

    fn fusion_conv(&self, branch: Branch) -> &Conv2d<T> {
        match (&self.fusion, branch) {
            (Fusion::Shared(c), _) => c,
            (Fusion::Independent { support, .. }, Branch::Support) => support,
            (Fusion::Independent { query, .. }, Branch::Query) => query,
        }
    }

    fn fusion_conv_mut(&mut self, branch: Branch) -> &mut Conv2d<T> {
        match (&mut self.fusion, branch) {
            (Fusion::Shared(c), _) => c,
            (Fusion::Independent { support, .. }, Branch::Support) => support,
            (Fusion::Independent { query, .. }, Branch::Query) => query,
        }
    }

    /// Freezes (or unfreezes) the named stages in place.
    pub fn set_frozen_stages(&mut self, names: &BTreeSet<String>) -> Result<()> {
        let cfg = EncoderConfig { frozen_stages: names.clone(), ..self.config.clone() };
        cfg.validate()?;
        for (stage, name) in self.stages.iter_mut().zip(STAGE_NAMES) {
            stage.set_frozen(names.contains(name));
        }
        let f = names.contains(FUSION_NAME);
        self.fusion_convs_mut().into_iter().for_each(|c| c.set_frozen(f));
        self.config.frozen_stages = names.clone();
        Ok(())
    }

    pub fn trunk_frozen(&self) -> bool {
        STAGE_NAMES.iter().all(|n| self.config.frozen_stages.contains(*n))
    }

    fn normalize(image: ArrayView3<'_, T>) -> Result<Array3<T>> {
        if image.dim().0 != 3 {
            return Err(invalid(format!("expected a 3-channel image, got {}", image.dim().0)));
        }
        let (_, h, w) = image.dim();
        if h % 8 != 0 || w % 8 != 0 || h < 16 || w < 16 {
            return Err(invalid(format!("image {h}x{w} must be a multiple of 8 and at least 16")));
        }
        Ok(image.mapv(|v| v - T::lit(0.5)))
    }

    /// Number of leading trunk stages that are frozen.
    pub fn frozen_prefix_len(&self) -> usize {
        self.stages.iter().take_while(|s| s.weight.frozen).count()
    }

    /// Normalized image through stages `[0, n)`, without saved activations.
    pub fn trunk_prefix(&self, image: ArrayView3<'_, T>, n: usize) -> Result<Array3<T>> {
        let mut x = Self::normalize(image)?;
        for stage in &self.stages[..n.min(4)] {
            let (mut y, _) = stage.forward(x.view())?;
            relu(&mut y);
            x = y;
        }
        Ok(x)
    }

    /// Runs stages `[start, 4)` on `input`, the output of stage `start - 1`
    /// (or the normalized image when `start == 0`). `start` is at most 3.
    pub fn trunk_forward_from(&self, start: usize, input: Array3<T>) -> Result<(FeatureMap<T>, FeatureMap<T>, TrunkCache<T>)> {
        if start > 3 {
            return Err(invalid("trunk_forward_from needs start <= 3"));
        }
        let mut x = input;
        let mut convs = Vec::with_capacity(4 - start);
        let mut outputs = Vec::with_capacity(4 - start);
        let mut mid = if start == 3 { Some(x.clone()) } else { None };
        for (idx, stage) in self.stages.iter().enumerate().skip(start) {
            let (mut y, cache) = stage.forward(x.view())?;
            relu(&mut y);
            convs.push(cache);
            if idx == 2 {
                mid = Some(y.clone());
            }
            outputs.push(y.clone());
            x = y;
        }
        let scale = self.config.spatial_scale();
        let mid = FeatureMap { data: mid.expect("stage3 output"), spatial_scale: scale };
        let late = FeatureMap { data: x, spatial_scale: scale };
        mid.ensure_finite("stage3 features")?;
        late.ensure_finite("stage4 features")?;
        Ok((mid, late, TrunkCache { start, convs, outputs }))
    }

    /// Trunk forward with saved activations.
    pub fn trunk_forward(&self, image: ArrayView3<'_, T>) -> Result<(FeatureMap<T>, FeatureMap<T>, TrunkCache<T>)> {
        self.trunk_forward_from(0, Self::normalize(image)?)
    }

    /// Mid (stage 3) and late (stage 4) maps; equal spatial size.
    pub fn extract_stage_features(&self, image: ArrayView3<'_, T>) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
        let (mid, late, _) = self.trunk_forward(image)?;
        Ok((mid, late))
    }

    /// Back-propagates into unfrozen trunk stages covered by `cache`.
    pub fn trunk_backward(&mut self, cache: &TrunkCache<T>, d_mid: &Array3<T>, d_late: &Array3<T>) {
        let lowest_trainable = self.stages.iter().position(|s| !s.weight.frozen);
        let Some(lowest) = lowest_trainable else { return };
        let lowest = lowest.max(cache.start);
        let mut grad = d_late.clone();
        for idx in (lowest..4).rev() {
            let local = idx - cache.start;
            relu_backward(&cache.outputs[local], &mut grad);
            let dx = self.stages[idx].backward(&cache.convs[local], grad.view(), idx > lowest);
            match dx {
                Some(mut dx) => {
                    if idx == 3 {
                        dx += d_mid;
                    }
                    grad = dx;
                }
                None => break,
            }
        }
    }

    pub fn fuse_forward(&self, mid: &FeatureMap<T>, late: &FeatureMap<T>, branch: Branch) -> Result<(FeatureMap<T>, FusionCache<T>)> {
        if mid.grid() != late.grid() {
            return Err(invalid(format!("mid grid {:?} and late grid {:?} differ", mid.grid(), late.grid())));
        }
        let cat = concatenate(Axis(0), &[mid.data.view(), late.data.view()]).expect("aligned concat");
        let (mut y, conv) = self.fusion_conv(branch).forward(cat.view())?;
        relu(&mut y);
        let out = FeatureMap { data: y.clone(), spatial_scale: mid.spatial_scale };
        out.ensure_finite("fused features")?;
        Ok((out, FusionCache { conv, output: y, mid_channels: mid.channels() }))
    }

    pub fn fuse_features(&self, mid: &FeatureMap<T>, late: &FeatureMap<T>, branch: Branch) -> Result<FeatureMap<T>> {
        Ok(self.fuse_forward(mid, late, branch)?.0)
    }

    /// Accumulates fusion gradients; returns `(d_mid, d_late)` when asked.
    pub fn fuse_backward(
        &mut self,
        cache: &FusionCache<T>,
        d_out: &Array3<T>,
        branch: Branch,
        need_input_grad: bool,
    ) -> Option<(Array3<T>, Array3<T>)> {
        let mut grad = d_out.clone();
        relu_backward(&cache.output, &mut grad);
        let dx = self.fusion_conv_mut(branch).backward(&cache.conv, grad.view(), need_input_grad)?;
        let m = cache.mid_channels;
        Some((dx.slice(s![..m, .., ..]).to_owned(), dx.slice(s![m.., .., ..]).to_owned()))
    }

    /// Full forward: trunk then fusion.
    pub fn encode(&self, image: ArrayView3<'_, T>, branch: Branch) -> Result<FeatureMap<T>> {
        let (mid, late) = self.extract_stage_features(image)?;
        self.fuse_features(&mid, &late, branch)
    }

    pub fn late_channels(&self) -> usize {
        self.config.stage_channels[3]
    }
}

impl<T: Scalar> Parameterized<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (stage, name) in self.stages.iter().zip(STAGE_NAMES) {
            stage.visit(&join(prefix, name), f);
        }
        match &self.fusion {
            Fusion::Shared(c) => c.visit(&join(prefix, "fusion.shared"), f),
            Fusion::Independent { support, query } => {
                support.visit(&join(prefix, "fusion.support"), f);
                query.visit(&join(prefix, "fusion.query"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (stage, name) in self.stages.iter_mut().zip(STAGE_NAMES) {
            stage.visit_mut(&join(prefix, name), f);
        }
        match &mut self.fusion {
            Fusion::Shared(c) => c.visit_mut(&join(prefix, "fusion.shared"), f),
            Fusion::Independent { support, query } => {
                support.visit_mut(&join(prefix, "fusion.support"), f);
                query.visit_mut(&join(prefix, "fusion.query"), f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: usize) -> Array3<f64> {
        Array3::from_shape_fn((3, 64, 64), |(c, i, j)| ((c * 7 + i * 13 + j * 29 + seed) % 17) as f64 / 16.0)
    }

    #[test]
    fn stage_maps_share_grid() {
        let enc = Encoder::<f64>::new(EncoderConfig::default(), 1).unwrap();
        let (mid, late) = enc.extract_stage_features(image(0).view()).unwrap();
        assert_eq!(mid.grid(), late.grid());
        assert_eq!(mid.grid(), (8, 8));
        let fused = enc.fuse_features(&mid, &late, Branch::Query).unwrap();
        assert_eq!(fused.channels(), 64);
    }

    #[test]
    fn zero_image_is_finite() {
        let enc = Encoder::<f32>::new(EncoderConfig::default(), 2).unwrap();
        let f = enc.encode(Array3::zeros((3, 64, 64)).view(), Branch::Support).unwrap();
        assert!(f.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shared_fusion_is_branch_agnostic() {
        let enc = Encoder::<f64>::new(EncoderConfig::default(), 3).unwrap();
        let (mid, late) = enc.extract_stage_features(image(1).view()).unwrap();
        assert_eq!(
            enc.fuse_features(&mid, &late, Branch::Support).unwrap(),
            enc.fuse_features(&mid, &late, Branch::Query).unwrap()
        );
    }

    #[test]
    fn independent_fusion_differs_per_branch() {
        let cfg = EncoderConfig { fusion_mode: FusionMode::Independent1x1, ..EncoderConfig::default() };
        let enc = Encoder::<f64>::new(cfg, 3).unwrap();
        let (mid, late) = enc.extract_stage_features(image(1).view()).unwrap();
        let a = enc.fuse_features(&mid, &late, Branch::Support).unwrap();
        let b = enc.fuse_features(&mid, &late, Branch::Query).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.channels(), 64);
    }

    #[test]
    fn misaligned_fusion_rejected() {
        let enc = Encoder::<f64>::new(EncoderConfig::default(), 3).unwrap();
        let mid = FeatureMap { data: Array3::zeros((64, 8, 8)), spatial_scale: 8 };
        let late = FeatureMap { data: Array3::zeros((64, 4, 4)), spatial_scale: 16 };
        assert!(enc.fuse_features(&mid, &late, Branch::Query).is_err());
    }

    #[test]
    fn unknown_frozen_stage_rejected() {
        let cfg = EncoderConfig { frozen_stages: ["stage9".to_string()].into(), ..EncoderConfig::default() };
        assert!(Encoder::<f64>::new(cfg, 0).is_err());
    }

    #[test]
    fn prefix_then_rest_matches_full_trunk() {
        let enc = Encoder::<f64>::new(EncoderConfig::default(), 4).unwrap();
        let img = image(2);
        let (mid, late) = enc.extract_stage_features(img.view()).unwrap();
        for start in 0..4 {
            let x = enc.trunk_prefix(img.view(), start).unwrap();
            let (m, l, _) = enc.trunk_forward_from(start, x).unwrap();
            assert_eq!(m, mid);
            assert_eq!(l, late);
        }
    }
}
