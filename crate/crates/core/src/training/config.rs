//! Training configuration and its flat `key = value` file format.
//!
//! One key per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys and malformed values are errors naming the key.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, FusionMode, FUSION_NAME, STAGE_NAMES};
use crate::error::{QsrError, Result};
use crate::model::ModelConfig;

/// Where the query prototype fed to QSR comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundSource {
    /// Global average of the query features.
    Query,
    /// Global average of the support features.
    Support,
}

/// How the background prototype is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeSource {
    /// Score against the class weights, drop the foreground, back-project.
    Qsr,
    /// Masked average of the query features under the ground-truth background.
    Mask,
}

impl FromStr for BackgroundSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "query" => Ok(Self::Query),
            "support" => Ok(Self::Support),
            _ => Err(format!("expected `query` or `support`, got `{s}`")),
        }
    }
}

impl FromStr for PrototypeSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "qsr" => Ok(Self::Qsr),
            "mask" => Ok(Self::Mask),
            _ => Err(format!("expected `qsr` or `mask`, got `{s}`")),
        }
    }
}

impl std::fmt::Display for BackgroundSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Query => "query",
            Self::Support => "support",
        })
    }
}

impl std::fmt::Display for PrototypeSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Qsr => "qsr",
            Self::Mask => "mask",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub n_latent: usize,
    pub k: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub poly_power: f64,
    /// Learning-rate multiplier for the class weights.
    pub wc_lr_mult: f64,
    /// Stops gradients from the query prototype into the encoder.
    pub detach_query: bool,
    pub bg_source: BackgroundSource,
    pub proto_source: PrototypeSource,
    /// Pretrain the trunk, then freeze `frozen_stages` and cache their output.
    pub two_phase: bool,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub frozen_stages: BTreeSet<String>,
    pub stage_channels: [usize; 4],
    pub d: usize,
    pub fusion_mode: FusionMode,
    pub decoder_hidden: usize,
    pub cosine_channel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            n_latent: 8,
            k: 1,
            epochs: 30,
            episodes_per_epoch: 40,
            batch_size: 4,
            base_lr: 0.0025,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            poly_power: 0.9,
            wc_lr_mult: 1.0,
            detach_query: false,
            bg_source: BackgroundSource::Query,
            proto_source: PrototypeSource::Qsr,
            two_phase: true,
            pretrain_epochs: 8,
            pretrain_lr: 0.02,
            pretrain_batch: 8,
            frozen_stages: ["stage1", "stage2", "stage3"].iter().map(|s| s.to_string()).collect(),
            stage_channels: [16, 32, 64, 64],
            d: 64,
            fusion_mode: FusionMode::Shared3x3,
            decoder_hidden: 64,
            cosine_channel: false,
        }
    }
}

fn bad(key: &str, message: impl Into<String>) -> QsrError {
    QsrError::Config { key: key.to_string(), message: message.into() }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value.parse().map_err(|e: V::Err| bad(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(bad(key, format!("expected a boolean, got `{value}`"))),
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 26] = [
        "alpha",
        "beta",
        "n_latent",
        "k",
        "epochs",
        "episodes_per_epoch",
        "batch_size",
        "base_lr",
        "momentum",
        "weight_decay",
        "seed",
        "poly_power",
        "wc_lr_mult",
        "detach_query",
        "bg_source",
        "proto_source",
        "two_phase",
        "pretrain_epochs",
        "pretrain_lr",
        "pretrain_batch",
        "frozen_stages",
        "stage_channels",
        "d",
        "fusion_mode",
        "decoder_hidden",
        "cosine_channel",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "n_latent" => self.n_latent = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "episodes_per_epoch" => self.episodes_per_epoch = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "poly_power" => self.poly_power = parse(key, v)?,
            "wc_lr_mult" => self.wc_lr_mult = parse(key, v)?,
            "detach_query" => self.detach_query = parse_bool(key, v)?,
            "bg_source" => self.bg_source = parse(key, v)?,
            "proto_source" => self.proto_source = parse(key, v)?,
            "two_phase" => self.two_phase = parse_bool(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "pretrain_batch" => self.pretrain_batch = parse(key, v)?,
            "frozen_stages" => {
                self.frozen_stages = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
            }
            "stage_channels" => {
                let parts = v.split(',').map(|p| parse::<usize>(key, p.trim())).collect::<Result<Vec<_>>>()?;
                self.stage_channels =
                    parts.try_into().map_err(|_| bad(key, "expected four comma-separated channel counts"))?;
            }
            "d" => self.d = parse(key, v)?,
            "fusion_mode" => self.fusion_mode = v.parse().map_err(|e: QsrError| bad(key, e.to_string()))?,
            "decoder_hidden" => self.decoder_hidden = parse(key, v)?,
            "cosine_channel" => self.cosine_channel = parse_bool(key, v)?,
            _ => return Err(bad(key, format!("unknown key; valid keys: {}", Self::KEYS.join(", ")))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(line, format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(QsrError::MissingPath(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("base_lr", self.base_lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("poly_power", self.poly_power),
            ("wc_lr_mult", self.wc_lr_mult),
            ("pretrain_lr", self.pretrain_lr),
        ];
        for (key, v) in non_negative {
            if !v.is_finite() || v < 0.0 {
                return Err(bad(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        let positive = [
            ("k", self.k),
            ("epochs", self.epochs),
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("batch_size", self.batch_size),
            ("pretrain_batch", self.pretrain_batch),
            ("d", self.d),
            ("decoder_hidden", self.decoder_hidden),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(bad(key, "must be positive"));
            }
        }
        if self.stage_channels.contains(&0) {
            return Err(bad("stage_channels", "channel counts must be positive"));
        }
        if self.momentum >= 1.0 {
            return Err(bad("momentum", "must be < 1"));
        }
        for s in &self.frozen_stages {
            if !STAGE_NAMES.contains(&s.as_str()) && s != FUSION_NAME {
                return Err(bad("frozen_stages", format!("unknown stage `{s}`")));
            }
        }
        Ok(())
    }

    /// Whether any QSR term contributes to the objective.
    pub fn qsr_enabled(&self) -> bool {
        self.alpha > 0.0 || self.beta > 0.0
    }

    pub fn total_steps(&self) -> usize {
        (self.epochs * self.episodes_per_epoch).div_ceil(self.batch_size)
    }

    pub fn total_episodes(&self) -> usize {
        self.total_steps() * self.batch_size
    }

    /// Architecture for `image_size` inputs. Freezing is applied by the
    /// training loop, not baked into the model config.
    pub fn model_config(&self, image_size: (usize, usize)) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                stage_channels: self.stage_channels,
                d: self.d,
                fusion_mode: self.fusion_mode,
                frozen_stages: BTreeSet::new(),
            },
            decoder_hidden: self.decoder_hidden,
            cosine_channel: self.cosine_channel,
            prior_channel: false,
            image_size,
        }
    }

    /// Canonical text form; parsing it returns an equal config.
    pub fn to_kv_string(&self) -> String {
        let stages: Vec<&str> = self.frozen_stages.iter().map(String::as_str).collect();
        let c = self.stage_channels;
        let mut out = String::new();
        let rows: [(&str, String); 26] = [
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("n_latent", self.n_latent.to_string()),
            ("k", self.k.to_string()),
            ("epochs", self.epochs.to_string()),
            ("episodes_per_epoch", self.episodes_per_epoch.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("poly_power", self.poly_power.to_string()),
            ("wc_lr_mult", self.wc_lr_mult.to_string()),
            ("detach_query", self.detach_query.to_string()),
            ("bg_source", self.bg_source.to_string()),
            ("proto_source", self.proto_source.to_string()),
            ("two_phase", self.two_phase.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("pretrain_batch", self.pretrain_batch.to_string()),
            ("frozen_stages", stages.join(",")),
            ("stage_channels", format!("{},{},{},{}", c[0], c[1], c[2], c[3])),
            ("d", self.d.to_string()),
            ("fusion_mode", self.fusion_mode.to_string()),
            ("decoder_hidden", self.decoder_hidden.to_string()),
            ("cosine_channel", self.cosine_channel.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.alpha, c.beta, c.momentum, c.weight_decay, c.poly_power), (1.0, 0.5, 0.9, 1e-4, 0.9));
        assert_eq!((c.epochs, c.batch_size, c.base_lr), (30, 4, 0.0025));
        c.validate().unwrap();
    }

    #[test]
    fn kv_round_trip() {
        let mut c = TrainConfig::default();
        c.set("bg_source", "support").unwrap();
        c.set("frozen_stages", "").unwrap();
        c.set("alpha", "0.25").unwrap();
        assert_eq!(TrainConfig::parse(&c.to_kv_string()).unwrap(), c);
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = TrainConfig::parse("# header\n\nbeta = 0.1  # coco\nn_latent=60\n").unwrap();
        assert_eq!(c.beta, 0.1);
        assert_eq!(c.n_latent, 60);
    }

    #[test]
    fn errors_name_the_key() {
        for (text, key) in [
            ("alpah = 1", "alpha"),
            ("beta = -1", "beta"),
            ("k = two", "k"),
            ("fusion_mode = 5x5", "fusion_mode"),
            ("frozen_stages = stage7", "frozen_stages"),
        ] {
            let err = TrainConfig::parse(text).unwrap_err().to_string();
            let expect = if key == "alpha" { "alpah" } else { key };
            assert!(err.contains(expect), "{err}");
        }
        assert!(TrainConfig::parse("alpah = 1").unwrap_err().to_string().contains("alpha"));
    }
}
