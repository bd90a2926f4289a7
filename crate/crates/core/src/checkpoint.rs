//! Checkpoint files: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header (tensor names, shapes, config hash) and the tensor data as
//! little-endian `f64`.
//!
//! Training checkpoints carry the class weights; inference checkpoints
//! never do.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{QsrError, Result};
use crate::model::{FssModel, ModelConfig};
use crate::nn::Parameterized;
use crate::qsr::ClassWeights;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"QSRCKPT1";
const CLASS_WEIGHTS: &str = "qsr.class_weights";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Training,
    Inference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeightsMeta {
    pub n_known: usize,
    pub n_latent: usize,
    pub known_class_ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub dtype: String,
    pub config_hash: String,
    pub model: ModelConfig,
    pub class_weights: Option<ClassWeightsMeta>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &FssModel<T>, class_weights: Option<(&ClassWeights<T>, &[u32])>) -> Self {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        let mut push = |name: &str, value: &ArrayD<T>| {
            tensors.push(TensorEntry { name: name.to_string(), shape: value.shape().to_vec(), offset: data.len() });
            data.extend(value.iter().map(|v| v.to_f64_lossy()));
        };
        model.visit("", &mut |name, p| push(name, &p.value));
        let meta = class_weights.map(|(w, ids)| {
            push(CLASS_WEIGHTS, &w.weights.value);
            ClassWeightsMeta { n_known: w.n_known, n_latent: w.n_latent, known_class_ids: ids.to_vec() }
        });
        let kind = if meta.is_some() { CheckpointKind::Training } else { CheckpointKind::Inference };
        Self {
            header: CheckpointHeader {
                kind,
                dtype: T::DTYPE.to_string(),
                config_hash: model.config.config_hash(),
                model: model.config.clone(),
                class_weights: meta,
                tensors,
                metadata: BTreeMap::new(),
            },
            data,
        }
    }

    /// Drops class weights, producing the deployable checkpoint.
    pub fn to_inference(&self) -> Self {
        let mut header = self.header.clone();
        header.kind = CheckpointKind::Inference;
        header.class_weights = None;
        let mut data = Vec::new();
        header.tensors = self
            .header
            .tensors
            .iter()
            .filter(|t| t.name != CLASS_WEIGHTS)
            .map(|t| {
                let len: usize = t.shape.iter().product();
                let entry = TensorEntry { offset: data.len(), ..t.clone() };
                data.extend_from_slice(&self.data[t.offset..t.offset + len]);
                entry
            })
            .collect();
        Self { header, data }
    }

    pub fn param_count(&self) -> usize {
        self.header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum()
    }

    fn tensor<T: Scalar>(&self, name: &str) -> Result<ArrayD<T>> {
        let t = self
            .header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| QsrError::Checkpoint(format!("missing tensor `{name}`")))?;
        let len: usize = t.shape.iter().product();
        let slice = self
            .data
            .get(t.offset..t.offset + len)
            .ok_or_else(|| QsrError::Checkpoint(format!("tensor `{name}` truncated")))?;
        Ok(ArrayD::from_shape_vec(IxDyn(&t.shape), slice.iter().map(|&v| T::lit(v)).collect())
            .expect("shape matches length"))
    }

    /// Rebuilds the model; `expected` (when given) must hash identically.
    pub fn restore_model<T: Scalar>(&self, expected: Option<&ModelConfig>) -> Result<FssModel<T>> {
        if let Some(cfg) = expected {
            if cfg.config_hash() != self.header.config_hash {
                return Err(QsrError::Checkpoint(format!(
                    "config hash mismatch: checkpoint {} vs config {}",
                    self.header.config_hash,
                    cfg.config_hash()
                )));
            }
        }
        if self.header.model.config_hash() != self.header.config_hash {
            return Err(QsrError::Checkpoint("header config does not match its hash".into()));
        }
        let mut model = FssModel::<T>::new(self.header.model.clone(), 0)?;
        let mut err = None;
        model.visit_mut("", &mut |name, p| match self.tensor::<T>(name) {
            Ok(v) if v.shape() == p.value.shape() => p.value = v,
            Ok(v) => err = Some(QsrError::Checkpoint(format!("shape mismatch for `{name}`: {:?}", v.shape()))),
            Err(e) => err = Some(e),
        });
        match err {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }

    pub fn restore_class_weights<T: Scalar>(&self) -> Result<(ClassWeights<T>, Vec<u32>)> {
        let meta = self
            .header
            .class_weights
            .as_ref()
            .ok_or_else(|| QsrError::Checkpoint("checkpoint has no class weights (inference checkpoint?)".into()))?;
        let value = self.tensor::<T>(CLASS_WEIGHTS)?;
        Ok((
            ClassWeights { weights: crate::nn::Param::new(value), n_known: meta.n_known, n_latent: meta.n_latent },
            meta.known_class_ids.clone(),
        ))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(MAGIC)?;
        file.write_all(&(header.len() as u64).to_le_bytes())?;
        file.write_all(&header)?;
        for v in &self.data {
            file.write_all(&v.to_le_bytes())?;
        }
        file.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(QsrError::MissingPath(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(QsrError::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| QsrError::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let rest = &bytes[16 + hlen..];
        if rest.len() % 8 != 0 {
            return Err(QsrError::Checkpoint("tensor data not a whole number of f64".into()));
        }
        let data = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let ckpt = Self { header, data };
        if ckpt.param_count() != ckpt.data.len() {
            return Err(QsrError::Checkpoint("tensor table does not match data length".into()));
        }
        Ok(ckpt)
    }
}
