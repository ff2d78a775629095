//! Checkpoints: a safetensors archive of named f64 tensors next to a TOML
//! sidecar holding the model and feature configuration.
//!
//! `model.safetensors` is paired with `model.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::baseline_nets::{init_blstm, BlstmCountConfig, BlstmCountParams};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::model::{CountModel, ForwardTrace, Head};
use crate::nn::{Mat, ParamSet};
use crate::sylnet::{init_params, SylNetConfig, SylNetParams};
use crate::training::{adapt, Sample, TrainConfig, TrainLog};

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Sylnet(SylNetConfig),
    BlstmCount(BlstmCountConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Includes the training-time `normalize` choice.
    pub features: FeatureConfig,
}

/// Either counting network, for code that handles both.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Sylnet(SylNetParams),
    BlstmCount(BlstmCountParams),
}

impl AnyModel {
    pub fn config(&self) -> ModelConfig {
        match self {
            AnyModel::Sylnet(p) => ModelConfig::Sylnet(p.config.clone()),
            AnyModel::BlstmCount(p) => ModelConfig::BlstmCount(p.config.clone()),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Sylnet(_) => "sylnet",
            AnyModel::BlstmCount(_) => "blstm_count",
        }
    }

    pub fn head(&self) -> Head {
        match self {
            AnyModel::Sylnet(p) => p.head(),
            AnyModel::BlstmCount(p) => p.head(),
        }
    }

    pub fn forward(&self, features: &Mat) -> Result<ForwardTrace> {
        match self {
            AnyModel::Sylnet(p) => p.forward(features),
            AnyModel::BlstmCount(p) => p.forward(features),
        }
    }

    pub fn predict_count(&self, features: &Mat) -> Result<f64> {
        Ok(self.head().decode(self.forward(features)?.final_estimate()))
    }

    pub fn adapt(&self, set: &[Sample], config: &TrainConfig) -> Result<(AnyModel, TrainLog)> {
        Ok(match self {
            AnyModel::Sylnet(p) => {
                let (m, log) = adapt(p, set, config)?;
                (AnyModel::Sylnet(m), log)
            }
            AnyModel::BlstmCount(p) => {
                let (m, log) = adapt(p, set, config)?;
                (AnyModel::BlstmCount(m), log)
            }
        })
    }

    fn tensors(&self) -> Vec<(String, &Mat)> {
        match self {
            AnyModel::Sylnet(p) => p.tensors(),
            AnyModel::BlstmCount(p) => p.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        match self {
            AnyModel::Sylnet(p) => p.tensors_mut(),
            AnyModel::BlstmCount(p) => p.tensors_mut(),
        }
    }
}

impl From<SylNetParams> for AnyModel {
    fn from(p: SylNetParams) -> Self {
        AnyModel::Sylnet(p)
    }
}

impl From<BlstmCountParams> for AnyModel {
    fn from(p: BlstmCountParams) -> Self {
        AnyModel::BlstmCount(p)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, model: &AnyModel, features: &FeatureConfig) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = model
        .tensors()
        .into_iter()
        .map(|(name, t)| {
            let data = t.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name, data, t.shape().to_vec())
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, data, shape)| {
            TensorView::new(Dtype::F64, shape.clone(), data)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("{name}: {e:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let archive = safetensors::serialize(views, &None).map_err(|e| Error::Checkpoint(format!("{e:?}")))?;
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        model: model.config(),
        features: features.clone(),
    };
    let text = toml::to_string(&sidecar).map_err(|e| Error::Serde(e.to_string()))?;
    write_atomic(&sidecar_path(path), text.as_bytes())?;
    write_atomic(path, &archive)
}

pub fn load_sidecar(path: &Path) -> Result<Sidecar> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar =
        toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", side.display())))?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} (expected {FORMAT_VERSION})",
            side.display(),
            sidecar.format_version
        )));
    }
    sidecar.features.validate()?;
    Ok(sidecar)
}

/// Loads a checkpoint, validating every tensor's presence, dtype and shape
/// against the sidecar configuration.
pub fn load_checkpoint(path: &Path) -> Result<(AnyModel, FeatureConfig)> {
    let sidecar = load_sidecar(path)?;
    let mut model = match &sidecar.model {
        ModelConfig::Sylnet(c) => AnyModel::Sylnet(init_params(c, 0)?),
        ModelConfig::BlstmCount(c) => AnyModel::BlstmCount(init_blstm(c, 0)?),
    };
    let input_dim = match &sidecar.model {
        ModelConfig::Sylnet(c) => c.input_dim,
        ModelConfig::BlstmCount(c) => c.input_dim,
    };
    if input_dim != sidecar.features.n_mels {
        return Err(Error::Checkpoint(format!(
            "model expects {input_dim} input bands but the feature config produces {}",
            sidecar.features.n_mels
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let archive = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e:?}", path.display())))?;
    let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    if archive.names().len() != names.len() {
        return Err(Error::Checkpoint(format!(
            "{} holds {} tensors, config implies {}",
            path.display(),
            archive.names().len(),
            names.len()
        )));
    }
    for (name, slot) in names.iter().zip(model.tensors_mut()) {
        let view = archive
            .tensor(name)
            .map_err(|_| Error::Checkpoint(format!("{}: missing tensor {name}", path.display())))?;
        if view.dtype() != Dtype::F64 || view.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored {:?} {:?}, config implies F64 {:?}",
                view.dtype(),
                view.shape(),
                slot.shape()
            )));
        }
        let values = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        slot.iter_mut().zip(values).for_each(|(d, v)| *d = v);
    }
    Ok((model, sidecar.features))
}
