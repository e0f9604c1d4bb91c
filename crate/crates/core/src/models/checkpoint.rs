use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, ModelConfig, ModelError};
use crate::numerics::{ParamSet, Tensor};
use crate::pruning::{MaskSet, PruningError};

const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";
const MASK_INDEX: &str = "masks.json";
const MASK_DATA: &str = "masks.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] PruningError),
}

/// Run state recorded next to the parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMetadata {
    pub recipe_hash: Option<String>,
    pub step: u64,
    pub achieved_sparsity: f64,
    pub validation_accuracy: Option<f64>,
}

/// Model configuration, parameters, optional masks and metadata.
///
/// On disk this is a directory holding `manifest.json`, `params.bin`
/// (little-endian f64, tensors concatenated in manifest order) and, when
/// masks are present, `masks.json` plus `masks.bin` (keep bits packed
/// LSB-first per tensor).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub masks: Option<MaskSet>,
    pub metadata: CheckpointMetadata,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    data_file: String,
    params: Vec<TensorEntry>,
    masks: Option<String>,
    metadata: CheckpointMetadata,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskIndex {
    data_file: String,
    level: f64,
    tensors: Vec<MaskEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CheckpointError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| CheckpointError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CheckpointError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| CheckpointError::Json {
        path: path.to_path_buf(),
        source,
    })
}

impl Checkpoint {
    pub fn new(model: Model, masks: Option<MaskSet>, metadata: CheckpointMetadata) -> Result<Self, CheckpointError> {
        let ckpt = Self {
            model,
            masks,
            metadata,
        };
        ckpt.check_masks()?;
        Ok(ckpt)
    }

    fn check_masks(&self) -> Result<(), CheckpointError> {
        let Some(masks) = &self.masks else {
            return Ok(());
        };
        let params = self.model.params();
        for (i, name) in masks.names().iter().enumerate() {
            let t = params
                .get(name)
                .ok_or_else(|| CheckpointError::Invalid(format!("mask for unknown parameter `{name}`")))?;
            if t.shape() != masks.shape(i) {
                return Err(CheckpointError::Invalid(format!(
                    "mask shape {:?} does not match `{name}` {:?}",
                    masks.shape(i),
                    t.shape()
                )));
            }
            for (w, &k) in t.data().iter().zip(masks.keep(i)) {
                if !k && w.to_bits() != 0 {
                    return Err(CheckpointError::Invalid(format!(
                        "masked entry of `{name}` is {w}, not +0.0"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes the checkpoint directory, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        self.check_masks()?;
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut bytes = Vec::with_capacity(self.model.params().count() * 8);
        let mut entries = Vec::new();
        for (name, t) in self.model.params().iter() {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset: bytes.len(),
                length: t.numel() * 8,
            });
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let path = dir.join(PARAMS);
        fs::write(&path, &bytes).map_err(io_err(&path))?;

        let masks = match &self.masks {
            Some(m) => {
                let (packed, offsets) = m.pack();
                let path = dir.join(MASK_DATA);
                fs::write(&path, &packed).map_err(io_err(&path))?;
                let index = MaskIndex {
                    data_file: MASK_DATA.into(),
                    level: m.level(),
                    tensors: m
                        .names()
                        .iter()
                        .enumerate()
                        .map(|(i, n)| MaskEntry {
                            name: n.clone(),
                            shape: m.shape(i).to_vec(),
                            offset: offsets[i],
                        })
                        .collect(),
                };
                write_json(&dir.join(MASK_INDEX), &index)?;
                Some(MASK_INDEX.to_string())
            }
            None => None,
        };
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model: self.model.config().clone(),
            data_file: PARAMS.into(),
            params: entries,
            masks,
            metadata: self.metadata.clone(),
        };
        write_json(&dir.join(MANIFEST), &manifest)
    }

    /// Reads a checkpoint directory. Parameters come back trainable.
    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Invalid(format!(
                "unsupported format_version {}",
                manifest.format_version
            )));
        }
        let path = dir.join(&manifest.data_file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let mut params = ParamSet::new();
        for e in &manifest.params {
            if e.dtype != "f64" {
                return Err(CheckpointError::Invalid(format!("`{}` has dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if e.length != n * 8 {
                return Err(CheckpointError::Invalid(format!(
                    "`{}` length {} does not match shape {:?}",
                    e.name, e.length, e.shape
                )));
            }
            let raw = bytes.get(e.offset..e.offset + e.length).ok_or_else(|| {
                CheckpointError::Invalid(format!("`{}` extends past {}", e.name, manifest.data_file))
            })?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| CheckpointError::Invalid(format!("`{}`: {err}", e.name)))?;
            params
                .insert(e.name.clone(), t.with_requires_grad(true))
                .map_err(|err| CheckpointError::Invalid(err.to_string()))?;
        }
        let model = Model::from_params(manifest.model, params)?;

        let masks = match &manifest.masks {
            Some(file) => {
                let index: MaskIndex = read_json(&dir.join(file))?;
                let path = dir.join(&index.data_file);
                let packed = fs::read(&path).map_err(io_err(&path))?;
                let layout = index
                    .tensors
                    .into_iter()
                    .map(|e| (e.name, e.shape, e.offset))
                    .collect();
                Some(MaskSet::unpack(layout, &packed, index.level)?)
            }
            None => None,
        };
        Self::new(model, masks, manifest.metadata)
    }
}
