//! Checkpoints: a TOML manifest plus a blob of little-endian f64 values.
//!
//! The manifest at `<path>` names the blob (`<file name>.bin`, next to it)
//! and lists every tensor with its shape in blob order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{write_atomic, SynthConfig};
use crate::error::{Error, Result};
use crate::lstm::INIT_DESCRIPTION;
use crate::model::Model;
use crate::numeric::RNG_ID;
use crate::trainer::{Architecture, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "mmlstm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub modality: Option<usize>,
    pub d_x: Vec<usize>,
    pub d_h: usize,
    pub classes: usize,
    pub param_count: usize,
    pub init: String,
    pub rng: String,
    pub seed: u64,
    pub blob: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub synth: Option<SynthConfig>,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn for_model(model: &Model, seed: u64, train: Option<&TrainConfig>, synth: Option<&SynthConfig>, blob: String) -> Self {
        Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: model.architecture(),
            modality: model.modality(),
            d_x: model.d_x(),
            d_h: model.d_h(),
            classes: model.classes(),
            param_count: model.param_count(),
            init: INIT_DESCRIPTION.into(),
            rng: RNG_ID.into(),
            seed,
            blob,
            train: train.cloned(),
            synth: synth.cloned(),
            tensors: model
                .layout()
                .into_iter()
                .map(|(name, rows, cols)| TensorEntry { name, rows, cols })
                .collect(),
        }
    }
}

fn blob_path(manifest: &Path) -> Result<(PathBuf, String)> {
    let name = manifest
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::invalid(format!("checkpoint path {} has no file name", manifest.display())))?;
    let blob = format!("{name}.bin");
    Ok((manifest.with_file_name(&blob), blob))
}

/// Writes blob then manifest, each through a temp file and a rename.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    seed: u64,
    train: Option<&TrainConfig>,
    synth: Option<&SynthConfig>,
) -> Result<Manifest> {
    let (blob_file, blob_name) = blob_path(path)?;
    let manifest = Manifest::for_model(model, seed, train, synth, blob_name);
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::invalid(format!("checkpoint manifest cannot be encoded: {e}")))?;
    let values = model.flatten();
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in &values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(&blob_file, &bytes)?;
    write_atomic(path, text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::format(path, "manifest", e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            "manifest",
            format!("unsupported checkpoint format '{} v{}'", manifest.format, manifest.version),
        ));
    }
    Ok(manifest)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Manifest)> {
    let manifest = read_manifest(path)?;
    let mut dims = manifest.d_x.clone();
    let modality = manifest.modality.unwrap_or(0);
    if manifest.modality.is_some() {
        // Single-modal models record only the dimension they read.
        let d = *dims
            .first()
            .ok_or_else(|| Error::format(path, "manifest", "empty d_x"))?;
        dims = vec![0; modality + 1];
        dims[modality] = d;
    }
    let mut model = Model::zeros(manifest.architecture, &dims, manifest.d_h, manifest.classes, modality)
        .map_err(|e| Error::format(path, "manifest", e.to_string()))?;
    let declared: Vec<(String, usize, usize)> =
        manifest.tensors.iter().map(|t| (t.name.clone(), t.rows, t.cols)).collect();
    if declared != model.layout() {
        return Err(Error::format(path, "tensors", "declared tensor layout does not match the architecture"));
    }
    let blob_file = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    let expected = model.param_count() * 8;
    if bytes.len() != expected {
        return Err(Error::format(
            &blob_file,
            format!("byte {}", bytes.len().min(expected)),
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut values = Vec::with_capacity(model.param_count());
    for (i, chunk) in bytes.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        if !v.is_finite() {
            return Err(Error::format(&blob_file, format!("byte {}", 8 * i), "non-finite parameter"));
        }
        values.push(v);
    }
    model.load_flat(&values)?;
    Ok((model, manifest))
}
