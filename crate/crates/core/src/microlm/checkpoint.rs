use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TransformerModel};
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

pub const MODEL_FORMAT: &str = "mlm1";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    format: String,
    config: ModelConfig,
    params: Vec<ParamEntry>,
    params_sha256: String,
}

/// Writes `manifest.json` and `params.f32` into `dir`.
pub fn save_model(model: &TransformerModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let flat: Vec<f32> = model
        .params()
        .iter()
        .flat_map(|p| p.data().iter().copied())
        .collect();
    let manifest = ModelManifest {
        format: MODEL_FORMAT.to_string(),
        config: model.config().clone(),
        params: model
            .config()
            .param_specs()
            .into_iter()
            .map(|(name, shape)| ParamEntry { name, shape })
            .collect(),
        params_sha256: io::f32_hash(&flat),
    };
    io::write_f32(&dir.join("params.f32"), &flat)?;
    io::write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_model(dir: &Path) -> Result<TransformerModel> {
    let manifest_path = dir.join("manifest.json");
    let manifest: ModelManifest = io::read_json(&manifest_path)?;
    let bad = |reason: String| Error::Format {
        path: manifest_path.clone(),
        reason,
    };
    if manifest.format != MODEL_FORMAT {
        return Err(bad(format!(
            "format {:?}, expected {MODEL_FORMAT:?}",
            manifest.format
        )));
    }
    let specs = manifest.config.param_specs();
    if specs.len() != manifest.params.len()
        || specs
            .iter()
            .zip(&manifest.params)
            .any(|((n, s), e)| *n != e.name || *s != e.shape)
    {
        return Err(bad("parameter list does not match config".into()));
    }
    let flat = io::read_f32(&dir.join("params.f32"))?;
    if flat.len() != manifest.config.param_count() {
        return Err(bad(format!(
            "params.f32 holds {} values, config needs {}",
            flat.len(),
            manifest.config.param_count()
        )));
    }
    let mut offset = 0;
    let mut params = Vec::with_capacity(specs.len());
    for (_, shape) in specs {
        let n: usize = shape.iter().product();
        params.push(Tensor::new(shape, flat[offset..offset + n].to_vec())?);
        offset += n;
    }
    TransformerModel::from_params(manifest.config, params)
}
