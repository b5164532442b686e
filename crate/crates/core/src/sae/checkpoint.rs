use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Normalization, SaeConfig, SaeModel};
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

pub const SAE_FORMAT: &str = "sae1";

#[derive(Debug, Serialize, Deserialize)]
struct SaeManifest {
    format: String,
    config: SaeConfig,
    normalization: Normalization,
    alive: Vec<bool>,
    n_alive: usize,
    weights_sha256: String,
}

fn flatten(model: &SaeModel) -> Vec<f32> {
    [&model.w_enc, &model.b_enc, &model.w_dec, &model.b_dec]
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect()
}

/// Writes `manifest.json` and `weights.f32` (`W_enc`, `b_enc`, `W_dec`, `b_dec`).
pub fn save_sae(model: &SaeModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let flat = flatten(model);
    let manifest = SaeManifest {
        format: SAE_FORMAT.to_string(),
        config: model.config.clone(),
        normalization: model.norm.clone(),
        alive: model.alive.clone(),
        n_alive: model.n_alive(),
        weights_sha256: io::f32_hash(&flat),
    };
    io::write_f32(&dir.join("weights.f32"), &flat)?;
    io::write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_sae(dir: &Path) -> Result<SaeModel> {
    let manifest_path = dir.join("manifest.json");
    let m: SaeManifest = io::read_json(&manifest_path)?;
    let bad = |reason: String| Error::Format {
        path: manifest_path.clone(),
        reason,
    };
    if m.format != SAE_FORMAT {
        return Err(bad(format!(
            "format {:?}, expected {SAE_FORMAT:?}",
            m.format
        )));
    }
    m.config.validate()?;
    let (d, l) = (m.config.d_in, m.config.d_latent());
    if m.alive.len() != l || m.normalization.mean.len() != d || m.normalization.std.len() != d {
        return Err(bad(
            "alive mask or normalization width disagrees with config".into(),
        ));
    }
    let flat = io::read_f32(&dir.join("weights.f32"))?;
    if flat.len() != 2 * l * d + l + d {
        return Err(Error::Format {
            path: dir.join("weights.f32"),
            reason: format!("{} values, expected {}", flat.len(), 2 * l * d + l + d),
        });
    }
    let (w_enc, rest) = flat.split_at(l * d);
    let (b_enc, rest) = rest.split_at(l);
    let (w_dec, b_dec) = rest.split_at(l * d);
    Ok(SaeModel {
        w_enc: Tensor::new(vec![l, d], w_enc.to_vec())?,
        b_enc: Tensor::new(vec![l], b_enc.to_vec())?,
        w_dec: Tensor::new(vec![d, l], w_dec.to_vec())?,
        b_dec: Tensor::new(vec![d], b_dec.to_vec())?,
        alive: m.alive,
        norm: m.normalization,
        config: m.config,
    })
}
