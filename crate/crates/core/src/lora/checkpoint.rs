use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdapterComponent, AdapterConfig, AdapterSet};
use crate::error::{Error, Result};
use crate::io;
use crate::microlm::{MatrixKind, ModelConfig};
use crate::tensor::Tensor;

pub const ADAPTER_FORMAT: &str = "lra1";

#[derive(Debug, Serialize, Deserialize)]
struct ComponentEntry {
    name: String,
    layer: usize,
    kind: MatrixKind,
    in_dim: usize,
    out_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterManifest {
    format: String,
    model_config: ModelConfig,
    adapter: AdapterConfig,
    alpha: f32,
    components: Vec<ComponentEntry>,
    adapters_sha256: String,
}

/// Writes `manifest.json` and `adapters.f32` (`a` then `b` per component).
pub fn save_adapters(set: &AdapterSet, model: &ModelConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let flat: Vec<f32> = set
        .components()
        .iter()
        .flat_map(|c| c.a.data().iter().chain(c.b.data()).copied())
        .collect();
    let manifest = AdapterManifest {
        format: ADAPTER_FORMAT.to_string(),
        model_config: model.clone(),
        adapter: set.config().clone(),
        alpha: set.config().alpha,
        components: set
            .components()
            .iter()
            .map(|c| ComponentEntry {
                name: c.name(),
                layer: c.layer,
                kind: c.kind,
                in_dim: c.in_dim(),
                out_dim: c.out_dim(),
            })
            .collect(),
        adapters_sha256: io::f32_hash(&flat),
    };
    io::write_f32(&dir.join("adapters.f32"), &flat)?;
    io::write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_adapters(dir: &Path) -> Result<(AdapterSet, ModelConfig)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: AdapterManifest = io::read_json(&manifest_path)?;
    if manifest.format != ADAPTER_FORMAT {
        return Err(Error::Format {
            path: manifest_path,
            reason: format!("format {:?}, expected {ADAPTER_FORMAT:?}", manifest.format),
        });
    }
    let flat = io::read_f32(&dir.join("adapters.f32"))?;
    let r = manifest.adapter.rank;
    let mut offset = 0;
    let mut components = Vec::with_capacity(manifest.components.len());
    for e in &manifest.components {
        let (na, nb) = (r * e.in_dim, r * e.out_dim);
        if offset + na + nb > flat.len() {
            return Err(Error::Format {
                path: dir.join("adapters.f32"),
                reason: "file shorter than the manifest requires".into(),
            });
        }
        let a = Tensor::new(vec![r, e.in_dim], flat[offset..offset + na].to_vec())?;
        let b = Tensor::new(
            vec![e.out_dim, r],
            flat[offset + na..offset + na + nb].to_vec(),
        )?;
        offset += na + nb;
        components.push(AdapterComponent {
            layer: e.layer,
            kind: e.kind,
            a,
            b,
            scale: manifest.alpha,
        });
    }
    if offset != flat.len() {
        return Err(Error::Format {
            path: dir.join("adapters.f32"),
            reason: "file longer than the manifest requires".into(),
        });
    }
    let set = AdapterSet::from_components(&manifest.model_config, manifest.adapter, components)?;
    Ok((set, manifest.model_config))
}
