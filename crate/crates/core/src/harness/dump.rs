use std::fs;
use std::path::Path;

use super::{ActivationDump, DumpManifest, TokenRef};
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

pub const DUMP_FORMAT: &str = "act1";

/// `manifest.json`, `activations.f32` and `tokens.jsonl` under `dir`.
pub fn write_dump(dump: &ActivationDump, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    io::write_f32(&dir.join("activations.f32"), dump.activations.data())?;
    io::write_jsonl(&dir.join("tokens.jsonl"), &dump.tokens)?;
    io::write_json(&dir.join("manifest.json"), &dump.manifest)
}

pub fn read_dump(dir: &Path) -> Result<ActivationDump> {
    let manifest_path = dir.join("manifest.json");
    let manifest: DumpManifest = io::read_json(&manifest_path)?;
    let bad = |reason: String| Error::Format {
        path: manifest_path.clone(),
        reason,
    };
    if manifest.format != DUMP_FORMAT {
        return Err(bad(format!(
            "format {:?}, expected {DUMP_FORMAT:?}",
            manifest.format
        )));
    }
    if manifest.components.len() != manifest.d {
        return Err(bad(format!(
            "d = {} but {} component names",
            manifest.d,
            manifest.components.len()
        )));
    }
    let data = io::read_f32(&dir.join("activations.f32"))?;
    if data.len() != manifest.n_tokens * manifest.d {
        return Err(bad(format!(
            "activations.f32 holds {} values, manifest needs {}",
            data.len(),
            manifest.n_tokens * manifest.d
        )));
    }
    let tokens: Vec<TokenRef> = io::read_jsonl(&dir.join("tokens.jsonl"))?;
    if tokens.len() != manifest.n_tokens {
        return Err(bad(format!(
            "tokens.jsonl has {} lines, manifest needs {}",
            tokens.len(),
            manifest.n_tokens
        )));
    }
    let activations = Tensor::new(vec![manifest.n_tokens, manifest.d], data)?;
    Ok(ActivationDump {
        manifest,
        activations,
        tokens,
    })
}
