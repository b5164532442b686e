use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Layout;
use crate::autointerp::EndpointConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::lora::AdapterConfig;
use crate::microlm::{synth_tasks_with, Corpus, ModelConfig, SynthConfig, TrainConfig};
use crate::sae::SaeConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSettings {
    pub seed: u64,
    pub eval_seed: u64,
    pub n_eval: usize,
    pub synth: SynthConfig,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        CorpusSettings {
            seed: 0,
            eval_seed: 1000,
            n_eval: 400,
            synth: SynthConfig::default(),
        }
    }
}

impl CorpusSettings {
    /// `(base, shifted)` training corpora.
    pub fn training(&self) -> (Corpus, Corpus) {
        synth_tasks_with(&self.synth, self.seed)
    }

    /// Held-out `(base, shifted)` corpora.
    pub fn eval(&self) -> (Corpus, Corpus) {
        let cfg = SynthConfig {
            n_sequences: self.n_eval,
            ..self.synth.clone()
        };
        synth_tasks_with(&cfg, self.eval_seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaxActSettings {
    pub top_k: usize,
    pub window: usize,
}

impl Default for MaxActSettings {
    fn default() -> Self {
        MaxActSettings {
            top_k: 64,
            window: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpBaselineSettings {
    pub neurons_per_layer: usize,
}

impl Default for MlpBaselineSettings {
    fn default() -> Self {
        MlpBaselineSettings {
            neurons_per_layer: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpSettings {
    pub endpoint: EndpointConfig,
    /// Trailing fraction of sequences held out of SAE training and used for densities.
    pub density_fraction: f64,
}

impl Default for InterpSettings {
    fn default() -> Self {
        InterpSettings {
            endpoint: EndpointConfig::default(),
            density_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSettings {
    pub eval_sequences: usize,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            eval_sequences: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub out: PathBuf,
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub corpus: CorpusSettings,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub lora: TrainConfig,
    pub sae: SaeConfig,
    pub maxact: MaxActSettings,
    pub mlp_baseline: MlpBaselineSettings,
    pub interp: InterpSettings,
    pub ablation: AblationSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("run"),
            model: ModelConfig::default(),
            adapter: AdapterConfig::default(),
            corpus: CorpusSettings::default(),
            pretrain: TrainConfig {
                steps: 1000,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                steps: 500,
                seed: 1,
                ..TrainConfig::default()
            },
            lora: TrainConfig {
                steps: 500,
                lr: 1e-2,
                seed: 1,
                ..TrainConfig::default()
            },
            sae: SaeConfig::default(),
            maxact: MaxActSettings::default(),
            mlp_baseline: MlpBaselineSettings::default(),
            interp: InterpSettings::default(),
            ablation: AblationSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::contract(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sae.validate()?;
        if !(0.0..1.0).contains(&self.interp.density_fraction) {
            return Err(Error::contract("density_fraction must lie in [0, 1)"));
        }
        if self.adapter.rank != 1 {
            log::warn!(
                "adapter rank {} > 1; activation dumps need rank 1",
                self.adapter.rank
            );
        }
        Ok(())
    }

    /// sha256 of the config with the output root blanked, so the same run
    /// in two directories hashes equally.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        io::sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.out)
    }
}
