//! Run configuration, stage commands and run manifests.
//!
//! Every stage reads its inputs from the output root, checks they exist,
//! writes its outputs and records `manifests/<stage>.json` with the config
//! hash and the hashes of every input and output.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablation::{group_ablation_eval, sweep_components, AblationReport, RecoveryRecord};
use crate::autointerp::{
    activation_mass, categorize_all, category_density, generate_categories, held_out_rows,
    interp_stats, interpret_all, ClassStats, InterpRecord, REFERENCE_CLASS0_LORA,
    REFERENCE_CLASS0_SAE,
};
use crate::error::{Error, Result};
use crate::harness::{
    full_sample, read_dump, record, record_mlp_baseline, top_contexts, write_dump, MaxActRecord,
};
use crate::io;
use crate::lora::{load_adapters, save_adapters, AdapterSet};
use crate::microlm::{
    evaluate_accuracy, load_model, save_model, train, MatrixKind, TrainTarget, TransformerModel,
};
use crate::report::{direction_file, feature_file, render_feature_page, render_overview, StatsRow};
use crate::sae::{feature_dump, filter_dead, save_sae, train_sae, SaeConfig};

pub use config::{
    AblationSettings, CorpusSettings, InterpSettings, MaxActSettings, MlpBaselineSettings,
    RunConfig,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// The adapter, MLP-baseline and SAE-feature direction groups.
pub const GROUPS: [&str; 3] = ["lora", "mlp", "sae"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Pretrain,
    FinetuneFull,
    FinetuneLora,
    DumpActs,
    DumpMlpBaseline,
    TrainSae,
    Maxact,
    Interp,
    Categorize,
    Ablate,
    Dashboard,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Pretrain,
        Stage::FinetuneFull,
        Stage::FinetuneLora,
        Stage::DumpActs,
        Stage::DumpMlpBaseline,
        Stage::TrainSae,
        Stage::Maxact,
        Stage::Interp,
        Stage::Categorize,
        Stage::Ablate,
        Stage::Dashboard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::FinetuneFull => "finetune-full",
            Stage::FinetuneLora => "finetune-lora",
            Stage::DumpActs => "dump-acts",
            Stage::DumpMlpBaseline => "dump-mlp-baseline",
            Stage::TrainSae => "train-sae",
            Stage::Maxact => "maxact",
            Stage::Interp => "interp",
            Stage::Categorize => "categorize",
            Stage::Ablate => "ablate",
            Stage::Dashboard => "dashboard",
        }
    }
}

/// Output paths under the run root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn pretrain(&self) -> PathBuf {
        self.root.join("pretrain")
    }
    pub fn finetune_full(&self) -> PathBuf {
        self.root.join("finetune-full")
    }
    pub fn finetune_lora(&self) -> PathBuf {
        self.root.join("finetune-lora")
    }
    pub fn acts(&self) -> PathBuf {
        self.root.join("acts")
    }
    pub fn mlp_acts(&self) -> PathBuf {
        self.root.join("mlp-acts")
    }
    pub fn sae(&self) -> PathBuf {
        self.root.join("sae")
    }
    pub fn features(&self) -> PathBuf {
        self.root.join("features")
    }
    pub fn maxact(&self, group: &str) -> PathBuf {
        self.root.join("maxact").join(format!("{group}.jsonl"))
    }
    pub fn interp(&self, group: &str) -> PathBuf {
        self.root.join("interp").join(group).join("interp.jsonl")
    }
    pub fn interp_stats(&self) -> PathBuf {
        self.root.join("interp").join("stats.json")
    }
    pub fn categories(&self) -> PathBuf {
        self.root.join("categories.json")
    }
    pub fn assignments(&self) -> PathBuf {
        self.root.join("assignments.jsonl")
    }
    pub fn densities(&self) -> PathBuf {
        self.root.join("densities.json")
    }
    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation.json")
    }
    pub fn dashboards(&self) -> PathBuf {
        self.root.join("dashboards")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report").join("index.html")
    }
    pub fn manifest(&self, stage: Stage) -> PathBuf {
        self.root
            .join("manifests")
            .join(format!("{}.json", stage.name()))
    }

    fn dump_dir(&self, group: &str) -> PathBuf {
        match group {
            "lora" => self.acts(),
            "mlp" => self.mlp_acts(),
            _ => self.features(),
        }
    }

    fn dump_producer(group: &str) -> Stage {
        match group {
            "lora" => Stage::DumpActs,
            "mlp" => Stage::DumpMlpBaseline,
            _ => Stage::TrainSae,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    /// Root-relative path → sha256 of the file or directory.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        io::hash_dir(path)
    } else {
        io::hash_file(path)
    }
}

fn rel(layout: &Layout, path: &Path) -> String {
    path.strip_prefix(&layout.root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

/// Checks inputs, runs `body`, then writes the stage manifest.
fn run_stage(
    cfg: &RunConfig,
    stage: Stage,
    inputs: &[(PathBuf, Stage)],
    body: impl FnOnce() -> Result<Vec<PathBuf>>,
) -> Result<RunManifest> {
    let layout = cfg.layout();
    let config_hash = cfg.hash();
    let mut input_hashes = BTreeMap::new();
    for (path, producer) in inputs {
        if !path.exists() {
            return Err(Error::MissingInput {
                path: path.clone(),
                producer: producer.name(),
            });
        }
        let key = rel(&layout, path);
        let hash = hash_path(path)?;
        let upstream = layout.manifest(*producer);
        if upstream.exists() {
            let m: RunManifest = io::read_json(&upstream)?;
            if m.outputs.get(&key).is_some_and(|h| *h != hash) {
                log::warn!("{key} changed since `{}` wrote it", producer.name());
            }
            if m.config_hash != config_hash {
                log::warn!(
                    "{key} was produced by `{}` under a different config",
                    producer.name()
                );
            }
        }
        input_hashes.insert(key, hash);
    }
    log::info!("running {}", stage.name());
    let outputs = body()?;
    let mut output_hashes = BTreeMap::new();
    for path in outputs {
        output_hashes.insert(rel(&layout, &path), hash_path(&path)?);
    }
    let manifest = RunManifest {
        stage: stage.name().to_string(),
        tool_version: TOOL_VERSION.to_string(),
        config_hash,
        inputs: input_hashes,
        outputs: output_hashes,
    };
    let path = layout.manifest(stage);
    fs::create_dir_all(path.parent().expect("manifests dir"))?;
    io::write_json(&path, &manifest)?;
    Ok(manifest)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> Result<RunManifest> {
    let out = cfg.layout().pretrain();
    run_stage(cfg, Stage::Pretrain, &[], || {
        let (base, _) = cfg.corpus.training();
        let mut model = TransformerModel::new(cfg.model.clone())?;
        let log = train(&mut model, &base, &cfg.pretrain, TrainTarget::AllParameters)?;
        save_model(&model, &out)?;
        io::write_json(&out.join("train_log.json"), &log)?;
        Ok(vec![out.clone()])
    })
}

pub fn finetune_full(cfg: &RunConfig) -> Result<RunManifest> {
    let layout = cfg.layout();
    let (input, out) = (layout.pretrain(), layout.finetune_full());
    run_stage(
        cfg,
        Stage::FinetuneFull,
        &[(input.clone(), Stage::Pretrain)],
        || {
            let (_, shifted) = cfg.corpus.training();
            let mut model = load_model(&input)?;
            let log = train(
                &mut model,
                &shifted,
                &cfg.finetune,
                TrainTarget::AllParameters,
            )?;
            save_model(&model, &out)?;
            io::write_json(&out.join("train_log.json"), &log)?;
            Ok(vec![out.clone()])
        },
    )
}

pub fn finetune_lora(cfg: &RunConfig) -> Result<RunManifest> {
    let layout = cfg.layout();
    let (input, out) = (layout.pretrain(), layout.finetune_lora());
    run_stage(
        cfg,
        Stage::FinetuneLora,
        &[(input.clone(), Stage::Pretrain)],
        || {
            let (_, shifted) = cfg.corpus.training();
            let mut model = load_model(&input)?;
            let mut set = AdapterSet::new(model.config(), cfg.adapter.clone())?;
            let log = train(
                &mut model,
                &shifted,
                &cfg.lora,
                TrainTarget::AdapterOnly(&mut set),
            )?;
            save_adapters(&set, model.config(), &out)?;
            io::write_json(&out.join("train_log.json"), &log)?;
            Ok(vec![out.clone()])
        },
    )
}

fn load_adapted(layout: &Layout) -> Result<(TransformerModel, AdapterSet)> {
    let model = load_model(&layout.pretrain())?;
    let (set, model_cfg) = load_adapters(&layout.finetune_lora())?;
    if &model_cfg != model.config() {
        return Err(Error::contract(
            "adapter checkpoint was trained for a different model config",
        ));
    }
    Ok((model, set))
}

pub fn dump_acts(cfg: &RunConfig) -> Result<RunManifest> {
    let layout = cfg.layout();
    let inputs = [
        (layout.pretrain(), Stage::Pretrain),
        (layout.finetune_lora(), Stage::FinetuneLora),
    ];
    run_stage(cfg, Stage::DumpActs, &inputs, || {
        let (model, set) = load_adapted(&layout)?;
        let (_, shifted) = cfg.corpus.training();
        write_dump(&record(&model, &set, &shifted)?, &layout.acts())?;
        Ok(vec![layout.acts()])
    })
}

pub fn dump_mlp_baseline(cfg: &RunConfig) -> Result<RunManifest> {
    let layout = cfg.layout();
    run_stage(
        cfg,
        Stage::DumpMlpBaseline,
        &[(layout.pretrain(), Stage::Pretrain)],
        || {
            let model = load_model(&layout.pretrain())?;
            let (_, shifted) = cfg.corpus.training();
            let dump = record_mlp_baseline(&model, &shifted, cfg.mlp_baseline.neurons_per_layer)?;
            write_dump(&dump, &layout.mlp_acts())?;
            Ok(vec![layout.mlp_acts()])
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeSummary {
    pub training_rows: usize,
    pub held_out_rows: usize,
    pub initial_loss: f32,
    pub final_loss: f32,
    pub max_column_norm_error: f64,
    pub n_alive: usize,
    pub d_latent: usize,
}

/// Trains on the dump minus the held-out density slice, filters dead latents
/// on the same rows, then encodes every row into the feature dump.
pub fn train_sae_stage(cfg: &RunConfig) -> Result<RunManifest> {
    let layout = cfg.layout();
    run_stage(
        cfg,
        Stage::TrainSae,
        &[(layout.acts(), Stage::DumpActs)],
        || {
            let dump = read_dump(&layout.acts())?;
            let held: std::collections::BTreeSet<usize> =
                held_out_rows(&dump, cfg.interp.density_fraction)
                    .into_iter()
                    .collect();
            let train_rows: Vec<usize> =
                (0..dump.n_tokens()).filter(|r| !held.contains(r)).collect();
            let train_dump = dump.subset(&train_rows)?;
            let sae_cfg = SaeConfig {
                d_in: dump.d(),
                ..cfg.sae.clone()
            };
            let (model, log) = train_sae(&sae_cfg, &train_dump)?;
            let model = filter_dead(&model, &train_dump)?;
            let dir = layout.sae();
            save_sae(&model, &dir)?;
            io::write_json(&dir.join("train_log.json"), &log)?;
            io::write_json(
                &dir.join("summary.json"),
                &SaeSummary {
                    training_rows: train_rows.len(),
                    held_out_rows: held.len(),
                    initial_loss: log.losses.first().copied().unwrap_or(f32::NAN),
                    final_loss: log.losses.last().copied().unwrap_or(f32::NAN),
                    max_column_norm_error: log
                        .column_norm_error
                        .iter()
                        .copied()
                        .fold(0.0, f64::max),
                    n_alive: model.n_alive(),
                    d_latent: model.d_latent(),
                },
            )?;
            let sae_hash = io::hash_file(&dir.join("weights.f32"))?;
            write_dump(&feature_dump(&model, &dump, sae_hash)?, &layout.features())?;
            Ok(vec![dir.clone(), layout.features()])
        },
    )
}

pub fn maxact(cfg: &RunConfig) -> Result<RunManifest> {
    let layout = cfg.layout();
    let inputs: Vec<(PathBuf, Stage)> = GROUPS
        .iter()
        .map(|g| (layout.dump_dir(g), Layout::dump_producer(g)))
        .collect();
    run_stage(cfg, Stage::Maxact, &inputs, || {
        let mut outputs = Vec::new();
        for group in GROUPS {
            let dump = read_dump(&layout.dump_dir(group))?;
            let records = (0..dump.d())
                .map(|j| top_contexts(&dump, j, cfg.maxact.top_k, cfg.maxact.window))
                .collect::<Result<Vec<_>>>()?;
            let path = layout.maxact(group);
            ensure_parent(&path)?;
            io::write_jsonl(&path, &records)?;
            outputs.push(path);
        }
        Ok(outputs)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpStats {
    pub lora: ClassStats,
    pub mlp: ClassStats,
    pub sae: ClassStats,
}

pub fn interp(cfg: &RunConfig) -> Result<RunManifest> {
    let layout = cfg.layout();
    let mut inputs: Vec<(PathBuf, Stage)> = GROUPS
        .iter()
        .map(|g| (layout.maxact(g), Stage::Maxact))
        .collect();
    inputs.extend(
        GROUPS
            .iter()
            .map(|g| (layout.dump_dir(g), Layout::dump_producer(g))),
    );
    run_stage(cfg, Stage::Interp, &inputs, || {
        let client = cfg.interp.endpoint.client()?;
        let mut stats = Vec::new();
        let mut outputs = Vec::new();
        for group in GROUPS {
            let records: Vec<MaxActRecord> = io::read_jsonl(&layout.maxact(group))?;
            let dump_hash = io::hash_dir(&layout.dump_dir(group))?;
            let path = layout.interp(group);
            ensure_parent(&path)?;
            let results = interpret_all(
                &records,
                &dump_hash,
                client.as_ref(),
                &cfg.interp.endpoint,
                &path,
            )?;
            stats.push(interp_stats(&results));
            outputs.push(path);
        }
        let stats = InterpStats {
            lora: stats[0].clone(),
            mlp: stats[1].clone(),
            sae: stats[2].clone(),
        };
        io::write_json(&layout.interp_stats(), &stats)?;
        outputs.push(layout.interp_stats());
        Ok(outputs)
    })
}

fn current_interps(layout: &Layout, group: &str) -> Result<Vec<InterpRecord>> {
    let dump_hash = io::hash_dir(&layout.dump_dir(group))?;
    let mut latest: BTreeMap<usize, InterpRecord> = BTreeMap::new();
    for r in io::read_jsonl::<InterpRecord>(&layout.interp(group))? {
        if r.dump_hash == dump_hash {
            latest.insert(r.id, r);
        }
    }
    Ok(latest.into_values().collect())
}

/// Categories from SAE feature explanations, one category per feature, and
/// category densities over the held-out slice of the feature dump.
pub fn categorize(cfg: &RunConfig) -> Result<RunManifest> {
    let layout = cfg.layout();
    let inputs = [
        (layout.interp("sae"), Stage::Interp),
        (layout.maxact("sae"), Stage::Maxact),
        (layout.features(), Stage::TrainSae),
    ];
    run_stage(cfg, Stage::Categorize, &inputs, || {
        let client = cfg.interp.endpoint.client()?;
        let interps = current_interps(&layout, "sae")?;
        let explanations: Vec<String> = interps
            .iter()
            .filter_map(|r| r.result.as_ref().map(|x| x.explanation.clone()))
            .collect();
        let categories = generate_categories(&explanations, client.as_ref(), &cfg.interp.endpoint)?;
        let records: Vec<MaxActRecord> = io::read_jsonl(&layout.maxact("sae"))?;
        let assignments = categorize_all(
            &interps,
            &records,
            &categories,
            client.as_ref(),
            &cfg.interp.endpoint,
        )?;
        let features = read_dump(&layout.features())?;
        let rows = held_out_rows(&features, cfg.interp.density_fraction);
        let densities = category_density(&assignments, &activation_mass(&features, &rows))?;
        io::write_json(&layout.categories(), &categories)?;
        io::write_jsonl(&layout.assignments(), &assignments)?;
        io::write_json(&layout.densities(), &densities)?;
        Ok(vec![
            layout.categories(),
            layout.assignments(),
            layout.densities(),
        ])
    })
}

pub fn ablate(cfg: &RunConfig) -> Result<RunManifest> {
    let layout = cfg.layout();
    let inputs = [
        (layout.pretrain(), Stage::Pretrain),
        (layout.finetune_full(), Stage::FinetuneFull),
        (layout.finetune_lora(), Stage::FinetuneLora),
    ];
    run_stage(cfg, Stage::Ablate, &inputs, || {
        let (model, set) = load_adapted(&layout)?;
        let full = load_model(&layout.finetune_full())?;
        let mut eval = cfg.corpus.eval().1;
        eval.sequences.truncate(cfg.ablation.eval_sequences);
        eval.prompt_lens.truncate(cfg.ablation.eval_sequences);
        let sweep = sweep_components(&model, &set, &eval)?;
        let base_score = evaluate_accuracy(&model, None, &eval)?;
        let full_score = evaluate_accuracy(&full, None, &eval)?;
        let lora_score = evaluate_accuracy(&model, Some(&set), &eval)?;
        let mut recovery = vec![RecoveryRecord::new(
            "shifted",
            "rank1_lora_vs_full_finetune",
            base_score,
            full_score,
            lora_score,
        )];
        let (groups, group_records) = group_ablation_eval(&model, &set, "shifted", &eval)?;
        recovery.extend(group_records);
        AblationReport::new(sweep, eval.len(), groups, recovery).write(&layout.ablation())?;
        Ok(vec![layout.ablation()])
    })
}

fn sample_for(
    dump: &crate::harness::ActivationDump,
    record: &MaxActRecord,
) -> Option<(usize, Vec<crate::harness::ContextToken>)> {
    record
        .entries
        .first()
        .map(|e| (e.seq, full_sample(dump, record.direction, e.seq)))
}

fn interps_if_present(layout: &Layout, group: &str) -> Result<BTreeMap<usize, InterpRecord>> {
    if !layout.interp(group).exists() {
        return Ok(BTreeMap::new());
    }
    Ok(current_interps(layout, group)?
        .into_iter()
        .map(|r| (r.id, r))
        .collect())
}

/// Adapter-direction and SAE-feature pages plus `report/index.html`.
/// Interpretations and densities are shown when those stages have run.
pub fn dashboard(cfg: &RunConfig) -> Result<RunManifest> {
    let layout = cfg.layout();
    let inputs = [
        (layout.maxact("lora"), Stage::Maxact),
        (layout.maxact("sae"), Stage::Maxact),
        (layout.acts(), Stage::DumpActs),
        (layout.features(), Stage::TrainSae),
        (layout.ablation(), Stage::Ablate),
    ];
    run_stage(cfg, Stage::Dashboard, &inputs, || {
        let dir = layout.dashboards();
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        let n_layers = cfg.model.n_layers;
        let mut stats_rows = Vec::new();
        for group in ["lora", "sae"] {
            let dump = read_dump(&layout.dump_dir(group))?;
            let records: Vec<MaxActRecord> = io::read_jsonl(&layout.maxact(group))?;
            let interps = interps_if_present(&layout, group)?;
            for rec in &records {
                let file = if group == "lora" {
                    let layer = rec.direction / MatrixKind::ALL.len();
                    let kind = MatrixKind::ALL[rec.direction % MatrixKind::ALL.len()];
                    debug_assert!(layer < n_layers);
                    direction_file(layer, kind)
                } else {
                    feature_file(rec.direction)
                };
                let sample = sample_for(&dump, rec);
                let html = render_feature_page(
                    rec,
                    interps.get(&rec.direction),
                    sample.as_ref().map(|(s, t)| (*s, t.as_slice())),
                );
                fs::write(dir.join(file), html)?;
            }
            let list: Vec<InterpRecord> = interps.into_values().collect();
            if !list.is_empty() {
                stats_rows.push((group, interp_stats(&list)));
            }
        }
        let report = AblationReport::read(&layout.ablation())?;
        let densities = if layout.densities().exists() {
            io::read_json(&layout.densities())?
        } else {
            Vec::new()
        };
        let rows: Vec<StatsRow<'_>> = stats_rows
            .iter()
            .map(|(g, s)| StatsRow {
                label: if *g == "lora" {
                    "adapter directions"
                } else {
                    "SAE features"
                },
                stats: s,
                reference_class0: Some(if *g == "lora" {
                    REFERENCE_CLASS0_LORA
                } else {
                    REFERENCE_CLASS0_SAE
                }),
            })
            .collect();
        let html = render_overview(&report.sweep(), &report.recovery, &densities, &rows);
        ensure_parent(&layout.report())?;
        fs::write(layout.report(), html)?;
        Ok(vec![dir.clone(), layout.report()])
    })
}

pub fn run(cfg: &RunConfig, stage: Stage) -> Result<RunManifest> {
    match stage {
        Stage::Pretrain => pretrain(cfg),
        Stage::FinetuneFull => finetune_full(cfg),
        Stage::FinetuneLora => finetune_lora(cfg),
        Stage::DumpActs => dump_acts(cfg),
        Stage::DumpMlpBaseline => dump_mlp_baseline(cfg),
        Stage::TrainSae => train_sae_stage(cfg),
        Stage::Maxact => maxact(cfg),
        Stage::Interp => interp(cfg),
        Stage::Categorize => categorize(cfg),
        Stage::Ablate => ablate(cfg),
        Stage::Dashboard => dashboard(cfg),
    }
}

/// Every stage in order.
pub fn pipeline(cfg: &RunConfig) -> Result<Vec<RunManifest>> {
    Stage::ALL.iter().map(|&s| run(cfg, s)).collect()
}
