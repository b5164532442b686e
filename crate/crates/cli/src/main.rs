use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use loralens::ablation::recovery;
use loralens::pipeline::{self, RunConfig, Stage};
use loralens::Error;

#[derive(Parser)]
#[command(
    name = "loralens",
    version,
    about = "Rank-1 adapter interpretability workbench"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to anything omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    expansion: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long = "top-k")]
    top_k: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    Pretrain(Common),
    FinetuneFull(Common),
    FinetuneLora(Common),
    DumpActs(Common),
    DumpMlpBaseline(Common),
    TrainSae(Common),
    Maxact(Common),
    Interp(Common),
    Categorize(Common),
    Ablate(Common),
    Dashboard(Common),
    /// Every stage in order.
    Pipeline(Common),
    /// Percentage of the base→full gap recovered by a candidate score.
    Recovery {
        #[arg(long, allow_hyphen_values = true)]
        base: f64,
        #[arg(long, allow_hyphen_values = true)]
        full: f64,
        #[arg(long, allow_hyphen_values = true)]
        candidate: f64,
    },
    /// Print the effective configuration as TOML.
    ShowConfig(Common),
}

fn load_config(c: &Common, stage: Option<Stage>) -> loralens::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    let train = match stage {
        Some(Stage::Pretrain) => Some(&mut cfg.pretrain),
        Some(Stage::FinetuneFull) => Some(&mut cfg.finetune),
        Some(Stage::FinetuneLora) => Some(&mut cfg.lora),
        _ => None,
    };
    if let Some(t) = train {
        if let Some(s) = c.steps {
            t.steps = s;
        }
        if let Some(lr) = c.lr {
            t.lr = lr;
        }
    }
    if stage == Some(Stage::TrainSae) {
        if let Some(s) = c.steps {
            cfg.sae.steps = s;
        }
        if let Some(lr) = c.lr {
            cfg.sae.lr = lr;
        }
    }
    if let Some(k) = c.k {
        cfg.sae.k = k;
    }
    if let Some(e) = c.expansion {
        cfg.sae.expansion = e;
    }
    if let Some(w) = c.window {
        cfg.maxact.window = w;
    }
    if let Some(t) = c.top_k {
        cfg.maxact.top_k = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingInput { .. } => 2,
        Error::Endpoint(_) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> loralens::Result<()> {
    let (common, stage) = match cli.command {
        Command::Recovery {
            base,
            full,
            candidate,
        } => {
            println!("{:.2}%", recovery(base, full, candidate)?);
            return Ok(());
        }
        Command::ShowConfig(c) => {
            print!("{}", load_config(&c, None)?.to_toml());
            return Ok(());
        }
        Command::Pipeline(c) => {
            let cfg = load_config(&c, None)?;
            pipeline::pipeline(&cfg)?;
            println!("{}", cfg.layout().report().display());
            return Ok(());
        }
        Command::Pretrain(c) => (c, Stage::Pretrain),
        Command::FinetuneFull(c) => (c, Stage::FinetuneFull),
        Command::FinetuneLora(c) => (c, Stage::FinetuneLora),
        Command::DumpActs(c) => (c, Stage::DumpActs),
        Command::DumpMlpBaseline(c) => (c, Stage::DumpMlpBaseline),
        Command::TrainSae(c) => (c, Stage::TrainSae),
        Command::Maxact(c) => (c, Stage::Maxact),
        Command::Interp(c) => (c, Stage::Interp),
        Command::Categorize(c) => (c, Stage::Categorize),
        Command::Ablate(c) => (c, Stage::Ablate),
        Command::Dashboard(c) => (c, Stage::Dashboard),
    };
    let cfg = load_config(&common, Some(stage))?;
    let manifest = pipeline::run(&cfg, stage)?;
    for path in manifest.outputs.keys() {
        println!("{}", cfg.out.join(path).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
