use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use slq::pipeline::{self, RunConfig, Sink, ADAPTER_FILE, BACKBONE_FILE};
use slq::Error;

/// Shared latent query retrieval: pretrain a small multimodal transformer,
/// freeze it, adapt a readout and evaluate it.
#[derive(Parser, Debug)]
#[command(name = "slq", version)]
struct Cli {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the step budget of the command's training stage.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Suppresses progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain and freeze a backbone.
    Pretrain,
    /// Train the configured readout on a frozen backbone.
    Adapt {
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Retrieval and geometry reports on the eval split.
    Eval {
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        adapter: Option<PathBuf>,
    },
    /// Adapt and evaluate along one readout axis over several seeds.
    Ablate {
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Zero-shot query readout versus last-token readout per difficulty tier.
    Diagnose {
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Integrity(_) => 3,
        Error::Contamination(_) => 4,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(n) = cli.steps {
        match cli.command {
            Command::Pretrain => cfg.pretrain.steps = n,
            _ => cfg.trainer.total_steps = n,
        }
    }
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let sink = Sink::new(&cfg.out, cli.quiet)?;
    let or_default = |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| cfg.out.join(name));
    match &cli.command {
        Command::Pretrain => {
            pipeline::run_pretrain(&cfg, &sink)?;
        }
        Command::Adapt { backbone } => {
            let b = pipeline::load_backbone(&or_default(backbone, BACKBONE_FILE))?;
            pipeline::run_adapt(&cfg, &b, &sink)?;
        }
        Command::Eval { backbone, adapter } => {
            let b = pipeline::load_backbone(&or_default(backbone, BACKBONE_FILE))?;
            let (a, ids) = pipeline::load_adapter(&or_default(adapter, ADAPTER_FILE), b.config())?;
            pipeline::run_eval(&cfg, &b, &a, &ids, &sink)?;
        }
        Command::Ablate { backbone } => {
            let b = pipeline::load_backbone(&or_default(backbone, BACKBONE_FILE))?;
            pipeline::run_ablate(&cfg, &b, &sink)?;
        }
        Command::Diagnose { backbone } => {
            let b = pipeline::load_backbone(&or_default(backbone, BACKBONE_FILE))?;
            pipeline::run_diagnose(&cfg, &b, &sink)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("slq: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
