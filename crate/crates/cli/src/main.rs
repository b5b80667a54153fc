mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use textgan::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "textgan", version, about = "Adversarial text generation with kernel feature matching")]
struct Cli {
    /// Run configuration file of `key = value` lines
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key (repeatable), e.g. `--set lr=1e-4`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Full-size dimensions and optimizer settings
    #[arg(long, global = true)]
    paper_scale: bool,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory of the vocabulary and encoded splits
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    /// Directory for checkpoints, logs and evaluation output
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary and write train/valid/test id files
    Preprocess {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Autoencoder and permutation pre-training
    Pretrain,
    /// Adversarial training
    Train {
        /// Generator objective: MMD, MMD-L, CM or MM
        #[arg(long)]
        variant: Option<String>,
        /// Continue from the trained checkpoint in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Decode sentences from uniform latent codes
    Generate {
        #[arg(short, long)]
        n: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Decode along a line between two latent codes
    Interpolate {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// BLEU-2/3/4 against the test split and KDE of generated features
    Eval {
        /// Score the sentences in this file instead of generating
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Real-versus-generated feature moments
    Diagnose {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut run = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        run.set(k.trim(), v.trim())?;
    }
    if cli.paper_scale {
        run.paper_scale = true;
    }
    if let Some(s) = cli.seed {
        run.set("seed", &s.to_string())?;
    }
    if let Some(d) = &cli.data_dir {
        run.data_dir = d.clone();
    }
    if let Some(d) = &cli.out_dir {
        run.out_dir = d.clone();
    }
    match &cli.command {
        Command::Preprocess { corpus: Some(c) } => run.corpus = Some(c.clone()),
        Command::Train { variant: Some(v), .. } => run.set("variant", v)?,
        Command::Generate { checkpoint: Some(c), .. }
        | Command::Interpolate { checkpoint: Some(c), .. }
        | Command::Eval { checkpoint: Some(c), .. }
        | Command::Diagnose { checkpoint: Some(c) } => run.checkpoint = Some(c.clone()),
        _ => {}
    }
    run.validate()?;
    Ok(run)
}

fn execute(cli: &Cli) -> Result<()> {
    let run = resolve(cli)?;
    match &cli.command {
        Command::Preprocess { .. } => commands::preprocess(&run),
        Command::Pretrain => commands::pretrain(&run),
        Command::Train { resume, .. } => commands::train(&run, *resume),
        Command::Generate { n, .. } => commands::generate(&run, n.unwrap_or(run.num_sentences)),
        Command::Interpolate { steps, .. } => commands::interpolate_cmd(&run, steps.unwrap_or(run.interp_steps)),
        Command::Eval { candidates, .. } => commands::eval(&run, candidates.as_deref()),
        Command::Diagnose { .. } => commands::diagnose(&run),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite(_) | Error::Numerical(_) | Error::Domain(_) => 4,
        Error::Data(_)
        | Error::Io { .. }
        | Error::MissingArtifact { .. }
        | Error::MalformedHeader(_)
        | Error::CheckpointShape { .. }
        | Error::TruncatedPayload { .. }
        | Error::Shape(_)
        | Error::Index { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
