mod commands;
mod config;
mod corpus;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use labelrefine::{Connectivity, Error};

use crate::config::{config_keys_help, PipelineConfig};

/// Bad invocation or configuration; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "labelrefine", version, about = "Refine noisy binary vessel labels with an iterative conditional GAN")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Top-level seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for per-item work.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic clean corpus.
    Synth {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        side: Option<usize>,
    },
    /// Mine clean patches from annotated images.
    Mine {
        /// TSV listing `image  annot1  annot2` per line.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
    },
    /// Add simulated annotation noise to a clean corpus.
    Simulate {
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
    },
    /// Train the refiner on a simulated corpus.
    Train {
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        /// Simulated corpus scored after every epoch.
        #[arg(long, value_name = "DIR")]
        holdout: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Backpropagate through the refinement rounds.
        #[arg(long)]
        through_iterations: bool,
        #[command(flatten)]
        post: PostArgs,
    },
    /// Refine every label of a corpus with a trained generator.
    Refine {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        #[arg(long)]
        n_iters: Option<usize>,
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
        #[command(flatten)]
        post: PostArgs,
    },
    /// Score refined labels against the clean ones.
    Evaluate {
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        #[arg(long, value_name = "DIR")]
        refined: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
struct PostArgs {
    /// Smallest component kept after binarization.
    #[arg(long)]
    min_size: Option<usize>,
    #[arg(long, value_parser = ["4", "8"])]
    connectivity: Option<String>,
    #[arg(long)]
    otsu_bins: Option<usize>,
}

impl PostArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(m) = self.min_size {
            cfg.postproc.min_size = Some(m);
        }
        if let Some(c) = &self.connectivity {
            cfg.postproc.connectivity = if c == "4" { Connectivity::Four } else { Connectivity::Eight };
        }
        if let Some(b) = self.otsu_bins {
            cfg.postproc.otsu_bins = b;
        }
    }
}

fn resolve_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Some(Command::Synth { count, side }) => {
            cfg.synth.count = count.unwrap_or(cfg.synth.count);
            cfg.synth.side = side.unwrap_or(cfg.synth.side);
        }
        Some(Command::Train { epochs, batch_size, through_iterations, post, .. }) => {
            cfg.refine.epochs = epochs.unwrap_or(cfg.refine.epochs);
            cfg.refine.batch_size = batch_size.unwrap_or(cfg.refine.batch_size);
            cfg.refine.through_iterations |= through_iterations;
            post.apply(&mut cfg);
        }
        Some(Command::Refine { n_iters, tile, overlap, post, .. }) => {
            if n_iters.is_some() {
                cfg.inference.n_iters = *n_iters;
            }
            if tile.is_some() {
                cfg.inference.tile = *tile;
            }
            cfg.inference.overlap = overlap.unwrap_or(cfg.inference.overlap);
            post.apply(&mut cfg);
        }
        _ => {}
    }
    cfg.resolve_seeds();
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(&cli)?;
    if cli.dump_config {
        // A closed stdout (e.g. piped into `head`) is not an error here.
        let _ = writeln!(std::io::stdout(), "{}", cfg.to_json());
        return Ok(());
    }
    let command = cli.command.ok_or_else(|| UsageError("a subcommand is required (see --help)".into()))?;
    let out = cli.out.ok_or_else(|| UsageError("--out is required".into()))?;
    let jobs = usize::from(cli.jobs);
    match command {
        Command::Synth { .. } => commands::synth(&cfg, &out, jobs),
        Command::Mine { input } => commands::mine(&cfg, &out, &input, jobs),
        Command::Simulate { corpus } => commands::simulate(&cfg, &out, &corpus, jobs),
        Command::Train { corpus, holdout, .. } => commands::train(&cfg, &out, &corpus, holdout.as_deref(), jobs),
        Command::Refine { checkpoint, corpus, .. } => commands::refine(&cfg, &out, &checkpoint, &corpus, jobs),
        Command::Evaluate { corpus, refined } => commands::evaluate(&cfg, &out, &corpus, &refined, jobs),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Divergence { .. } => 3,
                Error::InvalidConfig(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let help = config_keys_help();
    let cmd = Cli::command()
        .after_help(help.clone())
        .mut_subcommands(|s| s.after_help(help.clone()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
