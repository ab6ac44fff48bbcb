mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use codebrain::config::{parse_entries, parse_override, Preset, RunConfig};

use crate::commands::Failure;

#[derive(Parser)]
#[command(name = "codebrain", version, about = "Two-stage EEG tokenizer and backbone at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; every command writes below it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `section.key=value` override; repeatable, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Resolve the config, check prerequisites, write manifests and stop.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled synthetic records and a train/val/test manifest.
    GenData {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        records: Option<usize>,
    },
    /// Stage 1: train the dual-codebook tokenizer.
    TrainTokenizer,
    /// Stage 2: masked token prediction on the backbone.
    TrainSsm,
    /// Frozen-backbone probe over several seeds with shuffled-label controls.
    Probe,
    /// Code usage, dominance and diversity tables plus loss plots.
    Analyze,
    /// Time the FFT convolution path against dense attention and direct convolution.
    Bench,
}

fn resolve(common: &Common, extra: Vec<(String, String)>) -> Result<RunConfig, Failure> {
    let preset: Preset = common.preset.parse()?;
    let mut entries = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
            parse_entries(&text)?
        }
        None => Vec::new(),
    };
    if let Some(seed) = common.seed {
        entries.push(("run.seed".into(), seed.to_string()));
    }
    if let Some(out) = &common.out {
        entries.push(("run.out".into(), out.display().to_string()));
    }
    entries.extend(extra);
    for s in &common.set {
        entries.push(parse_override(s)?);
    }
    Ok(RunConfig::resolve(preset, &entries)?)
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("CODEBRAIN_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Config(format!("CODEBRAIN_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Other(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    let mut extra = Vec::new();
    if let Command::GenData { classes, records } = &cli.command {
        if let Some(k) = classes {
            extra.push(("data.classes".into(), k.to_string()));
        }
        if let Some(n) = records {
            extra.push(("data.records".into(), n.to_string()));
        }
    }
    let cfg = resolve(&cli.common, extra)?;
    let dry = cli.common.dry_run;
    match cli.command {
        Command::GenData { .. } => commands::gen_data(&cfg, dry),
        Command::TrainTokenizer => commands::train_tokenizer(&cfg, dry),
        Command::TrainSsm => commands::train_ssm(&cfg, dry),
        Command::Probe => commands::probe(&cfg, dry),
        Command::Analyze => commands::analyze(&cfg, dry),
        Command::Bench => commands::bench(&cfg, dry),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
