//! `trajflow`: preprocess tracks, build maps, train, sample, evaluate and plot.

mod commands;
mod manifest;
mod plot;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use settings::{parse_override, read_config_file, Settings, CONFIG_ENV};

#[derive(Parser, Debug)]
#[command(name = "trajflow", version, about = "Diverse and admissible multi-agent trajectory forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// key=value config file, or a manifest from an earlier run.
    /// Defaults to $TRAJFLOW_CONFIG when set.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config entry; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Smooth raw tracks and slice them into episodes.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Raw tracks, one agent per JSON line.
        #[arg(long)]
        input: Option<PathBuf>,
        /// 224x224 PGM road map from which per-episode masks are cropped.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Output episode file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write distance maps and priors beside every mask of an episode file.
    MakeMaps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<PathBuf>,
    },
    /// Generate synthetic fork-road episodes.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; checkpoints and the log go to the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw k hypotheses per agent from a trained model.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions: minADE, avgADE, minFDE, avgFDE, rF, DAO, DAC.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Summary CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-agent CSV.
        #[arg(long)]
        per_agent: Option<PathBuf>,
    },
    /// Render one episode over its prior map as a PNG.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<PathBuf>,
        /// Episode id; defaults to the first episode.
        #[arg(long)]
        episode: Option<String>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Checkpoint whose normalization statistics shape the prior.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn p(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

/// Config file entries, then flags, then `--set` overrides.
fn settings(common: &Common, flags: &[(&str, Option<String>)]) -> anyhow::Result<Settings> {
    let mut s = Settings::default();
    let path = common
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    if let Some(path) = path {
        s.extend(read_config_file(&path)?);
    }
    for (k, v) in flags {
        s.set_opt(k, v);
    }
    for o in &common.overrides {
        let (k, v) = parse_override(o)?;
        s.set(k, v);
    }
    Ok(s)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    use commands::*;
    match cli.command {
        Command::Preprocess { common, input, mask, out } => {
            let s = settings(&common, &[("input", p(&input)), ("mask", p(&mask)), ("out", p(&out))])?;
            preprocess(&s)
        }
        Command::MakeMaps { common, episodes } => make_maps(&settings(&common, &[("episodes", p(&episodes))])?),
        Command::Synth { common, n, seed, out } => {
            let s = settings(
                &common,
                &[("n", n.map(|v| v.to_string())), ("seed", seed.map(|v| v.to_string())), ("out", p(&out))],
            )?;
            synth(&s)
        }
        Command::Train { common, seed, train, val, out } => {
            let s = settings(
                &common,
                &[
                    ("seed", seed.map(|v| v.to_string())),
                    ("train", p(&train)),
                    ("val", p(&val)),
                    ("out", p(&out)),
                ],
            )?;
            commands::train(&s)
        }
        Command::Sample { common, checkpoint, episodes, k, seed, out } => {
            let s = settings(
                &common,
                &[
                    ("checkpoint", p(&checkpoint)),
                    ("episodes", p(&episodes)),
                    ("k", k.map(|v| v.to_string())),
                    ("seed", seed.map(|v| v.to_string())),
                    ("out", p(&out)),
                ],
            )?;
            sample(&s)
        }
        Command::Evaluate { common, episodes, predictions, out, per_agent } => {
            let s = settings(
                &common,
                &[
                    ("episodes", p(&episodes)),
                    ("predictions", p(&predictions)),
                    ("out", p(&out)),
                    ("per_agent", p(&per_agent)),
                ],
            )?;
            evaluate(&s)
        }
        Command::Plot { common, episodes, episode, predictions, checkpoint, out } => {
            let s = settings(
                &common,
                &[
                    ("episodes", p(&episodes)),
                    ("episode", episode),
                    ("predictions", p(&predictions)),
                    ("checkpoint", p(&checkpoint)),
                    ("out", p(&out)),
                ],
            )?;
            plot_cmd(&s)
        }
    }
}

/// 2 for numerical faults, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .any(|e| e.downcast_ref::<trajflow::Error>().is_some_and(trajflow::Error::is_numerical));
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
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
