use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use turnsight_core::config::EngineConfig;
use turnsight_core::engine::{self, EvalInputs, StatsInput, Subset};
use turnsight_core::Error;

/// Streaming speech-act perception with evidence-grounded rationales.
#[derive(Parser, Debug)]
#[command(name = "turnsight", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override such as `train.optim.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Directory for every artifact and the manifest.
    #[arg(long, default_value = "out", global = true)]
    out_dir: PathBuf,
    /// Root seed for all random streams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Skip malformed records instead of aborting.
    #[arg(long, global = true)]
    lenient: bool,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic corpus with a train/val/test split.
    Synth {
        #[arg(long)]
        dialogues: Option<usize>,
        /// Seconds per dialogue.
        #[arg(long)]
        duration: Option<usize>,
        /// Embedding width for every module.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train the speech-act perceiver on the training split.
    TrainPerceiver(TrainArgs),
    /// Train the evidence selector on the training split.
    TrainSelector(TrainArgs),
    /// Train the seq2seq rationale decoder on gold chains.
    TrainDecoder(TrainArgs),
    /// Stream dialogues through the full per-tick pipeline.
    Run {
        /// Input stream; defaults to `<out-dir>/stream.jsonl`.
        #[arg(long)]
        stream: Option<PathBuf>,
        /// template, trainable or remote.
        #[arg(long)]
        backend: Option<String>,
        /// train, val, test or all. Defaults to test when a split exists.
        #[arg(long)]
        subset: Option<Subset>,
        /// Evidence window in seconds.
        #[arg(long)]
        window: Option<u64>,
    },
    /// Score predictions against gold labels.
    Eval {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        selections: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Annotated stream for gold labels and event statistics.
        #[arg(long)]
        stream: Option<PathBuf>,
    },
    /// Event statistics (IPU, pause, gap, overlap) from voicing flags.
    Stats {
        #[arg(long, conflicts_with = "vad", required_unless_present = "vad")]
        stream: Option<PathBuf>,
        /// CSV with one `a,b` row of 0/1 voicing per tick.
        #[arg(long)]
        vad: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training stream; defaults to `<out-dir>/stream.jsonl`.
    #[arg(long)]
    stream: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

/// Debug formatting doubles as a TOML literal for the flag types used here:
/// floats keep their exponent and strings get quoted.
fn push<T: std::fmt::Debug>(out: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push(format!("{key}={v:?}"));
    }
}

fn overrides(cli: &Cli) -> Vec<String> {
    let c = &cli.common;
    let mut o = c.set.clone();
    if let Some(s) = c.seed {
        o.push(format!("seed={s}"));
        o.push(format!("synth.seed={s}"));
    }
    if c.lenient {
        o.push("ingest=\"lenient\"".into());
    }
    match &cli.command {
        Command::Synth {
            dialogues,
            duration,
            dim,
            margin,
            noise,
        } => {
            push(&mut o, "synth.dialogues", *dialogues);
            push(&mut o, "synth.duration_s", *duration);
            for k in ["synth.emb_dim", "perceiver.emb_dim", "selector.emb_dim"] {
                push(&mut o, k, *dim);
            }
            push(&mut o, "synth.margin", *margin);
            push(&mut o, "synth.noise", *noise);
        }
        Command::TrainPerceiver(a) | Command::TrainSelector(a) => {
            push(&mut o, "train.epochs", a.epochs);
            push(&mut o, "train.optim.lr", a.lr);
            push(&mut o, "train.batch_size", a.batch_size);
        }
        Command::TrainDecoder(a) => {
            push(&mut o, "decoder_train.epochs", a.epochs);
            push(&mut o, "decoder_train.optim.lr", a.lr);
            push(&mut o, "decoder_train.batch_size", a.batch_size);
        }
        Command::Run { backend, window, .. } => {
            push(&mut o, "backend", backend.as_ref());
            push(&mut o, "window", *window);
        }
        Command::Eval { .. } | Command::Stats { .. } => {}
    }
    o
}

/// Input path: explicit or the default file in the output directory. A
/// missing input is a usage error.
fn input(p: &Option<PathBuf>, dir: &Path, name: &str) -> Result<PathBuf, Error> {
    let path = p.clone().unwrap_or_else(|| dir.join(name));
    if !path.is_file() {
        return Err(Error::Config(format!("input {} does not exist", path.display())));
    }
    Ok(path)
}

/// An explicit path, which must exist, else the default file if present.
fn optional(p: &Option<PathBuf>, dir: &Path, name: &str) -> Result<Option<PathBuf>, Error> {
    match p {
        Some(_) => input(p, dir, name).map(Some),
        None => Ok(Some(dir.join(name)).filter(|d| d.is_file())),
    }
}

fn print<T: Serialize>(v: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), Error> {
    let cfg = EngineConfig::load(cli.common.config.as_deref(), &overrides(cli))?;
    let out = &cli.common.out_dir;
    match &cli.command {
        Command::Synth { .. } => print(&engine::synth_command(&cfg, out)?),
        Command::TrainPerceiver(a) => {
            let stream = input(&a.stream, out, engine::STREAM_FILE)?;
            print(&engine::train_perceiver_command(&cfg, out, &stream)?)
        }
        Command::TrainSelector(a) => {
            let stream = input(&a.stream, out, engine::STREAM_FILE)?;
            print(&engine::train_selector_command(&cfg, out, &stream)?)
        }
        Command::TrainDecoder(a) => {
            let stream = input(&a.stream, out, engine::STREAM_FILE)?;
            print(&engine::train_decoder_command(&cfg, out, &stream)?)
        }
        Command::Run { stream, subset, .. } => {
            let stream = input(stream, out, engine::STREAM_FILE)?;
            let subset = subset.unwrap_or(if out.join(engine::SPLIT_FILE).exists() {
                Subset::Test
            } else {
                Subset::All
            });
            print(&engine::run_command(&cfg, out, &stream, subset)?)
        }
        Command::Eval {
            predictions,
            selections,
            labels,
            stream,
        } => {
            let inputs = EvalInputs {
                predictions: input(predictions, out, engine::PREDICTIONS_FILE)?,
                selections: optional(selections, out, engine::SELECTIONS_FILE)?,
                labels: optional(labels, out, engine::LABELS_FILE)?,
                stream: optional(stream, out, engine::STREAM_FILE)?,
            };
            print(&engine::eval_command(&cfg, out, &inputs)?)
        }
        Command::Stats { stream, vad } => {
            let source = match (stream, vad) {
                (_, Some(v)) => StatsInput::Vad(input(&Some(v.clone()), out, "")?),
                (Some(s), None) => StatsInput::Stream(input(&Some(s.clone()), out, "")?),
                (None, None) => return Err(Error::Config("stats needs --stream or --vad".into())),
            };
            let table = engine::stats_command(&cfg, out, &source)?;
            print!("{}", table.to_csv());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
