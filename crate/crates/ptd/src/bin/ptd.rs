use std::io::{self as stdio, IsTerminal};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ptd::config::ExperimentConfig;
use ptd::error::{Error, Result};
use ptd::{dataset, demo, io, pipeline};
use ptd_core::corpus::{SlotTable, Split, Utterance};
use ptd_core::synth::{self, SynthConfig};
use serde::Serialize;

/// Wait-or-answer turn-taking: corpus construction, training, evaluation
/// and decisions.
#[derive(Parser)]
#[command(name = "ptd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Construct a corpus and print its statistics.
    BuildDataset {
        #[arg(long = "in")]
        input: PathBuf,
        /// JSON object mapping slot values to placeholders.
        #[arg(long)]
        slots: Option<PathBuf>,
        /// Share of multi-sentence user turns to split into sub-turns.
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus with train/valid/test splits.
    Synth {
        #[arg(long)]
        dialogues: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Drop the surface cues that mark the label.
        #[arg(long)]
        hard: bool,
    },
    /// Train every model and print the report.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config field, e.g. `--set prediction.hidden=32`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score the checkpoints of a run on a corpus.
    Evaluate {
        #[arg(long)]
        ckpts: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Only dialogues of this split.
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
    },
    /// Decide for one history given as a file or inline JSON array.
    Decide {
        #[arg(long)]
        ckpts: PathBuf,
        #[arg(long = "history-json")]
        history: String,
    },
    /// Interactive decision loop on stdin.
    Demo {
        #[arg(long)]
        ckpts: PathBuf,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown split {s:?}"))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable output"));
    Ok(())
}

fn read_history(arg: &str) -> Result<Vec<Utterance>> {
    if arg.trim_start().starts_with('[') {
        serde_json::from_str(arg).map_err(|e| Error::parse("<history-json>", e.line(), e))
    } else {
        io::read_json(Path::new(arg))
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::BuildDataset {
            input,
            slots,
            fraction,
            seed,
            out,
        } => {
            let raw = io::read_corpus(&input)?;
            let slots = match slots {
                Some(p) => io::read_slots(&p)?,
                None => SlotTable::default(),
            };
            let (built, segment) = dataset::build(&raw, &slots, fraction, seed)?;
            io::write_corpus(&out, &built)?;
            print_json(&dataset::stats(&built, segment))
        }
        Command::Synth {
            dialogues,
            seed,
            out,
            hard,
        } => {
            let corpus = synth::generate(&SynthConfig { dialogues, seed, hard })?;
            io::write_corpus(&out, &corpus)?;
            print_json(&dataset::stats(&corpus, Default::default()))
        }
        Command::Train { config, overrides } => {
            let base = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            let config = base.with_overrides(&overrides)?;
            print_json(&pipeline::run_training(&config)?.report)
        }
        Command::Evaluate { ckpts, corpus, split } => print_json(&pipeline::evaluate_checkpoints(&ckpts, &corpus, split)?),
        Command::Decide { ckpts, history } => {
            let history = read_history(&history)?;
            pipeline::check_history(&history)?;
            print_json(&pipeline::Models::load(&ckpts)?.infer(&history)?)
        }
        Command::Demo { ckpts } => {
            let models = pipeline::Models::load(&ckpts)?;
            let color = std::env::var_os("NO_COLOR").is_none() && stdio::stdout().is_terminal();
            demo::run(&models, stdio::stdin().lock(), stdio::stdout().lock(), color)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
