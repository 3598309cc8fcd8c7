//! gilab: a desk-scale federated-learning privacy lab.
//!
//! `gilab <command> --config <path> [--threads N] [--seed S] [overrides...]`
//!
//! Overrides use the dotted path of any scalar config field as the flag
//! name, e.g. `--attack.lr 0.05`. Exit codes: 0 success, 2 config error,
//! 3 digest mismatch between chained stages, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

mod artifacts;
mod commands;
mod config;
mod dataset;

use gilab_core::par::Threads;

#[derive(Debug)]
pub enum CliError {
    /// Problems a config edit fixes: unparsable file, invalid values,
    /// missing sections, dataset shape clashes.
    Config(String),
    /// Artifacts on disk belong to a different config digest.
    Digest(String),
    /// Runtime failures: IO, divergence, corrupt checkpoints.
    Failure(String),
}

impl From<gilab_core::error::Error> for CliError {
    fn from(e: gilab_core::error::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

const USAGE: &str = "\
gilab - gradient-inversion privacy lab

USAGE:
    gilab <command> --config <path> [--threads N] [--seed S] [--<dotted.path> <value>]...

COMMANDS:
    train-probe     train the perceptual probe classifier on the surrogate set
    collect         attack surrogate updates and harvest denoising pairs
    train-denoiser  train the denoiser on collected pairs
    attack          run the plain gradient-inversion attack on victim batches
    guide           run the denoiser-augmented attack on victim batches
    report          score reconstructions and write metric tables

FLAGS:
    --config <path>      experiment TOML, required
    --threads <N>        worker threads, default 1; results are identical for any N
    --seed <S>           override the master seed
    --<dotted.path> <v>  override a scalar config field, e.g. --attack.lr 0.05

EXIT CODES:
    0 success, 2 config error, 3 digest mismatch between chained stages
";

const COMMANDS: [&str; 6] = [
    "train-probe",
    "collect",
    "train-denoiser",
    "attack",
    "guide",
    "report",
];

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Digest(m)) => {
            eprintln!("digest mismatch: {m}");
            ExitCode::from(3)
        }
        Err(CliError::Failure(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn run(args: &[String]) -> Result<(), CliError> {
    let Some(command) = args.first() else {
        print!("{USAGE}");
        return Ok(());
    };
    match command.as_str() {
        "--help" | "-h" | "help" => {
            print!("{USAGE}");
            return Ok(());
        }
        "--version" | "-V" => {
            println!("gilab {}", env!("CARGO_PKG_VERSION"));
            return Ok(());
        }
        c if COMMANDS.contains(&c) => {}
        other => {
            return Err(CliError::Config(format!(
                "unknown command {other:?}\n\n{USAGE}"
            )));
        }
    }

    let mut config_path: Option<PathBuf> = None;
    let mut threads: usize = 1;
    let mut seed: Option<u64> = None;
    let mut overrides: Vec<(String, String)> = Vec::new();

    let mut it = args[1..].iter();
    while let Some(arg) = it.next() {
        if arg == "--help" || arg == "-h" {
            print!("{USAGE}");
            return Ok(());
        }
        let Some(name) = arg.strip_prefix("--") else {
            return Err(CliError::Config(format!(
                "unexpected argument {arg:?}; flags look like --name value"
            )));
        };
        let (name, inline) = match name.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (name, None),
        };
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .cloned()
                .ok_or_else(|| CliError::Config(format!("flag --{name} needs a value")))?,
        };
        match name {
            "config" => config_path = Some(PathBuf::from(value)),
            "threads" => {
                threads = value.parse().map_err(|_| {
                    CliError::Config(format!("--threads expects a number, got {value:?}"))
                })?;
            }
            "seed" => {
                seed = Some(value.parse().map_err(|_| {
                    CliError::Config(format!("--seed expects a non-negative integer, got {value:?}"))
                })?);
            }
            _ => overrides.push((name.to_string(), value)),
        }
    }

    let config_path = config_path
        .ok_or_else(|| CliError::Config(format!("--config <path> is required\n\n{USAGE}")))?;
    let exp = config::load(&config_path, seed, &overrides)?;
    let digest = exp.digest();
    let _lock = artifacts::DirLock::acquire(&exp.output_dir, command)?;
    let ctx = commands::Ctx {
        exp,
        digest,
        threads: Threads::new(threads),
        thread_count: threads,
    };
    match command.as_str() {
        "train-probe" => commands::train_probe(&ctx),
        "collect" => commands::collect(&ctx),
        "train-denoiser" => commands::train_denoiser(&ctx),
        "attack" => commands::attack(&ctx),
        "guide" => commands::guide(&ctx),
        "report" => commands::report(&ctx),
        _ => unreachable!(),
    }
}
