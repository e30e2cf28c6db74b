//! `ctmkit`: run the topic modeling pipeline from a TOML config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctmkit_core::ntm::Precision;
use ctmkit_core::pipeline::{self, Overrides, PipelineError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "ctmkit", version, about = "Topic models with cross-lingual transfer")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; replaces any `seeds` list in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Parameter precision during training.
    #[arg(long, global = true, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// Output directory, overriding `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tokenize, build vocabularies and write bags of words.
    Ingest,
    /// Fit LDA (with the optional topic-count sweep) and bootstrap labels.
    Lda,
    /// Recompute labels from an LDA checkpoint.
    Label {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the configured neural topic model.
    Train,
    /// Evaluate a trained model.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every stage for every seed and model and summarize.
    Repro,
    /// Write a config with every default filled in.
    InitConfig {
        /// Where to write the config.
        path: PathBuf,
        /// Corpus manifest the config should point at.
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse()
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let path = cli.config.as_deref().ok_or_else(|| {
        PipelineError::ConfigInvalid(vec![pipeline::FieldError {
            field: "config".into(),
            message: "--config is required".into(),
        }])
    })?;
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(&Overrides {
        seed: cli.seed,
        precision: cli.precision,
        output_dir: cli.out.clone(),
    });
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    if let Command::InitConfig { path, manifest } = &cli.command {
        return write_config(path, manifest);
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Ingest => print_json(&pipeline::cmd_ingest(&cfg)?),
        Command::Lda => print_json(&pipeline::cmd_lda(&cfg)?.labels),
        Command::Label { checkpoint } => print_json(&pipeline::cmd_label(&cfg, checkpoint.as_deref())?),
        Command::Train => {
            let (_, log) = pipeline::cmd_train(&cfg)?;
            if let Some(last) = log.last() {
                print_json(last);
            }
        }
        Command::Eval { checkpoint } => print_json(&pipeline::cmd_eval(&cfg, checkpoint.as_deref())?),
        Command::Repro => print_json(&pipeline::cmd_repro(&cfg)?),
        Command::InitConfig { .. } => unreachable!(),
    }
    Ok(())
}

fn write_config(path: &Path, manifest: &Path) -> Result<(), PipelineError> {
    pipeline::write_default_config(path, manifest).map_err(|e| PipelineError::Stage {
        stage: "init-config",
        source: Box::new(e),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e).and_then(|s| s.source());
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
