use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use stylecraft::pipeline::{
    run_eval, run_sample, run_transfer, run_tune, ConfigError, Overrides, PipelineError, RunConfig, MANIFEST_FILE,
};

const EXIT_CONFIG: u8 = 1;
const EXIT_PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(name = "stylecraft", version, about = "Few-shot textual style transfer with contrastive decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rewrite every input and write a run manifest.
    Transfer(RunArgs),
    /// Score a manifest and append the report to it.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        references: Option<PathBuf>,
        /// Use this config instead of the one recorded in the manifest.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Search the contrast weights on a held-out slice of the few-shot pool.
    Tune(RunArgs),
    /// Print the few-shot representatives as JSON lines.
    Sample(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    fewshot: Option<PathBuf>,
    #[arg(long)]
    inputs: Option<PathBuf>,
    #[arg(long)]
    references: Option<PathBuf>,
    #[arg(long)]
    negative_context: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    sample_seed: Option<u64>,
    #[arg(long)]
    embed_seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    cache: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::load(&self.config)?;
        Overrides {
            fewshot: self.fewshot.clone(),
            inputs: self.inputs.clone(),
            references: self.references.clone(),
            negative_context: self.negative_context.clone(),
            output_dir: self.output_dir.clone(),
            k: self.k,
            sample_seed: self.sample_seed,
            embed_seed: self.embed_seed,
            alpha: self.alpha,
            beta: self.beta,
            max_tokens: self.max_tokens,
            workers: self.workers,
            cache: self.cache.clone(),
        }
        .apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn fail(e: impl std::fmt::Display) -> ExitCode {
    error!("{e}");
    eprintln!("error: {e}");
    ExitCode::from(EXIT_CONFIG)
}

fn json_line<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn run(cli: Cli) -> Result<ExitCode, PipelineError> {
    match cli.command {
        Command::Transfer(args) => {
            let cfg = args.load()?;
            let manifest = run_transfer(&cfg)?;
            println!("{}", cfg.output_dir.join(MANIFEST_FILE).display());
            if manifest.failures > 0 {
                eprintln!("{} of {} items failed", manifest.failures, manifest.items.len());
                return Ok(ExitCode::from(EXIT_PARTIAL));
            }
        }
        Command::Eval {
            manifest,
            references,
            config,
        } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            let report = run_eval(&manifest, references.as_deref(), cfg.as_ref())?;
            println!("{}", json_line(&report));
        }
        Command::Tune(args) => {
            let cfg = args.load()?;
            let outcome = run_tune(&cfg)?;
            println!("{}", json_line(&outcome.best));
        }
        Command::Sample(args) => {
            let cfg = args.load()?;
            for pair in run_sample(&cfg)? {
                println!("{}", json_line(&pair));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    run(Cli::parse()).unwrap_or_else(fail)
}
