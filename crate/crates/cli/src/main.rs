use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use nmid_cli::config::{PipelineConfig, Sampler};
use nmid_cli::server::{serve, AppState, ServerOptions};
use nmid_cli::stages::{self, Paths, StageOutcome};
use nmid_core::curation::CurationStore;
use nmid_core::io::{DatasetManifest, Split};

/// Micrograph identification pipeline: mining, self-supervised encoder
/// training, few-shot classification through a multimodal backend, and
/// curation of synthetic images.
#[derive(Parser)]
#[command(name = "nmid", version)]
struct Cli {
    /// Pipeline config (TOML). Defaults apply when the file is absent and not given explicitly.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Recompute even when the stage stamp matches.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the seeded synthetic dataset into `dataset.root`.
    GenData,
    /// Scan `dataset.root` into `prepare/manifest.jsonl`.
    Prepare,
    /// Hard-example mining and train/test split. Needs `prepare/manifest.jsonl`.
    Mine,
    /// Contrastive encoder training. Needs `mine/manifest.jsonl`.
    Train,
    /// Embed the augmented train set. Needs `mine/manifest.jsonl` and `train/checkpoint.bin`.
    Embed,
    /// Question train images with the VQA backend. Needs `mine/manifest.jsonl`.
    Describe,
    /// Generate synthetic images from transcripts and queue them for review.
    /// Needs `describe/transcripts.jsonl` and `describe/sources.json`.
    Synthesize,
    /// Serve the curation API.
    ReviewServe {
        /// Address to bind; overrides `review.bind`.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Few-shot classification of the test split. Needs the embed and train artifacts.
    Classify {
        #[arg(long, value_enum)]
        sampler: Option<Sampler>,
        /// Demonstrations per prompt.
        #[arg(long)]
        k: Option<usize>,
        /// Seed for the random sampler.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score predictions. Needs `classify/predictions.jsonl`.
    Evaluate,
    /// Run every stage in order.
    RunAll,
    /// Print the effective config (defaults, file and overrides) as TOML.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    match &cli.config {
        Some(p) => PipelineConfig::load(p, &cli.overrides),
        None => {
            let default = PathBuf::from("nmid.toml");
            if default.is_file() {
                PipelineConfig::load(&default, &cli.overrides)
            } else {
                PipelineConfig::from_toml("", &cli.overrides)
            }
        }
    }
}

fn report(outcome: &StageOutcome) {
    let state = if outcome.skipped { "up to date" } else { "done" };
    println!("{:<11} {state}", outcome.stage);
    for p in &outcome.outputs {
        println!("    {}", p.display());
    }
}

fn review_serve(cfg: &PipelineConfig, bind: Option<String>) -> Result<()> {
    let store = CurationStore::open(&Paths::review_dir(cfg))?;
    let mined = Paths::mined(cfg);
    let train = if mined.is_file() {
        DatasetManifest::read_jsonl(&mined)?.split(Split::Train)
    } else {
        log::warn!("{} not found; the augmented manifest will hold synthetic records only", mined.display());
        DatasetManifest::default()
    };
    let r = &cfg.review;
    let state = Arc::new(AppState { store, train, token: r.token.clone() });
    let opts = ServerOptions { cors_origin: r.cors_origin.clone(), ui_dir: r.ui_dir.clone() };
    let bind = bind.unwrap_or_else(|| r.bind.clone());
    tokio::runtime::Runtime::new()?.block_on(serve(&bind, state, opts))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli).context("config")?;
    let single = |cfg: &PipelineConfig, stage: &str| -> Result<()> {
        let outcome = stages::run_one(cfg, stage, cli.force).with_context(|| format!("stage {stage} failed"))?;
        report(&outcome);
        Ok(())
    };
    match cli.command {
        Command::GenData => single(&cfg, "gen-data"),
        Command::Prepare => single(&cfg, "prepare"),
        Command::Mine => single(&cfg, "mine"),
        Command::Train => single(&cfg, "train"),
        Command::Embed => single(&cfg, "embed"),
        Command::Describe => single(&cfg, "describe"),
        Command::Synthesize => single(&cfg, "synthesize"),
        Command::Evaluate => single(&cfg, "evaluate"),
        Command::Classify { sampler, k, seed } => {
            let r = &mut cfg.retrieval;
            r.sampler = sampler.unwrap_or(r.sampler);
            r.k = k.unwrap_or(r.k);
            r.seed = seed.unwrap_or(r.seed);
            cfg.validate()?;
            single(&cfg, "classify")
        }
        Command::RunAll => {
            for o in stages::run_all(&cfg, cli.force)? {
                report(&o);
            }
            Ok(())
        }
        Command::ReviewServe { bind } => review_serve(&cfg, bind),
        Command::ShowConfig => {
            print!("{}", toml::to_string(&cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
