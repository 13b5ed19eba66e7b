//! `curriculum`: runs the learnability-curriculum pipeline from a run config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use curriculum_core::config::RunConfig;
use curriculum_core::pipeline::{Pipeline, Stage};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Ingest,
    TrainProxy,
    Score,
    TrainMain,
    Probe,
    Analyze,
    All,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Ingest => Stage::Ingest,
            StageArg::TrainProxy => Stage::TrainProxy,
            StageArg::Score => Stage::Score,
            StageArg::TrainMain => Stage::TrainMain,
            StageArg::Probe => Stage::Probe,
            StageArg::Analyze => Stage::Analyze,
            StageArg::All => Stage::All,
        }
    }
}

/// Score a corpus with a small proxy model, then pretrain on it with a
/// learnability curriculum, its reverse and uniform sampling.
#[derive(Debug, Parser)]
#[command(name = "curriculum", version)]
struct Args {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `out_dir`, else `out/`
    /// next to the config file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "all")]
    stage: StageArg,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let args = Args::parse();
    let config = match RunConfig::load(&args.config, args.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let out = args.out.unwrap_or_else(|| Pipeline::default_out_dir(&config));
    let stage = Stage::from(args.stage);
    match Pipeline::new(config, &out).run(stage) {
        Ok(()) => {
            log::info!("{stage} finished; artifacts in {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
