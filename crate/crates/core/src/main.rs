use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use iimt::pipeline::{Pipeline, PipelineConfig, Stage, TrainOptions};
use iimt::synth::{read_tsv, toy_corpus};
use iimt::Error;

/// Exit codes: 0 success, 1 configuration or usage error, 2 partial failure
/// (some inputs failed), 3 runtime failure.
#[derive(Parser)]
#[command(name = "iimt", version, about = "In-image machine translation on synthetic data")]
struct Cli {
    /// TOML configuration; omitted keys keep their defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overrides `seed` from the config file
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for every output
    #[arg(long, global = true, default_value = "iimt-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a parallel corpus into a split image dataset
    Synth {
        /// Tab-separated `source<TAB>target` file
        #[arg(long, conflicts_with = "toy", required_unless_present = "toy")]
        corpus: Option<PathBuf>,
        /// Generate this many pairs from the built-in toy grammar instead
        #[arg(long)]
        toy: Option<usize>,
    },
    /// Train one stage; stages run in the order tokenizer, teacher, iimt
    Train {
        #[arg(value_enum)]
        stage: StageArg,
        /// Continue from the last run checkpoint of this stage
        #[arg(long)]
        resume: bool,
        #[arg(long, hide = true)]
        stop_after_steps: Option<usize>,
    },
    /// Translate source images into target-language images
    Translate {
        /// Input PNG files
        inputs: Vec<PathBuf>,
        /// Translate every source image of this dataset split instead
        #[arg(long, conflicts_with = "inputs")]
        split: Option<String>,
    },
    /// Score translated images against a dataset split
    Evaluate {
        /// Directory of `{id}.png` outputs (default: the translations directory)
        #[arg(long)]
        outputs: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Tokenizer,
    Teacher,
    Iimt,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Tokenizer => Stage::Tokenizer,
            StageArg::Teacher => Stage::Teacher,
            StageArg::Iimt => Stage::Iimt,
        }
    }
}

fn run(cli: Cli) -> iimt::Result<u8> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let pipe = Pipeline::new(cfg, &cli.out);
    match cli.command {
        Command::Synth { corpus, toy } => {
            let pairs = match (corpus, toy) {
                (Some(path), _) => {
                    let c = read_tsv(&path)?;
                    if c.skipped > 0 {
                        log::warn!("{}: skipped {} malformed lines", path.display(), c.skipped);
                    }
                    c.pairs
                }
                (None, Some(n)) => toy_corpus(n, pipe.cfg.seed),
                (None, None) => unreachable!("clap requires one corpus source"),
            };
            let summary = pipe.synth(&pairs)?;
            println!("{}", serde_json::to_string(&summary)?);
            Ok(0)
        }
        Command::Train { stage, resume, stop_after_steps } => {
            let opts = TrainOptions { resume, stop_after: stop_after_steps };
            let summary = pipe.train(stage.into(), opts)?;
            println!("{}", serde_json::to_string(&summary)?);
            Ok(0)
        }
        Command::Translate { inputs, split } => {
            let inputs = match split {
                Some(s) => pipe.split_inputs(&s)?,
                None if inputs.is_empty() => {
                    return Err(Error::Config("give input files or --split".into()));
                }
                None => inputs
                    .into_iter()
                    .map(|p| (p.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned()), p))
                    .collect(),
            };
            let outcome = pipe.translate(&inputs)?;
            println!("{}", serde_json::to_string(&outcome)?);
            Ok(if outcome.failed > 0 { 2 } else { 0 })
        }
        Command::Evaluate { outputs, split } => {
            let outputs = outputs.unwrap_or_else(|| pipe.translations_dir());
            let report = pipe.evaluate(&outputs, &split)?;
            let headline = serde_json::json!({
                "examples": report.examples,
                "bleu": report.bleu,
                "structure_bleu": report.structure_bleu,
                "ssim": report.ssim,
                "wer": report.wer,
            });
            println!("{headline}");
            if !report.missing.is_empty() {
                log::warn!("{} outputs missing, scored as blank", report.missing.len());
                return Ok(2);
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(match e {
                Error::Config(_) => 1,
                _ => 3,
            })
        }
    }
}
