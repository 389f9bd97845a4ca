use std::path::PathBuf;
use std::process::ExitCode;

use adaptsearch::config::ExperimentConfig;
use adaptsearch::evalbench::BaselinePreset;
use adaptsearch::experiment::{self, EvalTarget};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adaptsearch", version, about = "Per-stage adaptation policy search for few-shot classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the run directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the backbone on all training classes.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Alternating search over per-stage policies.
    Search {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint (defaults to the run directory's).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Total search iterations.
        #[arg(long)]
        episodes: Option<usize>,
        /// Continue from the run directory's supernet checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Progressive decoding of a searched supernet.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint or a baseline preset on test tasks.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "preset")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Test episodes.
        #[arg(long)]
        episodes: Option<usize>,
        /// Average logits over cropped views of each query image.
        #[arg(long)]
        multicrop: bool,
    },
    /// Fit and evaluate baseline presets (all of them by default).
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Vec<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        multicrop: bool,
    },
    /// Comparison table and α plot data from a run directory.
    Report {
        /// Run directory holding eval reports.
        #[arg(long)]
        output: PathBuf,
        /// Combine reports written under different configs.
        #[arg(long)]
        allow_mixed: bool,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::read(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.output {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn parse_preset(name: &str) -> Result<BaselinePreset> {
    Ok(name.parse::<BaselinePreset>()?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common } => {
            let cfg = load(&common)?;
            let out = experiment::cmd_pretrain(&cfg)?;
            println!("pretrained checkpoint {} (sha256 {})", out.path.display(), out.checkpoint_hash);
        }
        Command::Search { common, checkpoint, episodes, resume } => {
            let mut cfg = load(&common)?;
            if let Some(n) = episodes {
                cfg.search.episodes_total = n;
            }
            let out = experiment::cmd_search(&cfg, checkpoint.as_deref(), resume)?;
            println!("searched {} iterations, supernet at {}", out.iterations, out.path.display());
        }
        Command::Decode { common, checkpoint } => {
            let cfg = load(&common)?;
            let out = experiment::cmd_decode(&cfg, checkpoint.as_deref())?;
            print!("{}", out.policy.summary_text());
            println!("decoded checkpoint {}", out.path.display());
        }
        Command::Eval { common, checkpoint, preset, episodes, multicrop } => {
            let mut cfg = load(&common)?;
            if let Some(n) = episodes {
                cfg.eval.episodes = n;
            }
            let target = match (checkpoint, preset) {
                (Some(p), None) => EvalTarget::Checkpoint(p),
                (None, Some(name)) => EvalTarget::Preset(parse_preset(&name)?),
                (None, None) => EvalTarget::Checkpoint(cfg.output_dir.join("decoded.json")),
                (Some(_), Some(_)) => bail!("--checkpoint and --preset are exclusive"),
            };
            let out = experiment::cmd_eval(&cfg, &target, multicrop)?;
            println!(
                "{}: {} over {} episodes ({} failed) -> {}",
                out.report.policy,
                experiment::format_cell(out.report.mean_accuracy, out.report.ci95),
                out.report.n_episodes,
                out.report.failed,
                out.path.display()
            );
        }
        Command::Baseline { common, preset, episodes, multicrop } => {
            let mut cfg = load(&common)?;
            if let Some(n) = episodes {
                cfg.eval.episodes = n;
            }
            let presets = preset.iter().map(|p| parse_preset(p)).collect::<Result<Vec<_>>>()?;
            for out in experiment::cmd_baseline(&cfg, &presets, multicrop)? {
                println!(
                    "{}: {} -> {}",
                    out.report.policy,
                    experiment::format_cell(out.report.mean_accuracy, out.report.ci95),
                    out.path.display()
                );
            }
        }
        Command::Report { output, allow_mixed } => {
            let out = experiment::cmd_report(&output, allow_mixed)
                .with_context(|| format!("building report for {}", output.display()))?;
            print!("{}", out.table);
        }
    }
    Ok(())
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
