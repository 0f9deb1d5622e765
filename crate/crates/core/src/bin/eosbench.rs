use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eosbench::harness::run::{report, run, RunConfig, RunKind, CODE_VERSION};
use eosbench::scenegen::{build_dataset, write_examples, DatasetConfig};
use eosbench::{Error, Result};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "eosbench", version, about = "EOS-decision and hallucination testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic datasets.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Train from a checkpoint or a fresh init.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Overrides the config's training kind.
        #[arg(long, value_enum)]
        objective: Option<Objective>,
    },
    /// Continue training a checkpoint with the config's objective.
    FurtherTrain(RunArgs),
    /// Score training data with a reference checkpoint.
    Score(RunArgs),
    /// Drop a fraction of training data by score.
    Filter(RunArgs),
    /// Attention and context-manipulation probes.
    Probe {
        #[arg(value_enum)]
        probe: Probe,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Caption the eval data and compute CHAIR metrics.
    Eval(RunArgs),
    /// Plot the reports found in a run directory.
    Report {
        /// A `seed-<n>` directory, or a run directory holding several.
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    Build {
        /// Dataset config (TOML); defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replaces the config's seed list; repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Objective {
    Mle,
    Selective,
    Combined,
}

#[derive(Clone, Copy, ValueEnum)]
enum Probe {
    Saliency,
    Tendency,
    /// Saliency run; the aggregation pattern is part of its report.
    Aggregation,
}

fn load_run(args: &RunArgs, kind: RunKind) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.kind = kind;
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    }
    if let Some(d) = &args.out_dir {
        cfg.out_dir = d.clone();
    }
    Ok(cfg)
}

fn execute(args: &RunArgs, kind: RunKind) -> Result<()> {
    for outcome in run(&load_run(args, kind)?)? {
        for a in &outcome.artifacts {
            println!("{}", outcome.dir.join(a).display());
        }
    }
    Ok(())
}

fn build(config: Option<&Path>, out: &Path) -> Result<()> {
    let dcfg: DatasetConfig = match config {
        Some(p) => toml::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?,
        None => DatasetConfig::default(),
    };
    let ds = build_dataset(&dcfg)?;
    fs::create_dir_all(out)?;
    let text = toml::to_string(&dcfg).map_err(|e| Error::Config(e.to_string()))?;
    let hash = hex::encode(Sha256::digest(serde_json::to_vec(&dcfg)?));
    fs::write(
        out.join("dataset.toml"),
        format!("# config_hash={hash} code_version={CODE_VERSION}\n{text}"),
    )?;
    write_examples(&out.join("train.jsonl"), &ds.train)?;
    write_examples(&out.join("test.jsonl"), &ds.test)?;
    for f in ["dataset.toml", "train.jsonl", "test.jsonl"] {
        println!("{}", out.join(f).display());
    }
    Ok(())
}

fn report_all(dir: &Path) -> Result<()> {
    let mut seed_dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed-")))
        .collect();
    seed_dirs.sort();
    if seed_dirs.is_empty() {
        seed_dirs.push(dir.to_path_buf());
    }
    for d in seed_dirs {
        for p in report(&d)? {
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset {
            command: DatasetCommand::Build { config, out },
        } => build(config.as_deref(), &out),
        Command::Train { run, objective } => {
            let kind = match objective {
                Some(Objective::Mle) => RunKind::TrainMle,
                Some(Objective::Selective) => RunKind::TrainSelective,
                Some(Objective::Combined) => RunKind::TrainCombined,
                None => {
                    let k = RunConfig::load(&run.config)?.kind;
                    if !k.is_training() || k == RunKind::FurtherTrain {
                        return Err(Error::Config(format!(
                            "config kind {} is not a from-scratch training kind; pass --objective",
                            k.name()
                        )));
                    }
                    k
                }
            };
            execute(&run, kind)
        }
        Command::FurtherTrain(run) => execute(&run, RunKind::FurtherTrain),
        Command::Score(run) => execute(&run, RunKind::Score),
        Command::Filter(run) => execute(&run, RunKind::Filter),
        Command::Probe { probe, run } => {
            let kind = match probe {
                Probe::Saliency | Probe::Aggregation => RunKind::ProbeSaliency,
                Probe::Tendency => RunKind::ProbeTendency,
            };
            execute(&run, kind)
        }
        Command::Eval(run) => execute(&run, RunKind::Eval),
        Command::Report { run_dir } => report_all(&run_dir),
    }
}

fn fail(class: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": class, "message": message }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            fail("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            fail(e.class(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
