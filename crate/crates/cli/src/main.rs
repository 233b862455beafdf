use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use nxsg::Class;
use nxsg_cli::config::{RunConfig, SEED_ENV};
use nxsg_cli::{exit_code, pipeline, UsageError};

/// Explainable multilabel audio segmentation.
#[derive(Parser)]
#[command(name = "nxsg", version)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/val/test corpus.
    GenCorpus,
    /// Pretrain the NMF dictionary on single-class segments.
    TrainNmf,
    /// Train the teacher segmenter on the training split.
    TrainTeacher,
    /// Distill the proxy from the frozen teacher.
    Distill,
    /// Write segment files and frame probabilities for WAV files.
    Segment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        wavs: Vec<PathBuf>,
    },
    /// Relevance, frequency and score-curve explanations for one class.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        class: String,
        /// Relevance threshold; `-inf` keeps every component. Defaults to
        /// the threshold retaining the top 10% of components.
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        wavs: Vec<PathBuf>,
    },
    /// Frame F1 of hypothesis segments against references.
    Eval {
        /// Reference `.seg` file or directory.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Hypothesis file or directory, optionally named as NAME=PATH.
        #[arg(long = "hyp", required = true)]
        hyps: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher and proxy scores on the test split.
    Report,
    /// Every step, then teacher and proxy scores on the test split.
    Pipeline,
}

fn parse_tau(s: &str) -> Result<f64> {
    match s.trim() {
        "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        v => v
            .parse()
            .map_err(|_| UsageError(format!("bad --tau `{v}`")).into()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::load(cli.config.as_deref(), env_seed.as_deref(), &cli.set)?;
    match cli.command {
        Command::GenCorpus => {
            let rows = pipeline::gen_corpus(&cfg)?;
            println!("wrote {} scenes to {}", rows.len(), cfg.path("corpus_dir").display());
        }
        Command::TrainNmf => {
            let d = pipeline::train_nmf(&cfg)?;
            println!("dictionary {}x{} in {}", d.num_bins(), d.rank(), cfg.path("nmf_dir").display());
        }
        Command::TrainTeacher => {
            let m = pipeline::train_teacher_step(&cfg)?;
            println!("teacher ({} parameters) in {}", m.num_params(), cfg.path("teacher_dir").display());
        }
        Command::Distill => {
            let m = pipeline::distill(&cfg)?;
            println!("proxy ({} parameters) in {}", m.num_params(), cfg.path("proxy_dir").display());
        }
        Command::Segment { model, out, wavs } => {
            pipeline::segment(&cfg, &model, &wavs, &out)?;
            println!("segmented {} files into {}", wavs.len(), out.display());
        }
        Command::Explain {
            model,
            class,
            tau,
            out,
            wavs,
        } => {
            let class: Class = class.parse().map_err(|e| UsageError(format!("{e}")))?;
            let tau = tau.as_deref().map(parse_tau).transpose()?;
            pipeline::explain(&cfg, &model, &wavs, class, tau, &out)?;
            println!("explanations for {} files in {}", wavs.len(), out.display());
        }
        Command::Eval {
            reference,
            hyps,
            out,
        } => {
            let systems = hyps
                .iter()
                .enumerate()
                .map(|(i, h)| match h.split_once('=') {
                    Some((name, path)) => (name.to_string(), PathBuf::from(path)),
                    None if hyps.len() == 1 => ("system".to_string(), PathBuf::from(h)),
                    None => (format!("system{}", i + 1), PathBuf::from(h)),
                })
                .collect::<Vec<_>>();
            print!("{}", pipeline::eval(&cfg, &reference, &systems, &out)?);
        }
        Command::Report => {
            print!("{}", pipeline::evaluate_test_split(&cfg)?);
        }
        Command::Pipeline => {
            print!("{}", pipeline::run_all(&cfg).context("pipeline")?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
