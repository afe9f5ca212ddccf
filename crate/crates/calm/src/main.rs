use std::path::PathBuf;
use std::process::ExitCode;

use calm::commands::{self, BenchEntry, GenerateOptions, TrainOptions};
use calm::{CliError, ExperimentConfig};
use calm_core::elo::EloConfig;
use calm_core::eval::bench::BenchOptions;
use calm_core::heads::HeadKind;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "calm",
    version,
    about = "Continuous autoregressive latent models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a latent corpus and its normalization statistics.
    MakeCorpus {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the toy waveform VAE.
    TrainVae {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train backbone and head.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Generate continuations or unprompted sequences.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        head: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corpus file whose sequence prefixes become prompts.
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Per-frame stage timings as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Time generation for several systems; the first is the baseline.
    Bench {
        /// `name=checkpoint[:steps]`, repeatable.
        #[arg(long = "system", required = true)]
        systems: Vec<String>,
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, default_value_t = 3)]
        warmups: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fréchet distance, diversity and oracle tests for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Bayesian Elo from pairwise comparisons.
    Elo {
        #[command(subcommand)]
        cmd: EloCmd,
    },
    /// Merge bench CSVs into one table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EloCmd {
    /// Fit strengths from `system_a,system_b,outcome` rows.
    Fit {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        iterations: usize,
    },
}

fn emit(text: &str, out: Option<&PathBuf>) -> Result<(), CliError> {
    match out {
        Some(p) => calm::formats::write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::MakeCorpus { config } => {
            let s = commands::make_corpus(&ExperimentConfig::load(&config)?)?;
            println!("wrote {} sequences to {}", s.sequences, s.corpus.display());
        }
        Cmd::TrainVae { config } => {
            let s = commands::train_vae(&ExperimentConfig::load(&config)?)?;
            println!(
                "vae loss {:.6} kl {:.6} -> {}",
                s.final_loss,
                s.final_kl,
                s.checkpoint.display()
            );
        }
        Cmd::Train {
            config,
            resume,
            until,
        } => {
            let s = commands::train(
                &ExperimentConfig::load(&config)?,
                &TrainOptions { resume, until },
            )?;
            println!(
                "step {} mean loss {:.6} skipped {} -> {}",
                s.steps,
                s.mean_loss,
                s.skipped,
                s.checkpoint.display()
            );
        }
        Cmd::Generate {
            checkpoint,
            head,
            steps,
            temperature,
            seed,
            prompt,
            count,
            out,
            trace,
        } => {
            let head = head.as_deref().map(HeadKind::parse).transpose()?;
            let s = commands::generate(&GenerateOptions {
                checkpoint,
                head,
                steps,
                temperature,
                seed,
                prompt,
                count,
                out: out.clone(),
                trace,
            })?;
            println!("wrote {} sequences to {}", s.sequences.len(), out.display());
        }
        Cmd::Bench {
            systems,
            prompt,
            runs,
            warmups,
            out_dir,
        } => {
            let entries: Vec<BenchEntry> = systems
                .iter()
                .map(|s| BenchEntry::parse(s))
                .collect::<Result<_, _>>()?;
            let r = commands::bench(
                &entries,
                prompt.as_deref(),
                BenchOptions { runs, warmups },
                &out_dir,
            )?;
            print!("{}", r.render());
        }
        Cmd::Eval {
            checkpoint,
            reference,
            seed,
            out_dir,
        } => {
            let r = commands::eval(&checkpoint, &reference, seed, &out_dir)?;
            println!(
                "fad {:.6} similarity {:.4} (reference {:.4})",
                r.fad, r.similarity, r.reference_similarity
            );
            if let Some(p) = r.oracle_passed {
                println!("oracle {p}/{}", r.oracle_histories);
            }
        }
        Cmd::Elo {
            cmd:
                EloCmd::Fit {
                    input,
                    out,
                    iterations,
                },
        } => {
            let text = std::fs::read_to_string(&input).map_err(|e| CliError::io(&input, e))?;
            let cfg = EloConfig {
                iters: iterations,
                ..EloConfig::default()
            };
            emit(&commands::elo_fit(&text, &cfg)?, out.as_ref())?;
        }
        Cmd::Report { inputs, out } => emit(&commands::report(&inputs)?, out.as_ref())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
