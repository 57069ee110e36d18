use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};
use groundchat::commands::{self, EvalArgs, ExpandArgs};
use groundchat_core::config::AppConfig;
use groundchat_core::corpus::Split;
use groundchat_core::evaluation::PplMode;
use groundchat_core::expansion::ExpansionType;
use groundchat_core::oracle::OracleBudget;

/// Persona-grounded dialog: expansion, training, evaluation and chat.
///
/// Settings come from the TOML file given by --config. Any key can be
/// overridden with GROUNDCHAT_<SECTION>__<KEY>, e.g. GROUNDCHAT_TRAIN__LR=1e-4.
#[derive(Parser)]
#[command(name = "groundchat", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum PplArg {
    Elbo,
    Exact,
}

#[derive(Subcommand)]
enum Command {
    /// Expand every persona sentence of a corpus file into an expansion file.
    Expand {
        /// Corpus file holding the persona records.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `mock` or `file:PATH` (defaults to expansion.backend).
        #[arg(long)]
        backend: Option<String>,
        /// Comma-separated relation names (defaults to expansion.relations).
        #[arg(long, value_delimiter = ',')]
        relations: Option<Vec<String>>,
        /// Also add back-translation paraphrases.
        #[arg(long)]
        paraphrase: bool,
        /// Beams per relation.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on data.corpus and write checkpoints to checkpoint_dir.
    Train,
    /// Score the checkpoint on a corpus split and write an EvalReport.
    Evaluate {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum, default_value = "elbo")]
        ppl: PplArg,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Prior temperatures for the diversity sweep (empty to skip).
        #[arg(long, value_delimiter = ',', default_value = "1,2,5")]
        tau_sweep: Vec<f64>,
    },
    /// Exact enumeration checks of the checkpoint on validation examples.
    Diagnose {
        #[arg(long, default_value_t = 50)]
        limit: usize,
        #[arg(long, default_value_t = 32)]
        max_candidates: usize,
    },
    /// Chat on the terminal with a persona.
    Chat {
        /// One persona sentence; repeat for more.
        #[arg(long = "persona", required = true)]
        persona: Vec<String>,
        /// Skip expansion and use the sentences alone.
        #[arg(long)]
        no_expand: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the HTTP service.
    Serve {
        /// Overrides service.bind.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Write the synthetic copy corpus, or train on it with --run.
    Synth {
        #[arg(long, default_value = "synthetic")]
        out: PathBuf,
        /// Train the desk-scale model into checkpoint_dir and print its report.
        #[arg(long)]
        run: bool,
        #[arg(long, default_value_t = 100)]
        probes: usize,
    },
}

fn parse_relations(names: &[String]) -> Result<Vec<ExpansionType>> {
    names
        .iter()
        .map(|n| match ExpansionType::parse(n.trim()) {
            Some(k) if k.is_relation() => Ok(k),
            _ => bail!("{n:?} is not a relation"),
        })
        .collect()
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = AppConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Expand {
            input,
            out,
            backend,
            relations,
            paraphrase,
            n,
            seed,
        } => {
            let args = ExpandArgs {
                input,
                out: out.clone(),
                backend: backend.unwrap_or_else(|| cfg.expansion.backend.clone()),
                relations: match relations {
                    Some(r) => parse_relations(&r)?,
                    None => cfg.expansion.relations.clone(),
                },
                paraphrase: paraphrase || cfg.expansion.paraphrase,
                n: n.unwrap_or(cfg.expansion.beams),
                seed: seed.unwrap_or(cfg.expansion.seed),
            };
            let written = commands::expand(&args, &cfg)?;
            println!("wrote {written} expansions to {}", out.display());
        }
        Command::Train => {
            let report = commands::train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Evaluate {
            split,
            limit,
            ppl,
            out,
            tau_sweep,
        } => {
            let args = EvalArgs {
                split: match split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Valid => Split::Valid,
                    SplitArg::Test => Split::Test,
                },
                limit,
                ppl_mode: match ppl {
                    PplArg::Elbo => PplMode::ElboBound,
                    PplArg::Exact => PplMode::ExactMarginal,
                },
                out,
                temperatures: tau_sweep,
            };
            let report = commands::evaluate(&cfg, &args)?;
            print!("{}", report.to_table());
        }
        Command::Diagnose { limit, max_candidates } => {
            let budget = OracleBudget {
                max_candidates,
                ..OracleBudget::default()
            };
            let report = commands::diagnose(&cfg, limit, &budget)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Chat { persona, no_expand, seed } => {
            let (model, _) = commands::load_checkpoint(&cfg.checkpoint_dir)?;
            let engine = commands::engine_for(&cfg, model)?;
            let session = engine.create("chat", &persona, !no_expand)?;
            println!("{} candidates", session.candidate_set.len());
            let stdin = std::io::stdin();
            commands::chat(&engine, session, seed, stdin.lock(), std::io::stdout())?;
        }
        Command::Serve { bind } => {
            if let Some(b) = bind {
                cfg.service.bind = b;
            }
            tokio::runtime::Runtime::new()?.block_on(commands::serve(&cfg))?;
        }
        Command::Synth { out, run, probes } => {
            if run {
                let report = commands::synth_run(&cfg, probes)?;
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                commands::synth(&cfg, &out)?;
                println!("wrote corpus.jsonl, expansions.jsonl and edited.jsonl to {}", out.display());
            }
        }
    }
    Ok(())
}
