use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glre::model::Ablation;
use glre_cli::commands::{self, Layout, SplitArg};
use glre_cli::config::{Dataset, Overrides, Protocol, RunConfig};
use glre_cli::exit_code;

#[derive(Parser)]
#[command(name = "glre", version, about = "Document-level relation extraction with global-to-local graph encoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw dataset files into canonical JSONL plus relation and training-fact inventories.
    Prepare(Common),
    /// Train a model and write the selected checkpoint, epoch log and resolved config.
    Train(Common),
    /// Score a checkpoint on one split.
    Evaluate(Scored),
    /// Bucketed scores, case dumps and an optional ablation sweep.
    Analyze {
        #[command(flatten)]
        scored: Scored,
        /// Also train or reuse one model per single ablation flag.
        #[arg(long)]
        sweep: bool,
    },
    /// Write the decided relations of one split as JSON lines.
    Predict(Scored),
    /// Dump document graphs and per-document node and edge counts.
    GraphStats {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Print the shipped default config for a dataset.
    InitConfig {
        #[arg(long, value_enum)]
        dataset: Dataset,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    protocol: Option<Protocol>,
    /// Repeatable.
    #[arg(long = "ablation", value_name = "FLAG")]
    ablations: Vec<Ablation>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Scored {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "dev")]
    split: SplitArg,
    /// Defaults to the checkpoint `train` wrote into the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> glre::Result<RunConfig> {
        let overrides = Overrides {
            seed: self.seed,
            protocol: self.protocol,
            ablations: self.ablations.clone(),
            threshold: self.threshold,
            output_dir: self.out.clone(),
        };
        RunConfig::load(&self.config)?.resolve(&overrides)
    }
}

impl Scored {
    fn checkpoint(&self, cfg: &RunConfig) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| Layout::new(&cfg.output_dir).checkpoint())
    }
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn run(cli: Cli) -> glre::Result<()> {
    match cli.command {
        Command::Prepare(c) => {
            let cfg = c.resolve()?;
            for (split, n) in commands::prepare(&cfg)? {
                println!("{split}: {n} documents");
            }
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let ck = commands::train(&cfg)?;
            println!(
                "saved {} (epoch {})",
                show(&Layout::new(&cfg.output_dir).checkpoint()),
                ck.epoch.unwrap_or(0)
            );
        }
        Command::Evaluate(s) => {
            let cfg = s.common.resolve()?;
            let report = commands::evaluate(&cfg, s.split, &s.checkpoint(&cfg))?;
            print!("{}", report.to_table());
        }
        Command::Analyze { scored: s, sweep } => {
            let cfg = s.common.resolve()?;
            let analysis = commands::analyze(&cfg, s.split, &s.checkpoint(&cfg), sweep)?;
            print!("{}", analysis.report.to_table());
            if let Some(rows) = analysis.sweep {
                for r in rows {
                    println!("{:<12} F1 {:.4}", r.variant, r.f1);
                }
            }
        }
        Command::Predict(s) => {
            let cfg = s.common.resolve()?;
            let n = commands::predict(&cfg, s.split, &s.checkpoint(&cfg))?;
            println!("{n} relations written to {}", show(&Layout::new(&cfg.output_dir).predictions(s.split)));
        }
        Command::GraphStats { common, split } => {
            let cfg = common.resolve()?;
            let totals = commands::graph_stats_cmd(&cfg, split)?;
            println!("{}", serde_json::to_string_pretty(&totals).expect("totals serialize"));
        }
        Command::InitConfig { dataset } => print!("{}", RunConfig::default_for(dataset).to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(doc_id) = e.doc_id() {
                eprintln!("document: {doc_id}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
