//! Command-line front end for the person search pipeline.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for stage
//! failures.

use clap::{Args, Parser, Subcommand};
use persearch_harness::ablation::{run_ablation_ladder, LadderTable};
use persearch_harness::config::{Config, ConfigError};
use persearch_harness::pipeline::{
    ensure_captioner, ensure_corpus, ensure_pseudo, run_pipeline, ArtifactRoot, PipelineError,
};
use persearch_harness::report;
use persearch_harness::sweep::{run_sweep, SweepKind};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "persearch", version, about = "semi-supervised text-based person search on a synthetic attribute corpus")]
struct Cli {
    /// Artifact root directory (falls back to $PERSEARCH_ROOT, then ./artifacts)
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (key = value lines); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. `-s seed=9 -s mask.rho_v=0.4`
    #[arg(short = 's', long = "set")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<Config, ConfigError> {
        let mut config = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        for kv in &self.set {
            config.apply(kv)?;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic corpus stages
    Corpus {
        #[command(subcommand)]
        cmd: CorpusCmd,
    },
    /// Caption model stages
    Caption {
        #[command(subcommand)]
        cmd: CaptionCmd,
    },
    /// Retrieval model stages
    Retrieval {
        #[command(subcommand)]
        cmd: RetrievalCmd,
    },
    /// Evaluate a stored run on its test split
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Re-rank this many top candidates with the match head
        #[arg(long, default_value_t = 0)]
        rerank_top_k: usize,
    },
    /// Run the full pipeline (all stages plus evaluation)
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Recompute even when a manifest for this config exists
        #[arg(long)]
        force: bool,
    },
    /// Component ablation ladder over several seeds
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated seed list
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Parameter sweeps with plots
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// One of: mask_ratio, labeled_ratio, measurer, scheduler
        #[arg(long)]
        kind: String,
        /// Comma-separated grid; numeric for ratio sweeps, names otherwise
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Render reports over stored runs
    Report {
        /// Run hash or manifest path; omit for a summary of all runs
        run: Option<String>,
    },
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Generate a corpus into a directory
    Generate {
        /// Spec file holding corpus.* keys (config format)
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum CaptionCmd {
    /// Finetune the caption model on the labeled split
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate pseudo-texts for every unlabeled image
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// greedy | sample
        #[arg(long)]
        decoder: Option<String>,
        #[arg(long)]
        top_p: Option<f64>,
    },
}

#[derive(Subcommand)]
enum RetrievalCmd {
    /// Train the retrieval model (runs upstream stages as needed)
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Stage(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(c) => CliError::Config(c.to_string()),
            other => CliError::Stage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Stage(e.to_string())
    }
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>, CliError> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Config(format!("bad seed {s:?}")))
        })
        .collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let root = ArtifactRoot::resolve(cli.root.as_deref());
    match dispatch(cli.command, &root) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Stage(msg)) => {
            eprintln!("stage failure: {msg}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(command: Command, root: &ArtifactRoot) -> Result<(), CliError> {
    match command {
        Command::Corpus { cmd: CorpusCmd::Generate { spec, seed, out } } => {
            let mut config = match spec {
                Some(path) => Config::load(&path)?,
                None => Config::default(),
            };
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let corpus = persearch_core::corpus::generate_corpus(&config.corpus_spec(), config.seed)
                .map_err(|e| CliError::Stage(e.to_string()))?;
            persearch_core::corpus::write_corpus(&out, &corpus)
                .map_err(|e| CliError::Stage(e.to_string()))?;
            println!(
                "corpus: {} labeled, {} unlabeled, {} gallery, {} queries -> {}",
                corpus.labeled.len(),
                corpus.unlabeled.len(),
                corpus.test_gallery.len(),
                corpus.test_queries.len(),
                out.display()
            );
            Ok(())
        }
        Command::Caption { cmd } => match cmd {
            CaptionCmd::Train { config } => {
                let config = config.build()?;
                let corpus = ensure_corpus(root, &config)?;
                ensure_captioner(root, &config, &corpus)?;
                println!("captioner checkpoint: {}", root.captioner_ckpt(&config).display());
                Ok(())
            }
            CaptionCmd::Generate { config, decoder, top_p } => {
                let mut config = config.build()?;
                if let Some(d) = decoder {
                    config.apply(&format!("caption.decoder = {d}"))?;
                }
                if let Some(p) = top_p {
                    config.apply(&format!("caption.top_p = {p}"))?;
                }
                let corpus = ensure_corpus(root, &config)?;
                let captioner = ensure_captioner(root, &config, &corpus)?;
                let pseudo = ensure_pseudo(root, &config, &corpus, &captioner)?;
                let mean_rate = if pseudo.is_empty() {
                    0.0
                } else {
                    pseudo.iter().map(|p| p.caption.oracle_corruption_rate).sum::<f64>()
                        / pseudo.len() as f64
                };
                println!(
                    "pseudo set: {} captions (mean oracle corruption {:.3}) -> {}",
                    pseudo.len(),
                    mean_rate,
                    root.pseudo_file(&config).display()
                );
                Ok(())
            }
        },
        Command::Retrieval { cmd: RetrievalCmd::Train { config, force } } => {
            let config = config.build()?;
            let manifest = run_pipeline(root, &config, force)?;
            println!("{}", report::run_report(&manifest));
            Ok(())
        }
        Command::Eval { config, rerank_top_k } => {
            let mut config = config.build()?;
            config.eval_rerank_top_k = rerank_top_k;
            let manifest = run_pipeline(root, &config, false)?;
            let params = persearch_harness::pipeline::load_run_encoder(&config, &manifest)?;
            let corpus = ensure_corpus(root, &config)?;
            let rerank = (rerank_top_k > 0).then_some(rerank_top_k);
            let report = persearch_core::evalkit::evaluate(
                &params,
                &corpus.test_queries,
                &corpus.test_gallery,
                rerank,
            )
            .map_err(|e| CliError::Stage(e.to_string()))?;
            println!("{}", report.text());
            Ok(())
        }
        Command::Run { config, force } => {
            let config = config.build()?;
            let manifest = run_pipeline(root, &config, force)?;
            println!("{}", report::run_report(&manifest));
            Ok(())
        }
        Command::Ablate { config, seeds, out, force } => {
            let config = config.build()?;
            let seeds = parse_seeds(&seeds)?;
            if seeds.len() < 3 {
                return Err(CliError::Config("the ladder needs at least 3 seeds".into()));
            }
            let table = run_ablation_ladder(root, &config, &seeds, force);
            let out = out.unwrap_or_else(|| root.path.join("ablation"));
            table.save(&out)?;
            print!("{}", table.text());
            println!("tables written to {}", out.display());
            check_missing_cells(&table)
        }
        Command::Sweep { config, kind, grid, seeds, out, force } => {
            let config = config.build()?;
            let seeds = parse_seeds(&seeds)?;
            let kind = build_sweep_kind(&kind, grid.as_deref())?;
            let out = out.unwrap_or_else(|| root.path.join("sweeps"));
            let table = run_sweep(root, &config, &kind, &seeds, &out, force)?;
            print!("{}", table.text());
            Ok(())
        }
        Command::Report { run } => {
            match run {
                Some(what) => {
                    let manifest = report::find_manifest(root, &what)?;
                    print!("{}", report::run_report(&manifest));
                }
                None => print!("{}", report::all_runs_report(root)?),
            }
            Ok(())
        }
    }
}

fn check_missing_cells(table: &LadderTable) -> Result<(), CliError> {
    let missing: Vec<String> = table
        .rows
        .iter()
        .flat_map(|row| {
            row.cells
                .iter()
                .filter(|c| c.metrics.is_none())
                .map(move |c| format!("{} seed {}", row.variant, c.seed))
        })
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Stage(format!("missing cells: {}", missing.join(", "))))
    }
}

fn build_sweep_kind(kind: &str, grid: Option<&str>) -> Result<SweepKind, CliError> {
    let numeric = |grid: Option<&str>, default: Vec<f64>| -> Result<Vec<f64>, CliError> {
        match grid {
            None => Ok(default),
            Some(g) => g
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::Config(format!("bad grid entry {s:?}")))
                })
                .collect(),
        }
    };
    let names = |grid: Option<&str>, default: Vec<&str>| -> Vec<String> {
        match grid {
            None => default.into_iter().map(String::from).collect(),
            Some(g) => g.split(',').map(|s| s.trim().to_string()).collect(),
        }
    };
    match kind {
        "mask_ratio" => Ok(SweepKind::MaskRatio(numeric(grid, vec![0.0, 0.1, 0.2, 0.4])?)),
        "labeled_ratio" => Ok(SweepKind::LabeledRatio(numeric(grid, vec![0.01, 0.05, 0.2])?)),
        "measurer" => Ok(SweepKind::Measurer(names(
            grid,
            vec!["random", "sentence_length", "clipscore_analog", "blipscore_analog"],
        ))),
        "scheduler" => Ok(SweepKind::Scheduler(names(grid, vec!["baby_step", "root2", "linear"]))),
        other => Err(CliError::Config(format!(
            "unknown sweep kind {other:?} (mask_ratio|labeled_ratio|measurer|scheduler)"
        ))),
    }
}
