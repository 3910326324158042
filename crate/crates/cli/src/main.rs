use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pathforge::harness::{
    self, Dataset, ExperimentConfig, PolicyKind, PretrainVariant, RunOutcome, Stage, BOOTSTRAP_LEVEL,
    BOOTSTRAP_RESAMPLES, DATA_DIR_ENV,
};
use pathforge::par::Execution;
use pathforge::student::PriorScenario;

#[derive(Parser)]
#[command(name = "pathforge", version, about = "Pre-train, fine-tune and evaluate learning-path recommenders")]
struct Cli {
    /// Dataset directory (embeddings.txt, grid.json, sequential/*.json).
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset to the data directory.
    GenerateData {
        #[arg(long, default_value_t = pathforge::corpus::DEFAULT_EMBEDDING_DIM)]
        embedding_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Pre-train the GNN on the sequential corpora.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = parse_variant, default_value = "full")]
        variant: PretrainVariant,
    },
    /// Fine-tune the GNN (pre-trained or from scratch) on the grid corpus.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        target: TargetArgs,
    },
    /// Run a non-GNN policy with the fine-tuning protocol.
    Baseline {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        target: TargetArgs,
    },
    /// Table of final returns (mean, sd, 95% CI) per policy and scenario.
    Summarize {
        /// Results root containing runs/.
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Studentized bootstrap CIs: per-epoch bands for a results root, or one
    /// interval for a CSV column.
    Bootstrap {
        /// Results root (bands) or a CSV file (single interval).
        #[arg(long)]
        input: PathBuf,
        /// Column to resample when the input is a CSV file.
        #[arg(long, default_value = "mean_return")]
        column: String,
        #[arg(long, default_value_t = BOOTSTRAP_RESAMPLES)]
        resamples: usize,
        #[arg(long, default_value_t = BOOTSTRAP_LEVEL)]
        level: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Destination for band CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed range `a..b` (half-open), `a..=b`, or a comma list.
    #[arg(long, default_value = "0..10")]
    seeds: String,
    /// Results root; runs land in <out>/runs/<config-hash>/<seed>/.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Recompute runs that already have a record.
    #[arg(long)]
    force: bool,
    /// Seeds run concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Name under which results are summarized.
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args)]
struct TargetArgs {
    #[arg(long, value_parser = parse_policy)]
    policy: Option<PolicyKind>,
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<PriorScenario>,
    /// Pre-trained weights for the `gnn` policy.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    PolicyKind::from_cli_name(s).map_err(|e| e.to_string())
}

fn parse_scenario(s: &str) -> Result<PriorScenario, String> {
    harness::parse_scenario(s).map_err(|e| e.to_string())
}

fn parse_variant(s: &str) -> Result<PretrainVariant, String> {
    [PretrainVariant::Full, PretrainVariant::ExpertOnly, PretrainVariant::FeedbackPrediction]
        .into_iter()
        .find(|v| v.cli_name() == s)
        .ok_or_else(|| format!("unknown variant '{s}'; valid variants: full, expert-only, feedback-prediction"))
}

fn base_config(run: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &run.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if run.label.is_some() {
        cfg.label = run.label.clone();
    }
    Ok(cfg)
}

fn apply_target(cfg: &mut ExperimentConfig, target: &TargetArgs, allowed: &[PolicyKind], default: PolicyKind) -> Result<()> {
    cfg.stage = Stage::Finetune;
    cfg.policy = target.policy.unwrap_or(if allowed.contains(&cfg.policy) { cfg.policy } else { default });
    if !allowed.contains(&cfg.policy) {
        let names: Vec<&str> = allowed.iter().map(|p| p.cli_name()).collect();
        bail!("policy '{}' is not valid here; choose one of: {}", cfg.policy.cli_name(), names.join(", "));
    }
    if target.scenario.is_some() {
        cfg.scenario = target.scenario;
    }
    if cfg.scenario.is_none() {
        bail!("--scenario is required (none, decexp, uniform)");
    }
    if target.checkpoint.is_some() {
        cfg.checkpoint = target.checkpoint.clone();
    }
    Ok(())
}

fn load_data(dir: Option<&Path>) -> Result<Dataset> {
    let dir = harness::resolve_data_dir(dir);
    Dataset::load(&dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn run_all(cfg: &ExperimentConfig, data_dir: Option<&Path>, run: &RunArgs) -> Result<()> {
    cfg.validate()?;
    let seeds = harness::parse_seeds(&run.seeds)?;
    let data = load_data(data_dir)?;
    log::info!("config {} ({}), {} seed(s)", cfg.hash(), cfg.label(), seeds.len());
    let results = harness::run_seeds(cfg, &data, &seeds, &run.out, run.force, Execution::from_threads(run.parallel));
    let mut failed = 0;
    for (seed, res) in seeds.iter().zip(results) {
        match res {
            Ok(RunOutcome { record, dir, skipped }) => {
                let note = if skipped { " (already complete, skipped)" } else { "" };
                println!("seed {seed}: final return {:.3} -> {}{note}", record.final_return, dir.display());
            }
            Err(e) => {
                failed += 1;
                eprintln!("seed {seed}: {e}");
            }
        }
    }
    if failed > 0 {
        bail!("{failed} run(s) failed");
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let data_dir = cli.data_dir.as_deref();
    match cli.command {
        Command::GenerateData {
            embedding_dim,
            seed,
            force,
        } => {
            let dir = harness::resolve_data_dir(data_dir);
            if dir.join("embeddings.txt").exists() && !force {
                bail!("dataset already present in {}; pass --force to overwrite", dir.display());
            }
            let data = Dataset::synthetic(embedding_dim, seed)?;
            data.write(&dir)?;
            println!(
                "wrote {} sequential corpora, grid corpus and {} embeddings to {}",
                data.sequential.len(),
                data.store.len(),
                dir.display()
            );
        }
        Command::Pretrain { run, variant } => {
            let mut cfg = base_config(&run)?;
            cfg.stage = Stage::Pretrain;
            cfg.policy = PolicyKind::Gnn;
            cfg.scenario = None;
            cfg.checkpoint = None;
            cfg.variant = variant;
            run_all(&cfg, data_dir, &run)?;
        }
        Command::Finetune { run, target } => {
            let mut cfg = base_config(&run)?;
            apply_target(&mut cfg, &target, &[PolicyKind::Gnn, PolicyKind::GnnScratch], PolicyKind::Gnn)?;
            run_all(&cfg, data_dir, &run)?;
        }
        Command::Baseline { run, target } => {
            let mut cfg = base_config(&run)?;
            let allowed = [PolicyKind::Cmab, PolicyKind::PpoMlp, PolicyKind::Random, PolicyKind::Oracle];
            apply_target(&mut cfg, &target, &allowed, PolicyKind::Cmab)?;
            run_all(&cfg, data_dir, &run)?;
        }
        Command::Summarize { out, csv } => {
            let rows = harness::summarize(&out.join("runs"))?;
            print!("{}", harness::format_table(&rows));
            if let Some(path) = csv {
                let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                harness::write_summary_csv(f, &rows)?;
            }
        }
        Command::Bootstrap {
            input,
            column,
            resamples,
            level,
            seed,
            out,
        } => {
            if !(0.0..1.0).contains(&level) || level <= 0.0 {
                bail!("--level must lie in (0, 1)");
            }
            if input.is_dir() {
                let root = if input.join("runs").is_dir() { input.join("runs") } else { input };
                let records = harness::collect_records(&root)?;
                if records.is_empty() {
                    bail!("no run records under {}", root.display());
                }
                let bands = harness::curve_bands(&records, resamples, seed);
                match out {
                    Some(p) => harness::write_bands_csv(fs::File::create(&p)?, &bands)?,
                    None => harness::write_bands_csv(io::stdout().lock(), &bands)?,
                }
            } else {
                let xs = harness::read_column(&input, &column)?;
                let ci = harness::bootstrap_ci(&xs, resamples, level, &mut harness::bootstrap_rng(seed));
                let note = if ci.degenerate { " (degenerate: fewer than 2 samples or zero variance)" } else { "" };
                println!("mean {:.4} ci [{:.4}, {:.4}] n={}{note}", ci.mean, ci.lo, ci.hi, xs.len());
            }
        }
    }
    Ok(())
}
