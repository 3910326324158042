//! Experiment configuration, run persistence and result statistics.
//!
//! A run is one (configuration, seed) pair. Its outputs live under
//! `runs/<config-hash>/<seed>/` and `record.json` is written last, so its
//! presence marks a finished run.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::baselines::{self, BaselineProtocol, OraclePolicy, RandomPolicy};
use crate::corpus::{self, synth, Corpus, CorpusError, EmbeddingStore, GridCorpusSpec};
use crate::gnn::{GnnError, ModelConfig, Recommender};
use crate::par::Execution;
use crate::seed;
use crate::student::{EpisodeConfig, PopulationConfig, PriorScenario};
use crate::train::{
    self, CurvePoint, EpochResult, FeedbackPredictionConfig, FinetuneConfig, ImitationReport, PpoConfig,
    PretrainConfig, Task, TrainError,
};

/// Overrides the default data root.
pub const DATA_DIR_ENV: &str = "PATHFORGE_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data";
pub const CURVE_HEADER: &str = "run_id,seed,epoch,split,mean_return,n_episodes";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Gnn,
    GnnScratch,
    Cmab,
    PpoMlp,
    Random,
    Oracle,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Gnn,
        PolicyKind::GnnScratch,
        PolicyKind::Cmab,
        PolicyKind::PpoMlp,
        PolicyKind::Random,
        PolicyKind::Oracle,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            PolicyKind::Gnn => "gnn",
            PolicyKind::GnnScratch => "gnn-scratch",
            PolicyKind::Cmab => "cmab",
            PolicyKind::PpoMlp => "ppo-mlp",
            PolicyKind::Random => "random",
            PolicyKind::Oracle => "oracle",
        }
    }

    pub fn from_cli_name(name: &str) -> Result<Self, HarnessError> {
        Self::ALL.into_iter().find(|p| p.cli_name() == name).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|p| p.cli_name()).collect();
            HarnessError::Config(format!("unknown policy '{name}'; valid policies: {}", valid.join(", ")))
        })
    }

    pub fn is_gnn(self) -> bool {
        matches!(self, PolicyKind::Gnn | PolicyKind::GnnScratch)
    }
}

pub fn parse_scenario(name: &str) -> Result<PriorScenario, HarnessError> {
    PriorScenario::from_cli_name(name).ok_or_else(|| {
        let valid: Vec<&str> = PriorScenario::ALL.iter().map(|s| s.cli_name()).collect();
        HarnessError::Config(format!("unknown scenario '{name}'; valid scenarios: {}", valid.join(", ")))
    })
}

/// `a..b` is half-open, `a..=b` inclusive; a bare integer or a comma list
/// is also accepted. Duplicates are rejected.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, HarnessError> {
    let bad = || HarnessError::Config(format!("invalid seed range '{text}'; expected a..b, a..=b or a list"));
    let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad());
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..=") {
        (num(a)?..=num(b)?).collect()
    } else if let Some((a, b)) = text.split_once("..") {
        (num(a)?..num(b)?).collect()
    } else {
        text.split(',').map(num).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(HarnessError::Config(format!("seed range '{text}' is empty")));
    }
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(HarnessError::Config(format!("seed list '{text}' has duplicates")));
    }
    Ok(seeds)
}

/// Resolution order: explicit path, then the environment, then `data`.
pub fn resolve_data_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

/// Source corpora, target corpus and the embeddings they were built from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub store: EmbeddingStore,
    pub sequential: Vec<Corpus>,
    pub grid: Corpus,
}

const EMBEDDINGS_FILE: &str = "embeddings.txt";
const GRID_FILE: &str = "grid.json";
const SEQUENTIAL_DIR: &str = "sequential";

impl Dataset {
    pub fn synthetic(embedding_dim: usize, base_seed: u64) -> Result<Self, HarnessError> {
        let spec = GridCorpusSpec::default();
        let store = synth::synthetic_store(embedding_dim, spec.columns);
        let mut rng = seed::rng(base_seed, "collection", 0);
        let sequential = synth::sequential_collection(&store, &mut rng)?;
        let grid = synth::grid_corpus(&spec, &store)?;
        Ok(Self {
            store,
            sequential,
            grid,
        })
    }

    /// Layout: `embeddings.txt`, `grid.json`, `sequential/<name>.json`.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        let seq_dir = dir.join(SEQUENTIAL_DIR);
        fs::create_dir_all(&seq_dir).map_err(io_err(&seq_dir))?;
        self.store.save(dir.join(EMBEDDINGS_FILE))?;
        corpus::save_corpus(&self.grid, dir.join(GRID_FILE))?;
        for c in &self.sequential {
            corpus::save_corpus(c, seq_dir.join(format!("{}.json", c.name)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let emb = dir.join(EMBEDDINGS_FILE);
        if !emb.exists() {
            return Err(HarnessError::Config(format!(
                "no dataset at {} (missing {EMBEDDINGS_FILE}); run `pathforge generate-data` or set {DATA_DIR_ENV}",
                dir.display()
            )));
        }
        let store = EmbeddingStore::load(&emb, None)?;
        let grid = corpus::load_corpus(dir.join(GRID_FILE), &store)?;
        let seq_dir = dir.join(SEQUENTIAL_DIR);
        let mut paths: Vec<PathBuf> = fs::read_dir(&seq_dir)
            .map_err(io_err(&seq_dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(HarnessError::Config(format!("no sequential corpora in {}", seq_dir.display())));
        }
        let sequential = paths
            .iter()
            .map(|p| corpus::load_corpus(p, &store))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            store,
            sequential,
            grid,
        })
    }

    pub fn grid_task(&self) -> Result<Task<'_>, HarnessError> {
        Ok(Task::new(&self.grid, EpisodeConfig::for_grid(&self.grid))?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    #[default]
    Finetune,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainVariant {
    /// Imitation followed by REINFORCE.
    #[default]
    Full,
    ExpertOnly,
    FeedbackPrediction,
}

impl PretrainVariant {
    pub fn cli_name(self) -> &'static str {
        match self {
            PretrainVariant::Full => "full",
            PretrainVariant::ExpertOnly => "expert-only",
            PretrainVariant::FeedbackPrediction => "feedback-prediction",
        }
    }
}

/// Everything that determines a run's outputs except the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stage: Stage,
    pub policy: PolicyKind,
    /// Required for fine-tuning; ignored when pre-training.
    pub scenario: Option<PriorScenario>,
    pub variant: PretrainVariant,
    /// Pre-trained weights for the `gnn` policy.
    pub checkpoint: Option<PathBuf>,
    /// Name used when summarizing; defaults to the policy name.
    pub label: Option<String>,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub feedback_prediction: FeedbackPredictionConfig,
    pub finetune: FinetuneConfig,
    pub ppo: PpoConfig,
    pub protocol: BaselineProtocol,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Finetune,
            policy: PolicyKind::Gnn,
            scenario: None,
            variant: PretrainVariant::Full,
            checkpoint: None,
            label: None,
            model: ModelConfig::desk(),
            pretrain: PretrainConfig::default(),
            feedback_prediction: FeedbackPredictionConfig::default(),
            finetune: FinetuneConfig::default(),
            ppo: PpoConfig::default(),
            protocol: BaselineProtocol::default(),
        }
    }
}

/// Serialize through `serde_json::Value`, whose maps are key-sorted, so the
/// text (and hash) do not depend on field order.
fn canonical_json<T: Serialize>(value: &T) -> String {
    serde_json::to_value(value)
        .and_then(|v| serde_json::to_string(&v))
        .expect("config types serialize infallibly")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|source| HarnessError::Json {
            path: PathBuf::from("<config>"),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| HarnessError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(canonical_json(self).as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn label(&self) -> String {
        match (&self.label, self.stage) {
            (Some(l), _) => l.clone(),
            (None, Stage::Pretrain) => format!("pretrain-{}", self.variant.cli_name()),
            (None, Stage::Finetune) => self.policy.cli_name().to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        match self.stage {
            Stage::Pretrain => {
                if !self.policy.is_gnn() {
                    return Err(HarnessError::Config(format!(
                        "pre-training applies to the GNN only, not '{}'",
                        self.policy.cli_name()
                    )));
                }
            }
            Stage::Finetune => {
                if self.scenario.is_none() {
                    return Err(HarnessError::Config("fine-tuning requires a scenario".into()));
                }
                match (&self.checkpoint, self.policy) {
                    (None, PolicyKind::Gnn) => {
                        return Err(HarnessError::Config(
                            "policy 'gnn' requires a pre-trained checkpoint (use gnn-scratch for random init)".into(),
                        ))
                    }
                    (Some(p), PolicyKind::Gnn) if !p.exists() => {
                        return Err(HarnessError::Config(format!("checkpoint not found: {}", p.display())))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn run_dir(&self, out: &Path, seed: u64) -> PathBuf {
        out.join("runs").join(self.hash()).join(seed.to_string())
    }
}

/// One line of a curve CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub run_id: String,
    pub seed: u64,
    /// Fine-tuning epoch, or environment steps for the `pretrain` split.
    pub epoch: usize,
    pub split: String,
    pub mean_return: f64,
    pub n_episodes: usize,
}

pub fn write_curve_csv<W: Write>(out: W, rows: &[CurveRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CURVE_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: PathBuf::from("<curve>"),
        source,
    })
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurveRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CURVE_HEADER {
        return Err(HarnessError::Config(format!(
            "{}: unexpected header '{}'",
            path.display(),
            header.join(",")
        )));
    }
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn epoch_rows(run_id: &str, seed: u64, epochs: &[EpochResult], train_episodes: usize) -> Vec<CurveRow> {
    let mut rows = Vec::with_capacity(epochs.len() * 2);
    for e in epochs {
        if train_episodes > 0 {
            rows.push(CurveRow {
                run_id: run_id.to_string(),
                seed,
                epoch: e.epoch,
                split: "train".into(),
                mean_return: e.train_mean,
                n_episodes: train_episodes,
            });
        }
        rows.push(CurveRow {
            run_id: run_id.to_string(),
            seed,
            epoch: e.epoch,
            split: "test".into(),
            mean_return: e.test_mean,
            n_episodes: e.test_returns.len(),
        });
    }
    rows
}

pub fn pretrain_rows(run_id: &str, seed: u64, curve: &[CurvePoint]) -> Vec<CurveRow> {
    curve
        .iter()
        .map(|p| CurveRow {
            run_id: run_id.to_string(),
            seed,
            epoch: p.x,
            split: "pretrain".into(),
            mean_return: p.mean_return,
            n_episodes: p.n_episodes,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub imitation: Option<ImitationReport>,
    pub feedback_accuracy: Option<f64>,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub label: String,
    pub stage: Stage,
    pub policy: PolicyKind,
    pub scenario: Option<PriorScenario>,
    pub started_unix: u64,
    pub elapsed_secs: f64,
    /// Mean test return after each fine-tuning epoch.
    pub test_means: Vec<f64>,
    /// Last epoch's mean test return; for pre-training, the last curve point.
    pub final_return: f64,
    pub pretrain: Option<PretrainSummary>,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub dir: PathBuf,
    /// The run had already completed and was not recomputed.
    pub skipped: bool,
}

/// Outputs of one executed run, before persistence.
pub struct RunArtifacts {
    pub rows: Vec<CurveRow>,
    pub test_means: Vec<f64>,
    pub final_return: f64,
    pub pretrain: Option<PretrainSummary>,
    pub model: Option<Recommender>,
}

/// Executes one run in memory; the harness is only responsible for files.
pub fn execute(cfg: &ExperimentConfig, data: &Dataset, seed: u64, exec: Execution) -> Result<RunArtifacts, HarnessError> {
    cfg.validate()?;
    let run_id = format!("{}-{seed}", cfg.hash());
    match cfg.stage {
        Stage::Pretrain => {
            let mut init = seed::rng(seed, "model-init", 0);
            let mut model = Recommender::new(cfg.model, &mut init);
            let summary = match cfg.variant {
                PretrainVariant::Full => {
                    let rep = train::pretrain(&mut model, &data.sequential, &cfg.pretrain, seed, exec)?;
                    PretrainSummary {
                        imitation: Some(rep.imitation),
                        feedback_accuracy: None,
                        curve: rep.curve,
                    }
                }
                PretrainVariant::ExpertOnly => {
                    let rep = train::pretrain_expert_only(&mut model, &data.sequential, &cfg.pretrain, seed, exec)?;
                    PretrainSummary {
                        imitation: Some(rep),
                        feedback_accuracy: None,
                        curve: Vec::new(),
                    }
                }
                PretrainVariant::FeedbackPrediction => {
                    let acc =
                        train::pretrain_feedback_prediction(&mut model, &data.sequential, &cfg.feedback_prediction, seed, None)?;
                    PretrainSummary {
                        imitation: None,
                        feedback_accuracy: acc,
                        curve: Vec::new(),
                    }
                }
            };
            let rows = pretrain_rows(&run_id, seed, &summary.curve);
            let final_return = summary.curve.last().map_or(0.0, |p| p.mean_return);
            Ok(RunArtifacts {
                rows,
                test_means: Vec::new(),
                final_return,
                pretrain: Some(summary),
                model: Some(model),
            })
        }
        Stage::Finetune => {
            let scenario = cfg.scenario.expect("validated");
            let pop = PopulationConfig::for_scenario(scenario);
            let task = data.grid_task()?;
            let protocol = &cfg.protocol;
            let mut model = None;
            let (epochs, train_episodes) = match cfg.policy {
                PolicyKind::Gnn | PolicyKind::GnnScratch => {
                    let mut m = match (&cfg.checkpoint, cfg.policy) {
                        (Some(path), PolicyKind::Gnn) => Recommender::load(cfg.model, path)?,
                        _ => Recommender::new(cfg.model, &mut seed::rng(seed, "model-init", 0)),
                    };
                    let res = train::finetune(&mut m, &task, &pop, &cfg.finetune, seed, exec)?;
                    model = Some(m);
                    (res, cfg.finetune.episodes_per_collect)
                }
                PolicyKind::Cmab => (
                    baselines::cmab_curve(&task, &pop, protocol, seed, protocol.cmab_sharing, exec)?,
                    protocol.episodes_per_collect,
                ),
                PolicyKind::PpoMlp => (
                    baselines::ppo_curve(&task, &pop, protocol, &cfg.ppo, seed, exec)?,
                    protocol.episodes_per_collect,
                ),
                PolicyKind::Random => (baselines::static_curve(&RandomPolicy, &task, &pop, protocol, seed, exec)?, 0),
                PolicyKind::Oracle => (baselines::static_curve(&OraclePolicy, &task, &pop, protocol, seed, exec)?, 0),
            };
            let rows = epoch_rows(&run_id, seed, &epochs, train_episodes);
            let test_means: Vec<f64> = epochs.iter().map(|e| e.test_mean).collect();
            let final_return = test_means.last().copied().unwrap_or(0.0);
            Ok(RunArtifacts {
                rows,
                test_means,
                final_return,
                pretrain: None,
                model,
            })
        }
    }
}

/// Write to a sibling temporary file and rename, so readers never observe
/// a partially written output.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_record(path: &Path) -> Result<RunRecord, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Runs one seed unless its record already exists (`force` recomputes).
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &Dataset,
    seed: u64,
    out: &Path,
    force: bool,
    exec: Execution,
) -> Result<RunOutcome, HarnessError> {
    cfg.validate()?;
    let dir = cfg.run_dir(out, seed);
    let record_path = dir.join("record.json");
    if record_path.exists() && !force {
        log::info!("skipping {}: already complete (use --force to rerun)", dir.display());
        return Ok(RunOutcome {
            record: load_record(&record_path)?,
            dir,
            skipped: true,
        });
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    if record_path.exists() {
        fs::remove_file(&record_path).map_err(io_err(&record_path))?;
    }
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let art = execute(cfg, data, seed, exec)?;

    let mut csv_bytes = Vec::new();
    write_curve_csv(&mut csv_bytes, &art.rows)?;
    write_atomic(&dir.join("curve.csv"), &csv_bytes)?;
    if let Some(model) = &art.model {
        model.save(dir.join("checkpoint.bin"))?;
    }
    let record = RunRecord {
        run_id: format!("{}-{seed}", cfg.hash()),
        config_hash: cfg.hash(),
        seed,
        label: cfg.label(),
        stage: cfg.stage,
        policy: cfg.policy,
        scenario: cfg.scenario,
        started_unix,
        elapsed_secs: clock.elapsed().as_secs_f64(),
        test_means: art.test_means,
        final_return: art.final_return,
        pretrain: art.pretrain,
        config: cfg.clone(),
    };
    let json = serde_json::to_vec_pretty(&record).map_err(|source| HarnessError::Json {
        path: record_path.clone(),
        source,
    })?;
    write_atomic(&record_path, &json)?;
    Ok(RunOutcome {
        record,
        dir,
        skipped: false,
    })
}

/// Independent seeds run concurrently under `exec`; each run itself is
/// sequential, so per-seed results do not depend on scheduling.
pub fn run_seeds(
    cfg: &ExperimentConfig,
    data: &Dataset,
    seeds: &[u64],
    out: &Path,
    force: bool,
    exec: Execution,
) -> Vec<Result<RunOutcome, HarnessError>> {
    exec.map(seeds, |&s| run_experiment(cfg, data, s, out, force, Execution::Sequential))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    /// Fewer than two samples or zero variance: the interval collapses.
    pub degenerate: bool,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Linear interpolation between order statistics of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Bootstrap-t interval for the mean. Resamples with zero spread have an
/// undefined pivot and are dropped.
pub fn bootstrap_ci<R: Rng + ?Sized>(samples: &[f64], resamples: usize, level: f64, rng: &mut R) -> Interval {
    if samples.is_empty() {
        return Interval {
            mean: f64::NAN,
            lo: f64::NAN,
            hi: f64::NAN,
            degenerate: true,
        };
    }
    let n = samples.len();
    let (mean, sd) = mean_sd(samples);
    let se = sd / (n as f64).sqrt();
    if n < 2 || se <= 0.0 {
        return Interval {
            mean,
            lo: mean,
            hi: mean,
            degenerate: true,
        };
    }
    let mut pivots = Vec::with_capacity(resamples);
    let mut draw = vec![0.0; n];
    for _ in 0..resamples {
        for x in draw.iter_mut() {
            *x = samples[rng.random_range(0..n)];
        }
        let (m, s) = mean_sd(&draw);
        let se_star = s / (n as f64).sqrt();
        if se_star > 0.0 {
            pivots.push((m - mean) / se_star);
        }
    }
    if pivots.is_empty() {
        return Interval {
            mean,
            lo: mean,
            hi: mean,
            degenerate: true,
        };
    }
    pivots.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    let t_lo = quantile(&pivots, alpha / 2.0);
    let t_hi = quantile(&pivots, 1.0 - alpha / 2.0);
    Interval {
        mean,
        lo: mean - t_hi * se,
        hi: mean - t_lo * se,
        degenerate: false,
    }
}

/// One-sided paired t-test of `mean(a - b) > 0`; returns (t, p).
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64), HarnessError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(HarnessError::Config(format!(
            "paired test needs two equal samples of size >= 2 (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (m, sd) = mean_sd(&d);
    let n = d.len() as f64;
    if sd == 0.0 {
        let p = if m > 0.0 { 0.0 } else { 1.0 };
        return Ok((f64::INFINITY.copysign(m), p));
    }
    let t = m / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok((t, 1.0 - dist.cdf(t)))
}

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;
pub const BOOTSTRAP_LEVEL: f64 = 0.95;

/// Published final returns as (label, scenario, mean, sd).
pub const REFERENCE_RESULTS: [(&str, PriorScenario, f64, f64); 12] = [
    ("gnn", PriorScenario::None, 24.81, 2.63),
    ("gnn", PriorScenario::DecreasingExp, 22.62, 1.82),
    ("gnn", PriorScenario::Uniform, 13.33, 3.40),
    ("gnn-scratch", PriorScenario::None, 18.63, 6.55),
    ("gnn-scratch", PriorScenario::DecreasingExp, 16.28, 4.51),
    ("gnn-scratch", PriorScenario::Uniform, 7.51, 3.44),
    ("cmab", PriorScenario::None, 18.34, 2.11),
    ("cmab", PriorScenario::DecreasingExp, 11.32, 2.24),
    ("cmab", PriorScenario::Uniform, 4.19, 1.68),
    ("ppo-mlp", PriorScenario::None, 8.02, 1.62),
    ("ppo-mlp", PriorScenario::DecreasingExp, 4.64, 1.07),
    ("ppo-mlp", PriorScenario::Uniform, 2.49, 0.70),
];

pub fn reference_result(label: &str, scenario: PriorScenario) -> Option<(f64, f64)> {
    REFERENCE_RESULTS
        .iter()
        .find(|r| r.0 == label && r.1 == scenario)
        .map(|r| (r.2, r.3))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub scenario: String,
    pub n_seeds: usize,
    pub mean: f64,
    pub sd: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub reference_mean: Option<f64>,
    pub reference_sd: Option<f64>,
}

/// Every finished run record below `dir`.
pub fn collect_records(dir: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(io_err(&d))?;
        for e in entries {
            let p = e.map_err(io_err(&d))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "record.json") {
                found.push(p);
            }
        }
    }
    found.sort();
    let mut records: Vec<RunRecord> = found.iter().map(|p| load_record(p)).collect::<Result<_, _>>()?;
    records.sort_by(|a, b| (&a.label, a.seed).cmp(&(&b.label, b.seed)));
    Ok(records)
}

fn scenario_rank(s: Option<PriorScenario>) -> usize {
    s.map_or(PriorScenario::ALL.len(), |s| PriorScenario::ALL.iter().position(|&x| x == s).unwrap_or(0))
}

/// Final fine-tuning returns grouped by (label, scenario), with bootstrap
/// CIs and the published values where one exists.
pub fn summarize_records(records: &[RunRecord], bootstrap_seed: u64) -> Result<Vec<SummaryRow>, HarnessError> {
    let mut groups: BTreeMap<(String, usize), (Option<PriorScenario>, Vec<f64>)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.stage == Stage::Finetune) {
        groups
            .entry((r.label.clone(), scenario_rank(r.scenario)))
            .or_insert_with(|| (r.scenario, Vec::new()))
            .1
            .push(r.final_return);
    }
    if groups.is_empty() {
        return Err(HarnessError::Config("no fine-tuning records to summarize".into()));
    }
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(i, ((label, _), (scenario, finals)))| {
            let (mean, sd) = mean_sd(&finals);
            let mut rng = seed::rng(bootstrap_seed, "summary", i as u64);
            let ci = bootstrap_ci(&finals, BOOTSTRAP_RESAMPLES, BOOTSTRAP_LEVEL, &mut rng);
            let reference = scenario.and_then(|s| reference_result(&label, s));
            SummaryRow {
                policy: label,
                scenario: scenario.map_or("-", |s| s.cli_name()).to_string(),
                n_seeds: finals.len(),
                mean,
                sd,
                ci_lo: ci.lo,
                ci_hi: ci.hi,
                reference_mean: reference.map(|r| r.0),
                reference_sd: reference.map(|r| r.1),
            }
        })
        .collect())
}

pub fn summarize(dir: &Path) -> Result<Vec<SummaryRow>, HarnessError> {
    if !dir.exists() {
        return Err(HarnessError::Config(format!("results directory {} does not exist", dir.display())));
    }
    let records = collect_records(dir)?;
    if records.is_empty() {
        return Err(HarnessError::Config(format!("no run records under {}", dir.display())));
    }
    summarize_records(&records, 0)
}

pub fn write_summary_csv<W: Write>(out: W, rows: &[SummaryRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: PathBuf::from("<summary>"),
        source,
    })
}

/// Policies as rows, scenarios as columns, cells `mean (sd)`; published
/// values follow in brackets where known.
pub fn format_table(rows: &[SummaryRow]) -> String {
    let scenarios: Vec<&str> = PriorScenario::ALL.iter().map(|s| s.cli_name()).collect();
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.policy.as_str()) {
            labels.push(&r.policy);
        }
    }
    let mut out = format!("{:<24}", "policy");
    for s in &scenarios {
        out.push_str(&format!("{s:>30}"));
    }
    out.push('\n');
    for l in labels {
        out.push_str(&format!("{l:<24}"));
        for s in &scenarios {
            let cell = rows.iter().find(|r| r.policy == l && r.scenario == *s).map_or("-".to_string(), |r| {
                let mut c = format!("{:.2} ({:.2})", r.mean, r.sd);
                if let (Some(m), Some(sd)) = (r.reference_mean, r.reference_sd) {
                    c.push_str(&format!(" [{m:.2} ({sd:.2})]"));
                }
                c
            });
            out.push_str(&format!("{cell:>30}"));
        }
        out.push('\n');
    }
    out
}

/// Per-epoch test means across seeds with bootstrap bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveBand {
    pub policy: String,
    pub scenario: String,
    pub epoch: usize,
    pub students: usize,
    pub n_seeds: usize,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Records of one (label, scenario) cell with their students per epoch.
type BandGroup<'a> = (Option<PriorScenario>, usize, Vec<&'a RunRecord>);

pub fn curve_bands(records: &[RunRecord], resamples: usize, bootstrap_seed: u64) -> Vec<CurveBand> {
    let mut groups: BTreeMap<(String, usize), BandGroup> = BTreeMap::new();
    for r in records.iter().filter(|r| r.stage == Stage::Finetune) {
        let per_epoch = match r.policy {
            PolicyKind::Gnn | PolicyKind::GnnScratch => r.config.finetune.episodes_per_collect,
            _ => r.config.protocol.episodes_per_collect,
        };
        groups
            .entry((r.label.clone(), scenario_rank(r.scenario)))
            .or_insert_with(|| (r.scenario, per_epoch, Vec::new()))
            .2
            .push(r);
    }
    let mut out = Vec::new();
    for (g, ((label, _), (scenario, per_epoch, runs))) in groups.into_iter().enumerate() {
        let epochs = runs.iter().map(|r| r.test_means.len()).min().unwrap_or(0);
        for e in 0..epochs {
            let xs: Vec<f64> = runs.iter().map(|r| r.test_means[e]).collect();
            let mut rng = seed::rng(bootstrap_seed, "bands", (g * 1000 + e) as u64);
            let ci = bootstrap_ci(&xs, resamples, BOOTSTRAP_LEVEL, &mut rng);
            out.push(CurveBand {
                policy: label.clone(),
                scenario: scenario.map_or("-", |s| s.cli_name()).to_string(),
                epoch: e + 1,
                students: (e + 1) * per_epoch,
                n_seeds: xs.len(),
                mean: ci.mean,
                ci_lo: ci.lo,
                ci_hi: ci.hi,
            });
        }
    }
    out
}

pub fn write_bands_csv<W: Write>(out: W, bands: &[CurveBand]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for b in bands {
        w.serialize(b)?;
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: PathBuf::from("<bands>"),
        source,
    })
}

/// Trailing moving average; point `i` averages the last `window` values up
/// to and including `i`.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut acc = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            acc += v;
            if i >= w {
                acc -= values[i - w];
            }
            acc / (i + 1).min(w) as f64
        })
        .collect()
}

/// Reads one numeric column from a CSV file.
pub fn read_column(path: &Path, column: &str) -> Result<Vec<f64>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let idx = r
        .headers()?
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| HarnessError::Config(format!("{}: no column '{column}'", path.display())))?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let v = rec.get(idx).unwrap_or("").trim();
        out.push(v.parse::<f64>().map_err(|_| {
            HarnessError::Config(format!("{}: row {}: '{v}' is not a number", path.display(), line + 2))
        })?);
    }
    Ok(out)
}

/// Bootstrap RNG from a plain seed.
pub fn bootstrap_rng(seed: u64) -> seed::Rng {
    seed::Rng::seed_from_u64(seed)
}
