//! Training loops: oracle imitation, REINFORCE, the pre-training variants,
//! fine-tuning on a graph corpus, and PPO for the flat-observation baseline.
//!
//! Every loop takes a base seed and derives named RNG streams from it, so a
//! run is reproducible bit for bit and independent of [`Execution`] mode.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{oracle_action, FlatTransition, MlpActorCritic};
use crate::corpus::Corpus;
use crate::gnn::{act, ActMode, BipartiteState, CorpusGraph, GnnError, GraphBatch, Recommender};
use crate::par::Execution;
use crate::seed;
use crate::student::{EnvError, Episode, EpisodeConfig, EpisodeLog, Feedback, PopulationConfig};
use crate::tensor::layers::Linear;
use crate::tensor::{Adam, AdamConfig, Grads, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Config(String),
}

/// A corpus together with its cached graph and episode settings.
#[derive(Debug, Clone)]
pub struct Task<'c> {
    pub corpus: &'c Corpus,
    pub graph: Arc<CorpusGraph>,
    pub episode: EpisodeConfig,
}

impl<'c> Task<'c> {
    pub fn new(corpus: &'c Corpus, episode: EpisodeConfig) -> Result<Self, GnnError> {
        Ok(Self {
            corpus,
            graph: Arc::new(CorpusGraph::new(corpus)?),
            episode,
        })
    }

    pub fn state(&self, history: &[(usize, Feedback)]) -> Result<BipartiteState, GnnError> {
        BipartiteState::new(self.graph.clone(), history)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Steps(usize),
    Episodes(usize),
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub state: BipartiteState,
    pub action: usize,
    pub log_prob: f64,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub task: usize,
    pub steps: Vec<Transition>,
    pub log: EpisodeLog,
    /// False when a step budget cut the episode short.
    pub complete: bool,
}

impl Trajectory {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|t| t.reward).collect()
    }
}

/// Rolls `model` on a student sampled for `tasks[task]`.
pub fn rollout(
    model: &Recommender,
    tasks: &[Task<'_>],
    task: usize,
    population: &PopulationConfig,
    mode: ActMode,
    rng: &mut seed::Rng,
) -> Result<Trajectory, TrainError> {
    let t = &tasks[task];
    let mut episode = Episode::reset(t.corpus, population, t.episode, rng);
    let mut steps = Vec::with_capacity(t.episode.horizon);
    while !episode.is_done() {
        let state = t.state(episode.history())?;
        let probs = model.probabilities(&state)?;
        let action = act(&probs, mode, rng);
        let out = episode.step(action)?;
        steps.push(Transition {
            state,
            action,
            log_prob: probs[action].ln(),
            reward: out.reward,
        });
    }
    Ok(Trajectory {
        task,
        steps,
        log: episode.into_log(),
        complete: true,
    })
}

/// Episode `index` of a collect draws its task and student from its own
/// stream, so results do not depend on how episodes are scheduled.
fn indexed_rollout(
    model: &Recommender,
    tasks: &[Task<'_>],
    population: &PopulationConfig,
    mode: ActMode,
    base_seed: u64,
    index: u64,
) -> Result<Trajectory, TrainError> {
    let mut rng = seed::rng(base_seed, "episode", index);
    let task = rng.random_range(0..tasks.len());
    rollout(model, tasks, task, population, mode, &mut rng)
}

/// Collects episodes with the stochastic policy until `budget` is spent.
/// Under a step budget the last episode is truncated.
pub fn collect(
    model: &Recommender,
    tasks: &[Task<'_>],
    population: &PopulationConfig,
    budget: Budget,
    base_seed: u64,
    exec: Execution,
) -> Result<Vec<Trajectory>, TrainError> {
    if tasks.is_empty() {
        return Err(TrainError::Config("no tasks to collect from".into()));
    }
    let run = |i: &u64| indexed_rollout(model, tasks, population, ActMode::Sample, base_seed, *i);
    match budget {
        Budget::Episodes(n) => {
            let idx: Vec<u64> = (0..n as u64).collect();
            exec.map(&idx, run).into_iter().collect()
        }
        Budget::Steps(n) => {
            let shortest = tasks.iter().map(|t| t.episode.horizon.max(1)).min().unwrap_or(1);
            let mut out: Vec<Trajectory> = Vec::new();
            let (mut steps, mut next) = (0usize, 0u64);
            while steps < n {
                // Enough episodes to finish the budget if all run full length.
                let wave = (n - steps).div_ceil(shortest).max(1) as u64;
                let idx: Vec<u64> = (next..next + wave).collect();
                next += wave;
                for traj in exec.map(&idx, run) {
                    let mut traj = traj?;
                    if steps >= n {
                        break;
                    }
                    let room = n - steps;
                    if traj.steps.len() > room {
                        traj.steps.truncate(room);
                        traj.complete = false;
                    }
                    steps += traj.steps.len();
                    out.push(traj);
                }
            }
            Ok(out)
        }
    }
}

/// `G_t = r_t + γ G_{t+1}` with `G_{T-1} = r_{T-1}`.
pub fn returns_to_go(rewards: &[f64], discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + discount * acc;
        out[t] = acc;
    }
    out
}

/// Zero mean, unit sample deviation. Constant inputs are only centred.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    if values.is_empty() {
        return Vec::new();
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-12 {
        return values.iter().map(|v| v - mean).collect();
    }
    values.iter().map(|v| (v - mean) / sd).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReinforceConfig {
    pub lr: f64,
    pub discount: f64,
    pub entropy_coef: f64,
    /// Graphs per minibatch.
    pub batch_size: usize,
    pub repeat_per_collect: usize,
    pub baseline: ReturnBaseline,
    pub max_grad_norm: Option<f64>,
}

/// What is subtracted from returns-to-go before they weight log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReturnBaseline {
    /// Raw returns. With non-negative rewards every sampled action is
    /// reinforced, so logits drift toward saturation.
    None,
    /// Centre and scale over the whole batch. Returns-to-go shrink toward
    /// the end of an episode, so late actions are penalised regardless of
    /// their quality.
    Batch,
}

impl ReinforceConfig {
    pub fn pretrain() -> Self {
        Self {
            lr: 1e-4,
            discount: 0.7,
            entropy_coef: 0.01,
            batch_size: 8,
            repeat_per_collect: 15,
            // Any centring leaves an imitation-trained policy with near-zero
            // advantages; Adam then follows the entropy bonus and unlearns it.
            baseline: ReturnBaseline::None,
            max_grad_norm: None,
        }
    }

    pub fn finetune() -> Self {
        Self {
            lr: 5e-4,
            discount: 0.0,
            entropy_coef: 0.01,
            batch_size: 16,
            repeat_per_collect: 15,
            baseline: ReturnBaseline::Batch,
            max_grad_norm: None,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            max_grad_norm: self.max_grad_norm,
            ..AdamConfig::with_lr(self.lr)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss: f64,
    pub entropy: f64,
    pub updates: usize,
}

/// Minibatches of `batch` indices per pass, reshuffled every pass.
fn minibatches<R: Rng + ?Sized>(n: usize, batch: usize, passes: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..passes {
        order.shuffle(rng);
        out.extend(order.chunks(batch.max(1)).map(<[usize]>::to_vec));
    }
    out
}

/// Policy-gradient loss for a minibatch plus its entropy bonus.
fn reinforce_loss<'t>(
    model: &Recommender,
    tape: &'t Tape,
    states: &[&BipartiteState],
    actions: &[usize],
    advantages: &[f64],
    entropy_coef: f64,
) -> Result<(crate::tensor::Var<'t>, f64), TrainError> {
    let batch = GraphBatch::new(states)?;
    let out = model.forward(tape, &batch)?;
    let rows: Vec<usize> = actions.iter().enumerate().map(|(g, &a)| batch.doc_row(g, a)).collect();
    let b = states.len() as f64;
    let chosen = out.log_probs.pick(&rows)?;
    let pg = chosen.mul_const(Tensor::column(advantages.to_vec()))?.sum().scale(-1.0 / b);
    let p = out.log_probs.exp();
    let entropy = p.hadamard(out.log_probs)?.sum().scale(-1.0 / b);
    let loss = pg.sub(entropy.scale(entropy_coef))?;
    let h = entropy.item();
    Ok((loss, h))
}

/// REINFORCE without a value baseline on the collected trajectories.
pub fn reinforce_update<R: Rng + ?Sized>(
    model: &mut Recommender,
    adam: &mut Adam,
    trajectories: &[Trajectory],
    cfg: &ReinforceConfig,
    rng: &mut R,
) -> Result<UpdateStats, TrainError> {
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut returns = Vec::new();
    for traj in trajectories {
        let g = returns_to_go(&traj.rewards(), cfg.discount);
        for (t, step) in traj.steps.iter().enumerate() {
            states.push(&step.state);
            actions.push(step.action);
            returns.push(g[t]);
        }
    }
    if states.is_empty() {
        return Err(TrainError::Config("no transitions to learn from".into()));
    }
    let adv = match cfg.baseline {
        ReturnBaseline::None => returns,
        ReturnBaseline::Batch => standardize(&returns),
    };
    let mut stats = UpdateStats::default();
    let mut grads = Grads::zeros_like(&model.store);
    for mb in minibatches(states.len(), cfg.batch_size, cfg.repeat_per_collect, rng) {
        let s: Vec<&BipartiteState> = mb.iter().map(|&i| states[i]).collect();
        let a: Vec<usize> = mb.iter().map(|&i| actions[i]).collect();
        let g: Vec<f64> = mb.iter().map(|&i| adv[i]).collect();
        let tape = Tape::new();
        let (loss, h) = reinforce_loss(model, &tape, &s, &a, &g, cfg.entropy_coef)?;
        grads.zero();
        tape.backward(loss, &mut grads)?;
        adam.step(&mut model.store, &grads);
        stats.loss += loss.item();
        stats.entropy += h;
        stats.updates += 1;
    }
    let n = stats.updates.max(1) as f64;
    stats.loss /= n;
    stats.entropy /= n;
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct LabeledState {
    pub state: BipartiteState,
    pub label: usize,
    /// Feedback the student would give on every document.
    pub feedback: Vec<Feedback>,
}

/// States visited by an ε-noisy oracle, labelled with the oracle's choice.
/// States where no document is learnable are skipped.
pub fn oracle_dataset(
    tasks: &[Task<'_>],
    population: &PopulationConfig,
    episodes_per_task: usize,
    epsilon: f64,
    base_seed: u64,
) -> Result<Vec<LabeledState>, TrainError> {
    let mut out = Vec::new();
    for (ti, task) in tasks.iter().enumerate() {
        for e in 0..episodes_per_task {
            let mut rng = seed::rng(base_seed, "oracle-data", (ti * episodes_per_task + e) as u64);
            let mut episode = Episode::reset(task.corpus, population, task.episode, &mut rng);
            while !episode.is_done() {
                let label = oracle_action(&episode);
                let feedback: Vec<Feedback> = (0..task.corpus.n_docs())
                    .map(|d| episode.peek(d))
                    .collect::<Result<_, _>>()?;
                if feedback[label] == Feedback::RightLevel {
                    out.push(LabeledState {
                        state: task.state(episode.history())?,
                        label,
                        feedback,
                    });
                }
                let action = if rng.random::<f64>() < epsilon {
                    rng.random_range(0..task.corpus.n_docs())
                } else {
                    label
                };
                episode.step(action)?;
            }
        }
    }
    Ok(out)
}

/// Cross-entropy against oracle labels on one minibatch; returns
/// `(loss, top-1 agreement)` before the update.
pub fn imitation_update(
    model: &mut Recommender,
    adam: &mut Adam,
    batch: &[&LabeledState],
) -> Result<(f64, f64), TrainError> {
    let states: Vec<&BipartiteState> = batch.iter().map(|l| &l.state).collect();
    let g = GraphBatch::new(&states)?;
    let tape = Tape::new();
    let out = model.forward(&tape, &g)?;
    let rows: Vec<usize> = batch.iter().enumerate().map(|(i, l)| g.doc_row(i, l.label)).collect();
    let loss = out.log_probs.pick(&rows)?.mean().neg();
    let agreement = {
        let lp = out.log_probs.value();
        let hits = batch
            .iter()
            .enumerate()
            .filter(|(i, l)| argmax(&lp.data()[g.doc_offsets[*i]..g.doc_offsets[i + 1]]) == l.label)
            .count();
        hits as f64 / batch.len() as f64
    };
    let mut grads = Grads::zeros_like(&model.store);
    tape.backward(loss, &mut grads)?;
    adam.step(&mut model.store, &grads);
    Ok((loss.item(), agreement))
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of states where the greedy action equals the label.
pub fn agreement(model: &Recommender, data: &[LabeledState], exec: Execution) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<Result<bool, GnnError>> =
        exec.map(data, |l| Ok(argmax(&model.probabilities(&l.state)?) == l.label));
    let mut n = 0;
    for h in hits {
        n += h? as usize;
    }
    Ok(n as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImitationConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Cap on minibatch updates.
    pub max_steps: usize,
    pub target_agreement: f64,
    /// Updates between full-dataset agreement checks.
    pub eval_every: usize,
    /// Behaviour-policy noise when generating states.
    pub epsilon: f64,
    pub episodes_per_task: usize,
}

impl Default for ImitationConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            max_steps: 25_000,
            target_agreement: 0.99,
            eval_every: 100,
            epsilon: 0.2,
            episodes_per_task: 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImitationReport {
    pub steps: usize,
    pub train_agreement: f64,
    pub dataset_size: usize,
}

/// Supervised imitation until `target_agreement` on the training set or
/// `max_steps` updates.
pub fn train_imitation(
    model: &mut Recommender,
    data: &[LabeledState],
    cfg: &ImitationConfig,
    base_seed: u64,
    exec: Execution,
) -> Result<ImitationReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Config("empty imitation dataset".into()));
    }
    let mut adam = Adam::new(&model.store, AdamConfig::with_lr(cfg.lr));
    let mut rng = seed::rng(base_seed, "imitation", 0);
    let mut report = ImitationReport {
        dataset_size: data.len(),
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    while report.steps < cfg.max_steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch: Vec<&LabeledState> = order[cursor..end].iter().map(|&i| &data[i]).collect();
        cursor = end;
        imitation_update(model, &mut adam, &batch)?;
        report.steps += 1;
        if report.steps.is_multiple_of(cfg.eval_every) {
            report.train_agreement = agreement(model, data, exec)?;
            log::debug!("imitation step {}: agreement {:.3}", report.steps, report.train_agreement);
            if report.train_agreement >= cfg.target_agreement {
                return Ok(report);
            }
        }
    }
    report.train_agreement = agreement(model, data, exec)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Environment steps (pre-training) or epoch number (fine-tuning).
    pub x: usize,
    pub mean_return: f64,
    pub n_episodes: usize,
}

/// Mean undiscounted return of the complete episodes in `trajs`.
pub fn mean_return(trajs: &[Trajectory]) -> (f64, usize) {
    let done: Vec<f64> = trajs.iter().filter(|t| t.complete).map(|t| t.log.total_return).collect();
    if done.is_empty() {
        return (0.0, 0);
    }
    (done.iter().sum::<f64>() / done.len() as f64, done.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub imitation: ImitationConfig,
    pub rl: ReinforceConfig,
    pub rl_steps: usize,
    pub steps_per_collect: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            imitation: ImitationConfig::default(),
            rl: ReinforceConfig::pretrain(),
            rl_steps: 25_000,
            steps_per_collect: 1024,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub imitation: ImitationReport,
    /// Stage-2 training returns after each collect.
    pub curve: Vec<CurvePoint>,
}

/// Sequential corpora as pre-training tasks: horizon equals the number of
/// documents, unweighted reward.
pub fn sequential_tasks(corpora: &[Corpus], discount: f64) -> Result<Vec<Task<'_>>, GnnError> {
    corpora
        .iter()
        .map(|c| Task::new(c, EpisodeConfig::for_sequential(c, discount)))
        .collect()
}

/// Stage 1 only: imitation of the oracle on zero-prior students.
pub fn pretrain_expert_only(
    model: &mut Recommender,
    corpora: &[Corpus],
    cfg: &PretrainConfig,
    base_seed: u64,
    exec: Execution,
) -> Result<ImitationReport, TrainError> {
    let tasks = sequential_tasks(corpora, cfg.rl.discount)?;
    let pop = PopulationConfig::zero_prior();
    let ic = &cfg.imitation;
    let data = oracle_dataset(&tasks, &pop, ic.episodes_per_task, ic.epsilon, seed::derive(base_seed, "stage1-data", 0))?;
    train_imitation(model, &data, ic, base_seed, exec)
}

/// REINFORCE stage on the sequential collection; `on_collect` sees each
/// curve point as it is produced.
pub fn pretrain_rl(
    model: &mut Recommender,
    corpora: &[Corpus],
    cfg: &PretrainConfig,
    base_seed: u64,
    exec: Execution,
    mut on_collect: impl FnMut(&CurvePoint),
) -> Result<Vec<CurvePoint>, TrainError> {
    let tasks = sequential_tasks(corpora, cfg.rl.discount)?;
    let pop = PopulationConfig::zero_prior();
    let mut adam = Adam::new(&model.store, cfg.rl.adam());
    let mut rng = seed::rng(base_seed, "stage2-update", 0);
    let mut curve = Vec::new();
    let (mut steps, mut round) = (0usize, 0u64);
    while steps < cfg.rl_steps {
        let budget = cfg.steps_per_collect.min(cfg.rl_steps - steps);
        let trajs = collect(model, &tasks, &pop, Budget::Steps(budget), seed::derive(base_seed, "stage2-collect", round), exec)?;
        steps += budget;
        round += 1;
        let (mean, n) = mean_return(&trajs);
        let point = CurvePoint {
            x: steps,
            mean_return: mean,
            n_episodes: n,
        };
        on_collect(&point);
        curve.push(point);
        reinforce_update(model, &mut adam, &trajs, &cfg.rl, &mut rng)?;
    }
    Ok(curve)
}

/// Imitation followed by REINFORCE.
pub fn pretrain(
    model: &mut Recommender,
    corpora: &[Corpus],
    cfg: &PretrainConfig,
    base_seed: u64,
    exec: Execution,
) -> Result<PretrainReport, TrainError> {
    let imitation = pretrain_expert_only(model, corpora, cfg, base_seed, exec)?;
    log::info!(
        "stage 1: {} updates, train agreement {:.3}",
        imitation.steps,
        imitation.train_agreement
    );
    let curve = pretrain_rl(model, corpora, cfg, base_seed, exec, |p| {
        log::info!("stage 2: step {} mean return {:.3} ({} episodes)", p.x, p.mean_return, p.n_episodes)
    })?;
    Ok(PretrainReport { imitation, curve })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackPredictionConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub epsilon: f64,
    pub episodes_per_task: usize,
}

impl Default for FeedbackPredictionConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            steps: 3_000,
            epsilon: 0.5,
            episodes_per_task: 20,
        }
    }
}

/// Trains the model body plus a temporary 3-class head to predict the
/// feedback for every document; the head is discarded afterwards.
/// Returns per-document accuracy on `heldout` (if given) after training.
pub fn pretrain_feedback_prediction(
    model: &mut Recommender,
    corpora: &[Corpus],
    cfg: &FeedbackPredictionConfig,
    base_seed: u64,
    heldout: Option<&[LabeledState]>,
) -> Result<Option<f64>, TrainError> {
    let tasks = sequential_tasks(corpora, 0.0)?;
    let pop = PopulationConfig::zero_prior();
    let data = oracle_dataset(&tasks, &pop, cfg.episodes_per_task, cfg.epsilon, seed::derive(base_seed, "fp-data", 0))?;
    if data.is_empty() {
        return Err(TrainError::Config("empty feedback dataset".into()));
    }
    let n_model = model.n_model_params();
    let mut store = model.store.clone();
    let mut init_rng = seed::rng(base_seed, "fp-head", 0);
    let head = Linear::new(&mut store, "feedback_head", model.config.hidden, 3, true, &mut init_rng);
    let mut adam = Adam::new(&store, AdamConfig::with_lr(cfg.lr));
    let mut rng = seed::rng(base_seed, "fp-update", 0);
    let mut grads = Grads::zeros_like(&store);

    fn logits_for<'t>(
        model: &Recommender,
        head: &Linear,
        tape: &'t Tape,
        store: &crate::tensor::ParamStore,
        batch: &[&LabeledState],
    ) -> Result<crate::tensor::Var<'t>, TrainError> {
        let states: Vec<&BipartiteState> = batch.iter().map(|l| &l.state).collect();
        let g = GraphBatch::new(&states)?;
        let out = model.forward_with(tape, store, &g)?;
        Ok(head.forward(tape, store, out.doc_hidden)?)
    }

    for step in 0..cfg.steps {
        let batch: Vec<&LabeledState> =
            (0..cfg.batch_size).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let tape = Tape::new();
        let logits = logits_for(model, &head, &tape, &store, &batch)?;
        let targets: Vec<usize> = batch
            .iter()
            .flat_map(|l| l.feedback.iter().map(|f| f.index()))
            .enumerate()
            .map(|(row, class)| row * 3 + class)
            .collect();
        let loss = logits.log_softmax(1)?.pick(&targets)?.mean().neg();
        grads.zero();
        tape.backward(loss, &mut grads)?;
        adam.step(&mut store, &grads);
        if step % 500 == 0 {
            log::debug!("feedback prediction step {step}: loss {:.4}", loss.item());
        }
    }

    let accuracy = match heldout {
        Some(held) if !held.is_empty() => {
            let (mut hits, mut total) = (0usize, 0usize);
            for l in held {
                let tape = Tape::new();
                let logits = logits_for(model, &head, &tape, &store, &[l])?;
                let v = logits.value();
                for (d, f) in l.feedback.iter().enumerate() {
                    hits += (argmax(v.row_slice(d)) == f.index()) as usize;
                    total += 1;
                }
            }
            Some(hits as f64 / total as f64)
        }
        _ => None,
    };
    store.truncate(n_model);
    model.store = store;
    Ok(accuracy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub rl: ReinforceConfig,
    pub epochs: usize,
    pub episodes_per_collect: usize,
    pub eval_episodes: usize,
    pub eval_mode: ActMode,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            rl: ReinforceConfig::finetune(),
            epochs: 10,
            episodes_per_collect: 5,
            eval_episodes: 20,
            eval_mode: ActMode::Sample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochResult {
    pub epoch: usize,
    pub train_mean: f64,
    pub test_mean: f64,
    pub test_returns: Vec<f64>,
}

/// Mean test return over fresh students drawn from `"test"` streams.
pub fn evaluate(
    model: &Recommender,
    task: &Task<'_>,
    population: &PopulationConfig,
    episodes: usize,
    mode: ActMode,
    base_seed: u64,
    exec: Execution,
) -> Result<Vec<f64>, TrainError> {
    let tasks = std::slice::from_ref(task);
    exec.map_range(episodes, |i| {
        let mut rng = seed::rng(base_seed, "test", i as u64);
        rollout(model, tasks, 0, population, mode, &mut rng).map(|t| t.log.total_return)
    })
    .into_iter()
    .collect()
}

/// Collect, update and evaluate for `cfg.epochs` epochs on one graph corpus.
pub fn finetune(
    model: &mut Recommender,
    task: &Task<'_>,
    population: &PopulationConfig,
    cfg: &FinetuneConfig,
    base_seed: u64,
    exec: Execution,
) -> Result<Vec<EpochResult>, TrainError> {
    let tasks = std::slice::from_ref(task);
    let mut adam = Adam::new(&model.store, cfg.rl.adam());
    let mut rng = seed::rng(base_seed, "finetune-update", 0);
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let trajs = collect(
            model,
            tasks,
            population,
            Budget::Episodes(cfg.episodes_per_collect),
            seed::derive(base_seed, "finetune-collect", epoch as u64),
            exec,
        )?;
        let (train_mean, _) = mean_return(&trajs);
        reinforce_update(model, &mut adam, &trajs, &cfg.rl, &mut rng)?;
        let test_returns = evaluate(
            model,
            task,
            population,
            cfg.eval_episodes,
            cfg.eval_mode,
            seed::derive(base_seed, "finetune-eval", epoch as u64),
            exec,
        )?;
        let test_mean = test_returns.iter().sum::<f64>() / test_returns.len().max(1) as f64;
        out.push(EpochResult {
            epoch,
            train_mean,
            test_mean,
            test_returns,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub lr: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub batch_size: usize,
    pub repeat_per_collect: usize,
    pub hidden: usize,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            discount: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            batch_size: 16,
            repeat_per_collect: 10,
            hidden: 128,
            normalize_advantages: true,
        }
    }
}

/// Generalised advantage estimates and value targets for one episode.
/// The episode is terminal, so the value after the last step is zero.
pub fn gae(rewards: &[f64], values: &[f64], discount: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + discount * next - values[t];
        acc = delta + discount * lambda * acc;
        adv[t] = acc;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub updates: usize,
}

/// Clipped-surrogate PPO over episodes of flat transitions.
pub fn ppo_update<R: Rng + ?Sized>(
    ac: &mut MlpActorCritic,
    adam: &mut Adam,
    episodes: &[Vec<FlatTransition>],
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<PpoStats, TrainError> {
    let mut flat: Vec<&FlatTransition> = Vec::new();
    let mut advantages = Vec::new();
    let mut targets = Vec::new();
    for ep in episodes {
        let rewards: Vec<f64> = ep.iter().map(|t| t.reward).collect();
        let values: Vec<f64> = ep.iter().map(|t| t.value).collect();
        let (a, v) = gae(&rewards, &values, cfg.discount, cfg.gae_lambda);
        flat.extend(ep.iter());
        advantages.extend(a);
        targets.extend(v);
    }
    if flat.is_empty() {
        return Err(TrainError::Config("no transitions to learn from".into()));
    }
    if cfg.normalize_advantages {
        advantages = standardize(&advantages);
    }
    let mut stats = PpoStats::default();
    let mut grads = Grads::zeros_like(&ac.store);
    for mb in minibatches(flat.len(), cfg.batch_size, cfg.repeat_per_collect, rng) {
        let obs: Vec<&[f64]> = mb.iter().map(|&i| flat[i].observation.as_slice()).collect();
        let tape = Tape::new();
        let (log_probs, values) = ac.forward(&tape, &obs)?;
        let n_actions = log_probs.shape()[1];
        let rows: Vec<usize> = mb.iter().enumerate().map(|(r, &i)| r * n_actions + flat[i].action).collect();
        let new_lp = log_probs.pick(&rows)?;
        let old_lp = tape.constant(Tensor::column(mb.iter().map(|&i| flat[i].log_prob).collect()));
        let ratio = new_lp.sub(old_lp)?.exp();
        let adv = Tensor::column(mb.iter().map(|&i| advantages[i]).collect());
        let unclipped = ratio.mul_const(adv.clone())?;
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip).mul_const(adv)?;
        let policy_loss = unclipped.minimum(clipped)?.mean().neg();
        let target = tape.constant(Tensor::column(mb.iter().map(|&i| targets[i]).collect()));
        let err = values.sub(target)?;
        let value_loss = err.hadamard(err)?.mean();
        let entropy = log_probs.exp().hadamard(log_probs)?.sum().scale(-1.0 / mb.len() as f64);
        let loss = policy_loss
            .add(value_loss.scale(cfg.value_coef))?
            .sub(entropy.scale(cfg.entropy_coef))?;
        grads.zero();
        tape.backward(loss, &mut grads)?;
        adam.step(&mut ac.store, &grads);
        stats.policy_loss += policy_loss.item();
        stats.value_loss += value_loss.item();
        stats.entropy += entropy.item();
        stats.updates += 1;
    }
    let n = stats.updates.max(1) as f64;
    stats.policy_loss /= n;
    stats.value_loss /= n;
    stats.entropy /= n;
    Ok(stats)
}
