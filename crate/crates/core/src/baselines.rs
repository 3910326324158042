//! Comparison policies: the environment oracle, uniform random, a linear
//! Thompson-sampling bandit, and an MLP actor-critic on the flat feedback
//! vector trained with PPO.

use nalgebra::{Cholesky, Matrix3, Vector3};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::gnn::{act, feedback_matrix, ActMode, FEEDBACK_CLASSES};
use crate::par::Execution;
use crate::policy::{run_episode, Policy};
use crate::seed;
use crate::student::{Episode, Feedback, PopulationConfig};
use crate::tensor::layers::Mlp2;
use crate::tensor::{Adam, AdamConfig, ParamStore, Tape, Tensor, TensorError, Var};
use crate::train::{self, EpochResult, PpoConfig, Task, TrainError};

/// Greedy on immediate gain among learnable documents; ties and the
/// nothing-learnable case go to the lowest id.
pub fn oracle_action(episode: &Episode<'_>) -> usize {
    let mut best = None;
    let mut best_gain = 0.0;
    for d in 0..episode.corpus().n_docs() {
        if episode.peek(d) != Ok(Feedback::RightLevel) {
            continue;
        }
        let g = episode.gain(d);
        if best.is_none() || g > best_gain {
            best = Some(d);
            best_gain = g;
        }
    }
    best.unwrap_or(0)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn act(&mut self, episode: &Episode<'_>, _rng: &mut dyn RngCore) -> usize {
        oracle_action(episode)
    }
}

pub fn random_act<R: RngCore + ?Sized>(n_docs: usize, rng: &mut R) -> usize {
    rng.random_range(0..n_docs)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn act(&mut self, episode: &Episode<'_>, rng: &mut dyn RngCore) -> usize {
        random_act(episode.corpus().n_docs(), rng)
    }
}

/// `(1, times recommended, times at the right level)` for `doc` in the
/// current session.
pub fn cmab_context(history: &[(usize, Feedback)], doc: usize) -> [f64; 3] {
    let mut c = [1.0, 0.0, 0.0];
    for &(d, f) in history {
        if d == doc {
            c[1] += 1.0;
            if f == Feedback::RightLevel {
                c[2] += 1.0;
            }
        }
    }
    c
}

/// Bayesian linear regression `r = θᵀc + ε`, prior `θ ~ N(0, I / prior_precision)`,
/// `ε ~ N(0, noise_var)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CmabState {
    /// Posterior precision `B = λI + Σ c cᵀ / σ²`.
    pub precision: Matrix3<f64>,
    /// `f = Σ c r / σ²`.
    pub response: Vector3<f64>,
    pub noise_var: f64,
}

impl Default for CmabState {
    fn default() -> Self {
        Self::new(1.0, 1.0)
    }
}

impl CmabState {
    pub fn new(prior_precision: f64, noise_var: f64) -> Self {
        Self {
            precision: Matrix3::identity() * prior_precision,
            response: Vector3::zeros(),
            noise_var,
        }
    }

    pub fn posterior_mean(&self) -> Vector3<f64> {
        self.cholesky().solve(&self.response)
    }

    fn cholesky(&self) -> Cholesky<f64, nalgebra::U3> {
        // The prior term keeps B positive definite.
        Cholesky::new(self.precision).expect("posterior precision is positive definite")
    }

    /// Draw from `N(B⁻¹f, B⁻¹)`: with `B = LLᵀ`, `θ = μ + L⁻ᵀ z`.
    pub fn sample_theta<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector3<f64> {
        let chol = self.cholesky();
        let mean = chol.solve(&self.response);
        let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let l = chol.l();
        let offset = l.transpose().solve_upper_triangular(&z).expect("nonsingular factor");
        mean + offset
    }
}

/// Thompson step: argmax of `θᵀc` with uniform tie-breaking.
pub fn cmab_act<R: Rng + ?Sized>(state: &CmabState, contexts: &[[f64; 3]], rng: &mut R) -> usize {
    let theta = state.sample_theta(rng);
    let scores: Vec<f64> = contexts.iter().map(|c| theta.dot(&Vector3::from(*c))).collect();
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] == best).collect();
    ties[rng.random_range(0..ties.len())]
}

pub fn cmab_observe(state: &mut CmabState, context: &[f64; 3], reward: f64) {
    let c = Vector3::from(*context);
    state.precision += c * c.transpose() / state.noise_var;
    state.response += c * reward / state.noise_var;
}

/// Thompson step with one regression per document: each arm scores its own
/// context under its own posterior draw.
pub fn cmab_act_per_arm<R: Rng + ?Sized>(states: &[CmabState], contexts: &[[f64; 3]], rng: &mut R) -> usize {
    let scores: Vec<f64> = states
        .iter()
        .zip(contexts)
        .map(|(s, c)| s.sample_theta(rng).dot(&Vector3::from(*c)))
        .collect();
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] == best).collect();
    ties[rng.random_range(0..ties.len())]
}

/// How the bandit's regression weights are tied across documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CmabSharing {
    /// One weight vector for all documents. Documents with equal contexts
    /// are indistinguishable, so it cannot learn which document to teach.
    Shared,
    /// One weight vector per document.
    #[default]
    PerArm,
}

/// Bandit that learns across students.
#[derive(Debug, Clone, Default)]
pub struct CmabPolicy {
    pub sharing: CmabSharing,
    /// One state when shared; one per document otherwise (allocated lazily).
    pub arms: Vec<CmabState>,
    /// When false the posterior is frozen (evaluation).
    pub learning: bool,
    pending: Option<(usize, [f64; 3])>,
}

impl CmabPolicy {
    pub fn new(sharing: CmabSharing) -> Self {
        Self {
            sharing,
            arms: Vec::new(),
            learning: true,
            pending: None,
        }
    }

    fn arm_index(&self, doc: usize) -> usize {
        match self.sharing {
            CmabSharing::Shared => 0,
            CmabSharing::PerArm => doc,
        }
    }
}

impl Policy for CmabPolicy {
    fn begin_episode(&mut self, corpus: &Corpus) {
        self.pending = None;
        let n = match self.sharing {
            CmabSharing::Shared => 1,
            CmabSharing::PerArm => corpus.n_docs(),
        };
        if self.arms.len() != n {
            self.arms = vec![CmabState::default(); n];
        }
    }

    fn act(&mut self, episode: &Episode<'_>, rng: &mut dyn RngCore) -> usize {
        let history = episode.history();
        let contexts: Vec<[f64; 3]> = (0..episode.corpus().n_docs()).map(|d| cmab_context(history, d)).collect();
        let doc = match self.sharing {
            CmabSharing::Shared => cmab_act(&self.arms[0], &contexts, rng),
            CmabSharing::PerArm => cmab_act_per_arm(&self.arms, &contexts, rng),
        };
        self.pending = Some((doc, contexts[doc]));
        doc
    }

    fn observe(&mut self, _doc: usize, _feedback: Feedback, reward: f64) {
        if let Some((doc, c)) = self.pending.take() {
            if self.learning {
                let arm = self.arm_index(doc);
                cmab_observe(&mut self.arms[arm], &c, reward);
            }
        }
    }
}

/// Concatenated 4-way latest-feedback one-hots, document-major.
pub fn flat_observation(n_docs: usize, history: &[(usize, Feedback)]) -> Vec<f64> {
    feedback_matrix(n_docs, history)
        .expect("history references known documents")
        .into_data()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatTransition {
    pub observation: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
}

/// Separate actor and critic MLPs over the flat observation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpActorCritic {
    pub store: ParamStore,
    actor: Mlp2,
    critic: Mlp2,
    pub n_actions: usize,
}

impl MlpActorCritic {
    pub fn new<R: Rng + ?Sized>(n_docs: usize, hidden: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let obs = n_docs * FEEDBACK_CLASSES;
        let actor = Mlp2::new(&mut store, "actor", obs, hidden, n_docs, rng);
        let critic = Mlp2::new(&mut store, "critic", obs, hidden, 1, rng);
        Self {
            store,
            actor,
            critic,
            n_actions: n_docs,
        }
    }

    /// `(log π [B×A], V [B×1])` for a batch of observations.
    pub fn forward<'t>(&self, tape: &'t Tape, observations: &[&[f64]]) -> Result<(Var<'t>, Var<'t>), TensorError> {
        let rows: Vec<Vec<f64>> = observations.iter().map(|o| o.to_vec()).collect();
        let x = tape.constant(Tensor::from_rows(&rows)?);
        let logits = self.actor.forward(tape, &self.store, x)?;
        let values = self.critic.forward(tape, &self.store, x)?;
        Ok((logits.log_softmax(1)?, values))
    }

    pub fn step_values(&self, observation: &[f64]) -> Result<(Vec<f64>, f64), TensorError> {
        let tape = Tape::new();
        let (lp, v) = self.forward(&tape, &[observation])?;
        let probs = lp.value().data().iter().map(|x| x.exp()).collect();
        let value = v.item();
        Ok((probs, value))
    }
}

/// [`MlpActorCritic`] as a [`Policy`]; records transitions while acting.
pub struct MlpPolicy<'a> {
    pub net: &'a MlpActorCritic,
    pub mode: ActMode,
    pub record: Vec<FlatTransition>,
}

impl Policy for MlpPolicy<'_> {
    fn act(&mut self, episode: &Episode<'_>, rng: &mut dyn RngCore) -> usize {
        let obs = flat_observation(episode.corpus().n_docs(), episode.history());
        let (probs, value) = self.net.step_values(&obs).expect("consistent shapes");
        let action = act(&probs, self.mode, rng);
        self.record.push(FlatTransition {
            observation: obs,
            action,
            log_prob: probs[action].ln(),
            value,
            reward: 0.0,
        });
        action
    }

    fn observe(&mut self, _doc: usize, _feedback: Feedback, reward: f64) {
        if let Some(last) = self.record.last_mut() {
            last.reward = reward;
        }
    }
}

/// Shared protocol for the non-GNN learners, mirroring fine-tuning:
/// per epoch, learn from `episodes_per_collect` students, then report the
/// mean over `eval_episodes` fresh test students.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineProtocol {
    pub epochs: usize,
    pub episodes_per_collect: usize,
    pub eval_episodes: usize,
    pub cmab_sharing: CmabSharing,
}

impl Default for BaselineProtocol {
    fn default() -> Self {
        Self {
            epochs: 10,
            episodes_per_collect: 5,
            eval_episodes: 20,
            cmab_sharing: CmabSharing::default(),
        }
    }
}

fn test_returns<P: Policy + Clone + Send + Sync>(
    policy: &P,
    task: &Task<'_>,
    population: &PopulationConfig,
    episodes: usize,
    base_seed: u64,
    exec: Execution,
) -> Result<Vec<f64>, TrainError> {
    exec.map_range(episodes, |i| {
        let mut p = policy.clone();
        let mut student_rng = seed::rng(base_seed, "test", i as u64);
        let mut policy_rng = seed::rng(base_seed, "test-policy", i as u64);
        run_episode(&mut p, task.corpus, population, task.episode, &mut student_rng, &mut policy_rng)
            .map(|l| l.total_return)
            .map_err(TrainError::from)
    })
    .into_iter()
    .collect()
}

fn epoch_result(epoch: usize, train: &[f64], test: Vec<f64>) -> EpochResult {
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    EpochResult {
        epoch,
        train_mean: mean(train),
        test_mean: mean(&test),
        test_returns: test,
    }
}

/// Oracle or random: nothing to learn, only evaluation per epoch.
pub fn static_curve<P: Policy + Clone + Send + Sync>(
    policy: &P,
    task: &Task<'_>,
    population: &PopulationConfig,
    protocol: &BaselineProtocol,
    base_seed: u64,
    exec: Execution,
) -> Result<Vec<EpochResult>, TrainError> {
    (1..=protocol.epochs)
        .map(|epoch| {
            let test = test_returns(
                policy,
                task,
                population,
                protocol.eval_episodes,
                seed::derive(base_seed, "baseline-eval", epoch as u64),
                exec,
            )?;
            Ok(epoch_result(epoch, &[], test))
        })
        .collect()
}

/// The bandit learns online from training students; the posterior is frozen
/// while test students are evaluated.
pub fn cmab_curve(
    task: &Task<'_>,
    population: &PopulationConfig,
    protocol: &BaselineProtocol,
    base_seed: u64,
    sharing: CmabSharing,
    exec: Execution,
) -> Result<Vec<EpochResult>, TrainError> {
    let mut policy = CmabPolicy::new(sharing);
    let mut out = Vec::with_capacity(protocol.epochs);
    for epoch in 1..=protocol.epochs {
        let mut train = Vec::new();
        for e in 0..protocol.episodes_per_collect {
            let idx = (epoch * protocol.episodes_per_collect + e) as u64;
            let mut student_rng = seed::rng(base_seed, "cmab-train", idx);
            let mut policy_rng = seed::rng(base_seed, "cmab-train-policy", idx);
            let log = run_episode(&mut policy, task.corpus, population, task.episode, &mut student_rng, &mut policy_rng)?;
            train.push(log.total_return);
        }
        let mut frozen = policy.clone();
        frozen.learning = false;
        let test = test_returns(
            &frozen,
            task,
            population,
            protocol.eval_episodes,
            seed::derive(base_seed, "baseline-eval", epoch as u64),
            exec,
        )?;
        out.push(epoch_result(epoch, &train, test));
    }
    Ok(out)
}

impl Clone for MlpPolicy<'_> {
    fn clone(&self) -> Self {
        Self {
            net: self.net,
            mode: self.mode,
            record: Vec::new(),
        }
    }
}

/// PPO on the flat observation with the fine-tuning protocol.
pub fn ppo_curve(
    task: &Task<'_>,
    population: &PopulationConfig,
    protocol: &BaselineProtocol,
    cfg: &PpoConfig,
    base_seed: u64,
    exec: Execution,
) -> Result<Vec<EpochResult>, TrainError> {
    let mut init = seed::rng(base_seed, "ppo-init", 0);
    let mut net = MlpActorCritic::new(task.corpus.n_docs(), cfg.hidden, &mut init);
    let mut adam = Adam::new(&net.store, AdamConfig::with_lr(cfg.lr));
    let mut update_rng = seed::rng(base_seed, "ppo-update", 0);
    let mut out = Vec::with_capacity(protocol.epochs);
    for epoch in 1..=protocol.epochs {
        let mut episodes = Vec::new();
        let mut train = Vec::new();
        for e in 0..protocol.episodes_per_collect {
            let idx = (epoch * protocol.episodes_per_collect + e) as u64;
            let mut student_rng = seed::rng(base_seed, "ppo-train", idx);
            let mut policy_rng = seed::rng(base_seed, "ppo-train-policy", idx);
            let mut policy = MlpPolicy {
                net: &net,
                mode: ActMode::Sample,
                record: Vec::new(),
            };
            let log = run_episode(&mut policy, task.corpus, population, task.episode, &mut student_rng, &mut policy_rng)?;
            train.push(log.total_return);
            episodes.push(policy.record);
        }
        train::ppo_update(&mut net, &mut adam, &episodes, cfg, &mut update_rng)?;
        let eval_policy = MlpPolicy {
            net: &net,
            mode: ActMode::Sample,
            record: Vec::new(),
        };
        let test = test_returns(
            &eval_policy,
            task,
            population,
            protocol.eval_episodes,
            seed::derive(base_seed, "baseline-eval", epoch as u64),
            exec,
        )?;
        out.push(epoch_result(epoch, &train, test));
    }
    Ok(out)
}

/// Hyperparameter grid searched for the PPO baseline.
pub fn ppo_search_grid() -> Vec<PpoConfig> {
    let mut out = Vec::new();
    for lr in [1e-4, 3e-4, 1e-3] {
        for hidden in [64, 128, 256] {
            for batch_size in [16, 64] {
                for repeat_per_collect in [2, 10, 15] {
                    out.push(PpoConfig {
                        lr,
                        hidden,
                        batch_size,
                        repeat_per_collect,
                        ..PpoConfig::default()
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn context_counts() {
        assert_eq!(cmab_context(&[], 3), [1.0, 0.0, 0.0]);
        let h = [(3, Feedback::RightLevel), (1, Feedback::TooHard), (3, Feedback::TooEasy)];
        assert_eq!(cmab_context(&h, 3), [1.0, 2.0, 1.0]);
    }

    #[test]
    fn observe_matches_closed_form() {
        let mut s = CmabState::default();
        let data = [([1.0, 0.0, 0.0], 1.0), ([1.0, 1.0, 1.0], 0.0), ([1.0, 2.0, 0.0], 3.0)];
        for (c, r) in &data {
            cmab_observe(&mut s, c, *r);
        }
        // (I + XᵀX)⁻¹ Xᵀy
        let x = nalgebra::Matrix3::from_row_slice(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 2.0, 0.0]);
        let y = Vector3::new(1.0, 0.0, 3.0);
        let want = (Matrix3::identity() + x.transpose() * x).try_inverse().unwrap() * x.transpose() * y;
        assert!((s.posterior_mean() - want).norm() < 1e-12);
    }

    #[test]
    fn sample_covariance_matches_posterior() {
        let mut s = CmabState::default();
        cmab_observe(&mut s, &[1.0, 2.0, 1.0], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 40_000;
        let draws: Vec<Vector3<f64>> = (0..n).map(|_| s.sample_theta(&mut rng)).collect();
        let mean = draws.iter().fold(Vector3::zeros(), |a, d| a + d) / n as f64;
        let mut cov = Matrix3::zeros();
        for d in &draws {
            cov += (d - mean) * (d - mean).transpose();
        }
        cov /= n as f64;
        let want = s.precision.try_inverse().unwrap();
        assert!((mean - s.posterior_mean()).norm() < 0.02);
        assert!((cov - want).abs().max() < 0.03, "{cov} vs {want}");
    }

    #[test]
    fn flat_observation_layout() {
        let obs = flat_observation(3, &[(1, Feedback::TooHard)]);
        assert_eq!(obs, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
