//! Simulated students and the episodic dynamics of the recommendation task.
//!
//! A student is a binary knowledge vector over KCs plus a set of extra
//! "learning preference" edges. Its knowledge is always closed under the
//! union of prerequisite and preference edges. Recommending a document
//! yields a feedback signal (too hard, right level, too easy); a document at
//! the right level teaches all of its KCs.

use std::io::Write;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{parents_of, Corpus, CorpusKind, Document};

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("document {0} does not exist")]
    InvalidDocument(usize),
    #[error("episode is finished; call reset before stepping again")]
    EpisodeDone,
    #[error("knowledge state violates prerequisite closure at document {0}")]
    ClosureViolation(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    TooHard,
    RightLevel,
    TooEasy,
}

impl Feedback {
    pub const ALL: [Feedback; 3] = [Feedback::TooHard, Feedback::RightLevel, Feedback::TooEasy];

    pub fn as_str(self) -> &'static str {
        match self {
            Feedback::TooHard => "too_hard",
            Feedback::RightLevel => "right_level",
            Feedback::TooEasy => "too_easy",
        }
    }

    /// Class index used by feedback-prediction heads.
    pub fn index(self) -> usize {
        match self {
            Feedback::TooHard => 0,
            Feedback::RightLevel => 1,
            Feedback::TooEasy => 2,
        }
    }
}

impl std::fmt::Display for Feedback {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorScenario {
    None,
    DecreasingExp,
    Uniform,
}

impl PriorScenario {
    pub const ALL: [PriorScenario; 3] =
        [PriorScenario::None, PriorScenario::DecreasingExp, PriorScenario::Uniform];

    /// Short name used on the command line and in result files.
    pub fn cli_name(self) -> &'static str {
        match self {
            PriorScenario::None => "none",
            PriorScenario::DecreasingExp => "decexp",
            PriorScenario::Uniform => "uniform",
        }
    }

    pub fn from_cli_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.cli_name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub prior_scenario: PriorScenario,
    pub pref_edge_prob: f64,
    pub decreasing_exp_param: f64,
    pub background_known_prob: f64,
}

impl PopulationConfig {
    /// Defaults for a scenario: the background KC is never known without
    /// prior knowledge and known half of the time otherwise.
    pub fn for_scenario(prior_scenario: PriorScenario) -> Self {
        Self {
            prior_scenario,
            pref_edge_prob: 0.3,
            decreasing_exp_param: 0.25,
            background_known_prob: match prior_scenario {
                PriorScenario::None => 0.0,
                _ => 0.5,
            },
        }
    }

    pub fn zero_prior() -> Self {
        Self::for_scenario(PriorScenario::None)
    }

    pub fn check(&self) -> Result<(), String> {
        for (name, p) in [
            ("pref_edge_prob", self.pref_edge_prob),
            ("decreasing_exp_param", self.decreasing_exp_param),
            ("background_known_prob", self.background_known_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} is not a probability"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub horizon: usize,
    pub discount: f64,
    pub weighted_reward: bool,
    /// End the episode early once every document would be too easy.
    #[serde(default)]
    pub stop_when_exhausted: bool,
}

impl EpisodeConfig {
    pub fn new(horizon: usize, discount: f64, weighted_reward: bool) -> Self {
        Self {
            horizon,
            discount,
            weighted_reward,
            stop_when_exhausted: false,
        }
    }

    /// Horizon equal to the number of documents, unweighted reward.
    pub fn for_sequential(c: &Corpus, discount: f64) -> Self {
        Self::new(c.n_docs(), discount, false)
    }

    /// Horizon equal to the number of grid columns, weighted reward.
    pub fn for_grid(c: &Corpus) -> Self {
        let horizon = c.grid.map(|g| g.columns).unwrap_or(c.n_docs());
        Self::new(horizon, 0.0, true)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StudentState {
    pub knowledge: Vec<bool>,
    pub pref_edges: Vec<(usize, usize)>,
}

impl StudentState {
    pub fn blank(n_kcs: usize) -> Self {
        Self {
            knowledge: vec![false; n_kcs],
            pref_edges: Vec::new(),
        }
    }

    pub fn known_count(&self) -> usize {
        self.knowledge.iter().filter(|&&k| k).count()
    }
}

/// Candidate preference edges are the grid's vertical edges; other corpora
/// have none.
pub fn sample_preferences<R: Rng + ?Sized>(
    c: &Corpus,
    cfg: &PopulationConfig,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    if c.kind == CorpusKind::Sequential {
        return Vec::new();
    }
    let Some(layout) = c.grid else {
        return Vec::new();
    };
    layout
        .vertical_edges()
        .into_iter()
        .filter(|_| rng.random_bool(cfg.pref_edge_prob))
        .collect()
}

/// Direct predecessors of every KC under prerequisites plus preferences.
pub fn student_parents(c: &Corpus, prefs: &[(usize, usize)]) -> Vec<Vec<usize>> {
    parents_of(
        c.n_kcs(),
        c.prereq_edges.iter().chain(prefs.iter()).copied(),
    )
}

fn requirements_from_parents(d: &Document, parents: &[Vec<usize>]) -> Vec<usize> {
    let mut req: Vec<usize> = d
        .teaches
        .iter()
        .flat_map(|&k| parents[k].iter().copied())
        .filter(|k| !d.teaches.contains(k))
        .collect();
    req.sort_unstable();
    req.dedup();
    req
}

/// Requirement set of a document: the direct predecessors of the KCs it
/// teaches, minus the KCs it teaches itself.
pub fn doc_requirements(c: &Corpus, d: &Document, prefs: &[(usize, usize)]) -> Vec<usize> {
    requirements_from_parents(d, &student_parents(c, prefs))
}

pub fn mastery(s: &StudentState, kcs: &[usize]) -> bool {
    kcs.iter().all(|&k| s.knowledge[k])
}

pub fn is_closed(knowledge: &[bool], parents: &[Vec<usize>]) -> bool {
    knowledge
        .iter()
        .enumerate()
        .all(|(k, &known)| !known || parents[k].iter().all(|&p| knowledge[p]))
}

fn observe_with(s: &StudentState, d: &Document, requirements: &[usize]) -> Result<Feedback, EnvError> {
    let ready = mastery(s, requirements);
    let all_known = mastery(s, &d.teaches);
    match (ready, all_known) {
        (false, true) => Err(EnvError::ClosureViolation(d.id)),
        (false, false) => Ok(Feedback::TooHard),
        (true, true) => Ok(Feedback::TooEasy),
        (true, false) => Ok(Feedback::RightLevel),
    }
}

pub fn observe(c: &Corpus, s: &StudentState, d: &Document) -> Result<Feedback, EnvError> {
    observe_with(s, d, &doc_requirements(c, d, &s.pref_edges))
}

pub fn transition(c: &Corpus, s: &StudentState, d: &Document) -> Result<StudentState, EnvError> {
    let mut next = s.clone();
    if observe(c, s, d)? == Feedback::RightLevel {
        for &k in &d.teaches {
            next.knowledge[k] = true;
        }
    }
    Ok(next)
}

pub fn reward(s: &StudentState, next: &StudentState, c: &Corpus, weighted: bool) -> f64 {
    s.knowledge
        .iter()
        .zip(&next.knowledge)
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(k, _)| if weighted { c.kc_value(k) } else { 1.0 })
        .sum()
}

/// Draws a prerequisite-closed prior knowledge vector.
pub fn sample_prior_knowledge<R: Rng + ?Sized>(
    c: &Corpus,
    prefs: &[(usize, usize)],
    cfg: &PopulationConfig,
    rng: &mut R,
) -> Vec<bool> {
    let n = c.n_kcs();
    let mut x = vec![false; n];
    if cfg.prior_scenario == PriorScenario::None {
        return x;
    }
    let background = c.grid.map(|g| g.background());
    if let Some(bg) = background {
        x[bg] = rng.random_bool(cfg.background_known_prob);
    }
    let eligible = n - usize::from(background.is_some());
    let target = match cfg.prior_scenario {
        PriorScenario::None => 0,
        PriorScenario::Uniform => rng.random_range(0..eligible.max(1)),
        PriorScenario::DecreasingExp => {
            truncated_geometric(cfg.decreasing_exp_param, eligible.saturating_sub(1), rng)
        }
    };
    let parents = student_parents(c, prefs);
    let mut known = 0;
    while known < target {
        let candidates: Vec<usize> = (0..n)
            .filter(|&k| Some(k) != background && !x[k] && parents[k].iter().all(|&p| x[p]))
            .collect();
        match candidates.choose(rng) {
            Some(&k) => {
                x[k] = true;
                known += 1;
            }
            None => break,
        }
    }
    x
}

/// `P(n) ∝ p (1 - p)^n` on `0..=max`.
fn truncated_geometric<R: Rng + ?Sized>(p: f64, max: usize, rng: &mut R) -> usize {
    if p >= 1.0 {
        return 0;
    }
    if p <= 0.0 {
        return rng.random_range(0..=max);
    }
    let weights: Vec<f64> = (0..=max).map(|k| p * (1.0 - p).powi(k as i32)).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    max
}

pub fn sample_student<R: Rng + ?Sized>(
    c: &Corpus,
    cfg: &PopulationConfig,
    rng: &mut R,
) -> StudentState {
    let pref_edges = sample_preferences(c, cfg, rng);
    let knowledge = sample_prior_knowledge(c, &pref_edges, cfg, rng);
    StudentState {
        knowledge,
        pref_edges,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub doc: usize,
    pub feedback: Feedback,
    pub reward: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub steps: Vec<StepRecord>,
    /// Undiscounted sum of step rewards.
    pub total_return: f64,
}

impl EpisodeLog {
    pub fn discounted_return(&self, discount: f64) -> f64 {
        self.steps
            .iter()
            .rev()
            .fold(0.0, |acc, s| s.reward + discount * acc)
    }
}

/// Writes episode logs in the line-per-step CSV format.
pub fn write_episode_csv<W: Write>(
    out: W,
    run_id: &str,
    seed: u64,
    episodes: &[EpisodeLog],
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run_id", "seed", "episode", "step", "doc_id", "feedback", "reward"])?;
    for (e, log) in episodes.iter().enumerate() {
        for (t, step) in log.steps.iter().enumerate() {
            w.write_record([
                run_id.to_string(),
                seed.to_string(),
                e.to_string(),
                t.to_string(),
                step.doc.to_string(),
                step.feedback.to_string(),
                step.reward.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub feedback: Feedback,
    pub reward: f64,
    pub done: bool,
}

/// One student session on one corpus.
///
/// Policies see only [`Episode::history`]; [`Episode::hidden`] exists for
/// the oracle and for tests.
#[derive(Debug, Clone)]
pub struct Episode<'c> {
    corpus: &'c Corpus,
    config: EpisodeConfig,
    state: StudentState,
    requirements: Vec<Vec<usize>>,
    history: Vec<(usize, Feedback)>,
    log: EpisodeLog,
    done: bool,
}

impl<'c> Episode<'c> {
    pub fn new(corpus: &'c Corpus, state: StudentState, config: EpisodeConfig) -> Self {
        let parents = student_parents(corpus, &state.pref_edges);
        let requirements = corpus
            .docs
            .iter()
            .map(|d| requirements_from_parents(d, &parents))
            .collect();
        let mut episode = Self {
            corpus,
            config,
            state,
            requirements,
            history: Vec::new(),
            log: EpisodeLog::default(),
            done: false,
        };
        episode.done = config.horizon == 0 || episode.exhausted();
        episode
    }

    /// Samples a student from the population and starts a session.
    pub fn reset<R: Rng + ?Sized>(
        corpus: &'c Corpus,
        population: &PopulationConfig,
        config: EpisodeConfig,
        rng: &mut R,
    ) -> Self {
        Self::new(corpus, sample_student(corpus, population, rng), config)
    }

    pub fn corpus(&self) -> &'c Corpus {
        self.corpus
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.config
    }

    pub fn history(&self) -> &[(usize, Feedback)] {
        &self.history
    }

    pub fn hidden(&self) -> &StudentState {
        &self.state
    }

    pub fn requirements(&self, doc: usize) -> &[usize] {
        &self.requirements[doc]
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn steps_taken(&self) -> usize {
        self.history.len()
    }

    pub fn log(&self) -> &EpisodeLog {
        &self.log
    }

    pub fn into_log(self) -> EpisodeLog {
        self.log
    }

    /// Feedback the student would give on `doc` right now.
    pub fn peek(&self, doc: usize) -> Result<Feedback, EnvError> {
        let d = self.corpus.docs.get(doc).ok_or(EnvError::InvalidDocument(doc))?;
        observe_with(&self.state, d, &self.requirements[doc])
    }

    /// Value of the KCs `doc` would teach if recommended now.
    pub fn gain(&self, doc: usize) -> f64 {
        if self.peek(doc) != Ok(Feedback::RightLevel) {
            return 0.0;
        }
        self.corpus.docs[doc]
            .teaches
            .iter()
            .filter(|&&k| !self.state.knowledge[k])
            .map(|&k| {
                if self.config.weighted_reward {
                    self.corpus.kc_value(k)
                } else {
                    1.0
                }
            })
            .sum()
    }

    fn exhausted(&self) -> bool {
        self.config.stop_when_exhausted
            && (0..self.corpus.n_docs()).all(|d| self.peek(d) == Ok(Feedback::TooEasy))
    }

    pub fn step(&mut self, doc: usize) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let feedback = self.peek(doc)?;
        let mut reward = 0.0;
        if feedback == Feedback::RightLevel {
            let before = self.state.clone();
            for &k in &self.corpus.docs[doc].teaches {
                self.state.knowledge[k] = true;
            }
            reward = self::reward(&before, &self.state, self.corpus, self.config.weighted_reward);
        }
        self.history.push((doc, feedback));
        self.log.steps.push(StepRecord {
            doc,
            feedback,
            reward,
        });
        self.log.total_return += reward;
        self.done = self.history.len() >= self.config.horizon || self.exhausted();
        Ok(StepOutcome {
            feedback,
            reward,
            done: self.done,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_sequential_corpus, synth, EmbeddingStore, GridCorpusSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(n: usize) -> Corpus {
        let store = EmbeddingStore::synthetic(4, ["a", "b"]);
        let assignment: Vec<Vec<String>> = (0..n).map(|_| vec!["a".into(), "b".into()]).collect();
        build_sequential_corpus("chain", &assignment, &store).unwrap()
    }

    fn grid() -> Corpus {
        let store = synth::synthetic_store(4, 11);
        synth::grid_corpus(&GridCorpusSpec::default(), &store).unwrap()
    }

    fn state(bits: &[u8]) -> StudentState {
        StudentState {
            knowledge: bits.iter().map(|&b| b == 1).collect(),
            pref_edges: vec![],
        }
    }

    #[test]
    fn sequential_has_no_preferences() {
        let c = chain(5);
        let cfg = PopulationConfig {
            pref_edge_prob: 1.0,
            ..PopulationConfig::zero_prior()
        };
        assert!(sample_preferences(&c, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_empty());
    }

    #[test]
    fn preference_probability_extremes() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = PopulationConfig::zero_prior();
        cfg.pref_edge_prob = 0.0;
        assert!(sample_preferences(&g, &cfg, &mut rng).is_empty());
        cfg.pref_edge_prob = 1.0;
        let all = sample_preferences(&g, &cfg, &mut rng);
        assert_eq!(all.len(), 22);
        assert_eq!(all, g.grid.unwrap().vertical_edges());
    }

    #[test]
    fn no_prior_scenario_is_blank() {
        let g = grid();
        let x = sample_prior_knowledge(&g, &[], &PopulationConfig::zero_prior(), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(x.iter().all(|&k| !k));
    }

    #[test]
    fn requirements() {
        let c = chain(5);
        assert_eq!(doc_requirements(&c, &c.docs[2], &[]), vec![1]);
        assert!(doc_requirements(&c, &c.docs[0], &[]).is_empty());

        let g = grid();
        let layout = g.grid.unwrap();
        assert_eq!(
            doc_requirements(&g, &g.docs[layout.cs_doc(0)], &[]),
            vec![layout.background()]
        );
        let pref = [(layout.kc(0, 4), layout.kc(1, 4))];
        let req = doc_requirements(&g, &g.docs[layout.non_cs_doc(4)], &pref);
        assert!(!req.contains(&layout.kc(0, 4)));
        assert_eq!(req, vec![layout.kc(1, 3)]);
        // The same edge blocks the CS document of that column.
        let req = doc_requirements(&g, &g.docs[layout.cs_doc(4)], &pref);
        assert!(req.contains(&layout.kc(0, 4)));
    }

    #[test]
    fn mastery_cases() {
        let s = state(&[1, 1, 0]);
        assert!(mastery(&s, &[0, 1]));
        assert!(!mastery(&s, &[2]));
        assert!(mastery(&s, &[]));
    }

    #[test]
    fn observe_cases() {
        let c = chain(3);
        let zero = state(&[0, 0, 0]);
        assert_eq!(observe(&c, &zero, &c.docs[0]), Ok(Feedback::RightLevel));
        assert_eq!(observe(&c, &zero, &c.docs[1]), Ok(Feedback::TooHard));
        assert_eq!(observe(&c, &state(&[1, 0, 0]), &c.docs[0]), Ok(Feedback::TooEasy));
        // k2 known without k1 breaks closure.
        assert_eq!(
            observe(&c, &state(&[0, 1, 0]), &c.docs[1]),
            Err(EnvError::ClosureViolation(1))
        );
    }

    #[test]
    fn transition_cases() {
        let c = chain(3);
        let zero = state(&[0, 0, 0]);
        assert_eq!(transition(&c, &zero, &c.docs[0]).unwrap(), state(&[1, 0, 0]));
        assert_eq!(transition(&c, &zero, &c.docs[1]).unwrap(), zero);
    }

    #[test]
    fn reward_cases() {
        let c = chain(3);
        assert_eq!(reward(&state(&[0, 0, 0]), &state(&[1, 1, 0]), &c, false), 2.0);
        let g = grid();
        let layout = g.grid.unwrap();
        let mut s = StudentState::blank(g.n_kcs());
        let next = transition(&g, &s, &g.docs[layout.non_cs_doc(0)]).unwrap();
        assert_eq!(reward(&s, &next, &g, true), 3.0);
        s.knowledge[layout.background()] = true;
        let next = transition(&g, &s, &g.docs[layout.cs_doc(0)]).unwrap();
        assert_eq!(reward(&s, &next, &g, true), 5.0);
    }

    #[test]
    fn oracle_path_on_chain_returns_n() {
        let c = chain(5);
        let mut ep = Episode::new(&c, StudentState::blank(5), EpisodeConfig::for_sequential(&c, 1.0));
        for d in 0..5 {
            ep.step(d).unwrap();
        }
        assert!(ep.is_done());
        assert_eq!(ep.log().total_return, 5.0);
        assert_eq!(ep.step(0), Err(EnvError::EpisodeDone));
    }

    #[test]
    fn invalid_document() {
        let c = chain(2);
        let mut ep = Episode::new(&c, StudentState::blank(2), EpisodeConfig::new(2, 1.0, false));
        assert_eq!(ep.step(7), Err(EnvError::InvalidDocument(7)));
    }

    #[test]
    fn early_stop_when_exhausted() {
        let c = chain(2);
        let mut cfg = EpisodeConfig::new(10, 1.0, false);
        cfg.stop_when_exhausted = true;
        let mut ep = Episode::new(&c, StudentState::blank(2), cfg);
        ep.step(0).unwrap();
        let out = ep.step(1).unwrap();
        assert!(out.done);
        assert_eq!(ep.steps_taken(), 2);
    }

    #[test]
    fn discounted_return() {
        let log = EpisodeLog {
            steps: (0..3)
                .map(|_| StepRecord {
                    doc: 0,
                    feedback: Feedback::RightLevel,
                    reward: 1.0,
                })
                .collect(),
            total_return: 3.0,
        };
        assert!((log.discounted_return(0.7) - 2.19).abs() < 1e-12);
    }

    #[test]
    fn episode_csv_format() {
        let c = chain(2);
        let mut ep = Episode::new(&c, StudentState::blank(2), EpisodeConfig::new(2, 1.0, false));
        ep.step(1).unwrap();
        ep.step(0).unwrap();
        let mut buf = Vec::new();
        write_episode_csv(&mut buf, "r1", 7, &[ep.into_log()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "run_id,seed,episode,step,doc_id,feedback,reward\n\
             r1,7,0,0,1,too_hard,0\n\
             r1,7,0,1,0,right_level,1\n"
        );
    }

    #[test]
    fn truncated_geometric_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            assert!(truncated_geometric(0.25, 10, &mut rng) <= 10);
        }
        assert_eq!(truncated_geometric(1.0, 10, &mut rng), 0);
    }
}
