//! The interface every recommender implements, and the rollout loop.

use rand::RngCore;

use crate::corpus::Corpus;
use crate::student::{EnvError, Episode, EpisodeConfig, EpisodeLog, Feedback, PopulationConfig};

/// A recommender acting on one student at a time.
///
/// Only [`Episode::history`] is observable. The oracle is the single
/// implementation allowed to read [`Episode::hidden`].
pub trait Policy {
    /// Called before the first step with a new student.
    fn begin_episode(&mut self, _corpus: &Corpus) {}

    fn act(&mut self, episode: &Episode<'_>, rng: &mut dyn RngCore) -> usize;

    /// Called after every step with the outcome of `doc`.
    fn observe(&mut self, _doc: usize, _feedback: Feedback, _reward: f64) {}
}

/// Plays one full episode with a freshly sampled student.
pub fn run_episode<P: Policy + ?Sized, R: RngCore>(
    policy: &mut P,
    corpus: &Corpus,
    population: &PopulationConfig,
    config: EpisodeConfig,
    student_rng: &mut R,
    policy_rng: &mut dyn RngCore,
) -> Result<EpisodeLog, EnvError> {
    let mut episode = Episode::reset(corpus, population, config, student_rng);
    policy.begin_episode(corpus);
    while !episode.is_done() {
        let doc = policy.act(&episode, policy_rng);
        let out = episode.step(doc)?;
        policy.observe(doc, out.feedback, out.reward);
    }
    Ok(episode.into_log())
}
