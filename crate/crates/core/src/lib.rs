//! Learning-path recommendation with a bipartite graph transformer.
//!
//! The crate is organised bottom-up:
//!
//! * [`corpus`]: knowledge components, documents, keywords and embeddings.
//! * [`student`]: the simulated-student POMDP.
//! * [`tensor`]: dense `f64` tensors, a reverse-mode tape and layers.
//! * [`gnn`]: the document/keyword graph state and the recommender.
//! * [`train`]: imitation, REINFORCE, PPO and the fine-tuning loop.
//! * [`baselines`]: oracle, random, Thompson-sampling bandit and MLP policies.
//! * [`harness`]: configs, persisted runs and bootstrap statistics.
//!
//! Independent units of work (episodes, seeds, bootstrap trials) are mapped
//! through [`par::Execution`], which uses rayon when the `parallel` feature
//! is enabled and a plain loop otherwise. Results are identical either way.

pub mod baselines;
pub mod corpus;
pub mod gnn;
pub mod harness;
pub mod par;
pub mod policy;
pub mod seed;
pub mod student;
pub mod tensor;
pub mod train;
