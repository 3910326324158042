//! Independent oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use std::sync::Arc;

use pathforge::corpus::{
    build_grid_corpus, build_sequential_corpus, synth, Corpus, CorpusKind, Document, EmbeddingStore, GridCorpusSpec,
    Keyword, KnowledgeComponent,
};
use pathforge::gnn::{build_state, BipartiteState, GraphBatch, ModelConfig, Recommender};
use pathforge::student::{EpisodeConfig, Feedback, StudentState};
use pathforge::tensor::{Grads, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn store(dim: usize, tokens: &[&str]) -> EmbeddingStore {
    EmbeddingStore::synthetic(dim, tokens.iter().copied())
}

/// `n`-document chain whose document `i` carries tokens `t{i}` and `t{i+1}`.
pub fn chain(n: usize, dim: usize) -> Corpus {
    let tokens: Vec<String> = (0..=n).map(|i| format!("t{i}")).collect();
    let refs: Vec<&str> = tokens.iter().map(String::as_str).collect();
    let assignment: Vec<Vec<String>> = (0..n).map(|i| vec![tokens[i].clone(), tokens[i + 1].clone()]).collect();
    build_sequential_corpus(&format!("chain-{n}"), &assignment, &store(dim, &refs)).unwrap()
}

fn raw_corpus(name: &str, n_kcs: usize, docs: Vec<Vec<usize>>, prereq: Vec<(usize, usize)>, dim: usize) -> Corpus {
    let keywords: Vec<Keyword> = (0..docs.len())
        .map(|i| {
            let token = format!("{name}-kw{i}");
            Keyword {
                embedding: store(dim, &[&token]).get(&token).unwrap().to_vec(),
                token,
            }
        })
        .collect();
    Corpus {
        name: name.into(),
        kind: CorpusKind::Graph,
        kcs: (0..n_kcs)
            .map(|id| KnowledgeComponent {
                id,
                label: format!("k{id}"),
                value: 1.0 + id as f64,
            })
            .collect(),
        docs: docs
            .into_iter()
            .enumerate()
            .map(|(id, teaches)| Document {
                id,
                teaches,
                keywords: vec![id],
            })
            .collect(),
        prereq_edges: prereq,
        keywords,
        embedding_dim: dim,
        grid: None,
    }
}

/// Every small corpus shape we care about: chains, a one-column grid, a
/// diamond DAG with a multi-KC document, and a forest.
pub fn small_corpora() -> Vec<Corpus> {
    let mut out: Vec<Corpus> = (1..=5).map(|n| chain(n, 4)).collect();
    let spec = GridCorpusSpec {
        columns: 1,
        ..GridCorpusSpec::default()
    };
    let grid_store = synth::synthetic_store(4, 1);
    let (assignment, _) = synth::grid_keywords(&spec, 4);
    out.push(build_grid_corpus(&spec, &grid_store, &assignment).unwrap());
    out.push(raw_corpus(
        "diamond",
        4,
        vec![vec![0], vec![1, 2], vec![3], vec![0, 1], vec![2]],
        vec![(0, 1), (0, 2), (1, 3), (2, 3)],
        4,
    ));
    out.push(raw_corpus(
        "forest",
        5,
        vec![vec![0, 3], vec![1], vec![2], vec![4], vec![1, 2]],
        vec![(0, 1), (1, 2), (3, 4)],
        4,
    ));
    out
}

/// Preference-edge subsets a student of `c` may carry.
pub fn preference_subsets(c: &Corpus) -> Vec<Vec<(usize, usize)>> {
    let candidates = c.grid.map(|g| g.vertical_edges()).unwrap_or_default();
    (0..1usize << candidates.len())
        .map(|mask| {
            candidates
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, e)| *e)
                .collect()
        })
        .collect()
}

/// Parents under prerequisites and preferences, computed from scratch.
pub fn parents(c: &Corpus, prefs: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut p = vec![Vec::new(); c.n_kcs()];
    for &(a, b) in c.prereq_edges.iter().chain(prefs) {
        if !p[b].contains(&a) {
            p[b].push(a);
        }
    }
    p
}

pub fn closed_states(n: usize, parents: &[Vec<usize>]) -> Vec<Vec<bool>> {
    (0..1usize << n)
        .map(|mask| (0..n).map(|i| mask >> i & 1 == 1).collect::<Vec<bool>>())
        .filter(|x| (0..n).all(|k| !x[k] || parents[k].iter().all(|&p| x[p])))
        .collect()
}

/// Direct predecessors of what `d` teaches, excluding what it teaches.
pub fn requirement_set(d: &Document, parents: &[Vec<usize>]) -> Vec<usize> {
    let mut r: Vec<usize> = d
        .teaches
        .iter()
        .flat_map(|&k| parents[k].iter().copied())
        .filter(|k| !d.teaches.contains(k))
        .collect();
    r.sort_unstable();
    r.dedup();
    r
}

/// Observation likelihood for the three feedback values.
pub fn observation_probs(x: &[bool], d: &Document, req: &[usize]) -> [f64; 3] {
    let m = |set: &[usize]| if set.iter().all(|&k| x[k]) { 1.0 } else { 0.0 };
    let too_hard = 1.0 - m(req);
    let too_easy = m(&d.teaches);
    let right = m(req) * (1.0 - m(&d.teaches));
    [too_hard, right, too_easy]
}

/// Per-KC transition probability, multiplied over KCs. `σ` is the step
/// function: one when any requirement is unknown.
pub fn transition_prob(x: &[bool], x_next: &[bool], d: &Document, req: &[usize]) -> f64 {
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    let missing = req.iter().filter(|&&k| !x[k]).count();
    let sigma = ind(missing > 0);
    let all_req = ind(missing == 0);
    (0..x.len())
        .map(|i| {
            let taught = d.teaches.contains(&i);
            match (x[i], x_next[i]) {
                (true, true) => 1.0,
                (true, false) => 0.0,
                (false, false) => ind(taught) * sigma + ind(!taught),
                (false, true) => ind(taught) * all_req,
            }
        })
        .product()
}

/// Compares the environment with exhaustive evaluation of the observation
/// and transition functions. Returns (cases checked, discrepancies).
pub fn brute_force_check(corpora: &[Corpus]) -> (usize, Vec<String>) {
    let mut checked = 0;
    let mut bad = Vec::new();
    for c in corpora.iter().filter(|c| c.n_kcs() <= 5) {
        let n = c.n_kcs();
        for prefs in preference_subsets(c) {
            let par = parents(c, &prefs);
            for x in closed_states(n, &par) {
                for d in &c.docs {
                    checked += 1;
                    let req = requirement_set(d, &par);
                    let obs = observation_probs(&x, d, &req);
                    let expected_fb = Feedback::ALL[(0..3).find(|&i| obs[i] == 1.0).unwrap()];
                    assert_eq!(obs.iter().sum::<f64>(), 1.0);
                    let mut next = None;
                    let mut total = 0.0;
                    for mask in 0..1usize << n {
                        let cand: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                        let p = transition_prob(&x, &cand, d, &req);
                        total += p;
                        if p == 1.0 {
                            next = Some(cand);
                        }
                    }
                    let next = next.expect("deterministic transition");
                    let gain: f64 = (0..n).filter(|&i| next[i] != x[i]).map(|i| c.kc_value(i)).sum();
                    let count = (0..n).filter(|&i| next[i] != x[i]).count() as f64;

                    let state = StudentState {
                        knowledge: x.clone(),
                        pref_edges: prefs.clone(),
                    };
                    for weighted in [false, true] {
                        let mut ep = pathforge::student::Episode::new(c, state.clone(), EpisodeConfig::new(1, 1.0, weighted));
                        if ep.is_done() {
                            // All KCs known: no step is possible; the doc must be too easy.
                            if expected_fb != Feedback::TooEasy {
                                bad.push(format!("{}: exhausted state {x:?} but doc {} is {expected_fb:?}", c.name, d.id));
                            }
                            continue;
                        }
                        let out = ep.step(d.id).unwrap();
                        let want_reward = if weighted { gain } else { count };
                        if out.feedback != expected_fb
                            || ep.hidden().knowledge != next
                            || out.reward != want_reward
                            || total != 1.0
                        {
                            bad.push(format!(
                                "{}: x={x:?} prefs={prefs:?} doc={} got ({:?}, {:?}, {}) want ({expected_fb:?}, {next:?}, {want_reward})",
                                c.name,
                                d.id,
                                out.feedback,
                                ep.hidden().knowledge,
                                out.reward
                            ));
                        }
                    }
                }
            }
        }
    }
    (checked, bad)
}

/// Three documents over four keywords with mixed feedback in the history.
pub fn tiny_fixture(dim: usize) -> (Corpus, Vec<(usize, Feedback)>) {
    let s = store(dim, &["a", "b", "c", "d"]);
    let assignment = vec![
        vec!["a".to_string(), "b".to_string()],
        vec!["b".to_string(), "c".to_string()],
        vec!["c".to_string(), "d".to_string(), "a".to_string()],
    ];
    let corpus = build_sequential_corpus("tiny", &assignment, &s).unwrap();
    (corpus, vec![(0, Feedback::RightLevel), (2, Feedback::TooHard)])
}

pub fn small_model(embed_dim: usize, seed: u64) -> Recommender {
    let cfg = ModelConfig {
        embed_dim,
        hidden: 8,
        heads: 2,
        ..ModelConfig::default()
    };
    Recommender::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Fixed pseudo-random weighting of the per-document log-probabilities,
/// so the scalar loss reaches every parameter.
fn loss_value(model: &Recommender, store: &ParamStore, batch: &GraphBatch, weights: &[f64], grads: Option<&mut Grads>) -> f64 {
    let tape = Tape::new();
    let out = model.forward_with(&tape, store, batch).unwrap();
    let w = tape.constant(Tensor::column(weights.to_vec()));
    let loss = out.log_probs.hadamard(w).unwrap().sum();
    let v = loss.item();
    if let Some(g) = grads {
        tape.backward(loss, g).unwrap();
    }
    v
}

/// Largest relative error between analytic and central-difference
/// gradients over every scalar of every parameter, with the worst name.
pub fn gradient_check(model: &Recommender, states: &[&BipartiteState], eps: f64) -> (f64, String) {
    let batch = GraphBatch::new(states).unwrap();
    let n_rows: usize = states.iter().map(|s| s.n_docs()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let weights: Vec<f64> = (0..n_rows).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut grads = Grads::zeros_like(&model.store);
    loss_value(model, &model.store, &batch, &weights, Some(&mut grads));
    let mut worst = (0.0f64, String::new());
    let mut store = model.store.clone();
    for id in model.store.ids() {
        for i in 0..model.store.get(id).numel() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let up = loss_value(model, &store, &batch, &weights, None);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let down = loss_value(model, &store, &batch, &weights, None);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.get(id).data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{}[{i}] analytic {analytic:e} numeric {numeric:e}", model.store.name(id)));
            }
        }
    }
    worst
}

pub fn tiny_states(model_dim: usize) -> (Corpus, Vec<BipartiteState>) {
    let (corpus, history) = tiny_fixture(model_dim);
    let a = build_state(&corpus, &history).unwrap();
    let b = build_state(&corpus, &[]).unwrap();
    (corpus, vec![a, b])
}

pub fn shared(c: &Corpus) -> Arc<pathforge::gnn::CorpusGraph> {
    Arc::new(pathforge::gnn::CorpusGraph::new(c).unwrap())
}

/// Two documents, horizon one: document 0 is learnable (reward 1),
/// document 1 needs an unknown KC (reward 0).
pub fn two_armed(dim: usize) -> Corpus {
    raw_corpus("two-armed", 3, vec![vec![0], vec![2]], vec![(1, 2)], dim)
}
