mod common;

use pathforge::corpus::{Corpus, Document};
use pathforge::gnn::{build_state, CorpusGraph, GraphBatch};
use pathforge::student::Feedback;
use pathforge::tensor::layers::{Attention, EdgeIndex, TransformerConv};
use pathforge::tensor::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn full_stack_gradients_match_finite_differences() {
    let model = common::small_model(6, 3);
    let (_, states) = common::tiny_states(6);
    let refs: Vec<_> = states.iter().collect();
    let (worst, at) = common::gradient_check(&model, &refs, 1e-5);
    assert!(worst < 1e-4, "max relative error {worst:e} at {at}");
}

fn permuted(c: &Corpus, perm: &[usize]) -> Corpus {
    let mut out = c.clone();
    out.docs = perm
        .iter()
        .enumerate()
        .map(|(new_id, &old)| Document {
            id: new_id,
            ..c.docs[old].clone()
        })
        .collect();
    out
}

#[test]
fn document_order_is_irrelevant() {
    let model = common::small_model(6, 11);
    let (corpus, history) = common::tiny_fixture(6);
    let perm = [2usize, 0, 1];
    let inverse: Vec<usize> = (0..3).map(|old| perm.iter().position(|&p| p == old).unwrap()).collect();
    let moved = permuted(&corpus, &perm);
    let moved_history: Vec<(usize, Feedback)> = history.iter().map(|&(d, f)| (inverse[d], f)).collect();
    let p = model.probabilities(&build_state(&corpus, &history).unwrap()).unwrap();
    let q = model.probabilities(&build_state(&moved, &moved_history).unwrap()).unwrap();
    for (new_id, &old) in perm.iter().enumerate() {
        assert!((q[new_id] - p[old]).abs() < 1e-12, "{p:?} vs {q:?}");
    }
}

#[test]
fn indistinguishable_documents_get_equal_probability() {
    let model = common::small_model(6, 4);
    let (mut corpus, _) = common::tiny_fixture(6);
    let twin = Document {
        id: 3,
        ..corpus.docs[1].clone()
    };
    corpus.docs.push(twin);
    for history in [vec![], vec![(0, Feedback::TooEasy)], vec![(1, Feedback::RightLevel), (3, Feedback::RightLevel)]] {
        let p = model.probabilities(&build_state(&corpus, &history).unwrap()).unwrap();
        assert!((p[1] - p[3]).abs() < 1e-12, "{history:?}: {p:?}");
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn feedback_breaks_twin_symmetry() {
    let model = common::small_model(6, 4);
    let (mut corpus, _) = common::tiny_fixture(6);
    corpus.docs.push(Document {
        id: 3,
        ..corpus.docs[1].clone()
    });
    let p = model.probabilities(&build_state(&corpus, &[(3, Feedback::TooHard)]).unwrap()).unwrap();
    assert!((p[1] - p[3]).abs() > 1e-9);
}

#[test]
fn attention_is_normalised_on_a_corpus_graph() {
    let corpus = pathforge::corpus::synth::grid_corpus(
        &Default::default(),
        &pathforge::corpus::synth::synthetic_store(8, 11),
    )
    .unwrap();
    let graph = CorpusGraph::new(&corpus).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for attention in [Attention::Dot, Attention::Additive] {
        let mut store = ParamStore::new();
        let conv = TransformerConv::new(&mut store, "c", 8, 4, attention, &mut rng);
        let edges = EdgeIndex::new(&graph.edges, graph.n_docs, graph.n_keywords).unwrap();
        for edges in [edges.clone(), edges.reversed()] {
            let tape = Tape::new();
            let rand_rows = |n: usize, rng: &mut ChaCha8Rng| {
                Tensor::matrix(n, 8, (0..n * 8).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
            };
            let src = tape.constant(rand_rows(edges.n_src, &mut rng));
            let dst = tape.constant(rand_rows(edges.n_dst, &mut rng));
            let (_, alpha) = conv.forward_with_attention(&tape, &store, src, dst, &edges).unwrap();
            let a = alpha.value();
            let mut sums = vec![[0.0f64; 4]; edges.n_dst];
            for (e, &d) in edges.dst.iter().enumerate() {
                for (h, sum) in sums[d].iter_mut().enumerate() {
                    *sum += a.get(e, h);
                }
            }
            for s in sums.iter().flatten() {
                assert!((s - 1.0).abs() < 1e-9, "{s}");
            }
        }
    }
}

#[test]
fn batch_of_mixed_corpora_matches_single_graphs() {
    let model = common::small_model(6, 8);
    let (tiny, history) = common::tiny_fixture(6);
    let chain = common::chain(5, 6);
    let a = build_state(&tiny, &history).unwrap();
    let b = build_state(&chain, &[(0, Feedback::RightLevel)]).unwrap();
    let batch = GraphBatch::new(&[&a, &b]).unwrap();
    let tape = Tape::new();
    let out = model.forward(&tape, &batch).unwrap();
    let lp = out.log_probs.value();
    for (g, s) in [&a, &b].into_iter().enumerate() {
        let single = model.probabilities(s).unwrap();
        for (d, p) in single.iter().enumerate() {
            assert!((lp.get(batch.doc_row(g, d), 0).exp() - p).abs() < 1e-12);
        }
    }
}
