//! Synthetic stand-ins for real course material.
//!
//! All corpora draw their concept keywords from one shared, ordered pool
//! (`concept-000`, `concept-001`, ...). A low pool index means a more basic
//! concept. Sequential corpora walk forward through the pool so that
//! adjacent documents share at least one keyword; the grid corpus spreads
//! its columns over the whole pool and adds per-angle keywords.

use rand::Rng;

use super::embedding::synthetic_vector;
use super::{
    build_grid_corpus, build_sequential_corpus, Corpus, CorpusError, EmbeddingStore,
    GridCorpusSpec,
};

pub const POOL_SIZE: usize = 64;

/// Lengths of the bundled sequential course collection.
pub const COLLECTION_LENGTHS: [usize; 14] = [5, 6, 7, 8, 9, 9, 10, 10, 11, 11, 12, 12, 13, 14];

pub fn pool_token(i: usize) -> String {
    format!("concept-{i:03}")
}

fn plain_token(column: usize) -> String {
    format!("plain-{column:02}")
}

fn formal_token(column: usize) -> String {
    format!("formal-{column:02}")
}

/// Keyword lists for an `n_docs` chain. Every document gets 3 to 5
/// keywords: one or two carried over from its predecessor plus fresh
/// concepts further along the pool.
pub fn sequential_keywords<R: Rng + ?Sized>(n_docs: usize, rng: &mut R) -> Vec<Vec<String>> {
    assert!(n_docs >= 1);
    // Fresh concepts per document are 2 or 3; reserve the worst case.
    let span = 3 + 3 * (n_docs - 1);
    let span = span.min(POOL_SIZE);
    let offset = rng.random_range(0..=POOL_SIZE - span);
    let mut next = offset;
    let mut take = |count: usize| -> Vec<usize> {
        let ids: Vec<usize> = (next..next + count).map(|i| i.min(POOL_SIZE - 1)).collect();
        next += count;
        ids
    };

    let mut docs: Vec<Vec<usize>> = Vec::with_capacity(n_docs);
    let mut fresh_prev = take(3);
    docs.push(fresh_prev.clone());
    for _ in 1..n_docs {
        let carry = rng.random_range(1..=2).min(fresh_prev.len());
        let mut kws: Vec<usize> = fresh_prev[fresh_prev.len() - carry..].to_vec();
        let fresh = take(rng.random_range(2..=3));
        for &k in &fresh {
            if !kws.contains(&k) {
                kws.push(k);
            }
        }
        fresh_prev = fresh;
        docs.push(kws);
    }
    docs.into_iter()
        .map(|ids| ids.into_iter().map(pool_token).collect())
        .collect()
}

/// First pool concept of grid column `c`; columns spread over the pool.
fn column_base(c: usize, columns: usize) -> usize {
    if columns <= 1 {
        0
    } else {
        c * (POOL_SIZE - 2) / (columns - 1)
    }
}

/// Keyword lists for the grid corpus, indexed by document id, and a
/// synthetic store covering them.
pub fn grid_keywords(spec: &GridCorpusSpec, dim: usize) -> (Vec<Vec<String>>, EmbeddingStore) {
    let columns = spec.columns.max(1);
    let base = |c: usize| column_base(c, columns);
    let mut assignment = Vec::with_capacity(2 * columns);
    for c in 0..columns {
        let mut shared = vec![pool_token(base(c)), pool_token(base(c) + 1)];
        if c > 0 {
            shared.push(pool_token(base(c - 1) + 1));
        }
        let mut plain = shared.clone();
        plain.push(plain_token(c));
        let mut formal = shared;
        formal.push(formal_token(c));
        assignment.push(plain);
        assignment.push(formal);
    }
    let store = synthetic_store(dim, columns);
    (assignment, store)
}

/// Harmonics in the concept curve; the first is monotone in pool index.
const CURVE_HARMONICS: usize = 4;
/// Weight of the per-token component relative to the shared structure.
const TOKEN_NOISE: f64 = 0.35;

fn add_scaled(acc: &mut [f64], v: &[f64], w: f64) {
    acc.iter_mut().zip(v).for_each(|(a, x)| *a += w * x);
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Point on a smooth curve through embedding space, `t` in [0, 1].
fn concept_curve(dim: usize, t: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for k in 0..CURVE_HARMONICS {
        let basis = synthetic_vector(dim, &format!("curve-basis-{k}"));
        let w = (std::f64::consts::PI * (k + 1) as f64 * t).cos() / (k + 1) as f64;
        add_scaled(&mut v, &basis, w);
    }
    v
}

fn pool_position(i: usize) -> f64 {
    i as f64 / (POOL_SIZE - 1) as f64
}

/// Stand-in for pretrained word vectors. Concept vectors lie near a smooth
/// curve indexed by pool position, so nearby concepts are similar and one
/// direction tracks how basic a concept is. Angle keywords share a common
/// `plain` or `formal` direction and lean towards their column's concepts.
pub fn synthetic_store(dim: usize, grid_columns: usize) -> EmbeddingStore {
    let mut store = EmbeddingStore::new(dim);
    let mut put = |token: String, v: Vec<f64>| {
        store.insert(token, normalized(v)).expect("dimension is fixed");
    };
    for i in 0..POOL_SIZE {
        let token = pool_token(i);
        let mut v = concept_curve(dim, pool_position(i));
        add_scaled(&mut v, &synthetic_vector(dim, &token), TOKEN_NOISE);
        put(token, v);
    }
    let plain_dir = synthetic_vector(dim, "angle-plain");
    let formal_dir = synthetic_vector(dim, "angle-formal");
    for c in 0..grid_columns {
        let t = pool_position(column_base(c, grid_columns));
        for (token, dir) in [(plain_token(c), &plain_dir), (formal_token(c), &formal_dir)] {
            let mut v = dir.clone();
            add_scaled(&mut v, &concept_curve(dim, t), 0.5);
            add_scaled(&mut v, &synthetic_vector(dim, &token), TOKEN_NOISE);
            put(token, v);
        }
    }
    store
}

pub fn grid_corpus(spec: &GridCorpusSpec, store: &EmbeddingStore) -> Result<Corpus, CorpusError> {
    let (assignment, _) = grid_keywords(spec, store.dim());
    build_grid_corpus(spec, store, &assignment)
}

/// The bundled collection of sequential corpora.
pub fn sequential_collection<R: Rng + ?Sized>(
    store: &EmbeddingStore,
    rng: &mut R,
) -> Result<Vec<Corpus>, CorpusError> {
    COLLECTION_LENGTHS
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let assignment = sequential_keywords(n, rng);
            build_sequential_corpus(&format!("course-{:02}", i + 1), &assignment, store)
        })
        .collect()
}
