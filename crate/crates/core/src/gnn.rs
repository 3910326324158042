//! Bipartite document/keyword state and the graph-transformer recommender.
//!
//! Node features are row vectors. Keyword nodes carry their embedding;
//! document nodes carry the mean embedding of their keywords plus a
//! 4-way one-hot of the latest feedback (`none`, too hard, right level,
//! too easy). The layer stack is:
//!
//! ```text
//! H1      = Linear(E)                      (keywords and documents)
//! H_W2    = ELU(Conv_doc→kw(H_D1 → H_W1))
//! H_D2    = ELU(Conv_kw→doc(H_W2 → H_D1))
//! H_D3    = H_D2 ⊙ MLP(F_D)
//! H_W3    = ELU(Conv_doc→kw(H_D3 → H_W2))   keyword latent Z_t
//! H_D4    = ELU(Conv_kw→doc(H_W3 → H_D3))
//! scores  = Linear(H_D4);  π = softmax over the documents of each graph
//! ```

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::policy::Policy;
use crate::student::{Episode, Feedback};
use crate::tensor::layers::{Attention, EdgeIndex, Linear, Mlp2, TransformerConv};
use crate::tensor::{
    read_checkpoint, write_checkpoint, CheckpointError, ParamStore, Tape, Tensor, TensorError, Var,
};

pub const FEEDBACK_CLASSES: usize = 4;

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("document {0} has no keywords")]
    DocumentWithoutKeywords(usize),
    #[error("history references document {0}, corpus has {1}")]
    UnknownDocument(usize, usize),
    #[error("corpus embeddings are {found}-d, model expects {expected}-d")]
    EmbeddingDim { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Column of the feedback one-hot: 0 is "never recommended".
pub fn feedback_slot(feedback: Option<Feedback>) -> usize {
    feedback.map_or(0, |f| f.index() + 1)
}

/// Latest feedback per document, later entries overriding earlier ones.
pub fn latest_feedback(
    n_docs: usize,
    history: &[(usize, Feedback)],
) -> Result<Vec<Option<Feedback>>, GnnError> {
    let mut latest = vec![None; n_docs];
    for &(doc, f) in history {
        *latest
            .get_mut(doc)
            .ok_or(GnnError::UnknownDocument(doc, n_docs))? = Some(f);
    }
    Ok(latest)
}

/// Row-major `[n_docs × 4]` one-hot feedback matrix.
pub fn feedback_matrix(n_docs: usize, history: &[(usize, Feedback)]) -> Result<Tensor, GnnError> {
    let mut data = vec![0.0; n_docs * FEEDBACK_CLASSES];
    for (d, f) in latest_feedback(n_docs, history)?.into_iter().enumerate() {
        data[d * FEEDBACK_CLASSES + feedback_slot(f)] = 1.0;
    }
    Ok(Tensor::matrix(n_docs, FEEDBACK_CLASSES, data)?)
}

/// The history-independent part of a state: topology and input features.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusGraph {
    pub n_docs: usize,
    pub n_keywords: usize,
    /// `(doc, keyword)` pairs in document order.
    pub edges: Vec<(usize, usize)>,
    pub kw_features: Tensor,
    pub doc_features: Tensor,
}

impl CorpusGraph {
    pub fn new(corpus: &Corpus) -> Result<Self, GnnError> {
        let dim = corpus.embedding_dim;
        let n_keywords = corpus.n_keywords();
        let mut kw = Vec::with_capacity(n_keywords * dim);
        for k in &corpus.keywords {
            kw.extend_from_slice(&k.embedding);
        }
        let mut doc = Vec::with_capacity(corpus.n_docs() * dim);
        let mut edges = Vec::new();
        for d in &corpus.docs {
            if d.keywords.is_empty() {
                return Err(GnnError::DocumentWithoutKeywords(d.id));
            }
            let mut mean = vec![0.0; dim];
            for &k in &d.keywords {
                edges.push((d.id, k));
                for (m, v) in mean.iter_mut().zip(&corpus.keywords[k].embedding) {
                    *m += v;
                }
            }
            let inv = 1.0 / d.keywords.len() as f64;
            doc.extend(mean.into_iter().map(|m| m * inv));
        }
        Ok(Self {
            n_docs: corpus.n_docs(),
            n_keywords,
            edges,
            kw_features: Tensor::matrix(n_keywords, dim, kw)?,
            doc_features: Tensor::matrix(corpus.n_docs(), dim, doc)?,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.kw_features.cols()
    }
}

/// What the recommender observes at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteState {
    pub graph: Arc<CorpusGraph>,
    /// `[n_docs × 4]` one-hot, see [`feedback_matrix`].
    pub feedback: Tensor,
}

impl BipartiteState {
    pub fn new(graph: Arc<CorpusGraph>, history: &[(usize, Feedback)]) -> Result<Self, GnnError> {
        let feedback = feedback_matrix(graph.n_docs, history)?;
        Ok(Self { graph, feedback })
    }

    pub fn n_docs(&self) -> usize {
        self.graph.n_docs
    }
}

pub fn build_state(corpus: &Corpus, history: &[(usize, Feedback)]) -> Result<BipartiteState, GnnError> {
    BipartiteState::new(Arc::new(CorpusGraph::new(corpus)?), history)
}

/// Disjoint union of several states, evaluated in one pass.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub kw_features: Tensor,
    pub doc_features: Tensor,
    pub feedback: Tensor,
    pub doc_to_kw: EdgeIndex,
    pub kw_to_doc: EdgeIndex,
    /// Graph index of every document row.
    pub doc_graph: Arc<[usize]>,
    /// First document row of each graph, plus the total as a sentinel.
    pub doc_offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn new(states: &[&BipartiteState]) -> Result<Self, GnnError> {
        let first = states.first().ok_or(GnnError::EmptyBatch)?;
        let dim = first.graph.embedding_dim();
        let (mut kw, mut doc, mut fb) = (Vec::new(), Vec::new(), Vec::new());
        let (mut pairs, mut doc_graph, mut doc_offsets) = (Vec::new(), Vec::new(), vec![0]);
        let (mut n_docs, mut n_kw) = (0, 0);
        for (g, s) in states.iter().enumerate() {
            if s.graph.embedding_dim() != dim {
                return Err(GnnError::EmbeddingDim {
                    expected: dim,
                    found: s.graph.embedding_dim(),
                });
            }
            kw.extend_from_slice(s.graph.kw_features.data());
            doc.extend_from_slice(s.graph.doc_features.data());
            fb.extend_from_slice(s.feedback.data());
            pairs.extend(s.graph.edges.iter().map(|&(d, k)| (d + n_docs, k + n_kw)));
            doc_graph.extend(std::iter::repeat_n(g, s.n_docs()));
            n_docs += s.graph.n_docs;
            n_kw += s.graph.n_keywords;
            doc_offsets.push(n_docs);
        }
        let doc_to_kw = EdgeIndex::new(&pairs, n_docs, n_kw)?;
        Ok(Self {
            kw_features: Tensor::matrix(n_kw, dim, kw)?,
            doc_features: Tensor::matrix(n_docs, dim, doc)?,
            feedback: Tensor::matrix(n_docs, FEEDBACK_CLASSES, fb)?,
            kw_to_doc: doc_to_kw.reversed(),
            doc_to_kw,
            doc_graph: doc_graph.into(),
            doc_offsets,
        })
    }

    pub fn n_graphs(&self) -> usize {
        self.doc_offsets.len() - 1
    }

    /// Flat row index of document `doc` of graph `g`.
    pub fn doc_row(&self, g: usize, doc: usize) -> usize {
        self.doc_offsets[g] + doc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    #[serde(default)]
    pub attention: Attention,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 100,
            hidden: 128,
            heads: 4,
            attention: Attention::Dot,
        }
    }
}

impl ModelConfig {
    /// Narrower hidden layer for single-core runs.
    pub fn desk() -> Self {
        Self {
            hidden: 32,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layers {
    input: Linear,
    convs: [TransformerConv; 4],
    feedback_mlp: Mlp2,
    output: Linear,
}

/// Parameters and layer wiring of the recommender.
#[derive(Debug, Clone, PartialEq)]
pub struct Recommender {
    pub config: ModelConfig,
    pub store: ParamStore,
    layers: Layers,
}

/// Tape handles produced by one forward pass over a [`GraphBatch`].
pub struct Forward<'t> {
    /// `[Σ docs × 1]` unnormalised scores.
    pub scores: Var<'t>,
    /// Per-graph log-softmax of `scores`.
    pub log_probs: Var<'t>,
    /// `H_D4`, input of the score head.
    pub doc_hidden: Var<'t>,
    /// `H_W3`, the keyword latent.
    pub kw_latent: Var<'t>,
}

impl Recommender {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let h = config.hidden;
        let input = Linear::new(&mut store, "input", config.embed_dim, h, true, rng);
        let names = ["conv_doc_kw_1", "conv_kw_doc_1", "conv_doc_kw_2", "conv_kw_doc_2"];
        let convs = names.map(|n| TransformerConv::new(&mut store, n, h, config.heads, config.attention, rng));
        let feedback_mlp = Mlp2::new(&mut store, "feedback_mlp", FEEDBACK_CLASSES, h, h, rng);
        // A score bias is constant across documents and cancels in the softmax.
        let output = Linear::new(&mut store, "score", h, 1, false, rng);
        Self {
            config,
            store,
            layers: Layers {
                input,
                convs,
                feedback_mlp,
                output,
            },
        }
    }

    /// Number of parameters belonging to the model proper. Auxiliary heads
    /// appended to [`Recommender::store`] live after this index.
    pub fn n_model_params(&self) -> usize {
        self.layers.output.weight.index() + 1
    }

    pub fn forward<'t>(&self, tape: &'t Tape, batch: &GraphBatch) -> Result<Forward<'t>, TensorError> {
        self.forward_with(tape, &self.store, batch)
    }

    /// Forward using parameter values from `store`, which must share this
    /// model's layout (it may carry extra trailing parameters).
    pub fn forward_with<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        batch: &GraphBatch,
    ) -> Result<Forward<'t>, TensorError> {
        let l = &self.layers;
        let kw1 = l.input.forward(tape, store, tape.constant(batch.kw_features.clone()))?;
        let doc1 = l.input.forward(tape, store, tape.constant(batch.doc_features.clone()))?;
        let kw2 = l.convs[0].forward(tape, store, doc1, kw1, &batch.doc_to_kw)?.elu();
        let doc2 = l.convs[1].forward(tape, store, kw2, doc1, &batch.kw_to_doc)?.elu();
        let fb = l.feedback_mlp.forward(tape, store, tape.constant(batch.feedback.clone()))?;
        let doc3 = doc2.hadamard(fb)?;
        let kw3 = l.convs[2].forward(tape, store, doc3, kw2, &batch.doc_to_kw)?.elu();
        let doc4 = l.convs[3].forward(tape, store, kw3, doc3, &batch.kw_to_doc)?.elu();
        let scores = l.output.forward(tape, store, doc4)?;
        let log_probs = scores.segment_log_softmax(&batch.doc_graph)?;
        Ok(Forward {
            scores,
            log_probs,
            doc_hidden: doc4,
            kw_latent: kw3,
        })
    }

    /// Action distribution for one state.
    pub fn probabilities(&self, state: &BipartiteState) -> Result<Vec<f64>, GnnError> {
        let batch = GraphBatch::new(&[state])?;
        let tape = Tape::new();
        let out = self.forward(&tape, &batch)?;
        let probs = out.log_probs.value().data().iter().map(|v| v.exp()).collect();
        Ok(probs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GnnError> {
        let mut model = self.store.clone();
        model.truncate(self.n_model_params());
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(file, &model)?;
        Ok(())
    }

    /// Builds the architecture for `config` and fills it from `path`.
    pub fn load(config: ModelConfig, path: impl AsRef<Path>) -> Result<Self, GnnError> {
        let mut rng = <crate::seed::Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng);
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        model.store.load_tensors(read_checkpoint(file)?)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActMode {
    Sample,
    Greedy,
}

/// Picks a document from `probs`. Greedy ties go to the lowest id.
pub fn act<R: RngCore + ?Sized>(probs: &[f64], mode: ActMode, rng: &mut R) -> usize {
    match mode {
        ActMode::Greedy => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            best
        }
        ActMode::Sample => {
            let total: f64 = probs.iter().sum();
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            // Rounding can leave `u` just above the final partial sum.
            probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
        }
    }
}

/// [`Recommender`] wrapped as a [`Policy`], caching the corpus graph.
pub struct GnnPolicy<'m> {
    pub model: &'m Recommender,
    pub mode: ActMode,
    graph: Option<(String, Arc<CorpusGraph>)>,
}

impl<'m> GnnPolicy<'m> {
    pub fn new(model: &'m Recommender, mode: ActMode) -> Self {
        Self {
            model,
            mode,
            graph: None,
        }
    }

    /// Observable state for the current step of `episode`.
    pub fn state(&mut self, episode: &Episode<'_>) -> Result<BipartiteState, GnnError> {
        let corpus = episode.corpus();
        let cached = matches!(&self.graph, Some((name, _)) if *name == corpus.name);
        if !cached {
            self.graph = Some((corpus.name.clone(), Arc::new(CorpusGraph::new(corpus)?)));
        }
        let graph = self.graph.as_ref().expect("just set").1.clone();
        BipartiteState::new(graph, episode.history())
    }
}

impl Policy for GnnPolicy<'_> {
    fn act(&mut self, episode: &Episode<'_>, rng: &mut dyn RngCore) -> usize {
        let state = self.state(episode).expect("validated corpus");
        let probs = self.model.probabilities(&state).expect("consistent shapes");
        act(&probs, self.mode, rng)
    }
}
