//! Corpora: knowledge components, prerequisite graphs, documents and the
//! keyword vocabulary the recommender observes.
//!
//! Two families are supported. Sequential corpora are chains where document
//! `i` teaches exactly KC `i`. Graph corpora are built on a 3-row grid with
//! an extra background KC (see [`build_grid_corpus`]).

mod embedding;
mod io;
pub mod synth;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embedding::{EmbeddingStore, DEFAULT_EMBEDDING_DIM};
pub use io::{load_corpus, save_corpus, CorpusFile};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unknown keyword `{0}` (not present in the embedding store)")]
    UnknownKeyword(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate token `{token}`")]
    DuplicateToken { line: usize, token: String },
    #[error("line {line}: expected {expected} components, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid corpus construction: {0}")]
    Invalid(String),
    #[error("corpus failed validation: {0}")]
    Validation(ValidationReport),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeComponent {
    pub id: usize,
    pub label: String,
    /// Reward weight of the KC. Defaults to 1.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: usize,
    /// KC ids taught by the document.
    pub teaches: Vec<usize>,
    /// Indices into [`Corpus::keywords`].
    pub keywords: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Sequential,
    Graph,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyword {
    pub token: String,
    pub embedding: Vec<f64>,
}

/// Index layout of a grid corpus.
///
/// Row 0 holds the non-CS angle KCs, row 1 the major concepts, row 2 the CS
/// angle KCs. The background KC comes last. Document `2c` is the non-CS
/// document of column `c`, document `2c + 1` the CS one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    pub columns: usize,
}

impl GridLayout {
    pub const ROWS: usize = 3;

    pub fn kc(&self, row: usize, column: usize) -> usize {
        debug_assert!(row < Self::ROWS && column < self.columns);
        row * self.columns + column
    }

    pub fn background(&self) -> usize {
        Self::ROWS * self.columns
    }

    pub fn non_cs_doc(&self, column: usize) -> usize {
        2 * column
    }

    pub fn cs_doc(&self, column: usize) -> usize {
        2 * column + 1
    }

    /// Candidate learning-preference edges `k[i][j] -> k[i+1][j]`.
    pub fn vertical_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(2 * self.columns);
        for column in 0..self.columns {
            for row in 0..Self::ROWS - 1 {
                edges.push((self.kc(row, column), self.kc(row + 1, column)));
            }
        }
        edges
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub kind: CorpusKind,
    pub kcs: Vec<KnowledgeComponent>,
    pub docs: Vec<Document>,
    pub prereq_edges: Vec<(usize, usize)>,
    pub keywords: Vec<Keyword>,
    pub embedding_dim: usize,
    pub grid: Option<GridLayout>,
}

impl Corpus {
    pub fn n_kcs(&self) -> usize {
        self.kcs.len()
    }

    pub fn n_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn n_keywords(&self) -> usize {
        self.keywords.len()
    }

    pub fn kc_value(&self, kc: usize) -> f64 {
        self.kcs[kc].value
    }

    /// Direct predecessors of every KC under the prerequisite edges.
    pub fn prereq_parents(&self) -> Vec<Vec<usize>> {
        parents_of(self.n_kcs(), self.prereq_edges.iter().copied())
    }

    /// Largest total value a single document can teach.
    pub fn max_doc_value(&self) -> f64 {
        self.docs
            .iter()
            .map(|d| d.teaches.iter().map(|&k| self.kc_value(k)).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> ValidationReport {
        validate_corpus(self)
    }
}

pub(crate) fn parents_of(
    n: usize,
    edges: impl IntoIterator<Item = (usize, usize)>,
) -> Vec<Vec<usize>> {
    let mut parents = vec![Vec::new(); n];
    for (from, to) in edges {
        if to < n && !parents[to].contains(&from) {
            parents[to].push(from);
        }
    }
    for p in &mut parents {
        p.sort_unstable();
    }
    parents
}

/// Topological order of `0..n` under `edges`, or `None` when a cycle exists.
pub fn topological_order(n: usize, edges: &[(usize, usize)]) -> Option<Vec<usize>> {
    let mut indegree = vec![0usize; n];
    let mut children = vec![Vec::new(); n];
    for &(from, to) in edges {
        if from >= n || to >= n {
            continue;
        }
        indegree[to] += 1;
        children[from].push(to);
    }
    let mut ready: Vec<usize> = (0..n).filter(|&k| indegree[k] == 0).rev().collect();
    let mut order = Vec::with_capacity(n);
    while let Some(k) = ready.pop() {
        order.push(k);
        for &c in &children[k] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(c);
            }
        }
    }
    (order.len() == n).then_some(order)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// KCs left over after Kahn's algorithm; all lie on or behind a cycle.
    Cycle(Vec<usize>),
    OrphanKc { doc: usize, kc: usize },
    OrphanEdge { from: usize, to: usize },
    EmptyTeaches { doc: usize },
    EmptyKeywords { doc: usize },
    MissingEmbedding { doc: usize, keyword: usize },
    EmbeddingDimension { keyword: String, expected: usize, found: usize },
    NonDenseId { what: &'static str, index: usize, id: usize },
    NegativeValue { kc: usize },
    NotAChain(String),
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Cycle(kcs) => write!(f, "prerequisite cycle through KCs {kcs:?}"),
            Violation::OrphanKc { doc, kc } => write!(f, "document {doc} references unknown KC {kc}"),
            Violation::OrphanEdge { from, to } => {
                write!(f, "prerequisite edge {from}->{to} references an unknown KC")
            }
            Violation::EmptyTeaches { doc } => write!(f, "document {doc} teaches nothing"),
            Violation::EmptyKeywords { doc } => write!(f, "document {doc} has no keywords"),
            Violation::MissingEmbedding { doc, keyword } => {
                write!(f, "document {doc} references missing keyword {keyword}")
            }
            Violation::EmbeddingDimension {
                keyword,
                expected,
                found,
            } => write!(f, "keyword `{keyword}` has dimension {found}, expected {expected}"),
            Violation::NonDenseId { what, index, id } => {
                write!(f, "{what} at position {index} has id {id}")
            }
            Violation::NegativeValue { kc } => write!(f, "KC {kc} has a negative value"),
            Violation::NotAChain(msg) => write!(f, "sequential corpus is not a chain: {msg}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<(), CorpusError> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(CorpusError::Validation(self))
        }
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

pub fn validate_corpus(c: &Corpus) -> ValidationReport {
    let mut violations = Vec::new();
    let n = c.n_kcs();

    for (index, kc) in c.kcs.iter().enumerate() {
        if kc.id != index {
            violations.push(Violation::NonDenseId {
                what: "KC",
                index,
                id: kc.id,
            });
        }
        if kc.value.is_nan() || kc.value < 0.0 {
            violations.push(Violation::NegativeValue { kc: index });
        }
    }
    for &(from, to) in &c.prereq_edges {
        if from >= n || to >= n {
            violations.push(Violation::OrphanEdge { from, to });
        }
    }
    if topological_order(n, &c.prereq_edges).is_none() {
        violations.push(Violation::Cycle(cycle_members(n, &c.prereq_edges)));
    }

    for (index, doc) in c.docs.iter().enumerate() {
        if doc.id != index {
            violations.push(Violation::NonDenseId {
                what: "document",
                index,
                id: doc.id,
            });
        }
        if doc.teaches.is_empty() {
            violations.push(Violation::EmptyTeaches { doc: index });
        }
        for &kc in &doc.teaches {
            if kc >= n {
                violations.push(Violation::OrphanKc { doc: index, kc });
            }
        }
        if doc.keywords.is_empty() {
            violations.push(Violation::EmptyKeywords { doc: index });
        }
        for &kw in &doc.keywords {
            if kw >= c.keywords.len() {
                violations.push(Violation::MissingEmbedding {
                    doc: index,
                    keyword: kw,
                });
            }
        }
    }
    for kw in &c.keywords {
        if kw.embedding.len() != c.embedding_dim {
            violations.push(Violation::EmbeddingDimension {
                keyword: kw.token.clone(),
                expected: c.embedding_dim,
                found: kw.embedding.len(),
            });
        }
    }

    if c.kind == CorpusKind::Sequential {
        if c.n_docs() != n {
            violations.push(Violation::NotAChain(format!(
                "{} documents for {} KCs",
                c.n_docs(),
                n
            )));
        }
        for (i, doc) in c.docs.iter().enumerate() {
            if doc.teaches != [i] {
                violations.push(Violation::NotAChain(format!(
                    "document {i} teaches {:?}",
                    doc.teaches
                )));
            }
        }
        let expected: BTreeSet<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
        let actual: BTreeSet<(usize, usize)> = c.prereq_edges.iter().copied().collect();
        if expected != actual || actual.len() != c.prereq_edges.len() {
            violations.push(Violation::NotAChain("prerequisite edges differ from k1->k2->...->kN".into()));
        }
    }

    ValidationReport { violations }
}

fn cycle_members(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut indegree = vec![0usize; n];
    let mut children = vec![Vec::new(); n];
    for &(from, to) in edges {
        if from < n && to < n {
            indegree[to] += 1;
            children[from].push(to);
        }
    }
    let mut removed = vec![false; n];
    let mut ready: Vec<usize> = (0..n).filter(|&k| indegree[k] == 0).collect();
    while let Some(k) = ready.pop() {
        removed[k] = true;
        for &c in &children[k] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(c);
            }
        }
    }
    (0..n).filter(|&k| !removed[k]).collect()
}

/// Interns keyword strings in order of first appearance and resolves their
/// embeddings.
fn intern_keywords(
    assignment: &[Vec<String>],
    store: &EmbeddingStore,
) -> Result<(Vec<Keyword>, Vec<Vec<usize>>), CorpusError> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut keywords = Vec::new();
    let mut per_doc = Vec::with_capacity(assignment.len());
    for (doc, tokens) in assignment.iter().enumerate() {
        if tokens.is_empty() {
            return Err(CorpusError::Invalid(format!("document {doc} has no keywords")));
        }
        let mut ids = Vec::with_capacity(tokens.len());
        for token in tokens {
            let id = match index.get(token.as_str()) {
                Some(&id) => id,
                None => {
                    let embedding = store.get(token)?.to_vec();
                    keywords.push(Keyword {
                        token: token.clone(),
                        embedding,
                    });
                    index.insert(token.as_str(), keywords.len() - 1);
                    keywords.len() - 1
                }
            };
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        per_doc.push(ids);
    }
    Ok((keywords, per_doc))
}

/// Chain corpus: document `i` teaches KC `i`, prerequisites `k_i -> k_{i+1}`.
pub fn build_sequential_corpus(
    name: &str,
    keyword_assignment: &[Vec<String>],
    store: &EmbeddingStore,
) -> Result<Corpus, CorpusError> {
    let n_docs = keyword_assignment.len();
    if n_docs == 0 {
        return Err(CorpusError::Invalid("a sequential corpus needs at least one document".into()));
    }
    let (keywords, per_doc) = intern_keywords(keyword_assignment, store)?;
    let kcs = (0..n_docs)
        .map(|id| KnowledgeComponent {
            id,
            label: format!("k{}", id + 1),
            value: 1.0,
        })
        .collect();
    let docs = per_doc
        .into_iter()
        .enumerate()
        .map(|(id, keywords)| Document {
            id,
            teaches: vec![id],
            keywords,
        })
        .collect();
    Ok(Corpus {
        name: name.to_string(),
        kind: CorpusKind::Sequential,
        kcs,
        docs,
        prereq_edges: (1..n_docs).map(|i| (i - 1, i)).collect(),
        keywords,
        embedding_dim: store.dim(),
        grid: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCorpusSpec {
    pub columns: usize,
    pub rows: usize,
    pub pref_edge_prob: f64,
    pub background_kc: bool,
}

impl Default for GridCorpusSpec {
    fn default() -> Self {
        Self {
            columns: 11,
            rows: 3,
            pref_edge_prob: 0.3,
            background_kc: true,
        }
    }
}

impl GridCorpusSpec {
    pub fn check(&self) -> Result<(), CorpusError> {
        if self.columns < 1 {
            return Err(CorpusError::Invalid("grid needs at least one column".into()));
        }
        if self.rows != GridLayout::ROWS {
            return Err(CorpusError::Invalid(format!("grid must have 3 rows, got {}", self.rows)));
        }
        if !(0.0..=1.0).contains(&self.pref_edge_prob) {
            return Err(CorpusError::Invalid(format!(
                "pref_edge_prob {} outside [0, 1]",
                self.pref_edge_prob
            )));
        }
        if !self.background_kc {
            return Err(CorpusError::Invalid("the grid corpus requires the background KC".into()));
        }
        Ok(())
    }
}

/// The 3-row grid corpus with a background KC.
///
/// `keyword_assignment` is indexed by document id (`2c` non-CS, `2c + 1` CS).
pub fn build_grid_corpus(
    spec: &GridCorpusSpec,
    store: &EmbeddingStore,
    keyword_assignment: &[Vec<String>],
) -> Result<Corpus, CorpusError> {
    spec.check()?;
    let layout = GridLayout {
        columns: spec.columns,
    };
    let n_docs = 2 * spec.columns;
    if keyword_assignment.len() != n_docs {
        return Err(CorpusError::Invalid(format!(
            "expected keywords for {n_docs} documents, got {}",
            keyword_assignment.len()
        )));
    }
    let (keywords, per_doc) = intern_keywords(keyword_assignment, store)?;

    let mut kcs = Vec::with_capacity(GridLayout::ROWS * spec.columns + 1);
    for row in 0..GridLayout::ROWS {
        for column in 0..spec.columns {
            kcs.push(KnowledgeComponent {
                id: layout.kc(row, column),
                label: format!("k{}_{}", row + 1, column + 1),
                value: (row + 1) as f64,
            });
        }
    }
    kcs.push(KnowledgeComponent {
        id: layout.background(),
        label: "background".into(),
        value: 0.0,
    });

    let mut prereq_edges = Vec::new();
    for row in 1..GridLayout::ROWS {
        for column in 1..spec.columns {
            prereq_edges.push((layout.kc(row, column - 1), layout.kc(row, column)));
        }
    }
    for column in 0..spec.columns {
        prereq_edges.push((layout.background(), layout.kc(2, column)));
    }

    let docs = per_doc
        .into_iter()
        .enumerate()
        .map(|(id, keywords)| {
            let column = id / 2;
            let angle_row = if id % 2 == 0 { 0 } else { 2 };
            Document {
                id,
                teaches: vec![layout.kc(angle_row, column), layout.kc(1, column)],
                keywords,
            }
        })
        .collect();

    Ok(Corpus {
        name: "grid".into(),
        kind: CorpusKind::Graph,
        kcs,
        docs,
        prereq_edges,
        keywords,
        embedding_dim: store.dim(),
        grid: Some(layout),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_for(tokens: &[&str]) -> EmbeddingStore {
        EmbeddingStore::synthetic(4, tokens.iter().copied())
    }

    fn chain(n: usize) -> Corpus {
        let tokens: Vec<String> = (0..=n).map(|i| format!("w{i}")).collect();
        let store = EmbeddingStore::synthetic(4, tokens.iter().map(String::as_str));
        let assignment: Vec<Vec<String>> =
            (0..n).map(|i| vec![tokens[i].clone(), tokens[i + 1].clone()]).collect();
        build_sequential_corpus("chain", &assignment, &store).unwrap()
    }

    #[test]
    fn single_document_chain() {
        let c = chain(1);
        assert_eq!(c.n_kcs(), 1);
        assert!(c.prereq_edges.is_empty());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn five_document_chain_edges() {
        let c = chain(5);
        assert_eq!(c.prereq_edges, vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        assert!(c.docs.iter().enumerate().all(|(i, d)| d.teaches == [i]));
        assert!(c.kcs.iter().all(|k| k.value == 1.0));
    }

    #[test]
    fn unknown_keyword_is_named() {
        let store = store_for(&["a"]);
        let err = build_sequential_corpus("x", &[vec!["a".into()], vec!["zzz".into()]], &store)
            .unwrap_err();
        assert!(err.to_string().contains("zzz"), "{err}");
    }

    #[test]
    fn cycle_is_reported() {
        let mut c = chain(2);
        c.kind = CorpusKind::Graph;
        c.prereq_edges.push((1, 0));
        let report = c.validate();
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::Cycle(kcs) if kcs == &vec![0, 1])));
    }

    #[test]
    fn orphan_kc_is_reported() {
        let mut c = chain(5);
        c.kind = CorpusKind::Graph;
        c.docs[2].teaches.push(99);
        let report = c.validate();
        assert!(report
            .violations
            .contains(&Violation::OrphanKc { doc: 2, kc: 99 }));
    }

    #[test]
    fn empty_teaches_and_missing_embedding() {
        let mut c = chain(3);
        c.kind = CorpusKind::Graph;
        c.docs[0].teaches.clear();
        c.docs[1].keywords.push(42);
        let report = c.validate();
        assert!(report.violations.contains(&Violation::EmptyTeaches { doc: 0 }));
        assert!(report
            .violations
            .contains(&Violation::MissingEmbedding { doc: 1, keyword: 42 }));
    }

    fn grid() -> Corpus {
        let (assignment, store) = synth::grid_keywords(&GridCorpusSpec::default(), 8);
        build_grid_corpus(&GridCorpusSpec::default(), &store, &assignment).unwrap()
    }

    #[test]
    fn grid_counts() {
        let c = grid();
        assert_eq!(c.n_kcs(), 34);
        assert_eq!(c.n_docs(), 22);
        assert_eq!(c.prereq_edges.len(), 31);
        assert!(c.validate().is_ok(), "{}", c.validate());
    }

    #[test]
    fn grid_values_and_background() {
        let c = grid();
        let layout = c.grid.unwrap();
        assert_eq!(c.kc_value(layout.kc(2, 4)), 3.0);
        assert_eq!(c.kc_value(layout.kc(0, 4)), 1.0);
        assert_eq!(c.kc_value(layout.kc(1, 4)), 2.0);
        let bg = layout.background();
        assert!(c.docs.iter().all(|d| !d.teaches.contains(&bg)));
        let parents = c.prereq_parents();
        for column in 0..11 {
            assert!(parents[layout.kc(2, column)].contains(&bg));
            assert!(parents[layout.kc(0, column)].is_empty());
        }
    }

    #[test]
    fn grid_document_mapping() {
        let c = grid();
        let layout = c.grid.unwrap();
        assert_eq!(
            c.docs[layout.non_cs_doc(3)].teaches,
            vec![layout.kc(0, 3), layout.kc(1, 3)]
        );
        assert_eq!(
            c.docs[layout.cs_doc(3)].teaches,
            vec![layout.kc(2, 3), layout.kc(1, 3)]
        );
        assert_eq!(c.max_doc_value(), 5.0);
    }

    #[test]
    fn grid_spec_checks() {
        let store = store_for(&["a"]);
        let bad = GridCorpusSpec {
            rows: 4,
            ..Default::default()
        };
        assert!(build_grid_corpus(&bad, &store, &[]).is_err());
        let bad = GridCorpusSpec {
            pref_edge_prob: 1.5,
            ..Default::default()
        };
        assert!(bad.check().is_err());
        let bad = GridCorpusSpec {
            columns: 0,
            ..Default::default()
        };
        assert!(bad.check().is_err());
    }

    #[test]
    fn topological_order_on_chain() {
        assert_eq!(topological_order(3, &[(0, 1), (1, 2)]), Some(vec![0, 1, 2]));
        assert_eq!(topological_order(2, &[(0, 1), (1, 0)]), None);
    }
}
