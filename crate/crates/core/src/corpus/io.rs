use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    validate_corpus, Corpus, CorpusError, CorpusKind, Document, EmbeddingStore, GridLayout,
    Keyword, KnowledgeComponent,
};

/// On-disk JSON form of a corpus. Documents name their keywords by token;
/// vectors live in a separate embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFile {
    #[serde(default)]
    pub name: String,
    pub kind: CorpusKind,
    pub kcs: Vec<KnowledgeComponent>,
    pub docs: Vec<DocumentRecord>,
    pub prereq_edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridLayout>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: usize,
    pub teaches: Vec<usize>,
    pub keywords: Vec<String>,
}

impl CorpusFile {
    pub fn from_corpus(c: &Corpus) -> Self {
        Self {
            name: c.name.clone(),
            kind: c.kind,
            kcs: c.kcs.clone(),
            docs: c
                .docs
                .iter()
                .map(|d| DocumentRecord {
                    id: d.id,
                    teaches: d.teaches.clone(),
                    keywords: d.keywords.iter().map(|&k| c.keywords[k].token.clone()).collect(),
                })
                .collect(),
            prereq_edges: c.prereq_edges.iter().map(|&(a, b)| [a, b]).collect(),
            grid: c.grid,
        }
    }

    /// Resolves keyword tokens against `store` and validates the result.
    pub fn into_corpus(self, store: &EmbeddingStore) -> Result<Corpus, CorpusError> {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut keywords = Vec::new();
        let mut docs = Vec::with_capacity(self.docs.len());
        for record in self.docs {
            let mut ids = Vec::with_capacity(record.keywords.len());
            for token in record.keywords {
                let id = match index.get(&token) {
                    Some(&id) => id,
                    None => {
                        let embedding = store.get(&token)?.to_vec();
                        keywords.push(Keyword {
                            token: token.clone(),
                            embedding,
                        });
                        index.insert(token, keywords.len() - 1);
                        keywords.len() - 1
                    }
                };
                ids.push(id);
            }
            docs.push(Document {
                id: record.id,
                teaches: record.teaches,
                keywords: ids,
            });
        }
        let corpus = Corpus {
            name: self.name,
            kind: self.kind,
            kcs: self.kcs,
            docs,
            prereq_edges: self.prereq_edges.into_iter().map(|[a, b]| (a, b)).collect(),
            keywords,
            embedding_dim: store.dim(),
            grid: self.grid,
        };
        validate_corpus(&corpus).into_result()?;
        Ok(corpus)
    }
}

pub fn save_corpus(c: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let json = serde_json::to_string_pretty(&CorpusFile::from_corpus(c))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>, store: &EmbeddingStore) -> Result<Corpus, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    let file: CorpusFile = serde_json::from_str(&text)?;
    file.into_corpus(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_grid_corpus, synth, GridCorpusSpec};

    #[test]
    fn grid_round_trip() {
        let spec = GridCorpusSpec::default();
        let (assignment, store) = synth::grid_keywords(&spec, 6);
        let grid = build_grid_corpus(&spec, &store, &assignment).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.json");
        save_corpus(&grid, &path).unwrap();
        let back = load_corpus(&path, &store).unwrap();
        assert_eq!(grid, back);
    }

    #[test]
    fn invalid_file_is_rejected() {
        let store = EmbeddingStore::synthetic(2, ["a"]);
        let text = r#"{"kind":"graph","kcs":[{"id":0,"label":"k","value":1.0}],
            "docs":[{"id":0,"teaches":[5],"keywords":["a"]}],"prereq_edges":[]}"#;
        let file: CorpusFile = serde_json::from_str(text).unwrap();
        let err = file.into_corpus(&store).unwrap_err();
        assert!(err.to_string().contains("unknown KC 5"), "{err}");
    }
}
