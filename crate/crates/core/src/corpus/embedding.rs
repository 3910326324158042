use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::CorpusError;

/// Keyword embeddings of a fixed dimension.
///
/// Lookups of unknown tokens are errors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    order: Vec<String>,
}

pub const DEFAULT_EMBEDDING_DIM: usize = 100;

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
            order: Vec::new(),
        }
    }

    /// Unit-norm Gaussian vectors, each seeded from a hash of its token so a
    /// token maps to the same vector in every store.
    pub fn synthetic<'a>(dim: usize, tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut store = Self::new(dim);
        for token in tokens {
            if store.contains(token) {
                continue;
            }
            let v = synthetic_vector(dim, token);
            store.insert(token.to_string(), v).expect("dimension is fixed");
        }
        store
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vectors.contains_key(token)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn get(&self, token: &str) -> Result<&[f64], CorpusError> {
        self.vectors
            .get(token)
            .map(Vec::as_slice)
            .ok_or_else(|| CorpusError::UnknownKeyword(token.to_string()))
    }

    pub fn insert(&mut self, token: String, vector: Vec<f64>) -> Result<(), CorpusError> {
        if vector.len() != self.dim {
            return Err(CorpusError::Invalid(format!(
                "vector for `{token}` has dimension {}, store expects {}",
                vector.len(),
                self.dim
            )));
        }
        if self.vectors.insert(token.clone(), vector).is_none() {
            self.order.push(token);
        }
        Ok(())
    }

    /// Adds every token of `other` that is not present yet.
    pub fn extend_from(&mut self, other: &EmbeddingStore) -> Result<(), CorpusError> {
        for token in other.tokens() {
            if !self.contains(token) {
                self.insert(token.to_string(), other.get(token)?.to_vec())?;
            }
        }
        Ok(())
    }

    /// Parses the whitespace text format: one token followed by `dim` floats
    /// per line. When `dim` is `None` it is taken from the first record.
    pub fn parse(text: &str, dim: Option<usize>) -> Result<Self, CorpusError> {
        let mut store: Option<EmbeddingStore> = dim.map(EmbeddingStore::new);
        for (index, raw) in text.lines().enumerate() {
            let line = index + 1;
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let mut fields = raw.split_whitespace();
            let token = fields.next().expect("non-empty line");
            let values = fields
                .map(|f| {
                    f.parse::<f64>().map_err(|e| CorpusError::Parse {
                        line,
                        message: format!("`{f}` is not a number ({e})"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            if values.is_empty() {
                return Err(CorpusError::Parse {
                    line,
                    message: format!("token `{token}` has no vector"),
                });
            }
            let store = store.get_or_insert_with(|| EmbeddingStore::new(values.len()));
            if values.len() != store.dim {
                return Err(CorpusError::DimensionMismatch {
                    line,
                    expected: store.dim,
                    found: values.len(),
                });
            }
            if store.contains(token) {
                return Err(CorpusError::DuplicateToken {
                    line,
                    token: token.to_string(),
                });
            }
            store.insert(token.to_string(), values)?;
        }
        Ok(store.unwrap_or_else(|| EmbeddingStore::new(dim.unwrap_or(DEFAULT_EMBEDDING_DIM))))
    }

    pub fn load(path: impl AsRef<Path>, dim: Option<usize>) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, dim)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for token in &self.order {
            out.push_str(token);
            for v in &self.vectors[token] {
                // {:?} prints the shortest representation that round-trips.
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

pub(crate) fn token_seed(token: &str) -> u64 {
    let digest = Sha256::digest(token.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub(crate) fn synthetic_vector(dim: usize, token: &str) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(token_seed(token));
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}
