use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::lexical::{tokenize, Document, Query};
use crate::tensor_store::{Checkpoint, TensorEntry};

use super::{RerankError, Scorer};

pub const EMBEDDING: &str = "embedding.weight";
pub const PROJECTION: &str = "projection.weight";

/// Mean-of-embeddings encoder followed by a square projection and L2
/// normalization. Scores are cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBiEncoder {
    vocab: Vec<String>,
    lookup: HashMap<String, usize>,
    dim: usize,
    /// `[V x d]`, row-major
    embedding: Vec<f64>,
    /// `[d x d]`, row-major; encodings are `mean_embedding * projection`
    projection: Vec<f64>,
}

impl ToyBiEncoder {
    pub fn new(
        vocab: Vec<String>,
        dim: usize,
        embedding: Vec<f64>,
        projection: Vec<f64>,
    ) -> Result<Self, RerankError> {
        if vocab.is_empty() || dim == 0 {
            return Err(RerankError::InvalidModel(
                "vocabulary size and dimension must be at least 1".into(),
            ));
        }
        if embedding.len() != vocab.len() * dim || projection.len() != dim * dim {
            return Err(RerankError::InvalidModel(format!(
                "expected {}x{dim} embedding and {dim}x{dim} projection",
                vocab.len()
            )));
        }
        let mut lookup = HashMap::with_capacity(vocab.len());
        for (i, term) in vocab.iter().enumerate() {
            if lookup.insert(term.clone(), i).is_some() {
                return Err(RerankError::InvalidModel(format!(
                    "vocabulary term `{term}` appears twice"
                )));
            }
        }
        Ok(ToyBiEncoder {
            vocab,
            lookup,
            dim,
            embedding,
            projection,
        })
    }

    /// Reads `embedding.weight` and `projection.weight` from a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, vocab: Vec<String>) -> Result<Self, RerankError> {
        let get = |name: &str| {
            ckpt.get(name)
                .ok_or_else(|| RerankError::InvalidModel(format!("missing tensor `{name}`")))
        };
        let emb = get(EMBEDDING)?;
        let proj = get(PROJECTION)?;
        let (v, d) = match emb.shape() {
            [v, d] => (*v, *d),
            other => {
                return Err(RerankError::InvalidModel(format!(
                    "`{EMBEDDING}` must be 2-d, got shape {other:?}"
                )))
            }
        };
        if v != vocab.len() {
            return Err(RerankError::InvalidModel(format!(
                "embedding has {v} rows but the vocabulary has {} terms",
                vocab.len()
            )));
        }
        if proj.shape() != [d, d] {
            return Err(RerankError::InvalidModel(format!(
                "`{PROJECTION}` must be {d}x{d}, got {:?}",
                proj.shape()
            )));
        }
        Self::new(vocab, d, emb.to_f64_vec()?, proj.to_f64_vec()?)
    }

    /// Stores the weights as float32 tensors.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let mut ck = Checkpoint::new();
        let emb = TensorEntry::from_f32(vec![self.vocab.len(), self.dim], &f32s(&self.embedding))
            .expect("shape matches");
        let proj = TensorEntry::from_f32(vec![self.dim, self.dim], &f32s(&self.projection))
            .expect("shape matches");
        ck.insert(EMBEDDING, emb).expect("fresh checkpoint");
        ck.insert(PROJECTION, proj).expect("fresh checkpoint");
        ck
    }

    /// Loads weights from a tensor container and the vocabulary from a JSON array sidecar.
    pub fn load(model: impl AsRef<Path>, vocab: impl AsRef<Path>) -> Result<Self, RerankError> {
        let ckpt = crate::tensor_store::read_checkpoint(model)?;
        let vocab = read_vocab(vocab)?;
        Self::from_checkpoint(&ckpt, vocab)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn term_index(&self, term: &str) -> Option<usize> {
        self.lookup.get(term).copied()
    }

    /// Unit-norm encoding of `text`, or the zero vector when no token is in vocabulary.
    pub fn encode(&self, text: &str) -> Vec<f64> {
        let ids: Vec<usize> = tokenize(text)
            .iter()
            .filter_map(|t| self.term_index(t))
            .collect();
        let d = self.dim;
        let mut mean = vec![0.0; d];
        if ids.is_empty() {
            return mean;
        }
        for &id in &ids {
            for (m, e) in mean.iter_mut().zip(&self.embedding[id * d..(id + 1) * d]) {
                *m += e;
            }
        }
        let n = ids.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let mut h = vec![0.0; d];
        for (i, m) in mean.iter().enumerate() {
            for (j, hj) in h.iter_mut().enumerate() {
                *hj += m * self.projection[i * d + j];
            }
        }
        let norm = h.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            h.iter_mut().for_each(|x| *x /= norm);
        }
        h
    }

    pub fn score_pair(&self, query: &str, doc: &Document) -> f64 {
        dot(&self.encode(query), &self.encode(&doc.full_text()))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn read_vocab(path: impl AsRef<Path>) -> Result<Vec<String>, RerankError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| RerankError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| RerankError::InvalidModel(format!("{}: {e}", path.display())))
}

pub fn write_vocab(path: impl AsRef<Path>, vocab: &[String]) -> Result<(), RerankError> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(vocab).expect("strings serialize");
    fs::write(path, json).map_err(|e| RerankError::io(path, e))
}

impl Scorer for ToyBiEncoder {
    fn score(&self, query: &Query, doc: &Document) -> Result<f64, RerankError> {
        Ok(self.score_pair(&query.text, doc))
    }

    fn score_candidates(&self, query: &Query, docs: &[&Document]) -> Result<Vec<f64>, RerankError> {
        let q = self.encode(&query.text);
        Ok(docs
            .iter()
            .map(|d| dot(&q, &self.encode(&d.full_text())))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: &[&str], dim: usize, emb: &[f64], proj: &[f64]) -> ToyBiEncoder {
        ToyBiEncoder::new(
            vocab.iter().map(|s| s.to_string()).collect(),
            dim,
            emb.to_vec(),
            proj.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn single_term_normalizes() {
        let m = tiny(&["cat"], 2, &[3.0, 4.0], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(m.encode("cat"), vec![0.6, 0.8]);
        assert_eq!(m.encode("dog"), vec![0.0, 0.0]);
        assert_eq!(m.encode(""), vec![0.0, 0.0]);
    }

    #[test]
    fn projection_is_applied_on_the_right() {
        // row vector [1, 0] times [[0, 1], [1, 0]] = [0, 1]
        let m = tiny(&["a"], 2, &[1.0, 0.0], &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(m.encode("a"), vec![0.0, 1.0]);
    }

    #[test]
    fn self_similarity_and_oov() {
        let m = tiny(
            &["a", "b", "c"],
            2,
            &[1.0, 0.2, -0.3, 0.9, 0.5, 0.5],
            &[1.0, 0.1, 0.0, 1.0],
        );
        let doc = Document::new("d", "", "a b c");
        assert!((m.score_pair("a b c", &doc) - 1.0).abs() < 1e-12);
        assert_eq!(m.score_pair("zzz", &doc), 0.0);
    }

    #[test]
    fn checkpoint_round_trip_keeps_f32_values() {
        let m = tiny(&["a", "b"], 1, &[0.5, -0.25], &[2.0]);
        let back = ToyBiEncoder::from_checkpoint(&m.to_checkpoint(), m.vocab().to_vec()).unwrap();
        assert_eq!(back, m);
        assert!(ToyBiEncoder::from_checkpoint(&m.to_checkpoint(), vec!["a".into()]).is_err());
    }

    #[test]
    fn degenerate_models_rejected() {
        assert!(ToyBiEncoder::new(vec![], 2, vec![], vec![0.0; 4]).is_err());
        assert!(ToyBiEncoder::new(vec!["a".into()], 0, vec![], vec![]).is_err());
        assert!(ToyBiEncoder::new(vec!["a".into(), "a".into()], 1, vec![1.0, 1.0], vec![1.0]).is_err());
    }
}
