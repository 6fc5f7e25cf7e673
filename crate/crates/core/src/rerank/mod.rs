//! Second-stage scoring of first-stage candidates.
//!
//! Two scorers are provided: [`ExternalScores`], a lookup table of scores
//! produced elsewhere (for example by a real language model), and
//! [`ToyBiEncoder`], a tiny embedding model whose weights live in the tensor
//! container so merged checkpoints can be scored directly.

mod encoder;
pub mod train;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::eval::Run;
use crate::lexical::{Document, Query};
use crate::tensor_store::TensorError;

pub use encoder::{read_vocab, write_vocab, ToyBiEncoder, EMBEDDING, PROJECTION};
pub use train::{train_fixture, FixtureConfig, FixtureOutput};

#[derive(Debug, thiserror::Error)]
pub enum RerankError {
    #[error("no external score for query `{query_id}`, document `{doc_id}`")]
    MissingScore { query_id: String, doc_id: String },
    #[error("run references unknown query `{0}`")]
    UnknownQuery(String),
    #[error("run references document `{0}` which is not in the corpus")]
    UnknownDocument(String),
    #[error("rerank depth k must be at least 1")]
    ZeroDepth,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid fixture config: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl RerankError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        RerankError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Scores (query, document) pairs. Implementations must be deterministic.
pub trait Scorer: Sync {
    fn score(&self, query: &Query, doc: &Document) -> Result<f64, RerankError>;

    /// Scores every candidate of one query. Override to share per-query work.
    fn score_candidates(&self, query: &Query, docs: &[&Document]) -> Result<Vec<f64>, RerankError> {
        docs.iter().map(|d| self.score(query, d)).collect()
    }
}

/// `query_id \t doc_id \t score` table produced by an external model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExternalScores {
    scores: HashMap<(String, String), f64>,
}

impl ExternalScores {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>, score: f64) {
        self.scores.insert((query_id.into(), doc_id.into()), score);
    }

    pub fn get(&self, query_id: &str, doc_id: &str) -> Option<f64> {
        self.scores
            .get(&(query_id.to_string(), doc_id.to_string()))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Table built from every (query, doc, score) entry of a run.
    pub fn from_run(run: &Run) -> Self {
        let mut out = Self::new();
        for (q, hits) in run.iter() {
            for (d, s) in hits {
                out.insert(q, d.clone(), *s);
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, RerankError> {
        let mut out = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [q, d, s] = fields.as_slice() else {
                return Err(RerankError::Parse {
                    line: i + 1,
                    message: format!("expected 3 tab-separated columns, found {}", fields.len()),
                });
            };
            let score: f64 = match s.trim().parse() {
                Ok(v) => v,
                Err(_) if i == 0 => continue, // header
                Err(_) => {
                    return Err(RerankError::Parse {
                        line: i + 1,
                        message: format!("bad score `{s}`"),
                    })
                }
            };
            if !score.is_finite() {
                return Err(RerankError::Parse {
                    line: i + 1,
                    message: "score is not finite".into(),
                });
            }
            let key = (q.trim().to_string(), d.trim().to_string());
            if out.scores.insert(key, score).is_some() {
                return Err(RerankError::Parse {
                    line: i + 1,
                    message: format!("duplicate pair ({q}, {d})"),
                });
            }
        }
        Ok(out)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, RerankError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| RerankError::io(path, e))?;
        Self::parse(&text)
    }

    /// Sorted by query then document.
    pub fn to_tsv(&self) -> String {
        let sorted: BTreeMap<&(String, String), &f64> = self.scores.iter().collect();
        let mut out = String::new();
        for ((q, d), s) in sorted {
            writeln!(out, "{q}\t{d}\t{s}").unwrap();
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), RerankError> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| RerankError::io(path, e))
    }
}

impl Scorer for ExternalScores {
    fn score(&self, query: &Query, doc: &Document) -> Result<f64, RerankError> {
        self.get(&query.query_id, &doc.doc_id)
            .ok_or_else(|| RerankError::MissingScore {
                query_id: query.query_id.clone(),
                doc_id: doc.doc_id.clone(),
            })
    }
}

/// Rescores every candidate of `run_in` and keeps the top `k` per query.
pub fn rerank(
    scorer: &dyn Scorer,
    run_in: &Run,
    queries: &HashMap<String, Query>,
    corpus: &HashMap<String, Document>,
    k: usize,
    tag: &str,
) -> Result<Run, RerankError> {
    if k == 0 {
        return Err(RerankError::ZeroDepth);
    }
    let jobs: Vec<(&str, &[(String, f64)])> = run_in.iter().collect();
    let scored = jobs
        .into_par_iter()
        .map(|(qid, hits)| {
            let query = queries
                .get(qid)
                .ok_or_else(|| RerankError::UnknownQuery(qid.to_string()))?;
            let docs = hits
                .iter()
                .map(|(d, _)| {
                    corpus
                        .get(d)
                        .ok_or_else(|| RerankError::UnknownDocument(d.clone()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let scores = scorer.score_candidates(query, &docs)?;
            let out: Vec<(String, f64)> = hits
                .iter()
                .zip(scores)
                .map(|((d, _), s)| (d.clone(), s))
                .collect();
            Ok((qid.to_string(), out))
        })
        .collect::<Result<Vec<_>, RerankError>>()?;

    let mut run = Run::new(tag);
    for (qid, mut hits) in scored {
        crate::eval::sort_ranking(&mut hits);
        hits.truncate(k);
        run.insert_sorted(qid, hits);
    }
    Ok(run)
}

/// Keyed lookup tables for [`rerank`].
pub fn index_queries(queries: &[Query]) -> HashMap<String, Query> {
    queries
        .iter()
        .map(|q| (q.query_id.clone(), q.clone()))
        .collect()
}

pub fn index_corpus(docs: &[Document]) -> HashMap<String, Document> {
    docs.iter().map(|d| (d.doc_id.clone(), d.clone())).collect()
}
