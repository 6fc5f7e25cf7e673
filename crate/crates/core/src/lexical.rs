//! First-stage lexical retrieval: tokenizer, inverted index and BM25.
//!
//! Scoring uses the Lucene-style non-negative idf,
//! `ln(1 + (N - df + 0.5) / (df + 0.5))`, with distinct-term query semantics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::Run;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("duplicate doc_id `{0}`")]
    DuplicateDocId(String),
    #[error("empty doc_id at corpus position {0}")]
    EmptyDocId(usize),
    #[error("doc ordinal {ordinal} out of range for an index of {count} documents")]
    InvalidOrdinal { ordinal: usize, count: usize },
    #[error("bm25 parameters must be finite with k1 >= 0 and 0 <= b <= 1, got k1={k1}, b={b}")]
    InvalidParams { k1: f64, b: f64 },
    #[error("search depth k must be at least 1")]
    ZeroDepth,
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Lowercases and splits on every non-alphanumeric codepoint.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(rename = "_id")]
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub text: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            doc_id: doc_id.into(),
            title: title.into(),
            text: text.into(),
        }
    }

    /// Title and text joined by a single space; the field that gets indexed and encoded.
    pub fn full_text(&self) -> String {
        format!("{} {}", self.title, self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    #[serde(rename = "_id")]
    pub query_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 0.9, b: 0.4 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), IndexError> {
        let ok = self.k1.is_finite() && self.k1 >= 0.0 && (0.0..=1.0).contains(&self.b);
        if ok {
            Ok(())
        } else {
            Err(IndexError::InvalidParams {
                k1: self.k1,
                b: self.b,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    params: Bm25Params,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avgdl: f64,
    postings: BTreeMap<String, Vec<Posting>>,
}

impl InvertedIndex {
    pub fn build<I>(corpus: I, params: Bm25Params) -> Result<Self, IndexError>
    where
        I: IntoIterator<Item = Document>,
    {
        params.validate()?;
        let mut seen = HashSet::new();
        let mut doc_ids = Vec::new();
        let mut doc_lengths = Vec::new();
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        for (ordinal, doc) in corpus.into_iter().enumerate() {
            if doc.doc_id.is_empty() {
                return Err(IndexError::EmptyDocId(ordinal));
            }
            if !seen.insert(doc.doc_id.clone()) {
                return Err(IndexError::DuplicateDocId(doc.doc_id));
            }
            let tokens = tokenize(&doc.full_text());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: ordinal as u32,
                    tf: count,
                });
            }
            doc_ids.push(doc.doc_id);
            doc_lengths.push(tokens.len() as u32);
        }
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        let avgdl = if doc_ids.is_empty() {
            0.0
        } else {
            total as f64 / doc_ids.len() as f64
        };
        Ok(InvertedIndex {
            params,
            doc_ids,
            doc_lengths,
            avgdl,
            postings,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_id(&self, ordinal: usize) -> Option<&str> {
        self.doc_ids.get(ordinal).map(String::as_str)
    }

    pub fn doc_length(&self, ordinal: usize) -> Option<u32> {
        self.doc_lengths.get(ordinal).copied()
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count() as f64;
        let df = self.df(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, dl: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = 1.0 - b + b * dl as f64 / self.avgdl;
        idf * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    /// BM25 score of one document for a bag of query terms; repeated terms count once.
    pub fn bm25_score(&self, query_terms: &[String], ordinal: usize) -> Result<f64, IndexError> {
        let dl = self.doc_length(ordinal).ok_or(IndexError::InvalidOrdinal {
            ordinal,
            count: self.doc_count(),
        })?;
        let mut score = 0.0;
        for term in distinct(query_terms) {
            let list = self.postings(term);
            if let Ok(pos) = list.binary_search_by_key(&(ordinal as u32), |p| p.doc) {
                score += self.term_weight(self.idf(term), list[pos].tf, dl);
            }
        }
        Ok(score)
    }

    /// Top-k documents by descending score, ties by doc_id descending.
    /// Documents matching no query term are left out.
    pub fn search(&self, query: &str, k: usize) -> Result<Vec<(String, f64)>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroDepth);
        }
        let terms = tokenize(query);
        let mut acc: HashMap<u32, f64> = HashMap::new();
        // accumulate term by term in query order so sums match bm25_score exactly
        for term in distinct(&terms) {
            let idf = self.idf(term);
            for p in self.postings(term) {
                let w = self.term_weight(idf, p.tf, self.doc_lengths[p.doc as usize]);
                *acc.entry(p.doc).or_insert(0.0) += w;
            }
        }
        let mut hits: Vec<(String, f64)> = acc
            .into_iter()
            .map(|(doc, score)| (self.doc_ids[doc as usize].clone(), score))
            .collect();
        crate::eval::sort_ranking(&mut hits);
        hits.truncate(k);
        Ok(hits)
    }

    /// Runs every query and collects a run tagged `tag`.
    pub fn search_all(&self, queries: &[Query], k: usize, tag: &str) -> Result<Run, IndexError> {
        let mut run = Run::new(tag);
        for q in queries {
            let hits = self.search(&q.text, k)?;
            run.insert_sorted(q.query_id.clone(), hits);
        }
        Ok(run)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let path = path.as_ref();
        let json = serde_json::to_vec(self).expect("index serializes");
        fs::write(path, json).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let index: InvertedIndex =
            serde_json::from_slice(&bytes).map_err(|e| IndexError::Format {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        index.check().map_err(|message| IndexError::Format {
            path: path.display().to_string(),
            message,
        })?;
        Ok(index)
    }

    /// Structural invariants; used after deserializing an index from disk.
    pub fn check(&self) -> Result<(), String> {
        if self.doc_ids.len() != self.doc_lengths.len() {
            return Err("doc_ids and doc_lengths differ in length".into());
        }
        self.params.validate().map_err(|e| e.to_string())?;
        for (term, list) in &self.postings {
            if list.windows(2).any(|w| w[0].doc >= w[1].doc) {
                return Err(format!("postings for `{term}` are not strictly increasing"));
            }
            if list.iter().any(|p| p.doc as usize >= self.doc_ids.len()) {
                return Err(format!("postings for `{term}` reference unknown documents"));
            }
        }
        let total: u64 = self.doc_lengths.iter().map(|&l| l as u64).sum();
        if !self.doc_ids.is_empty() {
            let mean = total as f64 / self.doc_ids.len() as f64;
            if (mean - self.avgdl).abs() > 1e-9 * mean.max(1.0) {
                return Err("avgdl does not match the document lengths".into());
            }
        }
        Ok(())
    }
}

fn distinct(terms: &[String]) -> impl Iterator<Item = &str> {
    let mut seen = HashSet::new();
    terms
        .iter()
        .map(String::as_str)
        .filter(move |t| seen.insert(*t))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, IndexError> {
    let text = fs::read_to_string(path).map_err(|source| IndexError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| IndexError::Format {
            path: path.display().to_string(),
            message: format!("line {}: {e}", i + 1),
        })?;
        out.push(item);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), IndexError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| IndexError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a JSONL corpus of `{"_id", "title", "text"}` objects.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>, IndexError> {
    read_jsonl(path.as_ref())
}

/// Reads a JSONL query file of `{"_id", "text"}` objects.
pub fn read_queries(path: impl AsRef<Path>) -> Result<Vec<Query>, IndexError> {
    read_jsonl(path.as_ref())
}

pub fn write_corpus(path: impl AsRef<Path>, docs: &[Document]) -> Result<(), IndexError> {
    write_jsonl(path.as_ref(), docs)
}

pub fn write_queries(path: impl AsRef<Path>, queries: &[Query]) -> Result<(), IndexError> {
    write_jsonl(path.as_ref(), queries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> InvertedIndex {
        let docs = vec![
            Document::new("d1", "", "cat sat"),
            Document::new("d2", "", "cat cat ran"),
            Document::new("d3", "", "dog ran"),
        ];
        InvertedIndex::build(docs, Bm25Params::default()).unwrap()
    }

    #[test]
    fn tokenizer_examples() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("The cat, sat!"), vec!["the", "cat", "sat"]);
        assert_eq!(
            tokenize("COVID-19 re-ranking"),
            vec!["covid", "19", "re", "ranking"]
        );
        assert_eq!(tokenize("Straße ÜBER"), vec!["straße", "über"]);
    }

    #[test]
    fn tiny_corpus_statistics() {
        let idx = tiny();
        assert_eq!(idx.doc_count(), 3);
        assert!((idx.avgdl() - 7.0 / 3.0).abs() < 1e-15);
        assert_eq!(idx.df("cat"), 2);
        assert_eq!(idx.postings("cat")[1], Posting { doc: 1, tf: 2 });
        idx.check().unwrap();
    }

    #[test]
    fn worked_bm25_example() {
        let idx = tiny();
        let s = idx.bm25_score(&["cat".to_string()], 0).unwrap();
        assert!((s - 0.483079).abs() < 1e-6, "{s}");
        let twice = idx
            .bm25_score(&["cat".to_string(), "cat".to_string()], 0)
            .unwrap();
        assert_eq!(s, twice);
        assert_eq!(idx.bm25_score(&["dog".to_string()], 0).unwrap(), 0.0);
        assert!(matches!(
            idx.bm25_score(&["cat".to_string()], 3),
            Err(IndexError::InvalidOrdinal { .. })
        ));
    }

    #[test]
    fn search_orders_and_truncates() {
        let idx = tiny();
        let hits = idx.search("cat", 100).unwrap();
        assert_eq!(hits.len(), 2);
        // brute force: score every document and sort
        let q = tokenize("cat");
        let mut brute: Vec<(String, f64)> = (0..3)
            .map(|i| (idx.doc_id(i).unwrap().to_string(), idx.bm25_score(&q, i).unwrap()))
            .filter(|(_, s)| *s > 0.0)
            .collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(b.0.cmp(&a.0)));
        assert_eq!(hits, brute);
        assert_eq!(hits[0].0, "d2");
        assert_eq!(idx.search("cat", 1).unwrap(), hits[..1].to_vec());
        assert!(idx.search("zebra", 10).unwrap().is_empty());
        assert!(idx.search("cat", 0).is_err());
    }

    #[test]
    fn empty_corpus() {
        let idx = InvertedIndex::build(Vec::new(), Bm25Params::default()).unwrap();
        assert_eq!(idx.doc_count(), 0);
        assert!(idx.search("anything", 5).unwrap().is_empty());
    }

    #[test]
    fn duplicate_doc_id_named() {
        let docs = vec![Document::new("x", "", "a"), Document::new("x", "", "b")];
        assert!(matches!(
            InvertedIndex::build(docs, Bm25Params::default()),
            Err(IndexError::DuplicateDocId(id)) if id == "x"
        ));
    }

    #[test]
    fn title_is_indexed() {
        let docs = vec![Document::new("a", "Heading", "body")];
        let idx = InvertedIndex::build(docs, Bm25Params::default()).unwrap();
        assert_eq!(idx.doc_length(0), Some(2));
        assert_eq!(idx.df("heading"), 1);
    }

    #[test]
    fn ties_break_by_doc_id_descending() {
        let docs = vec![
            Document::new("a", "", "same words"),
            Document::new("c", "", "same words"),
            Document::new("b", "", "same words"),
        ];
        let idx = InvertedIndex::build(docs, Bm25Params::default()).unwrap();
        let ids: Vec<String> = idx.search("same", 10).unwrap().into_iter().map(|h| h.0).collect();
        assert_eq!(ids, vec!["c", "b", "a"]);
    }

    #[test]
    fn bad_params_rejected() {
        let bad = Bm25Params { k1: 0.9, b: 1.5 };
        assert!(InvertedIndex::build(Vec::new(), bad).is_err());
    }
}
