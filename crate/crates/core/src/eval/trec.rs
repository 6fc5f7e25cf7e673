//! Run and qrels containers with TREC-format I/O.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::EvalError;

/// Sorts by score descending, then doc_id descending.
pub fn sort_ranking(hits: &mut [(String, f64)]) {
    hits.sort_by(compare_hits);
}

fn compare_hits(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| b.0.cmp(&a.0))
}

/// Per-query ranked lists. Every list is kept in canonical order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Run {
    tag: String,
    rankings: BTreeMap<String, Vec<(String, f64)>>,
}

impl Run {
    pub fn new(tag: impl Into<String>) -> Self {
        Run {
            tag: tag.into(),
            rankings: BTreeMap::new(),
        }
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn set_tag(&mut self, tag: impl Into<String>) {
        self.tag = tag.into();
    }

    /// Inserts (or replaces) a query's ranking, sorting it canonically.
    pub fn insert_sorted(&mut self, query_id: String, mut hits: Vec<(String, f64)>) {
        sort_ranking(&mut hits);
        self.rankings.insert(query_id, hits);
    }

    pub fn get(&self, query_id: &str) -> Option<&[(String, f64)]> {
        self.rankings.get(query_id).map(Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.rankings.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[(String, f64)])> {
        self.rankings.iter().map(|(q, r)| (q.as_str(), r.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }

    /// Keeps at most `k` documents per query.
    pub fn truncated(&self, k: usize) -> Run {
        let mut out = Run::new(self.tag.clone());
        for (q, hits) in &self.rankings {
            out.rankings
                .insert(q.clone(), hits.iter().take(k).cloned().collect());
        }
        out
    }

    /// Parses the 6-column `qid Q0 docid rank score tag` format.
    /// The rank column is ignored; lists are re-sorted by score.
    pub fn parse(text: &str) -> Result<Run, EvalError> {
        let mut tag = None;
        let mut rankings: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        let mut seen: HashSet<(String, String)> = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() != 6 {
                return Err(EvalError::parse(
                    i + 1,
                    format!("expected 6 columns, found {}", fields.len()),
                ));
            }
            let score: f64 = fields[4]
                .parse()
                .map_err(|_| EvalError::parse(i + 1, format!("bad score `{}`", fields[4])))?;
            if !score.is_finite() {
                return Err(EvalError::parse(i + 1, "score is not finite".to_string()));
            }
            let (qid, docid) = (fields[0].to_string(), fields[2].to_string());
            if !seen.insert((qid.clone(), docid.clone())) {
                return Err(EvalError::parse(
                    i + 1,
                    format!("document `{docid}` appears twice for query `{qid}`"),
                ));
            }
            tag.get_or_insert_with(|| fields[5].to_string());
            rankings.entry(qid).or_default().push((docid, score));
        }
        for hits in rankings.values_mut() {
            sort_ranking(hits);
        }
        Ok(Run {
            tag: tag.unwrap_or_default(),
            rankings,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Run, EvalError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
        Run::parse(&text).map_err(|e| e.in_file(path))
    }

    /// Serializes in 6-column format. Scores use the shortest round-trip
    /// representation, so reading the file back reproduces them exactly.
    pub fn to_trec(&self) -> String {
        let tag: String = if self.tag.is_empty() {
            "run".to_string()
        } else {
            self.tag
                .chars()
                .map(|c| if c.is_whitespace() { '_' } else { c })
                .collect()
        };
        let mut out = String::new();
        for (qid, hits) in &self.rankings {
            for (rank, (doc, score)) in hits.iter().enumerate() {
                writeln!(out, "{qid} Q0 {doc} {} {score} {tag}", rank + 1).unwrap();
            }
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        fs::write(path, self.to_trec()).map_err(|e| EvalError::io(path, e))
    }
}

/// Graded relevance judgments, `query -> doc -> grade`. Grades are never negative.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, i32>>,
}

/// Qrels plus the notices produced while loading them.
#[derive(Debug, Clone)]
pub struct LoadedQrels {
    pub qrels: Qrels,
    pub warnings: Vec<String>,
}

impl Qrels {
    /// Builds qrels from triples; negative grades are clamped to zero.
    pub fn from_triples<I, Q, D>(triples: I) -> Qrels
    where
        I: IntoIterator<Item = (Q, D, i32)>,
        Q: Into<String>,
        D: Into<String>,
    {
        let mut judgments: BTreeMap<String, BTreeMap<String, i32>> = BTreeMap::new();
        for (q, d, g) in triples {
            judgments.entry(q.into()).or_default().insert(d.into(), g.max(0));
        }
        Qrels { judgments }
    }

    /// Accepts `qid iter docid rel` and `qid docid rel` lines.
    pub fn parse(text: &str) -> Result<LoadedQrels, EvalError> {
        let mut judgments: BTreeMap<String, BTreeMap<String, i32>> = BTreeMap::new();
        let mut warnings = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let (qid, docid, rel) = match fields.as_slice() {
                [] => continue,
                [q, _, d, r] => (q, d, r),
                [q, d, r] => (q, d, r),
                other => {
                    return Err(EvalError::parse(
                        i + 1,
                        format!("expected 3 or 4 columns, found {}", other.len()),
                    ))
                }
            };
            let mut grade: i32 = match rel.parse() {
                Ok(g) => g,
                // header row of a BEIR-style TSV
                Err(_) if i == 0 && judgments.is_empty() => continue,
                Err(_) => return Err(EvalError::parse(i + 1, format!("bad grade `{rel}`"))),
            };
            if grade < 0 {
                warnings.push(format!(
                    "line {}: grade {grade} for ({qid}, {docid}) clamped to 0",
                    i + 1
                ));
                grade = 0;
            }
            judgments
                .entry(qid.to_string())
                .or_default()
                .insert(docid.to_string(), grade);
        }
        if judgments.is_empty() {
            return Err(EvalError::EmptyQrels);
        }
        Ok(LoadedQrels {
            qrels: Qrels { judgments },
            warnings,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<LoadedQrels, EvalError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
        Qrels::parse(&text).map_err(|e| e.in_file(path))
    }

    /// Writes 4-column TREC qrels.
    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for (q, docs) in &self.judgments {
            for (d, g) in docs {
                writeln!(out, "{q} 0 {d} {g}").unwrap();
            }
        }
        out
    }

    pub fn get(&self, query_id: &str) -> Option<&BTreeMap<String, i32>> {
        self.judgments.get(query_id)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BTreeMap<String, i32>)> {
        self.judgments.iter().map(|(q, j)| (q.as_str(), j))
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    /// Number of documents with grade > 0 for a query.
    pub fn relevant_count(&self, query_id: &str) -> usize {
        self.get(query_id)
            .map(|j| j.values().filter(|&&g| g > 0).count())
            .unwrap_or(0)
    }
}
