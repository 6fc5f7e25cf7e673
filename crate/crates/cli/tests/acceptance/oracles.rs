//! Direct-definition reference computations, written without the library.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use taskfuse::eval::Metric;
use taskfuse::rerank::train::EncodedText;

fn grade(grades: &BTreeMap<String, i32>, d: &str) -> i32 {
    grades.get(d).copied().unwrap_or(0)
}

fn discounted(gains: impl Iterator<Item = f64>) -> f64 {
    gains.enumerate().map(|(i, g)| g / (i as f64 + 2.0).log2()).sum()
}

pub fn metric(m: Metric, ranked: &[String], grades: &BTreeMap<String, i32>) -> f64 {
    let relevant = grades.values().filter(|&&g| g > 0).count();
    match m {
        Metric::Precision(k) => {
            ranked.iter().take(k).filter(|d| grade(grades, d) > 0).count() as f64 / k as f64
        }
        Metric::Ndcg(k) => {
            let mut ideal: Vec<i32> = grades.values().copied().filter(|&g| g > 0).collect();
            ideal.sort_unstable_by(|a, b| b.cmp(a));
            let idcg = discounted(ideal.iter().take(k).map(|&g| g as f64));
            let dcg = discounted(ranked.iter().take(k).map(|d| grade(grades, d).max(0) as f64));
            if idcg == 0.0 {
                0.0
            } else {
                dcg / idcg
            }
        }
        Metric::AveragePrecision(k) => {
            if relevant == 0 {
                return 0.0;
            }
            let mut hits = 0;
            let mut sum = 0.0;
            for (i, d) in ranked.iter().take(k).enumerate() {
                if grade(grades, d) > 0 {
                    hits += 1;
                    sum += hits as f64 / (i + 1) as f64;
                }
            }
            sum / relevant as f64
        }
    }
}

/// Scores for every document; repeated query terms count once.
pub fn bm25(docs: &[Vec<String>], query: &[String], k1: f64, b: f64) -> Vec<f64> {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|d| d.len() as f64).sum::<f64>() / n;
    let mut unique = query.to_vec();
    unique.sort();
    unique.dedup();
    docs.iter()
        .map(|doc| {
            let mut total = 0.0;
            for t in &unique {
                let tf = doc.iter().filter(|w| *w == t).count() as f64;
                let df = docs.iter().filter(|d| d.contains(t)).count() as f64;
                if tf > 0.0 {
                    let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                    let norm = k1 * (1.0 - b + b * doc.len() as f64 / avgdl);
                    total += idf * (tf * (k1 + 1.0)) / (tf + norm);
                }
            }
            total
        })
        .collect()
}

/// Random (query, positive) pairs over a vocabulary of `v` terms.
pub fn encoded_pairs(r: &mut ChaCha8Rng, v: usize, batch: usize) -> Vec<(EncodedText, EncodedText)> {
    let lookup: HashMap<String, usize> = (0..v).map(|i| (format!("w{i}"), i)).collect();
    let text = |r: &mut ChaCha8Rng| {
        (0..r.random_range(1..=4)).map(|_| format!("w{}", r.random_range(0..v))).collect::<Vec<_>>().join(" ")
    };
    (0..batch)
        .map(|_| {
            let q = text(r);
            let d = text(r);
            (EncodedText::new(&q, &lookup), EncodedText::new(&d, &lookup))
        })
        .collect()
}
