//! Seeded workloads shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskfuse::eval::{Qrels, Run};
use taskfuse::lexical::{Bm25Params, Document, InvertedIndex};
use taskfuse::tensor_store::{Checkpoint, TensorEntry};

const WORDS: usize = 500;

fn word(r: &mut ChaCha8Rng) -> String {
    // skewed towards low ids so postings lists vary in length
    let x: f64 = r.random();
    format!("w{}", (x * x * WORDS as f64) as usize)
}

/// A corpus of `docs` documents of 20 to 80 tokens each.
pub fn corpus(docs: usize, seed: u64) -> Vec<Document> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..docs)
        .map(|i| {
            let n = r.random_range(20..80);
            let text: Vec<String> = (0..n).map(|_| word(&mut r)).collect();
            Document::new(format!("d{i}"), "", text.join(" "))
        })
        .collect()
}

pub fn index(docs: usize, seed: u64) -> InvertedIndex {
    InvertedIndex::build(corpus(docs, seed), Bm25Params::default()).expect("valid corpus")
}

pub fn queries(count: usize, seed: u64) -> Vec<String> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..r.random_range(2..6)).map(|_| word(&mut r)).collect::<Vec<_>>().join(" "))
        .collect()
}

/// `tensors` float32 matrices of `rows` x `cols`.
pub fn checkpoint(tensors: usize, rows: usize, cols: usize, seed: u64) -> Checkpoint {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut ck = Checkpoint::new();
    for i in 0..tensors {
        let v: Vec<f32> = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
        ck.insert(format!("layer{i}.weight"), TensorEntry::from_f32(vec![rows, cols], &v).expect("shape"))
            .expect("unique name");
    }
    ck
}

/// A run of `queries` x `depth` and qrels judging a random third of each ranking.
pub fn run_and_qrels(queries: usize, depth: usize, seed: u64) -> (Run, Qrels) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut run = Run::new("bench");
    let mut triples = Vec::new();
    for q in 0..queries {
        let qid = format!("q{q}");
        run.insert_sorted(qid.clone(), (0..depth).map(|d| (format!("d{d}"), r.random::<f64>())).collect());
        for d in 0..depth {
            if r.random_range(0..3) == 0 {
                triples.push((qid.clone(), format!("d{d}"), r.random_range(0..=3)));
            }
        }
    }
    (run, Qrels::from_triples(triples))
}
