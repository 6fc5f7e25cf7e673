//! Deterministic trainer producing toy (pretrained, domain, ir) checkpoint
//! triples for the bi-encoder.
//!
//! All three phases minimize the same in-batch contrastive objective with
//! plain full-batch gradient descent on f64 weights:
//!
//! ```text
//! loss = mean_i [ -s(q_i, d_i) + mean_{j != i} s(q_i, d_j) ]
//! ```
//!
//! where `s` is the cosine score of the encoder. The pretrained phase starts
//! from a seeded random init and trains on text pairs cut from the general
//! corpus (first half of a text vs. its second half). The domain and ir
//! phases both start from the float32-rounded pretrained weights; the domain
//! phase trains on pairs cut from the domain corpus, the ir phase on
//! (query, positive document) pairs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lexical::tokenize;
use crate::tensor_store::{write_checkpoint, Checkpoint, Role};

use super::encoder::write_vocab;
use super::{RerankError, ToyBiEncoder};

fn default_lr() -> f64 {
    0.5
}

fn default_init_scale() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    /// Embedding dimension.
    pub dim: usize,
    /// Explicit vocabulary; derived from all config texts (sorted) when absent.
    #[serde(default)]
    pub vocab: Option<Vec<String>>,
    pub general_corpus: Vec<String>,
    pub domain_corpus: Vec<String>,
    pub retrieval_pairs: Vec<(String, String)>,
    pub pretrain_steps: usize,
    pub domain_steps: usize,
    pub retrieval_steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

impl FixtureConfig {
    pub fn read(path: impl AsRef<Path>) -> Result<Self, RerankError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| RerankError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| RerankError::InvalidConfig(format!("{}: {e}", path.display())))
    }

    fn resolved_vocab(&self) -> Vec<String> {
        if let Some(v) = &self.vocab {
            return v.clone();
        }
        let mut terms = BTreeSet::new();
        let texts = self
            .general_corpus
            .iter()
            .chain(&self.domain_corpus)
            .chain(self.retrieval_pairs.iter().flat_map(|(q, d)| [q, d]));
        for t in texts {
            terms.extend(tokenize(t));
        }
        terms.into_iter().collect()
    }
}

/// Bag-of-terms view of a text: (vocab row, count / in-vocab length).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedText(pub Vec<(usize, f64)>);

impl EncodedText {
    pub fn new(text: &str, lookup: &HashMap<String, usize>) -> Self {
        let ids: Vec<usize> = tokenize(text)
            .iter()
            .filter_map(|t| lookup.get(t).copied())
            .collect();
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for id in &ids {
            *counts.entry(*id).or_default() += 1;
        }
        let n = ids.len() as f64;
        EncodedText(counts.into_iter().map(|(id, c)| (id, c as f64 / n)).collect())
    }
}

/// Trainable f64 weights of the bi-encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub vocab_size: usize,
    pub dim: usize,
    pub embedding: Vec<f64>,
    pub projection: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub embedding: Vec<f64>,
    pub projection: Vec<f64>,
}

struct Forward {
    mean: Vec<f64>,
    norm: f64,
    unit: Vec<f64>,
}

impl Weights {
    pub fn seeded(vocab_size: usize, dim: usize, init_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = (0..vocab_size * dim)
            .map(|_| rng.random_range(-init_scale..init_scale))
            .collect();
        let projection = (0..dim * dim)
            .map(|k| {
                let eye = if k / dim == k % dim { 1.0 } else { 0.0 };
                eye + rng.random_range(-0.1..0.1)
            })
            .collect();
        Weights {
            vocab_size,
            dim,
            embedding,
            projection,
        }
    }

    pub fn from_encoder(model: &ToyBiEncoder) -> Self {
        Weights {
            vocab_size: model.vocab().len(),
            dim: model.dim(),
            embedding: model.embedding().to_vec(),
            projection: model.projection().to_vec(),
        }
    }

    /// Weights after a float32 round trip, i.e. what a saved checkpoint holds.
    pub fn rounded_to_f32(&self) -> Self {
        let r = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect();
        Weights {
            vocab_size: self.vocab_size,
            dim: self.dim,
            embedding: r(&self.embedding),
            projection: r(&self.projection),
        }
    }

    pub fn into_encoder(self, vocab: Vec<String>) -> Result<ToyBiEncoder, RerankError> {
        ToyBiEncoder::new(vocab, self.dim, self.embedding, self.projection)
    }

    fn forward(&self, text: &EncodedText) -> Forward {
        let d = self.dim;
        let mut mean = vec![0.0; d];
        for &(id, w) in &text.0 {
            for (m, e) in mean.iter_mut().zip(&self.embedding[id * d..(id + 1) * d]) {
                *m += w * e;
            }
        }
        let mut h = vec![0.0; d];
        for (i, m) in mean.iter().enumerate() {
            for (j, hj) in h.iter_mut().enumerate() {
                *hj += m * self.projection[i * d + j];
            }
        }
        let norm = h.iter().map(|x| x * x).sum::<f64>().sqrt();
        let unit = if norm > 0.0 {
            h.iter().map(|x| x / norm).collect()
        } else {
            vec![0.0; d]
        };
        Forward { mean, norm, unit }
    }

    /// Propagates dL/d(unit) back into `grad`.
    fn backward(&self, text: &EncodedText, fwd: &Forward, g_unit: &[f64], grad: &mut Gradient) {
        if fwd.norm == 0.0 {
            return;
        }
        let d = self.dim;
        let along = super::encoder::dot(&fwd.unit, g_unit);
        let g_h: Vec<f64> = g_unit
            .iter()
            .zip(&fwd.unit)
            .map(|(g, u)| (g - u * along) / fwd.norm)
            .collect();
        let mut g_mean = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                grad.projection[i * d + j] += fwd.mean[i] * g_h[j];
                g_mean[i] += self.projection[i * d + j] * g_h[j];
            }
        }
        for &(id, w) in &text.0 {
            for (ge, gm) in grad.embedding[id * d..(id + 1) * d].iter_mut().zip(&g_mean) {
                *ge += w * gm;
            }
        }
    }
}

fn score_matrix(queries: &[Forward], docs: &[Forward]) -> Vec<Vec<f64>> {
    queries
        .iter()
        .map(|q| docs.iter().map(|d| super::encoder::dot(&q.unit, &d.unit)).collect())
        .collect()
}

fn loss_from_scores(s: &[Vec<f64>]) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for (i, row) in s.iter().enumerate() {
        let mut term = -row[i];
        if b > 1 {
            let neg: f64 = row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v).sum();
            term += neg / (b - 1) as f64;
        }
        total += term;
    }
    total / b as f64
}

/// In-batch contrastive loss over `(query, positive)` pairs.
pub fn contrastive_loss(w: &Weights, pairs: &[(EncodedText, EncodedText)]) -> f64 {
    let qs: Vec<Forward> = pairs.iter().map(|(q, _)| w.forward(q)).collect();
    let ds: Vec<Forward> = pairs.iter().map(|(_, d)| w.forward(d)).collect();
    loss_from_scores(&score_matrix(&qs, &ds))
}

/// Loss and its analytic gradient with respect to both weight matrices.
pub fn contrastive_loss_and_grad(
    w: &Weights,
    pairs: &[(EncodedText, EncodedText)],
) -> (f64, Gradient) {
    let b = pairs.len();
    let d = w.dim;
    let qs: Vec<Forward> = pairs.iter().map(|(q, _)| w.forward(q)).collect();
    let ds: Vec<Forward> = pairs.iter().map(|(_, d)| w.forward(d)).collect();
    let loss = loss_from_scores(&score_matrix(&qs, &ds));

    // dL/dS[i][j]: -1/B on the diagonal, 1/(B(B-1)) off it
    let on = -1.0 / b as f64;
    let off = if b > 1 {
        1.0 / (b * (b - 1)) as f64
    } else {
        0.0
    };
    let mut grad = Gradient {
        embedding: vec![0.0; w.embedding.len()],
        projection: vec![0.0; w.projection.len()],
    };
    for i in 0..b {
        let mut g_q = vec![0.0; d];
        let mut g_d = vec![0.0; d];
        for j in 0..b {
            let c = if i == j { on } else { off };
            for k in 0..d {
                g_q[k] += c * ds[j].unit[k];
                g_d[k] += c * qs[j].unit[k];
            }
        }
        w.backward(&pairs[i].0, &qs[i], &g_q, &mut grad);
        w.backward(&pairs[i].1, &ds[i], &g_d, &mut grad);
    }
    (loss, grad)
}

/// Runs `steps` of gradient descent; returns the loss before each step and after the last.
pub fn gradient_descent(
    w: &mut Weights,
    pairs: &[(EncodedText, EncodedText)],
    steps: usize,
    learning_rate: f64,
) -> Vec<f64> {
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (loss, g) = contrastive_loss_and_grad(w, pairs);
        losses.push(loss);
        for (p, gp) in w.embedding.iter_mut().zip(&g.embedding) {
            *p -= learning_rate * gp;
        }
        for (p, gp) in w.projection.iter_mut().zip(&g.projection) {
            *p -= learning_rate * gp;
        }
    }
    losses.push(contrastive_loss(w, pairs));
    losses
}

/// Cuts each text into (first half, second half) of its tokens.
pub fn halves(corpus: &[String]) -> Vec<(String, String)> {
    corpus
        .iter()
        .filter_map(|text| {
            let toks = tokenize(text);
            if toks.len() < 2 {
                return None;
            }
            let mid = toks.len() / 2;
            Some((toks[..mid].join(" "), toks[mid..].join(" ")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseLosses {
    pub pretrain: Vec<f64>,
    pub domain: Vec<f64>,
    pub retrieval: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FixtureOutput {
    pub vocab: Vec<String>,
    pub pretrained: Checkpoint,
    pub domain: Checkpoint,
    pub ir: Checkpoint,
    pub losses: PhaseLosses,
}

impl FixtureOutput {
    pub const PRETRAINED_FILE: &'static str = "pretrained.safetensors";
    pub const DOMAIN_FILE: &'static str = "domain.safetensors";
    pub const IR_FILE: &'static str = "ir.safetensors";
    pub const VOCAB_FILE: &'static str = "vocab.json";
    pub const LOSSES_FILE: &'static str = "losses.json";

    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<(), RerankError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| RerankError::io(dir, e))?;
        write_checkpoint(&self.pretrained, dir.join(Self::PRETRAINED_FILE))?;
        write_checkpoint(&self.domain, dir.join(Self::DOMAIN_FILE))?;
        write_checkpoint(&self.ir, dir.join(Self::IR_FILE))?;
        write_vocab(dir.join(Self::VOCAB_FILE), &self.vocab)?;
        let losses = serde_json::to_string_pretty(&self.losses).expect("losses serialize");
        let path = dir.join(Self::LOSSES_FILE);
        fs::write(&path, losses).map_err(|e| RerankError::io(&path, e))
    }
}

fn encode_pairs(
    pairs: &[(String, String)],
    lookup: &HashMap<String, usize>,
) -> Vec<(EncodedText, EncodedText)> {
    pairs
        .iter()
        .map(|(q, d)| (EncodedText::new(q, lookup), EncodedText::new(d, lookup)))
        .collect()
}

fn to_checkpoint(w: &Weights, vocab: &[String], role: Role, seed: u64, steps: usize) -> Result<Checkpoint, RerankError> {
    let model = w.clone().into_encoder(vocab.to_vec())?;
    let mut ck = model.to_checkpoint();
    ck.set_role(role);
    ck.set_metadata("source", "fixture");
    ck.set_metadata("seed", seed.to_string());
    ck.set_metadata("steps", steps.to_string());
    Ok(ck)
}

/// Trains the (pretrained, domain, ir) triple. Bit-deterministic for a given seed and config.
pub fn train_fixture(seed: u64, config: &FixtureConfig) -> Result<FixtureOutput, RerankError> {
    let vocab = config.resolved_vocab();
    if vocab.is_empty() || config.dim == 0 {
        return Err(RerankError::InvalidConfig(
            "vocabulary size and dimension must be at least 1".into(),
        ));
    }
    if !(config.learning_rate.is_finite() && config.init_scale.is_finite() && config.init_scale > 0.0) {
        return Err(RerankError::InvalidConfig(
            "learning_rate and init_scale must be finite, init_scale positive".into(),
        ));
    }
    let general = halves(&config.general_corpus);
    let domain = halves(&config.domain_corpus);
    if general.is_empty() || domain.is_empty() || config.retrieval_pairs.is_empty() {
        return Err(RerankError::InvalidConfig(
            "general corpus, domain corpus and retrieval pairs must all be non-empty".into(),
        ));
    }
    let lookup: HashMap<String, usize> = vocab
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    if lookup.len() != vocab.len() {
        return Err(RerankError::InvalidConfig("vocabulary has duplicate terms".into()));
    }
    let general = encode_pairs(&general, &lookup);
    let domain = encode_pairs(&domain, &lookup);
    let retrieval = encode_pairs(&config.retrieval_pairs, &lookup);
    let lr = config.learning_rate;

    let mut base = Weights::seeded(vocab.len(), config.dim, config.init_scale, seed);
    let pretrain_losses = gradient_descent(&mut base, &general, config.pretrain_steps, lr);
    let base = base.rounded_to_f32();

    let mut dom = base.clone();
    let domain_losses = gradient_descent(&mut dom, &domain, config.domain_steps, lr);
    let mut ir = base.clone();
    let retrieval_losses = gradient_descent(&mut ir, &retrieval, config.retrieval_steps, lr);

    Ok(FixtureOutput {
        pretrained: to_checkpoint(&base, &vocab, Role::Pretrained, seed, config.pretrain_steps)?,
        domain: to_checkpoint(&dom, &vocab, Role::Domain, seed, config.domain_steps)?,
        ir: to_checkpoint(&ir, &vocab, Role::Ir, seed, config.retrieval_steps)?,
        vocab,
        losses: PhaseLosses {
            pretrain: pretrain_losses,
            domain: domain_losses,
            retrieval: retrieval_losses,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(steps: usize) -> FixtureConfig {
        FixtureConfig {
            dim: 3,
            vocab: None,
            general_corpus: vec!["red apple green pear".into(), "blue sky grey cloud".into()],
            domain_corpus: vec!["gene protein cell virus".into(), "dose trial drug cell".into()],
            retrieval_pairs: vec![
                ("apple".into(), "red apple pear".into()),
                ("sky".into(), "grey cloud sky".into()),
            ],
            pretrain_steps: steps,
            domain_steps: steps,
            retrieval_steps: steps,
            learning_rate: 0.5,
            init_scale: 0.5,
        }
    }

    #[test]
    fn zero_steps_gives_identical_triple() {
        let out = train_fixture(7, &small_config(0)).unwrap();
        assert!(out.pretrained.same_tensors(&out.domain));
        assert!(out.pretrained.same_tensors(&out.ir));
        assert_eq!(out.pretrained.role(), Some(Role::Pretrained));
    }

    #[test]
    fn training_is_deterministic() {
        let a = train_fixture(11, &small_config(20)).unwrap();
        let b = train_fixture(11, &small_config(20)).unwrap();
        assert_eq!(a.ir.to_bytes(), b.ir.to_bytes());
        assert_eq!(a.domain.to_bytes(), b.domain.to_bytes());
        let c = train_fixture(12, &small_config(20)).unwrap();
        assert_ne!(a.ir.to_bytes(), c.ir.to_bytes());
    }

    #[test]
    fn degenerate_configs_rejected() {
        let mut c = small_config(1);
        c.dim = 0;
        assert!(train_fixture(0, &c).is_err());
        let mut c = small_config(1);
        c.domain_corpus.clear();
        assert!(train_fixture(0, &c).is_err());
        let mut c = small_config(1);
        c.vocab = Some(vec![]);
        assert!(train_fixture(0, &c).is_err());
    }

    #[test]
    fn forward_matches_encoder() {
        let w = Weights::seeded(4, 3, 0.5, 3);
        let vocab: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let lookup: HashMap<String, usize> = vocab.iter().cloned().zip(0..).collect();
        let text = "a b b d";
        let fwd = w.forward(&EncodedText::new(text, &lookup));
        let enc = w.clone().into_encoder(vocab).unwrap().encode(text);
        for (x, y) in fwd.unit.iter().zip(&enc) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn halves_split_token_lists() {
        let out = halves(&["a b c".into(), "solo".into()]);
        assert_eq!(out, vec![("a".to_string(), "b c".to_string())]);
    }
}
