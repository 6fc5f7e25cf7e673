//! A small seeded world of topical documents and queries.
//!
//! Six general topics feed the pretraining and retrieval phases of the toy
//! trainer; four domain topics feed the domain phase and the two evaluation
//! collections. A query is two words of one topic; a document is relevant
//! when it belongs to that topic and contains at least one query word, with
//! grade equal to the number of query words it contains.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::eval::Qrels;
use crate::lexical::{write_corpus, write_queries, Document, Query};
use crate::rerank::{train_fixture, ExternalScores, FixtureConfig, FixtureOutput};
use crate::Error;

/// Topics `0..GENERAL_TOPICS` are general, the rest are domain topics.
static TOPICS: [[&str; 10]; 10] = [
    ["cat", "dog", "horse", "bird", "fish", "mouse", "rabbit", "sheep", "goat", "duck"],
    ["rain", "snow", "wind", "storm", "cloud", "sunny", "frost", "thunder", "fog", "breeze"],
    ["bread", "cheese", "apple", "soup", "rice", "pasta", "salad", "butter", "honey", "pepper"],
    ["football", "tennis", "runner", "goal", "match", "team", "coach", "stadium", "score", "league"],
    ["guitar", "piano", "song", "melody", "drum", "violin", "concert", "choir", "rhythm", "chord"],
    ["train", "airport", "hotel", "ticket", "journey", "passport", "luggage", "beach", "map", "road"],
    ["heart", "artery", "cardiac", "valve", "pulse", "blood", "pressure", "stroke", "vessel", "aorta"],
    ["tumor", "cancer", "chemotherapy", "biopsy", "malignant", "lymphoma", "radiation", "metastasis", "oncology", "carcinoma"],
    ["gene", "dna", "mutation", "genome", "allele", "chromosome", "sequencing", "protein", "expression", "rna"],
    ["brain", "neuron", "cortex", "synapse", "dementia", "seizure", "cognitive", "nerve", "spinal", "migraine"],
];

const GENERAL_TOPICS: usize = 6;

static FILLER: [&str; 10] = ["the", "a", "of", "and", "with", "for", "in", "on", "about", "new"];

/// Every word of the world, topic by topic, then filler.
pub fn vocabulary() -> Vec<String> {
    TOPICS
        .iter()
        .flatten()
        .chain(FILLER.iter())
        .map(|w| w.to_string())
        .collect()
}

/// Sizes of the generated world.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldSize {
    pub docs_per_collection: usize,
    pub test_queries: usize,
    pub dev_queries: usize,
    pub general_texts: usize,
    pub domain_texts: usize,
    pub retrieval_pairs: usize,
    pub dim: usize,
    pub steps: usize,
}

impl Default for WorldSize {
    fn default() -> Self {
        WorldSize {
            docs_per_collection: 80,
            test_queries: 10,
            dev_queries: 8,
            general_texts: 40,
            domain_texts: 40,
            retrieval_pairs: 40,
            dim: 16,
            steps: 60,
        }
    }
}

/// One evaluation collection with a test split and a dev split.
#[derive(Debug, Clone)]
pub struct Collection {
    pub name: String,
    pub corpus: Vec<Document>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
    pub dev_queries: Vec<Query>,
    pub dev_qrels: Qrels,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub fixture: FixtureConfig,
    pub collections: Vec<Collection>,
}

struct Text {
    topic: usize,
    tokens: Vec<&'static str>,
}

impl Text {
    /// Half the tokens come from `topic`, 30% from `noise`, the rest are filler.
    fn generate(rng: &mut ChaCha8Rng, topic: usize, noise: usize, len: usize) -> Text {
        let tokens = (0..len)
            .map(|_| {
                let r: f64 = rng.random();
                let pool: &[&'static str] = if r < 0.5 {
                    &TOPICS[topic]
                } else if r < 0.8 {
                    &TOPICS[noise]
                } else {
                    &FILLER
                };
                *pool.choose(rng).expect("pools are non-empty")
            })
            .collect();
        Text { topic, tokens }
    }

    fn joined(&self) -> String {
        self.tokens.join(" ")
    }
}

fn two_words(rng: &mut ChaCha8Rng, topic: usize) -> [&'static str; 2] {
    let picked: Vec<&&str> = TOPICS[topic].choose_multiple(rng, 2).collect();
    [picked[0], picked[1]]
}

fn make_queries(
    rng: &mut ChaCha8Rng,
    docs: &[(String, Text)],
    topics: &[usize],
    n: usize,
    prefix: &str,
) -> (Vec<Query>, Qrels) {
    let mut queries = Vec::with_capacity(n);
    let mut triples = Vec::new();
    while queries.len() < n {
        let topic = topics[queries.len() % topics.len()];
        let words = two_words(rng, topic);
        let judged: Vec<(String, i32)> = docs
            .iter()
            .filter(|(_, t)| t.topic == topic)
            .filter_map(|(id, t)| {
                let grade = words.iter().filter(|w| t.tokens.contains(w)).count() as i32;
                (grade > 0).then(|| (id.clone(), grade))
            })
            .collect();
        if judged.is_empty() {
            continue;
        }
        let qid = format!("{prefix}{}", queries.len() + 1);
        triples.extend(judged.into_iter().map(|(d, g)| (qid.clone(), d, g)));
        queries.push(Query {
            query_id: qid,
            text: words.join(" "),
        });
    }
    (queries, Qrels::from_triples(triples))
}

impl SyntheticWorld {
    pub fn generate(seed: u64, size: &WorldSize) -> SyntheticWorld {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let general_topic = |i: usize| i % GENERAL_TOPICS;
        let domain_topic = |i: usize| GENERAL_TOPICS + i % (TOPICS.len() - GENERAL_TOPICS);

        let general_corpus: Vec<String> = (0..size.general_texts)
            .map(|i| {
                let len = rng.random_range(8..=14);
                let noise = rng.random_range(0..TOPICS.len());
                Text::generate(&mut rng, general_topic(i), noise, len).joined()
            })
            .collect();
        let domain_corpus: Vec<String> = (0..size.domain_texts)
            .map(|i| {
                let len = rng.random_range(8..=14);
                let noise = rng.random_range(0..TOPICS.len());
                Text::generate(&mut rng, domain_topic(i), noise, len).joined()
            })
            .collect();
        let retrieval_pairs: Vec<(String, String)> = (0..size.retrieval_pairs)
            .map(|i| {
                let topic = general_topic(i);
                let len = rng.random_range(8..=14);
                let noise = rng.random_range(0..TOPICS.len());
                let doc = Text::generate(&mut rng, topic, noise, len);
                let mut own: Vec<&str> = doc
                    .tokens
                    .iter()
                    .copied()
                    .filter(|w| TOPICS[topic].contains(w))
                    .collect();
                own.sort_unstable();
                own.dedup();
                let query = match own.as_slice() {
                    [] => two_words(&mut rng, topic).join(" "),
                    [w] => w.to_string(),
                    many => many.choose_multiple(&mut rng, 2).copied().collect::<Vec<_>>().join(" "),
                };
                (query, doc.joined())
            })
            .collect();

        let specs = [("cardio_onco", [GENERAL_TOPICS, GENERAL_TOPICS + 1]), ("gene_neuro", [GENERAL_TOPICS + 2, GENERAL_TOPICS + 3])];
        let collections = specs
            .iter()
            .map(|(name, topics)| {
                let docs: Vec<(String, Text)> = (0..size.docs_per_collection)
                    .map(|i| {
                        let len = rng.random_range(8..=14);
                        let (own, other) = (topics[i % 2], topics[(i + 1) % 2]);
                        (format!("{name}-d{:03}", i + 1), Text::generate(&mut rng, own, other, len))
                    })
                    .collect();
                let (queries, qrels) = make_queries(&mut rng, &docs, topics, size.test_queries, "q");
                let (dev_queries, dev_qrels) = make_queries(&mut rng, &docs, topics, size.dev_queries, "dev");
                Collection {
                    name: name.to_string(),
                    corpus: docs
                        .iter()
                        .map(|(id, t)| Document::new(id.clone(), "", t.joined()))
                        .collect(),
                    queries,
                    qrels,
                    dev_queries,
                    dev_qrels,
                }
            })
            .collect();

        SyntheticWorld {
            fixture: FixtureConfig {
                dim: size.dim,
                vocab: Some(vocabulary()),
                general_corpus,
                domain_corpus,
                retrieval_pairs,
                pretrain_steps: size.steps,
                domain_steps: size.steps,
                retrieval_steps: size.steps,
                learning_rate: 0.5,
                init_scale: 0.5,
            },
            collections,
        }
    }

    /// Writes `fixture.json` and one directory per collection under `dir`.
    pub fn write_data(&self, dir: &Path) -> Result<(), Error> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let fixture = serde_json::to_string_pretty(&self.fixture).expect("config serializes");
        let path = dir.join("fixture.json");
        fs::write(&path, fixture).map_err(|e| Error::io(&path, e))?;
        for c in &self.collections {
            let cdir = dir.join(&c.name);
            fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
            write_corpus(cdir.join("corpus.jsonl"), &c.corpus)?;
            write_queries(cdir.join("queries.jsonl"), &c.queries)?;
            write_queries(cdir.join("dev_queries.jsonl"), &c.dev_queries)?;
            for (file, qrels) in [("qrels.txt", &c.qrels), ("dev_qrels.txt", &c.dev_qrels)] {
                let path = cdir.join(file);
                fs::write(&path, qrels.to_trec()).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }

    /// Experiment config (as JSON) over the written data, with models under `model/`.
    pub fn experiment_json(&self, seed: u64) -> serde_json::Value {
        let datasets: Vec<_> = self
            .collections
            .iter()
            .map(|c| {
                json!({
                    "name": c.name,
                    "corpus": format!("{}/corpus.jsonl", c.name),
                    "queries": format!("{}/queries.jsonl", c.name),
                    "qrels": format!("{}/qrels.txt", c.name),
                    "dev": {
                        "queries": format!("{}/dev_queries.jsonl", c.name),
                        "qrels": format!("{}/dev_qrels.txt", c.name),
                    },
                })
            })
            .collect();
        json!({
            "seed": seed,
            "output_dir": "out",
            "model": {
                "pretrained": format!("model/{}", FixtureOutput::PRETRAINED_FILE),
                "domain": format!("model/{}", FixtureOutput::DOMAIN_FILE),
                "ir": format!("model/{}", FixtureOutput::IR_FILE),
                "vocab": format!("model/{}", FixtureOutput::VOCAB_FILE),
            },
            "fusion": { "tune": { "grid_step": 0.1, "metric": "NDCG@10" } },
            "datasets": datasets,
        })
    }
}

/// Generates the world, trains the fixture triple into `dir/model`, and
/// writes `dir/experiment.json`. Returns the config path.
pub fn build_fixture_experiment(seed: u64, size: &WorldSize, dir: &Path) -> Result<PathBuf, Error> {
    let world = SyntheticWorld::generate(seed, size);
    world.write_data(dir)?;
    let trained = train_fixture(seed, &world.fixture)?;
    trained.write_to(dir.join("model"))?;
    let path = dir.join("experiment.json");
    let mut text = serde_json::to_string_pretty(&world.experiment_json(seed)).expect("json");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Documents in the table world; `TABLE_QUERIES` dev and test queries each.
const TABLE_DOCS: usize = 24;
const TABLE_QUERIES: usize = 6;

fn table_grade(query: usize, doc: usize) -> i32 {
    // three relevant documents per query, graded 3, 2, 1
    let offset = (doc + TABLE_DOCS - 3 * query % TABLE_DOCS) % TABLE_DOCS;
    if offset < 3 {
        3 - offset as i32
    } else {
        0
    }
}

/// External-scorer world: every document ties under BM25, so fused rankings
/// follow the score tables alone.
///
/// The table for `alpha` scores a pair as `grade + 15 |alpha - peak| * adv`,
/// where `adv` in `[0, 1)` is largest for the relevant documents' rivals.
/// Ranking quality is therefore perfect at `peak` and degrades on both
/// sides. With `peak = None` every alpha maps to the same table.
/// Tables are written for alpha in `{0.0, 0.1, ..., 1.0}`; returns the config path.
pub fn build_table_experiment(dir: &Path, peak: Option<f64>) -> Result<PathBuf, Error> {
    let tdir = dir.join("tables");
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let corpus: Vec<Document> = (0..TABLE_DOCS)
        .map(|d| Document::new(format!("doc{d:02}"), "", format!("common word{d:02}")))
        .collect();
    write_corpus(tdir.join("corpus.jsonl"), &corpus)?;
    for (split, first) in [("dev_", 0), ("", TABLE_QUERIES)] {
        let ids: Vec<usize> = (first..first + TABLE_QUERIES).collect();
        let queries: Vec<Query> = ids
            .iter()
            .map(|q| Query {
                query_id: format!("q{q:02}"),
                text: "common".into(),
            })
            .collect();
        write_queries(tdir.join(format!("{split}queries.jsonl")), &queries)?;
        let qrels = Qrels::from_triples(ids.iter().flat_map(|&q| {
            (0..TABLE_DOCS).map(move |d| (format!("q{q:02}"), format!("doc{d:02}"), table_grade(q, d)))
        }));
        let path = tdir.join(format!("{split}qrels.txt"));
        fs::write(&path, qrels.to_trec()).map_err(|e| Error::io(&path, e))?;
    }
    let mut tables = serde_json::Map::new();
    for i in 0..=10 {
        let alpha = i as f64 / 10.0;
        let distance = peak.map_or(0.0, |p| (alpha - p).abs());
        let mut scores = ExternalScores::new();
        for q in 0..2 * TABLE_QUERIES {
            for d in 0..TABLE_DOCS {
                let grade = table_grade(q, d) as f64;
                let adv = if grade > 0.0 { 0.0 } else { ((d * 7 + q) % TABLE_DOCS) as f64 / TABLE_DOCS as f64 };
                scores.insert(format!("q{q:02}"), format!("doc{d:02}"), grade + 15.0 * distance * adv);
            }
        }
        let name = if peak.is_some() { format!("alpha_{i:02}.tsv") } else { "flat.tsv".to_string() };
        if i == 0 || peak.is_some() {
            scores.write(tdir.join(&name))?;
        }
        tables.insert(format!("{alpha:.1}"), json!(format!("tables/{name}")));
    }
    let config = json!({
        "seed": 0,
        "output_dir": "out",
        "datasets": [{
            "name": "tables",
            "corpus": "tables/corpus.jsonl",
            "queries": "tables/queries.jsonl",
            "qrels": "tables/qrels.txt",
            "dev": { "queries": "tables/dev_queries.jsonl", "qrels": "tables/dev_qrels.txt" },
            "score_tables": tables,
        }],
    });
    let path = dir.join("experiment.json");
    let mut text = serde_json::to_string_pretty(&config).expect("json");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
