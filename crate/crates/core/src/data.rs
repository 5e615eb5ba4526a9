//! Training pairs, document collections, the synthetic topic generator and
//! mismatched-pair noise injection.
//!
//! Pairs file (JSONL, one object per line):
//! `{"query_id": .., "query": .., "doc_id": .., "doc": .., "truth_clean": bool?, "topic": int?}`.
//! Collection file (JSONL): `{"doc_id": .., "doc": ..}`.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NpcError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPair {
    pub pair_id: u64,
    pub query_id: String,
    pub query_text: String,
    pub doc_id: String,
    pub doc_text: String,
    /// Ground truth, known only for synthetic or injected data.
    pub truth_clean: Option<bool>,
    /// Topic of the query, known only for synthetic data.
    pub topic: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PairRecord {
    query_id: String,
    query: String,
    doc_id: String,
    doc: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth_clean: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    topic: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DocRecord {
    doc_id: String,
    doc: String,
}

/// `doc_id -> text`, ordered by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocumentCollection {
    docs: BTreeMap<String, String>,
}

impl DocumentCollection {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a document; a conflicting text for an existing id is an error.
    pub fn insert(&mut self, doc_id: &str, text: &str) -> Result<()> {
        match self.docs.get(doc_id) {
            Some(existing) if existing != text => Err(NpcError::Integrity(format!(
                "document {doc_id:?} has conflicting texts"
            ))),
            Some(_) => Ok(()),
            None => {
                self.docs.insert(doc_id.to_string(), text.to_string());
                Ok(())
            }
        }
    }

    pub fn get(&self, doc_id: &str) -> Option<&str> {
        self.docs.get(doc_id).map(String::as_str)
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.docs.contains_key(doc_id)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Documents in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.docs.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub pairs: Vec<TrainingPair>,
    pub collection: DocumentCollection,
}

impl Dataset {
    /// Checks id uniqueness and that every referenced document exists with
    /// the same text.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.pairs {
            if !seen.insert(p.query_id.as_str()) {
                return Err(NpcError::Integrity(format!(
                    "duplicate query_id {:?}",
                    p.query_id
                )));
            }
            match self.collection.get(&p.doc_id) {
                None => {
                    return Err(NpcError::Integrity(format!(
                        "pair {:?} references unknown doc_id {:?}",
                        p.query_id, p.doc_id
                    )))
                }
                Some(text) if text != p.doc_text => {
                    return Err(NpcError::Integrity(format!(
                        "pair {:?} disagrees with the collection text of {:?}",
                        p.query_id, p.doc_id
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Gold document per query id.
    pub fn gold(&self) -> BTreeMap<String, String> {
        self.pairs
            .iter()
            .map(|p| (p.query_id.clone(), p.doc_id.clone()))
            .collect()
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| NpcError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

/// Loads a pairs file; the collection is the set of documents it references.
pub fn load_pairs(path: &Path) -> Result<Dataset> {
    load_dataset(path, None)
}

/// Loads a pairs file and, optionally, a collection file every pair must
/// resolve against.
pub fn load_dataset(pairs_path: &Path, collection_path: Option<&Path>) -> Result<Dataset> {
    let records: Vec<(usize, PairRecord)> = read_jsonl(pairs_path)?;
    let mut collection = match collection_path {
        Some(p) => load_collection(p)?,
        None => DocumentCollection::new(),
    };
    let mut pairs = Vec::with_capacity(records.len());
    for (pair_id, (line, r)) in records.into_iter().enumerate() {
        if collection_path.is_some() {
            match collection.get(&r.doc_id) {
                None => {
                    return Err(NpcError::Integrity(format!(
                        "line {line}: dangling doc_id {:?}",
                        r.doc_id
                    )))
                }
                Some(text) if text != r.doc => {
                    return Err(NpcError::Integrity(format!(
                        "line {line}: text of {:?} disagrees with the collection",
                        r.doc_id
                    )))
                }
                Some(_) => {}
            }
        } else {
            collection
                .insert(&r.doc_id, &r.doc)
                .map_err(|e| NpcError::Integrity(format!("line {line}: {e}")))?;
        }
        pairs.push(TrainingPair {
            pair_id: pair_id as u64,
            query_id: r.query_id,
            query_text: r.query,
            doc_id: r.doc_id,
            doc_text: r.doc,
            truth_clean: r.truth_clean,
            topic: r.topic,
        });
    }
    let ds = Dataset { pairs, collection };
    ds.validate()?;
    Ok(ds)
}

pub fn load_collection(path: &Path) -> Result<DocumentCollection> {
    let mut c = DocumentCollection::new();
    for (line, r) in read_jsonl::<DocRecord>(path)? {
        c.insert(&r.doc_id, &r.doc)
            .map_err(|e| NpcError::Integrity(format!("line {line}: {e}")))?;
    }
    Ok(c)
}

pub fn write_pairs(path: &Path, pairs: &[TrainingPair]) -> Result<()> {
    let mut buf = Vec::new();
    for p in pairs {
        let rec = PairRecord {
            query_id: p.query_id.clone(),
            query: p.query_text.clone(),
            doc_id: p.doc_id.clone(),
            doc: p.doc_text.clone(),
            truth_clean: p.truth_clean,
            topic: p.topic,
        };
        serde_json::to_writer(&mut buf, &rec)?;
        buf.push(b'\n');
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn write_collection(path: &Path, collection: &DocumentCollection) -> Result<()> {
    let mut buf = Vec::new();
    for (id, text) in collection.iter() {
        serde_json::to_writer(
            &mut buf,
            &DocRecord {
                doc_id: id.into(),
                doc: text.into(),
            },
        )?;
        buf.push(b'\n');
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Share of each synthetic text drawn from the background block.
pub const BACKGROUND_RATE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_topics: usize,
    pub pairs_per_topic: usize,
    pub vocab_size: usize,
    pub tokens_per_text: usize,
    /// Pair-specific tokens shared by a query and its document.
    pub key_tokens: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(
        num_topics: usize,
        pairs_per_topic: usize,
        vocab_size: usize,
        tokens_per_text: usize,
        seed: u64,
    ) -> Self {
        SyntheticConfig {
            num_topics,
            pairs_per_topic,
            vocab_size,
            tokens_per_text,
            key_tokens: (tokens_per_text / 4).max(1),
            seed,
        }
    }
}

/// Token-id partition of a synthetic vocabulary: `num_topics` disjoint topic
/// blocks followed by one background block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticLayout {
    pub num_topics: usize,
    pub block_size: usize,
    pub background_start: usize,
    pub vocab_size: usize,
}

impl SyntheticLayout {
    pub fn new(num_topics: usize, vocab_size: usize) -> Result<Self> {
        if num_topics == 0 || vocab_size < 2 * num_topics {
            return Err(NpcError::config(format!(
                "need num_topics >= 1 and vocab_size >= 2 * num_topics (got {num_topics} topics, vocab {vocab_size})"
            )));
        }
        let background = ((vocab_size as f64 * BACKGROUND_RATE).round() as usize)
            .clamp(1, vocab_size - num_topics);
        let block_size = (vocab_size - background) / num_topics;
        Ok(SyntheticLayout {
            num_topics,
            block_size,
            background_start: num_topics * block_size,
            vocab_size,
        })
    }

    pub fn topic_block(&self, topic: usize) -> std::ops::Range<usize> {
        topic * self.block_size..(topic + 1) * self.block_size
    }

    pub fn topic_of_token(&self, token: usize) -> Option<usize> {
        (token < self.background_start).then(|| token / self.block_size)
    }

    pub fn word(token: usize) -> String {
        format!("w{token}")
    }

    pub fn parse_word(word: &str) -> Option<usize> {
        word.strip_prefix('w')?.parse().ok()
    }
}

/// Topic-structured pairs: each topic owns a token block; a query and its
/// document share a few pair-specific key tokens from that block, and the
/// remaining tokens are drawn from the block or (at [`BACKGROUND_RATE`]) from
/// the background block.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    let layout = SyntheticLayout::new(cfg.num_topics, cfg.vocab_size)?;
    if cfg.tokens_per_text == 0 {
        return Err(NpcError::config("tokens_per_text must be >= 1"));
    }
    let keys = cfg
        .key_tokens
        .min(layout.block_size)
        .min(cfg.tokens_per_text);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bg = layout.background_start..layout.vocab_size;

    let mut pairs = Vec::with_capacity(cfg.num_topics * cfg.pairs_per_topic);
    let mut collection = DocumentCollection::new();
    for topic in 0..cfg.num_topics {
        let block = layout.topic_block(topic);
        for k in 0..cfg.pairs_per_topic {
            let key: Vec<usize> = index::sample(&mut rng, layout.block_size, keys)
                .into_iter()
                .map(|i| block.start + i)
                .collect();
            let text = |rng: &mut ChaCha8Rng| {
                let mut toks = key.clone();
                while toks.len() < cfg.tokens_per_text {
                    let t = if rng.random_bool(BACKGROUND_RATE) {
                        rng.random_range(bg.clone())
                    } else {
                        rng.random_range(block.clone())
                    };
                    toks.push(t);
                }
                toks.shuffle(rng);
                toks.iter()
                    .map(|&t| SyntheticLayout::word(t))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let query = text(&mut rng);
            let doc = text(&mut rng);
            let query_id = format!("s{}-t{topic:03}-q{k:05}", cfg.seed);
            let doc_id = format!("s{}-t{topic:03}-d{k:05}", cfg.seed);
            collection.insert(&doc_id, &doc)?;
            pairs.push(TrainingPair {
                pair_id: pairs.len() as u64,
                query_id,
                query_text: query,
                doc_id,
                doc_text: doc,
                truth_clean: Some(true),
                topic: Some(topic),
            });
        }
    }
    Ok(Dataset { pairs, collection })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub ratio: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(NpcError::config(format!(
                "noise ratio must lie in [0, 1], got {}",
                self.ratio
            )));
        }
        Ok(())
    }

    pub fn corrupted_count(&self, n: usize) -> usize {
        // Guard against 0.29 * 100 = 28.999999999999996.
        ((self.ratio * n as f64) + 1e-9).floor() as usize
    }
}

/// Replaces the positive document of `floor(ratio * N)` uniformly chosen
/// pairs with the document of another pair (drawn with replacement). When
/// topics are known, replacements come from a different topic. The
/// collection is left untouched.
pub fn inject_noise(pairs: &[TrainingPair], spec: &NoiseSpec) -> Result<Vec<TrainingPair>> {
    spec.validate()?;
    if pairs.is_empty() {
        return Err(NpcError::contract(
            "cannot inject noise into an empty dataset",
        ));
    }
    let n = pairs.len();
    let count = spec.corrupted_count(n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chosen: Vec<usize> = index::sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();

    let mut out: Vec<TrainingPair> = pairs
        .iter()
        .cloned()
        .map(|mut p| {
            p.truth_clean = Some(true);
            p
        })
        .collect();
    for &i in &chosen {
        let original = &pairs[i];
        let unrelated = |p: &TrainingPair| {
            p.doc_id != original.doc_id
                && match (p.topic, original.topic) {
                    (Some(a), Some(b)) => a != b,
                    _ => true,
                }
        };
        let pool: Vec<usize> = (0..n).filter(|&j| unrelated(&pairs[j])).collect();
        if pool.is_empty() {
            return Err(NpcError::Injection(format!(
                "no unrelated replacement document for pair {:?}",
                original.query_id
            )));
        }
        let donor = &pairs[pool[rng.random_range(0..pool.len())]];
        out[i].doc_id = donor.doc_id.clone();
        out[i].doc_text = donor.doc_text.clone();
        out[i].truth_clean = Some(false);
    }
    Ok(out)
}

/// Epoch-seeded shuffle of `0..n`, cut into chunks of `batch_size`; a tail
/// shorter than 2 is merged into the previous chunk.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(NpcError::config(format!(
            "batch_size must be >= 2, got {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(tail);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        p
    }

    #[test]
    fn load_examples() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write_file(dir.path(), "empty.jsonl", "");
        let ds = load_pairs(&empty).unwrap();
        assert!(ds.pairs.is_empty() && ds.collection.is_empty());

        let one = write_file(
            dir.path(),
            "one.jsonl",
            "{\"query_id\":\"q1\",\"query\":\"what\",\"doc_id\":\"d1\",\"doc\":\"that\"}\n",
        );
        let ds = load_pairs(&one).unwrap();
        assert_eq!(ds.pairs.len(), 1);
        assert_eq!(ds.collection.get("d1"), Some("that"));
        assert_eq!(ds.pairs[0].truth_clean, None);

        let bad = write_file(
            dir.path(),
            "bad.jsonl",
            "{\"query_id\":\"q1\",\"query\":\"a\",\"doc_id\":\"d1\",\"doc\":\"b\"}\n{\"query_id\":\"q2\",\"query\":\"a\",\"doc_id\":\"d2\"}\n",
        );
        match load_pairs(&bad) {
            Err(NpcError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_doc_id() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = write_file(
            dir.path(),
            "p.jsonl",
            "{\"query_id\":\"q1\",\"query\":\"a\",\"doc_id\":\"d9\",\"doc\":\"b\"}\n",
        );
        let coll = write_file(dir.path(), "c.jsonl", "{\"doc_id\":\"d1\",\"doc\":\"b\"}\n");
        assert!(matches!(
            load_dataset(&pairs, Some(&coll)),
            Err(NpcError::Integrity(_))
        ));
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&SyntheticConfig::new(3, 4, 30, 6, 1)).unwrap();
        let p = dir.path().join("pairs.jsonl");
        let c = dir.path().join("coll.jsonl");
        write_pairs(&p, &ds.pairs).unwrap();
        write_collection(&c, &ds.collection).unwrap();
        let back = load_dataset(&p, Some(&c)).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn synthetic_counts_and_bounds() {
        let ds = generate_synthetic(&SyntheticConfig::new(20, 100, 500, 12, 7)).unwrap();
        assert_eq!(ds.pairs.len(), 2000);
        assert_eq!(ds.collection.len(), 2000);
        ds.validate().unwrap();
        assert!(generate_synthetic(&SyntheticConfig::new(10, 1, 19, 5, 0)).is_err());
        let single = generate_synthetic(&SyntheticConfig::new(1, 5, 10, 4, 0)).unwrap();
        assert!(single.pairs.iter().all(|p| p.topic == Some(0)));
    }

    #[test]
    fn synthetic_topics_share_no_block_tokens() {
        let cfg = SyntheticConfig::new(8, 10, 120, 10, 3);
        let layout = SyntheticLayout::new(cfg.num_topics, cfg.vocab_size).unwrap();
        let ds = generate_synthetic(&cfg).unwrap();
        let block_tokens = |p: &TrainingPair| -> HashSet<usize> {
            format!("{} {}", p.query_text, p.doc_text)
                .split_whitespace()
                .filter_map(SyntheticLayout::parse_word)
                .filter(|&t| t < layout.background_start)
                .collect()
        };
        for a in &ds.pairs {
            let ta = block_tokens(a);
            assert!(ta.iter().all(|&t| layout.topic_of_token(t) == a.topic));
            for b in &ds.pairs {
                if a.topic != b.topic {
                    assert!(ta.is_disjoint(&block_tokens(b)));
                }
            }
        }
    }

    #[test]
    fn noise_examples() {
        let ds = generate_synthetic(&SyntheticConfig::new(5, 20, 60, 6, 2)).unwrap();
        let clean = inject_noise(
            &ds.pairs,
            &NoiseSpec {
                ratio: 0.0,
                seed: 1,
            },
        )
        .unwrap();
        assert!(clean.iter().all(|p| p.truth_clean == Some(true)));
        assert!(clean
            .iter()
            .zip(&ds.pairs)
            .all(|(a, b)| a.doc_id == b.doc_id));

        let noisy = inject_noise(
            &ds.pairs,
            &NoiseSpec {
                ratio: 0.5,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(
            noisy
                .iter()
                .filter(|p| p.truth_clean == Some(false))
                .count(),
            50
        );
        for (a, b) in noisy.iter().zip(&ds.pairs) {
            if a.truth_clean == Some(false) {
                assert_ne!(a.doc_id, b.doc_id);
                let donor_topic = ds
                    .pairs
                    .iter()
                    .find(|p| p.doc_id == a.doc_id)
                    .unwrap()
                    .topic;
                assert_ne!(donor_topic, a.topic);
            } else {
                assert_eq!(
                    a,
                    &TrainingPair {
                        truth_clean: Some(true),
                        ..b.clone()
                    }
                );
            }
        }
        let again = inject_noise(
            &ds.pairs,
            &NoiseSpec {
                ratio: 0.5,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(noisy, again);
    }

    #[test]
    fn noise_errors() {
        let ds = generate_synthetic(&SyntheticConfig::new(1, 1, 4, 2, 0)).unwrap();
        assert!(matches!(
            inject_noise(
                &ds.pairs,
                &NoiseSpec {
                    ratio: 1.0,
                    seed: 0
                }
            ),
            Err(NpcError::Injection(_))
        ));
        assert!(matches!(
            inject_noise(
                &ds.pairs,
                &NoiseSpec {
                    ratio: 1.2,
                    seed: 0
                }
            ),
            Err(NpcError::Config(_))
        ));
        assert!(inject_noise(
            &[],
            &NoiseSpec {
                ratio: 0.1,
                seed: 0
            }
        )
        .is_err());
        assert_eq!(
            NoiseSpec {
                ratio: 0.29,
                seed: 0
            }
            .corrupted_count(100),
            29
        );
    }

    #[test]
    fn batch_examples() {
        let b = batches(10, 5, 3, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 5]);
        let b = batches(11, 5, 3, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 6]);
        assert_eq!(batches(11, 5, 3, 4).unwrap(), batches(11, 5, 3, 4).unwrap());
        assert_ne!(batches(50, 5, 3, 4).unwrap(), batches(50, 5, 3, 5).unwrap());
        assert!(matches!(batches(10, 1, 0, 0), Err(NpcError::Config(_))));
        let mut all: Vec<usize> = batches(37, 8, 9, 2).unwrap().concat();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
    }
}
