//! Exact brute-force retrieval, Recall@k / MRR, and perplexity histogram
//! export.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DocumentCollection;
use crate::detection::{FlagSet, PerplexityRecord};
use crate::encoder::{encode_forward, encoded_score, tokenize, EncoderParams, Side, Vocabulary};
use crate::error::{NpcError, Result};
use crate::numerics::SimilarityKind;

/// Ranked `(doc_id, score)` lists per query id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalRun {
    pub results: BTreeMap<String, Vec<(String, f64)>>,
}

impl RetrievalRun {
    /// 1-based rank of `doc_id` for `query_id`, if retrieved.
    pub fn rank_of(&self, query_id: &str, doc_id: &str) -> Option<usize> {
        self.results
            .get(query_id)?
            .iter()
            .position(|(d, _)| d == doc_id)
            .map(|p| p + 1)
    }
}

/// Sorts by score descending, then doc id ascending.
pub fn rank_scores(mut scored: Vec<(String, f64)>, k: usize) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Exact top-`k` documents for each `(query_id, text)`.
pub fn retrieve(
    params: &EncoderParams,
    vocab: &Vocabulary,
    queries: &[(String, String)],
    collection: &DocumentCollection,
    k: usize,
    kind: SimilarityKind,
) -> Result<RetrievalRun> {
    if k > collection.len() {
        return Err(NpcError::config(format!(
            "top-k {k} exceeds the collection size {}",
            collection.len()
        )));
    }
    let normalize = kind == SimilarityKind::Cosine;
    let docs: Vec<(&str, &str)> = collection.iter().collect();
    let doc_vecs = docs
        .par_iter()
        .map(|(_, text)| {
            encode_forward(&tokenize(text, vocab), params, Side::Doc, normalize).map(|e| e.out)
        })
        .collect::<Result<Vec<_>>>()?;
    let ranked = queries
        .par_iter()
        .map(|(qid, text)| {
            let q = encode_forward(&tokenize(text, vocab), params, Side::Query, normalize)?;
            let scored = docs
                .iter()
                .zip(&doc_vecs)
                .map(|((id, _), v)| (id.to_string(), encoded_score(&q.out, v)))
                .collect();
            Ok((qid.clone(), rank_scores(scored, k)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalRun {
        results: ranked.into_iter().collect(),
    })
}

fn gold_rank(
    run: &RetrievalRun,
    gold: &BTreeMap<String, String>,
    qid: &str,
) -> Result<Option<usize>> {
    let g = gold
        .get(qid)
        .ok_or_else(|| NpcError::contract(format!("no gold document for query {qid:?}")))?;
    Ok(run.rank_of(qid, g))
}

/// Fraction of queries whose gold document is in the top `k`.
pub fn recall_at_k(run: &RetrievalRun, gold: &BTreeMap<String, String>, k: usize) -> Result<f64> {
    if run.results.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for qid in run.results.keys() {
        if gold_rank(run, gold, qid)?.is_some_and(|r| r <= k) {
            hits += 1;
        }
    }
    Ok(hits as f64 / run.results.len() as f64)
}

/// Mean reciprocal rank of the single gold document (0 when not retrieved).
pub fn mrr(run: &RetrievalRun, gold: &BTreeMap<String, String>) -> Result<f64> {
    if run.results.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for qid in run.results.keys() {
        if let Some(r) = gold_rank(run, gold, qid)? {
            total += 1.0 / r as f64;
        }
    }
    Ok(total / run.results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub queries: usize,
    pub recall: Vec<RecallAt>,
    pub mrr: f64,
}

impl MetricsReport {
    pub fn compute(
        run: &RetrievalRun,
        gold: &BTreeMap<String, String>,
        ks: &[usize],
    ) -> Result<Self> {
        Ok(MetricsReport {
            queries: run.results.len(),
            recall: ks
                .iter()
                .map(|&k| recall_at_k(run, gold, k).map(|value| RecallAt { k, value }))
                .collect::<Result<_>>()?,
            mrr: mrr(run, gold)?,
        })
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.k == k).map(|r| r.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub pair_id: u64,
    pub ppl: f64,
    pub truth_clean: Option<bool>,
    pub flag: Option<bool>,
}

/// CSV `pair_id,ppl,truth_clean,flag`; unknown values are empty fields.
pub fn export_ppl_histogram(
    records: &[PerplexityRecord],
    flags: Option<&FlagSet>,
    truth: &BTreeMap<u64, bool>,
    path: &Path,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(["pair_id", "ppl", "truth_clean", "flag"])?;
    for r in records {
        let row = HistogramRow {
            pair_id: r.pair_id,
            ppl: r.ppl,
            truth_clean: truth.get(&r.pair_id).copied(),
            flag: flags.and_then(|f| f.is_clean(r.pair_id)),
        };
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ppl_histogram(path: &Path) -> Result<Vec<HistogramRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(NpcError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_of(lists: &[(&str, &[&str])]) -> RetrievalRun {
        RetrievalRun {
            results: lists
                .iter()
                .map(|(q, docs)| {
                    let n = docs.len();
                    (
                        q.to_string(),
                        docs.iter()
                            .enumerate()
                            .map(|(i, d)| (d.to_string(), (n - i) as f64))
                            .collect(),
                    )
                })
                .collect(),
        }
    }

    fn gold_of(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(q, d)| (q.to_string(), d.to_string()))
            .collect()
    }

    #[test]
    fn recall_and_mrr_hand_counts() {
        let filler: Vec<String> = (0..12).map(|i| format!("x{i}")).collect();
        let mk = |gold_rank: usize| -> Vec<&str> {
            let mut v: Vec<&str> = filler.iter().map(String::as_str).collect();
            v[gold_rank - 1] = "g";
            v
        };
        let (a, b, c, d) = (mk(1), mk(2), mk(3), mk(11));
        let run = run_of(&[("a", &a), ("b", &b), ("c", &c), ("d", &d)]);
        let gold = gold_of(&[("a", "g"), ("b", "g"), ("c", "g"), ("d", "g")]);
        assert_eq!(recall_at_k(&run, &gold, 3).unwrap(), 0.75);
        assert_eq!(recall_at_k(&run, &gold, 10).unwrap(), 0.75);
        assert_eq!(recall_at_k(&run, &gold, 11).unwrap(), 1.0);
        let want = (1.0 + 0.5 + 1.0 / 3.0 + 1.0 / 11.0) / 4.0;
        assert!((mrr(&run, &gold).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn metric_examples() {
        let run = run_of(&[("a", &["g", "x"]), ("b", &["x", "g"])]);
        let gold = gold_of(&[("a", "g"), ("b", "g")]);
        assert_eq!(mrr(&run, &gold).unwrap(), 0.75);
        let perfect = run_of(&[("a", &["g"]), ("b", &["g"])]);
        assert_eq!(mrr(&perfect, &gold).unwrap(), 1.0);
        assert_eq!(recall_at_k(&perfect, &gold, 1).unwrap(), 1.0);
        let never = run_of(&[("a", &["x", "y"]), ("b", &["y"])]);
        assert_eq!(recall_at_k(&never, &gold, 2).unwrap(), 0.0);
        assert_eq!(mrr(&never, &gold).unwrap(), 0.0);
        // One absent gold: (1/2 + 0) / 2.
        let mixed = run_of(&[("a", &["x", "g"]), ("b", &["x", "y"])]);
        assert_eq!(mrr(&mixed, &gold).unwrap(), 0.25);
        assert!(recall_at_k(&run, &gold_of(&[("a", "g")]), 1).is_err());
    }

    #[test]
    fn ties_break_by_doc_id() {
        let ranked = rank_scores(
            vec![("b".into(), 1.0), ("a".into(), 1.0), ("c".into(), 2.0)],
            3,
        );
        let ids: Vec<&str> = ranked.iter().map(|(d, _)| d.as_str()).collect();
        assert_eq!(ids, vec!["c", "a", "b"]);
    }

    #[test]
    fn single_doc_collection() {
        let vocab = Vocabulary::build(["alpha beta", "gamma"], 1);
        let params = EncoderParams::init_uniform(vocab.len(), 4, true, 0.3, 2);
        let mut c = DocumentCollection::new();
        c.insert("only", "gamma").unwrap();
        let queries = vec![
            ("q1".to_string(), "alpha".to_string()),
            ("q2".to_string(), "beta".to_string()),
        ];
        let run = retrieve(&params, &vocab, &queries, &c, 1, SimilarityKind::Cosine).unwrap();
        assert!(run.results.values().all(|l| l[0].0 == "only"));
        assert!(retrieve(&params, &vocab, &queries, &c, 2, SimilarityKind::Cosine).is_err());
    }

    #[test]
    fn histogram_export() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        export_ppl_histogram(&[], None, &BTreeMap::new(), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);

        let records: Vec<PerplexityRecord> = (0..5)
            .map(|i| PerplexityRecord {
                pair_id: i,
                ppl: 0.1 + i as f64 / 3.0,
            })
            .collect();
        let truth: BTreeMap<u64, bool> = (0..5).map(|i| (i, i % 2 == 0)).collect();
        export_ppl_histogram(&records, None, &truth, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 6);
        let back = read_ppl_histogram(&path).unwrap();
        for (row, rec) in back.iter().zip(&records) {
            assert_eq!(row.pair_id, rec.pair_id);
            assert_eq!(row.ppl, rec.ppl);
            assert_eq!(row.truth_clean, truth.get(&rec.pair_id).copied());
            assert_eq!(row.flag, None);
        }
    }
}
