//! Vendor-side retrieval: BM25 pre-filter, cosine similarity against an
//! embedded (optionally HyDE-expanded) query, thresholding and quoting.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::gateway::{render, Gateway, GatewayError, Slots, TemplateId};
use crate::ids::{AgentId, PassageId, QuoteId};
use crate::market::{BulletinBoard, MarketError, Quote, Tender};
use crate::text::tokenize;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no embedding for passage {0}")]
    MissingVector(PassageId),
    #[error("embedding dimension {got} does not match index dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("zero-norm embedding for {0}")]
    ZeroVector(PassageId),
    #[error("vectors line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("embedder returned {got} vectors for {expected} texts")]
    Count { expected: usize, got: usize },
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;
}

/// Signed feature hashing of tokens into a fixed number of buckets, L2
/// normalised. Deterministic and offline; stands in for a neural embedder.
#[derive(Clone, Debug)]
pub struct HashingEmbedder {
    pub dimension: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dimension: 256 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl HashingEmbedder {
    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension.max(1)];
        for token in tokenize(text) {
            let h = fnv1a(token.as_bytes());
            let slot = (h % v.len() as u64) as usize;
            v[slot] += if (h >> 63) == 0 { 1.0 } else { -1.0 };
        }
        if normalize(&mut v).is_none() {
            // no tokens, or perfectly cancelling ones
            v[0] = 1.0;
        }
        v
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Scales `v` to unit length; `None` (and `v` untouched) if it is zero.
pub fn normalize(v: &mut [f64]) -> Option<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(norm)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit-normalised passage vectors of a single dimension.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingIndex {
    vectors: BTreeMap<PassageId, Vec<f64>>,
    dimension: usize,
}

#[derive(Serialize, Deserialize)]
struct VectorRecord {
    id: PassageId,
    vector: Vec<f64>,
}

impl EmbeddingIndex {
    pub fn new(dimension: usize) -> Self {
        Self {
            vectors: BTreeMap::new(),
            dimension,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &PassageId) -> Option<&[f64]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    /// Inserts a vector, normalising it. The first insert fixes the dimension
    /// of an index created with dimension 0.
    pub fn insert(&mut self, id: PassageId, mut vector: Vec<f64>) -> Result<(), RetrievalError> {
        if self.dimension == 0 && self.vectors.is_empty() {
            self.dimension = vector.len();
        }
        if vector.len() != self.dimension {
            return Err(RetrievalError::Dimension {
                expected: self.dimension,
                got: vector.len(),
            });
        }
        normalize(&mut vector).ok_or_else(|| RetrievalError::ZeroVector(id.clone()))?;
        self.vectors.insert(id, vector);
        Ok(())
    }

    /// Embeds every passage body in the corpus.
    pub fn build(corpus: &Corpus, embedder: &dyn Embedder) -> Result<Self, RetrievalError> {
        let texts: Vec<String> = corpus.passages().iter().map(|p| p.content.clone()).collect();
        let vectors = embedder.embed(&texts)?;
        if vectors.len() != texts.len() {
            return Err(RetrievalError::Count {
                expected: texts.len(),
                got: vectors.len(),
            });
        }
        let mut index = Self::new(0);
        for (p, v) in corpus.passages().iter().zip(vectors) {
            index.insert(p.id.clone(), v)?;
        }
        Ok(index)
    }

    /// Parses a line-delimited `{"id": .., "vector": [..]}` file.
    pub fn parse_jsonl(input: &str) -> Result<Self, RetrievalError> {
        let mut index = Self::new(0);
        for (i, line) in input.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: VectorRecord =
                serde_json::from_str(line).map_err(|e| RetrievalError::Malformed {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            index.insert(rec.id, rec.vector)?;
        }
        Ok(index)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (id, v) in &self.vectors {
            serde_json::to_writer(
                &mut out,
                &VectorRecord {
                    id: id.clone(),
                    vector: v.clone(),
                },
            )?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub bm25_k1: f64,
    pub bm25_b: f64,
    /// Stage-one cut: passages kept by BM25 before embedding similarity.
    pub bm25_top: usize,
    pub cosine_threshold: f64,
    pub top_k: usize,
    pub hyde_enabled: bool,
    /// Maximum quotes one vendor may issue for one tender.
    pub quote_limit: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            bm25_k1: 1.5,
            bm25_b: 0.75,
            bm25_top: 100,
            cosine_threshold: 0.3,
            top_k: 5,
            hyde_enabled: true,
            quote_limit: 3,
        }
    }
}

/// Okapi BM25 over corpus-wide statistics, restricted to `ids`. Each distinct
/// query term contributes once; idf is `ln(1 + (N - df + 0.5) / (df + 0.5))`.
pub fn bm25_scores_for(
    query: &str,
    corpus: &Corpus,
    ids: &[PassageId],
    config: &RetrievalConfig,
) -> BTreeMap<PassageId, f64> {
    let stats = corpus.term_statistics();
    let n = stats.n_docs() as f64;
    let avgdl = stats.avg_doc_len();
    let mut terms = tokenize(query);
    terms.sort();
    terms.dedup();
    let idf: Vec<(String, f64)> = terms
        .into_iter()
        .filter_map(|t| {
            let df = f64::from(*stats.doc_freq.get(&t)?);
            Some((t, (1.0 + (n - df + 0.5) / (df + 0.5)).ln()))
        })
        .collect();
    ids.iter()
        .map(|id| {
            let dl = f64::from(stats.doc_len.get(id).copied().unwrap_or(0));
            let tfs = stats.term_freq.get(id);
            let score = idf
                .iter()
                .map(|(term, idf)| {
                    let tf = tfs.and_then(|m| m.get(term)).copied().unwrap_or(0) as f64;
                    if tf == 0.0 {
                        return 0.0;
                    }
                    let norm = if avgdl > 0.0 {
                        1.0 - config.bm25_b + config.bm25_b * dl / avgdl
                    } else {
                        1.0
                    };
                    idf * tf * (config.bm25_k1 + 1.0) / (tf + config.bm25_k1 * norm)
                })
                .sum();
            (id.clone(), score)
        })
        .collect()
}

/// BM25 scores for every passage in the corpus.
pub fn bm25_scores(query: &str, corpus: &Corpus, config: &RetrievalConfig) -> BTreeMap<PassageId, f64> {
    let ids: Vec<PassageId> = corpus.passages().iter().map(|p| p.id.clone()).collect();
    bm25_scores_for(query, corpus, &ids, config)
}

/// The text that gets embedded for the similarity stage: a generated
/// hypothetical answer document, or the query itself when HyDE is off.
pub fn hyde_transform(
    query: &str,
    enabled: bool,
    gateway: &mut Gateway<'_>,
) -> Result<String, GatewayError> {
    if !enabled {
        return Ok(query.to_owned());
    }
    let mut slots = Slots::new();
    slots.insert("question".into(), query.into());
    gateway.complete(render(TemplateId::Hyde, &slots)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub passage_id: PassageId,
    pub score: f64,
}

fn by_score_then_id(a: &(PassageId, f64), b: &(PassageId, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Two-stage retrieval over one vendor's inventory, given the embedded query.
///
/// 1. keep the `bm25_top` passages by BM25 (ties by id);
/// 2. score them by cosine against `query_vector`;
/// 3. drop scores below `cosine_threshold`;
/// 4. return the best `top_k`, descending, ties by passage id.
pub fn retrieve_candidates(
    query: &str,
    query_vector: &[f64],
    vendor: &AgentId,
    corpus: &Corpus,
    index: &EmbeddingIndex,
    config: &RetrievalConfig,
) -> Result<Vec<Candidate>, RetrievalError> {
    let inventory = corpus.inventory(vendor);
    if inventory.is_empty() || config.top_k == 0 {
        return Ok(Vec::new());
    }
    if query_vector.len() != index.dimension() {
        return Err(RetrievalError::Dimension {
            expected: index.dimension(),
            got: query_vector.len(),
        });
    }
    let mut qv = query_vector.to_vec();
    let zero_query = normalize(&mut qv).is_none();

    let mut lexical: Vec<(PassageId, f64)> =
        bm25_scores_for(query, corpus, inventory, config).into_iter().collect();
    lexical.sort_by(by_score_then_id);
    lexical.truncate(config.bm25_top);

    let mut scored = Vec::with_capacity(lexical.len());
    for (id, _) in lexical {
        let v = index
            .get(&id)
            .ok_or_else(|| RetrievalError::MissingVector(id.clone()))?;
        let cosine = if zero_query { 0.0 } else { dot(&qv, v) };
        if cosine >= config.cosine_threshold {
            scored.push((id, cosine));
        }
    }
    scored.sort_by(by_score_then_id);
    scored.truncate(config.top_k);
    Ok(scored
        .into_iter()
        .map(|(passage_id, score)| Candidate { passage_id, score })
        .collect())
}

/// Embeds `embedding_text` and runs [`retrieve_candidates`].
pub fn retrieve_with_embedder(
    query: &str,
    embedding_text: &str,
    vendor: &AgentId,
    corpus: &Corpus,
    index: &EmbeddingIndex,
    embedder: &dyn Embedder,
    config: &RetrievalConfig,
) -> Result<Vec<Candidate>, RetrievalError> {
    if corpus.inventory(vendor).is_empty() {
        return Ok(Vec::new());
    }
    let vector = embed_query(embedding_text, embedder)?;
    retrieve_candidates(query, &vector, vendor, corpus, index, config)
}

pub fn embed_query(text: &str, embedder: &dyn Embedder) -> Result<Vec<f64>, RetrievalError> {
    embedder
        .embed(&[text.to_owned()])?
        .into_iter()
        .next()
        .ok_or(RetrievalError::Count {
            expected: 1,
            got: 0,
        })
}

/// Turns the best `limit` candidates into quotes on the board. Candidates
/// must already be sorted best-first.
pub fn issue_quotes(
    tender: &Tender,
    candidates: &[Candidate],
    corpus: &Corpus,
    board: &mut BulletinBoard,
    limit: usize,
) -> Result<Vec<QuoteId>, MarketError> {
    let mut issued = Vec::new();
    for c in candidates.iter().take(limit) {
        let Some(passage) = corpus.get(&c.passage_id) else {
            continue;
        };
        let id = board.next_quote_id();
        let quote = Quote::new(id.clone(), tender.id.clone(), passage.clone(), c.score);
        if board.submit_quote(quote, limit)? {
            issued.push(id);
        }
    }
    Ok(issued)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusConfig, Passage};
    use crate::gateway::mock::MockScript;
    use crate::market::Ledger;

    fn passage(id: &str, content: &str) -> Passage {
        Passage {
            id: id.into(),
            paper_title: "P".into(),
            section_title: "S".into(),
            content: content.into(),
            price: 5,
            owner_vendor: "v".into(),
            first_author_mean_citations: 0.0,
        }
    }

    /// Hand evaluation of Okapi BM25 for the query "inner product" over
    /// d1 = "inner product search" (3 tokens), d2 = "the inner loop of the
    /// product inner" (7 tokens), d3 = "dot product" (2 tokens).
    /// N = 3, avgdl = 4, df(inner) = 2, df(product) = 3.
    /// idf(inner) = ln(1 + 1.5/2.5) = ln 1.6, idf(product) = ln(1 + 0.5/3.5) = ln(8/7).
    #[test]
    fn bm25_matches_hand_computation() {
        let corpus = Corpus::from_passages(vec![
            passage("d1", "inner product search"),
            passage("d2", "the inner loop of the product inner"),
            passage("d3", "dot product"),
        ])
        .unwrap();
        let cfg = RetrievalConfig::default();
        let scores = bm25_scores("inner product", &corpus, &cfg);
        let (k1, b, avgdl) = (1.5_f64, 0.75_f64, 4.0_f64);
        let (idf_inner, idf_product) = (1.6_f64.ln(), (8.0_f64 / 7.0).ln());
        let term = |tf: f64, dl: f64, idf: f64| idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
        let d1 = term(1.0, 3.0, idf_inner) + term(1.0, 3.0, idf_product);
        let d2 = term(2.0, 7.0, idf_inner) + term(1.0, 7.0, idf_product);
        let d3 = term(1.0, 2.0, idf_product);
        // evaluated independently in floating point
        assert!((d1 - 0.680_039_461_262).abs() < 1e-6, "{d1}");
        assert!((d2 - 0.640_847_927_027).abs() < 1e-6, "{d2}");
        assert!((d3 - 0.172_298_571_128).abs() < 1e-6, "{d3}");
        assert!((scores[&PassageId::new("d1")] - d1).abs() < 1e-12);
        assert!((scores[&PassageId::new("d2")] - d2).abs() < 1e-12);
        assert!((scores[&PassageId::new("d3")] - d3).abs() < 1e-12);
    }

    #[test]
    fn absent_terms_score_zero_and_duplicates_tie() {
        let corpus = Corpus::from_passages(vec![
            passage("a", "same text here"),
            passage("b", "same text here"),
            passage("c", "different words"),
        ])
        .unwrap();
        let cfg = RetrievalConfig::default();
        assert!(bm25_scores("zebra", &corpus, &cfg).values().all(|&s| s == 0.0));
        let s = bm25_scores("same here", &corpus, &cfg);
        assert_eq!(s[&PassageId::new("a")], s[&PassageId::new("b")]);
        assert!(s[&PassageId::new("a")] > 0.0);
    }

    fn toy_index() -> (Corpus, EmbeddingIndex) {
        let corpus = Corpus::from_passages(
            (1..=5).map(|i| passage(&format!("p{i}"), &format!("doc {i}"))).collect(),
        )
        .unwrap();
        let mut index = EmbeddingIndex::new(3);
        let vs = [
            [1.0, 0.0, 0.0],
            [0.8, 0.6, 0.0],
            [0.0, 1.0, 0.0],
            [0.6, 0.0, 0.8],
            [-1.0, 0.0, 0.0],
        ];
        for (i, v) in vs.iter().enumerate() {
            index.insert(format!("p{}", i + 1).into(), v.to_vec()).unwrap();
        }
        (corpus, index)
    }

    #[test]
    fn exhaustive_scan_agrees_on_toy_index() {
        let (corpus, index) = toy_index();
        let q = [1.0, 0.0, 0.0];
        let cfg = RetrievalConfig {
            cosine_threshold: 0.5,
            top_k: 2,
            ..Default::default()
        };
        let got = retrieve_candidates("doc", &q, &"v".into(), &corpus, &index, &cfg).unwrap();
        // cosines: p1 1.0, p2 0.8, p3 0.0, p4 0.6, p5 -1.0
        let ids: Vec<&str> = got.iter().map(|c| c.passage_id.as_str()).collect();
        assert_eq!(ids, ["p1", "p2"]);
        assert!((got[1].score - 0.8).abs() < 1e-12);

        let above_one = RetrievalConfig { cosine_threshold: 1.01, ..cfg.clone() };
        assert!(retrieve_candidates("doc", &q, &"v".into(), &corpus, &index, &above_one).unwrap().is_empty());
        let none = RetrievalConfig { top_k: 0, ..cfg.clone() };
        assert!(retrieve_candidates("doc", &q, &"v".into(), &corpus, &index, &none).unwrap().is_empty());
        assert!(retrieve_candidates("doc", &q, &"nobody".into(), &corpus, &index, &cfg).unwrap().is_empty());
    }

    #[test]
    fn hyde_pass_through_and_plumbing() {
        let script = MockScript::with_default("DOC");
        let mut gw = Gateway::new(&script, "m");
        assert_eq!(hyde_transform("q", false, &mut gw).unwrap(), "q");
        assert_eq!(script.calls(), 0);
        assert_eq!(hyde_transform("q", true, &mut gw).unwrap(), "DOC");
        assert_eq!(gw.transcript()[0].template, TemplateId::Hyde);
    }

    #[test]
    fn issue_quotes_respects_limit_and_prices() {
        let (corpus, _) = toy_index();
        let mut ledger = Ledger::new();
        ledger.open_account("buyer".into(), 100);
        let mut board = BulletinBoard::new();
        let t = board.post_tender(&ledger, &"buyer".into(), "doc", 100, 0).unwrap();
        let tender = board.tender(&t).unwrap().clone();
        let cands: Vec<Candidate> = (1..=5)
            .map(|i| Candidate { passage_id: format!("p{i}").into(), score: 1.0 - i as f64 * 0.1 })
            .collect();
        let ids = issue_quotes(&tender, &cands, &corpus, &mut board, 3).unwrap();
        assert_eq!(ids.len(), 3);
        let quotes = board.quotes(&t);
        let got: Vec<&str> = quotes.iter().map(|q| q.passage.id.as_str()).collect();
        assert_eq!(got, ["p1", "p2", "p3"]);
        assert!(quotes.iter().all(|q| q.price == corpus.get(&q.passage.id).unwrap().price));
        assert!(issue_quotes(&tender, &[], &corpus, &mut board, 3).unwrap().is_empty());
    }

    #[test]
    fn vectors_file_round_trip_normalises() {
        let input = "{\"id\":\"a\",\"vector\":[3.0,4.0]}\n{\"id\":\"b\",\"vector\":[0.0,2.0]}\n";
        let index = EmbeddingIndex::parse_jsonl(input).unwrap();
        assert_eq!(index.get(&"a".into()).unwrap(), &[0.6, 0.8]);
        let mut buf = Vec::new();
        index.write_jsonl(&mut buf).unwrap();
        assert_eq!(EmbeddingIndex::parse_jsonl(std::str::from_utf8(&buf).unwrap()).unwrap(), index);
        assert!(matches!(
            EmbeddingIndex::parse_jsonl("{\"id\":\"a\",\"vector\":[1.0]}\n{\"id\":\"b\",\"vector\":[1.0,0.0]}"),
            Err(RetrievalError::Dimension { .. })
        ));
        assert!(EmbeddingIndex::parse_jsonl("{\"id\":\"z\",\"vector\":[0.0]}").is_err());
    }

    #[test]
    fn hashing_embedder_is_unit_norm() {
        let e = HashingEmbedder::default();
        for text in ["", "a b c", "inner product search over neural embeddings"] {
            let v = e.embed_one(text);
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        let _ = CorpusConfig::default();
    }
}
