//! Passage corpus, query set and the citation pricing heuristic.
//!
//! Passages and queries are stored as line-delimited JSON, one record per
//! line. A passage record looks like
//!
//! ```json
//! {"id":"p1","paper_title":"...","section_title":"...","content":"...",
//!  "first_author_mean_citations":850.0,"vendor":"mit","price":7}
//! ```
//!
//! `vendor` and `price` are optional. Without a vendor the passage goes to
//! [`CorpusConfig::default_vendor`]; without a price it is priced by
//! [`price_passage`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{AgentId, PassageId};
use crate::text::tokenize;
use crate::Credits;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate passage id {0}")]
    DuplicatePassage(PassageId),
    #[error("duplicate query id {0}")]
    DuplicateQuery(String),
    #[error("empty corpus")]
    Empty,
    #[error("query {query_id} references missing gold passage {passage_id}")]
    DanglingGold {
        query_id: String,
        passage_id: PassageId,
    },
}

/// Citation-to-price mapping: `clamp(round(scale * citations), min_price, max_price)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PricingConfig {
    pub scale: f64,
    pub min_price: Credits,
    pub max_price: Credits,
}

impl Default for PricingConfig {
    fn default() -> Self {
        Self {
            scale: 0.01,
            min_price: 1,
            max_price: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub pricing: PricingConfig,
    pub default_vendor: AgentId,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            pricing: PricingConfig::default(),
            default_vendor: AgentId::new("vendor"),
        }
    }
}

/// Prices a passage from the mean citation count of its first author.
pub fn price_passage(mean_citations: f64, config: &PricingConfig) -> Credits {
    let (lo, hi) = (config.min_price, config.max_price.max(config.min_price));
    if mean_citations.is_nan() {
        return lo;
    }
    let raw = (config.scale * mean_citations).round();
    if raw <= lo as f64 {
        lo
    } else if raw >= hi as f64 {
        hi
    } else {
        raw as Credits
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: PassageId,
    pub paper_title: String,
    pub section_title: String,
    pub content: String,
    pub price: Credits,
    pub owner_vendor: AgentId,
    pub first_author_mean_citations: f64,
}

impl Passage {
    /// Copy of this passage listed at another price.
    pub fn with_price(&self, price: Credits) -> Self {
        Self {
            price,
            ..self.clone()
        }
    }

    /// Paper and section title, the only thing a buyer sees without inspection.
    pub fn metadata_block(&self) -> String {
        format!(
            "Paper title: {}; Section title: {}",
            self.paper_title, self.section_title
        )
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct PassageRecord {
    id: PassageId,
    paper_title: String,
    section_title: String,
    content: String,
    #[serde(default, alias = "mean_citations")]
    first_author_mean_citations: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vendor: Option<AgentId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    price: Option<Credits>,
}

/// Okapi BM25 inputs: per-document term frequencies and lengths, and
/// per-term document frequencies.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TermStatistics {
    pub doc_freq: BTreeMap<String, u32>,
    pub doc_len: BTreeMap<PassageId, u32>,
    pub term_freq: BTreeMap<PassageId, BTreeMap<String, u32>>,
}

impl TermStatistics {
    pub fn build(passages: &[Passage]) -> Self {
        let mut stats = Self::default();
        for p in passages {
            let tokens = tokenize(&p.content);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for term in tf.keys() {
                *stats.doc_freq.entry(term.clone()).or_default() += 1;
            }
            stats.doc_len.insert(p.id.clone(), tokens.len() as u32);
            stats.term_freq.insert(p.id.clone(), tf);
        }
        stats
    }

    pub fn n_docs(&self) -> usize {
        self.doc_len.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        if self.doc_len.is_empty() {
            return 0.0;
        }
        self.doc_len.values().map(|&l| l as f64).sum::<f64>() / self.doc_len.len() as f64
    }
}

/// Immutable after construction; share it by reference across runs.
#[derive(Clone, Debug)]
pub struct Corpus {
    passages: Vec<Passage>,
    by_id: BTreeMap<PassageId, usize>,
    term_statistics: TermStatistics,
    vendor_assignment: BTreeMap<AgentId, Vec<PassageId>>,
}

impl Corpus {
    /// Builds a corpus from already-validated passages.
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self, CorpusError> {
        if passages.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut by_id = BTreeMap::new();
        let mut vendor_assignment: BTreeMap<AgentId, Vec<PassageId>> = BTreeMap::new();
        for (i, p) in passages.iter().enumerate() {
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicatePassage(p.id.clone()));
            }
            vendor_assignment
                .entry(p.owner_vendor.clone())
                .or_default()
                .push(p.id.clone());
        }
        for ids in vendor_assignment.values_mut() {
            ids.sort();
        }
        let term_statistics = TermStatistics::build(&passages);
        Ok(Self {
            passages,
            by_id,
            term_statistics,
            vendor_assignment,
        })
    }

    /// Parses the line-delimited passages format. Blank lines are skipped.
    pub fn parse(input: &str, config: &CorpusConfig) -> Result<Self, CorpusError> {
        let mut passages = Vec::new();
        let mut seen = BTreeSet::new();
        for (idx, line) in input.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PassageRecord =
                serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
                    line: line_no,
                    message: e.to_string(),
                })?;
            let malformed = |message: &str| CorpusError::Malformed {
                line: line_no,
                message: message.to_owned(),
            };
            if rec.content.trim().is_empty() {
                return Err(malformed("empty content"));
            }
            if !(rec.first_author_mean_citations >= 0.0) {
                return Err(malformed("mean citations must be a non-negative number"));
            }
            if !seen.insert(rec.id.clone()) {
                return Err(CorpusError::DuplicatePassage(rec.id));
            }
            let price = match rec.price {
                Some(p) if p < config.pricing.min_price => {
                    return Err(malformed(&format!(
                        "price {p} below minimum {}",
                        config.pricing.min_price
                    )))
                }
                Some(p) => p,
                None => price_passage(rec.first_author_mean_citations, &config.pricing),
            };
            passages.push(Passage {
                id: rec.id,
                paper_title: rec.paper_title,
                section_title: rec.section_title,
                content: rec.content,
                price,
                owner_vendor: rec.vendor.unwrap_or_else(|| config.default_vendor.clone()),
                first_author_mean_citations: rec.first_author_mean_citations,
            });
        }
        Self::from_passages(passages)
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: &PassageId) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn term_statistics(&self) -> &TermStatistics {
        &self.term_statistics
    }

    pub fn vendor_assignment(&self) -> &BTreeMap<AgentId, Vec<PassageId>> {
        &self.vendor_assignment
    }

    /// Vendors in sorted id order, which is also the quoting order.
    pub fn vendors(&self) -> impl Iterator<Item = &AgentId> {
        self.vendor_assignment.keys()
    }

    pub fn inventory(&self, vendor: &AgentId) -> &[PassageId] {
        self.vendor_assignment
            .get(vendor)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Writes the corpus back in the passages format with explicit prices.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for p in &self.passages {
            let rec = PassageRecord {
                id: p.id.clone(),
                paper_title: p.paper_title.clone(),
                section_title: p.section_title.clone(),
                content: p.content.clone(),
                first_author_mean_citations: p.first_author_mean_citations,
                vendor: Some(p.owner_vendor.clone()),
                price: Some(p.price),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn load_corpus(path: &Path, config: &CorpusConfig) -> Result<Corpus, CorpusError> {
    let input = read(path)?;
    Corpus::parse(&input, config)
}

/// A benchmark question generated from its gold passage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub id: String,
    pub question: String,
    pub gold_passage_id: PassageId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<Credits>,
}

pub fn parse_queries(input: &str, corpus: &Corpus) -> Result<Vec<QuerySpec>, CorpusError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: QuerySpec = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if corpus.get(&q.gold_passage_id).is_none() {
            return Err(CorpusError::DanglingGold {
                query_id: q.id,
                passage_id: q.gold_passage_id,
            });
        }
        if !seen.insert(q.id.clone()) {
            return Err(CorpusError::DuplicateQuery(q.id));
        }
        out.push(q);
    }
    Ok(out)
}

pub fn load_queries(path: &Path, corpus: &Corpus) -> Result<Vec<QuerySpec>, CorpusError> {
    parse_queries(&read(path)?, corpus)
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })
}
