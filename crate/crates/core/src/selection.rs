//! Buyer-side quote processing: dedup, ranking, shortlisting and the
//! purchase decision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::gateway::{
    parse_verdict, render, Gateway, GatewayError, Slots, TemplateId, Verdict, REASK_INSTRUCTION,
};
use crate::ids::QuoteId;
use crate::market::Quote;
use crate::text::tokenize;
use crate::Credits;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("cannot decide on an empty shortlist")]
    EmptyShortlist,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Scores (query, passage) pairs; higher is more relevant.
pub trait Reranker: Send + Sync {
    fn score(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>, GatewayError>;
}

/// Fraction of distinct query terms present in the passage. Offline default.
#[derive(Clone, Copy, Debug, Default)]
pub struct LexicalReranker;

impl Reranker for LexicalReranker {
    fn score(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>, GatewayError> {
        let mut terms = tokenize(query);
        terms.sort();
        terms.dedup();
        Ok(passages
            .iter()
            .map(|p| {
                if terms.is_empty() {
                    return 0.0;
                }
                let mut words = tokenize(p);
                words.sort();
                let hits = terms.iter().filter(|t| words.binary_search(t).is_ok()).count();
                hits as f64 / terms.len() as f64
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortlistMode {
    Inspection,
    MetadataOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShortlistEntry {
    pub quote: Quote,
    /// Absent in metadata-only mode.
    pub rerank_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shortlist {
    pub entries: Vec<ShortlistEntry>,
    pub mode: ShortlistMode,
}

impl Shortlist {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn quote_ids(&self) -> Vec<QuoteId> {
        self.entries.iter().map(|e| e.quote.id.clone()).collect()
    }

    /// The `options` slot of a purchase prompt. Without inspection only the
    /// paper and section titles are exposed.
    pub fn options(&self) -> Value {
        Value::Array(
            self.entries
                .iter()
                .map(|e| {
                    let block = match self.mode {
                        ShortlistMode::Inspection => e.quote.passage.content.clone(),
                        ShortlistMode::MetadataOnly => e.quote.passage.metadata_block(),
                    };
                    json!({ "answer_block": block, "price": e.quote.price })
                })
                .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Debate,
    #[serde(alias = "cot")]
    ChainOfThought,
    Direct,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Debate => "debate",
            Strategy::ChainOfThought => "chain_of_thought",
            Strategy::Direct => "direct",
        }
    }

    pub fn template(self) -> TemplateId {
        match self {
            Strategy::Debate => TemplateId::QuoteDebate,
            Strategy::ChainOfThought => TemplateId::QuoteCot,
            Strategy::Direct => TemplateId::QuoteDirect,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurchaseDecision {
    /// One verdict per shortlist entry, in shortlist order.
    pub verdicts: Vec<Verdict>,
    pub strategy: Strategy,
    pub raw_transcript: String,
    /// Buy verdicts turned into Pass because the buyer could not afford them.
    pub demoted: Vec<QuoteId>,
    /// Set when no verdict could be parsed and everything defaulted to Pass.
    pub parse_failure: Option<String>,
}

impl PurchaseDecision {
    pub fn all_pass(n: usize, strategy: Strategy, transcript: String, failure: String) -> Self {
        Self {
            verdicts: vec![Verdict::Pass; n],
            strategy,
            raw_transcript: transcript,
            demoted: Vec::new(),
            parse_failure: Some(failure),
        }
    }

    pub fn bought<'s>(&'s self, shortlist: &'s Shortlist) -> impl Iterator<Item = &'s Quote> + 's {
        shortlist
            .entries
            .iter()
            .zip(&self.verdicts)
            .filter(|(_, v)| **v == Verdict::Buy)
            .map(|(e, _)| &e.quote)
    }
}

fn by_relevance(a: &Quote, b: &Quote) -> std::cmp::Ordering {
    b.relevance_score
        .total_cmp(&a.relevance_score)
        .then_with(|| a.id.cmp(&b.id))
}

/// Collapses byte-identical contents onto the cheapest quote (then the
/// smallest vendor id), ranks by relevance and keeps the best `n`.
pub fn dedup_and_rank(quotes: &[Quote], n: usize) -> Vec<Quote> {
    let mut best: BTreeMap<&str, &Quote> = BTreeMap::new();
    for q in quotes {
        best.entry(q.content())
            .and_modify(|kept| {
                if (q.price, &q.vendor, &q.id) < (kept.price, &kept.vendor, &kept.id) {
                    *kept = q;
                }
            })
            .or_insert(q);
    }
    let mut ranked: Vec<Quote> = best.into_values().cloned().collect();
    ranked.sort_by(by_relevance);
    ranked.truncate(n);
    ranked
}

/// Scores every quote's content against the query and keeps the top `m`.
pub fn rerank(
    query: &str,
    quotes: &[Quote],
    reranker: &dyn Reranker,
    m: usize,
) -> Result<Shortlist, GatewayError> {
    let mut entries = Vec::new();
    if m > 0 && !quotes.is_empty() {
        let texts: Vec<&str> = quotes.iter().map(Quote::content).collect();
        let scores = reranker.score(query, &texts)?;
        if scores.len() != quotes.len() {
            return Err(GatewayError::Decode(format!(
                "reranker returned {} scores for {} passages",
                scores.len(),
                quotes.len()
            )));
        }
        entries = quotes
            .iter()
            .zip(scores)
            .map(|(q, s)| ShortlistEntry {
                quote: q.clone(),
                rerank_score: Some(s),
            })
            .collect();
        entries.sort_by(|a, b| {
            b.rerank_score
                .unwrap_or(f64::NEG_INFINITY)
                .total_cmp(&a.rerank_score.unwrap_or(f64::NEG_INFINITY))
                .then_with(|| a.quote.id.cmp(&b.quote.id))
        });
        entries.truncate(m);
    }
    Ok(Shortlist {
        entries,
        mode: ShortlistMode::Inspection,
    })
}

/// Top `m` by the vendors' relevance scores; no content is consulted.
pub fn build_metadata_shortlist(quotes: &[Quote], m: usize) -> Shortlist {
    let mut ranked: Vec<&Quote> = quotes.iter().collect();
    ranked.sort_by(|a, b| by_relevance(a, b));
    Shortlist {
        entries: ranked
            .into_iter()
            .take(m)
            .map(|q| ShortlistEntry {
                quote: q.clone(),
                rerank_score: None,
            })
            .collect(),
        mode: ShortlistMode::MetadataOnly,
    }
}

/// Demotes Buy verdicts from the lowest-ranked upward until the total fits
/// `balance`. Returns the indices demoted.
pub fn enforce_affordability(verdicts: &mut [Verdict], prices: &[Credits], balance: Credits) -> Vec<usize> {
    let mut total: Credits = verdicts
        .iter()
        .zip(prices)
        .filter(|(v, _)| **v == Verdict::Buy)
        .map(|(_, p)| *p)
        .sum();
    let mut demoted = Vec::new();
    for i in (0..verdicts.len()).rev() {
        if total <= balance {
            break;
        }
        if verdicts[i] == Verdict::Buy {
            verdicts[i] = Verdict::Pass;
            total -= prices[i];
            demoted.push(i);
        }
    }
    demoted
}

pub fn purchase_request(
    question: &str,
    shortlist: &Shortlist,
    balance: Credits,
    strategy: Strategy,
) -> Result<crate::gateway::ChatRequest, GatewayError> {
    let mut slots = Slots::new();
    slots.insert("question".into(), question.into());
    slots.insert("options".into(), shortlist.options());
    slots.insert("balance".into(), balance.into());
    render(strategy.template(), &slots)
}

/// Asks the model which shortlisted options to buy.
pub fn decide_purchases(
    question: &str,
    shortlist: &Shortlist,
    balance: Credits,
    strategy: Strategy,
    gateway: &mut Gateway<'_>,
) -> Result<PurchaseDecision, SelectionError> {
    if shortlist.is_empty() {
        return Err(SelectionError::EmptyShortlist);
    }
    let request = purchase_request(question, shortlist, balance, strategy)?;
    let n = shortlist.len();
    let (reply, parsed) =
        gateway.complete_parsed(request, REASK_INSTRUCTION, |text| parse_verdict(text, n))?;
    let mut verdicts = match parsed {
        Ok(v) => v,
        Err(e) => return Ok(PurchaseDecision::all_pass(n, strategy, reply, e.to_string())),
    };
    let prices: Vec<Credits> = shortlist.entries.iter().map(|e| e.quote.price).collect();
    let demoted = enforce_affordability(&mut verdicts, &prices, balance)
        .into_iter()
        .map(|i| shortlist.entries[i].quote.id.clone())
        .collect();
    Ok(PurchaseDecision {
        verdicts,
        strategy,
        raw_transcript: reply,
        demoted,
        parse_failure: None,
    })
}
