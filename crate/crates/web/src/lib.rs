//! Browser bindings: a price curve, an Elo tournament, and a mock market run
//! over the bundled toy corpus. Every export returns a JSON string.

use std::collections::BTreeMap;

use bazaar::corpus::{price_passage, Corpus, CorpusConfig, PricingConfig, QuerySpec};
use bazaar::engine::{Engine, Event, SimConfig};
use bazaar::evaluation::{elo_tournament_with_roster, parse_match_results};
use bazaar::gateway::synthetic::SyntheticProvider;
use bazaar::retrieval::{EmbeddingIndex, HashingEmbedder};
use bazaar::selection::LexicalReranker;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const TOY_PASSAGES: &str = include_str!("../../../data/toy/passages.jsonl");

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

pub fn price_curve_json(max_citations: f64, points: usize, scale: f64) -> Result<Value, String> {
    if max_citations.is_nan() || max_citations <= 0.0 || points < 2 {
        return Err("need max_citations > 0 and at least 2 points".into());
    }
    let cfg = PricingConfig {
        scale,
        ..PricingConfig::default()
    };
    let curve: Vec<Value> = (0..points)
        .map(|i| {
            let c = max_citations * i as f64 / (points - 1) as f64;
            json!({"citations": c, "price": price_passage(c, &cfg)})
        })
        .collect();
    Ok(json!({"scale": scale, "min_price": cfg.min_price, "max_price": cfg.max_price, "points": curve}))
}

/// `matches` holds one JSON match per line.
pub fn elo_json(matches: &str, orderings: usize, seed: u64, k: f64) -> Result<Value, String> {
    let results = parse_match_results(matches)?;
    let report = elo_tournament_with_roster(&results, &[], orderings, seed, k).map_err(|e| e.to_string())?;
    serde_json::to_value(report).map_err(|e| e.to_string())
}

pub fn market_run_json(
    question: &str,
    budget: u64,
    inspection: bool,
    followup_probability: f64,
    seed: u64,
) -> Result<Value, String> {
    let corpus = Corpus::parse(TOY_PASSAGES, &CorpusConfig::default()).map_err(|e| e.to_string())?;
    let embedder = HashingEmbedder::default();
    let index = EmbeddingIndex::build(&corpus, &embedder).map_err(|e| e.to_string())?;
    let mut config = SimConfig {
        budget,
        inspection,
        seed,
        ..SimConfig::default()
    };
    config.provider.synthetic.followup_probability = followup_probability.clamp(0.0, 1.0);
    // hashing vectors score lower than learned ones; same threshold as the toy config
    config.retrieval.cosine_threshold = 0.1;
    let chat = SyntheticProvider::new(seed, config.provider.synthetic.clone());
    let engine = Engine {
        corpus: &corpus,
        index: &index,
        chat: &chat,
        embedder: &embedder,
        reranker: &LexicalReranker,
    };
    let query = QuerySpec {
        id: "demo".into(),
        question: question.to_owned(),
        gold_passage_id: corpus.passages()[0].id.clone(),
        budget: Some(budget),
    };
    let record = engine.run(&query, &config);

    let mut nodes: Vec<Value> = Vec::new();
    let mut bought: BTreeMap<usize, Vec<Value>> = BTreeMap::new();
    let mut refined: BTreeMap<usize, (usize, String)> = BTreeMap::new();
    for e in &record.events {
        match &e.event {
            Event::NodeCreated {
                node,
                parent,
                depth,
                question,
            } => nodes.push(json!({
                "id": node.0,
                "parent": parent.map(|p| p.0),
                "depth": depth,
                "question": question,
            })),
            Event::Transaction {
                node,
                passage_id,
                transaction,
            } => bought.entry(node.0).or_default().push(json!({
                "passage": passage_id,
                "vendor": transaction.vendor,
                "price": transaction.price,
                "title": corpus.get(passage_id).map(|p| p.paper_title.clone()),
            })),
            Event::Refined {
                node, order, answer, ..
            } => {
                refined.insert(node.0, (*order, answer.clone()));
            }
            _ => {}
        }
    }
    for n in &mut nodes {
        let id = n["id"].as_u64().unwrap_or_default() as usize;
        n["purchases"] = json!(bought.remove(&id).unwrap_or_default());
        if let Some((order, answer)) = refined.remove(&id) {
            n["refine_order"] = json!(order);
            n["answer"] = json!(answer);
        }
    }
    Ok(json!({
        "question": question,
        "budget": budget,
        "spent": record.total_spent(),
        "answer": record.final_answer(),
        "stop_reasons": record.stop_reasons(),
        "nodes": nodes,
        "events": record.events.len(),
    }))
}

// Integers cross the boundary as u32 so JS passes plain numbers, not BigInt.

#[wasm_bindgen]
pub fn price_curve(max_citations: f64, points: u32, scale: f64) -> Result<String, JsValue> {
    to_js(price_curve_json(max_citations, points as usize, scale))
}

#[wasm_bindgen]
pub fn elo_tournament(matches: &str, orderings: u32, seed: u32, k: f64) -> Result<String, JsValue> {
    to_js(elo_json(matches, orderings as usize, seed.into(), k))
}

#[wasm_bindgen]
pub fn mock_market_run(
    question: &str,
    budget: u32,
    inspection: bool,
    followup_probability: f64,
    seed: u32,
) -> Result<String, JsValue> {
    to_js(market_run_json(question, budget.into(), inspection, followup_probability, seed.into()))
}
