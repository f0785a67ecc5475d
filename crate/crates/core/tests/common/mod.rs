#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use bazaar::config::{ChatSource, Providers};
use bazaar::corpus::{parse_queries, CorpusConfig};
use bazaar::experiment::{
    parse_paraphrases, run_experiment, ExperimentContext, ExperimentKind, ExperimentSpec, ParaphraseItem,
    TrialRecord,
};

use bazaar::corpus::{Corpus, Passage, QuerySpec};
use bazaar::engine::{Engine, Event, MetadataScope, RunRecord, SimConfig, BUYER};
use bazaar::gateway::synthetic::{JudgePolicy, PurchasePolicy, SyntheticPolicy, SyntheticProvider};
use bazaar::gateway::{TemplateId, Verdict};
use bazaar::retrieval::{EmbeddingIndex, HashingEmbedder, RetrievalConfig};
use bazaar::selection::{LexicalReranker, Strategy};
use bazaar::tree::TreeConfig;
use bazaar::{AgentId, Credits, PassageId, QuoteId};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOCAB: &[&str] = &[
    "attention", "retrieval", "passage", "market", "vendor", "buyer", "price", "credit", "ranking", "vector",
    "cosine", "token", "model", "answer", "question", "budget", "quote", "tender", "memory", "inspection",
    "dense", "sparse", "index", "judge", "rating", "graph", "policy", "reward", "sample", "layer",
];

/// Passage text that cannot occur inside any other passage's text: it is
/// wrapped in markers unique to `n`.
pub fn marked_content(n: usize, words: &[&str]) -> String {
    format!("zq{n:04}open {} zq{n:04}shut", words.join(" "))
}

pub fn random_words<'a>(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<&'a str> {
    let k = rng.random_range(lo..=hi);
    (0..k).map(|_| *VOCAB.choose(rng).unwrap()).collect()
}

/// Random priced corpus over `n_vendors` vendors; about a fifth of the
/// passages repeat an earlier passage's content under another vendor.
pub fn random_corpus(rng: &mut ChaCha8Rng, n: usize, n_vendors: usize) -> Corpus {
    let mut passages: Vec<Passage> = Vec::with_capacity(n);
    for i in 0..n {
        let content = if i > 0 && rng.random_bool(0.2) {
            passages[rng.random_range(0..i)].content.clone()
        } else {
            marked_content(i, &random_words(rng, 4, 12))
        };
        passages.push(Passage {
            id: PassageId::new(format!("p{i:04}")),
            paper_title: format!("Paper on {}", VOCAB[i % VOCAB.len()]),
            section_title: format!("Section {}", i % 7),
            content,
            price: rng.random_range(1..=60),
            owner_vendor: AgentId::new(format!("v{}", rng.random_range(0..n_vendors))),
            first_author_mean_citations: 0.0,
        });
    }
    Corpus::from_passages(passages).expect("valid corpus")
}

pub fn random_policy(rng: &mut ChaCha8Rng) -> SyntheticPolicy {
    let purchase = *[
        PurchasePolicy::Random,
        PurchasePolicy::Random,
        PurchasePolicy::BuyAll,
        PurchasePolicy::PassAll,
        PurchasePolicy::First,
        PurchasePolicy::Last,
        PurchasePolicy::Cheapest,
    ]
    .choose(rng)
    .unwrap();
    SyntheticPolicy {
        purchase,
        buy_probability: rng.random_range(0.0..=1.0),
        followup_probability: rng.random_range(0.0..=1.0),
        max_followups: rng.random_range(0..=3),
        garble_rate: rng.random_range(0.0..0.3),
        judge: JudgePolicy::Overlap,
    }
}

pub fn random_config(rng: &mut ChaCha8Rng) -> SimConfig {
    let mut config = SimConfig {
        budget: rng.random_range(0..=150),
        tree: TreeConfig {
            max_depth: rng.random_range(0..=3),
            max_followups: rng.random_range(0..=3),
            node_cap: rng.random_range(1..=40),
        },
        n_shortlist: rng.random_range(1..=50),
        m_shortlist: rng.random_range(1..=4),
        inspection: rng.random_bool(0.5),
        strategy: *[Strategy::Debate, Strategy::ChainOfThought, Strategy::Direct].choose(rng).unwrap(),
        retrieval: RetrievalConfig {
            cosine_threshold: rng.random_range(-0.2..0.4),
            top_k: rng.random_range(1..=6),
            bm25_top: rng.random_range(1..=100),
            quote_limit: rng.random_range(1..=4),
            hyde_enabled: rng.random_bool(0.5),
            ..RetrievalConfig::default()
        },
        seed: rng.random(),
        ..SimConfig::default()
    };
    config.provider.synthetic = random_policy(rng);
    config.provider.hashing_dimension = 64;
    if rng.random_bool(0.25) {
        config.metadata_scope = MetadataScope::DecisionOnly;
    }
    config
}

pub struct FuzzCase {
    pub corpus: Corpus,
    pub query: QuerySpec,
    pub config: SimConfig,
}

pub fn fuzz_case(seed: u64) -> FuzzCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=40);
    let vendors = rng.random_range(1..=4);
    let corpus = random_corpus(&mut rng, n, vendors);
    let gold = corpus.passages()[rng.random_range(0..n)].id.clone();
    let query = QuerySpec {
        id: format!("fz{seed}"),
        question: random_words(&mut rng, 2, 6).join(" "),
        gold_passage_id: gold,
        budget: None,
    };
    let config = random_config(&mut rng);
    FuzzCase { corpus, query, config }
}

pub fn run_case(case: &FuzzCase) -> RunRecord {
    let embedder = HashingEmbedder {
        dimension: case.config.provider.hashing_dimension,
    };
    let index = EmbeddingIndex::build(&case.corpus, &embedder).unwrap();
    let chat = SyntheticProvider::new(case.config.seed, case.config.provider.synthetic.clone());
    let engine = Engine {
        corpus: &case.corpus,
        index: &index,
        chat: &chat,
        embedder: &embedder,
        reranker: &LexicalReranker,
    };
    engine.run(&case.query, &case.config)
}

pub fn sum_tree_bound(max_followups: usize, max_depth: u32) -> usize {
    (0..=max_depth).map(|d| max_followups.pow(d)).sum()
}

/// Budget, balance and conservation checks (criterion-5 family).
pub fn money_violations(record: &RunRecord) -> Vec<String> {
    let mut out = Vec::new();
    let budget = record.header.config.budget;
    let mut balances: BTreeMap<AgentId, i128> = record
        .header
        .initial_balances
        .iter()
        .map(|(a, b)| (a.clone(), i128::from(*b)))
        .collect();
    let initial_total: i128 = balances.values().sum();
    let mut spent: Credits = 0;
    for (_, tx) in record.transactions() {
        if tx.buyer.as_str() == BUYER {
            spent += tx.price;
        }
        *balances.entry(tx.buyer.clone()).or_default() -= i128::from(tx.price);
        *balances.entry(tx.vendor.clone()).or_default() += i128::from(tx.price);
        if let Some((a, b)) = balances.iter().find(|(_, b)| **b < 0) {
            out.push(format!("negative balance {b} for {a}"));
        }
        if balances.values().sum::<i128>() != initial_total {
            out.push("credit sum changed".into());
        }
    }
    if spent > budget {
        out.push(format!("spent {spent} > budget {budget}"));
    }
    if record.total_spent() != spent {
        out.push(format!("final total {} != transactions {spent}", record.total_spent()));
    }
    match record.events.last().map(|e| &e.event) {
        Some(Event::Final { balances: fin, .. }) => {
            let fin_total: i128 = fin.values().map(|b| i128::from(*b)).sum();
            if fin_total != initial_total {
                out.push("final balances do not conserve credits".into());
            }
            let replayed: BTreeMap<AgentId, i128> = balances.clone();
            for (a, b) in fin {
                if replayed.get(a).copied().unwrap_or(0) != i128::from(*b) {
                    out.push(format!("final balance of {a} disagrees with replay"));
                }
            }
        }
        _ => out.push("no final event".into()),
    }
    out
}

fn quote_contents(record: &RunRecord) -> BTreeMap<QuoteId, String> {
    record
        .events
        .iter()
        .filter_map(|e| match &e.event {
            Event::QuoteSubmitted { quote } => Some((quote.id.clone(), quote.passage.content.clone())),
            _ => None,
        })
        .collect()
}

/// Rejected content must not appear in anything logged after the rejection,
/// neither in a later round nor later in the same round.
pub fn forgetting_violations(record: &RunRecord, corpus: &Corpus) -> Vec<String> {
    let contents = quote_contents(record);
    let payloads: Vec<String> = record
        .events
        .iter()
        .map(|e| serde_json::to_string(&e.event).unwrap())
        .collect();
    let mut out = Vec::new();
    for (i, e) in record.events.iter().enumerate() {
        let Event::Rejection { record: rej } = &e.event else { continue };
        // withheld quotes never had their content logged; use the corpus copy
        let content = match contents.get(&rej.quote_id) {
            Some(c) => c.as_str(),
            None => match corpus.get(&rej.passage_id) {
                Some(p) => p.content.as_str(),
                None => {
                    out.push(format!("rejected quote {} names unknown passage", rej.quote_id));
                    continue;
                }
            },
        };
        for (later, payload) in record.events[i + 1..].iter().zip(&payloads[i + 1..]) {
            if payload.contains(content) {
                out.push(format!(
                    "content of {} (rejected round {}) in event {} round {}",
                    rej.quote_id, e.round, later.seq, later.round
                ));
            }
        }
    }
    out
}

fn prompt_of(e: &Event) -> Option<(TemplateId, String)> {
    match e {
        Event::Llm { exchange } => Some((
            exchange.template,
            exchange.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n"),
        )),
        _ => None,
    }
}

/// Metadata-only runs: with the default scope no prompt carries passage
/// content. With the decision-only scope, decision prompts carry none and
/// other prompts only content the buyer had bought by then.
pub fn metadata_violations(record: &RunRecord, corpus: &Corpus) -> Vec<String> {
    let config = &record.header.config;
    if config.inspection {
        return Vec::new();
    }
    let mut owned: BTreeSet<&str> = BTreeSet::new();
    let mut out = Vec::new();
    for e in &record.events {
        if let Event::Transaction { passage_id, .. } = &e.event {
            owned.insert(corpus.get(passage_id).unwrap().content.as_str());
        }
        let Some((template, prompt)) = prompt_of(&e.event) else { continue };
        let decision = matches!(
            template,
            TemplateId::QuoteDebate | TemplateId::QuoteCot | TemplateId::QuoteDirect
        );
        for p in corpus.passages() {
            let c = p.content.as_str();
            let strict = decision || config.metadata_scope == MetadataScope::AllPrompts;
            if prompt.contains(c) && (strict || !owned.contains(c)) {
                out.push(format!("content of {} in {:?} prompt at seq {}", p.id, template, e.seq));
            }
        }
    }
    out
}

/// Quote limit, tree bounds, refinement coverage and pass-means-rejected.
pub fn structure_violations(record: &RunRecord) -> Vec<String> {
    let config = &record.header.config;
    let mut out = Vec::new();
    let mut per_vendor: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut created = 0usize;
    let mut failed = 0usize;
    let mut refined: Vec<usize> = Vec::new();
    let mut closed: BTreeMap<QuoteId, u32> = BTreeMap::new();
    let mut bought: BTreeSet<QuoteId> = BTreeSet::new();
    let mut rejected: BTreeSet<QuoteId> = BTreeSet::new();
    let mut passes: Vec<(QuoteId, u32)> = Vec::new();
    for e in &record.events {
        match &e.event {
            Event::QuoteSubmitted { quote } => {
                *per_vendor
                    .entry((quote.tender_id.to_string(), quote.vendor.to_string()))
                    .or_default() += 1
            }
            Event::QuoteWithheld { tender_id, vendor, .. } => {
                *per_vendor.entry((tender_id.to_string(), vendor.to_string())).or_default() += 1
            }
            Event::NodeCreated { depth, .. } => {
                created += 1;
                if *depth > config.tree.max_depth {
                    out.push(format!("node at depth {depth}"));
                }
            }
            Event::ChildFailed { .. } => failed += 1,
            Event::Refined { node, .. } => refined.push(node.0),
            Event::Decision { quote_ids, verdicts, .. } => {
                for (q, v) in quote_ids.iter().zip(verdicts) {
                    if *v == Verdict::Pass {
                        passes.push((q.clone(), e.round));
                    }
                }
            }
            Event::Transaction { transaction, .. } => {
                bought.insert(transaction.quote_id.clone());
            }
            Event::Rejection { record: r } => {
                rejected.insert(r.quote_id.clone());
                closed.insert(r.quote_id.clone(), e.round);
            }
            Event::Superseded { quote_id, .. } => {
                closed.insert(quote_id.clone(), e.round);
            }
            _ => {}
        }
    }
    for ((t, v), n) in per_vendor {
        if n > config.retrieval.quote_limit {
            out.push(format!("{v} sent {n} quotes to {t}"));
        }
    }
    let nodes = created - failed;
    if nodes > config.tree.node_cap.max(1) {
        out.push(format!("{nodes} nodes over cap {}", config.tree.node_cap));
    }
    if nodes > sum_tree_bound(config.tree.max_followups, config.tree.max_depth) {
        out.push(format!("{nodes} nodes over the branching bound"));
    }
    let mut sorted = refined.clone();
    sorted.sort_unstable();
    if sorted != (0..nodes).collect::<Vec<_>>() {
        out.push(format!("refined {:?} for {nodes} nodes", refined));
    }
    for (q, round) in passes {
        if bought.contains(&q) {
            out.push(format!("passed quote {q} was bought"));
            continue;
        }
        match closed.get(&q) {
            Some(r) if *r == round => {}
            other => out.push(format!("passed quote {q} closed at {other:?}, decided round {round}")),
        }
    }
    for q in bought.intersection(&rejected) {
        out.push(format!("quote {q} both bought and rejected"));
    }
    out
}

pub fn toy_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/toy"))
}

pub struct Toy {
    pub corpus: Corpus,
    pub queries: Vec<QuerySpec>,
    pub paraphrases: Vec<ParaphraseItem>,
}

pub fn toy() -> Toy {
    let read = |name: &str| std::fs::read_to_string(toy_dir().join(name)).unwrap();
    let corpus = Corpus::parse(&read("passages.jsonl"), &CorpusConfig::default()).unwrap();
    let queries = parse_queries(&read("queries.jsonl"), &corpus).unwrap();
    let paraphrases = parse_paraphrases(&read("paraphrases.jsonl")).unwrap();
    Toy {
        corpus,
        queries,
        paraphrases,
    }
}

/// Runs one experiment over the toy data with offline providers.
pub fn run_kind(
    toy: &Toy,
    base: &SimConfig,
    kind: ExperimentKind,
    parameters: serde_json::Value,
) -> Result<Vec<TrialRecord>, String> {
    with_context(toy, base, |ctx| {
        let spec = ExperimentSpec::new(kind, 11).with_parameters(parameters);
        run_experiment(&spec, ctx).map_err(|e| e.to_string())
    })
}

pub fn with_context<T>(toy: &Toy, base: &SimConfig, f: impl FnOnce(&ExperimentContext<'_>) -> T) -> T {
    let providers = Providers::offline(&base.provider, 5).unwrap();
    let index = EmbeddingIndex::build(&toy.corpus, providers.embedder.as_ref()).unwrap();
    let source = ChatSource::from_config(&base.provider, 5).unwrap();
    let chat_for = |m: &str| source.chat(m);
    let ctx = ExperimentContext {
        corpus: &toy.corpus,
        index: &index,
        queries: &toy.queries,
        paraphrases: &toy.paraphrases,
        base,
        embedder: providers.embedder.as_ref(),
        reranker: providers.reranker.as_ref(),
        chat_for: &chat_for,
    };
    f(&ctx)
}
