//! The round loop and its event-sourced record.
//!
//! A run answers one question. Every tender opens a new round; within a
//! round vendors retrieve and quote in vendor-id order, the buyer ranks,
//! shortlists and decides, purchases settle, and every quote left on the
//! board is rejected (or, if its content was just bought from another
//! vendor, marked superseded). The tree then grows breadth-first until a
//! limit binds, and answers are refined bottom-up.
//!
//! The [`RunRecord`] is line-delimited JSON: a header line followed by one
//! line per [`EventRecord`]. Wall-clock time is deliberately not part of it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ProviderConfig;
use crate::corpus::{Corpus, Passage, PricingConfig, QuerySpec};
use crate::gateway::{ChatProvider, Exchange, Gateway, Verdict};
use crate::ids::{AgentId, NodeId, PassageId, QuoteId, TenderId};
use crate::market::{BulletinBoard, BuyerMemory, Ledger, Quote, RejectionRecord, Tender, Transaction};
use crate::retrieval::{
    embed_query, hyde_transform, issue_quotes, retrieve_candidates, Embedder, EmbeddingIndex,
    RetrievalConfig,
};
use crate::selection::{
    build_metadata_shortlist, decide_purchases, dedup_and_rank, rerank, PurchaseDecision, Reranker,
    Shortlist, ShortlistMode, Strategy,
};
use crate::tree::{
    answer_node, expand_node, refine_tree, Acquisition, MarketRound, QueryTree, StopReason,
    TreeConfig, TreeEvent, TreeObserver,
};
use crate::Credits;

pub const RUN_SCHEMA: &str = "bazaar.run";
pub const RUN_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub budget: Credits,
    #[serde(flatten)]
    pub tree: TreeConfig,
    /// Quotes kept after dedup and relevance ranking.
    pub n_shortlist: usize,
    /// Quotes presented to the purchase decision.
    pub m_shortlist: usize,
    pub inspection: bool,
    /// Which prompts a metadata-only run keeps free of passage content.
    pub metadata_scope: MetadataScope,
    pub strategy: Strategy,
    pub retrieval: RetrievalConfig,
    pub pricing: PricingConfig,
    pub provider: ProviderConfig,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            budget: 100,
            tree: TreeConfig::default(),
            n_shortlist: 50,
            m_shortlist: 3,
            inspection: true,
            metadata_scope: MetadataScope::AllPrompts,
            strategy: Strategy::Debate,
            retrieval: RetrievalConfig::default(),
            pricing: PricingConfig::default(),
            provider: ProviderConfig::default(),
            seed: 0,
        }
    }
}

/// `AllPrompts`: without inspection, even answer synthesis sees only the
/// titles of what was bought. `DecisionOnly`: only the purchase decision is
/// blind; bought passages are read in full once paid for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetadataScope {
    #[default]
    AllPrompts,
    DecisionOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WithheldReason {
    AlreadyOwned,
    Forgotten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShortlistedQuote {
    pub quote_id: QuoteId,
    pub rerank_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    TenderPosted {
        node: NodeId,
        tender: Tender,
    },
    QuoteSubmitted {
        quote: Quote,
    },
    /// A quote whose content the buyer already owns or has forgotten; its
    /// content is never shown or logged.
    QuoteWithheld {
        quote_id: QuoteId,
        tender_id: TenderId,
        vendor: AgentId,
        passage_id: PassageId,
        reason: WithheldReason,
    },
    Llm {
        exchange: Exchange,
    },
    Shortlisted {
        tender_id: TenderId,
        mode: ShortlistMode,
        considered: usize,
        entries: Vec<ShortlistedQuote>,
    },
    Decision {
        tender_id: TenderId,
        strategy: Strategy,
        balance: Credits,
        quote_ids: Vec<QuoteId>,
        verdicts: Vec<Verdict>,
        demoted: Vec<QuoteId>,
        parse_failure: Option<String>,
    },
    Transaction {
        node: NodeId,
        passage_id: PassageId,
        transaction: Transaction,
    },
    SettlementFailed {
        quote_id: QuoteId,
        error: String,
    },
    Rejection {
        record: RejectionRecord,
    },
    /// Left over after the same content was bought from another quote.
    Superseded {
        quote_id: QuoteId,
        passage_id: PassageId,
    },
    TenderClosed {
        tender_id: TenderId,
    },
    MemorySnapshot {
        owned: Vec<PassageId>,
        forgotten: usize,
    },
    NodeCreated {
        node: NodeId,
        parent: Option<NodeId>,
        depth: u32,
        question: String,
    },
    PreliminaryAnswer {
        node: NodeId,
        answer: String,
        flagged: bool,
    },
    ChildFailed {
        parent: NodeId,
        question: String,
        error: String,
    },
    ProviderError {
        node: Option<NodeId>,
        stage: String,
        error: String,
    },
    Stop {
        reasons: Vec<StopReason>,
    },
    Refined {
        node: NodeId,
        order: usize,
        answer: String,
        fallback: bool,
    },
    Final {
        answer: String,
        total_spent: Credits,
        balances: BTreeMap<AgentId, Credits>,
        nodes: usize,
        height: u32,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: usize,
    pub round: u32,
    pub event: Event,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub schema: String,
    pub version: u32,
    pub config: SimConfig,
    pub query: QuerySpec,
    pub buyer: AgentId,
    pub initial_balances: BTreeMap<AgentId, Credits>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub header: RunHeader,
    pub events: Vec<EventRecord>,
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("run record line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("run record is empty")]
    Empty,
    #[error("unsupported run record schema {schema} v{version}")]
    Schema { schema: String, version: u32 },
    #[error("run record has no final event")]
    NoFinal,
    #[error("replay diverges: {0}")]
    Mismatch(String),
    #[error("replay failed: {0}")]
    Market(#[from] crate::market::MarketError),
}

impl RunRecord {
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(input: &str) -> Result<Self, RecordError> {
        let mut lines = input.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(RecordError::Empty)?;
        let header: RunHeader = serde_json::from_str(first).map_err(|e| RecordError::Malformed {
            line: 1,
            message: e.to_string(),
        })?;
        if header.schema != RUN_SCHEMA || header.version != RUN_SCHEMA_VERSION {
            return Err(RecordError::Schema {
                schema: header.schema,
                version: header.version,
            });
        }
        let events = lines
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| RecordError::Malformed {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { header, events })
    }

    fn final_event(&self) -> Option<&Event> {
        self.events
            .iter()
            .rev()
            .map(|e| &e.event)
            .find(|e| matches!(e, Event::Final { .. }))
    }

    pub fn final_answer(&self) -> &str {
        match self.final_event() {
            Some(Event::Final { answer, .. }) => answer,
            _ => "",
        }
    }

    pub fn total_spent(&self) -> Credits {
        match self.final_event() {
            Some(Event::Final { total_spent, .. }) => *total_spent,
            _ => 0,
        }
    }

    pub fn stop_reasons(&self) -> Vec<StopReason> {
        self.events
            .iter()
            .find_map(|e| match &e.event {
                Event::Stop { reasons } => Some(reasons.clone()),
                _ => None,
            })
            .unwrap_or_default()
    }

    pub fn exchanges(&self) -> impl Iterator<Item = (u32, &Exchange)> {
        self.events.iter().filter_map(|e| match &e.event {
            Event::Llm { exchange } => Some((e.round, exchange)),
            _ => None,
        })
    }

    pub fn transactions(&self) -> impl Iterator<Item = (u32, &Transaction)> {
        self.events.iter().filter_map(|e| match &e.event {
            Event::Transaction { transaction, .. } => Some((e.round, transaction)),
            _ => None,
        })
    }

    pub fn nodes_created(&self) -> usize {
        1 + self
            .events
            .iter()
            .filter(|e| matches!(e.event, Event::NodeCreated { parent: Some(_), .. }))
            .count()
    }
}

/// What replaying a record's transactions yields.
#[derive(Clone, Debug, PartialEq)]
pub struct Replayed {
    pub ledger: Ledger,
    pub final_answer: String,
}

/// Rebuilds the ledger from the header balances and the transaction events,
/// takes the root's refined answer, and checks both against the final event.
pub fn replay(record: &RunRecord) -> Result<Replayed, RecordError> {
    let mut ledger = Ledger::new();
    for (agent, balance) in &record.header.initial_balances {
        ledger.open_account(agent.clone(), *balance);
    }
    let mut root_answer = None;
    for e in &record.events {
        match &e.event {
            Event::Transaction { transaction, .. } => ledger.apply(transaction)?,
            Event::Refined { node, answer, .. } if node.0 == 0 => root_answer = Some(answer.clone()),
            _ => {}
        }
    }
    let Some(Event::Final { answer, balances, .. }) = record.final_event() else {
        return Err(RecordError::NoFinal);
    };
    if ledger.balances() != balances {
        return Err(RecordError::Mismatch("final balances".into()));
    }
    let final_answer = root_answer.unwrap_or_default();
    if &final_answer != answer {
        return Err(RecordError::Mismatch("final answer".into()));
    }
    Ok(Replayed {
        ledger,
        final_answer,
    })
}

/// The shared, read-only inputs of a run.
#[derive(Clone, Copy)]
pub struct Engine<'a> {
    pub corpus: &'a Corpus,
    pub index: &'a EmbeddingIndex,
    pub chat: &'a dyn ChatProvider,
    pub embedder: &'a dyn Embedder,
    pub reranker: &'a dyn Reranker,
}

pub const BUYER: &str = "buyer";

impl<'a> Engine<'a> {
    pub fn run(&self, query: &QuerySpec, config: &SimConfig) -> RunRecord {
        run_simulation(query, *self, config)
    }
}

struct Session<'a> {
    engine: Engine<'a>,
    config: &'a SimConfig,
    buyer: AgentId,
    ledger: Ledger,
    board: BulletinBoard,
    memory: BuyerMemory,
    events: Vec<EventRecord>,
    round: u32,
    tendered: bool,
    stops: BTreeSet<StopReason>,
}

impl Session<'_> {
    fn push(&mut self, event: Event) {
        self.events.push(EventRecord {
            seq: self.events.len(),
            round: self.round,
            event,
        });
    }

    fn flush(&mut self, gateway: &mut Gateway<'_>) {
        for exchange in gateway.drain() {
            self.push(Event::Llm { exchange });
        }
    }

    fn provider_error(&mut self, node: Option<NodeId>, stage: &str, error: String, gateway: &mut Gateway<'_>) {
        self.flush(gateway);
        self.push(Event::ProviderError {
            node,
            stage: stage.to_owned(),
            error,
        });
    }

    /// One market round for an already-posted tender.
    fn step_round(&mut self, tender: &Tender, node: NodeId, gateway: &mut Gateway<'_>) -> Acquisition {
        let cfg = self.config;
        let engine = self.engine;
        let question = tender.query.as_str();

        let embedding_text = match hyde_transform(question, cfg.retrieval.hyde_enabled, gateway) {
            Ok(text) => text,
            Err(e) => {
                self.provider_error(Some(node), "hyde", e.to_string(), gateway);
                question.to_owned()
            }
        };
        self.flush(gateway);
        match embed_query(&embedding_text, engine.embedder) {
            Ok(vector) => {
                for vendor in engine.corpus.vendors() {
                    let issued = retrieve_candidates(
                        question,
                        &vector,
                        vendor,
                        engine.corpus,
                        engine.index,
                        &cfg.retrieval,
                    )
                    .map_err(|e| e.to_string())
                    .and_then(|c| {
                        issue_quotes(tender, &c, engine.corpus, &mut self.board, cfg.retrieval.quote_limit)
                            .map_err(|e| e.to_string())
                    });
                    if let Err(e) = issued {
                        self.provider_error(Some(node), &format!("retrieval:{vendor}"), e, gateway);
                    }
                }
            }
            Err(e) => self.provider_error(Some(node), "embedding", e.to_string(), gateway),
        }

        let mut visible = Vec::new();
        for quote in self.board.quotes(&tender.id).to_vec() {
            if self.memory.admits(&quote) {
                visible.push(quote.clone());
                self.push(Event::QuoteSubmitted { quote });
            } else {
                let reason = if self.memory.owns_content(quote.content()) {
                    WithheldReason::AlreadyOwned
                } else {
                    WithheldReason::Forgotten
                };
                self.push(Event::QuoteWithheld {
                    quote_id: quote.id,
                    tender_id: quote.tender_id,
                    vendor: quote.vendor,
                    passage_id: quote.passage.id,
                    reason,
                });
            }
        }

        let ranked = dedup_and_rank(&visible, cfg.n_shortlist);
        let shortlist = if cfg.inspection {
            rerank(question, &ranked, engine.reranker, cfg.m_shortlist).unwrap_or_else(|e| {
                self.provider_error(Some(node), "rerank", e.to_string(), gateway);
                Shortlist {
                    entries: Vec::new(),
                    mode: ShortlistMode::Inspection,
                }
            })
        } else {
            build_metadata_shortlist(&ranked, cfg.m_shortlist)
        };
        self.push(Event::Shortlisted {
            tender_id: tender.id.clone(),
            mode: shortlist.mode,
            considered: ranked.len(),
            entries: shortlist
                .entries
                .iter()
                .map(|e| ShortlistedQuote {
                    quote_id: e.quote.id.clone(),
                    rerank_score: e.rerank_score,
                })
                .collect(),
        });

        let mut acquisition = Acquisition::default();
        if !shortlist.is_empty() {
            let balance = self.ledger.balance(&self.buyer);
            let decision = match decide_purchases(question, &shortlist, balance, cfg.strategy, gateway) {
                Ok(d) => {
                    self.flush(gateway);
                    d
                }
                Err(e) => {
                    let message = e.to_string();
                    self.provider_error(Some(node), "decision", message.clone(), gateway);
                    PurchaseDecision::all_pass(shortlist.len(), cfg.strategy, String::new(), message)
                }
            };
            self.push(Event::Decision {
                tender_id: tender.id.clone(),
                strategy: decision.strategy,
                balance,
                quote_ids: shortlist.quote_ids(),
                verdicts: decision.verdicts.clone(),
                demoted: decision.demoted.clone(),
                parse_failure: decision.parse_failure.clone(),
            });
            for quote in decision.bought(&shortlist) {
                match self.ledger.settle_purchase(&self.buyer, quote, self.round) {
                    Ok(transaction) => {
                        let _ = self.board.take_quote(&quote.id);
                        self.memory.own(quote.passage.clone());
                        acquisition.passages.push(if !cfg.inspection && cfg.metadata_scope == MetadataScope::AllPrompts {
                            Passage {
                                content: quote.passage.metadata_block(),
                                ..quote.passage.clone()
                            }
                        } else {
                            quote.passage.clone()
                        });
                        acquisition.quotes.push(quote.id.clone());
                        acquisition.spent += transaction.price;
                        self.push(Event::Transaction {
                            node,
                            passage_id: quote.passage.id.clone(),
                            transaction,
                        });
                    }
                    Err(e) => self.push(Event::SettlementFailed {
                        quote_id: quote.id.clone(),
                        error: e.to_string(),
                    }),
                }
            }
        }

        for quote in self.board.quotes(&tender.id).to_vec() {
            if self.memory.owns_content(quote.content()) {
                let _ = self.board.take_quote(&quote.id);
                self.push(Event::Superseded {
                    quote_id: quote.id,
                    passage_id: quote.passage.id,
                });
            } else if let Ok(Some(record)) = self.board.reject_quote(&quote.id, self.round) {
                self.memory.forget(&record);
                self.push(Event::Rejection { record });
            }
        }
        let _ = self.board.close_tender(&tender.id);
        self.push(Event::TenderClosed {
            tender_id: tender.id.clone(),
        });
        let snapshot = self.memory.snapshot();
        self.push(Event::MemorySnapshot {
            owned: snapshot.owned.into_iter().map(|p| p.id).collect(),
            forgotten: snapshot.forgotten,
        });
        acquisition
    }
}

impl TreeObserver for Session<'_> {
    fn observe(&mut self, event: TreeEvent<'_>, gateway: &mut Gateway<'_>) {
        self.flush(gateway);
        let event = match event {
            TreeEvent::NodeCreated(node) => Event::NodeCreated {
                node: node.id,
                parent: node.parent,
                depth: node.depth,
                question: node.question.clone(),
            },
            TreeEvent::Preliminary { node, answer } => Event::PreliminaryAnswer {
                node,
                answer: answer.text.clone(),
                flagged: answer.flagged,
            },
            TreeEvent::ChildFailed { parent, question, error } => Event::ChildFailed {
                parent,
                question: question.to_owned(),
                error: error.to_owned(),
            },
            TreeEvent::ProviderError { node, stage, error } => Event::ProviderError {
                node: Some(node),
                stage: stage.to_owned(),
                error: error.to_owned(),
            },
            TreeEvent::Refined {
                node,
                order,
                answer,
                fallback,
            } => Event::Refined {
                node,
                order,
                answer: answer.to_owned(),
                fallback,
            },
        };
        self.push(event);
    }
}

impl MarketRound for Session<'_> {
    fn balance(&self) -> Credits {
        self.ledger.balance(&self.buyer)
    }

    fn acquire(&mut self, node: NodeId, question: &str, gateway: &mut Gateway<'_>) -> Result<Acquisition, String> {
        self.flush(gateway);
        let balance = self.balance();
        if balance == 0 {
            self.stops.insert(StopReason::BudgetExhausted);
            return Ok(Acquisition::default());
        }
        if self.tendered {
            self.round += 1;
        }
        self.tendered = true;
        let id = self
            .board
            .post_tender(&self.ledger, &self.buyer, question, balance, self.round)
            .map_err(|e| e.to_string())?;
        let tender = self.board.tender(&id).expect("just posted").clone();
        self.push(Event::TenderPosted {
            node,
            tender: tender.clone(),
        });
        Ok(self.step_round(&tender, node, gateway))
    }
}

/// Runs one question through the market and records everything.
pub fn run_simulation(query: &QuerySpec, engine: Engine<'_>, config: &SimConfig) -> RunRecord {
    let buyer = AgentId::new(BUYER);
    let mut ledger = Ledger::new();
    ledger.open_account(buyer.clone(), config.budget);
    for vendor in engine.corpus.vendors() {
        ledger.open_account(vendor.clone(), 0);
    }
    let header = RunHeader {
        schema: RUN_SCHEMA.into(),
        version: RUN_SCHEMA_VERSION,
        config: config.clone(),
        query: query.clone(),
        buyer: buyer.clone(),
        initial_balances: ledger.balances().clone(),
    };
    let mut session = Session {
        engine,
        config,
        buyer,
        ledger,
        board: BulletinBoard::new(),
        memory: BuyerMemory::new(),
        events: Vec::new(),
        round: 0,
        tendered: false,
        stops: BTreeSet::new(),
    };
    let mut gateway = Gateway::new(engine.chat, config.provider.chat_model.clone());
    let mut tree = QueryTree::new(query.question.clone(), config.tree.max_depth);

    session.observe(TreeEvent::NodeCreated(tree.root()), &mut gateway);
    let root = tree.root().id;
    if let Err(error) = answer_node(&mut tree, root, &mut session, &mut gateway) {
        session.provider_error(Some(root), "market", error, &mut gateway);
        tree.node_mut(root).preliminary_answer = Some(String::new());
    }

    let mut queue = VecDeque::from([root]);
    while let Some(id) = queue.pop_front() {
        let expansion = expand_node(&mut tree, id, &config.tree, &mut session, &mut gateway);
        session.stops.extend(expansion.stopped);
        queue.extend(expansion.children);
    }
    session.flush(&mut gateway);
    let reasons = session.stops.iter().copied().collect();
    session.push(Event::Stop { reasons });

    let answer = refine_tree(&mut tree, &mut gateway, &mut session);
    session.flush(&mut gateway);
    let total_spent = config.budget - session.ledger.balance(&session.buyer);
    session.push(Event::Final {
        answer,
        total_spent,
        balances: session.ledger.balances().clone(),
        nodes: tree.len(),
        height: tree.height(),
    });
    RunRecord {
        header,
        events: session.events,
    }
}
