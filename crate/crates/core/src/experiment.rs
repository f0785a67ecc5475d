//! Batch experiments: purchase-decision probes (rational choice, price
//! sweeps, positional bias) and answer-quality tournaments (budget,
//! inspection, model comparisons).
//!
//! An experiment is planned into a list of trials before anything runs, so
//! an invalid spec fails without spending. Each trial carries its own seed
//! and the digest of the configuration it ran under; [`run_trial`] re-runs a
//! single planned trial.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{Corpus, Passage, QuerySpec};
use crate::engine::{Engine, SimConfig};
use crate::evaluation::{closed_book_answer, pairwise_evaluate, Entry, DEFAULT_ORDERINGS};
use crate::gateway::{ChatProvider, Gateway, Verdict};
use crate::ids::{Contestant, PassageId};
use crate::market::Quote;
use crate::retrieval::{bm25_scores, Embedder, EmbeddingIndex, RetrievalConfig};
use crate::selection::{decide_purchases, Reranker, Shortlist, ShortlistEntry, ShortlistMode, Strategy};
use crate::text::sha256_hex;
use crate::Credits;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid parameters for {kind}: {message}")]
    InvalidSpec { kind: ExperimentKind, message: String },
    #[error("unknown question id {0}")]
    UnknownQuestion(String),
    #[error("{kind} needs {needed} questions, only {available} available")]
    TooFewQuestions {
        kind: ExperimentKind,
        needed: usize,
        available: usize,
    },
    #[error("question {0} has too few alternative passages")]
    NoAlternatives(String),
    #[error("trial index {0} out of range")]
    NoSuchTrial(usize),
    #[error("results line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    RationalSamePrice,
    RationalDiffPrice,
    PriceSweep,
    PositionalBias,
    BudgetSweep,
    InspectionCompare,
    ModelCompare,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::RationalSamePrice,
        ExperimentKind::RationalDiffPrice,
        ExperimentKind::PriceSweep,
        ExperimentKind::PositionalBias,
        ExperimentKind::BudgetSweep,
        ExperimentKind::InspectionCompare,
        ExperimentKind::ModelCompare,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::RationalSamePrice => "rational_same_price",
            ExperimentKind::RationalDiffPrice => "rational_diff_price",
            ExperimentKind::PriceSweep => "price_sweep",
            ExperimentKind::PositionalBias => "positional_bias",
            ExperimentKind::BudgetSweep => "budget_sweep",
            ExperimentKind::InspectionCompare => "inspection_compare",
            ExperimentKind::ModelCompare => "model_compare",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown experiment kind {s}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    /// Kind-specific parameters; see the `*Params` structs.
    #[serde(default = "empty_object")]
    pub parameters: Value,
    /// Question ids to use; empty means the loaded set in file order.
    #[serde(default)]
    pub questions: Vec<String>,
    #[serde(default = "one")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

fn one() -> usize {
    1
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind, seed: u64) -> Self {
        Self {
            kind,
            parameters: empty_object(),
            questions: Vec::new(),
            repetitions: 1,
            seed,
        }
    }

    pub fn with_parameters(mut self, parameters: Value) -> Self {
        self.parameters = parameters;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RationalParams {
    pub strategies: Vec<Strategy>,
    pub price: Credits,
    /// Price of the costlier option in the different-price variant.
    pub expensive_price: Credits,
    pub n_questions: Option<usize>,
}

impl Default for RationalParams {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Debate, Strategy::ChainOfThought, Strategy::Direct],
            price: 10,
            expensive_price: 20,
            n_questions: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriceSweepParams {
    pub gold_prices: Vec<Credits>,
    pub other_price: Credits,
    pub n_alternatives: usize,
    pub n_questions: usize,
    pub strategy: Strategy,
    /// `true` shows content; adding `false` runs the metadata-only arm too.
    pub inspection_modes: Vec<bool>,
}

impl Default for PriceSweepParams {
    fn default() -> Self {
        Self {
            gold_prices: (0..=80).step_by(10).collect(),
            other_price: 10,
            n_alternatives: 2,
            n_questions: 30,
            strategy: Strategy::Debate,
            inspection_modes: vec![true],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PositionalParams {
    pub n_questions: usize,
    pub price: Credits,
    pub strategy: Strategy,
}

impl Default for PositionalParams {
    fn default() -> Self {
        Self {
            n_questions: 10,
            price: 10,
            strategy: Strategy::Debate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSweepParams {
    pub budgets: Vec<Credits>,
    pub n_questions: Option<usize>,
    pub n_orderings: usize,
}

impl Default for BudgetSweepParams {
    fn default() -> Self {
        Self {
            budgets: vec![10, 20, 50, 100, 200],
            n_questions: None,
            n_orderings: DEFAULT_ORDERINGS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InspectionParams {
    pub budgets: Vec<Credits>,
    pub n_questions: Option<usize>,
}

impl Default for InspectionParams {
    fn default() -> Self {
        Self {
            budgets: vec![10, 20, 50, 100, 200],
            n_questions: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelCompareParams {
    pub models: Vec<String>,
    pub budget: Credits,
    pub n_questions: Option<usize>,
}

impl Default for ModelCompareParams {
    fn default() -> Self {
        Self {
            models: vec!["gpt-4".into(), "gpt-3.5-turbo".into(), "llama-2-70b-chat".into()],
            budget: 100,
            n_questions: None,
        }
    }
}

/// Two rewordings of a gold passage, for the fungible-goods probes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseItem {
    pub question_id: String,
    pub question: String,
    pub paper_title: String,
    pub section_title: String,
    pub paraphrases: [String; 2],
}

pub fn parse_paraphrases(input: &str) -> Result<Vec<ParaphraseItem>, ExperimentError> {
    input
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ExperimentError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RationalOutcome {
    NoPurchase,
    /// Bought exactly one option, the cheaper one if prices differ.
    BoughtOne,
    /// Bought only the costlier of two differently priced options.
    BoughtExpensive,
    BoughtBoth,
    ParseFailure,
}

impl RationalOutcome {
    pub fn classify(verdicts: &[Verdict], prices: &[Credits], parse_failure: bool) -> Self {
        if parse_failure {
            return RationalOutcome::ParseFailure;
        }
        let bought: Vec<usize> = (0..verdicts.len()).filter(|&i| verdicts[i] == Verdict::Buy).collect();
        match bought.as_slice() {
            [] => RationalOutcome::NoPurchase,
            [i] if prices.iter().any(|p| *p < prices[*i]) => RationalOutcome::BoughtExpensive,
            [_] => RationalOutcome::BoughtOne,
            _ => RationalOutcome::BoughtBoth,
        }
    }

    pub fn is_rational(self) -> bool {
        matches!(self, RationalOutcome::NoPurchase | RationalOutcome::BoughtOne)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandCategory {
    OnlyGold,
    GoldAndMore,
    OnlyAlternative,
    NoPurchase,
}

impl DemandCategory {
    pub const ALL: [DemandCategory; 4] = [
        DemandCategory::OnlyGold,
        DemandCategory::GoldAndMore,
        DemandCategory::OnlyAlternative,
        DemandCategory::NoPurchase,
    ];

    pub fn classify(verdicts: &[Verdict], gold_position: usize) -> Self {
        let gold = verdicts.get(gold_position) == Some(&Verdict::Buy);
        let others = verdicts
            .iter()
            .enumerate()
            .any(|(i, v)| i != gold_position && *v == Verdict::Buy);
        match (gold, others) {
            (true, false) => DemandCategory::OnlyGold,
            (true, true) => DemandCategory::GoldAndMore,
            (false, true) => DemandCategory::OnlyAlternative,
            (false, false) => DemandCategory::NoPurchase,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DemandCategory::OnlyGold => "Only Gold",
            DemandCategory::GoldAndMore => "Gold and More",
            DemandCategory::OnlyAlternative => "Only Alternative",
            DemandCategory::NoPurchase => "No Purchase",
        }
    }
}

/// One row of a results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub kind: ExperimentKind,
    pub index: usize,
    pub seed: u64,
    pub config_digest: String,
    pub question_id: String,
    pub detail: TrialDetail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "trial", rename_all = "snake_case")]
pub enum TrialDetail {
    Rational {
        strategy: Strategy,
        prices: Vec<Credits>,
        verdicts: Vec<Verdict>,
        outcome: RationalOutcome,
    },
    PriceSweep {
        inspection: bool,
        gold_price: Credits,
        gold_position: usize,
        prices: Vec<Credits>,
        verdicts: Vec<Verdict>,
        parse_failure: bool,
        category: DemandCategory,
    },
    Positional {
        /// `permutation[slot]` is the index of the option shown in that slot.
        permutation: Vec<usize>,
        verdicts: Vec<Verdict>,
        parse_failure: bool,
    },
    Answer {
        arm: Contestant,
        budget: Credits,
        inspection: bool,
        model: String,
        answer: String,
        spent: Credits,
        run_digest: String,
    },
    Match {
        first: Contestant,
        second: Contestant,
        presented_a: Contestant,
        winner: Option<Contestant>,
        first_spent: Credits,
        second_spent: Credits,
    },
}

pub fn write_results(records: &[TrialRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("trial serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_results(input: &str) -> Result<Vec<TrialRecord>, ExperimentError> {
    input
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ExperimentError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub type ChatFactory<'a> = dyn Fn(&str) -> Box<dyn ChatProvider> + Sync + 'a;

/// Everything an experiment may draw on.
pub struct ExperimentContext<'a> {
    pub corpus: &'a Corpus,
    pub index: &'a EmbeddingIndex,
    pub queries: &'a [QuerySpec],
    pub paraphrases: &'a [ParaphraseItem],
    pub base: &'a SimConfig,
    pub embedder: &'a dyn Embedder,
    pub reranker: &'a dyn Reranker,
    /// Chat client for a model name.
    pub chat_for: &'a ChatFactory<'a>,
}

/// A planned trial: enough to run it in isolation.
#[derive(Clone, Debug, PartialEq)]
pub enum TrialPlan {
    Rational {
        item: usize,
        strategy: Strategy,
        prices: [Credits; 2],
    },
    PriceSweep {
        question: usize,
        gold_price: Credits,
        inspection: bool,
    },
    Positional {
        question: usize,
        permutation: [usize; 3],
    },
    Answer {
        question: usize,
        arm: Arm,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: Contestant,
    pub budget: Credits,
    pub inspection: bool,
    pub model: String,
}

fn params<T: DeserializeOwned>(spec: &ExperimentSpec) -> Result<T, ExperimentError> {
    serde_json::from_value(spec.parameters.clone()).map_err(|e| ExperimentError::InvalidSpec {
        kind: spec.kind,
        message: e.to_string(),
    })
}

fn invalid(kind: ExperimentKind, message: &str) -> ExperimentError {
    ExperimentError::InvalidSpec {
        kind,
        message: message.to_owned(),
    }
}

/// Seed for trial `index`, derived from the experiment seed.
pub fn trial_seed(seed: u64, index: usize) -> u64 {
    let digest = sha256_hex(format!("{seed}:{index}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex")
}

fn config_digest(base: &SimConfig, spec: &ExperimentSpec) -> String {
    let body = serde_json::json!({ "config": base, "kind": spec.kind, "parameters": spec.parameters });
    sha256_hex(body.to_string().as_bytes())
}

/// Indices into `ctx.queries` for this spec, in order.
fn select_questions(
    spec: &ExperimentSpec,
    queries: &[QuerySpec],
    needed: Option<usize>,
) -> Result<Vec<usize>, ExperimentError> {
    let pool: Vec<usize> = if spec.questions.is_empty() {
        (0..queries.len()).collect()
    } else {
        spec.questions
            .iter()
            .map(|id| {
                queries
                    .iter()
                    .position(|q| &q.id == id)
                    .ok_or_else(|| ExperimentError::UnknownQuestion(id.clone()))
            })
            .collect::<Result<_, _>>()?
    };
    match needed {
        Some(n) if n > pool.len() => Err(ExperimentError::TooFewQuestions {
            kind: spec.kind,
            needed: n,
            available: pool.len(),
        }),
        Some(n) => Ok(pool[..n].to_vec()),
        None if pool.is_empty() => Err(ExperimentError::TooFewQuestions {
            kind: spec.kind,
            needed: 1,
            available: 0,
        }),
        None => Ok(pool),
    }
}

fn validate_budgets(kind: ExperimentKind, budgets: &[Credits]) -> Result<(), ExperimentError> {
    if budgets.len() < 2 {
        return Err(invalid(kind, "need at least two budgets"));
    }
    let mut sorted = budgets.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != budgets.len() {
        return Err(invalid(kind, "budgets must be distinct"));
    }
    Ok(())
}

/// Validates `spec` and lists its trials in index order.
pub fn plan(spec: &ExperimentSpec, ctx: &ExperimentContext<'_>) -> Result<Vec<TrialPlan>, ExperimentError> {
    if spec.repetitions == 0 {
        return Err(invalid(spec.kind, "repetitions must be positive"));
    }
    let mut trials = Vec::new();
    match spec.kind {
        ExperimentKind::RationalSamePrice | ExperimentKind::RationalDiffPrice => {
            let p: RationalParams = params(spec)?;
            if p.strategies.is_empty() {
                return Err(invalid(spec.kind, "no strategies"));
            }
            if spec.kind == ExperimentKind::RationalDiffPrice && p.expensive_price <= p.price {
                return Err(invalid(spec.kind, "expensive_price must exceed price"));
            }
            let mut items: Vec<usize> = if spec.questions.is_empty() {
                (0..ctx.paraphrases.len()).collect()
            } else {
                spec.questions
                    .iter()
                    .map(|id| {
                        ctx.paraphrases
                            .iter()
                            .position(|x| &x.question_id == id)
                            .ok_or_else(|| ExperimentError::UnknownQuestion(id.clone()))
                    })
                    .collect::<Result<_, _>>()?
            };
            let needed = p.n_questions.unwrap_or(items.len().max(1));
            if needed > items.len() {
                return Err(ExperimentError::TooFewQuestions {
                    kind: spec.kind,
                    needed,
                    available: items.len(),
                });
            }
            items.truncate(needed);
            for _ in 0..spec.repetitions {
                for &item in &items {
                    for &strategy in &p.strategies {
                        let prices = match spec.kind {
                            ExperimentKind::RationalSamePrice => [p.price, p.price],
                            _ => [p.price, p.expensive_price],
                        };
                        trials.push(TrialPlan::Rational { item, strategy, prices });
                    }
                }
            }
        }
        ExperimentKind::PriceSweep => {
            let p: PriceSweepParams = params(spec)?;
            if p.gold_prices.is_empty() || p.inspection_modes.is_empty() {
                return Err(invalid(spec.kind, "empty price grid or inspection modes"));
            }
            if p.n_alternatives == 0 {
                return Err(invalid(spec.kind, "need at least one alternative"));
            }
            let questions = select_questions(spec, ctx.queries, Some(p.n_questions))?;
            for _ in 0..spec.repetitions {
                for &inspection in &p.inspection_modes {
                    for &question in &questions {
                        for &gold_price in &p.gold_prices {
                            trials.push(TrialPlan::PriceSweep {
                                question,
                                gold_price,
                                inspection,
                            });
                        }
                    }
                }
            }
        }
        ExperimentKind::PositionalBias => {
            let p: PositionalParams = params(spec)?;
            let questions = select_questions(spec, ctx.queries, Some(p.n_questions))?;
            const PERMUTATIONS: [[usize; 3]; 6] =
                [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            for _ in 0..spec.repetitions {
                for &question in &questions {
                    for permutation in PERMUTATIONS {
                        trials.push(TrialPlan::Positional { question, permutation });
                    }
                }
            }
        }
        ExperimentKind::BudgetSweep | ExperimentKind::InspectionCompare | ExperimentKind::ModelCompare => {
            let (arms, n_questions) = arms(spec, ctx.base)?;
            let questions = select_questions(spec, ctx.queries, n_questions)?;
            for _ in 0..spec.repetitions {
                for &question in &questions {
                    for arm in &arms {
                        trials.push(TrialPlan::Answer {
                            question,
                            arm: arm.clone(),
                        });
                    }
                }
            }
        }
    }
    Ok(trials)
}

fn arms(spec: &ExperimentSpec, base: &SimConfig) -> Result<(Vec<Arm>, Option<usize>), ExperimentError> {
    let model = base.provider.chat_model.clone();
    Ok(match spec.kind {
        ExperimentKind::BudgetSweep => {
            let p: BudgetSweepParams = params(spec)?;
            validate_budgets(spec.kind, &p.budgets)?;
            if p.n_orderings == 0 {
                return Err(invalid(spec.kind, "n_orderings must be positive"));
            }
            let arms = p
                .budgets
                .iter()
                .map(|&b| Arm {
                    label: format!("budget={b}").into(),
                    budget: b,
                    inspection: base.inspection,
                    model: model.clone(),
                })
                .collect();
            (arms, p.n_questions)
        }
        ExperimentKind::InspectionCompare => {
            let p: InspectionParams = params(spec)?;
            if p.budgets.is_empty() {
                return Err(invalid(spec.kind, "no budgets"));
            }
            let mut sorted = p.budgets.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != p.budgets.len() {
                return Err(invalid(spec.kind, "budgets must be distinct"));
            }
            let arms = p
                .budgets
                .iter()
                .flat_map(|&b| {
                    [true, false].map(|inspection| Arm {
                        label: format!(
                            "{}@{b}",
                            if inspection { "inspection" } else { "metadata" }
                        )
                        .into(),
                        budget: b,
                        inspection,
                        model: model.clone(),
                    })
                })
                .collect();
            (arms, p.n_questions)
        }
        ExperimentKind::ModelCompare => {
            let p: ModelCompareParams = params(spec)?;
            if p.models.len() < 2 {
                return Err(invalid(spec.kind, "need at least two models"));
            }
            let arms = p
                .models
                .iter()
                .map(|m| Arm {
                    label: m.as_str().into(),
                    budget: p.budget,
                    inspection: base.inspection,
                    model: m.clone(),
                })
                .collect();
            (arms, p.n_questions)
        }
        _ => unreachable!("decision experiments have no arms"),
    })
}

/// Passages other than the gold one, best BM25 match first, with content
/// distinct from the gold passage and from each other.
pub fn alternatives(corpus: &Corpus, query: &QuerySpec, n: usize) -> Vec<Passage> {
    let gold = corpus.get(&query.gold_passage_id).map(|p| p.content.clone());
    let mut scored: Vec<(PassageId, f64)> =
        bm25_scores(&query.question, corpus, &RetrievalConfig::default()).into_iter().collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut seen: Vec<String> = gold.into_iter().collect();
    let mut out = Vec::new();
    for (id, _) in scored {
        if out.len() == n {
            break;
        }
        let Some(p) = corpus.get(&id) else { continue };
        if id == query.gold_passage_id || seen.contains(&p.content) {
            continue;
        }
        seen.push(p.content.clone());
        out.push(p.clone());
    }
    out
}

fn shortlist_of(passages: &[Passage], mode: ShortlistMode) -> Shortlist {
    Shortlist {
        entries: passages
            .iter()
            .enumerate()
            .map(|(i, p)| ShortlistEntry {
                quote: Quote::new(format!("Q{:06}", i + 1).into(), "T00001".into(), p.clone(), 0.0),
                rerank_score: None,
            })
            .collect(),
        mode,
    }
}

/// Verdicts for one presentation, plus whether parsing failed.
fn decide(
    ctx: &ExperimentContext<'_>,
    question: &str,
    passages: &[Passage],
    mode: ShortlistMode,
    strategy: Strategy,
) -> (Vec<Verdict>, bool) {
    let chat = (ctx.chat_for)(&ctx.base.provider.chat_model);
    let mut gateway = Gateway::new(chat.as_ref(), ctx.base.provider.chat_model.clone());
    let shortlist = shortlist_of(passages, mode);
    let total: Credits = passages.iter().map(|p| p.price).sum();
    // the probes give the buyer enough to buy everything
    let balance = total.max(ctx.base.budget);
    match decide_purchases(question, &shortlist, balance, strategy, &mut gateway) {
        Ok(d) => {
            let failed = d.parse_failure.is_some();
            (d.verdicts, failed)
        }
        Err(_) => (vec![Verdict::Pass; passages.len()], true),
    }
}

fn run_answer(ctx: &ExperimentContext<'_>, query: &QuerySpec, arm: &Arm, seed: u64) -> (String, Credits, String) {
    let mut config = ctx.base.clone();
    config.budget = arm.budget;
    config.inspection = arm.inspection;
    config.provider.chat_model = arm.model.clone();
    config.seed = seed;
    let chat = (ctx.chat_for)(&arm.model);
    let engine = Engine {
        corpus: ctx.corpus,
        index: ctx.index,
        chat: chat.as_ref(),
        embedder: ctx.embedder,
        reranker: ctx.reranker,
    };
    let record = engine.run(query, &config);
    let digest = sha256_hex(record.to_jsonl().as_bytes());
    (record.final_answer().to_owned(), record.total_spent(), digest)
}

/// Runs trial `index` of `spec` on its own.
pub fn run_trial(
    spec: &ExperimentSpec,
    ctx: &ExperimentContext<'_>,
    index: usize,
) -> Result<TrialRecord, ExperimentError> {
    let plans = plan(spec, ctx)?;
    let p = plans.get(index).ok_or(ExperimentError::NoSuchTrial(index))?;
    execute(spec, ctx, index, p, &config_digest(ctx.base, spec))
}

fn execute(
    spec: &ExperimentSpec,
    ctx: &ExperimentContext<'_>,
    index: usize,
    trial: &TrialPlan,
    digest: &str,
) -> Result<TrialRecord, ExperimentError> {
    let seed = trial_seed(spec.seed, index);
    let (question_id, detail) = match trial {
        TrialPlan::Rational { item, strategy, prices } => {
            let item = &ctx.paraphrases[*item];
            // which paraphrase carries which price is drawn per trial
            let mut order = [0usize, 1];
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let passages: Vec<Passage> = (0..2)
                .map(|slot| Passage {
                    id: format!("{}-para{}", item.question_id, order[slot] + 1).into(),
                    paper_title: item.paper_title.clone(),
                    section_title: item.section_title.clone(),
                    content: item.paraphrases[order[slot]].clone(),
                    price: prices[slot],
                    owner_vendor: "vendor".into(),
                    first_author_mean_citations: 0.0,
                })
                .collect();
            let (verdicts, failed) = decide(ctx, &item.question, &passages, ShortlistMode::Inspection, *strategy);
            let outcome = RationalOutcome::classify(&verdicts, prices, failed);
            (
                item.question_id.clone(),
                TrialDetail::Rational {
                    strategy: *strategy,
                    prices: prices.to_vec(),
                    verdicts,
                    outcome,
                },
            )
        }
        TrialPlan::PriceSweep { question, gold_price, inspection } => {
            let p: PriceSweepParams = params(spec)?;
            let query = &ctx.queries[*question];
            let gold = ctx.corpus.get(&query.gold_passage_id).expect("validated gold");
            let alts = alternatives(ctx.corpus, query, p.n_alternatives);
            if alts.len() < p.n_alternatives {
                return Err(ExperimentError::NoAlternatives(query.id.clone()));
            }
            let mut passages: Vec<Passage> = alts.iter().map(|a| a.with_price(p.other_price)).collect();
            passages.push(gold.with_price(*gold_price));
            passages.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let gold_position = passages
                .iter()
                .position(|x| x.id == gold.id)
                .expect("gold included");
            let mode = if *inspection {
                ShortlistMode::Inspection
            } else {
                ShortlistMode::MetadataOnly
            };
            let (verdicts, failed) = decide(ctx, &query.question, &passages, mode, p.strategy);
            let category = DemandCategory::classify(&verdicts, gold_position);
            (
                query.id.clone(),
                TrialDetail::PriceSweep {
                    inspection: *inspection,
                    gold_price: *gold_price,
                    gold_position,
                    prices: passages.iter().map(|x| x.price).collect(),
                    verdicts,
                    parse_failure: failed,
                    category,
                },
            )
        }
        TrialPlan::Positional { question, permutation } => {
            let p: PositionalParams = params(spec)?;
            let query = &ctx.queries[*question];
            let gold = ctx.corpus.get(&query.gold_passage_id).expect("validated gold");
            let mut options = vec![gold.with_price(p.price)];
            options.extend(alternatives(ctx.corpus, query, 2).into_iter().map(|a| a.with_price(p.price)));
            if options.len() < 3 {
                return Err(ExperimentError::NoAlternatives(query.id.clone()));
            }
            let shown: Vec<Passage> = permutation.iter().map(|&i| options[i].clone()).collect();
            let (verdicts, failed) = decide(ctx, &query.question, &shown, ShortlistMode::Inspection, p.strategy);
            (
                query.id.clone(),
                TrialDetail::Positional {
                    permutation: permutation.to_vec(),
                    verdicts,
                    parse_failure: failed,
                },
            )
        }
        TrialPlan::Answer { question, arm } => {
            let query = &ctx.queries[*question];
            let (answer, spent, run_digest) = run_answer(ctx, query, arm, seed);
            (
                query.id.clone(),
                TrialDetail::Answer {
                    arm: arm.label.clone(),
                    budget: arm.budget,
                    inspection: arm.inspection,
                    model: arm.model.clone(),
                    answer,
                    spent,
                    run_digest,
                },
            )
        }
    };
    Ok(TrialRecord {
        kind: spec.kind,
        index,
        seed,
        config_digest: digest.to_owned(),
        question_id,
        detail,
    })
}

#[cfg(feature = "cli")]
fn map_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "cli"))]
fn map_indexed<T, F: Fn(usize) -> T>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Runs every planned trial, then, for answer experiments, judges the
/// answers pairwise. Rows come back in trial-index order.
pub fn run_experiment(
    spec: &ExperimentSpec,
    ctx: &ExperimentContext<'_>,
) -> Result<Vec<TrialRecord>, ExperimentError> {
    let plans = plan(spec, ctx)?;
    let digest = config_digest(ctx.base, spec);
    let mut records = map_indexed(plans.len(), |i| execute(spec, ctx, i, &plans[i], &digest))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    if matches!(
        spec.kind,
        ExperimentKind::BudgetSweep | ExperimentKind::InspectionCompare | ExperimentKind::ModelCompare
    ) {
        let matches = judge_answers(spec, ctx, &records, &digest);
        records.extend(matches);
    }
    Ok(records)
}

struct AnswerRef<'r> {
    question_id: &'r str,
    arm: &'r Contestant,
    budget: Credits,
    inspection: bool,
    answer: &'r str,
    spent: Credits,
}

/// Which answer pairs get compared: every pair of budgets (budget sweep),
/// inspection against metadata at the same budget, or every pair of models.
fn pairs_to_judge<'r>(kind: ExperimentKind, answers: &[AnswerRef<'r>]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..answers.len() {
        for j in i + 1..answers.len() {
            let (a, b) = (&answers[i], &answers[j]);
            if a.question_id != b.question_id || a.arm == b.arm {
                continue;
            }
            let keep = match kind {
                ExperimentKind::InspectionCompare => a.budget == b.budget && a.inspection != b.inspection,
                _ => true,
            };
            if keep {
                out.push((i, j));
            }
        }
    }
    out
}

fn judge_answers(
    spec: &ExperimentSpec,
    ctx: &ExperimentContext<'_>,
    records: &[TrialRecord],
    digest: &str,
) -> Vec<TrialRecord> {
    let answers: Vec<AnswerRef<'_>> = records
        .iter()
        .filter_map(|r| match &r.detail {
            TrialDetail::Answer {
                arm,
                budget,
                inspection,
                answer,
                spent,
                ..
            } => Some(AnswerRef {
                question_id: &r.question_id,
                arm,
                budget: *budget,
                inspection: *inspection,
                answer,
                spent: *spent,
            }),
            _ => None,
        })
        .collect();
    let provider = &ctx.base.provider;
    let mut golds: BTreeMap<&str, String> = BTreeMap::new();
    let reference = (ctx.chat_for)(&provider.reference_model);
    let mut ref_gateway = Gateway::new(reference.as_ref(), provider.reference_model.clone());
    for a in &answers {
        if !golds.contains_key(a.question_id) {
            let q = ctx.queries.iter().find(|q| q.id == a.question_id).expect("planned question");
            let gold = closed_book_answer(&q.question, &mut ref_gateway).unwrap_or_default();
            golds.insert(a.question_id, gold);
        }
    }
    let pairs = pairs_to_judge(spec.kind, &answers);
    let first_index = records.len();
    map_indexed(pairs.len(), |k| {
        let (i, j) = pairs[k];
        let (a, b) = (&answers[i], &answers[j]);
        let index = first_index + k;
        let seed = trial_seed(spec.seed, index);
        let judge = (ctx.chat_for)(&provider.judge_model);
        let mut gateway = Gateway::new(judge.as_ref(), provider.judge_model.clone());
        let q = ctx.queries.iter().find(|q| q.id == a.question_id).expect("planned question");
        let judged = pairwise_evaluate(
            &q.id,
            &q.question,
            Entry { contestant: a.arm, answer: a.answer },
            Entry { contestant: b.arm, answer: b.answer },
            &golds[a.question_id],
            seed,
            &mut gateway,
        );
        let (presented_a, winner) = match judged {
            Ok(j) => (j.presented_a.clone(), j.result.map(|m| m.winner().clone())),
            Err(_) => (a.arm.clone(), None),
        };
        TrialRecord {
            kind: spec.kind,
            index,
            seed,
            config_digest: digest.to_owned(),
            question_id: q.id.clone(),
            detail: TrialDetail::Match {
                first: a.arm.clone(),
                second: b.arm.clone(),
                presented_a,
                winner,
                first_spent: a.spent,
                second_spent: b.spent,
            },
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rational_classification() {
        use Verdict::{Buy, Pass};
        assert_eq!(RationalOutcome::classify(&[Buy, Buy], &[10, 10], false), RationalOutcome::BoughtBoth);
        assert_eq!(RationalOutcome::classify(&[Buy, Pass], &[10, 10], false), RationalOutcome::BoughtOne);
        assert_eq!(RationalOutcome::classify(&[Pass, Buy], &[10, 20], false), RationalOutcome::BoughtExpensive);
        assert_eq!(RationalOutcome::classify(&[Buy, Pass], &[10, 20], false), RationalOutcome::BoughtOne);
        assert_eq!(RationalOutcome::classify(&[Pass, Pass], &[10, 20], false), RationalOutcome::NoPurchase);
        assert_eq!(RationalOutcome::classify(&[Pass, Pass], &[10, 20], true), RationalOutcome::ParseFailure);
    }

    #[test]
    fn demand_categories() {
        use Verdict::{Buy, Pass};
        assert_eq!(DemandCategory::classify(&[Pass, Buy, Pass], 1), DemandCategory::OnlyGold);
        assert_eq!(DemandCategory::classify(&[Buy, Buy, Pass], 1), DemandCategory::GoldAndMore);
        assert_eq!(DemandCategory::classify(&[Buy, Pass, Pass], 1), DemandCategory::OnlyAlternative);
        assert_eq!(DemandCategory::classify(&[Pass, Pass, Pass], 1), DemandCategory::NoPurchase);
    }

    #[test]
    fn kinds_parse_from_names() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.as_str().parse::<ExperimentKind>(), Ok(k));
        }
        assert!("nope".parse::<ExperimentKind>().is_err());
    }

    #[test]
    fn trial_seeds_differ() {
        assert_ne!(trial_seed(1, 0), trial_seed(1, 1));
        assert_eq!(trial_seed(1, 5), trial_seed(1, 5));
    }
}
