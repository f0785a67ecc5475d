//! Offline stand-in for a chat model.
//!
//! Replies are a pure function of (seed, template, prompt digest), so a run
//! driven by this provider is reproducible byte for byte. The provider reads
//! what it needs (option prices, the question, passages) back out of the
//! rendered prompt, which keeps it honest: it can only use information that
//! was actually sent to it.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{ChatProvider, ChatRequest, GatewayError, TemplateId};
use crate::text::{sha256_hex, tokenize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PurchasePolicy {
    /// Each option is bought independently with `buy_probability`.
    Random,
    BuyAll,
    PassAll,
    First,
    Last,
    /// Buys the single cheapest option (lowest index on ties).
    Cheapest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgePolicy {
    /// Prefers the answer sharing more words with the question and gold answer.
    Overlap,
    AlwaysA,
    AlwaysB,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticPolicy {
    pub purchase: PurchasePolicy,
    pub buy_probability: f64,
    /// Probability that a follow-up prompt yields any questions at all.
    pub followup_probability: f64,
    pub max_followups: usize,
    /// Probability of a reply that ignores the requested output format.
    pub garble_rate: f64,
    pub judge: JudgePolicy,
}

impl Default for SyntheticPolicy {
    fn default() -> Self {
        Self {
            purchase: PurchasePolicy::Random,
            buy_probability: 0.5,
            followup_probability: 0.6,
            max_followups: 3,
            garble_rate: 0.0,
            judge: JudgePolicy::Overlap,
        }
    }
}

pub struct SyntheticProvider {
    seed: u64,
    policy: SyntheticPolicy,
    calls: AtomicU64,
}

macro_rules! regex {
    ($re:literal) => {{
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| Regex::new($re).expect("valid regex"))
    }};
}

const GARBLED: &str = "Bobby and Michael talked for a long time but never wrote anything down.";

impl SyntheticProvider {
    pub fn new(seed: u64, policy: SyntheticPolicy) -> Self {
        Self {
            seed,
            policy,
            calls: AtomicU64::new(0),
        }
    }

    pub fn policy(&self) -> &SyntheticPolicy {
        &self.policy
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn rng(&self, request: &ChatRequest) -> ChaCha8Rng {
        let key = sha256_hex(format!("{}:{}", self.seed, request.digest()).as_bytes());
        let seed = u64::from_str_radix(&key[..16], 16).expect("hex digest");
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn quote_reply(&self, prompt: &str, rng: &mut ChaCha8Rng) -> String {
        let prices: Vec<u64> = regex!(r"Option (\d+) costs \$(\d+)")
            .captures_iter(prompt)
            .filter_map(|c| c[2].parse().ok())
            .collect();
        let n = prices.len();
        let buys: Vec<bool> = match self.policy.purchase {
            PurchasePolicy::Random => (0..n)
                .map(|_| rng.random_bool(self.policy.buy_probability.clamp(0.0, 1.0)))
                .collect(),
            PurchasePolicy::BuyAll => vec![true; n],
            PurchasePolicy::PassAll => vec![false; n],
            PurchasePolicy::First => (0..n).map(|i| i == 0).collect(),
            PurchasePolicy::Last => (0..n).map(|i| i + 1 == n).collect(),
            PurchasePolicy::Cheapest => {
                let cheapest = prices
                    .iter()
                    .enumerate()
                    .min_by_key(|&(i, p)| (*p, i))
                    .map(|(i, _)| i);
                (0..n).map(|i| Some(i) == cheapest).collect()
            }
        };
        let mut out = String::new();
        for (i, price) in prices.iter().enumerate() {
            out.push_str(&format!(
                "Bobby: Option {} looks relevant to the question.\nMichael: It costs ${price}; is it worth it?\n\n",
                i + 1
            ));
        }
        out.push_str("VERDICT:\n");
        for (i, buy) in buys.iter().enumerate() {
            out.push_str(&format!(
                "Option {}: {}\n",
                i + 1,
                if *buy { "Buy" } else { "Pass" }
            ));
        }
        out
    }

    fn followup_reply(&self, prompt: &str, rng: &mut ChaCha8Rng) -> String {
        let question = capture(prompt, regex!(r"The question is: (.*)")).unwrap_or_default();
        let mut out = String::from("Bobby: The answer could go deeper.\nMichael: Only if it helps the client.\n");
        if self.policy.max_followups == 0
            || !rng.random_bool(self.policy.followup_probability.clamp(0.0, 1.0))
        {
            out.push_str("They agree the answer is sufficient.\n");
            return out;
        }
        let words: Vec<String> = tokenize(&question)
            .into_iter()
            .filter(|w| w.len() > 3)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let k = rng.random_range(1..=self.policy.max_followups);
        for i in 0..k {
            let topic = if words.is_empty() {
                "this topic".to_owned()
            } else {
                let a = &words[rng.random_range(0..words.len())];
                let b = &words[rng.random_range(0..words.len())];
                if a == b {
                    a.clone()
                } else {
                    format!("{a} and {b}")
                }
            };
            out.push_str(&format!(
                "FOLLOW-UP QUESTION: What detail {} is known about {topic}?\n",
                i + 1
            ));
        }
        out
    }

    fn synthesis_reply(&self, prompt: &str) -> String {
        let question = capture(prompt, regex!(r#"The question is "(.*)\?""#)).unwrap_or_default();
        let mut answer = format!("Regarding {question}:");
        let block = prompt
            .split_once("helpful.\n\n---")
            .and_then(|(_, rest)| rest.split_once("\n---\n\nYou'll solve"))
            .map(|(block, _)| block)
            .unwrap_or("");
        let mut n = 0;
        for cap in regex!(r"(?m)^\d+\. (.*)$").captures_iter(block) {
            n += 1;
            let lead: Vec<&str> = cap[1].split_whitespace().take(8).collect();
            answer.push_str(&format!(" ({n}) {}", lead.join(" ")));
        }
        if n == 0 {
            answer.push_str(" no purchased information was available.");
        }
        format!("The passages were discussed.\n<answer>{answer}</answer>")
    }

    fn refinement_reply(&self, prompt: &str) -> String {
        let initial = capture(prompt, regex!(r"The initial answer is: (.*)")).unwrap_or_default();
        let mut words: Vec<String> = initial.split_whitespace().map(str::to_owned).collect();
        for cap in regex!(r"(?m)^Answer: (.*)$").captures_iter(prompt) {
            words.extend(cap[1].split_whitespace().take(12).map(str::to_owned));
        }
        words.truncate(160);
        format!("<answer>{}</answer>", words.join(" "))
    }

    fn judge_reply(&self, prompt: &str, rng: &mut ChaCha8Rng) -> String {
        let caps = regex!(
            r"(?s)Question: (.*?)\n\nAnswer from student A: (.*?)\n\nAnswer from student B: (.*?)\n\nGold standard answer: (.*)"
        )
        .captures(prompt);
        let winner = match (self.policy.judge, caps) {
            (JudgePolicy::AlwaysA, _) => "A",
            (JudgePolicy::AlwaysB, _) => "B",
            (JudgePolicy::Overlap, Some(c)) => {
                let reference: BTreeSet<String> = tokenize(&c[1])
                    .into_iter()
                    .chain(tokenize(&c[4]))
                    .collect();
                let score = |text: &str| {
                    tokenize(text)
                        .into_iter()
                        .collect::<BTreeSet<_>>()
                        .iter()
                        .filter(|t| reference.contains(*t))
                        .count()
                };
                let (a, b) = (score(&c[2]), score(&c[3]));
                if a != b {
                    if a > b { "A" } else { "B" }
                } else {
                    let (la, lb) = (c[2].len(), c[3].len());
                    if la != lb {
                        if la > lb { "A" } else { "B" }
                    } else if rng.random_bool(0.5) {
                        "A"
                    } else {
                        "B"
                    }
                }
            }
            _ => {
                if rng.random_bool(0.5) {
                    "A"
                } else {
                    "B"
                }
            }
        };
        format!(
            "Michael: I lean one way.\nBobby: I lean the other.\nMichael: Fair enough.\n\nVERDICT: Better answer from student {winner}"
        )
    }
}

fn capture(text: &str, re: &Regex) -> Option<String> {
    re.captures(text).map(|c| c[1].trim().to_owned())
}

impl ChatProvider for SyntheticProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut rng = self.rng(request);
        let prompt = request.prompt_text();
        let structured = matches!(
            request.template,
            TemplateId::QuoteDebate
                | TemplateId::QuoteDirect
                | TemplateId::QuoteCot
                | TemplateId::AnswerSynthesis
                | TemplateId::RefinementStep2
                | TemplateId::Evaluator
        );
        if structured
            && self.policy.garble_rate > 0.0
            && rng.random_bool(self.policy.garble_rate.clamp(0.0, 1.0))
        {
            return Ok(GARBLED.to_owned());
        }
        Ok(match request.template {
            TemplateId::QuoteDebate | TemplateId::QuoteDirect | TemplateId::QuoteCot => {
                self.quote_reply(&prompt, &mut rng)
            }
            TemplateId::Followup => self.followup_reply(&prompt, &mut rng),
            TemplateId::AnswerSynthesis => self.synthesis_reply(&prompt),
            TemplateId::RefinementStep1 => {
                "The question is general, so the answer should combine the follow-up answers.".to_owned()
            }
            TemplateId::RefinementStep2 => self.refinement_reply(&prompt),
            TemplateId::ClosedBook => {
                let q = request
                    .messages
                    .last()
                    .map(|m| m.content.clone())
                    .unwrap_or_default();
                format!("From general knowledge: {q}")
            }
            TemplateId::Evaluator => self.judge_reply(&prompt, &mut rng),
            TemplateId::Hyde => {
                let q = capture(&prompt, regex!(r"Question: (.*)")).unwrap_or_default();
                format!("{q} This passage explains {q}")
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{parse_eval_verdict, parse_followups, parse_tagged_answer, parse_verdict, render, Slots, Student, Verdict};
    use serde_json::json;

    fn quote_request(prices: &[u64]) -> ChatRequest {
        let mut slots = Slots::new();
        slots.insert("question".into(), json!("Which retriever"));
        slots.insert("balance".into(), json!(100));
        slots.insert(
            "options".into(),
            json!(prices
                .iter()
                .map(|p| json!({"answer_block": "text", "price": p}))
                .collect::<Vec<_>>()),
        );
        render(TemplateId::QuoteDebate, &slots).unwrap()
    }

    #[test]
    fn policies_produce_parseable_verdicts() {
        let req = quote_request(&[10, 5, 7]);
        let verdict = |policy| {
            let p = SyntheticProvider::new(1, SyntheticPolicy { purchase: policy, ..Default::default() });
            parse_verdict(&p.complete(&req).unwrap(), 3).unwrap()
        };
        use Verdict::*;
        assert_eq!(verdict(PurchasePolicy::BuyAll), vec![Buy, Buy, Buy]);
        assert_eq!(verdict(PurchasePolicy::PassAll), vec![Pass, Pass, Pass]);
        assert_eq!(verdict(PurchasePolicy::Cheapest), vec![Pass, Buy, Pass]);
        assert_eq!(verdict(PurchasePolicy::Last), vec![Pass, Pass, Buy]);
        assert_eq!(verdict(PurchasePolicy::Random).len(), 3);
    }

    #[test]
    fn replies_are_deterministic_per_seed() {
        let req = quote_request(&[1, 2, 3, 4, 5, 6]);
        let a = SyntheticProvider::new(7, SyntheticPolicy::default());
        let b = SyntheticProvider::new(7, SyntheticPolicy::default());
        assert_eq!(a.complete(&req).unwrap(), b.complete(&req).unwrap());
    }

    #[test]
    fn synthesis_and_followups_parse() {
        let mut slots = Slots::new();
        slots.insert("question".into(), json!("How does dense retrieval work"));
        slots.insert("quotes".into(), json!([{"answer_block": "Dense retrieval embeds queries."}]));
        let p = SyntheticProvider::new(3, SyntheticPolicy::default());
        let answer = parse_tagged_answer(&p.complete(&render(TemplateId::AnswerSynthesis, &slots).unwrap()).unwrap()).unwrap();
        assert!(answer.contains("Dense retrieval embeds queries."));

        let always = SyntheticProvider::new(3, SyntheticPolicy { followup_probability: 1.0, ..Default::default() });
        let mut slots = Slots::new();
        slots.insert("question".into(), json!("How does dense retrieval work"));
        slots.insert("current_answer".into(), json!("It embeds."));
        let qs = parse_followups(&always.complete(&render(TemplateId::Followup, &slots).unwrap()).unwrap());
        assert!((1..=3).contains(&qs.len()));
    }

    #[test]
    fn overlap_judge_prefers_gold_overlap() {
        let mut slots = Slots::new();
        slots.insert("question".into(), json!("What is BM25"));
        slots.insert("answer_a".into(), json!("Something unrelated entirely."));
        slots.insert("answer_b".into(), json!("BM25 is a ranking function over term frequencies."));
        slots.insert("answer_gold".into(), json!("A ranking function using term frequencies."));
        let p = SyntheticProvider::new(0, SyntheticPolicy::default());
        let reply = p.complete(&render(TemplateId::Evaluator, &slots).unwrap()).unwrap();
        assert_eq!(parse_eval_verdict(&reply), Ok(Student::B));
    }
}
