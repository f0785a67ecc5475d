//! Prompt templates.
//!
//! Template bodies live in `templates/*.hbs` as handlebars text split into
//! role sections by `<<system>>`, `<<user>>` and `<<assistant NAME>>` marker
//! lines. An assistant marker ends one model turn; the two-turn refinement
//! template is rendered either up to its first turn (step 1) or with the
//! step-1 reply filled in as `rationale` (step 2).

use std::collections::BTreeMap;
use std::sync::OnceLock;

use handlebars::{handlebars_helper, Handlebars};
use serde_json::Value;

use super::{ChatMessage, ChatRequest, GatewayError, Role, TemplateId};

/// Slot name to value. List-valued slots are JSON arrays of objects.
pub type Slots = serde_json::Map<String, Value>;

struct TemplateSpec {
    source: &'static str,
    /// `max_tokens` of each assistant turn, in order.
    max_tokens: &'static [u32],
    required: &'static [&'static str],
}

fn spec(id: TemplateId) -> TemplateSpec {
    const QUOTE: &[&str] = &["question", "options", "balance"];
    const REFINE: &[&str] = &["question", "original_answer", "follow_up_questions"];
    match id {
        TemplateId::QuoteDebate => TemplateSpec {
            source: include_str!("../../templates/quote_debate.hbs"),
            max_tokens: &[2048],
            required: QUOTE,
        },
        TemplateId::QuoteDirect => TemplateSpec {
            source: include_str!("../../templates/quote_direct.hbs"),
            max_tokens: &[2048],
            required: QUOTE,
        },
        TemplateId::QuoteCot => TemplateSpec {
            source: include_str!("../../templates/quote_cot.hbs"),
            max_tokens: &[2048],
            required: QUOTE,
        },
        TemplateId::AnswerSynthesis => TemplateSpec {
            source: include_str!("../../templates/answer_synthesis.hbs"),
            max_tokens: &[1024],
            required: &["question", "quotes"],
        },
        TemplateId::Followup => TemplateSpec {
            source: include_str!("../../templates/followup.hbs"),
            max_tokens: &[1024],
            required: &["question", "current_answer"],
        },
        TemplateId::RefinementStep1 => TemplateSpec {
            source: include_str!("../../templates/refinement.hbs"),
            max_tokens: &[2048, 512],
            required: REFINE,
        },
        TemplateId::RefinementStep2 => TemplateSpec {
            source: include_str!("../../templates/refinement.hbs"),
            max_tokens: &[2048, 512],
            required: &[
                "question",
                "original_answer",
                "follow_up_questions",
                "rationale",
            ],
        },
        TemplateId::ClosedBook => TemplateSpec {
            source: include_str!("../../templates/closed_book.hbs"),
            max_tokens: &[512],
            required: &["question"],
        },
        TemplateId::Evaluator => TemplateSpec {
            source: include_str!("../../templates/evaluator.hbs"),
            max_tokens: &[1024],
            required: &["question", "answer_a", "answer_b", "answer_gold"],
        },
        TemplateId::Hyde => TemplateSpec {
            source: include_str!("../../templates/hyde.hbs"),
            max_tokens: &[512],
            required: &["question"],
        },
    }
}

#[derive(Debug)]
enum Section {
    Message(Role, String),
    Turn(String),
}

fn sections(source: &str) -> Vec<Section> {
    let mut out = Vec::new();
    let mut current: Option<(Role, String)> = None;
    for line in source.split_inclusive('\n') {
        let marker = line.trim_end_matches('\n');
        let next = match marker {
            "<<system>>" => Some(Section::Message(Role::System, String::new())),
            "<<user>>" => Some(Section::Message(Role::User, String::new())),
            m if m.starts_with("<<assistant ") && m.ends_with(">>") => {
                Some(Section::Turn(m["<<assistant ".len()..m.len() - 2].to_owned()))
            }
            _ => None,
        };
        match next {
            Some(section) => {
                if let Some((role, body)) = current.take() {
                    out.push(Section::Message(role, body));
                }
                match section {
                    Section::Message(role, body) => current = Some((role, body)),
                    turn => out.push(turn),
                }
            }
            None => {
                if let Some((_, body)) = current.as_mut() {
                    body.push_str(line);
                }
            }
        }
    }
    if let Some((role, body)) = current {
        out.push(Section::Message(role, body));
    }
    out
}

handlebars_helper!(add: |a: i64, b: i64| a + b);

fn registry() -> &'static Handlebars<'static> {
    static REGISTRY: OnceLock<Handlebars<'static>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut hb = Handlebars::new();
        hb.set_strict_mode(true);
        hb.register_escape_fn(handlebars::no_escape);
        hb.register_helper("add", Box::new(add));
        hb
    })
}

/// Renders a template into a chat request. Message bodies are trimmed of
/// surrounding whitespace; everything between is reproduced verbatim.
pub fn render(id: TemplateId, slots: &Slots) -> Result<ChatRequest, GatewayError> {
    let spec = spec(id);
    for name in spec.required {
        if !slots.contains_key(*name) {
            return Err(GatewayError::MissingSlot((*name).to_owned()));
        }
    }
    let stop_after_turns = match id {
        TemplateId::RefinementStep2 => 2,
        _ => 1,
    };
    let data = Value::Object(slots.clone());
    let mut messages = Vec::new();
    let mut turns = 0;
    for section in sections(spec.source) {
        match section {
            Section::Message(role, body) => {
                let text = registry()
                    .render_template(&body, &data)
                    .map_err(|e| GatewayError::Render(e.to_string()))?;
                messages.push(ChatMessage {
                    role,
                    content: text.trim().to_owned(),
                });
            }
            Section::Turn(name) => {
                turns += 1;
                if turns == stop_after_turns {
                    break;
                }
                let filled = slots
                    .get(&name)
                    .and_then(Value::as_str)
                    .ok_or_else(|| GatewayError::MissingSlot(name.clone()))?;
                messages.push(ChatMessage {
                    role: Role::Assistant,
                    content: filled.to_owned(),
                });
            }
        }
    }
    Ok(ChatRequest {
        template: id,
        messages,
        temperature: 0.0,
        max_tokens: spec.max_tokens[stop_after_turns - 1],
        model: String::new(),
    })
}

/// Slot names a template needs, for documentation and validation.
pub fn required_slots(id: TemplateId) -> &'static [&'static str] {
    spec(id).required
}

/// Convenience for building list-valued slots from key/value rows.
pub fn rows<'a, I>(items: I) -> Value
where
    I: IntoIterator<Item = BTreeMap<&'a str, Value>>,
{
    Value::Array(
        items
            .into_iter()
            .map(|row| {
                Value::Object(
                    row.into_iter()
                        .map(|(k, v)| (k.to_owned(), v))
                        .collect(),
                )
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn quote_slots(n: usize) -> Slots {
        let mut slots = Slots::new();
        slots.insert("question".into(), json!("What is in-context learning"));
        slots.insert("balance".into(), json!(25));
        let options: Vec<Value> = (0..n)
            .map(|i| json!({"answer_block": format!("passage body {i}"), "price": 10 + i}))
            .collect();
        slots.insert("options".into(), Value::Array(options));
        slots
    }

    #[test]
    fn debate_lists_every_option_and_price() {
        let req = render(TemplateId::QuoteDebate, &quote_slots(2)).unwrap();
        assert_eq!(req.messages.len(), 2);
        assert_eq!(req.messages[0].role, Role::System);
        assert_eq!(req.max_tokens, 2048);
        assert_eq!(req.temperature, 0.0);
        let user = &req.messages[1].content;
        assert!(user.starts_with("The question is \"What is in-context learning?\""));
        assert!(user.contains(
            "---\nOption 1: passage body 0\n\nOption 2: passage body 1\n---"
        ));
        assert!(user.contains("Option 1 costs $10\nOption 2 costs $11\nTogether,"));
        assert!(user.contains("with their budget of $25."));
        assert!(user.ends_with("VERDICT:\n\nOption 1: <Buy or Pass>\nOption 2: <Buy or Pass>"));
        assert!(!user.contains("{{"));
    }

    #[test]
    fn system_prompt_reproduced_verbatim() {
        let req = render(TemplateId::QuoteDebate, &quote_slots(1)).unwrap();
        assert!(req.messages[0].content.starts_with(
            "Bobby William and Michael Burry are employed by a company that specializes in acquiring information."
        ));
        // trailing space before the paragraph break is part of the prompt
        assert!(req.messages[0]
            .content
            .contains("vendors sell pieces of information at a price. \n\nBobby wants"));
    }

    #[test]
    fn missing_slot_is_named() {
        let mut slots = quote_slots(2);
        slots.remove("balance");
        let err = render(TemplateId::QuoteDirect, &slots).unwrap_err();
        assert_eq!(err.to_string(), "missing template slot `balance`");
    }

    #[test]
    fn evaluator_includes_all_answers() {
        let mut slots = Slots::new();
        slots.insert("question".into(), json!("Q?"));
        slots.insert("answer_a".into(), json!("first answer"));
        slots.insert("answer_b".into(), json!("second answer"));
        slots.insert("answer_gold".into(), json!("gold answer"));
        let req = render(TemplateId::Evaluator, &slots).unwrap();
        assert_eq!(req.max_tokens, 1024);
        let user = &req.messages[1].content;
        assert_eq!(
            user,
            "Question: Q?\n\nAnswer from student A: first answer\n\nAnswer from student B: second answer\n\nGold standard answer: gold answer"
        );
        assert!(req.messages[0]
            .content
            .ends_with("VERDICT: Better answer from student <A or B>"));
    }

    #[test]
    fn refinement_has_two_turns() {
        let mut slots = Slots::new();
        slots.insert("question".into(), json!("Q"));
        slots.insert("original_answer".into(), json!("prelim"));
        slots.insert(
            "follow_up_questions".into(),
            json!([{"question": "c1", "answer": "a1"}, {"question": "c2", "answer": "a2"}]),
        );
        let step1 = render(TemplateId::RefinementStep1, &slots).unwrap();
        assert_eq!(step1.messages.len(), 2);
        assert_eq!(step1.max_tokens, 2048);
        assert!(step1.messages[1].content.contains("Question 1: c1\nAnswer: a1"));
        assert!(step1.messages[1].content.contains("Question 2: c2\nAnswer: a2"));

        slots.insert("rationale".into(), json!("thinking out loud"));
        let step2 = render(TemplateId::RefinementStep2, &slots).unwrap();
        assert_eq!(step2.messages.len(), 4);
        assert_eq!(step2.max_tokens, 512);
        assert_eq!(step2.messages[2].role, Role::Assistant);
        assert_eq!(step2.messages[2].content, "thinking out loud");
        assert!(step2.messages[3].content.ends_with("the whole effort will be wasted."));
    }

    #[test]
    fn synthesis_numbers_passages_and_allows_none() {
        let mut slots = Slots::new();
        slots.insert("question".into(), json!("Q"));
        slots.insert("quotes".into(), json!([{"answer_block": "alpha"}, {"answer_block": "beta"}]));
        let req = render(TemplateId::AnswerSynthesis, &slots).unwrap();
        assert!(req.messages[1].content.contains("---\n1. alpha\n\n2. beta\n---"));

        slots.insert("quotes".into(), json!([]));
        let empty = render(TemplateId::AnswerSynthesis, &slots).unwrap();
        assert!(empty.messages[1].content.contains("helpful.\n\n------\n\nYou'll solve"));
    }

    #[test]
    fn slot_values_are_not_escaped_or_reinterpreted() {
        let mut slots = Slots::new();
        slots.insert("question".into(), json!("a < b && {{c}}"));
        let req = render(TemplateId::ClosedBook, &slots).unwrap();
        assert_eq!(req.messages[1].content, "a < b && {{c}}");
    }
}
