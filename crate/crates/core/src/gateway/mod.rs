//! Chat-completion abstraction: prompt templates, providers, and parsers for
//! the structured parts of model replies.
//!
//! Every model call goes through a [`Gateway`], which stamps the configured
//! model name on the request, forwards it to a [`ChatProvider`] and keeps a
//! transcript of [`Exchange`]s. The simulation engine drains that transcript
//! into its event log, so prompts and responses are recorded in call order.

pub mod mock;
pub mod parse;
pub mod synthetic;
pub mod templates;

#[cfg(feature = "http")]
pub mod http;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::sha256_hex;

pub use parse::{
    parse_eval_verdict, parse_followups, parse_tagged_answer, parse_verdict, ParseError, Student,
    Verdict,
};
pub use templates::{render, Slots};

/// Appended on the single structured re-ask before falling back.
pub const REASK_INSTRUCTION: &str = "Print the VERDICT block exactly as specified.";
/// Re-ask used for answer-tag templates.
pub const REASK_ANSWER_INSTRUCTION: &str =
    "Enclose your answer with <answer> and </answer> tags.";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("missing template slot `{0}`")]
    MissingSlot(String),
    #[error("template rendering failed: {0}")]
    Render(String),
    #[error("mock script has no response for template {template} with digest {digest}")]
    MockMiss { template: TemplateId, digest: String },
    #[error("provider request failed: {0}")]
    Network(String),
    #[error("provider returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("cannot decode provider response: {0}")]
    Decode(String),
    #[error("missing API key: environment variable {0} is not set")]
    MissingApiKey(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    QuoteDebate,
    QuoteDirect,
    QuoteCot,
    AnswerSynthesis,
    Followup,
    RefinementStep1,
    RefinementStep2,
    ClosedBook,
    Evaluator,
    Hyde,
}

impl TemplateId {
    pub const ALL: [TemplateId; 10] = [
        TemplateId::QuoteDebate,
        TemplateId::QuoteDirect,
        TemplateId::QuoteCot,
        TemplateId::AnswerSynthesis,
        TemplateId::Followup,
        TemplateId::RefinementStep1,
        TemplateId::RefinementStep2,
        TemplateId::ClosedBook,
        TemplateId::Evaluator,
        TemplateId::Hyde,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::QuoteDebate => "quote_debate",
            TemplateId::QuoteDirect => "quote_direct",
            TemplateId::QuoteCot => "quote_cot",
            TemplateId::AnswerSynthesis => "answer_synthesis",
            TemplateId::Followup => "followup",
            TemplateId::RefinementStep1 => "refinement_step1",
            TemplateId::RefinementStep2 => "refinement_step2",
            TemplateId::ClosedBook => "closed_book",
            TemplateId::Evaluator => "evaluator",
            TemplateId::Hyde => "hyde",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub template: TemplateId,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model: String,
}

impl ChatRequest {
    /// SHA-256 over the template id and the rendered messages. Model name and
    /// sampling parameters are deliberately not part of it.
    pub fn digest(&self) -> String {
        let mut body = String::new();
        body.push_str(self.template.as_str());
        for m in &self.messages {
            body.push('\n');
            body.push_str(match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            });
            body.push('\n');
            body.push_str(&m.content);
        }
        sha256_hex(body.as_bytes())
    }

    /// Every message concatenated; what a content scan should look at.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// The follow-up request used for a structured re-ask: the previous
    /// reply becomes an assistant turn and `instruction` a new user turn.
    pub fn reask(&self, previous_reply: &str, instruction: &str) -> Self {
        let mut next = self.clone();
        next.messages.push(ChatMessage {
            role: Role::Assistant,
            content: previous_reply.to_owned(),
        });
        next.messages.push(ChatMessage {
            role: Role::User,
            content: instruction.to_owned(),
        });
        next
    }
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError>;
}

impl<P: ChatProvider + ?Sized> ChatProvider for &P {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        (**self).complete(request)
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for Box<P> {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        (**self).complete(request)
    }
}

/// One request/response pair as seen by the gateway.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub template: TemplateId,
    pub digest: String,
    pub messages: Vec<ChatMessage>,
    pub response: Result<String, String>,
}

pub struct Gateway<'p> {
    provider: &'p dyn ChatProvider,
    model: String,
    transcript: Vec<Exchange>,
}

impl<'p> Gateway<'p> {
    pub fn new(provider: &'p dyn ChatProvider, model: impl Into<String>) -> Self {
        Self {
            provider,
            model: model.into(),
            transcript: Vec::new(),
        }
    }

    pub fn complete(&mut self, mut request: ChatRequest) -> Result<String, GatewayError> {
        if request.model.is_empty() {
            request.model = self.model.clone();
        }
        let result = self.provider.complete(&request);
        self.transcript.push(Exchange {
            template: request.template,
            digest: request.digest(),
            messages: request.messages,
            response: match &result {
                Ok(text) => Ok(text.clone()),
                Err(e) => Err(e.to_string()),
            },
        });
        result
    }

    /// Completes `request` and parses the reply; on a parse failure asks once
    /// more with `instruction` appended. Returns the last raw reply along
    /// with the parse outcome.
    pub fn complete_parsed<T>(
        &mut self,
        request: ChatRequest,
        instruction: &str,
        parse: impl Fn(&str) -> Result<T, ParseError>,
    ) -> Result<(String, Result<T, ParseError>), GatewayError> {
        let reply = self.complete(request.clone())?;
        match parse(&reply) {
            Ok(v) => Ok((reply, Ok(v))),
            Err(_) => {
                let retry = self.complete(request.reask(&reply, instruction))?;
                let parsed = parse(&retry);
                Ok((retry, parsed))
            }
        }
    }

    pub fn transcript(&self) -> &[Exchange] {
        &self.transcript
    }

    pub fn drain(&mut self) -> Vec<Exchange> {
        std::mem::take(&mut self.transcript)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_ids_round_trip_through_names() {
        for t in TemplateId::ALL {
            assert_eq!(TemplateId::parse(t.as_str()), Some(t));
            let json = serde_json::to_string(&t).unwrap();
            assert_eq!(json, format!("\"{}\"", t.as_str()));
        }
    }

    #[test]
    fn digest_ignores_model_name() {
        let mut slots = Slots::new();
        slots.insert("question".into(), "What is BM25".into());
        let a = render(TemplateId::ClosedBook, &slots).unwrap();
        let mut b = a.clone();
        b.model = "other".into();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
