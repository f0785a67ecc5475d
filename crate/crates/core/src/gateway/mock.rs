//! Scripted chat provider keyed by template id and prompt digest.
//!
//! Script files are line-delimited JSON:
//!
//! ```json
//! {"template":"quote_debate","digest":"3f2a…","response":"VERDICT:\nOption 1: Buy"}
//! {"template":"followup","digest":"*","response":"No follow-ups."}
//! {"template":"*","digest":"*","response":"<answer>fallback</answer>"}
//! ```
//!
//! Lookup order is exact digest, then the template wildcard, then the
//! default (`"*"`/`"*"`) entry.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{ChatProvider, ChatRequest, GatewayError, TemplateId};

#[derive(Debug, Deserialize, Serialize)]
struct ScriptRecord {
    template: String,
    digest: String,
    response: String,
}

#[derive(Debug, Default)]
pub struct MockScript {
    exact: BTreeMap<(TemplateId, String), String>,
    per_template: BTreeMap<TemplateId, String>,
    default: Option<String>,
    calls: AtomicU64,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_default(text: impl Into<String>) -> Self {
        Self {
            default: Some(text.into()),
            ..Self::default()
        }
    }

    pub fn insert(&mut self, template: TemplateId, digest: impl Into<String>, response: impl Into<String>) {
        self.exact.insert((template, digest.into()), response.into());
    }

    pub fn insert_any(&mut self, template: TemplateId, response: impl Into<String>) {
        self.per_template.insert(template, response.into());
    }

    pub fn set_default(&mut self, response: impl Into<String>) {
        self.default = Some(response.into());
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn parse(input: &str) -> Result<Self, String> {
        let mut script = Self::new();
        for (i, line) in input.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ScriptRecord =
                serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
            match (rec.template.as_str(), rec.digest.as_str()) {
                ("*", "*") => script.default = Some(rec.response),
                ("*", _) => return Err(format!("line {}: wildcard template needs wildcard digest", i + 1)),
                (t, d) => {
                    let template = TemplateId::parse(t)
                        .ok_or_else(|| format!("line {}: unknown template {t}", i + 1))?;
                    if d == "*" {
                        script.per_template.insert(template, rec.response);
                    } else {
                        script.exact.insert((template, d.to_owned()), rec.response);
                    }
                }
            }
        }
        Ok(script)
    }
}

impl ChatProvider for MockScript {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let digest = request.digest();
        self.exact
            .get(&(request.template, digest.clone()))
            .or_else(|| self.per_template.get(&request.template))
            .or(self.default.as_ref())
            .cloned()
            .ok_or(GatewayError::MockMiss {
                template: request.template,
                digest,
            })
    }
}

/// Wraps any closure as a provider; handy in tests that need a reply
/// computed from the prompt.
pub struct FnProvider<F>(pub F);

impl<F> ChatProvider for FnProvider<F>
where
    F: Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        (self.0)(request)
    }
}
