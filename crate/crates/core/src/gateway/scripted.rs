//! Replay backend for tests and mock mode.
//!
//! A script is a list of steps. The step served for a request is the number of
//! assistant turns already in the conversation, so the backend holds no
//! mutable state and concurrent conversations never interfere. Several
//! conversations can share one file; each is selected by a key that must
//! occur in the first user message.

use std::path::Path;

use aho_corasick::{AhoCorasick, MatchKind};
use serde::{Deserialize, Serialize};

use super::{assistant_turns, ChatBackend, ChatMessage, GatewayError, GenerationOutput, GenerationParams, Part, Role};

pub const SCRIPT_SCHEMA: &str = "script/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    /// Substring the latest user or tool message must contain.
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub match_text: Option<String>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_span: Option<(usize, usize)>,
}

impl ScriptStep {
    pub fn text(text: impl Into<String>) -> Self {
        Self { match_text: None, text: text.into(), logprobs: None, answer_span: None }
    }

    pub fn with_logprobs(mut self, logprobs: Vec<f64>) -> Self {
        self.logprobs = Some(logprobs);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    pub steps: Vec<ScriptStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptFile {
    pub schema: String,
    pub conversations: Vec<Conversation>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnyScript {
    Steps(Vec<ScriptStep>),
    File(ScriptFile),
}

#[derive(Debug)]
pub struct ScriptedBackend {
    name: String,
    conversations: Vec<Conversation>,
    keys: Option<AhoCorasick>,
    /// conversation index for each automaton pattern
    keyed: Vec<usize>,
    fallback: Option<usize>,
}

impl ScriptedBackend {
    pub fn new(conversations: Vec<Conversation>) -> Result<Self, GatewayError> {
        let mut patterns = Vec::new();
        let mut keyed = Vec::new();
        let mut fallback = None;
        for (i, c) in conversations.iter().enumerate() {
            match &c.key {
                Some(k) if k.is_empty() => {
                    return Err(GatewayError::Script(format!("conversation {i} has an empty key")))
                }
                Some(k) => {
                    patterns.push(k.as_str());
                    keyed.push(i);
                }
                None if fallback.is_some() => {
                    return Err(GatewayError::Script("more than one conversation without a key".into()))
                }
                None => fallback = Some(i),
            }
        }
        let keys = if patterns.is_empty() {
            None
        } else {
            let ac = AhoCorasick::builder()
                .match_kind(MatchKind::LeftmostLongest)
                .build(&patterns)
                .map_err(|e| GatewayError::Script(e.to_string()))?;
            Some(ac)
        };
        Ok(Self { name: "scripted".into(), conversations, keys, keyed, fallback })
    }

    /// A single unkeyed conversation.
    pub fn from_steps(steps: Vec<ScriptStep>) -> Self {
        Self::new(vec![Conversation { key: None, steps }]).expect("single fallback conversation is always valid")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, GatewayError> {
        let parsed: AnyScript = serde_json::from_slice(bytes).map_err(|e| GatewayError::Script(e.to_string()))?;
        match parsed {
            AnyScript::Steps(steps) => Ok(Self::from_steps(steps)),
            AnyScript::File(f) if f.schema == SCRIPT_SCHEMA => Self::new(f.conversations),
            AnyScript::File(f) => Err(GatewayError::Script(format!("unsupported script schema {:?}", f.schema))),
        }
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let bytes = std::fs::read(path).map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
        let mut backend = Self::from_json(&bytes)?;
        backend.name = format!("scripted:{}", path.display());
        Ok(backend)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    fn select(&self, messages: &[ChatMessage]) -> Result<&Conversation, GatewayError> {
        let first_user = messages.iter().find(|m| m.role == Role::User).map(render).unwrap_or_default();
        let hit = self.keys.as_ref().and_then(|ac| ac.find(first_user.as_str()));
        match (hit, self.fallback) {
            (Some(m), _) => Ok(&self.conversations[self.keyed[m.pattern().as_usize()]]),
            (None, Some(i)) => Ok(&self.conversations[i]),
            (None, None) => Err(GatewayError::Script("no conversation key matches the first user message".into())),
        }
    }
}

/// Message text with video parts spelled out as placeholders.
fn render(m: &ChatMessage) -> String {
    let parts: Vec<String> = m
        .content
        .iter()
        .map(|p| match p {
            Part::Text { text } => text.clone(),
            Part::Video(v) => v.placeholder(),
        })
        .collect();
    parts.join("\n")
}

impl ChatBackend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<GenerationOutput, GatewayError> {
        let conv = self.select(messages)?;
        let step_index = assistant_turns(messages);
        let step = conv.steps.get(step_index).ok_or_else(|| {
            GatewayError::Script(format!("script exhausted at step {step_index} of {}", conv.steps.len()))
        })?;
        if let Some(needle) = &step.match_text {
            let last = messages
                .iter()
                .rev()
                .find(|m| matches!(m.role, Role::User | Role::Tool))
                .map(render)
                .unwrap_or_default();
            if !last.contains(needle.as_str()) {
                return Err(GatewayError::Script(format!(
                    "step {step_index} expected {needle:?} in the last user turn"
                )));
            }
        }
        let mut out = GenerationOutput { text: step.text.clone(), answer_span: step.answer_span, ..Default::default() };
        if params.want_logprobs {
            match &step.logprobs {
                Some(lp) => out.token_logprobs = Some(lp.clone()),
                None => {
                    let tokens: Vec<String> = step.text.split_whitespace().map(str::to_owned).collect();
                    out.token_logprobs = Some(vec![0.0; tokens.len()]);
                    out.tokens = Some(tokens);
                }
            }
        }
        Ok(out)
    }
}
