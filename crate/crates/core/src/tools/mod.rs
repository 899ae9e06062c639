//! Agent-facing tools: names and parameter schemas, the text wire protocol,
//! and execution against per-video indexes and backends.

mod exec;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub use exec::{
    execute, Captioner, FrameBudget, ModelCaptioner, SubtitleSummarizer, ToolContext, ToolEnv, ToolError, ToolPayload,
    ToolResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolName {
    ClipRetrieval,
    SubtitleRetrieval,
    SubtitleSummary,
    FrameZoom,
    SubtitleZoom,
    CaptionZoom,
}

impl ToolName {
    pub const ALL: [ToolName; 6] = [
        ToolName::ClipRetrieval,
        ToolName::SubtitleRetrieval,
        ToolName::SubtitleSummary,
        ToolName::FrameZoom,
        ToolName::SubtitleZoom,
        ToolName::CaptionZoom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolName::ClipRetrieval => "clip_retrieval",
            ToolName::SubtitleRetrieval => "subtitle_retrieval",
            ToolName::SubtitleSummary => "subtitle_summary",
            ToolName::FrameZoom => "frame_zoom",
            ToolName::SubtitleZoom => "subtitle_zoom",
            ToolName::CaptionZoom => "caption_zoom",
        }
    }

    fn takes_interval(self) -> bool {
        matches!(self, ToolName::FrameZoom | ToolName::SubtitleZoom | ToolName::CaptionZoom)
    }
}

impl fmt::Display for ToolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ToolName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ToolName::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| format!("unknown tool {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    String,
    Number,
    Integer,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSpec {
    pub name: &'static str,
    pub kind: ParamKind,
    pub required: bool,
    pub description: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToolSpec {
    pub name: ToolName,
    pub description: &'static str,
    pub params: Vec<ParamSpec>,
}

const VIDEO_PATH: ParamSpec =
    ParamSpec { name: "video_path", kind: ParamKind::String, required: true, description: "video to inspect" };
const QUERY: ParamSpec =
    ParamSpec { name: "query", kind: ParamKind::String, required: true, description: "what to look for" };
const TOPK: ParamSpec =
    ParamSpec { name: "topk", kind: ParamKind::Integer, required: false, description: "number of results (optional)" };
const START: ParamSpec =
    ParamSpec { name: "start", kind: ParamKind::Number, required: true, description: "interval start in seconds" };
const END: ParamSpec =
    ParamSpec { name: "end", kind: ParamKind::Number, required: true, description: "interval end in seconds" };

impl ToolSpec {
    pub fn of(name: ToolName) -> Self {
        let (description, params) = match name {
            ToolName::ClipRetrieval => {
                ("Retrieve the top-k 10-second clips most relevant to the query.", vec![VIDEO_PATH, QUERY, TOPK])
            }
            ToolName::SubtitleRetrieval => (
                "Retrieve the top-k subtitle segments most relevant to the query, with timestamps.",
                vec![VIDEO_PATH, QUERY, TOPK],
            ),
            ToolName::SubtitleSummary => {
                ("Summarize the full subtitle transcript with respect to the query.", vec![VIDEO_PATH, QUERY])
            }
            ToolName::FrameZoom => ("Return frames resampled from the interval.", vec![VIDEO_PATH, START, END]),
            ToolName::SubtitleZoom => ("Return the subtitles inside the interval.", vec![VIDEO_PATH, START, END]),
            ToolName::CaptionZoom => ("Return a caption describing the interval.", vec![VIDEO_PATH, START, END]),
        };
        Self { name, description, params }
    }
}

/// Validated arguments of a [`ToolCall`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ToolArgs {
    Query { video_path: String, query: String, topk: Option<usize> },
    Interval { video_path: String, start: f64, end: f64 },
}

impl ToolArgs {
    pub fn video_path(&self) -> &str {
        match self {
            ToolArgs::Query { video_path, .. } | ToolArgs::Interval { video_path, .. } => video_path,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: ToolName,
    pub arguments: ToolArgs,
}

impl ToolCall {
    pub fn query(name: ToolName, video_path: impl Into<String>, query: impl Into<String>, topk: Option<usize>) -> Self {
        Self { name, arguments: ToolArgs::Query { video_path: video_path.into(), query: query.into(), topk } }
    }

    pub fn interval(name: ToolName, video_path: impl Into<String>, start: f64, end: f64) -> Self {
        Self { name, arguments: ToolArgs::Interval { video_path: video_path.into(), start, end } }
    }

    /// Compact JSON object `{"name":..,"arguments":{..}}` with sorted argument keys.
    pub fn to_json(&self) -> String {
        let mut args = Map::new();
        match &self.arguments {
            ToolArgs::Query { video_path, query, topk } => {
                args.insert("video_path".into(), Value::from(video_path.as_str()));
                args.insert("query".into(), Value::from(query.as_str()));
                if let Some(k) = topk {
                    args.insert("topk".into(), Value::from(*k as u64));
                }
            }
            ToolArgs::Interval { video_path, start, end } => {
                args.insert("video_path".into(), Value::from(video_path.as_str()));
                args.insert("start".into(), Value::from(*start));
                args.insert("end".into(), Value::from(*end));
            }
        }
        format!("{{\"name\":\"{}\",\"arguments\":{}}}", self.name, Value::Object(args))
    }

    pub fn to_wire(&self) -> String {
        format!("<tool_call>{}</tool_call>", self.to_json())
    }
}

/// The set of tools offered to the model in one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolRegistry {
    specs: Vec<ToolSpec>,
}

impl ToolRegistry {
    pub fn new(names: &[ToolName]) -> Self {
        let mut specs: Vec<ToolSpec> = Vec::new();
        for n in names {
            if !specs.iter().any(|s| s.name == *n) {
                specs.push(ToolSpec::of(*n));
            }
        }
        Self { specs }
    }

    /// All six tools.
    pub fn synthesis() -> Self {
        Self::new(&ToolName::ALL)
    }

    /// Everything except caption_zoom; frames are attached directly at inference.
    pub fn inference() -> Self {
        Self::new(&ToolName::ALL[..5])
    }

    pub fn specs(&self) -> &[ToolSpec] {
        &self.specs
    }

    pub fn contains(&self, name: ToolName) -> bool {
        self.specs.iter().any(|s| s.name == name)
    }

    /// Plain-text listing used in system prompts.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for s in &self.specs {
            let params: Vec<String> = s
                .params
                .iter()
                .map(|p| {
                    let kind = match p.kind {
                        ParamKind::String => "string",
                        ParamKind::Number => "number",
                        ParamKind::Integer => "integer",
                    };
                    let opt = if p.required { "" } else { ", optional" };
                    format!("{}: {kind}{opt}", p.name)
                })
                .collect();
            out.push_str(&format!("- {}({}): {}\n", s.name, params.join(", "), s.description));
        }
        out
    }

    fn validate(&self, name: &str, args: &Value) -> Result<ToolCall, MalformedToolCall> {
        let tool: ToolName = name.parse().map_err(|_| MalformedToolCall(format!("unknown tool {name:?}")))?;
        if !self.contains(tool) {
            return Err(MalformedToolCall(format!("tool {tool} is not available")));
        }
        let spec = ToolSpec::of(tool);
        let obj = args.as_object().ok_or_else(|| MalformedToolCall("arguments must be a JSON object".into()))?;
        for key in obj.keys() {
            if !spec.params.iter().any(|p| p.name == key) {
                return Err(MalformedToolCall(format!("{tool}: unknown argument {key:?}")));
            }
        }
        for p in &spec.params {
            match obj.get(p.name) {
                None if p.required => return Err(MalformedToolCall(format!("{tool}: missing argument {:?}", p.name))),
                None => {}
                Some(v) => {
                    let ok = match p.kind {
                        ParamKind::String => v.as_str().is_some_and(|s| !s.trim().is_empty()),
                        ParamKind::Number => v.as_f64().is_some_and(f64::is_finite),
                        ParamKind::Integer => v.as_u64().is_some_and(|k| k >= 1),
                    };
                    if !ok {
                        let want = match p.kind {
                            ParamKind::String => "a non-empty string",
                            ParamKind::Number => "a finite number",
                            ParamKind::Integer => "a positive integer",
                        };
                        return Err(MalformedToolCall(format!("{tool}: {:?} must be {want}", p.name)));
                    }
                }
            }
        }
        let s = |k: &str| obj[k].as_str().unwrap_or_default().to_string();
        let arguments = if tool.takes_interval() {
            ToolArgs::Interval {
                video_path: s("video_path"),
                start: obj["start"].as_f64().unwrap_or_default(),
                end: obj["end"].as_f64().unwrap_or_default(),
            }
        } else {
            ToolArgs::Query {
                video_path: s("video_path"),
                query: s("query"),
                topk: obj.get("topk").and_then(Value::as_u64).map(|k| k as usize),
            }
        };
        Ok(ToolCall { name: tool, arguments })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalformedToolCall(pub String);

impl fmt::Display for MalformedToolCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "malformed tool call: {}", self.0)
    }
}

impl std::error::Error for MalformedToolCall {}

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedAction {
    Call(ToolCall),
    Answer(char),
    None,
}

const CALL_OPEN: &str = "<tool_call>";
const CALL_CLOSE: &str = "</tool_call>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

/// Reads the first action block in `text`, whichever of `<tool_call>` and
/// `<answer>` comes first.
pub fn parse_tool_call(text: &str, registry: &ToolRegistry) -> Result<ParsedAction, MalformedToolCall> {
    let call_at = text.find(CALL_OPEN);
    let answer_at = text.find(ANSWER_OPEN);
    match (call_at, answer_at) {
        (Some(c), a) if a.is_none_or(|a| c < a) => {
            let body = &text[c + CALL_OPEN.len()..];
            let end = body.find(CALL_CLOSE).ok_or_else(|| MalformedToolCall(format!("missing {CALL_CLOSE}")))?;
            let value: Value = serde_json::from_str(body[..end].trim())
                .map_err(|e| MalformedToolCall(format!("invalid JSON: {e}")))?;
            let obj = value.as_object().ok_or_else(|| MalformedToolCall("expected a JSON object".into()))?;
            if let Some(extra) = obj.keys().find(|k| *k != "name" && *k != "arguments") {
                return Err(MalformedToolCall(format!("unexpected field {extra:?}")));
            }
            let name = obj
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| MalformedToolCall("missing string field \"name\"".into()))?;
            if name.parse::<ToolName>().is_err() {
                return Err(MalformedToolCall("unknown tool".into()));
            }
            let args = obj.get("arguments").ok_or_else(|| MalformedToolCall("missing field \"arguments\"".into()))?;
            registry.validate(name, args).map(ParsedAction::Call)
        }
        (_, Some(a)) => {
            let body = &text[a + ANSWER_OPEN.len()..];
            let end = body.find(ANSWER_CLOSE).ok_or_else(|| MalformedToolCall(format!("missing {ANSWER_CLOSE}")))?;
            let inner = body[..end].trim();
            let mut chars = inner.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) if c.is_ascii_uppercase() => Ok(ParsedAction::Answer(c)),
                _ => Err(MalformedToolCall(format!("answer must be a single option letter, got {inner:?}"))),
            }
        }
        _ => Ok(ParsedAction::None),
    }
}
