use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ToolArgs, ToolCall, ToolName};
use crate::embed::{embed, EmbedContent, EmbedError, EmbeddingProvider, RetrievalHit, VectorIndex};
use crate::gateway::{ChatMessage, Endpoint, GatewayError, GenerationParams, Part, Role, VideoClipRef};
use crate::media::{resample_interval, FrameSet, MediaError, TimeInterval, VideoMeta, DEFAULT_ZOOM_FRAMES};
use crate::subtitle::{slice_track, SubtitleSegment, SubtitleTrack};
use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("unknown video {0:?}")]
    UnknownVideo(String),
    #[error("no index for video {0:?}")]
    IndexMissing(String),
    #[error("no subtitle track for video {0:?}")]
    MissingTrack(String),
    #[error(transparent)]
    InvalidInterval(#[from] MediaError),
    #[error("frame budget exceeded: requested {requested}, remaining {remaining}")]
    FrameBudgetExceeded { requested: usize, remaining: usize },
    #[error("{0} is not configured")]
    NotConfigured(&'static str),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Backend(#[from] GatewayError),
}

impl ToolError {
    /// Backend failures end the run; everything else is shown to the model.
    pub fn is_fatal(&self) -> bool {
        matches!(self, ToolError::Backend(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToolPayload {
    Hits {
        hits: Vec<RetrievalHit>,
    },
    Segments {
        segments: Vec<SubtitleSegment>,
    },
    Summary {
        text: String,
    },
    Frames {
        frames: FrameSet,
    },
    /// Caption of a zoomed interval; `interval` and `frame_count` describe
    /// the frames that were captioned.
    Caption {
        text: String,
        interval: TimeInterval,
        frame_count: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub tool: ToolName,
    pub payload: ToolPayload,
    pub rendered: String,
}

/// Describes sampled frames in words.
pub trait Captioner: Send + Sync {
    fn caption(&self, meta: &VideoMeta, frames: &FrameSet) -> Result<String, GatewayError>;
}

/// Captioner backed by a chat endpoint that accepts video parts.
#[derive(Debug, Clone)]
pub struct ModelCaptioner {
    pub endpoint: Endpoint,
    pub prompt: String,
    pub max_tokens: u32,
}

impl ModelCaptioner {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            endpoint,
            prompt: "Describe what happens in these frames in one or two sentences.".into(),
            max_tokens: 256,
        }
    }
}

impl Captioner for ModelCaptioner {
    fn caption(&self, meta: &VideoMeta, frames: &FrameSet) -> Result<String, GatewayError> {
        let interval = frames.source_interval.unwrap_or_else(|| meta.whole());
        let clip = VideoClipRef::new(meta.video_id.clone(), interval, frames.len());
        let msg = ChatMessage {
            role: Role::User,
            content: vec![Part::Video(clip), Part::Text { text: self.prompt.clone() }],
        };
        let params = GenerationParams { max_tokens: self.max_tokens, ..Default::default() };
        Ok(self.endpoint.generate(&[msg], &params)?.text.trim().to_string())
    }
}

/// Query-focused transcript summaries. Transcripts longer than
/// `token_budget` words are summarized chunk by chunk and the partial
/// summaries merged in one more call.
#[derive(Debug, Clone)]
pub struct SubtitleSummarizer {
    pub endpoint: Endpoint,
    pub token_budget: usize,
    pub max_tokens: u32,
}

impl SubtitleSummarizer {
    pub const DEFAULT_TOKEN_BUDGET: usize = 4096;

    pub fn new(endpoint: Endpoint) -> Self {
        Self { endpoint, token_budget: Self::DEFAULT_TOKEN_BUDGET, max_tokens: 512 }
    }

    fn ask(&self, prompt: String) -> Result<String, GatewayError> {
        let params = GenerationParams { max_tokens: self.max_tokens, ..Default::default() };
        Ok(self.endpoint.generate(&[ChatMessage::user(prompt)], &params)?.text.trim().to_string())
    }

    pub fn summarize(&self, track: &SubtitleTrack, query: &str) -> Result<String, ToolError> {
        let transcript = track.full_text();
        let words: Vec<&str> = transcript.split_whitespace().collect();
        if words.is_empty() {
            return Err(ToolError::MissingTrack(track.video_id.clone()));
        }
        let hash = sha256_hex(transcript.as_bytes());
        let budget = self.token_budget.max(1);
        if words.len() <= budget {
            return Ok(self.ask(format!(
                "Transcript sha256: {hash}\nQuery: {query}\nSummarize the transcript below, focusing on the query.\n\n{transcript}"
            ))?);
        }
        let chunks: Vec<String> = words.chunks(budget).map(|c| c.join(" ")).collect();
        let total = chunks.len();
        let mut partial = Vec::with_capacity(total);
        for (i, chunk) in chunks.iter().enumerate() {
            partial.push(self.ask(format!(
                "Transcript sha256: {hash} part {}/{total}\nQuery: {query}\nSummarize this part of a transcript, focusing on the query.\n\n{chunk}",
                i + 1
            ))?);
        }
        Ok(self.ask(format!(
            "Transcript sha256: {hash} merge\nQuery: {query}\nCombine these partial summaries into one concise summary.\n\n{}",
            partial.join("\n\n")
        ))?)
    }
}

/// Shared, read-only resources the tools run against.
#[derive(Clone)]
pub struct ToolEnv {
    pub catalog: BTreeMap<String, VideoMeta>,
    pub clip_indexes: BTreeMap<String, Arc<VectorIndex>>,
    pub subtitle_indexes: BTreeMap<String, Arc<VectorIndex>>,
    pub tracks: BTreeMap<String, Arc<SubtitleTrack>>,
    pub clip_embedder: Arc<dyn EmbeddingProvider>,
    pub subtitle_embedder: Arc<dyn EmbeddingProvider>,
    pub captioner: Option<Arc<dyn Captioner>>,
    pub summarizer: Option<SubtitleSummarizer>,
    pub zoom_frames: usize,
    pub default_topk: usize,
}

impl ToolEnv {
    pub const DEFAULT_TOPK: usize = 3;

    pub fn new(clip_embedder: Arc<dyn EmbeddingProvider>, subtitle_embedder: Arc<dyn EmbeddingProvider>) -> Self {
        Self {
            catalog: BTreeMap::new(),
            clip_indexes: BTreeMap::new(),
            subtitle_indexes: BTreeMap::new(),
            tracks: BTreeMap::new(),
            clip_embedder,
            subtitle_embedder,
            captioner: None,
            summarizer: None,
            zoom_frames: DEFAULT_ZOOM_FRAMES,
            default_topk: Self::DEFAULT_TOPK,
        }
    }

    /// Looks a video up by id, falling back to its uri.
    pub fn video(&self, video_path: &str) -> Result<&VideoMeta, ToolError> {
        self.catalog
            .get(video_path)
            .or_else(|| self.catalog.values().find(|m| !m.uri.is_empty() && m.uri == video_path))
            .ok_or_else(|| ToolError::UnknownVideo(video_path.to_string()))
    }
}

/// Frames a run may still consume; `None` means unlimited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FrameBudget {
    pub limit: Option<usize>,
    pub used: usize,
}

impl FrameBudget {
    pub fn limited(limit: usize) -> Self {
        Self { limit: Some(limit), used: 0 }
    }

    pub fn remaining(&self) -> Option<usize> {
        self.limit.map(|l| l.saturating_sub(self.used))
    }

    /// Debits `n` frames, or nothing if they do not all fit.
    pub fn debit(&mut self, n: usize) -> Result<(), ToolError> {
        if let Some(remaining) = self.remaining() {
            if n > remaining {
                return Err(ToolError::FrameBudgetExceeded { requested: n, remaining });
            }
        }
        self.used += n;
        Ok(())
    }
}

/// Per-run state and overrides of the environment defaults.
#[derive(Debug, Clone, Default)]
pub struct ToolContext {
    pub budget: FrameBudget,
    pub zoom_frames: Option<usize>,
    pub default_topk: Option<usize>,
}

fn render_hits(hits: &[RetrievalHit], subtitle: bool) -> String {
    let lines: Vec<String> = hits
        .iter()
        .map(|h| match (&h.text, subtitle) {
            (Some(text), true) => format!("[{:.2} s] {text}", h.interval.start_s()),
            _ => format!("clip [{}] score {:.4}", h.interval, h.score),
        })
        .collect();
    lines.join("\n")
}

fn render_segments(segments: &[SubtitleSegment]) -> String {
    if segments.is_empty() {
        return "(no subtitles)".into();
    }
    let lines: Vec<String> = segments.iter().map(|s| format!("[{}] {}", s.interval, s.text)).collect();
    lines.join("\n")
}

fn retrieve(
    index: Option<&Arc<VectorIndex>>,
    provider: &dyn EmbeddingProvider,
    video_id: &str,
    query: &str,
    k: usize,
) -> Result<Vec<RetrievalHit>, ToolError> {
    let index = index.ok_or_else(|| ToolError::IndexMissing(video_id.to_string()))?;
    let q = embed(provider, EmbedContent::Text(query))?;
    Ok(index.search(&q, k)?)
}

/// Runs one tool call.
pub fn execute(env: &ToolEnv, ctx: &mut ToolContext, call: &ToolCall) -> Result<ToolResult, ToolError> {
    let meta = env.video(call.arguments.video_path())?;
    let vid = meta.video_id.as_str();
    let zoom_frames = ctx.zoom_frames.unwrap_or(env.zoom_frames);
    let default_topk = ctx.default_topk.unwrap_or(env.default_topk);
    let (payload, rendered) = match (&call.name, &call.arguments) {
        (ToolName::ClipRetrieval, ToolArgs::Query { query, topk, .. }) => {
            let k = topk.unwrap_or(default_topk);
            let hits = retrieve(env.clip_indexes.get(vid), env.clip_embedder.as_ref(), vid, query, k)?;
            let rendered = render_hits(&hits, false);
            (ToolPayload::Hits { hits }, rendered)
        }
        (ToolName::SubtitleRetrieval, ToolArgs::Query { query, topk, .. }) => {
            let k = topk.unwrap_or(default_topk);
            let hits = retrieve(env.subtitle_indexes.get(vid), env.subtitle_embedder.as_ref(), vid, query, k)?;
            let rendered = render_hits(&hits, true);
            (ToolPayload::Hits { hits }, rendered)
        }
        (ToolName::SubtitleSummary, ToolArgs::Query { query, .. }) => {
            let track = env.tracks.get(vid).ok_or_else(|| ToolError::MissingTrack(vid.to_string()))?;
            let summarizer = env.summarizer.as_ref().ok_or(ToolError::NotConfigured("subtitle summarizer"))?;
            let text = summarizer.summarize(track, query)?;
            (ToolPayload::Summary { text: text.clone() }, text)
        }
        (ToolName::FrameZoom, ToolArgs::Interval { start, end, .. }) => {
            let frames = resample_interval(meta, *start, *end, zoom_frames)?;
            ctx.budget.debit(frames.len())?;
            let clip = VideoClipRef::new(vid, frames.source_interval.unwrap_or_else(|| meta.whole()), frames.len());
            (ToolPayload::Frames { frames }, clip.placeholder())
        }
        (ToolName::SubtitleZoom, ToolArgs::Interval { start, end, .. }) => {
            let track = env.tracks.get(vid).ok_or_else(|| ToolError::MissingTrack(vid.to_string()))?;
            let interval = TimeInterval::clamped(*start, *end, meta.duration_s)?;
            let segments: Vec<SubtitleSegment> = slice_track(track, &interval).into_iter().cloned().collect();
            let rendered = render_segments(&segments);
            (ToolPayload::Segments { segments }, rendered)
        }
        (ToolName::CaptionZoom, ToolArgs::Interval { start, end, .. }) => {
            let captioner = env.captioner.as_ref().ok_or(ToolError::NotConfigured("captioner"))?;
            let frames = resample_interval(meta, *start, *end, zoom_frames)?;
            ctx.budget.debit(frames.len())?;
            let text = captioner.caption(meta, &frames)?;
            let interval = frames.source_interval.unwrap_or_else(|| meta.whole());
            (ToolPayload::Caption { text: text.clone(), interval, frame_count: frames.len() }, text)
        }
        (name, args) => {
            return Err(ToolError::Backend(GatewayError::InvalidRequest(format!("{name} cannot take {args:?}"))));
        }
    };
    Ok(ToolResult { tool: call.name, payload, rendered })
}
