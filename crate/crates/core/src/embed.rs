//! Embedding providers, clip/subtitle indexes and exact top-k cosine search.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh64::xxh64;

use crate::media::{clip_grid, TimeInterval, VideoMeta, DEFAULT_CLIP_LEN_S};
use crate::subtitle::SubtitleTrack;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("nothing to embed")]
    ZeroContent,
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Unit-length embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// L2-normalizes `values`; an all-zero vector is [`EmbedError::ZeroContent`].
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, EmbedError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(EmbedError::ZeroContent);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

pub enum EmbedContent<'a> {
    Text(&'a str),
    Clip { video_id: &'a str, interval: TimeInterval },
}

/// Source of raw embeddings. Implementations must be callable from several
/// threads at once.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
    fn embed_clip(&self, video_id: &str, interval: &TimeInterval) -> Result<Vec<f64>, EmbedError>;
}

/// Embeds `content`, checking the provider's dimension and normalizing.
pub fn embed(provider: &dyn EmbeddingProvider, content: EmbedContent<'_>) -> Result<EmbeddingVector, EmbedError> {
    let raw = match content {
        EmbedContent::Text(text) => provider.embed_text(text)?,
        EmbedContent::Clip { video_id, interval } => provider.embed_clip(video_id, &interval)?,
    };
    if raw.len() != provider.dim() {
        return Err(EmbedError::DimensionMismatch { expected: provider.dim(), got: raw.len() });
    }
    EmbeddingVector::normalized(raw)
}

/// Text visible in a clip; the hashing embedder uses it to stand in for a
/// real video encoder.
pub trait ClipTextSource: Send + Sync {
    fn clip_text(&self, video_id: &str, interval: &TimeInterval) -> Option<String>;
}

/// Deterministic feature-hashing embedder.
///
/// Tokens are lowercase alphanumeric runs; each token lands in one of `dim`
/// buckets with a ±1 sign picked by a seeded xxh64 hash.
pub struct HashingEmbedder {
    seed: u64,
    dim: usize,
    clip_texts: Option<Arc<dyn ClipTextSource>>,
}

impl HashingEmbedder {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { seed, dim, clip_texts: None }
    }

    pub fn with_clip_texts(mut self, source: Arc<dyn ClipTextSource>) -> Self {
        self.clip_texts = Some(source);
        self
    }

    pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(|t| t.to_lowercase())
    }

    fn hash_text(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let mut v = vec![0.0; self.dim];
        let mut any = false;
        for token in Self::tokens(text) {
            let h = xxh64(token.as_bytes(), self.seed);
            let bucket = ((h & 0xffff_ffff) % self.dim as u64) as usize;
            v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
            any = true;
        }
        if !any {
            return Err(EmbedError::ZeroContent);
        }
        Ok(v)
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn name(&self) -> &str {
        "hashing"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        self.hash_text(text)
    }

    fn embed_clip(&self, video_id: &str, interval: &TimeInterval) -> Result<Vec<f64>, EmbedError> {
        let source = self
            .clip_texts
            .as_ref()
            .ok_or_else(|| EmbedError::Provider("hashing embedder has no clip text source".into()))?;
        let text = source.clip_text(video_id, interval).ok_or(EmbedError::ZeroContent)?;
        self.hash_text(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    Clip,
    Subtitle,
}

impl IndexKind {
    pub fn schema(self) -> &'static str {
        match self {
            IndexKind::Clip => "clip-index/1",
            IndexKind::Subtitle => "subtitle-index/1",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub video_id: String,
    pub interval: TimeInterval,
    /// Segment text for subtitle entries.
    pub text: Option<String>,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub interval: TimeInterval,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Immutable embedding index over one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    pub kind: IndexKind,
    pub provider: String,
    pub dim: usize,
    pub entries: Vec<IndexEntry>,
}

/// One entry per clip-grid cell, in temporal order. Fails as a whole if any
/// clip fails.
pub fn build_clip_index(meta: &VideoMeta, provider: &dyn EmbeddingProvider) -> Result<VectorIndex, EmbedError> {
    let grid = clip_grid(meta.duration_s, DEFAULT_CLIP_LEN_S).map_err(|e| EmbedError::Provider(e.to_string()))?;
    let entries = grid
        .into_iter()
        .map(|interval| {
            let vector = embed(provider, EmbedContent::Clip { video_id: &meta.video_id, interval })?;
            Ok(IndexEntry { video_id: meta.video_id.clone(), interval, text: None, vector })
        })
        .collect::<Result<Vec<_>, EmbedError>>()?;
    Ok(VectorIndex { kind: IndexKind::Clip, provider: provider.name().to_string(), dim: provider.dim(), entries })
}

/// One entry per subtitle segment.
pub fn build_subtitle_index(
    track: &SubtitleTrack,
    provider: &dyn EmbeddingProvider,
) -> Result<VectorIndex, EmbedError> {
    let entries = track
        .segments
        .iter()
        .map(|seg| {
            let vector = embed(provider, EmbedContent::Text(&seg.text))?;
            Ok(IndexEntry {
                video_id: track.video_id.clone(),
                interval: seg.interval,
                text: Some(seg.text.clone()),
                vector,
            })
        })
        .collect::<Result<Vec<_>, EmbedError>>()?;
    Ok(VectorIndex { kind: IndexKind::Subtitle, provider: provider.name().to_string(), dim: provider.dim(), entries })
}

/// Exact top-k by cosine similarity. Ties go to the earlier start, then to
/// the earlier entry.
pub fn topk(entries: &[IndexEntry], query: &EmbeddingVector, k: usize) -> Result<Vec<RetrievalHit>, EmbedError> {
    if k == 0 {
        return Err(EmbedError::InvalidK);
    }
    if entries.is_empty() {
        return Err(EmbedError::EmptyIndex);
    }
    if let Some(e) = entries.iter().find(|e| e.vector.dim() != query.dim()) {
        return Err(EmbedError::DimensionMismatch { expected: query.dim(), got: e.vector.dim() });
    }
    let scores: Vec<f64> = entries.iter().map(|e| e.vector.dot(query)).collect();
    let rank = |a: &usize, b: &usize| {
        scores[*b]
            .total_cmp(&scores[*a])
            .then(entries[*a].interval.start_s().total_cmp(&entries[*b].interval.start_s()))
            .then(a.cmp(b))
    };
    let mut order: Vec<usize> = (0..entries.len()).collect();
    let k = k.min(entries.len());
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, rank);
        order.truncate(k);
    }
    order.sort_unstable_by(rank);
    Ok(order
        .into_iter()
        .map(|i| RetrievalHit {
            interval: entries[i].interval,
            score: scores[i].clamp(-1.0, 1.0),
            text: entries[i].text.clone(),
        })
        .collect())
}

impl VectorIndex {
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<RetrievalHit>, EmbedError> {
        topk(&self.entries, query, k)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), EmbedError> {
        let header = serde_json::json!({"schema": self.kind.schema(), "dim": self.dim, "provider": self.provider});
        writeln!(out, "{header}")?;
        for e in &self.entries {
            let line = serde_json::json!({
                "video_id": e.video_id,
                "start_s": e.interval.start_s(),
                "end_s": e.interval.end_s(),
                "text": e.text,
                "vector": e.vector,
            });
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, EmbedError> {
        #[derive(Deserialize)]
        struct Header {
            schema: String,
            dim: usize,
            provider: String,
        }
        #[derive(Deserialize)]
        struct Line {
            video_id: String,
            start_s: f64,
            end_s: f64,
            text: Option<String>,
            vector: Vec<f64>,
        }
        let mut lines = input.lines();
        let header_line = lines.next().ok_or_else(|| EmbedError::Format("missing header".into()))??;
        let header: Header =
            serde_json::from_str(&header_line).map_err(|e| EmbedError::Format(format!("header: {e}")))?;
        let kind = match header.schema.as_str() {
            "clip-index/1" => IndexKind::Clip,
            "subtitle-index/1" => IndexKind::Subtitle,
            other => return Err(EmbedError::Format(format!("unsupported schema {other:?}"))),
        };
        let mut entries = Vec::new();
        for (no, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: Line =
                serde_json::from_str(&line).map_err(|e| EmbedError::Format(format!("line {}: {e}", no + 2)))?;
            if raw.vector.len() != header.dim {
                return Err(EmbedError::DimensionMismatch { expected: header.dim, got: raw.vector.len() });
            }
            let interval = TimeInterval::new(raw.start_s, raw.end_s)
                .map_err(|e| EmbedError::Format(format!("line {}: {e}", no + 2)))?;
            entries.push(IndexEntry {
                video_id: raw.video_id,
                interval,
                text: raw.text,
                vector: EmbeddingVector::normalized(raw.vector)?,
            });
        }
        Ok(Self { kind, provider: header.provider, dim: header.dim, entries })
    }
}

/// In-memory [`ClipTextSource`] keyed by video id.
#[derive(Debug, Default, Clone)]
pub struct StaticClipTexts {
    texts: HashMap<String, Vec<(TimeInterval, String)>>,
}

impl StaticClipTexts {
    pub fn insert(&mut self, video_id: impl Into<String>, interval: TimeInterval, text: impl Into<String>) {
        self.texts.entry(video_id.into()).or_default().push((interval, text.into()));
    }
}

impl ClipTextSource for StaticClipTexts {
    fn clip_text(&self, video_id: &str, interval: &TimeInterval) -> Option<String> {
        let parts: Vec<&str> = self
            .texts
            .get(video_id)?
            .iter()
            .filter(|(iv, _)| iv.overlap(interval) > 0.0)
            .map(|(_, t)| t.as_str())
            .collect();
        (!parts.is_empty()).then(|| parts.join(" "))
    }
}
