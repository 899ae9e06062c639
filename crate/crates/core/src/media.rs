//! Temporal coordinates for videos: intervals, metadata, uniform frame
//! sampling, zoom resampling and the fixed-length clip grid.
//!
//! Everything here is a pure function over immutable values. Frames are
//! references (video id + timestamp); decoding pixels is somebody else's job.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Length of one retrieval clip, in seconds.
pub const DEFAULT_CLIP_LEN_S: f64 = 10.0;

/// Frames returned by a temporal zoom when nothing else is configured.
pub const DEFAULT_ZOOM_FRAMES: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MediaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid interval [{start}, {end}]: {reason}")]
    InvalidInterval { start: f64, end: f64, reason: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
}

/// Half-open time span `[start_s, end_s)` in seconds with positive length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInterval", into = "RawInterval")]
pub struct TimeInterval {
    start_s: f64,
    end_s: f64,
}

#[derive(Serialize, Deserialize)]
struct RawInterval {
    start_s: f64,
    end_s: f64,
}

impl TryFrom<RawInterval> for TimeInterval {
    type Error = MediaError;
    fn try_from(raw: RawInterval) -> Result<Self, Self::Error> {
        TimeInterval::new(raw.start_s, raw.end_s)
    }
}

impl From<TimeInterval> for RawInterval {
    fn from(iv: TimeInterval) -> Self {
        RawInterval { start_s: iv.start_s, end_s: iv.end_s }
    }
}

impl TimeInterval {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self, MediaError> {
        if !start_s.is_finite() || !end_s.is_finite() {
            return Err(MediaError::InvalidInterval { start: start_s, end: end_s, reason: "non-finite bound".into() });
        }
        if start_s < 0.0 {
            return Err(MediaError::InvalidInterval { start: start_s, end: end_s, reason: "negative start".into() });
        }
        if end_s <= start_s {
            return Err(MediaError::InvalidInterval {
                start: start_s,
                end: end_s,
                reason: "end must be after start".into(),
            });
        }
        Ok(Self { start_s, end_s })
    }

    pub fn start_s(&self) -> f64 {
        self.start_s
    }

    pub fn end_s(&self) -> f64 {
        self.end_s
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }

    /// Length of the intersection with `other` (zero when they only touch).
    pub fn overlap(&self, other: &TimeInterval) -> f64 {
        (self.end_s.min(other.end_s) - self.start_s.max(other.start_s)).max(0.0)
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start_s && t <= self.end_s
    }

    /// Clamp a raw `[start, end]` request into `[0, duration_s]`.
    ///
    /// Requests that overshoot the video are trimmed rather than rejected;
    /// only an empty result is an error.
    pub fn clamped(start: f64, end: f64, duration_s: f64) -> Result<Self, MediaError> {
        if !start.is_finite() || !end.is_finite() {
            return Err(MediaError::InvalidInterval { start, end, reason: "non-finite bound".into() });
        }
        let lo = start.max(0.0);
        let hi = end.min(duration_s);
        if hi <= lo {
            return Err(MediaError::InvalidInterval {
                start,
                end,
                reason: format!("empty after clamping to [0, {duration_s}]"),
            });
        }
        Ok(Self { start_s: lo, end_s: hi })
    }
}

impl fmt::Display for TimeInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}–{:.2}", self.start_s, self.end_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VideoKind {
    RealFile,
    #[default]
    VirtualManifest,
}

fn default_fps() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    #[serde(default)]
    pub uri: String,
    pub duration_s: f64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default)]
    pub kind: VideoKind,
}

impl VideoMeta {
    pub fn virtual_video(video_id: impl Into<String>, duration_s: f64) -> Result<Self, MediaError> {
        let meta = Self {
            video_id: video_id.into(),
            uri: String::new(),
            duration_s,
            fps: 1.0,
            kind: VideoKind::VirtualManifest,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<(), MediaError> {
        if self.video_id.is_empty() {
            return Err(MediaError::InvalidArgument("empty video_id".into()));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(MediaError::InvalidArgument(format!("duration_s must be positive, got {}", self.duration_s)));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(MediaError::InvalidArgument(format!("fps must be positive, got {}", self.fps)));
        }
        Ok(())
    }

    pub fn whole(&self) -> TimeInterval {
        TimeInterval { start_s: 0.0, end_s: self.duration_s }
    }
}

/// On-disk manifest for a video that exists only as declared metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualManifest {
    pub video_id: String,
    pub duration_s: f64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<serde_json::Value>,
}

impl VirtualManifest {
    pub fn from_json(bytes: &[u8]) -> Result<Self, MediaError> {
        serde_json::from_slice(bytes).map_err(|e| MediaError::Manifest(e.to_string()))
    }

    pub fn into_meta(self, uri: &Path) -> Result<VideoMeta, MediaError> {
        let meta = VideoMeta {
            video_id: self.video_id,
            uri: uri.display().to_string(),
            duration_s: self.duration_s,
            fps: self.fps,
            kind: VideoKind::VirtualManifest,
        };
        meta.validate()?;
        Ok(meta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    pub video_id: String,
    pub timestamp_s: f64,
}

/// Frames in strictly increasing timestamp order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSet {
    pub frames: Vec<FrameRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_interval: Option<TimeInterval>,
}

impl FrameSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.timestamp_s).collect()
    }
}

/// Midpoints of `count` equal sub-intervals of `span`.
fn midpoints(video_id: &str, span: TimeInterval, count: usize) -> Vec<FrameRef> {
    let step = span.duration() / count as f64;
    (0..count)
        .map(|i| FrameRef { video_id: video_id.to_string(), timestamp_s: span.start_s + (i as f64 + 0.5) * step })
        .collect()
}

/// Sample `n` frames uniformly over the whole video, one at the midpoint of
/// each of `n` equal slots.
pub fn uniform_sample(meta: &VideoMeta, n: usize) -> Result<FrameSet, MediaError> {
    if n == 0 {
        return Err(MediaError::InvalidArgument("frame count must be at least 1".into()));
    }
    meta.validate()?;
    Ok(FrameSet { frames: midpoints(&meta.video_id, meta.whole(), n), source_interval: None })
}

/// Resample a (clamped) interval to exactly `target_count` frames.
pub fn resample_interval(
    meta: &VideoMeta,
    start_s: f64,
    end_s: f64,
    target_count: usize,
) -> Result<FrameSet, MediaError> {
    if target_count == 0 {
        return Err(MediaError::InvalidArgument("target_count must be at least 1".into()));
    }
    let span = TimeInterval::clamped(start_s, end_s, meta.duration_s)?;
    Ok(FrameSet { frames: midpoints(&meta.video_id, span, target_count), source_interval: Some(span) })
}

/// Split `[0, duration_s]` into consecutive `clip_len_s` cells; the last cell
/// is truncated at the end of the video.
pub fn clip_grid(duration_s: f64, clip_len_s: f64) -> Result<Vec<TimeInterval>, MediaError> {
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(MediaError::InvalidArgument(format!("duration must be positive, got {duration_s}")));
    }
    if !(clip_len_s.is_finite() && clip_len_s > 0.0) {
        return Err(MediaError::InvalidArgument(format!("clip length must be positive, got {clip_len_s}")));
    }
    let mut cells = Vec::with_capacity((duration_s / clip_len_s).ceil() as usize);
    let mut i = 0usize;
    loop {
        let start = i as f64 * clip_len_s;
        if start >= duration_s {
            break;
        }
        let next = (i + 1) as f64 * clip_len_s;
        let end = if next >= duration_s { duration_s } else { next };
        cells.push(TimeInterval { start_s: start, end_s: end });
        i += 1;
    }
    Ok(cells)
}

/// Index of the grid cell containing `t` (the last cell owns `t == duration`).
pub fn cell_index(t: f64, duration_s: f64, clip_len_s: f64) -> usize {
    let last = ((duration_s / clip_len_s).ceil() as usize).saturating_sub(1);
    ((t.max(0.0) / clip_len_s).floor() as usize).min(last)
}
