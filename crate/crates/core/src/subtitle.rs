//! Timestamped transcripts: SRT, WebVTT and Whisper-style JSON in, one
//! canonical [`SubtitleTrack`] out.
//!
//! Times are kept as full-precision seconds internally; serialization rounds
//! to milliseconds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::media::TimeInterval;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SubtitleError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("transcript is not valid UTF-8: {0}")]
    Encoding(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubtitleFormat {
    Srt,
    Vtt,
    WhisperJson,
}

impl SubtitleFormat {
    pub fn from_extension(ext: &str) -> Option<Self> {
        match ext.to_ascii_lowercase().as_str() {
            "srt" => Some(Self::Srt),
            "vtt" => Some(Self::Vtt),
            "json" => Some(Self::WhisperJson),
            _ => None,
        }
    }
}

impl std::str::FromStr for SubtitleFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "srt" => Ok(Self::Srt),
            "vtt" => Ok(Self::Vtt),
            "whisper-json" | "json" => Ok(Self::WhisperJson),
            other => Err(format!("unknown subtitle format: {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtitleSegment {
    pub index: usize,
    pub interval: TimeInterval,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtitleTrack {
    pub video_id: String,
    pub segments: Vec<SubtitleSegment>,
    pub source_format: SubtitleFormat,
}

impl SubtitleTrack {
    /// Builds a track from unordered `(interval, text)` pairs: blank texts are
    /// dropped, the rest is stably sorted by start and renumbered.
    pub fn from_cues(
        video_id: impl Into<String>,
        source_format: SubtitleFormat,
        cues: impl IntoIterator<Item = (TimeInterval, String)>,
    ) -> Self {
        let mut cues: Vec<(TimeInterval, String)> = cues
            .into_iter()
            .map(|(iv, text)| (iv, text.trim().to_string()))
            .filter(|(_, text)| !text.is_empty())
            .collect();
        cues.sort_by(|a, b| a.0.start_s().total_cmp(&b.0.start_s()));
        Self {
            video_id: video_id.into(),
            segments: cues
                .into_iter()
                .enumerate()
                .map(|(index, (interval, text))| SubtitleSegment { index, interval, text })
                .collect(),
            source_format,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Whole transcript as one string, one segment per line.
    pub fn full_text(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join("\n")
    }

    /// Copy with every timestamp rounded to the millisecond.
    pub fn rounded_to_ms(&self) -> Self {
        let segments = self
            .segments
            .iter()
            .map(|s| SubtitleSegment {
                index: s.index,
                interval: TimeInterval::new(round_ms(s.interval.start_s()), round_ms(s.interval.end_s()))
                    .expect("rounding preserved ordering"),
                text: s.text.clone(),
            })
            .collect();
        Self { video_id: self.video_id.clone(), segments, source_format: self.source_format }
    }
}

pub fn round_ms(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

/// Segments overlapping `interval` by a positive length, in track order.
pub fn slice_track<'a>(track: &'a SubtitleTrack, interval: &TimeInterval) -> Vec<&'a SubtitleSegment> {
    track.segments.iter().filter(|s| s.interval.overlap(interval) > 0.0).collect()
}

pub fn parse_subtitles(bytes: &[u8], format: SubtitleFormat, video_id: &str) -> Result<SubtitleTrack, SubtitleError> {
    let bytes = bytes.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(bytes);
    let text = std::str::from_utf8(bytes).map_err(|e| SubtitleError::Encoding(e.to_string()))?;
    let cues = match format {
        SubtitleFormat::Srt => parse_blocks(text, false)?,
        SubtitleFormat::Vtt => parse_blocks(text, true)?,
        SubtitleFormat::WhisperJson => parse_whisper(text)?,
    };
    Ok(SubtitleTrack::from_cues(video_id, format, cues))
}

fn perr(line: usize, message: impl Into<String>) -> SubtitleError {
    SubtitleError::Parse { line, message: message.into() }
}

/// Parses `HH:MM:SS,mmm`, `HH:MM:SS.mmm` or (WebVTT) `MM:SS.mmm`.
fn parse_timestamp(raw: &str, line: usize, allow_short: bool) -> Result<f64, SubtitleError> {
    let raw = raw.trim();
    let bad = || perr(line, format!("malformed timestamp {raw:?}"));
    let (clock, frac) = raw.rsplit_once([',', '.']).ok_or_else(bad)?;
    if frac.len() != 3 || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let fields: Vec<&str> = clock.split(':').collect();
    let (h, m, s) = match fields.as_slice() {
        [h, m, s] => (*h, *m, *s),
        [m, s] if allow_short => ("0", *m, *s),
        _ => return Err(bad()),
    };
    let num = |f: &str| -> Result<u64, SubtitleError> {
        if f.is_empty() || !f.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        f.parse::<u64>().map_err(|_| bad())
    };
    let (h, m, s, ms) = (num(h)?, num(m)?, num(s)?, num(frac)?);
    if m >= 60 || s >= 60 {
        return Err(bad());
    }
    let total_ms = ((h * 60 + m) * 60 + s) * 1000 + ms;
    Ok(total_ms as f64 / 1000.0)
}

fn parse_timing(line: &str, line_no: usize, vtt: bool) -> Result<TimeInterval, SubtitleError> {
    let (a, rest) = line.split_once("-->").ok_or_else(|| perr(line_no, "expected timing line"))?;
    // WebVTT cue settings and SRT position coordinates follow the end time.
    let b = rest.split_whitespace().next().ok_or_else(|| perr(line_no, "missing end time"))?;
    let start = parse_timestamp(a, line_no, vtt)?;
    let end = parse_timestamp(b, line_no, vtt)?;
    TimeInterval::new(start, end).map_err(|e| perr(line_no, e.to_string()))
}

/// Drops markup tags (`<i>`, `<v Speaker>`, `<00:01.000>`, `{\an8}`) and
/// decodes the handful of entities WebVTT defines.
fn strip_markup(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '<' => {
                for d in chars.by_ref() {
                    if d == '>' {
                        break;
                    }
                }
            }
            '{' if chars.peek() == Some(&'\\') => {
                for d in chars.by_ref() {
                    if d == '}' {
                        break;
                    }
                }
            }
            _ => out.push(c),
        }
    }
    out.replace("&lt;", "<").replace("&gt;", ">").replace("&nbsp;", " ").replace("&amp;", "&")
}

fn parse_blocks(text: &str, vtt: bool) -> Result<Vec<(TimeInterval, String)>, SubtitleError> {
    let lines: Vec<(usize, &str)> = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r'))).collect();
    let mut blocks: Vec<Vec<(usize, &str)>> = Vec::new();
    let mut current = Vec::new();
    for &(no, line) in &lines {
        if line.trim().is_empty() {
            if !current.is_empty() {
                blocks.push(std::mem::take(&mut current));
            }
        } else {
            current.push((no, line));
        }
    }
    if !current.is_empty() {
        blocks.push(current);
    }

    let mut blocks = blocks.into_iter();
    if vtt {
        let header = blocks.next().ok_or_else(|| perr(1, "missing WEBVTT header"))?;
        let (no, first) = header[0];
        let ok = first == "WEBVTT" || first.starts_with("WEBVTT ") || first.starts_with("WEBVTT\t");
        if !ok {
            return Err(perr(no, "missing WEBVTT header"));
        }
        if let Some(&(no, l)) = header.iter().skip(1).find(|(_, l)| l.contains("-->")) {
            return Err(perr(no, format!("cue inside header block: {l:?}")));
        }
    }

    let mut cues = Vec::new();
    for block in blocks {
        let (first_no, first) = block[0];
        if vtt {
            let keyword = first.split_whitespace().next().unwrap_or("");
            if matches!(keyword, "NOTE" | "STYLE" | "REGION") {
                continue;
            }
        }
        // An optional identifier (SRT: the cue number) precedes the timing line.
        let timing_pos = match block.iter().position(|(_, l)| l.contains("-->")) {
            Some(p) if p <= 1 => p,
            Some(p) => return Err(perr(block[p].0, "unexpected lines before timing line")),
            None => return Err(perr(first_no, "cue block without a timing line")),
        };
        if !vtt && timing_pos == 1 && first.trim().parse::<u64>().is_err() {
            return Err(perr(first_no, format!("expected cue number, got {first:?}")));
        }
        let (timing_no, timing) = block[timing_pos];
        let interval = parse_timing(timing, timing_no, vtt)?;
        let body: Vec<String> = block[timing_pos + 1..]
            .iter()
            .map(|(_, l)| strip_markup(l).trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        cues.push((interval, body.join("\n")));
    }
    Ok(cues)
}

#[derive(Deserialize, Serialize)]
struct WhisperDoc {
    segments: Vec<WhisperSegment>,
}

#[derive(Deserialize, Serialize)]
struct WhisperSegment {
    start: f64,
    end: f64,
    text: String,
}

fn parse_whisper(text: &str) -> Result<Vec<(TimeInterval, String)>, SubtitleError> {
    let doc: WhisperDoc =
        serde_json::from_str(text).map_err(|e| perr(e.line(), format!("invalid whisper json: {e}")))?;
    doc.segments
        .into_iter()
        .enumerate()
        .map(|(i, seg)| {
            let iv = TimeInterval::new(seg.start, seg.end).map_err(|e| perr(0, format!("segment {i}: {e}")))?;
            Ok((iv, seg.text))
        })
        .collect()
}

fn format_clock(t: f64, sep: char) -> String {
    let total_ms = (t * 1000.0).round() as u64;
    let (h, rem) = (total_ms / 3_600_000, total_ms % 3_600_000);
    let (m, rem) = (rem / 60_000, rem % 60_000);
    let (s, ms) = (rem / 1000, rem % 1000);
    format!("{h:02}:{m:02}:{s:02}{sep}{ms:03}")
}

pub fn serialize_track(track: &SubtitleTrack, format: SubtitleFormat) -> Vec<u8> {
    match format {
        SubtitleFormat::Srt => {
            let mut out = String::new();
            for (i, seg) in track.segments.iter().enumerate() {
                let _ = write!(
                    out,
                    "{}\n{} --> {}\n{}\n\n",
                    i + 1,
                    format_clock(seg.interval.start_s(), ','),
                    format_clock(seg.interval.end_s(), ','),
                    seg.text
                );
            }
            out.into_bytes()
        }
        SubtitleFormat::Vtt => {
            let mut out = String::from("WEBVTT\n\n");
            for seg in &track.segments {
                let _ = write!(
                    out,
                    "{} --> {}\n{}\n\n",
                    format_clock(seg.interval.start_s(), '.'),
                    format_clock(seg.interval.end_s(), '.'),
                    seg.text
                );
            }
            out.into_bytes()
        }
        SubtitleFormat::WhisperJson => {
            let doc = WhisperDoc {
                segments: track
                    .segments
                    .iter()
                    .map(|s| WhisperSegment {
                        start: round_ms(s.interval.start_s()),
                        end: round_ms(s.interval.end_s()),
                        text: s.text.clone(),
                    })
                    .collect(),
            };
            serde_json::to_vec(&doc).expect("whisper doc serializes")
        }
    }
}
