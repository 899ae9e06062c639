use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CaptionEntry, World, CELL_S};
use crate::embed::ClipTextSource;
use crate::gateway::{ChatBackend, ChatMessage, GatewayError, GenerationOutput, GenerationParams, Role, VideoClipRef};
use crate::media::{FrameSet, TimeInterval, VideoMeta};
use crate::subtitle::SubtitleTrack;
use crate::tools::{parse_tool_call, Captioner, ParsedAction, ToolCall, ToolName, ToolRegistry};
use crate::util::derive_seed;

fn cell_of(t: f64) -> usize {
    (t.max(0.0) / CELL_S).floor() as usize
}

/// Ground-truth captions per grid cell. Acts as the captioner and as the
/// clip text source for the hashing embedder.
#[derive(Debug, Clone, Default)]
pub struct CaptionStore {
    background: String,
    captions: HashMap<String, BTreeMap<usize, Vec<String>>>,
    subtitles: HashMap<String, BTreeMap<usize, Vec<String>>>,
}

impl CaptionStore {
    pub fn new<'a>(
        background: &str,
        entries: &[CaptionEntry],
        tracks: impl IntoIterator<Item = &'a SubtitleTrack>,
    ) -> Self {
        let mut store = Self { background: background.to_string(), ..Default::default() };
        for e in entries {
            store.captions.entry(e.video_id.clone()).or_default().entry(e.cell).or_default().push(e.caption.clone());
        }
        for track in tracks {
            let cells = store.subtitles.entry(track.video_id.clone()).or_default();
            for seg in &track.segments {
                let last = cell_of(seg.interval.end_s() - 1e-9).max(cell_of(seg.interval.start_s()));
                for c in cell_of(seg.interval.start_s())..=last {
                    cells.entry(c).or_default().push(seg.text.clone());
                }
            }
        }
        store
    }

    pub fn background(&self) -> &str {
        &self.background
    }

    /// Captions of the cells holding the given frame times, in temporal
    /// order; the background caption when none has an event.
    pub fn caption_at(&self, video_id: &str, times: &[f64]) -> String {
        let cells: BTreeSet<usize> = times.iter().map(|t| cell_of(*t)).collect();
        let mut seen = BTreeSet::new();
        let parts: Vec<&str> = match self.captions.get(video_id) {
            Some(map) => cells
                .iter()
                .filter_map(|c| map.get(c))
                .flatten()
                .filter(|c| seen.insert(c.as_str()))
                .map(String::as_str)
                .collect(),
            None => Vec::new(),
        };
        if parts.is_empty() {
            self.background.clone()
        } else {
            parts.join("; ")
        }
    }

    /// What a viewer of `clip` would see: frames at the midpoints of equal slots.
    pub fn caption_for_clip(&self, clip: &VideoClipRef) -> String {
        let n = clip.frame_count.max(1);
        let step = (clip.end_s - clip.start_s) / n as f64;
        let times: Vec<f64> = (0..n).map(|i| clip.start_s + (i as f64 + 0.5) * step).collect();
        self.caption_at(&clip.video_id, &times)
    }
}

impl Captioner for CaptionStore {
    fn caption(&self, meta: &VideoMeta, frames: &FrameSet) -> Result<String, GatewayError> {
        Ok(self.caption_at(&meta.video_id, &frames.timestamps()))
    }
}

impl ClipTextSource for CaptionStore {
    fn clip_text(&self, video_id: &str, interval: &TimeInterval) -> Option<String> {
        let first = cell_of(interval.start_s());
        let last = cell_of(interval.end_s() - 1e-9).max(first);
        let mut parts: Vec<&str> = Vec::new();
        if let Some(map) = self.captions.get(video_id) {
            parts.extend(map.range(first..=last).flat_map(|(_, v)| v.iter().map(String::as_str)));
        }
        if parts.is_empty() {
            parts.push(&self.background);
        }
        if let Some(map) = self.subtitles.get(video_id) {
            parts.extend(map.range(first..=last).flat_map(|(_, v)| v.iter().map(String::as_str)));
        }
        Some(parts.join(" "))
    }
}

#[derive(Debug, Clone)]
struct Probe {
    video_id: String,
    cue: String,
    subject: String,
}

/// Scripted tool-stage model for world tasks: subtitle retrieval on the
/// cue, a zoom into the retrieved cell, then an answer read off what the
/// zoom showed.
#[derive(Debug, Clone)]
pub struct WorldToolPolicy {
    store: CaptionStore,
    probes: HashMap<String, Probe>,
    mistake_rate: f64,
    seed: u64,
}

impl WorldToolPolicy {
    pub fn new(world: &World) -> Self {
        let events: HashMap<&str, _> = world.events.iter().map(|e| (e.task_id.as_str(), e)).collect();
        let probes = world
            .tasks
            .iter()
            .filter_map(|t| {
                let e = events.get(t.task_id.as_str())?;
                Some((
                    t.question.clone(),
                    Probe { video_id: t.video_id.clone(), cue: e.cue.clone(), subject: e.subject.clone() },
                ))
            })
            .collect();
        Self { store: world.caption_store(), probes, mistake_rate: world.spec.tool_mistake_rate, seed: world.spec.seed }
    }

    fn answer(&self, question: &str, probe: &Probe, options: &[(char, String)], seen: &str, seed: u64) -> String {
        let prefix = format!("a {} wearing ", probe.subject);
        let found = seen
            .split("; ")
            .filter_map(|c| c.strip_prefix(prefix.as_str()))
            .find_map(|attire| options.iter().find(|(_, t)| t == attire))
            .map(|(l, _)| *l);
        let Some(mut letter) = found else {
            return guess(options);
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, question, seed));
        if rng.random::<f64>() < self.mistake_rate {
            let wrong: Vec<char> = options.iter().map(|(l, _)| *l).filter(|l| *l != letter).collect();
            if let Some(w) = wrong.choose(&mut rng) {
                letter = *w;
            }
        }
        format!("The frames show {seen}. <answer>{letter}</answer>")
    }
}

fn guess(options: &[(char, String)]) -> String {
    let letter = options.first().map_or('A', |(l, _)| *l);
    format!("I could not locate the scene, so I will guess. <answer>{letter}</answer>")
}

fn parse_options(prompt: &str) -> Vec<(char, String)> {
    prompt
        .lines()
        .filter_map(|l| {
            let rest = l.strip_prefix('(')?;
            let mut chars = rest.chars();
            let letter = chars.next()?;
            let text = chars.as_str().strip_prefix(") ")?;
            letter.is_ascii_uppercase().then(|| (letter, text.to_string()))
        })
        .collect()
}

/// Start time of the first `[t s] text` line.
fn first_hit_time(rendered: &str) -> Option<f64> {
    rendered.lines().find_map(|l| l.strip_prefix('[')?.split_once(" s]")?.0.parse().ok())
}

impl ChatBackend for WorldToolPolicy {
    fn name(&self) -> &str {
        "world-tool-policy"
    }

    fn generate(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<GenerationOutput, GatewayError> {
        let prompt = messages.iter().find(|m| m.role == Role::User).map(ChatMessage::joined_text).unwrap_or_default();
        let question = prompt
            .lines()
            .find_map(|l| l.strip_prefix("Question: "))
            .ok_or_else(|| GatewayError::Script("no question in the first user turn".into()))?;
        let probe = self
            .probes
            .get(question)
            .ok_or_else(|| GatewayError::Script(format!("question {question:?} is not from this world")))?;
        let options = parse_options(&prompt);
        let last_assistant = messages.iter().rposition(|m| m.role == Role::Assistant);

        let text = match last_assistant {
            None => format!(
                "I should find when the subtitle mentions the cue. {}",
                ToolCall::query(ToolName::SubtitleRetrieval, &probe.video_id, &probe.cue, None).to_wire()
            ),
            Some(i) => {
                let reply = messages.get(i + 1).filter(|m| m.role == Role::Tool && i + 2 == messages.len());
                let call = match parse_tool_call(&messages[i].joined_text(), &ToolRegistry::synthesis()) {
                    Ok(ParsedAction::Call(c)) => Some(c),
                    _ => None,
                };
                match (call, reply) {
                    (Some(c), Some(r)) if c.name == ToolName::SubtitleRetrieval => {
                        match first_hit_time(&r.joined_text()) {
                            Some(t) => {
                                let start = cell_of(t) as f64 * CELL_S;
                                format!(
                                    "The cue is spoken at {t:.2} s, so I will look closely at that clip. {}",
                                    ToolCall::interval(ToolName::FrameZoom, &probe.video_id, start, start + CELL_S)
                                        .to_wire()
                                )
                            }
                            None => guess(&options),
                        }
                    }
                    (Some(c), Some(r)) if matches!(c.name, ToolName::FrameZoom | ToolName::CaptionZoom) => {
                        let videos: Vec<String> = r.videos().map(|v| self.store.caption_for_clip(v)).collect();
                        let seen = if videos.is_empty() { r.joined_text() } else { videos.join("; ") };
                        if seen.starts_with("error:") {
                            guess(&options)
                        } else {
                            self.answer(question, probe, &options, &seen, params.seed.unwrap_or(0))
                        }
                    }
                    _ => guess(&options),
                }
            }
        };
        let mut out = GenerationOutput { text, ..Default::default() };
        if params.want_logprobs {
            let tokens: Vec<String> = out.text.split_whitespace().map(str::to_owned).collect();
            out.token_logprobs = Some(vec![0.0; tokens.len()]);
            out.tokens = Some(tokens);
        }
        Ok(out)
    }
}
