//! Seeded synthetic worlds: virtual videos with planted events, their
//! subtitles and captions, multiple-choice tasks answerable only from the
//! planted captions, and scripted model backends for both inference stages.

mod policy;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{build_clip_index, build_subtitle_index, EmbedError, HashingEmbedder};
use crate::gateway::scripted::{Conversation, ScriptFile, ScriptStep, ScriptedBackend, SCRIPT_SCHEMA};
use crate::gateway::Endpoint;
use crate::media::{TimeInterval, VideoMeta, VirtualManifest};
use crate::runner::Endpoints;
use crate::subtitle::{parse_subtitles, serialize_track, SubtitleFormat, SubtitleTrack};
use crate::synthesis::{AnswerOption, QATask};
use crate::tools::ToolEnv;
use crate::util::{derive_seed, read_jsonl, write_jsonl};

pub use policy::{CaptionStore, WorldToolPolicy};

pub const WORLD_SCHEMA: &str = "world/1";
/// Grid cell length used for planting events.
pub const CELL_S: f64 = 10.0;

const SUBJECTS: [&str; 20] = [
    "woman", "man", "girl", "boy", "chef", "nurse", "pilot", "farmer", "painter", "singer", "dancer", "waiter",
    "driver", "teacher", "student", "doctor", "soldier", "baker", "sailor", "clown",
];
const COLORS: [&str; 10] = ["red", "blue", "green", "yellow", "pink", "black", "white", "orange", "purple", "grey"];
const ITEMS: [&str; 10] = ["hat", "scarf", "jacket", "coat", "shirt", "dress", "helmet", "sweater", "vest", "cap"];
const CUE_WORDS: [&str; 40] = [
    "harvest", "lantern", "copper", "meadow", "thunder", "velvet", "orbit", "pepper", "marble", "canyon", "violin",
    "glacier", "saddle", "compass", "ember", "falcon", "harbor", "juniper", "kettle", "ladder", "mosaic", "nectar",
    "oyster", "parcel", "quartz", "ribbon", "summit", "timber", "umbrella", "walnut", "anchor", "bamboo", "cobalt",
    "dynamo", "eclipse", "fossil", "garnet", "hammock", "iris", "jasmine",
];
const CUE_LEN: usize = 5;

fn default_distractors() -> Vec<String> {
    [
        "weather", "market", "people", "money", "table", "story", "morning", "river", "window", "garden", "music",
        "paper", "school", "train", "coffee", "letter", "mountain", "number", "evening", "office", "bridge", "village",
        "kitchen", "holiday", "traffic", "festival", "library", "station", "picture", "question",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub seed: u64,
    pub video_count: usize,
    pub min_minutes: f64,
    pub max_minutes: f64,
    pub events_per_video: usize,
    /// Words for distractor subtitle lines; must not overlap the cue words.
    pub distractor_vocab: Vec<String>,
    pub distractor_lines_per_minute: f64,
    pub background_caption: String,
    /// Each template must contain `{cue}` and `{subject}`.
    pub question_templates: Vec<String>,
    pub option_count: usize,
    /// P(correct | γ bin) for the scripted direct stage, bins of equal width over [0, 1].
    pub gamma_profile: Vec<f64>,
    /// Probability that the scripted tool policy answers wrongly after a successful zoom.
    pub tool_mistake_rate: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            video_count: 10,
            min_minutes: 5.0,
            max_minutes: 30.0,
            events_per_video: 3,
            distractor_vocab: default_distractors(),
            distractor_lines_per_minute: 2.0,
            background_caption: "an empty street with parked cars".into(),
            question_templates: vec!["When the subtitle mentions '{cue}', what is the {subject} wearing?".into()],
            option_count: 4,
            gamma_profile: staircase_profile(10),
            tool_mistake_rate: 0.0,
        }
    }
}

/// `bins` equal steps with P(correct) equal to each bin's lower edge.
pub fn staircase_profile(bins: usize) -> Vec<f64> {
    (0..bins).map(|i| i as f64 / bins as f64).collect()
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world spec: {0}")]
    Spec(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("{0}")]
    Io(String),
    #[error("malformed world bundle: {0}")]
    Format(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

fn spec_err(m: impl Into<String>) -> Result<(), WorldError> {
    Err(WorldError::Spec(m.into()))
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.video_count == 0 {
            return spec_err("video_count must be at least 1");
        }
        if !(self.min_minutes.is_finite() && self.min_minutes > 0.0 && self.min_minutes <= self.max_minutes) {
            return spec_err("need 0 < min_minutes <= max_minutes");
        }
        if !self.max_minutes.is_finite() {
            return spec_err("max_minutes must be finite");
        }
        if self.events_per_video == 0 || self.events_per_video > SUBJECTS.len() {
            return spec_err(format!("events_per_video must be in 1..={}", SUBJECTS.len()));
        }
        let cells = (self.min_minutes * 60.0 / CELL_S).floor() as usize;
        if cells < 2 * self.events_per_video - 1 {
            return spec_err(format!(
                "{} min videos hold {cells} cells, too few for {} separated events",
                self.min_minutes, self.events_per_video
            ));
        }
        if self.distractor_vocab.is_empty() {
            return spec_err("distractor_vocab is empty");
        }
        let cue: BTreeSet<&str> = CUE_WORDS.iter().copied().collect();
        for w in &self.distractor_vocab {
            if w.trim().is_empty() || w.split_whitespace().count() != 1 {
                return spec_err(format!("distractor entry {w:?} must be a single word"));
            }
            if cue.contains(w.to_lowercase().as_str()) {
                return spec_err(format!("distractor word {w:?} is also a cue word"));
            }
        }
        if !(self.distractor_lines_per_minute.is_finite() && self.distractor_lines_per_minute >= 0.0) {
            return spec_err("distractor_lines_per_minute must be non-negative");
        }
        if self.background_caption.trim().is_empty() {
            return spec_err("background_caption is empty");
        }
        if self.question_templates.is_empty() {
            return spec_err("no question templates");
        }
        for t in &self.question_templates {
            if !(t.contains("{cue}") && t.contains("{subject}")) {
                return spec_err(format!("template {t:?} must contain {{cue}} and {{subject}}"));
            }
        }
        if !(2..=26).contains(&self.option_count) || self.option_count > COLORS.len() * ITEMS.len() {
            return spec_err("option_count must be in 2..=26");
        }
        if self.gamma_profile.is_empty() || self.gamma_profile.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return spec_err("gamma_profile must be a non-empty list of probabilities");
        }
        if !(0.0..=1.0).contains(&self.tool_mistake_rate) {
            return spec_err("tool_mistake_rate must be in [0, 1]");
        }
        let total_events = self.video_count * self.events_per_video;
        if total_events > 100_000 {
            return spec_err("at most 100000 events per world");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEvent {
    pub task_id: String,
    pub video_id: String,
    pub interval: TimeInterval,
    pub caption: String,
    pub subject: String,
    /// The option text this event evidences, e.g. "a red hat".
    pub attire: String,
    pub cue: String,
    pub subtitle: Option<String>,
    pub answer_key: char,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub video_id: String,
    pub cell: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub caption: String,
}

/// A generated world. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub videos: Vec<VideoMeta>,
    pub events: Vec<PlantedEvent>,
    pub tracks: BTreeMap<String, SubtitleTrack>,
    pub tasks: Vec<QATask>,
    pub direct_script: ScriptFile,
}

fn round_cs(t: f64) -> f64 {
    (t * 100.0).round() / 100.0
}

fn letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

fn draw_words(rng: &mut ChaCha8Rng, vocab: &[&str], n: usize) -> String {
    index::sample(rng, vocab.len(), n.min(vocab.len())).into_iter().map(|i| vocab[i]).collect::<Vec<_>>().join(" ")
}

fn attire(color: &str, item: &str) -> String {
    format!("a {color} {item}")
}

/// Builds the world for `spec`. A pure function of the spec.
pub fn generate_world(spec: &WorldSpec) -> Result<World, WorldError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "world", 0));
    let distractors: Vec<&str> = spec.distractor_vocab.iter().map(String::as_str).collect();
    let mut used_cues: BTreeSet<Vec<&str>> = BTreeSet::new();
    let mut videos = Vec::new();
    let mut events = Vec::new();
    let mut tracks = BTreeMap::new();
    let mut tasks = Vec::new();
    let width = spec.video_count.to_string().len().max(4);

    for v in 0..spec.video_count {
        let video_id = format!("w{v:0width$}");
        let minutes = rng.random_range(spec.min_minutes..=spec.max_minutes);
        let duration_s = round_cs(minutes * 60.0);
        let meta = VideoMeta::virtual_video(&video_id, duration_s).map_err(|e| WorldError::Spec(e.to_string()))?;
        let full_cells = (duration_s / CELL_S).floor() as usize;
        let e = spec.events_per_video;
        // Non-adjacent cells: sorted distinct draws shifted by their rank.
        let mut slots: Vec<usize> = index::sample(&mut rng, full_cells - e + 1, e).into_vec();
        slots.sort_unstable();
        let cells: Vec<usize> = slots.iter().enumerate().map(|(i, s)| s + i).collect();
        let subjects: Vec<&str> = index::sample(&mut rng, SUBJECTS.len(), e).into_iter().map(|i| SUBJECTS[i]).collect();

        let mut cues_for_track = Vec::new();
        for (j, (&cell, &subject)) in cells.iter().zip(&subjects).enumerate() {
            let task_id = format!("{video_id}-e{j}");
            let cue = loop {
                let mut words: Vec<&str> =
                    index::sample(&mut rng, CUE_WORDS.len(), CUE_LEN).into_iter().map(|i| CUE_WORDS[i]).collect();
                let text = words.join(" ");
                words.sort_unstable();
                if used_cues.insert(words) {
                    break text;
                }
            };
            let color = *COLORS.choose(&mut rng).expect("non-empty");
            let item = *ITEMS.choose(&mut rng).expect("non-empty");
            let truth = attire(color, item);
            let mut options = vec![truth.clone()];
            while options.len() < spec.option_count {
                let o = attire(COLORS.choose(&mut rng).expect("non-empty"), ITEMS.choose(&mut rng).expect("non-empty"));
                if !options.contains(&o) {
                    options.push(o);
                }
            }
            options.shuffle(&mut rng);
            let answer = letter(options.iter().position(|o| *o == truth).expect("truth is an option"));
            let template = spec.question_templates.choose(&mut rng).expect("validated non-empty");
            let question = template.replace("{cue}", &cue).replace("{subject}", subject);

            let cell_start = cell as f64 * CELL_S;
            let interval = TimeInterval::new(cell_start, cell_start + CELL_S).expect("positive cell");
            let sub_start = round_cs(cell_start + rng.random_range(0.5..3.0));
            let sub_end = round_cs(sub_start + rng.random_range(2.0..6.0));
            cues_for_track.push((TimeInterval::new(sub_start, sub_end).expect("ordered"), cue.clone()));

            events.push(PlantedEvent {
                task_id: task_id.clone(),
                video_id: video_id.clone(),
                interval,
                caption: format!("a {subject} wearing {truth}"),
                subject: subject.to_string(),
                attire: truth,
                cue: cue.clone(),
                subtitle: Some(cue),
                answer_key: answer,
            });
            tasks.push(QATask {
                task_id,
                video_id: video_id.clone(),
                question,
                options: options.into_iter().enumerate().map(|(i, t)| AnswerOption::new(letter(i), t)).collect(),
                answer,
                initial_caption: None,
            });
        }

        let event_cells: BTreeSet<usize> = cells.iter().copied().collect();
        let free: Vec<usize> = (0..full_cells).filter(|c| !event_cells.contains(c)).collect();
        let lines = ((minutes * spec.distractor_lines_per_minute).round() as usize).min(free.len());
        for i in index::sample(&mut rng, free.len(), lines) {
            let start = round_cs(free[i] as f64 * CELL_S + rng.random_range(0.5..3.0));
            let end = round_cs(start + rng.random_range(2.0..6.0));
            let n = rng.random_range(4..=8);
            cues_for_track
                .push((TimeInterval::new(start, end).expect("ordered"), draw_words(&mut rng, &distractors, n)));
        }
        tracks
            .insert(video_id.clone(), SubtitleTrack::from_cues(&video_id, SubtitleFormat::WhisperJson, cues_for_track));
        videos.push(meta);
    }

    let direct_script = direct_script(spec, &tasks);
    Ok(World { spec: spec.clone(), videos, events, tracks, tasks, direct_script })
}

/// Direct-stage replies: γ uniform in (0, 1), correctness drawn from the
/// profile at γ's bin, the answer letter as the only scored token.
fn direct_script(spec: &WorldSpec, tasks: &[QATask]) -> ScriptFile {
    let bins = spec.gamma_profile.len();
    let conversations = tasks
        .iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &t.task_id, 1));
            let gamma = loop {
                let g: f64 = rng.random();
                if g > 0.0 {
                    break g;
                }
            };
            let lp = gamma.ln();
            let bin = ((lp.exp() * bins as f64).floor() as usize).min(bins - 1);
            let correct = rng.random::<f64>() < spec.gamma_profile[bin];
            let reply = if correct {
                t.answer
            } else {
                let wrong: Vec<char> = t.letters().into_iter().filter(|c| *c != t.answer).collect();
                *wrong.choose(&mut rng).expect("at least two options")
            };
            Conversation {
                key: Some(t.question.clone()),
                steps: vec![ScriptStep {
                    match_text: None,
                    text: reply.to_string(),
                    logprobs: Some(vec![lp]),
                    answer_span: Some((0, 1)),
                }],
            }
        })
        .collect();
    ScriptFile { schema: SCRIPT_SCHEMA.into(), conversations }
}

/// Reorders options so that new option `i` is old option `perm[i]`.
pub fn shuffle_options(task: &QATask, perm: &[usize]) -> Result<QATask, WorldError> {
    let mut seen = vec![false; task.options.len()];
    if perm.len() != task.options.len()
        || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
    {
        return Err(WorldError::Spec(format!("{perm:?} is not a permutation of {} options", task.options.len())));
    }
    let options: Vec<AnswerOption> =
        perm.iter().enumerate().map(|(i, &p)| AnswerOption::new(letter(i), task.options[p].text.clone())).collect();
    let old = task.letters().iter().position(|c| *c == task.answer).expect("answer is an option");
    let answer = letter(perm.iter().position(|&p| p == old).expect("permutation covers every option"));
    Ok(QATask { options, answer, ..task.clone() })
}

/// The planted answer letter for `task`, read from world state and the
/// task's current option order.
pub fn oracle_answer(world: &World, task: &QATask) -> Result<char, WorldError> {
    let event = world
        .events
        .iter()
        .find(|e| e.task_id == task.task_id)
        .ok_or_else(|| WorldError::UnknownTask(task.task_id.clone()))?;
    task.options
        .iter()
        .find(|o| o.text == event.attire)
        .map(|o| o.letter)
        .ok_or_else(|| WorldError::Format(format!("task {} has no option {:?}", task.task_id, event.attire)))
}

#[derive(Serialize, Deserialize)]
struct WorldFile {
    schema: String,
    spec: WorldSpec,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> WorldError {
    WorldError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), WorldError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(v).expect("world types serialize");
    bytes.push(b'\n');
    bytes
}

impl World {
    pub fn video(&self, video_id: &str) -> Option<&VideoMeta> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    pub fn caption_entries(&self) -> Vec<CaptionEntry> {
        self.events
            .iter()
            .map(|e| CaptionEntry {
                video_id: e.video_id.clone(),
                cell: (e.interval.start_s() / CELL_S).round() as usize,
                start_s: e.interval.start_s(),
                end_s: e.interval.end_s(),
                caption: e.caption.clone(),
            })
            .collect()
    }

    pub fn caption_store(&self) -> CaptionStore {
        CaptionStore::new(&self.spec.background_caption, &self.caption_entries(), self.tracks.values())
    }

    /// Writes the bundle layout: world.json, manifests/, subtitles/,
    /// captions.jsonl, tasks.jsonl and scripts/direct.json.
    pub fn write_bundle(&self, dir: &Path) -> Result<(), WorldError> {
        for sub in ["manifests", "subtitles", "scripts"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| io_err(&dir.join(sub), e))?;
        }
        write_file(
            &dir.join("world.json"),
            &to_json(&WorldFile { schema: WORLD_SCHEMA.into(), spec: self.spec.clone() }),
        )?;
        for meta in &self.videos {
            let events = self
                .events
                .iter()
                .filter(|e| e.video_id == meta.video_id)
                .map(|e| serde_json::to_value(e).expect("event serializes"))
                .collect();
            let manifest =
                VirtualManifest { video_id: meta.video_id.clone(), duration_s: meta.duration_s, fps: meta.fps, events };
            write_file(&dir.join("manifests").join(format!("{}.json", meta.video_id)), &to_json(&manifest))?;
            let track = &self.tracks[&meta.video_id];
            write_file(
                &dir.join("subtitles").join(format!("{}.json", meta.video_id)),
                &serialize_track(track, SubtitleFormat::WhisperJson),
            )?;
        }
        let mut buf = Vec::new();
        write_jsonl(&mut buf, self.caption_entries()).map_err(|e| io_err(dir, e))?;
        write_file(&dir.join("captions.jsonl"), &buf)?;
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &self.tasks).map_err(|e| io_err(dir, e))?;
        write_file(&dir.join("tasks.jsonl"), &buf)?;
        write_file(&dir.join("scripts").join("direct.json"), &to_json(&self.direct_script))?;
        Ok(())
    }

    pub fn load_bundle(dir: &Path) -> Result<Self, WorldError> {
        let read = |p: &Path| fs::read(p).map_err(|e| io_err(p, e));
        let wf: WorldFile = serde_json::from_slice(&read(&dir.join("world.json"))?)
            .map_err(|e| WorldError::Format(format!("world.json: {e}")))?;
        if wf.schema != WORLD_SCHEMA {
            return Err(WorldError::Format(format!("unsupported world schema {:?}", wf.schema)));
        }
        let mdir = dir.join("manifests");
        let mut paths: Vec<_> = fs::read_dir(&mdir)
            .map_err(|e| io_err(&mdir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let (mut videos, mut events, mut tracks) = (Vec::new(), Vec::new(), BTreeMap::new());
        for p in paths {
            let manifest = VirtualManifest::from_json(&read(&p)?).map_err(|e| io_err(&p, e))?;
            for ev in &manifest.events {
                events.push(
                    serde_json::from_value::<PlantedEvent>(ev.clone())
                        .map_err(|e| io_err(&p, format!("event: {e}")))?,
                );
            }
            let meta = manifest.into_meta(&p).map_err(|e| io_err(&p, e))?;
            let sp = dir.join("subtitles").join(format!("{}.json", meta.video_id));
            let track = parse_subtitles(&read(&sp)?, SubtitleFormat::WhisperJson, &meta.video_id)
                .map_err(|e| io_err(&sp, e))?;
            tracks.insert(meta.video_id.clone(), track);
            videos.push(meta);
        }
        let tp = dir.join("tasks.jsonl");
        let tasks: Vec<QATask> = read_jsonl(read(&tp)?.as_slice()).map_err(|e| io_err(&tp, e))?;
        let sp = dir.join("scripts").join("direct.json");
        let direct_script: ScriptFile = serde_json::from_slice(&read(&sp)?).map_err(|e| io_err(&sp, e))?;
        Ok(Self { spec: wf.spec, videos, events, tracks, tasks, direct_script })
    }

    /// Tool environment with hashing-embedder indexes over the world's
    /// clip texts and subtitles, and the caption store as captioner.
    pub fn tool_env(&self, embed_seed: u64, dim: usize) -> Result<ToolEnv, WorldError> {
        let store = Arc::new(self.caption_store());
        let clip = Arc::new(HashingEmbedder::new(embed_seed, dim).with_clip_texts(store.clone()));
        let sub = Arc::new(HashingEmbedder::new(embed_seed, dim));
        let mut env = ToolEnv::new(clip.clone(), sub.clone());
        for meta in &self.videos {
            env.clip_indexes.insert(meta.video_id.clone(), Arc::new(build_clip_index(meta, clip.as_ref())?));
            let track = &self.tracks[&meta.video_id];
            if !track.is_empty() {
                env.subtitle_indexes
                    .insert(meta.video_id.clone(), Arc::new(build_subtitle_index(track, sub.as_ref())?));
            }
            env.tracks.insert(meta.video_id.clone(), Arc::new(track.clone()));
            env.catalog.insert(meta.video_id.clone(), meta.clone());
        }
        env.captioner = Some(store);
        Ok(env)
    }

    pub fn direct_backend(&self) -> Result<ScriptedBackend, WorldError> {
        ScriptedBackend::new(self.direct_script.conversations.clone())
            .map(|b| b.with_name("world-direct"))
            .map_err(|e| WorldError::Format(e.to_string()))
    }

    pub fn tool_policy(&self) -> WorldToolPolicy {
        WorldToolPolicy::new(self)
    }

    /// Scripted direct stage and the world tool policy.
    pub fn endpoints(&self) -> Result<Endpoints, WorldError> {
        Ok(Endpoints {
            direct: Endpoint::new(Arc::new(self.direct_backend()?)),
            tool: Endpoint::new(Arc::new(self.tool_policy())),
        })
    }
}
