//! Tool-reasoning trajectory synthesis in caption space, sample filtering,
//! and grounding into frame-interleaved training records.

pub mod engine;
mod ground;
pub mod prompt;

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatMessage, Endpoint, GenerationParams};
use crate::media::{uniform_sample, VideoMeta};
use crate::tools::{ToolCall, ToolContext, ToolEnv, ToolError, ToolName, ToolRegistry, ToolResult};
use crate::util::{derive_seed, par_map, CancelToken};

pub use ground::{dataset_stats, ground_trajectory, StatsReport, TrainingRecord, RECORD_SCHEMA};

pub const TRAJECTORY_SCHEMA: &str = "trajectory/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub letter: char,
    pub text: String,
}

impl AnswerOption {
    pub fn new(letter: char, text: impl Into<String>) -> Self {
        Self { letter, text: text.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QATask {
    pub task_id: String,
    pub video_id: String,
    pub question: String,
    pub options: Vec<AnswerOption>,
    pub answer: char,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_caption: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("task {task_id}: {reason}")]
pub struct TaskError {
    pub task_id: String,
    pub reason: String,
}

impl QATask {
    pub fn letters(&self) -> Vec<char> {
        self.options.iter().map(|o| o.letter).collect()
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let fail = |reason: &str| Err(TaskError { task_id: self.task_id.clone(), reason: reason.into() });
        if self.options.len() < 2 {
            return fail("needs at least two options");
        }
        let letters = self.letters();
        if letters.iter().collect::<HashSet<_>>().len() != letters.len() {
            return fail("duplicate option letters");
        }
        if !letters.contains(&self.answer) {
            return fail("answer is not one of the options");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StepAction {
    ToolCall { call: ToolCall },
    Answer { letter: Option<char>, forced: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Observation {
    Result(ToolResult),
    Error { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub thought: String,
    pub action: StepAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<Observation>,
    /// Tool the model asked for when the executed call was substituted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewritten_from: Option<ToolName>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub schema: String,
    pub task: QATask,
    pub prompt_version: String,
    pub prompt_fingerprint: String,
    pub initial_caption: String,
    pub steps: Vec<ReasoningStep>,
    pub final_answer: Option<char>,
    pub correct: bool,
    pub forced_answer: bool,
    pub malformed_calls: usize,
    pub sample_index: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Present when the sample failed and has no usable steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Seed of the draw that kept this sample when no sample was correct.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_seed: Option<u64>,
}

impl Trajectory {
    pub fn tool_calls(&self) -> impl Iterator<Item = (&ToolCall, &ReasoningStep)> {
        self.steps.iter().filter_map(|s| match &s.action {
            StepAction::ToolCall { call } => Some((call, s)),
            StepAction::Answer { .. } => None,
        })
    }

    pub fn completed(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub max_steps: usize,
    pub samples_per_task: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Frames sampled for the whole-video caption.
    pub caption_frames: usize,
    /// Upper bound on correct trajectories kept per task.
    pub max_kept_per_task: Option<usize>,
    pub workers: usize,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            max_steps: 8,
            samples_per_task: 5,
            temperature: 0.7,
            max_tokens: 1024,
            caption_frames: 32,
            max_kept_per_task: None,
            workers: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("task {task_id}: {source}")]
    Tool { task_id: String, source: ToolError },
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), SynthesisError> {
        if self.max_steps == 0 || self.samples_per_task == 0 {
            return Err(SynthesisError::Config("max_steps and samples_per_task must be at least 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(SynthesisError::Config(format!("temperature {}", self.temperature)));
        }
        if self.caption_frames == 0 {
            return Err(SynthesisError::Config("caption_frames must be at least 1".into()));
        }
        Ok(())
    }
}

/// Whole-video caption from a uniform frame sample, unless the task already has one.
pub fn initial_caption(env: &ToolEnv, task: &QATask, frames: usize) -> Result<String, ToolError> {
    if let Some(c) = &task.initial_caption {
        return Ok(c.clone());
    }
    let meta = env.video(&task.video_id)?;
    let captioner = env.captioner.as_ref().ok_or(ToolError::NotConfigured("captioner"))?;
    let sample = uniform_sample(meta, frames)?;
    Ok(captioner.caption(meta, &sample)?)
}

fn sample_seed(seed: u64, task_id: &str, sample: usize) -> u64 {
    derive_seed(seed, task_id, sample as u64)
}

/// One sampled trajectory for `task` given its whole-video caption.
pub fn synthesize_trajectory(
    reasoner: &Endpoint,
    env: &ToolEnv,
    task: &QATask,
    meta: &VideoMeta,
    caption: &str,
    cfg: &SynthesisConfig,
    sample_index: usize,
) -> Trajectory {
    let registry = ToolRegistry::synthesis();
    let system = prompt::system_prompt(&registry, cfg.max_steps);
    let seed = sample_seed(cfg.seed, &task.task_id, sample_index);
    let options = task.letters();
    let loop_cfg = engine::LoopConfig {
        registry: &registry,
        max_steps: cfg.max_steps,
        rewrite_frame_zoom: true,
        attach_frames: false,
        params: GenerationParams {
            temperature: cfg.temperature,
            max_tokens: cfg.max_tokens,
            want_logprobs: false,
            seed: Some(seed),
        },
        options: &options,
    };
    let messages =
        vec![ChatMessage::system(system.clone()), ChatMessage::user(prompt::task_prompt(task, meta, Some(caption)))];
    let mut traj = Trajectory {
        schema: TRAJECTORY_SCHEMA.into(),
        task: task.clone(),
        prompt_version: prompt::PROMPT_VERSION.into(),
        prompt_fingerprint: prompt::fingerprint(&system),
        initial_caption: caption.to_string(),
        steps: Vec::new(),
        final_answer: None,
        correct: false,
        forced_answer: false,
        malformed_calls: 0,
        sample_index,
        temperature: cfg.temperature,
        seed,
        error: None,
        selection_seed: None,
    };
    match engine::run_loop(reasoner, env, &mut ToolContext::default(), messages, &loop_cfg) {
        Ok(out) => {
            traj.correct = out.final_answer == Some(task.answer);
            traj.steps = out.steps;
            traj.final_answer = out.final_answer;
            traj.forced_answer = out.forced_answer;
            traj.malformed_calls = out.malformed_calls;
        }
        Err(e) => {
            tracing::warn!(task = %task.task_id, sample = sample_index, error = %e, "sample failed");
            traj.error = Some(e.to_string());
        }
    }
    traj
}

fn dedup_key(t: &Trajectory) -> String {
    serde_json::to_string(&(&t.initial_caption, &t.steps, &t.final_answer)).expect("trajectory serializes")
}

/// Keeps every distinct correct sample (capped by `max_kept`); if none is
/// correct, keeps one completed sample drawn with `selection_seed`.
pub fn select_trajectories(samples: &[Trajectory], max_kept: Option<usize>, selection_seed: u64) -> Vec<Trajectory> {
    let mut seen = HashSet::new();
    let mut kept: Vec<Trajectory> =
        samples.iter().filter(|t| t.correct && seen.insert(dedup_key(t))).cloned().collect();
    if let Some(cap) = max_kept {
        kept.truncate(cap);
    }
    if !kept.is_empty() {
        return kept;
    }
    let answered: Vec<&Trajectory> = samples.iter().filter(|t| t.completed() && t.final_answer.is_some()).collect();
    let pool: Vec<&Trajectory> =
        if answered.is_empty() { samples.iter().filter(|t| t.completed()).collect() } else { answered };
    if pool.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(selection_seed);
    let mut pick = pool[rng.random_range(0..pool.len())].clone();
    pick.selection_seed = Some(selection_seed);
    vec![pick]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOutput {
    /// Every sample, ordered by task then sample index.
    pub samples: Vec<Trajectory>,
    /// Samples that pass the correctness filter, in the same order.
    pub kept: Vec<Trajectory>,
    pub tasks_done: usize,
    pub tasks_total: usize,
    pub failed_tasks: Vec<String>,
}

impl SynthesisOutput {
    pub fn complete(&self) -> bool {
        self.tasks_done == self.tasks_total
    }
}

/// Samples and filters trajectories for every task. Tasks are processed on
/// `cfg.workers` threads; results keep input order.
pub fn synthesize_dataset(
    reasoner: &Endpoint,
    env: &ToolEnv,
    tasks: &[QATask],
    cfg: &SynthesisConfig,
    cancel: Option<&CancelToken>,
) -> Result<SynthesisOutput, SynthesisError> {
    cfg.validate()?;
    for t in tasks {
        t.validate()?;
        env.video(&t.video_id).map_err(|e| SynthesisError::Tool { task_id: t.task_id.clone(), source: e })?;
    }
    let per_task = par_map(cfg.workers, tasks, |task| {
        if cancel.is_some_and(CancelToken::is_cancelled) {
            return None;
        }
        let meta = env.video(&task.video_id).expect("checked above");
        let caption = match initial_caption(env, task, cfg.caption_frames) {
            Ok(c) => c,
            Err(e) => return Some(Err(format!("task {}: caption failed: {e}", task.task_id))),
        };
        let samples: Vec<Trajectory> = (0..cfg.samples_per_task)
            .map(|s| synthesize_trajectory(reasoner, env, task, meta, &caption, cfg, s))
            .collect();
        Some(Ok(samples))
    });

    let mut out = SynthesisOutput {
        samples: Vec::new(),
        kept: Vec::new(),
        tasks_done: 0,
        tasks_total: tasks.len(),
        failed_tasks: Vec::new(),
    };
    for (task, result) in tasks.iter().zip(per_task) {
        match result {
            None => {}
            Some(Err(e)) => {
                tracing::warn!(error = %e, "task skipped");
                out.failed_tasks.push(task.task_id.clone());
                out.tasks_done += 1;
            }
            Some(Ok(samples)) => {
                let selection_seed = derive_seed(cfg.seed, &task.task_id, u64::MAX);
                out.kept.extend(select_trajectories(&samples, cfg.max_kept_per_task, selection_seed));
                out.samples.extend(samples);
                out.tasks_done += 1;
            }
        }
    }
    Ok(out)
}
