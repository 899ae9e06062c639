//! Confidence-gated two-stage inference: a direct answer from sampled or
//! retrieved frames, escalated to the tool loop when the answer-token
//! confidence falls below the threshold.

mod eval;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{embed, EmbedContent};
use crate::gateway::{
    answer_confidence, extract_answer, locate_answer_span, ChatMessage, ConfidenceScope, Endpoint, GatewayError,
    GenerationOutput, GenerationParams, Part, Role, VideoClipRef,
};
use crate::media::{TimeInterval, VideoMeta};
use crate::synthesis::engine::{run_loop, LoopConfig};
use crate::synthesis::{prompt, QATask, Trajectory, TRAJECTORY_SCHEMA};
use crate::tools::{FrameBudget, ToolContext, ToolEnv, ToolError, ToolRegistry};
use crate::util::{derive_seed, par_map, CancelToken};

pub use eval::{
    calibration_bins, duration_bucket, evaluate, render_report, sweep, BucketStats, CalibrationBin, DurationBucket,
    EvalAccumulator, EvalReport, SweepAxis, SweepRow, SweepTable,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunPolicy {
    /// Frames for the direct stage.
    pub n: usize,
    /// Clips retrieved for the direct stage on long videos.
    pub k: usize,
    pub tau: f64,
    pub frame_budget: usize,
    /// Videos shorter than this are sampled uniformly; longer ones use retrieval.
    pub duration_gate_s: f64,
    pub zoom_frames: usize,
    /// Default topk for retrieval tools in the tool stage.
    pub tool_topk: usize,
    pub max_steps: usize,
    pub confidence_scope: ConfidenceScope,
    /// Ask the model for a self-reported confidence when logprobs are unavailable.
    pub self_report_probe: bool,
    pub seed: u64,
}

impl Default for RunPolicy {
    fn default() -> Self {
        Self {
            n: 32,
            k: 1,
            tau: 0.7,
            frame_budget: 64,
            duration_gate_s: 600.0,
            zoom_frames: 8,
            tool_topk: ToolEnv::DEFAULT_TOPK,
            max_steps: 8,
            confidence_scope: ConfidenceScope::AnswerSpan,
            self_report_probe: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid run policy: {0}")]
pub struct PolicyError(pub String);

impl RunPolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let fail = |m: String| Err(PolicyError(m));
        if self.n == 0 || self.k == 0 || self.zoom_frames == 0 || self.tool_topk == 0 || self.max_steps == 0 {
            return fail("n, k, zoom_frames, tool_topk and max_steps must be at least 1".into());
        }
        if self.n > self.frame_budget {
            return fail(format!("n = {} exceeds frame_budget = {}", self.n, self.frame_budget));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return fail(format!("tau = {} is outside [0, 1]", self.tau));
        }
        if !(self.duration_gate_s.is_finite() && self.duration_gate_s > 0.0) {
            return fail(format!("duration_gate_s = {} must be positive", self.duration_gate_s));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Direct,
    Tool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectBranch {
    /// Uniform frames over the whole video.
    Uniform,
    /// Frames from the top-k retrieved clips.
    Retrieval,
}

/// The model backends used by one run.
#[derive(Debug, Clone)]
pub struct Endpoints {
    pub direct: Endpoint,
    pub tool: Endpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub task_id: String,
    pub video_id: String,
    pub duration_s: f64,
    pub branch: DirectBranch,
    pub answer: Option<char>,
    pub truth: char,
    pub correct: bool,
    /// Direct-stage confidence; the gate compares this with tau.
    pub confidence: f64,
    pub direct_answer: Option<char>,
    pub mode: RunMode,
    pub frames_used: usize,
    pub tool_calls: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Trajectory>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tool(#[from] ToolError),
}

/// Clip allotment for the retrieval branch: `n / m` frames per clip with
/// the remainder going to the best-ranked clips.
pub fn split_frames(n: usize, clips: usize) -> Vec<usize> {
    if clips == 0 {
        return Vec::new();
    }
    (0..clips).map(|i| n / clips + usize::from(i < n % clips)).filter(|c| *c > 0).collect()
}

/// Direct-stage visual input: one video part per sampled span and the total frame count.
pub fn direct_inputs(
    env: &ToolEnv,
    task: &QATask,
    meta: &VideoMeta,
    policy: &RunPolicy,
) -> Result<(DirectBranch, Vec<VideoClipRef>), ToolError> {
    if meta.duration_s < policy.duration_gate_s {
        return Ok((DirectBranch::Uniform, vec![VideoClipRef::new(meta.video_id.clone(), meta.whole(), policy.n)]));
    }
    let index = env.clip_indexes.get(&meta.video_id).ok_or_else(|| ToolError::IndexMissing(meta.video_id.clone()))?;
    let query = embed(env.clip_embedder.as_ref(), EmbedContent::Text(&task.question))?;
    let hits = index.search(&query, policy.k)?;
    let counts = split_frames(policy.n, hits.len());
    let mut clips: Vec<(TimeInterval, usize)> = hits.iter().zip(counts).map(|(h, c)| (h.interval, c)).collect();
    clips.sort_by(|a, b| a.0.start_s().total_cmp(&b.0.start_s()));
    let parts = clips.into_iter().map(|(iv, c)| VideoClipRef::new(meta.video_id.clone(), iv, c)).collect();
    Ok((DirectBranch::Retrieval, parts))
}

fn probe_confidence(
    endpoint: &Endpoint,
    messages: &[ChatMessage],
    text: &str,
    params: &GenerationParams,
) -> Option<f64> {
    let mut follow = messages.to_vec();
    follow.push(ChatMessage::assistant(text));
    follow.push(ChatMessage::user("How confident are you in that answer? Output only a number between 0 and 1."));
    let params = GenerationParams { want_logprobs: false, max_tokens: 16, ..params.clone() };
    let out = endpoint.generate(&follow, &params).ok()?;
    let v: f64 = out.text.trim().trim_end_matches('.').parse().ok()?;
    v.is_finite().then(|| v.clamp(0.0, 1.0))
}

struct DirectOutcome {
    answer: Option<char>,
    confidence: f64,
    warning: Option<String>,
}

fn direct_stage(
    endpoint: &Endpoint,
    task: &QATask,
    clips: &[VideoClipRef],
    policy: &RunPolicy,
    seed: u64,
) -> DirectOutcome {
    let mut content: Vec<Part> = clips.iter().cloned().map(Part::Video).collect();
    content.push(Part::Text { text: prompt::direct_prompt(task) });
    let messages = vec![ChatMessage { role: Role::User, content }];
    let params = GenerationParams { temperature: 0.0, max_tokens: 16, want_logprobs: true, seed: Some(seed) };
    let letters = task.letters();
    let fail = |warning: String| DirectOutcome { answer: None, confidence: 0.0, warning: Some(warning) };
    let out: GenerationOutput = match endpoint.generate(&messages, &params) {
        Ok(out) => out,
        Err(GatewayError::LogprobsUnavailable { text }) => {
            let answer = extract_answer(&text, &letters);
            let probed = if policy.self_report_probe && answer.is_some() {
                probe_confidence(endpoint, &messages, &text, &params)
            } else {
                None
            };
            return DirectOutcome {
                answer,
                confidence: probed.unwrap_or(0.0),
                warning: Some("logprobs unavailable".into()),
            };
        }
        Err(e) => return fail(format!("direct stage failed: {e}")),
    };
    let Some(answer) = extract_answer(&out.text, &letters) else {
        return fail(format!("unparseable direct answer {:?}", out.text));
    };
    let confidence = locate_answer_span(&out, answer, policy.confidence_scope)
        .ok_or(GatewayError::EmptySpan)
        .and_then(|span| answer_confidence(out.token_logprobs.as_deref().unwrap_or_default(), span));
    match confidence {
        Ok(g) => DirectOutcome { answer: Some(answer), confidence: g, warning: None },
        Err(e) => DirectOutcome { answer: Some(answer), confidence: 0.0, warning: Some(format!("confidence: {e}")) },
    }
}

/// Runs one task through the gated pipeline.
pub fn run_adaptive(
    env: &ToolEnv,
    endpoints: &Endpoints,
    task: &QATask,
    policy: &RunPolicy,
    keep_trace: bool,
) -> Result<RunResult, RunError> {
    policy.validate()?;
    let meta = env.video(&task.video_id)?;
    let seed = derive_seed(policy.seed, &task.task_id, 0);
    let (branch, clips) = direct_inputs(env, task, meta, policy)?;
    let direct_frames: usize = clips.iter().map(|c| c.frame_count).sum();
    let direct = direct_stage(&endpoints.direct, task, &clips, policy, seed);

    let mut result = RunResult {
        task_id: task.task_id.clone(),
        video_id: task.video_id.clone(),
        duration_s: meta.duration_s,
        branch,
        answer: direct.answer,
        truth: task.answer,
        correct: false,
        confidence: direct.confidence,
        direct_answer: direct.answer,
        mode: RunMode::Direct,
        frames_used: direct_frames,
        tool_calls: 0,
        trace: None,
        warnings: direct.warning.into_iter().collect(),
    };

    if direct.confidence < policy.tau {
        result.mode = RunMode::Tool;
        let registry = ToolRegistry::inference();
        let system = prompt::system_prompt(&registry, policy.max_steps);
        let letters = task.letters();
        let cfg = LoopConfig {
            registry: &registry,
            max_steps: policy.max_steps,
            rewrite_frame_zoom: false,
            attach_frames: true,
            params: GenerationParams { temperature: 0.0, max_tokens: 1024, want_logprobs: false, seed: Some(seed) },
            options: &letters,
        };
        let mut ctx = ToolContext {
            budget: FrameBudget { limit: Some(policy.frame_budget), used: direct_frames },
            zoom_frames: Some(policy.zoom_frames),
            default_topk: Some(policy.tool_topk),
        };
        let messages =
            vec![ChatMessage::system(system.clone()), ChatMessage::user(prompt::task_prompt(task, meta, None))];
        match run_loop(&endpoints.tool, env, &mut ctx, messages, &cfg) {
            Ok(out) => {
                result.tool_calls = out.steps.iter().filter(|s| s.observation.is_some()).count();
                match out.final_answer {
                    Some(a) => result.answer = Some(a),
                    None => result.warnings.push("tool stage gave no answer; kept the direct answer".into()),
                }
                if keep_trace {
                    result.trace = Some(Trajectory {
                        schema: TRAJECTORY_SCHEMA.into(),
                        task: task.clone(),
                        prompt_version: prompt::PROMPT_VERSION.into(),
                        prompt_fingerprint: prompt::fingerprint(&system),
                        initial_caption: String::new(),
                        correct: out.final_answer == Some(task.answer),
                        final_answer: out.final_answer,
                        forced_answer: out.forced_answer,
                        malformed_calls: out.malformed_calls,
                        steps: out.steps,
                        sample_index: 0,
                        temperature: 0.0,
                        seed,
                        error: None,
                        selection_seed: None,
                    });
                }
            }
            Err(e) => result.warnings.push(format!("tool stage failed: {e}; kept the direct answer")),
        }
        result.frames_used = ctx.budget.used;
    }
    result.correct = result.answer == Some(task.answer);
    Ok(result)
}

/// Runs every task on `workers` threads; output follows input order.
/// Tasks not started before cancellation are omitted.
pub fn run_batch(
    env: &ToolEnv,
    endpoints: &Endpoints,
    tasks: &[QATask],
    policy: &RunPolicy,
    workers: usize,
    keep_trace: bool,
    cancel: Option<&CancelToken>,
) -> Result<Vec<RunResult>, RunError> {
    policy.validate()?;
    let results = par_map(workers, tasks, |t| {
        if cancel.is_some_and(CancelToken::is_cancelled) {
            return None;
        }
        Some(run_adaptive(env, endpoints, t, policy, keep_trace))
    });
    results.into_iter().flatten().collect()
}
