//! Prompt templates shared by trajectory synthesis and tool-stage inference.

use crate::media::VideoMeta;
use crate::tools::ToolRegistry;
use crate::util::sha256_hex;

use super::QATask;

/// Bumped whenever any template below changes.
pub const PROMPT_VERSION: &str = "tool-reason/1";

pub fn system_prompt(registry: &ToolRegistry, max_steps: usize) -> String {
    format!(
        "You answer multiple-choice questions about a long video. You can inspect the video with tools.\n\
         Available tools:\n{tools}\
         To call a tool, think briefly and then write exactly one block:\n\
         <tool_call>{{\"name\": \"<tool>\", \"arguments\": {{...}}}}</tool_call>\n\
         When you know the answer, write <answer>X</answer> where X is the option letter.\n\
         You may call at most {max_steps} tools.",
        tools = registry.describe(),
    )
}

/// First user turn: video, optional whole-video caption, question and options.
pub fn task_prompt(task: &QATask, meta: &VideoMeta, caption: Option<&str>) -> String {
    let mut out = format!("Video: {} ({:.1} s)\n", task.video_id, meta.duration_s);
    if let Some(c) = caption {
        out.push_str(&format!("Caption: {c}\n"));
    }
    out.push_str(&format!("Question: {}\nOptions:\n", task.question));
    for o in &task.options {
        out.push_str(&format!("({}) {}\n", o.letter, o.text));
    }
    out
}

/// Single-shot prompt for the direct stage.
pub fn direct_prompt(task: &QATask) -> String {
    let mut out = format!("Question: {}\n", task.question);
    for o in &task.options {
        out.push_str(&format!("({}) {}\n", o.letter, o.text));
    }
    out.push_str("Output a single letter.\nBest option:");
    out
}

pub const FORCED_ANSWER_PROMPT: &str =
    "You have used all available tool calls. Give your final answer now as <answer>X</answer>.";

pub fn malformed_feedback(message: &str) -> String {
    format!("error: {message}. Reply with one <tool_call> block or an <answer> block.")
}

pub fn fingerprint(system: &str) -> String {
    sha256_hex(format!("{PROMPT_VERSION}\n{system}").as_bytes())
}
