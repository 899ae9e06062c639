//! The reason/act/observe loop shared by synthesis and the tool stage of
//! adaptive inference.

use crate::gateway::{extract_answer, ChatMessage, Endpoint, GatewayError, GenerationParams, Part, Role, VideoClipRef};
use crate::tools::{
    execute, parse_tool_call, MalformedToolCall, ParsedAction, ToolContext, ToolEnv, ToolError, ToolName, ToolPayload,
    ToolRegistry,
};

use super::prompt::{malformed_feedback, FORCED_ANSWER_PROMPT};
use super::{Observation, ReasoningStep, StepAction};

/// Consecutive unparseable turns tolerated before the answer is forced.
pub const MALFORMED_RETRY_BUDGET: usize = 2;

#[derive(Debug, Clone)]
pub struct LoopConfig<'a> {
    pub registry: &'a ToolRegistry,
    pub max_steps: usize,
    /// Synthesis: run frame_zoom requests as caption_zoom.
    pub rewrite_frame_zoom: bool,
    /// Inference: frame_zoom observations carry the frames as a video part.
    pub attach_frames: bool,
    pub params: GenerationParams,
    pub options: &'a [char],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    pub steps: Vec<ReasoningStep>,
    pub final_answer: Option<char>,
    pub forced_answer: bool,
    pub malformed_calls: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum LoopError {
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Tool(ToolError),
}

fn thought_before(text: &str, marker: &str) -> String {
    text.find(marker).map_or(text, |i| &text[..i]).trim().to_string()
}

/// Runs up to `cfg.max_steps` tool rounds starting from `messages`, then
/// forces an answer if none was given.
pub fn run_loop(
    endpoint: &Endpoint,
    env: &ToolEnv,
    ctx: &mut ToolContext,
    mut messages: Vec<ChatMessage>,
    cfg: &LoopConfig<'_>,
) -> Result<LoopOutcome, LoopError> {
    let mut steps = Vec::new();
    let mut tool_steps = 0;
    let mut malformed_calls = 0;
    let mut consecutive_malformed = 0;

    while tool_steps < cfg.max_steps && consecutive_malformed < MALFORMED_RETRY_BUDGET {
        let out = endpoint.generate(&messages, &cfg.params)?;
        messages.push(ChatMessage::assistant(out.text.clone()));
        let parsed = parse_tool_call(&out.text, cfg.registry).and_then(|a| match a {
            ParsedAction::Answer(c) if !cfg.options.contains(&c) => {
                Err(MalformedToolCall(format!("{c} is not one of the options")))
            }
            ParsedAction::None => Err(MalformedToolCall("no <tool_call> or <answer> block found".into())),
            other => Ok(other),
        });
        match parsed {
            Ok(ParsedAction::Answer(letter)) => {
                steps.push(ReasoningStep {
                    thought: thought_before(&out.text, "<answer>"),
                    action: StepAction::Answer { letter: Some(letter), forced: false },
                    observation: None,
                    rewritten_from: None,
                });
                return Ok(LoopOutcome { steps, final_answer: Some(letter), forced_answer: false, malformed_calls });
            }
            Ok(ParsedAction::Call(mut call)) => {
                consecutive_malformed = 0;
                tool_steps += 1;
                let mut rewritten_from = None;
                if cfg.rewrite_frame_zoom && call.name == ToolName::FrameZoom {
                    call.name = ToolName::CaptionZoom;
                    rewritten_from = Some(ToolName::FrameZoom);
                }
                let (observation, reply) = match execute(env, ctx, &call) {
                    Ok(res) => {
                        let content = match (&res.payload, cfg.attach_frames) {
                            (ToolPayload::Frames { frames }, true) => {
                                let interval = frames.source_interval.expect("zoomed frames carry their interval");
                                let vid = env.video(call.arguments.video_path()).map_err(LoopError::Tool)?;
                                vec![Part::Video(VideoClipRef::new(vid.video_id.clone(), interval, frames.len()))]
                            }
                            _ => vec![Part::Text { text: res.rendered.clone() }],
                        };
                        (Observation::Result(res), ChatMessage { role: Role::Tool, content })
                    }
                    Err(e) if e.is_fatal() => return Err(LoopError::Tool(e)),
                    Err(e) => {
                        let message = e.to_string();
                        let reply = ChatMessage::text(Role::Tool, format!("error: {message}"));
                        (Observation::Error { message }, reply)
                    }
                };
                messages.push(reply);
                steps.push(ReasoningStep {
                    thought: thought_before(&out.text, "<tool_call>"),
                    action: StepAction::ToolCall { call },
                    observation: Some(observation),
                    rewritten_from,
                });
            }
            Ok(ParsedAction::None) => unreachable!("mapped to MalformedToolCall above"),
            Err(e) => {
                malformed_calls += 1;
                consecutive_malformed += 1;
                messages.push(ChatMessage::text(Role::Tool, malformed_feedback(&e.to_string())));
            }
        }
    }

    messages.push(ChatMessage::user(FORCED_ANSWER_PROMPT));
    let out = endpoint.generate(&messages, &cfg.params)?;
    let letter = match parse_tool_call(&out.text, cfg.registry) {
        Ok(ParsedAction::Answer(c)) if cfg.options.contains(&c) => Some(c),
        _ => extract_answer(&out.text, cfg.options),
    };
    steps.push(ReasoningStep {
        thought: thought_before(&out.text, "<answer>"),
        action: StepAction::Answer { letter, forced: true },
        observation: None,
        rewritten_from: None,
    });
    Ok(LoopOutcome { steps, final_answer: letter, forced_answer: true, malformed_calls })
}
