use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::prompt::{system_prompt, task_prompt, FORCED_ANSWER_PROMPT};
use super::{Observation, StepAction, Trajectory};
use crate::gateway::{ChatMessage, Part, Role, VideoClipRef};
use crate::media::VideoMeta;
use crate::tools::{parse_tool_call, ParsedAction, ToolArgs, ToolCall, ToolName, ToolPayload, ToolRegistry};

pub const RECORD_SCHEMA: &str = "training-record/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub schema: String,
    pub task_id: String,
    pub video_id: String,
    pub messages: Vec<ChatMessage>,
    pub answer: Option<char>,
}

fn assistant_text(thought: &str, action: &str) -> String {
    if thought.is_empty() {
        action.to_string()
    } else {
        format!("{thought}\n{action}")
    }
}

/// Rewrites a caption-space trajectory into a training record in which
/// every caption_zoom observation becomes the frames it was computed from.
pub fn ground_trajectory(traj: &Trajectory, meta: &VideoMeta) -> TrainingRecord {
    let task = &traj.task;
    let max_steps = traj.tool_calls().count().max(1);
    let mut messages = vec![
        ChatMessage::system(system_prompt(&ToolRegistry::inference(), max_steps)),
        ChatMessage::user(task_prompt(task, meta, Some(&traj.initial_caption))),
    ];
    for step in &traj.steps {
        let thought = step.thought.replace(ToolName::CaptionZoom.as_str(), ToolName::FrameZoom.as_str());
        match &step.action {
            StepAction::ToolCall { call } => {
                let mut call = call.clone();
                let mut reply = match &step.observation {
                    Some(Observation::Result(res)) => ChatMessage::text(Role::Tool, res.rendered.clone()),
                    Some(Observation::Error { message }) => ChatMessage::text(Role::Tool, format!("error: {message}")),
                    None => ChatMessage::text(Role::Tool, "(no observation)"),
                };
                if call.name == ToolName::CaptionZoom {
                    call.name = ToolName::FrameZoom;
                    if let Some(Observation::Result(res)) = &step.observation {
                        if let ToolPayload::Caption { interval, frame_count, .. } = &res.payload {
                            call.arguments = ToolArgs::Interval {
                                video_path: call.arguments.video_path().to_string(),
                                start: interval.start_s(),
                                end: interval.end_s(),
                            };
                            let clip = VideoClipRef::new(task.video_id.clone(), *interval, *frame_count);
                            reply = ChatMessage { role: Role::Tool, content: vec![Part::Video(clip)] };
                        }
                    }
                }
                messages.push(ChatMessage::assistant(assistant_text(&thought, &call.to_wire())));
                messages.push(reply);
            }
            StepAction::Answer { letter, forced } => {
                if *forced {
                    messages.push(ChatMessage::user(FORCED_ANSWER_PROMPT));
                }
                let action = letter.map(|c| format!("<answer>{c}</answer>")).unwrap_or_default();
                messages.push(ChatMessage::assistant(assistant_text(&thought, &action)));
            }
        }
    }
    TrainingRecord {
        schema: RECORD_SCHEMA.into(),
        task_id: task.task_id.clone(),
        video_id: task.video_id.clone(),
        messages,
        answer: traj.final_answer,
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StatsReport {
    pub records: usize,
    /// Video duration bins in minutes: `0-20`, `20-40`, `40-60`, `over_60`.
    pub duration_bins: BTreeMap<String, usize>,
    pub unknown_videos: usize,
    /// Number of records per tool-call count.
    pub tool_call_histogram: BTreeMap<usize, usize>,
    pub tool_usage: BTreeMap<String, usize>,
    pub mean_tool_calls: Option<f64>,
}

pub const DURATION_BINS: [&str; 4] = ["0-20", "20-40", "40-60", "over_60"];

fn duration_bin(seconds: f64) -> &'static str {
    let minutes = seconds / 60.0;
    if minutes < 20.0 {
        DURATION_BINS[0]
    } else if minutes < 40.0 {
        DURATION_BINS[1]
    } else if minutes <= 60.0 {
        DURATION_BINS[2]
    } else {
        DURATION_BINS[3]
    }
}

fn record_calls(record: &TrainingRecord) -> Vec<ToolCall> {
    let registry = ToolRegistry::synthesis();
    record
        .messages
        .iter()
        .filter(|m| m.role == Role::Assistant)
        .filter_map(|m| match parse_tool_call(&m.joined_text(), &registry) {
            Ok(ParsedAction::Call(c)) => Some(c),
            _ => None,
        })
        .collect()
}

pub fn dataset_stats(records: &[TrainingRecord], catalog: &BTreeMap<String, VideoMeta>) -> StatsReport {
    let mut report = StatsReport {
        records: records.len(),
        duration_bins: DURATION_BINS.iter().map(|b| (b.to_string(), 0)).collect(),
        ..Default::default()
    };
    let mut total_calls = 0usize;
    for r in records {
        match catalog.get(&r.video_id) {
            Some(meta) => *report.duration_bins.entry(duration_bin(meta.duration_s).into()).or_default() += 1,
            None => report.unknown_videos += 1,
        }
        let calls = record_calls(r);
        total_calls += calls.len();
        *report.tool_call_histogram.entry(calls.len()).or_default() += 1;
        for c in calls {
            *report.tool_usage.entry(c.name.to_string()).or_default() += 1;
        }
    }
    report.mean_tool_calls = (!records.is_empty()).then(|| total_calls as f64 / records.len() as f64);
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::scripted::{ScriptStep, ScriptedBackend};
    use crate::gateway::Endpoint;
    use crate::synthesis::tests::{env, task};
    use crate::synthesis::{initial_caption, synthesize_trajectory, SynthesisConfig};
    use std::sync::Arc;

    fn traj(steps: Vec<ScriptStep>) -> Trajectory {
        let ep = Endpoint::new(Arc::new(ScriptedBackend::from_steps(steps)));
        let env = env();
        let cfg = SynthesisConfig::default();
        let caption = initial_caption(&env, &task(), 32).unwrap();
        synthesize_trajectory(&ep, &env, &task(), &env.catalog["v1"], &caption, &cfg, 0)
    }

    fn zoom(a: f64, b: f64) -> ScriptStep {
        ScriptStep::text(format!(
            "I will use caption_zoom. {}",
            ToolCall::interval(ToolName::FrameZoom, "v1", a, b).to_wire()
        ))
    }

    fn videos(r: &TrainingRecord) -> Vec<VideoClipRef> {
        r.messages.iter().flat_map(|m| m.videos().cloned()).collect()
    }

    #[test]
    fn caption_zoom_becomes_video_part() {
        let t = traj(vec![zoom(350.0, 360.0), ScriptStep::text("<answer>B</answer>")]);
        let r = ground_trajectory(&t, &env().catalog["v1"]);
        assert_eq!(
            videos(&r),
            vec![VideoClipRef { video_id: "v1".into(), start_s: 350.0, end_s: 360.0, frame_count: 8 }]
        );
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("caption_zoom"));
        assert!(!json.contains("scene at"), "caption text must not leak into the record");
        assert!(json.contains(r#"\"name\":\"frame_zoom\""#));
        assert_eq!(r.answer, Some('B'));
        assert_eq!(r.messages.len(), 2 + 2 + 1);
    }

    #[test]
    fn two_zooms_keep_order_and_clamped_intervals() {
        let t = traj(vec![zoom(1190.0, 1300.0), zoom(10.0, 20.0), ScriptStep::text("<answer>A</answer>")]);
        let r = ground_trajectory(&t, &env().catalog["v1"]);
        let v = videos(&r);
        assert_eq!(v.len(), 2);
        assert_eq!((v[0].start_s, v[0].end_s), (1190.0, 1200.0));
        assert_eq!((v[1].start_s, v[1].end_s), (10.0, 20.0));
    }

    #[test]
    fn records_without_caption_zoom_match_the_trajectory() {
        let t = traj(vec![ScriptStep::text("Obvious. <answer>B</answer>")]);
        let r = ground_trajectory(&t, &env().catalog["v1"]);
        assert!(videos(&r).is_empty());
        assert_eq!(r.messages.last().unwrap().joined_text(), "Obvious.\n<answer>B</answer>");
        assert!(r.messages[1].joined_text().contains("Caption: a long video"));
    }

    #[test]
    fn stats_bins_and_histograms() {
        let mut catalog = BTreeMap::new();
        for (id, min) in [("a", 25.0), ("b", 25.0), ("c", 50.0)] {
            catalog.insert(id.to_string(), VideoMeta::virtual_video(id, min * 60.0).unwrap());
        }
        let mut records = Vec::new();
        for id in ["a", "b", "c"] {
            let mut r = ground_trajectory(&traj(vec![ScriptStep::text("<answer>B</answer>")]), &env().catalog["v1"]);
            r.video_id = id.into();
            records.push(r);
        }
        let mut four = ground_trajectory(
            &traj(vec![
                zoom(0.0, 10.0),
                zoom(10.0, 20.0),
                zoom(20.0, 30.0),
                zoom(30.0, 40.0),
                ScriptStep::text("<answer>B</answer>"),
            ]),
            &env().catalog["v1"],
        );
        four.video_id = "a".into();
        let s = dataset_stats(&records, &catalog);
        assert_eq!(s.duration_bins["0-20"], 0);
        assert_eq!(s.duration_bins["20-40"], 2);
        assert_eq!(s.duration_bins["40-60"], 1);
        records.push(four);
        let s = dataset_stats(&records, &catalog);
        assert_eq!(s.tool_call_histogram[&4], 1);
        assert_eq!(s.tool_usage["frame_zoom"], 4);

        let empty = dataset_stats(&[], &catalog);
        assert_eq!(empty.records, 0);
        assert_eq!(empty.mean_tool_calls, None);
    }
}
