use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{run_batch, Endpoints, RunError, RunMode, RunPolicy, RunResult};
use crate::synthesis::QATask;
use crate::tools::ToolEnv;
use crate::util::CancelToken;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationBucket {
    Short,
    Medium,
    Long,
}

/// Short below 2 minutes, long above 15, medium in between inclusive.
pub fn duration_bucket(duration_s: f64) -> DurationBucket {
    if duration_s < 120.0 {
        DurationBucket::Short
    } else if duration_s <= 900.0 {
        DurationBucket::Medium
    } else {
        DurationBucket::Long
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BucketStats {
    pub count: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

impl BucketStats {
    fn finish(count: usize, correct: usize) -> Self {
        Self { count, correct, accuracy: (count > 0).then(|| correct as f64 / count as f64) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: BucketStats,
    pub short: BucketStats,
    pub medium: BucketStats,
    pub long: BucketStats,
    pub mean_frames_used: Option<f64>,
    pub tool_invocation_rate: Option<f64>,
    pub mean_tool_calls: Option<f64>,
    /// Runs that produced no answer.
    pub unanswered: usize,
}

/// Order-independent running totals; `merge` is associative and commutative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalAccumulator {
    count: [usize; 3],
    correct: [usize; 3],
    frames: usize,
    tool_runs: usize,
    tool_calls: usize,
    unanswered: usize,
}

impl EvalAccumulator {
    pub fn push(&mut self, r: &RunResult) {
        let b = duration_bucket(r.duration_s) as usize;
        self.count[b] += 1;
        self.correct[b] += usize::from(r.correct);
        self.frames += r.frames_used;
        self.tool_runs += usize::from(r.mode == RunMode::Tool);
        self.tool_calls += r.tool_calls;
        self.unanswered += usize::from(r.answer.is_none());
    }

    pub fn merge(mut self, other: Self) -> Self {
        for i in 0..3 {
            self.count[i] += other.count[i];
            self.correct[i] += other.correct[i];
        }
        self.frames += other.frames;
        self.tool_runs += other.tool_runs;
        self.tool_calls += other.tool_calls;
        self.unanswered += other.unanswered;
        self
    }

    pub fn report(&self) -> EvalReport {
        let n: usize = self.count.iter().sum();
        let mean = |x: usize| (n > 0).then(|| x as f64 / n as f64);
        EvalReport {
            overall: BucketStats::finish(n, self.correct.iter().sum()),
            short: BucketStats::finish(self.count[0], self.correct[0]),
            medium: BucketStats::finish(self.count[1], self.correct[1]),
            long: BucketStats::finish(self.count[2], self.correct[2]),
            mean_frames_used: mean(self.frames),
            tool_invocation_rate: mean(self.tool_runs),
            mean_tool_calls: mean(self.tool_calls),
            unanswered: self.unanswered,
        }
    }
}

impl EvalReport {
    pub fn from_results(results: &[RunResult]) -> Self {
        results
            .iter()
            .fold(EvalAccumulator::default(), |mut acc, r| {
                acc.push(r);
                acc
            })
            .report()
    }
}

pub fn evaluate(
    env: &ToolEnv,
    endpoints: &Endpoints,
    tasks: &[QATask],
    policy: &RunPolicy,
    workers: usize,
    keep_trace: bool,
    cancel: Option<&CancelToken>,
) -> Result<(Vec<RunResult>, EvalReport), RunError> {
    let results = run_batch(env, endpoints, tasks, policy, workers, keep_trace, cancel)?;
    let report = EvalReport::from_results(&results);
    Ok((results, report))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// Aligned plain-text rendering of a report.
pub fn render_report(r: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<8} {:>7} {:>7} {:>9}", "bucket", "count", "correct", "accuracy");
    for (name, b) in [("overall", r.overall), ("short", r.short), ("medium", r.medium), ("long", r.long)] {
        let _ = writeln!(out, "{:<8} {:>7} {:>7} {:>9}", name, b.count, b.correct, fmt_opt(b.accuracy));
    }
    let _ = writeln!(out, "mean frames used      {}", fmt_opt(r.mean_frames_used));
    let _ = writeln!(out, "tool invocation rate  {}", fmt_opt(r.tool_invocation_rate));
    let _ = writeln!(out, "mean tool calls       {}", fmt_opt(r.mean_tool_calls));
    let _ = writeln!(out, "unanswered            {}", r.unanswered);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum SweepAxis {
    Tau(Vec<f64>),
    N(Vec<usize>),
    K(Vec<usize>),
    ToolTopk(Vec<usize>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Tau(_) => "tau",
            SweepAxis::N(_) => "n",
            SweepAxis::K(_) => "k",
            SweepAxis::ToolTopk(_) => "tool_topk",
        }
    }

    /// Parses `values` as a comma-separated list for the axis `name`.
    pub fn parse(name: &str, values: &str) -> Result<Self, String> {
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err("no sweep values given".into());
        }
        let ints = || -> Result<Vec<usize>, String> {
            items.iter().map(|s| s.parse::<usize>().map_err(|e| format!("{s:?}: {e}"))).collect()
        };
        match name {
            "tau" => items
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}")))
                .collect::<Result<_, _>>()
                .map(SweepAxis::Tau),
            "n" => ints().map(SweepAxis::N),
            "k" => ints().map(SweepAxis::K),
            "tool_topk" | "tool-topk" => ints().map(SweepAxis::ToolTopk),
            other => Err(format!("unknown sweep axis {other:?} (expected tau, n, k or tool_topk)")),
        }
    }

    fn cells(&self, base: &RunPolicy) -> Vec<(String, RunPolicy)> {
        match self {
            SweepAxis::Tau(v) => v.iter().map(|x| (x.to_string(), RunPolicy { tau: *x, ..base.clone() })).collect(),
            SweepAxis::N(v) => v.iter().map(|x| (x.to_string(), RunPolicy { n: *x, ..base.clone() })).collect(),
            SweepAxis::K(v) => v.iter().map(|x| (x.to_string(), RunPolicy { k: *x, ..base.clone() })).collect(),
            SweepAxis::ToolTopk(v) => {
                v.iter().map(|x| (x.to_string(), RunPolicy { tool_topk: *x, ..base.clone() })).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_COLUMNS: [&str; 10] = [
    "count",
    "accuracy",
    "short_accuracy",
    "medium_accuracy",
    "long_accuracy",
    "mean_frames_used",
    "tool_invocation_rate",
    "mean_tool_calls",
    "unanswered",
    "status",
];

impl SweepTable {
    /// One row per axis value with one column per metric.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},{}\n", self.axis, SWEEP_COLUMNS.join(","));
        let num = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for row in &self.rows {
            match &row.report {
                Some(r) => {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{},{},{},{},ok",
                        row.value,
                        r.overall.count,
                        num(r.overall.accuracy),
                        num(r.short.accuracy),
                        num(r.medium.accuracy),
                        num(r.long.accuracy),
                        num(r.mean_frames_used),
                        num(r.tool_invocation_rate),
                        num(r.mean_tool_calls),
                        r.unanswered
                    );
                }
                None => {
                    let reason = row.error.as_deref().unwrap_or("failed").replace([',', '\n', '"'], " ");
                    let _ = writeln!(out, "{},,,,,,,,,,failed: {reason}", row.value);
                }
            }
        }
        out
    }
}

/// Evaluates `tasks` once per axis value. Every cell uses the same seed so
/// cells are paired; an invalid or failing cell is recorded, not fatal.
pub fn sweep(
    env: &ToolEnv,
    endpoints: &Endpoints,
    tasks: &[QATask],
    base: &RunPolicy,
    axis: &SweepAxis,
    workers: usize,
    cancel: Option<&CancelToken>,
) -> SweepTable {
    let rows = axis
        .cells(base)
        .into_iter()
        .map(|(value, policy)| match run_batch(env, endpoints, tasks, &policy, workers, false, cancel) {
            Ok(results) => SweepRow { value, report: Some(EvalReport::from_results(&results)), error: None },
            Err(e) => SweepRow { value, report: None, error: Some(e.to_string()) },
        })
        .collect();
    SweepTable { axis: axis.name().into(), rows }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

/// Equal-width confidence bins over [0, 1]. A value on an edge goes to the
/// upper bin; 1.0 goes to the last bin.
pub fn calibration_bins(results: &[RunResult], bins: usize) -> Vec<CalibrationBin> {
    let bins = bins.max(1);
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    for r in results {
        let g = r.confidence.clamp(0.0, 1.0);
        let i = ((g * bins as f64).floor() as usize).min(bins - 1);
        count[i] += 1;
        correct[i] += usize::from(r.correct);
    }
    (0..bins)
        .map(|i| CalibrationBin {
            lo: i as f64 / bins as f64,
            hi: (i + 1) as f64 / bins as f64,
            count: count[i],
            correct: correct[i],
            accuracy: (count[i] > 0).then(|| correct[i] as f64 / count[i] as f64),
        })
        .collect()
}
