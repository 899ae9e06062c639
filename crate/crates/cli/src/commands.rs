use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;

use longview::embed::{build_clip_index, build_subtitle_index, HashingEmbedder, StaticClipTexts, VectorIndex};
use longview::media::TimeInterval;
use longview::runner::{
    calibration_bins, evaluate, render_report, run_adaptive, sweep, CalibrationBin, EvalReport, RunResult, SweepAxis,
    SweepTable,
};
use longview::subtitle::{parse_subtitles, serialize_track, SubtitleFormat};
use longview::synthesis::{dataset_stats, ground_trajectory, synthesize_dataset, Trajectory};
use longview::util::{read_jsonl, write_jsonl, CancelToken};
use longview::world::{generate_world, WorldSpec};
use serde::{Deserialize, Serialize};

use crate::config::{AppConfig, Resolved};
use crate::fail::{Failure, OrFail};
use crate::{
    BuildIndexArgs, Command, CommonArgs, EvalArgs, GroundArgs, IngestArgs, PolicyArgs, ReportArgs, RunArgs, SweepArgs,
    SynthesizeArgs, WorldGenArgs,
};

type CmdResult = Result<(), Failure>;

pub fn dispatch(cmd: Command, cancel: &CancelToken) -> CmdResult {
    match cmd {
        Command::IngestSubtitles(a) => ingest(a),
        Command::BuildIndex(a) => build_index(a),
        Command::WorldGen(a) => world_gen(a),
        Command::Synthesize(a) => synthesize(a, cancel),
        Command::Ground(a) => ground(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a, cancel),
        Command::Sweep(a) => sweep_cmd(a, cancel),
        Command::Report(a) => report(a),
    }
}

fn write_out(path: &Path, bytes: &[u8]) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).or_io(format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).or_io(format!("writing {}", path.display()))
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> CmdResult {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, items).or_io("serializing")?;
    write_out(path, &buf)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut bytes = serde_json::to_vec_pretty(value).or_io("serializing")?;
    bytes.push(b'\n');
    write_out(path, &bytes)
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, Failure> {
    let file = fs::File::open(path).or_io(format!("opening {}", path.display()))?;
    read_jsonl(BufReader::new(file)).or_invalid(path.display())
}

#[derive(Debug, Serialize)]
struct Status<'a> {
    complete: bool,
    tasks_done: usize,
    tasks_total: usize,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    failed_tasks: &'a [String],
}

/// Progress sidecar next to `out`, so interrupted runs can be told apart.
fn write_status(out: &Path, status: &Status<'_>) -> CmdResult {
    let mut name = out.as_os_str().to_owned();
    name.push(".status.json");
    write_json(Path::new(&name), status)
}

fn interrupted(done: usize, total: usize) -> Failure {
    Failure::backend(format!("interrupted after {done} of {total} tasks; partial output written"))
}

fn ingest(a: IngestArgs) -> CmdResult {
    if a.video_id.is_some() && a.inputs.len() > 1 {
        return Err(Failure::invalid("--video-id applies to a single --input"));
    }
    let forced = a.format.as_deref().map(str::parse::<SubtitleFormat>).transpose().map_err(Failure::invalid)?;
    let mut tracks = Vec::new();
    for input in &a.inputs {
        let format = match forced {
            Some(f) => f,
            None => input.extension().and_then(|e| e.to_str()).and_then(SubtitleFormat::from_extension).ok_or_else(
                || Failure::invalid(format!("{}: cannot infer the format; pass --format", input.display())),
            )?,
        };
        let id = match &a.video_id {
            Some(id) => id.clone(),
            None => input
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Failure::invalid(format!("{}: no file stem", input.display())))?
                .to_string(),
        };
        let bytes = fs::read(input).or_io(format!("reading {}", input.display()))?;
        let track = parse_subtitles(&bytes, format, &id).or_invalid(input.display())?;
        tracks.push(track);
    }
    for track in &tracks {
        let path = a.out.join(format!("{}.json", track.video_id));
        if a.inputs.iter().any(|i| i == &path) {
            return Err(Failure::invalid(format!("{} would overwrite an input", path.display())));
        }
        write_out(&path, &serialize_track(track, SubtitleFormat::WhisperJson))?;
        println!("{:<24} {:>6} segments", track.video_id, track.segments.len());
    }
    tracing::info!(tracks = tracks.len(), out = %a.out.display(), "ingested subtitles");
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipText {
    video_id: String,
    start_s: f64,
    end_s: f64,
    text: String,
}

fn write_index(dir: &Path, id: &str, suffix: &str, index: &VectorIndex) -> CmdResult {
    let mut buf = Vec::new();
    index.write_jsonl(&mut buf).or_io("serializing index")?;
    write_out(&dir.join(format!("{id}.{suffix}.jsonl")), &buf)
}

fn build_index(a: BuildIndexArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    if a.world.is_some() || a.catalog.is_some() {
        cfg.world = a.world.clone();
        cfg.catalog = a.catalog.clone();
    }
    if let Some(s) = &a.subtitles {
        cfg.subtitles = Some(s.clone());
    }
    cfg.indexes = None;
    cfg.embedder.seed = a.embed_seed.unwrap_or(cfg.embedder.seed);
    cfg.embedder.dim = a.dim.unwrap_or(cfg.embedder.dim);
    if cfg.embedder.dim == 0 {
        return Err(Failure::invalid("--dim must be at least 1"));
    }

    let (mut clips, mut subs) = (0, 0);
    if cfg.world.is_some() {
        if a.clip_texts.is_some() {
            return Err(Failure::invalid("--clip-texts applies to catalogs; worlds carry their own"));
        }
        let resolved = Resolved::new(cfg)?;
        for (id, index) in &resolved.env.clip_indexes {
            write_index(&a.out, id, "clip", index)?;
            clips += 1;
        }
        for (id, index) in &resolved.env.subtitle_indexes {
            write_index(&a.out, id, "subtitle", index)?;
            subs += 1;
        }
    } else {
        let resolved = Resolved::new(cfg.clone())?;
        let mut texts = StaticClipTexts::default();
        let with_clips = match &a.clip_texts {
            Some(p) => {
                for ct in read_lines::<ClipText>(p)? {
                    let iv =
                        TimeInterval::new(ct.start_s, ct.end_s).or_invalid(format!("clip text for {}", ct.video_id))?;
                    texts.insert(ct.video_id, iv, ct.text);
                }
                true
            }
            None => false,
        };
        let embedder = HashingEmbedder::new(cfg.embedder.seed, cfg.embedder.dim).with_clip_texts(Arc::new(texts));
        for (id, meta) in &resolved.env.catalog {
            if with_clips {
                let index = build_clip_index(meta, &embedder)
                    .or_invalid(format!("clip index for {id} (every clip needs a description)"))?;
                write_index(&a.out, id, "clip", &index)?;
                clips += 1;
            }
            if let Some(track) = resolved.env.tracks.get(id).filter(|t| !t.is_empty()) {
                let index = build_subtitle_index(track, &embedder).or_invalid(format!("subtitle index for {id}"))?;
                write_index(&a.out, id, "subtitle", &index)?;
                subs += 1;
            }
        }
        if !with_clips {
            tracing::warn!("no --clip-texts given; only subtitle indexes were built");
        }
    }
    println!("clip indexes     {clips:>6}\nsubtitle indexes {subs:>6}");
    Ok(())
}

fn world_gen(a: WorldGenArgs) -> CmdResult {
    let mut spec: WorldSpec = match &a.spec {
        Some(p) => {
            let bytes = fs::read(p).or_io(format!("reading {}", p.display()))?;
            serde_json::from_slice(&bytes).or_invalid(p.display())?
        }
        None => WorldSpec::default(),
    };
    spec.seed = a.seed.unwrap_or(spec.seed);
    spec.video_count = a.videos.unwrap_or(spec.video_count);
    spec.events_per_video = a.events.unwrap_or(spec.events_per_video);
    spec.min_minutes = a.min_minutes.unwrap_or(spec.min_minutes);
    spec.max_minutes = a.max_minutes.unwrap_or(spec.max_minutes);
    spec.tool_mistake_rate = a.mistake_rate.unwrap_or(spec.tool_mistake_rate);
    let world = generate_world(&spec).map_err(Failure::from_world)?;
    world.write_bundle(&a.out).map_err(Failure::from_world)?;
    println!("videos {:>6}\ntasks  {:>6}\nbundle {}", world.videos.len(), world.tasks.len(), a.out.display());
    Ok(())
}

/// Loads the config and applies the shared flag overrides.
fn load(common: &CommonArgs) -> Result<Resolved, Failure> {
    let mut cfg = AppConfig::load(&common.config)?;
    if let Some(seed) = common.seed.or(cfg.seed) {
        cfg.synthesis.seed = seed;
        cfg.policy.seed = seed;
    }
    if let Some(w) = common.workers.or(cfg.workers) {
        if w == 0 {
            return Err(Failure::invalid("workers must be at least 1"));
        }
        cfg.synthesis.workers = w;
        cfg.workers = Some(w);
    }
    Resolved::new(cfg)
}

fn workers(r: &Resolved) -> usize {
    r.cfg.workers.unwrap_or(1)
}

fn apply_policy(r: &mut Resolved, p: &PolicyArgs) -> CmdResult {
    let policy = &mut r.cfg.policy;
    policy.tau = p.tau.unwrap_or(policy.tau);
    policy.n = p.n.unwrap_or(policy.n);
    policy.k = p.k.unwrap_or(policy.k);
    policy.frame_budget = p.frame_budget.unwrap_or(policy.frame_budget);
    policy.tool_topk = p.tool_topk.unwrap_or(policy.tool_topk);
    policy.max_steps = p.max_steps.unwrap_or(policy.max_steps);
    policy.validate().or_invalid("policy")
}

fn synthesize(a: SynthesizeArgs, cancel: &CancelToken) -> CmdResult {
    let mut r = load(&a.common)?;
    let cfg = &mut r.cfg.synthesis;
    cfg.samples_per_task = a.samples.unwrap_or(cfg.samples_per_task);
    cfg.max_steps = a.max_steps.unwrap_or(cfg.max_steps);
    cfg.validate().map_err(Failure::from_synthesis)?;
    r.require_captioner()?;
    let reasoner = r.reasoner()?;
    let tasks = r.tasks(a.common.tasks.as_deref())?;
    tracing::info!(tasks = tasks.len(), reasoner = reasoner.name(), "synthesizing");
    let out = synthesize_dataset(&reasoner, &r.env, &tasks, &r.cfg.synthesis, Some(cancel))
        .map_err(Failure::from_synthesis)?;

    write_lines(&a.out, &out.kept)?;
    if let Some(p) = &a.samples_out {
        write_lines(p, &out.samples)?;
    }
    let complete = out.complete() && !cancel.is_cancelled();
    write_status(
        &a.out,
        &Status { complete, tasks_done: out.tasks_done, tasks_total: out.tasks_total, failed_tasks: &out.failed_tasks },
    )?;
    for id in &out.failed_tasks {
        tracing::warn!(task = %id, "task failed");
    }
    println!(
        "tasks    {:>6} / {}\nsamples  {:>6}\nkept     {:>6}\nfailed   {:>6}",
        out.tasks_done,
        out.tasks_total,
        out.samples.len(),
        out.kept.len(),
        out.failed_tasks.len()
    );
    if complete {
        Ok(())
    } else {
        Err(interrupted(out.tasks_done, out.tasks_total))
    }
}

fn ground(a: GroundArgs) -> CmdResult {
    let r = Resolved::new(AppConfig::load(&a.config)?)?;
    let trajectories: Vec<Trajectory> = read_lines(&a.trajectories)?;
    let mut records = Vec::with_capacity(trajectories.len());
    for t in &trajectories {
        let meta = r.env.catalog.get(&t.task.video_id).ok_or_else(|| {
            Failure::invalid(format!("trajectory for task {} names unknown video {}", t.task.task_id, t.task.video_id))
        })?;
        records.push(ground_trajectory(t, meta));
    }
    write_lines(&a.out, &records)?;
    let stats = dataset_stats(&records, &r.env.catalog);
    match &a.stats {
        Some(p) => write_json(p, &stats)?,
        None => println!("{}", serde_json::to_string_pretty(&stats).or_io("serializing")?),
    }
    if a.stats.is_some() {
        println!("records {:>6}", stats.records);
    }
    Ok(())
}

fn run(a: RunArgs) -> CmdResult {
    let mut r = load(&a.common)?;
    apply_policy(&mut r, &a.policy)?;
    let eps = r.endpoints()?;
    let tasks = r.tasks(a.common.tasks.as_deref())?;
    let task = tasks
        .iter()
        .find(|t| t.task_id == a.task_id)
        .ok_or_else(|| Failure::invalid(format!("no task {}", a.task_id)))?;
    let res = run_adaptive(&r.env, &eps, task, &r.cfg.policy, true).map_err(Failure::from_run)?;
    let letter = |c: Option<char>| c.map_or_else(|| "-".to_string(), String::from);
    println!("task        {}", res.task_id);
    println!("branch      {:?}", res.branch);
    println!("direct      {} (confidence {:.4})", letter(res.direct_answer), res.confidence);
    println!("mode        {:?}", res.mode);
    println!("answer      {}", letter(res.answer));
    println!("truth       {}", res.truth);
    println!("frames      {}", res.frames_used);
    println!("tool calls  {}", res.tool_calls);
    for w in &res.warnings {
        tracing::warn!(warning = %w, "run warning");
    }
    if let Some(p) = &a.out {
        write_json(p, &res)?;
    }
    Ok(())
}

fn eval(a: EvalArgs, cancel: &CancelToken) -> CmdResult {
    let mut r = load(&a.common)?;
    apply_policy(&mut r, &a.policy)?;
    let eps = r.endpoints()?;
    let tasks = r.tasks(a.common.tasks.as_deref())?;
    let (results, report) =
        evaluate(&r.env, &eps, &tasks, &r.cfg.policy, workers(&r), a.trace, Some(cancel)).map_err(Failure::from_run)?;
    write_lines(&a.out, &results)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    let complete = results.len() == tasks.len();
    write_status(&a.out, &Status { complete, tasks_done: results.len(), tasks_total: tasks.len(), failed_tasks: &[] })?;
    print!("{}", render_report(&report));
    if complete {
        Ok(())
    } else {
        Err(interrupted(results.len(), tasks.len()))
    }
}

fn render_sweep(t: &SweepTable) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
        t.axis, "count", "accuracy", "short", "medium", "long", "frames", "tool_rate"
    );
    for row in &t.rows {
        match &row.report {
            Some(rep) => {
                let _ = writeln!(
                    out,
                    "{:<10} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
                    row.value,
                    rep.overall.count,
                    opt(rep.overall.accuracy),
                    opt(rep.short.accuracy),
                    opt(rep.medium.accuracy),
                    opt(rep.long.accuracy),
                    opt(rep.mean_frames_used),
                    opt(rep.tool_invocation_rate)
                );
            }
            None => {
                let _ = writeln!(out, "{:<10} failed: {}", row.value, row.error.as_deref().unwrap_or("unknown"));
            }
        }
    }
    out
}

fn sweep_cmd(a: SweepArgs, cancel: &CancelToken) -> CmdResult {
    let axis = SweepAxis::parse(&a.axis, &a.values).map_err(Failure::invalid)?;
    let mut r = load(&a.common)?;
    apply_policy(&mut r, &a.policy)?;
    let eps = r.endpoints()?;
    let tasks = r.tasks(a.common.tasks.as_deref())?;
    let table = sweep(&r.env, &eps, &tasks, &r.cfg.policy, &axis, workers(&r), Some(cancel));
    write_out(&a.out, table.to_csv().as_bytes())?;
    let total = tasks.len() * table.rows.len();
    let done: usize = table.rows.iter().filter_map(|row| row.report.as_ref()).map(|rep| rep.overall.count).sum();
    let failed: Vec<String> =
        table.rows.iter().filter(|row| row.error.is_some()).map(|row| row.value.clone()).collect();
    let complete = !cancel.is_cancelled() && done == total;
    write_status(&a.out, &Status { complete, tasks_done: done, tasks_total: total, failed_tasks: &failed })?;
    print!("{}", render_sweep(&table));
    if cancel.is_cancelled() {
        return Err(interrupted(done, total));
    }
    if table.rows.iter().all(|row| row.report.is_none()) {
        return Err(Failure::backend("every sweep cell failed"));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportFile {
    report: EvalReport,
    calibration: Vec<CalibrationBin>,
}

fn report(a: ReportArgs) -> CmdResult {
    if a.bins == 0 {
        return Err(Failure::invalid("--bins must be at least 1"));
    }
    let results: Vec<RunResult> = read_lines(&a.results)?;
    let report = EvalReport::from_results(&results);
    let calibration = calibration_bins(&results, a.bins);
    print!("{}", render_report(&report));
    println!();
    println!("{:<14} {:>7} {:>7} {:>9}", "confidence", "count", "correct", "accuracy");
    for b in &calibration {
        let acc = b.accuracy.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        println!("{:<14} {:>7} {:>7} {:>9}", format!("[{:.2}, {:.2})", b.lo, b.hi), b.count, b.correct, acc);
    }
    if let Some(p) = &a.out {
        write_json(p, &ReportFile { report, calibration })?;
    }
    Ok(())
}
