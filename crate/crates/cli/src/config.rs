use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use longview::embed::{HashingEmbedder, VectorIndex};
use longview::gateway::http::{CommandFrameSource, HttpBackend, HttpConfig};
use longview::gateway::scripted::ScriptedBackend;
use longview::gateway::{ChatBackend, Endpoint};
use longview::media::VideoMeta;
use longview::runner::{Endpoints, RunPolicy};
use longview::subtitle::{parse_subtitles, SubtitleFormat};
use longview::synthesis::{QATask, SynthesisConfig};
use longview::tools::{ModelCaptioner, SubtitleSummarizer, ToolEnv};
use longview::util::read_jsonl;
use longview::world::World;
use serde::{Deserialize, Serialize};

use crate::fail::{Failure, OrFail};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub seed: u64,
    pub dim: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { seed: 0, dim: HashingEmbedder::DEFAULT_DIM }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EndpointSpec {
    /// Replays a script file.
    Scripted { script: PathBuf },
    /// OpenAI-compatible chat completions.
    Http {
        #[serde(flatten)]
        config: HttpConfig,
        #[serde(default)]
        max_inflight: Option<usize>,
        /// Frame extraction command; `{input}` and `{t}` are substituted.
        #[serde(default)]
        frame_command: Option<Vec<String>>,
    },
    /// The world bundle's scripted direct stage.
    WorldDirect,
    /// The world bundle's scripted tool policy.
    WorldPolicy,
    /// The world bundle's ground-truth caption store.
    WorldCaptions,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointsConfig {
    /// Tool-loop model for synthesis and the tool stage.
    pub reasoner: Option<EndpointSpec>,
    /// Single-shot model for the direct stage.
    pub direct: Option<EndpointSpec>,
    pub captioner: Option<EndpointSpec>,
    pub summarizer: Option<EndpointSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// World bundle directory (mock mode).
    pub world: Option<PathBuf>,
    /// JSON-lines video catalog.
    pub catalog: Option<PathBuf>,
    /// Directory of canonical `<video_id>.json` tracks.
    pub subtitles: Option<PathBuf>,
    /// Directory of `<video_id>.clip.jsonl` and `<video_id>.subtitle.jsonl` indexes.
    pub indexes: Option<PathBuf>,
    pub tasks: Option<PathBuf>,
    pub embedder: EmbedderConfig,
    pub endpoints: EndpointsConfig,
    pub synthesis: SynthesisConfig,
    pub policy: RunPolicy,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

fn resolve_spec(base: &Path, spec: &mut Option<EndpointSpec>) {
    if let Some(EndpointSpec::Scripted { script }) = spec {
        if script.is_relative() {
            *script = base.join(&*script);
        }
    }
}

impl AppConfig {
    /// Reads `path`; relative paths inside are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let bytes = fs::read(path).or_invalid(format!("reading config {}", path.display()))?;
        let mut cfg: AppConfig = serde_json::from_slice(&bytes).or_invalid(format!("config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in
            [&mut cfg.world, &mut cfg.catalog, &mut cfg.subtitles, &mut cfg.indexes, &mut cfg.tasks, &mut cfg.out_dir]
        {
            resolve(base, p);
        }
        for s in [
            &mut cfg.endpoints.reasoner,
            &mut cfg.endpoints.direct,
            &mut cfg.endpoints.captioner,
            &mut cfg.endpoints.summarizer,
        ] {
            resolve_spec(base, s);
        }
        Ok(cfg)
    }
}

/// Everything a pipeline needs, resolved from the config.
pub struct Resolved {
    pub env: ToolEnv,
    pub world: Option<World>,
    pub cfg: AppConfig,
}

fn load_catalog(path: &Path) -> Result<BTreeMap<String, VideoMeta>, Failure> {
    let file = fs::File::open(path).or_io(format!("opening catalog {}", path.display()))?;
    let metas: Vec<VideoMeta> = read_jsonl(BufReader::new(file)).or_invalid(format!("catalog {}", path.display()))?;
    let mut out = BTreeMap::new();
    for m in metas {
        m.validate().or_invalid(format!("catalog entry {}", m.video_id))?;
        if out.insert(m.video_id.clone(), m.clone()).is_some() {
            return Err(Failure::invalid(format!("duplicate video {} in catalog", m.video_id)));
        }
    }
    Ok(out)
}

fn load_index(path: &Path, dim: usize) -> Result<VectorIndex, Failure> {
    let file = fs::File::open(path).or_io(format!("opening {}", path.display()))?;
    let index = VectorIndex::read_jsonl(BufReader::new(file)).or_invalid(format!("index {}", path.display()))?;
    if index.dim != dim || index.provider != "hashing" {
        return Err(Failure::invalid(format!(
            "{}: built with {} at d = {}, but the query embedder is hashing at d = {dim}",
            path.display(),
            index.provider,
            index.dim
        )));
    }
    Ok(index)
}

impl Resolved {
    pub fn new(cfg: AppConfig) -> Result<Self, Failure> {
        let world = match &cfg.world {
            Some(dir) => Some(World::load_bundle(dir).map_err(Failure::from_world)?),
            None => None,
        };
        let mut env = match &world {
            Some(w) => w.tool_env(cfg.embedder.seed, cfg.embedder.dim).map_err(Failure::from_world)?,
            None => Self::catalog_env(&cfg)?,
        };
        if let Some(spec) = &cfg.endpoints.captioner {
            match spec {
                EndpointSpec::WorldCaptions => {
                    let w = world.as_ref().ok_or_else(|| Failure::invalid("world-captions needs a world bundle"))?;
                    env.captioner = Some(Arc::new(w.caption_store()));
                }
                other => {
                    let ep = endpoint(other, world.as_ref(), &env.catalog)?;
                    env.captioner = Some(Arc::new(ModelCaptioner::new(ep)));
                }
            }
        }
        if let Some(spec) = &cfg.endpoints.summarizer {
            env.summarizer = Some(SubtitleSummarizer::new(endpoint(spec, world.as_ref(), &env.catalog)?));
        }
        Ok(Self { env, world, cfg })
    }

    fn catalog_env(cfg: &AppConfig) -> Result<ToolEnv, Failure> {
        let path =
            cfg.catalog.as_ref().ok_or_else(|| Failure::invalid("config names neither a world nor a catalog"))?;
        let catalog = load_catalog(path)?;
        let embedder = Arc::new(HashingEmbedder::new(cfg.embedder.seed, cfg.embedder.dim));
        let mut env = ToolEnv::new(embedder.clone(), embedder);
        for id in catalog.keys() {
            if let Some(dir) = &cfg.subtitles {
                let p = dir.join(format!("{id}.json"));
                if p.exists() {
                    let bytes = fs::read(&p).or_io(format!("reading {}", p.display()))?;
                    let track =
                        parse_subtitles(&bytes, SubtitleFormat::WhisperJson, id).or_invalid(p.display().to_string())?;
                    env.tracks.insert(id.clone(), Arc::new(track));
                }
            }
            if let Some(dir) = &cfg.indexes {
                let clip = dir.join(format!("{id}.clip.jsonl"));
                if clip.exists() {
                    env.clip_indexes.insert(id.clone(), Arc::new(load_index(&clip, cfg.embedder.dim)?));
                }
                let sub = dir.join(format!("{id}.subtitle.jsonl"));
                if sub.exists() {
                    env.subtitle_indexes.insert(id.clone(), Arc::new(load_index(&sub, cfg.embedder.dim)?));
                }
            }
        }
        env.catalog = catalog;
        Ok(env)
    }

    /// Tool-loop endpoint; world mode defaults to the world policy.
    pub fn reasoner(&self) -> Result<Endpoint, Failure> {
        match (&self.cfg.endpoints.reasoner, &self.world) {
            (Some(spec), w) => endpoint(spec, w.as_ref(), &self.env.catalog),
            (None, Some(w)) => Ok(Endpoint::new(Arc::new(w.tool_policy()))),
            (None, None) => Err(Failure::invalid("no reasoner endpoint configured")),
        }
    }

    pub fn endpoints(&self) -> Result<Endpoints, Failure> {
        let direct = match (&self.cfg.endpoints.direct, &self.world) {
            (Some(spec), w) => endpoint(spec, w.as_ref(), &self.env.catalog)?,
            (None, Some(w)) => Endpoint::new(Arc::new(w.direct_backend().map_err(Failure::from_world)?)),
            (None, None) => return Err(Failure::invalid("no direct endpoint configured")),
        };
        Ok(Endpoints { direct, tool: self.reasoner()? })
    }

    pub fn require_captioner(&self) -> Result<(), Failure> {
        match self.env.captioner {
            Some(_) => Ok(()),
            None => Err(Failure::invalid("no captioner endpoint configured")),
        }
    }

    pub fn tasks(&self, flag: Option<&Path>) -> Result<Vec<QATask>, Failure> {
        let path = flag.map(Path::to_path_buf).or_else(|| self.cfg.tasks.clone());
        let tasks = match (path, &self.world) {
            (Some(p), _) => {
                let file = fs::File::open(&p).or_io(format!("opening tasks {}", p.display()))?;
                read_jsonl::<QATask, _>(BufReader::new(file)).or_invalid(format!("tasks {}", p.display()))?
            }
            (None, Some(w)) => w.tasks.clone(),
            (None, None) => return Err(Failure::invalid("no tasks given (use --tasks)")),
        };
        for t in &tasks {
            t.validate().or_invalid("task")?;
            if !self.env.catalog.contains_key(&t.video_id) {
                return Err(Failure::invalid(format!("task {} refers to unknown video {}", t.task_id, t.video_id)));
            }
        }
        Ok(tasks)
    }
}

pub fn endpoint(
    spec: &EndpointSpec,
    world: Option<&World>,
    catalog: &BTreeMap<String, VideoMeta>,
) -> Result<Endpoint, Failure> {
    let need_world = || world.ok_or_else(|| Failure::invalid("world endpoints need a world bundle in the config"));
    let backend: Arc<dyn ChatBackend> = match spec {
        EndpointSpec::Scripted { script } => Arc::new(ScriptedBackend::load(script).map_err(Failure::backend)?),
        EndpointSpec::Http { config, frame_command, .. } => {
            let config = config.clone().with_env();
            if config.base_url.is_empty() || config.model.is_empty() {
                return Err(Failure::invalid("http endpoints need base_url and model"));
            }
            let source = match frame_command {
                Some(argv) => CommandFrameSource { argv: argv.clone() },
                None => CommandFrameSource::default(),
            };
            Arc::new(HttpBackend::new(config).with_frames(catalog.clone(), Arc::new(source)))
        }
        EndpointSpec::WorldDirect => Arc::new(need_world()?.direct_backend().map_err(Failure::from_world)?),
        EndpointSpec::WorldPolicy => Arc::new(need_world()?.tool_policy()),
        EndpointSpec::WorldCaptions => return Err(Failure::invalid("world-captions can only serve as the captioner")),
    };
    Ok(match spec {
        EndpointSpec::Http { max_inflight: Some(n), .. } => Endpoint::with_limit(backend, *n),
        _ => Endpoint::new(backend),
    })
}
