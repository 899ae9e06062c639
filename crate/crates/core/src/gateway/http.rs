//! Chat-completions client speaking the common `/v1/chat/completions` JSON
//! protocol, with bounded retries and frame attachments as image parts.

use std::collections::BTreeMap;
use std::process::Command;
use std::sync::Arc;
use std::time::Duration;

use base64::Engine as _;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatBackend, ChatMessage, GatewayError, GenerationOutput, GenerationParams, Part, Role, VideoClipRef};
use crate::media::{resample_interval, VideoKind, VideoMeta};

pub const ENV_API_KEY: &str = "LONGVIEW_API_KEY";
pub const ENV_BASE_URL: &str = "LONGVIEW_BASE_URL";

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    Timeout,
    Io(String),
}

pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// Raw POST of a JSON body. Split out so retries can be tested without a network.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError>;
}

#[derive(Debug, Default)]
pub struct UreqTransport;

impl HttpTransport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        let mut req = agent.post(url);
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let map_err = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            other => TransportError::Io(other.to_string()),
        };
        let mut resp = req.send_json(body).map_err(map_err)?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(map_err)?;
        Ok(HttpReply { status, body })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay_ms: 250, max_delay_ms: 4000 }
    }
}

impl RetryPolicy {
    /// Full-jitter backoff before retry number `attempt` (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let cap = self.base_delay_ms.saturating_mul(1u64 << attempt.min(20)).min(self.max_delay_ms);
        if cap == 0 {
            return Duration::ZERO;
        }
        Duration::from_millis(rand::rng().random_range(0..=cap))
    }
}

/// Produces encoded still images for frames of real video files.
pub trait FrameImageSource: Send + Sync {
    /// JPEG bytes of the frame at `t` seconds.
    fn frame_jpeg(&self, meta: &VideoMeta, t: f64) -> Result<Vec<u8>, String>;
}

/// Runs an external extractor per frame; `{input}` and `{t}` are substituted
/// in each argument and the image is read from stdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandFrameSource {
    pub argv: Vec<String>,
}

impl Default for CommandFrameSource {
    fn default() -> Self {
        let argv = [
            "ffmpeg",
            "-v",
            "error",
            "-ss",
            "{t}",
            "-i",
            "{input}",
            "-frames:v",
            "1",
            "-f",
            "image2",
            "-c:v",
            "mjpeg",
            "pipe:1",
        ];
        Self { argv: argv.iter().map(|s| s.to_string()).collect() }
    }
}

impl FrameImageSource for CommandFrameSource {
    fn frame_jpeg(&self, meta: &VideoMeta, t: f64) -> Result<Vec<u8>, String> {
        let args: Vec<String> =
            self.argv.iter().map(|a| a.replace("{input}", &meta.uri).replace("{t}", &format!("{t:.3}"))).collect();
        let (prog, rest) = args.split_first().ok_or("empty frame command")?;
        let out = Command::new(prog).args(rest).output().map_err(|e| format!("{prog}: {e}"))?;
        if !out.status.success() || out.stdout.is_empty() {
            return Err(format!("{prog} exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim()));
        }
        Ok(out.stdout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: f64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_timeout_s() -> f64 {
    120.0
}

impl HttpConfig {
    /// Applies `LONGVIEW_BASE_URL` and `LONGVIEW_API_KEY` when set.
    pub fn with_env(mut self) -> Self {
        if let Ok(url) = std::env::var(ENV_BASE_URL) {
            if !url.is_empty() {
                self.base_url = url;
            }
        }
        if let Ok(key) = std::env::var(ENV_API_KEY) {
            if !key.is_empty() {
                self.api_key = Some(key);
            }
        }
        self
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    transport: Arc<dyn HttpTransport>,
    catalog: BTreeMap<String, VideoMeta>,
    frames: Option<Arc<dyn FrameImageSource>>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        Self::with_transport(config, Arc::new(UreqTransport))
    }

    pub fn with_transport(config: HttpConfig, transport: Arc<dyn HttpTransport>) -> Self {
        Self { config, transport, catalog: BTreeMap::new(), frames: None }
    }

    /// Enables frame attachments for real-file videos in `catalog`.
    pub fn with_frames(mut self, catalog: BTreeMap<String, VideoMeta>, source: Arc<dyn FrameImageSource>) -> Self {
        self.catalog = catalog;
        self.frames = Some(source);
        self
    }

    fn url(&self) -> String {
        format!("{}/v1/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn video_parts(&self, clip: &VideoClipRef) -> Result<Vec<Value>, GatewayError> {
        let placeholder = || vec![json!({"type": "text", "text": clip.placeholder()})];
        let (Some(meta), Some(source)) = (self.catalog.get(&clip.video_id), &self.frames) else {
            return Ok(placeholder());
        };
        if meta.kind != VideoKind::RealFile {
            return Ok(placeholder());
        }
        let set = resample_interval(meta, clip.start_s, clip.end_s, clip.frame_count.max(1))
            .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
        let mut parts = Vec::with_capacity(set.len());
        for t in set.timestamps() {
            let jpeg = source
                .frame_jpeg(meta, t)
                .map_err(|e| GatewayError::InvalidRequest(format!("frame at {t:.3}s: {e}")))?;
            let url = format!("data:image/jpeg;base64,{}", base64::engine::general_purpose::STANDARD.encode(jpeg));
            parts.push(json!({"type": "image_url", "image_url": {"url": url}}));
        }
        Ok(parts)
    }

    pub fn request_body(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<Value, GatewayError> {
        let mut wire = Vec::with_capacity(messages.len());
        for m in messages {
            // the protocol has no tool role for free-form observations
            let role = match m.role {
                Role::System => "system",
                Role::User | Role::Tool => "user",
                Role::Assistant => "assistant",
            };
            let mut content = Vec::new();
            for p in &m.content {
                match p {
                    Part::Text { text } => content.push(json!({"type": "text", "text": text})),
                    Part::Video(clip) => content.extend(self.video_parts(clip)?),
                }
            }
            wire.push(json!({"role": role, "content": content}));
        }
        let mut body = json!({
            "model": self.config.model,
            "messages": wire,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if params.want_logprobs {
            body["logprobs"] = Value::Bool(true);
        }
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        Ok(body)
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
}

pub fn parse_completion(body: &str, want_logprobs: bool) -> Result<GenerationOutput, GatewayError> {
    let resp: CompletionResponse = serde_json::from_str(body)
        .map_err(|e| GatewayError::Backend { attempts: 1, message: format!("malformed completion: {e}") })?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::Backend { attempts: 1, message: "completion without choices".into() })?;
    let text = choice.message.content.unwrap_or_default();
    let mut out = GenerationOutput { text, ..Default::default() };
    if want_logprobs {
        match choice.logprobs.and_then(|l| l.content).filter(|c| !c.is_empty()) {
            Some(tokens) => {
                out.tokens = Some(tokens.iter().map(|t| t.token.clone()).collect());
                out.token_logprobs = Some(tokens.iter().map(|t| t.logprob).collect());
            }
            None => return Err(GatewayError::LogprobsUnavailable { text: out.text }),
        }
    }
    Ok(out)
}

fn retryable(status: u16) -> bool {
    status == 408 || status == 429 || status >= 500
}

impl ChatBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn generate(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<GenerationOutput, GatewayError> {
        let body = self.request_body(messages, params)?;
        let mut headers = vec![("Content-Type".to_string(), "application/json".to_string())];
        if let Some(key) = &self.config.api_key {
            headers.push(("Authorization".to_string(), format!("Bearer {key}")));
        }
        let timeout = Duration::from_secs_f64(self.config.timeout_s.max(0.001));
        let url = self.url();
        let max = self.config.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max {
            match self.transport.post_json(&url, &headers, &body, timeout) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    return parse_completion(&reply.body, params.want_logprobs).map_err(|e| match e {
                        GatewayError::Backend { message, .. } => GatewayError::Backend { attempts: attempt, message },
                        other => other,
                    });
                }
                Ok(reply) => {
                    last = format!("HTTP {}: {}", reply.status, reply.body.chars().take(200).collect::<String>());
                    if !retryable(reply.status) {
                        return Err(GatewayError::Backend { attempts: attempt, message: last });
                    }
                }
                Err(TransportError::Timeout) => last = format!("timed out after {:.1}s", self.config.timeout_s),
                Err(TransportError::Io(e)) => last = e,
            }
            tracing::warn!(attempt, max, error = %last, "chat request failed");
            if attempt < max {
                std::thread::sleep(self.config.retry.delay(attempt));
            }
        }
        Err(GatewayError::Backend { attempts: max, message: last })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Mutex;

    struct Faulty {
        calls: AtomicU32,
        replies: Mutex<Vec<Result<HttpReply, TransportError>>>,
    }

    impl Faulty {
        fn new(mut replies: Vec<Result<HttpReply, TransportError>>) -> Arc<Self> {
            replies.reverse();
            Arc::new(Self { calls: AtomicU32::new(0), replies: Mutex::new(replies) })
        }
    }

    impl HttpTransport for Faulty {
        fn post_json(
            &self,
            _: &str,
            _: &[(String, String)],
            _: &Value,
            _: Duration,
        ) -> Result<HttpReply, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.replies.lock().unwrap().pop().unwrap_or(Err(TransportError::Timeout))
        }
    }

    fn config() -> HttpConfig {
        HttpConfig {
            base_url: "http://127.0.0.1:9/".into(),
            model: "m".into(),
            api_key: None,
            timeout_s: 0.2,
            retry: RetryPolicy { max_attempts: 3, base_delay_ms: 0, max_delay_ms: 0 },
        }
    }

    fn ok(body: &str) -> Result<HttpReply, TransportError> {
        Ok(HttpReply { status: 200, body: body.into() })
    }

    const WITH_LP: &str = r#"{"choices":[{"message":{"role":"assistant","content":"Best option: B"},
        "logprobs":{"content":[{"token":"Best","logprob":-0.01},{"token":" option","logprob":-0.02},{"token":":","logprob":0.0},{"token":" B","logprob":-0.3}]}}]}"#;

    #[test]
    fn timeouts_exhaust_retries_and_count_attempts() {
        let t = Faulty::new(vec![]);
        let b = HttpBackend::with_transport(config(), t.clone());
        let err = b.generate(&[ChatMessage::user("q")], &GenerationParams::default()).unwrap_err();
        assert!(matches!(err, GatewayError::Backend { attempts: 3, .. }), "{err:?}");
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn transient_failure_then_success() {
        let t = Faulty::new(vec![
            Err(TransportError::Timeout),
            Ok(HttpReply { status: 503, body: "busy".into() }),
            ok(WITH_LP),
        ]);
        let b = HttpBackend::with_transport(config(), t.clone());
        let out = b
            .generate(&[ChatMessage::user("q")], &GenerationParams { want_logprobs: true, ..Default::default() })
            .unwrap();
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);
        assert_eq!(out.text, "Best option: B");
        assert_eq!(out.token_logprobs.as_deref(), Some(&[-0.01, -0.02, 0.0, -0.3][..]));
    }

    #[test]
    fn client_errors_are_not_retried() {
        let t = Faulty::new(vec![Ok(HttpReply { status: 400, body: "bad".into() })]);
        let b = HttpBackend::with_transport(config(), t.clone());
        let err = b.generate(&[ChatMessage::user("q")], &GenerationParams::default()).unwrap_err();
        assert!(matches!(err, GatewayError::Backend { attempts: 1, .. }));
        assert_eq!(t.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn missing_logprobs_surface_with_text() {
        let t = Faulty::new(vec![ok(r#"{"choices":[{"message":{"content":"A"}}]}"#)]);
        let b = HttpBackend::with_transport(config(), t);
        let err =
            b.generate(&[ChatMessage::user("q")], &GenerationParams { want_logprobs: true, ..Default::default() });
        assert_eq!(err, Err(GatewayError::LogprobsUnavailable { text: "A".into() }));
    }

    #[test]
    fn request_maps_roles_and_video_placeholders() {
        let b = HttpBackend::with_transport(config(), Faulty::new(vec![]));
        let clip = VideoClipRef { video_id: "v".into(), start_s: 0.0, end_s: 10.0, frame_count: 8 };
        let msgs = [ChatMessage::system("s"), ChatMessage { role: Role::Tool, content: vec![Part::Video(clip)] }];
        let params = GenerationParams { want_logprobs: true, seed: Some(3), ..Default::default() };
        let body = b.request_body(&msgs, &params).unwrap();
        assert_eq!(body["messages"][1]["role"], "user");
        assert_eq!(body["messages"][1]["content"][0]["text"], "<video: 0.00–10.00, 8 frames>");
        assert_eq!(body["logprobs"], true);
        assert_eq!(body["seed"], 3);
    }

    struct FakeFrames;
    impl FrameImageSource for FakeFrames {
        fn frame_jpeg(&self, _: &VideoMeta, t: f64) -> Result<Vec<u8>, String> {
            Ok(format!("{t}").into_bytes())
        }
    }

    #[test]
    fn real_videos_attach_one_image_per_frame() {
        let meta = VideoMeta {
            video_id: "v".into(),
            uri: "/x.mp4".into(),
            duration_s: 20.0,
            fps: 25.0,
            kind: VideoKind::RealFile,
        };
        let b = HttpBackend::with_transport(config(), Faulty::new(vec![]))
            .with_frames(BTreeMap::from([("v".into(), meta)]), Arc::new(FakeFrames));
        let clip = VideoClipRef { video_id: "v".into(), start_s: 0.0, end_s: 10.0, frame_count: 2 };
        let body = b
            .request_body(
                &[ChatMessage { role: Role::User, content: vec![Part::Video(clip)] }],
                &GenerationParams::default(),
            )
            .unwrap();
        let parts = body["messages"][0]["content"].as_array().unwrap();
        assert_eq!(parts.len(), 2);
        let expected = format!("data:image/jpeg;base64,{}", base64::engine::general_purpose::STANDARD.encode("2.5"));
        assert_eq!(parts[0]["image_url"]["url"], expected.as_str());
    }

    #[test]
    fn hanging_server_times_out_through_real_transport() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let accepted = std::thread::spawn(move || {
            let mut held = Vec::new();
            for _ in 0..3 {
                if let Ok((s, _)) = listener.accept() {
                    held.push(s);
                }
            }
            std::thread::sleep(Duration::from_millis(300));
        });
        let cfg = HttpConfig { base_url: format!("http://{addr}"), ..config() };
        let err = HttpBackend::new(cfg).generate(&[ChatMessage::user("q")], &GenerationParams::default()).unwrap_err();
        assert!(matches!(err, GatewayError::Backend { attempts: 3, .. }), "{err:?}");
        accepted.join().unwrap();
    }
}
