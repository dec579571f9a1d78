//! End-to-end stage sequencing with on-disk artifacts and resume.
//!
//! A run lives in `<out>/<config digest>/`. Every stage records the digest
//! of its inputs and outputs in `stages.json`; a stage whose input digest is
//! unchanged and whose outputs are still intact is reported `cached` and not
//! recomputed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{export_jsonl, manifest_path, plan_step_mix, Manifest, SupervisionSpec};
use crate::gateway::{
    Backend, GatewayConfig, HttpBackend, MockBackend, ModelGateway, ENV_ENDPOINT, ENV_KEY,
    ENV_MODEL_ID,
};
use crate::graph::{FrameSceneGraph, SpatioTemporalSceneGraph};
use crate::induct::{induct_video, ClipMeta, InductOptions};
use crate::parse::{build_frame_graph, verify_nodes, KeyframeInput, ParseOptions};
use crate::sample::{contextualize, PathSampler, ReasoningPath};
use crate::split::{run_extractor, split_video, ClipPlan, FrameFeatureStream, SplitParams};
use crate::synth::{refine_qra, render_qra, QRASample, TemplateRegistry};
use crate::text::sha256_hex;
use crate::Warning;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: Stage, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { .. } => 3,
            PipelineError::Io { .. } => 4,
        }
    }

    fn stage(stage: Stage, message: impl fmt::Display) -> Self {
        PipelineError::Stage {
            stage,
            message: message.to_string(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Split,
    Parse,
    Induct,
    Sample,
    Synth,
    Export,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Split,
        Stage::Parse,
        Stage::Induct,
        Stage::Sample,
        Stage::Synth,
        Stage::Export,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Split => "split",
            Stage::Parse => "parse",
            Stage::Induct => "induct",
            Stage::Sample => "sample",
            Stage::Synth => "synth",
            Stage::Export => "export",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

// ---- configuration ----

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSection {
    /// Frame-feature files, one per video.
    #[serde(default)]
    pub features: Vec<PathBuf>,
    /// Command run as `<cmd> <video> <out>` to produce a feature file.
    #[serde(default)]
    pub extractor: Option<String>,
    #[serde(default)]
    pub videos: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub threshold: f64,
    pub min_scene_len: usize,
    pub keyframes: usize,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let p = SplitParams::default();
        Self {
            threshold: p.threshold,
            min_scene_len: p.min_scene_len,
            keyframes: p.keyframes_per_clip,
            seed: p.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySection {
    #[serde(default)]
    pub mock: Option<PathBuf>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default, skip_serializing)]
    pub key: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_retries() -> u32 {
    2
}
fn default_backoff() -> u64 {
    200
}
fn default_timeout() -> u64 {
    60
}
fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub total: usize,
    pub seed: u64,
    /// Probability that a path is grounded in its clip's event.
    pub contextualize: f64,
    /// Step count to fraction; keys are written as strings.
    pub mix: BTreeMap<String, f64>,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            total: 100,
            seed: 0,
            contextualize: 0.5,
            mix: [("1", 1.0 / 3.0), ("2", 1.0 / 3.0), ("3", 1.0 / 3.0)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub refine: bool,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            refine: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportSection {
    /// File name of the dataset inside the run's export directory.
    pub file: String,
    pub lambda: f64,
    pub instruction_answer: String,
    pub instruction_rationale: String,
}

impl Default for ExportSection {
    fn default() -> Self {
        let spec = SupervisionSpec::default();
        Self {
            file: "dataset.jsonl".into(),
            lambda: spec.lambda,
            instruction_answer: spec.instruction_answer,
            instruction_rationale: spec.instruction_rationale,
        }
    }
}

impl ExportSection {
    pub fn spec(&self) -> SupervisionSpec {
        SupervisionSpec {
            lambda: self.lambda,
            instruction_answer: self.instruction_answer.clone(),
            instruction_rationale: self.instruction_rationale.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    input: Option<InputSection>,
    #[serde(default)]
    split: SplitSection,
    gateway: Option<GatewaySection>,
    #[serde(default)]
    parse: ParseOptions,
    #[serde(default)]
    induct: InductOptions,
    #[serde(default)]
    sample: SampleSection,
    #[serde(default)]
    synth: SynthSection,
    #[serde(default)]
    export: ExportSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
    pub input: InputSection,
    pub split: SplitSection,
    pub gateway: GatewaySection,
    pub parse: ParseOptions,
    pub induct: InductOptions,
    pub sample: SampleSection,
    pub synth: SynthSection,
    pub export: ExportSection,
}

impl PipelineConfig {
    /// Parse a TOML config; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let raw: RawConfig = toml::from_str(text)
            .map_err(|e| PipelineError::Config(format!("config:syntax: {e}")))?;
        let input = raw
            .input
            .ok_or_else(|| PipelineError::Config("config:missing:input".into()))?;
        let mut gateway = raw
            .gateway
            .ok_or_else(|| PipelineError::Config("config:missing:gateway".into()))?;
        if gateway.endpoint.is_some() || gateway.mock.is_none() {
            if let Ok(endpoint) = std::env::var(ENV_ENDPOINT) {
                gateway.endpoint = Some(endpoint);
            }
            if let Ok(model) = std::env::var(ENV_MODEL_ID) {
                gateway.model = Some(model);
            }
        }
        if let Ok(key) = std::env::var(ENV_KEY) {
            gateway.key = Some(key);
        }
        let config = Self {
            base_dir: base_dir.to_path_buf(),
            input,
            split: raw.split,
            gateway,
            parse: raw.parse,
            induct: raw.induct,
            sample: raw.sample,
            synth: raw.synth,
            export: raw.export,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let invalid = |field: &str, msg: &str| {
            Err(PipelineError::Config(format!(
                "config:invalid:{field}: {msg}"
            )))
        };
        match (&self.gateway.mock, &self.gateway.endpoint) {
            (Some(_), Some(_)) => {
                return invalid("gateway", "set exactly one of `mock` and `endpoint`")
            }
            (None, None) => return invalid("gateway", "set one of `mock` and `endpoint`"),
            _ => {}
        }
        let has_features = !self.input.features.is_empty();
        let has_videos = self.input.extractor.is_some() && !self.input.videos.is_empty();
        if has_features == has_videos {
            return invalid(
                "input",
                "give either `features` or `extractor` with `videos`",
            );
        }
        if !(self.split.threshold.is_finite() && self.split.threshold >= 0.0) {
            return invalid("split.threshold", "must be a non-negative number");
        }
        if self.split.keyframes == 0 {
            return invalid("split.keyframes", "must be at least 1");
        }
        if self.sample.total == 0 {
            return invalid("sample.total", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.sample.contextualize) {
            return invalid("sample.contextualize", "must be within [0, 1]");
        }
        self.step_mix()?;
        if self.gateway.workers == 0 {
            return invalid("gateway.workers", "must be at least 1");
        }
        self.export
            .spec()
            .validate()
            .map_err(|e| PipelineError::Config(format!("config:invalid:export: {e}")))?;
        if self.export.file.is_empty() || self.export.file.contains(['/', '\\']) {
            return invalid("export.file", "must be a plain file name");
        }
        Ok(())
    }

    pub fn step_mix(&self) -> Result<BTreeMap<usize, f64>, PipelineError> {
        let mut mix = BTreeMap::new();
        for (k, v) in &self.sample.mix {
            let steps: usize = k.parse().map_err(|_| {
                PipelineError::Config(format!(
                    "config:invalid:sample.mix: key `{k}` is not a step count"
                ))
            })?;
            mix.insert(steps, *v);
        }
        plan_step_mix(&mix, self.sample.total, self.sample.seed)
            .map_err(|e| PipelineError::Config(format!("config:invalid:sample.mix: {e}")))?;
        Ok(mix)
    }

    pub fn split_params(&self) -> SplitParams {
        SplitParams {
            threshold: self.split.threshold,
            min_scene_len: self.split.min_scene_len,
            keyframes_per_clip: self.split.keyframes,
            seed: self.split.seed,
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// Digest of everything that affects outputs (secrets and worker count excluded).
    pub fn digest(&self) -> String {
        let mut view = self.clone();
        view.gateway.workers = 0;
        view.gateway.key = None;
        sha256_hex(&serde_json::to_vec(&view).expect("config serializes"))
    }
}

// ---- run bookkeeping ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Computed,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub input_digest: String,
    pub output_digest: String,
    pub outputs: Vec<PathBuf>,
    pub status: StageStatus,
    pub millis: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub status: StageStatus,
    pub output_digest: String,
    pub duration: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_dir: PathBuf,
    pub stsg: Vec<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub stages: Vec<StageReport>,
}

impl RunReport {
    /// Digest over stage outputs; equal runs give equal digests.
    pub fn digest(&self) -> String {
        let joined: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{}={}", s.stage, s.output_digest))
            .collect();
        sha256_hex(joined.join("\n").as_bytes())
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_root: PathBuf,
    pub resume: bool,
    /// Overrides `gateway.workers`.
    pub workers: Option<usize>,
    pub strict: bool,
    /// Last stage to run.
    pub until: Stage,
}

impl RunOptions {
    pub fn new(out_root: impl Into<PathBuf>) -> Self {
        Self {
            out_root: out_root.into(),
            resume: true,
            workers: None,
            strict: false,
            until: Stage::Export,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipFrames {
    pub meta: ClipMeta,
    pub frames: Vec<FrameSceneGraph>,
    /// Keyframes whose parse failed and were left out.
    pub failed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoParse {
    pub video_id: String,
    pub clips: Vec<ClipFrames>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSplit {
    pub video_id: String,
    pub clips: Vec<ClipPlan>,
}

#[derive(Serialize)]
struct LogLine<'a, T: Serialize> {
    item: &'a str,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    detail: Option<T>,
    warnings: &'a [Warning],
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut bytes = Vec::new();
    for item in items {
        serde_json::to_writer(&mut bytes, item).expect("artifact serializes");
        bytes.push(b'\n');
    }
    write_file(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: Stage) -> Result<T, PipelineError> {
    let text = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&text)
        .map_err(|e| PipelineError::stage(stage, format!("{}: {e}", path.display())))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(
    path: &Path,
    stage: Stage,
) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                PipelineError::stage(stage, format!("{}:{}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

fn file_digest(paths: &[PathBuf], root: &Path) -> Option<String> {
    let mut parts = Vec::new();
    for p in paths {
        let bytes = fs::read(p).ok()?;
        let rel = p.strip_prefix(root).unwrap_or(p);
        parts.push(format!("{}:{}", rel.display(), sha256_hex(&bytes)));
    }
    Some(sha256_hex(parts.join("\n").as_bytes()))
}

/// SplitMix64 finalizer over a seed and item index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Run<'a> {
    config: &'a PipelineConfig,
    options: &'a RunOptions,
    dir: PathBuf,
    records: BTreeMap<Stage, StageRecord>,
    reports: Vec<StageReport>,
    gateway: Option<Arc<ModelGateway>>,
    pool: rayon::ThreadPool,
}

impl<'a> Run<'a> {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn gateway(&mut self) -> Result<Arc<ModelGateway>, PipelineError> {
        if let Some(g) = &self.gateway {
            return Ok(g.clone());
        }
        let gw = &self.config.gateway;
        let backend: Arc<dyn Backend> = match (&gw.mock, &gw.endpoint) {
            (Some(mock), _) => {
                Arc::new(MockBackend::load(&self.config.resolve(mock)).map_err(|e| {
                    PipelineError::Config(format!("config:invalid:gateway.mock: {e}"))
                })?)
            }
            (None, Some(endpoint)) => Arc::new(HttpBackend::new(
                endpoint.clone(),
                gw.key.clone(),
                Duration::from_secs(gw.timeout_secs),
            )),
            (None, None) => unreachable!("validated config"),
        };
        let config = GatewayConfig {
            model_id: gw
                .model
                .clone()
                .unwrap_or_else(|| GatewayConfig::default().model_id),
            temperature: gw.temperature,
            max_retries: gw.max_retries,
            backoff_base_ms: if gw.mock.is_some() { 0 } else { gw.backoff_ms },
            cache_dir: Some(self.path("cache")),
        };
        let g = Arc::new(ModelGateway::new(backend, config));
        self.gateway = Some(g.clone());
        Ok(g)
    }

    /// Fingerprint of the model backend, part of model-driven stage digests.
    fn backend_fingerprint(&self) -> Result<String, PipelineError> {
        let gw = &self.config.gateway;
        Ok(match &gw.mock {
            Some(mock) => {
                let path = self.config.resolve(mock);
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                format!("mock:{}", sha256_hex(&bytes))
            }
            None => format!(
                "endpoint:{}:{}:{}",
                gw.endpoint.as_deref().unwrap_or_default(),
                gw.model.as_deref().unwrap_or_default(),
                gw.temperature
            ),
        })
    }

    fn log<T: Serialize>(
        &self,
        stage: Stage,
        lines: &[(String, &str, Option<T>, Vec<Warning>)],
    ) -> Result<(), PipelineError> {
        let mut bytes = Vec::new();
        for (item, status, detail, warnings) in lines {
            let line = LogLine {
                item,
                status,
                detail: detail.as_ref(),
                warnings,
            };
            serde_json::to_writer(&mut bytes, &line).expect("log line serializes");
            bytes.push(b'\n');
        }
        write_file(&self.path(&format!("logs/{}.jsonl", stage.name())), &bytes)
    }

    fn save_records(&self) -> Result<(), PipelineError> {
        write_json(&self.path("stages.json"), &self.records)
    }

    fn stage<F>(
        &mut self,
        stage: Stage,
        input_digest: String,
        outputs: Vec<PathBuf>,
        compute: F,
    ) -> Result<String, PipelineError>
    where
        F: FnOnce(&mut Self) -> Result<(), PipelineError>,
    {
        let started = Instant::now();
        if self.options.resume {
            if let Some(rec) = self.records.get(&stage) {
                if rec.input_digest == input_digest
                    && rec.outputs == outputs
                    && file_digest(&outputs, &self.dir).as_deref()
                        == Some(rec.output_digest.as_str())
                {
                    log::info!("{stage}: cached");
                    let digest = rec.output_digest.clone();
                    self.reports.push(StageReport {
                        stage,
                        status: StageStatus::Cached,
                        output_digest: digest.clone(),
                        duration: started.elapsed(),
                    });
                    let rec = self.records.get_mut(&stage).unwrap();
                    rec.status = StageStatus::Cached;
                    self.save_records()?;
                    return Ok(digest);
                }
            }
        }
        log::info!("{stage}: computing");
        compute(self)?;
        let digest = file_digest(&outputs, &self.dir)
            .ok_or_else(|| PipelineError::stage(stage, "stage did not write all of its outputs"))?;
        let elapsed = started.elapsed();
        self.records.insert(
            stage,
            StageRecord {
                input_digest,
                output_digest: digest.clone(),
                outputs,
                status: StageStatus::Computed,
                millis: elapsed.as_millis() as u64,
            },
        );
        self.save_records()?;
        self.reports.push(StageReport {
            stage,
            status: StageStatus::Computed,
            output_digest: digest.clone(),
            duration: elapsed,
        });
        Ok(digest)
    }
}

fn digest_of(parts: &[&str]) -> String {
    sha256_hex(parts.join("\u{1f}").as_bytes())
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializes")
}

/// Feature streams for every input video, extracting them first if needed.
fn load_streams(run: &Run<'_>) -> Result<Vec<FrameFeatureStream>, PipelineError> {
    let cfg = run.config;
    if let Some(cmd) = &cfg.input.extractor {
        cfg.input
            .videos
            .iter()
            .enumerate()
            .map(|(i, video)| {
                let out = run.path(&format!("split/features-{i:03}.txt"));
                fs::create_dir_all(out.parent().unwrap()).map_err(io_err(&out))?;
                run_extractor(cmd, &cfg.resolve(video), &out)
                    .map_err(|e| PipelineError::stage(Stage::Split, e))
            })
            .collect()
    } else {
        cfg.input
            .features
            .iter()
            .map(|p| {
                let path = cfg.resolve(p);
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                FrameFeatureStream::parse(&text).map_err(|e| {
                    PipelineError::stage(Stage::Split, format!("{}: {e}", path.display()))
                })
            })
            .collect()
    }
}

/// Run the pipeline up to `options.until`.
pub fn run_pipeline(
    config: &PipelineConfig,
    options: &RunOptions,
) -> Result<RunReport, PipelineError> {
    let mut config = config.clone();
    if options.strict {
        config.parse.strict = true;
    }
    let config = &config;
    let dir = options.out_root.join(&config.digest()[..16]);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let workers = options.workers.unwrap_or(config.gateway.workers).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("config:invalid:workers: {e}")))?;
    let records = match fs::read(dir.join("stages.json")) {
        Ok(bytes) if options.resume => serde_json::from_slice(&bytes).unwrap_or_default(),
        _ => BTreeMap::new(),
    };
    let mut run = Run {
        config,
        options,
        dir,
        records,
        reports: Vec::new(),
        gateway: None,
        pool,
    };
    let mut report = RunReport {
        run_dir: run.dir.clone(),
        stsg: Vec::new(),
        dataset: None,
        manifest: None,
        stages: Vec::new(),
    };

    // split
    let streams = load_streams(&run)?;
    let mut video_ids: Vec<String> = streams.iter().map(|s| s.video_id.clone()).collect();
    video_ids.sort();
    video_ids.dedup();
    if video_ids.len() != streams.len() {
        return Err(PipelineError::stage(
            Stage::Split,
            "duplicate video ids across inputs",
        ));
    }
    let split_outputs: Vec<PathBuf> = streams
        .iter()
        .map(|s| run.path(&format!("split/{}.json", s.video_id)))
        .collect();
    let stream_digests: Vec<String> = streams
        .iter()
        .map(|s| sha256_hex(s.to_text().as_bytes()))
        .collect();
    let split_in = digest_of(&[&stream_digests.join(","), &json(&config.split_params())]);
    let split_digest = run.stage(Stage::Split, split_in, split_outputs.clone(), |run| {
        let mut lines = Vec::new();
        for (stream, out) in streams.iter().zip(&split_outputs) {
            let clips = split_video(stream, &run.config.split_params())
                .map_err(|e| PipelineError::stage(Stage::Split, e))?;
            lines.push((stream.video_id.clone(), "ok", Some(clips.len()), Vec::new()));
            write_json(
                out,
                &VideoSplit {
                    video_id: stream.video_id.clone(),
                    clips,
                },
            )?;
        }
        run.log(Stage::Split, &lines)
    })?;
    if options.until == Stage::Split {
        report.stages = run.reports;
        return Ok(report);
    }

    // parse
    let fingerprint = run.backend_fingerprint()?;
    let parse_outputs: Vec<PathBuf> = streams
        .iter()
        .map(|s| run.path(&format!("parse/{}.json", s.video_id)))
        .collect();
    let parse_in = digest_of(&[&split_digest, &json(&config.parse), &fingerprint]);
    let parse_digest = run.stage(Stage::Parse, parse_in, parse_outputs.clone(), |run| {
        let gateway = run.gateway()?;
        let mut lines = Vec::new();
        for (split_path, out) in split_outputs.iter().zip(&parse_outputs) {
            let split: VideoSplit = read_json(split_path, Stage::Parse)?;
            let video = split.video_id.clone();
            let options = run.config.parse.clone();
            let vid = video.as_str();
            let jobs: Vec<(usize, KeyframeInput)> = split
                .clips
                .iter()
                .enumerate()
                .flat_map(|(c, clip)| {
                    clip.keyframes.iter().map(move |k| {
                        (
                            c,
                            KeyframeInput::new(vid, &clip.clip_id, &k.keyframe_id, k.timestamp),
                        )
                    })
                })
                .collect();
            let results: Vec<_> = run
                .pool
                .install(|| {
                    jobs.par_iter()
                        .map(|(c, input)| {
                            let built = build_frame_graph(input, &gateway, &options)?;
                            let mut warnings = built.warnings;
                            if built.value.failed {
                                return Ok((*c, input.keyframe_id.clone(), None, warnings));
                            }
                            let graph = if options.verify {
                                let v = verify_nodes(&built.value.graph, input, &gateway, &options);
                                warnings.extend(v.warnings);
                                v.value
                            } else {
                                built.value.graph
                            };
                            Ok((*c, input.keyframe_id.clone(), Some(graph), warnings))
                        })
                        .collect::<Result<Vec<_>, crate::parse::FrameError>>()
                })
                .map_err(|e| PipelineError::stage(Stage::Parse, e))?;
            let mut clips: Vec<ClipFrames> = split
                .clips
                .iter()
                .map(|c| ClipFrames {
                    meta: ClipMeta::from_plan(&video, c),
                    frames: Vec::new(),
                    failed: Vec::new(),
                })
                .collect();
            for (c, keyframe, graph, warnings) in results {
                let detail = graph.as_ref().map(|g| (g.nodes.len(), g.relations.len()));
                match graph {
                    Some(g) => clips[c].frames.push(g),
                    None => clips[c].failed.push(keyframe.clone()),
                }
                let status = if detail.is_some() { "ok" } else { "failed" };
                lines.push((format!("{video}/{keyframe}"), status, detail, warnings));
            }
            write_json(
                out,
                &VideoParse {
                    video_id: video,
                    clips,
                },
            )?;
        }
        run.log(Stage::Parse, &lines)
    })?;
    if options.until == Stage::Parse {
        report.stages = run.reports;
        return Ok(report);
    }

    // induct
    let stsg_paths: Vec<PathBuf> = streams
        .iter()
        .map(|s| run.path(&format!("induct/{}.stsg.json", s.video_id)))
        .collect();
    let verdict_paths: Vec<PathBuf> = streams
        .iter()
        .map(|s| run.path(&format!("induct/{}.verdicts.jsonl", s.video_id)))
        .collect();
    let mut induct_outputs = stsg_paths.clone();
    induct_outputs.extend(verdict_paths.iter().cloned());
    let induct_in = digest_of(&[&parse_digest, &json(&config.induct), &fingerprint]);
    let induct_digest = run.stage(Stage::Induct, induct_in, induct_outputs, |run| {
        let gateway = run.gateway()?;
        let mut lines = Vec::new();
        for ((parse_path, stsg_path), verdict_path) in
            parse_outputs.iter().zip(&stsg_paths).zip(&verdict_paths)
        {
            let parsed: VideoParse = read_json(parse_path, Stage::Induct)?;
            let clips: Vec<(ClipMeta, Vec<FrameSceneGraph>)> = parsed
                .clips
                .into_iter()
                .map(|c| (c.meta, c.frames))
                .collect();
            let induced = run
                .pool
                .install(|| induct_video(&parsed.video_id, &clips, &gateway, &run.config.induct))
                .map_err(|e| PipelineError::stage(Stage::Induct, e))?;
            let stsg = induced.value.value;
            let bytes = stsg
                .to_json()
                .map_err(|e| PipelineError::stage(Stage::Induct, e))?;
            write_file(stsg_path, &bytes)?;
            write_jsonl(verdict_path, &induced.value.verdicts)?;
            for clip in &stsg.clips {
                let detail = (
                    clip.nodes.len(),
                    clip.relations.len(),
                    clip.motions.len(),
                    clip.event.is_some(),
                );
                let warnings: Vec<Warning> = induced
                    .warnings
                    .iter()
                    .filter(|w| w.item.contains(&clip.clip_id))
                    .cloned()
                    .collect();
                lines.push((
                    format!("{}/{}", stsg.video_id, clip.clip_id),
                    "ok",
                    Some(detail),
                    warnings,
                ));
            }
            let rest: Vec<Warning> = induced
                .warnings
                .iter()
                .filter(|w| !stsg.clips.iter().any(|c| w.item.contains(&c.clip_id)))
                .cloned()
                .collect();
            let refs = (stsg.references.len(), 0, 0, false);
            lines.push((
                format!("{}/references", stsg.video_id),
                "ok",
                Some(refs),
                rest,
            ));
        }
        run.log(Stage::Induct, &lines)
    })?;
    report.stsg = stsg_paths.clone();
    if options.until == Stage::Induct {
        report.stages = run.reports;
        return Ok(report);
    }

    // sample
    let paths_file = run.path("sample/paths.jsonl");
    let plan_file = run.path("sample/plan.json");
    let sample_in = digest_of(&[&induct_digest, &json(&config.sample)]);
    let sample_digest = run.stage(
        Stage::Sample,
        sample_in,
        vec![paths_file.clone(), plan_file.clone()],
        |run| {
            let cfg = run.config;
            let graphs: Vec<SpatioTemporalSceneGraph> = stsg_paths
                .iter()
                .map(|p| {
                    let bytes = fs::read(p).map_err(io_err(p))?;
                    SpatioTemporalSceneGraph::from_json(&bytes)
                        .map_err(|e| PipelineError::stage(Stage::Sample, e))
                })
                .collect::<Result<_, _>>()?;
            let samplers: Vec<PathSampler<'_>> = graphs
                .iter()
                .map(|g| PathSampler::new(g).map_err(|e| PipelineError::stage(Stage::Sample, e)))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .filter(|s| s.index().edge_count() > 0)
                .collect();
            if samplers.is_empty() {
                return Err(PipelineError::stage(
                    Stage::Sample,
                    "no-edges: no video graph has walkable edges",
                ));
            }
            let mix = cfg.step_mix()?;
            let plan = plan_step_mix(&mix, cfg.sample.total, cfg.sample.seed)
                .map_err(|e| PipelineError::stage(Stage::Sample, e))?;
            let schedule = plan.schedule();
            let results: Vec<_> = run
                .pool
                .install(|| {
                    schedule
                        .par_iter()
                        .enumerate()
                        .map(|(i, &n)| {
                            let sampler = &samplers[i % samplers.len()];
                            let seed = derive_seed(cfg.sample.seed, i as u64);
                            let mut path = sampler.sample(n, seed)?;
                            let mut warnings = Vec::new();
                            let mut rng =
                                ChaCha8Rng::seed_from_u64(derive_seed(!cfg.sample.seed, i as u64));
                            if rng.random_bool(cfg.sample.contextualize) {
                                let graph = &graphs[graphs
                                    .iter()
                                    .position(|g| g.video_id == path.video_id)
                                    .unwrap()];
                                let ctx = contextualize(&path, graph);
                                warnings = ctx.warnings;
                                path = ctx.value;
                            }
                            Ok((path, warnings))
                        })
                        .collect::<Result<Vec<_>, crate::sample::SampleError>>()
                })
                .map_err(|e| PipelineError::stage(Stage::Sample, e))?;
            let lines: Vec<_> = results
                .iter()
                .enumerate()
                .map(|(i, (p, w))| {
                    let status = if p.early_terminated { "short" } else { "ok" };
                    (
                        format!("sample-{i:06}"),
                        status,
                        Some((p.requested_n, p.achieved_n)),
                        w.clone(),
                    )
                })
                .collect();
            let paths: Vec<ReasoningPath> = results.into_iter().map(|(p, _)| p).collect();
            write_jsonl(&paths_file, &paths)?;
            write_json(&plan_file, &plan)?;
            run.log(Stage::Sample, &lines)
        },
    )?;
    if options.until == Stage::Sample {
        report.stages = run.reports;
        return Ok(report);
    }

    // synth
    let samples_file = run.path("synth/samples.jsonl");
    let synth_in = digest_of(&[&sample_digest, &json(&config.synth), &fingerprint]);
    let synth_digest = run.stage(Stage::Synth, synth_in, vec![samples_file.clone()], |run| {
        let cfg = run.config;
        let paths: Vec<ReasoningPath> = read_jsonl(&paths_file, Stage::Synth)?;
        let gateway = if cfg.synth.refine {
            Some(run.gateway()?)
        } else {
            None
        };
        let registry = TemplateRegistry::builtin();
        let results: Vec<_> = run
            .pool
            .install(|| {
                paths
                    .par_iter()
                    .enumerate()
                    .map(|(i, path)| {
                        let sample =
                            render_qra(path, registry, derive_seed(cfg.synth.seed, i as u64))?;
                        Ok(match &gateway {
                            Some(g) => {
                                let refined = refine_qra(&sample, g);
                                (refined.value, refined.warnings)
                            }
                            None => (sample, Vec::new()),
                        })
                    })
                    .collect::<Result<Vec<_>, crate::synth::SynthError>>()
            })
            .map_err(|e| PipelineError::stage(Stage::Synth, e))?;
        let lines: Vec<_> = results
            .iter()
            .enumerate()
            .map(|(i, (s, w))| {
                let status = if s.refined { "refined" } else { "rendered" };
                (format!("sample-{i:06}"), status, None::<()>, w.clone())
            })
            .collect();
        let samples: Vec<QRASample> = results.into_iter().map(|(s, _)| s).collect();
        write_jsonl(&samples_file, &samples)?;
        run.log(Stage::Synth, &lines)
    })?;
    if options.until == Stage::Synth {
        report.stages = run.reports;
        return Ok(report);
    }

    // export
    let dataset = run.path(&format!("export/{}", config.export.file));
    let manifest = manifest_path(&dataset);
    let export_in = digest_of(&[&synth_digest, &json(&config.export)]);
    run.stage(
        Stage::Export,
        export_in,
        vec![dataset.clone(), manifest.clone()],
        |run| {
            let samples: Vec<QRASample> = read_jsonl(&samples_file, Stage::Export)?;
            let m: Manifest = export_jsonl(&samples, &run.config.export.spec(), &dataset)
                .map_err(|e| PipelineError::stage(Stage::Export, e))?;
            let line = vec![(
                run.config.export.file.clone(),
                "ok",
                Some((m.total, m.rejected)),
                Vec::new(),
            )];
            run.log(Stage::Export, &line)
        },
    )?;
    report.dataset = Some(dataset);
    report.manifest = Some(manifest);
    report.stages = run.reports;
    Ok(report)
}
