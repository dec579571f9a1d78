//! Supervision records, step-mix planning and JSONL export.
//!
//! Each exported record pairs a question with two targets: the short answer
//! under `instruction_answer` and the step-by-step rationale under
//! `instruction_rationale`. Trainers combine the two losses with
//! [`combine_losses`].

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Interval;
use crate::sample::ReasoningPath;
use crate::synth::{QRASample, QraText, FLAG_ANSWER_DRIFT};
use crate::text::{format_seconds, sha256_hex};
use crate::ENGINE_VERSION;

pub const DEFAULT_INSTRUCTION_ANSWER: &str =
    "Based on the video, respond to this question with a short answer: {q}";
pub const DEFAULT_INSTRUCTION_RATIONALE: &str =
    "Based on the video, explain step by step how to answer, then answer: {q}";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid supervision spec: {0}")]
    Spec(String),
    #[error("invalid step mix: {0}")]
    Mix(String),
    #[error("invalid loss input: {0}")]
    Loss(String),
    #[error("nothing to export")]
    Empty,
    #[error("{path}: line {line}: {message}")]
    Line {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisionSpec {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_ia")]
    pub instruction_answer: String,
    #[serde(default = "default_ir")]
    pub instruction_rationale: String,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_ia() -> String {
    DEFAULT_INSTRUCTION_ANSWER.to_string()
}
fn default_ir() -> String {
    DEFAULT_INSTRUCTION_RATIONALE.to_string()
}

impl Default for SupervisionSpec {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            instruction_answer: default_ia(),
            instruction_rationale: default_ir(),
        }
    }
}

impl SupervisionSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(DatasetError::Spec(format!(
                "lambda must be a non-negative number, got {}",
                self.lambda
            )));
        }
        for (name, t) in [
            ("instruction_answer", &self.instruction_answer),
            ("instruction_rationale", &self.instruction_rationale),
        ] {
            if !t.contains("{q}") {
                return Err(DatasetError::Spec(format!("{name} must contain {{q}}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub path: Option<ReasoningPath>,
    #[serde(default)]
    pub flags: Vec<String>,
    pub original: Option<QraText>,
    pub interval: Option<Interval>,
    /// Per-record override of the rationale weight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

/// One exported line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisionRecord {
    pub video_id: String,
    pub question: String,
    pub answer: String,
    /// Rationale steps joined by newlines.
    pub rationale: String,
    pub instruction_answer: String,
    pub instruction_rationale: String,
    pub num_steps: usize,
    pub refined: bool,
    pub temporal_context: Option<String>,
    pub provenance: Provenance,
}

pub fn render_instruction(template: &str, question: &str) -> String {
    template.replace("{q}", question)
}

impl SupervisionRecord {
    pub fn from_sample(sample: &QRASample, spec: &SupervisionSpec) -> Result<Self, String> {
        if sample.question.trim().is_empty() {
            return Err("empty question".into());
        }
        if sample.answer.trim().is_empty() {
            return Err("empty answer".into());
        }
        if sample.num_steps == 0 || sample.num_steps != sample.path.achieved_n {
            return Err(format!(
                "num_steps {} does not match path length {}",
                sample.num_steps, sample.path.achieved_n
            ));
        }
        if sample.rationale.is_empty() || sample.rationale.iter().any(|s| s.trim().is_empty()) {
            return Err("empty rationale".into());
        }
        if !sample.refined && sample.rationale.len() != sample.num_steps {
            return Err(format!(
                "{} rationale steps for a {}-step path",
                sample.rationale.len(),
                sample.num_steps
            ));
        }
        Ok(Self {
            video_id: sample.video_id.clone(),
            question: sample.question.clone(),
            answer: sample.answer.clone(),
            rationale: sample.rationale.join("\n"),
            instruction_answer: render_instruction(&spec.instruction_answer, &sample.question),
            instruction_rationale: render_instruction(
                &spec.instruction_rationale,
                &sample.question,
            ),
            num_steps: sample.num_steps,
            refined: sample.refined,
            temporal_context: sample.temporal_context.as_ref().map(|c| {
                format!(
                    "{} ({}s-{}s)",
                    c.description,
                    format_seconds(c.interval.start),
                    format_seconds(c.interval.end)
                )
            }),
            provenance: Provenance {
                path: Some(sample.path.clone()),
                flags: sample.flags.clone(),
                original: sample.original.clone(),
                interval: sample.temporal_context.as_ref().map(|c| c.interval),
                lambda: None,
            },
        })
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.provenance.flags.iter().any(|f| f == flag)
    }
}

/// A question/answer pair from another instruction dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalRecord {
    pub video_id: String,
    pub question: String,
    pub answer: String,
}

/// Answer-only records: empty rationale target and a rationale weight of 0.
/// They carry `num_steps = 0`.
pub fn passthrough(records: &[ExternalRecord], spec: &SupervisionSpec) -> Vec<SupervisionRecord> {
    records
        .iter()
        .map(|r| SupervisionRecord {
            video_id: r.video_id.clone(),
            question: r.question.clone(),
            answer: r.answer.clone(),
            rationale: String::new(),
            instruction_answer: render_instruction(&spec.instruction_answer, &r.question),
            instruction_rationale: render_instruction(&spec.instruction_rationale, &r.question),
            num_steps: 0,
            refined: false,
            temporal_context: None,
            provenance: Provenance {
                path: None,
                flags: Vec::new(),
                original: None,
                interval: None,
                lambda: Some(0.0),
            },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub total: usize,
    pub rejected: usize,
    pub histogram: BTreeMap<usize, usize>,
    pub lambda: f64,
    pub instruction_answer: String,
    pub instruction_rationale: String,
    pub engine_version: String,
    pub sha256: String,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| DatasetError::Io(path.to_path_buf(), e))?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Line {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// `<out>.manifest`
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_os_string();
    name.push(".manifest");
    PathBuf::from(name)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let io = |e: std::io::Error| DatasetError::Io(path.to_path_buf(), e);
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

/// Write records and their manifest. `rejected` is carried into the manifest.
pub fn export_records(
    records: &[SupervisionRecord],
    rejected: usize,
    spec: &SupervisionSpec,
    out: &Path,
) -> Result<Manifest, DatasetError> {
    spec.validate()?;
    let mut body = Vec::new();
    let mut histogram = BTreeMap::new();
    for r in records {
        serde_json::to_writer(&mut body, r).expect("records serialize");
        body.push(b'\n');
        *histogram.entry(r.num_steps).or_insert(0) += 1;
    }
    write_atomic(out, &body)?;
    let manifest = Manifest {
        total: records.len(),
        rejected,
        histogram,
        lambda: spec.lambda,
        instruction_answer: spec.instruction_answer.clone(),
        instruction_rationale: spec.instruction_rationale.clone(),
        engine_version: ENGINE_VERSION.to_string(),
        sha256: sha256_hex(&body),
    };
    let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    text.push(b'\n');
    write_atomic(&manifest_path(out), &text)?;
    Ok(manifest)
}

/// Export samples as JSONL; samples failing record invariants are skipped
/// and counted as rejected.
pub fn export_jsonl(
    samples: &[QRASample],
    spec: &SupervisionSpec,
    out: &Path,
) -> Result<Manifest, DatasetError> {
    if samples.is_empty() {
        return Err(DatasetError::Empty);
    }
    spec.validate()?;
    let mut records = Vec::with_capacity(samples.len());
    let mut rejected = 0;
    for s in samples {
        match SupervisionRecord::from_sample(s, spec) {
            Ok(r) => records.push(r),
            Err(reason) => {
                log::warn!("{}: sample-rejected: {reason}", s.video_id);
                rejected += 1;
            }
        }
    }
    export_records(&records, rejected, spec, out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SupervisionRecord>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::Io(path.to_path_buf(), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| DatasetError::Line {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub histogram: BTreeMap<usize, usize>,
    pub refined: usize,
    pub refinement_rate: f64,
    pub answer_drift: usize,
    /// Questions per kind of the edge they finally ask about.
    pub question_kinds: BTreeMap<String, usize>,
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "samples: {}", self.total)?;
        writeln!(f, "step histogram:")?;
        for (k, v) in &self.histogram {
            writeln!(f, "  {k}: {v}")?;
        }
        writeln!(
            f,
            "refined: {} ({:.1}%)",
            self.refined,
            self.refinement_rate * 100.0
        )?;
        writeln!(f, "answer drift: {}", self.answer_drift)?;
        writeln!(f, "question kinds:")?;
        for (k, v) in &self.question_kinds {
            writeln!(f, "  {k}: {v}")?;
        }
        Ok(())
    }
}

pub fn stats(path: &Path) -> Result<DatasetStats, DatasetError> {
    let records = read_jsonl(path)?;
    if records.is_empty() {
        return Err(DatasetError::Line {
            path: path.to_path_buf(),
            line: 0,
            message: "dataset is empty".into(),
        });
    }
    let mut s = DatasetStats {
        total: records.len(),
        histogram: BTreeMap::new(),
        refined: 0,
        refinement_rate: 0.0,
        answer_drift: 0,
        question_kinds: BTreeMap::new(),
    };
    for r in &records {
        *s.histogram.entry(r.num_steps).or_insert(0) += 1;
        s.refined += usize::from(r.refined);
        s.answer_drift += usize::from(r.has_flag(FLAG_ANSWER_DRIFT));
        let kind = match r.provenance.path.as_ref().and_then(|p| p.steps.first()) {
            Some(step) => step.edge_kind.as_str(),
            None => "external",
        };
        *s.question_kinds.entry(kind.to_string()).or_insert(0) += 1;
    }
    s.refinement_rate = s.refined as f64 / s.total as f64;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMixPlan {
    pub target: BTreeMap<usize, f64>,
    pub counts: BTreeMap<usize, usize>,
    pub total: usize,
    pub seed: u64,
}

impl StepMixPlan {
    /// Requested step count for each sample, in a seeded order.
    pub fn schedule(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .counts
            .iter()
            .flat_map(|(&k, &c)| std::iter::repeat_n(k, c))
            .collect();
        out.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        out
    }
}

/// Largest-remainder apportionment of `total` samples over step counts.
pub fn plan_step_mix(
    target: &BTreeMap<usize, f64>,
    total: usize,
    seed: u64,
) -> Result<StepMixPlan, DatasetError> {
    if target.is_empty() {
        return Err(DatasetError::Mix("empty distribution".into()));
    }
    if total == 0 {
        return Err(DatasetError::Mix("total must be at least 1".into()));
    }
    for (&k, &f) in target {
        if k == 0 {
            return Err(DatasetError::Mix("step counts start at 1".into()));
        }
        if !f.is_finite() || f < 0.0 {
            return Err(DatasetError::Mix(format!("fraction for {k} steps is {f}")));
        }
    }
    let sum: f64 = target.values().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::Mix(format!("fractions sum to {sum}")));
    }
    let mut counts = BTreeMap::new();
    let mut remainders = Vec::new();
    let mut assigned = 0usize;
    for (&k, &f) in target {
        let quota = f * total as f64;
        let floor = (quota + 1e-9).floor();
        counts.insert(k, floor as usize);
        assigned += floor as usize;
        remainders.push((quota - floor, k));
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, k) in remainders.iter().take(total.saturating_sub(assigned)) {
        *counts.get_mut(&k).unwrap() += 1;
    }
    Ok(StepMixPlan {
        target: target.clone(),
        counts,
        total,
        seed,
    })
}

/// L = L_answer + λ·L_rationale
pub fn combine_losses(l_answer: f64, l_rationale: f64, lambda: f64) -> Result<f64, DatasetError> {
    for (name, v) in [
        ("l_answer", l_answer),
        ("l_rationale", l_rationale),
        ("lambda", lambda),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(DatasetError::Loss(format!(
                "{name} must be finite and non-negative, got {v}"
            )));
        }
    }
    Ok(l_answer + lambda * l_rationale)
}

/// Mean of the per-sample combined losses.
pub fn combine_losses_mean(pairs: &[(f64, f64)], lambda: f64) -> Result<f64, DatasetError> {
    if pairs.is_empty() {
        return Err(DatasetError::Loss("empty batch".into()));
    }
    let mut sum = 0.0;
    for &(a, r) in pairs {
        sum += combine_losses(a, r, lambda)?;
    }
    Ok(sum / pairs.len() as f64)
}
