//! Rendering reasoning paths into question / rationale / answer samples.
//!
//! The question is built inside out: the deepest frontier vertex is named
//! plainly, and each step towards the initial edge wraps the previous
//! phrase in the relational description of the vertex it resolves. The
//! rationale lists the resolutions innermost first, so its last step
//! answers the question.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ModelGateway, ModelRequest};
use crate::parse::{parse_model_output, ParsedPayload, PayloadKind};
use crate::sample::{EdgeKind, ReasoningPath, ReasoningStep, Role, TemporalContext, VertexRef};
use crate::text::{capitalize, decapitalize, format_seconds, token_overlap};
use crate::{Outcome, Warning};

pub const FLAG_ANSWER_DRIFT: &str = "answer-drift";

const PLACEHOLDERS: &[&str] = &[
    "Wh",
    "wh",
    "noun",
    "predicate",
    "kind",
    "target",
    "Target",
    "target_pos",
    "answer",
    "t1",
    "t2",
    "question",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SynthError {
    #[error("template asset line {line}: {message}")]
    Asset { line: usize, message: String },
    #[error("missing template section `{0}`")]
    MissingTemplate(String),
    #[error("path has no steps")]
    EmptyPath,
}

/// Surface forms of one section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionTemplate {
    pub edge_kind: EdgeKind,
    /// Section name, like `relation.ask_target.question`.
    pub section: String,
    pub surface_forms: Vec<String>,
    /// Which edge endpoint the section's answer is, when fixed.
    pub answer_slot: Option<Role>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateRegistry {
    pub version: u32,
    sections: BTreeMap<String, QuestionTemplate>,
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{(\w+)\}").unwrap())
}

fn section_kind(section: &str) -> Option<(EdgeKind, Option<Role>)> {
    let mut parts = section.split('.');
    let kind = match parts.next()? {
        "relation" => EdgeKind::Relation,
        "attribute" => EdgeKind::Attribute,
        "motion" => EdgeKind::Motion,
        "reference" => EdgeKind::Reference,
        "event" => EdgeKind::Event,
        _ => return None,
    };
    let slot = match parts.next() {
        Some("ask_source" | "ask_owner" | "ask_actor" | "ask_performer") => Some(Role::Source),
        Some("ask_target" | "ask_value" | "ask_action") => Some(Role::Target),
        _ => None,
    };
    Some((kind, slot))
}

impl TemplateRegistry {
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let mut version = None;
        let mut sections: BTreeMap<String, QuestionTemplate> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            let err = |message: String| SynthError::Asset {
                line: line_no,
                message,
            };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if version.is_none() {
                let v = line
                    .strip_prefix("version ")
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| err("expected `version <n>` first".into()))?;
                version = Some(v);
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let (edge_kind, answer_slot) =
                    section_kind(name).ok_or_else(|| err(format!("unknown section `{name}`")))?;
                if sections.contains_key(name) {
                    return Err(err(format!("duplicate section `{name}`")));
                }
                sections.insert(
                    name.to_string(),
                    QuestionTemplate {
                        edge_kind,
                        section: name.to_string(),
                        surface_forms: Vec::new(),
                        answer_slot,
                    },
                );
                current = Some(name.to_string());
                continue;
            }
            let Some(name) = &current else {
                return Err(err("surface form outside a section".into()));
            };
            for cap in placeholder_re().captures_iter(line) {
                if !PLACEHOLDERS.contains(&&cap[1]) {
                    return Err(err(format!("unknown placeholder `{{{}}}`", &cap[1])));
                }
            }
            sections
                .get_mut(name)
                .unwrap()
                .surface_forms
                .push(line.to_string());
        }
        Ok(Self {
            version: version.ok_or(SynthError::Asset {
                line: 0,
                message: "empty asset".into(),
            })?,
            sections,
        })
    }

    pub fn builtin() -> &'static TemplateRegistry {
        static REG: OnceLock<TemplateRegistry> = OnceLock::new();
        REG.get_or_init(|| {
            TemplateRegistry::parse(include_str!("../assets/qra_templates.txt"))
                .expect("bundled templates parse")
        })
    }

    /// Same sections keeping only the first surface form of each.
    pub fn canonical(&self) -> Self {
        let mut out = self.clone();
        for t in out.sections.values_mut() {
            t.surface_forms.truncate(1);
        }
        out
    }

    pub fn template(&self, section: &str) -> Result<&QuestionTemplate, SynthError> {
        self.sections
            .get(section)
            .filter(|t| !t.surface_forms.is_empty())
            .ok_or_else(|| SynthError::MissingTemplate(section.to_string()))
    }

    pub fn templates(&self) -> impl Iterator<Item = &QuestionTemplate> {
        self.sections.values()
    }

    fn pick(&self, section: &str, rng: &mut ChaCha8Rng) -> Result<&str, SynthError> {
        let forms = &self.template(section)?.surface_forms;
        Ok(&forms[rng.random_range(0..forms.len())])
    }
}

fn fill(form: &str, values: &BTreeMap<&str, String>) -> String {
    placeholder_re()
        .replace_all(form, |c: &regex::Captures<'_>| {
            values.get(&c[1]).cloned().unwrap_or_default()
        })
        .into_owned()
}

/// Template variant for a step.
pub fn variant(step: &ReasoningStep) -> &'static str {
    let leaf = |v: &VertexRef| matches!(v, VertexRef::Action { .. });
    match (step.edge_kind, step.focus_role) {
        (EdgeKind::Relation, Role::Source) => "relation.ask_source",
        (EdgeKind::Relation, _) => "relation.ask_target",
        (EdgeKind::Attribute, _) if matches!(step.focus_node, VertexRef::Attribute { .. }) => {
            "attribute.ask_value"
        }
        (EdgeKind::Attribute, _) => "attribute.ask_owner",
        (EdgeKind::Motion, _) if leaf(&step.focus_node) => "motion.ask_action",
        (EdgeKind::Motion, _) if leaf(&step.introduced_node) => "motion.ask_performer",
        (EdgeKind::Motion, Role::Source) => "motion.ask_actor",
        (EdgeKind::Motion, _) => "motion.ask_target",
        (EdgeKind::Reference | EdgeKind::Event, _) => "reference.ask",
    }
}

/// Plain phrase naming the introduced vertex once it is resolved.
fn plain(step: &ReasoningStep) -> String {
    match step.introduced_node {
        VertexRef::Object { .. } => format!("the {}", step.introduced.label),
        _ => step.introduced.label.clone(),
    }
}

fn values(step: &ReasoningStep, target: &str) -> BTreeMap<&'static str, String> {
    let person = step.focus.person;
    let wh = if person { "who" } else { "what" };
    BTreeMap::from([
        ("Wh", capitalize(wh)),
        ("wh", wh.to_string()),
        ("noun", if person { "person" } else { "object" }.to_string()),
        ("predicate", step.predicate.clone()),
        ("kind", step.predicate.clone()),
        ("target", target.to_string()),
        ("Target", capitalize(target)),
        ("target_pos", format!("{target}'s")),
        ("answer", step.sub_answer.clone()),
    ])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QraText {
    pub question: String,
    pub rationale: Vec<String>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QRASample {
    pub video_id: String,
    pub question: String,
    pub rationale: Vec<String>,
    pub answer: String,
    pub num_steps: usize,
    pub temporal_context: Option<TemporalContext>,
    pub refined: bool,
    pub original: Option<QraText>,
    #[serde(default)]
    pub flags: Vec<String>,
    pub path: ReasoningPath,
}

impl QRASample {
    /// Kind of the edge the question finally asks about.
    pub fn question_kind(&self) -> EdgeKind {
        self.path
            .steps
            .first()
            .map(|s| s.edge_kind)
            .unwrap_or(EdgeKind::Relation)
    }

    pub fn text(&self) -> QraText {
        QraText {
            question: self.question.clone(),
            rationale: self.rationale.clone(),
            answer: self.answer.clone(),
        }
    }
}

pub fn step_label(i: usize, text: &str) -> String {
    format!("Step {i}: {text}")
}

/// Render a path with the given registry; all surface choices come from `seed`.
pub fn render_qra(
    path: &ReasoningPath,
    registry: &TemplateRegistry,
    seed: u64,
) -> Result<QRASample, SynthError> {
    let first = path.steps.first().ok_or(SynthError::EmptyPath)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = &path.steps;

    let mut phrase = plain(steps.last().unwrap());
    for step in steps.iter().skip(1).rev() {
        let form = registry.pick(&format!("{}.describe", variant(step)), &mut rng)?;
        phrase = fill(form, &values(step, &phrase));
    }
    let form = registry.pick(&format!("{}.question", variant(first)), &mut rng)?;
    let mut question = capitalize(&fill(form, &values(first, &phrase)));
    if let Some(ctx) = &path.temporal_context {
        let form = registry.pick("event.prefix", &mut rng)?;
        let vals = BTreeMap::from([
            ("t1", format_seconds(ctx.interval.start)),
            ("t2", format_seconds(ctx.interval.end)),
            ("question", decapitalize(&question)),
        ]);
        question = fill(form, &vals);
    }

    let mut rationale = Vec::with_capacity(steps.len());
    for (i, step) in steps.iter().rev().enumerate() {
        let form = registry.pick(&format!("{}.rationale", variant(step)), &mut rng)?;
        let text = capitalize(&fill(form, &values(step, &plain(step))));
        rationale.push(step_label(i + 1, &text));
    }

    Ok(QRASample {
        video_id: path.video_id.clone(),
        question,
        rationale,
        answer: first.sub_answer.clone(),
        num_steps: path.achieved_n,
        temporal_context: path.temporal_context.clone(),
        refined: false,
        original: None,
        flags: Vec::new(),
        path: path.clone(),
    })
}

/// Split a rationale string on its `Step i:` markers.
pub fn split_rationale(text: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"Step\s*\d+\s*:").unwrap());
    let starts: Vec<usize> = re.find_iter(text).map(|m| m.start()).collect();
    if starts.is_empty() {
        let t = text.trim();
        return if t.is_empty() {
            Vec::new()
        } else {
            vec![t.to_string()]
        };
    }
    let mut out = Vec::new();
    let head = text[..starts[0]].trim();
    if !head.is_empty() {
        out.push(head.to_string());
    }
    for (i, &s) in starts.iter().enumerate() {
        let end = starts.get(i + 1).copied().unwrap_or(text.len());
        let chunk = text[s..end].trim();
        if !chunk.is_empty() {
            out.push(chunk.to_string());
        }
    }
    out
}

/// Ask the model to repair grammar and flow. Malformed replies leave the sample as it was.
pub fn refine_qra(sample: &QRASample, gateway: &ModelGateway) -> Outcome<QRASample> {
    let mut out = Outcome::new(sample.clone());
    let request = ModelRequest::new("qra_refine")
        .bind("q", &sample.question)
        .bind("r", sample.rationale.join(" "))
        .bind("a", &sample.answer);
    let item = format!("{}:{}", sample.video_id, sample.question);
    let reply = match gateway.ask(&request) {
        Ok(text) => text,
        Err(e) => {
            out.warnings
                .push(Warning::new(item, "refine-skipped", e.to_string()));
            return out;
        }
    };
    let (q, r, a) = match parse_model_output(PayloadKind::RefinedQRA, &reply) {
        Ok(ParsedPayload::RefinedQRA { q, r, a })
            if !q.trim().is_empty() && !a.trim().is_empty() =>
        {
            (q, r, a)
        }
        _ => {
            out.warnings
                .push(Warning::new(item, "refine-malformed", reply));
            return out;
        }
    };
    let rationale = split_rationale(&r);
    let refined = &mut out.value;
    refined.original = Some(sample.text());
    refined.question = q.trim().to_string();
    refined.answer = a.trim().to_string();
    if !rationale.is_empty() {
        refined.rationale = rationale;
    }
    refined.refined = true;
    if token_overlap(&sample.answer, &refined.answer) < 0.5
        && !refined.flags.iter().any(|f| f == FLAG_ANSWER_DRIFT)
    {
        refined.flags.push(FLAG_ANSWER_DRIFT.to_string());
        out.warnings.push(Warning::new(
            item,
            FLAG_ANSWER_DRIFT,
            format!("{:?} -> {:?}", sample.answer, refined.answer),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_registry_covers_every_variant() {
        let reg = TemplateRegistry::builtin();
        assert_eq!(reg.version, 1);
        for v in [
            "relation.ask_source",
            "relation.ask_target",
            "attribute.ask_value",
            "attribute.ask_owner",
            "motion.ask_actor",
            "motion.ask_target",
            "motion.ask_action",
            "motion.ask_performer",
            "reference.ask",
        ] {
            assert!(
                reg.template(&format!("{v}.question"))
                    .unwrap()
                    .surface_forms
                    .len()
                    >= 3,
                "{v}"
            );
            reg.template(&format!("{v}.describe")).unwrap();
            reg.template(&format!("{v}.rationale")).unwrap();
        }
        assert_eq!(reg.template("event.prefix").unwrap().surface_forms.len(), 1);
    }

    #[test]
    fn rejects_unknown_placeholder() {
        let err =
            TemplateRegistry::parse("version 1\n[relation.ask_source.question]\n{who} is it?\n")
                .unwrap_err();
        assert!(matches!(err, SynthError::Asset { line: 3, .. }));
    }

    #[test]
    fn splits_step_markers() {
        assert_eq!(
            split_rationale("Step 1: The man. Step 2: The woman."),
            vec!["Step 1: The man.", "Step 2: The woman."]
        );
        assert_eq!(
            split_rationale("Because of the dock."),
            vec!["Because of the dock."]
        );
    }
}
