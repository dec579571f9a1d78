//! Keyframe semantics parsing.
//!
//! Drives the per-keyframe prompt sequence (scene narrative, object list,
//! instance quantities, mobility, attributes, relations) and turns the
//! model's semi-structured answers into a validated [`FrameSceneGraph`].
//! [`verify_nodes`] then filters hallucinated elements with two independent
//! yes/no confirmation passes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{GatewayError, ModelGateway, ModelRequest};
use crate::graph::{
    node_id, validate_frame, Anchor, AttributeEntry, FrameSceneGraph, Mobility, ObjectNode,
    RelationEdge,
};
use crate::text::{normalize_quotes, tokens};
use crate::{Outcome, Warning};

/// Appended to a prompt when its answer did not match the expected grammar.
pub const RETRY_SUFFIX: &str = "Answer strictly in the required format.";

pub const FLAG_UNVERIFIED: &str = "unverified";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PayloadKind {
    ObjectList,
    QuantityBlock,
    Mobility,
    AttributeMap,
    TripletList,
    Action,
    PredicateObject,
    YesNo,
    RefinedQRA,
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for PayloadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ObjectList" => PayloadKind::ObjectList,
            "QuantityBlock" => PayloadKind::QuantityBlock,
            "Mobility" => PayloadKind::Mobility,
            "AttributeMap" => PayloadKind::AttributeMap,
            "TripletList" => PayloadKind::TripletList,
            "Action" => PayloadKind::Action,
            "PredicateObject" => PayloadKind::PredicateObject,
            "YesNo" => PayloadKind::YesNo,
            "RefinedQRA" => PayloadKind::RefinedQRA,
            other => return Err(format!("unknown payload kind `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum ParsedPayload {
    ObjectList(Vec<String>),
    QuantityBlock {
        object: String,
        quantity: u32,
        /// Unique attribute per instance, in instance order.
        instances: Vec<String>,
    },
    Mobility(Mobility),
    AttributeMap {
        object: String,
        attributes: Vec<AttributeEntry>,
    },
    TripletList(Vec<Triplet>),
    Action(String),
    PredicateObject {
        predicate: String,
        object: Option<String>,
    },
    YesNo(bool),
    RefinedQRA {
        q: String,
        r: String,
        a: String,
    },
}

impl ParsedPayload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            ParsedPayload::ObjectList(_) => PayloadKind::ObjectList,
            ParsedPayload::QuantityBlock { .. } => PayloadKind::QuantityBlock,
            ParsedPayload::Mobility(_) => PayloadKind::Mobility,
            ParsedPayload::AttributeMap { .. } => PayloadKind::AttributeMap,
            ParsedPayload::TripletList(_) => PayloadKind::TripletList,
            ParsedPayload::Action(_) => PayloadKind::Action,
            ParsedPayload::PredicateObject { .. } => PayloadKind::PredicateObject,
            ParsedPayload::YesNo(_) => PayloadKind::YesNo,
            ParsedPayload::RefinedQRA { .. } => PayloadKind::RefinedQRA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} output does not match its grammar: {text:?}")]
pub struct ParseError {
    pub kind: PayloadKind,
    pub text: String,
}

macro_rules! re {
    ($pat:expr) => {{
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| Regex::new($pat).unwrap())
    }};
}

fn pair_re() -> &'static Regex {
    re!(r#""([^"]*)"\s*:\s*"([^"]*)""#)
}

fn strip_wrapping(text: &str) -> &str {
    text.trim().trim_matches(|c: char| {
        matches!(c, '[' | ']' | '\'' | '"' | '`' | '.' | '!') || c.is_whitespace()
    })
}

/// Text following a case-insensitive keyword.
fn after_keyword<'a>(text: &'a str, keyword: &str) -> Option<&'a str> {
    let lower = text.to_ascii_lowercase();
    lower.find(keyword).map(|pos| &text[pos + keyword.len()..])
}

fn parse_object_list(text: &str) -> Option<Vec<String>> {
    let text = text.trim();
    let rest = match after_keyword(text, "meaningful objects are") {
        Some(rest) => rest,
        None if text.starts_with('[') => text,
        None => return None,
    };
    let mut rest = rest.trim().trim_end_matches(['.', ']']).trim();
    // an outer `[` pairs with the trailing bracket stripped above
    rest = rest.strip_prefix('[').unwrap_or(rest).trim();
    rest = rest.strip_prefix('[').unwrap_or(rest).trim();
    if rest.is_empty() || rest.eq_ignore_ascii_case("none") {
        return Some(Vec::new());
    }
    let mut seen = HashSet::new();
    Some(
        rest.split(',')
            .map(|s| {
                s.trim()
                    .trim_matches(|c| c == '"' || c == '\'')
                    .trim()
                    .to_string()
            })
            .filter(|s| !s.is_empty() && seen.insert(s.clone()))
            .collect(),
    )
}

fn parse_quantity(text: &str) -> Option<ParsedPayload> {
    let object = re!(r"(?im)^\s*\[?\s*object\s*:\s*(.+?)\s*$")
        .captures(text)?
        .get(1)?
        .as_str()
        .to_string();
    let quantity: u32 = re!(r"(?im)^\s*quantity\s*:\s*(\d+)")
        .captures(text)?
        .get(1)?
        .as_str()
        .parse()
        .ok()?;
    if quantity == 0 {
        return None;
    }
    let instances: Vec<String> = re!(r"(?m)^\s*\d+\.\s*[^:\n]+:\s*(.+?)\s*\]?\s*$")
        .captures_iter(text)
        .map(|c| c[1].to_string())
        .collect();
    if quantity > 1 && instances.len() < quantity as usize {
        return None;
    }
    let instances = instances.into_iter().take(quantity as usize).collect();
    Some(ParsedPayload::QuantityBlock {
        object,
        quantity,
        instances,
    })
}

fn parse_mobility(text: &str) -> Option<Mobility> {
    let word = strip_wrapping(text).to_ascii_lowercase();
    match word.as_str() {
        "static" => return Some(Mobility::Static),
        "dynamic" => return Some(Mobility::Dynamic),
        _ => {}
    }
    let toks = tokens(&word);
    match (toks.contains("static"), toks.contains("dynamic")) {
        (true, false) => Some(Mobility::Static),
        (false, true) => Some(Mobility::Dynamic),
        _ => None,
    }
}

fn parse_attribute_map(text: &str) -> Option<ParsedPayload> {
    let text = normalize_quotes(text);
    let split = text.find("\"attributes\"")?;
    let (head, tail) = text.split_at(split);
    let object = pair_re()
        .captures_iter(head)
        .find(|c| &c[1] == "object")
        .map(|c| c[2].trim().to_string())
        .unwrap_or_default();
    let attributes = pair_re()
        .captures_iter(tail)
        .map(|c| AttributeEntry::new(c[1].trim(), c[2].trim()))
        .filter(|a| !a.kind.is_empty() && !a.value.is_empty())
        .collect();
    Some(ParsedPayload::AttributeMap { object, attributes })
}

fn parse_triplets(text: &str) -> Option<Vec<Triplet>> {
    let groups: Vec<&str> = re!(r"<([^<>]*)>")
        .captures_iter(text)
        .map(|c| c.get(1).unwrap().as_str())
        .collect();
    if groups.is_empty() {
        let rest = after_keyword(text, "meaningful triplets are")?;
        let rest = strip_wrapping(rest);
        return (rest.is_empty() || rest.eq_ignore_ascii_case("none")).then(Vec::new);
    }
    groups
        .into_iter()
        .map(|g| {
            let parts: Vec<&str> = g.split(',').map(str::trim).collect();
            if parts.len() != 3 || parts.iter().any(|p| p.is_empty()) {
                return None;
            }
            Some(Triplet {
                subject: parts[0].to_string(),
                predicate: parts[1].to_string(),
                object: parts[2].to_string(),
            })
        })
        .collect()
}

fn keyed_value(text: &str, key: &str) -> Option<String> {
    let text = normalize_quotes(text);
    pair_re()
        .captures_iter(&text)
        .find(|c| c[1].trim() == key)
        .map(|c| c[2].trim().to_string())
}

fn parse_yes_no(text: &str) -> Option<bool> {
    let word = strip_wrapping(text);
    let first = word
        .split(|c: char| !c.is_alphabetic())
        .find(|w| !w.is_empty())?
        .to_ascii_lowercase();
    match first.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

fn parse_refined(text: &str) -> Option<ParsedPayload> {
    let text = normalize_quotes(text);
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    if end <= start {
        return None;
    }
    let value: serde_json::Value = serde_json::from_str(&text[start..=end]).ok()?;
    let field = |k: &str| -> Option<String> {
        match value.get(k)? {
            serde_json::Value::String(s) => Some(s.clone()),
            serde_json::Value::Array(items) => Some(
                items
                    .iter()
                    .map(|i| {
                        i.as_str()
                            .map(str::to_string)
                            .unwrap_or_else(|| i.to_string())
                    })
                    .collect::<Vec<_>>()
                    .join(" "),
            ),
            _ => None,
        }
    };
    Some(ParsedPayload::RefinedQRA {
        q: field("Q")?,
        r: field("R")?,
        a: field("A")?,
    })
}

/// Extract the structured payload of one model answer.
pub fn parse_model_output(kind: PayloadKind, text: &str) -> Result<ParsedPayload, ParseError> {
    let parsed = match kind {
        PayloadKind::ObjectList => parse_object_list(text).map(ParsedPayload::ObjectList),
        PayloadKind::QuantityBlock => parse_quantity(text),
        PayloadKind::Mobility => parse_mobility(text).map(ParsedPayload::Mobility),
        PayloadKind::AttributeMap => parse_attribute_map(text),
        PayloadKind::TripletList => parse_triplets(text).map(ParsedPayload::TripletList),
        PayloadKind::Action => keyed_value(text, "action")
            .filter(|a| !a.is_empty())
            .map(ParsedPayload::Action),
        PayloadKind::PredicateObject => keyed_value(text, "predicate")
            .filter(|p| !p.is_empty())
            .map(|predicate| {
                let object = keyed_value(text, "object")
                    .filter(|o| !o.is_empty() && !o.eq_ignore_ascii_case("none"));
                ParsedPayload::PredicateObject { predicate, object }
            }),
        PayloadKind::YesNo => parse_yes_no(text).map(ParsedPayload::YesNo),
        PayloadKind::RefinedQRA => parse_refined(text),
    };
    parsed.ok_or_else(|| ParseError {
        kind,
        text: text.to_string(),
    })
}

/// Strip the optional framing models put around a one-sentence answer.
pub fn clean_sentence(text: &str) -> String {
    let t = text
        .trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .trim();
    const LEAD: &str = "in the keyframe, ";
    let t = match t.get(..LEAD.len()) {
        Some(head) if head.eq_ignore_ascii_case(LEAD) => &t[LEAD.len()..],
        _ => t,
    };
    crate::text::capitalize(t.trim_end_matches('.').trim())
}

/// Everything the parser needs to know about one keyframe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeInput {
    pub video_id: String,
    pub clip_id: String,
    pub keyframe_id: String,
    pub timestamp: f64,
    /// Reference to the keyframe image, passed to image prompts.
    pub image_ref: String,
    /// Reference to the enclosing clip, passed to video prompts.
    pub clip_ref: String,
}

impl KeyframeInput {
    /// Input using the default `{video_id}/{id}` visual reference scheme.
    pub fn new(video_id: &str, clip_id: &str, keyframe_id: &str, timestamp: f64) -> Self {
        Self {
            video_id: video_id.to_string(),
            clip_id: clip_id.to_string(),
            keyframe_id: keyframe_id.to_string(),
            timestamp,
            image_ref: visual_ref(video_id, keyframe_id),
            clip_ref: visual_ref(video_id, clip_id),
        }
    }
}

/// Reference passed to the model for a keyframe or clip of a video.
pub fn visual_ref(video_id: &str, id: &str) -> String {
    format!("{video_id}/{id}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParseOptions {
    /// Format retries per prompt after the first answer.
    pub retries: u32,
    /// Abort on a failed frame instead of skipping it.
    pub strict: bool,
    /// Max (subject, other) pairs prompted per frame.
    pub max_pairs: usize,
    pub verify: bool,
    pub verify_relations: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            retries: 1,
            strict: false,
            max_pairs: 20,
            verify: true,
            verify_relations: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("keyframe {keyframe_id} failed at {step}: {reason}")]
    Failed {
        keyframe_id: String,
        step: String,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameBuild {
    pub graph: FrameSceneGraph,
    pub failed: bool,
}

#[derive(Debug)]
enum StepFailure {
    Gateway(GatewayError),
    Grammar(ParseError),
}

impl fmt::Display for StepFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepFailure::Gateway(e) => write!(f, "{e}"),
            StepFailure::Grammar(e) => write!(f, "{e}"),
        }
    }
}

fn ask_parsed(
    gateway: &ModelGateway,
    request: &ModelRequest,
    kind: PayloadKind,
    retries: u32,
) -> Result<ParsedPayload, StepFailure> {
    let mut last = None;
    for attempt in 0..=retries {
        let req = if attempt == 0 {
            request.clone()
        } else {
            request.clone().with_suffix(RETRY_SUFFIX)
        };
        let text = gateway.ask(&req).map_err(StepFailure::Gateway)?;
        match parse_model_output(kind, &text) {
            Ok(p) => return Ok(p),
            Err(e) => last = Some(e),
        }
    }
    Err(StepFailure::Grammar(last.expect("at least one attempt")))
}

fn ask_text(gateway: &ModelGateway, request: &ModelRequest) -> Result<String, StepFailure> {
    let text = gateway.ask(request).map_err(StepFailure::Gateway)?;
    let sentence = clean_sentence(&text);
    if sentence.is_empty() {
        return Err(StepFailure::Grammar(ParseError {
            kind: PayloadKind::Action,
            text,
        }));
    }
    Ok(sentence)
}

/// Label used when talking to the model about one node.
fn prompt_name(node: &ObjectNode, multiple: bool) -> String {
    if multiple && !node.unique_attribute.is_empty() {
        format!("{} ({})", node.label, node.unique_attribute)
    } else {
        node.label.clone()
    }
}

/// Pick the node a free-text object phrase refers to.
pub fn resolve_object<'a>(
    phrase: &str,
    nodes: &'a [ObjectNode],
    exclude: Option<&str>,
) -> Option<&'a ObjectNode> {
    let phrase_tokens = tokens(phrase);
    let mut best: Option<(&ObjectNode, (u8, usize, usize))> = None;
    for node in nodes {
        if Some(node.id.as_str()) == exclude {
            continue;
        }
        let label_tokens = tokens(&node.label);
        if label_tokens.is_empty() || !label_tokens.is_subset(&phrase_tokens) {
            continue;
        }
        let exact = u8::from(node.label.eq_ignore_ascii_case(phrase.trim()));
        let attr_overlap = tokens(&node.unique_attribute)
            .intersection(&phrase_tokens)
            .count();
        let score = (exact, label_tokens.len(), attr_overlap);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((node, score));
        }
    }
    best.map(|(n, _)| n)
}

fn frame_failure(
    input: &KeyframeInput,
    step: &str,
    failure: StepFailure,
    options: &ParseOptions,
    mut outcome: Outcome<FrameBuild>,
) -> Result<Outcome<FrameBuild>, FrameError> {
    if options.strict {
        return Err(FrameError::Failed {
            keyframe_id: input.keyframe_id.clone(),
            step: step.to_string(),
            reason: failure.to_string(),
        });
    }
    outcome.warnings.push(Warning::new(
        &input.keyframe_id,
        "frame-failed",
        format!("{step}: {failure}"),
    ));
    outcome.value.failed = true;
    Ok(outcome)
}

/// Run the full parsing sequence for one keyframe.
pub fn build_frame_graph(
    input: &KeyframeInput,
    gateway: &ModelGateway,
    options: &ParseOptions,
) -> Result<Outcome<FrameBuild>, FrameError> {
    let mut outcome = Outcome::new(FrameBuild {
        graph: FrameSceneGraph::empty(&input.keyframe_id, input.timestamp),
        failed: false,
    });
    let item = input.keyframe_id.clone();

    let narrative_req = ModelRequest::new("scene_narrative").image(&input.image_ref);
    let narrative = match ask_text(gateway, &narrative_req) {
        Ok(n) => n,
        Err(f) => return frame_failure(input, "scene_narrative", f, options, outcome),
    };
    let objects_req = ModelRequest::new("object_extract").bind("sentence", &narrative);
    let labels = match ask_parsed(
        gateway,
        &objects_req,
        PayloadKind::ObjectList,
        options.retries,
    ) {
        Ok(ParsedPayload::ObjectList(labels)) => labels,
        Ok(_) => unreachable!("parser returns the requested kind"),
        Err(f) => return frame_failure(input, "object_extract", f, options, outcome),
    };
    if labels.is_empty() {
        outcome
            .warnings
            .push(Warning::new(&item, "empty-object-list", narrative));
        return Ok(outcome);
    }

    let anchor = Anchor {
        keyframe_id: input.keyframe_id.clone(),
        timestamp: input.timestamp,
    };
    let mut nodes: Vec<ObjectNode> = Vec::new();
    let mut multiplicity: BTreeMap<String, usize> = BTreeMap::new();
    for label in &labels {
        let quantity_req = ModelRequest::new("object_quantity")
            .bind("object", label)
            .image(&input.image_ref);
        let instances = match ask_parsed(
            gateway,
            &quantity_req,
            PayloadKind::QuantityBlock,
            options.retries,
        ) {
            Ok(ParsedPayload::QuantityBlock {
                quantity,
                instances,
                ..
            }) => (0..quantity as usize)
                .map(|i| instances.get(i).cloned().unwrap_or_default())
                .collect(),
            Ok(_) => unreachable!(),
            Err(f) => {
                outcome.warnings.push(Warning::new(
                    &item,
                    "quantity-defaulted",
                    format!("{label}: {f}"),
                ));
                vec![String::new()]
            }
        };
        let mobility_req = ModelRequest::new("object_mobility")
            .bind("object", label)
            .image(&input.clip_ref);
        let mobility = match ask_parsed(
            gateway,
            &mobility_req,
            PayloadKind::Mobility,
            options.retries,
        ) {
            Ok(ParsedPayload::Mobility(m)) => m,
            Ok(_) => unreachable!(),
            Err(f) => {
                outcome.warnings.push(Warning::new(
                    &item,
                    "mobility-defaulted",
                    format!("{label}: {f}"),
                ));
                Mobility::Static
            }
        };
        multiplicity.insert(label.clone(), instances.len());
        for (i, unique_attribute) in instances.into_iter().enumerate() {
            let index = i as u32 + 1;
            nodes.push(ObjectNode {
                id: node_id(&input.video_id, &input.clip_id, label, index),
                label: label.clone(),
                instance_index: index,
                unique_attribute,
                mobility,
                attributes: Vec::new(),
                anchors: vec![anchor.clone()],
                flags: Vec::new(),
            });
        }
    }

    for node in nodes.iter_mut() {
        let name = prompt_name(node, multiplicity[&node.label] > 1);
        let narrative_req = ModelRequest::new("attribute_narrative")
            .bind("object", &name)
            .image(&input.image_ref);
        let sentence = match ask_text(gateway, &narrative_req) {
            Ok(s) => s,
            Err(f) => {
                outcome
                    .warnings
                    .push(Warning::new(&node.id, "attributes-skipped", f.to_string()));
                continue;
            }
        };
        let extract_req = ModelRequest::new("attribute_extract")
            .bind("sentence", &sentence)
            .bind("object", &name);
        match ask_parsed(
            gateway,
            &extract_req,
            PayloadKind::AttributeMap,
            options.retries,
        ) {
            Ok(ParsedPayload::AttributeMap { attributes, .. }) => {
                for a in attributes {
                    if !node.attributes.contains(&a) {
                        node.attributes.push(a);
                    }
                }
            }
            Ok(_) => unreachable!(),
            Err(f) => {
                outcome
                    .warnings
                    .push(Warning::new(&node.id, "attributes-skipped", f.to_string()))
            }
        }
    }

    let mut relations: Vec<RelationEdge> = Vec::new();
    let mut seen: HashSet<(String, String, String)> = HashSet::new();
    let mut pairs_left = options.max_pairs;
    for subject in &nodes {
        if pairs_left == 0 {
            outcome.warnings.push(Warning::new(
                &item,
                "relation-cap",
                format!("cap {} reached", options.max_pairs),
            ));
            break;
        }
        let mut others: Vec<String> = Vec::new();
        for other in nodes.iter().filter(|n| n.id != subject.id) {
            let name = prompt_name(other, multiplicity[&other.label] > 1);
            if !others.contains(&name) {
                others.push(name);
            }
        }
        if others.is_empty() {
            continue;
        }
        others.truncate(pairs_left);
        pairs_left -= others.len();
        let name = prompt_name(subject, multiplicity[&subject.label] > 1);
        let narrative_req = ModelRequest::new("relation_narrative")
            .bind("object", &name)
            .bind("others", format!("[{}]", others.join(", ")))
            .image(&input.image_ref);
        let sentence = match ask_text(gateway, &narrative_req) {
            Ok(s) => s,
            Err(f) => {
                outcome.warnings.push(Warning::new(
                    &subject.id,
                    "relations-skipped",
                    f.to_string(),
                ));
                continue;
            }
        };
        let extract_req = ModelRequest::new("triplet_extract")
            .bind("sentence", &sentence)
            .bind("object", &name);
        let triplets = match ask_parsed(
            gateway,
            &extract_req,
            PayloadKind::TripletList,
            options.retries,
        ) {
            Ok(ParsedPayload::TripletList(t)) => t,
            Ok(_) => unreachable!(),
            Err(f) => {
                outcome.warnings.push(Warning::new(
                    &subject.id,
                    "relations-skipped",
                    f.to_string(),
                ));
                continue;
            }
        };
        for t in triplets {
            if !tokens(&subject.label).is_subset(&tokens(&t.subject)) {
                outcome.warnings.push(Warning::new(
                    &subject.id,
                    "triplet-subject-mismatch",
                    format!("<{}, {}, {}>", t.subject, t.predicate, t.object),
                ));
                continue;
            }
            let Some(target) = resolve_object(&t.object, &nodes, Some(&subject.id)) else {
                outcome.warnings.push(Warning::new(
                    &subject.id,
                    "triplet-object-unresolved",
                    t.object.clone(),
                ));
                continue;
            };
            let key = (subject.id.clone(), t.predicate.clone(), target.id.clone());
            if seen.insert(key) {
                relations.push(RelationEdge {
                    subject_id: subject.id.clone(),
                    object_id: target.id.clone(),
                    predicate: t.predicate.clone(),
                    timestamp: input.timestamp,
                    keyframe_id: input.keyframe_id.clone(),
                    flags: Vec::new(),
                });
            }
        }
    }

    outcome.value.graph.nodes = nodes;
    outcome.value.graph.relations = relations;
    debug_assert!(validate_frame(&outcome.value.graph).is_valid());
    Ok(outcome)
}

enum Verdict {
    Keep,
    Deny,
    Unverified(String),
}

fn two_pass(
    gateway: &ModelGateway,
    first: ModelRequest,
    second: ModelRequest,
    retries: u32,
) -> Verdict {
    let mut unverified = None;
    for req in [first, second] {
        match ask_parsed(gateway, &req, PayloadKind::YesNo, retries) {
            Ok(ParsedPayload::YesNo(true)) => {}
            Ok(ParsedPayload::YesNo(false)) => return Verdict::Deny,
            Ok(_) => unreachable!(),
            Err(f) => unverified = Some(f.to_string()),
        }
    }
    match unverified {
        Some(reason) => Verdict::Unverified(reason),
        None => Verdict::Keep,
    }
}

fn add_flag(flags: &mut Vec<String>, flag: &str) {
    if !flags.iter().any(|f| f == flag) {
        flags.push(flag.to_string());
    }
}

/// Two independent confirmation passes over every node (and relation, when
/// enabled). An element survives only if neither pass denies it; elements
/// that could not be checked are kept and flagged `unverified`.
pub fn verify_nodes(
    frame: &FrameSceneGraph,
    input: &KeyframeInput,
    gateway: &ModelGateway,
    options: &ParseOptions,
) -> Outcome<FrameSceneGraph> {
    let mut out = Outcome::new(frame.clone());
    let multiple = |label: &str| frame.nodes.iter().filter(|n| n.label == label).count() > 1;
    for node in &frame.nodes {
        let name = prompt_name(node, multiple(&node.label));
        let first = ModelRequest::new("verify_node")
            .bind("object", &name)
            .image(&input.image_ref);
        let second = ModelRequest::new("verify_node_confirm")
            .bind("object", &name)
            .image(&input.image_ref);
        match two_pass(gateway, first, second, options.retries) {
            Verdict::Keep => {}
            Verdict::Deny => {
                out.warnings.push(Warning::new(&node.id, "node-denied", ""));
                out.value.remove_node(&node.id);
            }
            Verdict::Unverified(reason) => {
                out.warnings
                    .push(Warning::new(&node.id, FLAG_UNVERIFIED, reason));
                if let Some(n) = out.value.nodes.iter_mut().find(|n| n.id == node.id) {
                    add_flag(&mut n.flags, FLAG_UNVERIFIED);
                }
            }
        }
    }
    if options.verify_relations {
        let relations = std::mem::take(&mut out.value.relations);
        for mut rel in relations {
            let (Some(s), Some(o)) = (
                out.value.node(&rel.subject_id),
                out.value.node(&rel.object_id),
            ) else {
                continue;
            };
            let subject = prompt_name(s, multiple(&s.label));
            let object = prompt_name(o, multiple(&o.label));
            let first = ModelRequest::new("verify_relation")
                .bind("subject", &subject)
                .bind("predicate", &rel.predicate)
                .bind("object", &object)
                .image(&input.image_ref);
            let second = ModelRequest::new("verify_relation_confirm")
                .bind("subject", &subject)
                .bind("predicate", &rel.predicate)
                .bind("object", &object)
                .image(&input.image_ref);
            let edge = format!("{}-[{}]->{}", rel.subject_id, rel.predicate, rel.object_id);
            match two_pass(gateway, first, second, options.retries) {
                Verdict::Keep => out.value.relations.push(rel),
                Verdict::Deny => out.warnings.push(Warning::new(edge, "relation-denied", "")),
                Verdict::Unverified(reason) => {
                    out.warnings
                        .push(Warning::new(edge, FLAG_UNVERIFIED, reason));
                    add_flag(&mut rel.flags, FLAG_UNVERIFIED);
                    out.value.relations.push(rel);
                }
            }
        }
    }
    debug_assert!(validate_frame(&out.value).is_valid());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn object_list_variants() {
        let p = |t| parse_model_output(PayloadKind::ObjectList, t);
        let dock = ParsedPayload::ObjectList(vec![
            "man".into(),
            "woman".into(),
            "box".into(),
            "dock".into(),
        ]);
        assert_eq!(
            p("Meaningful objects are [man, woman, box, dock].").unwrap(),
            dock
        );
        assert_eq!(
            p("meaningful objects are man, woman, box, dock").unwrap(),
            dock
        );
        assert_eq!(p("[man, woman, box, dock]").unwrap(), dock);
        assert_eq!(
            p("Meaningful objects are [].").unwrap(),
            ParsedPayload::ObjectList(vec![])
        );
        assert!(p("I cannot see anything").is_err());
    }

    #[test]
    fn quantity_block_with_two_instances() {
        let text = "Object: man\nQuantity: 2\n1. man1: wearing a red hat\n2. man2: holding a rope";
        assert_eq!(
            parse_model_output(PayloadKind::QuantityBlock, text).unwrap(),
            ParsedPayload::QuantityBlock {
                object: "man".into(),
                quantity: 2,
                instances: vec!["wearing a red hat".into(), "holding a rope".into()],
            }
        );
        let short = "Object: man\nQuantity: 2\n1. man1: wearing a red hat";
        assert!(parse_model_output(PayloadKind::QuantityBlock, short).is_err());
    }

    #[test]
    fn mobility_and_yes_no_are_case_insensitive() {
        assert_eq!(
            parse_model_output(PayloadKind::Mobility, "'static'").unwrap(),
            ParsedPayload::Mobility(Mobility::Static)
        );
        assert_eq!(
            parse_model_output(PayloadKind::Mobility, "The object is Dynamic.").unwrap(),
            ParsedPayload::Mobility(Mobility::Dynamic)
        );
        assert!(parse_model_output(PayloadKind::Mobility, "static or dynamic").is_err());
        assert_eq!(
            parse_model_output(PayloadKind::YesNo, "yes.").unwrap(),
            ParsedPayload::YesNo(true)
        );
        assert_eq!(
            parse_model_output(PayloadKind::YesNo, "[No]").unwrap(),
            ParsedPayload::YesNo(false)
        );
        assert!(parse_model_output(PayloadKind::YesNo, "Maybe").is_err());
    }

    #[test]
    fn triplets_need_exactly_two_commas() {
        assert!(
            parse_model_output(PayloadKind::TripletList, "Meaningful triplets are <a, b>.")
                .is_err()
        );
        assert!(parse_model_output(PayloadKind::TripletList, "<a, b, c, d>").is_err());
        assert_eq!(
            parse_model_output(PayloadKind::TripletList, "Meaningful triplets are none.").unwrap(),
            ParsedPayload::TripletList(vec![])
        );
        assert!(parse_model_output(PayloadKind::TripletList, "no idea").is_err());
    }

    #[test]
    fn predicate_none_object() {
        assert_eq!(
            parse_model_output(
                PayloadKind::PredicateObject,
                r#"["predicate":"walking", "object":"None"]"#
            )
            .unwrap(),
            ParsedPayload::PredicateObject {
                predicate: "walking".into(),
                object: None
            }
        );
    }

    #[test]
    fn refined_qra_inside_prose() {
        let text = "Sure! Here it is:\n```json\n{\"Q\": \"q?\", \"R\": [\"Step 1: a.\", \"Step 2: b.\"], \"A\": \"x\"}\n```";
        assert_eq!(
            parse_model_output(PayloadKind::RefinedQRA, text).unwrap(),
            ParsedPayload::RefinedQRA {
                q: "q?".into(),
                r: "Step 1: a. Step 2: b.".into(),
                a: "x".into()
            }
        );
        assert!(parse_model_output(PayloadKind::RefinedQRA, "I cannot help").is_err());
        assert!(parse_model_output(PayloadKind::RefinedQRA, r#"{"Q": "only"}"#).is_err());
    }

    #[test]
    fn resolves_phrase_to_node() {
        let mk = |label: &str, idx: u32, attr: &str| ObjectNode {
            id: node_id("v", "c", label, idx),
            label: label.into(),
            instance_index: idx,
            unique_attribute: attr.into(),
            mobility: Mobility::Static,
            attributes: vec![],
            anchors: vec![],
            flags: vec![],
        };
        let nodes = vec![
            mk("man", 1, "in red"),
            mk("man", 2, "in blue"),
            mk("dock", 1, ""),
        ];
        assert_eq!(
            resolve_object("the end of dock", &nodes, None).unwrap().id,
            "v/c/dock#1"
        );
        assert_eq!(
            resolve_object("the man in blue", &nodes, None).unwrap().id,
            "v/c/man#2"
        );
        assert_eq!(
            resolve_object("man", &nodes, Some("v/c/man#1")).unwrap().id,
            "v/c/man#2"
        );
        assert!(resolve_object("a boat", &nodes, None).is_none());
    }

    #[test]
    fn clean_sentence_strips_framing() {
        assert_eq!(
            clean_sentence("[In the keyframe, a man and a woman carring a red box are on a dock.]"),
            "A man and a woman carring a red box are on a dock"
        );
    }
}
