//! Typed data model for frame, clip and video scene graphs.
//!
//! Everything downstream (parsing, merging, sampling) builds on these types.
//! Graph values are plain data: construction happens in the stage that owns
//! them, after which they are treated as immutable and shared by reference.
//!
//! Node ids are deterministic, `{video_id}/{clip_id}/{label}#{instance_index}`,
//! so serialized graphs are byte-stable across runs.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Current STSG-JSON schema version.
pub const SCHEMA_VERSION: u32 = 1;

/// Build the canonical id for an object node.
pub fn node_id(video_id: &str, clip_id: &str, label: &str, instance_index: u32) -> String {
    format!("{video_id}/{clip_id}/{label}#{instance_index}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mobility {
    Static,
    Dynamic,
}

impl fmt::Display for Mobility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mobility::Static => f.write_str("Static"),
            Mobility::Dynamic => f.write_str("Dynamic"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeEntry {
    pub kind: String,
    pub value: String,
}

impl AttributeEntry {
    pub fn new(kind: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            value: value.into(),
        }
    }
}

/// Where (and when) an object node was observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anchor {
    pub keyframe_id: String,
    pub timestamp: f64,
}

/// Closed time interval in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    /// Empty, reversed or NaN-bounded.
    pub fn is_degenerate(&self) -> bool {
        self.start.partial_cmp(&self.end) != Some(std::cmp::Ordering::Less)
    }

    pub fn contains(&self, other: &Interval) -> bool {
        other.start >= self.start && other.end <= self.end
    }
}

/// Half-open frame index range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRange {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectNode {
    pub id: String,
    pub label: String,
    pub instance_index: u32,
    #[serde(default)]
    pub unique_attribute: String,
    pub mobility: Mobility,
    #[serde(default)]
    pub attributes: Vec<AttributeEntry>,
    pub anchors: Vec<Anchor>,
    /// Processing flags such as `unverified`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl ObjectNode {
    /// Short human-readable description used in prompts.
    pub fn describe(&self) -> String {
        let mut out = self.label.clone();
        if !self.unique_attribute.is_empty() {
            out.push(' ');
            out.push_str(&self.unique_attribute);
        }
        if !self.attributes.is_empty() {
            let attrs: Vec<String> = self
                .attributes
                .iter()
                .map(|a| format!("{}: {}", a.kind, a.value))
                .collect();
            out.push_str(" (");
            out.push_str(&attrs.join("; "));
            out.push(')');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationEdge {
    pub subject_id: String,
    pub object_id: String,
    pub predicate: String,
    pub timestamp: f64,
    pub keyframe_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl RelationEdge {
    /// Identity used for deduplication.
    pub fn triple(&self) -> (&str, &str, &str) {
        (&self.subject_id, &self.predicate, &self.object_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionEdge {
    pub object_id: String,
    pub predicate: String,
    #[serde(default)]
    pub target_id: Option<String>,
    pub interval: Interval,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRef {
    pub clip_id: String,
    pub node_id: String,
}

impl NodeRef {
    pub fn new(clip_id: impl Into<String>, node_id: impl Into<String>) -> Self {
        Self {
            clip_id: clip_id.into(),
            node_id: node_id.into(),
        }
    }
}

/// Cross-clip identity link. Stored once, meaningful in both directions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceEdge {
    pub from: NodeRef,
    pub to: NodeRef,
}

impl ReferenceEdge {
    /// Order-independent key, so `(a, b)` and `(b, a)` compare equal.
    pub fn unordered_key(&self) -> (NodeRef, NodeRef) {
        if self.from <= self.to {
            (self.from.clone(), self.to.clone())
        } else {
            (self.to.clone(), self.from.clone())
        }
    }

    pub fn touches(&self, node: &NodeRef) -> Option<&NodeRef> {
        if &self.from == node {
            Some(&self.to)
        } else if &self.to == node {
            Some(&self.from)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventEdge {
    pub clip_id: String,
    pub description: String,
    pub interval: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSceneGraph {
    pub keyframe_id: String,
    pub timestamp: f64,
    pub nodes: Vec<ObjectNode>,
    pub relations: Vec<RelationEdge>,
}

impl FrameSceneGraph {
    pub fn empty(keyframe_id: impl Into<String>, timestamp: f64) -> Self {
        Self {
            keyframe_id: keyframe_id.into(),
            timestamp,
            nodes: Vec::new(),
            relations: Vec::new(),
        }
    }

    pub fn node(&self, id: &str) -> Option<&ObjectNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Remove a node together with every incident relation.
    pub fn remove_node(&mut self, id: &str) {
        self.nodes.retain(|n| n.id != id);
        self.relations
            .retain(|r| r.subject_id != id && r.object_id != id);
    }
}

/// Clip-level graph after merging the clip's frame graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipGraph {
    pub clip_id: String,
    pub frame_range: FrameRange,
    /// Clip time bounds in seconds.
    pub span: Interval,
    pub nodes: Vec<ObjectNode>,
    pub relations: Vec<RelationEdge>,
    #[serde(default)]
    pub motions: Vec<MotionEdge>,
    #[serde(default)]
    pub event: Option<EventEdge>,
}

impl ClipGraph {
    pub fn node(&self, id: &str) -> Option<&ObjectNode> {
        self.nodes.iter().find(|n| n.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatioTemporalSceneGraph {
    pub schema_version: u32,
    pub video_id: String,
    pub clips: Vec<ClipGraph>,
    pub references: Vec<ReferenceEdge>,
}

impl SpatioTemporalSceneGraph {
    pub fn new(video_id: impl Into<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            video_id: video_id.into(),
            clips: Vec::new(),
            references: Vec::new(),
        }
    }

    pub fn clip(&self, clip_id: &str) -> Option<&ClipGraph> {
        self.clips.iter().find(|c| c.clip_id == clip_id)
    }

    pub fn resolve(&self, node: &NodeRef) -> Option<&ObjectNode> {
        self.clip(&node.clip_id)?.node(&node.node_id)
    }

    pub fn node_count(&self) -> usize {
        self.clips.iter().map(|c| c.nodes.len()).sum()
    }

    pub fn to_json(&self) -> Result<Vec<u8>, GraphError> {
        to_json(self)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, GraphError> {
        from_json(bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationCode {
    DuplicateNodeId,
    DuplicateClipId,
    DuplicateInstance,
    EmptyLabel,
    InvalidInstanceIndex,
    MissingAnchors,
    EmptyAttribute,
    DanglingEdgeEndpoint,
    SelfLoop,
    EmptyPredicate,
    DegenerateInterval,
    MotionOnStaticNode,
    ReferenceSameClip,
    DuplicateReference,
    EventClipMismatch,
    EventOutOfBounds,
    UnorderedClips,
    UnsupportedVersion,
}

impl ViolationCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViolationCode::DuplicateNodeId => "duplicate-node-id",
            ViolationCode::DuplicateClipId => "duplicate-clip-id",
            ViolationCode::DuplicateInstance => "duplicate-instance",
            ViolationCode::EmptyLabel => "empty-label",
            ViolationCode::InvalidInstanceIndex => "invalid-instance-index",
            ViolationCode::MissingAnchors => "missing-anchors",
            ViolationCode::EmptyAttribute => "empty-attribute",
            ViolationCode::DanglingEdgeEndpoint => "dangling-edge-endpoint",
            ViolationCode::SelfLoop => "self-loop",
            ViolationCode::EmptyPredicate => "empty-predicate",
            ViolationCode::DegenerateInterval => "degenerate-interval",
            ViolationCode::MotionOnStaticNode => "motion-on-static-node",
            ViolationCode::ReferenceSameClip => "reference-same-clip",
            ViolationCode::DuplicateReference => "duplicate-reference",
            ViolationCode::EventClipMismatch => "event-clip-mismatch",
            ViolationCode::EventOutOfBounds => "event-out-of-bounds",
            ViolationCode::UnorderedClips => "unordered-clips",
            ViolationCode::UnsupportedVersion => "unsupported-version",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    /// Id of the offending element.
    pub subject: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn codes(&self) -> Vec<ViolationCode> {
        self.violations.iter().map(|v| v.code).collect()
    }

    fn push(&mut self, code: ViolationCode, subject: impl Into<String>) {
        self.violations.push(Violation {
            code,
            subject: subject.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .violations
            .iter()
            .map(|v| format!("{}({})", v.code, v.subject))
            .collect();
        f.write_str(&parts.join(", "))
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed STSG-JSON at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unknown-field `{field}` at byte {offset}")]
    UnknownField { field: String, offset: usize },
    #[error("unsupported schema_version {found:?} (expected {expected})")]
    Version { found: Option<i64>, expected: u32 },
    #[error("graph fails validation: {0}")]
    Invalid(ValidationReport),
}

fn check_nodes<'a>(
    nodes: &'a [ObjectNode],
    report: &mut ValidationReport,
) -> HashMap<&'a str, &'a ObjectNode> {
    let mut by_id = HashMap::new();
    let mut instances = HashSet::new();
    for node in nodes {
        if by_id.insert(node.id.as_str(), node).is_some() {
            report.push(ViolationCode::DuplicateNodeId, &node.id);
        } else if !instances.insert((node.label.as_str(), node.instance_index)) {
            report.push(ViolationCode::DuplicateInstance, &node.id);
        }
        if node.label.trim().is_empty() {
            report.push(ViolationCode::EmptyLabel, &node.id);
        }
        if node.instance_index < 1 {
            report.push(ViolationCode::InvalidInstanceIndex, &node.id);
        }
        if node.anchors.is_empty() {
            report.push(ViolationCode::MissingAnchors, &node.id);
        }
        if node
            .attributes
            .iter()
            .any(|a| a.kind.trim().is_empty() || a.value.trim().is_empty())
        {
            report.push(ViolationCode::EmptyAttribute, &node.id);
        }
    }
    by_id
}

fn check_relations(
    relations: &[RelationEdge],
    nodes: &HashMap<&str, &ObjectNode>,
    report: &mut ValidationReport,
) {
    for rel in relations {
        let edge_id = format!("{}-[{}]->{}", rel.subject_id, rel.predicate, rel.object_id);
        if !nodes.contains_key(rel.subject_id.as_str()) {
            report.push(ViolationCode::DanglingEdgeEndpoint, &rel.subject_id);
        }
        if !nodes.contains_key(rel.object_id.as_str()) {
            report.push(ViolationCode::DanglingEdgeEndpoint, &rel.object_id);
        }
        if rel.subject_id == rel.object_id {
            report.push(ViolationCode::SelfLoop, &edge_id);
        }
        if rel.predicate.trim().is_empty() {
            report.push(ViolationCode::EmptyPredicate, &edge_id);
        }
    }
}

/// Validate a single frame scene graph.
pub fn validate_frame(frame: &FrameSceneGraph) -> ValidationReport {
    let mut report = ValidationReport::default();
    let nodes = check_nodes(&frame.nodes, &mut report);
    check_relations(&frame.relations, &nodes, &mut report);
    report
}

/// Validate a clip graph in isolation.
pub fn validate_clip(clip: &ClipGraph) -> ValidationReport {
    let mut report = ValidationReport::default();
    validate_clip_into(clip, &mut report);
    report
}

fn validate_clip_into(clip: &ClipGraph, report: &mut ValidationReport) {
    let nodes = check_nodes(&clip.nodes, report);
    check_relations(&clip.relations, &nodes, report);
    for motion in &clip.motions {
        let edge_id = format!("{}~[{}]", motion.object_id, motion.predicate);
        match nodes.get(motion.object_id.as_str()) {
            None => report.push(ViolationCode::DanglingEdgeEndpoint, &motion.object_id),
            Some(node) if node.mobility != Mobility::Dynamic => {
                report.push(ViolationCode::MotionOnStaticNode, &motion.object_id)
            }
            Some(_) => {}
        }
        if let Some(target) = &motion.target_id {
            if !nodes.contains_key(target.as_str()) {
                report.push(ViolationCode::DanglingEdgeEndpoint, target);
            }
            if target == &motion.object_id {
                report.push(ViolationCode::SelfLoop, &edge_id);
            }
        }
        if motion.predicate.trim().is_empty() {
            report.push(ViolationCode::EmptyPredicate, &edge_id);
        }
        if motion.interval.is_degenerate() {
            report.push(ViolationCode::DegenerateInterval, &edge_id);
        }
    }
    if clip.span.is_degenerate() {
        report.push(ViolationCode::DegenerateInterval, &clip.clip_id);
    }
    if let Some(event) = &clip.event {
        if event.clip_id != clip.clip_id {
            report.push(ViolationCode::EventClipMismatch, &event.clip_id);
        }
        if event.interval.is_degenerate() {
            report.push(ViolationCode::DegenerateInterval, &clip.clip_id);
        } else if !clip.span.contains(&event.interval) {
            report.push(ViolationCode::EventOutOfBounds, &clip.clip_id);
        }
    }
}

/// Check every invariant of a video graph. Never aborts; an empty report
/// means the graph is valid.
pub fn validate(stsg: &SpatioTemporalSceneGraph) -> ValidationReport {
    let mut report = ValidationReport::default();
    if stsg.schema_version != SCHEMA_VERSION {
        report.push(
            ViolationCode::UnsupportedVersion,
            stsg.schema_version.to_string(),
        );
    }
    let mut clip_ids = HashSet::new();
    let mut prev_end: Option<usize> = None;
    for clip in &stsg.clips {
        if !clip_ids.insert(clip.clip_id.as_str()) {
            report.push(ViolationCode::DuplicateClipId, &clip.clip_id);
        }
        let range = clip.frame_range;
        if range.start >= range.end || prev_end.is_some_and(|end| range.start < end) {
            report.push(ViolationCode::UnorderedClips, &clip.clip_id);
        }
        prev_end = Some(range.end.max(prev_end.unwrap_or(0)));
        validate_clip_into(clip, &mut report);
    }
    let mut seen = BTreeSet::new();
    for reference in &stsg.references {
        let subject = format!("{}<->{}", reference.from.node_id, reference.to.node_id);
        if reference.from.clip_id == reference.to.clip_id {
            report.push(ViolationCode::ReferenceSameClip, &subject);
        }
        for end in [&reference.from, &reference.to] {
            if stsg.resolve(end).is_none() {
                report.push(ViolationCode::DanglingEdgeEndpoint, &end.node_id);
            }
        }
        if !seen.insert(reference.unordered_key()) {
            report.push(ViolationCode::DuplicateReference, &subject);
        }
    }
    report
}

fn offset_of(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut current = 1;
    let mut line_start = 0;
    for (i, b) in bytes.iter().enumerate() {
        if current == line {
            break;
        }
        if *b == b'\n' {
            current += 1;
            line_start = i + 1;
        }
    }
    (line_start + column.saturating_sub(1)).min(bytes.len())
}

fn map_json_error(bytes: &[u8], err: serde_json::Error) -> GraphError {
    let offset = offset_of(bytes, err.line(), err.column());
    let message = err.to_string();
    if let Some(rest) = message.strip_prefix("unknown field `") {
        let field = rest.split('`').next().unwrap_or_default().to_string();
        return GraphError::UnknownField { field, offset };
    }
    GraphError::Parse { offset, message }
}

/// Serialize a valid graph to STSG-JSON.
pub fn to_json(stsg: &SpatioTemporalSceneGraph) -> Result<Vec<u8>, GraphError> {
    let report = validate(stsg);
    if !report.is_valid() {
        return Err(GraphError::Invalid(report));
    }
    let mut out = serde_json::to_vec_pretty(stsg).map_err(|e| GraphError::Parse {
        offset: 0,
        message: e.to_string(),
    })?;
    out.push(b'\n');
    Ok(out)
}

/// Parse STSG-JSON strictly: unknown fields and foreign versions are rejected.
pub fn from_json(bytes: &[u8]) -> Result<SpatioTemporalSceneGraph, GraphError> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| map_json_error(bytes, e))?;
    let version = value.get("schema_version").and_then(|v| v.as_i64());
    if version != Some(SCHEMA_VERSION as i64) {
        return Err(GraphError::Version {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    serde_json::from_slice(bytes).map_err(|e| map_json_error(bytes, e))
}
