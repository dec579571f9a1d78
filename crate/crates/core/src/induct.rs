//! Dynamic merging of frame graphs into clip graphs and cross-clip bridging.
//!
//! [`merge_clip`] links same-object nodes across consecutive keyframes
//! (label prefilter, then a model identity check), collapses each chain into
//! one node and turns moving chains into motion edges. [`bridge_clips`]
//! links same-object nodes across clips with reference edges, and
//! [`attach_event`] gives every clip a one-sentence event description.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ModelGateway, ModelRequest};
use crate::graph::{
    node_id, validate, validate_clip, ClipGraph, EventEdge, FrameRange, FrameSceneGraph, Interval,
    Mobility, MotionEdge, NodeRef, ObjectNode, ReferenceEdge, RelationEdge,
    SpatioTemporalSceneGraph, ValidationReport,
};
use crate::parse::{
    clean_sentence, parse_model_output, resolve_object, visual_ref, ParsedPayload, PayloadKind,
    RETRY_SUFFIX,
};
use crate::split::ClipPlan;
use crate::text::token_overlap;
use crate::{Outcome, Warning};

pub const FLAG_IDENTITY_FAILED: &str = "identity-unchecked";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictSource {
    Model,
    LabelHeuristic,
}

/// One side of an identity question: the keyframe or clip plus the node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occurrence {
    pub scope: String,
    pub node_id: String,
}

/// Audit record of one same-object decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityVerdict {
    pub pair: (Occurrence, Occurrence),
    pub same: bool,
    pub source: VerdictSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InductOptions {
    /// Ask the model to confirm identities; otherwise exact label equality decides.
    pub model_identity: bool,
    /// Bridge every clip pair instead of adjacent clips only.
    pub all_pairs: bool,
    /// Minimum token overlap for two labels to be considered a candidate pair.
    pub label_overlap: f64,
    pub retries: u32,
}

impl Default for InductOptions {
    fn default() -> Self {
        Self {
            model_identity: true,
            all_pairs: false,
            label_overlap: 0.5,
            retries: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum InductError {
    #[error("frame {0} is invalid: {1}")]
    InvalidFrame(String, ValidationReport),
    #[error("clip {0} is invalid: {1}")]
    InvalidClip(String, ValidationReport),
    #[error("induced graph is invalid: {0}")]
    Invalid(ValidationReport),
}

/// Clip identity and bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub video_id: String,
    pub clip_id: String,
    pub frame_range: FrameRange,
    pub span: Interval,
}

impl ClipMeta {
    pub fn from_plan(video_id: &str, plan: &ClipPlan) -> Self {
        Self {
            video_id: video_id.to_string(),
            clip_id: plan.clip_id.clone(),
            frame_range: plan.frame_range,
            span: plan.span,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Induced<T> {
    pub value: T,
    pub verdicts: Vec<IdentityVerdict>,
}

/// Candidate prefilter shared by merging and bridging.
pub fn labels_compatible(a: &str, b: &str, min_overlap: f64) -> bool {
    a == b || token_overlap(a, b) >= min_overlap
}

/// Short phrase naming a node in one frame, like "woman walking on the dock".
pub fn identity_phrase(node: &ObjectNode) -> String {
    let detail = if !node.unique_attribute.is_empty() {
        Some(node.unique_attribute.as_str())
    } else {
        node.attributes
            .iter()
            .find(|a| matches!(a.kind.as_str(), "status" | "action" | "pose"))
            .map(|a| a.value.as_str())
    };
    match detail {
        Some(d) => format!("{} {}", node.label, d),
        None => node.label.clone(),
    }
}

enum Answer {
    Yes,
    No,
    Failed(String),
}

fn ask_yes_no(gateway: &ModelGateway, request: ModelRequest, retries: u32) -> Answer {
    let mut last = String::new();
    for attempt in 0..=retries {
        let req = if attempt == 0 {
            request.clone()
        } else {
            request.clone().with_suffix(RETRY_SUFFIX)
        };
        match gateway.ask(&req) {
            Ok(text) => match parse_model_output(PayloadKind::YesNo, &text) {
                Ok(ParsedPayload::YesNo(true)) => return Answer::Yes,
                Ok(_) => return Answer::No,
                Err(e) => last = e.to_string(),
            },
            Err(e) => return Answer::Failed(e.to_string()),
        }
    }
    Answer::Failed(last)
}

fn ask_payload(
    gateway: &ModelGateway,
    request: ModelRequest,
    kind: PayloadKind,
    retries: u32,
) -> Result<ParsedPayload, String> {
    let mut last = String::new();
    for attempt in 0..=retries {
        let req = if attempt == 0 {
            request.clone()
        } else {
            request.clone().with_suffix(RETRY_SUFFIX)
        };
        let text = gateway.ask(&req).map_err(|e| e.to_string())?;
        match parse_model_output(kind, &text) {
            Ok(p) => return Ok(p),
            Err(e) => last = e.to_string(),
        }
    }
    Err(last)
}

struct Chain {
    /// (frame index, node index within the frame), in frame order.
    members: Vec<(usize, usize)>,
}

/// Merge the keyframe graphs of one clip into a clip graph.
pub fn merge_clip(
    meta: &ClipMeta,
    frames: &[FrameSceneGraph],
    gateway: &ModelGateway,
    options: &InductOptions,
) -> Result<Outcome<Induced<ClipGraph>>, InductError> {
    for frame in frames {
        let report = crate::graph::validate_frame(frame);
        if !report.is_valid() {
            return Err(InductError::InvalidFrame(frame.keyframe_id.clone(), report));
        }
    }
    let mut warnings = Vec::new();
    let mut verdicts = Vec::new();
    let clip_ref = visual_ref(&meta.video_id, &meta.clip_id);

    // successor[f][i] = index in frame f+1 linked to node i of frame f
    let mut predecessor: Vec<Vec<Option<usize>>> =
        frames.iter().map(|f| vec![None; f.nodes.len()]).collect();
    for f in 1..frames.len() {
        let prev = &frames[f - 1];
        let cur = &frames[f];
        let mut claimed: HashSet<usize> = HashSet::new();
        for (i, node) in cur.nodes.iter().enumerate() {
            let mut candidates: Vec<(usize, &ObjectNode)> = prev
                .nodes
                .iter()
                .enumerate()
                .filter(|(j, p)| {
                    !claimed.contains(j)
                        && labels_compatible(&p.label, &node.label, options.label_overlap)
                })
                .collect();
            candidates.sort_by_key(|(j, p)| {
                (
                    p.label != node.label,
                    p.instance_index != node.instance_index,
                    *j,
                )
            });
            for (j, p) in candidates {
                let pair = (
                    Occurrence {
                        scope: prev.keyframe_id.clone(),
                        node_id: p.id.clone(),
                    },
                    Occurrence {
                        scope: cur.keyframe_id.clone(),
                        node_id: node.id.clone(),
                    },
                );
                let (same, source) = if options.model_identity {
                    let req = ModelRequest::new("frame_identity")
                        .bind("first", identity_phrase(p))
                        .bind("second", identity_phrase(node))
                        .image(&clip_ref);
                    match ask_yes_no(gateway, req, options.retries) {
                        Answer::Yes => (true, VerdictSource::Model),
                        Answer::No => (false, VerdictSource::Model),
                        Answer::Failed(reason) => {
                            warnings.push(Warning::new(
                                format!("{} ~ {}", p.id, node.id),
                                FLAG_IDENTITY_FAILED,
                                reason,
                            ));
                            (false, VerdictSource::LabelHeuristic)
                        }
                    }
                } else {
                    (p.label == node.label, VerdictSource::LabelHeuristic)
                };
                verdicts.push(IdentityVerdict { pair, same, source });
                if same {
                    claimed.insert(j);
                    predecessor[f][i] = Some(j);
                    break;
                }
            }
        }
    }

    // chains in order of first appearance
    let mut chain_of: HashMap<(usize, usize), usize> = HashMap::new();
    let mut chains: Vec<Chain> = Vec::new();
    for (f, links) in predecessor.iter().enumerate() {
        for (i, link) in links.iter().enumerate() {
            let chain = match *link {
                Some(j) => chain_of[&(f - 1, j)],
                None => {
                    chains.push(Chain {
                        members: Vec::new(),
                    });
                    chains.len() - 1
                }
            };
            chains[chain].members.push((f, i));
            chain_of.insert((f, i), chain);
        }
    }

    let mut next_index: BTreeMap<String, u32> = BTreeMap::new();
    let mut nodes: Vec<ObjectNode> = Vec::new();
    for chain in &chains {
        let (f0, i0) = chain.members[0];
        let first = &frames[f0].nodes[i0];
        let index = next_index.entry(first.label.clone()).or_insert(0);
        *index += 1;
        let mut node = ObjectNode {
            id: node_id(&meta.video_id, &meta.clip_id, &first.label, *index),
            instance_index: *index,
            anchors: Vec::new(),
            attributes: Vec::new(),
            flags: Vec::new(),
            ..first.clone()
        };
        for &(f, i) in &chain.members {
            let member = &frames[f].nodes[i];
            if member.mobility == Mobility::Dynamic {
                node.mobility = Mobility::Dynamic;
            }
            if node.unique_attribute.is_empty() {
                node.unique_attribute = member.unique_attribute.clone();
            }
            for a in &member.attributes {
                if !node.attributes.contains(a) {
                    node.attributes.push(a.clone());
                }
            }
            for anchor in &member.anchors {
                if !node.anchors.contains(anchor) {
                    node.anchors.push(anchor.clone());
                }
            }
            for flag in &member.flags {
                if !node.flags.contains(flag) {
                    node.flags.push(flag.clone());
                }
            }
        }
        nodes.push(node);
    }
    let new_id = |f: usize, i: usize| nodes[chain_of[&(f, i)]].id.clone();

    let mut relations: Vec<RelationEdge> = Vec::new();
    let mut seen: HashSet<(String, String, String)> = HashSet::new();
    for (f, frame) in frames.iter().enumerate() {
        let index: HashMap<&str, usize> = frame
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        for rel in &frame.relations {
            let subject_id = new_id(f, index[rel.subject_id.as_str()]);
            let object_id = new_id(f, index[rel.object_id.as_str()]);
            if seen.insert((subject_id.clone(), rel.predicate.clone(), object_id.clone())) {
                relations.push(RelationEdge {
                    subject_id,
                    object_id,
                    ..rel.clone()
                });
            }
        }
    }

    let mut motions = Vec::new();
    for (c, chain) in chains.iter().enumerate() {
        let node = &nodes[c];
        if node.mobility != Mobility::Dynamic || chain.members.len() < 2 {
            continue;
        }
        let (fa, ia) = chain.members[0];
        let (fb, ib) = *chain.members.last().unwrap();
        let interval = Interval::new(frames[fa].timestamp, frames[fb].timestamp);
        if interval.is_degenerate() {
            warnings.push(Warning::new(&node.id, "motion-degenerate", ""));
            continue;
        }
        match action_chain(
            gateway,
            &clip_ref,
            &frames[fa].nodes[ia],
            &frames[fb].nodes[ib],
            options.retries,
        ) {
            Ok((predicate, object)) => {
                let target_id = object.as_deref().and_then(|o| {
                    let target = resolve_object(o, &nodes, Some(&node.id)).map(|t| t.id.clone());
                    if target.is_none() {
                        warnings.push(Warning::new(&node.id, "motion-target-unresolved", o));
                    }
                    target
                });
                motions.push(MotionEdge {
                    object_id: node.id.clone(),
                    predicate,
                    target_id,
                    interval,
                });
            }
            Err(reason) => warnings.push(Warning::new(&node.id, "motion-skipped", reason)),
        }
    }

    let clip = ClipGraph {
        clip_id: meta.clip_id.clone(),
        frame_range: meta.frame_range,
        span: meta.span,
        nodes,
        relations,
        motions,
        event: None,
    };
    let report = validate_clip(&clip);
    if !report.is_valid() {
        return Err(InductError::InvalidClip(clip.clip_id, report));
    }
    Ok(Outcome {
        value: Induced {
            value: clip,
            verdicts,
        },
        warnings,
    })
}

/// describe action -> extract action -> extract predicate and object.
fn action_chain(
    gateway: &ModelGateway,
    clip_ref: &str,
    first: &ObjectNode,
    last: &ObjectNode,
    retries: u32,
) -> Result<(String, Option<String>), String> {
    let describe = ModelRequest::new("action_describe")
        .bind("first", identity_phrase(first))
        .bind("second", identity_phrase(last))
        .image(clip_ref);
    let sentence = clean_sentence(&gateway.ask(&describe).map_err(|e| e.to_string())?);
    if sentence.is_empty() {
        return Err("empty action description".into());
    }
    let extract = ModelRequest::new("action_extract")
        .bind("sentence", &sentence)
        .bind("object", &first.label);
    let action = match ask_payload(gateway, extract, PayloadKind::Action, retries)? {
        ParsedPayload::Action(a) => a,
        _ => unreachable!(),
    };
    let predicate = ModelRequest::new("predicate_extract").bind("action", &action);
    match ask_payload(gateway, predicate, PayloadKind::PredicateObject, retries)? {
        ParsedPayload::PredicateObject { predicate, object } => Ok((predicate, object)),
        _ => unreachable!(),
    }
}

/// Attach a one-sentence event description spanning the clip bounds.
pub fn attach_event(
    clip: &ClipGraph,
    video_id: &str,
    gateway: &ModelGateway,
) -> Outcome<ClipGraph> {
    let mut out = Outcome::new(clip.clone());
    if clip.nodes.is_empty() {
        out.warnings.push(Warning::new(
            &clip.clip_id,
            "eventless",
            "clip has no nodes",
        ));
        return out;
    }
    if clip.span.is_degenerate() {
        out.warnings.push(Warning::new(
            &clip.clip_id,
            "eventless",
            "degenerate clip span",
        ));
        return out;
    }
    let mut labels: Vec<&str> = Vec::new();
    for n in &clip.nodes {
        if !labels.contains(&n.label.as_str()) {
            labels.push(&n.label);
        }
    }
    let request = ModelRequest::new("event_describe")
        .bind("objects", format!("[{}]", labels.join(", ")))
        .image(visual_ref(video_id, &clip.clip_id));
    match gateway.ask(&request) {
        Ok(text) => {
            let description = text
                .trim()
                .trim_start_matches('[')
                .trim_end_matches(']')
                .trim();
            if description.is_empty() {
                out.warnings.push(Warning::new(
                    &clip.clip_id,
                    "eventless",
                    "empty description",
                ));
            } else {
                out.value.event = Some(EventEdge {
                    clip_id: clip.clip_id.clone(),
                    description: description.to_string(),
                    interval: clip.span,
                });
            }
        }
        Err(e) => out
            .warnings
            .push(Warning::new(&clip.clip_id, "eventless", e.to_string())),
    }
    out
}

/// Add reference edges between same-object nodes of different clips.
/// Pairs already linked are skipped, so bridging a bridged graph adds nothing.
pub fn bridge_into(
    stsg: &mut SpatioTemporalSceneGraph,
    gateway: &ModelGateway,
    options: &InductOptions,
) -> Outcome<Vec<IdentityVerdict>> {
    let mut out = Outcome::new(Vec::new());
    let mut existing: HashSet<(NodeRef, NodeRef)> = stsg
        .references
        .iter()
        .map(ReferenceEdge::unordered_key)
        .collect();
    let n = stsg.clips.len();
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if options.all_pairs || b == a + 1 {
                pairs.push((a, b));
            }
        }
    }
    let mut added = Vec::new();
    for (a, b) in pairs {
        let (ca, cb) = (&stsg.clips[a], &stsg.clips[b]);
        for na in &ca.nodes {
            for nb in &cb.nodes {
                if !labels_compatible(&na.label, &nb.label, options.label_overlap) {
                    continue;
                }
                let edge = ReferenceEdge {
                    from: NodeRef::new(&ca.clip_id, &na.id),
                    to: NodeRef::new(&cb.clip_id, &nb.id),
                };
                if existing.contains(&edge.unordered_key()) {
                    continue;
                }
                let pair = (
                    Occurrence {
                        scope: ca.clip_id.clone(),
                        node_id: na.id.clone(),
                    },
                    Occurrence {
                        scope: cb.clip_id.clone(),
                        node_id: nb.id.clone(),
                    },
                );
                let (same, source) = if options.model_identity {
                    let mut request = ModelRequest::new("clip_identity")
                        .bind("first", identity_phrase(na))
                        .bind("second", identity_phrase(nb));
                    for node in [na, nb] {
                        if let Some(anchor) = node.anchors.first() {
                            request =
                                request.image(visual_ref(&stsg.video_id, &anchor.keyframe_id));
                        }
                    }
                    match ask_yes_no(gateway, request, options.retries) {
                        Answer::Yes => (true, VerdictSource::Model),
                        Answer::No => (false, VerdictSource::Model),
                        Answer::Failed(reason) => {
                            out.warnings.push(Warning::new(
                                format!("{} ~ {}", na.id, nb.id),
                                FLAG_IDENTITY_FAILED,
                                reason,
                            ));
                            (false, VerdictSource::LabelHeuristic)
                        }
                    }
                } else {
                    (na.label == nb.label, VerdictSource::LabelHeuristic)
                };
                out.value.push(IdentityVerdict { pair, same, source });
                if same {
                    existing.insert(edge.unordered_key());
                    added.push(edge);
                }
            }
        }
    }
    stsg.references.extend(added);
    out
}

/// Assemble clips into one graph and bridge them.
pub fn bridge_clips(
    video_id: &str,
    clips: Vec<ClipGraph>,
    gateway: &ModelGateway,
    options: &InductOptions,
) -> Result<Outcome<Induced<SpatioTemporalSceneGraph>>, InductError> {
    for clip in &clips {
        let report = validate_clip(clip);
        if !report.is_valid() {
            return Err(InductError::InvalidClip(clip.clip_id.clone(), report));
        }
    }
    let mut stsg = SpatioTemporalSceneGraph::new(video_id);
    stsg.clips = clips;
    let bridged = bridge_into(&mut stsg, gateway, options);
    let report = validate(&stsg);
    if !report.is_valid() {
        return Err(InductError::Invalid(report));
    }
    Ok(Outcome {
        value: Induced {
            value: stsg,
            verdicts: bridged.value,
        },
        warnings: bridged.warnings,
    })
}

/// Merge, describe and bridge every clip of one video.
pub fn induct_video(
    video_id: &str,
    clips: &[(ClipMeta, Vec<FrameSceneGraph>)],
    gateway: &ModelGateway,
    options: &InductOptions,
) -> Result<Outcome<Induced<SpatioTemporalSceneGraph>>, InductError> {
    use rayon::prelude::*;
    let merged: Vec<_> = clips
        .par_iter()
        .map(|(meta, frames)| {
            let merged = merge_clip(meta, frames, gateway, options)?;
            let evented = attach_event(&merged.value.value, video_id, gateway);
            let mut warnings = merged.warnings;
            warnings.extend(evented.warnings);
            Ok((evented.value, merged.value.verdicts, warnings))
        })
        .collect::<Result<_, InductError>>()?;
    let mut warnings = Vec::new();
    let mut verdicts = Vec::new();
    let mut graphs = Vec::new();
    for (clip, v, w) in merged {
        graphs.push(clip);
        verdicts.extend(v);
        warnings.extend(w);
    }
    let bridged = bridge_clips(video_id, graphs, gateway, options)?;
    warnings.extend(bridged.warnings);
    verdicts.extend(bridged.value.verdicts);
    Ok(Outcome {
        value: Induced {
            value: bridged.value.value,
            verdicts,
        },
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockFixture, MockRecordSpec};
    use crate::graph::{Anchor, AttributeEntry};

    fn record(pattern: &str, response: &str) -> MockRecordSpec {
        MockRecordSpec {
            pattern: Some(pattern.to_string()),
            response: response.to_string(),
            ..Default::default()
        }
    }

    fn gateway(records: Vec<MockRecordSpec>) -> ModelGateway {
        ModelGateway::mock(MockFixture {
            records,
            default: Some("Yes".into()),
        })
        .unwrap()
    }

    fn frame_node(label: &str, frame: usize, mobility: Mobility) -> ObjectNode {
        ObjectNode {
            id: node_id("v", "clip-000", label, 1),
            label: label.into(),
            instance_index: 1,
            unique_attribute: String::new(),
            mobility,
            attributes: vec![AttributeEntry::new("frame", frame.to_string())],
            anchors: vec![Anchor {
                keyframe_id: format!("clip-000/f{frame:06}"),
                timestamp: frame as f64,
            }],
            flags: vec![],
        }
    }

    fn meta() -> ClipMeta {
        ClipMeta {
            video_id: "v".into(),
            clip_id: "clip-000".into(),
            frame_range: FrameRange { start: 0, end: 10 },
            span: Interval::new(0.0, 10.0),
        }
    }

    #[test]
    fn single_frame_clip_is_unchanged() {
        let mut frame = FrameSceneGraph::empty("clip-000/f000000", 0.0);
        let a = frame_node("man", 0, Mobility::Dynamic);
        let b = frame_node("dock", 0, Mobility::Static);
        frame
            .relations
            .push(crate::graph::fixtures::relation(&a, "standing at", &b));
        frame.nodes = vec![a, b];
        let out = merge_clip(
            &meta(),
            std::slice::from_ref(&frame),
            &gateway(vec![]),
            &InductOptions::default(),
        )
        .unwrap();
        let clip = out.value.value;
        assert_eq!(clip.nodes, frame.nodes);
        assert_eq!(clip.relations, frame.relations);
        assert!(clip.motions.is_empty());
    }

    #[test]
    fn identity_denial_keeps_nodes_apart() {
        let frames: Vec<_> = (0..2)
            .map(|f| {
                let mut g = FrameSceneGraph::empty(format!("clip-000/f{f:06}"), f as f64);
                g.nodes.push(frame_node("box", f, Mobility::Static));
                g
            })
            .collect();
        let gw = gateway(vec![record("same object", "No")]);
        let clip = merge_clip(&meta(), &frames, &gw, &InductOptions::default())
            .unwrap()
            .value
            .value;
        let ids: Vec<_> = clip.nodes.iter().map(|n| n.id.as_str()).collect();
        assert_eq!(ids, ["v/clip-000/box#1", "v/clip-000/box#2"]);
    }

    #[test]
    fn event_failure_leaves_clip_eventless() {
        let clip = crate::graph::fixtures::dock_graph().clips[0].clone();
        let gw = ModelGateway::mock(MockFixture::default()).unwrap();
        let out = attach_event(
            &ClipGraph {
                event: None,
                ..clip
            },
            "dock",
            &gw,
        );
        assert!(out.value.event.is_none());
        assert_eq!(out.warnings[0].code, "eventless");
    }

    #[test]
    fn prefilter() {
        assert!(labels_compatible("woman", "woman", 0.5));
        assert!(labels_compatible("woman", "young woman", 0.5));
        assert!(!labels_compatible("woman", "box", 0.5));
    }
}
