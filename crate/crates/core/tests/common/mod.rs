#![allow(dead_code)]

use std::path::PathBuf;

use stsg_core::gateway::{MockFixture, MockRecordSpec, ModelGateway};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn record(pattern: &str, response: &str) -> MockRecordSpec {
    MockRecordSpec {
        pattern: Some(pattern.to_string()),
        response: response.to_string(),
        ..Default::default()
    }
}

pub fn record_for(pattern: &str, image: &str, response: &str) -> MockRecordSpec {
    MockRecordSpec {
        image: Some(image.to_string()),
        ..record(pattern, response)
    }
}

pub fn mock(records: Vec<MockRecordSpec>) -> ModelGateway {
    ModelGateway::mock(MockFixture {
        records,
        default: None,
    })
    .expect("valid mock fixture")
}

/// The reference keyframe conversation about the man, the woman, the box and
/// the dock, with every answer it leaves out filled in plainly.
pub fn dock_conversation() -> Vec<MockRecordSpec> {
    vec![
        record(
            r"Describe the keyframe of the video in one sentence",
            "[In the keyframe, a man and a woman carring a red box are on a dock.]",
        ),
        record(
            &regex::escape(
                "Question: Given the sentence \"A man and a woman carring a red box are on a dock,\" extract meaningful objects.\nAnswer:",
            ),
            "[Meaningful objects are [man, woman, box, dock].]",
        ),
        record(
            r"Given the object name: man, if there is more than one",
            "[Object: man\nQuantity: 1\n1. man1: wearing a light-colored shirt and shorts]",
        ),
        record(r"Given the object name: (\w+), if there is more than one", "Object: ${1}\nQuantity: 1"),
        record(r"Given the object: man, determine if it is a static object", "[Dynamic]"),
        record(r"determine if it is a static object", "Static"),
        record(
            r"Given the object: man, describe its attributes",
            "[The man is standing on a wooden dock, wearing a white shirt and grey shorts and looking out over a serene marshy area.]",
        ),
        record(
            &regex::escape(
                "Question: Given the sentence \"The man is standing on a wooden dock, wearing a white shirt and grey shorts and looking out over a serene marshy area.\" Extract meaningful attributes for the object \"man\"",
            ),
            "[[\"object\":\"man\", \"attributes\":\n[\"clothing\":\"white shirt\", \n\"clothing\":\"grey shorts\", \"status\":\"standing\"]]]",
        ),
        record(r"Given the object: (\w+), describe its attributes", "The ${1} is plain."),
        record(
            r#"Extract meaningful attributes for the object "(\w+)""#,
            r#"["object":"${1}", "attributes":[]]"#,
        ),
        record(
            r"Given the object: man in the provided image, describe all spatial or contact relationship between man and other objects \[woman, box, dock\] in the image",
            "[The man is standing at the end of a dock, waiting for the woman.]",
        ),
        record(
            r"Given the object: (\w+) in the provided image",
            "The ${1} has no clear contact with anything.",
        ),
        record(
            &regex::escape(
                "Question: Given the sentence \"The man is standing at the end of a dock, waiting for the woman,\" extract meaningful triplets for the given object man.",
            ),
            "[Meaningful triplets are <man, standing at, the end of dock>, <man, waiting for, woman>]",
        ),
        record(r"extract meaningful triplets for the given object \w+\.\nAnswer", "Meaningful triplets are none."),
        record(r"Just output 'Yes' or 'No'", "Yes"),
    ]
}

pub mod golden;
pub mod scenes;

pub mod build {
    use stsg_core::graph::{
        node_id, Anchor, AttributeEntry, ClipGraph, FrameRange, FrameSceneGraph, Interval,
        Mobility, ObjectNode, RelationEdge,
    };

    pub fn node(
        video: &str,
        clip: &str,
        label: &str,
        index: u32,
        mobility: Mobility,
    ) -> ObjectNode {
        ObjectNode {
            id: node_id(video, clip, label, index),
            label: label.to_string(),
            instance_index: index,
            unique_attribute: String::new(),
            mobility,
            attributes: Vec::new(),
            anchors: Vec::new(),
            flags: Vec::new(),
        }
    }

    pub fn with_attrs(mut node: ObjectNode, pairs: &[(&str, &str)]) -> ObjectNode {
        node.attributes = pairs
            .iter()
            .map(|(k, v)| AttributeEntry::new(*k, *v))
            .collect();
        node
    }

    pub fn relation(subject: &ObjectNode, predicate: &str, object: &ObjectNode) -> RelationEdge {
        RelationEdge {
            subject_id: subject.id.clone(),
            object_id: object.id.clone(),
            predicate: predicate.to_string(),
            timestamp: 0.0,
            keyframe_id: String::new(),
            flags: Vec::new(),
        }
    }

    /// A frame holding `nodes` anchored at this keyframe.
    pub fn frame(
        keyframe_id: &str,
        timestamp: f64,
        nodes: &[ObjectNode],
        relations: &[RelationEdge],
    ) -> FrameSceneGraph {
        let nodes = nodes
            .iter()
            .cloned()
            .map(|mut n| {
                n.anchors = vec![Anchor {
                    keyframe_id: keyframe_id.to_string(),
                    timestamp,
                }];
                n
            })
            .collect();
        let relations = relations
            .iter()
            .cloned()
            .map(|mut r| {
                r.keyframe_id = keyframe_id.to_string();
                r.timestamp = timestamp;
                r
            })
            .collect();
        FrameSceneGraph {
            keyframe_id: keyframe_id.to_string(),
            timestamp,
            nodes,
            relations,
        }
    }

    /// A clip graph whose nodes are anchored at one keyframe at `start`.
    pub fn clip(
        clip_id: &str,
        span: (f64, f64),
        nodes: Vec<ObjectNode>,
        relations: Vec<RelationEdge>,
    ) -> ClipGraph {
        let f = frame(&format!("{clip_id}/f000000"), span.0, &nodes, &relations);
        ClipGraph {
            clip_id: clip_id.to_string(),
            frame_range: FrameRange {
                start: (span.0 * 2.0) as usize,
                end: (span.1 * 2.0) as usize,
            },
            span: Interval::new(span.0, span.1),
            nodes: f.nodes,
            relations: f.relations,
            motions: Vec::new(),
            event: None,
        }
    }
}

pub mod random {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use stsg_core::graph::{
        EventEdge, Interval, Mobility, MotionEdge, NodeRef, ReferenceEdge, SpatioTemporalSceneGraph,
    };
    use stsg_core::sample::ReasoningPath;

    use super::build;

    const LABELS: [&str; 8] = ["man", "woman", "dog", "box", "dock", "car", "cup", "tree"];
    const PREDICATES: [&str; 5] = ["near", "holding", "on", "behind", "looking at"];

    /// A valid graph with at most `max_nodes` object nodes spread over 1 to 3
    /// clips, with random attributes, relations, motions, events and references.
    pub fn graph(seed: u64, max_nodes: usize) -> SpatioTemporalSceneGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let video = "rand";
        let mut stsg = SpatioTemporalSceneGraph::new(video);
        let total = rng.random_range(0..=max_nodes);
        let clips = rng.random_range(1..=3usize);
        let mut left = total;
        for c in 0..clips {
            let clip_id = format!("clip-{c:03}");
            let count = if c + 1 == clips {
                left
            } else {
                rng.random_range(0..=left)
            };
            left -= count;
            let mut seen = std::collections::BTreeMap::<&str, u32>::new();
            let mut nodes = Vec::new();
            for _ in 0..count {
                let label = LABELS[rng.random_range(0..LABELS.len())];
                let idx = seen.entry(label).or_insert(0);
                *idx += 1;
                let mobility = if rng.random_bool(0.4) {
                    Mobility::Dynamic
                } else {
                    Mobility::Static
                };
                let mut n = build::node(video, &clip_id, label, *idx, mobility);
                for a in 0..rng.random_range(0..=2usize) {
                    n.attributes.push(stsg_core::graph::AttributeEntry::new(
                        ["color", "size", "status"][a % 3],
                        ["red", "small", "sitting"][rng.random_range(0..3usize)],
                    ));
                }
                nodes.push(n);
            }
            let mut relations = Vec::new();
            if nodes.len() >= 2 {
                for _ in 0..rng.random_range(0..=nodes.len() + 1) {
                    let a = rng.random_range(0..nodes.len());
                    let mut b = rng.random_range(0..nodes.len() - 1);
                    if b >= a {
                        b += 1;
                    }
                    let p = PREDICATES[rng.random_range(0..PREDICATES.len())];
                    relations.push(build::relation(&nodes[a], p, &nodes[b]));
                }
            }
            let start = c as f64 * 10.0;
            let mut clip = build::clip(&clip_id, (start, start + 10.0), nodes, relations);
            let dynamic: Vec<usize> = (0..clip.nodes.len())
                .filter(|&i| clip.nodes[i].mobility == Mobility::Dynamic)
                .collect();
            for &d in &dynamic {
                if rng.random_bool(0.5) {
                    let target = if clip.nodes.len() > 1 && rng.random_bool(0.5) {
                        let t =
                            (d + 1 + rng.random_range(0..clip.nodes.len() - 1)) % clip.nodes.len();
                        Some(clip.nodes[t].id.clone())
                    } else {
                        None
                    };
                    clip.motions.push(MotionEdge {
                        object_id: clip.nodes[d].id.clone(),
                        predicate: "walking to".into(),
                        target_id: target,
                        interval: Interval::new(start + 1.0, start + 5.0),
                    });
                }
            }
            if rng.random_bool(0.5) {
                clip.event = Some(EventEdge {
                    clip_id: clip_id.clone(),
                    description: format!("Something happens in {clip_id}."),
                    interval: Interval::new(start, start + 10.0),
                });
            }
            stsg.clips.push(clip);
        }
        let mut keys = std::collections::BTreeSet::new();
        for i in 0..stsg.clips.len() {
            for j in i + 1..stsg.clips.len() {
                let (a, b) = (&stsg.clips[i], &stsg.clips[j]);
                for na in &a.nodes {
                    for nb in &b.nodes {
                        if na.label == nb.label && rng.random_bool(0.7) {
                            let r = ReferenceEdge {
                                from: NodeRef::new(&a.clip_id, &na.id),
                                to: NodeRef::new(&b.clip_id, &nb.id),
                            };
                            if keys.insert(r.unordered_key()) {
                                stsg.references.push(r);
                            }
                        }
                    }
                }
            }
        }
        stsg
    }

    /// Every frontier rule a sampled path must obey, as a list of broken ones.
    pub fn frontier_violations(path: &ReasoningPath) -> Vec<String> {
        let mut out = Vec::new();
        if path.achieved_n != path.steps.len()
            || path.q_history.len() != path.achieved_n
            || path.a_history.len() != path.achieved_n
        {
            out.push("history length differs from achieved_n".to_string());
        }
        if path.achieved_n > path.requested_n {
            out.push("achieved_n exceeds requested_n".to_string());
        }
        if path.early_terminated != (path.achieved_n < path.requested_n) {
            out.push("early_terminated flag disagrees with counts".to_string());
        }
        for (i, (q, a)) in path.q_history.iter().zip(&path.a_history).enumerate() {
            if q.iter().any(|v| a.contains(v)) {
                out.push(format!("snapshot {i}: Q and A intersect"));
            }
            if a.len() != i + 1 {
                out.push(format!(
                    "snapshot {i}: |A| = {} instead of {}",
                    a.len(),
                    i + 1
                ));
            }
            if i > 0 && !a.starts_with(&path.a_history[i - 1]) {
                out.push(format!("snapshot {i}: A lost a member"));
            }
        }
        out
    }
}
