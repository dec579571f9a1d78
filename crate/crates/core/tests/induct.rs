mod common;

use common::build::{clip, frame, node, relation, with_attrs};
use common::scenes::{falling_records, kneeling_woman_frames, meta, static_dock, two_clips};
use common::{mock, record};
use stsg_core::graph::{validate, validate_clip, Mobility};
use stsg_core::induct::{
    attach_event, bridge_clips, bridge_into, induct_video, merge_clip, InductOptions,
    VerdictSource, FLAG_IDENTITY_FAILED,
};

#[test]
fn single_frame_clip_equals_its_frame() {
    let man = node("v", "clip-000", "man", 1, Mobility::Dynamic);
    let dock = node("v", "clip-000", "dock", 1, Mobility::Static);
    let f = frame(
        "clip-000/f000004",
        2.0,
        &[man.clone(), dock.clone()],
        &[relation(&man, "standing at", &dock)],
    );
    let gw = mock(vec![]);
    let out = merge_clip(
        &meta("clip-000", (0.0, 10.0)),
        std::slice::from_ref(&f),
        &gw,
        &InductOptions::default(),
    )
    .unwrap();
    let c = out.value.value;
    assert_eq!(c.nodes, f.nodes);
    assert_eq!(c.relations, f.relations);
    assert!(c.motions.is_empty());
    assert_eq!(gw.upstream_calls(), 0);
}

#[test]
fn static_dock_over_three_frames_becomes_one_node() {
    let (frames, gw) = static_dock();
    let out = merge_clip(
        &meta("clip-000", (0.0, 15.0)),
        &frames,
        &gw,
        &InductOptions::default(),
    )
    .unwrap();
    let c = out.value.value;
    assert!(validate_clip(&c).is_valid());

    let ids: Vec<&str> = c.nodes.iter().map(|n| n.id.as_str()).collect();
    assert_eq!(
        ids,
        ["v/clip-000/man#1", "v/clip-000/dock#1", "v/clip-000/dock#2"]
    );
    let three: Vec<_> = c.nodes.iter().filter(|n| n.anchors.len() == 3).collect();
    assert_eq!(three.len(), 2, "man and the wooden dock span all frames");
    let merged = c.node("v/clip-000/dock#1").unwrap();
    assert_eq!(merged.unique_attribute, "made of wood");
    let stamps: Vec<f64> = merged.anchors.iter().map(|a| a.timestamp).collect();
    assert_eq!(stamps, [0.0, 5.0, 10.0]);
    assert_eq!(
        c.node("v/clip-000/dock#2").unwrap().unique_attribute,
        "made of stone"
    );

    let rels: Vec<(&str, &str, &str)> = c.relations.iter().map(|r| r.triple()).collect();
    assert_eq!(
        rels,
        [
            ("v/clip-000/man#1", "standing at", "v/clip-000/dock#1"),
            ("v/clip-000/man#1", "next to", "v/clip-000/dock#2"),
            ("v/clip-000/man#1", "looking at", "v/clip-000/dock#1"),
        ]
    );
    assert!(c.motions.is_empty());
    assert!(out
        .value
        .verdicts
        .iter()
        .all(|v| v.source == VerdictSource::Model));
}

#[test]
fn dynamic_woman_gets_falling_motion() {
    let gw = mock(falling_records("[Yes]"));
    let out = merge_clip(
        &meta("clip-000", (0.0, 12.0)),
        &kneeling_woman_frames(),
        &gw,
        &InductOptions::default(),
    )
    .unwrap();
    let c = out.value.value;
    assert!(out.warnings.is_empty(), "{:?}", out.warnings);
    assert_eq!(c.nodes.len(), 2);
    assert_eq!(c.motions.len(), 1);
    let m = &c.motions[0];
    assert_eq!(m.object_id, "v/clip-000/woman#1");
    assert_eq!(m.predicate, "falling down on");
    assert_eq!(m.target_id.as_deref(), Some("v/clip-000/dock#1"));
    assert_eq!((m.interval.start, m.interval.end), (1.0, 8.0));
    assert!(m.interval.start < m.interval.end);
    let woman = c.node("v/clip-000/woman#1").unwrap();
    assert_eq!(woman.attributes.len(), 2);
}

#[test]
fn denied_identity_keeps_two_nodes_and_no_motion() {
    let gw = mock(falling_records("No"));
    let c = merge_clip(
        &meta("clip-000", (0.0, 12.0)),
        &kneeling_woman_frames(),
        &gw,
        &InductOptions::default(),
    )
    .unwrap()
    .value
    .value;
    let women: Vec<&str> = c
        .nodes
        .iter()
        .filter(|n| n.label == "woman")
        .map(|n| n.id.as_str())
        .collect();
    assert_eq!(women, ["v/clip-000/woman#1", "v/clip-000/woman#2"]);
    assert!(c.motions.is_empty());
}

#[test]
fn failed_identity_prompt_means_not_same_and_is_flagged() {
    let gw = mock(vec![record(r"determine if", "I can't see the video")]);
    let out = merge_clip(
        &meta("clip-000", (0.0, 12.0)),
        &kneeling_woman_frames(),
        &gw,
        &InductOptions::default(),
    )
    .unwrap();
    assert_eq!(out.value.value.nodes.len(), 4);
    assert!(out.warnings.iter().any(|w| w.code == FLAG_IDENTITY_FAILED));
    assert!(out.value.verdicts.iter().all(|v| !v.same));
}

#[test]
fn merge_never_grows_the_graph() {
    let frames = kneeling_woman_frames();
    let gw = mock(falling_records("Yes"));
    let c = merge_clip(
        &meta("clip-000", (0.0, 12.0)),
        &frames,
        &gw,
        &InductOptions::default(),
    )
    .unwrap()
    .value
    .value;
    let total: usize = frames.iter().map(|f| f.nodes.len()).sum();
    assert!(c.nodes.len() <= total);
    let rels: usize = frames.iter().map(|f| f.relations.len()).sum();
    assert!(c.relations.len() <= rels);
}

fn bridge_with(answer: &str) -> stsg_core::SpatioTemporalSceneGraph {
    let gw = mock(vec![record(
        &regex::escape("determine if woman walking on the dock in the first clip and woman sitting on the blanket in the second clip are the same object."),
        answer,
    )]);
    let out = bridge_clips("v", two_clips(), &gw, &InductOptions::default()).unwrap();
    assert!(validate(&out.value.value).is_valid());
    out.value.value
}

#[test]
fn cross_clip_yes_adds_one_reference() {
    let g = bridge_with("[Yes]");
    assert_eq!(g.references.len(), 1);
    let r = &g.references[0];
    assert_eq!(
        (r.from.clip_id.as_str(), r.from.node_id.as_str()),
        ("clip-000", "v/clip-000/woman#1")
    );
    assert_eq!(
        (r.to.clip_id.as_str(), r.to.node_id.as_str()),
        ("clip-001", "v/clip-001/woman#1")
    );
}

#[test]
fn cross_clip_no_adds_nothing() {
    assert!(bridge_with("No").references.is_empty());
}

#[test]
fn bridging_is_idempotent() {
    let mut g = bridge_with("Yes");
    let gw = mock(vec![record(r"Just output 'Yes' or 'No'", "Yes")]);
    bridge_into(&mut g, &gw, &InductOptions::default());
    assert_eq!(g.references.len(), 1);
    assert_eq!(gw.upstream_calls(), 0);
}

#[test]
fn single_clip_has_no_references() {
    let gw = mock(vec![record(r".", "Yes")]);
    let clips = two_clips().into_iter().take(1).collect();
    let g = bridge_clips("v", clips, &gw, &InductOptions::default())
        .unwrap()
        .value
        .value;
    assert!(g.references.is_empty());
}

#[test]
fn bridge_skips_incompatible_labels_and_failed_prompts() {
    let gw = mock(vec![]);
    let out = bridge_clips("v", two_clips(), &gw, &InductOptions::default()).unwrap();
    assert!(out.value.value.references.is_empty());
    assert!(out.warnings.iter().any(|w| w.code == FLAG_IDENTITY_FAILED));
    // only the woman pair passes the label prefilter
    assert_eq!(out.value.verdicts.len(), 1);
}

#[test]
fn events_span_their_clips() {
    let gw = mock(vec![
        common::record_for(
            r"Describe the main event",
            "clip-000$",
            "A woman falls on a dock.",
        ),
        common::record_for(
            r"Describe the main event",
            "clip-001$",
            "[A woman sits on a blanket.]",
        ),
    ]);
    let clips = two_clips();
    let first = attach_event(&clips[0], "v", &gw).value;
    let e = first.event.unwrap();
    assert_eq!(e.description, "A woman falls on a dock.");
    assert_eq!((e.interval.start, e.interval.end), (0.0, 12.0));
    let second = attach_event(&clips[1], "v", &gw).value.event.unwrap();
    assert_eq!(second.description, "A woman sits on a blanket.");
    assert_eq!((second.interval.start, second.interval.end), (12.0, 20.0));
}

#[test]
fn empty_clip_stays_eventless() {
    let empty = clip("clip-000", (0.0, 5.0), vec![], vec![]);
    let gw = mock(vec![record(r".", "Something happens.")]);
    let out = attach_event(&empty, "v", &gw);
    assert!(out.value.event.is_none());
    assert!(out.warnings.iter().any(|w| w.code == "eventless"));
}

#[test]
fn event_prompt_failure_leaves_clip_eventless() {
    let gw = mock(vec![]);
    let out = attach_event(&two_clips()[0], "v", &gw);
    assert!(out.value.event.is_none());
    assert_eq!(out.warnings[0].code, "eventless");
}

#[test]
fn whole_video_induction_validates() {
    let mut records = falling_records("Yes");
    records.push(record(
        r"Describe the main event",
        "A woman falls on a dock.",
    ));
    records.push(record(r"in the first clip", "Yes"));
    let gw = mock(records);
    let w = with_attrs(
        node("v", "clip-001", "woman", 1, Mobility::Dynamic),
        &[("status", "sitting")],
    );
    let clips = vec![
        (meta("clip-000", (0.0, 12.0)), kneeling_woman_frames()),
        (
            meta("clip-001", (12.0, 20.0)),
            vec![frame("clip-001/f000030", 15.0, &[w], &[])],
        ),
    ];
    let out = induct_video("v", &clips, &gw, &InductOptions::default()).unwrap();
    let g = out.value.value;
    assert!(validate(&g).is_valid());
    assert_eq!(g.clips.len(), 2);
    assert_eq!(g.clips[0].motions.len(), 1);
    assert!(g.clips.iter().all(|c| c.event.is_some()));
    assert_eq!(g.references.len(), 1);
}
