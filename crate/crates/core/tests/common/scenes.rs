//! Hand-built frames and clips shared by the induction checks.

use stsg_core::gateway::{MockRecordSpec, ModelGateway};
use stsg_core::graph::{FrameRange, Interval, Mobility};
use stsg_core::induct::ClipMeta;
use stsg_core::{ClipGraph, FrameSceneGraph};

use super::build::{clip, frame, node, relation, with_attrs};
use super::{mock, record};

pub fn meta(clip_id: &str, span: (f64, f64)) -> ClipMeta {
    ClipMeta {
        video_id: "v".into(),
        clip_id: clip_id.into(),
        frame_range: FrameRange {
            start: (span.0 * 2.0) as usize,
            end: (span.1 * 2.0) as usize,
        },
        span: Interval::new(span.0, span.1),
    }
}

/// Three frames in which a wooden dock appears each time (as instance 2 in
/// the middle frame, next to a stone dock) with a gateway confirming only
/// the wooden pairs.
pub fn static_dock() -> (Vec<FrameSceneGraph>, ModelGateway) {
    let wooden = |i| node("v", "clip-000", "dock", i, Mobility::Static);
    let mut stone = node("v", "clip-000", "dock", 1, Mobility::Static);
    stone.unique_attribute = "made of stone".into();
    let mut dock = wooden(1);
    dock.unique_attribute = "made of wood".into();
    let mut dock2 = wooden(2);
    dock2.unique_attribute = "made of wood".into();
    let man = node("v", "clip-000", "man", 1, Mobility::Static);

    let f1 = frame(
        "clip-000/f000000",
        0.0,
        &[man.clone(), dock.clone()],
        &[relation(&man, "standing at", &dock)],
    );
    // the wooden dock is instance 2 here, so its edges must be re-pointed
    let f2 = frame(
        "clip-000/f000010",
        5.0,
        &[man.clone(), stone.clone(), dock2.clone()],
        &[
            relation(&man, "standing at", &dock2),
            relation(&man, "next to", &stone),
        ],
    );
    let f3 = frame(
        "clip-000/f000020",
        10.0,
        &[man.clone(), dock.clone()],
        &[relation(&man, "looking at", &dock)],
    );

    let gw = mock(vec![
        record(
            r"dock made of wood in the first half and dock made of wood in the second half",
            "Yes",
        ),
        record(
            r"dock made of \w+ in the first half and dock made of \w+ in the second half",
            "No",
        ),
        record(
            r"determine if man in the first half and man in the second half",
            "Yes",
        ),
    ]);
    (vec![f1, f2, f3], gw)
}

pub fn kneeling_woman_frames() -> Vec<FrameSceneGraph> {
    let walking = with_attrs(
        node("v", "clip-000", "woman", 1, Mobility::Dynamic),
        &[("status", "walking on the dock")],
    );
    let kneeling = with_attrs(
        node("v", "clip-000", "woman", 1, Mobility::Dynamic),
        &[("status", "kneeling on the dock")],
    );
    let dock = node("v", "clip-000", "dock", 1, Mobility::Static);
    vec![
        frame("clip-000/f000002", 1.0, &[walking, dock.clone()], &[]),
        frame("clip-000/f000016", 8.0, &[kneeling, dock], &[]),
    ]
}

pub fn falling_records(identity: &str) -> Vec<MockRecordSpec> {
    let esc = |s: &str| regex::escape(s);
    vec![
        record(
            &esc("For the given video, determine if woman walking on the dock in the first half and woman kneeling on the dock in the second half are the same object. Just output 'Yes' or 'No'."),
            identity,
        ),
        record(r"determine if dock in the first half and dock in the second half", "Yes"),
        record(
            &esc("Given the same object woman walking on the dock in the first half video and woman kneeling on the dock in the second half video, describe the action of this object in the video."),
            "[The woman fell down on the dock.]",
        ),
        record(
            &esc("Question: Given the sentence \"The woman fell down on the dock,\" extract meaningful action for the object \"woman\"."),
            "[[\"action\":\"falling down on the dock\"]]",
        ),
        record(
            &esc("Question: Given the action \"falling down on the dock\", extract the predicate and object."),
            "[[\"predicate\":\"falling down on\", \"object\":\"dock\"]]",
        ),
    ]
}

pub fn two_clips() -> Vec<ClipGraph> {
    let w1 = with_attrs(
        node("v", "clip-000", "woman", 1, Mobility::Dynamic),
        &[("status", "walking on the dock")],
    );
    let d1 = node("v", "clip-000", "dock", 1, Mobility::Static);
    let w2 = with_attrs(
        node("v", "clip-001", "woman", 1, Mobility::Dynamic),
        &[("status", "sitting on the blanket")],
    );
    let b2 = node("v", "clip-001", "blanket", 1, Mobility::Static);
    vec![
        clip(
            "clip-000",
            (0.0, 12.0),
            vec![w1.clone(), d1.clone()],
            vec![relation(&w1, "walking on", &d1)],
        ),
        clip(
            "clip-001",
            (12.0, 20.0),
            vec![w2.clone(), b2.clone()],
            vec![relation(&w2, "sitting on", &b2)],
        ),
    ]
}
