use stsg_core::graph::{AttributeEntry, Mobility};
use stsg_core::parse::{ParsedPayload, PayloadKind, Triplet};

pub fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

pub fn triplet(s: &str, p: &str, o: &str) -> Triplet {
    Triplet {
        subject: s.into(),
        predicate: p.into(),
        object: o.into(),
    }
}

pub fn attrs(pairs: &[(&str, &str)]) -> Vec<AttributeEntry> {
    pairs
        .iter()
        .map(|(k, v)| AttributeEntry::new(*k, *v))
        .collect()
}

/// Every reference model answer together with the payload it must parse to.
pub fn golden_cases() -> Vec<(PayloadKind, &'static str, ParsedPayload)> {
    use ParsedPayload as P;
    use PayloadKind as K;
    vec![
        (
            K::ObjectList,
            "Meaningful objects are [man, woman, box, dock].",
            P::ObjectList(strings(&["man", "woman", "box", "dock"])),
        ),
        (
            K::ObjectList,
            "[Meaningful objects are [man, woman, box, dock].]",
            P::ObjectList(strings(&["man", "woman", "box", "dock"])),
        ),
        (
            K::ObjectList,
            "Meaningful objects are [children, toys, yard].",
            P::ObjectList(strings(&["children", "toys", "yard"])),
        ),
        (
            K::ObjectList,
            "Meaningful objects are [woman, dog, beach].",
            P::ObjectList(strings(&["woman", "dog", "beach"])),
        ),
        (
            K::ObjectList,
            "Meaningful objects are [cat, fence].",
            P::ObjectList(strings(&["cat", "fence"])),
        ),
        (
            K::QuantityBlock,
            "[Object: man\nQuantity: 1\n1. man1: wearing a light-colored shirt and shorts]",
            P::QuantityBlock {
                object: "man".into(),
                quantity: 1,
                instances: strings(&["wearing a light-colored shirt and shorts"]),
            },
        ),
        (K::Mobility, "[Dynamic]", P::Mobility(Mobility::Dynamic)),
        (K::Mobility, "Dynamic", P::Mobility(Mobility::Dynamic)),
        (
            K::AttributeMap,
            "[[\"object\":\"man\", \"attributes\":\n[\"clothing\":\"white shirt\", \n\"clothing\":\"grey shorts\", \"status\":\"standing\"]]]",
            P::AttributeMap {
                object: "man".into(),
                attributes: attrs(&[("clothing", "white shirt"), ("clothing", "grey shorts"), ("status", "standing")]),
            },
        ),
        (
            K::AttributeMap,
            "[\u{201c}object\u{201d}:\u{201c}woman\u{201d}, \u{201c}attributes\":[\u{201c}hair\u{201d}:\n\u{201c}long and blonde\u{201d}, \u{201c}status\u{201d}:\u{201c}sitting\u{201d}]]",
            P::AttributeMap {
                object: "woman".into(),
                attributes: attrs(&[("hair", "long and blonde"), ("status", "sitting")]),
            },
        ),
        (
            K::AttributeMap,
            "[\"object\":\"man\", \"attributes\":[\"height\":\n\"tall\", \"clothing\":\"red jacket\", \"action\":\n\"walking\"]]",
            P::AttributeMap {
                object: "man".into(),
                attributes: attrs(&[("height", "tall"), ("clothing", "red jacket"), ("action", "walking")]),
            },
        ),
        (
            K::AttributeMap,
            "[\"object\":\"car\", \"attributes\":[\"color\":\"blue\", \"status\":\"parked\"]]",
            P::AttributeMap {
                object: "car".into(),
                attributes: attrs(&[("color", "blue"), ("status", "parked")]),
            },
        ),
        (
            K::TripletList,
            "Meaningful triplets are <bread, covered with, sour cream>, <bread, covered with, guacamole>.",
            P::TripletList(vec![
                triplet("bread", "covered with", "sour cream"),
                triplet("bread", "covered with", "guacamole"),
            ]),
        ),
        (
            K::TripletList,
            "Meaningful triplets are <clock, sitting on, floor>, <clock, next to, feet>.",
            P::TripletList(vec![triplet("clock", "sitting on", "floor"), triplet("clock", "next to", "feet")]),
        ),
        (
            K::TripletList,
            "Meaningful triplets are <person, sits in, chair>, <person, looking at, phone>, <person, rests on, couch>.",
            P::TripletList(vec![
                triplet("person", "sits in", "chair"),
                triplet("person", "looking at", "phone"),
                triplet("person", "rests on", "couch"),
            ]),
        ),
        (
            K::TripletList,
            "[Meaningful triplets are <man, standing at, the end of dock>, <man, waiting for, woman>]",
            P::TripletList(vec![
                triplet("man", "standing at", "the end of dock"),
                triplet("man", "waiting for", "woman"),
            ]),
        ),
        (
            K::Action,
            "[[\"action\":\"falling down on the dock\"]]",
            P::Action("falling down on the dock".into()),
        ),
        (
            K::Action,
            "[\"action\":\"walking on the street\"]",
            P::Action("walking on the street".into()),
        ),
        (
            K::Action,
            "[\"action\": \"chasing the ball in the park\"]",
            P::Action("chasing the ball in the park".into()),
        ),
        (
            K::PredicateObject,
            "[[\"predicate\":\"falling down on\", \"object\":\"dock\"]]",
            P::PredicateObject {
                predicate: "falling down on".into(),
                object: Some("dock".into()),
            },
        ),
        (
            K::PredicateObject,
            "[\"predicate\":\"walking\", \"object\"\n:\"None\"]",
            P::PredicateObject {
                predicate: "walking".into(),
                object: None,
            },
        ),
        (
            K::PredicateObject,
            "[\"predicate\":\"jumping on\", \"object\":\n\"bed\"]",
            P::PredicateObject {
                predicate: "jumping on".into(),
                object: Some("bed".into()),
            },
        ),
        (
            K::PredicateObject,
            "[\"predicate\":\"sitting on\", \"object\":\n\"chair\"]",
            P::PredicateObject {
                predicate: "sitting on".into(),
                object: Some("chair".into()),
            },
        ),
        (K::YesNo, "[Yes]", P::YesNo(true)),
        (K::YesNo, "No", P::YesNo(false)),
        (K::YesNo, "yes", P::YesNo(true)),
        (
            K::RefinedQRA,
            r#"{"Q":"Who is the person at the end of the dock waiting for?","R":"Step 1: ... Step 2: ...","A":"the woman"}"#,
            P::RefinedQRA {
                q: "Who is the person at the end of the dock waiting for?".into(),
                r: "Step 1: ... Step 2: ...".into(),
                a: "the woman".into(),
            },
        ),
    ]
}
