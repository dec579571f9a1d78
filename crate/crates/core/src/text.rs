//! Small text helpers shared by the parsing, bridging and rendering stages.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

/// Lowercased alphanumeric tokens.
pub fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Jaccard overlap of normalized token sets, in `[0, 1]`.
pub fn token_overlap(a: &str, b: &str) -> f64 {
    let ta = tokens(a);
    let tb = tokens(b);
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    let inter = ta.intersection(&tb).count() as f64;
    let union = ta.union(&tb).count() as f64;
    inter / union
}

/// Uppercase the first character.
pub fn capitalize(text: &str) -> String {
    let mut chars = text.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Lowercase the first character.
pub fn decapitalize(text: &str) -> String {
    let mut chars = text.chars();
    match chars.next() {
        Some(first) => first.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Seconds rendered with at most two decimals and no trailing zeros.
pub fn format_seconds(t: f64) -> String {
    let s = format!("{t:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

const PERSON_WORDS: &[&str] = &[
    "man", "woman", "person", "people", "boy", "girl", "child", "children", "kid", "lady", "guy",
    "men", "women", "baby", "player", "worker", "adult", "teenager", "student",
];

/// Whether a label names a person (drives who/what phrasing).
pub fn is_person(label: &str) -> bool {
    label
        .split_whitespace()
        .last()
        .map(|w| PERSON_WORDS.contains(&w.to_lowercase().as_str()))
        .unwrap_or(false)
}

/// Replace typographic quotes with ASCII ones.
pub fn normalize_quotes(text: &str) -> String {
    text.chars()
        .map(|c| match c {
            '\u{201c}' | '\u{201d}' | '\u{201e}' | '\u{2033}' => '"',
            '\u{2018}' | '\u{2019}' => '\'',
            c => c,
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_cases() {
        assert_eq!(token_overlap("woman", "the woman"), 0.5);
        assert_eq!(token_overlap("Woman", "woman"), 1.0);
        assert_eq!(token_overlap("box", "basket"), 0.0);
    }

    #[test]
    fn seconds_format() {
        assert_eq!(format_seconds(0.0), "0");
        assert_eq!(format_seconds(12.0), "12");
        assert_eq!(format_seconds(12.5), "12.5");
        assert_eq!(format_seconds(1.0 / 3.0), "0.33");
    }

    #[test]
    fn persons() {
        assert!(is_person("man"));
        assert!(is_person("young woman"));
        assert!(!is_person("dock"));
    }
}
