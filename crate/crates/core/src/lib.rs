//! Scene-graph induction and graph-guided QRA synthesis.
//!
//! The pipeline turns a frame-feature stream into clips and keyframes
//! ([`split`]), parses each keyframe into a frame scene graph through a
//! chat model ([`gateway`], [`parse`]), merges frames into clip graphs and
//! bridges clips into one spatio-temporal scene graph ([`induct`]), samples
//! multi-step reasoning paths over that graph ([`sample`]), renders them as
//! question / rationale / answer samples ([`synth`]) and exports supervision
//! records ([`dataset`]). [`pipeline`] sequences the stages with resume.

pub mod dataset;
pub mod gateway;
pub mod graph;
pub mod induct;
#[cfg(feature = "oracle")]
pub mod oracle;
pub mod parse;
pub mod pipeline;
pub mod sample;
pub mod split;
pub mod synth;
pub mod text;

use serde::{Deserialize, Serialize};

pub use graph::{
    ClipGraph, FrameSceneGraph, ObjectNode, SpatioTemporalSceneGraph, ValidationReport,
};

/// Engine version recorded in manifests.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// A non-fatal condition raised while processing one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    pub item: String,
    pub code: String,
    pub detail: String,
}

impl Warning {
    pub fn new(
        item: impl Into<String>,
        code: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        let warning = Self {
            item: item.into(),
            code: code.into(),
            detail: detail.into(),
        };
        log::warn!("{}: {} {}", warning.item, warning.code, warning.detail);
        warning
    }
}

/// A value together with the warnings raised while producing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome<T> {
    pub value: T,
    pub warnings: Vec<Warning>,
}

impl<T> Outcome<T> {
    pub fn new(value: T) -> Self {
        Self {
            value,
            warnings: Vec::new(),
        }
    }
}
