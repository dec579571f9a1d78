//! Brute-force enumeration of every path the sampler can produce.
//!
//! Test-only: walks all initial pairs and all expansion choices over an
//! adjacency built here from the raw graph, independent of the sampler's
//! index and feasibility logic.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::graph::SpatioTemporalSceneGraph;
use crate::sample::{EdgeRef, GraphIndex, PathSignature, ReasoningPath, VertexRef};

pub const DEFAULT_NODE_CAP: usize = 12;
pub const MAX_STEPS: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("graph has {nodes} nodes, oracle cap is {cap}")]
    CapExceeded { nodes: usize, cap: usize },
    #[error("oracle supports at most {MAX_STEPS} steps, got {0}")]
    TooManySteps(usize),
}

struct Adjacency {
    vertices: Vec<VertexRef>,
    /// (edge, endpoint a, endpoint b)
    edges: Vec<(EdgeRef, usize, usize)>,
}

impl Adjacency {
    fn build(stsg: &SpatioTemporalSceneGraph) -> Self {
        let mut vertices = Vec::new();
        let mut edges = Vec::new();
        let position = |vertices: &Vec<VertexRef>, v: &VertexRef| {
            vertices.iter().position(|x| x == v).unwrap()
        };
        for clip in &stsg.clips {
            for node in &clip.nodes {
                vertices.push(VertexRef::Object {
                    clip_id: clip.clip_id.clone(),
                    node_id: node.id.clone(),
                });
            }
        }
        for clip in &stsg.clips {
            let obj = |id: &str| VertexRef::Object {
                clip_id: clip.clip_id.clone(),
                node_id: id.to_string(),
            };
            for (index, rel) in clip.relations.iter().enumerate() {
                let a = position(&vertices, &obj(&rel.subject_id));
                let b = position(&vertices, &obj(&rel.object_id));
                edges.push((
                    EdgeRef::Relation {
                        clip_id: clip.clip_id.clone(),
                        index,
                    },
                    a,
                    b,
                ));
            }
            for node in &clip.nodes {
                let owner = position(&vertices, &obj(&node.id));
                for index in 0..node.attributes.len() {
                    vertices.push(VertexRef::Attribute {
                        clip_id: clip.clip_id.clone(),
                        node_id: node.id.clone(),
                        index,
                    });
                    let leaf = vertices.len() - 1;
                    let edge = EdgeRef::Attribute {
                        clip_id: clip.clip_id.clone(),
                        node_id: node.id.clone(),
                        index,
                    };
                    edges.push((edge, owner, leaf));
                }
            }
            for (index, motion) in clip.motions.iter().enumerate() {
                let a = position(&vertices, &obj(&motion.object_id));
                let b = match &motion.target_id {
                    Some(t) => position(&vertices, &obj(t)),
                    None => {
                        vertices.push(VertexRef::Action {
                            clip_id: clip.clip_id.clone(),
                            motion: index,
                        });
                        vertices.len() - 1
                    }
                };
                edges.push((
                    EdgeRef::Motion {
                        clip_id: clip.clip_id.clone(),
                        index,
                    },
                    a,
                    b,
                ));
            }
        }
        for (index, r) in stsg.references.iter().enumerate() {
            let a = position(
                &vertices,
                &VertexRef::Object {
                    clip_id: r.from.clip_id.clone(),
                    node_id: r.from.node_id.clone(),
                },
            );
            let b = position(
                &vertices,
                &VertexRef::Object {
                    clip_id: r.to.clip_id.clone(),
                    node_id: r.to.node_id.clone(),
                },
            );
            edges.push((EdgeRef::Reference { index }, a, b));
        }
        Self { vertices, edges }
    }

    /// Every (edge, other endpoint) incident to `v`.
    fn incident(&self, v: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges
            .iter()
            .enumerate()
            .filter_map(move |(e, &(_, a, b))| {
                if a == v {
                    Some((e, b))
                } else if b == v {
                    Some((e, a))
                } else {
                    None
                }
            })
    }
}

/// Every terminal choice sequence: `(edge, focus, introduced)` per step.
fn walk(
    adj: &Adjacency,
    n: usize,
    q: usize,
    visited: &mut Vec<usize>,
    current: &mut Vec<(usize, usize, usize)>,
    out: &mut Vec<Vec<(usize, usize, usize)>>,
) {
    if current.len() == n {
        out.push(current.clone());
        return;
    }
    let options: Vec<(usize, usize)> = adj
        .incident(q)
        .filter(|(_, w)| !visited.contains(w))
        .collect();
    if options.is_empty() {
        out.push(current.clone());
        return;
    }
    for (e, w) in options {
        visited.push(w);
        current.push((e, q, w));
        walk(adj, n, w, visited, current, out);
        current.pop();
        visited.pop();
    }
}

pub fn enumerate_paths(
    stsg: &SpatioTemporalSceneGraph,
    n: usize,
) -> Result<Vec<ReasoningPath>, OracleError> {
    enumerate_paths_capped(stsg, n, DEFAULT_NODE_CAP)
}

pub fn enumerate_paths_capped(
    stsg: &SpatioTemporalSceneGraph,
    n: usize,
    cap: usize,
) -> Result<Vec<ReasoningPath>, OracleError> {
    let nodes = stsg.node_count();
    if nodes > cap {
        return Err(OracleError::CapExceeded { nodes, cap });
    }
    if n > MAX_STEPS {
        return Err(OracleError::TooManySteps(n));
    }
    Ok(enumerate_signatures(stsg, n)
        .into_iter()
        .map(|sig| {
            GraphIndex::new(stsg)
                .replay(&stsg.video_id, &sig, n, 0)
                .expect("oracle paths walk the graph")
        })
        .collect())
}

/// Signatures of every path the sampler may return, without the cap checks.
pub fn enumerate_signatures(stsg: &SpatioTemporalSceneGraph, n: usize) -> BTreeSet<PathSignature> {
    let adj = Adjacency::build(stsg);
    if n == 0 {
        return BTreeSet::new();
    }
    let mut terminal = Vec::new();
    for (e, &(_, a, b)) in adj.edges.iter().enumerate() {
        for (u, v) in [(a, b), (b, a)] {
            let mut visited = vec![u, v];
            let mut current = vec![(e, v, u)];
            walk(&adj, n, u, &mut visited, &mut current, &mut terminal);
        }
    }
    let longest = terminal.iter().map(Vec::len).max().unwrap_or(0);
    terminal
        .into_iter()
        .filter(|seq| seq.len() == longest)
        .map(|seq| {
            seq.into_iter()
                .map(|(e, f, w)| {
                    (
                        adj.edges[e].0.clone(),
                        adj.vertices[f].clone(),
                        adj.vertices[w].clone(),
                    )
                })
                .collect()
        })
        .collect()
}
