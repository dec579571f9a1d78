//! Multi-step reasoning path sampling over a spatio-temporal scene graph.
//!
//! The walk keeps a question frontier `Q` and an answer set `A`. The first
//! step picks a connected pair `(u, v)`, puts `u` in `Q` and `v` in `A`.
//! Each further step takes the node `q` in `Q`, picks a neighbor `w`
//! outside `Q ∪ A`, moves `q` to `A` and puts `w` in `Q`.
//!
//! Object nodes, attribute entries and the actions of target-less motions
//! are all walkable vertices. Choices are restricted to those from which the
//! path can still reach `min(n, longest achievable)` steps, so a request is
//! only cut short when the graph cannot support it at all.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{validate, Interval, SpatioTemporalSceneGraph, ValidationReport};
use crate::text::is_person;
use crate::{Outcome, Warning};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeKind {
    Relation,
    Attribute,
    Motion,
    Reference,
    Event,
}

impl EdgeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeKind::Relation => "relation",
            EdgeKind::Attribute => "attribute",
            EdgeKind::Motion => "motion",
            EdgeKind::Reference => "reference",
            EdgeKind::Event => "event",
        }
    }
}

/// A walkable vertex.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum VertexRef {
    Object {
        clip_id: String,
        node_id: String,
    },
    Attribute {
        clip_id: String,
        node_id: String,
        index: usize,
    },
    Action {
        clip_id: String,
        motion: usize,
    },
}

/// A walkable edge, addressed by position in the graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EdgeRef {
    Relation {
        clip_id: String,
        index: usize,
    },
    Attribute {
        clip_id: String,
        node_id: String,
        index: usize,
    },
    Motion {
        clip_id: String,
        index: usize,
    },
    Reference {
        index: usize,
    },
}

impl EdgeRef {
    pub fn kind(&self) -> EdgeKind {
        match self {
            EdgeRef::Relation { .. } => EdgeKind::Relation,
            EdgeRef::Attribute { .. } => EdgeKind::Attribute,
            EdgeRef::Motion { .. } => EdgeKind::Motion,
            EdgeRef::Reference { .. } => EdgeKind::Reference,
        }
    }
}

/// Text needed to talk about a vertex without the graph at hand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Surface {
    /// Object label, attribute value or action predicate.
    pub label: String,
    pub person: bool,
    pub clip_id: String,
}

/// Which endpoint of the edge the step's focus is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Relation subject, motion actor, attribute owner or reference source.
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub step_index: usize,
    pub edge: EdgeRef,
    pub edge_kind: EdgeKind,
    /// Vertex resolved by this step; for the first step, the final answer.
    pub focus_node: VertexRef,
    /// Vertex the step's question is phrased through.
    pub introduced_node: VertexRef,
    pub focus_role: Role,
    /// Relation or motion predicate, attribute kind, or `same as`.
    pub predicate: String,
    pub focus: Surface,
    pub introduced: Surface,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<Interval>,
    pub sub_question: String,
    pub sub_answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalContext {
    pub description: String,
    pub interval: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub video_id: String,
    pub steps: Vec<ReasoningStep>,
    /// Frontier sets after each step.
    pub q_history: Vec<Vec<VertexRef>>,
    pub a_history: Vec<Vec<VertexRef>>,
    #[serde(default)]
    pub temporal_context: Option<TemporalContext>,
    pub requested_n: usize,
    pub achieved_n: usize,
    pub early_terminated: bool,
    pub seed: u64,
}

/// Step identity used to compare paths: (edge, focus, introduced) per step.
pub type PathSignature = Vec<(EdgeRef, VertexRef, VertexRef)>;

impl ReasoningPath {
    pub fn signature(&self) -> PathSignature {
        self.steps
            .iter()
            .map(|s| {
                (
                    s.edge.clone(),
                    s.focus_node.clone(),
                    s.introduced_node.clone(),
                )
            })
            .collect()
    }

    /// Deepest step's sub-answer is resolved first; the first step answers the question.
    pub fn answer(&self) -> Option<&str> {
        self.steps.first().map(|s| s.sub_answer.as_str())
    }
}

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("no-edges: graph has no walkable edges")]
    NoEdges,
    #[error("input: requested step count must be at least 1")]
    ZeroSteps,
    #[error("invalid graph: {0}")]
    Invalid(ValidationReport),
    #[error("signature does not describe a path of this graph: {0}")]
    BadSignature(String),
}

#[derive(Debug, Clone)]
struct IndexedEdge {
    edge: EdgeRef,
    source: usize,
    target: usize,
    predicate: String,
    interval: Option<Interval>,
}

/// Walkable view of a graph.
#[derive(Debug, Clone)]
pub struct GraphIndex {
    vertices: Vec<VertexRef>,
    surfaces: Vec<Surface>,
    edges: Vec<IndexedEdge>,
    /// Per vertex: (neighbor, edge) in edge order.
    adjacency: Vec<Vec<(usize, usize)>>,
    lookup: std::collections::HashMap<VertexRef, usize>,
}

impl GraphIndex {
    pub fn new(stsg: &SpatioTemporalSceneGraph) -> Self {
        let mut index = GraphIndex {
            vertices: Vec::new(),
            surfaces: Vec::new(),
            edges: Vec::new(),
            adjacency: Vec::new(),
            lookup: Default::default(),
        };
        for clip in &stsg.clips {
            for node in &clip.nodes {
                index.add_vertex(
                    VertexRef::Object {
                        clip_id: clip.clip_id.clone(),
                        node_id: node.id.clone(),
                    },
                    Surface {
                        label: node.label.clone(),
                        person: is_person(&node.label),
                        clip_id: clip.clip_id.clone(),
                    },
                );
            }
        }
        for clip in &stsg.clips {
            let object = |id: &str| VertexRef::Object {
                clip_id: clip.clip_id.clone(),
                node_id: id.to_string(),
            };
            for (i, rel) in clip.relations.iter().enumerate() {
                let s = index.lookup[&object(&rel.subject_id)];
                let t = index.lookup[&object(&rel.object_id)];
                index.add_edge(IndexedEdge {
                    edge: EdgeRef::Relation {
                        clip_id: clip.clip_id.clone(),
                        index: i,
                    },
                    source: s,
                    target: t,
                    predicate: rel.predicate.clone(),
                    interval: None,
                });
            }
            for node in &clip.nodes {
                let owner = index.lookup[&object(&node.id)];
                for (i, attr) in node.attributes.iter().enumerate() {
                    let leaf = index.add_vertex(
                        VertexRef::Attribute {
                            clip_id: clip.clip_id.clone(),
                            node_id: node.id.clone(),
                            index: i,
                        },
                        Surface {
                            label: attr.value.clone(),
                            person: false,
                            clip_id: clip.clip_id.clone(),
                        },
                    );
                    index.add_edge(IndexedEdge {
                        edge: EdgeRef::Attribute {
                            clip_id: clip.clip_id.clone(),
                            node_id: node.id.clone(),
                            index: i,
                        },
                        source: owner,
                        target: leaf,
                        predicate: attr.kind.clone(),
                        interval: None,
                    });
                }
            }
            for (i, motion) in clip.motions.iter().enumerate() {
                let actor = index.lookup[&object(&motion.object_id)];
                let target = match &motion.target_id {
                    Some(t) => index.lookup[&object(t)],
                    None => index.add_vertex(
                        VertexRef::Action {
                            clip_id: clip.clip_id.clone(),
                            motion: i,
                        },
                        Surface {
                            label: motion.predicate.clone(),
                            person: false,
                            clip_id: clip.clip_id.clone(),
                        },
                    ),
                };
                index.add_edge(IndexedEdge {
                    edge: EdgeRef::Motion {
                        clip_id: clip.clip_id.clone(),
                        index: i,
                    },
                    source: actor,
                    target,
                    predicate: motion.predicate.clone(),
                    interval: Some(motion.interval),
                });
            }
        }
        for (i, reference) in stsg.references.iter().enumerate() {
            let vertex = |r: &crate::graph::NodeRef| VertexRef::Object {
                clip_id: r.clip_id.clone(),
                node_id: r.node_id.clone(),
            };
            let s = index.lookup[&vertex(&reference.from)];
            let t = index.lookup[&vertex(&reference.to)];
            index.add_edge(IndexedEdge {
                edge: EdgeRef::Reference { index: i },
                source: s,
                target: t,
                predicate: "same as".to_string(),
                interval: None,
            });
        }
        index
    }

    fn add_vertex(&mut self, vertex: VertexRef, surface: Surface) -> usize {
        let id = self.vertices.len();
        self.lookup.insert(vertex.clone(), id);
        self.vertices.push(vertex);
        self.surfaces.push(surface);
        self.adjacency.push(Vec::new());
        id
    }

    fn add_edge(&mut self, edge: IndexedEdge) {
        let id = self.edges.len();
        self.adjacency[edge.source].push((edge.target, id));
        self.adjacency[edge.target].push((edge.source, id));
        self.edges.push(edge);
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Distinct neighbors of `v` not yet visited, in first-seen order.
    fn open_neighbors(&self, v: usize, visited: &[bool]) -> Vec<usize> {
        let mut out = Vec::new();
        for &(w, _) in &self.adjacency[v] {
            if !visited[w] && !out.contains(&w) {
                out.push(w);
            }
        }
        out
    }

    fn edges_between(&self, a: usize, b: usize) -> Vec<usize> {
        self.adjacency[a]
            .iter()
            .filter(|(w, _)| *w == b)
            .map(|(_, e)| *e)
            .collect()
    }

    /// Ordered adjacent pairs `(u, v)`, in vertex then first-seen order.
    fn init_pairs(&self) -> Vec<(usize, usize)> {
        let none = vec![false; self.vertices.len()];
        (0..self.vertices.len())
            .flat_map(|u| {
                self.open_neighbors(u, &none)
                    .into_iter()
                    .map(move |v| (u, v))
            })
            .collect()
    }

    /// Longest walk extension from `q`, capped at `cap`.
    fn extension(&self, q: usize, visited: &mut [bool], cap: usize) -> usize {
        if cap == 0 {
            return 0;
        }
        let mut best = 0;
        for w in self.open_neighbors(q, visited) {
            visited[w] = true;
            best = best.max(1 + self.extension(w, visited, cap - 1));
            visited[w] = false;
            if best == cap {
                break;
            }
        }
        best
    }

    fn reaches(&self, q: usize, visited: &mut [bool], need: usize) -> bool {
        self.extension(q, visited, need) == need
    }

    /// Longest achievable path length, capped at `n`.
    pub fn max_length(&self, n: usize) -> usize {
        let mut visited = vec![false; self.vertices.len()];
        let mut best = 0;
        for (u, v) in self.init_pairs() {
            visited[u] = true;
            visited[v] = true;
            best = best.max(1 + self.extension(u, &mut visited, n.saturating_sub(1)));
            visited[u] = false;
            visited[v] = false;
            if best >= n {
                return n;
            }
        }
        best
    }

    fn step(
        &self,
        step_index: usize,
        edge: usize,
        focus: usize,
        introduced: usize,
    ) -> ReasoningStep {
        let e = &self.edges[edge];
        let focus_role = if e.source == focus {
            Role::Source
        } else {
            Role::Target
        };
        let fs = self.surfaces[focus].clone();
        let is = self.surfaces[introduced].clone();
        let sub_question = match (&e.edge, focus_role) {
            (EdgeRef::Motion { .. }, Role::Target)
                if matches!(self.vertices[focus], VertexRef::Action { .. }) =>
            {
                format!("<{}, action, ?>", is.label)
            }
            (EdgeRef::Reference { .. }, _) => {
                format!(
                    "<{} in {}, same as, ? in {}>",
                    is.label, is.clip_id, fs.clip_id
                )
            }
            (_, Role::Source) => format!("<?, {}, {}>", e.predicate, is.label),
            (_, Role::Target) => format!("<{}, {}, ?>", is.label, e.predicate),
        };
        ReasoningStep {
            step_index,
            edge: e.edge.clone(),
            edge_kind: e.edge.kind(),
            focus_node: self.vertices[focus].clone(),
            introduced_node: self.vertices[introduced].clone(),
            focus_role,
            predicate: e.predicate.clone(),
            sub_answer: fs.label.clone(),
            focus: fs,
            introduced: is,
            interval: e.interval,
            sub_question,
        }
    }

    /// Build the path for an explicit choice sequence: the first element is
    /// `(edge, v, u)` for the initial pair, later ones `(edge, q, w)`.
    fn build(
        &self,
        video_id: &str,
        choices: &[(usize, usize, usize)],
        requested_n: usize,
        seed: u64,
    ) -> ReasoningPath {
        let mut steps = Vec::with_capacity(choices.len());
        let mut q_history = Vec::new();
        let mut a_history = Vec::new();
        let mut answers: Vec<VertexRef> = Vec::new();
        for (i, &(edge, focus, introduced)) in choices.iter().enumerate() {
            steps.push(self.step(i + 1, edge, focus, introduced));
            answers.push(self.vertices[focus].clone());
            q_history.push(vec![self.vertices[introduced].clone()]);
            a_history.push(answers.clone());
        }
        ReasoningPath {
            video_id: video_id.to_string(),
            achieved_n: steps.len(),
            early_terminated: steps.len() < requested_n,
            steps,
            q_history,
            a_history,
            temporal_context: None,
            requested_n,
            seed,
        }
    }

    /// Rebuild a path from its signature, checking it walks this graph.
    pub fn replay(
        &self,
        video_id: &str,
        signature: &PathSignature,
        requested_n: usize,
        seed: u64,
    ) -> Result<ReasoningPath, SampleError> {
        let mut choices = Vec::with_capacity(signature.len());
        let mut visited = vec![false; self.vertices.len()];
        let mut frontier = None;
        for (i, (edge, focus, introduced)) in signature.iter().enumerate() {
            let bad = || SampleError::BadSignature(format!("step {}", i + 1));
            let f = *self.lookup.get(focus).ok_or_else(bad)?;
            let w = *self.lookup.get(introduced).ok_or_else(bad)?;
            let e = self
                .edges
                .iter()
                .position(|x| &x.edge == edge)
                .ok_or_else(bad)?;
            let ends = (self.edges[e].source, self.edges[e].target);
            if ends != (f, w) && ends != (w, f) {
                return Err(bad());
            }
            if i == 0 {
                visited[f] = true;
            } else if frontier != Some(f) {
                return Err(bad());
            }
            if visited[w] {
                return Err(bad());
            }
            visited[w] = true;
            frontier = Some(w);
            choices.push((e, f, w));
        }
        Ok(self.build(video_id, &choices, requested_n, seed))
    }
}

/// Reusable sampler over one validated graph.
pub struct PathSampler<'a> {
    stsg: &'a SpatioTemporalSceneGraph,
    index: GraphIndex,
}

impl<'a> PathSampler<'a> {
    pub fn new(stsg: &'a SpatioTemporalSceneGraph) -> Result<Self, SampleError> {
        let report = validate(stsg);
        if !report.is_valid() {
            return Err(SampleError::Invalid(report));
        }
        Ok(Self {
            stsg,
            index: GraphIndex::new(stsg),
        })
    }

    pub fn index(&self) -> &GraphIndex {
        &self.index
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<ReasoningPath, SampleError> {
        if n == 0 {
            return Err(SampleError::ZeroSteps);
        }
        let idx = &self.index;
        if idx.edges.is_empty() {
            return Err(SampleError::NoEdges);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = idx.max_length(n);
        let mut visited = vec![false; idx.vertices.len()];

        let feasible_inits: Vec<(usize, usize)> = idx
            .init_pairs()
            .into_iter()
            .filter(|&(u, v)| {
                visited[u] = true;
                visited[v] = true;
                let ok = idx.reaches(u, &mut visited, target - 1);
                visited[u] = false;
                visited[v] = false;
                ok
            })
            .collect();
        let (u, v) = feasible_inits[rng.random_range(0..feasible_inits.len())];
        let between = idx.edges_between(u, v);
        let edge = between[rng.random_range(0..between.len())];
        visited[u] = true;
        visited[v] = true;
        let mut choices = vec![(edge, v, u)];
        let mut q = u;
        while choices.len() < target {
            let remaining = target - choices.len() - 1;
            let candidates: Vec<usize> = idx
                .open_neighbors(q, &visited)
                .into_iter()
                .filter(|&w| {
                    visited[w] = true;
                    let ok = idx.reaches(w, &mut visited, remaining);
                    visited[w] = false;
                    ok
                })
                .collect();
            let w = candidates[rng.random_range(0..candidates.len())];
            let between = idx.edges_between(q, w);
            let edge = between[rng.random_range(0..between.len())];
            visited[w] = true;
            choices.push((edge, q, w));
            q = w;
        }
        Ok(idx.build(&self.stsg.video_id, &choices, n, seed))
    }
}

/// Sample one reasoning path of up to `n` steps.
pub fn sample_path(
    stsg: &SpatioTemporalSceneGraph,
    n: usize,
    seed: u64,
) -> Result<ReasoningPath, SampleError> {
    PathSampler::new(stsg)?.sample(n, seed)
}

fn step_clip(step: &ReasoningStep) -> &str {
    match &step.edge {
        EdgeRef::Relation { clip_id, .. }
        | EdgeRef::Attribute { clip_id, .. }
        | EdgeRef::Motion { clip_id, .. } => clip_id,
        EdgeRef::Reference { .. } => &step.focus.clip_id,
    }
}

/// Ground the path in the event of the clip owning its initial edge.
pub fn contextualize(
    path: &ReasoningPath,
    stsg: &SpatioTemporalSceneGraph,
) -> Outcome<ReasoningPath> {
    let mut out = Outcome::new(path.clone());
    let Some(first) = path.steps.first() else {
        out.warnings
            .push(Warning::new(&path.video_id, "eventless", "empty path"));
        return out;
    };
    let clip_id = step_clip(first);
    match stsg.clip(clip_id).and_then(|c| c.event.as_ref()) {
        Some(event) => {
            out.value.temporal_context = Some(TemporalContext {
                description: event.description.clone(),
                interval: event.interval,
            })
        }
        None => out.warnings.push(Warning::new(
            clip_id,
            "eventless",
            "no event to contextualize with",
        )),
    }
    out
}
